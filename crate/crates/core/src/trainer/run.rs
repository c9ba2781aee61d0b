use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{epoch_log, run_epoch, save_checkpoint, Datasets, EpochLog, RunState, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::METRIC_COLUMNS;
use crate::scalar::Scalar;

pub const CSV_HEADER: &str = "epoch,l_ce,l_mc,total,mAP,CP,CR,CF1,OP,OR,OF1,topk_CP,topk_CR,topk_CF1,topk_OP,topk_OR,topk_OF1,intra,inter,ratio";

/// Output directory of one run.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.json";
    pub const METRICS_CSV: &'static str = "metrics.csv";
    pub const METRICS_JSON: &'static str = "metrics.json";
    pub const BEST: &'static str = "best.ckpt";
    pub const LOG: &'static str = "log.txt";
    pub const CHECKPOINTS: &'static str = "checkpoints";
    pub const LAST_GOOD: &'static str = "last_good.ckpt";

    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let ck = root.join(Self::CHECKPOINTS);
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        Ok(Self { root })
    }

    /// Opens an existing directory without creating anything.
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn epoch_checkpoint(&self, epochs_done: usize) -> PathBuf {
        self.root.join(Self::CHECKPOINTS).join(format!("epoch_{epochs_done}.ckpt"))
    }

    /// Artifacts a finished run must contain but this directory lacks.
    pub fn missing_artifacts(&self) -> Vec<&'static str> {
        [Self::CONFIG, Self::METRICS_CSV, Self::METRICS_JSON, Self::BEST, Self::LOG]
            .into_iter()
            .filter(|n| !self.path(n).is_file())
            .collect()
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    fn log(&self, line: &str) -> Result<()> {
        let p = self.path(Self::LOG);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&p, e))
    }

    pub fn write_history(&self, history: &[EpochLog]) -> Result<()> {
        self.write(Self::METRICS_CSV, metrics_csv(history).as_bytes())?;
        self.write(Self::METRICS_JSON, &serde_json::to_vec_pretty(history)?)
    }

    pub fn read_history(&self) -> Result<Vec<EpochLog>> {
        let p = self.path(Self::METRICS_JSON);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn csv_row(log: &EpochLog) -> String {
    let mut row = format!("{},{},{},{}", log.epoch, log.l_ce, log.l_mc, log.total);
    for v in log.eval.values() {
        write!(row, ",{v}").expect("write to String");
    }
    let d = log.diagnostics;
    write!(row, ",{},{},{}", d.intra, d.inter, d.ratio).expect("write to String");
    row
}

pub fn metrics_csv(history: &[EpochLog]) -> String {
    debug_assert_eq!(CSV_HEADER.split(',').count(), 7 + METRIC_COLUMNS.len());
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for log in history {
        s.push_str(&csv_row(log));
        s.push('\n');
    }
    s
}

fn check_resumable(config: &TrainConfig, resumed: &TrainConfig) -> Result<()> {
    let mut a = config.clone();
    a.epochs = resumed.epochs;
    a.checkpoint_every = resumed.checkpoint_every;
    if &a != resumed {
        return Err(Error::Config("resume checkpoint was trained with a different configuration".into()));
    }
    Ok(())
}

fn run<T: Scalar>(
    config: &TrainConfig,
    data: &Datasets,
    resume: Option<RunState<T>>,
    out: Option<&RunDir>,
) -> Result<RunState<T>> {
    config.validate()?;
    let shape = super::model_shape(config, data.image_size()?, data.num_classes())?;
    let mut state = match resume {
        Some(s) => {
            check_resumable(config, &s.config)?;
            if s.shape() != shape {
                return Err(Error::Config("resume checkpoint has a different model shape".into()));
            }
            RunState { config: config.clone(), ..s }
        }
        None => RunState::init(config, shape)?,
    };
    if let Some(dir) = out {
        dir.write(RunDir::CONFIG, &serde_json::to_vec_pretty(config)?)?;
        dir.write_history(&state.history)?;
    }
    let started = Instant::now();
    let mut best = state.history.iter().map(|l| l.eval.map).fold(f64::NEG_INFINITY, f64::max);

    while state.epoch < config.epochs {
        let last_good = out.map(|_| state.clone());
        let step = run_epoch(&mut state, &data.train.samples).and_then(|losses| {
            state.epoch += 1;
            epoch_log(&state, losses, &data.val.samples)
        });
        let log = match step {
            Ok(log) => log,
            Err(e) => {
                if let (Some(dir), Some(good)) = (out, last_good) {
                    let p = dir.root.join(RunDir::CHECKPOINTS).join(RunDir::LAST_GOOD);
                    save_checkpoint(&good, &p)?;
                    dir.log(&format!("aborted in epoch {}: {e}", good.epoch))?;
                }
                return Err(e);
            }
        };
        state.history.push(log.clone());
        if let Some(dir) = out {
            dir.write_history(&state.history)?;
            if config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0 {
                save_checkpoint(&state, &dir.epoch_checkpoint(state.epoch))?;
            }
            if log.eval.map > best {
                save_checkpoint(&state, &dir.path(RunDir::BEST))?;
            }
            dir.log(&format!(
                "[{:.1}s] epoch {} lr {} loss {:.5} (ce {:.5}, mc {:.5}) mAP {:.4} ratio {:.4}",
                started.elapsed().as_secs_f64(),
                log.epoch,
                log.lr,
                log.total,
                log.l_ce,
                log.l_mc,
                log.eval.map,
                log.diagnostics.ratio
            ))?;
        }
        best = best.max(log.eval.map);
    }
    Ok(state)
}

/// Trains to `config.epochs`, writing the run directory as it goes.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    data: &Datasets,
    resume: Option<RunState<T>>,
    out: &RunDir,
) -> Result<RunState<T>> {
    run(config, data, resume, Some(out))
}

/// Same loop with no filesystem output.
pub fn train_in_memory<T: Scalar>(
    config: &TrainConfig,
    data: &Datasets,
    resume: Option<RunState<T>>,
) -> Result<RunState<T>> {
    run(config, data, resume, None)
}
