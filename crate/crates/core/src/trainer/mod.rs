//! Joint training with `L = L_CE + L_MC`: batched forward through encoder,
//! head and object parser, backward through both branches, center update,
//! SGD step, per-epoch evaluation and checkpointing.

mod checkpoint;
mod config;
mod run;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::{DataSource, LossMode, TrainConfig};
pub use run::{csv_row, metrics_csv, train, train_in_memory, RunDir, CSV_HEADER};

use crate::data::{generate_split, load_manifest, AnnotatedImage, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::losses::{
    bce_loss, center_delta, col_only_grad_z, col_only_loss, mc_loss, mc_loss_grad_z, normalize_backward, normalize_features,
    softmax_cross_entropy,
    BatchFeatures, CenterBank, FeatureGrads, LossBreakdown,
};
use crate::metrics::{MetricReport, PredictionSet};
use crate::model::{
    backward, classify, encode, head_logits, head_logits_backward, sgd_step, EncoderCache, HeadCache, ModelParams,
    ModelShape, OptimizerState,
};
use crate::numeric::{sigmoid, squared_l2, RngState, Stream};
use crate::parser::{disentangle, disentangle_backward, ClassFeatureSet};
use crate::scalar::Scalar;

/// Training and validation data of a run.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
}

impl Datasets {
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let (train, val) = match &config.data {
            DataSource::Synthetic(p) => {
                let rng = RngState::new(config.seed);
                (generate_split(p, Split::Train, rng)?, generate_split(p, Split::Val, rng)?)
            }
            DataSource::Manifest { train, val } => (load_manifest(train)?, load_manifest(val)?),
        };
        if train.categories != val.categories {
            return Err(Error::Config("train and val manifests disagree on categories".into()));
        }
        let out = Self { train, val };
        out.image_size()?;
        Ok(out)
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_categories()
    }

    /// Common square image side; every sample must carry pixels.
    pub fn image_size(&self) -> Result<usize> {
        let first = self
            .train
            .samples
            .first()
            .ok_or_else(|| Error::Config("training split is empty".into()))?;
        if self.val.samples.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        let n = first.width;
        for s in self.train.samples.iter().chain(&self.val.samples) {
            if s.width != n || s.height != n {
                return Err(Error::Config(format!(
                    "{}: {}x{} differs from {n}x{n}",
                    s.file_name, s.width, s.height
                )));
            }
            if s.pixels.is_none() {
                return Err(Error::Config(format!("{}: no pixel data", s.file_name)));
            }
        }
        Ok(n as usize)
    }
}

pub fn model_shape(config: &TrainConfig, image_size: usize, classes: usize) -> Result<ModelShape> {
    let shape = ModelShape {
        channels: config.channels,
        grid: config.grid,
        image_size,
        mixing_layers: config.mixing_layers,
        classes,
    };
    shape.validate()?;
    Ok(shape)
}

/// Discriminability diagnostics over a labelled split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean distance from each class feature to its own center.
    pub intra: f64,
    /// Mean distance between distinct centers.
    pub inter: f64,
    /// `inter / intra`, or 0 when every feature sits on its center.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Zero-based index of the epoch just completed.
    pub epoch: usize,
    pub lr: f64,
    pub l_ce: f64,
    pub l_mc: f64,
    pub total: f64,
    pub eval: MetricReport,
    pub diagnostics: Diagnostics,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState<T> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub centers: CenterBank<T>,
    pub optimizer: OptimizerState<T>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

impl<T: Scalar> RunState<T> {
    pub fn init(config: &TrainConfig, shape: ModelShape) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(config.seed).stream(Stream::Init);
        let params = ModelParams::init(shape, &mut rng)?;
        let centers = CenterBank::init_uniform(shape.classes, shape.channels, T::lit(config.center_alpha), &mut rng);
        Ok(Self {
            config: config.clone(),
            params,
            centers,
            optimizer: OptimizerState::new(shape, T::lit(config.momentum), T::lit(config.weight_decay)),
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn shape(&self) -> ModelShape {
        self.params.shape
    }
}

struct Forward<T> {
    enc: EncoderCache<T>,
    head: HeadCache<T>,
    logits: Vec<T>,
    parts: ClassFeatureSet<T>,
}

fn pixels(img: &AnnotatedImage) -> Result<&[f32]> {
    img.pixels
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{}: no pixel data", img.file_name)))
}

fn forward<T: Scalar>(params: &ModelParams<T>, img: &AnnotatedImage) -> Result<Forward<T>> {
    let (x, enc) = encode(pixels(img)?, params)?;
    let (logits, head) = classify(&x, &params.head)?;
    let parts = disentangle(&x, &img.boxes, img.height, img.width)?;
    Ok(Forward {
        enc,
        head,
        logits,
        parts,
    })
}

/// Per-sample gradients of the feature term plus the head gradient
/// contributed by the multiclass mode.
struct FeatureTerm<T> {
    value: T,
    dz: Option<FeatureGrads<T>>,
    head_grads: Option<ModelParams<T>>,
}

fn feature_term<T: Scalar>(
    mode: LossMode,
    beta: T,
    params: &ModelParams<T>,
    bank: &CenterBank<T>,
    batch: &BatchFeatures<T>,
) -> Result<FeatureTerm<T>> {
    Ok(match mode {
        LossMode::Mcl => FeatureTerm {
            value: mc_loss(batch, bank, beta)?,
            dz: Some(mc_loss_grad_z(batch, bank, beta)?),
            head_grads: None,
        },
        LossMode::ClOnly => FeatureTerm {
            value: mc_loss(batch, bank, T::zero())?,
            dz: Some(mc_loss_grad_z(batch, bank, T::zero())?),
            head_grads: None,
        },
        LossMode::ColOnly => FeatureTerm {
            value: col_only_loss(batch, bank, beta)?,
            dz: Some(col_only_grad_z(batch, bank, beta)?),
            head_grads: None,
        },
        LossMode::BceOnly => FeatureTerm {
            value: T::zero(),
            dz: None,
            head_grads: None,
        },
        LossMode::MulticlassCe => {
            let inv_n = T::one() / T::of_usize(batch.pair_count());
            let mut grads = ModelParams::zeros(params.shape);
            let mut value = T::zero();
            let mut dz = Vec::with_capacity(batch.samples.len());
            for sample in &batch.samples {
                let mut per = BTreeMap::new();
                for (&j, z) in sample {
                    let logits = head_logits(&params.head, z)?;
                    let (l, g) = softmax_cross_entropy(&logits, j)?;
                    value = value + l * inv_n;
                    let g: Vec<T> = g.into_iter().map(|v| v * inv_n).collect();
                    per.insert(j, head_logits_backward(&params.head, z, &g, &mut grads));
                }
                dz.push(per);
            }
            FeatureTerm {
                value,
                dz: Some(dz),
                head_grads: Some(grads),
            }
        }
    })
}

fn check_batch(batch: &[&AnnotatedImage], classes: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    batch.iter().try_for_each(|img| img.validate(classes))
}

/// Batch-mean BCE and its per-sample logit gradients.
fn ce_term<T: Scalar>(fwd: &[Forward<T>], batch: &[&AnnotatedImage]) -> Result<(T, Vec<Vec<T>>)> {
    let inv_r = T::one() / T::of_usize(batch.len());
    let mut l_ce = T::zero();
    let mut dlogits = Vec::with_capacity(batch.len());
    for (f, img) in fwd.iter().zip(batch) {
        let (l, g) = bce_loss(&f.logits, &img.labels)?;
        l_ce = l_ce + l * inv_r;
        dlogits.push(g.into_iter().map(|v| v * inv_r).collect::<Vec<T>>());
    }
    Ok((l_ce, dlogits))
}

/// Which feature term joins the cross-entropy, and how its inputs are formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective<T> {
    pub mode: LossMode,
    pub beta: T,
    /// Feed `z / ‖z‖` rather than `z` to the center-based terms.
    pub normalize: bool,
}

impl<T: Scalar> Objective<T> {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            mode: config.loss_mode,
            beta: T::lit(config.beta),
            normalize: config.normalize_features,
        }
    }

    fn normalizes(&self) -> bool {
        self.normalize && self.mode.uses_centers()
    }

    /// Features as the center-based terms and the center update see them.
    pub fn loss_features(&self, raw: BatchFeatures<T>) -> BatchFeatures<T> {
        if self.normalizes() {
            normalize_features(&raw)
        } else {
            raw
        }
    }
}

/// `L_CE + L_MC` (or the configured feature term) of one batch, forward only.
pub fn batch_objective<T: Scalar>(
    params: &ModelParams<T>,
    centers: &CenterBank<T>,
    batch: &[&AnnotatedImage],
    objective: Objective<T>,
) -> Result<T> {
    check_batch(batch, params.shape.classes)?;
    let fwd: Vec<Forward<T>> = batch.iter().map(|img| forward(params, img)).collect::<Result<_>>()?;
    let (l_ce, _) = ce_term(&fwd, batch)?;
    let features = objective.loss_features(BatchFeatures::new(fwd.iter().map(|f| f.parts.features()).collect()));
    Ok(l_ce + feature_term(objective.mode, objective.beta, params, centers, &features)?.value)
}

/// Loss of one batch, its gradient with respect to θ and φ, and the class
/// features it was computed from.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub breakdown: LossBreakdown,
    pub grads: ModelParams<T>,
    pub features: BatchFeatures<T>,
}

pub fn batch_gradients<T: Scalar>(
    params: &ModelParams<T>,
    centers: &CenterBank<T>,
    batch: &[&AnnotatedImage],
    objective: Objective<T>,
) -> Result<BatchGradients<T>> {
    check_batch(batch, params.shape.classes)?;
    let Objective { mode, beta, .. } = objective;
    let fwd: Vec<Forward<T>> = batch.par_iter().map(|img| forward(params, img)).collect::<Result<_>>()?;
    let (l_ce, dlogits) = ce_term(&fwd, batch)?;
    let raw = BatchFeatures::new(fwd.iter().map(|f| f.parts.features()).collect());
    let features = objective.loss_features(raw.clone());
    let mut term = feature_term(mode, beta, params, centers, &features)?;
    if objective.normalizes() {
        term.dz = term.dz.map(|dz| normalize_backward(&raw, &dz)).transpose()?;
    }
    let breakdown = crate::losses::total_loss(l_ce, term.value).map_err(|e| match e {
        Error::Divergence { reason, breakdown } => Error::Divergence {
            reason,
            breakdown: breakdown.map(|mut b| {
                b.beta = beta.as_f64();
                b
            }),
        },
        other => other,
    })?;
    let breakdown = LossBreakdown {
        beta: beta.as_f64(),
        ..breakdown
    };

    let per_sample: Vec<ModelParams<T>> = fwd
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let dx = match &term.dz {
                Some(dz) => Some(disentangle_backward(&f.parts, &dz[i])?),
                None => None,
            };
            let mut g = ModelParams::zeros(params.shape);
            backward(params, &f.enc, &f.head, &dlogits[i], dx.as_ref(), &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grads = ModelParams::zeros(params.shape);
    for g in &per_sample {
        grads.accumulate(g);
    }
    if let Some(h) = &term.head_grads {
        grads.accumulate(h);
    }
    Ok(BatchGradients {
        breakdown,
        grads,
        features,
    })
}

/// One optimisation step on `batch` at learning rate `lr`.
///
/// Order: forward, disentangle, losses, backward through both branches,
/// center update from this step's features, SGD step on θ and φ.
pub fn train_step<T: Scalar>(state: &mut RunState<T>, batch: &[&AnnotatedImage], lr: T) -> Result<LossBreakdown> {
    let objective = Objective::from_config(&state.config);
    let out = batch_gradients(&state.params, &state.centers, batch, objective)?;
    if objective.mode.uses_centers() {
        let delta = center_delta(&out.features, &state.centers)?;
        state.centers.apply_update(&delta)?;
    }
    let breakdown = out.breakdown;
    sgd_step(&mut state.params, &out.grads, &mut state.optimizer, lr).map_err(|e| match e {
        Error::Divergence { reason, .. } => Error::diverged(reason, Some(breakdown)),
        other => other,
    })?;
    Ok(breakdown)
}

/// Mean losses of one pass over the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub l_ce: f64,
    pub l_mc: f64,
    pub total: f64,
}

/// Shuffles with the epoch's own stream and runs every batch, the last one
/// possibly short.
pub fn run_epoch<T: Scalar>(state: &mut RunState<T>, train: &[AnnotatedImage]) -> Result<EpochLosses> {
    let epoch = state.epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut RngState::new(state.config.seed).stream(Stream::Shuffle { epoch: epoch as u64 }));
    let lr = T::lit(state.config.lr_at(epoch));
    let mut sums = (0.0, 0.0, 0.0);
    let mut steps = 0usize;
    for chunk in order.chunks(state.config.batch_size) {
        let batch: Vec<&AnnotatedImage> = chunk.iter().map(|&i| &train[i]).collect();
        let b = train_step(state, &batch, lr)?;
        sums.0 += b.l_ce;
        sums.1 += b.l_mc;
        sums.2 += b.total;
        steps += 1;
    }
    let n = steps.max(1) as f64;
    Ok(EpochLosses {
        l_ce: sums.0 / n,
        l_mc: sums.1 / n,
        total: sums.2 / n,
    })
}

/// `σ(h(f(I)))` for every image; no masks or boxes involved.
pub fn predict<T: Scalar>(params: &ModelParams<T>, samples: &[AnnotatedImage]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|img| {
            let (x, _) = encode(pixels(img)?, params)?;
            let (logits, _) = classify(&x, &params.head)?;
            Ok(logits.into_iter().map(|p| sigmoid(p).as_f64()).collect())
        })
        .collect()
}

pub fn evaluate<T: Scalar>(params: &ModelParams<T>, samples: &[AnnotatedImage]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Domain("evaluation split is empty".into()));
    }
    let scores = predict(params, samples)?;
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::diverged("non-finite score during evaluation", None));
    }
    let labels: Vec<Vec<usize>> = samples.iter().map(|s| s.labels.clone()).collect();
    MetricReport::compute(&PredictionSet::from_labels(scores, &labels)?)
}

/// Intra-class scatter of the parser features around their centers versus
/// the spread of the centers themselves.
pub fn diagnostics<T: Scalar>(
    params: &ModelParams<T>,
    centers: &CenterBank<T>,
    samples: &[AnnotatedImage],
    normalize: bool,
) -> Result<Diagnostics> {
    let per: Vec<(f64, usize)> = samples
        .par_iter()
        .map(|img| {
            let (x, _) = encode(pixels(img)?, params)?;
            let parts: ClassFeatureSet<T> = disentangle(&x, &img.boxes, img.height, img.width)?;
            let mut sum = 0.0;
            let feats = BatchFeatures::new(vec![parts.features()]);
            let feats = if normalize { normalize_features(&feats) } else { feats };
            for (&j, z) in &feats.samples[0] {
                sum += squared_l2(z.as_slice(), centers.centers[j].as_slice())?.as_f64().sqrt();
            }
            Ok((sum, parts.len()))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = per.iter().fold((0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
    let intra = if n == 0 { 0.0 } else { sum / n as f64 };

    let c = &centers.centers;
    let mut inter_sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..c.len() {
        for b in a + 1..c.len() {
            inter_sum += squared_l2(c[a].as_slice(), c[b].as_slice())?.as_f64().sqrt();
            pairs += 1;
        }
    }
    let inter = if pairs == 0 { 0.0 } else { inter_sum / pairs as f64 };
    let ratio = if intra > 0.0 { inter / intra } else { 0.0 };
    Ok(Diagnostics { intra, inter, ratio })
}

/// Evaluation log for the epoch just completed.
pub fn epoch_log<T: Scalar>(state: &RunState<T>, losses: EpochLosses, val: &[AnnotatedImage]) -> Result<EpochLog> {
    let epoch = state.epoch.checked_sub(1).ok_or_else(|| Error::Contract("no epoch completed".into()))?;
    Ok(EpochLog {
        epoch,
        lr: state.config.lr_at(epoch),
        l_ce: losses.l_ce,
        l_mc: losses.l_mc,
        total: losses.total,
        eval: evaluate(&state.params, val)?,
        diagnostics: diagnostics(
            &state.params,
            &state.centers,
            val,
            Objective::<T>::from_config(&state.config).normalizes(),
        )?,
    })
}

#[cfg(test)]
mod tests;
