use std::path::Path;

use super::*;
use crate::data::{BoundingBox, SyntheticParams};
use crate::numeric::FeatureVector;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        seed: 5,
        data: DataSource::Synthetic(SyntheticParams {
            classes: 3,
            image_size: 16,
            grid_size: 4,
            train: 12,
            val: 6,
            test: 0,
            min_objects: 1,
            max_objects: 2,
            min_shape: 4,
            max_shape: 8,
            decoys: 1,
        }),
        channels: 4,
        grid: 4,
        mixing_layers: 1,
        batch_size: 4,
        epochs: 3,
        checkpoint_every: 1,
        ..TrainConfig::default()
    }
}

fn setup(cfg: &TrainConfig) -> (Datasets, RunState<f64>) {
    let data = Datasets::load(cfg).unwrap();
    let shape = model_shape(cfg, data.image_size().unwrap(), data.num_classes()).unwrap();
    (data, RunState::init(cfg, shape).unwrap())
}

fn batch(data: &Datasets) -> Vec<&AnnotatedImage> {
    data.train.samples.iter().take(4).collect()
}

#[test]
fn bce_only_keeps_centers() {
    let cfg = TrainConfig {
        loss_mode: LossMode::BceOnly,
        ..tiny_config()
    };
    let (data, mut state) = setup(&cfg);
    let before = state.centers.clone();
    let b = train_step(&mut state, &batch(&data), 0.01).unwrap();
    assert_eq!(b.l_mc, 0.0);
    assert_eq!(state.centers, before);
}

#[test]
fn frozen_step_changes_nothing() {
    let cfg = TrainConfig {
        center_alpha: 0.0,
        ..tiny_config()
    };
    let (data, mut state) = setup(&cfg);
    let before = state.clone();
    let b = train_step(&mut state, &batch(&data), 0.0).unwrap();
    assert!(b.total.is_finite());
    assert_eq!(state.params, before.params);
    assert_eq!(state.centers, before.centers);
}

#[test]
fn single_step_trace() {
    // 1 image, 2 classes, C=2, S=2, one pixel per cell, no mixing layer
    let cfg = TrainConfig {
        data: DataSource::Manifest {
            train: "unused".into(),
            val: "unused".into(),
        },
        channels: 2,
        grid: 2,
        mixing_layers: 0,
        beta: 2.0,
        normalize_features: false,
        ..TrainConfig::default()
    };
    let shape = model_shape(&cfg, 2, 2).unwrap();
    let mut state = RunState::<f64>::init(&cfg, shape).unwrap();
    let we = [[0.5, -0.2, 0.3], [0.1, 0.4, -0.3]];
    let be = [0.05, 0.02];
    let wh = [[0.7, -0.4], [0.2, 0.9]];
    let bh = [0.1, -0.1];
    let centers = [[0.3, 0.1], [0.2, 0.4]];
    state.params.encoder.embed.weight = we.concat();
    state.params.encoder.embed.bias = be.to_vec();
    state.params.head.linear.weight = wh.concat();
    state.params.head.linear.bias = bh.to_vec();
    state.centers.centers = centers.iter().map(|c| FeatureVector(c.to_vec())).collect();
    let before = state.clone();

    let pix: [[f64; 3]; 4] = [[0.9, 0.1, 0.2], [0.3, 0.8, 0.1], [0.2, 0.3, 0.7], [0.6, 0.5, 0.4]];
    let img = AnnotatedImage::from_boxes(
        "t",
        2,
        2,
        vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0, 0), BoundingBox::new(1.0, 1.0, 1.0, 1.0, 1)],
    )
    .with_pixels(pix.iter().flatten().map(|&v| v as f32).collect());
    let lr = 0.01;
    let b = train_step(&mut state, &[&img], lr).unwrap();

    let pix: Vec<[f64; 3]> = pix.iter().map(|p| p.map(|v| v as f32 as f64)).collect();
    let pre: Vec<[f64; 4]> = (0..2)
        .map(|ch| {
            let mut out = [0.0; 4];
            for cell in 0..4 {
                out[cell] = be[ch] + (0..3).map(|k| we[ch][k] * pix[cell][k]).sum::<f64>();
            }
            out
        })
        .collect();
    let x: Vec<[f64; 4]> = pre.iter().map(|p| p.map(|v| v.max(0.0))).collect();
    let argmax = |ch: usize, cells: &[usize]| {
        let mut best = cells[0];
        for &c in cells {
            if x[ch][c] > x[ch][best] {
                best = c;
            }
        }
        best
    };
    let head_arg: Vec<usize> = (0..2).map(|ch| argmax(ch, &[0, 1, 2, 3])).collect();
    let pooled: Vec<f64> = (0..2).map(|ch| x[ch][head_arg[ch]]).collect();
    let logits: Vec<f64> = (0..2).map(|k| bh[k] + wh[k][0] * pooled[0] + wh[k][1] * pooled[1]).collect();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let g: Vec<f64> = logits.iter().map(|&p| sig(p) - 1.0).collect();
    let l_ce: f64 = logits.iter().map(|&p| (1.0 + (-p).exp()).ln()).sum();

    // class 0 owns every cell but (1,1); class 1 every cell but (0,0)
    let cells = [[0usize, 1, 2], [1, 2, 3]];
    let zarg: Vec<Vec<usize>> = (0..2).map(|j| (0..2).map(|ch| argmax(ch, &cells[j])).collect()).collect();
    let z: Vec<Vec<f64>> = (0..2).map(|j| (0..2).map(|ch| x[ch][zarg[j][ch]]).collect()).collect();
    let beta = 2.0;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    let l_mc = (sq(&z[0], &centers[0]) - beta * sq(&z[1], &centers[0]) + sq(&z[1], &centers[1])
        - beta * sq(&z[0], &centers[1]))
        / 4.0;
    assert!((b.l_ce - l_ce).abs() < 1e-14);
    assert!((b.l_mc - l_mc).abs() < 1e-14);

    let dz: Vec<Vec<f64>> = (0..2)
        .map(|j| {
            let o = 1 - j;
            (0..2)
                .map(|ch| 0.5 * ((z[j][ch] - centers[j][ch]) - beta * (z[j][ch] - centers[o][ch])))
                .collect()
        })
        .collect();
    let mut dx = vec![[0.0; 4]; 2];
    for ch in 0..2 {
        dx[ch][head_arg[ch]] += g[0] * wh[0][ch] + g[1] * wh[1][ch];
        for j in 0..2 {
            dx[ch][zarg[j][ch]] += dz[j][ch];
        }
    }
    let wd = 1e-4;
    let step = |theta: f64, grad: f64| theta - lr * (grad + wd * theta);
    for ch in 0..2 {
        let mut db = 0.0;
        let mut dw = [0.0; 3];
        for cell in 0..4 {
            if pre[ch][cell] > 0.0 {
                db += dx[ch][cell];
                for k in 0..3 {
                    dw[k] += dx[ch][cell] * pix[cell][k];
                }
            }
        }
        assert!((state.params.encoder.embed.bias[ch] - step(be[ch], db)).abs() < 1e-15);
        for k in 0..3 {
            assert!((state.params.encoder.embed.weight[ch * 3 + k] - step(we[ch][k], dw[k])).abs() < 1e-15);
        }
    }
    for k in 0..2 {
        assert!((state.params.head.linear.bias[k] - step(bh[k], g[k])).abs() < 1e-15);
        for ch in 0..2 {
            let expect = step(wh[k][ch], g[k] * pooled[ch]);
            assert!((state.params.head.linear.weight[k * 2 + ch] - expect).abs() < 1e-15);
        }
    }
    for j in 0..2 {
        for ch in 0..2 {
            let delta = (centers[j][ch] - z[j][ch]) / 2.0;
            let expect = centers[j][ch] - 0.5 * delta;
            assert!((state.centers.centers[j].0[ch] - expect).abs() < 1e-15);
        }
    }
    assert_ne!(state.params, before.params);
}

#[test]
fn beta_zero_mcl_equals_cl_only() {
    let base = TrainConfig {
        beta: 0.0,
        epochs: 2,
        ..tiny_config()
    };
    let (data, _) = setup(&base);
    let a: RunState<f64> = train_in_memory(&base, &data, None).unwrap();
    let cl = TrainConfig {
        loss_mode: LossMode::ClOnly,
        ..base.clone()
    };
    let b: RunState<f64> = train_in_memory(&cl, &data, None).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.centers, b.centers);
    assert_eq!(a.history, b.history);
}

#[test]
fn deterministic_replay_and_resume() {
    let cfg = tiny_config();
    let (data, _) = setup(&cfg);
    let a: RunState<f64> = train_in_memory(&cfg, &data, None).unwrap();
    let b: RunState<f64> = train_in_memory(&cfg, &data, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.history.len(), 3);

    let short = TrainConfig { epochs: 1, ..cfg.clone() };
    let mid: RunState<f64> = train_in_memory(&short, &data, None).unwrap();
    let bytes = write_checkpoint(&mid).unwrap();
    let mid = read_checkpoint::<f64>(&bytes, Path::new("mem")).unwrap();
    let resumed = train_in_memory(&cfg, &data, Some(mid)).unwrap();
    assert_eq!(resumed, a);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = tiny_config();
    let (data, mut state) = setup(&cfg);
    train_step(&mut state, &batch(&data), 0.01).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ckpt");
    save_checkpoint(&state, &p).unwrap();
    assert_eq!(load_checkpoint::<f64>(&p).unwrap(), state);

    let mut bytes = std::fs::read(&p).unwrap();
    bytes[40] ^= 0x55;
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&p), Err(Error::Checksum { .. })));
    bytes.truncate(10);
    std::fs::write(&p, &bytes).unwrap();
    assert!(load_checkpoint::<f64>(&p).is_err());
}

#[test]
fn f32_checkpoint_round_trip() {
    let cfg = tiny_config();
    let (data, _) = setup(&cfg);
    let shape = model_shape(&cfg, data.image_size().unwrap(), data.num_classes()).unwrap();
    let mut state = RunState::<f32>::init(&cfg, shape).unwrap();
    train_step(&mut state, &batch(&data), 0.01).unwrap();
    let bytes = write_checkpoint(&state).unwrap();
    assert_eq!(read_checkpoint::<f32>(&bytes, Path::new("mem")).unwrap(), state);
}

#[test]
fn zero_model_scores_one_half() {
    let cfg = tiny_config();
    let (data, state) = setup(&cfg);
    let zero = ModelParams::<f64>::zeros(state.shape());
    let scores = predict(&zero, &data.val.samples).unwrap();
    assert!(scores.iter().flatten().all(|&s| s == 0.5));
    let r = evaluate(&zero, &data.val.samples).unwrap();
    // every class predicted everywhere
    assert_eq!(r.all.or, 1.0);
}

#[test]
fn evaluation_matches_metrics_module() {
    let cfg = tiny_config();
    let (data, state) = setup(&cfg);
    let r = evaluate(&state.params, &data.val.samples).unwrap();
    let scores = predict(&state.params, &data.val.samples).unwrap();
    let labels: Vec<Vec<usize>> = data.val.samples.iter().map(|s| s.labels.clone()).collect();
    let oracle = MetricReport::compute(&PredictionSet::from_labels(scores, &labels).unwrap()).unwrap();
    assert_eq!(r, oracle);
    assert!(evaluate(&state.params, &[]).is_err());
}

#[test]
fn memorizes_two_samples() {
    let mut cfg = tiny_config();
    if let DataSource::Synthetic(p) = &mut cfg.data {
        p.train = 2;
        p.val = 1;
    }
    cfg.batch_size = 2;
    cfg.epochs = 150;
    cfg.base_lr = 0.05;
    cfg.loss_mode = LossMode::BceOnly;
    let (mut data, _) = setup(&cfg);
    data.val.samples = data.train.samples.clone();
    let s: RunState<f64> = train_in_memory(&cfg, &data, None).unwrap();
    assert_eq!(s.history.last().unwrap().eval.map, 1.0);
}

#[test]
fn multiclass_mode_keeps_centers_and_trains() {
    let cfg = TrainConfig {
        loss_mode: LossMode::MulticlassCe,
        ..tiny_config()
    };
    let (data, mut state) = setup(&cfg);
    let before = state.centers.clone();
    let b = train_step(&mut state, &batch(&data), 0.01).unwrap();
    assert!(b.l_mc > 0.0);
    assert_eq!(state.centers, before);
}

#[test]
fn run_dir_layout() {
    let cfg = tiny_config();
    let (data, _) = setup(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = RunDir::create(dir.path()).unwrap();
    let s: RunState<f64> = train(&cfg, &data, None, &out).unwrap();
    assert!(out.missing_artifacts().is_empty());
    assert!(out.epoch_checkpoint(3).is_file());
    let csv = std::fs::read_to_string(out.path(RunDir::METRICS_CSV)).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(out.read_history().unwrap(), s.history);
}

#[test]
fn resume_rejects_other_config() {
    let cfg = tiny_config();
    let (data, state) = setup(&cfg);
    let other = TrainConfig { beta: 1.0, ..cfg };
    assert!(matches!(
        train_in_memory(&other, &data, Some(state)),
        Err(Error::Config(_))
    ));
}
