//! Finite-difference verification of every hand-written backward pass.
//!
//! Each trial draws a small random instance and compares analytic gradients
//! with central differences for four components: the object parser, the
//! contrastive loss, the binary cross-entropy, and the full model under
//! `L_CE + L_MC`. Instances whose rectifiers or max-pools sit within `τ` of
//! a kink are redrawn, since the finite difference is meaningless there.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, BoundingBox};
use crate::error::{Error, Result};
use crate::losses::{bce_loss, mc_loss, mc_loss_grad_z, BatchFeatures, CenterBank};
use crate::model::{encode, ModelParams, ModelShape};
use crate::numeric::{fd_gradient, hadamard, FeatureVector, Grid, RngState, Stream};
use crate::parser::{disentangle, disentangle_backward};
use crate::trainer::{batch_gradients, batch_objective, LossMode, Objective};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Minimum distance from a rectifier or pooling kink.
pub const KINK_MARGIN: f64 = 1e-4;
const MAX_REDRAWS: usize = 10_000;

pub const MAX_CHANNELS: usize = 8;
pub const MAX_GRID: usize = 4;
pub const MAX_CLASSES: usize = 4;
pub const MAX_BATCH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Parser,
    McLoss,
    Bce,
    Model,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Parser, Component::McLoss, Component::Bce, Component::Model];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Parser => "parser",
            Component::McLoss => "mc_loss",
            Component::Bce => "bce",
            Component::Model => "model",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: Component,
    pub worst_rel_error: f64,
    pub worst_trial: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub trials: usize,
    pub tolerance: f64,
    /// Instances redrawn because they sat too close to a kink.
    pub redrawn: usize,
    pub components: Vec<ComponentResult>,
}

impl GradCheckReport {
    pub fn worst(&self, c: Component) -> f64 {
        self.components
            .iter()
            .find(|r| r.component == c)
            .map_or(f64::NAN, |r| r.worst_rel_error)
    }

    /// Every component strictly below the tolerance.
    pub fn passed(&self) -> bool {
        self.components.iter().all(|r| r.worst_rel_error < self.tolerance)
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// `max − second max` when the max is positive, else infinity.
fn pool_gap(values: &[f64]) -> f64 {
    let mut top = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in values {
        if v > top {
            second = top;
            top = v;
        } else if v > second {
            second = v;
        }
    }
    if top > 0.0 {
        top - second
    } else {
        f64::INFINITY
    }
}

fn grid_gap(x: &Grid<f64>) -> f64 {
    (0..x.channels()).map(|c| pool_gap(x.channel(c))).fold(f64::INFINITY, f64::min)
}

struct Instance {
    shape: ModelShape,
    params: ModelParams<f64>,
    centers: CenterBank<f64>,
    images: Vec<AnnotatedImage>,
    objective: Objective<f64>,
}

fn random_boxes(rng: &mut ChaCha8Rng, classes: usize, side: u32) -> Vec<BoundingBox> {
    let k = rng.gen_range(1..=classes);
    let mut labels: Vec<usize> = (0..classes).collect();
    for i in 0..k {
        let j = rng.gen_range(i..classes);
        labels.swap(i, j);
    }
    labels[..k]
        .iter()
        .map(|&label| {
            let w = rng.gen_range(1..=side);
            let h = rng.gen_range(1..=side);
            let x = rng.gen_range(0..=side - w);
            let y = rng.gen_range(0..=side - h);
            BoundingBox::new(x as f64, y as f64, w as f64, h as f64, label)
        })
        .collect()
}

fn draw_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let grid = rng.gen_range(2..=MAX_GRID);
    let shape = ModelShape {
        channels: rng.gen_range(2..=MAX_CHANNELS),
        grid,
        image_size: 2 * grid,
        mixing_layers: rng.gen_range(0..=2),
        classes: rng.gen_range(2..=MAX_CLASSES),
    };
    let mut params = ModelParams::init(shape, rng)?;
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let centers = CenterBank::new(
        (0..shape.classes)
            .map(|_| FeatureVector((0..shape.channels).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect(),
        0.5,
    )?;
    let side = shape.image_size as u32;
    let images = (0..rng.gen_range(1..=MAX_BATCH))
        .map(|i| {
            let px = (0..shape.image_size * shape.image_size * 3).map(|_| rng.gen::<f32>()).collect();
            AnnotatedImage::from_boxes(format!("gc_{i}"), side, side, random_boxes(rng, shape.classes, side))
                .with_pixels(px)
        })
        .collect();
    Ok(Instance {
        shape,
        params,
        centers,
        images,
        objective: Objective {
            mode: LossMode::Mcl,
            beta: rng.gen_range(0.0..3.0),
            normalize: rng.gen_bool(0.5),
        },
    })
}

/// Kink distance of the composite: rectifier inputs, head pooling and every
/// class-masked pooling.
fn kink_distance(inst: &Instance) -> Result<f64> {
    let mut d = f64::INFINITY;
    for img in &inst.images {
        let (x, enc) = encode(img.pixels.as_deref().unwrap_or_default(), &inst.params)?;
        d = d.min(enc.kink_distance()).min(grid_gap(&x));
        let parts = disentangle(&x, &img.boxes, img.height, img.width)?;
        for e in parts.entries.values() {
            d = d.min(grid_gap(&hadamard(&x, &e.mask)?));
        }
    }
    Ok(d)
}

fn check_parser(rng: &mut ChaCha8Rng, inst: &Instance, redrawn: &mut usize) -> Result<f64> {
    let img = &inst.images[0];
    let (c, s) = (inst.shape.channels, inst.shape.grid);
    for _ in 0..MAX_REDRAWS {
        let x = Grid::from_vec(c, s, (0..c * s * s).map(|_| rng.gen_range(0.0..1.0)).collect())?;
        let parts = disentangle(&x, &img.boxes, img.height, img.width)?;
        let mut gap = f64::INFINITY;
        for e in parts.entries.values() {
            gap = gap.min(grid_gap(&hadamard(&x, &e.mask)?));
        }
        if gap < KINK_MARGIN {
            *redrawn += 1;
            continue;
        }
        let upstream: BTreeMap<usize, FeatureVector<f64>> = parts
            .entries
            .keys()
            .map(|&j| (j, FeatureVector((0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())))
            .collect();
        let analytic = disentangle_backward(&parts, &upstream)?;
        let numeric = fd_gradient(
            |v: &[f64]| {
                let g = Grid::from_vec(c, s, v.to_vec()).expect("same shape");
                let p = disentangle(&g, &img.boxes, img.height, img.width).expect("same boxes");
                p.features()
                    .iter()
                    .map(|(j, z)| z.0.iter().zip(&upstream[j].0).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            },
            x.values(),
            FD_STEP,
        )?;
        return Ok(relative_error(analytic.values(), &numeric));
    }
    Err(Error::Oracle("could not draw a tie-free parser instance".into()))
}

fn check_mc_loss(rng: &mut ChaCha8Rng, inst: &Instance) -> Result<f64> {
    let dim = inst.shape.channels;
    let batch = BatchFeatures::new(
        inst.images
            .iter()
            .map(|img| {
                img.labels
                    .iter()
                    .map(|&j| (j, FeatureVector((0..dim).map(|_| rng.gen_range(0.0..2.0)).collect())))
                    .collect()
            })
            .collect(),
    );
    let analytic: Vec<f64> = mc_loss_grad_z(&batch, &inst.centers, inst.objective.beta)?
        .into_iter()
        .flat_map(|s| s.into_values().flat_map(|z| z.0))
        .collect();
    let flat: Vec<f64> = batch.samples.iter().flat_map(|s| s.values().flat_map(|z| z.0.clone())).collect();
    let rebuild = |v: &[f64]| {
        let mut it = v.iter().copied();
        BatchFeatures::new(
            batch
                .samples
                .iter()
                .map(|s| {
                    s.keys()
                        .map(|&j| (j, FeatureVector(it.by_ref().take(dim).collect())))
                        .collect()
                })
                .collect(),
        )
    };
    let numeric = fd_gradient(
        |v: &[f64]| mc_loss(&rebuild(v), &inst.centers, inst.objective.beta).expect("valid batch"),
        &flat,
        FD_STEP,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

fn check_bce(rng: &mut ChaCha8Rng, inst: &Instance) -> Result<f64> {
    let logits: Vec<f64> = (0..inst.shape.classes).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let labels = &inst.images[0].labels;
    let (_, analytic) = bce_loss(&logits, labels)?;
    let numeric = fd_gradient(
        |v: &[f64]| bce_loss(v, labels).expect("valid labels").0,
        &logits,
        FD_STEP,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

fn check_model(inst: &Instance) -> Result<f64> {
    let batch: Vec<&AnnotatedImage> = inst.images.iter().collect();
    let analytic = batch_gradients(&inst.params, &inst.centers, &batch, inst.objective)?
        .grads
        .flatten();
    let numeric = fd_gradient(
        |v: &[f64]| {
            let mut p = inst.params.clone();
            p.load_flat(v).expect("same length");
            batch_objective(&p, &inst.centers, &batch, inst.objective).expect("valid batch")
        },
        &inst.params.flatten(),
        FD_STEP,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

/// Runs `trials` independent instances derived from `seed`.
pub fn run_gradcheck(seed: u64, trials: usize, tolerance: f64) -> Result<GradCheckReport> {
    let root = RngState::new(seed);
    let mut worst: BTreeMap<Component, (f64, usize)> = Component::ALL.iter().map(|&c| (c, (0.0, 0))).collect();
    let mut redrawn = 0;
    for trial in 0..trials {
        let mut rng = root.child(trial as u64).stream(Stream::GradCheck);
        let inst = (0..MAX_REDRAWS)
            .find_map(|_| match draw_instance(&mut rng) {
                Ok(inst) => match kink_distance(&inst) {
                    Ok(d) if d >= KINK_MARGIN => Some(Ok(inst)),
                    Ok(_) => {
                        redrawn += 1;
                        None
                    }
                    Err(e) => Some(Err(e)),
                },
                Err(e) => Some(Err(e)),
            })
            .ok_or_else(|| Error::Oracle("could not draw a kink-free model instance".into()))??;
        let errors = [
            (Component::Parser, check_parser(&mut rng, &inst, &mut redrawn)?),
            (Component::McLoss, check_mc_loss(&mut rng, &inst)?),
            (Component::Bce, check_bce(&mut rng, &inst)?),
            (Component::Model, check_model(&inst)?),
        ];
        for (c, e) in errors {
            let slot = worst.get_mut(&c).expect("all components present");
            // NaN must surface as a failure
            if e.is_nan() || e > slot.0 {
                *slot = (if e.is_nan() { f64::INFINITY } else { e }, trial);
            }
        }
    }
    Ok(GradCheckReport {
        seed,
        trials,
        tolerance,
        redrawn,
        components: worst
            .into_iter()
            .map(|(component, (worst_rel_error, worst_trial))| ComponentResult {
                component,
                worst_rel_error,
                worst_trial,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[3.0, 4.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn pool_gap_cases() {
        assert_eq!(pool_gap(&[0.0, 0.0]), f64::INFINITY);
        assert!((pool_gap(&[0.5, 0.2, 0.1]) - 0.3).abs() < 1e-15);
        assert_eq!(pool_gap(&[0.5, 0.5]), 0.0);
    }

    #[test]
    fn small_run_passes_and_is_reproducible() {
        let a = run_gradcheck(3, 5, 1e-5).unwrap();
        assert!(a.passed(), "{a:?}");
        assert_eq!(a, run_gradcheck(3, 5, 1e-5).unwrap());
        let zero = GradCheckReport { tolerance: 0.0, ..a };
        assert!(!zero.passed());
    }
}
