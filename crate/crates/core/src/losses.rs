//! Center loss, multi-label contrastive loss, binary cross-entropy and the
//! center bank with its per-iteration update rule.
//!
//! All center-based objectives share one normalization: a batch with label
//! sets `Y^i` is scaled by `1 / (2N)` with `N = Σ_i |Y^i|`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, squared_l2_unchecked, FeatureVector};
use crate::parser::ClassFeatureSet;
use crate::scalar::Scalar;

/// Class-specific features of every sample in a batch, keyed by present class.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFeatures<T> {
    pub samples: Vec<BTreeMap<usize, FeatureVector<T>>>,
}

impl<T: Scalar> BatchFeatures<T> {
    pub fn new(samples: Vec<BTreeMap<usize, FeatureVector<T>>>) -> Self {
        Self { samples }
    }

    pub fn from_sets(sets: &[ClassFeatureSet<T>]) -> Self {
        Self::new(sets.iter().map(ClassFeatureSet::features).collect())
    }

    /// Total number of (sample, present class) pairs.
    pub fn pair_count(&self) -> usize {
        self.samples.iter().map(BTreeMap::len).sum()
    }

    fn check(&self, bank: &CenterBank<T>) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        for s in &self.samples {
            if s.is_empty() {
                return Err(Error::Domain("sample with an empty label set".into()));
            }
            for (&j, z) in s {
                if j >= bank.num_classes() {
                    return Err(Error::dim("class index bound", bank.num_classes(), j + 1));
                }
                if z.dim() != bank.dim() {
                    return Err(Error::dim("feature dimension", bank.dim(), z.dim()));
                }
            }
        }
        Ok(())
    }
}

/// One learnable center per category and the center learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterBank<T> {
    pub centers: Vec<FeatureVector<T>>,
    pub alpha: T,
}

impl<T: Scalar> CenterBank<T> {
    pub fn new(centers: Vec<FeatureVector<T>>, alpha: T) -> Result<Self> {
        let dim = centers.first().map_or(0, FeatureVector::dim);
        if centers.is_empty() || dim == 0 {
            return Err(Error::Domain("center bank needs at least one non-empty center".into()));
        }
        if let Some(bad) = centers.iter().find(|c| c.dim() != dim) {
            return Err(Error::dim("center dimension", dim, bad.dim()));
        }
        if centers.iter().flat_map(|c| c.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite center".into()));
        }
        Ok(Self { centers, alpha })
    }

    /// Centers drawn i.i.d. from `[-0.05, 0.05]`.
    pub fn init_uniform<R: Rng>(classes: usize, dim: usize, alpha: T, rng: &mut R) -> Self {
        let centers = (0..classes)
            .map(|_| FeatureVector((0..dim).map(|_| T::lit(rng.gen_range(-0.05..0.05))).collect()))
            .collect();
        Self { centers, alpha }
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].dim()
    }

    /// `c_j ← c_j − α·Δc_j`.
    pub fn apply_update(&mut self, deltas: &[FeatureVector<T>]) -> Result<()> {
        if deltas.len() != self.centers.len() {
            return Err(Error::dim("center deltas", self.centers.len(), deltas.len()));
        }
        for (c, d) in self.centers.iter_mut().zip(deltas) {
            if d.dim() != c.dim() {
                return Err(Error::dim("center delta dimension", c.dim(), d.dim()));
            }
            for (cv, &dv) in c.0.iter_mut().zip(d.as_slice()) {
                *cv = *cv - self.alpha * dv;
            }
        }
        Ok(())
    }
}

/// Functional form of [`CenterBank::apply_update`].
pub fn apply_center_update<T: Scalar>(bank: &CenterBank<T>, deltas: &[FeatureVector<T>]) -> Result<CenterBank<T>> {
    let mut out = bank.clone();
    out.apply_update(deltas)?;
    Ok(out)
}

/// `Σ_i Σ_{j∈Y^i} [pull·‖z_j − c_j‖² − push·Σ_{k∈Y^i,k≠j} ‖z_k − c_j‖²] / (2N)`.
fn weighted_objective<T: Scalar>(batch: &BatchFeatures<T>, bank: &CenterBank<T>, pull: T, push: T) -> Result<T> {
    batch.check(bank)?;
    let mut acc = T::zero();
    for sample in &batch.samples {
        for (&j, zj) in sample {
            let cj = bank.centers[j].as_slice();
            let own = squared_l2_unchecked(zj.as_slice(), cj);
            let mut others = T::zero();
            for (&k, zk) in sample {
                if k != j {
                    others = others + squared_l2_unchecked(zk.as_slice(), cj);
                }
            }
            acc = acc + (pull * own - push * others);
        }
    }
    let n = T::of_usize(batch.pair_count());
    Ok(acc / (n + n))
}

pub fn center_loss<T: Scalar>(batch: &BatchFeatures<T>, bank: &CenterBank<T>) -> Result<T> {
    weighted_objective(batch, bank, T::one(), T::zero())
}

pub fn mc_loss<T: Scalar>(batch: &BatchFeatures<T>, bank: &CenterBank<T>, beta: T) -> Result<T> {
    weighted_objective(batch, bank, T::one(), beta)
}

/// Intra-class term only; identical to [`center_loss`].
pub fn cl_only_loss<T: Scalar>(batch: &BatchFeatures<T>, bank: &CenterBank<T>) -> Result<T> {
    center_loss(batch, bank)
}

/// Inter-class term only: the β-weighted push with the pull removed.
pub fn col_only_loss<T: Scalar>(batch: &BatchFeatures<T>, bank: &CenterBank<T>, beta: T) -> Result<T> {
    weighted_objective(batch, bank, T::zero(), beta)
}

/// Per-sample feature gradients, same keys as the batch.
pub type FeatureGrads<T> = Vec<BTreeMap<usize, FeatureVector<T>>>;

/// Smoothing term under the square root of the feature norm.
pub const NORM_EPS: f64 = 1.0;

fn norm_scale<T: Scalar>(z: &[T]) -> T {
    (z.iter().fold(T::zero(), |a, &v| a + v * v) + T::lit(NORM_EPS)).sqrt()
}

/// Maps every class feature to `z / sqrt(‖z‖² + ε)`.
pub fn normalize_features<T: Scalar>(batch: &BatchFeatures<T>) -> BatchFeatures<T> {
    BatchFeatures::new(
        batch
            .samples
            .iter()
            .map(|s| {
                s.iter()
                    .map(|(&j, z)| {
                        let n = norm_scale(z.as_slice());
                        (j, FeatureVector(z.as_slice().iter().map(|&v| v / n).collect()))
                    })
                    .collect()
            })
            .collect(),
    )
}

/// Pulls gradients with respect to normalized features back to the raw ones.
pub fn normalize_backward<T: Scalar>(raw: &BatchFeatures<T>, grads: &FeatureGrads<T>) -> Result<FeatureGrads<T>> {
    if raw.samples.len() != grads.len() {
        return Err(Error::dim("batch size", raw.samples.len(), grads.len()));
    }
    raw.samples
        .iter()
        .zip(grads)
        .map(|(s, g)| {
            s.iter()
                .map(|(&j, z)| {
                    let gj = g.get(&j).ok_or_else(|| Error::Contract(format!("missing gradient for class {j}")))?;
                    let (z, gj) = (z.as_slice(), gj.as_slice());
                    if z.len() != gj.len() {
                        return Err(Error::dim("feature dimension", z.len(), gj.len()));
                    }
                    let n = norm_scale(z);
                    let n3 = n * n * n;
                    let dot = z.iter().zip(gj).fold(T::zero(), |a, (&zv, &gv)| a + zv * gv);
                    Ok((j, FeatureVector(z.iter().zip(gj).map(|(&zv, &gv)| gv / n - zv * dot / n3).collect())))
                })
                .collect()
        })
        .collect()
}

fn weighted_grad_z<T: Scalar>(
    batch: &BatchFeatures<T>,
    bank: &CenterBank<T>,
    pull: T,
    push: T,
) -> Result<FeatureGrads<T>> {
    batch.check(bank)?;
    let inv_n = T::one() / T::of_usize(batch.pair_count());
    let dim = bank.dim();
    Ok(batch
        .samples
        .iter()
        .map(|sample| {
            sample
                .iter()
                .map(|(&j, zj)| {
                    let mut g = vec![T::zero(); dim];
                    let cj = bank.centers[j].as_slice();
                    for (gv, (&z, &c)) in g.iter_mut().zip(zj.as_slice().iter().zip(cj)) {
                        *gv = pull * (z - c);
                    }
                    for &k in sample.keys() {
                        if k == j {
                            continue;
                        }
                        let ck = bank.centers[k].as_slice();
                        for (gv, (&z, &c)) in g.iter_mut().zip(zj.as_slice().iter().zip(ck)) {
                            *gv = *gv - push * (z - c);
                        }
                    }
                    for gv in &mut g {
                        *gv = *gv * inv_n;
                    }
                    (j, FeatureVector(g))
                })
                .collect()
        })
        .collect())
}

/// `dL_MC/dz^i_j = (1/N)·[(z^i_j − c_j) − β·Σ_{j'∈Y^i, j'≠j} (z^i_j − c_{j'})]`.
pub fn mc_loss_grad_z<T: Scalar>(batch: &BatchFeatures<T>, bank: &CenterBank<T>, beta: T) -> Result<FeatureGrads<T>> {
    weighted_grad_z(batch, bank, T::one(), beta)
}

pub fn col_only_grad_z<T: Scalar>(batch: &BatchFeatures<T>, bank: &CenterBank<T>, beta: T) -> Result<FeatureGrads<T>> {
    weighted_grad_z(batch, bank, T::zero(), beta)
}

/// `Δc_j = Σ_i ⟦j∈Y^i⟧ (c_j − z^i_j) / (1 + Σ_i ⟦j∈Y^i⟧)`, zero for classes
/// absent from the batch.
pub fn center_delta<T: Scalar>(batch: &BatchFeatures<T>, bank: &CenterBank<T>) -> Result<Vec<FeatureVector<T>>> {
    batch.check(bank)?;
    let mut sums = vec![FeatureVector::zeros(bank.dim()); bank.num_classes()];
    let mut counts = vec![0usize; bank.num_classes()];
    for sample in &batch.samples {
        for (&j, z) in sample {
            counts[j] += 1;
            for (s, (&c, &zv)) in sums[j].0.iter_mut().zip(bank.centers[j].as_slice().iter().zip(z.as_slice())) {
                *s = *s + (c - zv);
            }
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        let denom = T::one() + T::of_usize(n);
        for v in &mut s.0 {
            *v = *v / denom;
        }
    }
    Ok(sums)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy summed over classes, with its logit gradient
/// `σ(p_i) − ⟦i∈Y⟧`.
pub fn bce_loss<T: Scalar>(logits: &[T], labels: &[usize]) -> Result<(T, Vec<T>)> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.len()) {
        return Err(Error::dim("label index bound", logits.len(), bad + 1));
    }
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (i, &p) in logits.iter().enumerate() {
        let positive = labels.contains(&i);
        if positive {
            loss = loss + softplus(-p);
            grad.push(sigmoid(p) - T::one());
        } else {
            loss = loss + softplus(p);
            grad.push(sigmoid(p));
        }
    }
    Ok((loss, grad))
}

/// Softmax cross-entropy of one target class, with its logit gradient.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
    if target >= logits.len() {
        return Err(Error::dim("target index bound", logits.len(), target + 1));
    }
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&p| (p - m).exp()).collect();
    let z: T = exps.iter().copied().sum();
    let loss = z.ln() + m - logits[target];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| e / z - if i == target { T::one() } else { T::zero() })
        .collect();
    Ok((loss, grad))
}

/// Per-batch loss values. `total == l_ce + l_mc` always.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_mc: f64,
    pub total: f64,
    pub l_cl: Option<f64>,
    pub l_col: Option<f64>,
    pub beta: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "l_ce={} l_mc={} total={} (beta={})",
            self.l_ce, self.l_mc, self.total, self.beta
        )
    }
}

/// Joint objective `L = L_CE + L_MC`; non-finite parts signal divergence.
pub fn total_loss<T: Scalar>(l_ce: T, l_mc: T) -> Result<LossBreakdown> {
    let total = l_ce + l_mc;
    let out = LossBreakdown {
        l_ce: l_ce.as_f64(),
        l_mc: l_mc.as_f64(),
        total: total.as_f64(),
        l_cl: None,
        l_col: None,
        beta: 0.0,
    };
    if !(l_ce.is_finite() && l_mc.is_finite() && total.is_finite()) {
        return Err(Error::diverged(format!("non-finite loss: {out}"), Some(out)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{fd_gradient, RngState, Stream};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn fv(v: &[f64]) -> FeatureVector<f64> {
        FeatureVector(v.to_vec())
    }

    fn bank(cs: &[&[f64]]) -> CenterBank<f64> {
        CenterBank::new(cs.iter().map(|c| fv(c)).collect(), 0.5).unwrap()
    }

    fn sample(pairs: &[(usize, &[f64])]) -> BTreeMap<usize, FeatureVector<f64>> {
        pairs.iter().map(|(j, z)| (*j, fv(z))).collect()
    }

    pub(crate) fn random_batch(rng: &mut ChaCha8Rng, classes: usize, dim: usize, r: usize) -> (BatchFeatures<f64>, CenterBank<f64>) {
        let bank = CenterBank::new(
            (0..classes)
                .map(|_| FeatureVector((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect(),
            0.5,
        )
        .unwrap();
        let samples = (0..r)
            .map(|_| {
                let n = rng.gen_range(1..=classes);
                let mut labels: Vec<usize> = (0..classes).collect();
                rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), rng);
                labels
                    .into_iter()
                    .take(n)
                    .map(|j| (j, FeatureVector((0..dim).map(|_| rng.gen_range(0.0..2.0)).collect())))
                    .collect()
            })
            .collect();
        (BatchFeatures::new(samples), bank)
    }

    #[test]
    fn center_loss_examples() {
        let b = bank(&[&[1.0, 2.0], &[0.0, 0.0]]);
        let batch = BatchFeatures::new(vec![sample(&[(0, &[1.0, 2.0]), (1, &[0.0, 0.0])])]);
        assert_eq!(center_loss(&batch, &b).unwrap(), 0.0);

        let b = bank(&[&[0.0, 0.0]]);
        let batch = BatchFeatures::new(vec![sample(&[(0, &[1.0, 0.0])])]);
        assert_eq!(center_loss(&batch, &b).unwrap(), 0.5);

        // squared distances 2 and 4 over two pairs
        let batch = BatchFeatures::new(vec![sample(&[(0, &[1.0, 1.0])]), sample(&[(0, &[2.0, 0.0])])]);
        assert_eq!(center_loss(&batch, &b).unwrap(), 1.5);
    }

    #[test]
    fn center_loss_dimension_mismatch() {
        let b = bank(&[&[0.0, 0.0]]);
        let batch = BatchFeatures::new(vec![sample(&[(0, &[1.0])])]);
        assert!(matches!(center_loss(&batch, &b), Err(Error::Dimension { .. })));
        let batch = BatchFeatures::new(vec![sample(&[(3, &[1.0, 0.0])])]);
        assert!(center_loss(&batch, &b).is_err());
    }

    #[test]
    fn mc_loss_examples() {
        let b = bank(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let single = BatchFeatures::new(vec![sample(&[(1, &[0.3, 0.2])])]);
        assert_eq!(mc_loss(&single, &b, 2.0).unwrap(), center_loss(&single, &b).unwrap());

        let batch = BatchFeatures::new(vec![sample(&[(1, &[1.0, 0.0]), (2, &[0.0, 1.0])])]);
        assert_eq!(mc_loss(&batch, &b, 1.0).unwrap(), -1.0);
        assert_eq!(mc_loss(&batch, &b, 0.0).unwrap(), center_loss(&batch, &b).unwrap());
    }

    #[test]
    fn mc_grad_examples() {
        let b = bank(&[&[0.5, -1.0]]);
        let batch = BatchFeatures::new(vec![sample(&[(0, &[0.5, -1.0])])]);
        assert_eq!(mc_loss_grad_z(&batch, &b, 0.0).unwrap()[0][&0].0, vec![0.0, 0.0]);

        let b = bank(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let batch = BatchFeatures::new(vec![sample(&[(0, &[2.0, 0.0])]), sample(&[(1, &[0.0, 3.0])])]);
        let g = mc_loss_grad_z(&batch, &b, 0.0).unwrap();
        assert_eq!(g[0][&0].0, vec![1.0, 0.0]);
        assert_eq!(g[1][&1].0, vec![-0.5, 1.0]);
    }

    fn flatten(batch: &BatchFeatures<f64>) -> Vec<f64> {
        batch.samples.iter().flat_map(|s| s.values().flat_map(|z| z.0.clone())).collect()
    }

    fn unflatten(template: &BatchFeatures<f64>, flat: &[f64]) -> BatchFeatures<f64> {
        let mut it = flat.iter().copied();
        BatchFeatures::new(
            template
                .samples
                .iter()
                .map(|s| s.iter().map(|(&j, z)| (j, FeatureVector(it.by_ref().take(z.dim()).collect()))).collect())
                .collect(),
        )
    }

    #[test]
    fn mc_grad_matches_fd() {
        let mut rng = RngState::new(11).stream(Stream::GradCheck);
        for _ in 0..30 {
            let (batch, b) = random_batch(&mut rng, 4, 5, 3);
            let analytic: Vec<f64> = mc_loss_grad_z(&batch, &b, 1.5)
                .unwrap()
                .iter()
                .flat_map(|s| s.values().flat_map(|g| g.0.clone()))
                .collect();
            let x = flatten(&batch);
            let fd = fd_gradient(|v: &[f64]| mc_loss(&unflatten(&batch, v), &b, 1.5).unwrap(), &x, 1e-5).unwrap();
            for (a, n) in analytic.iter().zip(&fd) {
                assert!((a - n).abs() <= 1e-6 * a.abs().max(1e-2), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn normalized_features_shrink_and_keep_direction() {
        let batch = BatchFeatures::new(vec![sample(&[(0, &[3.0, 4.0]), (1, &[0.0, 0.0])])]);
        let n = normalize_features(&batch);
        let z = n.samples[0][&0].as_slice();
        let s = (25.0f64 + NORM_EPS).sqrt();
        assert_eq!(z, &[3.0 / s, 4.0 / s]);
        assert_eq!(n.samples[0][&1].as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn normalize_backward_matches_fd() {
        let mut rng = RngState::new(12).stream(Stream::GradCheck);
        for _ in 0..30 {
            let (batch, b) = random_batch(&mut rng, 4, 5, 3);
            let dz = mc_loss_grad_z(&normalize_features(&batch), &b, 2.0).unwrap();
            let analytic: Vec<f64> = normalize_backward(&batch, &dz)
                .unwrap()
                .iter()
                .flat_map(|s| s.values().flat_map(|g| g.0.clone()))
                .collect();
            let x = flatten(&batch);
            let f = |v: &[f64]| mc_loss(&normalize_features(&unflatten(&batch, v)), &b, 2.0).unwrap();
            let fd = fd_gradient(f, &x, 1e-5).unwrap();
            for (a, n) in analytic.iter().zip(&fd) {
                assert!((a - n).abs() <= 1e-6 * a.abs().max(1e-2), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn center_delta_examples() {
        let b = bank(&[&[2.0, 2.0], &[5.0, 5.0]]);
        let batch = BatchFeatures::new(vec![sample(&[(0, &[0.0, 0.0])])]);
        let d = center_delta(&batch, &b).unwrap();
        assert_eq!(d[0].0, vec![1.0, 1.0]);
        assert_eq!(d[1].0, vec![0.0, 0.0]);

        let batch = BatchFeatures::new(vec![sample(&[(0, &[2.0, 2.0])]), sample(&[(0, &[2.0, 2.0]), (1, &[5.0, 5.0])])]);
        for d in center_delta(&batch, &b).unwrap() {
            assert_eq!(d.0, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn center_update_examples() {
        let mut b = bank(&[&[2.0, 2.0]]);
        let before = b.clone();
        b.apply_update(&[fv(&[0.0, 0.0])]).unwrap();
        assert_eq!(b, before);
        let b = apply_center_update(&b, &[fv(&[1.0, 1.0])]).unwrap();
        assert_eq!(b.centers[0].0, vec![1.5, 1.5]);
    }

    #[test]
    fn repeated_updates_converge_geometrically() {
        let z = [0.25, -1.0];
        let mut b = bank(&[&[2.0, 2.0]]);
        let batch = BatchFeatures::new(vec![sample(&[(0, &z)])]);
        let mut gap = vec![2.0 - z[0], 2.0 - z[1]];
        for _ in 0..20 {
            let d = center_delta(&batch, &b).unwrap();
            b.apply_update(&d).unwrap();
            for (g, (c, zv)) in gap.iter_mut().zip(b.centers[0].0.iter().zip(z)) {
                *g *= 1.0 - 0.5 / 2.0;
                assert!((c - zv - *g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bce_examples() {
        let (l, g) = bce_loss(&[0.0f64], &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g, vec![-0.5]);

        let (l, _) = bce_loss(&[30.0f64, -30.0, 30.0], &[0, 2]).unwrap();
        assert!(l < 1e-12 && l >= 0.0);

        assert!(bce_loss(&[0.0f64], &[1]).is_err());
    }

    #[test]
    fn bce_grad_matches_fd() {
        let mut rng = RngState::new(3).stream(Stream::GradCheck);
        for _ in 0..50 {
            let p: Vec<f64> = (0..5).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let labels: Vec<usize> = (0..5).filter(|_| rng.gen_bool(0.5)).collect();
            let (_, g) = bce_loss(&p, &labels).unwrap();
            let fd = fd_gradient(|v: &[f64]| bce_loss(v, &labels).unwrap().0, &p, 1e-5).unwrap();
            for (a, n) in g.iter().zip(&fd) {
                assert!((a - n).abs() <= 1e-7 * a.abs().max(1e-3), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn softmax_ce_matches_fd() {
        let p = [0.3, -1.2, 2.0, 0.0];
        let (l, g) = softmax_cross_entropy(&p, 2).unwrap();
        assert!(l > 0.0);
        let fd = fd_gradient(|v: &[f64]| softmax_cross_entropy(v, 2).unwrap().0, &p, 1e-6).unwrap();
        for (a, n) in g.iter().zip(&fd) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.7, 0.3).unwrap().total, 1.0);
        assert_eq!(total_loss(0.7, -0.2).unwrap().total, 0.7 + -0.2);
        assert!((total_loss(0.7, -0.2).unwrap().total - 0.5).abs() < 1e-15);
        assert!(matches!(total_loss(f64::NAN, 0.0), Err(Error::Divergence { .. })));
        assert!(matches!(total_loss(1.0, f64::NEG_INFINITY), Err(Error::Divergence { .. })));
    }

    #[test]
    fn ablation_examples() {
        let b = bank(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let singles = BatchFeatures::new(vec![sample(&[(0, &[1.0, 1.0])]), sample(&[(1, &[3.0, 1.0])])]);
        assert_eq!(col_only_loss(&singles, &b, 2.0).unwrap(), 0.0);
        assert_eq!(cl_only_loss(&singles, &b).unwrap(), mc_loss(&singles, &b, 0.0).unwrap());
    }

    proptest! {
        #[test]
        fn decomposition_and_linearity(seed in 0u64..500, beta in 0.0f64..3.0) {
            let mut rng = RngState::new(seed).stream(Stream::Data);
            let (batch, b) = random_batch(&mut rng, 4, 3, 3);
            let mc = mc_loss(&batch, &b, beta).unwrap();
            let parts = cl_only_loss(&batch, &b).unwrap() + col_only_loss(&batch, &b, beta).unwrap();
            prop_assert!((mc - parts).abs() <= 1e-12 * mc.abs().max(1.0));

            let l0 = mc_loss(&batch, &b, 0.0).unwrap();
            let l1 = mc_loss(&batch, &b, 1.0).unwrap();
            let l2 = mc_loss(&batch, &b, 2.0).unwrap();
            prop_assert!(l0 - l1 >= 0.0);
            prop_assert!((l0 - 2.0 * l1 + l2).abs() <= 1e-12 * l0.abs().max(l2.abs()).max(1.0));
        }

        #[test]
        fn bce_non_negative(p in proptest::collection::vec(-40.0f64..40.0, 4), mask in 0u8..16) {
            let labels: Vec<usize> = (0..4).filter(|i| mask & (1 << i) != 0).collect();
            prop_assert!(bce_loss(&p, &labels).unwrap().0 >= 0.0);
        }
    }
}
