//! Dense grid arithmetic, reductions, deterministic RNG streams and the
//! central-difference gradient oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense `channels × size × size` activation block, row-major over
/// (channel, row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    channels: usize,
    size: usize,
    values: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn zeros(channels: usize, size: usize) -> Self {
        Self::filled(channels, size, T::zero())
    }

    pub fn filled(channels: usize, size: usize, value: T) -> Self {
        assert!(channels >= 1 && size >= 1, "grid must be non-empty");
        Self {
            channels,
            size,
            values: vec![value; channels * size * size],
        }
    }

    pub fn from_vec(channels: usize, size: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 || size == 0 {
            return Err(Error::Domain("grid must have C >= 1 and S >= 1".into()));
        }
        if values.len() != channels * size * size {
            return Err(Error::dim("grid values", channels * size * size, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("grid contains non-finite values".into()));
        }
        Ok(Self {
            channels,
            size,
            values,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial side length S.
    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.size * self.size
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> T {
        self.values[(c * self.size + row) * self.size + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: T) {
        self.values[(c * self.size + row) * self.size + col] = v;
    }

    /// Values of channel `c` in row-major cell order.
    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.cells();
        &self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.cells();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn min_value(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Grid<T>) -> Result<()> {
        if self.channels != other.channels || self.size != other.size {
            return Err(Error::dim("grid shape", self.values.len(), other.values.len()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + *b;
        }
        Ok(())
    }
}

/// Pooled feature vector (one value per channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector<T>(pub Vec<T>);

impl<T: Scalar> FeatureVector<T> {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![T::zero(); dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

impl<T> From<Vec<T>> for FeatureVector<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

/// Binary S×S spatial mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpatialMask {
    size: usize,
    cells: Vec<bool>,
}

impl SpatialMask {
    pub fn ones(size: usize) -> Self {
        Self {
            size,
            cells: vec![true; size * size],
        }
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            cells: vec![false; size * size],
        }
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let size = rows.len();
        let mut cells = Vec::with_capacity(size * size);
        for row in rows {
            if row.len() != size {
                return Err(Error::dim("mask row", size, row.len()));
            }
            for &v in *row {
                match v {
                    0 => cells.push(false),
                    1 => cells.push(true),
                    _ => return Err(Error::Domain(format!("mask entry {v} is not binary"))),
                }
            }
        }
        Ok(Self { size, cells })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.size + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.cells[row * self.size + col] = on;
    }

    /// Mask value at a flat row-major cell index.
    #[inline]
    pub fn at(&self, cell: usize) -> bool {
        self.cells[cell]
    }

    pub fn count_on(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
}

/// Multiplies every channel of `grid` by `mask`.
pub fn hadamard<T: Scalar>(grid: &Grid<T>, mask: &SpatialMask) -> Result<Grid<T>> {
    if mask.size() != grid.size() {
        return Err(Error::dim("mask spatial size", grid.size(), mask.size()));
    }
    let mut out = grid.clone();
    for c in 0..grid.channels() {
        for (v, &on) in out.channel_mut(c).iter_mut().zip(mask.cells()) {
            if !on {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// Result of a global max-pool: per-channel maxima and the flat row-major
/// cell index that produced each one.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<T> {
    pub values: FeatureVector<T>,
    pub argmax: Vec<usize>,
}

/// Per-channel maximum over all S×S cells. Ties resolve to the first cell in
/// row-major order.
pub fn global_max_pool<T: Scalar>(grid: &Grid<T>) -> Pooled<T> {
    let mut values = Vec::with_capacity(grid.channels());
    let mut argmax = Vec::with_capacity(grid.channels());
    for c in 0..grid.channels() {
        let ch = grid.channel(c);
        let mut best = 0;
        for (i, v) in ch.iter().enumerate().skip(1) {
            if *v > ch[best] {
                best = i;
            }
        }
        values.push(ch[best]);
        argmax.push(best);
    }
    Pooled {
        values: FeatureVector(values),
        argmax,
    }
}

pub fn squared_l2<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dim("vector length", a.len(), b.len()));
    }
    Ok(squared_l2_unchecked(a, b))
}

#[inline]
pub(crate) fn squared_l2_unchecked<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Logistic function, branching on sign so neither tail overflows.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient<T, F>(mut f: F, x: &[T], h: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    if !(h > T::zero()) {
        return Err(Error::Oracle("step must be positive".into()));
    }
    let mut probe = x.to_vec();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let up = f(&probe);
        probe[k] = orig - h;
        let down = f(&probe);
        probe[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!("non-finite objective at coordinate {k}")));
        }
        grad.push((up - down) / two_h);
    }
    Ok(grad)
}

/// Purpose-specific RNG streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Shuffle { epoch: u64 },
    GradCheck,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::GradCheck => 3,
            Stream::Shuffle { epoch } => (1 << 32) | epoch,
        }
    }
}

/// Seed for the ChaCha8 counter-based generator; every purpose draws from an
/// independent stream of the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngState {
    pub seed: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, purpose: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(purpose.id());
        rng
    }

    /// Derives an independent child seed, e.g. per split or per trial.
    pub fn child(&self, tag: u64) -> RngState {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9E37_79B9_7F4A_7C15);
        rng.set_stream(tag.wrapping_add(0x100));
        RngState::new(rng.next_u64())
    }
}
