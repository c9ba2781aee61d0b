//! Patch encoder `f(·; θ)` and linear head `h(·; φ)` with hand-written
//! backward passes and SGD with momentum.
//!
//! The encoder cuts the image into non-overlapping `p × p` patches
//! (`p = image_size / S`), embeds each patch linearly into `C` channels and
//! applies `L` per-cell `C → C` mixing layers. Every layer, the last one
//! included, ends in a rectifier, so the produced grid is non-negative. The
//! head max-pools the unmasked grid and applies one affine map to `c` logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{global_max_pool, FeatureVector, Grid, Pooled};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Feature channels `C`.
    pub channels: usize,
    /// Grid side `S`.
    pub grid: usize,
    pub image_size: usize,
    pub mixing_layers: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.grid == 0 || self.classes == 0 {
            return Err(Error::Config("channels, grid and classes must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by grid {}",
                self.image_size, self.grid
            )));
        }
        Ok(())
    }

    pub fn patch(&self) -> usize {
        self.image_size / self.grid
    }

    /// Inputs per patch: `p · p · 3`.
    pub fn patch_inputs(&self) -> usize {
        self.patch() * self.patch() * 3
    }
}

/// Affine map `out × inp`, weight row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub out: usize,
    pub inp: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            out,
            inp,
            weight: vec![T::zero(); out * inp],
            bias: vec![T::zero(); out],
        }
    }

    fn uniform<R: Rng>(out: usize, inp: usize, bound: f64, bias: f64, rng: &mut R) -> Self {
        Self {
            out,
            inp,
            weight: (0..out * inp).map(|_| T::lit(rng.gen_range(-bound..bound))).collect(),
            bias: vec![T::lit(bias); out],
        }
    }

    #[inline]
    fn forward_into(&self, x: &[T], y: &mut [T]) {
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.inp..(o + 1) * self.inp];
            *yo = row.iter().zip(x).fold(self.bias[o], |acc, (&w, &v)| acc + w * v);
        }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.out];
        self.forward_into(x, &mut y);
        y
    }

    /// Accumulates `dW += dy ⊗ x`, `db += dy` into `grad` and returns `Wᵀ dy`
    /// when `want_input` is set.
    fn backward_into(&self, x: &[T], dy: &[T], grad: &mut Dense<T>, want_input: bool) -> Option<Vec<T>> {
        for (o, &g) in dy.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            grad.bias[o] = grad.bias[o] + g;
            let row = &mut grad.weight[o * self.inp..(o + 1) * self.inp];
            for (w, &v) in row.iter_mut().zip(x) {
                *w = *w + g * v;
            }
        }
        want_input.then(|| {
            let mut dx = vec![T::zero(); self.inp];
            for (o, &g) in dy.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let row = &self.weight[o * self.inp..(o + 1) * self.inp];
                for (d, &w) in dx.iter_mut().zip(row) {
                    *d = *d + g * w;
                }
            }
            dx
        })
    }
}

/// Encoder parameters θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<T> {
    pub embed: Dense<T>,
    pub mixing: Vec<Dense<T>>,
}

/// Head parameters φ: `classes × C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<T> {
    pub linear: Dense<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub shape: ModelShape,
    pub encoder: EncoderParams<T>,
    pub head: HeadParams<T>,
}

/// Named view of one parameter tensor.
pub struct ParamView<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(shape: ModelShape) -> Self {
        let c = shape.channels;
        Self {
            shape,
            encoder: EncoderParams {
                embed: Dense::zeros(c, shape.patch_inputs()),
                mixing: (0..shape.mixing_layers).map(|_| Dense::zeros(c, c)).collect(),
            },
            head: HeadParams {
                linear: Dense::zeros(shape.classes, c),
            },
        }
    }

    /// He-uniform weights with a small positive bias for the rectified
    /// layers; the head draws from `±1/√C` with zero bias.
    pub fn init<R: Rng>(shape: ModelShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let c = shape.channels;
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        Ok(Self {
            shape,
            encoder: EncoderParams {
                embed: Dense::uniform(c, shape.patch_inputs(), he(shape.patch_inputs()), 0.01, rng),
                mixing: (0..shape.mixing_layers)
                    .map(|_| Dense::uniform(c, c, he(c), 0.01, rng))
                    .collect(),
            },
            head: HeadParams {
                linear: Dense::uniform(shape.classes, c, 1.0 / (c as f64).sqrt(), 0.0, rng),
            },
        })
    }

    fn layers(&self) -> Vec<(String, &Dense<T>)> {
        let mut v = vec![("encoder.embed".to_string(), &self.encoder.embed)];
        for (i, l) in self.encoder.mixing.iter().enumerate() {
            v.push((format!("encoder.mix{i}"), l));
        }
        v.push(("head".to_string(), &self.head.linear));
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense<T>> {
        let mut v = vec![&mut self.encoder.embed];
        v.extend(self.encoder.mixing.iter_mut());
        v.push(&mut self.head.linear);
        v
    }

    /// Flat, ordered parameter table.
    pub fn tensors(&self) -> Vec<ParamView<'_, T>> {
        self.layers()
            .into_iter()
            .flat_map(|(name, d)| {
                [
                    ParamView {
                        name: format!("{name}.weight"),
                        dims: vec![d.out, d.inp],
                        data: &d.weight[..],
                    },
                    ParamView {
                        name: format!("{name}.bias"),
                        dims: vec![d.out],
                        data: &d.bias[..],
                    },
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::dim("flat parameter vector", self.num_values(), flat.len()));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &ModelParams<T>) {
        let src: Vec<Vec<T>> = other.tensors().into_iter().map(|t| t.data.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s) {
                *a = *a + b;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v * k;
            }
        }
    }
}

/// Everything the encoder backward pass needs, per cell.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    cells: usize,
    channels: usize,
    /// `cells × patch_inputs`.
    patches: Vec<T>,
    /// Per layer `cells × C` pre-activations (embedding first).
    pre: Vec<Vec<T>>,
}

impl<T: Scalar> EncoderCache<T> {
    /// Distance of the closest pre-activation to the rectifier kink.
    pub fn kink_distance(&self) -> T {
        self.pre.iter().flatten().fold(T::infinity(), |d, &v| d.min(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    pub pooled: Pooled<T>,
}

fn relu<T: Scalar>(v: T) -> T {
    v.max(T::zero())
}

/// `X = f(I; θ)`. `pixels` is `H × W × 3`, row-major.
pub fn encode<T: Scalar>(pixels: &[f32], params: &ModelParams<T>) -> Result<(Grid<T>, EncoderCache<T>)> {
    let shape = params.shape;
    shape.validate()?;
    let n = shape.image_size;
    if pixels.len() != n * n * 3 {
        return Err(Error::Config(format!(
            "image has {} values, model expects {n}x{n}x3",
            pixels.len()
        )));
    }
    let (s, p, c) = (shape.grid, shape.patch(), shape.channels);
    let cells = s * s;
    let pin = shape.patch_inputs();

    let mut patches = vec![T::zero(); cells * pin];
    for a in 0..s {
        for b in 0..s {
            let dst = &mut patches[(a * s + b) * pin..][..pin];
            let mut k = 0;
            for r in 0..p {
                let row = (a * p + r) * n + b * p;
                for v in &pixels[row * 3..(row + p) * 3] {
                    dst[k] = T::lit(*v as f64);
                    k += 1;
                }
            }
        }
    }

    let mut pre = Vec::with_capacity(1 + shape.mixing_layers);
    let mut act = vec![T::zero(); cells * c];
    let mut z = vec![T::zero(); cells * c];
    for cell in 0..cells {
        params.encoder.embed.forward_into(&patches[cell * pin..][..pin], &mut z[cell * c..][..c]);
    }
    for (a, &v) in act.iter_mut().zip(&z) {
        *a = relu(v);
    }
    pre.push(z);
    for layer in &params.encoder.mixing {
        let mut z = vec![T::zero(); cells * c];
        for cell in 0..cells {
            layer.forward_into(&act[cell * c..][..c], &mut z[cell * c..][..c]);
        }
        for (a, &v) in act.iter_mut().zip(&z) {
            *a = relu(v);
        }
        pre.push(z);
    }

    // cell-major activations -> channel-major grid
    let mut x = Grid::zeros(c, s);
    let xv = x.values_mut();
    for cell in 0..cells {
        for ch in 0..c {
            xv[ch * cells + cell] = act[cell * c + ch];
        }
    }
    Ok((
        x,
        EncoderCache {
            cells,
            channels: c,
            patches,
            pre,
        },
    ))
}

/// `p = W · maxpool(X) + b` over the unmasked grid.
pub fn classify<T: Scalar>(x: &Grid<T>, head: &HeadParams<T>) -> Result<(Vec<T>, HeadCache<T>)> {
    if x.channels() != head.linear.inp {
        return Err(Error::dim("head input channels", head.linear.inp, x.channels()));
    }
    let pooled = global_max_pool(x);
    let logits = head.linear.apply(pooled.values.as_slice());
    Ok((logits, HeadCache { pooled }))
}

/// Head applied to an arbitrary pooled vector (used for per-class logits).
pub fn head_logits<T: Scalar>(head: &HeadParams<T>, z: &FeatureVector<T>) -> Result<Vec<T>> {
    if z.dim() != head.linear.inp {
        return Err(Error::dim("head input", head.linear.inp, z.dim()));
    }
    Ok(head.linear.apply(z.as_slice()))
}

/// Backward of [`head_logits`]: accumulates head gradients, returns `dL/dz`.
pub fn head_logits_backward<T: Scalar>(
    head: &HeadParams<T>,
    z: &FeatureVector<T>,
    dlogits: &[T],
    grads: &mut ModelParams<T>,
) -> FeatureVector<T> {
    FeatureVector(
        head.linear
            .backward_into(z.as_slice(), dlogits, &mut grads.head.linear, true)
            .expect("input gradient requested"),
    )
}

/// Reverse pass through head and encoder.
///
/// `dlogits` enters through the head's pooled argmax cells; `dx_extra` (the
/// parser branch) is added onto the grid gradient before the encoder pass.
/// Gradients are accumulated into `grads`.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    enc: &EncoderCache<T>,
    head: &HeadCache<T>,
    dlogits: &[T],
    dx_extra: Option<&Grid<T>>,
    grads: &mut ModelParams<T>,
) -> Result<()> {
    let shape = params.shape;
    let (c, cells) = (shape.channels, shape.grid * shape.grid);
    if enc.cells != cells || enc.channels != c || enc.pre.len() != 1 + shape.mixing_layers {
        return Err(Error::Contract("encoder cache does not match model shape".into()));
    }
    if head.pooled.argmax.len() != c || dlogits.len() != shape.classes {
        return Err(Error::Contract("head cache or logit gradient does not match model".into()));
    }

    // dL/dX, cell-major
    let mut dact = vec![T::zero(); cells * c];
    let dpooled = params
        .head
        .linear
        .backward_into(head.pooled.values.as_slice(), dlogits, &mut grads.head.linear, true)
        .expect("input gradient requested");
    for (ch, (&cell, &g)) in head.pooled.argmax.iter().zip(&dpooled).enumerate() {
        dact[cell * c + ch] = dact[cell * c + ch] + g;
    }
    if let Some(dx) = dx_extra {
        if dx.channels() != c || dx.size() != shape.grid {
            return Err(Error::Contract("parser gradient grid does not match model".into()));
        }
        for ch in 0..c {
            for (cell, &g) in dx.channel(ch).iter().enumerate() {
                dact[cell * c + ch] = dact[cell * c + ch] + g;
            }
        }
    }

    let pin = shape.patch_inputs();
    let last = shape.mixing_layers;
    let mut layer_grads: Vec<&mut Dense<T>> = Vec::with_capacity(1 + last);
    layer_grads.push(&mut grads.encoder.embed);
    layer_grads.extend(grads.encoder.mixing.iter_mut());

    // Cells are independent under 1×1 layers, so only cells that receive
    // gradient need a reverse pass.
    let mut dz = vec![T::zero(); c];
    for cell in 0..cells {
        let mut upstream: Vec<T> = dact[cell * c..][..c].to_vec();
        if upstream.iter().all(|&g| g == T::zero()) {
            continue;
        }
        for l in (0..=last).rev() {
            let pre = &enc.pre[l][cell * c..][..c];
            for ((d, &u), &z) in dz.iter_mut().zip(&upstream).zip(pre) {
                *d = if z > T::zero() { u } else { T::zero() };
            }
            if l == 0 {
                let input = &enc.patches[cell * pin..][..pin];
                params.encoder.embed.backward_into(input, &dz, layer_grads[0], false);
            } else {
                let input: Vec<T> = enc.pre[l - 1][cell * c..][..c].iter().map(|&v| relu(v)).collect();
                upstream = params.encoder.mixing[l - 1]
                    .backward_into(&input, &dz, layer_grads[l], true)
                    .expect("input gradient requested");
            }
        }
    }
    Ok(())
}

/// Momentum buffers plus SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub velocity: ModelParams<T>,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(shape: ModelShape, momentum: T, weight_decay: T) -> Self {
        Self {
            velocity: ModelParams::zeros(shape),
            momentum,
            weight_decay,
        }
    }
}

/// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimizerState<T>,
    lr: T,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::diverged("non-finite parameter gradient", None));
    }
    if params.shape != grads.shape || params.shape != state.velocity.shape {
        return Err(Error::Contract("optimizer shapes do not match parameters".into()));
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    let g: Vec<Vec<T>> = grads.tensors().into_iter().map(|t| t.data.to_vec()).collect();
    for ((p, v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(state.velocity.tensors_mut())
        .zip(g)
    {
        for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}
