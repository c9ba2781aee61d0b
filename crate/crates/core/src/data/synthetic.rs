//! Seeded synthetic multi-label scenes.
//!
//! Every class owns a two-colour texture signature. A scene places between
//! `min_objects` and `max_objects` objects of distinct classes (rectangles or
//! discs) over a grey noise background with optional decoy patches whose
//! colours sit one quantisation step away from a real signature. Later
//! objects occlude earlier ones; stored boxes are the tight extents of the
//! pixels that remain visible, and a fully hidden object is dropped.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, BoundingBox, DatasetManifest, Split, SyntheticProvenance};
use crate::error::{Error, Result};
use crate::numeric::{RngState, Stream};

const LEVELS: f32 = 256.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub classes: usize,
    pub image_size: usize,
    pub grid_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_shape: usize,
    pub max_shape: usize,
    /// Upper bound on decoy patches per image.
    pub decoys: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            classes: 6,
            image_size: 56,
            grid_size: 14,
            train: 600,
            val: 200,
            test: 0,
            min_objects: 1,
            max_objects: 3,
            min_shape: 12,
            max_shape: 28,
            decoys: 3,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.grid_size == 0 || self.image_size % self.grid_size != 0 {
            return fail(format!(
                "image_size {} not divisible by grid_size {}",
                self.image_size, self.grid_size
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!(
                "need 1 <= min_objects <= max_objects, got {}..{}",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > self.classes {
            return fail(format!(
                "max_objects {} exceeds classes {} (objects in a scene have distinct classes)",
                self.max_objects, self.classes
            ));
        }
        if self.min_shape == 0 || self.min_shape > self.max_shape {
            return fail(format!(
                "need 1 <= min_shape <= max_shape, got {}..{}",
                self.min_shape, self.max_shape
            ));
        }
        if self.max_shape > self.image_size {
            return fail(format!(
                "max_shape {} larger than image_size {}",
                self.max_shape, self.image_size
            ));
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    HorizontalStripes,
    VerticalStripes,
    Checker,
}

impl Texture {
    /// Whether the pixel at object-relative `(row, col)` takes the primary colour.
    fn primary_at(self, row: usize, col: usize) -> bool {
        match self {
            Texture::HorizontalStripes => (row / 2) % 2 == 0,
            Texture::VerticalStripes => (col / 2) % 2 == 0,
            Texture::Checker => (row / 2 + col / 2) % 2 == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSignature {
    pub primary: [f32; 3],
    pub secondary: [f32; 3],
    pub texture: Texture,
}

impl ClassSignature {
    pub fn matches(&self, rgb: [f32; 3]) -> bool {
        rgb == self.primary || rgb == self.secondary
    }
}

fn quantize(v: f32) -> f32 {
    (v * (LEVELS - 1.0)).round() / (LEVELS - 1.0)
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let rgb = match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(quantize)
}

/// Colour/texture signature of each class. Signatures are pairwise disjoint
/// and never grey, so they cannot collide with the background.
pub fn class_palette(classes: usize) -> Vec<ClassSignature> {
    let textures = [
        Texture::HorizontalStripes,
        Texture::VerticalStripes,
        Texture::Checker,
    ];
    (0..classes)
        .map(|j| {
            let hue = j as f32 / classes as f32;
            ClassSignature {
                primary: hsv(hue, 0.85, 0.9),
                secondary: hsv(hue, 0.85, 0.55),
                texture: textures[j % textures.len()],
            }
        })
        .collect()
}

fn decoy_colour(sig: &ClassSignature) -> [f32; 3] {
    let step = 1.0 / (LEVELS - 1.0);
    let [r, g, b] = sig.primary;
    let g = if g + step <= 1.0 { g + step } else { g - step };
    [r, quantize(g), b]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplits {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

pub fn generate_synthetic(params: &SyntheticParams, rng: RngState) -> Result<SyntheticSplits> {
    Ok(SyntheticSplits {
        train: generate_split(params, Split::Train, rng)?,
        val: generate_split(params, Split::Val, rng)?,
        test: generate_split(params, Split::Test, rng)?,
    })
}

/// Generates one split. Each split draws from its own child stream, so
/// changing the size of one split leaves the others untouched.
pub fn generate_split(params: &SyntheticParams, split: Split, rng: RngState) -> Result<DatasetManifest> {
    params.validate()?;
    let palette = class_palette(params.classes);
    let tag = match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    };
    let mut stream = rng.child(tag).stream(Stream::Data);
    let samples = (0..params.count(split))
        .map(|i| render_scene(params, &palette, &mut stream, format!("{split}_{i:05}")))
        .collect();
    Ok(DatasetManifest {
        categories: (0..params.classes).map(|j| format!("class_{j}")).collect(),
        split,
        samples,
        synthetic: Some(SyntheticProvenance {
            params: params.clone(),
            seed: rng.seed,
        }),
    })
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Disc,
}

fn render_scene(
    params: &SyntheticParams,
    palette: &[ClassSignature],
    rng: &mut ChaCha8Rng,
    name: String,
) -> AnnotatedImage {
    let n = params.image_size;
    let mut px = vec![0f32; n * n * 3];
    for cell in px.chunks_exact_mut(3) {
        let v = quantize(0.1 + 0.3 * rng.gen::<f32>());
        cell.copy_from_slice(&[v, v, v]);
    }

    let decoys = if params.decoys > 0 { rng.gen_range(0..=params.decoys) } else { 0 };
    for _ in 0..decoys {
        let colour = decoy_colour(&palette[rng.gen_range(0..palette.len())]);
        let side = rng.gen_range(params.min_shape.div_ceil(2)..=params.min_shape);
        let (x0, y0) = (rng.gen_range(0..=n - side), rng.gen_range(0..=n - side));
        for r in y0..y0 + side {
            for c in x0..x0 + side {
                px[(r * n + c) * 3..][..3].copy_from_slice(&colour);
            }
        }
    }

    let k = rng.gen_range(params.min_objects..=params.max_objects);
    let mut classes: Vec<usize> = (0..params.classes).collect();
    classes.shuffle(rng);
    classes.truncate(k);

    // owner[cell] = index into `classes` of the object visible at that pixel
    let mut owner: Vec<Option<usize>> = vec![None; n * n];
    for (obj, &class) in classes.iter().enumerate() {
        let sig = &palette[class];
        let shape = if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Disc };
        let (w, h) = match shape {
            Shape::Rect => (
                rng.gen_range(params.min_shape..=params.max_shape),
                rng.gen_range(params.min_shape..=params.max_shape),
            ),
            Shape::Disc => {
                let d = rng.gen_range(params.min_shape..=params.max_shape);
                (d, d)
            }
        };
        let (x0, y0) = (rng.gen_range(0..=n - w), rng.gen_range(0..=n - h));
        for r in 0..h {
            for c in 0..w {
                if let Shape::Disc = shape {
                    let dy = r as f32 + 0.5 - h as f32 / 2.0;
                    let dx = c as f32 + 0.5 - w as f32 / 2.0;
                    if dx * dx + dy * dy > (w as f32 / 2.0).powi(2) {
                        continue;
                    }
                }
                let colour = if sig.texture.primary_at(r, c) {
                    sig.primary
                } else {
                    sig.secondary
                };
                let cell = (y0 + r) * n + x0 + c;
                px[cell * 3..][..3].copy_from_slice(&colour);
                owner[cell] = Some(obj);
            }
        }
    }

    let mut boxes = Vec::with_capacity(k);
    for (obj, &class) in classes.iter().enumerate() {
        let mut ext: Option<(usize, usize, usize, usize)> = None;
        for (cell, o) in owner.iter().enumerate() {
            if *o == Some(obj) {
                let (r, c) = (cell / n, cell % n);
                ext = Some(match ext {
                    None => (c, r, c, r),
                    Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c), y1.max(r)),
                });
            }
        }
        if let Some((x0, y0, x1, y1)) = ext {
            boxes.push(BoundingBox::new(
                x0 as f64,
                y0 as f64,
                (x1 - x0 + 1) as f64,
                (y1 - y0 + 1) as f64,
                class,
            ));
        }
    }

    AnnotatedImage::from_boxes(name, n as u32, n as u32, boxes).with_pixels(px)
}
