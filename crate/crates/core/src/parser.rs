//! Object parser: ground-truth boxes → per-class spatial masks → one pooled
//! feature vector per present class, plus the backward routing.
//!
//! The parser has no learnable parameters.

use std::collections::BTreeMap;

use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::numeric::{global_max_pool, hadamard, FeatureVector, Grid, SpatialMask};
use crate::scalar::Scalar;

pub type ClassMask = SpatialMask;

/// Box in grid cells: columns `x..x+w`, rows `y..y+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NormalizedBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl NormalizedBox {
    #[inline]
    pub fn covers(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.y + self.h && col >= self.x && col < self.x + self.w
    }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor().max(0.0) as usize
}

/// Maps a pixel box onto an `s × s` grid. Each coordinate is rounded half-up
/// independently; extents are clamped to at least one cell and the box is
/// kept inside the grid.
pub fn normalize_box(b: &BoundingBox, image_height: u32, image_width: u32, s: usize) -> NormalizedBox {
    let sf = s as f64;
    let (iw, ih) = (image_width as f64, image_height as f64);
    let x = round_half_up(b.x / iw * sf).min(s - 1);
    let y = round_half_up(b.y / ih * sf).min(s - 1);
    let w = round_half_up(b.w / iw * sf).max(1).min(s - x);
    let h = round_half_up(b.h / ih * sf).max(1).min(s - y);
    NormalizedBox { x, y, w, h }
}

/// Normalized boxes grouped by class label.
pub type BoxGroups = BTreeMap<usize, Vec<NormalizedBox>>;

pub fn group_boxes(boxes: &[BoundingBox], image_height: u32, image_width: u32, s: usize) -> BoxGroups {
    let mut groups = BoxGroups::new();
    for b in boxes {
        groups
            .entry(b.label)
            .or_default()
            .push(normalize_box(b, image_height, image_width, s));
    }
    groups
}

/// Mask for class `j`: on inside any class-`j` box and on background, off
/// where only boxes of other classes reach.
pub fn build_class_mask(groups: &BoxGroups, j: usize, s: usize) -> Result<ClassMask> {
    let own = groups
        .get(&j)
        .ok_or_else(|| Error::Domain(format!("class {j} has no boxes in this image")))?;
    let mut mask = ClassMask::ones(s);
    for (&k, boxes) in groups {
        if k == j {
            continue;
        }
        for nb in boxes {
            for row in nb.y..nb.y + nb.h {
                for col in nb.x..nb.x + nb.w {
                    mask.set(row, col, false);
                }
            }
        }
    }
    for nb in own {
        for row in nb.y..nb.y + nb.h {
            for col in nb.x..nb.x + nb.w {
                mask.set(row, col, true);
            }
        }
    }
    Ok(mask)
}

/// Pooled feature for one class together with what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeature<T> {
    pub z: FeatureVector<T>,
    /// Flat row-major cell of each channel's maximum.
    pub argmax: Vec<usize>,
    pub mask: ClassMask,
}

/// Class-specific features for one image, keyed by present class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureSet<T> {
    pub channels: usize,
    pub size: usize,
    pub entries: BTreeMap<usize, ClassFeature<T>>,
}

impl<T: Scalar> ClassFeatureSet<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn features(&self) -> BTreeMap<usize, FeatureVector<T>> {
        self.entries.iter().map(|(&j, e)| (j, e.z.clone())).collect()
    }
}

/// `z_j = maxpool(X ∘ M_j)` for every class with at least one box.
pub fn disentangle<T: Scalar>(
    x: &Grid<T>,
    boxes: &[BoundingBox],
    image_height: u32,
    image_width: u32,
) -> Result<ClassFeatureSet<T>> {
    if boxes.is_empty() {
        return Err(Error::Domain("image has no boxes".into()));
    }
    let s = x.size();
    let groups = group_boxes(boxes, image_height, image_width, s);
    let mut entries = BTreeMap::new();
    for &j in groups.keys() {
        let mask = build_class_mask(&groups, j, s)?;
        let pooled = global_max_pool(&hadamard(x, &mask)?);
        entries.insert(
            j,
            ClassFeature {
                z: pooled.values,
                argmax: pooled.argmax,
                mask,
            },
        );
    }
    Ok(ClassFeatureSet {
        channels: x.channels(),
        size: s,
        entries,
    })
}

/// Routes `dL/dz_j` back onto the grid. Each channel's gradient lands on its
/// argmax cell when that cell is mask-on; contributions accumulate.
pub fn disentangle_backward<T: Scalar>(
    routing: &ClassFeatureSet<T>,
    upstream: &BTreeMap<usize, FeatureVector<T>>,
) -> Result<Grid<T>> {
    if routing.entries.len() != upstream.len()
        || routing.entries.keys().zip(upstream.keys()).any(|(a, b)| a != b)
    {
        return Err(Error::Contract(format!(
            "gradient classes {:?} do not match routed classes {:?}",
            upstream.keys().collect::<Vec<_>>(),
            routing.entries.keys().collect::<Vec<_>>()
        )));
    }
    let mut grad = Grid::zeros(routing.channels, routing.size);
    let cells = routing.size * routing.size;
    for (j, entry) in &routing.entries {
        let g = &upstream[j];
        if g.dim() != routing.channels {
            return Err(Error::dim("upstream gradient", routing.channels, g.dim()));
        }
        let values = grad.values_mut();
        for (c, (&cell, &gc)) in entry.argmax.iter().zip(g.as_slice()).enumerate() {
            if entry.mask.at(cell) {
                let idx = c * cells + cell;
                values[idx] = values[idx] + gc;
            }
        }
    }
    Ok(grad)
}
