//! Annotation ingestion, synthetic dataset generation and manifest
//! persistence.

mod coco;
mod manifest;
mod synthetic;
mod voc;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use coco::{parse_coco_json, CocoImport};
pub use manifest::{load_manifest, save_manifest, MANIFEST_FILE, MANIFEST_VERSION, PIXELS_FILE};
pub use synthetic::{
    class_palette, generate_split, generate_synthetic, ClassSignature, SyntheticParams,
    SyntheticSplits, Texture,
};
pub use voc::{parse_voc_xml, CategoryMap};

/// Axis-aligned box in pixel coordinates: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub label: usize,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, label: usize) -> Self {
        Self { x, y, w, h, label }
    }

    /// Intersects the box with `[0, width] × [0, height]`.
    pub(crate) fn clamped(self, width: f64, height: f64) -> Self {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One image with its boxes, derived label set, and (for synthetic or
/// loaded data) the `height × width × 3` pixel array in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoundingBox>,
    /// Distinct present categories, ascending.
    pub labels: Vec<usize>,
    pub pixels: Option<Vec<f32>>,
}

impl AnnotatedImage {
    /// Builds an image whose label set is the set of box labels.
    pub fn from_boxes(file_name: impl Into<String>, width: u32, height: u32, boxes: Vec<BoundingBox>) -> Self {
        let labels = label_set(&boxes);
        Self {
            file_name: file_name.into(),
            width,
            height,
            boxes,
            labels,
            pixels: None,
        }
    }

    pub fn with_pixels(mut self, pixels: Vec<f32>) -> Self {
        self.pixels = Some(pixels);
        self
    }

    /// Checks every per-image invariant against a category count.
    pub fn validate(&self, num_categories: usize) -> Result<()> {
        let name = &self.file_name;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Format(format!("{name}: zero image size")));
        }
        if self.labels.is_empty() {
            return Err(Error::Domain(format!("{name}: empty label set")));
        }
        if self.labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!("{name}: labels not distinct and sorted")));
        }
        if self.labels != label_set(&self.boxes) {
            return Err(Error::Domain(format!(
                "{name}: label set differs from the labels of its boxes"
            )));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for b in &self.boxes {
            if b.label >= num_categories {
                return Err(Error::Domain(format!(
                    "{name}: label {} out of range for {num_categories} categories",
                    b.label
                )));
            }
            if !(b.w > 0.0 && b.h > 0.0) {
                return Err(Error::MalformedBox(format!("{name}: non-positive extent {b:?}")));
            }
            if b.x < 0.0 || b.y < 0.0 || b.x + b.w > w || b.y + b.h > h {
                return Err(Error::MalformedBox(format!("{name}: box outside image {b:?}")));
            }
        }
        if let Some(px) = &self.pixels {
            let expect = self.width as usize * self.height as usize * 3;
            if px.len() != expect {
                return Err(Error::dim("pixel array", expect, px.len()));
            }
            if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain(format!("{name}: pixel outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn label_set(boxes: &[BoundingBox]) -> Vec<usize> {
    boxes
        .iter()
        .map(|b| b.label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Provenance of a generated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProvenance {
    pub params: SyntheticParams,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub categories: Vec<String>,
    pub split: Split,
    pub samples: Vec<AnnotatedImage>,
    pub synthetic: Option<SyntheticProvenance>,
}

impl DatasetManifest {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Format("manifest has no categories".into()));
        }
        for s in &self.samples {
            s.validate(self.categories.len())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_boxes() {
        let img = AnnotatedImage::from_boxes(
            "a",
            10,
            10,
            vec![
                BoundingBox::new(0.0, 0.0, 2.0, 2.0, 2),
                BoundingBox::new(1.0, 1.0, 2.0, 2.0, 0),
                BoundingBox::new(3.0, 3.0, 2.0, 2.0, 2),
            ],
        );
        assert_eq!(img.labels, vec![0, 2]);
        img.validate(3).unwrap();
        assert!(img.validate(2).is_err());
    }

    #[test]
    fn validate_rejects_label_without_box() {
        let mut img = AnnotatedImage::from_boxes("a", 4, 4, vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0, 0)]);
        img.labels.push(1);
        assert!(matches!(img.validate(3), Err(Error::Domain(_))));
    }

    #[test]
    fn clamp_to_image() {
        let b = BoundingBox::new(-2.0, 3.0, 10.0, 10.0, 0).clamped(5.0, 6.0);
        assert_eq!((b.x, b.y, b.w, b.h), (0.0, 3.0, 5.0, 3.0));
    }
}
