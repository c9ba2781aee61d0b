//! COCO JSON subset: `images`, `annotations` and `categories`. Segmentation
//! and `iscrowd` fields are ignored.

use std::collections::{BTreeMap, HashMap};

use serde::Deserialize;

use super::{AnnotatedImage, BoundingBox, DatasetManifest, Split};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct Document {
    images: Vec<Image>,
    annotations: Vec<Annotation>,
    categories: Vec<Category>,
}

#[derive(Debug, Deserialize)]
struct Image {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
}

#[derive(Debug, Deserialize)]
struct Annotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct Category {
    id: u64,
    name: String,
}

/// A parsed COCO document plus bookkeeping about what was dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoImport {
    pub manifest: DatasetManifest,
    /// Original category ids, indexed by dense label.
    pub category_ids: Vec<u64>,
    pub dropped_zero_area: usize,
    /// Images without any surviving annotation (their label set would be empty).
    pub dropped_unannotated: Vec<String>,
}

pub fn parse_coco_json(document: &[u8], split: Split) -> Result<CocoImport> {
    let doc: Document =
        serde_json::from_slice(document).map_err(|e| Error::Format(format!("COCO JSON: {e}")))?;

    let mut cats: Vec<&Category> = doc.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    if cats.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::Format("duplicate category id".into()));
    }
    let remap: HashMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();

    let mut image_slot: HashMap<u64, usize> = HashMap::new();
    for (slot, img) in doc.images.iter().enumerate() {
        if image_slot.insert(img.id, slot).is_some() {
            return Err(Error::Format(format!("duplicate image id {}", img.id)));
        }
    }

    let mut grouped: BTreeMap<usize, Vec<BoundingBox>> = BTreeMap::new();
    let mut dropped_zero_area = 0;
    for ann in &doc.annotations {
        let slot = *image_slot.get(&ann.image_id).ok_or_else(|| {
            Error::ReferentialIntegrity(format!("annotation references unknown image_id {}", ann.image_id))
        })?;
        let label = *remap.get(&ann.category_id).ok_or_else(|| {
            Error::ReferentialIntegrity(format!(
                "annotation references unknown category_id {}",
                ann.category_id
            ))
        })?;
        let [x, y, w, h] = ann.bbox;
        if [x, y, w, h].iter().any(|v| !v.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(Error::MalformedBox(format!("bbox {:?}", ann.bbox)));
        }
        let img = &doc.images[slot];
        let b = BoundingBox::new(x, y, w, h, label).clamped(img.width as f64, img.height as f64);
        if b.w * b.h == 0.0 {
            dropped_zero_area += 1;
            continue;
        }
        grouped.entry(slot).or_default().push(b);
    }

    let mut samples = Vec::new();
    let mut dropped_unannotated = Vec::new();
    for (slot, img) in doc.images.iter().enumerate() {
        match grouped.remove(&slot) {
            Some(boxes) => samples.push(AnnotatedImage::from_boxes(
                img.file_name.clone(),
                img.width,
                img.height,
                boxes,
            )),
            None => dropped_unannotated.push(img.file_name.clone()),
        }
    }

    let manifest = DatasetManifest {
        categories: cats.iter().map(|c| c.name.clone()).collect(),
        split,
        samples,
        synthetic: None,
    };
    manifest.validate()?;
    Ok(CocoImport {
        manifest,
        category_ids: cats.iter().map(|c| c.id).collect(),
        dropped_zero_area,
        dropped_unannotated,
    })
}
