//! PASCAL VOC XML subset: `size{width,height}` and
//! `object{name, bndbox{xmin,ymin,xmax,ymax}}`.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::{AnnotatedImage, BoundingBox};
use crate::error::{Error, Result};

/// Category name → dense index.
pub type CategoryMap = BTreeMap<String, usize>;

#[derive(Debug, Deserialize)]
struct Annotation {
    #[serde(default)]
    filename: Option<String>,
    #[serde(default)]
    size: Option<Size>,
    #[serde(rename = "object", default)]
    objects: Vec<Object>,
}

#[derive(Debug, Deserialize)]
struct Size {
    width: Option<f64>,
    height: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct Object {
    name: String,
    bndbox: BndBox,
}

#[derive(Debug, Deserialize)]
struct BndBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

/// Parses one VOC annotation document. VOC coordinates are 1-indexed and
/// inclusive; they are converted to 0-indexed top-left plus extent.
pub fn parse_voc_xml(document: &[u8], categories: &CategoryMap) -> Result<AnnotatedImage> {
    let text = std::str::from_utf8(document)
        .map_err(|e| Error::Format(format!("VOC document is not UTF-8: {e}")))?;
    let ann: Annotation =
        quick_xml::de::from_str(text).map_err(|e| Error::Format(format!("VOC XML: {e}")))?;

    let size = ann
        .size
        .ok_or_else(|| Error::Format("VOC annotation missing <size>".into()))?;
    let (width, height) = match (size.width, size.height) {
        (Some(w), Some(h)) if w >= 1.0 && h >= 1.0 => (w, h),
        _ => {
            return Err(Error::Format(
                "VOC <size> needs positive <width> and <height>".into(),
            ))
        }
    };
    if ann.objects.is_empty() {
        return Err(Error::Format("VOC annotation has no objects".into()));
    }

    let mut boxes = Vec::with_capacity(ann.objects.len());
    for obj in &ann.objects {
        let name = obj.name.trim();
        let label = *categories
            .get(name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))?;
        let b = &obj.bndbox;
        if b.xmax <= b.xmin || b.ymax <= b.ymin {
            return Err(Error::MalformedBox(format!(
                "object `{name}`: ({}, {}, {}, {})",
                b.xmin, b.ymin, b.xmax, b.ymax
            )));
        }
        let bx = BoundingBox::new(
            b.xmin - 1.0,
            b.ymin - 1.0,
            b.xmax - b.xmin + 1.0,
            b.ymax - b.ymin + 1.0,
            label,
        )
        .clamped(width, height);
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(Error::MalformedBox(format!("object `{name}` lies outside the image")));
        }
        boxes.push(bx);
    }

    Ok(AnnotatedImage::from_boxes(
        ann.filename.unwrap_or_default(),
        width as u32,
        height as u32,
        boxes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats() -> CategoryMap {
        [("cat", 0), ("dog", 1), ("person", 2)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    fn doc(objects: &[(&str, [u32; 4])]) -> String {
        let mut s = String::from(
            "<annotation><folder>VOC2007</folder><filename>x.jpg</filename>\
             <size><width>100</width><height>50</height><depth>3</depth></size>",
        );
        for (name, [x0, y0, x1, y1]) in objects {
            s += &format!(
                "<object><name>{name}</name><pose>Left</pose><difficult>0</difficult>\
                 <bndbox><xmin>{x0}</xmin><ymin>{y0}</ymin><xmax>{x1}</xmax><ymax>{y1}</ymax></bndbox></object>"
            );
        }
        s + "</annotation>"
    }

    #[test]
    fn full_image_box() {
        let img = parse_voc_xml(doc(&[("dog", [1, 1, 100, 50])]).as_bytes(), &cats()).unwrap();
        assert_eq!((img.width, img.height), (100, 50));
        assert_eq!(img.boxes, vec![BoundingBox::new(0.0, 0.0, 100.0, 50.0, 1)]);
        assert_eq!(img.labels, vec![1]);
    }

    #[test]
    fn duplicate_classes_dedup() {
        let img = parse_voc_xml(
            doc(&[("dog", [1, 1, 10, 10]), ("dog", [20, 5, 40, 30])]).as_bytes(),
            &cats(),
        )
        .unwrap();
        assert_eq!(img.boxes.len(), 2);
        assert_eq!(img.labels, vec![1]);

        let img = parse_voc_xml(
            doc(&[
                ("cat", [1, 1, 10, 10]),
                ("dog", [20, 5, 40, 30]),
                ("cat", [50, 5, 60, 30]),
            ])
            .as_bytes(),
            &cats(),
        )
        .unwrap();
        assert_eq!(img.boxes.len(), 3);
        assert_eq!(img.labels, vec![0, 1]);
    }

    #[test]
    fn errors() {
        let e = parse_voc_xml(doc(&[("zebra", [1, 1, 10, 10])]).as_bytes(), &cats()).unwrap_err();
        assert!(matches!(e, Error::UnknownCategory(ref n) if n == "zebra"));

        let e = parse_voc_xml(doc(&[("dog", [10, 1, 10, 10])]).as_bytes(), &cats()).unwrap_err();
        assert!(matches!(e, Error::MalformedBox(_)));

        let no_size = "<annotation><object><name>dog</name><bndbox><xmin>1</xmin><ymin>1</ymin>\
                       <xmax>5</xmax><ymax>5</ymax></bndbox></object></annotation>";
        let e = parse_voc_xml(no_size.as_bytes(), &cats()).unwrap_err();
        assert!(matches!(e, Error::Format(_)));

        assert!(matches!(
            parse_voc_xml(b"<annotation><size>", &cats()),
            Err(Error::Format(_))
        ));
    }
}
