//! On-disk dataset format: `manifest.json` index plus a `pixels.bin`
//! sidecar of little-endian `f32` values guarded by a CRC32.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, BoundingBox, DatasetManifest, Split, SyntheticProvenance};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PIXELS_FILE: &str = "pixels.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    split: Split,
    categories: Vec<String>,
    synthetic: Option<SyntheticProvenance>,
    pixels_file: String,
    pixels_bytes: u64,
    pixels_crc32: u32,
    samples: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    file_name: String,
    width: u32,
    height: u32,
    labels: Vec<usize>,
    boxes: Vec<BoundingBox>,
    /// Byte offset into the sidecar, absent when the sample has no pixels.
    pixel_offset: Option<u64>,
    pixel_count: u64,
}

/// Writes `manifest.json` and `pixels.bin` into `dir`, creating it if needed.
pub fn save_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let (pixel_offset, pixel_count) = match &s.pixels {
            Some(px) => {
                let off = blob.len() as u64;
                blob.reserve(px.len() * 4);
                for v in px {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                (Some(off), px.len() as u64)
            }
            None => (None, 0),
        };
        samples.push(SampleEntry {
            file_name: s.file_name.clone(),
            width: s.width,
            height: s.height,
            labels: s.labels.clone(),
            boxes: s.boxes.clone(),
            pixel_offset,
            pixel_count,
        });
    }
    let index = ManifestFile {
        version: MANIFEST_VERSION,
        split: manifest.split,
        categories: manifest.categories.clone(),
        synthetic: manifest.synthetic.clone(),
        pixels_file: PIXELS_FILE.to_string(),
        pixels_bytes: blob.len() as u64,
        pixels_crc32: crc32fast::hash(&blob),
        samples,
    };
    let pix_path = dir.join(PIXELS_FILE);
    fs::write(&pix_path, &blob).map_err(|e| Error::io(pix_path, e))?;
    let json = serde_json::to_vec_pretty(&index)?;
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, json).map_err(|e| Error::io(man_path, e))?;
    Ok(())
}

/// Loads a manifest from a directory or from a path to `manifest.json`.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let man_path: PathBuf = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = man_path.parent().unwrap_or(Path::new("."));
    let raw = fs::read(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let index: ManifestFile = serde_json::from_slice(&raw)
        .map_err(|e| Error::Format(format!("{}: {e}", man_path.display())))?;
    if index.version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: index.version,
            expected: MANIFEST_VERSION,
        });
    }

    let pix_path = dir.join(&index.pixels_file);
    let blob = fs::read(&pix_path).map_err(|e| Error::io(&pix_path, e))?;
    let computed = crc32fast::hash(&blob);
    if computed != index.pixels_crc32 || blob.len() as u64 != index.pixels_bytes {
        return Err(Error::Checksum {
            path: pix_path,
            stored: index.pixels_crc32,
            computed,
        });
    }

    let mut samples = Vec::with_capacity(index.samples.len());
    for e in index.samples {
        let pixels = match e.pixel_offset {
            Some(off) => {
                let start = off as usize;
                let end = start + e.pixel_count as usize * 4;
                let bytes = blob.get(start..end).ok_or_else(|| {
                    Error::Format(format!("{}: pixel range {start}..{end} out of bounds", e.file_name))
                })?;
                Some(
                    bytes
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                )
            }
            None => None,
        };
        samples.push(AnnotatedImage {
            file_name: e.file_name,
            width: e.width,
            height: e.height,
            boxes: e.boxes,
            labels: e.labels,
            pixels,
        });
    }

    let manifest = DatasetManifest {
        categories: index.categories,
        split: index.split,
        samples,
        synthetic: index.synthetic,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> DatasetManifest {
        let samples = (0..n)
            .map(|i| {
                AnnotatedImage::from_boxes(
                    format!("img{i}"),
                    2,
                    2,
                    vec![BoundingBox::new(0.0, 0.0, 1.0 + (i % 2) as f64, 1.0, i % 3)],
                )
                .with_pixels((0..12).map(|k| (k as f32 + i as f32) / 20.0).collect())
            })
            .collect();
        DatasetManifest {
            categories: vec!["a".into(), "b".into(), "c".into()],
            split: Split::Val,
            samples,
            synthetic: None,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(3);
        save_manifest(&m, dir.path()).unwrap();
        assert_eq!(load_manifest(dir.path()).unwrap(), m);
        assert_eq!(load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(0);
        save_manifest(&m, dir.path()).unwrap();
        let back = load_manifest(dir.path()).unwrap();
        assert!(back.samples.is_empty());
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&tiny(3), dir.path()).unwrap();
        let p = dir.path().join(PIXELS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&tiny(1), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
