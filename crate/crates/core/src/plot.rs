//! Rasterized line charts written as PNG.
//!
//! Charts carry no text: axes, light grid lines at the quarter marks, and
//! one polyline with point markers per series. Series colours follow
//! [`SERIES_COLOURS`] in order, which callers list next to the image.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const SERIES_COLOURS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub width: u32,
    pub height: u32,
    pub series: Vec<Series>,
}

const MARGIN: u32 = 24;

impl LineChart {
    pub fn new(series: Vec<Series>) -> Self {
        Self {
            width: 640,
            height: 400,
            series,
        }
    }

    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let pts = self.series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
        let mut b: Option<(f64, f64, f64, f64)> = None;
        for &(x, y) in pts {
            b = Some(match b {
                None => (x, x, y, y),
                Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
            });
        }
        b.map(|(x0, x1, y0, y1)| {
            let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
            let (x0, x1) = pad(x0, x1);
            let (y0, y1) = pad(y0, y1);
            (x0, x1, y0, y1)
        })
    }

    pub fn render(&self) -> Result<RgbImage> {
        if self.width <= 2 * MARGIN || self.height <= 2 * MARGIN {
            return Err(Error::Config("chart too small".into()));
        }
        let mut img = RgbImage::from_pixel(self.width, self.height, Rgb([255, 255, 255]));
        let (l, r) = (MARGIN as f64, (self.width - MARGIN) as f64);
        let (t, b) = (MARGIN as f64, (self.height - MARGIN) as f64);
        for q in 1..4 {
            let f = q as f64 / 4.0;
            line(&mut img, (l, b - f * (b - t)), (r, b - f * (b - t)), Rgb([225, 225, 225]));
            line(&mut img, (l + f * (r - l), t), (l + f * (r - l), b), Rgb([225, 225, 225]));
        }
        line(&mut img, (l, b), (r, b), Rgb([0, 0, 0]));
        line(&mut img, (l, t), (l, b), Rgb([0, 0, 0]));
        let Some((x0, x1, y0, y1)) = self.bounds() else {
            return Ok(img);
        };
        let map = |(x, y): (f64, f64)| (l + (x - x0) / (x1 - x0) * (r - l), b - (y - y0) / (y1 - y0) * (b - t));
        for (k, s) in self.series.iter().enumerate() {
            let c = Rgb(SERIES_COLOURS[k % SERIES_COLOURS.len()]);
            let pts: Vec<(f64, f64)> = s
                .points
                .iter()
                .copied()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(map)
                .collect();
            for w in pts.windows(2) {
                line(&mut img, w[0], w[1], c);
            }
            for &p in &pts {
                marker(&mut img, p, c);
            }
        }
        Ok(img)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.render()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as i64;
    for i in 0..=steps {
        let f = i as f64 / steps as f64;
        put(img, (a.0 + f * (b.0 - a.0)).round() as i64, (a.1 + f * (b.1 - a.1)).round() as i64, c);
    }
}

fn marker(img: &mut RgbImage, p: (f64, f64), c: Rgb<u8>) {
    let (x, y) = (p.0.round() as i64, p.1.round() as i64);
    for dx in -2..=2 {
        for dy in -2..=2 {
            put(img, x + dx, y + dy, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_series_pixels() {
        let chart = LineChart::new(vec![Series {
            name: "a".into(),
            points: vec![(0.0, 0.0), (1.0, 1.0)],
        }]);
        let img = chart.render().unwrap();
        assert_eq!(img.dimensions(), (640, 400));
        let colour = Rgb(SERIES_COLOURS[0]);
        assert_eq!(*img.get_pixel(MARGIN, 400 - MARGIN), colour);
        assert_eq!(*img.get_pixel(640 - MARGIN, MARGIN), colour);
    }

    #[test]
    fn empty_and_constant_series() {
        assert!(LineChart::new(vec![]).render().is_ok());
        let flat = LineChart::new(vec![Series {
            name: "c".into(),
            points: vec![(0.0, 2.0), (3.0, 2.0), (4.0, f64::NAN)],
        }]);
        assert!(flat.render().is_ok());
    }

    #[test]
    fn png_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let chart = LineChart::new(vec![Series {
            name: "a".into(),
            points: vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)],
        }]);
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        chart.save(&a).unwrap();
        chart.save(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
