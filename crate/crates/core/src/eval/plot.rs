//! Minimal static line plots rendered straight to PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14], [23, 190, 207]];

#[derive(Debug, Clone)]
pub struct Series {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Optional shaded band `(low, high)` at the same abscissae.
    pub band: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy)]
pub struct Axes {
    pub width: u32,
    pub height: u32,
    pub log_x: bool,
    pub log_y: bool,
}

impl Default for Axes {
    fn default() -> Self {
        Self { width: 800, height: 600, log_x: false, log_y: false }
    }
}

struct Frame {
    axes: Axes,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    margin: u32,
}

impl Frame {
    fn tx(&self, v: f64, log: bool) -> Option<f64> {
        if log {
            (v > 0.0).then(|| v.log10())
        } else {
            v.is_finite().then_some(v)
        }
    }

    fn pixel(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let x = self.tx(x, self.axes.log_x)?;
        let y = self.tx(y, self.axes.log_y)?;
        let w = (self.axes.width - 2 * self.margin) as f64;
        let h = (self.axes.height - 2 * self.margin) as f64;
        let px = self.margin as f64 + (x - self.x0) / (self.x1 - self.x0) * w;
        let py = (self.axes.height - self.margin) as f64 - (y - self.y0) / (self.y1 - self.y0) * h;
        Some((px, py))
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (xa, ya): (f64, f64), (xb, yb): (f64, f64), c: Rgb<u8>) {
    let steps = ((xb - xa).abs().max((yb - ya).abs()).ceil() as i64).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = ((xa + t * (xb - xa)).round() as i64, (ya + t * (yb - ya)).round() as i64);
        put(img, x, y, c);
        put(img, x, y + 1, c);
    }
}

/// Draws the series into a PNG at `path`. Output bytes depend only on the inputs.
pub fn render_png(series: &[Series], axes: Axes, path: &Path) -> Result<()> {
    let frame = frame_for(series, axes)?;
    let mut img = RgbImage::from_pixel(axes.width, axes.height, Rgb([255, 255, 255]));
    for (i, s) in series.iter().enumerate() {
        let [r, g, b] = PALETTE[i % PALETTE.len()];
        if let Some((lo, hi)) = &s.band {
            let light = Rgb([r / 3 + 170, g / 3 + 170, b / 3 + 170]);
            for ((&x, &l), &h) in s.x.iter().zip(lo).zip(hi) {
                if let (Some(a), Some(bb)) = (frame.pixel(x, l), frame.pixel(x, h)) {
                    line(&mut img, a, bb, light);
                }
            }
        }
        let color = Rgb([r, g, b]);
        let pts: Vec<Option<(f64, f64)>> = s.x.iter().zip(&s.y).map(|(&x, &y)| frame.pixel(x, y)).collect();
        for w in pts.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                line(&mut img, a, b, color);
            }
        }
    }
    let (m, wd, ht) = (frame.margin as f64, axes.width as f64, axes.height as f64);
    let black = Rgb([0, 0, 0]);
    line(&mut img, (m, ht - m), (wd - m, ht - m), black);
    line(&mut img, (m, m), (m, ht - m), black);
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn frame_for(series: &[Series], axes: Axes) -> Result<Frame> {
    if axes.width < 100 || axes.height < 100 {
        return Err(Error::InvalidParameter("plot must be at least 100x100".into()));
    }
    let probe = Frame { axes, x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0, margin: 40 };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        xs.extend(s.x.iter().filter_map(|&v| probe.tx(v, axes.log_x)));
        ys.extend(s.y.iter().filter_map(|&v| probe.tx(v, axes.log_y)));
        if let Some((lo, hi)) = &s.band {
            ys.extend(lo.iter().chain(hi).filter_map(|&v| probe.tx(v, axes.log_y)));
        }
    }
    let range = |v: &[f64]| -> Result<(f64, f64)> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return Err(Error::EmptySet);
        }
        let pad = if hi > lo { 0.03 * (hi - lo) } else { 0.5 };
        Ok((lo - pad, hi + pad))
    };
    let (x0, x1) = range(&xs)?;
    let (y0, y1) = range(&ys)?;
    Ok(Frame { axes, x0, x1, y0, y1, margin: 40 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_deterministic_png() {
        let dir = tempfile::tempdir().unwrap();
        let s = Series { x: (1..20).map(f64::from).collect(), y: (1..20).map(|k| 1.0 / f64::from(k * k)).collect(), band: None };
        let axes = Axes { log_x: true, log_y: true, ..Axes::default() };
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_png(&[s.clone()], axes, &a).unwrap();
        render_png(&[s], axes, &b).unwrap();
        let bytes = std::fs::read(&a).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert_eq!(bytes, std::fs::read(&b).unwrap());
        let img = image::open(&a).unwrap();
        assert_eq!((img.width(), img.height()), (800, 600));
    }

    #[test]
    fn empty_plot_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = Series { x: vec![-1.0], y: vec![1.0], band: None };
        let axes = Axes { log_x: true, ..Axes::default() };
        assert!(render_png(&[s], axes, &dir.path().join("x.png")).is_err());
    }
}
