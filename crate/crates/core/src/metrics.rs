//! PSNR and SSIM.
//!
//! PSNR uses a peak of 1.0 and the MSE over every pixel and channel. SSIM uses
//! the conventional 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and
//! L = 1, evaluated per channel over valid window positions and averaged
//! across channels.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::fsutil::write_atomic;
use crate::image::RgbImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(dim_err!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// PSNR in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut horiz = vec![0.0; h * ow];
    for r in 0..h {
        let row = &plane[r * w..(r + 1) * w];
        for c in 0..ow {
            horiz[r * ow + c] = taps.iter().zip(&row[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(i, t)| t * horiz[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM of one channel pair.
pub fn ssim_plane(x: &[f32], y: &[f32], h: usize, w: usize) -> f64 {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&xs, h, w, &taps);
    let my = filter_valid(&ys, h, w, &taps);
    let sxx = filter_valid(&xx, h, w, &taps);
    let syy = filter_valid(&yy, h, w, &taps);
    let sxy = filter_valid(&xy, h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    total / n as f64
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err!("SSIM needs at least {0}x{0} images, got {1}x{2}", SSIM_WINDOW, h, w));
    }
    Ok((0..3).map(|ch| ssim_plane(a.channel(ch), b.channel(ch), h, w)).sum::<f64>() / 3.0)
}

/// One evaluated (image, method) pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub image_id: String,
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image rows plus per-method means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

/// Image id used for aggregate rows.
pub const MEAN_ID: &str = "mean";

impl MetricReport {
    pub fn push(&mut self, image_id: impl Into<String>, method: impl Into<String>, a: &RgbImage, b: &RgbImage) -> Result<()> {
        let row = MetricRow { image_id: image_id.into(), method: method.into(), psnr_db: psnr(a, b)?, ssim: ssim(a, b)? };
        self.rows.push(row);
        Ok(())
    }

    /// Methods in first-appearance order.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    /// Mean PSNR and SSIM per method. Infinite PSNRs (exact reconstructions)
    /// are left out of the PSNR mean with a warning; if every PSNR of a method
    /// is infinite the mean is infinite.
    pub fn means(&self) -> Vec<MetricRow> {
        self.methods()
            .into_iter()
            .map(|m| {
                let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.method == m).collect();
                let finite: Vec<f64> = rows.iter().map(|r| r.psnr_db).filter(|p| p.is_finite()).collect();
                let skipped = rows.len() - finite.len();
                if skipped > 0 {
                    log::warn!("{m}: {skipped} image(s) with infinite PSNR excluded from the mean");
                }
                let psnr_db = if finite.is_empty() {
                    f64::INFINITY
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                };
                let ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
                MetricRow { image_id: MEAN_ID.into(), method: m, psnr_db, ssim }
            })
            .collect()
    }

    pub fn mean_for(&self, method: &str) -> Option<MetricRow> {
        self.means().into_iter().find(|r| r.method == method)
    }

    /// CSV with header `image_id,method,psnr_db,ssim`, per-image rows, then
    /// one mean row per method. Infinite PSNR is written as `inf`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image_id", "method", "psnr_db", "ssim"]).map_err(csv_err)?;
        for r in self.rows.iter().chain(self.means().iter()) {
            w.write_record([r.image_id.clone(), r.method.clone(), fmt_metric(r.psnr_db), fmt_metric(r.ssim)])
                .map_err(csv_err)?;
        }
        let mut bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        bytes.flush()?;
        Ok(bytes)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }
}

/// Formats a metric value for tables and logs; infinities become `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
