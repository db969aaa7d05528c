//! PSNR and SSIM, plus dataset-level evaluation reports.
//!
//! PSNR pools every channel. SSIM runs on BT.601 luma with the usual
//! 11x11 Gaussian window (σ = 1.5), `C1 = (0.01 L)²`, `C2 = (0.03 L)²`,
//! averaged over valid (unpadded) window positions.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::SizeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB; `+∞` for identical inputs.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let n = win.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| win[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity on luma; symmetric in its arguments.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::SizeMismatch(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let x = a.luma().into_data();
    let y = b.luma().into_data();
    let win = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(&x, h, w, &win);
    let mu_y = filter_valid(&y, h, w, &win);
    let e_xx = filter_valid(&xx, h, w, &win);
    let e_yy = filter_valid(&yy, h, w, &win);
    let e_xy = filter_valid(&xy, h, w, &win);
    let c1 = (SSIM_K1 * max_val).powi(2);
    let c2 = (SSIM_K2 * max_val).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

/// Serializes non-finite PSNR values as the string `"inf"`.
mod db {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR value {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub count: usize,
    pub failures: Vec<String>,
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub dataset: String,
    pub checkpoint: Option<String>,
    pub per_image: Vec<ImageScore>,
    pub aggregate: Aggregate,
}

impl MetricReport {
    pub fn from_scores(
        dataset: String,
        checkpoint: Option<String>,
        per_image: Vec<ImageScore>,
        failures: Vec<String>,
    ) -> Self {
        let count = per_image.len();
        let (mean_psnr, mean_ssim) = if count == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (
                per_image.iter().map(|s| s.psnr).sum::<f64>() / count as f64,
                per_image.iter().map(|s| s.ssim).sum::<f64>() / count as f64,
            )
        };
        MetricReport {
            version: REPORT_VERSION,
            dataset,
            checkpoint,
            per_image,
            aggregate: Aggregate {
                mean_psnr,
                mean_ssim,
                count,
                failures,
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut s = format!("dataset: {}\n", self.dataset);
        if let Some(c) = &self.checkpoint {
            s += &format!("checkpoint: {c}\n");
        }
        s += &format!("{:<12} {:>10} {:>8}\n", "id", "PSNR(dB)", "SSIM");
        for r in &self.per_image {
            s += &format!("{:<12} {:>10.4} {:>8.4}\n", r.id, r.psnr, r.ssim);
        }
        let a = &self.aggregate;
        s += &format!(
            "{:<12} {:>10.4} {:>8.4}  (n = {})\n",
            "mean", a.mean_psnr, a.mean_ssim, a.count
        );
        if !a.failures.is_empty() {
            s += &format!("failures: {}\n", a.failures.join(", "));
        }
        s
    }
}

/// Scores `restored_dir/<id>.png` against each sample's sharp image.
/// Missing or unreadable restorations are listed as failures and excluded
/// from the means.
pub fn evaluate(manifest: &DatasetManifest, restored_dir: &Path) -> Result<MetricReport> {
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for rec in &manifest.samples {
        let path = restored_dir.join(format!("{}.png", rec.id));
        let restored = match ImageTensor::load(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("sample {}: {e}", rec.id);
                failures.push(rec.id.clone());
                continue;
            }
        };
        let sharp = ImageTensor::load(manifest.resolve(&rec.sharp_path))?;
        scores.push(score(&rec.id, &restored, &sharp)?);
    }
    Ok(MetricReport::from_scores(
        manifest.name(),
        None,
        scores,
        failures,
    ))
}

pub fn score(id: &str, restored: &ImageTensor, sharp: &ImageTensor) -> Result<ImageScore> {
    Ok(ImageScore {
        id: id.to_string(),
        psnr: psnr(restored, sharp, 1.0)?,
        ssim: ssim(restored, sharp, 1.0)?,
    })
}
