//! PSNR and SSIM on the 8-bit scale, with task-region restriction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Peak pixel value for 8-bit imagery.
pub const PIXEL_MAX: f64 = 255.0;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SsimMode {
    /// Mean over all 8×8 windows at stride 1.
    #[default]
    Windowed,
    /// A single window spanning the whole image.
    Global,
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared error on the [0, 255] scale, optionally restricted to `region`.
pub fn mse(a: &Image, b: &Image, region: Option<&Mask>) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w, c) = a.dims();
    let (sum, count) = match region {
        None => {
            let sum: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| {
                    let d = (x as f64 - y as f64) * PIXEL_MAX;
                    d * d
                })
                .sum();
            (sum, a.data().len())
        }
        Some(mask) => {
            if mask.height() != h || mask.width() != w {
                return Err(Error::Shape(format!(
                    "region {}x{} does not match image {h}x{w}",
                    mask.height(),
                    mask.width()
                )));
            }
            let mut sum = 0.0;
            let mut count = 0;
            for row in 0..h {
                for col in 0..w {
                    if !mask.get(row, col) {
                        continue;
                    }
                    for (&x, &y) in a.pixel(row, col).iter().zip(b.pixel(row, col)) {
                        let d = (x as f64 - y as f64) * PIXEL_MAX;
                        sum += d * d;
                    }
                    count += c;
                }
            }
            (sum, count)
        }
    };
    if count == 0 {
        return Err(Error::Config("PSNR region is empty".into()));
    }
    Ok(sum / count as f64)
}

/// `10·log10(255² / MSE)`; `f64::INFINITY` when the inputs agree exactly.
pub fn psnr(a: &Image, b: &Image, region: Option<&Mask>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, region)?, PIXEL_MAX))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// PSNR between two real-valued signals with an explicit peak.
pub fn signal_psnr(reference: &[f32], estimate: &[f32], peak: f64) -> Result<f64> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(Error::Shape(format!(
            "signal lengths {} and {} are not comparable",
            reference.len(),
            estimate.len()
        )));
    }
    let mse = reference
        .iter()
        .zip(estimate)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

/// SSIM of one pair of sample sets.
fn ssim_stats(x: &[f64], y: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * PIXEL_MAX).powi(2);
    let c2 = (SSIM_K2 * PIXEL_MAX).powi(2);
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let da = a - mx;
        let db = b - my;
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    vx /= n;
    vy /= n;
    cov /= n;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with_mode(a, b, SsimMode::Windowed)
}

pub fn ssim_with_mode(a: &Image, b: &Image, mode: SsimMode) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w, c) = a.dims();
    if h == 0 || w == 0 {
        return Err(Error::Shape("SSIM of an empty image".into()));
    }
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let plane = |im: &Image, ch: usize| -> Vec<f64> {
        im.data()
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|&v| v as f64 * PIXEL_MAX)
            .collect()
    };
    let (win_h, win_w) = match mode {
        SsimMode::Windowed => (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w)),
        SsimMode::Global => (h, w),
    };
    let mut total = 0.0;
    let mut windows = 0usize;
    let mut xs = Vec::with_capacity(win_h * win_w);
    let mut ys = Vec::with_capacity(win_h * win_w);
    for ch in 0..c {
        let pa = plane(a, ch);
        let pb = plane(b, ch);
        for top in 0..=(h - win_h) {
            for left in 0..=(w - win_w) {
                xs.clear();
                ys.clear();
                for row in top..top + win_h {
                    let base = row * w + left;
                    xs.extend_from_slice(&pa[base..base + win_w]);
                    ys.extend_from_slice(&pb[base..base + win_w]);
                }
                total += ssim_stats(&xs, &ys);
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// One evaluated transmission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub snr_db: f64,
    pub depth: u8,
    pub tier: usize,
    /// Codec quality against the selected image.
    pub psnr_db: f64,
    /// Fidelity of the task region against the original image.
    pub task_psnr_db: f64,
    pub ssim: f64,
    pub payload_bytes: usize,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "run_id",
    "snr_db",
    "depth",
    "tier",
    "psnr_db",
    "task_psnr_db",
    "ssim",
    "payload_bytes",
];

/// Formats a metric for CSV output; infinities become `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

pub fn parse_metric(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t
            .parse()
            .map_err(|_| Error::Config(format!("not a metric value: {t:?}"))),
    }
}

impl MetricsReport {
    pub fn csv_record(&self) -> [String; 8] {
        [
            self.run_id.clone(),
            fmt_metric(self.snr_db),
            self.depth.to_string(),
            self.tier.to_string(),
            fmt_metric(self.psnr_db),
            fmt_metric(self.task_psnr_db),
            fmt_metric(self.ssim),
            self.payload_bytes.to_string(),
        ]
    }
}

/// Appends report rows to `path`, writing the header when the file is new.
pub fn append_reports(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record(REPORT_COLUMNS)?;
    }
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        out.push(MetricsReport {
            run_id: field(0).to_string(),
            snr_db: parse_metric(field(1))?,
            depth: field(2)
                .parse()
                .map_err(|_| Error::Config(format!("bad depth {:?}", field(2))))?,
            tier: field(3)
                .parse()
                .map_err(|_| Error::Config(format!("bad tier {:?}", field(3))))?,
            psnr_db: parse_metric(field(4))?,
            task_psnr_db: parse_metric(field(5))?,
            ssim: parse_metric(field(6))?,
            payload_bytes: field(7)
                .parse()
                .map_err(|_| Error::Config(format!("bad payload {:?}", field(7))))?,
        });
    }
    Ok(out)
}
