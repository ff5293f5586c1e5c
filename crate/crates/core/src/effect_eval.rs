//! Linear predictor of post-transmission task-region quality.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::segmentation::SegmentationMap;
use crate::selection::TaskSpec;

/// Regressor inputs: task-pixel fraction and normalized SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalFeatures {
    pub x_s: f64,
    pub x_c: f64,
}

impl EvalFeatures {
    pub fn new(x_s: f64, x_c: f64) -> Result<Self> {
        if !x_s.is_finite() || !x_c.is_finite() {
            return Err(Error::Domain(format!("non-finite features ({x_s}, {x_c})")));
        }
        Ok(Self { x_s, x_c })
    }
}

/// SNR interval used to normalize the channel feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrRange {
    pub min_db: f64,
    pub max_db: f64,
}

impl SnrRange {
    pub fn new(min_db: f64, max_db: f64) -> Result<Self> {
        if !(min_db.is_finite() && max_db.is_finite() && min_db < max_db) {
            return Err(Error::Config(format!("invalid SNR range [{min_db}, {max_db}]")));
        }
        Ok(Self { min_db, max_db })
    }

    pub fn normalize(&self, snr_db: f64) -> f64 {
        ((snr_db - self.min_db) / (self.max_db - self.min_db)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalModel {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub alpha: f64,
}

impl EvalModel {
    pub fn new(w0: f64, w1: f64, w2: f64) -> Self {
        Self {
            w0,
            w1,
            w2,
            alpha: 0.0,
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn weights(&self) -> [f64; 3] {
        [self.w0, self.w1, self.w2]
    }

    fn with_weights(&self, w: [f64; 3]) -> Self {
        Self {
            w0: w[0],
            w1: w[1],
            w2: w[2],
            alpha: self.alpha,
        }
    }
}

/// One observation: features and the measured task-region PSNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub x_s: f64,
    pub x_c: f64,
    pub y: f64,
}

impl TrainSample {
    pub fn new(features: EvalFeatures, y: f64) -> Result<Self> {
        if !y.is_finite() {
            return Err(Error::Domain(format!("target {y} is not finite")));
        }
        Ok(Self {
            x_s: features.x_s,
            x_c: features.x_c,
            y,
        })
    }

    pub fn features(&self) -> EvalFeatures {
        EvalFeatures {
            x_s: self.x_s,
            x_c: self.x_c,
        }
    }
}

pub fn predict(model: &EvalModel, f: &EvalFeatures) -> f64 {
    model.w0 + model.w1 * f.x_s + model.w2 * f.x_c
}

fn require_samples(samples: &[TrainSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    Ok(())
}

/// Mean squared residual.
pub fn loss(model: &EvalModel, samples: &[TrainSample]) -> Result<f64> {
    require_samples(samples)?;
    let total: f64 = samples
        .iter()
        .map(|s| {
            let r = s.y - predict(model, &s.features());
            r * r
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// Gradient of [`loss`] with respect to `(w0, w1, w2)`.
pub fn gradient(model: &EvalModel, samples: &[TrainSample]) -> Result<[f64; 3]> {
    require_samples(samples)?;
    let mut g = [0.0; 3];
    for s in samples {
        let r = s.y - predict(model, &s.features());
        g[0] += r;
        g[1] += s.x_s * r;
        g[2] += s.x_c * r;
    }
    let scale = -2.0 / samples.len() as f64;
    Ok(g.map(|v| v * scale))
}

/// Fitted model plus the loss before each step and after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: EvalModel,
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent from the zero model.
pub fn fit(samples: &[TrainSample], alpha: f64, epochs: usize) -> Result<EvalModel> {
    Ok(fit_from(EvalModel::zero(), samples, alpha, epochs)?.model)
}

pub fn fit_from(
    start: EvalModel,
    samples: &[TrainSample],
    alpha: f64,
    epochs: usize,
) -> Result<FitReport> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("learning rate alpha={alpha} must be finite and >= 0")));
    }
    if samples.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 training samples, got {}",
            samples.len()
        )));
    }
    let mut model = EvalModel { alpha, ..start };
    let mut losses = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        losses.push(loss(&model, samples)?);
        let g = gradient(&model, samples)?;
        let w = model.weights();
        model = model.with_weights([w[0] - alpha * g[0], w[1] - alpha * g[1], w[2] - alpha * g[2]]);
        if model.weights().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "evaluator fit diverged with alpha={alpha}"
            )));
        }
    }
    let last = loss(&model, samples)?;
    if !last.is_finite() {
        return Err(Error::Numerical(format!("evaluator fit diverged with alpha={alpha}")));
    }
    losses.push(last);
    Ok(FitReport { model, losses })
}

/// Task-pixel fraction of `map` and normalized SNR.
pub fn extract_features(
    image: &Image,
    map: &SegmentationMap,
    task: &TaskSpec,
    snr_db: f64,
    range: &SnrRange,
) -> Result<EvalFeatures> {
    if image.height() != map.height() || image.width() != map.width() {
        return Err(Error::Shape(format!(
            "map {}x{} does not match image {}x{}",
            map.height(),
            map.width(),
            image.height(),
            image.width()
        )));
    }
    task.validate(map.num_classes())?;
    let hits = map.classes().iter().filter(|c| task.contains(**c)).count();
    EvalFeatures::new(hits as f64 / map.classes().len() as f64, range.normalize(snr_db))
}

pub fn write_samples(path: &Path, samples: &[TrainSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<TrainSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let s: TrainSample = row?;
        if !(s.x_s.is_finite() && s.x_c.is_finite() && s.y.is_finite()) {
            return Err(Error::Ingestion {
                path: path.to_path_buf(),
                msg: format!("non-finite training row {s:?}"),
            });
        }
        out.push(s);
    }
    Ok(out)
}
