//! Scene sources: a seeded synthetic generator and a paired image/mask directory loader.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::segmentation::{decolorize, ColorMap, SegmentationMap};

/// Rendered image with its ground-truth class map.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Image,
    pub map: SegmentationMap,
}

/// Per-class fraction bounds every generated scene satisfies.
pub const MIN_CLASS_FRACTION: f64 = 0.05;
pub const MAX_CLASS_FRACTION: f64 = 0.95;

const BASE_COLORS: [[f32; 3]; 4] = [
    [0.36, 0.50, 0.30],
    [0.70, 0.66, 0.60],
    [0.20, 0.32, 0.68],
    [0.62, 0.30, 0.22],
];

fn class_color(k: usize) -> [f32; 3] {
    if k < BASE_COLORS.len() {
        BASE_COLORS[k]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)]
    }
}

/// Textured scenes of rectangles and ellipses on a background class.
///
/// Deterministic in `seed`; every class covers between 5% and 95% of each scene.
pub fn generate_synthetic(n: usize, size: usize, classes: usize, seed: u64) -> Result<Vec<SyntheticScene>> {
    if size == 0 || size % 8 != 0 {
        return Err(Error::Config(format!("scene size {size} must be a positive multiple of 8")));
    }
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if classes as f64 * MIN_CLASS_FRACTION > 1.0 {
        return Err(Error::Config(format!("{classes} classes cannot each cover 5% of a scene")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| scene(size, classes, &mut rng)).collect()
}

fn scene(size: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<SyntheticScene> {
    let map = loop {
        let m = layout(size, classes, rng);
        let fr = class_fractions(&m, classes);
        if fr.iter().all(|f| (MIN_CLASS_FRACTION..=MAX_CLASS_FRACTION).contains(f)) {
            break m;
        }
    };
    // per-class texture: tinted base color, an oriented grating and grain
    let textures: Vec<([f32; 3], f32, f32, f32, f32)> = (0..classes)
        .map(|k| {
            let base = class_color(k);
            let tint = [
                base[0] + rng.random_range(-0.05..0.05),
                base[1] + rng.random_range(-0.05..0.05),
                base[2] + rng.random_range(-0.05..0.05),
            ];
            let freq = rng.random_range(0.35..0.9);
            let angle = rng.random_range(0.0..std::f32::consts::PI);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let amp = rng.random_range(0.06..0.12);
            (tint, freq * angle.cos(), freq * angle.sin(), phase, amp)
        })
        .collect();
    let mut bytes = Vec::with_capacity(size * size * 3);
    for i in 0..size {
        for j in 0..size {
            let (tint, fx, fy, phase, amp) = textures[map[i * size + j] as usize];
            let wave = amp * (fx * j as f32 + fy * i as f32 + phase).sin();
            for t in tint {
                let grain = rng.random_range(-0.04f32..0.04);
                bytes.push(((t + wave + grain).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(SyntheticScene {
        image: Image::from_u8(size, size, 3, &bytes)?,
        map: SegmentationMap::new(size, size, classes, map)?,
    })
}

fn layout(size: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut m = vec![0u32; size * size];
    let s = size as f64;
    for k in 1..classes {
        for _ in 0..rng.random_range(1..=3) {
            let (ci, cj) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let (ri, rj) = (rng.random_range(0.1 * s..0.3 * s), rng.random_range(0.1 * s..0.3 * s));
            let ellipse = rng.random_bool(0.5);
            for i in 0..size {
                for j in 0..size {
                    let (di, dj) = ((i as f64 + 0.5 - ci) / ri, (j as f64 + 0.5 - cj) / rj);
                    let inside = if ellipse {
                        di * di + dj * dj <= 1.0
                    } else {
                        di.abs() <= 1.0 && dj.abs() <= 1.0
                    };
                    if inside {
                        m[i * size + j] = k as u32;
                    }
                }
            }
        }
    }
    m
}

fn class_fractions(m: &[u32], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &c in m {
        counts[c as usize] += 1;
    }
    counts.into_iter().map(|c| c as f64 / m.len() as f64).collect()
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Loads `images/<stem>.png` with `masks/<stem>.png` pairs from `dir`, in stem order.
pub fn load_dataset(dir: &Path, colors: &ColorMap) -> Result<Vec<(Image, SegmentationMap)>> {
    let images = png_stems(&dir.join("images"))?;
    let masks = png_stems(&dir.join("masks"))?;
    if images.is_empty() && masks.is_empty() {
        log::warn!("no image/mask pairs under {}", dir.display());
        return Ok(Vec::new());
    }
    if let Some((stem, path)) = masks.iter().find(|(s, _)| !images.contains_key(*s)) {
        return Err(Error::Ingestion {
            path: path.clone(),
            msg: format!("mask {stem} has no matching image"),
        });
    }
    let mut out = Vec::with_capacity(images.len());
    for (stem, ipath) in &images {
        let mpath = masks.get(stem).ok_or_else(|| Error::Ingestion {
            path: ipath.clone(),
            msg: format!("image {stem} has no matching mask"),
        })?;
        let image = Image::load_png(ipath)?;
        let mask_rgb = Image::load_png(mpath)?;
        if mask_rgb.height() != image.height() || mask_rgb.width() != image.width() {
            return Err(Error::Ingestion {
                path: mpath.clone(),
                msg: format!(
                    "mask is {}x{} but image is {}x{}",
                    mask_rgb.height(),
                    mask_rgb.width(),
                    image.height(),
                    image.width()
                ),
            });
        }
        let map = decolorize(&mask_rgb, colors).map_err(|e| Error::Ingestion {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        out.push((image, map));
    }
    Ok(out)
}
