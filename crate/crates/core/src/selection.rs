//! Task-driven background suppression ahead of the codecs.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::ImageEncoder;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::effect_eval::{extract_features, predict, EvalModel, SnrRange};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::segmentation::SegmentationMap;

/// Lossless format used for payload accounting, recorded in run manifests.
pub const PAYLOAD_CODEC: &str = "png/compression=best/filter=adaptive";

/// Classes the receiver cares about and the fill used when only they are sent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_classes: BTreeSet<u32>,
    pub background_fill: [u8; 3],
}

impl TaskSpec {
    pub fn new(classes: impl IntoIterator<Item = u32>, background_fill: [u8; 3]) -> Result<Self> {
        let task_classes: BTreeSet<u32> = classes.into_iter().collect();
        if task_classes.is_empty() {
            return Err(Error::Config("task class set is empty".into()));
        }
        Ok(Self {
            task_classes,
            background_fill,
        })
    }

    /// Checks the class set against a `num_classes`-way label space.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.task_classes.is_empty() {
            return Err(Error::Config("task class set is empty".into()));
        }
        if let Some(&c) = self.task_classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Config(format!(
                "task class {c} outside [0, {num_classes})"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, class: u32) -> bool {
        self.task_classes.contains(&class)
    }
}

/// Background treatment of one tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurKernel {
    /// Odd box-filter width; 1 leaves the background untouched.
    Mean(usize),
    /// Background replaced by the task's fill color.
    TaskOnly,
}

impl BlurKernel {
    /// Ordering key: larger means stronger suppression.
    fn strength(&self) -> usize {
        match self {
            BlurKernel::Mean(k) => *k,
            BlurKernel::TaskOnly => usize::MAX,
        }
    }
}

impl fmt::Display for BlurKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlurKernel::Mean(k) => write!(f, "{k}"),
            BlurKernel::TaskOnly => f.write_str("task_only"),
        }
    }
}

impl FromStr for BlurKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "task_only" | "TASK_ONLY" => Ok(BlurKernel::TaskOnly),
            other => other
                .parse()
                .map(BlurKernel::Mean)
                .map_err(|_| Error::Config(format!("bad blur kernel {other:?}"))),
        }
    }
}

impl Serialize for BlurKernel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BlurKernel::Mean(k) => s.serialize_u64(*k as u64),
            BlurKernel::TaskOnly => s.serialize_str("task_only"),
        }
    }
}

impl<'de> Deserialize<'de> for BlurKernel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) => Ok(BlurKernel::Mean(k as usize)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Tier active for predicted quality at or above `threshold`, up to the next tier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurTier {
    pub threshold: f64,
    pub kernel: BlurKernel,
}

/// Ascending quality tiers mapped to decreasing background suppression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurPolicy {
    tiers: Vec<BlurTier>,
}

impl Default for BlurPolicy {
    fn default() -> Self {
        Self::new(vec![
            BlurTier { threshold: f64::NEG_INFINITY, kernel: BlurKernel::TaskOnly },
            BlurTier { threshold: 18.0, kernel: BlurKernel::Mean(15) },
            BlurTier { threshold: 21.0, kernel: BlurKernel::Mean(9) },
            BlurTier { threshold: 24.0, kernel: BlurKernel::Mean(5) },
            BlurTier { threshold: 27.0, kernel: BlurKernel::Mean(1) },
        ])
        .expect("default policy is valid")
    }
}

impl BlurPolicy {
    pub fn new(tiers: Vec<BlurTier>) -> Result<Self> {
        let p = Self { tiers };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let tiers = &self.tiers;
        if tiers.is_empty() {
            return Err(Error::Config("blur policy has no tiers".into()));
        }
        for t in tiers {
            if t.threshold.is_nan() {
                return Err(Error::Config("blur tier threshold is NaN".into()));
            }
            if let BlurKernel::Mean(k) = t.kernel {
                if k == 0 || k % 2 == 0 {
                    return Err(Error::Config(format!("blur kernel {k} must be odd and positive")));
                }
            }
        }
        for w in tiers.windows(2) {
            if w[1].threshold <= w[0].threshold {
                return Err(Error::Config("blur tier thresholds must strictly increase".into()));
            }
            if w[1].kernel.strength() > w[0].kernel.strength() {
                return Err(Error::Config(
                    "blur kernels must not grow as predicted quality rises".into(),
                ));
            }
        }
        if tiers.last().map(|t| t.kernel) != Some(BlurKernel::Mean(1)) {
            return Err(Error::Config("highest blur tier must be kernel 1".into()));
        }
        Ok(())
    }

    pub fn tiers(&self) -> &[BlurTier] {
        &self.tiers
    }

    /// Index of the tier whose bracket holds `quality`.
    pub fn tier_for(&self, quality: f64) -> Result<usize> {
        if quality.is_nan() {
            return Err(Error::Numerical("predicted quality is NaN".into()));
        }
        self.tiers
            .iter()
            .rposition(|t| quality >= t.threshold)
            .ok_or_else(|| {
                Error::Config(format!(
                    "blur policy has no tier for predicted quality {quality}"
                ))
            })
    }
}

/// Image handed to the codecs plus how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedImage {
    pub pixels: Image,
    pub mask: Mask,
    pub tier_used: usize,
    pub predicted_quality: f64,
}

pub fn build_task_mask(map: &SegmentationMap, task: &TaskSpec) -> Result<Mask> {
    task.validate(map.num_classes())?;
    Mask::new(
        map.height(),
        map.width(),
        map.classes().iter().map(|&c| task.contains(c)).collect(),
    )
}

/// Box mean over a k×k neighborhood with edge replication.
pub fn mean_blur(image: &Image, k: usize) -> Result<Image> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("blur kernel {k} must be odd and positive")));
    }
    let (h, w, c) = image.dims();
    if k > h.min(w) {
        return Err(Error::Config(format!("blur kernel {k} exceeds {h}x{w} image")));
    }
    if k == 1 {
        return Ok(image.clone());
    }
    let r = (k / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    // replicate padding factorizes per axis, so two 1-D passes are exact
    let mut rows = vec![0f64; h * w * c];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for d in -r..=r {
                    acc += image.get(i, clamp(j as isize + d, w), ch) as f64;
                }
                rows[(i * w + j) * c + ch] = acc;
            }
        }
    }
    let norm = (k * k) as f64;
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for d in -r..=r {
                    acc += rows[(clamp(i as isize + d, h) * w + j) * c + ch];
                }
                out.push((acc / norm) as f32);
            }
        }
    }
    Image::new(h, w, c, out)
}

/// Background treatment of a fixed kernel, task pixels copied verbatim.
pub fn apply_kernel(image: &Image, mask: &Mask, kernel: BlurKernel, fill: [u8; 3]) -> Result<Image> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::Shape("mask does not match image".into()));
    }
    let background = match kernel {
        BlurKernel::Mean(k) => mean_blur(image, k)?,
        BlurKernel::TaskOnly => {
            let px: Vec<f32> = (0..image.channels())
                .map(|ch| fill.get(ch).copied().unwrap_or(0) as f32 / 255.0)
                .collect();
            Image::filled(image.height(), image.width(), &px)
        }
    };
    let mut out = background;
    for i in 0..image.height() {
        for j in 0..image.width() {
            if mask.get(i, j) {
                out.set_pixel(i, j, image.pixel(i, j));
            }
        }
    }
    Ok(out)
}

/// Predicts quality, picks a tier and fuses the task region with the treated background.
pub fn select(
    image: &Image,
    map: &SegmentationMap,
    task: &TaskSpec,
    snr_db: f64,
    model: &EvalModel,
    policy: &BlurPolicy,
    range: &SnrRange,
) -> Result<SelectedImage> {
    let features = extract_features(image, map, task, snr_db, range)?;
    let quality = predict(model, &features);
    let tier = policy.tier_for(quality)?;
    let mut sel = select_tier(image, map, task, policy, tier)?;
    sel.predicted_quality = quality;
    Ok(sel)
}

/// Applies tier `tier` regardless of predicted quality.
pub fn select_tier(
    image: &Image,
    map: &SegmentationMap,
    task: &TaskSpec,
    policy: &BlurPolicy,
    tier: usize,
) -> Result<SelectedImage> {
    if image.height() != map.height() || image.width() != map.width() {
        return Err(Error::Shape("segmentation map does not match image".into()));
    }
    let kernel = policy
        .tiers()
        .get(tier)
        .ok_or_else(|| Error::Config(format!("blur tier {tier} does not exist")))?
        .kernel;
    let mask = build_task_mask(map, task)?;
    let pixels = apply_kernel(image, &mask, kernel, task.background_fill)?;
    Ok(SelectedImage {
        pixels,
        mask,
        tier_used: tier,
        predicted_quality: f64::NAN,
    })
}

/// Bytes of the 8-bit image under the pinned lossless format.
pub fn payload_size(image: &Image) -> Result<usize> {
    let color = match image.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        c => return Err(Error::Shape(format!("cannot encode {c}-channel image"))),
    };
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(&mut buf, CompressionType::Best, FilterType::Adaptive).write_image(
        &image.to_u8(),
        image.width() as u32,
        image.height() as u32,
        color,
    )?;
    Ok(buf.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
    }

    fn random_map(h: usize, w: usize, k: u32, seed: u64) -> SegmentationMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SegmentationMap::new(h, w, k as usize, (0..h * w).map(|_| rng.random_range(0..k)).collect())
            .unwrap()
    }

    fn brute_blur(im: &Image, k: usize) -> Image {
        let (h, w, c) = im.dims();
        let r = (k / 2) as isize;
        let mut out = Image::zeros(h, w, c);
        for i in 0..h as isize {
            for j in 0..w as isize {
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for di in -r..=r {
                        for dj in -r..=r {
                            let ii = (i + di).clamp(0, h as isize - 1) as usize;
                            let jj = (j + dj).clamp(0, w as isize - 1) as usize;
                            s += im.get(ii, jj, ch) as f64;
                        }
                    }
                    out.set(i as usize, j as usize, ch, (s / (k * k) as f64) as f32);
                }
            }
        }
        out
    }

    #[test]
    fn blur_identity_and_constant() {
        let im = noise(8, 8, 1);
        assert_eq!(mean_blur(&im, 1).unwrap(), im);
        let c = Image::filled(9, 7, &[0.25, 0.5, 0.75]);
        for k in [3, 5, 7] {
            let b = mean_blur(&c, k).unwrap();
            for (a, e) in b.data().iter().zip(c.data()) {
                assert!((a - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blur_matches_brute_force() {
        let im = noise(8, 8, 2);
        let fast = mean_blur(&im, 3).unwrap();
        let slow = brute_blur(&im, 3);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_rejects_bad_kernels() {
        let im = noise(8, 8, 3);
        assert!(matches!(mean_blur(&im, 4), Err(Error::Config(_))));
        assert!(matches!(mean_blur(&im, 0), Err(Error::Config(_))));
        assert!(matches!(mean_blur(&im, 9), Err(Error::Config(_))));
    }

    #[test]
    fn blur_keeps_global_mean() {
        // smooth content keeps edge replication from biasing the mean
        let mut im = Image::zeros(64, 64, 3);
        for i in 0..64 {
            for j in 0..64 {
                let v = 0.5 + 0.3 * ((i as f32 * 0.7).sin() * (j as f32 * 0.9).cos());
                for ch in 0..3 {
                    im.set(i, j, ch, v);
                }
            }
        }
        for k in [3, 5, 9] {
            let b = mean_blur(&im, k).unwrap();
            for ch in 0..3 {
                let m = |x: &Image| (0..64 * 64).map(|p| x.data()[p * 3 + ch] as f64).sum::<f64>() / 4096.0;
                assert!((m(&b) - m(&im)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn mask_matches_membership() {
        let map = random_map(10, 12, 4, 5);
        let task = TaskSpec::new([1, 3], [0, 0, 0]).unwrap();
        let m = build_task_mask(&map, &task).unwrap();
        for i in 0..10 {
            for j in 0..12 {
                let c = map.get(i, j);
                assert_eq!(m.get(i, j), c == 1 || c == 3);
            }
        }
        let all = SegmentationMap::filled(3, 3, 4, 3).unwrap();
        assert_eq!(build_task_mask(&all, &task).unwrap().count(), 9);
        let none = SegmentationMap::filled(3, 3, 4, 0).unwrap();
        assert_eq!(build_task_mask(&none, &task).unwrap().count(), 0);
        let bad = TaskSpec::new([7], [0, 0, 0]).unwrap();
        assert!(matches!(build_task_mask(&map, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn policy_validation() {
        assert!(BlurPolicy::default().validate().is_ok());
        let t = |threshold, kernel| BlurTier { threshold, kernel };
        use BlurKernel::*;
        assert!(BlurPolicy::new(vec![t(0.0, Mean(3)), t(0.0, Mean(1))]).is_err());
        assert!(BlurPolicy::new(vec![t(0.0, Mean(3)), t(1.0, Mean(5)), t(2.0, Mean(1))]).is_err());
        assert!(BlurPolicy::new(vec![t(0.0, Mean(3))]).is_err());
        assert!(BlurPolicy::new(vec![t(0.0, Mean(4)), t(1.0, Mean(1))]).is_err());
        assert!(BlurPolicy::new(vec![t(0.0, Mean(1)), t(1.0, TaskOnly)]).is_err());
        let p = BlurPolicy::new(vec![t(0.0, Mean(3)), t(1.0, Mean(1))]).unwrap();
        assert!(matches!(p.tier_for(-1.0), Err(Error::Config(_))));
        assert_eq!(p.tier_for(0.5).unwrap(), 0);
        assert_eq!(p.tier_for(1.0).unwrap(), 1);
    }

    #[test]
    fn policy_toml_round_trip() {
        let p = BlurPolicy::default();
        let text = toml::to_string(&p).unwrap();
        assert!(text.contains("task_only"));
        let back: BlurPolicy = toml::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    fn selection_setup() -> (Image, SegmentationMap, TaskSpec, SnrRange) {
        let im = noise(32, 32, 9);
        let map = random_map(32, 32, 3, 10);
        (im, map, TaskSpec::new([2], [10, 20, 30]).unwrap(), SnrRange::new(-10.0, 20.0).unwrap())
    }

    #[test]
    fn high_quality_is_identity() {
        let (im, map, task, r) = selection_setup();
        let m = EvalModel::new(100.0, 0.0, 0.0);
        let s = select(&im, &map, &task, 5.0, &m, &BlurPolicy::default(), &r).unwrap();
        assert_eq!(s.pixels, im);
        assert_eq!(s.tier_used, 4);
    }

    #[test]
    fn lowest_snr_sends_only_task() {
        let (im, map, task, r) = selection_setup();
        let m = EvalModel::new(10.0, 0.0, 20.0);
        let s = select(&im, &map, &task, -10.0, &m, &BlurPolicy::default(), &r).unwrap();
        assert_eq!(s.tier_used, 0);
        let fill = [10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0];
        for i in 0..32 {
            for j in 0..32 {
                if map.get(i, j) == 2 {
                    assert_eq!(s.pixels.pixel(i, j), im.pixel(i, j));
                } else {
                    assert_eq!(s.pixels.pixel(i, j), &fill[..]);
                }
            }
        }
    }

    #[test]
    fn mid_tier_composes_blur() {
        let (im, map, task, _) = selection_setup();
        let s = select_tier(&im, &map, &task, &BlurPolicy::default(), 2).unwrap();
        let blurred = mean_blur(&im, 9).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let expect = if map.get(i, j) == 2 { im.pixel(i, j) } else { blurred.pixel(i, j) };
                assert_eq!(s.pixels.pixel(i, j), expect);
            }
        }
    }

    #[test]
    fn payload_orders_by_entropy() {
        let c = Image::filled(64, 64, &[0.4, 0.4, 0.4]);
        let n = noise(64, 64, 12);
        assert!(payload_size(&c).unwrap() * 10 < payload_size(&n).unwrap());
        assert_eq!(payload_size(&n).unwrap(), payload_size(&n).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn task_pixels_survive_every_tier(seed in 0u64..500, tier in 0usize..5) {
            let im = noise(24, 24, seed);
            let map = random_map(24, 24, 3, seed + 1);
            let task = TaskSpec::new([0, 2], [0, 0, 0]).unwrap();
            let policy = BlurPolicy::default();
            let s = select_tier(&im, &map, &task, &policy, tier).unwrap();
            for i in 0..24 {
                for j in 0..24 {
                    if task.contains(map.get(i, j)) {
                        prop_assert_eq!(s.pixels.pixel(i, j), im.pixel(i, j));
                    }
                }
            }
            prop_assert!(payload_size(&s.pixels).unwrap() <= payload_size(&im).unwrap() + 64);
        }

        #[test]
        fn tier_rises_with_snr(w0 in 0.0f64..30.0, w1 in -5.0f64..5.0, w2 in 0.0f64..20.0,
                               a in -10.0f64..20.0, b in -10.0f64..20.0) {
            let (im, map, task, r) = selection_setup();
            let m = EvalModel::new(w0, w1, w2);
            let p = BlurPolicy::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let t_lo = select(&im, &map, &task, lo, &m, &p, &r).unwrap().tier_used;
            let t_hi = select(&im, &map, &task, hi, &m, &p, &r).unwrap().tier_used;
            prop_assert!(t_lo <= t_hi);
        }
    }
}
