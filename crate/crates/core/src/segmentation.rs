//! Pixel classification with a compact pooling-index encoder/decoder network,
//! plus neighborhood-majority refinement of colorized class maps.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Conv2d, ConvTranspose2d, Init, OptimConfig, ParamBundle, TrainLog};

/// Channel widths of the three encoder stages.
pub const STAGE_WIDTHS: [usize; 3] = [64, 128, 256];
/// Minimum number of identical neighbors (out of 8) that overrides a pixel.
pub const SME_THRESHOLD: usize = 7;

/// Per-pixel class ids over `num_classes` classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    num_classes: usize,
    classes: Vec<u32>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, num_classes: usize, classes: Vec<u32>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::Shape(format!(
                "{} class cells do not fit {height}x{width}",
                classes.len()
            )));
        }
        if let Some(bad) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Config(format!(
                "class id {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            classes,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class: u32) -> Result<Self> {
        Self::new(height, width, num_classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.classes[row * self.width + col]
    }

    /// Fraction of cells holding each class.
    pub fn class_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_classes];
        for &c in &self.classes {
            counts[c as usize] += 1;
        }
        let n = self.classes.len() as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    /// Fraction of cells where `self` and `other` agree.
    pub fn pixel_accuracy(&self, other: &SegmentationMap) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape("segmentation maps differ in size".into()));
        }
        let hits = self
            .classes
            .iter()
            .zip(&other.classes)
            .filter(|(a, b)| a == b)
            .count();
        Ok(hits as f64 / self.classes.len() as f64)
    }
}

#[inline]
pub fn pack_rgb(rgb: [u8; 3]) -> u32 {
    ((rgb[0] as u32) << 16) | ((rgb[1] as u32) << 8) | rgb[2] as u32
}

#[inline]
pub fn unpack_rgb(packed: u32) -> [u8; 3] {
    [(packed >> 16) as u8, (packed >> 8) as u8, packed as u8]
}

/// Bijection between class ids `0..K` and RGB colors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorMap {
    colors: Vec<[u8; 3]>,
    reverse: HashMap<u32, u32>,
}

impl ColorMap {
    /// `colors[k]` is the color of class `k`.
    pub fn new(colors: Vec<[u8; 3]>) -> Result<Self> {
        let mut reverse = HashMap::with_capacity(colors.len());
        for (k, &c) in colors.iter().enumerate() {
            if let Some(prev) = reverse.insert(pack_rgb(c), k as u32) {
                return Err(Error::Config(format!(
                    "classes {prev} and {k} share color {c:?}"
                )));
            }
        }
        Ok(Self { colors, reverse })
    }

    /// Well-separated default palette.
    pub fn palette(num_classes: usize) -> Result<Self> {
        const BASE: [[u8; 3]; 8] = [
            [0, 0, 0],
            [255, 0, 0],
            [0, 255, 0],
            [0, 0, 255],
            [255, 255, 0],
            [255, 0, 255],
            [0, 255, 255],
            [255, 255, 255],
        ];
        let colors = (0..num_classes)
            .map(|k| {
                if k < BASE.len() {
                    BASE[k]
                } else {
                    let v = k as u32 * 2_654_435_761;
                    unpack_rgb(v & 0x00ff_ffff)
                }
            })
            .collect();
        Self::new(colors)
    }

    /// Parses rows of `class_id R G B`; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, [u8; 3])> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("color table line {}: {line:?}", lineno + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            let id: usize = fields[0].parse().map_err(|_| bad())?;
            let mut rgb = [0u8; 3];
            for (slot, f) in rgb.iter_mut().zip(&fields[1..]) {
                *slot = f.parse().map_err(|_| bad())?;
            }
            rows.push((id, rgb));
        }
        rows.sort_by_key(|r| r.0);
        for (expect, (id, _)) in rows.iter().enumerate() {
            if *id != expect {
                return Err(Error::Config(format!(
                    "color table must list class ids 0..K exactly once; found {id} where {expect} was expected"
                )));
            }
        }
        Self::new(rows.into_iter().map(|r| r.1).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_table(&self) -> String {
        self.colors
            .iter()
            .enumerate()
            .map(|(k, c)| format!("{k} {} {} {}\n", c[0], c[1], c[2]))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.colors.len()
    }

    pub fn color(&self, class: u32) -> Option<[u8; 3]> {
        self.colors.get(class as usize).copied()
    }

    pub fn class_of(&self, rgb: [u8; 3]) -> Option<u32> {
        self.reverse.get(&pack_rgb(rgb)).copied()
    }
}

/// Pixel-wise color lookup.
pub fn colorize(map: &SegmentationMap, colors: &ColorMap) -> Result<Image> {
    let mut data = Vec::with_capacity(map.classes.len() * 3);
    for &c in &map.classes {
        let rgb = colors
            .color(c)
            .ok_or_else(|| Error::Config(format!("class {c} has no color")))?;
        data.extend(rgb.iter().map(|&v| v as f32 / 255.0));
    }
    Image::new(map.height, map.width, 3, data)
}

/// Inverse of [`colorize`]; fails on colors absent from the table.
pub fn decolorize(image: &Image, colors: &ColorMap) -> Result<SegmentationMap> {
    if image.channels() < 3 {
        return Err(Error::Shape("color map image needs 3 channels".into()));
    }
    let mut classes = Vec::with_capacity(image.height() * image.width());
    for row in 0..image.height() {
        for col in 0..image.width() {
            let rgb = image.rgb_u8(row, col);
            let c = colors.class_of(rgb).ok_or_else(|| {
                Error::Config(format!("color {rgb:?} at ({row}, {col}) is not in the color table"))
            })?;
            classes.push(c);
        }
    }
    SegmentationMap::new(image.height(), image.width(), colors.num_classes(), classes)
}

/// Neighborhood-majority refinement of a colorized class map.
///
/// Interior pixels whose 8 neighbors (read from the input, never from the
/// partially updated output) contain one color at least [`SME_THRESHOLD`]
/// times take that color. Border pixels are copied unchanged.
pub fn sme_refine(rgb_map: &Image) -> Result<Image> {
    let (h, w, c) = rgb_map.dims();
    if c < 3 {
        return Err(Error::Shape(format!("refinement needs 3 color channels, got {c}")));
    }
    let mut out = rgb_map.clone();
    if h < 3 || w < 3 {
        return Ok(out);
    }
    let packed: Vec<u32> = (0..h * w)
        .map(|i| pack_rgb(rgb_map.rgb_u8(i / w, i % w)))
        .collect();
    let mut neigh = [(0u32, 0usize); 8];
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let mut distinct = 0;
            let mut source = None;
            for di in 0..3 {
                for dj in 0..3 {
                    if di == 1 && dj == 1 {
                        continue;
                    }
                    let p = packed[(i + di - 1) * w + (j + dj - 1)];
                    match neigh[..distinct].iter_mut().find(|(col, _)| *col == p) {
                        Some(slot) => slot.1 += 1,
                        None => {
                            neigh[distinct] = (p, 1);
                            distinct += 1;
                        }
                    }
                }
            }
            if let Some(&(color, _)) = neigh[..distinct].iter().find(|(_, n)| *n >= SME_THRESHOLD) {
                // copy an original neighbor carrying the winning color
                'scan: for di in 0..3 {
                    for dj in 0..3 {
                        if (di, dj) != (1, 1) && packed[(i + di - 1) * w + (j + dj - 1)] == color {
                            source = Some((i + di - 1, j + dj - 1));
                            break 'scan;
                        }
                    }
                }
                let (si, sj) = source.expect("winning color comes from a neighbor");
                out.set_pixel(i, j, rgb_map.pixel(si, sj));
            }
        }
    }
    Ok(out)
}

/// Argmax positions recorded by one 2×2 max-pooling pass.
#[derive(Debug, Clone)]
pub struct PoolIndex {
    /// `(N, C, H, W)` of the pooled input.
    input_dims: [usize; 4],
    /// Flat `row·W + col` position of each window maximum, in `(N, C, H/2, W/2)` order.
    argmax: Vec<u32>,
    /// One-hot selector over the input positions.
    selector: Tensor,
}

impl PoolIndex {
    pub fn input_dims(&self) -> [usize; 4] {
        self.input_dims
    }

    pub fn argmax(&self) -> &[u32] {
        &self.argmax
    }
}

/// Indices of the three encoder poolings, shallowest first.
#[derive(Debug, Clone)]
pub struct PooledIndices {
    pub stages: Vec<PoolIndex>,
}

/// 2×2 max pooling at stride 2 that records argmax positions.
///
/// Ties go to the lowest linear index in the window.
pub fn max_pool_with_indices(x: &Tensor) -> Result<(Tensor, PoolIndex)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let vals = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let mut onehot = vec![0f64; vals.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (2 * i) * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (2 * i + di) * w + 2 * j + dj;
                    if vals[base + cand] > vals[base + best] {
                        best = cand;
                    }
                }
                argmax.push(best as u32);
                onehot[base + best] = 1.0;
            }
        }
    }
    let selector = Tensor::from_vec(onehot, (n, c, h, w), x.device())?.to_dtype(x.dtype())?;
    let pooled = x
        .mul(&selector)?
        .reshape((n, c, oh, 2, ow, 2))?
        .sum(5)?
        .sum(3)?;
    Ok((
        pooled,
        PoolIndex {
            input_dims: [n, c, h, w],
            argmax,
            selector,
        },
    ))
}

/// Places each value at its recorded argmax position and zeros elsewhere.
pub fn max_unpool(x: &Tensor, index: &PoolIndex) -> Result<Tensor> {
    let [n, c, h, w] = index.input_dims;
    let dims = x.dims4()?;
    if dims != (n, c, h / 2, w / 2) {
        return Err(Error::Shape(format!(
            "unpool input {dims:?} does not match recorded pooling of {:?}",
            index.input_dims
        )));
    }
    let spread = x
        .reshape((n, c, h / 2, 1, w / 2, 1))?
        .broadcast_as((n, c, h / 2, 2, w / 2, 2))?
        .contiguous()?
        .reshape((n, c, h, w))?;
    Ok(spread.mul(&index.selector.to_dtype(x.dtype())?)?)
}

/// Softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Three-stage encoder/decoder with index-tracked pooling.
#[derive(Debug, Clone)]
pub struct SegNet {
    params: ParamBundle,
    num_classes: usize,
    enc: Vec<Conv2d>,
    dec: Vec<ConvTranspose2d>,
    classifier: Conv2d,
}

impl SegNet {
    pub fn new(num_classes: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            dtype,
            device,
        };
        let mut params = ParamBundle::new();
        let mut in_ch = 3;
        for (i, &wd) in STAGE_WIDTHS.iter().enumerate() {
            Conv2d::create(&mut params, &mut init, &format!("enc{}", i + 1), in_ch, wd, 3)?;
            in_ch = wd;
        }
        // decoder stage i maps encoder stage i+1's width back to stage i's
        for i in (1..STAGE_WIDTHS.len()).rev() {
            ConvTranspose2d::create(
                &mut params,
                &mut init,
                &format!("dec{}", i + 1),
                STAGE_WIDTHS[i],
                STAGE_WIDTHS[i - 1],
                3,
            )?;
        }
        Conv2d::create(&mut params, &mut init, "classifier", STAGE_WIDTHS[0], num_classes, 3)?;
        Self::from_params(params, num_classes)
    }

    pub fn from_params(params: ParamBundle, num_classes: usize) -> Result<Self> {
        let enc = (1..=STAGE_WIDTHS.len())
            .map(|i| Conv2d::from_bundle(&params, &format!("enc{i}"), 1))
            .collect::<Result<Vec<_>>>()?;
        let dec = (2..=STAGE_WIDTHS.len())
            .rev()
            .map(|i| ConvTranspose2d::from_bundle(&params, &format!("dec{i}"), 1))
            .collect::<Result<Vec<_>>>()?;
        let classifier = Conv2d::from_bundle(&params, "classifier", 1)?;
        if classifier.out_channels() != num_classes {
            return Err(Error::Shape(format!(
                "classifier emits {} classes, expected {num_classes}",
                classifier.out_channels()
            )));
        }
        for (e, d) in enc.iter().skip(1).rev().zip(&dec) {
            if d.in_channels() != e.out_channels() || d.out_channels() != e.in_channels() {
                return Err(Error::Shape("decoder stages do not mirror the encoder".into()));
            }
        }
        Ok(Self {
            params,
            num_classes,
            enc,
            dec,
            classifier,
        })
    }

    pub fn params(&self) -> &ParamBundle {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dtype(&self) -> Result<DType> {
        Ok(self.params.get("enc1.weight")?.dtype())
    }

    /// Encoder on an `(N, 3, H, W)` batch.
    pub fn encode_batch(&self, x: &Tensor) -> Result<(Tensor, PooledIndices)> {
        let (_, _, h, w) = x.dims4()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!(
                "segmentation input {h}x{w} must have sides divisible by 8"
            )));
        }
        let mut cur = x.clone();
        let mut stages = Vec::with_capacity(self.enc.len());
        for conv in &self.enc {
            cur = conv.forward(&cur)?.relu()?;
            let (pooled, idx) = max_pool_with_indices(&cur)?;
            stages.push(idx);
            cur = pooled;
        }
        Ok((cur, PooledIndices { stages }))
    }

    /// Decoder on encoder output; returns `(N, K, H, W)` logits.
    pub fn decode_logits(&self, features: &Tensor, indices: &PooledIndices) -> Result<Tensor> {
        if indices.stages.len() != self.enc.len() {
            return Err(Error::Shape(format!(
                "expected {} pooling stages, got {}",
                self.enc.len(),
                indices.stages.len()
            )));
        }
        let mut cur = features.clone();
        let mut stages = indices.stages.iter().rev();
        for conv in &self.dec {
            let idx = stages.next().expect("stage count checked");
            cur = conv.forward(&max_unpool(&cur, idx)?)?.relu()?;
        }
        let idx = stages.next().expect("stage count checked");
        Ok(self.classifier.forward(&max_unpool(&cur, idx)?)?)
    }

    pub fn encode_features(&self, image: &Image) -> Result<(Tensor, PooledIndices)> {
        if image.channels() != 3 {
            return Err(Error::Shape(format!("expected RGB input, got {} channels", image.channels())));
        }
        let x = image.to_tensor_nchw(self.dtype()?, self.params.get("enc1.weight")?.device())?;
        self.encode_batch(&x)
    }

    /// Per-pixel class probabilities, `(N, K, H, W)`.
    pub fn decode_and_classify(&self, features: &Tensor, indices: &PooledIndices) -> Result<Tensor> {
        let logits = self.decode_logits(features, indices)?;
        Ok(candle_nn::ops::softmax(&logits, 1)?)
    }

    pub fn segment(&self, image: &Image) -> Result<SegmentationMap> {
        let (f, idx) = self.encode_features(image)?;
        let logits = self.decode_logits(&f, &idx)?;
        argmax_map(&logits, self.num_classes)
    }

    pub fn segment_batch(&self, images: &[&Image]) -> Result<Vec<SegmentationMap>> {
        images.iter().map(|im| self.segment(im)).collect()
    }
}

/// Class argmax of `(1, K, H, W)` logits; rejects non-finite values.
fn argmax_map(logits: &Tensor, num_classes: usize) -> Result<SegmentationMap> {
    let (_, k, h, w) = logits.dims4()?;
    let v = logits
        .squeeze(0)?
        .permute((1, 2, 0))?
        .contiguous()?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("segmentation logits are not finite".into()));
    }
    let classes = v
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect();
    SegmentationMap::new(h, w, num_classes, classes)
}

fn class_targets(maps: &[&SegmentationMap], device: &Device) -> Result<Tensor> {
    let flat: Vec<u32> = maps.iter().flat_map(|m| m.classes.iter().copied()).collect();
    Ok(Tensor::from_vec(flat.clone(), flat.len(), device)?)
}

fn batch_ce(net: &SegNet, images: &[&Image], maps: &[&SegmentationMap]) -> Result<Tensor> {
    let dtype = net.dtype()?;
    let device = net.params.get("enc1.weight")?.device().clone();
    let x = Image::batch_nchw(images, dtype, &device)?;
    let (f, idx) = net.encode_batch(&x)?;
    let logits = net.decode_logits(&f, &idx)?;
    let k = logits.dim(1)?;
    let flat = logits.permute((0, 2, 3, 1))?.contiguous()?.reshape(((), k))?;
    let targets = class_targets(maps, &device)?;
    let logp = candle_nn::ops::log_softmax(&flat, D::Minus1)?;
    let picked = logp.gather(&targets.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

fn dataset_ce(net: &SegNet, data: &[(Image, SegmentationMap)], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(batch) {
        let ims: Vec<&Image> = chunk.iter().map(|d| &d.0).collect();
        let maps: Vec<&SegmentationMap> = chunk.iter().map(|d| &d.1).collect();
        total += nn::scalar(&batch_ce(net, &ims, &maps)?.detach())? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains a fresh network with per-pixel cross-entropy.
pub fn train_segnet(
    dataset: &[(Image, SegmentationMap)],
    num_classes: usize,
    cfg: &OptimConfig,
    seed: u64,
) -> Result<(SegNet, TrainLog)> {
    let net = SegNet::new(num_classes, seed, DType::F32, &Device::Cpu)?;
    train_segnet_from(net, dataset, cfg, seed)
}

/// Continues training `net` in place of its parameters.
pub fn train_segnet_from(
    net: SegNet,
    dataset: &[(Image, SegmentationMap)],
    cfg: &OptimConfig,
    seed: u64,
) -> Result<(SegNet, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("segmentation training set is empty".into()));
    }
    for (im, map) in dataset {
        if im.height() != map.height() || im.width() != map.width() {
            return Err(Error::Shape("image and mask sizes differ".into()));
        }
        if map.num_classes() != net.num_classes {
            return Err(Error::Config("mask class count differs from network".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e6_0001);
    let mut opt = cfg.optimizer(net.params.vars())?;
    let mut log = TrainLog {
        initial_loss: dataset_ce(&net, dataset, cfg.batch_size)?,
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        for batch in nn::epoch_batches(dataset.len(), cfg.batch_size, &mut rng) {
            let ims: Vec<&Image> = batch.iter().map(|&i| &dataset[i].0).collect();
            let maps: Vec<&SegmentationMap> = batch.iter().map(|&i| &dataset[i].1).collect();
            let loss = batch_ce(&net, &ims, &maps)?;
            nn::step(&mut opt, &loss)?;
        }
        let l = dataset_ce(&net, dataset, cfg.batch_size)?;
        if !l.is_finite() {
            return Err(Error::Numerical(format!(
                "segmentation loss diverged at epoch {epoch} (learning rate {})",
                cfg.learning_rate
            )));
        }
        log::debug!("segnet epoch {epoch}: loss {l:.5}");
        log.epoch_losses.push(l);
    }
    Ok((net, log))
}
