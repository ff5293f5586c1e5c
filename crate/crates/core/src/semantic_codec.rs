//! Hierarchical shifted-window attention autoencoder.
//!
//! Images become a `(B, H/8, W/8, 96)` token grid: patch embedding, two
//! attention blocks, a 2×2 patch merge, four more blocks and a linear head.
//! The decoder mirrors the path with a reverse merge and patch un-embedding.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Init, LayerNorm, Linear, OptimConfig, ParamBundle, TrainLog};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemCodecConfig {
    pub patch: usize,
    /// Token widths of the two stages.
    pub dims: [usize; 2],
    /// Attention blocks per stage.
    pub depths: [usize; 2],
    pub heads: [usize; 2],
    pub window: usize,
    pub latent_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for SemCodecConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            dims: [128, 256],
            depths: [2, 4],
            heads: [4, 8],
            window: 4,
            latent_dim: 96,
            mlp_ratio: 4,
        }
    }
}

impl SemCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.window == 0 || self.latent_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("codec sizes must be positive".into()));
        }
        for s in 0..2 {
            if self.heads[s] == 0 || self.dims[s] % self.heads[s] != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: width {} is not a multiple of {} heads",
                    self.dims[s], self.heads[s]
                )));
            }
        }
        Ok(())
    }

    /// Side reduction from pixels to latent tokens.
    pub fn downsample(&self) -> usize {
        self.patch * 2
    }

    /// Latent grid `(H', W')` for an `h`×`w` image.
    pub fn latent_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.downsample();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} must have sides divisible by {f}"
            )));
        }
        for (side, stage) in [(h / self.patch, 0), (w / self.patch, 0), (h / f, 1), (w / f, 1)] {
            if side % self.window != 0 {
                return Err(Error::Shape(format!(
                    "stage {stage} grid side {side} is not a multiple of window {}",
                    self.window
                )));
            }
        }
        Ok((h / f, w / f))
    }
}

/// Window partition settings for one grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub window: usize,
    pub shift: usize,
}

impl WindowConfig {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            shift: window / 2,
        }
    }

    /// Effective settings on an `h`×`w` grid: a window covering the whole
    /// grid is shrunk to it and never shifted.
    pub fn for_grid(&self, h: usize, w: usize) -> Result<Self> {
        if h <= self.window && w <= self.window {
            if h != w {
                return Err(Error::Shape(format!("grid {h}x{w} smaller than window {}", self.window)));
            }
            return Ok(Self { window: h, shift: 0 });
        }
        if h % self.window != 0 || w % self.window != 0 {
            return Err(Error::Shape(format!(
                "window {} does not divide grid {h}x{w}",
                self.window
            )));
        }
        Ok(*self)
    }
}

/// `(B, H', W', C)` tokens plus how they were produced.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub patch: usize,
    pub merges: usize,
}

impl TokenGrid {
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.tokens.dims4()?)
    }

    /// Channel-first view `(B, C, H', W')` for convolutional consumers.
    pub fn to_nchw(&self) -> Result<Tensor> {
        Ok(self.tokens.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn from_nchw(t: &Tensor, patch: usize, merges: usize) -> Result<Self> {
        Ok(Self {
            tokens: t.permute((0, 2, 3, 1))?.contiguous()?,
            patch,
            merges,
        })
    }
}

/// `(B, H, W, C)` → `(B·nW, w·w, C)`.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h / window, window, w / window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / window) * (w / window), window * window, c))?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(x: &Tensor, window: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(D::Minus1)?;
    Ok(x
        .reshape((b, h / window, w / window, window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

/// Cyclic roll of a `(B, H, W, C)` grid by `-shift` on both spatial axes.
pub fn cyclic_shift(x: &Tensor, shift: usize) -> Result<Tensor> {
    Ok(x.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?)
}

pub fn cyclic_unshift(x: &Tensor, shift: usize) -> Result<Tensor> {
    Ok(x.roll(shift as i32, 1)?.roll(shift as i32, 2)?)
}

/// Additive `(nW, N, N)` mask keeping attention inside the regions that were
/// contiguous before the cyclic shift.
fn shift_mask(h: usize, w: usize, cfg: WindowConfig) -> Vec<f64> {
    let (win, s) = (cfg.window, cfg.shift);
    let region = |v: usize, n: usize| {
        if v < n - win {
            0
        } else if v < n - s {
            1
        } else {
            2
        }
    };
    let n = win * win;
    let (nh, nw) = (h / win, w / win);
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for wi in 0..nh {
        for wj in 0..nw {
            let ids: Vec<usize> = (0..n)
                .map(|t| {
                    let (r, c) = (wi * win + t / win, wj * win + t % win);
                    region(r, h) * 3 + region(c, w)
                })
                .collect();
            for a in &ids {
                for b in &ids {
                    mask.push(if a == b { 0.0 } else { -100.0 });
                }
            }
        }
    }
    mask
}

/// Index of each (query, key) pair into the relative-position bias table.
fn relative_index(window: usize) -> Vec<u32> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let dr = (a / window) as isize - (b / window) as isize + window as isize - 1;
            let dc = (a % window) as isize - (b % window) as isize + window as isize - 1;
            idx.push((dr as usize * span + dc as usize) as u32);
        }
    }
    idx
}

/// Pre-norm attention block over (optionally shifted) windows, followed by a GELU MLP.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    rel_bias: Tensor,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
    heads: usize,
    window: WindowConfig,
    shifted: bool,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn create(
        bundle: &mut ParamBundle,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
    ) -> Result<()> {
        LayerNorm::create(bundle, init, &format!("{name}.norm1"), dim)?;
        Linear::create(bundle, init, &format!("{name}.qkv"), dim, 3 * dim, true)?;
        Linear::create(bundle, init, &format!("{name}.proj"), dim, dim, true)?;
        let span = 2 * window - 1;
        bundle.insert(format!("{name}.rel_bias"), init.normal(&[span * span, heads], 0.02)?)?;
        LayerNorm::create(bundle, init, &format!("{name}.norm2"), dim)?;
        Linear::create(bundle, init, &format!("{name}.fc1"), dim, mlp_ratio * dim, true)?;
        Linear::create(bundle, init, &format!("{name}.fc2"), mlp_ratio * dim, dim, true)?;
        Ok(())
    }

    pub fn from_bundle(
        bundle: &ParamBundle,
        name: &str,
        heads: usize,
        window: usize,
        shifted: bool,
    ) -> Result<Self> {
        let rel_bias = bundle.tensor(&format!("{name}.rel_bias"))?;
        let span = 2 * window - 1;
        if rel_bias.dims() != [span * span, heads] {
            return Err(Error::Shape(format!(
                "{name}: relative bias {:?} does not match window {window} with {heads} heads",
                rel_bias.dims()
            )));
        }
        let dim = bundle.get(&format!("{name}.proj.weight"))?.dims()[0];
        if dim % heads != 0 {
            return Err(Error::Shape(format!("{name}: width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            norm1: LayerNorm::from_bundle(bundle, &format!("{name}.norm1"))?,
            qkv: Linear::from_bundle(bundle, &format!("{name}.qkv"), true)?,
            proj: Linear::from_bundle(bundle, &format!("{name}.proj"), true)?,
            rel_bias,
            norm2: LayerNorm::from_bundle(bundle, &format!("{name}.norm2"))?,
            fc1: Linear::from_bundle(bundle, &format!("{name}.fc1"), true)?,
            fc2: Linear::from_bundle(bundle, &format!("{name}.fc2"), true)?,
            dim,
            heads,
            window: WindowConfig::new(window),
            shifted,
        })
    }

    pub fn is_shifted(&self) -> bool {
        self.shifted
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_inner(x, self.shifted)?.0)
    }

    /// Block output with an explicit shift flag.
    pub fn forward_with_shift(&self, x: &Tensor, shifted: bool) -> Result<Tensor> {
        Ok(self.forward_inner(x, shifted)?.0)
    }

    /// Attention probabilities `(B·nW, heads, N, N)` of this block on `x`.
    pub fn attention_probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_inner(x, self.shifted)?.1)
    }

    fn forward_inner(&self, x: &Tensor, shifted: bool) -> Result<(Tensor, Tensor)> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.dim {
            return Err(Error::Shape(format!("block expects width {}, got {c}", self.dim)));
        }
        let mut cfg = self.window.for_grid(h, w)?;
        if !shifted {
            cfg.shift = 0;
        }
        if cfg.window != self.window.window {
            // a window shrunk to the grid cannot use the full bias table
            return Err(Error::Shape(format!(
                "grid {h}x{w} is smaller than window {}",
                self.window.window
            )));
        }
        let normed = self.norm1.forward(x)?;
        let normed = if cfg.shift > 0 {
            cyclic_shift(&normed, cfg.shift)?
        } else {
            normed
        };
        let windows = window_partition(&normed, cfg.window)?;
        let (attended, probs) = self.attend(&windows, cfg, b, h, w)?;
        let merged = window_reverse(&attended, cfg.window, b, h, w)?;
        let merged = if cfg.shift > 0 {
            cyclic_unshift(&merged, cfg.shift)?
        } else {
            merged
        };
        let x = (x + merged)?;
        let mlp = self
            .fc2
            .forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok(((x + mlp)?, probs))
    }

    fn attend(
        &self,
        windows: &Tensor,
        cfg: WindowConfig,
        b: usize,
        h: usize,
        w: usize,
    ) -> Result<(Tensor, Tensor)> {
        let (bw, n, c) = windows.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(windows)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let q = (qkv.get(0)? * scale)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let mut scores = q.matmul(&k.t()?.contiguous()?)?;

        let device = windows.device();
        let idx = Tensor::from_vec(relative_index(cfg.window), n * n, device)?;
        let bias = self
            .rel_bias
            .index_select(&idx, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?;
        scores = scores.broadcast_add(&bias)?;
        if cfg.shift > 0 {
            let nw = (h / cfg.window) * (w / cfg.window);
            let mask = Tensor::from_vec(shift_mask(h, w, cfg), (1, nw, 1, n, n), device)?
                .to_dtype(scores.dtype())?;
            scores = scores
                .reshape((b, nw, self.heads, n, n))?
                .broadcast_add(&mask)?
                .reshape((bw, self.heads, n, n))?;
        }
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((bw, n, c))?;
        Ok((self.proj.forward(&out)?, probs))
    }
}

/// 2×2 neighborhood concatenation, normalization and projection to the next width.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    norm: LayerNorm,
    proj: Linear,
}

impl PatchMerge {
    pub fn create(bundle: &mut ParamBundle, init: &mut Init, name: &str, dim: usize, out: usize) -> Result<Self> {
        LayerNorm::create(bundle, init, &format!("{name}.norm"), 4 * dim)?;
        Linear::create(bundle, init, &format!("{name}.proj"), 4 * dim, out, false)?;
        Self::from_bundle(bundle, name)
    }

    pub fn from_bundle(bundle: &ParamBundle, name: &str) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::from_bundle(bundle, &format!("{name}.norm"))?,
            proj: Linear::from_bundle(bundle, &format!("{name}.proj"), false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.proj.forward(&self.norm.forward(&space_to_depth(x)?)?)?)
    }
}

/// Projection to four times the output width, redistributed over 2×2 neighborhoods.
#[derive(Debug, Clone)]
pub struct ReversePatchMerge {
    proj: Linear,
}

impl ReversePatchMerge {
    pub fn create(bundle: &mut ParamBundle, init: &mut Init, name: &str, dim: usize, out: usize) -> Result<Self> {
        Linear::create(bundle, init, &format!("{name}.proj"), dim, 4 * out, false)?;
        Self::from_bundle(bundle, name)
    }

    pub fn from_bundle(bundle: &ParamBundle, name: &str) -> Result<Self> {
        Ok(Self {
            proj: Linear::from_bundle(bundle, &format!("{name}.proj"), false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depth_to_space(&self.proj.forward(x)?)
    }
}

/// `(B, H, W, C)` → `(B, H/2, W/2, 4C)`, neighbors ordered column-major within each 2×2 cell.
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot merge odd grid {h}x{w}")));
    }
    Ok(x
        .reshape((b, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 4, 2, 5))?
        .contiguous()?
        .reshape((b, h / 2, w / 2, 4 * c))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c4) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::Shape(format!("width {c4} is not a multiple of 4")));
    }
    let c = c4 / 4;
    Ok(x
        .reshape((b, h, w, 2, 2, c))?
        .permute((0, 1, 4, 2, 3, 5))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// `(B, 3, H, W)` → `(B, H/p, W/p, 3p²)` of flattened non-overlapping patches.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("image {h}x{w} not divisible into {patch}-pixel patches")));
    }
    Ok(x
        .reshape((b, c, h / patch, patch, w / patch, patch))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b, h / patch, w / patch, c * patch * patch))?)
}

/// Inverse of [`patchify`] for 3-channel images.
pub fn unpatchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w, d) = x.dims4()?;
    let c = d / (patch * patch);
    Ok(x
        .reshape((b, h, w, c, patch, patch))?
        .permute((0, 3, 1, 4, 2, 5))?
        .contiguous()?
        .reshape((b, c, h * patch, w * patch))?)
}

/// Semantic encoder/decoder pair with its parameters.
#[derive(Debug, Clone)]
pub struct SemCodec {
    cfg: SemCodecConfig,
    params: ParamBundle,
    embed: Linear,
    enc_blocks: [Vec<SwinBlock>; 2],
    merge: PatchMerge,
    enc_norm: LayerNorm,
    enc_head: Linear,
    dec_head: Linear,
    dec_blocks: [Vec<SwinBlock>; 2],
    unmerge: ReversePatchMerge,
    dec_norm: LayerNorm,
    unembed: Linear,
}

fn block_name(side: &str, stage: usize, i: usize) -> String {
    format!("{side}.s{stage}.b{i}")
}

impl SemCodec {
    pub fn new(cfg: SemCodecConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            dtype,
            device,
        };
        let mut p = ParamBundle::new();
        let pix = 3 * cfg.patch * cfg.patch;
        let [d0, d1] = cfg.dims;
        Linear::create(&mut p, &mut init, "embed", pix, d0, true)?;
        for i in 0..cfg.depths[0] {
            SwinBlock::create(&mut p, &mut init, &block_name("enc", 0, i), d0, cfg.heads[0], cfg.window, cfg.mlp_ratio)?;
        }
        PatchMerge::create(&mut p, &mut init, "enc.merge", d0, d1)?;
        for i in 0..cfg.depths[1] {
            SwinBlock::create(&mut p, &mut init, &block_name("enc", 1, i), d1, cfg.heads[1], cfg.window, cfg.mlp_ratio)?;
        }
        LayerNorm::create(&mut p, &mut init, "enc.norm", d1)?;
        Linear::create(&mut p, &mut init, "enc.head", d1, cfg.latent_dim, true)?;

        Linear::create(&mut p, &mut init, "dec.head", cfg.latent_dim, d1, true)?;
        for i in 0..cfg.depths[1] {
            SwinBlock::create(&mut p, &mut init, &block_name("dec", 1, i), d1, cfg.heads[1], cfg.window, cfg.mlp_ratio)?;
        }
        ReversePatchMerge::create(&mut p, &mut init, "dec.unmerge", d1, d0)?;
        for i in 0..cfg.depths[0] {
            SwinBlock::create(&mut p, &mut init, &block_name("dec", 0, i), d0, cfg.heads[0], cfg.window, cfg.mlp_ratio)?;
        }
        LayerNorm::create(&mut p, &mut init, "dec.norm", d0)?;
        Linear::create(&mut p, &mut init, "unembed", d0, pix, true)?;
        Self::from_params(cfg, p)
    }

    pub fn from_params(cfg: SemCodecConfig, params: ParamBundle) -> Result<Self> {
        cfg.validate()?;
        let blocks = |side: &str, stage: usize| -> Result<Vec<SwinBlock>> {
            (0..cfg.depths[stage])
                .map(|i| {
                    SwinBlock::from_bundle(&params, &block_name(side, stage, i), cfg.heads[stage], cfg.window, i % 2 == 1)
                })
                .collect()
        };
        Ok(Self {
            embed: Linear::from_bundle(&params, "embed", true)?,
            enc_blocks: [blocks("enc", 0)?, blocks("enc", 1)?],
            merge: PatchMerge::from_bundle(&params, "enc.merge")?,
            enc_norm: LayerNorm::from_bundle(&params, "enc.norm")?,
            enc_head: Linear::from_bundle(&params, "enc.head", true)?,
            dec_head: Linear::from_bundle(&params, "dec.head", true)?,
            dec_blocks: [blocks("dec", 0)?, blocks("dec", 1)?],
            unmerge: ReversePatchMerge::from_bundle(&params, "dec.unmerge")?,
            dec_norm: LayerNorm::from_bundle(&params, "dec.norm")?,
            unembed: Linear::from_bundle(&params, "unembed", true)?,
            cfg,
            params,
        })
    }

    pub fn config(&self) -> &SemCodecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamBundle {
        &self.params
    }

    pub fn dtype(&self) -> Result<DType> {
        Ok(self.params.get("embed.weight")?.dtype())
    }

    pub fn device(&self) -> Result<Device> {
        Ok(self.params.get("embed.weight")?.device().clone())
    }

    /// Stage-1 tokens of an `(B, 3, H, W)` batch.
    pub fn patch_embed_batch(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.embed.forward(&patchify(x, self.cfg.patch)?)?)
    }

    pub fn patch_embed(&self, image: &Image) -> Result<TokenGrid> {
        let x = self.image_tensor(image)?;
        Ok(TokenGrid {
            tokens: self.patch_embed_batch(&x)?,
            patch: self.cfg.patch,
            merges: 0,
        })
    }

    pub fn stage_blocks(&self, encoder: bool, stage: usize) -> &[SwinBlock] {
        if encoder {
            &self.enc_blocks[stage]
        } else {
            &self.dec_blocks[stage]
        }
    }

    pub fn merge(&self) -> &PatchMerge {
        &self.merge
    }

    pub fn unmerge(&self) -> &ReversePatchMerge {
        &self.unmerge
    }

    /// `(B, 3, H, W)` → `(B, H/8, W/8, latent)` tokens.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        self.cfg.latent_hw(h, w)?;
        // pixels enter centered on zero in [-1, 1]
        let mut t = self.patch_embed_batch(&x.affine(2.0, -1.0)?)?;
        for b in &self.enc_blocks[0] {
            t = b.forward(&t)?;
        }
        t = self.merge.forward(&t)?;
        for b in &self.enc_blocks[1] {
            t = b.forward(&t)?;
        }
        Ok(self.enc_head.forward(&self.enc_norm.forward(&t)?)?)
    }

    /// `(B, H', W', latent)` → unclamped `(B, 3, H, W)`.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        let (_, _, _, c) = z.dims4()?;
        if c != self.cfg.latent_dim {
            return Err(Error::Shape(format!(
                "latent width {c} differs from {}",
                self.cfg.latent_dim
            )));
        }
        let mut t = self.dec_head.forward(z)?;
        for b in &self.dec_blocks[1] {
            t = b.forward(&t)?;
        }
        t = self.unmerge.forward(&t)?;
        for b in &self.dec_blocks[0] {
            t = b.forward(&t)?;
        }
        let pix = self.unembed.forward(&self.dec_norm.forward(&t)?)?;
        Ok(unpatchify(&pix, self.cfg.patch)?.affine(0.5, 0.5)?)
    }

    fn image_tensor(&self, image: &Image) -> Result<Tensor> {
        if image.channels() != 3 {
            return Err(Error::Shape(format!("expected RGB image, got {} channels", image.channels())));
        }
        image.to_tensor_nchw(self.dtype()?, &self.device()?)
    }

    pub fn sem_encode(&self, image: &Image) -> Result<TokenGrid> {
        let tokens = self.encode_batch(&self.image_tensor(image)?)?;
        check_finite(&tokens, "semantic latent")?;
        Ok(TokenGrid {
            tokens,
            patch: self.cfg.patch,
            merges: 1,
        })
    }

    /// Reconstruction clamped to the unit interval.
    pub fn sem_decode(&self, grid: &TokenGrid) -> Result<Image> {
        let (b, _, _, _) = grid.dims()?;
        if b != 1 {
            return Err(Error::Shape(format!("decode expects one image, got batch {b}")));
        }
        let z = grid.tokens.to_dtype(self.dtype()?)?;
        let x = self.decode_batch(&z)?;
        check_finite(&x, "semantic reconstruction")?;
        let x = x.clamp(0.0, 1.0)?.permute((0, 2, 3, 1))?;
        Image::from_tensor_nhwc(&x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("kind".into(), "sem_codec".into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        self.params.save(path, &meta)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (params, meta) = ParamBundle::load(path, device)?;
        let cfg = meta
            .get("config")
            .ok_or_else(|| Error::Ingestion {
                path: path.to_path_buf(),
                msg: "checkpoint lacks codec config".into(),
            })
            .and_then(|s| Ok(serde_json::from_str(s)?))?;
        Self::from_params(cfg, params)
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = nn::scalar(&t.sqr()?.sum_all()?)?;
    if !s.is_finite() {
        return Err(Error::Numerical(format!("{what} is not finite")));
    }
    Ok(())
}

fn reconstruction_loss(codec: &SemCodec, x: &Tensor) -> Result<Tensor> {
    let y = codec.decode_batch(&codec.encode_batch(x)?)?;
    Ok((y - x)?.sqr()?.mean_all()?)
}

/// Mean reconstruction MSE of `codec` on `images` (unclamped output).
pub fn dataset_mse(codec: &SemCodec, images: &[Image], batch: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Config("empty image set".into()));
    }
    let dtype = codec.dtype()?;
    let device = codec.device()?;
    let mut total = 0.0;
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let x = Image::batch_nchw(&refs, dtype, &device)?;
        total += nn::scalar(&reconstruction_loss(codec, &x)?.detach())? * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Trains a fresh codec as a plain autoencoder with MSE loss.
pub fn train_sem_codec(
    dataset: &[Image],
    cfg: SemCodecConfig,
    opt: &OptimConfig,
    seed: u64,
) -> Result<(SemCodec, TrainLog)> {
    let codec = SemCodec::new(cfg, seed, DType::F32, &Device::Cpu)?;
    train_sem_codec_from(codec, dataset, opt, seed)
}

pub fn train_sem_codec_from(
    codec: SemCodec,
    dataset: &[Image],
    opt: &OptimConfig,
    seed: u64,
) -> Result<(SemCodec, TrainLog)> {
    opt.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("semantic codec training set is empty".into()));
    }
    let dtype = codec.dtype()?;
    let device = codec.device()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e3_c0de);
    let mut optimizer = opt.optimizer(codec.params.vars())?;
    let mut log = TrainLog {
        initial_loss: dataset_mse(&codec, dataset, opt.batch_size)?,
        epoch_losses: Vec::with_capacity(opt.epochs),
    };
    for epoch in 0..opt.epochs {
        for batch in nn::epoch_batches(dataset.len(), opt.batch_size, &mut rng) {
            let refs: Vec<&Image> = batch.iter().map(|&i| &dataset[i]).collect();
            let x = Image::batch_nchw(&refs, dtype, &device)?;
            let loss = reconstruction_loss(&codec, &x)?;
            nn::step(&mut optimizer, &loss)?;
        }
        let l = dataset_mse(&codec, dataset, opt.batch_size)?;
        if !l.is_finite() {
            return Err(Error::Numerical(format!(
                "semantic codec loss diverged at epoch {epoch} (learning rate {})",
                opt.learning_rate
            )));
        }
        log::debug!("sem codec epoch {epoch}: mse {l:.6}");
        log.epoch_losses.push(l);
    }
    Ok((codec, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> SemCodecConfig {
        SemCodecConfig {
            patch: 2,
            dims: [8, 16],
            depths: [2, 2],
            heads: [2, 4],
            window: 2,
            latent_dim: 6,
            mlp_ratio: 2,
        }
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
    }

    fn random_tensor(dims: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn default_shapes() {
        let codec = SemCodec::new(SemCodecConfig::default(), 0, DType::F32, &Device::Cpu).unwrap();
        let im = noise_image(64, 64, 1);
        assert_eq!(codec.patch_embed(&im).unwrap().dims().unwrap(), (1, 16, 16, 128));
        let grid = codec.sem_encode(&im).unwrap();
        assert_eq!(grid.dims().unwrap(), (1, 8, 8, 96));
        assert_eq!(grid.to_nchw().unwrap().dims(), &[1, 96, 8, 8]);
        let out = codec.sem_decode(&grid).unwrap();
        assert_eq!(out.dims(), (64, 64, 3));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = codec.sem_decode(&codec.sem_encode(&im).unwrap()).unwrap();
        assert_eq!(again, out);

        let t = codec.patch_embed(&im).unwrap().tokens;
        let merged = codec.merge().forward(&t).unwrap();
        assert_eq!(merged.dims(), &[1, 8, 8, 256]);
        assert_eq!(codec.unmerge().forward(&merged).unwrap().dims(), &[1, 16, 16, 128]);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let codec = SemCodec::new(tiny_cfg(), 0, DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(codec.sem_encode(&noise_image(10, 8, 0)), Err(Error::Shape(_))));
        assert!(matches!(patchify(&random_tensor(&[1, 3, 6, 5], 0, DType::F32), 2), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_image_embeds_to_zero() {
        let codec = SemCodec::new(tiny_cfg(), 3, DType::F32, &Device::Cpu).unwrap();
        let t = codec.patch_embed(&Image::zeros(8, 8, 3)).unwrap().tokens;
        assert_eq!(t.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        let z = Tensor::zeros((1, 4, 4, 8), DType::F32, &Device::Cpu).unwrap();
        let m = codec.merge().forward(&z).unwrap();
        assert_eq!(m.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        let u = codec.unmerge().forward(&m).unwrap();
        assert_eq!(u.dims(), &[1, 4, 4, 8]);
        assert_eq!(u.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn swapping_patches_swaps_tokens() {
        let codec = SemCodec::new(tiny_cfg(), 4, DType::F32, &Device::Cpu).unwrap();
        let im = noise_image(8, 8, 5);
        let mut swapped = im.clone();
        // exchange the patch at token (0, 0) with the one at token (2, 3)
        for di in 0..2 {
            for dj in 0..2 {
                let a = im.pixel(di, dj).to_vec();
                let b = im.pixel(4 + di, 6 + dj).to_vec();
                swapped.set_pixel(di, dj, &b);
                swapped.set_pixel(4 + di, 6 + dj, &a);
            }
        }
        let t1 = codec.patch_embed(&im).unwrap().tokens.squeeze(0).unwrap();
        let t2 = codec.patch_embed(&swapped).unwrap().tokens.squeeze(0).unwrap();
        let tok = |t: &Tensor, r: usize, c: usize| t.get(r).unwrap().get(c).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(tok(&t1, 0, 0), tok(&t2, 2, 3));
        assert_eq!(tok(&t1, 2, 3), tok(&t2, 0, 0));
        assert_eq!(tok(&t1, 1, 1), tok(&t2, 1, 1));
    }

    #[test]
    fn space_depth_round_trip() {
        let x = random_tensor(&[2, 4, 6, 3], 6, DType::F32);
        let back = depth_to_space(&space_to_depth(&x).unwrap()).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(matches!(space_to_depth(&random_tensor(&[1, 3, 4, 2], 0, DType::F32)), Err(Error::Shape(_))));
    }

    #[test]
    fn shift_then_unshift_is_exact() {
        let x = random_tensor(&[1, 8, 8, 5], 7, DType::F32);
        let back = cyclic_unshift(&cyclic_shift(&x, 2).unwrap(), 2).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn block_with_silent_branches_is_identity() {
        let codec = SemCodec::new(tiny_cfg(), 8, DType::F32, &Device::Cpu).unwrap();
        for name in ["enc.s0.b1.proj.weight", "enc.s0.b1.fc2.weight"] {
            let v = codec.params().get(name).unwrap();
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let block = &codec.stage_blocks(true, 0)[1];
        assert!(block.is_shifted());
        let x = random_tensor(&[1, 4, 4, 8], 9, DType::F32);
        let y = block.forward(&x).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let codec = SemCodec::new(SemCodecConfig::default(), 10, DType::F32, &Device::Cpu).unwrap();
        let x = random_tensor(&[2, 16, 16, 128], 11, DType::F32);
        for block in codec.stage_blocks(true, 0) {
            let p = block.attention_probs(&x).unwrap();
            assert_eq!(p.dims(), &[2 * 16, 4, 16, 16]);
            let sums = p.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
            let all = p.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(all.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn unshifted_windows_are_independent() {
        let codec = SemCodec::new(SemCodecConfig::default(), 12, DType::F32, &Device::Cpu).unwrap();
        let block = &codec.stage_blocks(true, 0)[0];
        let x = random_tensor(&[1, 16, 16, 128], 13, DType::F32);
        // token (0, 0) sits in window (0, 0); token (5, 9) in window (1, 2)
        let bump = {
            // non-constant across channels so normalization cannot absorb it
            let mut v = vec![0f32; 16 * 16 * 128];
            for c in 0..128 {
                v[(5 * 16 + 9) * 128 + c] = if c % 3 == 0 { 3.0 } else { -1.0 };
            }
            Tensor::from_vec(v, (1, 16, 16, 128), &Device::Cpu).unwrap()
        };
        let y0 = block.forward_with_shift(&x, false).unwrap();
        let y1 = block.forward_with_shift(&(&x + &bump).unwrap(), false).unwrap();
        let at = |t: &Tensor, r: usize, c: usize| {
            t.get(0).unwrap().get(r).unwrap().get(c).unwrap().to_vec1::<f32>().unwrap()
        };
        for (a, b) in at(&y0, 0, 0).iter().zip(at(&y1, 0, 0)) {
            assert!((a - b).abs() < 1e-6);
        }
        // a token in the same window does feel the perturbation
        let moved = at(&y0, 4, 8).iter().zip(at(&y1, 4, 8)).any(|(a, b)| (a - b).abs() > 1e-4);
        assert!(moved);
    }

    #[test]
    fn shift_mask_blocks_wrapped_regions() {
        let m = shift_mask(4, 4, WindowConfig::new(2));
        // 4 windows of 4 tokens; window (0, 0) lies entirely in region (0, 0)
        assert!(m[..16].iter().all(|&v| v == 0.0));
        // the last window mixes all four regions: only the diagonal is open
        let last = &m[48..64];
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(last[a * 4 + b] == 0.0, a == b);
            }
        }
    }

    /// Central-difference check of every parameter of one 1-head block on a 2×2 window.
    #[test]
    fn block_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut init = Init {
            rng: &mut rng,
            dtype: DType::F64,
            device: &dev,
        };
        let mut p = ParamBundle::new();
        SwinBlock::create(&mut p, &mut init, "b", 4, 1, 2, 2).unwrap();
        // move normalization parameters off their trivial values
        for name in ["b.norm1.gamma", "b.norm1.beta", "b.norm2.gamma", "b.norm2.beta", "b.rel_bias"] {
            let v = p.get(name).unwrap();
            let r = random_tensor(v.dims(), name.len() as u64, DType::F64);
            v.set(&(v.as_tensor() + (r * 0.5).unwrap()).unwrap()).unwrap();
        }
        let block = SwinBlock::from_bundle(&p, "b", 1, 2, false).unwrap();
        let x = random_tensor(&[1, 2, 2, 4], 15, DType::F64);
        let target = random_tensor(&[1, 2, 2, 4], 16, DType::F64);
        let loss = |b: &SwinBlock| -> Tensor {
            (b.forward(&x).unwrap() - &target).unwrap().sqr().unwrap().sum_all().unwrap()
        };
        let grads = loss(&block).backward().unwrap();
        let h = 1e-6;
        for (name, var) in p.iter() {
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in 0..base.len() {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[i] += delta;
                    var.set(&Tensor::from_vec(v, var.dims(), &dev).unwrap()).unwrap();
                    let out = nn::scalar(&loss(&block)).unwrap();
                    var.set(&Tensor::from_vec(base.clone(), var.dims(), &dev).unwrap()).unwrap();
                    out
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3);
                assert!(err < 1e-4, "{name}[{i}]: analytic {} vs numeric {fd}", g[i]);
            }
        }
    }

    #[test]
    fn nan_params_are_reported() {
        let codec = SemCodec::new(tiny_cfg(), 17, DType::F32, &Device::Cpu).unwrap();
        let v = codec.params().get("enc.head.bias").unwrap();
        v.set(&(v.ones_like().unwrap() * f64::NAN).unwrap()).unwrap();
        assert!(matches!(codec.sem_encode(&noise_image(8, 8, 1)), Err(Error::Numerical(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let images: Vec<Image> = (0..3).map(|s| noise_image(8, 8, s)).collect();
        let codec = SemCodec::new(tiny_cfg(), 18, DType::F32, &Device::Cpu).unwrap();
        let snap = codec.params().snapshot().unwrap();
        let opt = OptimConfig { learning_rate: 0.0, epochs: 2, batch_size: 2, ..Default::default() };
        let (trained, _) = train_sem_codec_from(codec, &images, &opt, 1).unwrap();
        assert!(trained.params().matches_snapshot(&snap).unwrap());
        assert!(matches!(
            train_sem_codec(&[], tiny_cfg(), &opt, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tiny_training_reduces_loss_reproducibly() {
        let images: Vec<Image> = (0..6).map(|s| noise_image(8, 8, 30 + s)).collect();
        let opt = OptimConfig { learning_rate: 3e-3, epochs: 4, batch_size: 3, weight_decay: 0.01 };
        let (c1, l1) = train_sem_codec(&images, tiny_cfg(), &opt, 5).unwrap();
        let (_, l2) = train_sem_codec(&images, tiny_cfg(), &opt, 5).unwrap();
        assert!(l1.final_loss() < l1.initial_loss);
        assert_eq!(l1, l2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sem.safetensors");
        c1.save(&path).unwrap();
        let back = SemCodec::load(&path, &Device::Cpu).unwrap();
        assert_eq!(back.config(), c1.config());
        let im = &images[0];
        assert_eq!(
            back.sem_decode(&back.sem_encode(im).unwrap()).unwrap(),
            c1.sem_decode(&c1.sem_encode(im).unwrap()).unwrap()
        );
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn any_shift_round_trips(side in 1usize..9, c in 1usize..6, shift in 0usize..9, seed in proptest::prelude::any::<u64>()) {
            let x = random_tensor(&[1, side, side, c], seed, DType::F32);
            let back = cyclic_unshift(&cyclic_shift(&x, shift % side).unwrap(), shift % side).unwrap();
            proptest::prop_assert_eq!(
                back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }
}
