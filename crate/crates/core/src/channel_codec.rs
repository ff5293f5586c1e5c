//! Three-tier stacked convolutional channel codec with SNR-gated depth and
//! freeze-and-extend training.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{gaussian_noise, sample_gain, snr_to_sigma2, ChannelConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvTranspose2d, Init, OptimConfig, ParamBundle, TrainLog};

/// Width of the latent entering tier 1 and leaving the last decoder tier.
pub const LATENT_WIDTH: usize = 96;
/// Output widths of encoder tiers 1..=3.
pub const TIER_WIDTHS: [usize; 3] = [64, 128, 256];

/// SNR switching points and the operating range, all in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnrThresholds {
    pub gamma1_db: f64,
    pub gamma2_db: f64,
    pub gamma_min_db: f64,
    pub gamma_max_db: f64,
}

impl Default for SnrThresholds {
    fn default() -> Self {
        Self {
            gamma1_db: 3.0,
            gamma2_db: -3.0,
            gamma_min_db: -10.0,
            gamma_max_db: 10.0,
        }
    }
}

impl SnrThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_min_db < self.gamma2_db
            && self.gamma2_db < self.gamma1_db
            && self.gamma1_db < self.gamma_max_db;
        if !ok {
            return Err(Error::Config(format!(
                "thresholds must satisfy min < gamma2 < gamma1 < max, got {} < {} < {} < {}",
                self.gamma_min_db, self.gamma2_db, self.gamma1_db, self.gamma_max_db
            )));
        }
        Ok(())
    }

    /// SNR interval sampled while training `stage` (1-based).
    pub fn stage_interval(&self, stage: usize) -> Result<(f64, f64)> {
        match stage {
            1 => Ok((self.gamma_min_db, self.gamma_max_db)),
            2 => Ok((self.gamma_min_db, self.gamma1_db)),
            3 => Ok((self.gamma_min_db, self.gamma2_db)),
            s => Err(Error::Config(format!("no training stage {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthSelection {
    pub depth: u8,
    pub snr_db: f64,
}

/// Deeper stacks for worse channels; a threshold SNR takes the shallower branch.
pub fn select_depth(snr_db: f64, t: &SnrThresholds) -> Result<DepthSelection> {
    t.validate()?;
    if !(t.gamma_min_db..=t.gamma_max_db).contains(&snr_db) {
        return Err(Error::Config(format!(
            "SNR {snr_db} dB outside [{}, {}]",
            t.gamma_min_db, t.gamma_max_db
        )));
    }
    let depth = if snr_db >= t.gamma1_db {
        1
    } else if snr_db >= t.gamma2_db {
        2
    } else {
        3
    };
    Ok(DepthSelection { depth, snr_db })
}

fn check_depth(depth: u8) -> Result<usize> {
    match depth {
        1..=3 => Ok(depth as usize),
        d => Err(Error::Shape(format!("depth must be 1, 2 or 3, got {d}"))),
    }
}

/// Per-tier encoder and decoder bundles plus freeze flags.
#[derive(Debug, Clone)]
pub struct StackedCodecParams {
    pub enc: [ParamBundle; 3],
    pub dec: [ParamBundle; 3],
    pub frozen: [bool; 3],
}

impl StackedCodecParams {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            dtype,
            device,
        };
        let mut enc: [ParamBundle; 3] = Default::default();
        let mut dec: [ParamBundle; 3] = Default::default();
        for k in 0..3 {
            let (i, o) = (tier_input(k), TIER_WIDTHS[k]);
            let e = &mut enc[k];
            Conv2d::create(e, &mut init, &format!("enc{}.a", k + 1), i, o, 3)?;
            Conv2d::create(e, &mut init, &format!("enc{}.b", k + 1), o, o, 3)?;
            // decoder tier k inverts encoder tier k
            let d = &mut dec[k];
            ConvTranspose2d::create(d, &mut init, &format!("dec{}.a", k + 1), o, o, 3)?;
            ConvTranspose2d::create(d, &mut init, &format!("dec{}.b", k + 1), o, i, 3)?;
        }
        Ok(Self {
            enc,
            dec,
            frozen: [false; 3],
        })
    }

    pub fn tier_vars(&self, tier: usize) -> Vec<candle_core::Var> {
        let mut v = self.enc[tier].vars();
        v.extend(self.dec[tier].vars());
        v
    }

    pub fn tier_snapshot(&self, tier: usize) -> Result<[Vec<(String, Vec<f64>)>; 2]> {
        Ok([self.enc[tier].snapshot()?, self.dec[tier].snapshot()?])
    }

    pub fn tier_matches(&self, tier: usize, snap: &[Vec<(String, Vec<f64>)>; 2]) -> Result<bool> {
        Ok(self.enc[tier].matches_snapshot(&snap[0])? && self.dec[tier].matches_snapshot(&snap[1])?)
    }

    /// All tiers in one bundle.
    pub fn combined(&self) -> Result<ParamBundle> {
        let mut all = ParamBundle::new();
        for b in self.enc.iter().chain(&self.dec) {
            for (name, var) in b.iter() {
                all.insert(name, var.clone())?;
            }
        }
        Ok(all)
    }

    fn from_combined(all: &ParamBundle, frozen: [bool; 3]) -> Result<Self> {
        let mut enc: [ParamBundle; 3] = Default::default();
        let mut dec: [ParamBundle; 3] = Default::default();
        for (name, var) in all.iter() {
            let (side, rest) = name.split_at(3);
            let k = rest
                .chars()
                .next()
                .and_then(|c| c.to_digit(10))
                .filter(|d| (1..=3).contains(d))
                .ok_or_else(|| Error::Shape(format!("unexpected channel codec parameter {name}")))?
                as usize
                - 1;
            match side {
                "enc" => enc[k].insert(name, var.clone())?,
                "dec" => dec[k].insert(name, var.clone())?,
                _ => return Err(Error::Shape(format!("unexpected channel codec parameter {name}"))),
            }
        }
        Ok(Self { enc, dec, frozen })
    }
}

fn tier_input(k: usize) -> usize {
    if k == 0 {
        LATENT_WIDTH
    } else {
        TIER_WIDTHS[k - 1]
    }
}

/// Stacked codec built from its parameters.
#[derive(Debug, Clone)]
pub struct StackedCodec {
    params: StackedCodecParams,
    enc: Vec<(Conv2d, Conv2d)>,
    dec: Vec<(ConvTranspose2d, ConvTranspose2d)>,
}

impl StackedCodec {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::from_params(StackedCodecParams::new(seed, dtype, device)?)
    }

    pub fn from_params(params: StackedCodecParams) -> Result<Self> {
        let mut enc = Vec::with_capacity(3);
        let mut dec = Vec::with_capacity(3);
        for k in 0..3 {
            let a = Conv2d::from_bundle(&params.enc[k], &format!("enc{}.a", k + 1), 1)?;
            let b = Conv2d::from_bundle(&params.enc[k], &format!("enc{}.b", k + 1), 1)?;
            if a.in_channels() != tier_input(k) || b.out_channels() != TIER_WIDTHS[k] {
                return Err(Error::Shape(format!(
                    "encoder tier {} maps {}→{}, expected {}→{}",
                    k + 1,
                    a.in_channels(),
                    b.out_channels(),
                    tier_input(k),
                    TIER_WIDTHS[k]
                )));
            }
            let da = ConvTranspose2d::from_bundle(&params.dec[k], &format!("dec{}.a", k + 1), 1)?;
            let db = ConvTranspose2d::from_bundle(&params.dec[k], &format!("dec{}.b", k + 1), 1)?;
            if da.in_channels() != TIER_WIDTHS[k] || db.out_channels() != tier_input(k) {
                return Err(Error::Shape(format!("decoder tier {} does not mirror its encoder", k + 1)));
            }
            enc.push((a, b));
            dec.push((da, db));
        }
        Ok(Self { params, enc, dec })
    }

    pub fn params(&self) -> &StackedCodecParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut StackedCodecParams {
        &mut self.params
    }

    pub fn dtype(&self) -> Result<DType> {
        Ok(self.params.enc[0].get("enc1.a.weight")?.dtype())
    }

    pub fn device(&self) -> Result<Device> {
        Ok(self.params.enc[0].get("enc1.a.weight")?.device().clone())
    }

    /// Encoder tiers `1..=depth`. Every tier but the last hands the next one a
    /// unit-power signal, the scale its frozen decoder was trained on.
    pub fn encode_raw(&self, latent: &Tensor, depth: u8) -> Result<Tensor> {
        let depth = check_depth(depth)?;
        let (_, c, _, _) = latent.dims4()?;
        if c != LATENT_WIDTH {
            return Err(Error::Shape(format!("latent width {c}, expected {LATENT_WIDTH}")));
        }
        let mut x = latent.clone();
        for (k, (a, b)) in self.enc[..depth].iter().enumerate() {
            if k > 0 {
                x = rescale_between_tiers(&x)?;
            }
            x = b.forward(&a.forward(&x)?.relu()?)?;
        }
        Ok(x)
    }

    /// Encoder output scaled to unit average power per image.
    pub fn chan_encode(&self, latent: &Tensor, depth: u8) -> Result<Tensor> {
        power_normalize(&self.encode_raw(latent, depth)?)
    }

    pub fn chan_decode(&self, received: &Tensor, depth: u8) -> Result<Tensor> {
        let depth = check_depth(depth)?;
        let (_, c, _, _) = received.dims4()?;
        if c != TIER_WIDTHS[depth - 1] {
            return Err(Error::Shape(format!(
                "received width {c} does not match depth {depth} ({})",
                TIER_WIDTHS[depth - 1]
            )));
        }
        let mut x = received.clone();
        for (a, b) in self.dec[..depth].iter().rev() {
            x = b.forward(&a.forward(&x)?.relu()?)?;
        }
        Ok(x)
    }

    /// Channel symbols sent for an `h`×`w` latent at `depth`.
    pub fn symbols(depth: u8, h: usize, w: usize) -> Result<usize> {
        Ok(TIER_WIDTHS[check_depth(depth)? - 1] * h * w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("kind".into(), "stacked_channel_codec".into());
        meta.insert("frozen".into(), serde_json::to_string(&self.params.frozen)?);
        self.params.combined()?.save(path, &meta)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (all, meta) = ParamBundle::load(path, device)?;
        let frozen = match meta.get("frozen") {
            Some(s) => serde_json::from_str(s)?,
            None => [false; 3],
        };
        Self::from_params(StackedCodecParams::from_combined(&all, frozen)?)
    }
}

/// Scales each image of a `(B, …)` batch to unit mean square.
pub fn power_normalize(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    // accumulate in f64 so low-precision inputs still land on unit power
    let power = x.to_dtype(DType::F64)?.sqr()?.flatten_from(1)?.mean_keepdim(1)?;
    let pv = power.flatten_all()?.to_vec1::<f64>()?;
    if let Some(p) = pv.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::DegenerateChannel(format!(
            "cannot power-normalize a signal with mean power {p}"
        )));
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, x.rank() - 1));
    Ok(x.broadcast_div(&power.sqrt()?.to_dtype(x.dtype())?.reshape(shape)?)?)
}

/// Unit-power rescaling that lets an all-zero image through unchanged, so
/// degeneracy is only reported at the channel.
fn rescale_between_tiers(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    let power = x.to_dtype(DType::F64)?.sqr()?.flatten_from(1)?.mean_keepdim(1)?;
    let pv = power.flatten_all()?.to_vec1::<f64>()?;
    if pv.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("non-finite signal between encoder tiers".into()));
    }
    // zero-power rows divide by one instead
    let dead = power.eq(0.0)?.to_dtype(DType::F64)?;
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, x.rank() - 1));
    let norm = (power + dead)?.sqrt()?.to_dtype(x.dtype())?.reshape(shape)?;
    Ok(x.broadcast_div(&norm)?)
}

/// One per-image channel realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub snr_db: f64,
    pub amplitude: f64,
    pub noise_seed: u64,
}

impl ChannelRealization {
    /// Draws a fading amplitude and noise seed for `snr_db` from `rng`.
    pub fn draw(cfg: &ChannelConfig, snr_db: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let gain = sample_gain(&cfg.params(), rng.random(), 1)?[0];
        Ok(Self {
            snr_db,
            amplitude: gain.amplitude,
            noise_seed: rng.random(),
        })
    }
}

/// Differentiable block-fading channel over a `(B, …)` batch, one realization per image.
pub fn channel_tensor(x: &Tensor, real: &[ChannelRealization], equalize: bool) -> Result<Tensor> {
    let b = x.dim(0)?;
    if real.len() != b {
        return Err(Error::Shape(format!("{} channel draws for batch {b}", real.len())));
    }
    let per = x.elem_count() / b.max(1);
    let mut noise = Vec::with_capacity(x.elem_count());
    let mut scale = Vec::with_capacity(b);
    for r in real {
        if equalize && r.amplitude == 0.0 {
            return Err(Error::DegenerateChannel("zero channel amplitude cannot be equalized".into()));
        }
        let n = gaussian_noise(per, snr_to_sigma2(r.snr_db), r.noise_seed);
        if equalize {
            // (h·x + n) / h
            noise.extend(n.into_iter().map(|v| v / r.amplitude));
            scale.push(1.0);
        } else {
            noise.extend(n);
            scale.push(r.amplitude);
        }
    }
    let mut sshape = vec![b];
    sshape.extend(std::iter::repeat_n(1, x.rank() - 1));
    let scale = Tensor::from_vec(scale, sshape, x.device())?.to_dtype(x.dtype())?;
    let noise = Tensor::from_vec(noise, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x.broadcast_mul(&scale)? + noise)?)
}

/// Latent MSE of the depth-`depth` path through `real`.
pub fn channel_loss(
    codec: &StackedCodec,
    latents: &Tensor,
    depth: u8,
    real: &[ChannelRealization],
    equalize: bool,
) -> Result<Tensor> {
    let tx = codec.chan_encode(latents, depth)?;
    let rx = channel_tensor(&tx, real, equalize)?;
    let out = codec.chan_decode(&rx, depth)?;
    Ok((out - latents)?.sqr()?.mean_all()?)
}

/// What one training stage did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub interval_db: (f64, f64),
    pub epochs: usize,
    pub seed: u64,
    /// Every SNR drawn for a training sample, in draw order.
    pub gammas: Vec<f64>,
    pub log: TrainLog,
}

/// Trains tiers 1, 2, 3 in turn, freezing each before the next.
///
/// `latents` are `(1, 96, H', W')` tensors from a frozen semantic encoder.
/// Each epoch sends every latent through `draws` independent channel
/// realizations. With `stage_dir` set, each stage writes `stage{k}.safetensors` and
/// `stage{k}.json`.
pub fn staged_train(
    codec: StackedCodec,
    latents: &[Tensor],
    thresholds: &SnrThresholds,
    channel: &ChannelConfig,
    opt: &OptimConfig,
    draws: usize,
    seed: u64,
    stage_dir: Option<&Path>,
) -> Result<(StackedCodec, Vec<StageLog>)> {
    thresholds.validate()?;
    channel.validate()?;
    opt.validate()?;
    if latents.is_empty() {
        return Err(Error::Config("channel codec training set is empty".into()));
    }
    if draws == 0 {
        return Err(Error::Config("channel draws per latent must be at least 1".into()));
    }
    let mut codec = codec;
    let mut logs = Vec::with_capacity(3);
    for stage in 1..=3 {
        let log = train_stage(&mut codec, latents, thresholds, channel, opt, draws, seed, stage)?;
        if let Some(dir) = stage_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let ckpt = dir.join(format!("stage{stage}.safetensors"));
            codec.save(&ckpt)?;
            let manifest = dir.join(format!("stage{stage}.json"));
            let text = serde_json::to_string_pretty(&serde_json::json!({
                "stage": stage,
                "interval_db": log.interval_db,
                "epochs": log.epochs,
                "seed": log.seed,
                "checkpoint": ckpt.file_name().and_then(|s| s.to_str()),
                "initial_loss": log.log.initial_loss,
                "epoch_losses": log.log.epoch_losses,
            }))?;
            std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
        }
        logs.push(log);
    }
    Ok((codec, logs))
}

fn train_stage(
    codec: &mut StackedCodec,
    latents: &[Tensor],
    thresholds: &SnrThresholds,
    channel: &ChannelConfig,
    opt: &OptimConfig,
    draws: usize,
    seed: u64,
    stage: usize,
) -> Result<StageLog> {
    let (lo, hi) = thresholds.stage_interval(stage)?;
    let tier = stage - 1;
    let depth = stage as u8;
    let stage_seed = seed.wrapping_add(stage as u64 * 0x9e37_79b9);
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed);
    let frozen: Vec<_> = (0..tier)
        .map(|k| codec.params.tier_snapshot(k))
        .collect::<Result<_>>()?;
    for k in 0..tier {
        codec.params.frozen[k] = true;
    }

    // fixed evaluation draws make per-epoch losses comparable
    let mut eval_rng = ChaCha8Rng::seed_from_u64(stage_seed ^ 0xe7a1);
    let eval_real: Vec<ChannelRealization> = (0..latents.len())
        .map(|_| {
            let g = eval_rng.random_range(lo..hi);
            ChannelRealization::draw(channel, g, &mut eval_rng)
        })
        .collect::<Result<_>>()?;
    let evaluate = |codec: &StackedCodec| -> Result<f64> {
        let mut total = 0.0;
        for (i, chunk) in latents.chunks(opt.batch_size).enumerate() {
            let x = Tensor::cat(chunk, 0)?;
            let r = &eval_real[i * opt.batch_size..i * opt.batch_size + chunk.len()];
            let l = channel_loss(codec, &x, depth, r, channel.equalize)?;
            total += nn::scalar(&l.detach())? * chunk.len() as f64;
        }
        Ok(total / latents.len() as f64)
    };

    let mut optimizer = opt.optimizer(codec.params.tier_vars(tier))?;
    let mut log = TrainLog {
        initial_loss: evaluate(codec)?,
        epoch_losses: Vec::with_capacity(opt.epochs),
    };
    let mut gammas = Vec::new();
    for epoch in 0..opt.epochs {
        for batch in nn::epoch_batches(latents.len() * draws, opt.batch_size, &mut rng) {
            let parts: Vec<&Tensor> = batch.iter().map(|&i| &latents[i % latents.len()]).collect();
            let x = Tensor::cat(&parts, 0)?;
            let real: Vec<ChannelRealization> = batch
                .iter()
                .map(|_| {
                    let g = rng.random_range(lo..hi);
                    gammas.push(g);
                    ChannelRealization::draw(channel, g, &mut rng)
                })
                .collect::<Result<_>>()?;
            let loss = channel_loss(codec, &x, depth, &real, channel.equalize)?;
            nn::step(&mut optimizer, &loss)?;
        }
        let l = evaluate(codec)?;
        if !l.is_finite() {
            return Err(Error::Numerical(format!(
                "stage {stage} loss diverged at epoch {epoch} (learning rate {})",
                opt.learning_rate
            )));
        }
        log::debug!("channel codec stage {stage} epoch {epoch}: loss {l:.6}");
        log.epoch_losses.push(l);
    }
    for (k, snap) in frozen.iter().enumerate() {
        if !codec.params.tier_matches(k, snap)? {
            return Err(Error::Invariant(format!(
                "tier {} changed while frozen during stage {stage}",
                k + 1
            )));
        }
    }
    log::info!(
        "stage {stage}: {} SNR draws in [{lo}, {hi}), loss {:.5} -> {:.5}",
        gammas.len(),
        log.initial_loss,
        log.final_loss()
    );
    Ok(StageLog {
        stage,
        interval_db: (lo, hi),
        epochs: opt.epochs,
        seed: stage_seed,
        gammas,
        log,
    })
}
