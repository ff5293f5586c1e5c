//! End-to-end transmission, training orchestration, sweeps and ablations.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_channel, ChannelDraw, NoiseSpec};
use crate::channel_codec::{select_depth, staged_train, ChannelRealization, StackedCodec, StageLog};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::dataset::{generate_synthetic, load_dataset};
use crate::effect_eval::{self, extract_features, EvalFeatures, EvalModel, TrainSample};
use crate::error::{Error, Result, StageExt};
use crate::image::Image;
use crate::metrics::{self, append_reports, fmt_metric, MetricsReport};
use crate::nn::TrainLog;
use crate::segmentation::{colorize, decolorize, sme_refine, train_segnet, ColorMap, SegNet, SegmentationMap};
use crate::selection::{payload_size, select, select_tier, SelectedImage, PAYLOAD_CODEC};
use crate::semantic_codec::{train_sem_codec, SemCodec, TokenGrid};

pub const SEGNET_FILE: &str = "segnet.safetensors";
pub const SEM_CODEC_FILE: &str = "sem_codec.safetensors";
pub const CHAN_CODEC_FILE: &str = "chan_codec.safetensors";
pub const EVAL_MODEL_FILE: &str = "eval_model.json";

/// Semantic and channel codecs, or an identity stand-in for plumbing tests.
#[derive(Debug, Clone)]
pub enum Codecs {
    Learned { sem: SemCodec, chan: StackedCodec },
    /// Pixels go straight through the channel.
    Passthrough,
}

#[derive(Debug, Clone)]
pub struct Models {
    pub segnet: SegNet,
    pub colors: ColorMap,
    pub codecs: Codecs,
    pub eval: EvalModel,
}

impl Models {
    /// Loads checkpoints from the config's model directory.
    pub fn load(cfg: &ExperimentConfig, require_eval: bool) -> Result<Self> {
        let dir = cfg.models_dir();
        let need = |name: &str, cmd: &str| -> Result<PathBuf> {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::Config(format!(
                    "missing checkpoint {}; run `{cmd}` first",
                    p.display()
                )))
            }
        };
        let colors = color_map(cfg)?;
        let segnet = load_segnet(&need(SEGNET_FILE, "train-seg")?, colors.num_classes())?;
        let sem = SemCodec::load(&need(SEM_CODEC_FILE, "train-sem")?, &Device::Cpu)?;
        let chan = StackedCodec::load(&need(CHAN_CODEC_FILE, "train-chan")?, &Device::Cpu)?;
        let eval = if require_eval {
            let p = need(EVAL_MODEL_FILE, "fit-eval")?;
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            serde_json::from_str(&text)?
        } else {
            EvalModel::zero()
        };
        Ok(Self {
            segnet,
            colors,
            codecs: Codecs::Learned { sem, chan },
            eval,
        })
    }
}

pub fn load_segnet(path: &Path, num_classes: usize) -> Result<SegNet> {
    let (params, _) = crate::nn::ParamBundle::load(path, &Device::Cpu)?;
    SegNet::from_params(params, num_classes)
}

pub fn save_segnet(net: &SegNet, path: &Path) -> Result<()> {
    let mut meta = std::collections::HashMap::new();
    meta.insert("kind".to_string(), "segnet".to_string());
    meta.insert("num_classes".to_string(), net.num_classes().to_string());
    net.params().save(path, &meta)
}

pub fn color_map(cfg: &ExperimentConfig) -> Result<ColorMap> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { classes, .. } => ColorMap::palette(*classes),
        DatasetConfig::Directory { colormap, .. } => ColorMap::load(colormap),
    }
}

/// Scenes named by the config.
pub fn load_scenes(cfg: &ExperimentConfig) -> Result<Vec<(Image, SegmentationMap)>> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            count,
            size,
            classes,
            seed,
        } => Ok(generate_synthetic(*count, *size, *classes, *seed)?
            .into_iter()
            .map(|s| (s.image, s.map))
            .collect()),
        DatasetConfig::Directory { path, .. } => load_dataset(path, &color_map(cfg)?),
    }
}

/// Seed for a named component, derived from the experiment seed.
pub fn component_seed(base: u64, name: &str) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    base.hash(&mut h);
    name.hash(&mut h);
    h.finish()
}

/// Channel seed of one image's transmissions.
///
/// Independent of SNR, so every point of a sweep sees the same fading draw
/// and the same unit noise pattern, scaled by σ.
pub fn transmission_seed(base: u64, image: usize) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    (base, image as u64).hash(&mut h);
    h.finish()
}

/// Overrides for ablations and harvesting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TransmitOptions {
    pub tier: Option<usize>,
    pub depth: Option<u8>,
    /// Zero channel noise while still gating on the nominal SNR.
    pub noiseless: bool,
}

/// Everything one transmission produced.
#[derive(Debug, Clone)]
pub struct Transmission {
    pub reconstruction: Image,
    pub selected: SelectedImage,
    pub map: SegmentationMap,
    pub features: EvalFeatures,
    pub depth: u8,
    pub symbols: usize,
    /// PSNR of the decoded latent against the sent one, peak = max |z|.
    /// `None` without a learned codec.
    pub latent_psnr_db: Option<f64>,
    pub report: MetricsReport,
}

/// Segment, refine, select, encode, transmit, decode and score one image.
pub fn run_transmission(
    image: &Image,
    models: &Models,
    snr_db: f64,
    cfg: &ExperimentConfig,
    run_id: &str,
    seed: u64,
    opts: TransmitOptions,
) -> Result<Transmission> {
    let task = cfg.task_spec()?;
    let range = cfg.snr_range()?;

    let raw_map = models.segnet.segment(image).stage("segment")?;
    let map = if cfg.refine {
        let painted = colorize(&raw_map, &models.colors).stage("refine")?;
        decolorize(&sme_refine(&painted).stage("refine")?, &models.colors).stage("refine")?
    } else {
        raw_map
    };

    let features = extract_features(image, &map, &task, snr_db, &range).stage("select")?;
    let selected = match opts.tier {
        Some(t) => {
            let mut s = select_tier(image, &map, &task, &cfg.blur_policy, t).stage("select")?;
            s.predicted_quality = effect_eval::predict(&models.eval, &features);
            s
        }
        None => select(image, &map, &task, snr_db, &models.eval, &cfg.blur_policy, &range)
            .stage("select")?,
    };
    if !selected.pixels.same_shape(image) {
        return Err(Error::Shape("selection changed the image shape".into()).in_stage("select"));
    }

    let depth = match opts.depth {
        Some(d) => d,
        None => select_depth(snr_db, &cfg.snr_thresholds()).stage("depth")?.depth,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let real = ChannelRealization::draw(&cfg.channel, snr_db, &mut rng).stage("channel")?;
    let noise = if opts.noiseless {
        NoiseSpec::noiseless()
    } else {
        NoiseSpec::from_snr_db(snr_db)
    };
    let draw = ChannelDraw::from_amplitude(real.amplitude);
    let send = |tx: &[f32]| {
        apply_channel(tx, &draw, &noise, real.noise_seed, cfg.channel.equalize).stage("channel")
    };

    let (reconstruction, symbols, latent_psnr_db) = match &models.codecs {
        Codecs::Passthrough => {
            let rx = send(selected.pixels.data())?;
            let (h, w, c) = image.dims();
            let rec = Image::new(h, w, c, rx.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
            (rec, h * w * c, None)
        }
        Codecs::Learned { sem, chan } => {
            let grid = sem.sem_encode(&selected.pixels).stage("semantic-encode")?;
            let latent = grid.to_nchw().stage("semantic-encode")?;
            let tx = chan.chan_encode(&latent, depth).stage("channel-encode")?;
            let shape = tx.shape().clone();
            let flat = tx.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let rx = send(&flat)?;
            let rx = Tensor::from_vec(rx, shape, &chan.device()?)?.to_dtype(chan.dtype()?)?;
            let latent_hat = chan.chan_decode(&rx, depth).stage("channel-decode")?;
            let grid_hat = TokenGrid::from_nchw(&latent_hat, grid.patch, grid.merges)?;
            let rec = sem.sem_decode(&grid_hat).stage("semantic-decode")?;
            (rec, flat.len(), Some(latent_psnr(&latent, &latent_hat)?))
        }
    };

    let psnr_db = metrics::psnr(&selected.pixels, &reconstruction, None).stage("metrics")?;
    let ssim = metrics::ssim(&selected.pixels, &reconstruction).stage("metrics")?;
    let task_psnr_db = if selected.mask.count() == 0 {
        f64::NAN
    } else {
        metrics::psnr(image, &reconstruction, Some(&selected.mask)).stage("metrics")?
    };
    let payload_bytes = payload_size(&selected.pixels).stage("metrics")?;
    log::debug!(
        "{run_id}: snr {snr_db} dB depth {depth} tier {} payload {payload_bytes} B psnr {psnr_db:.3}",
        selected.tier_used
    );
    let report = MetricsReport {
        run_id: run_id.to_string(),
        snr_db,
        depth,
        tier: selected.tier_used,
        psnr_db,
        task_psnr_db,
        ssim,
        payload_bytes,
    };
    Ok(Transmission {
        reconstruction,
        selected,
        map,
        features,
        depth,
        symbols,
        latent_psnr_db,
        report,
    })
}

fn latent_psnr(sent: &Tensor, decoded: &Tensor) -> Result<f64> {
    let z = sent.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let zh = decoded.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let peak = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mse = z.iter().zip(&zh).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / z.len() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn train_segmentation(
    cfg: &ExperimentConfig,
    scenes: &[(Image, SegmentationMap)],
) -> Result<(SegNet, TrainLog)> {
    let k = color_map(cfg)?.num_classes();
    train_segnet(scenes, k, &cfg.training.segmentation, component_seed(cfg.seed, "segnet"))
        .stage("train-seg")
}

pub fn train_semantic(cfg: &ExperimentConfig, images: &[Image]) -> Result<(SemCodec, TrainLog)> {
    train_sem_codec(
        images,
        cfg.training.sem_codec,
        &cfg.training.semantic,
        component_seed(cfg.seed, "sem_codec"),
    )
    .stage("train-sem")
}

/// `(1, 96, H', W')` latents of `images` under a frozen semantic encoder.
pub fn encode_latents(sem: &SemCodec, images: &[Image]) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|im| Ok(sem.sem_encode(im)?.to_nchw()?.detach()))
        .collect()
}

pub fn train_channel(
    cfg: &ExperimentConfig,
    sem: &SemCodec,
    images: &[Image],
    stage_dir: Option<&Path>,
) -> Result<(StackedCodec, Vec<StageLog>)> {
    let latents = encode_latents(sem, images).stage("train-chan")?;
    let seed = component_seed(cfg.seed, "chan_codec");
    let codec = StackedCodec::new(seed, DType::F32, &Device::Cpu)?;
    staged_train(
        codec,
        &latents,
        &cfg.snr_thresholds(),
        &cfg.channel,
        &cfg.training.channel,
        cfg.training.channel_draws,
        seed,
        stage_dir,
    )
    .stage("train-chan")
}

/// First `n` scenes, or all of them when `n` is 0 or too large.
pub fn subset<'a>(scenes: &'a [(Image, SegmentationMap)], n: usize) -> &'a [(Image, SegmentationMap)] {
    if n == 0 || n >= scenes.len() {
        scenes
    } else {
        &scenes[..n]
    }
}

/// Evaluator training pairs from unblurred transmissions over the sweep grid.
pub fn harvest_eval_pairs(
    scenes: &[(Image, SegmentationMap)],
    models: &Models,
    cfg: &ExperimentConfig,
) -> Result<Vec<TrainSample>> {
    let top = cfg.blur_policy.tiers().len() - 1;
    let opts = TransmitOptions {
        tier: Some(top),
        ..Default::default()
    };
    let mut out = Vec::new();
    for &snr in &cfg.sweep.snr_grid_db {
        for (i, (im, _)) in scenes.iter().enumerate() {
            let seed = transmission_seed(component_seed(cfg.seed, "harvest"), i);
            let t = run_transmission(im, models, snr, cfg, &format!("harvest-{i}"), seed, opts)?;
            if t.report.task_psnr_db.is_finite() {
                out.push(TrainSample::new(t.features, t.report.task_psnr_db)?);
            }
        }
    }
    Ok(out)
}

pub fn fit_evaluator(cfg: &ExperimentConfig, pairs: &[TrainSample]) -> Result<EvalModel> {
    effect_eval::fit(pairs, cfg.training.eval_alpha, cfg.training.eval_epochs).stage("fit-eval")
}

/// Mean metrics at one SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr_db: f64,
    pub images: usize,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_task_psnr_db: f64,
    pub mean_payload_bytes: f64,
    pub depth: u8,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<MetricsReport>,
    pub pairs: Vec<TrainSample>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub const SWEEP_CSV: &str = "sweep.csv";
pub const REPORTS_CSV: &str = "reports.csv";
pub const EVAL_PAIRS_CSV: &str = "eval_pairs.csv";
pub const PSNR_PLOT: &str = "psnr_vs_snr.svg";
pub const SSIM_PLOT: &str = "ssim_vs_snr.svg";

/// Transmits every scene at every grid SNR and writes tables and plots to `out`.
pub fn sweep_snr(
    scenes: &[(Image, SegmentationMap)],
    models: &Models,
    grid: &[f64],
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<SweepOutput> {
    if grid.is_empty() {
        return Err(Error::Config("SNR grid is empty".into()));
    }
    if scenes.is_empty() {
        return Err(Error::Config("sweep needs at least one image".into()));
    }
    let t = cfg.snr_thresholds();
    for &g in grid {
        if !(t.gamma_min_db..=t.gamma_max_db).contains(&g) {
            return Err(Error::Config(format!(
                "grid SNR {g} dB outside [{}, {}]",
                t.gamma_min_db, t.gamma_max_db
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let base = component_seed(cfg.seed, "sweep");
    let mut rows = Vec::with_capacity(grid.len());
    let mut reports = Vec::new();
    let mut pairs = Vec::new();
    for &snr in grid {
        let mut batch = Vec::with_capacity(scenes.len());
        for (i, (im, _)) in scenes.iter().enumerate() {
            let id = format!("img{i:03}");
            let t = run_transmission(im, models, snr, cfg, &id, transmission_seed(base, i), TransmitOptions::default())?;
            if t.report.task_psnr_db.is_finite() {
                pairs.push(TrainSample::new(t.features, t.report.task_psnr_db)?);
            }
            batch.push(t.report);
        }
        rows.push(SweepRow {
            snr_db: snr,
            images: batch.len(),
            mean_psnr_db: mean(batch.iter().map(|r| r.psnr_db)),
            mean_ssim: mean(batch.iter().map(|r| r.ssim)),
            mean_task_psnr_db: mean(batch.iter().map(|r| r.task_psnr_db).filter(|v| !v.is_nan())),
            mean_payload_bytes: mean(batch.iter().map(|r| r.payload_bytes as f64)),
            depth: batch[0].depth,
        });
        reports.extend(batch);
    }

    write_sweep_csv(&out.join(SWEEP_CSV), &rows)?;
    let rpath = out.join(REPORTS_CSV);
    if rpath.exists() {
        std::fs::remove_file(&rpath).map_err(|e| Error::io(&rpath, e))?;
    }
    append_reports(&rpath, &reports)?;
    effect_eval::write_samples(&out.join(EVAL_PAIRS_CSV), &pairs)?;
    line_plot(
        &out.join(PSNR_PLOT),
        "PSNR vs SNR",
        "SNR (dB)",
        "PSNR (dB)",
        &[("mean PSNR", rows.iter().map(|r| (r.snr_db, r.mean_psnr_db)).collect())],
    )?;
    line_plot(
        &out.join(SSIM_PLOT),
        "SSIM vs SNR",
        "SNR (dB)",
        "SSIM",
        &[("mean SSIM", rows.iter().map(|r| (r.snr_db, r.mean_ssim)).collect())],
    )?;
    Ok(SweepOutput {
        rows,
        reports,
        pairs,
    })
}

pub const SWEEP_COLUMNS: [&str; 7] = [
    "snr_db",
    "images",
    "depth",
    "mean_psnr_db",
    "mean_ssim",
    "mean_task_psnr_db",
    "mean_payload_bytes",
];

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record([
            fmt_metric(r.snr_db),
            r.images.to_string(),
            r.depth.to_string(),
            fmt_metric(r.mean_psnr_db),
            fmt_metric(r.mean_ssim),
            fmt_metric(r.mean_task_psnr_db),
            fmt_metric(r.mean_payload_bytes),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Mean reconstruction PSNR per SNR with the shallowest and deepest stacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingRow {
    pub snr_db: f64,
    pub depth1_psnr_db: f64,
    pub depth3_psnr_db: f64,
    pub depth1_latent_psnr_db: f64,
    pub depth3_latent_psnr_db: f64,
}

impl StackingRow {
    pub fn gain_db(&self) -> f64 {
        self.depth3_psnr_db - self.depth1_psnr_db
    }

    pub fn latent_gain_db(&self) -> f64 {
        self.depth3_latent_psnr_db - self.depth1_latent_psnr_db
    }
}

/// Unblurred scenes sent through depth 1 and depth 3 over identical channel draws.
pub fn ablate_stacking(
    scenes: &[(Image, SegmentationMap)],
    models: &Models,
    grid: &[f64],
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<StackingRow>> {
    if grid.is_empty() {
        return Err(Error::Config("stacking grid is empty".into()));
    }
    let top = cfg.blur_policy.tiers().len() - 1;
    let base = component_seed(cfg.seed, "stacking");
    let mut rows = Vec::new();
    for &snr in grid {
        let mut acc = [Vec::new(), Vec::new()];
        let mut lat = [Vec::new(), Vec::new()];
        for (i, (im, _)) in scenes.iter().enumerate() {
            for (slot, depth) in [(0, 1u8), (1, 3u8)] {
                let opts = TransmitOptions {
                    tier: Some(top),
                    depth: Some(depth),
                    noiseless: false,
                };
                let seed = transmission_seed(base, i);
                let t = run_transmission(im, models, snr, cfg, &format!("stack-{i}"), seed, opts)?;
                acc[slot].push(t.report.psnr_db);
                lat[slot].push(t.latent_psnr_db.unwrap_or(f64::NAN));
            }
        }
        rows.push(StackingRow {
            snr_db: snr,
            depth1_psnr_db: mean(acc[0].iter().copied()),
            depth3_psnr_db: mean(acc[1].iter().copied()),
            depth1_latent_psnr_db: mean(lat[0].iter().copied()),
            depth3_latent_psnr_db: mean(lat[1].iter().copied()),
        });
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("stacking.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "snr_db",
            "depth1_psnr_db",
            "depth3_psnr_db",
            "gain_db",
            "depth1_latent_psnr_db",
            "depth3_latent_psnr_db",
            "latent_gain_db",
        ])?;
        for r in &rows {
            w.write_record([
                fmt_metric(r.snr_db),
                fmt_metric(r.depth1_psnr_db),
                fmt_metric(r.depth3_psnr_db),
                fmt_metric(r.gain_db()),
                fmt_metric(r.depth1_latent_psnr_db),
                fmt_metric(r.depth3_latent_psnr_db),
                fmt_metric(r.latent_gain_db()),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        line_plot(
            &dir.join("stacking.svg"),
            "Stacked depth comparison",
            "SNR (dB)",
            "PSNR (dB)",
            &[
                ("depth 1", rows.iter().map(|r| (r.snr_db, r.depth1_psnr_db)).collect()),
                ("depth 3", rows.iter().map(|r| (r.snr_db, r.depth3_psnr_db)).collect()),
            ],
        )?;
    }
    Ok(rows)
}

/// Payload and task fidelity of one scene with and without background suppression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub image: usize,
    pub payload_full: usize,
    pub payload_selected: usize,
    pub task_pixels_identical: bool,
    pub task_psnr_full_db: f64,
    pub task_psnr_selected_db: f64,
}

/// Compares the unblurred tier with `cfg.sweep.ablation_tier` at `cfg.sweep.ablation_snr_db`.
pub fn ablate_selection(
    scenes: &[(Image, SegmentationMap)],
    models: &Models,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<SelectionRow>> {
    let top = cfg.blur_policy.tiers().len() - 1;
    let snr = cfg.sweep.ablation_snr_db;
    let base = component_seed(cfg.seed, "selection");
    let mut rows = Vec::with_capacity(scenes.len());
    for (i, (im, _)) in scenes.iter().enumerate() {
        let seed = transmission_seed(base, i);
        let run = |tier| {
            let opts = TransmitOptions {
                tier: Some(tier),
                ..Default::default()
            };
            run_transmission(im, models, snr, cfg, &format!("sel-{i}"), seed, opts)
        };
        let full = run(top)?;
        let sel = run(cfg.sweep.ablation_tier)?;
        let mask = &sel.selected.mask;
        let identical = (0..im.height()).all(|r| {
            (0..im.width()).all(|c| !mask.get(r, c) || sel.selected.pixels.pixel(r, c) == im.pixel(r, c))
        });
        rows.push(SelectionRow {
            image: i,
            payload_full: full.report.payload_bytes,
            payload_selected: sel.report.payload_bytes,
            task_pixels_identical: identical,
            task_psnr_full_db: full.report.task_psnr_db,
            task_psnr_selected_db: sel.report.task_psnr_db,
        });
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("selection.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

/// SVG line chart; non-finite points are skipped.
pub fn line_plot(
    path: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> Result<()> {
    let plot_err = |e: String| Error::io(path, std::io::Error::other(e));
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    for (k, (name, data)) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let finite: Vec<(f64, f64)> = data
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        chart
            .draw_series(LineSeries::new(finite, color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

/// Identity of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointId {
    pub file: String,
    pub bytes: u64,
    pub digest: String,
}

impl CheckpointId {
    pub fn of(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        data.hash(&mut h);
        Ok(Self {
            file: path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            bytes: data.len() as u64,
            digest: format!("{:016x}", h.finish()),
        })
    }
}

/// What a run needs to be repeated exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Resolved config as TOML, which keeps infinite tier thresholds intact.
    pub config: String,
    pub checkpoints: BTreeMap<String, CheckpointId>,
    pub payload_codec: String,
    pub seeds: BTreeMap<String, u64>,
    /// Channel symbols per image at each depth for the configured scene size.
    pub symbols_per_depth: BTreeMap<String, usize>,
    pub eval_model: Option<EvalModel>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let mut checkpoints = BTreeMap::new();
        let dir = cfg.models_dir();
        for name in [SEGNET_FILE, SEM_CODEC_FILE, CHAN_CODEC_FILE, EVAL_MODEL_FILE] {
            let p = dir.join(name);
            if p.exists() {
                checkpoints.insert(name.to_string(), CheckpointId::of(&p)?);
            }
        }
        let eval_model = match dir.join(EVAL_MODEL_FILE) {
            p if p.exists() => {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                Some(serde_json::from_str(&text)?)
            }
            _ => None,
        };
        let seeds = ["segnet", "sem_codec", "chan_codec", "harvest", "sweep", "stacking", "selection"]
            .into_iter()
            .map(|n| (n.to_string(), component_seed(cfg.seed, n)))
            .collect();
        let mut symbols_per_depth = BTreeMap::new();
        if let DatasetConfig::Synthetic { size, .. } = cfg.dataset {
            if let Ok((h, w)) = cfg.training.sem_codec.latent_hw(size, size) {
                for d in 1..=3u8 {
                    symbols_per_depth.insert(d.to_string(), StackedCodec::symbols(d, h, w)?);
                }
            }
        }
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: cfg.to_toml()?,
            checkpoints,
            payload_codec: PAYLOAD_CODEC.to_string(),
            seeds,
            symbols_per_depth,
            eval_model,
        })
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(&self.config)
    }

    /// Fails when a recorded checkpoint differs from the one on disk.
    pub fn verify_checkpoints(&self) -> Result<()> {
        let dir = self.config()?.models_dir();
        for (name, id) in &self.checkpoints {
            let p = dir.join(name);
            if !p.exists() {
                return Err(Error::Config(format!("manifest checkpoint {} is missing", p.display())));
            }
            if &CheckpointId::of(&p)? != id {
                return Err(Error::Config(format!(
                    "checkpoint {} changed since the manifest was written",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}.manifest.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.config()?;
        Ok(m)
    }
}
