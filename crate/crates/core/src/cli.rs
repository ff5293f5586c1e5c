//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::effect_eval;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::fmt_metric;
use crate::pipeline::{self, Models, RunManifest, TransmitOptions};

#[derive(Debug, Parser)]
#[command(name = "satsem", version, about = "Adaptive semantic image transmission over satellite channels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Source {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-run from a manifest written by an earlier run.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the segmentation network.
    TrainSeg(Source),
    /// Train the semantic codec.
    TrainSem(Source),
    /// Train the stacked channel codec stage by stage.
    TrainChan(Source),
    /// Harvest transmissions and fit the effect evaluator.
    FitEval(Source),
    /// Run every training step in order.
    TrainAll(Source),
    /// Send one image through the trained system.
    Transmit {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        snr: f64,
        /// Reconstruction PNG.
        #[arg(long)]
        output: PathBuf,
    },
    /// Metrics over the SNR grid, with tables and plots.
    Sweep(Source),
    /// Depth 1 against depth 3 at low SNR.
    AblateStacking(Source),
    /// Payload and task fidelity with and without background suppression.
    AblateSelection(Source),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainSeg(_) => "train-seg",
            Command::TrainSem(_) => "train-sem",
            Command::TrainChan(_) => "train-chan",
            Command::FitEval(_) => "fit-eval",
            Command::TrainAll(_) => "train-all",
            Command::Transmit { .. } => "transmit",
            Command::Sweep(_) => "sweep",
            Command::AblateStacking(_) => "ablate-stacking",
            Command::AblateSelection(_) => "ablate-selection",
        }
    }

    fn source(&self) -> &Source {
        match self {
            Command::TrainSeg(s)
            | Command::TrainSem(s)
            | Command::TrainChan(s)
            | Command::FitEval(s)
            | Command::TrainAll(s)
            | Command::Sweep(s)
            | Command::AblateStacking(s)
            | Command::AblateSelection(s) => s,
            Command::Transmit { source, .. } => source,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code:
/// 0 on success, 2 for usage or configuration errors, 1 otherwise.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn resolve(source: &Source) -> Result<ExperimentConfig> {
    match (&source.config, &source.manifest) {
        (Some(p), None) => ExperimentConfig::load(p),
        (None, Some(p)) => {
            let m = RunManifest::read(p)?;
            m.verify_checkpoints()?;
            m.config()
        }
        _ => Err(Error::Config("pass exactly one of --config or --manifest".into())),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn models_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.models_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn run(command: &Command) -> Result<()> {
    let cfg = resolve(command.source())?;
    let name = command.name();
    let manifest = RunManifest::new(name, &cfg)?.write(&cfg.output_dir)?;
    log::info!("manifest written to {}", manifest.display());
    match command {
        Command::TrainSeg(_) => train_seg(&cfg),
        Command::TrainSem(_) => train_sem(&cfg),
        Command::TrainChan(_) => train_chan(&cfg),
        Command::FitEval(_) => fit_eval(&cfg),
        Command::TrainAll(_) => {
            train_seg(&cfg)?;
            train_sem(&cfg)?;
            train_chan(&cfg)?;
            fit_eval(&cfg)
        }
        Command::Transmit {
            image, snr, output, ..
        } => transmit(&cfg, image, *snr, output),
        Command::Sweep(_) => sweep(&cfg),
        Command::AblateStacking(_) => ablate_stacking(&cfg),
        Command::AblateSelection(_) => ablate_selection(&cfg),
    }
}

fn scenes(cfg: &ExperimentConfig) -> Result<Vec<(Image, crate::segmentation::SegmentationMap)>> {
    let s = pipeline::load_scenes(cfg)?;
    if s.is_empty() {
        return Err(Error::Config("dataset contains no scenes".into()));
    }
    Ok(s)
}

fn train_seg(cfg: &ExperimentConfig) -> Result<()> {
    let data = scenes(cfg)?;
    let (net, log) = pipeline::train_segmentation(cfg, &data)?;
    let dir = models_dir(cfg)?;
    pipeline::save_segnet(&net, &dir.join(pipeline::SEGNET_FILE))?;
    write_json(&dir.join("segnet_log.json"), &log)?;
    log::info!("segmentation loss {:.4} -> {:.4}", log.initial_loss, log.final_loss());
    Ok(())
}

fn train_sem(cfg: &ExperimentConfig) -> Result<()> {
    let images: Vec<Image> = scenes(cfg)?.into_iter().map(|s| s.0).collect();
    let (codec, log) = pipeline::train_semantic(cfg, &images)?;
    let dir = models_dir(cfg)?;
    codec.save(&dir.join(pipeline::SEM_CODEC_FILE))?;
    write_json(&dir.join("sem_codec_log.json"), &log)?;
    log::info!("semantic codec loss {:.5} -> {:.5}", log.initial_loss, log.final_loss());
    Ok(())
}

fn train_chan(cfg: &ExperimentConfig) -> Result<()> {
    let dir = models_dir(cfg)?;
    let sem_path = dir.join(pipeline::SEM_CODEC_FILE);
    if !sem_path.exists() {
        return Err(Error::Config(format!(
            "missing checkpoint {}; run `train-sem` first",
            sem_path.display()
        )));
    }
    let sem = crate::semantic_codec::SemCodec::load(&sem_path, &candle_core::Device::Cpu)?;
    let images: Vec<Image> = scenes(cfg)?.into_iter().map(|s| s.0).collect();
    let stage_dir = dir.join("chan_stages");
    std::fs::create_dir_all(&stage_dir).map_err(|e| Error::io(&stage_dir, e))?;
    let (codec, logs) = pipeline::train_channel(cfg, &sem, &images, Some(&stage_dir))?;
    codec.save(&dir.join(pipeline::CHAN_CODEC_FILE))?;
    for l in &logs {
        log::info!(
            "channel stage {} on [{}, {}] dB: loss {:.5} -> {:.5}",
            l.stage,
            l.interval_db.0,
            l.interval_db.1,
            l.log.initial_loss,
            l.log.final_loss()
        );
    }
    Ok(())
}

fn fit_eval(cfg: &ExperimentConfig) -> Result<()> {
    let models = Models::load(cfg, false)?;
    let all = scenes(cfg)?;
    let data = pipeline::subset(&all, cfg.sweep.images);
    let pairs = pipeline::harvest_eval_pairs(data, &models, cfg)?;
    let dir = models_dir(cfg)?;
    effect_eval::write_samples(&dir.join("eval_train.csv"), &pairs)?;
    let model = pipeline::fit_evaluator(cfg, &pairs)?;
    write_json(&dir.join(pipeline::EVAL_MODEL_FILE), &model)?;
    log::info!(
        "evaluator w = [{:.4}, {:.4}, {:.4}] from {} pairs",
        model.w0,
        model.w1,
        model.w2,
        pairs.len()
    );
    Ok(())
}

fn transmit(cfg: &ExperimentConfig, image: &Path, snr: f64, output: &Path) -> Result<()> {
    let models = Models::load(cfg, true)?;
    let img = Image::load_png(image)?;
    let seed = pipeline::transmission_seed(pipeline::component_seed(cfg.seed, "transmit"), 0);
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let t = pipeline::run_transmission(&img, &models, snr, cfg, &stem, seed, TransmitOptions::default())?;
    t.reconstruction.save_png(output)?;
    let r = &t.report;
    println!(
        "{} snr_db={} depth={} tier={} psnr_db={} task_psnr_db={} ssim={} payload_bytes={}",
        r.run_id,
        fmt_metric(r.snr_db),
        r.depth,
        r.tier,
        fmt_metric(r.psnr_db),
        fmt_metric(r.task_psnr_db),
        fmt_metric(r.ssim),
        r.payload_bytes
    );
    Ok(())
}

fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let models = Models::load(cfg, true)?;
    let all = scenes(cfg)?;
    let data = pipeline::subset(&all, cfg.sweep.images);
    let out = cfg.output_dir.join("sweep");
    let res = pipeline::sweep_snr(data, &models, &cfg.sweep.snr_grid_db, cfg, &out)?;
    for r in &res.rows {
        println!(
            "snr {:>6.1} dB  depth {}  psnr {:>7.3} dB  ssim {:.4}  task psnr {:>7.3} dB  payload {:.0} B",
            r.snr_db, r.depth, r.mean_psnr_db, r.mean_ssim, r.mean_task_psnr_db, r.mean_payload_bytes
        );
    }
    Ok(())
}

fn ablate_stacking(cfg: &ExperimentConfig) -> Result<()> {
    let models = Models::load(cfg, true)?;
    let all = scenes(cfg)?;
    let data = pipeline::subset(&all, cfg.sweep.images);
    let out = cfg.output_dir.join("ablation");
    let rows = pipeline::ablate_stacking(data, &models, &cfg.sweep.stacking_grid_db, cfg, Some(&out))?;
    for r in &rows {
        println!(
            "snr {:>6.1} dB  image: depth1 {:>7.3} depth3 {:>7.3} gain {:+.3} dB  latent: depth1 {:>7.3} depth3 {:>7.3} gain {:+.3} dB",
            r.snr_db,
            r.depth1_psnr_db,
            r.depth3_psnr_db,
            r.gain_db(),
            r.depth1_latent_psnr_db,
            r.depth3_latent_psnr_db,
            r.latent_gain_db()
        );
    }
    Ok(())
}

fn ablate_selection(cfg: &ExperimentConfig) -> Result<()> {
    let models = Models::load(cfg, true)?;
    let all = scenes(cfg)?;
    let data = pipeline::subset(&all, cfg.sweep.images);
    let out = cfg.output_dir.join("ablation");
    let rows = pipeline::ablate_selection(data, &models, cfg, Some(&out))?;
    for r in &rows {
        println!(
            "image {:>3}  payload {} -> {} B  task pixels identical {}  task psnr {} -> {} dB",
            r.image,
            r.payload_full,
            r.payload_selected,
            r.task_pixels_identical,
            fmt_metric(r.task_psnr_full_db),
            fmt_metric(r.task_psnr_selected_db)
        );
    }
    Ok(())
}
