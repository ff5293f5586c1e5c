//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use satsem::channel::{eval_pdf, hyp1f1, integrate_pdf, ks_statistic, sample_gain, ChannelConfig, ChannelParams};
use satsem::channel_codec::{select_depth, staged_train, SnrThresholds, StackedCodec};
use satsem::cli::run_cli;
use satsem::config::ExperimentConfig;
use satsem::effect_eval::{self, EvalFeatures, EvalModel, TrainSample};
use satsem::image::Image;
use satsem::metrics::{self, SSIM_K1, SSIM_K2};
use satsem::nn::{self, Init, OptimConfig, ParamBundle};
use satsem::pipeline::{self, Models};
use satsem::segmentation::sme_refine;
use satsem::semantic_codec::{cyclic_shift, cyclic_unshift, SemCodec, SemCodecConfig, SwinBlock};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f));
    let secs = t.elapsed().as_secs_f64();
    let (pass, detail) = match res {
        Ok(o) => (o.pass, o.detail),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "criterion {id:>2} [{}] {name}: {detail} ({secs:.1} s)",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

// ---------------------------------------------------------------- channel

/// Series for ₁F₁(a; 1; z) written term by term.
fn kummer_b1(a: f64, z: f64) -> f64 {
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut k = 0.0;
    while term.abs() > 1e-17 * sum.abs() {
        term *= (a + k) * z / ((k + 1.0) * (k + 1.0));
        sum += term;
        k += 1.0;
    }
    sum
}

fn oracle_pdf(b0: f64, m: f64, omega: f64, r: f64) -> f64 {
    let k = 2.0 * b0 * m + omega;
    (2.0 * b0 * m / k).powf(m) / (2.0 * b0) * (-r / (2.0 * b0)).exp() * kummer_b1(m, omega * r / (2.0 * b0 * k))
}

/// Tabulated CDF on `[0, top]` by the cumulative trapezoid rule.
struct CdfTable {
    step: f64,
    values: Vec<f64>,
}

impl CdfTable {
    fn new(b0: f64, m: f64, omega: f64, top: f64, n: usize) -> Self {
        let step = top / n as f64;
        let mut values = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        let mut prev = oracle_pdf(b0, m, omega, 0.0);
        values.push(0.0);
        for i in 1..=n {
            let f = oracle_pdf(b0, m, omega, i as f64 * step);
            acc += 0.5 * step * (prev + f);
            values.push(acc);
            prev = f;
        }
        Self { step, values }
    }

    fn at(&self, r: f64) -> f64 {
        let x = r / self.step;
        let i = x.floor() as usize;
        if i + 1 >= self.values.len() {
            return *self.values.last().unwrap();
        }
        let t = x - i as f64;
        self.values[i] * (1.0 - t) + self.values[i + 1] * t
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let p = ChannelParams::new(0.158, 19.4, 1.29).unwrap();
    let r: Vec<f64> = sample_gain(&p, 20_240_601, 100_000)
        .unwrap()
        .iter()
        .map(|d| d.power_gain)
        .collect();
    let mut sorted = r.clone();
    sorted.sort_by(f64::total_cmp);
    let table = CdfTable::new(p.b0, p.m, p.omega, 16.0, 400_000);
    let n = sorted.len() as f64;
    let ks_oracle = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = table.at(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max);
    let ks_lib = ks_statistic(&p, &r).unwrap();
    let mean = r.iter().sum::<f64>() / n;
    let rel = (mean - 1.606).abs() / 1.606;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        ks_oracle < 0.01 && ks_lib < 0.01 && rel < 0.02 && secs < 30.0,
        format!(
            "KS {ks_oracle:.5} (library {ks_lib:.5}), mean {mean:.4} ({:.2}% off 1.606), {secs:.1} s",
            rel * 100.0
        ),
    )
}

fn criterion_2() -> Outcome {
    let unit = hyp1f1(19.4, 1.0, 0.0).unwrap();
    let p = ChannelParams::new(0.158, 19.4, 0.0).unwrap();
    let mut err = 0.0f64;
    for i in 0..=5000 {
        let r = i as f64 * 1e-3;
        let exact = (-r / (2.0 * p.b0)).exp() / (2.0 * p.b0);
        err = err.max((eval_pdf(&p, r).unwrap() - exact).abs());
    }
    let q = ChannelParams::new(0.158, 19.4, 1.29).unwrap();
    let top = q.support_cutoff(1e-12);
    let mass = integrate_pdf(&q, 0.0, top, 1e-12).unwrap();
    let oracle_mass = CdfTable::new(q.b0, q.m, q.omega, top, 200_000).at(top);
    outcome(
        unit == 1.0 && err < 1e-9 && (mass - 1.0).abs() < 1e-6 && (oracle_mass - 1.0).abs() < 1e-6,
        format!("1F1(m;1;0) = {unit}, exponential case max err {err:.2e}, mass {mass:.9} (oracle {oracle_mass:.9})"),
    )
}

// ---------------------------------------------------------------- refinement

fn brute_force_sme(im: &Image) -> Image {
    let (h, w, _) = im.dims();
    let mut out = im.clone();
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let neighbors: Vec<[u8; 3]> = [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
                .iter()
                .map(|(di, dj)| im.rgb_u8((i as i64 + di) as usize, (j as i64 + dj) as usize))
                .collect();
            for cand in &neighbors {
                if neighbors.iter().filter(|n| *n == cand).count() >= 7 {
                    let px: Vec<f32> = cand.iter().map(|&v| v as f32 / 255.0).collect();
                    out.set_pixel(i, j, &px);
                    break;
                }
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let palette = [[10u8, 200, 30], [250, 250, 250], [0, 0, 0], [90, 40, 160]];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut changed = 0usize;
    for case in 0..100 {
        // a dominant color makes majority neighborhoods common
        let dominant = case % 4;
        let bytes: Vec<u8> = (0..16 * 16)
            .flat_map(|_| {
                let k = if rng.random_bool(0.8) { dominant } else { rng.random_range(0..4) };
                palette[k]
            })
            .collect();
        let im = Image::from_u8(16, 16, 3, &bytes).unwrap();
        let got = sme_refine(&im).unwrap();
        let want = brute_force_sme(&im);
        if got.data() != want.data() {
            return outcome(false, format!("case {case} differs from the brute-force oracle"));
        }
        for i in 0..16 {
            for j in 0..16 {
                if (i == 0 || j == 0 || i == 15 || j == 15) && got.pixel(i, j) != im.pixel(i, j) {
                    return outcome(false, format!("case {case} changed border pixel ({i}, {j})"));
                }
            }
        }
        if got != im {
            changed += 1;
        }
        let mut cur = got;
        for _ in 0..256 {
            let next = sme_refine(&cur).unwrap();
            if next == cur {
                break;
            }
            cur = next;
        }
        if sme_refine(&cur).unwrap() != cur || sme_refine(&sme_refine(&cur).unwrap()).unwrap() != cur {
            return outcome(false, format!("case {case}: refinement of a fixed point is not a no-op"));
        }
    }
    outcome(changed > 50, format!("100 images match the oracle bitwise, {changed} altered by refinement"))
}

// ---------------------------------------------------------------- regressor

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let mut x = [0.0; 3];
    for (k, xk) in x.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][k] = b[r];
        }
        *xk = det(m) / d;
    }
    x
}

fn least_squares(samples: &[TrainSample]) -> [f64; 3] {
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for s in samples {
        let x = [1.0, s.x_s, s.x_c];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] += x[r] * x[c];
            }
            b[r] += x[r] * s.y;
        }
    }
    solve3(a, b)
}

fn random_samples(rng: &mut ChaCha8Rng, n: usize, w: Option<[f64; 3]>) -> Vec<TrainSample> {
    (0..n)
        .map(|_| {
            let f = EvalFeatures::new(rng.random(), rng.random()).unwrap();
            let y = match w {
                Some(w) => w[0] + w[1] * f.x_s + w[2] * f.x_c,
                None => rng.random_range(10.0..40.0),
            };
            TrainSample::new(f, y).unwrap()
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_grad = 0.0f64;
    for _ in 0..10 {
        let samples = random_samples(&mut rng, 20, None);
        let model = EvalModel::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let g = effect_eval::gradient(&model, &samples).unwrap();
        for k in 0..3 {
            let h = 1e-5;
            let at = |d: f64| {
                let mut w = model.weights();
                w[k] += d;
                effect_eval::loss(&EvalModel::new(w[0], w[1], w[2]), &samples).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            worst_grad = worst_grad.max((g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-12));
        }
    }
    let truth = [22.0, 9.5, 14.0];
    let samples = random_samples(&mut rng, 60, Some(truth));
    let ls = least_squares(&samples);
    let fit = effect_eval::fit(&samples, 0.2, 60_000).unwrap().weights();
    let worst_fit = (0..3).map(|k| (fit[k] - ls[k]).abs() / ls[k].abs()).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_grad < 1e-6 && worst_fit < 0.01 && secs < 10.0,
        format!(
            "gradient rel err {worst_grad:.2e}, fit [{:.4}, {:.4}, {:.4}] vs least squares [{:.4}, {:.4}, {:.4}] (max rel {worst_fit:.2e})",
            fit[0], fit[1], fit[2], ls[0], ls[1], ls[2]
        ),
    )
}

// ---------------------------------------------------------------- metrics

fn criterion_5() -> Outcome {
    let black = Image::zeros(8, 8, 3);
    let white = Image::filled(8, 8, &[1.0, 1.0, 1.0]);
    let full = metrics::psnr(&black, &white, None).unwrap();
    let mut quarter = black.clone();
    for i in 0..4 {
        for j in 0..4 {
            quarter.set_pixel(i, j, &[1.0, 1.0, 1.0]);
        }
    }
    let q = metrics::psnr(&black, &quarter, None).unwrap();
    let q_expect = 10.0 * 4f64.log10();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut noise = |seed_shift: f32| {
        Image::new(16, 16, 3, (0..16 * 16 * 3).map(|_| (rng.random::<f32>() + seed_shift).min(1.0)).collect()).unwrap()
    };
    let a = noise(0.0);
    let b = noise(0.1);
    let same = metrics::ssim(&a, &a).unwrap();
    let asym = (metrics::ssim(&a, &b).unwrap() - metrics::ssim(&b, &a).unwrap()).abs();

    let (va, vb) = (100f32 / 255.0, 180f32 / 255.0);
    let ca = Image::filled(16, 16, &[va, va, va]);
    let cb = Image::filled(16, 16, &[vb, vb, vb]);
    let (ma, mb) = (va as f64 * 255.0, vb as f64 * 255.0);
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let single = (2.0 * ma * mb + c1) * c2 / ((ma * ma + mb * mb + c1) * c2);
    let constant = metrics::ssim(&ca, &cb).unwrap();
    outcome(
        full.abs() < 1e-6 && (q - q_expect).abs() < 1e-6 && same == 1.0 && asym < 1e-12 && (constant - single).abs() < 1e-9,
        format!(
            "PSNR full-range {full:.9} dB, quarter {q:.9} dB, SSIM self {same}, asymmetry {asym:.1e}, constant {constant:.12} vs {single:.12}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let t = SnrThresholds {
        gamma1_db: 3.0,
        gamma2_db: -3.0,
        ..SnrThresholds::default()
    };
    let cases = [(5.0, 1u8), (0.0, 2), (-5.0, 3), (3.0, 1), (-3.0, 2)];
    let got: Vec<u8> = cases.iter().map(|(s, _)| select_depth(*s, &t).unwrap().depth).collect();
    let want: Vec<u8> = cases.iter().map(|c| c.1).collect();
    outcome(got == want, format!("depths {got:?} for SNR {:?}", cases.map(|c| c.0)))
}

// ---------------------------------------------------------------- staged training

/// Every tensor of tier `tier` in `a` equals the one in `b` bit for bit.
fn tier_bits_equal(a: &StackedCodec, b: &StackedCodec, tier: usize) -> bool {
    let bits = |c: &StackedCodec| -> Vec<(String, Vec<u64>)> {
        let p = c.params();
        [&p.enc[tier], &p.dec[tier]]
            .iter()
            .flat_map(|bundle| {
                bundle.iter().map(|(n, v)| {
                    let vals = v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
                    (n.to_string(), vals.iter().map(|x| x.to_bits()).collect())
                })
            })
            .collect()
    };
    bits(a) == bits(b)
}

fn check_stage_files(dir: &Path) -> Result<(), String> {
    let load = |k: usize| StackedCodec::load(&dir.join(format!("stage{k}.safetensors")), &Device::Cpu).map_err(|e| e.to_string());
    let (s1, s2, s3) = (load(1)?, load(2)?, load(3)?);
    if !tier_bits_equal(&s1, &s2, 0) || !tier_bits_equal(&s1, &s3, 0) {
        return Err(format!("tier 1 moved after it was frozen ({})", dir.display()));
    }
    if !tier_bits_equal(&s2, &s3, 1) {
        return Err(format!("tier 2 moved after it was frozen ({})", dir.display()));
    }
    Ok(())
}

fn criterion_7(shared_stage_dir: Option<&Path>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let latents: Vec<Tensor> = (0..6)
        .map(|_| {
            let v: Vec<f32> = (0..96 * 4 * 4).map(|_| rng.random::<f32>() - 0.5).collect();
            Tensor::from_vec(v, (1, 96, 4, 4), &Device::Cpu).unwrap()
        })
        .collect();
    let t = SnrThresholds::default();
    let opt = OptimConfig {
        learning_rate: 1e-3,
        weight_decay: 0.01,
        batch_size: 3,
        epochs: 3,
    };
    let dir = tempfile::tempdir().unwrap();
    let codec = StackedCodec::new(70, DType::F32, &Device::Cpu).unwrap();
    let (_, logs) = staged_train(codec, &latents, &t, &ChannelConfig::default(), &opt, 1, 71, Some(dir.path())).unwrap();
    let intervals = [(t.gamma_min_db, t.gamma_max_db), (t.gamma_min_db, t.gamma1_db), (t.gamma_min_db, t.gamma2_db)];
    let mut draws = 0;
    for (log, (lo, hi)) in logs.iter().zip(intervals) {
        if log.interval_db != (lo, hi) {
            return outcome(false, format!("stage {} trained on {:?}", log.stage, log.interval_db));
        }
        if let Some(g) = log.gammas.iter().find(|g| !(**g >= lo && **g <= hi)) {
            return outcome(false, format!("stage {} drew SNR {g} outside [{lo}, {hi}]", log.stage));
        }
        draws += log.gammas.len();
    }
    if let Err(e) = check_stage_files(dir.path()) {
        return outcome(false, e);
    }
    let mut detail = format!("{draws} SNR draws inside their stage intervals; frozen tiers bitwise unchanged");
    if let Some(shared) = shared_stage_dir {
        if let Err(e) = check_stage_files(shared) {
            return outcome(false, e);
        }
        detail.push_str(", also in the desk-scale run");
    }
    outcome(true, detail)
}

// ---------------------------------------------------------------- neural invariants

fn random_tensor(dims: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn criterion_10() -> Outcome {
    let codec = SemCodec::new(SemCodecConfig::default(), 10, DType::F32, &Device::Cpu).unwrap();
    let x = random_tensor(&[1, 16, 16, 128], 11, DType::F32);
    let mut worst_row = 0.0f32;
    for stage in 0..2 {
        let input = if stage == 0 { x.clone() } else { codec.merge().forward(&x).unwrap() };
        for block in codec.stage_blocks(true, stage) {
            let sums = block.attention_probs(&input).unwrap().sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            worst_row = sums.iter().map(|s| (s - 1.0).abs()).fold(worst_row, f32::max);
        }
    }

    let y = random_tensor(&[2, 8, 8, 5], 12, DType::F32);
    let back = cyclic_unshift(&cyclic_shift(&y, 2).unwrap(), 2).unwrap();
    let exact = back.flatten_all().unwrap().to_vec1::<f32>().unwrap() == y.flatten_all().unwrap().to_vec1::<f32>().unwrap();

    let chan = StackedCodec::new(13, DType::F32, &Device::Cpu).unwrap();
    let z = random_tensor(&[1, 96, 8, 8], 14, DType::F32);
    let mut ladder = true;
    for (depth, width) in [(1u8, 64usize), (2, 128), (3, 256)] {
        let tx = chan.chan_encode(&z, depth).unwrap();
        ladder &= tx.dims() == [1, width, 8, 8];
        ladder &= chan.chan_decode(&tx, depth).unwrap().dims() == [1, 96, 8, 8];
    }

    // 1-head block on a single 2×2 window in f64
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut init = Init {
        rng: &mut rng,
        dtype: DType::F64,
        device: &dev,
    };
    let mut p = ParamBundle::new();
    SwinBlock::create(&mut p, &mut init, "b", 4, 1, 2, 2).unwrap();
    for (i, (_, v)) in p.iter().enumerate() {
        let r = random_tensor(v.dims(), 100 + i as u64, DType::F64);
        v.set(&(v.as_tensor() + (r * 0.3).unwrap()).unwrap()).unwrap();
    }
    let block = SwinBlock::from_bundle(&p, "b", 1, 2, false).unwrap();
    let input = random_tensor(&[1, 2, 2, 4], 16, DType::F64);
    let target = random_tensor(&[1, 2, 2, 4], 17, DType::F64);
    let loss = |b: &SwinBlock| (b.forward(&input).unwrap() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
    let grads = loss(&block).backward().unwrap();
    let mut worst_grad = 0.0f64;
    let mut checked = 0;
    for (_, var) in p.iter() {
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..base.len() {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                var.set(&Tensor::from_vec(v, var.dims(), &dev).unwrap()).unwrap();
                let out = nn::scalar(&loss(&block)).unwrap();
                var.set(&Tensor::from_vec(base.clone(), var.dims(), &dev).unwrap()).unwrap();
                out
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            worst_grad = worst_grad.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3));
            checked += 1;
        }
    }
    outcome(
        worst_row < 1e-5 && exact && ladder && worst_grad < 1e-4,
        format!(
            "max |row sum - 1| {worst_row:.1e}, shift round trip exact {exact}, ladder shapes {ladder}, {checked} gradients max rel err {worst_grad:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- desk-scale pipeline

struct Desk {
    _dir: tempfile::TempDir,
    config_path: PathBuf,
    cfg: ExperimentConfig,
    chan_time: Duration,
    trained: bool,
}

fn cli(args: &[&str]) -> i32 {
    let mut v = vec!["satsem"];
    v.extend_from_slice(args);
    run_cli(v)
}

fn train_desk() -> Desk {
    let dir = tempfile::tempdir().unwrap();
    let toy = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let mut cfg = ExperimentConfig::load(&toy).unwrap();
    cfg.output_dir = dir.path().join("run");
    let config_path = dir.path().join("toy.toml");
    std::fs::write(&config_path, cfg.to_toml().unwrap()).unwrap();
    let c = config_path.to_str().unwrap().to_string();
    let mut trained = true;
    let mut chan_time = Duration::ZERO;
    for step in ["train-seg", "train-sem", "train-chan", "fit-eval"] {
        let t = Instant::now();
        let code = cli(&[step, "--config", &c]);
        println!("desk-scale {step}: exit {code} in {:.1} s", t.elapsed().as_secs_f64());
        if step == "train-chan" {
            chan_time = t.elapsed();
        }
        if code != 0 {
            trained = false;
            break;
        }
    }
    Desk {
        _dir: dir,
        config_path,
        cfg,
        chan_time,
        trained,
    }
}

fn criterion_8(desk: &Desk) -> Outcome {
    if !desk.trained {
        return outcome(false, "desk-scale training failed");
    }
    let t = Instant::now();
    let models = Models::load(&desk.cfg, true).unwrap();
    let scenes = pipeline::load_scenes(&desk.cfg).unwrap();
    let grid = [-10.0, -8.0, -6.0, -4.0];
    let rows = pipeline::ablate_stacking(&scenes, &models, &grid, &desk.cfg, None).unwrap();
    let avg = |f: fn(&pipeline::StackingRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let d1 = avg(|r| r.depth1_latent_psnr_db);
    let d3 = avg(|r| r.depth3_latent_psnr_db);
    let image_gain = avg(|r| r.gain_db());
    let total = desk.chan_time + t.elapsed();
    let per: Vec<String> = rows.iter().map(|r| format!("{}: {:+.2}", r.snr_db, r.latent_gain_db())).collect();
    outcome(
        d3 - d1 >= 0.3 && total.as_secs() < 30 * 60,
        format!(
            "latent PSNR depth 3 {d3:.3} dB vs depth 1 {d1:.3} dB (gain {:+.3} dB; per SNR {}; image-level gain {image_gain:+.3} dB), {} scenes, {:.0} s",
            d3 - d1,
            per.join(", "),
            scenes.len(),
            total.as_secs_f64()
        ),
    )
}

fn criterion_9(desk: &Desk) -> Outcome {
    if !desk.trained {
        return outcome(false, "desk-scale training failed");
    }
    let models = Models::load(&desk.cfg, true).unwrap();
    let scenes = pipeline::load_scenes(&desk.cfg).unwrap();
    let scenes = &scenes[..16];
    let mut cfg = desk.cfg.clone();
    cfg.sweep.ablation_snr_db = 10.0;
    let rows = pipeline::ablate_selection(scenes, &models, &cfg, None).unwrap();
    let full: usize = rows.iter().map(|r| r.payload_full).sum();
    let sel: usize = rows.iter().map(|r| r.payload_selected).sum();
    let ratio = sel as f64 / full as f64;
    let identical = rows.iter().all(|r| r.task_pixels_identical);
    let finite: Vec<_> = rows
        .iter()
        .filter(|r| r.task_psnr_full_db.is_finite() && r.task_psnr_selected_db.is_finite())
        .collect();
    let n = finite.len() as f64;
    let mf = finite.iter().map(|r| r.task_psnr_full_db).sum::<f64>() / n;
    let ms = finite.iter().map(|r| r.task_psnr_selected_db).sum::<f64>() / n;
    outcome(
        ratio <= 0.85 && identical && (mf - ms).abs() <= 0.5 && !finite.is_empty(),
        format!(
            "payload {sel} / {full} B = {:.1}% at tier {}, task pixels identical {identical}, task PSNR {ms:.3} vs {mf:.3} dB over {} scenes",
            ratio * 100.0,
            cfg.sweep.ablation_tier,
            finite.len()
        ),
    )
}

fn criterion_11(desk: &Desk) -> Outcome {
    if !desk.trained {
        return outcome(false, "desk-scale training failed");
    }
    let t = Instant::now();
    let c = desk.config_path.to_str().unwrap();
    if cli(&["sweep", "--config", c]) != 0 {
        return outcome(false, "sweep exited with an error");
    }
    let out = desk.cfg.output_dir.join("sweep");
    let first = std::fs::read(out.join(pipeline::SWEEP_CSV)).unwrap();
    let plots_ok = [pipeline::PSNR_PLOT, pipeline::SSIM_PLOT].iter().all(|p| {
        std::fs::read_to_string(out.join(p)).map(|s| s.contains("<svg") && s.len() > 200).unwrap_or(false)
    });
    let mut reader = csv::Reader::from_reader(first.as_slice());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    let rows: Vec<Vec<f64>> = reader
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse::<f64>().unwrap()).collect())
        .collect();
    let well_formed = header == pipeline::SWEEP_COLUMNS && rows.len() == 5 && rows.iter().all(|r| r.len() == header.len());
    let snr: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let psnr: Vec<f64> = rows.iter().map(|r| r[3]).collect();
    let monotone = psnr.windows(2).all(|w| w[1] >= w[0] - 0.2);
    let sweep_secs = t.elapsed().as_secs_f64();

    let manifest = desk.cfg.output_dir.join("sweep.manifest.json");
    let rerun = cli(&["sweep", "--manifest", manifest.to_str().unwrap()]) == 0;
    let second = std::fs::read(out.join(pipeline::SWEEP_CSV)).unwrap();
    let identical = rerun && first == second;
    outcome(
        well_formed && plots_ok && monotone && identical && snr == [-10.0, -5.0, 0.0, 5.0, 10.0] && sweep_secs < 600.0,
        format!(
            "mean PSNR {:?} dB over SNR {snr:?}, plots {plots_ok}, re-run identical {identical}, sweep {sweep_secs:.0} s",
            psnr.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    results.push(run(1, "channel fidelity", criterion_1));
    results.push(run(2, "hypergeometric and density oracles", criterion_2));
    results.push(run(3, "refinement exactness", criterion_3));
    results.push(run(4, "regressor correctness", criterion_4));
    results.push(run(5, "metric oracles", criterion_5));
    results.push(run(6, "depth gating", criterion_6));
    results.push(run(10, "neural invariants", criterion_10));

    let t = Instant::now();
    let desk = train_desk();
    println!("desk-scale training finished in {:.0} s", t.elapsed().as_secs_f64());
    let stage_dir = desk.cfg.models_dir().join("chan_stages");
    results.push(run(7, "staged-training freeze", || {
        criterion_7(desk.trained.then_some(stage_dir.as_path()))
    }));
    results.push(run(8, "stacking benefit", || criterion_8(&desk)));
    results.push(run(9, "selection trade-off", || criterion_9(&desk)));
    results.push(run(11, "end-to-end sweep", || criterion_11(&desk)));

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
