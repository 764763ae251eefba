//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any required criterion fails. Criterion 10 runs only when
//! `WAVETUNER_ETTH1` points at the ETTh1 CSV.

use std::fs;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use wavetuner::baseline::LinearBaseline;
use wavetuner::data::{load_csv, synthetic_two_band, SplitName, ETT_RATIOS};
use wavetuner::kernels::{cheb_kan_forward, ChebKanParams};
use wavetuner::model::{smooth_l1, ModelConfig, Variant, WaveTuner};
use wavetuner::revin::{revin_denormalize, revin_normalize, DEFAULT_EPS};
use wavetuner::training::{evaluate, grad_check, train, GradCheckOptions, TrainConfig};
use wavetuner::wavelet::{iwpt, make_filter_bank, wpd};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; keeps the suite free of extra distributions
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| gaussian(rng))
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Criteria 1 and 2 share one sweep.
fn wavelet_sweep() -> (Outcome, Outcome) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_rec = 0.0f64;
    let mut worst_energy = 0.0f64;
    for family in ["haar", "db2", "db4"] {
        let fb = make_filter_bank(family).unwrap();
        for m in 1..=3 {
            for _ in 0..100 {
                let x = random(7, 96, &mut rng);
                let set = wpd(x.view(), &fb, m).unwrap();
                worst_rec = worst_rec.max(max_abs(&iwpt(&set, &fb).unwrap(), &x));
                let ex: f64 = x.iter().map(|v| v * v).sum();
                worst_energy = worst_energy.max((ex - set.energy()).abs() / ex);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    (
        outcome(
            worst_rec < 1e-9 && secs < 5.0,
            format!("max reconstruction error {worst_rec:.3e} (< 1e-9), sweep {secs:.2}s (< 5s)"),
        ),
        outcome(
            worst_energy < 1e-9,
            format!("max relative energy gap {worst_energy:.3e} (< 1e-9)"),
        ),
    )
}

fn chebyshev_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(0..=6);
        let rows = rng.random_range(1..=5);
        let theta = Array3::from_shape_fn((d, d, n + 1), |_| gaussian(&mut rng));
        let x = random(rows, d, &mut rng);
        let got = cheb_kan_forward(x.view(), &ChebKanParams::new(theta.clone()).unwrap()).unwrap();
        for r in 0..rows {
            for o in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    let u = x[[r, j]].tanh();
                    for i in 0..=n {
                        s += theta[[o, j, i]] * (i as f64 * u.acos()).cos();
                    }
                }
                worst = worst.max((got[[r, o]] - s).abs());
            }
        }
    }
    outcome(worst < 1e-12, format!("max deviation from direct double sum {worst:.3e} (< 1e-12)"))
}

fn gradient_soundness() -> Outcome {
    let started = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for variant in [Variant::Full, Variant::Mlp, Variant::Flok, Variant::Fhok] {
        let mut cfg = ModelConfig::new(2, 8, 8);
        cfg.levels = 1;
        cfg.embed_dim = 4;
        cfg.base_order = 2;
        cfg.variant = variant;
        let r = grad_check(&cfg, &GradCheckOptions::default()).unwrap();
        pass &= r.max_rel_error < 1e-4;
        parts.push(format!("{variant} {:.2e}", r.max_rel_error));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        pass && secs < 60.0,
        format!("max relative error: {} (< 1e-4), {secs:.1}s (< 60s)", parts.join(", ")),
    )
}

fn identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ModelConfig::new(3, 96, 96);
    let (full, fp) = WaveTuner::build(cfg.clone()).unwrap();
    let mut plain_cfg = cfg.clone();
    plain_cfg.variant = Variant::NoAda;
    let (plain, pp) = WaveTuner::build(plain_cfg).unwrap();
    let mut routing = true;
    for _ in 0..5 {
        let x = random(3, 96, &mut rng);
        routing &= full.predict(&fp, x.view()).unwrap().forecast == plain.predict(&pp, x.view()).unwrap().forecast;
    }

    let mut zp = fp.clone();
    for (name, p) in zp.iter_mut() {
        if name.ends_with("kan.theta") {
            p.value.fill(0.0);
        } else {
            p.value.mapv_inplace(|v| v + 0.1 * (v * 12.9898).sin());
        }
    }
    let set = full.decompose_input(&zp, random(3, 96, &mut rng).view()).unwrap();
    let emb = full.wave_embed(&zp, &set).unwrap();
    let refined = full.mbs_forward(&zp, &emb).unwrap();
    let residual = emb.iter().zip(&refined).all(|(a, b)| a.features == b.features);
    outcome(
        routing && residual,
        format!("zero-theta MBS identity exact: {residual}; full == no-ada at init bitwise: {routing}"),
    )
}

fn loss_and_revin() -> Outcome {
    let one = |e: f64| smooth_l1(Array2::from_elem((1, 1), e).view(), Array2::zeros((1, 1)).view()).unwrap();
    let (a, b) = (one(0.5), one(2.0));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut x = random(4, 96, &mut rng);
        x.row_mut(0).fill(7.25);
        x.row_mut(3).mapv_inplace(|v| v * 1e3 + 50.0);
        let gamma = Array1::from_shape_fn(4, |_| 0.5 + rng.random::<f64>());
        let beta = Array1::from_shape_fn(4, |_| gaussian(&mut rng));
        let (z, stats) = revin_normalize(x.view(), gamma.view(), beta.view(), DEFAULT_EPS).unwrap();
        let back = revin_denormalize(z.view(), &stats).unwrap();
        worst = worst.max(max_abs(&back, &x));
    }
    outcome(
        a == 0.125 && b == 1.5 && worst < 1e-9,
        format!("smooth_l1(0.5) = {a}, smooth_l1(2) = {b}; revin roundtrip max error {worst:.3e} (< 1e-9)"),
    )
}

fn synthetic_learnability() -> (Outcome, Outcome) {
    let started = Instant::now();
    let data = synthetic_two_band(4000, 0.1, 2024)
        .split([0.7, 0.1, 0.2], 96, 96)
        .unwrap()
        .standardize()
        .unwrap();
    let mut cfg = ModelConfig::new(1, 96, 96);
    cfg.levels = 2;
    cfg.embed_dim = 16;
    cfg.base_order = 2;
    let tc = TrainConfig {
        epochs: 20,
        seed: 2024,
        ..TrainConfig::default()
    };
    let (mut model, mut params) = WaveTuner::build(cfg).unwrap();
    let report = train(&mut model, &mut params, &data, 96, 96, &tc).unwrap();
    let (mut base, mut bparams) = LinearBaseline::build(96, 96, 2024).unwrap();
    let baseline = train(&mut base, &mut bparams, &data, 96, 96, &tc).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let ratio = report.test_mse / baseline.test_mse;
    (
        outcome(
            report.best_val_loss < report.val_loss[0],
            format!(
                "best validation loss {:.6} at epoch {} vs epoch-0 {:.6}",
                report.best_val_loss, report.best_epoch, report.val_loss[0]
            ),
        ),
        outcome(
            ratio <= 0.9 && secs < 300.0,
            format!(
                "test MSE {:.6} vs direct-affine baseline {:.6}, ratio {ratio:.3} (<= 0.9); both runs {secs:.1}s (< 300s)",
                report.test_mse, baseline.test_mse
            ),
        ),
    )
}

fn determinism() -> Outcome {
    let dir = TempDir::new().unwrap();
    let data = synthetic_two_band(700, 0.1, 9);
    let csv: String = std::iter::once("date,s\n".to_string())
        .chain(data.values().row(0).iter().enumerate().map(|(t, v)| format!("{t},{v}\n")))
        .collect();
    let path = dir.path().join("series.csv");
    fs::write(&path, csv).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let args = [
            "wavetuner", "train", "--data", path.to_str().unwrap(), "--out", out.to_str().unwrap(),
            "--lookback", "32", "--horizon", "16", "--embed-dim", "8", "--epochs", "3", "--seed", "11",
        ];
        let code = wavetuner_cli::run(args, &mut Vec::new());
        assert_eq!(code, 0);
        (fs::read(out.join("model.json")).unwrap(), fs::read(out.join("report.json")).unwrap())
    };
    let (m1, r1) = run("first");
    let (m2, r2) = run("second");
    outcome(
        m1 == m2 && r1 == r2,
        format!("model.json identical: {}, report.json identical: {}", m1 == m2, r1 == r2),
    )
}

fn median_forward_time(channels: usize, lookback: usize) -> Duration {
    let mut cfg = ModelConfig::new(channels, lookback, 96);
    cfg.levels = 2;
    let (model, params) = WaveTuner::build(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(channels, lookback, &mut rng);
    for _ in 0..3 {
        model.predict(&params, x.view()).unwrap();
    }
    let mut times: Vec<Duration> = (0..20)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(model.predict(&params, x.view()).unwrap());
            t.elapsed()
        })
        .collect();
    times.sort();
    (times[9] + times[10]) / 2
}

fn scaling() -> Outcome {
    let base = median_forward_time(7, 96).as_secs_f64();
    let long = median_forward_time(7, 192).as_secs_f64() / base;
    let wide = median_forward_time(14, 96).as_secs_f64() / base;
    outcome(
        long <= 2.5 && wide <= 2.5,
        format!("L 96->192: {long:.2}x, C 7->14: {wide:.2}x (<= 2.5x), base {:.3}ms", base * 1e3),
    )
}

fn etth1(path: &str) -> Outcome {
    let started = Instant::now();
    let data = load_csv(path).unwrap().split(ETT_RATIOS, 96, 96).unwrap().standardize().unwrap();
    let (mut model, mut params) = WaveTuner::build(ModelConfig::new(data.channels(), 96, 96)).unwrap();
    let report = train(&mut model, &mut params, &data, 96, 96, &TrainConfig::default()).unwrap();
    let test = evaluate(&model, &params, &data.windows(SplitName::Test, 96, 96, 1).unwrap(), 1).unwrap();
    let secs = started.elapsed().as_secs_f64();
    outcome(
        (0.33..=0.48).contains(&test.mse) && secs < 600.0,
        format!("ETTh1/96 test MSE {:.4} (in [0.33, 0.48]), best epoch {}, {secs:.0}s (< 600s)", test.mse, report.best_epoch),
    )
}

fn main() {
    // `cargo test` passes libtest flags; accept and ignore them, but honour --list
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = Vec::new();
    let mut report = |id: &str, o: Outcome| {
        println!("criterion {id}: {} — {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(id.to_string());
        }
    };
    let (pr, energy) = wavelet_sweep();
    report("1 perfect reconstruction", pr);
    report("2 energy preservation", energy);
    report("3 chebyshev oracle", chebyshev_oracle());
    report("4 gradient soundness", gradient_soundness());
    report("5 residual/routing identities", identities());
    report("6 loss and normalization", loss_and_revin());
    let (improves, beats) = synthetic_learnability();
    report("7a synthetic validation improves", improves);
    report("7b synthetic beats affine baseline", beats);
    report("8 determinism", determinism());
    report("9 linear scaling", scaling());
    match std::env::var("WAVETUNER_ETTH1") {
        Ok(path) => {
            let o = etth1(&path);
            println!(
                "criterion 10 ETTh1 (optional): {} — {}",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
        }
        Err(_) => println!("criterion 10 ETTh1 (optional): SKIP — set WAVETUNER_ETTH1 to the ETTh1 CSV"),
    }
    if failed.is_empty() {
        println!("acceptance: all required criteria pass");
    } else {
        println!("acceptance: {} failing: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}
