//! Optimization loop, metrics and the finite-difference gradient check.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, ArrayD, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baseline::LinearBaseline;
use crate::data::{Dataset, SplitName, Windows};
use crate::error::{Error, Result};
use crate::model::{smooth_l1, smooth_l1_with_grad, ModelConfig, WaveTuner};
use crate::params::ParamStore;

/// Anything the training loop can fit.
pub trait Forecaster: Clone + Send + Sync {
    /// Forecast for one window; must not mutate shared state.
    fn predict(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// Runs forward and backward for one window, adds gradients of the
    /// smooth-L1 loss into `params`, and returns the loss.
    fn accumulate_gradients(
        &mut self,
        params: &mut ParamStore,
        x: ArrayView2<f64>,
        target: ArrayView2<f64>,
    ) -> Result<f64>;
}

impl Forecaster for WaveTuner {
    fn predict(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(WaveTuner::predict(self, params, x)?.forecast)
    }

    fn accumulate_gradients(
        &mut self,
        params: &mut ParamStore,
        x: ArrayView2<f64>,
        target: ArrayView2<f64>,
    ) -> Result<f64> {
        let out = self.forward(params, x)?;
        let (loss, grad) = smooth_l1_with_grad(out.forecast.view(), target)?;
        self.backward(params, grad.view())?;
        Ok(loss)
    }
}

impl Forecaster for LinearBaseline {
    fn predict(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        LinearBaseline::predict(self, params, x)
    }

    fn accumulate_gradients(
        &mut self,
        params: &mut ParamStore,
        x: ArrayView2<f64>,
        target: ArrayView2<f64>,
    ) -> Result<f64> {
        let pred = self.forward(params, x)?;
        let (loss, grad) = smooth_l1_with_grad(pred.view(), target)?;
        self.backward(params, grad.view())?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            batch_size: 32,
            patience: 3,
            seed: 2024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates per parameter entry.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

/// Bias-corrected Adam update for step `t` (1-based).
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("adam step counter starts at 1".into()));
    }
    for (name, p) in params.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in parameter '{name}'")));
        }
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .and(m)
            .and(v)
            .for_each(|w, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    /// Mean smooth-L1 loss per window.
    pub loss: f64,
}

/// Worker count from `WAVETUNER_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var("WAVETUNER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(1)
}

/// MSE and MAE over every window, channel and horizon step. Windows are
/// scored in parallel and reduced in index order.
pub fn evaluate<F: Forecaster>(model: &F, params: &ParamStore, windows: &Windows<'_>, threads: usize) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let n = windows.len();
    let threads = threads.clamp(1, n);
    let chunk = n.div_ceil(threads);
    let score = |range: std::ops::Range<usize>| -> Result<Vec<(f64, f64, f64, usize)>> {
        range
            .map(|i| {
                let s = windows.get(i);
                let pred = model.predict(params, s.input)?;
                if pred.dim() != s.target.dim() {
                    return Err(Error::Shape(format!(
                        "forecast {:?} vs target {:?}",
                        pred.dim(),
                        s.target.dim()
                    )));
                }
                let mut sq = 0.0;
                let mut abs = 0.0;
                for (p, t) in pred.iter().zip(s.target.iter()) {
                    let e = p - t;
                    sq += e * e;
                    abs += e.abs();
                }
                Ok((sq, abs, smooth_l1(pred.view(), s.target)?, pred.len()))
            })
            .collect()
    };
    let parts: Vec<Vec<(f64, f64, f64, usize)>> = if threads == 1 {
        vec![score(0..n)?]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|k| {
                    let range = (k * chunk).min(n)..((k + 1) * chunk).min(n);
                    scope.spawn(move || score(range))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    };
    let (mut sq, mut abs, mut loss, mut count) = (0.0, 0.0, 0.0, 0usize);
    for (s, a, l, c) in parts.into_iter().flatten() {
        sq += s;
        abs += a;
        loss += l;
        count += c;
    }
    Ok(Metrics {
        mse: sq / count as f64,
        mae: abs / count as f64,
        loss: loss / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Index 0 is the untrained model.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test_mse: f64,
    pub test_mae: f64,
    /// Not serialized, so reports from identical runs compare byte-equal.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss` rows.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (e, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            out.push_str(&format!("{e},{t},{v}\n"));
        }
        out
    }
}

/// Fits `model` on the train split of a split and standardized dataset,
/// early-stops on validation loss, restores the best parameters and scores
/// the test split.
pub fn train<F: Forecaster>(
    model: &mut F,
    params: &mut ParamStore,
    data: &Dataset,
    lookback: usize,
    horizon: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let threads = thread_count();
    let train_windows = data.windows(SplitName::Train, lookback, horizon, 1)?;
    let val_windows = data.windows(SplitName::Val, lookback, horizon, 1)?;
    let test_windows = data.windows(SplitName::Test, lookback, horizon, 1)?;

    let initial_train = evaluate(model, params, &train_windows, threads)?;
    let initial_val = evaluate(model, params, &val_windows, threads)?;
    let mut train_loss = vec![initial_train.loss];
    let mut val_loss = vec![initial_val.loss];
    let mut best = (0usize, initial_val.loss, params.clone());
    let mut stale = 0usize;
    let mut adam = AdamState::default();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            params.zero_grads();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = train_windows.get(i);
                batch_loss += model.accumulate_gradients(params, s.input, s.target)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at epoch {epoch}, batch {batch_idx}"
                )));
            }
            params.scale_grads(1.0 / batch.len() as f64);
            step += 1;
            adam_step(params, &mut adam, cfg, step).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batch_idx}: {m}")),
                other => other,
            })?;
            epoch_loss += batch_loss;
        }
        train_loss.push(epoch_loss / order.len() as f64);
        let val = evaluate(model, params, &val_windows, threads)?;
        if !val.loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss diverged at epoch {epoch}")));
        }
        val_loss.push(val.loss);
        if val.loss < best.1 {
            best = (epoch, val.loss, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, best_params) = best;
    params.load_values(&best_params)?;
    params.zero_grads();
    let test = evaluate(model, params, &test_windows, threads)?;
    Ok(TrainReport {
        train_loss,
        val_loss,
        best_epoch,
        best_val_loss,
        test_mse: test.mse,
        test_mae: test.mae,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub fd_step: f64,
    /// Scale of Gaussian noise added to every parameter before checking, so
    /// paths that are inactive at initialization are exercised.
    pub perturb: f64,
    pub seed: u64,
    /// Negative control: distorts one analytic gradient entry.
    pub corrupt_backward: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            fd_step: 1e-5,
            perturb: 0.3,
            seed: 17,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Floor on the denominator of the relative error, so entries whose true
/// gradient is zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
pub const GRAD_CHECK_MAX_PARAMS: usize = 5000;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Central finite differences of the smooth-L1 loss against the analytic
/// gradient, for every scalar parameter of a small model.
pub fn grad_check(config: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(opts.fd_step > 0.0) || !opts.fd_step.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {}",
            opts.fd_step
        )));
    }
    let (mut model, mut params) = WaveTuner::build(config.clone())?;
    if params.num_scalars() > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradient check needs at most {GRAD_CHECK_MAX_PARAMS} parameters, model has {}",
            params.num_scalars()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    if opts.perturb > 0.0 {
        for (_, p) in params.iter_mut() {
            p.value.mapv_inplace(|v| v + opts.perturb * unit.sample(&mut rng));
        }
    }
    let x = Array2::from_shape_fn((config.channels, config.lookback), |_| unit.sample(&mut rng));
    let target = Array2::from_shape_fn((config.channels, config.horizon), |_| 0.5 * unit.sample(&mut rng));

    params.zero_grads();
    model.accumulate_gradients(&mut params, x.view(), target.view())?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(n, p)| (n.to_string(), p.grad.iter().copied().collect()))
        .collect();

    let loss_at = |p: &ParamStore| -> Result<f64> {
        let pred = Forecaster::predict(&model, p, x.view())?;
        smooth_l1(pred.view(), target.view())
    };
    let h = opts.fd_step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (k, (name, grads)) in analytic.iter().enumerate() {
        for (i, &g) in grads.iter().enumerate() {
            let g = if opts.corrupt_backward && k == 0 && i == 0 {
                g * 1.5 + 1e-3
            } else {
                g
            };
            let orig = params.get(name)?.value.iter().nth(i).copied().expect("index in range");
            set_flat(&mut probe, name, i, orig + h)?;
            let up = loss_at(&probe)?;
            set_flat(&mut probe, name, i, orig - h)?;
            let down = loss_at(&probe)?;
            set_flat(&mut probe, name, i, orig)?;
            let err = relative_error(g, (up - down) / (2.0 * h));
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn set_flat(params: &mut ParamStore, name: &str, i: usize, v: f64) -> Result<()> {
    let p = params.get_mut(name)?;
    *p.value.iter_mut().nth(i).expect("index in range") = v;
    Ok(())
}
