//! The WaveTuner forecaster and its ablation variants.
//!
//! Forward pass for one `C x L` window:
//!
//! 1. reversible instance normalization
//! 2. wavelet packet decomposition into `K = 2^m` bands
//! 3. adaptive routing: each band is pooled over time, the pooled value of
//!    every channel goes through a shared `1 -> hidden -> 1` map, and the
//!    band is scaled per channel by the result
//! 4. wave embedding per band (`L_i -> d`, residual refinement, channel norm)
//! 5. a Chebyshev KAN per band with order `b + i`, plus a residual
//! 6. a per-band head mapping `d -> T / 2^m` coefficients
//! 7. inverse transform and denormalization
//!
//! Gradients flow back through every stage. The decomposition is orthogonal,
//! so its adjoint is the inverse transform and vice versa.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::kernels::{avg_pool_time, Affine, ChebKan, Dense, FeedForward, Layer, LayerNorm};
use crate::params::ParamStore;
use crate::revin::Revin;
use crate::wavelet::{iwpt, Basis, FilterBank, SubbandSet, WaveletFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    /// Pyramid decomposition instead of the packet tree.
    #[serde(rename = "dwt")]
    Dwt,
    /// Router removed, all band weights fixed at 1.
    #[serde(rename = "no-ada")]
    NoAda,
    /// Wave embedding replaced by one affine map per band.
    #[serde(rename = "no-we")]
    NoWe,
    /// Each KAN replaced by a two-layer feed-forward map of similar size.
    #[serde(rename = "mlp")]
    Mlp,
    /// Every KAN at order 2.
    #[serde(rename = "flok")]
    Flok,
    /// Every KAN at order 5.
    #[serde(rename = "fhok")]
    Fhok,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::Dwt,
        Variant::NoAda,
        Variant::NoWe,
        Variant::Mlp,
        Variant::Flok,
        Variant::Fhok,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Dwt => "dwt",
            Variant::NoAda => "no-ada",
            Variant::NoWe => "no-we",
            Variant::Mlp => "mlp",
            Variant::Flok => "flok",
            Variant::Fhok => "fhok",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant '{s}'; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

pub const FLOK_ORDER: usize = 2;
pub const FHOK_ORDER: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub levels: usize,
    pub wavelet: WaveletFamily,
    pub embed_dim: usize,
    pub router_hidden: usize,
    pub base_order: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(channels: usize, lookback: usize, horizon: usize) -> Self {
        ModelConfig {
            channels,
            lookback,
            horizon,
            levels: 2,
            wavelet: WaveletFamily::Haar,
            embed_dim: 32,
            router_hidden: 16,
            base_order: 2,
            variant: Variant::Full,
            seed: 2024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("at least one channel is required".into()));
        }
        if self.levels < 1 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.levels >= 32 {
            return Err(Error::Config(format!("levels {} is too large", self.levels)));
        }
        if self.embed_dim == 0 || self.router_hidden == 0 {
            return Err(Error::Config("embed-dim and router-hidden must be at least 1".into()));
        }
        let factor = 1usize << self.levels;
        for (what, len) in [("lookback", self.lookback), ("horizon", self.horizon)] {
            if len == 0 || len % factor != 0 {
                return Err(Error::Config(format!(
                    "2^{} does not divide {len} ({what})",
                    self.levels
                )));
            }
        }
        Ok(())
    }

    pub fn basis(&self) -> Basis {
        match self.variant {
            Variant::Dwt => Basis::Pyramid,
            _ => Basis::Packet,
        }
    }

    pub fn num_bands(&self) -> usize {
        match self.basis() {
            Basis::Packet => 1 << self.levels,
            Basis::Pyramid => self.levels + 1,
        }
    }

    /// Polynomial order of band `index`.
    pub fn band_order(&self, index: usize) -> usize {
        match self.variant {
            Variant::Flok => FLOK_ORDER,
            Variant::Fhok => FHOK_ORDER,
            _ => self.base_order + index,
        }
    }

    pub fn band_specs(&self) -> Vec<BandSpec> {
        self.basis()
            .leaf_labels(self.levels)
            .into_iter()
            .enumerate()
            .map(|(index, label)| BandSpec {
                index,
                input_len: self.lookback >> label.len(),
                output_len: self.horizon >> label.len(),
                order: self.band_order(index),
                label,
            })
            .collect()
    }
}

/// Shape and order of one band branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandSpec {
    pub index: usize,
    pub label: String,
    pub input_len: usize,
    pub output_len: usize,
    pub order: usize,
}

/// Hidden width of the feed-forward stand-in whose parameter count
/// `h (2d + 1) + d` is closest to the KAN's `d^2 (n + 1)`.
pub fn matched_mlp_hidden(width: usize, order: usize) -> usize {
    let target = (width * width * (order + 1)) as f64;
    let h = (target - width as f64) / (2 * width + 1) as f64;
    (h.round() as usize).max(1)
}

/// Feature block of one band after embedding or refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct BandEmbedding {
    pub index: usize,
    /// `C x d`
    pub features: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOutput {
    /// Predicted coefficients per band, on the normalized scale.
    pub coefficients: SubbandSet,
    /// Inverse transform of `coefficients`, before denormalization.
    pub normalized: Array2<f64>,
    /// Final `C x T` forecast.
    pub forecast: Array2<f64>,
    /// Router output per band (`C` values each); `None` when routing is off.
    pub weights: Option<Vec<Array1<f64>>>,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Embedding {
    Wave {
        ffn1: Affine,
        ffn2: Dense,
        norm2: LayerNorm,
        ffn3: Dense,
        norm3: LayerNorm,
    },
    Linear(Affine),
}

impl Embedding {
    fn forward(&mut self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Embedding::Linear(fc) => fc.forward(params, x),
            Embedding::Wave {
                ffn1,
                ffn2,
                norm2,
                ffn3,
                norm3,
            } => {
                let e1 = ffn1.forward(params, x)?;
                let e2 = norm2.forward(params, (ffn2.forward(params, e1.view())? + &e1).view())?;
                let g = ffn3.forward(params, e2.view())? + &e2;
                let f = norm3.forward(params, g.t())?;
                Ok(f.reversed_axes())
            }
        }
    }

    fn backward(&mut self, params: &mut ParamStore, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Embedding::Linear(fc) => fc.backward(params, upstream),
            Embedding::Wave {
                ffn1,
                ffn2,
                norm2,
                ffn3,
                norm3,
            } => {
                let dg = norm3.backward(params, upstream.t())?.reversed_axes();
                let de2 = ffn3.backward(params, dg.view())? + &dg;
                let ds = norm2.backward(params, de2.view())?;
                let de1 = ffn2.backward(params, ds.view())? + &ds;
                ffn1.backward(params, de1.view())
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Branch {
    Kan(ChebKan),
    Mlp(FeedForward),
}

impl Branch {
    fn layer(&mut self) -> &mut dyn Layer {
        match self {
            Branch::Kan(k) => k,
            Branch::Mlp(m) => m,
        }
    }
}

#[derive(Debug, Clone)]
struct Trace {
    bands: Vec<Array2<f64>>,
    weights: Option<Vec<Array1<f64>>>,
}

/// Model structure. Parameters live separately in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct WaveTuner {
    config: ModelConfig,
    filter: FilterBank,
    specs: Vec<BandSpec>,
    revin: Revin,
    router: Option<Vec<FeedForward>>,
    embeddings: Vec<Embedding>,
    branches: Vec<Branch>,
    heads: Vec<Affine>,
    trace: Option<Trace>,
}

impl WaveTuner {
    /// Registers every parameter of the configured variant in `params`.
    pub fn new(config: ModelConfig, params: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let d = config.embed_dim;
        let specs = config.band_specs();
        let revin = Revin::register(params, "revin", c)?;
        let router = if config.variant == Variant::NoAda {
            None
        } else {
            let ff = FeedForward::register(params, "router", 1, config.router_hidden, 1)?;
            // Identity routing at initialization.
            params.get_mut(&ff.second.weight)?.value.fill(0.0);
            params.get_mut(&ff.second.bias)?.value.fill(1.0);
            Some(vec![ff; specs.len()])
        };
        let mut embeddings = Vec::with_capacity(specs.len());
        let mut branches = Vec::with_capacity(specs.len());
        let mut heads = Vec::with_capacity(specs.len());
        for spec in &specs {
            let p = format!("band{}", spec.index);
            let embedding = if config.variant == Variant::NoWe {
                Embedding::Linear(Affine::register(params, &format!("{p}.embed.linear"), spec.input_len, d)?)
            } else {
                Embedding::Wave {
                    ffn1: Affine::register(params, &format!("{p}.embed.ffn1"), spec.input_len, d)?,
                    ffn2: Dense::register(params, &format!("{p}.embed.ffn2"), d, d)?,
                    norm2: LayerNorm::register(params, &format!("{p}.embed.norm2"), d)?,
                    ffn3: Dense::register(params, &format!("{p}.embed.ffn3"), d, d)?,
                    norm3: LayerNorm::register(params, &format!("{p}.embed.norm3"), c)?,
                }
            };
            let branch = if config.variant == Variant::Mlp {
                let hidden = matched_mlp_hidden(d, spec.order);
                Branch::Mlp(FeedForward::register(params, &format!("{p}.mlp"), d, hidden, d)?)
            } else {
                Branch::Kan(ChebKan::register(params, &format!("{p}.kan.theta"), d, spec.order)?)
            };
            embeddings.push(embedding);
            branches.push(branch);
            heads.push(Affine::register(params, &format!("{p}.head"), d, spec.output_len)?);
        }
        Ok(WaveTuner {
            filter: FilterBank::new(config.wavelet),
            config,
            specs,
            revin,
            router,
            embeddings,
            branches,
            heads,
            trace: None,
        })
    }

    /// Builds the model and a fresh parameter store seeded from the config.
    pub fn build(config: ModelConfig) -> Result<(Self, ParamStore)> {
        let mut params = ParamStore::new(config.seed);
        let model = WaveTuner::new(config, &mut params)?;
        Ok((model, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bands(&self) -> &[BandSpec] {
        &self.specs
    }

    pub fn filter(&self) -> &FilterBank {
        &self.filter
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        let expected = (self.config.channels, self.config.lookback);
        if x.dim() != expected {
            return Err(Error::Shape(format!(
                "input window is {:?}, model expects {expected:?}",
                x.dim()
            )));
        }
        Ok(())
    }

    fn decompose(&self, x: ArrayView2<f64>) -> Result<SubbandSet> {
        self.config.basis().decompose(x, &self.filter, self.config.levels)
    }

    /// Inference on frozen parameters; leaves no state behind.
    pub fn predict(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<ForecastOutput> {
        let mut scratch = self.clone();
        scratch.trace = None;
        scratch.forward(params, x)
    }

    /// Forward pass that records what [`WaveTuner::backward`] needs.
    pub fn forward(&mut self, params: &ParamStore, x: ArrayView2<f64>) -> Result<ForecastOutput> {
        self.trace = None;
        self.check_input(x)?;
        let (xn, stats) = self.revin.normalize_forward(params, x).stage("revin normalize")?;
        let set = self.decompose(xn.view()).stage("wavelet decomposition")?;

        let (weighted, weights) = match &mut self.router {
            Some(router) => {
                let mut lambdas = Vec::with_capacity(set.len());
                for (ff, band) in router.iter_mut().zip(&set.bands) {
                    let pooled = avg_pool_time(band.view())
                        .stage("adaptive weights")?
                        .insert_axis(Axis(1));
                    let lambda = ff.forward(params, pooled.view()).stage("adaptive weights")?;
                    lambdas.push(lambda.column(0).to_owned());
                }
                let weighted = apply_weights(&set, &lambdas).stage("adaptive weights")?;
                (weighted.bands, Some(lambdas))
            }
            None => (set.bands.clone(), None),
        };

        let mut coefficients = Vec::with_capacity(weighted.len());
        for (i, band) in weighted.iter().enumerate() {
            let f = self.embeddings[i].forward(params, band.view()).stage("wave embedding")?;
            let refined = self.branches[i].layer().forward(params, f.view()).stage("multi-branch specialization")? + &f;
            coefficients.push(self.heads[i].forward(params, refined.view()).stage("head")?);
        }
        let coefficients = SubbandSet {
            bands: coefficients,
            labels: set.labels.clone(),
            level: set.level,
            original_len: self.config.horizon,
        };
        let normalized = iwpt(&coefficients, &self.filter).stage("inverse transform")?;
        let forecast = self
            .revin
            .denormalize_forward(normalized.view(), &stats)
            .stage("revin denormalize")?;
        self.trace = Some(Trace {
            bands: set.bands,
            weights: weights.clone(),
        });
        Ok(ForecastOutput {
            coefficients,
            normalized,
            forecast,
            weights,
        })
    }

    /// Accumulates parameter gradients for the upstream gradient of the
    /// forecast produced by the last [`WaveTuner::forward`].
    pub fn backward(&mut self, params: &mut ParamStore, upstream: ArrayView2<f64>) -> Result<()> {
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::State("model backward called before forward".into()))?;
        let expected = (self.config.channels, self.config.horizon);
        if upstream.dim() != expected {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, forecast is {expected:?}",
                upstream.dim()
            )));
        }
        let dz = self.revin.denormalize_backward(params, upstream).stage("revin denormalize")?;
        let dcoeffs = self.config.basis().decompose(dz.view(), &self.filter, self.config.levels)
            .stage("inverse transform")?;

        let mut dbands = Vec::with_capacity(self.specs.len());
        for (i, dcoef) in dcoeffs.bands.iter().enumerate() {
            let drefined = self.heads[i].backward(params, dcoef.view()).stage("head")?;
            let df = self.branches[i].layer().backward(params, drefined.view()).stage("multi-branch specialization")?
                + &drefined;
            let dweighted = self.embeddings[i].backward(params, df.view()).stage("wave embedding")?;
            let dband = match (&mut self.router, &trace.weights) {
                (Some(router), Some(lambdas)) => {
                    let band = &trace.bands[i];
                    let lambda = lambdas[i].view().insert_axis(Axis(1));
                    let dlambda = (&dweighted * band).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dpooled = router[i].backward(params, dlambda.view()).stage("adaptive weights")?;
                    let len = band.ncols() as f64;
                    &dweighted * &lambda + &(dpooled / len)
                }
                _ => dweighted,
            };
            dbands.push(dband);
        }
        let dset = SubbandSet {
            bands: dbands,
            labels: dcoeffs.labels,
            level: dcoeffs.level,
            original_len: self.config.lookback,
        };
        let dxn = iwpt(&dset, &self.filter).stage("wavelet decomposition")?;
        self.revin.normalize_backward(params, dxn.view()).stage("revin normalize")
    }

    /// Router output per band for a raw input window, in band order.
    pub fn adaptive_weights(&self, params: &ParamStore, set: &SubbandSet) -> Result<Vec<Array1<f64>>> {
        match &self.router {
            None => Ok(set.bands.iter().map(|b| Array1::ones(b.nrows())).collect()),
            Some(router) => set
                .bands
                .iter()
                .map(|band| {
                    let pooled = avg_pool_time(band.view())?.insert_axis(Axis(1));
                    Ok(router[0].infer(params, pooled.view())?.column(0).to_owned())
                })
                .collect(),
        }
    }

    /// Normalized input decomposed into bands (stages 1 and 2).
    pub fn decompose_input(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<SubbandSet> {
        self.check_input(x)?;
        let (xn, _) = self.revin.normalize(params, x)?;
        self.decompose(xn.view())
    }

    /// `(band label, channel, weight)` rows for one input window.
    pub fn weight_table(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Vec<(String, usize, f64)>> {
        let set = self.decompose_input(params, x)?;
        let weights = self.adaptive_weights(params, &set)?;
        let mut rows = Vec::new();
        for (label, w) in set.labels.iter().zip(weights) {
            for (c, v) in w.iter().enumerate() {
                rows.push((label.clone(), c, *v));
            }
        }
        Ok(rows)
    }

    pub fn wave_embed(&self, params: &ParamStore, set: &SubbandSet) -> Result<Vec<BandEmbedding>> {
        self.check_band_count(set.len())?;
        set.bands
            .iter()
            .enumerate()
            .map(|(i, band)| {
                let mut e = self.embeddings[i].clone();
                Ok(BandEmbedding {
                    index: i,
                    features: e.forward(params, band.view())?,
                })
            })
            .collect()
    }

    pub fn mbs_forward(&self, params: &ParamStore, embeddings: &[BandEmbedding]) -> Result<Vec<BandEmbedding>> {
        self.check_band_count(embeddings.len())?;
        embeddings
            .iter()
            .map(|e| {
                let mut branch = self.branches[e.index].clone();
                let out = branch.layer().forward(params, e.features.view())? + &e.features;
                Ok(BandEmbedding {
                    index: e.index,
                    features: out,
                })
            })
            .collect()
    }

    pub fn head_forward(&self, params: &ParamStore, refined: &[BandEmbedding]) -> Result<Vec<Array2<f64>>> {
        self.check_band_count(refined.len())?;
        refined
            .iter()
            .map(|e| self.heads[e.index].infer(params, e.features.view()))
            .collect()
    }

    fn check_band_count(&self, n: usize) -> Result<()> {
        if n != self.specs.len() {
            return Err(Error::Shape(format!(
                "{n} bands given, model has {}",
                self.specs.len()
            )));
        }
        Ok(())
    }
}

/// Scales band `i`, channel `c` by `lambdas[i][c]`.
pub fn apply_weights(set: &SubbandSet, lambdas: &[Array1<f64>]) -> Result<SubbandSet> {
    if lambdas.len() != set.len() {
        return Err(Error::Shape(format!(
            "{} weight vectors for {} bands",
            lambdas.len(),
            set.len()
        )));
    }
    let mut bands = Vec::with_capacity(set.len());
    for (band, lambda) in set.bands.iter().zip(lambdas) {
        if lambda.len() != band.nrows() {
            return Err(Error::Shape(format!(
                "weight vector has {} entries for {} channels",
                lambda.len(),
                band.nrows()
            )));
        }
        bands.push(band * &lambda.view().insert_axis(Axis(1)));
    }
    Ok(SubbandSet {
        bands,
        labels: set.labels.clone(),
        level: set.level,
        original_len: set.original_len,
    })
}

fn check_same_shape(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    Ok(())
}

/// Mean smooth-L1 (threshold 1) over every element.
pub fn smooth_l1(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(pred, target)?;
    let total: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| {
            let e = (p - t).abs();
            if e < 1.0 {
                0.5 * e * e
            } else {
                e - 0.5
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Loss and its gradient with respect to `pred`.
pub fn smooth_l1_with_grad(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let loss = smooth_l1(pred, target)?;
    let n = pred.len() as f64;
    let grad = ndarray::Zip::from(&pred).and(&target).map_collect(|p, t| {
        let e = p - t;
        if e.abs() < 1.0 {
            e / n
        } else {
            e.signum() / n
        }
    });
    Ok((loss, grad))
}
