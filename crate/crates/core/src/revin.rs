//! Reversible instance normalization with a learnable per-channel affine.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel statistics captured by [`revin_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct RevinStats {
    pub mean: Array1<f64>,
    /// `sqrt(var + eps)`, always positive.
    pub std: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

fn check_channels(what: &str, x: ArrayView2<f64>, v: ArrayView1<f64>) -> Result<()> {
    if x.nrows() != v.len() {
        return Err(Error::Shape(format!(
            "revin: {what} has {} entries for {} channels",
            v.len(),
            x.nrows()
        )));
    }
    Ok(())
}

pub fn revin_normalize(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> Result<(Array2<f64>, RevinStats)> {
    let (out, _, stats) = normalize_parts(x, gamma, beta, eps)?;
    Ok((out, stats))
}

/// Returns the affine output, the standardized input, and the statistics.
fn normalize_parts(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> Result<(Array2<f64>, Array2<f64>, RevinStats)> {
    check_channels("gamma", x, gamma)?;
    check_channels("beta", x, beta)?;
    if !(eps > 0.0) {
        return Err(Error::Config(format!("revin eps must be positive, got {eps}")));
    }
    let len = x.ncols();
    if len == 0 {
        return Err(Error::Shape("revin: empty time axis".into()));
    }
    let mean = x.sum_axis(Axis(1)) / len as f64;
    let mut std = Array1::zeros(x.nrows());
    for (c, row) in x.axis_iter(Axis(0)).enumerate() {
        let m = mean[c];
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len as f64;
        std[c] = (var + eps).sqrt();
    }
    let mut z = x.to_owned();
    for (c, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
        row.mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
    let mut out = z.clone();
    for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        row.mapv_inplace(|v| v * gamma[c] + beta[c]);
    }
    let stats = RevinStats {
        mean,
        std,
        gamma: gamma.to_owned(),
        beta: beta.to_owned(),
    };
    Ok((out, z, stats))
}

/// `((y - beta) / gamma) * std + mean` per channel; any time length.
pub fn revin_denormalize(y: ArrayView2<f64>, stats: &RevinStats) -> Result<Array2<f64>> {
    check_channels("statistics", y, stats.mean.view())?;
    if let Some(c) = stats.gamma.iter().position(|g| g.abs() < 1e-12) {
        return Err(Error::Numeric(format!(
            "revin: affine scale for channel {c} is {} and cannot be inverted",
            stats.gamma[c]
        )));
    }
    let mut out = y.to_owned();
    for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (g, b, s, m) = (stats.gamma[c], stats.beta[c], stats.std[c], stats.mean[c]);
        row.mapv_inplace(|v| (v - b) / g * s + m);
    }
    Ok(out)
}

/// Trainable wrapper holding the affine parameter names and backward caches.
#[derive(Debug, Clone)]
pub struct Revin {
    pub gamma: String,
    pub beta: String,
    pub eps: f64,
    normalized: Option<Array2<f64>>,
    denormalized: Option<(Array2<f64>, RevinStats)>,
}

impl Revin {
    pub fn new(prefix: &str) -> Self {
        Revin {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            eps: DEFAULT_EPS,
            normalized: None,
            denormalized: None,
        }
    }

    pub fn register(params: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let layer = Revin::new(prefix);
        params.register_const(&layer.gamma, &[channels], 1.0)?;
        params.register_const(&layer.beta, &[channels], 0.0)?;
        Ok(layer)
    }

    pub fn normalize(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<(Array2<f64>, RevinStats)> {
        revin_normalize(x, params.vector(&self.gamma)?, params.vector(&self.beta)?, self.eps)
    }

    pub fn normalize_forward(
        &mut self,
        params: &ParamStore,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, RevinStats)> {
        let (out, z, stats) =
            normalize_parts(x, params.vector(&self.gamma)?, params.vector(&self.beta)?, self.eps)?;
        self.normalized = Some(z);
        Ok((out, stats))
    }

    /// Accumulates affine gradients. The input is data, so no input gradient
    /// is produced.
    pub fn normalize_backward(&mut self, params: &mut ParamStore, upstream: ArrayView2<f64>) -> Result<()> {
        let z = self
            .normalized
            .take()
            .ok_or_else(|| Error::State("revin normalize: backward called before forward".into()))?;
        if z.dim() != upstream.dim() {
            return Err(Error::Shape(format!(
                "revin normalize: upstream {:?} vs output {:?}",
                upstream.dim(),
                z.dim()
            )));
        }
        let dgamma = (&upstream * &z).sum_axis(Axis(1));
        let dbeta = upstream.sum_axis(Axis(1));
        params.accumulate(&self.gamma, dgamma.view())?;
        params.accumulate(&self.beta, dbeta.view())?;
        Ok(())
    }

    pub fn denormalize_forward(&mut self, y: ArrayView2<f64>, stats: &RevinStats) -> Result<Array2<f64>> {
        let out = revin_denormalize(y, stats)?;
        self.denormalized = Some((y.to_owned(), stats.clone()));
        Ok(out)
    }

    pub fn denormalize_backward(
        &mut self,
        params: &mut ParamStore,
        upstream: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let (y, stats) = self
            .denormalized
            .take()
            .ok_or_else(|| Error::State("revin denormalize: backward called before forward".into()))?;
        if y.dim() != upstream.dim() {
            return Err(Error::Shape(format!(
                "revin denormalize: upstream {:?} vs output {:?}",
                upstream.dim(),
                y.dim()
            )));
        }
        let channels = y.nrows();
        let mut dy = Array2::zeros(y.raw_dim());
        let mut dgamma = Array1::zeros(channels);
        let mut dbeta = Array1::zeros(channels);
        for c in 0..channels {
            let (g, b, s) = (stats.gamma[c], stats.beta[c], stats.std[c]);
            for t in 0..y.ncols() {
                let u = upstream[[c, t]];
                dy[[c, t]] = u * s / g;
                dgamma[c] -= u * s * (y[[c, t]] - b) / (g * g);
                dbeta[c] -= u * s / g;
            }
        }
        params.accumulate(&self.gamma, dgamma.view())?;
        params.accumulate(&self.beta, dbeta.view())?;
        Ok(dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;

    fn unit(c: usize) -> (Array1<f64>, Array1<f64>) {
        (Array1::ones(c), Array1::zeros(c))
    }

    #[test]
    fn constant_channel() {
        let (g, b) = unit(1);
        let (out, stats) = revin_normalize(arr2(&[[5.0, 5.0, 5.0]]).view(), g.view(), b.view(), DEFAULT_EPS).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        assert_eq!(stats.std[0], DEFAULT_EPS.sqrt());
        let back = revin_denormalize(out.view(), &stats).unwrap();
        assert!(back.iter().all(|v| (*v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn already_standard_channel() {
        let (g, b) = unit(1);
        let (out, _) = revin_normalize(arr2(&[[-1.0, 1.0]]).view(), g.view(), b.view(), 1e-300).unwrap();
        assert_eq!(out, arr2(&[[-1.0, 1.0]]));
    }

    #[test]
    fn zero_output_restores_mean_and_other_horizons() {
        let (g, b) = unit(2);
        let x = arr2(&[[1.0, 2.0, 6.0], [-3.0, 0.0, 0.0]]);
        let (_, stats) = revin_normalize(x.view(), g.view(), b.view(), DEFAULT_EPS).unwrap();
        let back = revin_denormalize(Array2::zeros((2, 5)).view(), &stats).unwrap();
        assert_eq!(back.dim(), (2, 5));
        assert!(back.row(0).iter().all(|v| *v == 3.0));
        assert!(back.row(1).iter().all(|v| *v == -1.0));
    }

    #[test]
    fn near_zero_gamma_rejected() {
        let x = arr2(&[[1.0, 2.0]]);
        let (out, stats) = revin_normalize(x.view(), arr1(&[1e-13]).view(), arr1(&[0.0]).view(), DEFAULT_EPS).unwrap();
        assert!(matches!(revin_denormalize(out.view(), &stats), Err(Error::Numeric(_))));
    }

    #[test]
    fn shape_mismatch() {
        let (g, b) = unit(3);
        assert!(matches!(
            revin_normalize(arr2(&[[1.0, 2.0]]).view(), g.view(), b.view(), DEFAULT_EPS),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut params = ParamStore::new(0);
        let mut layer = Revin::register(&mut params, "revin", 2).unwrap();
        params.get_mut("revin.gamma").unwrap().value = arr1(&[1.3, 0.7]).into_dyn();
        params.get_mut("revin.beta").unwrap().value = arr1(&[0.2, -0.4]).into_dyn();
        let x = arr2(&[[0.3, 1.2, -0.5, 2.0], [4.0, 3.5, 3.9, 4.4]]);
        let y = arr2(&[[0.1, -0.3, 0.8], [1.1, 0.0, -0.6]]);
        let wn = arr2(&[[0.5, -1.0, 0.25, 2.0], [1.0, 0.3, -0.7, 0.1]]);
        let wd = arr2(&[[1.0, 2.0, -1.0], [0.5, -0.5, 1.5]]);
        // objective: <wn, normalize(x)> + <wd, denormalize(y + 0 * ..., stats)>
        let objective = |p: &ParamStore| {
            let layer = Revin::new("revin");
            let (n, stats) = layer.normalize(p, x.view()).unwrap();
            (&n * &wn).sum() + (revin_denormalize(y.view(), &stats).unwrap() * &wd).sum()
        };
        let (_, stats) = layer.normalize_forward(&params, x.view()).unwrap();
        layer.normalize_backward(&mut params, wn.view()).unwrap();
        layer.denormalize_forward(y.view(), &stats).unwrap();
        let dy = layer.denormalize_backward(&mut params, wd.view()).unwrap();
        let h = 1e-6;
        for name in ["revin.gamma", "revin.beta"] {
            for c in 0..2 {
                let analytic = params.get(name).unwrap().grad[[c]];
                let mut p = params.clone();
                p.get_mut(name).unwrap().value[[c]] += h;
                let up = objective(&p);
                p.get_mut(name).unwrap().value[[c]] -= 2.0 * h;
                let down = objective(&p);
                let numeric = (up - down) / (2.0 * h);
                assert!((analytic - numeric).abs() < 1e-6 * numeric.abs().max(1.0), "{name}[{c}]");
            }
        }
        for c in 0..2 {
            for t in 0..3 {
                assert!((dy[[c, t]] - wd[[c, t]] * stats.std[c] / stats.gamma[c]).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e3f64..1e3, 24), constant in any::<bool>(), g in 0.2f64..3.0, b in -2.0f64..2.0) {
            let mut x = Array2::from_shape_vec((3, 8), values).unwrap();
            if constant {
                let first = x[[1, 0]];
                x.row_mut(1).fill(first);
            }
            let (out, stats) = revin_normalize(x.view(), arr1(&[g, 1.0, g]).view(), arr1(&[b, 0.0, -b]).view(), DEFAULT_EPS).unwrap();
            let back = revin_denormalize(out.view(), &stats).unwrap();
            for (a, e) in back.iter().zip(x.iter()) {
                prop_assert!((a - e).abs() < 1e-9);
            }
            let (g1, b1) = unit(3);
            let (plain, _) = revin_normalize(x.view(), g1.view(), b1.view(), DEFAULT_EPS).unwrap();
            for row in plain.axis_iter(Axis(0)) {
                prop_assert!(row.sum().abs() / 8.0 < 1e-12);
            }
        }

        #[test]
        fn invariant_to_channel_affine_rescaling(values in proptest::collection::vec(-10.0f64..10.0, 16), a in 0.5f64..20.0, c in -100.0f64..100.0) {
            let x = Array2::from_shape_vec((2, 8), values).unwrap();
            prop_assume!(x.axis_iter(Axis(0)).all(|r| {
                let m = r.sum() / 8.0;
                r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0 > 0.5
            }));
            let (g, b) = unit(2);
            let eps = 1e-14;
            let (n1, _) = revin_normalize(x.view(), g.view(), b.view(), eps).unwrap();
            let scaled = x.mapv(|v| a * v + c);
            let (n2, _) = revin_normalize(scaled.view(), g.view(), b.view(), eps).unwrap();
            for (p, q) in n1.iter().zip(n2.iter()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
