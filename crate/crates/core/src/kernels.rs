//! Differentiable building blocks.
//!
//! Each layer refers to its parameters by name in a [`ParamStore`] and keeps
//! the activations of its most recent [`Layer::forward`] call. A subsequent
//! [`Layer::backward`] consumes that cache, adds parameter gradients into the
//! store and returns the gradient with respect to the layer input.
//! [`Layer::infer`] evaluates the same map without touching any state.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub trait Layer {
    fn infer(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>>;
    fn forward(&mut self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>>;
    fn backward(&mut self, params: &mut ParamStore, upstream: ArrayView2<f64>) -> Result<Array2<f64>>;
}

fn no_cache(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called before forward"))
}

fn check_upstream(layer: &str, expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!(
            "{layer}: upstream gradient {got:?} does not match output {expected:?}"
        )));
    }
    Ok(())
}

/// `y = x W + b`, row-wise.
pub fn affine_forward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    b: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    if x.ncols() != w.nrows() || w.ncols() != b.len() {
        return Err(Error::Shape(format!(
            "affine: input {:?}, weight {:?}, bias ({},)",
            x.dim(),
            w.dim(),
            b.len()
        )));
    }
    Ok(x.dot(&w) + b)
}

/// Layer normalization over the last axis, population variance, eps inside
/// the square root.
pub fn layer_norm_forward(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> Result<Array2<f64>> {
    Ok(layer_norm_parts(x, gamma, beta, eps)?.0)
}

fn layer_norm_parts(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>)> {
    let width = x.ncols();
    if gamma.len() != width || beta.len() != width {
        return Err(Error::Shape(format!(
            "layer norm: input {:?}, gamma ({},), beta ({},)",
            x.dim(),
            gamma.len(),
            beta.len()
        )));
    }
    if eps <= 0.0 || width == 0 {
        return Err(Error::Config(format!(
            "layer norm needs eps > 0 and a non-empty axis (eps {eps}, width {width})"
        )));
    }
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (r, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (c, v) in row.iter().enumerate() {
            xhat[[r, c]] = (v - mean) * is;
        }
    }
    let y = &xhat * &gamma + beta;
    Ok((y, xhat, inv_std))
}

/// Per-channel mean over the time axis of a `C x L` block.
pub fn avg_pool_time(x: ArrayView2<f64>) -> Result<Array1<f64>> {
    x.mean_axis(Axis(1))
        .ok_or_else(|| Error::Shape("average pooling over an empty time axis".into()))
}

/// `[T_0(u), ..., T_n(u)]` by the three-term recurrence.
pub fn cheb_polys(u: f64, order: usize) -> Result<Vec<f64>> {
    if !(u.abs() <= 1.0) {
        return Err(Error::Domain(format!(
            "Chebyshev argument {u} outside [-1, 1]"
        )));
    }
    let mut t = Vec::with_capacity(order + 1);
    t.push(1.0);
    if order >= 1 {
        t.push(u);
    }
    for k in 2..=order {
        t.push(2.0 * u * t[k - 1] - t[k - 2]);
    }
    Ok(t)
}

/// Values and first derivatives of `T_0..T_n` at `u`.
fn cheb_polys_with_derivative(u: f64, order: usize, t: &mut [f64], dt: &mut [f64]) {
    t[0] = 1.0;
    dt[0] = 0.0;
    if order >= 1 {
        t[1] = u;
        dt[1] = 1.0;
    }
    for k in 2..=order {
        t[k] = 2.0 * u * t[k - 1] - t[k - 2];
        dt[k] = 2.0 * t[k - 1] + 2.0 * u * dt[k - 1] - dt[k - 2];
    }
}

/// Chebyshev KAN coefficients, `theta[o, j, i]` for output `o`, input `j`,
/// polynomial degree `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebKanParams {
    pub theta: Array3<f64>,
    pub order: usize,
    pub width: usize,
}

impl ChebKanParams {
    pub fn new(theta: Array3<f64>) -> Result<Self> {
        let (o, j, n1) = theta.dim();
        if o != j || o == 0 || n1 == 0 {
            return Err(Error::Shape(format!(
                "KAN coefficients must be D x D x (order + 1) with D >= 1, got {:?}",
                theta.dim()
            )));
        }
        Ok(ChebKanParams {
            order: n1 - 1,
            width: o,
            theta,
        })
    }
}

/// `y[r, o] = sum_j sum_i theta[o, j, i] T_i(tanh(x[r, j]))`.
pub fn cheb_kan_forward(x: ArrayView2<f64>, p: &ChebKanParams) -> Result<Array2<f64>> {
    cheb_kan_eval(x, p.theta.view())
}

fn cheb_kan_eval(x: ArrayView2<f64>, theta: ArrayView3<f64>) -> Result<Array2<f64>> {
    let (width, width_in, n1) = theta.dim();
    if x.ncols() != width_in {
        return Err(Error::Shape(format!(
            "KAN: input width {} but coefficients are {:?}",
            x.ncols(),
            theta.dim()
        )));
    }
    let order = n1 - 1;
    let mut y = Array2::zeros((x.nrows(), width));
    let mut basis = Array2::zeros((width_in, n1));
    for (r, row) in x.axis_iter(Axis(0)).enumerate() {
        for (j, v) in row.iter().enumerate() {
            let t = cheb_polys(v.tanh(), order)?;
            basis.row_mut(j).assign(&ArrayView1::from(&t[..]));
        }
        for o in 0..width {
            let coeffs = theta.index_axis(Axis(0), o);
            y[[r, o]] = Zip::from(&coeffs).and(&basis).fold(0.0, |acc, c, b| acc + c * b);
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: String,
    pub bias: String,
    input: Option<Array2<f64>>,
}

impl Affine {
    pub fn new(prefix: &str) -> Self {
        Affine {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            input: None,
        }
    }

    /// Registers a `fan_in x fan_out` weight (Xavier uniform) and a zero bias.
    pub fn register(params: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let layer = Affine::new(prefix);
        params.register_xavier(&layer.weight, fan_in, fan_out)?;
        params.register_const(&layer.bias, &[fan_out], 0.0)?;
        Ok(layer)
    }
}

impl Layer for Affine {
    fn infer(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        affine_forward(x, params.matrix(&self.weight)?, params.vector(&self.bias)?)
    }

    fn forward(&mut self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let y = self.infer(params, x)?;
        self.input = Some(x.to_owned());
        Ok(y)
    }

    fn backward(&mut self, params: &mut ParamStore, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = self.input.take().ok_or_else(|| no_cache("affine"))?;
        let w = params.matrix(&self.weight)?;
        check_upstream("affine", (x.nrows(), w.ncols()), upstream.dim())?;
        let dx = upstream.dot(&w.t());
        let dw = x.t().dot(&upstream);
        let db = upstream.sum_axis(Axis(0));
        params.accumulate(&self.weight, dw.view())?;
        params.accumulate(&self.bias, db.view())?;
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub eps: f64,
    cache: Option<(Array2<f64>, Array1<f64>)>,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn register(params: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        let layer = LayerNorm {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            eps: Self::DEFAULT_EPS,
            cache: None,
        };
        params.register_const(&layer.gamma, &[width], 1.0)?;
        params.register_const(&layer.beta, &[width], 0.0)?;
        Ok(layer)
    }
}

impl Layer for LayerNorm {
    fn infer(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        layer_norm_forward(x, params.vector(&self.gamma)?, params.vector(&self.beta)?, self.eps)
    }

    fn forward(&mut self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (y, xhat, inv_std) =
            layer_norm_parts(x, params.vector(&self.gamma)?, params.vector(&self.beta)?, self.eps)?;
        self.cache = Some((xhat, inv_std));
        Ok(y)
    }

    fn backward(&mut self, params: &mut ParamStore, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (xhat, inv_std) = self.cache.take().ok_or_else(|| no_cache("layer norm"))?;
        check_upstream("layer norm", xhat.dim(), upstream.dim())?;
        let gamma = params.vector(&self.gamma)?.to_owned();
        let width = xhat.ncols() as f64;
        let dxhat = &upstream * &gamma;
        let mut dx = Array2::zeros(xhat.raw_dim());
        for r in 0..xhat.nrows() {
            let g = dxhat.row(r);
            let h = xhat.row(r);
            let mean_g = g.sum() / width;
            let mean_gh = g.dot(&h) / width;
            for c in 0..xhat.ncols() {
                dx[[r, c]] = inv_std[r] * (g[c] - mean_g - h[c] * mean_gh);
            }
        }
        let dgamma = (&upstream * &xhat).sum_axis(Axis(0));
        let dbeta = upstream.sum_axis(Axis(0));
        params.accumulate(&self.gamma, dgamma.view())?;
        params.accumulate(&self.beta, dbeta.view())?;
        Ok(dx)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone, Default)]
pub struct Gelu {
    input: Option<Array2<f64>>,
}

impl Layer for Gelu {
    fn infer(&self, _params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(x.mapv(gelu))
    }

    fn forward(&mut self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let y = self.infer(params, x)?;
        self.input = Some(x.to_owned());
        Ok(y)
    }

    fn backward(&mut self, _params: &mut ParamStore, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = self.input.take().ok_or_else(|| no_cache("gelu"))?;
        check_upstream("gelu", x.dim(), upstream.dim())?;
        Ok(Zip::from(&x).and(&upstream).map_collect(|&v, &g| g * gelu_derivative(v)))
    }
}

/// Two affine maps with a GELU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub first: Affine,
    pub act: Gelu,
    pub second: Affine,
}

impl FeedForward {
    pub fn register(
        params: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            first: Affine::register(params, &format!("{prefix}.fc1"), input, hidden)?,
            act: Gelu::default(),
            second: Affine::register(params, &format!("{prefix}.fc2"), hidden, output)?,
        })
    }
}

impl Layer for FeedForward {
    fn infer(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let h = self.first.infer(params, x)?;
        let h = self.act.infer(params, h.view())?;
        self.second.infer(params, h.view())
    }

    fn forward(&mut self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let h = self.first.forward(params, x)?;
        let h = self.act.forward(params, h.view())?;
        self.second.forward(params, h.view())
    }

    fn backward(&mut self, params: &mut ParamStore, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        let g = self.second.backward(params, upstream)?;
        let g = self.act.backward(params, g.view())?;
        self.first.backward(params, g.view())
    }
}

/// Affine map followed by GELU.
#[derive(Debug, Clone)]
pub struct Dense {
    pub affine: Affine,
    pub act: Gelu,
}

impl Dense {
    pub fn register(params: &mut ParamStore, prefix: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Dense {
            affine: Affine::register(params, prefix, input, output)?,
            act: Gelu::default(),
        })
    }
}

impl Layer for Dense {
    fn infer(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let h = self.affine.infer(params, x)?;
        self.act.infer(params, h.view())
    }

    fn forward(&mut self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let h = self.affine.forward(params, x)?;
        self.act.forward(params, h.view())
    }

    fn backward(&mut self, params: &mut ParamStore, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        let g = self.act.backward(params, upstream)?;
        self.affine.backward(params, g.view())
    }
}

/// Chebyshev-polynomial KAN layer over the last axis (width `D`).
#[derive(Debug, Clone)]
pub struct ChebKan {
    pub theta: String,
    pub order: usize,
    pub width: usize,
    cache: Option<KanCache>,
}

#[derive(Debug, Clone)]
struct KanCache {
    /// tanh of the input, rows x D
    squashed: Array2<f64>,
    /// T_i(u), rows x D x (n + 1)
    basis: Array3<f64>,
    /// T_i'(u), rows x D x (n + 1)
    basis_grad: Array3<f64>,
}

impl ChebKan {
    pub fn new(name: &str, width: usize, order: usize) -> Self {
        ChebKan {
            theta: name.to_string(),
            order,
            width,
            cache: None,
        }
    }

    /// Registers `theta` with entries drawn from N(0, (1 / (D (n + 1)))^2).
    pub fn register(params: &mut ParamStore, name: &str, width: usize, order: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("KAN width must be at least 1".into()));
        }
        let std = 1.0 / (width * (order + 1)) as f64;
        params.register_normal(name, &[width, width, order + 1], std)?;
        Ok(ChebKan::new(name, width, order))
    }

    fn coefficients<'a>(&self, params: &'a ParamStore) -> Result<ArrayView3<'a, f64>> {
        let theta = params.tensor3(&self.theta)?;
        if theta.dim() != (self.width, self.width, self.order + 1) {
            return Err(Error::Shape(format!(
                "KAN '{}': coefficients {:?} but layer expects width {} order {}",
                self.theta,
                theta.dim(),
                self.width,
                self.order
            )));
        }
        Ok(theta)
    }
}

impl Layer for ChebKan {
    fn infer(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        cheb_kan_eval(x, self.coefficients(params)?)
    }

    fn forward(&mut self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let theta = self.coefficients(params)?;
        if x.ncols() != self.width {
            return Err(Error::Shape(format!(
                "KAN '{}': input width {} but layer width {}",
                self.theta,
                x.ncols(),
                self.width
            )));
        }
        let rows = x.nrows();
        let n1 = self.order + 1;
        let squashed = x.mapv(f64::tanh);
        let mut basis = Array3::zeros((rows, self.width, n1));
        let mut basis_grad = Array3::zeros((rows, self.width, n1));
        let mut t = vec![0.0; n1];
        let mut dt = vec![0.0; n1];
        for r in 0..rows {
            for j in 0..self.width {
                let u = squashed[[r, j]];
                if !(u.abs() <= 1.0) {
                    return Err(Error::Domain(format!("Chebyshev argument {u} outside [-1, 1]")));
                }
                cheb_polys_with_derivative(u, self.order, &mut t, &mut dt);
                basis.slice_mut(s![r, j, ..]).assign(&ArrayView1::from(&t[..]));
                basis_grad.slice_mut(s![r, j, ..]).assign(&ArrayView1::from(&dt[..]));
            }
        }
        let mut y = Array2::zeros((rows, self.width));
        for r in 0..rows {
            let b = basis.index_axis(Axis(0), r);
            for o in 0..self.width {
                let coeffs = theta.index_axis(Axis(0), o);
                y[[r, o]] = Zip::from(&coeffs).and(&b).fold(0.0, |acc, c, v| acc + c * v);
            }
        }
        self.cache = Some(KanCache {
            squashed,
            basis,
            basis_grad,
        });
        Ok(y)
    }

    fn backward(&mut self, params: &mut ParamStore, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        let cache = self.cache.take().ok_or_else(|| no_cache("chebyshev kan"))?;
        let rows = cache.squashed.nrows();
        check_upstream("chebyshev kan", (rows, self.width), upstream.dim())?;
        let theta = self.coefficients(params)?.to_owned();
        let mut dtheta = Array3::<f64>::zeros(theta.raw_dim());
        let mut dx = Array2::zeros((rows, self.width));
        for r in 0..rows {
            let b = cache.basis.index_axis(Axis(0), r);
            let bg = cache.basis_grad.index_axis(Axis(0), r);
            for o in 0..self.width {
                let g = upstream[[r, o]];
                if g == 0.0 {
                    continue;
                }
                dtheta
                    .index_axis_mut(Axis(0), o)
                    .scaled_add(g, &b);
                let coeffs = theta.index_axis(Axis(0), o);
                for j in 0..self.width {
                    let s: f64 = coeffs.row(j).dot(&bg.row(j));
                    dx[[r, j]] += g * s;
                }
            }
            for j in 0..self.width {
                let u = cache.squashed[[r, j]];
                dx[[r, j]] *= 1.0 - u * u;
            }
        }
        params.accumulate(&self.theta, dtheta.view())?;
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Sum of `upstream * layer(x)` as a scalar objective.
    fn probe<L: Layer>(layer: &L, params: &ParamStore, x: &Array2<f64>, upstream: &Array2<f64>) -> f64 {
        (layer.infer(params, x.view()).unwrap() * upstream).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
    }

    /// Central-difference check of every parameter and every input element.
    fn finite_difference_check<L: Layer + Clone>(mut layer: L, mut params: ParamStore, x: Array2<f64>, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = layer.forward(&params, x.view()).unwrap();
        let upstream = random_matrix(&mut rng, y.nrows(), y.ncols());
        params.zero_grads();
        let dx = layer.backward(&mut params, upstream.view()).unwrap();
        let h = 1e-5;
        let names: Vec<String> = params.names().map(String::from).collect();
        let mut worst = 0.0f64;
        for name in &names {
            let n = params.get(name).unwrap().value.len();
            for i in 0..n {
                let analytic = params.get(name).unwrap().grad.as_slice().unwrap()[i];
                let orig = params.get(name).unwrap().value.as_slice().unwrap()[i];
                params.get_mut(name).unwrap().value.as_slice_mut().unwrap()[i] = orig + h;
                let up = probe(&layer, &params, &x, &upstream);
                params.get_mut(name).unwrap().value.as_slice_mut().unwrap()[i] = orig - h;
                let down = probe(&layer, &params, &x, &upstream);
                params.get_mut(name).unwrap().value.as_slice_mut().unwrap()[i] = orig;
                worst = worst.max(rel_err(analytic, (up - down) / (2.0 * h)));
            }
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (probe(&layer, &params, &xp, &upstream) - probe(&layer, &params, &xm, &upstream)) / (2.0 * h);
            worst = worst.max(rel_err(dx.as_slice().unwrap()[idx], numeric));
        }
        assert!(worst < tol, "worst relative error {worst}");
    }

    #[test]
    fn affine_examples() {
        let y = affine_forward(arr2(&[[1.0, 2.0]]).view(), Array2::eye(2).view(), arr1(&[0.0, 0.0]).view()).unwrap();
        assert_eq!(y, arr2(&[[1.0, 2.0]]));
        let y = affine_forward(arr2(&[[1.0, 2.0]]).view(), arr2(&[[1.0], [1.0]]).view(), arr1(&[3.0]).view()).unwrap();
        assert_eq!(y, arr2(&[[6.0]]));
        let err = affine_forward(arr2(&[[1.0, 2.0]]).view(), Array2::eye(3).view(), arr1(&[0.0; 3]).view()).unwrap_err();
        assert!(err.to_string().contains("(1, 2)") && err.to_string().contains("(3, 3)"));
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 4, 2);
        let b = arr1(&[0.25, -0.5]);
        let y = affine_forward(x.view(), w.view(), b.view()).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = b[j];
                for k in 0..4 {
                    acc += x[[i, k]] * w[[k, j]];
                }
                assert!((y[[i, j]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = arr1(&[1.0, 1.0, 1.0]);
        let zeros = arr1(&[0.0, 0.0, 0.0]);
        let y = layer_norm_forward(arr2(&[[1.0, 1.0, 1.0]]).view(), ones.view(), zeros.view(), 1e-5).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        let y = layer_norm_forward(arr2(&[[-1.0, 1.0]]).view(), arr1(&[1.0, 1.0]).view(), arr1(&[0.0, 0.0]).view(), 1e-300).unwrap();
        assert!((y[[0, 0]] + 1.0).abs() < 1e-15 && (y[[0, 1]] - 1.0).abs() < 1e-15);

        let eps = 1e-5;
        let y = layer_norm_forward(arr2(&[[1.0, 2.0, 3.0]]).view(), ones.view(), zeros.view(), eps).unwrap();
        let mean = 2.0;
        let var = 2.0 / 3.0;
        for (i, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            assert!((y[[0, i]] - (v - mean) / (var + eps).sqrt()).abs() < 1e-12);
        }
        assert!(matches!(
            layer_norm_forward(arr2(&[[1.0, 2.0]]).view(), ones.view(), zeros.view(), eps),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn layer_norm_single_element_gives_beta() {
        let y = layer_norm_forward(arr2(&[[3.7], [-2.0]]).view(), arr1(&[2.0]).view(), arr1(&[0.3]).view(), 1e-5).unwrap();
        assert!(y.iter().all(|v| *v == 0.3));
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 5, 16) * 3.0;
        let eps = 1e-5;
        let y = layer_norm_forward(x.view(), Array1::ones(16).view(), Array1::zeros(16).view(), eps).unwrap();
        for (r, row) in y.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / 16.0;
            assert!(mean.abs() < 1e-12);
            let xr = x.row(r);
            let xm = xr.sum() / 16.0;
            let xvar = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 16.0;
            let var = row.iter().map(|v| v * v).sum::<f64>() / 16.0;
            assert!((var - xvar / (xvar + eps)).abs() < 1e-6);
        }
    }

    #[test]
    fn cheb_polys_examples() {
        assert_eq!(cheb_polys(0.5, 2).unwrap(), vec![1.0, 0.5, -0.5]);
        assert!(cheb_polys(1.0, 7).unwrap().iter().all(|v| *v == 1.0));
        for (k, v) in cheb_polys(0.3, 5).unwrap().iter().enumerate() {
            assert!((v - (k as f64 * 0.3f64.acos()).cos()).abs() < 1e-12);
        }
        assert!(matches!(cheb_polys(1.5, 3), Err(Error::Domain(_))));
        assert!(matches!(cheb_polys(f64::NAN, 3), Err(Error::Domain(_))));
        assert_eq!(cheb_polys(0.2, 0).unwrap(), vec![1.0]);
    }

    #[test]
    fn cheb_recurrence_matches_trig_on_grid() {
        for n in 0..=8 {
            for i in 0..1000 {
                let u = -1.0 + 2.0 * i as f64 / 999.0;
                let t = cheb_polys(u, n).unwrap();
                for (k, v) in t.iter().enumerate() {
                    let trig = (k as f64 * u.acos()).cos();
                    assert!((v - trig).abs() < 1e-10, "n {n} u {u} k {k}");
                }
            }
        }
    }

    #[test]
    fn kan_examples() {
        let p = ChebKanParams::new(Array3::from_shape_vec((1, 1, 3), vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(cheb_kan_forward(arr2(&[[0.0]]).view(), &p).unwrap()[[0, 0]], 0.0);

        let p = ChebKanParams::new(Array3::from_shape_vec((1, 1, 3), vec![1.0, 0.0, 2.0]).unwrap()).unwrap();
        let y = cheb_kan_forward(arr2(&[[0.5f64.atanh()]]).view(), &p).unwrap();
        // 1 + 2 * (2 * 0.25 - 1)
        assert!(y[[0, 0]].abs() < 1e-12);

        let p = ChebKanParams::new(Array3::zeros((2, 2, 4))).unwrap();
        let y = cheb_kan_forward(arr2(&[[3.0, -1.0], [0.2, 9.0]]).view(), &p).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));

        let err = cheb_kan_forward(arr2(&[[1.0, 2.0, 3.0]]).view(), &p).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn kan_order_zero_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = Array3::from_shape_fn((3, 3, 1), |_| rng.random_range(-1.0..1.0));
        let p = ChebKanParams::new(theta).unwrap();
        let a = cheb_kan_forward(random_matrix(&mut rng, 1, 3).view(), &p).unwrap();
        let b = cheb_kan_forward(random_matrix(&mut rng, 1, 3).view(), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn avg_pool_examples() {
        assert_eq!(avg_pool_time(arr2(&[[1.0, 3.0], [2.0, 2.0]]).view()).unwrap(), arr1(&[2.0, 2.0]));
        assert_eq!(avg_pool_time(arr2(&[[4.0], [-1.0]]).view()).unwrap(), arr1(&[4.0, -1.0]));
        assert!(matches!(avg_pool_time(Array2::zeros((2, 0)).view()), Err(Error::Shape(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 7, 24);
        let m = avg_pool_time(x.view()).unwrap();
        for c in 0..7 {
            let mut acc = 0.0;
            for t in 0..24 {
                acc += x[[c, t]];
            }
            assert!((m[c] - acc / 24.0).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_gradients() {
        let mut params = ParamStore::new(5);
        let layer = Affine::register(&mut params, "fc", 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        params.get_mut("fc.bias").unwrap().value = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)).into_dyn();
        let x = random_matrix(&mut rng, 5, 4);
        finite_difference_check(layer, params, x, 1e-6);
    }

    #[test]
    fn affine_weight_gradient_is_xt_upstream() {
        let mut params = ParamStore::new(5);
        let mut layer = Affine::register(&mut params, "fc", 2, 2).unwrap();
        let x = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let g = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        layer.forward(&params, x.view()).unwrap();
        layer.backward(&mut params, g.view()).unwrap();
        let dw = params.get("fc.weight").unwrap().grad.clone();
        assert_eq!(dw.into_dimensionality::<ndarray::Ix2>().unwrap(), x.t().dot(&g));
    }

    #[test]
    fn layer_norm_gradients() {
        let mut params = ParamStore::new(5);
        let layer = LayerNorm::register(&mut params, "ln", 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        params.get_mut("ln.gamma").unwrap().value = Array1::from_shape_fn(6, |_| rng.random_range(0.5..1.5)).into_dyn();
        let x = random_matrix(&mut rng, 4, 6);
        finite_difference_check(layer, params, x, 1e-4);
    }

    #[test]
    fn gelu_and_feedforward_gradients() {
        let mut params = ParamStore::new(5);
        let layer = FeedForward::register(&mut params, "ff", 3, 5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_matrix(&mut rng, 4, 3) * 2.0;
        finite_difference_check(layer, params, x, 1e-4);

        let mut params = ParamStore::new(6);
        let layer = Dense::register(&mut params, "dense", 3, 3).unwrap();
        finite_difference_check(layer, params, random_matrix(&mut rng, 2, 3), 1e-4);
    }

    #[test]
    fn kan_gradients() {
        let mut params = ParamStore::new(5);
        let layer = ChebKan::register(&mut params, "kan", 4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        params.get_mut("kan").unwrap().value.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = random_matrix(&mut rng, 3, 4) * 1.5;
        finite_difference_check(layer, params, x, 1e-4);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut params = ParamStore::new(0);
        let mut fc = Affine::register(&mut params, "fc", 2, 2).unwrap();
        let mut kan = ChebKan::register(&mut params, "kan", 2, 2).unwrap();
        let g = Array2::zeros((1, 2));
        assert!(matches!(fc.backward(&mut params, g.view()), Err(Error::State(_))));
        assert!(matches!(kan.backward(&mut params, g.view()), Err(Error::State(_))));
        fc.forward(&params, Array2::zeros((1, 2)).view()).unwrap();
        fc.backward(&mut params, g.view()).unwrap();
        assert!(matches!(fc.backward(&mut params, g.view()), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_leaves_gradients_unchanged() {
        let mut params = ParamStore::new(3);
        let mut kan = ChebKan::register(&mut params, "kan", 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_matrix(&mut rng, 2, 3);
        kan.forward(&params, x.view()).unwrap();
        kan.backward(&mut params, random_matrix(&mut rng, 2, 3).view()).unwrap();
        let before = params.clone();
        kan.forward(&params, x.view()).unwrap();
        kan.backward(&mut params, Array2::zeros((2, 3)).view()).unwrap();
        assert_eq!(before, params);
    }

    #[test]
    fn accumulation_over_two_passes_is_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x1 = random_matrix(&mut rng, 2, 3);
        let x2 = random_matrix(&mut rng, 2, 3);
        let g1 = random_matrix(&mut rng, 2, 4);
        let g2 = random_matrix(&mut rng, 2, 4);
        let run = |pairs: &[(&Array2<f64>, &Array2<f64>)]| {
            let mut params = ParamStore::new(12);
            let mut fc = Affine::register(&mut params, "fc", 3, 4).unwrap();
            for (x, g) in pairs {
                fc.forward(&params, x.view()).unwrap();
                fc.backward(&mut params, g.view()).unwrap();
            }
            params
        };
        let both = run(&[(&x1, &g1), (&x2, &g2)]);
        let a = run(&[(&x1, &g1)]);
        let b = run(&[(&x2, &g2)]);
        for name in ["fc.weight", "fc.bias"] {
            let expected = &a.get(name).unwrap().grad + &b.get(name).unwrap().grad;
            let got = &both.get(name).unwrap().grad;
            for (e, g) in expected.iter().zip(got.iter()) {
                assert!((e - g).abs() < 1e-15);
            }
        }
    }
}
