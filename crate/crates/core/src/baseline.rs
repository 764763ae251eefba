//! Direct affine map from the lookback window to the horizon, shared across
//! channels. Used as the reference forecaster.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::kernels::{Affine, Layer};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct LinearBaseline {
    fc: Affine,
    lookback: usize,
    horizon: usize,
}

impl LinearBaseline {
    pub fn new(params: &mut ParamStore, lookback: usize, horizon: usize) -> Result<Self> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::Config("baseline lookback and horizon must be positive".into()));
        }
        Ok(LinearBaseline {
            fc: Affine::register(params, "linear", lookback, horizon)?,
            lookback,
            horizon,
        })
    }

    pub fn build(lookback: usize, horizon: usize, seed: u64) -> Result<(Self, ParamStore)> {
        let mut params = ParamStore::new(seed);
        let model = LinearBaseline::new(&mut params, lookback, horizon)?;
        Ok((model, params))
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn check(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.lookback {
            return Err(Error::Shape(format!(
                "baseline expects lookback {}, got {}",
                self.lookback,
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        self.fc.infer(params, x)
    }

    pub fn forward(&mut self, params: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        self.fc.forward(params, x)
    }

    pub fn backward(&mut self, params: &mut ParamStore, upstream: ArrayView2<f64>) -> Result<()> {
        self.fc.backward(params, upstream).map(|_| ())
    }
}
