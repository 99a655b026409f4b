//! Autoregressive affine transform between frames and scaled residuals:
//! `x_t = μ_t + σ·y_t` and `y_t = (x_t − μ_t)/σ`.
//!
//! In [`FlowMode::Vd`] the transform is the identity (μ ≡ 0, σ = 1), which
//! turns the model into plain conditional frame diffusion.

use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlowMode {
    /// Residuals against the predicted mean frame.
    #[default]
    Rvd,
    /// Frames diffused directly.
    Vd,
}

impl FromStr for FlowMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rvd" => Ok(Self::Rvd),
            "vd" => Ok(Self::Vd),
            other => Err(Error::invalid(format!("mode must be rvd or vd, got `{other}`"))),
        }
    }
}

impl FlowMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rvd => "rvd",
            Self::Vd => "vd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualConfig {
    sigma: f64,
    mode: FlowMode,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            mode: FlowMode::Rvd,
        }
    }
}

impl ResidualConfig {
    pub fn new(sigma: f64, mode: FlowMode) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma, mode })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mode(&self) -> FlowMode {
        self.mode
    }

    /// Scale actually applied: σ in RVD mode, 1 in VD mode.
    pub fn effective_sigma(&self) -> f64 {
        match self.mode {
            FlowMode::Rvd => self.sigma,
            FlowMode::Vd => 1.0,
        }
    }
}

pub fn to_residual<T: Real>(x: &Tensor<T>, mu: &Tensor<T>, cfg: &ResidualConfig) -> Result<Tensor<T>> {
    if x.shape() != mu.shape() {
        return Err(Error::shape("to_residual", x.shape(), mu.shape()));
    }
    match cfg.mode {
        FlowMode::Vd => Ok(x.clone()),
        FlowMode::Rvd => {
            let inv = T::from_f64(1.0 / cfg.sigma);
            x.zip_map(mu, "to_residual", |a, b| (a - b) * inv)
        }
    }
}

pub fn from_residual<T: Real>(y0: &Tensor<T>, mu: &Tensor<T>, cfg: &ResidualConfig) -> Result<Tensor<T>> {
    if y0.shape() != mu.shape() {
        return Err(Error::shape("from_residual", y0.shape(), mu.shape()));
    }
    match cfg.mode {
        FlowMode::Vd => Ok(y0.clone()),
        FlowMode::Rvd => {
            let s = T::from_f64(cfg.sigma);
            y0.zip_map(mu, "from_residual", |y, m| m + s * y)
        }
    }
}

/// [`to_residual`] recorded on a tape so gradients reach the mean predictor.
pub fn to_residual_var<T: Real>(tape: &mut Tape<T>, x: Var, mu: Var, cfg: &ResidualConfig) -> Result<Var> {
    if tape.shape(x) != tape.shape(mu) {
        return Err(Error::shape("to_residual", tape.shape(x), tape.shape(mu)));
    }
    match cfg.mode {
        FlowMode::Vd => Ok(x),
        FlowMode::Rvd => {
            let d = tape.sub(x, mu)?;
            tape.scalar_mul(d, T::from_f64(1.0 / cfg.sigma))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([v.len()], v).unwrap()
    }

    #[test]
    fn perfect_prediction_gives_zero_residual() {
        let cfg = ResidualConfig::default();
        let x = t(&[0.3, -0.2]);
        assert_eq!(to_residual(&x, &x, &cfg).unwrap(), t(&[0.0, 0.0]));
    }

    #[test]
    fn scaled_arithmetic() {
        let cfg = ResidualConfig::new(2.0, FlowMode::Rvd).unwrap();
        let zero = t(&[0.0, 0.0]);
        assert_eq!(to_residual(&t(&[2.0, -4.0]), &zero, &cfg).unwrap(), t(&[1.0, -2.0]));
        assert_eq!(from_residual(&t(&[1.0, -2.0]), &zero, &cfg).unwrap(), t(&[2.0, -4.0]));
        let mu = t(&[0.5, 0.25]);
        assert_eq!(from_residual(&zero, &mu, &cfg).unwrap(), mu);
    }

    #[test]
    fn vd_mode_ignores_mean() {
        let cfg = ResidualConfig::new(2.0, FlowMode::Vd).unwrap();
        let x = t(&[0.3, -0.9]);
        let mu = t(&[5.0, 7.0]);
        assert_eq!(to_residual(&x, &mu, &cfg).unwrap(), x);
        assert_eq!(from_residual(&x, &mu, &cfg).unwrap(), x);
    }

    #[test]
    fn vd_equals_rvd_with_zero_mean_unit_sigma() {
        let vd = ResidualConfig::new(2.0, FlowMode::Vd).unwrap();
        let unit = ResidualConfig::new(1.0, FlowMode::Rvd).unwrap();
        let x = t(&[0.3, -0.9, 1.0]);
        let zero = Tensor::zeros([3]);
        let a = to_residual(&x, &zero, &vd).unwrap();
        let b = to_residual(&x, &zero, &unit).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ResidualConfig::new(0.0, FlowMode::Rvd).is_err());
        assert!(ResidualConfig::new(-1.0, FlowMode::Rvd).is_err());
        let cfg = ResidualConfig::default();
        assert!(to_residual(&t(&[1.0]), &t(&[1.0, 2.0]), &cfg).is_err());
        assert!(from_residual(&t(&[1.0]), &t(&[1.0, 2.0]), &cfg).is_err());
    }

    proptest! {
        // Dyadic inputs with a power-of-two sigma keep every intermediate
        // exactly representable, so the f64 round trip is bit-exact.
        #[test]
        fn round_trip_exact_on_dyadic_grid(
            vals in prop::collection::vec((-1024i32..=1024, -1024i32..=1024), 1..32),
            sigma in prop::sample::select(vec![0.5, 1.0, 2.0, 4.0]),
        ) {
            let cfg = ResidualConfig::new(sigma, FlowMode::Rvd).unwrap();
            let x = Tensor::<f64>::new([vals.len()], vals.iter().map(|v| v.0 as f64 / 1024.0).collect()).unwrap();
            let mu = Tensor::<f64>::new([vals.len()], vals.iter().map(|v| v.1 as f64 / 1024.0).collect()).unwrap();
            let back = from_residual(&to_residual(&x, &mu, &cfg).unwrap(), &mu, &cfg).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }

        #[test]
        fn round_trip_close_for_arbitrary_values(
            vals in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..32),
            sigma in 0.1f64..8.0,
        ) {
            let cfg = ResidualConfig::new(sigma, FlowMode::Rvd).unwrap();
            let x = Tensor::<f64>::new([vals.len()], vals.iter().map(|v| v.0).collect()).unwrap();
            let mu = Tensor::<f64>::new([vals.len()], vals.iter().map(|v| v.1).collect()).unwrap();
            let back = from_residual(&to_residual(&x, &mu, &cfg).unwrap(), &mu, &cfg).unwrap();
            prop_assert!(back.sub(&x).unwrap().max_abs() <= 4e-15);

            let (x32, mu32) = (x.cast::<f32>(), mu.cast::<f32>());
            let back32 = from_residual(&to_residual(&x32, &mu32, &cfg).unwrap(), &mu32, &cfg).unwrap();
            prop_assert!(back32.sub(&x32).unwrap().max_abs() <= 1e-6);
        }
    }
}
