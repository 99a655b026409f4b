//! Forward noising process, its closed-form marginal, the true posterior and
//! the ancestral reverse step, plus the variational-bound diagnostics that
//! relate the posterior-mean objective to the noise-prediction loss.
//!
//! Step indices are 1-based: `n ∈ 1..=N`, with `ᾱ_0 = 1`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

/// Noise scale used by the reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VarianceMode {
    /// Standard deviation `√γ_n` (γ_n is a variance).
    #[default]
    SqrtPosterior,
    /// Coefficient `γ_n` exactly as printed in the sampling pseudocode.
    AsWritten,
}

impl FromStr for VarianceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt_posterior" => Ok(Self::SqrtPosterior),
            "as_written" => Ok(Self::AsWritten),
            other => Err(Error::invalid(format!(
                "variance mode must be sqrt_posterior or as_written, got `{other}`"
            ))),
        }
    }
}

impl VarianceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SqrtPosterior => "sqrt_posterior",
            Self::AsWritten => "as_written",
        }
    }
}

/// Which schedule invariant failed in [`NoiseSchedule::validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleViolation {
    AlphaBarZero(f64),
    BetaOutOfRange { n: usize, beta: f64 },
    NotDecreasing { n: usize },
    CumprodMismatch { n: usize },
    PosteriorVariance { n: usize },
}

impl std::fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::AlphaBarZero(v) => write!(f, "alpha_bar_0 must be 1, got {v}"),
            Self::BetaOutOfRange { n, beta } => write!(f, "beta_{n} = {beta} outside (0, {MAX_BETA}]"),
            Self::NotDecreasing { n } => write!(f, "alpha_bar not strictly decreasing at n = {n}"),
            Self::CumprodMismatch { n } => write!(f, "alpha_bar_{n} != alpha_bar_{} * (1 - beta_{n})", n - 1),
            Self::PosteriorVariance { n } => write!(f, "posterior variance inconsistent at n = {n}"),
        }
    }
}

impl NoiseSchedule {
    /// Build a schedule from explicit per-step variances `β_1..β_N`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b <= MAX_BETA)) {
            return Err(Error::invalid(format!("beta_{} = {b} outside (0, {MAX_BETA}]", i + 1)));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for (i, &b) in betas.iter().enumerate() {
            alpha_bars.push(alpha_bars[i] * (1.0 - b));
        }
        let posterior_vars = (1..=betas.len())
            .map(|n| betas[n - 1] * (1.0 - alpha_bars[n - 1]) / (1.0 - alpha_bars[n]))
            .collect();
        Ok(Self {
            betas,
            alpha_bars,
            posterior_vars,
        })
    }

    /// Cosine schedule: `ᾱ(n) = f(n)/f(0)`, `f(n) = cos²(((n/N + s)/(1 + s))·π/2)`,
    /// with `β_n = min(1 - ᾱ(n)/ᾱ(n-1), 0.999)`. The stored `ᾱ` is the
    /// cumulative product of the clipped `1 - β`.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("cosine schedule needs N >= 1"));
        }
        if offset.is_nan() || offset <= 0.0 {
            return Err(Error::invalid(format!("cosine offset must be positive, got {offset}")));
        }
        let f = |n: usize| {
            let t = (n as f64 / steps as f64 + offset) / (1.0 + offset);
            (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let betas = (1..=steps)
            .map(|n| {
                let ratio = (f(n) / f0) / (f(n - 1) / f0);
                (1.0 - ratio).min(MAX_BETA)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return Err(Error::invalid(format!("diffusion step {n} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    /// `α_n = 1 - β_n`.
    pub fn alpha(&self, n: usize) -> f64 {
        1.0 - self.betas[n - 1]
    }

    /// `ᾱ_n`, defined for `0..=N`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bars[n]
    }

    /// `γ_n = β_n (1 - ᾱ_{n-1}) / (1 - ᾱ_n)`; zero at `n = 1`.
    pub fn posterior_var(&self, n: usize) -> f64 {
        self.posterior_vars[n - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Check every stored-array invariant.
    pub fn validate(&self) -> Result<(), ScheduleViolation> {
        if self.alpha_bars[0] != 1.0 {
            return Err(ScheduleViolation::AlphaBarZero(self.alpha_bars[0]));
        }
        for n in 1..=self.steps() {
            let b = self.beta(n);
            if !(b > 0.0 && b <= MAX_BETA) {
                return Err(ScheduleViolation::BetaOutOfRange { n, beta: b });
            }
            if self.alpha_bars[n] >= self.alpha_bars[n - 1] {
                return Err(ScheduleViolation::NotDecreasing { n });
            }
            if self.alpha_bars[n] != self.alpha_bars[n - 1] * (1.0 - b) {
                return Err(ScheduleViolation::CumprodMismatch { n });
            }
            let gamma = b * (1.0 - self.alpha_bars[n - 1]) / (1.0 - self.alpha_bars[n]);
            if self.posterior_vars[n - 1] != gamma {
                return Err(ScheduleViolation::PosteriorVariance { n });
            }
        }
        Ok(())
    }

    /// Overwrite one `β_n` without recomputing the derived arrays.
    #[doc(hidden)]
    pub fn tamper_beta(&mut self, n: usize, beta: f64) {
        self.betas[n - 1] = beta;
    }

    /// Columns `n, beta, alpha, alpha_bar, posterior_var` for `n = 1..=N`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,beta,alpha,alpha_bar,posterior_var\n");
        for n in 1..=self.steps() {
            let _ = writeln!(
                out,
                "{n},{:e},{:e},{:e},{:e}",
                self.beta(n),
                self.alpha(n),
                self.alpha_bar(n),
                self.posterior_var(n)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(Error::io(path))
    }

    /// Uniform draw from `1..=N`.
    pub fn sample_step<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..=self.steps())
    }
}

fn t<T: Real>(v: f64) -> T {
    T::from_f64(v)
}

/// One transition of the forward chain: `√(1-β_n)·y + √β_n·noise`.
pub fn diffuse_step<T: Real>(y_prev: &Tensor<T>, n: usize, noise: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_step(n)?;
    let b = sched.beta(n);
    y_prev.lincomb(t((1.0 - b).sqrt()), noise, t(b.sqrt()))
}

/// Closed-form marginal sample `√ᾱ_n·y0 + √(1-ᾱ_n)·eps`.
pub fn q_sample<T: Real>(y0: &Tensor<T>, n: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_step(n)?;
    let ab = sched.alpha_bar(n);
    y0.lincomb(t(ab.sqrt()), eps, t((1.0 - ab).sqrt()))
}

/// Mean of `q(y_{n-1} | y_n, y_0)`.
pub fn posterior_mean<T: Real>(yn: &Tensor<T>, y0: &Tensor<T>, n: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_step(n)?;
    let (b, ab, ab_prev) = (sched.beta(n), sched.alpha_bar(n), sched.alpha_bar(n - 1));
    let c0 = ab_prev.sqrt() * b / (1.0 - ab);
    let cn = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    y0.lincomb(t(c0), yn, t(cn))
}

/// Posterior mean expressed through a noise estimate:
/// `(y_n - β_n/√(1-ᾱ_n)·eps) / √(1-β_n)`.
pub fn posterior_mean_from_eps<T: Real>(yn: &Tensor<T>, eps: &Tensor<T>, n: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_step(n)?;
    let (b, ab) = (sched.beta(n), sched.alpha_bar(n));
    let inv = 1.0 / (1.0 - b).sqrt();
    yn.lincomb(t(inv), eps, t(-inv * b / (1.0 - ab).sqrt()))
}

/// One ancestral step `y_n → y_{n-1}`. The noise term is dropped at `n = 1`.
pub fn reverse_step<T: Real>(
    yn: &Tensor<T>,
    eps_hat: &Tensor<T>,
    n: usize,
    z: &Tensor<T>,
    sched: &NoiseSchedule,
    mode: VarianceMode,
) -> Result<Tensor<T>> {
    sched.check_step(n)?;
    if z.shape() != yn.shape() {
        return Err(Error::shape("reverse_step", yn.shape(), z.shape()));
    }
    let (b, ab) = (sched.beta(n), sched.alpha_bar(n));
    let denoised = yn.lincomb(T::one(), eps_hat, t(-b / (1.0 - ab).sqrt()))?;
    let scaled = denoised.scale(t(1.0 / (1.0 - b).sqrt()));
    if n == 1 {
        return Ok(scaled);
    }
    let gamma = sched.posterior_var(n);
    let coef = match mode {
        VarianceMode::SqrtPosterior => gamma.sqrt(),
        VarianceMode::AsWritten => gamma,
    };
    scaled.lincomb(T::one(), z, t(coef))
}

/// Weight `w_n` with `L^mid_n = w_n · ‖eps - eps_cand‖²`:
/// `β_n² / (2 γ_n (1-β_n)(1-ᾱ_n))`.
pub fn elbo_mid_weight(n: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_step(n)?;
    if n < 2 {
        return Err(Error::invalid("elbo_mid_weight needs n >= 2 (posterior variance vanishes at n = 1)"));
    }
    let (b, ab) = (sched.beta(n), sched.alpha_bar(n));
    Ok(b * b / (2.0 * sched.posterior_var(n) * (1.0 - b) * (1.0 - ab)))
}

/// Exact `L^mid_n = ‖M(y_n, y_0) - M_cand‖² / (2 γ_n)` for a candidate noise
/// estimate, computed through posterior means rather than the weight.
pub fn elbo_mid_term<T: Real>(
    y0: &Tensor<T>,
    eps: &Tensor<T>,
    eps_cand: &Tensor<T>,
    n: usize,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("elbo_mid_term needs n >= 2"));
    }
    let yn = q_sample(y0, n, eps, sched)?;
    let target = posterior_mean(&yn, y0, n, sched)?;
    let cand = posterior_mean_from_eps(&yn, eps_cand, n, sched)?;
    let d = target.sub(&cand)?;
    Ok(d.sum_sq().as_f64() / (2.0 * sched.posterior_var(n)))
}

/// `ᾱ_N ‖y0‖² / numel`: size of the mean shift the dropped prior term would
/// penalize.
pub fn prior_gap_diagnostic<T: Real>(y0: &Tensor<T>, sched: &NoiseSchedule) -> f64 {
    sched.alpha_bar(sched.steps()) * y0.sum_sq().as_f64() / y0.numel() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_rejects_zero_steps() {
        assert!(NoiseSchedule::cosine(0, DEFAULT_COSINE_OFFSET).is_err());
    }

    #[test]
    fn cosine_basic_invariants() {
        for n in [1, 2, 10, 100, 1600] {
            let s = NoiseSchedule::cosine(n, DEFAULT_COSINE_OFFSET).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            s.validate().unwrap();
            assert_eq!(s.posterior_var(1), 0.0);
        }
    }

    #[test]
    fn cosine_100_values() {
        let s = NoiseSchedule::cosine(100, DEFAULT_COSINE_OFFSET).unwrap();
        for n in 2..=100 {
            assert!(s.beta(n) >= s.beta(n - 1), "beta not monotone at {n}");
        }
        assert_eq!(s.beta(100), MAX_BETA);
        assert!(s.alpha_bar(100) < 1e-5);
    }

    #[test]
    fn q_sample_zero_noise() {
        let s = NoiseSchedule::cosine(10, DEFAULT_COSINE_OFFSET).unwrap();
        let y0 = Tensor::<f64>::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
        let out = q_sample(&y0, 4, &Tensor::zeros([3]), &s).unwrap();
        assert_eq!(out, y0.scale(s.alpha_bar(4).sqrt()));
        assert!(q_sample(&y0, 4, &Tensor::zeros([2]), &s).is_err());
        assert!(q_sample(&y0, 0, &Tensor::zeros([3]), &s).is_err());
    }

    #[test]
    fn q_sample_at_last_step_is_mostly_noise() {
        let s = NoiseSchedule::cosine(100, DEFAULT_COSINE_OFFSET).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y0 = Tensor::<f64>::full([16], 1.0);
        let eps = Tensor::randn([16], &mut rng);
        let out = q_sample(&y0, 100, &eps, &s).unwrap();
        assert!(out.sub(&eps).unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn posterior_mean_edge_cases() {
        let s = NoiseSchedule::cosine(10, DEFAULT_COSINE_OFFSET).unwrap();
        let z = Tensor::<f64>::zeros([4]);
        assert_eq!(posterior_mean(&z, &z, 3, &s).unwrap(), z);
        assert!(posterior_mean(&z, &z, 0, &s).is_err());
        // n = 1: coefficient on y0 is 1 and on y1 is 0.
        let y0 = Tensor::<f64>::from_f64([2], &[0.3, -0.7]).unwrap();
        let y1 = Tensor::<f64>::from_f64([2], &[5.0, 9.0]).unwrap();
        let m = posterior_mean(&y1, &y0, 1, &s).unwrap();
        assert!(m.sub(&y0).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn reverse_step_single_step_schedule_inverts_q_sample() {
        let s = NoiseSchedule::cosine(1, DEFAULT_COSINE_OFFSET).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y0 = Tensor::<f64>::randn([32], &mut rng);
        let eps = Tensor::<f64>::randn([32], &mut rng);
        let y1 = q_sample(&y0, 1, &eps, &s).unwrap();
        for mode in [VarianceMode::SqrtPosterior, VarianceMode::AsWritten] {
            let back = reverse_step(&y1, &eps, 1, &Tensor::zeros([32]), &s, mode).unwrap();
            assert!(back.sub(&y0).unwrap().max_abs() < 1e-6);
        }
    }

    #[test]
    fn reverse_step_zero_eps_and_z() {
        let s = NoiseSchedule::cosine(10, DEFAULT_COSINE_OFFSET).unwrap();
        let yn = Tensor::<f64>::from_f64([2], &[1.0, -2.0]).unwrap();
        let z = Tensor::zeros([2]);
        let out = reverse_step(&yn, &z, 5, &z, &s, VarianceMode::SqrtPosterior).unwrap();
        assert_eq!(out, yn.scale(1.0 / s.alpha(5).sqrt()));
        let other = reverse_step(&yn, &z, 5, &z, &s, VarianceMode::AsWritten).unwrap();
        assert_eq!(out, other);
        assert!(reverse_step(&yn, &z, 11, &z, &s, VarianceMode::SqrtPosterior).is_err());
    }

    #[test]
    fn variance_modes_differ_with_noise() {
        let s = NoiseSchedule::cosine(10, DEFAULT_COSINE_OFFSET).unwrap();
        let yn = Tensor::<f64>::zeros([1]);
        let z = Tensor::<f64>::full([1], 1.0);
        let a = reverse_step(&yn, &yn, 5, &z, &s, VarianceMode::SqrtPosterior).unwrap();
        let b = reverse_step(&yn, &yn, 5, &z, &s, VarianceMode::AsWritten).unwrap();
        assert!((a.data()[0] - s.posterior_var(5).sqrt()).abs() < 1e-15);
        assert!((b.data()[0] - s.posterior_var(5)).abs() < 1e-15);
    }

    #[test]
    fn elbo_weight_positive_and_guarded() {
        let s = NoiseSchedule::cosine(50, DEFAULT_COSINE_OFFSET).unwrap();
        assert!(elbo_mid_weight(1, &s).is_err());
        for n in 2..=50 {
            assert!(elbo_mid_weight(n, &s).unwrap() > 0.0);
        }
    }

    #[test]
    fn elbo_term_zero_for_exact_eps() {
        let s = NoiseSchedule::cosine(50, DEFAULT_COSINE_OFFSET).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y0 = Tensor::<f64>::randn([8], &mut rng);
        let eps = Tensor::<f64>::randn([8], &mut rng);
        assert!(elbo_mid_term(&y0, &eps, &eps, 17, &s).unwrap() < 1e-24);
    }

    #[test]
    fn prior_gap_scaling() {
        let s = NoiseSchedule::cosine(100, DEFAULT_COSINE_OFFSET).unwrap();
        assert_eq!(prior_gap_diagnostic(&Tensor::<f64>::zeros([4]), &s), 0.0);
        let y = Tensor::<f64>::full([4], 1.0);
        let g = prior_gap_diagnostic(&y, &s);
        assert!(g < 1e-5);
        let g2 = prior_gap_diagnostic(&y.scale(2.0), &s);
        assert!((g2 - 4.0 * g).abs() <= 1e-15 * g2);
    }

    #[test]
    fn tampered_schedule_is_detected() {
        let mut s = NoiseSchedule::cosine(10, DEFAULT_COSINE_OFFSET).unwrap();
        s.tamper_beta(4, 0.5);
        assert!(matches!(s.validate(), Err(ScheduleViolation::CumprodMismatch { n: 4 })));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = NoiseSchedule::cosine(5, DEFAULT_COSINE_OFFSET).unwrap();
        let csv = s.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "n,beta,alpha,alpha_bar,posterior_var");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("1,"));
    }
}
