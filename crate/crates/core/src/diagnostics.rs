//! Self-checks: gradient suite, schedule invariants, bound identities,
//! oracle recovery, CRPS oracle and Monte-Carlo moments.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_coords, Tape, Var};
use crate::diffusion::{
    diffuse_step, elbo_mid_term, elbo_mid_weight, posterior_mean, posterior_mean_from_eps, q_sample, NoiseSchedule,
    ScheduleViolation, VarianceMode, DEFAULT_COSINE_OFFSET,
};
use crate::error::{Error, Result};
use crate::metrics::crps_pixel;
use crate::nn::{
    BlockConfig, Builder, Conv, ConvGru, ConvTranspose, DiffusionModel, Graph, GroupNorm, Linear, LinearAttention,
    ParamStore, Profile, ResBlock, RvdNet, StateVars,
};
use crate::residual::{to_residual, FlowMode, ResidualConfig};
use crate::tensor::{numel, Real, Tensor};
use crate::train::{denoising_loss, generate, SampleConfig, StepDraws};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    /// Worst error or statistic observed.
    pub value: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckRecord {
    fn new(name: impl Into<String>, value: f64, tolerance: f64, cases: usize, elapsed: Duration) -> Self {
        Self {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
            cases,
            detail: String::new(),
            elapsed,
        }
    }

    fn failed(name: impl Into<String>, detail: String, elapsed: Duration) -> Self {
        Self {
            name: name.into(),
            passed: false,
            value: f64::NAN,
            tolerance: f64::NAN,
            cases: 0,
            detail,
            elapsed,
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed())
}

// ---- gradient suite ---------------------------------------------------------

/// One finite-difference case: returns the worst relative error for a seed.
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn(u64) -> Result<f64>,
}

const LINEAR_TOL: f64 = 1e-6;
const NONLINEAR_TOL: f64 = 1e-3;
const LINEAR_STEP: f64 = 1e-4;
const NONLINEAR_STEP: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, r)
}

/// Random values with `|v| ≥ 0.1`, away from the leaky-ReLU kink.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    randn(shape, r).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

/// `⟨y, r⟩` with a fixed random `r`: linear in `y`, so the reduction adds
/// no curvature of its own.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = randn(tape.shape(y), &mut rng(seed ^ 0xC0FF_EE00));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn pack(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len();
    Tensor::new([1, n], data).expect("packed shape")
}

fn unpack(tape: &mut Tape<f64>, flat: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n = numel(s);
            let v = tape.slice_channel(flat, off, n)?;
            off += n;
            tape.reshape(v, s)
        })
        .collect()
}

/// Up to `per_part` random coordinates from every part.
fn sample_coords(shapes: &[Vec<usize>], per_part: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut coords = Vec::new();
    let mut off = 0;
    for s in shapes {
        let n = numel(s);
        if n <= per_part {
            coords.extend(off..off + n);
        } else {
            coords.extend((0..per_part).map(|_| off + r.random_range(0..n)));
        }
        off += n;
    }
    coords
}

/// Check `f(args)` against finite differences in every argument.
fn check_fn(
    seed: u64,
    args: Vec<Tensor<f64>>,
    step: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let shapes: Vec<Vec<usize>> = args.iter().map(|a| a.shape().to_vec()).collect();
    let coords = sample_coords(&shapes, 12, &mut rng(seed ^ 0xABCD));
    grad_check_coords(
        |tape, flat| {
            let vars = unpack(tape, flat, &shapes)?;
            let y = f(tape, &vars)?;
            if tape.value(y).numel() == 1 {
                tape.reshape(y, &[])
            } else {
                project(tape, y, seed)
            }
        },
        &pack(&args),
        step,
        &coords,
    )
}

/// Check a parameterized block in its inputs and in every parameter.
fn check_block<B>(
    seed: u64,
    build: impl FnOnce(&mut Builder) -> B,
    inputs: Vec<Tensor<f64>>,
    per_part: usize,
    forward: impl Fn(&B, &mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut b = Builder::new(seed);
    let block = build(&mut b);
    let store: ParamStore<f64> = b.finish().cast();
    let n_in = inputs.len();
    let mut parts = inputs;
    // Move parameters off their initial constants (GN γ = 1, β = 0).
    let mut r = rng(seed ^ 0x7777);
    for v in store.values() {
        parts.push(v.lincomb(1.0, &randn(v.shape(), &mut r), 0.1).expect("same shape"));
    }
    let shapes: Vec<Vec<usize>> = parts.iter().map(|a| a.shape().to_vec()).collect();
    let coords = sample_coords(&shapes, per_part, &mut rng(seed ^ 0xABCD));
    grad_check_coords(
        |tape, flat| {
            let vars = unpack(tape, flat, &shapes)?;
            let (xs, ps) = vars.split_at(n_in);
            let mut g = Graph::new(tape, ps);
            let y = forward(&block, &mut g, xs)?;
            if g.tape.value(y).numel() == 1 {
                g.tape.reshape(y, &[])
            } else {
                project(g.tape, y, seed)
            }
        },
        &pack(&parts),
        NONLINEAR_STEP,
        &coords,
    )
}

fn img(r: &mut ChaCha8Rng, c: usize, h: usize) -> Tensor<f64> {
    randn(&[2, c, h, h], r)
}

/// Tiny two-level configuration for the full-loss check.
pub fn toy_block_config() -> BlockConfig {
    BlockConfig {
        channel_dim: 4,
        denoise_multipliers: vec![1, 2],
        transform_multipliers: vec![1, 2],
        attn_heads: 2,
        attn_head_dim: 4,
        gru_kernel: 3,
        resblock_kernel: 3,
        frame_channels: 1,
        pe_dim: 8,
    }
}

fn full_loss_case(seed: u64) -> Result<f64> {
    let cfg = toy_block_config();
    let (net, store) = RvdNet::build(&cfg, &[1, 8, 8], seed)?;
    let store: ParamStore<f64> = store.cast();
    let sched = NoiseSchedule::cosine(10, DEFAULT_COSINE_OFFSET)?;
    let mut r = rng(seed ^ 0x1234);
    let frames: Vec<Tensor<f64>> = (0..2).map(|_| randn(&[2, 1, 8, 8], &mut r).map(f64::tanh)).collect();
    let draws = StepDraws::<f64>::sample(&mut r, &sched, 1, &[2, 1, 8, 8]);
    let res = ResidualConfig::default();
    let shapes: Vec<Vec<usize>> = store.values().iter().map(|v| v.shape().to_vec()).collect();
    let coords = sample_coords(&shapes, 1, &mut r);
    grad_check_coords(
        |tape, flat| {
            let ps = unpack(tape, flat, &shapes)?;
            let fs: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
            let mut g = Graph::new(tape, &ps);
            let l = denoising_loss(&net, &mut g, &fs, 1, &draws, &sched, &res)?;
            g.tape.reshape(l, &[])
        },
        &pack(store.values()),
        NONLINEAR_STEP,
        &coords,
    )
}

/// Every primitive, every block and the full training loss.
pub fn gradient_cases() -> Vec<GradCase> {
    macro_rules! case {
        ($name:expr, $tol:expr, $body:expr) => {
            GradCase {
                name: $name,
                tolerance: $tol,
                run: $body,
            }
        };
    }
    vec![
        case!("add", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[3, 4], &mut r), randn(&[3, 4], &mut r)], LINEAR_STEP, |t, v| t.add(v[0], v[1]))
        }),
        case!("sub", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[3, 4], &mut r), randn(&[3, 4], &mut r)], LINEAR_STEP, |t, v| t.sub(v[0], v[1]))
        }),
        case!("mul", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[3, 4], &mut r), randn(&[3, 4], &mut r)], LINEAR_STEP, |t, v| t.mul(v[0], v[1]))
        }),
        case!("scalar_ops", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[5], &mut r)], LINEAR_STEP, |t, v| {
                let a = t.scalar_mul(v[0], -1.7)?;
                let b = t.add_scalar(a, 0.3)?;
                t.rsub_scalar(b, 2.0)
            })
        }),
        case!("broadcast", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[], &mut r)], LINEAR_STEP, |t, v| t.broadcast(v[0], &[2, 3]))
        }),
        case!("channel_bias", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![img(&mut r, 3, 4), randn(&[3], &mut r)], LINEAR_STEP, |t, v| t.channel_bias(v[0], v[1]))
        }),
        case!("channel_bias_batched", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![img(&mut r, 3, 4), randn(&[2, 3], &mut r)], LINEAR_STEP, |t, v| t.channel_bias(v[0], v[1]))
        }),
        case!("sum", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[4, 3], &mut r)], LINEAR_STEP, |t, v| t.sum(v[0]))
        }),
        case!("mean", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[4, 3], &mut r)], LINEAR_STEP, |t, v| t.mean(v[0]))
        }),
        case!("square", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[6], &mut r)], LINEAR_STEP, |t, v| t.square(v[0]))
        }),
        case!("mse", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[2, 5], &mut r), randn(&[2, 5], &mut r)], LINEAR_STEP, |t, v| t.mse(v[0], v[1]))
        }),
        case!("reshape_transpose", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[2, 3, 4], &mut r)], LINEAR_STEP, |t, v| {
                let a = t.transpose_last2(v[0])?;
                t.reshape(a, &[8, 3])
            })
        }),
        case!("concat_slice", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![img(&mut r, 2, 3), img(&mut r, 3, 3)], LINEAR_STEP, |t, v| {
                let c = t.concat_channel(&[v[0], v[1]])?;
                t.slice_channel(c, 1, 3)
            })
        }),
        case!("matmul", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[2, 3, 4], &mut r), randn(&[2, 4, 5], &mut r)], LINEAR_STEP, |t, v| t.matmul(v[0], v[1]))
        }),
        case!("conv2d", LINEAR_TOL, |s| {
            let mut r = rng(s);
            let x = randn(&[1, 2, 5, 5], &mut r);
            check_fn(s, vec![x, randn(&[3, 2, 3, 3], &mut r)], LINEAR_STEP, |t, v| t.conv2d(v[0], v[1], 1, 1))
        }),
        case!("conv2d_stride2", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![img(&mut r, 2, 6), randn(&[3, 2, 3, 3], &mut r)], LINEAR_STEP, |t, v| t.conv2d(v[0], v[1], 2, 1))
        }),
        case!("conv_transpose2d", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![img(&mut r, 3, 3), randn(&[3, 2, 3, 3], &mut r)], LINEAR_STEP, |t, v| {
                t.conv_transpose2d(v[0], v[1], 2, 1, 1)
            })
        }),
        case!("leaky_relu", LINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![away_from_zero(&[8], &mut r)], LINEAR_STEP, |t, v| t.leaky_relu(v[0], 0.01))
        }),
        case!("sigmoid", NONLINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[8], &mut r)], NONLINEAR_STEP, |t, v| t.sigmoid(v[0]))
        }),
        case!("tanh", NONLINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[8], &mut r)], NONLINEAR_STEP, |t, v| t.tanh(v[0]))
        }),
        case!("sqrt", NONLINEAR_TOL, |s| {
            let mut r = rng(s);
            let x = randn(&[8], &mut r).map(|v| 0.5 + v.abs());
            check_fn(s, vec![x], NONLINEAR_STEP, |t, v| t.sqrt(v[0]))
        }),
        case!("group_norm", NONLINEAR_TOL, |s| {
            let mut r = rng(s);
            let args = vec![img(&mut r, 4, 3), randn(&[4], &mut r), randn(&[4], &mut r)];
            check_fn(s, args, NONLINEAR_STEP, |t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5))
        }),
        case!("softmax", NONLINEAR_TOL, |s| {
            let mut r = rng(s);
            check_fn(s, vec![randn(&[3, 5], &mut r)], NONLINEAR_STEP, |t, v| t.softmax_last_axis(v[0]))
        }),
        case!("block.conv", NONLINEAR_TOL, |s| {
            let x = img(&mut rng(s), 2, 5);
            check_block(s, |b| Conv::new(b, "c", 2, 3, 3, 1), vec![x], 8, |blk, g, xs| blk.forward(g, xs[0]))
        }),
        case!("block.conv_transpose", NONLINEAR_TOL, |s| {
            let x = img(&mut rng(s), 3, 3);
            check_block(s, |b| ConvTranspose::new(b, "u", 3, 2), vec![x], 8, |blk, g, xs| blk.forward(g, xs[0]))
        }),
        case!("block.group_norm", NONLINEAR_TOL, |s| {
            let x = img(&mut rng(s), 8, 3);
            check_block(s, |b| GroupNorm::new(b, "n", 8), vec![x], 8, |blk, g, xs| blk.forward(g, xs[0]))
        }),
        case!("block.linear", NONLINEAR_TOL, |s| {
            let x = randn(&[2, 5], &mut rng(s));
            check_block(s, |b| Linear::new(b, "l", 5, 3), vec![x], 8, |blk, g, xs| blk.forward(g, xs[0]))
        }),
        case!("block.resblock", NONLINEAR_TOL, |s| {
            let mut r = rng(s);
            let x = img(&mut r, 4, 4);
            let pe = randn(&[1, 6], &mut r);
            check_block(s, |b| ResBlock::new(b, "r", 4, 6, 3, Some(6)), vec![x, pe], 4, |blk, g, xs| {
                blk.forward(g, xs[0], Some(xs[1]))
            })
        }),
        case!("block.conv_gru", NONLINEAR_TOL, |s| {
            let mut r = rng(s);
            let (x, h) = (img(&mut r, 2, 4), img(&mut r, 3, 4));
            check_block(s, |b| ConvGru::new(b, "g", 2, 3, 3), vec![x, h], 4, |blk, g, xs| blk.forward(g, xs[0], xs[1]))
        }),
        case!("block.linear_attention", NONLINEAR_TOL, |s| {
            let x = img(&mut rng(s), 4, 4);
            check_block(s, |b| LinearAttention::new(b, "a", 4, 2, 4), vec![x], 4, |blk, g, xs| blk.forward(g, xs[0]))
        }),
        case!("loss.denoising", NONLINEAR_TOL, full_loss_case),
    ]
}

/// Run every gradient case over `seeds` seeds; one record per case.
pub fn gradient_suite(seeds: u64) -> Vec<CheckRecord> {
    gradient_cases()
        .into_iter()
        .map(|c| {
            let (res, elapsed) = timed(|| (0..seeds).map(|s| (c.run)(s)).try_fold(0.0f64, |w, e| e.map(|e| w.max(e))));
            let name = format!("grad.{}", c.name);
            match res {
                Ok(worst) => CheckRecord::new(name, worst, c.tolerance, seeds as usize, elapsed),
                Err(e) => CheckRecord::failed(name, e.to_string(), elapsed),
            }
        })
        .collect()
}

// ---- schedule ---------------------------------------------------------------

/// Cosine-schedule invariants for `N ∈ {10, 100, 1600}`. `tamper` replaces
/// one `β_n` in the N = 100 schedule after construction.
pub fn schedule_checks(tamper: Option<(usize, f64)>) -> Vec<CheckRecord> {
    [10usize, 100, 1600]
        .into_iter()
        .map(|steps| {
            let name = format!("schedule.cosine_n{steps}");
            let (res, elapsed) = timed(|| -> Result<Result<(), ScheduleViolation>> {
                let mut sched = NoiseSchedule::cosine(steps, DEFAULT_COSINE_OFFSET)?;
                if let (Some((n, beta)), 100) = (tamper, steps) {
                    sched.tamper_beta(n, beta);
                }
                Ok(sched.validate())
            });
            match res {
                Ok(Ok(())) => CheckRecord::new(name, 0.0, 0.0, steps, elapsed),
                Ok(Err(v)) => CheckRecord::failed(name, format!("schedule invariant violated: {v}"), elapsed),
                Err(e) => CheckRecord::failed(name, e.to_string(), elapsed),
            }
        })
        .collect()
}

// ---- variational-bound identities -------------------------------------------

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Posterior mean from `(y_n, y_0)` versus from `(y_n, ε)`, and the exact
/// mid term versus its closed-form weight, over random `(N, n, y_0, ε)`.
pub fn bound_identity_checks(cases: usize, seed: u64) -> Vec<CheckRecord> {
    let mut r = rng(seed);
    let scheds: Vec<NoiseSchedule> = [10, 100, 1600]
        .into_iter()
        .map(|n| NoiseSchedule::cosine(n, DEFAULT_COSINE_OFFSET).expect("valid steps"))
        .collect();
    let (mut worst_mean, mut worst_mid) = (0.0f64, 0.0f64);
    let (res, elapsed) = timed(|| -> Result<()> {
        for i in 0..cases {
            let sched = &scheds[i % scheds.len()];
            let n = r.random_range(2..=sched.steps());
            let y0 = randn(&[3, 4, 4], &mut r);
            let eps = randn(&[3, 4, 4], &mut r);
            let cand = randn(&[3, 4, 4], &mut r);
            let yn = q_sample(&y0, n, &eps, sched)?;
            let a = posterior_mean(&yn, &y0, n, sched)?;
            let b = posterior_mean_from_eps(&yn, &eps, n, sched)?;
            for (x, y) in a.data().iter().zip(b.data()) {
                worst_mean = worst_mean.max((x - y).abs() / y.abs().max(1.0));
            }
            let exact = elbo_mid_term(&y0, &eps, &cand, n, sched)?;
            let weighted = elbo_mid_weight(n, sched)? * eps.sub(&cand)?.sum_sq();
            worst_mid = worst_mid.max(rel(exact, weighted));
        }
        Ok(())
    });
    match res {
        Ok(()) => vec![
            CheckRecord::new("bound.posterior_mean_eps_form", worst_mean, 1e-5, cases, elapsed),
            CheckRecord::new("bound.mid_term_weight", worst_mid, 1e-5, cases, elapsed),
        ],
        Err(e) => vec![CheckRecord::failed("bound.identities", e.to_string(), elapsed)],
    }
}

// ---- planted oracle ---------------------------------------------------------

/// A model that knows the future. The transform returns half the last
/// observed frame; the denoiser returns the planted noise when one is
/// given, otherwise the exact `ε` that explains `y_n` given the planted
/// frame: `(y_n - √ᾱ_n·y_0) / √(1-ᾱ_n)`.
pub struct PlantedOracle<T: Real> {
    pub frame_shape: Vec<usize>,
    pub context_len: usize,
    /// `[B, C, H, W]` per future frame.
    pub future: Vec<Tensor<T>>,
    pub planted_eps: Option<Vec<Tensor<T>>>,
    pub residual: ResidualConfig,
    pub sched: NoiseSchedule,
}

impl<T: Real> PlantedOracle<T> {
    fn future_index(&self, state: &StateVars) -> Result<usize> {
        state
            .frames_seen
            .checked_sub(self.context_len)
            .filter(|&t| t < self.future.len())
            .ok_or_else(|| Error::invalid(format!("oracle has no planted frame after {} observations", state.frames_seen)))
    }
}

impl<T: Real> DiffusionModel<T> for PlantedOracle<T> {
    fn frame_shape(&self) -> &[usize] {
        &self.frame_shape
    }

    fn init_state(&self, g: &mut Graph<T>, batch: usize) -> Result<StateVars> {
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.frame_shape);
        Ok(StateVars {
            hidden: vec![g.tape.constant(Tensor::zeros(shape))],
            frames_seen: 0,
        })
    }

    fn observe(&self, _g: &mut Graph<T>, state: &StateVars, frame: Var) -> Result<StateVars> {
        Ok(StateVars {
            hidden: vec![frame],
            frames_seen: state.frames_seen + 1,
        })
    }

    fn predict_mean(&self, g: &mut Graph<T>, state: &StateVars) -> Result<Var> {
        if state.frames_seen == 0 {
            return Err(Error::EmptyContext);
        }
        g.tape.scalar_mul(state.hidden[0], T::from_f64(0.5))
    }

    fn predict_noise(&self, g: &mut Graph<T>, state: &StateVars, yn: Var, n: usize) -> Result<Var> {
        let t = self.future_index(state)?;
        if let Some(eps) = &self.planted_eps {
            return Ok(g.tape.constant(eps[t].clone()));
        }
        let mu = match self.residual.mode() {
            FlowMode::Rvd => {
                let m = self.predict_mean(g, state)?;
                g.tape.value(m).clone()
            }
            FlowMode::Vd => Tensor::zeros(g.tape.shape(yn)),
        };
        let y0 = to_residual(&self.future[t], &mu, &self.residual)?;
        let ab = self.sched.alpha_bar(n);
        let eps = g
            .tape
            .value(yn)
            .lincomb(T::one(), &y0, T::from_f64(-ab.sqrt()))?
            .scale(T::from_f64(1.0 / (1.0 - ab).sqrt()));
        Ok(g.tape.constant(eps))
    }
}

/// Generation with the exact-ε oracle returns the planted frames, and the
/// training loss with planted noise is exactly zero.
pub fn oracle_checks(variance_mode: VarianceMode, seed: u64) -> Vec<CheckRecord> {
    let mut out = Vec::new();
    for (steps, mode) in [(1usize, FlowMode::Rvd), (1, FlowMode::Vd), (10, FlowMode::Rvd)] {
        let name = format!("oracle.recovery_n{steps}_{}", mode.as_str());
        let (res, elapsed) = timed(|| -> Result<f64> {
            let mut r = rng(seed ^ steps as u64);
            let sched = NoiseSchedule::cosine(steps, DEFAULT_COSINE_OFFSET)?;
            let residual = ResidualConfig::new(2.0, mode)?;
            let (p, q, s) = (2, 3, 2);
            let frame = [1usize, 4, 4];
            let planted: Vec<Tensor<f64>> = (0..q).map(|_| randn(&frame, &mut r).map(f64::tanh)).collect();
            let oracle = PlantedOracle {
                frame_shape: frame.to_vec(),
                context_len: p,
                future: planted.iter().map(|f| Tensor::stack(&vec![f.clone(); s])).collect::<Result<_>>()?,
                planted_eps: None,
                residual,
                sched: sched.clone(),
            };
            let ctx = randn(&[p, 1, 4, 4], &mut r).map(f64::tanh);
            let cfg = SampleConfig {
                future_len: q,
                residual,
                variance_mode,
            };
            let videos = generate(&oracle, &ParamStore::default(), &ctx, &sched, &cfg, &[seed, seed + 1])?;
            let mut worst = 0.0f64;
            for v in &videos {
                for (t, want) in planted.iter().enumerate() {
                    let got = v.index_axis0(t)?;
                    worst = got.data().iter().zip(want.data()).fold(worst, |w, (a, b)| w.max((a - b).abs()));
                }
            }
            Ok(worst)
        });
        out.push(match res {
            Ok(w) => CheckRecord::new(name, w, 1e-5, 1, elapsed),
            Err(e) => CheckRecord::failed(name, e.to_string(), elapsed),
        });
    }

    let (res, elapsed) = timed(|| -> Result<(f64, usize)> {
        let mut r = rng(seed ^ 0xF00D);
        let mut worst = 0.0f64;
        let mut cases = 0;
        for steps in [1usize, 10, 100] {
            let sched = NoiseSchedule::cosine(steps, DEFAULT_COSINE_OFFSET)?;
            for mode in [FlowMode::Rvd, FlowMode::Vd] {
                let (p, q, b) = (2, 2, 3);
                let shape = [b, 1, 4, 4];
                let frames: Vec<Tensor<f64>> = (0..p + q).map(|_| randn(&shape, &mut r).map(f64::tanh)).collect();
                let draws = StepDraws::<f64>::sample(&mut r, &sched, q, &shape);
                let oracle = PlantedOracle {
                    frame_shape: shape[1..].to_vec(),
                    context_len: p,
                    future: frames[p..].to_vec(),
                    planted_eps: Some(draws.eps.clone()),
                    residual: ResidualConfig::new(2.0, mode)?,
                    sched: sched.clone(),
                };
                let mut tape = Tape::new();
                let fs: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
                let mut g = Graph::new(&mut tape, &[]);
                let l = denoising_loss(&oracle, &mut g, &fs, p, &draws, &sched, &oracle.residual)?;
                worst = worst.max(tape.value(l).data()[0].abs());
                cases += 1;
            }
        }
        Ok((worst, cases))
    });
    out.push(match res {
        Ok((w, n)) => CheckRecord::new("oracle.training_loss_zero", w, 0.0, n, elapsed),
        Err(e) => CheckRecord::failed("oracle.training_loss_zero", e.to_string(), elapsed),
    });
    out
}

// ---- CRPS -------------------------------------------------------------------

/// `E|X - x| - ½ E|X - X'|` over the empirical ensemble, as an exact
/// rational `num / (2S²)` rounded once.
pub fn crps_energy_form(samples: &[u8], obs: u8) -> f64 {
    let s = samples.len() as i64;
    let d = |a: u8, b: u8| (a as i64 - b as i64).abs();
    let first: i64 = samples.iter().map(|&x| d(x, obs)).sum();
    let second: i64 = samples.iter().flat_map(|&a| samples.iter().map(move |&b| d(a, b))).sum();
    (2 * s * first - second) as f64 / (2 * s * s) as f64
}

/// Exhaustive ensembles of size ≤ 4 on `0..8` (exact equality) and random
/// size-8 ensembles on the full grid (absolute tolerance `1e-9`).
pub fn crps_checks(random_cases: usize, seed: u64) -> Vec<CheckRecord> {
    let (res, elapsed) = timed(|| -> Result<(usize, usize)> {
        let mut mismatches = 0;
        let mut cases = 0;
        for s in 1..=4u32 {
            for code in 0..8usize.pow(s) {
                let ens: Vec<u8> = (0..s).map(|i| (code / 8usize.pow(i) % 8) as u8).collect();
                for obs in 0..8u8 {
                    if crps_pixel(&ens, obs)? != crps_energy_form(&ens, obs) {
                        mismatches += 1;
                    }
                    cases += 1;
                }
            }
        }
        Ok((mismatches, cases))
    });
    let exhaustive = match res {
        Ok((m, n)) => CheckRecord::new("crps.energy_form_exhaustive", m as f64, 0.0, n, elapsed)
            .with_detail(format!("{m} mismatches")),
        Err(e) => CheckRecord::failed("crps.energy_form_exhaustive", e.to_string(), elapsed),
    };
    let mut r = rng(seed);
    let (res, elapsed) = timed(|| -> Result<f64> {
        let mut worst = 0.0f64;
        for _ in 0..random_cases {
            let ens: Vec<u8> = (0..8).map(|_| r.random()).collect();
            let obs: u8 = r.random();
            worst = worst.max((crps_pixel(&ens, obs)? - crps_energy_form(&ens, obs)).abs());
        }
        Ok(worst)
    });
    let random = match res {
        Ok(w) => CheckRecord::new("crps.energy_form_random", w, 1e-9, random_cases, elapsed),
        Err(e) => CheckRecord::failed("crps.energy_form_random", e.to_string(), elapsed),
    };
    vec![exhaustive, random]
}

// ---- Monte Carlo ------------------------------------------------------------

/// Moments of `n` iterated single steps from a fixed `y_0` against the
/// closed-form marginal, for `n ∈ {1, N/2, N}`. `value` is the largest
/// deviation in standard errors.
pub fn monte_carlo_checks(steps: usize, draws: usize, seed: u64) -> Vec<CheckRecord> {
    let y0_value = 0.7;
    let sched = match NoiseSchedule::cosine(steps, DEFAULT_COSINE_OFFSET) {
        Ok(s) => s,
        Err(e) => return vec![CheckRecord::failed("mc.moments", e.to_string(), Duration::ZERO)],
    };
    let mut r = rng(seed);
    let targets = [1, steps / 2, steps];
    let (res, elapsed) = timed(|| -> Result<Vec<(usize, f64, f64)>> {
        let mut y = Tensor::<f64>::full([draws], y0_value);
        let mut out = Vec::new();
        for n in 1..=steps {
            let z = randn(&[draws], &mut r);
            y = diffuse_step(&y, n, &z, &sched)?;
            if targets.contains(&n) {
                let m = draws as f64;
                let mean = y.sum() / m;
                let c2 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
                let c4 = y.data().iter().map(|v| (v - mean).powi(4)).sum::<f64>() / m;
                let want_mean = sched.alpha_bar(n).sqrt() * y0_value;
                let want_var = 1.0 - sched.alpha_bar(n);
                let se_mean = (c2 / m).sqrt();
                let se_var = ((c4 - c2 * c2) / m).sqrt();
                out.push((n, (mean - want_mean).abs() / se_mean, (c2 - want_var).abs() / se_var));
            }
        }
        Ok(out)
    });
    match res {
        Ok(v) => v
            .into_iter()
            .flat_map(|(n, zm, zv)| {
                [
                    CheckRecord::new(format!("mc.mean_n{n}"), zm, 3.0, draws, elapsed),
                    CheckRecord::new(format!("mc.variance_n{n}"), zv, 3.0, draws, elapsed),
                ]
            })
            .collect(),
        Err(e) => vec![CheckRecord::failed("mc.moments", e.to_string(), elapsed)],
    }
}

// ---- driver -----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SelfcheckOptions {
    pub variance_mode: VarianceMode,
    pub grad_seeds: u64,
    pub seed: u64,
    /// Overwrite `β_n` in the N = 100 schedule.
    pub tamper_beta: Option<(usize, f64)>,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            variance_mode: VarianceMode::SqrtPosterior,
            grad_seeds: 20,
            seed: 0,
            tamper_beta: None,
        }
    }
}

/// Every check, in order; `on_record` sees each record as it completes.
pub fn run_selfcheck(opts: &SelfcheckOptions, mut on_record: impl FnMut(&CheckRecord)) -> Vec<CheckRecord> {
    let mut all = Vec::new();
    let mut emit = |recs: Vec<CheckRecord>| {
        for r in recs {
            on_record(&r);
            all.push(r);
        }
    };
    emit(schedule_checks(opts.tamper_beta));
    emit(bound_identity_checks(120, opts.seed));
    emit(crps_checks(1000, opts.seed));
    emit(monte_carlo_checks(100, 10_000, opts.seed));
    emit(oracle_checks(opts.variance_mode, opts.seed));
    emit(gradient_suite(opts.grad_seeds));
    all
}

/// Parameter count of a profile's network for a frame of `channels` channels.
pub fn profile_param_count(profile: Profile, channels: usize) -> Result<usize> {
    let cfg = BlockConfig::profile(profile, channels);
    let s = profile.frame_size();
    Ok(RvdNet::build(&cfg, &[channels, s, s], 0)?.1.num_scalars())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_form_examples() {
        assert_eq!(crps_energy_form(&[0, 2], 1), 0.5);
        assert_eq!(crps_energy_form(&[5], 9), 4.0);
        assert_eq!(crps_energy_form(&[3, 3, 3], 3), 0.0);
    }

    #[test]
    fn tampered_schedule_is_named() {
        let recs = schedule_checks(Some((10, 0.5)));
        let bad: Vec<_> = recs.iter().filter(|r| !r.passed).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].name, "schedule.cosine_n100");
        assert!(bad[0].detail.contains("schedule invariant"), "{}", bad[0].detail);
    }

    #[test]
    fn quick_checks_pass() {
        for r in bound_identity_checks(12, 1)
            .into_iter()
            .chain(crps_checks(50, 1))
            .chain(oracle_checks(VarianceMode::AsWritten, 3))
        {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn gradient_cases_pass_one_seed() {
        for c in gradient_cases() {
            let e = (c.run)(0).unwrap_or_else(|e| panic!("{}: {e}", c.name));
            assert!(e <= c.tolerance, "{}: {e}", c.name);
        }
    }
}
