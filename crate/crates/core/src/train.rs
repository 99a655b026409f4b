//! Teacher-forced training and autoregressive generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::diffusion::{reverse_step, NoiseSchedule, VarianceMode};
use crate::error::{Error, Result};
use crate::nn::{DiffusionModel, Graph, ParamStore, RvdNet};
use crate::residual::{from_residual, to_residual_var, FlowMode, ResidualConfig};
use crate::tensor::{Real, Tensor};
use crate::tensor_file::TensorSet;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Context frames `p`.
    pub context_len: usize,
    /// Predicted frames `q`.
    pub future_len: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub residual: ResidualConfig,
}

impl TrainConfig {
    /// Defaults for 16×16 toy videos.
    pub fn desk() -> Self {
        Self {
            context_len: 2,
            future_len: 6,
            batch_size: 2,
            lr_initial: 1e-3,
            lr_final: 4e-4,
            max_steps: 2000,
            seed: 0,
            residual: ResidualConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 || self.future_len == 0 || self.batch_size == 0 {
            return Err(Error::invalid("context_len, future_len and batch_size must be >= 1"));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr_initial) {
            return Err(Error::invalid(format!(
                "need 0 < lr_final <= lr_initial, got {} and {}",
                self.lr_final, self.lr_initial
            )));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.context_len + self.future_len
    }
}

/// Linear ramp from `lr_initial` to `lr_final` over `max_steps`, then flat.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.max_steps == 0 || step >= cfg.max_steps {
        return cfg.lr_final;
    }
    let f = step as f64 / cfg.max_steps as f64;
    cfg.lr_initial + (cfg.lr_final - cfg.lr_initial) * f
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. `grads[i]` is `None` for frozen
    /// parameters; a trainable parameter without a gradient is an error.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], trainable: &[bool], lr: f64) -> Result<()> {
        if grads.len() != params.len() || trainable.len() != params.len() {
            return Err(Error::invalid("gradient list does not match the parameter store"));
        }
        for (i, name) in params.names().iter().enumerate() {
            if trainable[i] && grads[i].is_none() {
                return Err(Error::MissingGrad(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref().filter(|_| trainable[i]) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let upd = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w = (*w as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

/// Random quantities of one training step, drawn up front.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws<T: Real> {
    /// Diffusion step shared by the batch, in `1..=N`.
    pub n: usize,
    /// One `[B, C, H, W]` noise tensor per future frame.
    pub eps: Vec<Tensor<T>>,
}

impl<T: Real> StepDraws<T> {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, sched: &NoiseSchedule, future_len: usize, shape: &[usize]) -> Self {
        let n = sched.sample_step(rng);
        let eps = (0..future_len).map(|_| Tensor::randn(shape, rng)).collect();
        Self { n, eps }
    }
}

/// Mean over the `q` future frames of `mean((ε - f_θ(y_n, n, x^{<t}))²)`
/// with `y_n = √ᾱ_n·y_0 + √(1-ᾱ_n)·ε` and `y_0 = (x^t - μ_φ(x^{<t}))/σ`.
///
/// `frames` holds `p + q` ground-truth `[B, C, H, W]` nodes; every
/// prediction is conditioned on true past frames only.
pub fn denoising_loss<T: Real, M: DiffusionModel<T> + ?Sized>(
    model: &M,
    g: &mut Graph<T>,
    frames: &[Var],
    context_len: usize,
    draws: &StepDraws<T>,
    sched: &NoiseSchedule,
    res: &ResidualConfig,
) -> Result<Var> {
    let q = draws.eps.len();
    if context_len == 0 || q == 0 || frames.len() != context_len + q {
        return Err(Error::invalid(format!(
            "need {} frames ({context_len} context + {q} future), got {}",
            context_len + q,
            frames.len()
        )));
    }
    let batch = g.tape.shape(frames[0])[0];
    let ab = sched.alpha_bar(draws.n);
    let (ca, cb) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));

    let mut state = model.init_state(g, batch)?;
    for &f in &frames[..context_len] {
        state = model.observe(g, &state, f)?;
    }
    let mut total: Option<Var> = None;
    for (j, eps) in draws.eps.iter().enumerate() {
        let x = frames[context_len + j];
        let y0 = match res.mode() {
            FlowMode::Rvd => {
                let mu = model.predict_mean(g, &state)?;
                to_residual_var(g.tape, x, mu, res)?
            }
            FlowMode::Vd => x,
        };
        let eps = g.tape.constant(eps.clone());
        let a = g.tape.scalar_mul(y0, ca)?;
        let b = g.tape.scalar_mul(eps, cb)?;
        let yn = g.tape.add(a, b)?;
        let eps_hat = model.predict_noise(g, &state, yn, draws.n)?;
        let l = g.tape.mse(eps_hat, eps)?;
        total = Some(match total {
            Some(acc) => g.tape.add(acc, l)?,
            None => l,
        });
        if j + 1 < q {
            state = model.observe(g, &state, x)?;
        }
    }
    g.tape.scalar_mul(total.expect("q >= 1"), T::from_f64(1.0 / q as f64))
}

/// Which parameters a mode trains: the transform is unused in VD mode.
pub fn trainable_mask(params: &ParamStore<f32>, mode: FlowMode) -> Vec<bool> {
    params
        .names()
        .iter()
        .map(|n| mode == FlowMode::Rvd || !n.starts_with("transform."))
        .collect()
}

/// Stack frame `t` of the selected windows into `[B, C, H, W]`.
fn batch_frame(windows: &[Tensor<f32>], idx: &[usize], t: usize) -> Result<Tensor<f32>> {
    let frames: Vec<Tensor<f32>> = idx.iter().map(|&i| windows[i].index_axis0(t)).collect::<Result<_>>()?;
    Tensor::stack(&frames)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Owns the network, its parameters, the optimizer and the data stream.
#[derive(Clone)]
pub struct Trainer {
    pub net: RvdNet,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    pub sched: NoiseSchedule,
    pub cfg: TrainConfig,
    windows: Vec<Tensor<f32>>,
    trainable: Vec<bool>,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// `windows` are `[p + q, C, H, W]` training clips.
    pub fn new(net: RvdNet, params: ParamStore<f32>, sched: NoiseSchedule, cfg: TrainConfig, windows: Vec<Tensor<f32>>) -> Result<Self> {
        cfg.validate()?;
        if windows.is_empty() {
            return Err(Error::invalid("no training windows"));
        }
        let frame = DiffusionModel::<f32>::frame_shape(&net).to_vec();
        for w in &windows {
            if w.shape().len() != 4 || w.shape()[0] != cfg.window_len() || w.shape()[1..] != frame[..] {
                let mut want = vec![cfg.window_len()];
                want.extend_from_slice(&frame);
                return Err(Error::shape("training window", w.shape(), &want));
            }
        }
        let trainable = trainable_mask(&params, cfg.residual.mode());
        Ok(Self {
            adam: Adam::new(&params),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            net,
            params,
            sched,
            cfg,
            windows,
            trainable,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// One optimizer step on a freshly drawn batch. A non-finite loss or
    /// gradient aborts with a numeric error before parameters change.
    pub fn step(&mut self) -> Result<StepStats> {
        let (p, q, bsz) = (self.cfg.context_len, self.cfg.future_len, self.cfg.batch_size);
        let idx: Vec<usize> = (0..bsz).map(|_| self.rng.random_range(0..self.windows.len())).collect();
        let mut shape = vec![bsz];
        shape.extend_from_slice(DiffusionModel::<f32>::frame_shape(&self.net));
        let draws = StepDraws::<f32>::sample(&mut self.rng, &self.sched, q, &shape);

        let mut tape = Tape::<f32>::new();
        let pv: Vec<Var> = self
            .params
            .values()
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| tape.leaf(v.clone(), t))
            .collect();
        let frames: Vec<Var> = (0..p + q)
            .map(|t| batch_frame(&self.windows, &idx, t).map(|f| tape.constant(f)))
            .collect::<Result<_>>()?;
        let mut g = Graph::new(&mut tape, &pv);
        let loss = denoising_loss(&self.net, &mut g, &frames, p, &draws, &self.sched, &self.cfg.residual)?;
        let loss_value = tape.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Option<Tensor<f32>>> = pv
            .iter()
            .zip(&self.trainable)
            .map(|(&v, &t)| if t { grads.take(v) } else { None })
            .collect();
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite { op: "gradient" });
        }
        let lr = lr_schedule(self.adam.step, &self.cfg);
        self.adam.update(&mut self.params, &grads, &self.trainable, lr)?;
        Ok(StepStats {
            step: self.adam.step,
            loss: loss_value,
            lr,
        })
    }

    /// Parameters, optimizer moments, step counter and RNG position.
    pub fn checkpoint(&self) -> TensorSet {
        let mut set = TensorSet::new();
        self.params.export(&mut set, "param/");
        for (i, name) in self.params.names().iter().enumerate() {
            set.insert(format!("adam.m/{name}"), self.adam.m[i].clone());
            set.insert(format!("adam.v/{name}"), self.adam.v[i].clone());
        }
        set.set_meta("step", self.adam.step);
        set.set_meta("rng_word_pos", self.rng.get_word_pos());
        set.set_meta("seed", self.cfg.seed);
        set.set_meta("steps", self.sched.steps());
        set.set_meta("mode", self.cfg.residual.mode().as_str());
        set.set_meta("sigma", self.cfg.residual.sigma());
        set
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn restore(&mut self, set: &TensorSet) -> Result<()> {
        self.params.import(set, "param/")?;
        for (i, name) in self.params.names().iter().enumerate() {
            for (prefix, store) in [("adam.m/", &mut self.adam.m), ("adam.v/", &mut self.adam.v)] {
                let t = set.get(&format!("{prefix}{name}"))?;
                if t.shape() != store[i].shape() {
                    return Err(Error::shape("checkpoint", store[i].shape(), t.shape()));
                }
                store[i] = t.clone();
            }
        }
        let parse = |k: &str| -> Result<u128> {
            set.meta(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("metadata `{k}` is not an integer")))
        };
        self.adam.step = parse("step")? as u64;
        self.rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        self.rng.set_word_pos(parse("rng_word_pos")?);
        Ok(())
    }
}

/// Sampler settings for [`generate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub future_len: usize,
    pub residual: ResidualConfig,
    pub variance_mode: VarianceMode,
}

/// Autoregressive ancestral sampling, one video per seed.
///
/// `context` is `[p, C, H, W]`. Each returned video is `[q, C, H, W]` and
/// unclamped; samples are batched, but each draws its noise from its own
/// `ChaCha8Rng::seed_from_u64(seed)`, so a sample does not depend on which
/// other seeds are in the batch.
pub fn generate<T: Real, M: DiffusionModel<T> + ?Sized>(
    model: &M,
    params: &ParamStore<T>,
    context: &Tensor<T>,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
    seeds: &[u64],
) -> Result<Vec<Tensor<T>>> {
    let frame = model.frame_shape().to_vec();
    let cs = context.shape();
    if cs.len() != 4 || cs[0] == 0 || cs[1..] != frame[..] {
        return Err(Error::invalid(format!("context must be [p, {frame:?}...], got {cs:?}")));
    }
    if seeds.is_empty() || cfg.future_len == 0 {
        return Err(Error::invalid("generate needs at least one seed and one future frame"));
    }
    let s = seeds.len();
    let per = frame.iter().product::<usize>();
    let mut shape = vec![s];
    shape.extend_from_slice(&frame);
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&sd| ChaCha8Rng::seed_from_u64(sd)).collect();
    let noise = |rngs: &mut [ChaCha8Rng]| -> Tensor<T> {
        let data = rngs.iter_mut().flat_map(|r| (0..per).map(|_| T::sample_normal(r)).collect::<Vec<_>>()).collect();
        Tensor::new(shape.clone(), data).expect("noise shape")
    };
    let repeat = |f: &Tensor<T>| -> Result<Tensor<T>> { Tensor::stack(&vec![f.clone(); s]) };

    let mut tape = Tape::<T>::new();
    let pv = params.bind(&mut tape, false);
    let mut g = Graph::new(&mut tape, &pv);
    let mut state = model.init_state(&mut g, s)?;
    for t in 0..cs[0] {
        let f = g.tape.constant(repeat(&context.index_axis0(t)?)?);
        state = model.observe(&mut g, &state, f)?;
    }
    let zeros = Tensor::<T>::zeros(shape.clone());
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(cfg.future_len);
    for _ in 0..cfg.future_len {
        let mu = match cfg.residual.mode() {
            FlowMode::Rvd => {
                let m = model.predict_mean(&mut g, &state)?;
                g.tape.value(m).clone()
            }
            FlowMode::Vd => zeros.clone(),
        };
        let mut y = noise(&mut rngs);
        for n in (1..=sched.steps()).rev() {
            let mark = g.tape.len();
            let yv = g.tape.constant(y.clone());
            let eps_hat = model.predict_noise(&mut g, &state, yv, n)?;
            let eps_hat = g.tape.value(eps_hat).clone();
            g.tape.truncate(mark);
            let z = if n > 1 { noise(&mut rngs) } else { zeros.clone() };
            y = reverse_step(&y, &eps_hat, n, &z, sched, cfg.variance_mode)?;
        }
        let x = from_residual(&y, &mu, &cfg.residual)?;
        if !x.all_finite() {
            return Err(Error::NonFinite { op: "generate" });
        }
        let xv = g.tape.constant(x.clone());
        state = model.observe(&mut g, &state, xv)?;
        outputs.push(x);
    }
    // [q][S, C, H, W] -> S videos of [q, C, H, W]
    (0..s)
        .map(|i| {
            let frames: Vec<Tensor<T>> = outputs.iter().map(|o| o.index_axis0(i)).collect::<Result<_>>()?;
            Tensor::stack(&frames)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DEFAULT_COSINE_OFFSET;
    use crate::nn::{BlockConfig, Profile};

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr_initial: 5e-5,
            lr_final: 2e-5,
            max_steps: 100,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn lr_ramp() {
        let c = cfg();
        assert_eq!(lr_schedule(0, &c), 5e-5);
        assert!((lr_schedule(50, &c) - 3.5e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(100, &c), 2e-5);
        assert_eq!(lr_schedule(1000, &c), 2e-5);
    }

    fn scalar_store(w: f32) -> ParamStore<f32> {
        let mut b = crate::nn::Builder::new(0);
        b.constant("w".into(), &[1], w);
        b.finish()
    }

    #[test]
    fn adam_descends_and_converges() {
        let mut p = scalar_store(1.0);
        let mut adam = Adam::new(&p);
        let g = Some(Tensor::full([1], 2.0f32));
        adam.update(&mut p, &[g], &[true], 0.1).unwrap();
        assert!(p.values()[0].data()[0] < 1.0);

        let mut p = scalar_store(0.0);
        let mut adam = Adam::new(&p);
        for _ in 0..500 {
            let w = p.values()[0].data()[0];
            let g = Some(Tensor::full([1], 2.0 * (w - 3.0)));
            adam.update(&mut p, &[g], &[true], 0.1).unwrap();
        }
        assert!((p.values()[0].data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn adam_zero_gradient_and_missing_gradient() {
        let mut p = scalar_store(1.5);
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &[Some(Tensor::zeros([1]))], &[true], 0.1).unwrap();
        assert_eq!(p.values()[0].data()[0], 1.5);
        assert_eq!(adam.step, 1);
        let err = adam.update(&mut p, &[None], &[true], 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.lr_final = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.context_len = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn generate_shapes() {
        let (net, params) = RvdNet::build(&BlockConfig::profile(Profile::Desk, 1), &[1, 16, 16], 0).unwrap();
        let sched = NoiseSchedule::cosine(3, DEFAULT_COSINE_OFFSET).unwrap();
        let sc = SampleConfig {
            future_len: 2,
            residual: ResidualConfig::default(),
            variance_mode: VarianceMode::SqrtPosterior,
        };
        let ctx = Tensor::<f32>::zeros([2, 1, 16, 16]);
        let out = generate(&net, &params, &ctx, &sched, &sc, &[1, 2]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shape(), &[2, 1, 16, 16]);
        assert_ne!(out[0], out[1]);
        let alone = generate(&net, &params, &ctx, &sched, &sc, &[2]).unwrap();
        assert_eq!(alone[0], out[1]);
    }
}
