use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::blocks::{positional_encoding, Conv, ConvGru, ConvTranspose, GroupNorm, LinearAttention, ResBlock, LEAKY_SLOPE};
use crate::nn::config::BlockConfig;
use crate::nn::params::{Builder, Graph, ParamStore};
use crate::tensor::{Real, Tensor};

/// Recurrent hidden maps held as tape nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateVars {
    pub hidden: Vec<Var>,
    pub frames_seen: usize,
}

/// Recurrent hidden maps held as plain tensors (value semantics).
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T: Real> {
    pub hidden: Vec<Tensor<T>>,
    pub frames_seen: usize,
}

impl<T: Real> RecurrentState<T> {
    pub fn from_vars(tape: &Tape<T>, s: &StateVars) -> Self {
        Self {
            hidden: s.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
            frames_seen: s.frames_seen,
        }
    }

    pub fn to_vars(&self, tape: &mut Tape<T>) -> StateVars {
        StateVars {
            hidden: self.hidden.iter().map(|t| tape.constant(t.clone())).collect(),
            frames_seen: self.frames_seen,
        }
    }
}

/// The pieces of the generative model a training or sampling loop needs.
///
/// Frames and residuals are `[B, C, H, W]`. Implementations other than
/// [`RvdNet`] (oracles, call counters) are used by tests.
pub trait DiffusionModel<T: Real> {
    fn frame_shape(&self) -> &[usize];
    /// Fresh all-zero state for a batch.
    fn init_state(&self, g: &mut Graph<T>, batch: usize) -> Result<StateVars>;
    /// Advance every recurrent map with one more past frame.
    fn observe(&self, g: &mut Graph<T>, state: &StateVars, frame: Var) -> Result<StateVars>;
    /// Deterministic next-frame prediction `μ`.
    fn predict_mean(&self, g: &mut Graph<T>, state: &StateVars) -> Result<Var>;
    /// Noise estimate for `y_n` at diffusion step `n`.
    fn predict_noise(&self, g: &mut Graph<T>, state: &StateVars, yn: Var, n: usize) -> Result<Var>;
}

fn leaky<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.tape.leaky_relu(x, T::from_f64(LEAKY_SLOPE))
}

fn channels(cfg: &BlockConfig, mults: &[usize]) -> Vec<usize> {
    mults.iter().map(|m| m * cfg.channel_dim).collect()
}

#[derive(Clone, Debug)]
struct DownLevel {
    res0: ResBlock,
    res1: ResBlock,
    attn: LinearAttention,
    down: Option<Conv>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    res0: ResBlock,
    res1: ResBlock,
    attn: LinearAttention,
    up: Option<ConvTranspose>,
}

/// Conditional noise predictor `f_θ(y_n, n, x^{<t})`.
///
/// Past frames enter through an encoder pyramid whose level-`l` features
/// drive a ConvGRU; its hidden map is concatenated into the second residual
/// block of down level `l`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    chans: Vec<usize>,
    pe_dim: usize,
    in_conv: Conv,
    ctx_in: Conv,
    ctx_down: Vec<Conv>,
    ctx_gru: Vec<ConvGru>,
    down: Vec<DownLevel>,
    mid: (ResBlock, LinearAttention, ResBlock),
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_conv: Conv,
}

impl Denoiser {
    fn new(b: &mut Builder, cfg: &BlockConfig) -> Self {
        let chans = channels(cfg, &cfg.denoise_multipliers);
        let levels = chans.len();
        let (k, fc, pe) = (cfg.resblock_kernel, cfg.frame_channels, Some(cfg.pe_dim));
        let (heads, hd) = (cfg.attn_heads, cfg.attn_head_dim);
        let c0 = chans[0];

        let in_conv = Conv::new(b, "denoiser.in", fc, c0, k, 1);
        let ctx_in = Conv::new(b, "denoiser.ctx.in", fc, c0, k, 1);
        let ctx_down = (1..levels)
            .map(|l| Conv::new(b, &format!("denoiser.ctx.down{l}"), chans[l - 1], chans[l], 3, 2))
            .collect();
        let ctx_gru = (0..levels)
            .map(|l| ConvGru::new(b, &format!("denoiser.ctx.gru{l}"), chans[l], chans[l], cfg.gru_kernel))
            .collect();

        let mut down = Vec::with_capacity(levels);
        let mut cur = c0;
        for (l, &c) in chans.iter().enumerate() {
            let p = format!("denoiser.down{l}");
            down.push(DownLevel {
                res0: ResBlock::new(b, &format!("{p}.res0"), cur, c, k, pe),
                res1: ResBlock::new(b, &format!("{p}.res1"), 2 * c, c, k, pe),
                attn: LinearAttention::new(b, &format!("{p}.attn"), c, heads, hd),
                down: (l + 1 < levels).then(|| Conv::new(b, &format!("{p}.downsample"), c, c, 3, 2)),
            });
            cur = c;
        }
        let mid = (
            ResBlock::new(b, "denoiser.mid.res0", cur, cur, k, pe),
            LinearAttention::new(b, "denoiser.mid.attn", cur, heads, hd),
            ResBlock::new(b, "denoiser.mid.res1", cur, cur, k, pe),
        );
        let mut up = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let c = chans[l];
            let p = format!("denoiser.up{l}");
            up.push(UpLevel {
                res0: ResBlock::new(b, &format!("{p}.res0"), cur + c, c, k, pe),
                res1: ResBlock::new(b, &format!("{p}.res1"), c, c, k, pe),
                attn: LinearAttention::new(b, &format!("{p}.attn"), c, heads, hd),
                up: (l > 0).then(|| ConvTranspose::new(b, &format!("{p}.upsample"), c, c)),
            });
            cur = c;
        }
        Self {
            pe_dim: cfg.pe_dim,
            in_conv,
            ctx_in,
            ctx_down,
            ctx_gru,
            down,
            mid,
            up,
            out_norm: GroupNorm::new(b, "denoiser.out.norm", c0),
            out_conv: Conv::new(b, "denoiser.out.conv", c0, fc, k, 1),
            chans,
        }
    }

    fn state_shapes(&self, batch: usize, h: usize, w: usize) -> Vec<Vec<usize>> {
        self.chans
            .iter()
            .enumerate()
            .map(|(l, &c)| vec![batch, c, h >> l, w >> l])
            .collect()
    }

    fn observe<T: Real>(&self, g: &mut Graph<T>, hidden: &[Var], frame: Var) -> Result<Vec<Var>> {
        let e = self.ctx_in.forward(g, frame)?;
        let mut e = leaky(g, e)?;
        let mut out = Vec::with_capacity(hidden.len());
        for (l, gru) in self.ctx_gru.iter().enumerate() {
            if l > 0 {
                let d = self.ctx_down[l - 1].forward(g, e)?;
                e = leaky(g, d)?;
            }
            out.push(gru.forward(g, e, hidden[l])?);
        }
        Ok(out)
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, hidden: &[Var], yn: Var, n: usize) -> Result<Var> {
        let pe = positional_encoding::<T>(n, self.pe_dim)?.reshape([1, self.pe_dim])?;
        let pe = Some(g.tape.constant(pe));
        let mut h = self.in_conv.forward(g, yn)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, lvl) in self.down.iter().enumerate() {
            h = lvl.res0.forward(g, h, pe)?;
            let hc = g.tape.concat_channel(&[h, hidden[l]])?;
            h = lvl.res1.forward(g, hc, pe)?;
            h = lvl.attn.forward(g, h)?;
            skips.push(h);
            if let Some(d) = &lvl.down {
                h = d.forward(g, h)?;
            }
        }
        h = self.mid.0.forward(g, h, pe)?;
        h = self.mid.1.forward(g, h)?;
        h = self.mid.2.forward(g, h, pe)?;
        for lvl in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let hc = g.tape.concat_channel(&[h, skip])?;
            h = lvl.res0.forward(g, hc, pe)?;
            h = lvl.res1.forward(g, h, pe)?;
            h = lvl.attn.forward(g, h)?;
            if let Some(u) = &lvl.up {
                h = u.forward(g, h)?;
            }
        }
        let h = self.out_norm.forward(g, h)?;
        let h = leaky(g, h)?;
        self.out_conv.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct TransformDown {
    res: ResBlock,
    gru: ConvGru,
    down: Option<Conv>,
}

#[derive(Clone, Debug)]
struct TransformUp {
    res0: ResBlock,
    res1: ResBlock,
    up: Option<ConvTranspose>,
}

/// Next-frame mean predictor `μ_φ(x^{<t})`. Each down level keeps a ConvGRU
/// whose hidden map is the skip feature for the matching up level.
#[derive(Clone, Debug)]
pub struct Transform {
    chans: Vec<usize>,
    in_conv: Conv,
    down: Vec<TransformDown>,
    mid: ResBlock,
    up: Vec<TransformUp>,
    out_norm: GroupNorm,
    out_conv: Conv,
}

impl Transform {
    fn new(b: &mut Builder, cfg: &BlockConfig) -> Self {
        let chans = channels(cfg, &cfg.transform_multipliers);
        let levels = chans.len();
        let (k, fc) = (cfg.resblock_kernel, cfg.frame_channels);
        let c0 = chans[0];
        let in_conv = Conv::new(b, "transform.in", fc, c0, k, 1);
        let mut down = Vec::with_capacity(levels);
        let mut cur = c0;
        for (l, &c) in chans.iter().enumerate() {
            let p = format!("transform.down{l}");
            down.push(TransformDown {
                res: ResBlock::new(b, &format!("{p}.res"), cur, c, k, None),
                gru: ConvGru::new(b, &format!("{p}.gru"), c, c, cfg.gru_kernel),
                down: (l + 1 < levels).then(|| Conv::new(b, &format!("{p}.downsample"), c, c, 3, 2)),
            });
            cur = c;
        }
        let mid = ResBlock::new(b, "transform.mid", cur, cur, k, None);
        let mut up = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let c = chans[l];
            let p = format!("transform.up{l}");
            up.push(TransformUp {
                res0: ResBlock::new(b, &format!("{p}.res0"), cur + c, c, k, None),
                res1: ResBlock::new(b, &format!("{p}.res1"), c, c, k, None),
                up: (l > 0).then(|| ConvTranspose::new(b, &format!("{p}.upsample"), c, c)),
            });
            cur = c;
        }
        Self {
            in_conv,
            down,
            mid,
            up,
            out_norm: GroupNorm::new(b, "transform.out.norm", c0),
            out_conv: Conv::new(b, "transform.out.conv", c0, fc, k, 1),
            chans,
        }
    }

    fn state_shapes(&self, batch: usize, h: usize, w: usize) -> Vec<Vec<usize>> {
        self.chans
            .iter()
            .enumerate()
            .map(|(l, &c)| vec![batch, c, h >> l, w >> l])
            .collect()
    }

    fn observe<T: Real>(&self, g: &mut Graph<T>, hidden: &[Var], frame: Var) -> Result<Vec<Var>> {
        let mut h = self.in_conv.forward(g, frame)?;
        let mut out = Vec::with_capacity(hidden.len());
        for (l, lvl) in self.down.iter().enumerate() {
            h = lvl.res.forward(g, h, None)?;
            let s = lvl.gru.forward(g, h, hidden[l])?;
            out.push(s);
            if let Some(d) = &lvl.down {
                h = d.forward(g, s)?;
            }
        }
        Ok(out)
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, hidden: &[Var]) -> Result<Var> {
        let levels = self.chans.len();
        let mut h = self.mid.forward(g, hidden[levels - 1], None)?;
        for (i, lvl) in self.up.iter().enumerate() {
            let l = levels - 1 - i;
            let hc = g.tape.concat_channel(&[h, hidden[l]])?;
            h = lvl.res0.forward(g, hc, None)?;
            h = lvl.res1.forward(g, h, None)?;
            if let Some(u) = &lvl.up {
                h = u.forward(g, h)?;
            }
        }
        let h = self.out_norm.forward(g, h)?;
        let h = leaky(g, h)?;
        self.out_conv.forward(g, h)
    }
}

/// Denoiser and transform for one frame shape. State layout: the
/// denoiser's context maps, then the transform's.
#[derive(Clone, Debug)]
pub struct RvdNet {
    cfg: BlockConfig,
    frame_shape: Vec<usize>,
    pub denoiser: Denoiser,
    pub transform: Transform,
}

impl RvdNet {
    /// Architecture plus freshly initialized parameters.
    pub fn build(cfg: &BlockConfig, frame_shape: &[usize], seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        cfg.check_frame(frame_shape)?;
        let mut b = Builder::new(seed);
        let denoiser = Denoiser::new(&mut b, cfg);
        let transform = Transform::new(&mut b, cfg);
        let net = Self {
            cfg: cfg.clone(),
            frame_shape: frame_shape.to_vec(),
            denoiser,
            transform,
        };
        Ok((net, b.finish()))
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    fn split<'s>(&self, state: &'s StateVars) -> Result<(&'s [Var], &'s [Var])> {
        let nd = self.denoiser.chans.len();
        if state.hidden.len() != nd + self.transform.chans.len() {
            return Err(Error::invalid("recurrent state does not belong to this network"));
        }
        Ok(state.hidden.split_at(nd))
    }

    fn check_frame_var<T: Real>(&self, g: &Graph<T>, x: Var, state: &StateVars) -> Result<()> {
        let s = g.tape.shape(x);
        let batch = g.tape.shape(state.hidden[0])[0];
        if s.len() != 4 || s[0] != batch || s[1..] != self.frame_shape[..] {
            let mut want = vec![batch];
            want.extend_from_slice(&self.frame_shape);
            return Err(Error::shape("frame", s, &want));
        }
        Ok(())
    }
}

impl<T: Real> DiffusionModel<T> for RvdNet {
    fn frame_shape(&self) -> &[usize] {
        &self.frame_shape
    }

    fn init_state(&self, g: &mut Graph<T>, batch: usize) -> Result<StateVars> {
        if batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        let (h, w) = (self.frame_shape[1], self.frame_shape[2]);
        let shapes = self
            .denoiser
            .state_shapes(batch, h, w)
            .into_iter()
            .chain(self.transform.state_shapes(batch, h, w));
        Ok(StateVars {
            hidden: shapes.map(|s| g.tape.constant(Tensor::zeros(s))).collect(),
            frames_seen: 0,
        })
    }

    fn observe(&self, g: &mut Graph<T>, state: &StateVars, frame: Var) -> Result<StateVars> {
        let (dh, th) = self.split(state)?;
        self.check_frame_var(g, frame, state)?;
        let mut hidden = self.denoiser.observe(g, dh, frame)?;
        hidden.extend(self.transform.observe(g, th, frame)?);
        Ok(StateVars {
            hidden,
            frames_seen: state.frames_seen + 1,
        })
    }

    fn predict_mean(&self, g: &mut Graph<T>, state: &StateVars) -> Result<Var> {
        let (_, th) = self.split(state)?;
        if state.frames_seen == 0 {
            return Err(Error::EmptyContext);
        }
        self.transform.forward(g, th)
    }

    fn predict_noise(&self, g: &mut Graph<T>, state: &StateVars, yn: Var, n: usize) -> Result<Var> {
        let (dh, _) = self.split(state)?;
        if state.frames_seen == 0 {
            return Err(Error::EmptyContext);
        }
        self.check_frame_var(g, yn, state)?;
        self.denoiser.forward(g, dh, yn, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::Profile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk() -> (RvdNet, ParamStore<f32>) {
        RvdNet::build(&BlockConfig::profile(Profile::Desk, 1), &[1, 16, 16], 0).unwrap()
    }

    #[test]
    fn shapes_and_state_contract() {
        let (net, params) = desk();
        let mut tape = Tape::<f32>::new();
        let p = params.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &p);
        let s0 = net.init_state(&mut g, 2).unwrap();
        assert!(s0.hidden.iter().all(|&v| g.tape.value(v).max_abs() == 0.0));
        assert!(matches!(net.predict_mean(&mut g, &s0), Err(Error::EmptyContext)));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frame = g.tape.constant(Tensor::randn([2, 1, 16, 16], &mut rng));
        let s1 = net.observe(&mut g, &s0, frame).unwrap();
        let s2 = net.observe(&mut g, &s1, frame).unwrap();
        for (a, b) in s1.hidden.iter().zip(&s2.hidden) {
            assert_eq!(g.tape.shape(*a), g.tape.shape(*b));
        }
        assert_ne!(g.tape.value(s1.hidden[0]), g.tape.value(s2.hidden[0]));

        let mu = net.predict_mean(&mut g, &s2).unwrap();
        assert_eq!(g.tape.shape(mu), &[2, 1, 16, 16]);
        let eps = net.predict_noise(&mut g, &s2, frame, 7).unwrap();
        assert_eq!(g.tape.shape(eps), &[2, 1, 16, 16]);

        let bad = g.tape.constant(Tensor::zeros([2, 1, 8, 8]));
        assert!(net.observe(&mut g, &s1, bad).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_state_has_value_semantics() {
        let (net, params) = desk();
        let run = |state: Option<&RecurrentState<f32>>| {
            let mut tape = Tape::<f32>::new();
            let p = params.bind(&mut tape, false);
            let mut g = Graph::new(&mut tape, &p);
            let s = match state {
                Some(s) => s.to_vars(g.tape),
                None => {
                    let s = net.init_state(&mut g, 1).unwrap();
                    let f = g.tape.constant(Tensor::full([1, 1, 16, 16], 0.5));
                    net.observe(&mut g, &s, f).unwrap()
                }
            };
            let y = g.tape.constant(Tensor::full([1, 1, 16, 16], -0.25));
            let e = net.predict_noise(&mut g, &s, y, 3).unwrap();
            (g.tape.value(e).clone(), RecurrentState::from_vars(g.tape, &s))
        };
        let (a, st) = run(None);
        let (b, _) = run(None);
        assert_eq!(a, b);
        let (c, st2) = run(Some(&st));
        assert_eq!(a, c);
        assert_eq!(st, st2);
    }
}
