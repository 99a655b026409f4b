use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::config::{groups_for, GN_EPS};
use crate::nn::params::{Builder, Graph, ParamId};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

fn leaky<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.tape.leaky_relu(x, T::from_f64(LEAKY_SLOPE))
}

/// Split sinusoidal encoding: `sin(n·ω_k)` for the first half, `cos(n·ω_k)`
/// for the second, with `ω_k = 10000^(-2k/dim)`.
pub fn positional_encoding<T: Real>(n: usize, dim: usize) -> Result<Tensor<T>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("positional encoding dim must be even and >= 2, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let arg = n as f64 / 10000f64.powf(2.0 * k as f64 / dim as f64);
        out[k] = T::from_f64(arg.sin());
        out[half + k] = T::from_f64(arg.cos());
    }
    Tensor::new([dim], out)
}

/// Square-kernel convolution with bias; `pad = k/2` keeps the size at
/// stride 1.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let fan_in = cin * k * k;
        Self {
            w: b.uniform(format!("{name}.w"), &[cout, cin, k, k], fan_in),
            b: b.uniform(format!("{name}.b"), &[cout], fan_in),
            cin,
            cout,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.tape.conv2d(x, g.p(self.w), self.stride, self.pad)?;
        g.tape.channel_bias(y, g.p(self.b))
    }
}

/// Stride-2 transposed 3×3 convolution doubling the spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvTranspose {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        let fan_in = cin * 9;
        Self {
            w: b.uniform(format!("{name}.w"), &[cin, cout, 3, 3], fan_in),
            b: b.uniform(format!("{name}.b"), &[cout], fan_in),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.tape.conv_transpose2d(x, g.p(self.w), 2, 1, 1)?;
        g.tape.channel_bias(y, g.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        Self {
            gamma: b.constant(format!("{name}.gamma"), &[channels], 1.0),
            beta: b.constant(format!("{name}.beta"), &[channels], 0.0),
            groups: groups_for(channels),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.tape.group_norm(x, g.p(self.gamma), g.p(self.beta), self.groups, GN_EPS)
    }
}

/// `x·W + b` on `[B, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize) -> Self {
        Self {
            w: b.uniform(format!("{name}.w"), &[din, dout], din),
            b: b.uniform(format!("{name}.b"), &[dout], din),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.tape.matmul(x, g.p(self.w))?;
        g.tape.channel_bias(y, g.p(self.b))
    }
}

/// `shortcut(x) + conv(act(norm(conv(act(norm(x))) + pe_bias))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub cin: usize,
    pub cout: usize,
    norm1: GroupNorm,
    conv1: Conv,
    pe: Option<(Linear, Linear)>,
    norm2: GroupNorm,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResBlock {
    /// `pe_dim = None` builds a block without step conditioning.
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, pe_dim: Option<usize>) -> Self {
        Self {
            cin,
            cout,
            norm1: GroupNorm::new(b, &format!("{name}.norm1"), cin),
            conv1: Conv::new(b, &format!("{name}.conv1"), cin, cout, k, 1),
            pe: pe_dim.map(|d| {
                (
                    Linear::new(b, &format!("{name}.pe1"), d, cout),
                    Linear::new(b, &format!("{name}.pe2"), cout, cout),
                )
            }),
            norm2: GroupNorm::new(b, &format!("{name}.norm2"), cout),
            conv2: Conv::new(b, &format!("{name}.conv2"), cout, cout, k, 1),
            shortcut: (cin != cout).then(|| Conv::new(b, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    /// `pe` is a `[1, pe_dim]` encoding shared across the batch.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, pe: Option<Var>) -> Result<Var> {
        let xs = g.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.cin {
            return Err(Error::shape("res_block", &xs, &[xs.first().copied().unwrap_or(0), self.cin]));
        }
        let h = self.norm1.forward(g, x)?;
        let h = leaky(g, h)?;
        let mut h = self.conv1.forward(g, h)?;
        match (&self.pe, pe) {
            (Some((l1, l2)), Some(pe)) => {
                let e = l1.forward(g, pe)?;
                let e = leaky(g, e)?;
                let e = l2.forward(g, e)?;
                let e = g.tape.reshape(e, &[self.cout])?;
                h = g.tape.channel_bias(h, e)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::invalid("res_block expects a positional encoding")),
            (None, Some(_)) => return Err(Error::invalid("res_block has no positional-encoding projection")),
        }
        let h = self.norm2.forward(g, h)?;
        let h = leaky(g, h)?;
        let h = self.conv2.forward(g, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.tape.add(skip, h)
    }
}

/// Convolutional GRU cell.
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub hidden: usize,
    cin: usize,
    conv_z: Conv,
    conv_r: Conv,
    conv_h: Conv,
}

impl ConvGru {
    pub fn new(b: &mut Builder, name: &str, cin: usize, hidden: usize, k: usize) -> Self {
        Self {
            hidden,
            cin,
            conv_z: Conv::new(b, &format!("{name}.z"), cin + hidden, hidden, k, 1),
            conv_r: Conv::new(b, &format!("{name}.r"), cin + hidden, hidden, k, 1),
            conv_h: Conv::new(b, &format!("{name}.h"), cin + hidden, hidden, k, 1),
        }
    }

    /// `z = σ(W_z*[x;h])`, `r = σ(W_r*[x;h])`, `h̃ = tanh(W_h*[x; r⊙h])`,
    /// `h' = (1-z)⊙h + z⊙h̃`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, h: Var) -> Result<Var> {
        let (xs, hs) = (g.tape.shape(x).to_vec(), g.tape.shape(h).to_vec());
        if xs.len() != 4 || hs.len() != 4 || xs[0] != hs[0] || xs[2..] != hs[2..] || xs[1] != self.cin || hs[1] != self.hidden {
            return Err(Error::shape("conv_gru", &xs, &hs));
        }
        let xh = g.tape.concat_channel(&[x, h])?;
        let z = self.conv_z.forward(g, xh)?;
        let z = g.tape.sigmoid(z)?;
        let r = self.conv_r.forward(g, xh)?;
        let r = g.tape.sigmoid(r)?;
        let rh = g.tape.mul(r, h)?;
        let xrh = g.tape.concat_channel(&[x, rh])?;
        let cand = self.conv_h.forward(g, xrh)?;
        let cand = g.tape.tanh(cand)?;
        let d = g.tape.sub(cand, h)?;
        let zd = g.tape.mul(z, d)?;
        g.tape.add(h, zd)
    }
}

/// Multi-head linear attention with a residual connection. Keys are
/// softmax-normalized over spatial positions, so each head summarizes the
/// map into a `head_dim × head_dim` context that every query reads from.
#[derive(Clone, Debug)]
pub struct LinearAttention {
    channels: usize,
    heads: usize,
    head_dim: usize,
    norm: GroupNorm,
    qkv: Conv,
    out: Conv,
}

impl LinearAttention {
    pub fn new(b: &mut Builder, name: &str, channels: usize, heads: usize, head_dim: usize) -> Self {
        let inner = heads * head_dim;
        Self {
            channels,
            heads,
            head_dim,
            norm: GroupNorm::new(b, &format!("{name}.norm"), channels),
            qkv: Conv::new(b, &format!("{name}.qkv"), channels, 3 * inner, 1, 1),
            out: Conv::new(b, &format!("{name}.out"), inner, channels, 1, 1),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.forward_with_weights(g, x).map(|(y, _)| y)
    }

    /// Output and the normalized key weights `[B·heads, head_dim, H·W]`.
    pub fn forward_with_weights<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let xs = g.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.channels {
            return Err(Error::shape("linear_attention", &xs, &[self.channels]));
        }
        let (batch, h, w) = (xs[0], xs[2], xs[3]);
        let (heads, d) = (self.heads, self.head_dim);
        let inner = heads * d;
        let split = [batch * heads, d, h * w];

        let n = self.norm.forward(g, x)?;
        let qkv = self.qkv.forward(g, n)?;
        let q = g.tape.slice_channel(qkv, 0, inner)?;
        let k = g.tape.slice_channel(qkv, inner, inner)?;
        let v = g.tape.slice_channel(qkv, 2 * inner, inner)?;
        let q = g.tape.reshape(q, &split)?;
        let q = g.tape.scalar_mul(q, T::from_f64(1.0 / (d as f64).sqrt()))?;
        let k = g.tape.reshape(k, &split)?;
        let v = g.tape.reshape(v, &split)?;

        let weights = g.tape.softmax_last_axis(k)?;
        let vt = g.tape.transpose_last2(v)?;
        // context[i][j] = Σ_p k'[i, p] v[j, p]
        let context = g.tape.matmul(weights, vt)?;
        let ct = g.tape.transpose_last2(context)?;
        let att = g.tape.matmul(ct, q)?;
        let att = g.tape.reshape(att, &[batch, inner, h, w])?;
        let y = self.out.forward(g, att)?;
        Ok((g.tape.add(x, y)?, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_coords, Tape};
    use crate::nn::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_matching(store: &mut ParamStore<f64>, pat: &str) {
        let names: Vec<String> = store.names().iter().filter(|n| n.contains(pat)).cloned().collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            *t = Tensor::zeros(t.shape());
        }
    }

    #[test]
    fn pe_examples() {
        let pe = positional_encoding::<f64>(0, 8).unwrap();
        assert_eq!(pe.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let pe = positional_encoding::<f64>(1, 2).unwrap();
        assert!((pe.data()[0] - 0.84147).abs() < 1e-5);
        assert!((pe.data()[1] - 0.54030).abs() < 1e-5);
        assert!(positional_encoding::<f64>(3, 7).is_err());
        let pe = positional_encoding::<f64>(1234, 64).unwrap();
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn res_block_zero_branch_is_identity() {
        let mut b = Builder::new(0);
        let blk = ResBlock::new(&mut b, "r", 4, 4, 3, Some(8));
        let mut store = b.finish().cast::<f64>();
        zero_matching(&mut store, "conv2");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([2, 4, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &p);
        let xv = g.tape.constant(x.clone());
        let pe = g.tape.constant(positional_encoding(3, 8).unwrap().reshape([1, 8]).unwrap());
        let y = blk.forward(&mut g, xv, Some(pe)).unwrap();
        assert_eq!(g.tape.value(y), &x);
    }

    #[test]
    fn res_block_shapes_and_errors() {
        let mut b = Builder::new(0);
        let blk = ResBlock::new(&mut b, "r", 4, 6, 3, None);
        let store = b.finish();
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &p);
        let x = g.tape.constant(Tensor::zeros([1, 4, 5, 7]));
        let y = blk.forward(&mut g, x, None).unwrap();
        assert_eq!(g.tape.shape(y), &[1, 6, 5, 7]);
        let bad = g.tape.constant(Tensor::zeros([1, 3, 5, 7]));
        assert!(blk.forward(&mut g, bad, None).is_err());
    }

    #[test]
    fn gru_with_zero_weights_halves_state() {
        let mut b = Builder::new(0);
        let cell = ConvGru::new(&mut b, "gru", 2, 3, 3);
        let mut store = b.finish().cast::<f64>();
        zero_matching(&mut store, "gru");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn([1, 2, 4, 4], &mut rng);
        let h = Tensor::<f64>::randn([1, 3, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &p);
        let (xv, hv) = (g.tape.constant(x), g.tape.constant(h.clone()));
        let out = cell.forward(&mut g, xv, hv).unwrap();
        assert!(g.tape.value(out).sub(&h.scale(0.5)).unwrap().max_abs() < 1e-15);
        let z = g.tape.constant(Tensor::zeros([1, 3, 4, 4]));
        let out = cell.forward(&mut g, xv, z).unwrap();
        assert_eq!(g.tape.value(out).max_abs(), 0.0);
        let wrong = g.tape.constant(Tensor::zeros([1, 3, 2, 4]));
        assert!(cell.forward(&mut g, xv, wrong).is_err());
    }

    #[test]
    fn attention_shapes_weights_and_zero_projection() {
        let mut b = Builder::new(5);
        let att = LinearAttention::new(&mut b, "att", 8, 4, 16);
        let mut store = b.finish().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([2, 8, 4, 6], &mut rng);
        {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let mut g = Graph::new(&mut tape, &p);
            let xv = g.tape.constant(x.clone());
            let (y, w) = att.forward_with_weights(&mut g, xv).unwrap();
            assert_eq!(g.tape.shape(y), x.shape());
            assert_eq!(g.tape.shape(w), &[8, 16, 24]);
            for row in g.tape.value(w).data().chunks(24) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        zero_matching(&mut store, "att.out");
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let mut g = Graph::new(&mut tape, &p);
        let xv = g.tape.constant(x.clone());
        let y = att.forward(&mut g, xv).unwrap();
        assert_eq!(g.tape.value(y), &x);
    }

    #[test]
    fn res_block_gradient_matches_finite_differences() {
        let mut b = Builder::new(9);
        let blk = ResBlock::new(&mut b, "r", 4, 4, 3, Some(6));
        let store = b.finish().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn([1, 4, 6, 6], &mut rng);
        let coords: Vec<usize> = (0..x.numel()).step_by(7).collect();
        let err = grad_check_coords(
            |tape, xv| {
                let p = store.bind(tape, false);
                let mut g = Graph::new(tape, &p);
                let pe = g.tape.constant(positional_encoding(5, 6).unwrap().reshape([1, 6]).unwrap());
                let y = blk.forward(&mut g, xv, Some(pe))?;
                let s = g.tape.square(y)?;
                g.tape.sum(s)
            },
            &x,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
