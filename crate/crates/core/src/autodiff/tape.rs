use crate::autodiff::kernels::{self, ConvGeom, GroupStats};
use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds. Exposed for diagnostics and error messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul,
    AddScalar,
    Broadcast,
    ChannelBias,
    MatMul,
    TransposeLast2,
    Reshape,
    Conv2d,
    ConvTranspose2d,
    LeakyRelu,
    Sigmoid,
    Tanh,
    GroupNorm,
    SoftmaxLastAxis,
    ConcatChannel,
    SliceChannel,
    Sum,
    Mean,
    Square,
    Sqrt,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    AddScalar(Var),
    Broadcast(Var),
    ChannelBias(Var, Var),
    MatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    // geom describes the adjoint (forward) convolution whose input is our output.
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupStats<T> },
    SoftmaxLastAxis(Var),
    ConcatChannel(Vec<Var>),
    SliceChannel { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Broadcast(..) => OpKind::Broadcast,
            Op::ChannelBias(..) => OpKind::ChannelBias,
            Op::MatMul(..) => OpKind::MatMul,
            Op::TransposeLast2(..) => OpKind::TransposeLast2,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::GroupNorm { .. } => OpKind::GroupNorm,
            Op::SoftmaxLastAxis(..) => OpKind::SoftmaxLastAxis,
            Op::ConcatChannel(..) => OpKind::ConcatChannel,
            Op::SliceChannel { .. } => OpKind::SliceChannel,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Square(..) => OpKind::Square,
            Op::Sqrt(..) => OpKind::Sqrt,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list of primitive applications.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers and the reverse sweep is a single backwards pass over the list.
/// A tape is single-threaded; independent tapes may live on different threads.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Reverse-mode result: one optional gradient per tape node.
/// Gradients of a scalar loss with respect to every leaf it depends on.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after `mark`. Vars below `mark` stay valid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push("scalar_mul", out, Op::ScalarMul(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let neg = self.scalar_mul(a, -T::one())?;
        self.add_scalar(neg, c)
    }

    /// Expand a one-element tensor to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(a)
            .item()
            .ok_or_else(|| Error::shape("broadcast", self.shape(a), shape))?;
        self.push("broadcast", Tensor::full(shape, v), Op::Broadcast(a), &[a])
    }

    /// Add a per-channel bias. `x: [B, C, ...]`, `bias: [C]` or `[B, C]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        let ok = xs.len() >= 2
            && ((bs.len() == 1 && bs[0] == xs[1]) || (bs.len() == 2 && bs[0] == xs[0] && bs[1] == xs[1]));
        if !ok {
            return Err(Error::shape("channel_bias", xs, bs));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let inner = numel(&xs[2..]);
        let per_batch = bs.len() == 2;
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for b in 0..batch {
            for c in 0..channels {
                let add = bv[if per_batch { b * channels + c } else { c }];
                let off = (b * channels + c) * inner;
                for v in &mut out.data_mut()[off..off + inner] {
                    *v += add;
                }
            }
        }
        self.push("channel_bias", out, Op::ChannelBias(x, bias), &[x, bias])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push("square", out, Op::Square(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.sqrt());
        self.push("sqrt", out, Op::Sqrt(x), &[x])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::from_f64(v.numel() as f64));
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Mean of the squared difference, the usual regression loss.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    // ---- shape ---------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Swap the two trailing axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose_last2", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let bt = numel(&s[..s.len() - 2]);
        let data = kernels::transpose_last2(self.value(x).data(), bt, r, c);
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        let out = Tensor::new(shape, data)?;
        self.push("transpose_last2", out, Op::TransposeLast2(x), &[x])
    }

    /// Concatenate `[B, Ci, ...]` tensors along axis 1.
    pub fn concat_channel(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channel of zero tensors"))?;
        let fs = self.shape(first).to_vec();
        if fs.len() < 2 {
            return Err(Error::shape("concat_channel", &fs, &[]));
        }
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != fs.len() || s[0] != fs[0] || s[2..] != fs[2..] {
                return Err(Error::shape("concat_channel", &fs, s));
            }
            channels += s[1];
        }
        let batch = fs[0];
        let inner = numel(&fs[2..]);
        let mut data = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = fs.clone();
        shape[1] = channels;
        let out = Tensor::new(shape, data)?;
        self.push("concat_channel", out, Op::ConcatChannel(xs.to_vec()), xs)
    }

    /// Channels `start..start+len` of a `[B, C, ...]` tensor.
    pub fn slice_channel(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || len == 0 || start + len > s[1] {
            return Err(Error::invalid(format!(
                "slice_channel: range {start}..{} out of bounds for shape {s:?}",
                start + len
            )));
        }
        let (batch, channels) = (s[0], s[1]);
        let inner = numel(&s[2..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(batch * len * inner);
        for b in 0..batch {
            let off = (b * channels + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let out = Tensor::new(shape, data)?;
        self.push("slice_channel", out, Op::SliceChannel { x, start }, &[x])
    }

    // ---- linear algebra ------------------------------------------------------

    /// `[m, k] × [k, n]` or batched `[bt, m, k] × [bt, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bt, m, k, n) = matmul_dims(&sa, &sb)?;
        let mut out = vec![T::zero(); bt * m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, bt, m, k, n);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(shape, out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// 2-D cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]`,
    /// zero padding `pad` and the given stride.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let k = ws[2];
        let (oh, ow) = match (
            ConvGeom::out_len(xs[2], k, stride, pad),
            ConvGeom::out_len(xs[3], k, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::shape("conv2d", &xs, &ws)),
        };
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let mut out = vec![T::zero(); geom.batch * geom.cout * oh * ow];
        kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        let out = Tensor::new([geom.batch, geom.cout, oh, ow], out)?;
        self.push("conv2d", out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`].
    ///
    /// `x: [B, Cin, H, W]`, `w: [Cin, Cout, k, k]`; output spatial size is
    /// `(H-1)·stride - 2·pad + k + output_pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, output_pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] || stride == 0 || output_pad >= stride.max(1)
        {
            return Err(Error::shape("conv_transpose2d", &xs, &ws));
        }
        let k = ws[2];
        let out_len = |len: usize| -> Option<usize> {
            ((len - 1) * stride + k + output_pad).checked_sub(2 * pad).filter(|&v| v > 0)
        };
        let (h, wd) = match (out_len(xs[2]), out_len(xs[3])) {
            (Some(h), Some(wd)) => (h, wd),
            _ => return Err(Error::shape("conv_transpose2d", &xs, &ws)),
        };
        // The adjoint convolution maps our output [B, Cout, h, wd] to our input.
        let geom = ConvGeom {
            batch: xs[0],
            cin: ws[1],
            h,
            w: wd,
            cout: ws[0],
            k,
            stride,
            pad,
            oh: xs[2],
            ow: xs[3],
        };
        if ConvGeom::out_len(h, k, stride, pad) != Some(xs[2]) || ConvGeom::out_len(wd, k, stride, pad) != Some(xs[3]) {
            return Err(Error::shape("conv_transpose2d", &xs, &ws));
        }
        let mut out = vec![T::zero(); geom.batch * geom.cin * h * wd];
        kernels::conv2d_backward_input(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        let out = Tensor::new([geom.batch, geom.cin, h, wd], out)?;
        self.push("conv_transpose2d", out, Op::ConvTranspose2d { x, w, geom }, &[x, w])
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "group_norm: {groups} groups do not divide shape {xs:?}"
            )));
        }
        let c = xs[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("group_norm", &xs, self.shape(p)));
            }
        }
        let spatial = numel(&xs[2..]);
        let mut out = vec![T::zero(); self.value(x).numel()];
        let stats = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            xs[0],
            c,
            spatial,
            groups,
            T::from_f64(eps),
            &mut out,
        );
        let out = Tensor::new(xs, out)?;
        self.push(
            "group_norm",
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = *s.last().ok_or_else(|| Error::shape("softmax_last_axis", s, &[]))?;
        let data = kernels::softmax_rows(self.value(x).data(), n);
        let out = Tensor::new(s.to_vec(), data)?;
        self.push("softmax_last_axis", out, Op::SoftmaxLastAxis(x), &[x])
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Every node that depends on a
    /// `requires_grad` leaf receives `d loss / d node`; gradients of a node
    /// used several times are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Backward(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            // Only leaves are reported.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, T::one(), gd));
                self.acc(grads, *b, |d| axpy(d, T::one(), gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, T::one(), gd));
                self.acc(grads, *b, |d| axpy(d, -T::one(), gd));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(bv) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::ScalarMul(a, c) => self.acc(grads, *a, |d| axpy(d, *c, gd)),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |d| axpy(d, T::one(), gd)),
            Op::Broadcast(a) => {
                let total: T = gd.iter().copied().sum();
                self.acc(grads, *a, |d| d[0] += total);
            }
            Op::ChannelBias(x, bias) => {
                self.acc(grads, *x, |d| axpy(d, T::one(), gd));
                let xs = node.value.shape();
                let (batch, channels) = (xs[0], xs[1]);
                let inner = numel(&xs[2..]);
                let per_batch = self.shape(*bias).len() == 2;
                self.acc(grads, *bias, |d| {
                    for b in 0..batch {
                        for c in 0..channels {
                            let off = (b * channels + c) * inner;
                            let s: T = gd[off..off + inner].iter().copied().sum();
                            d[if per_batch { b * channels + c } else { c }] += s;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = matmul_dims(sa, sb).expect("validated in forward");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| kernels::matmul_grad_lhs(gd, bv, d, bt, m, k, n));
                self.acc(grads, *b, |d| kernels::matmul_grad_rhs(gd, av, d, bt, m, k, n));
            }
            Op::TransposeLast2(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let bt = numel(&s[..s.len() - 2]);
                let back = kernels::transpose_last2(gd, bt, r, c);
                self.acc(grads, *x, |d| axpy(d, T::one(), &back));
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |d| kernels::conv2d_backward_input(geom, gd, wv, d));
                self.acc(grads, *w, |d| kernels::conv2d_backward_weight(geom, gd, xv, d));
            }
            Op::ConvTranspose2d { x, w, geom } => {
                // y = Aᵀx with A the forward conv: dx = A g, dw from (x, g) swapped.
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |d| kernels::conv2d_forward(geom, gd, wv, d));
                self.acc(grads, *w, |d| kernels::conv2d_backward_weight(geom, xv, gd, d));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(gd).zip(xv) {
                        *d += if v > T::zero() { g } else { g * *slope };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(yv) {
                        *d += g * y * (T::one() - y);
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(yv) {
                        *d += g * (T::one() - y * y);
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xs = self.shape(*x);
                let (batch, channels, spatial) = (xs[0], xs[1], numel(&xs[2..]));
                let mut gx = self.needs(*x).then(|| vec![T::zero(); node.value.numel()]);
                let mut gg = self.needs(*gamma).then(|| vec![T::zero(); channels]);
                let mut gb = self.needs(*beta).then(|| vec![T::zero(); channels]);
                kernels::group_norm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    gd,
                    stats,
                    batch,
                    channels,
                    spatial,
                    *groups,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, buf) in [(*x, gx), (*gamma, gg), (*beta, gb)] {
                    if let Some(buf) = buf {
                        self.acc(grads, v, |d| axpy(d, T::one(), &buf));
                    }
                }
            }
            Op::SoftmaxLastAxis(x) => {
                let yv = node.value.data();
                let n = *node.value.shape().last().expect("rank checked in forward");
                self.acc(grads, *x, |d| {
                    for ((dr, gr), yr) in d.chunks_exact_mut(n).zip(gd.chunks_exact(n)).zip(yv.chunks_exact(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::ConcatChannel(xs) => {
                let s = node.value.shape();
                let (batch, total) = (s[0], s[1]);
                let inner = numel(&s[2..]);
                let mut start = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    self.acc(grads, v, |d| {
                        for b in 0..batch {
                            let src = (b * total + start) * inner;
                            axpy(&mut d[b * c * inner..(b + 1) * c * inner], T::one(), &gd[src..src + c * inner]);
                        }
                    });
                    start += c;
                }
            }
            Op::SliceChannel { x, start } => {
                let xs = self.shape(*x);
                let (batch, total) = (xs[0], xs[1]);
                let len = node.value.shape()[1];
                let inner = numel(&xs[2..]);
                self.acc(grads, *x, |d| {
                    for b in 0..batch {
                        let dst = (b * total + start) * inner;
                        axpy(&mut d[dst..dst + len * inner], T::one(), &gd[b * len * inner..(b + 1) * len * inner]);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).numel() as f64);
                let g0 = gd[0] / n;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = T::from_f64(2.0);
                self.acc(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(gd).zip(xv) {
                        *d += two * v * g;
                    }
                });
            }
            Op::Sqrt(x) => {
                let yv = node.value.data();
                let half = T::from_f64(0.5);
                self.acc(grads, *x, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(yv) {
                        *d += half * g / y;
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(g.data_mut());
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let ok = sa.len() == sb.len()
        && (sa.len() == 2 || sa.len() == 3)
        && sa[..sa.len() - 2] == sb[..sb.len() - 2]
        && sa[sa.len() - 1] == sb[sb.len() - 2];
    if !ok {
        return Err(Error::shape("matmul", sa, sb));
    }
    let bt = numel(&sa[..sa.len() - 2]);
    Ok((bt, sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn add_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_image() {
        let mut tape = Tape::<f64>::new();
        let img: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let x = tape.constant(t(&[1, 1, 5, 6], &img));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), img.as_slice());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2]));
        let b = tape.constant(Tensor::zeros([3]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(err.to_string(), "add: shape mismatch between [2] and [3]");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], &[-1.0]));
        assert!(tape.sqrt(a).unwrap_err().is_numeric());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[4], &[3.0, -1.0, 2.0, 7.0]));
        let loss = tape.mean(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Backward(_))));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Backward(_))));
    }

    #[test]
    fn reused_tensor_accumulates() {
        // loss = sum(x*x) + sum(3x) → 2x + 3
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let xx = tape.mul(x, x).unwrap();
        let a = tape.sum(xx).unwrap();
        let x3 = tape.scalar_mul(x, 3.0).unwrap();
        let b = tape.sum(x3).unwrap();
        let loss = tape.add(a, b).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn truncate_keeps_earlier_vars() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let mark = tape.len();
        let _ = tape.square(x).unwrap();
        tape.truncate(mark);
        assert_eq!(tape.len(), 1);
        assert_eq!(tape.value(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 2, 4, 4], 1.0));
        let w = tape.constant(Tensor::full([2, 3, 3, 3], 0.1));
        let y = tape.conv_transpose2d(x, w, 2, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 8, 8]);
    }
}
