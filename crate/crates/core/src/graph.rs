//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends one node holding its output value. Node ids are
//! assigned in recording order, so the tape is already topologically sorted
//! and [`Graph::backward`] simply walks it in reverse.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Offset(Var),
    Abs(Var),
    Exp(Var),
    Gelu(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    AddChannelBias(Var, Var),
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    LayerNormChannels {
        x: Var,
        inv_std: Vec<S>,
    },
    Cosine {
        a: Var,
        b: Var,
        norm_a: S,
        norm_b: S,
    },
    Stack(Vec<Var>),
    LogSumExp(Var),
    Index(Var, usize),
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::Upsample2x(..) => "upsample_nearest2x",
            Op::ConcatChannels(..) => "concat_channels",
            Op::LayerNormChannels { .. } => "layer_norm_channels",
            Op::Cosine { .. } => "cosine",
            Op::Stack(..) => "stack",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::Index(..) => "index",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A single forward/backward recording.
///
/// Not shared across threads while live; build one graph per training step.
#[derive(Clone, Debug, Default)]
pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    macs: u64,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by recorded matmuls and convolutions.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    /// Records a leaf. Gradients are tracked if the tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Copies a value into a fresh constant leaf, stopping gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut t = self.nodes[v.0].value.clone();
        t.clear_grad();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let requires_grad = match &op {
            Op::Leaf => unreachable!("leaves are recorded via leaf()"),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNT(a, b) => self.rg(*a) || self.rg(*b),
            Op::AddChannelBias(a, b) | Op::ConcatChannels(a, b) => self.rg(*a) || self.rg(*b),
            Op::Cosine { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Conv2d { x, w, b, .. } => self.rg(*x) || self.rg(*w) || self.rg(*b),
            Op::Stack(items) => items.iter().any(|v| self.rg(*v)),
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Abs(a)
            | Op::Exp(a)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::Upsample2x(a)
            | Op::LogSumExp(a)
            | Op::Index(a, _) => self.rg(*a),
            Op::LayerNormChannels { x, .. } => self.rg(*x),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn elementwise2(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        self.push(out, op)
    }

    fn elementwise1(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.elementwise1(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -S::one())
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: S) -> Result<Var> {
        self.elementwise1(a, Op::Offset(a), |x| x + c)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.elementwise1(a, Op::Abs(a), |x| x.abs())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.elementwise1(a, Op::Exp(a), |x| x.exp())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (k, c) = (S::lit(GELU_K), S::lit(GELU_C));
        let half = S::lit(0.5);
        self.elementwise1(a, Op::Gelu(a), |x| {
            half * x * (S::one() + (k * (x + c * x * x * x)).tanh())
        })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.elementwise1(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean();
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => dim_err(format!("{what}: expected a matrix, got shape {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return dim_err(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.macs += (m * k * n) as u64;
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt lhs")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt rhs")?;
        if k != k2 {
            return dim_err(format!(
                "matmul_nt row lengths differ: {:?} x {:?}^T",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let arow = &da[i * k..][..k];
            for (j, o) in out[i * n..][..n].iter_mut().enumerate() {
                *o = dot(arow, &db[j * k..][..k]);
            }
        }
        self.macs += (m * k * n) as u64;
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let out = transpose_raw(self.data(a), m, n);
        self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "softmax_rows")?;
        let src = self.data(a);
        let mut out = vec![S::zero(); m * n];
        for (row, dst) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            softmax_into(row, dst);
        }
        self.push(Tensor::new(&[m, n], out)?, Op::SoftmaxRows(a))
    }

    /// 3x3 convolution with zero padding 1 over a `[C_in, H, W]` input.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (ci, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return dim_err(format!("conv2d input must be [C, H, W], got {s:?}")),
        };
        let co = match *self.shape(w) {
            [o, i, 3, 3] if i == ci => o,
            [_, i, 3, 3] => {
                return dim_err(format!(
                    "conv2d channel mismatch: input has {ci} channels, kernel expects {i}"
                ))
            }
            ref s => {
                return dim_err(format!(
                    "conv2d kernel must be [C_out, C_in, 3, 3], got {s:?}"
                ))
            }
        };
        if self.shape(b) != [co] {
            return dim_err(format!(
                "conv2d bias must be [{co}], got {:?}",
                self.shape(b)
            ));
        }
        if stride == 0 {
            return dim_err("conv2d stride must be positive");
        }
        let geom = ConvGeom::new(ci, co, h, wd, stride);
        let out = conv_forward(&geom, self.data(x), self.data(w), self.data(b));
        self.macs += geom.macs();
        self.push(
            Tensor::new(&[co, geom.ho, geom.wo], out)?,
            Op::Conv2d { x, w, b, stride },
        )
    }

    /// Adds `b[c]` to every element of channel `c` (leading axis of `x`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(x).len() < 2 || self.shape(b) != [c] {
            return dim_err(format!(
                "add_channel_bias: bias {:?} does not match leading axis of {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let inner = self.value(x).numel() / c;
        let bias = self.data(b);
        let out = self
            .data(x)
            .chunks_exact(inner)
            .zip(bias)
            .flat_map(|(row, &bv)| row.iter().map(move |&v| v + bv))
            .collect();
        let out = Tensor::new(self.shape(x), out)?;
        self.push(out, Op::AddChannelBias(x, b))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return dim_err(format!("upsample expects [C, H, W], got {s:?}")),
        };
        let src = self.data(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![S::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let srow = &src[(ch * h + y / 2) * w..][..w];
                let drow = &mut out[(ch * h2 + y) * w2..][..w2];
                for (xx, d) in drow.iter_mut().enumerate() {
                    *d = srow[xx / 2];
                }
            }
        }
        self.push(Tensor::new(&[c, h2, w2], out)?, Op::Upsample2x(x))
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return dim_err(format!(
                "concat_channels: incompatible shapes {sa:?} and {sb:?}"
            ));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        self.push(Tensor::new(&shape, out)?, Op::ConcatChannels(a, b))
    }

    /// Normalizes each column of a `[C, N]` matrix to zero mean and unit variance over channels.
    pub fn layer_norm_channels(&mut self, x: Var) -> Result<Var> {
        let (c, n) = self.matrix_dims(x, "layer_norm_channels")?;
        let src = self.data(x);
        let cs = S::lit(c as f64);
        let eps = S::lit(LAYER_NORM_EPS);
        let mut out = vec![S::zero(); c * n];
        let mut inv_std = vec![S::zero(); n];
        for j in 0..n {
            let mean = (0..c).map(|i| src[i * n + j]).sum::<S>() / cs;
            let var = (0..c).map(|i| (src[i * n + j] - mean).powi(2)).sum::<S>() / cs;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[j] = inv;
            for i in 0..c {
                out[i * n + j] = (src[i * n + j] - mean) * inv;
            }
        }
        self.push(
            Tensor::new(&[c, n], out)?,
            Op::LayerNormChannels { x, inv_std },
        )
    }

    /// Cosine similarity between two same-shaped tensors viewed as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let (da, db) = (self.data(a), self.data(b));
        let dot: S = da.iter().zip(db).map(|(&x, &y)| x * y).sum();
        let norm_a = da.iter().map(|&x| x * x).sum::<S>().sqrt();
        let norm_b = db.iter().map(|&x| x * x).sum::<S>().sqrt();
        if norm_a == S::zero() || norm_b == S::zero() {
            return Err(Error::DegenerateFeature(
                "cosine of a zero-norm vector".into(),
            ));
        }
        let c = dot / (norm_a * norm_b);
        self.push(
            Tensor::scalar(c),
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
        )
    }

    /// Packs single-element tensors into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return dim_err("stack of zero elements");
        }
        let mut out = Vec::with_capacity(items.len());
        for &v in items {
            if self.value(v).numel() != 1 {
                return dim_err(format!(
                    "stack expects scalars, got shape {:?}",
                    self.shape(v)
                ));
            }
            out.push(self.value(v).item());
        }
        self.push(Tensor::new(&[items.len()], out)?, Op::Stack(items.to_vec()))
    }

    /// `log(sum(exp(a)))` over all elements, shifted by the max for stability.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let v = log_sum_exp_raw(self.data(a));
        self.push(Tensor::scalar(v), Op::LogSumExp(a))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.value(a).numel();
        if i >= n {
            return dim_err(format!("index {i} out of bounds for {n} elements"));
        }
        let v = self.data(a)[i];
        self.push(Tensor::scalar(v), Op::Index(a, i))
    }

    /// Back-propagates from a single-element output.
    ///
    /// Afterwards every leaf with `requires_grad` holds a gradient, zero if it
    /// does not influence `out`. Intermediate gradients are released as soon as
    /// they have been propagated.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return dim_err(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        if self.rg(out) {
            grads[out.0] = Some(vec![S::one()]);
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.set_grad(g)?;
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.value.grad().is_none() {
                let n = node.value.numel();
                node.value.set_grad(vec![S::zero(); n])?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [S])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
            contrib(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &|ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(db) {
                        *d += s * y;
                    }
                });
                acc(*b, &|gb| {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(da) {
                        *d += s * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|ga| {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c)
            }),
            Op::Offset(a) | Op::Reshape(a) => acc(*a, &|ga| add_into(ga, g)),
            Op::Abs(a) => {
                let da = self.data(*a);
                acc(*a, &|ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(da) {
                        if x > S::zero() {
                            *d += s;
                        } else if x < S::zero() {
                            *d -= s;
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &|ga| {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += s * y;
                }
            }),
            Op::Gelu(a) => {
                let da = self.data(*a);
                let (k, c) = (S::lit(GELU_K), S::lit(GELU_C));
                let half = S::lit(0.5);
                let three = S::lit(3.0);
                acc(*a, &|ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(da) {
                        let t = (k * (x + c * x * x * x)).tanh();
                        let dt = (S::one() - t * t) * k * (S::one() + three * c * x * x);
                        *d += s * (half * (S::one() + t) + half * x * dt);
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &|ga| {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += s * (S::one() - y * y);
                }
            }),
            Op::Sum(a) => acc(*a, &|ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = S::lit(self.value(*a).numel() as f64);
                acc(*a, &|ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (da, db) = (self.data(*a), self.data(*b));
                // dA = G * B^T
                acc(*a, &|ga| {
                    for i in 0..m {
                        let grow = &g[i * n..][..n];
                        for p in 0..k {
                            let brow = &db[p * n..][..n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                // dB = A^T * G
                acc(*b, &|gb| {
                    for p in 0..k {
                        axpy_rows(&mut gb[p * n..][..n], m, |i| da[i * k + p], |i| i * n, g);
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (da, db) = (self.data(*a), self.data(*b));
                // dA = G * B
                acc(*a, &|ga| {
                    for i in 0..m {
                        axpy_rows(&mut ga[i * k..][..k], n, |j| g[i * n + j], |j| j * k, db);
                    }
                });
                // dB = G^T * A
                acc(*b, &|gb| {
                    for j in 0..n {
                        axpy_rows(&mut gb[j * k..][..k], m, |i| g[i * n + j], |i| i * k, da);
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &|ga| add_into(ga, &transpose_raw(g, n, m)));
            }
            Op::SoftmaxRows(a) => {
                let n = self.shape(*a)[1];
                acc(*a, &|ga| {
                    for ((drow, grow), yrow) in ga
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.chunks_exact(n))
                    {
                        let inner = dot(grow, yrow);
                        for ((d, &s), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (s - inner);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride } => {
                let xs = self.shape(*x);
                let co = self.shape(*w)[0];
                let geom = ConvGeom::new(xs[0], co, xs[1], xs[2], *stride);
                let (dx, dw) = (self.data(*x), self.data(*w));
                acc(*b, &|gb| {
                    let plane = geom.ho * geom.wo;
                    for (o, d) in gb.iter_mut().enumerate() {
                        *d += g[o * plane..][..plane].iter().copied().sum::<S>();
                    }
                });
                acc(*w, &|gw| conv_backward_weight(&geom, dx, g, gw));
                acc(*x, &|gx| conv_backward_input(&geom, dw, g, gx));
            }
            Op::AddChannelBias(x, b) => {
                let c = self.shape(*x)[0];
                let inner = self.value(*x).numel() / c;
                acc(*x, &|gx| add_into(gx, g));
                acc(*b, &|gb| {
                    for (d, chunk) in gb.iter_mut().zip(g.chunks_exact(inner)) {
                        *d += chunk.iter().copied().sum::<S>();
                    }
                });
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let w2 = 2 * w;
                acc(*x, &|gx| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            let grow = &g[(ch * 2 * h + y) * w2..][..w2];
                            let drow = &mut gx[(ch * h + y / 2) * w..][..w];
                            for (xx, &s) in grow.iter().enumerate() {
                                drow[xx / 2] += s;
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let na = self.value(*a).numel();
                acc(*a, &|ga| add_into(ga, &g[..na]));
                acc(*b, &|gb| add_into(gb, &g[na..]));
            }
            Op::LayerNormChannels { x, inv_std } => {
                let (c, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let cs = S::lit(c as f64);
                acc(*x, &|gx| {
                    for j in 0..n {
                        let mut mean_g = S::zero();
                        let mut mean_gy = S::zero();
                        for i in 0..c {
                            mean_g += g[i * n + j];
                            mean_gy += g[i * n + j] * out[i * n + j];
                        }
                        mean_g = mean_g / cs;
                        mean_gy = mean_gy / cs;
                        for i in 0..c {
                            gx[i * n + j] +=
                                inv_std[j] * (g[i * n + j] - mean_g - out[i * n + j] * mean_gy);
                        }
                    }
                });
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let c = out[0];
                let s = g[0];
                let denom = *norm_a * *norm_b;
                acc(*a, &|ga| {
                    let na2 = *norm_a * *norm_a;
                    for ((d, &x), &y) in ga.iter_mut().zip(da).zip(db) {
                        *d += s * (y / denom - c * x / na2);
                    }
                });
                acc(*b, &|gb| {
                    let nb2 = *norm_b * *norm_b;
                    for ((d, &x), &y) in gb.iter_mut().zip(da).zip(db) {
                        *d += s * (x / denom - c * y / nb2);
                    }
                });
            }
            Op::Stack(items) => {
                for (k, v) in items.iter().enumerate() {
                    acc(*v, &|gv| gv[0] += g[k]);
                }
            }
            Op::LogSumExp(a) => {
                let da = self.data(*a);
                let lse = out[0];
                acc(*a, &|ga| {
                    for (d, &x) in ga.iter_mut().zip(da) {
                        *d += g[0] * (x - lse).exp();
                    }
                });
            }
            Op::Index(a, k) => acc(*a, &|ga| ga[*k] += g[0]),
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Four-lane dot product; the fixed lane split keeps results deterministic.
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [S::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail = ra
        .iter()
        .zip(rb)
        .fold(S::zero(), |acc, (&x, &y)| acc + x * y);
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn axpy<S: Scalar>(dst: &mut [S], alpha: S, x: &[S]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

/// `dst += sum_t alpha(t) * x(t)` over `terms` rows, four rows per pass over `dst`.
fn axpy_rows<S: Scalar>(
    dst: &mut [S],
    terms: usize,
    alpha: impl Fn(usize) -> S,
    x: impl Fn(usize) -> usize,
    src: &[S],
) {
    let n = dst.len();
    let mut t = 0;
    while t + 4 <= terms {
        let (a0, a1, a2, a3) = (alpha(t), alpha(t + 1), alpha(t + 2), alpha(t + 3));
        let (x0, x1, x2, x3) = (
            &src[x(t)..][..n],
            &src[x(t + 1)..][..n],
            &src[x(t + 2)..][..n],
            &src[x(t + 3)..][..n],
        );
        for j in 0..n {
            dst[j] += (a0 * x0[j] + a1 * x1[j]) + (a2 * x2[j] + a3 * x3[j]);
        }
        t += 4;
    }
    for t in t..terms {
        axpy(dst, alpha(t), &src[x(t)..][..n]);
    }
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        axpy_rows(&mut out[i * n..][..n], k, |p| a[i * k + p], |p| p * n, b);
    }
    out
}

pub(crate) fn transpose_raw<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    const TILE: usize = 32;
    let mut out = vec![S::zero(); m * n];
    for i0 in (0..m).step_by(TILE) {
        for j0 in (0..n).step_by(TILE) {
            for i in i0..(i0 + TILE).min(m) {
                for j in j0..(j0 + TILE).min(n) {
                    out[j * m + i] = a[i * n + j];
                }
            }
        }
    }
    out
}

pub(crate) fn softmax_into<S: Scalar>(row: &[S], dst: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (d, &x) in dst.iter_mut().zip(row) {
        *d = (x - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d = *d / total;
    }
}

pub(crate) fn log_sum_exp_raw<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<S>().ln()
}

/// Geometry of a 3x3, padding-1 convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl ConvGeom {
    fn new(ci: usize, co: usize, h: usize, w: usize, stride: usize) -> Self {
        let ho = (h - 1) / stride + 1;
        let wo = (w - 1) / stride + 1;
        Self {
            ci,
            co,
            h,
            w,
            ho,
            wo,
            stride,
        }
    }

    fn macs(&self) -> u64 {
        (self.co * self.ci * 9 * self.ho * self.wo) as u64
    }

    /// Output index range `[lo, hi)` along one axis whose input tap `o*stride + k - 1`
    /// lands inside `[0, extent)`.
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let k = k as isize;
        let lo = if k == 0 { 1 } else { 0 };
        // o*s + k - 1 <= extent - 1  =>  o <= (extent - k) / s
        let top = extent as isize - k;
        let hi = if top < 0 {
            0
        } else {
            (top / s + 1).min(out_extent as isize)
        };
        (lo, (hi as usize).max(lo))
    }
}

fn conv_forward<S: Scalar>(geom: &ConvGeom, x: &[S], w: &[S], b: &[S]) -> Vec<S> {
    let ConvGeom {
        ci,
        co,
        h,
        w: wd,
        ho,
        wo,
        stride,
    } = *geom;
    let mut out = vec![S::zero(); co * ho * wo];
    for o in 0..co {
        let plane = &mut out[o * ho * wo..][..ho * wo];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..ci {
            let xin = &x[c * h * wd..][..h * wd];
            for ky in 0..3 {
                let (ylo, yhi) = geom.valid(ky, h, ho);
                for kx in 0..3 {
                    let (xlo, xhi) = geom.valid(kx, wd, wo);
                    let wv = w[((o * ci + c) * 3 + ky) * 3 + kx];
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - 1;
                        let orow = &mut plane[oy * wo..][..wo];
                        let irow = &xin[iy * wd..][..wd];
                        for ox in xlo..xhi {
                            orow[ox] += wv * irow[ox * stride + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_weight<S: Scalar>(geom: &ConvGeom, x: &[S], g: &[S], gw: &mut [S]) {
    let ConvGeom {
        ci,
        co,
        h,
        w: wd,
        ho,
        wo,
        stride,
    } = *geom;
    for o in 0..co {
        let gplane = &g[o * ho * wo..][..ho * wo];
        for c in 0..ci {
            let xin = &x[c * h * wd..][..h * wd];
            for ky in 0..3 {
                let (ylo, yhi) = geom.valid(ky, h, ho);
                for kx in 0..3 {
                    let (xlo, xhi) = geom.valid(kx, wd, wo);
                    let mut total = S::zero();
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - 1;
                        let grow = &gplane[oy * wo..][..wo];
                        let irow = &xin[iy * wd..][..wd];
                        for ox in xlo..xhi {
                            total += grow[ox] * irow[ox * stride + kx - 1];
                        }
                    }
                    gw[((o * ci + c) * 3 + ky) * 3 + kx] += total;
                }
            }
        }
    }
}

fn conv_backward_input<S: Scalar>(geom: &ConvGeom, w: &[S], g: &[S], gx: &mut [S]) {
    let ConvGeom {
        ci,
        co,
        h,
        w: wd,
        ho,
        wo,
        stride,
    } = *geom;
    for o in 0..co {
        let gplane = &g[o * ho * wo..][..ho * wo];
        for c in 0..ci {
            let xgrad = &mut gx[c * h * wd..][..h * wd];
            for ky in 0..3 {
                let (ylo, yhi) = geom.valid(ky, h, ho);
                for kx in 0..3 {
                    let (xlo, xhi) = geom.valid(kx, wd, wo);
                    let wv = w[((o * ci + c) * 3 + ky) * 3 + kx];
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - 1;
                        let grow = &gplane[oy * wo..][..wo];
                        let drow = &mut xgrad[iy * wd..][..wd];
                        for ox in xlo..xhi {
                            drow[ox * stride + kx - 1] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}
