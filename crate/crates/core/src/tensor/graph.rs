use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    /// `ln(e^a + e^b)`, evaluated without overflow.
    LogAddExp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Relu,
    Sigmoid,
    Neg,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    LogSumExp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Reduce {
        kind: ReduceKind,
        input: Var,
        // output flat index of every input element
        out_index: Vec<usize>,
        count: usize,
        argmax: Vec<usize>,
    },
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner_sizes: Vec<usize>,
    },
    LogSoftmax {
        input: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Pick {
        input: Var,
        labels: Vec<usize>,
        classes: usize,
        inner: usize,
    },
    PairwiseSqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only operation tape.
///
/// Node ids increase with creation, so creation order is a topological order
/// and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; its gradient accumulates across [`Graph::backward`] calls.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
            BinaryKind::LogAddExp => "logaddexp",
        };
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(shape_err(op, ta, tb));
        };
        let n = shape.iter().product::<usize>();
        let (da, db) = (ta.data(), tb.data());
        let ia = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
        let ib = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
        if kind == BinaryKind::Div && db.iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op,
                detail: "division by zero".into(),
            });
        }
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (ia(i), ib(i));
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                    BinaryKind::LogAddExp => log_add_exp(x, y),
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::LogAddExp, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let s = self.scalar(c);
        self.add(a, s).expect("scalar operand always broadcasts")
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let s = self.scalar(c);
        self.mul(a, s).expect("scalar operand always broadcasts")
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let t = self.value(a);
        if kind == UnaryKind::Log && t.data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: "non-positive operand".into(),
            });
        }
        let data = t
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Relu => if x < 0.0 { 0.0 } else { x },
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::Neg => -x,
                UnaryKind::Square => x * x,
            })
            .collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Unary(kind, a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a).expect("relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a).expect("neg is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a).expect("square is total")
    }

    // ---- reductions --------------------------------------------------------

    /// Reduces over `axes`; the reduced axes are dropped from the shape.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        if axes.is_empty() {
            return Err(TensorError::EmptyReduction);
        }
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(TensorError::InvalidAxis {
                    op: "reduce",
                    axis: ax,
                    rank,
                });
            }
            reduced[ax] = true;
        }
        let shape = t.shape();
        let out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| shape[d]).collect();
        let out_n: usize = out_shape.iter().product();
        let count = t.numel() / out_n;

        // output stride contributed by each input dim (0 for reduced dims)
        let mut out_stride = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            if !reduced[d] {
                out_stride[d] = acc;
                acc *= shape[d];
            }
        }
        let mut out_index = Vec::with_capacity(t.numel());
        let mut idx = vec![0usize; rank];
        let mut cur = 0usize;
        for _ in 0..t.numel() {
            out_index.push(cur);
            for d in (0..rank).rev() {
                idx[d] += 1;
                cur += out_stride[d];
                if idx[d] < shape[d] {
                    break;
                }
                cur -= out_stride[d] * shape[d];
                idx[d] = 0;
            }
        }

        let data = t.data();
        let mut argmax = Vec::new();
        let out = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut out = vec![0.0; out_n];
                for (i, &o) in out_index.iter().enumerate() {
                    out[o] += data[i];
                }
                if kind == ReduceKind::Mean {
                    out.iter_mut().for_each(|v| *v /= count as f64);
                }
                out
            }
            ReduceKind::Max | ReduceKind::LogSumExp => {
                let mut best = vec![f64::NEG_INFINITY; out_n];
                argmax = vec![usize::MAX; out_n];
                for (i, &o) in out_index.iter().enumerate() {
                    if data[i] > best[o] || argmax[o] == usize::MAX {
                        best[o] = data[i];
                        argmax[o] = i;
                    }
                }
                if kind == ReduceKind::Max {
                    best
                } else {
                    let mut sums = vec![0.0; out_n];
                    for (i, &o) in out_index.iter().enumerate() {
                        if best[o].is_finite() {
                            sums[o] += (data[i] - best[o]).exp();
                        }
                    }
                    best.iter()
                        .zip(&sums)
                        .map(|(&m, &s)| if m.is_finite() { m + s.ln() } else { m })
                        .collect()
                }
            }
        };
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Reduce {
                kind,
                input: a,
                out_index,
                count,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    pub fn max(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Max, a, axes)
    }

    pub fn logsumexp(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::LogSumExp, a, axes)
    }

    fn all_axes(&self, a: Var) -> Vec<usize> {
        (0..self.value(a).rank()).collect()
    }

    /// Sum over every element, giving a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes = self.all_axes(a);
        if axes.is_empty() {
            return a;
        }
        self.sum(a, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes = self.all_axes(a);
        if axes.is_empty() {
            return a;
        }
        self.mean(a, &axes).expect("all axes are valid")
    }

    // ---- linear algebra and shape -----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Flattens every axis after the first: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let b = *shape.first().ok_or(TensorError::InvalidArgument {
            op: "flatten",
            detail: "scalar input".into(),
        })?;
        self.reshape(a, &[b, shape[1..].iter().product()])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let trailing: usize = base[axis + 1..].iter().product();
        let mut axis_total = 0;
        let mut inner_sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(shape_err("concat", self.value(*first), self.value(v)));
            }
            axis_total += s[axis];
            inner_sizes.push(s[axis] * trailing);
        }
        let row: usize = inner_sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&inner_sizes) {
                data.extend_from_slice(&self.value(v).data()[o * sz..(o + 1) * sz]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner_sizes,
            },
            rg,
        ))
    }

    // ---- convolutional ops -------------------------------------------------

    /// Cross-correlation of `[B,C,H,W]` with a `[F,C,k,k]` kernel, odd `k`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        if ti.rank() != 4 || tk.rank() != 4 {
            return Err(shape_err("conv2d", ti, tk));
        }
        let (b, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (f, kc, kh, kw) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        if kc != c {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!("channel mismatch: input has {c}, kernel expects {kc}"),
            });
        }
        if kh != kw || kh % 2 == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!("kernel must be square and odd with stride > 0, got {kh}x{kw}"),
            });
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err("conv2d", ti, tk));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [f] {
                return Err(shape_err("conv2d", tk, self.value(bv)));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            ksize: kh,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            ti.data(),
            b,
            tk.data(),
            f,
            bias.map(|bv| self.value(bv).data()),
            &geom,
        );
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|bv| self.rg(bv));
        Ok(self.push(
            Tensor {
                shape: vec![b, f, geom.out_h, geom.out_w],
                data,
            },
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 over the last two axes.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2",
                detail: "needs at least two spatial axes".into(),
            });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2",
                detail: format!("odd spatial extent {h}x{w}"),
            });
        }
        let planes = t.numel() / (h * w);
        let (data, argmax) = kernels::maxpool2(t.data(), planes, h, w);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let rg = self.rg(input);
        Ok(self.push(Tensor { shape, data }, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "upsample2",
                detail: "needs at least two spatial axes".into(),
            });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = t.numel() / (h * w);
        let data = kernels::upsample2(t.data(), planes, h, w);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = 2 * h;
        shape[r - 1] = 2 * w;
        let rg = self.rg(input);
        Ok(self.push(Tensor { shape, data }, Op::Upsample2(input), rg))
    }

    // ---- fused numerics ----------------------------------------------------

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                op: "log_softmax",
                axis,
                rank: s.len(),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let axis_len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * axis_len * inner + k * inner + i;
                let m = (0..axis_len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..axis_len).map(|k| (x[at(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..axis_len {
                    out[at(k)] = x[at(k)] - lse;
                }
            }
        }
        let value = Tensor {
            shape: s.to_vec(),
            data: out,
        };
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::LogSoftmax {
                input,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    /// Selects `x[b, labels[b, ..], ..]` along axis 1; the class axis is dropped.
    pub fn pick(&mut self, input: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                detail: "input needs a class axis".into(),
            });
        }
        let (batch, classes) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if labels.len() != batch * inner {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                detail: format!("{} labels for {} positions", labels.len(), batch * inner),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                detail: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let x = t.data();
        let data = labels
            .iter()
            .enumerate()
            .map(|(p, &l)| {
                let (b, i) = (p / inner, p % inner);
                x[(b * classes + l) * inner + i]
            })
            .collect();
        let mut shape = vec![batch];
        shape.extend_from_slice(&s[2..]);
        let rg = self.rg(input);
        Ok(self.push(
            Tensor { shape, data },
            Op::Pick {
                input,
                labels: labels.to_vec(),
                classes,
                inner,
            },
            rg,
        ))
    }

    /// Squared Euclidean distances between the rows of `[M,d]` and `[N,d]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("pairwise_sq_dist", ta, tb));
        }
        let (m, n) = (ta.shape()[0], tb.shape()[0]);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let ra = ta.row(i);
            for j in 0..n {
                data.push(
                    ra.iter()
                        .zip(tb.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum(),
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::PairwiseSqDist(a, b),
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    ///
    /// A loss that does not depend on any `requires_grad` leaf is a no-op.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape().to_vec(),
                            data: g,
                        })
                    }
                }
                continue;
            }
            self.backprop_node(id, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        // Returns the adjoint buffer of `v` when it needs a gradient.
        let slot = |adj: &mut [Option<Vec<f64>>], v: Var| -> Option<*mut Vec<f64>> {
            if !self.nodes[v.0].requires_grad {
                return None;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
            Some(buf as *mut Vec<f64>)
        };
        // Adjoint buffers belong to strictly earlier nodes than `id`, and the
        // two inputs of an op may alias, so we go through raw pointers one
        // borrow at a time.
        macro_rules! with_slot {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some(p) = slot(adj, $v) {
                    // SAFETY: p points into `adj`, which is not otherwise
                    // borrowed for the duration of `$body`.
                    let $buf: &mut Vec<f64> = unsafe { &mut *p };
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                // partial derivatives w.r.t. each operand at position i
                let pa = |i: usize| -> f64 {
                    let (x, y) = (at(da, i), at(db, i));
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => 1.0,
                        BinaryKind::Mul => y,
                        BinaryKind::Div => 1.0 / y,
                        BinaryKind::LogAddExp => (x - out[i]).exp(),
                    }
                };
                let pb = |i: usize| -> f64 {
                    let (x, y) = (at(da, i), at(db, i));
                    match kind {
                        BinaryKind::Add => 1.0,
                        BinaryKind::Sub => -1.0,
                        BinaryKind::Mul => x,
                        BinaryKind::Div => -x / (y * y),
                        BinaryKind::LogAddExp => (y - out[i]).exp(),
                    }
                };
                with_slot!(*a, |buf| {
                    if buf.len() == 1 && g.len() > 1 {
                        buf[0] += (0..g.len()).map(|i| g[i] * pa(i)).sum::<f64>();
                    } else {
                        for i in 0..g.len() {
                            buf[i] += g[i] * pa(i);
                        }
                    }
                });
                with_slot!(*b, |buf| {
                    if buf.len() == 1 && g.len() > 1 {
                        buf[0] += (0..g.len()).map(|i| g[i] * pb(i)).sum::<f64>();
                    } else {
                        for i in 0..g.len() {
                            buf[i] += g[i] * pb(i);
                        }
                    }
                });
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                with_slot!(*a, |buf| {
                    for i in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Exp => out[i],
                            UnaryKind::Log => 1.0 / x[i],
                            UnaryKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => out[i] * (1.0 - out[i]),
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Square => 2.0 * x[i],
                        };
                        buf[i] += g[i] * d;
                    }
                });
            }
            Op::Reduce {
                kind,
                input,
                out_index,
                count,
                argmax,
            } => {
                let x = self.value(*input).data();
                with_slot!(*input, |buf| {
                    match kind {
                        ReduceKind::Sum => {
                            for (i, &o) in out_index.iter().enumerate() {
                                buf[i] += g[o];
                            }
                        }
                        ReduceKind::Mean => {
                            let inv = 1.0 / *count as f64;
                            for (i, &o) in out_index.iter().enumerate() {
                                buf[i] += g[o] * inv;
                            }
                        }
                        ReduceKind::Max => {
                            for (o, &i) in argmax.iter().enumerate() {
                                buf[i] += g[o];
                            }
                        }
                        ReduceKind::LogSumExp => {
                            for (i, &o) in out_index.iter().enumerate() {
                                if out[o].is_finite() {
                                    buf[i] += g[o] * (x[i] - out[o]).exp();
                                }
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                with_slot!(*a, |buf| {
                    // dA = G · B^T
                    kernels::gemm(m, n, k, g, false, tb.data(), true, buf, 1.0);
                });
                with_slot!(*b, |buf| {
                    // dB = A^T · G
                    kernels::gemm(k, m, n, ta.data(), true, g, false, buf, 1.0);
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (ti, tk) = (self.value(*input), self.value(*kernel));
                let (batch, filters) = (ti.shape()[0], tk.shape()[0]);
                let di = slot(adj, *input);
                let dk = slot(adj, *kernel);
                let dbias = bias.and_then(|bv| slot(adj, bv));
                // SAFETY: input, kernel and bias are distinct nodes when they
                // require gradients (a kernel is never also the input image).
                unsafe {
                    kernels::conv2d_backward(
                        ti.data(),
                        batch,
                        tk.data(),
                        filters,
                        geom,
                        g,
                        di.map(|p| (*p).as_mut_slice()),
                        dk.map(|p| (*p).as_mut_slice()),
                        dbias.map(|p| (*p).as_mut_slice()),
                    );
                }
            }
            Op::MaxPool2 { input, argmax } => {
                with_slot!(*input, |buf| {
                    for (o, &i) in argmax.iter().enumerate() {
                        buf[i] += g[o];
                    }
                });
            }
            Op::Upsample2(input) => {
                let s = self.value(*input).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = self.value(*input).numel() / (h * w);
                with_slot!(*input, |buf| {
                    kernels::upsample2_backward(g, planes, h, w, buf);
                });
            }
            Op::Reshape(a) => {
                with_slot!(*a, |buf| {
                    add_into(buf, g);
                });
            }
            Op::Concat {
                inputs,
                outer,
                inner_sizes,
            } => {
                let row: usize = inner_sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in inputs.iter().zip(inner_sizes) {
                    with_slot!(v, |buf| {
                        for o in 0..*outer {
                            add_into(
                                &mut buf[o * sz..(o + 1) * sz],
                                &g[o * row + offset..o * row + offset + sz],
                            );
                        }
                    });
                    offset += sz;
                }
            }
            Op::LogSoftmax {
                input,
                outer,
                axis_len,
                inner,
            } => {
                with_slot!(*input, |buf| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |k: usize| o * axis_len * inner + k * inner + i;
                            let gs: f64 = (0..*axis_len).map(|k| g[at(k)]).sum();
                            for k in 0..*axis_len {
                                buf[at(k)] += g[at(k)] - out[at(k)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::Pick {
                input,
                labels,
                classes,
                inner,
            } => {
                with_slot!(*input, |buf| {
                    for (p, &l) in labels.iter().enumerate() {
                        let (b, i) = (p / inner, p % inner);
                        buf[(b * classes + l) * inner + i] += g[p];
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n, d) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
                with_slot!(*a, |buf| {
                    for i in 0..m {
                        let ra = ta.row(i);
                        for j in 0..n {
                            let c = 2.0 * g[i * n + j];
                            if c == 0.0 {
                                continue;
                            }
                            let rb = tb.row(j);
                            let dst = &mut buf[i * d..(i + 1) * d];
                            for k in 0..d {
                                dst[k] += c * (ra[k] - rb[k]);
                            }
                        }
                    }
                });
                with_slot!(*b, |buf| {
                    for j in 0..n {
                        let rb = tb.row(j);
                        for i in 0..m {
                            let c = 2.0 * g[i * n + j];
                            if c == 0.0 {
                                continue;
                            }
                            let ra = ta.row(i);
                            let dst = &mut buf[j * d..(j + 1) * d];
                            for k in 0..d {
                                dst[k] -= c * (ra[k] - rb[k]);
                            }
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(g: &mut Graph, v: &[f64]) -> Var {
        g.param(Tensor::from_vec(v.to_vec()))
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = vec1(&mut g, &[1.0, 2.0]);
        let b = vec1(&mut g, &[3.0, 4.0]);
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let r = g.constant(Tensor::from_vec(vec![-1.0, 2.0]));
        let r = g.relu(r);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);

        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn elementwise_errors() {
        let mut g = Graph::new();
        let a = vec1(&mut g, &[1.0, 2.0]);
        let b = vec1(&mut g, &[1.0, 2.0, 3.0]);
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        let z = vec1(&mut g, &[0.0, 1.0]);
        assert!(matches!(g.log(z), Err(TensorError::Domain { .. })));
        assert!(matches!(g.div(a, z), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let a = vec1(&mut g, &[1.0, 2.0, 3.0]);
        let s = g.sum(a, &[0]).unwrap();
        assert_eq!(g.value(s).item(), 6.0);

        let z = vec1(&mut g, &[0.0, 0.0]);
        let l = g.logsumexp(z, &[0]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let big = vec1(&mut g, &[1000.0, 1000.0]);
        let l = g.logsumexp(big, &[0]).unwrap();
        assert!((g.value(l).item() - (1000.0 + 2f64.ln())).abs() < 1e-12);

        assert!(matches!(g.sum(a, &[]), Err(TensorError::EmptyReduction)));
        assert!(matches!(g.sum(a, &[1]), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn reduce_middle_axis() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let a = g.param(t);
        let s = g.sum(a, &[1]).unwrap();
        assert_eq!(g.shape(s), &[2, 2]);
        assert_eq!(g.value(s).data(), &[6.0, 9.0, 24.0, 27.0]);
        let m = g.max(a, &[0, 2]).unwrap();
        assert_eq!(g.value(m).data(), &[7.0, 9.0, 11.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let c = g.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).data(), &[2.0]);
        assert!(g.matmul(r, r).is_err());
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let img = Tensor::new(vec![1, 1, 3, 4], (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
        let x = g.constant(img.clone());
        let k = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &img);

        let c = g.constant(Tensor::full(&[1, 1, 5, 5], 2.0));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(c, k, None, 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 1, 5, 5]);
        assert_eq!(v.data()[2 * 5 + 2], 18.0);
        assert_eq!(v.data()[0], 8.0);

        let k2 = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        assert!(g.conv2d(c, k2, None, 1, 1).is_err());
    }

    #[test]
    fn pool_upsample_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.max_pool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
        let five = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap());
        let u = g.upsample2(five).unwrap();
        assert_eq!(g.value(u).data(), &[5.0; 4]);

        let m = g.param(Tensor::new(vec![1, 2, 2, 3], (0..12).map(f64::from).collect()).unwrap());
        let u = g.upsample2(m).unwrap();
        let back = g.max_pool2(u).unwrap();
        assert_eq!(g.value(back), g.value(m));

        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(g.max_pool2(odd).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[0.3, -1.0, 2.0]);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 3]);
        // repeated backward accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0; 3]);

        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());

        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn aliased_operands() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[1.5, -2.0]);
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn concat_and_pick() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.param(Tensor::new(vec![1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 3, 1, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = g.pick(c, &[2, 0]).unwrap();
        assert_eq!(g.value(p).data(), &[5.0, 2.0]);
        assert!(g.pick(c, &[3, 0]).is_err());
    }

    #[test]
    fn logsumexp_shift_invariance() {
        let mut g = Graph::new();
        let xs = [0.3, -1.2, 4.0, 2.2];
        let a = vec1(&mut g, &xs);
        let base = g.logsumexp(a, &[0]).unwrap();
        for c in [-50.0, 0.5, 700.0] {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = vec1(&mut g, &shifted);
            let l = g.logsumexp(b, &[0]).unwrap();
            assert!((g.value(l).item() - (g.value(base).item() + c)).abs() < 1e-12);
        }
    }
}
