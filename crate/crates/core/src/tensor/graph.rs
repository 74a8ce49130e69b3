use super::conv::{ConvPadding, ResamplePlan};
use super::gemm::{self, View, ViewMut};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    /// Persistent accumulated gradient; only leaves carry one.
    pub grad: Option<Vec<f64>>,
    pub op: Op,
}

pub(crate) enum Op {
    Leaf,
    /// Result of an op whose inputs carry no gradient.
    Const,
    Matmul(Var, Var),
    /// `x w + b` with `b` broadcast over rows.
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddCols(Var, Var),
    MulCols(Var, Var),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Gelu(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Magnitude(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        padding: ConvPadding,
        cols: Vec<f64>,
    },
    PadEdge {
        x: Var,
        py: usize,
        px: usize,
    },
    Resample {
        x: Var,
        plan: ResamplePlan,
    },
    Reshape(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GroupMean {
        x: Var,
        groups: usize,
    },
    BceMean {
        p: Var,
        target: Vec<f64>,
    },
    Dice {
        p: Var,
        target: Vec<f64>,
        groups: usize,
        eps: f64,
    },
    NllMean {
        p: Var,
        classes: Vec<usize>,
    },
    BceLogits {
        z: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        z: Var,
        classes: Vec<usize>,
    },
}

/// Names of every recorded op, in declaration order.
pub const OP_NAMES: [&str; 35] = [
    "leaf",
    "const",
    "matmul",
    "affine",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "add_cols",
    "mul_cols",
    "sum",
    "mean",
    "sigmoid",
    "gelu",
    "log",
    "exp",
    "clamp",
    "magnitude",
    "softmax_rows",
    "layer_norm",
    "attention",
    "conv2d",
    "pad_edge",
    "resample",
    "reshape",
    "concat_last",
    "concat_rows",
    "slice_cols",
    "group_mean",
    "bce_mean",
    "dice_loss",
    "nll_mean",
    "bce_logits_mean",
    "cross_entropy_mean",
];

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Matmul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddCols(..) => "add_cols",
            Op::MulCols(..) => "mul_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Clamp(..) => "clamp",
            Op::Magnitude(..) => "magnitude",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Conv2d { .. } => "conv2d",
            Op::PadEdge { .. } => "pad_edge",
            Op::Resample { .. } => "resample",
            Op::Reshape(..) => "reshape",
            Op::ConcatLast(..) => "concat_last",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GroupMean { .. } => "group_mean",
            Op::BceMean { .. } => "bce_mean",
            Op::Dice { .. } => "dice_loss",
            Op::NllMean { .. } => "nll_mean",
            Op::BceLogits { .. } => "bce_logits_mean",
            Op::CrossEntropy { .. } => "cross_entropy_mean",
        }
    }
}

/// A recording tape.
///
/// Gradients accumulate additively into leaves across [`Graph::backward`]
/// calls: a second backward without [`Graph::zero_grad`] doubles them.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    fault: Option<String>,
}

pub(crate) fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales the backward rule of every node named `op` by 1.5. Used to
    /// confirm that gradient checks catch a broken rule.
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.push(out, op, &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, op, &[a, b]))
    }

    /// Matrix product of `a: m x k` and `b: k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = gemm::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::Matmul(a, b), &[a, b]))
    }

    /// `x w + b` for `x: m x k`, `w: k x n` and `b: n`, in one pass.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(shape_err("affine", sx, sw));
        }
        if sb.len() != 1 || sb[0] != sw[1] {
            return Err(shape_err("affine", sw, sb));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut c = Vec::with_capacity(m * n);
        for _ in 0..m {
            c.extend_from_slice(self.data(b));
        }
        gemm::gemm(
            m,
            k,
            n,
            1.0,
            View::row_major(self.data(x), k),
            View::row_major(self.data(w), n),
            1.0,
            ViewMut::row_major(&mut c, n),
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::Affine(x, w, b), &[x, w, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    fn cols_op(&mut self, name: &'static str, x: Var, b: Var, mul: bool) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = *sx.last().unwrap();
        if sb.len() != 1 || sb[0] != n {
            return Err(shape_err(name, sx, sb));
        }
        let bd = self.data(b);
        let data = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|row| {
                row.iter()
                    .zip(bd)
                    .map(move |(&v, &w)| if mul { v * w } else { v + w })
            })
            .collect();
        let out = Tensor::from_parts(sx.to_vec(), data);
        let op = if mul { Op::MulCols(x, b) } else { Op::AddCols(x, b) };
        Ok(self.push(out, op, &[x, b]))
    }

    /// Adds a vector along the last axis (bias broadcast).
    pub fn add_cols(&mut self, x: Var, b: Var) -> Result<Var> {
        self.cols_op("add_cols", x, b, false)
    }

    /// Multiplies by a vector along the last axis.
    pub fn mul_cols(&mut self, x: Var, g: Var) -> Result<Var> {
        self.cols_op("mul_cols", x, g, true)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `sum(a * b)`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| gelu(x).0)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= 0.0) {
            return Err(TensorError::Contract("log of non-positive value".into()));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where unclamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `sqrt(a^2 + b^2)` with a zero subgradient at the origin.
    pub fn magnitude(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("magnitude", a, b, Op::Magnitude(a, b), |x, y| x.hypot(y))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead || s.len() != first.len() {
                return Err(shape_err("concat_last", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Stacks `[n_i, d]` matrices into `[sum n_i, d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(shape_err("concat_rows", self.shape(parts[0]), s));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(TensorError::Contract(format!(
                "slice_cols [{start}, {}) out of range for {s:?}",
                start + len
            )));
        }
        let n = s[1];
        let m = s[0];
        let data = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    /// Mean over consecutive row groups: `[groups * n, d] -> [groups, d]`.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || groups == 0 || s[0] % groups != 0 {
            return Err(TensorError::Contract(format!(
                "group_mean: {groups} groups do not divide {s:?}"
            )));
        }
        let (rows, d) = (s[0], s[1]);
        let per = rows / groups;
        let xd = self.data(x);
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            let acc = &mut out[g * d..(g + 1) * d];
            for r in 0..per {
                add_into(acc, &xd[(g * per + r) * d..(g * per + r + 1) * d]);
            }
            for a in acc.iter_mut() {
                *a /= per as f64;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![groups, d], out),
            Op::GroupMean { x, groups },
            &[x],
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against constant targets.
    /// Probabilities are clamped to `[1e-12, 1 - 1e-12]` inside the logs.
    pub fn bce_mean(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let sp = self.shape(p);
        if target.len() != self.value(p).len() {
            return Err(shape_err("bce_mean", sp, target.shape()));
        }
        let n = target.len() as f64;
        let loss = self
            .data(p)
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceMean {
                p,
                target: target.data().to_vec(),
            },
            &[p],
        ))
    }

    /// Mean over `groups` equal slices of `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
    pub fn dice_loss(&mut self, p: Var, target: &Tensor, groups: usize, eps: f64) -> Result<Var> {
        let n = self.value(p).len();
        if target.len() != n {
            return Err(shape_err("dice_loss", self.shape(p), target.shape()));
        }
        if groups == 0 || n % groups != 0 {
            return Err(TensorError::Contract(format!(
                "dice_loss: {groups} groups do not divide {n}"
            )));
        }
        let per = n / groups;
        let pd = self.data(p);
        let mut loss = 0.0;
        for g in 0..groups {
            let (inter, denom) = dice_sums(&pd[g * per..(g + 1) * per], &target.data()[g * per..(g + 1) * per], eps);
            loss += 1.0 - (2.0 * inter + eps) / denom;
        }
        loss /= groups as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                p,
                target: target.data().to_vec(),
                groups,
                eps,
            },
            &[p],
        ))
    }

    /// Mean negative log-likelihood of rows of probabilities `[b, c]` at the
    /// given class indices.
    pub fn nll_mean(&mut self, p: Var, classes: &[usize]) -> Result<Var> {
        let s = self.shape(p).to_vec();
        if s.len() != 2 || s[0] != classes.len() {
            return Err(shape_err("nll_mean", &s, &[classes.len()]));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= s[1]) {
            return Err(TensorError::Contract(format!(
                "nll_mean: class {c} outside [0, {})",
                s[1]
            )));
        }
        let pd = self.data(p);
        let loss = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| -pd[i * s[1] + c].max(BCE_EPS).ln())
            .sum::<f64>()
            / classes.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllMean {
                p,
                classes: classes.to_vec(),
            },
            &[p],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against constant targets,
    /// evaluated from the logits so it neither overflows nor loses its
    /// gradient when the sigmoid saturates.
    pub fn bce_logits_mean(&mut self, z: Var, target: &Tensor) -> Result<Var> {
        if target.len() != self.value(z).len() {
            return Err(shape_err("bce_logits_mean", self.shape(z), target.shape()));
        }
        let n = target.len() as f64;
        let loss = self
            .data(z)
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                z,
                target: target.data().to_vec(),
            },
            &[z],
        ))
    }

    /// Mean negative log-softmax of logit rows `[b, c]` at the given classes.
    pub fn cross_entropy_mean(&mut self, z: Var, classes: &[usize]) -> Result<Var> {
        let s = self.shape(z).to_vec();
        if s.len() != 2 || s[0] != classes.len() {
            return Err(shape_err("cross_entropy_mean", &s, &[classes.len()]));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= s[1]) {
            return Err(TensorError::Contract(format!(
                "cross_entropy_mean: class {c} outside [0, {})",
                s[1]
            )));
        }
        let loss = self
            .data(z)
            .chunks_exact(s[1])
            .zip(classes)
            .map(|(row, &c)| log_sum_exp(row) - row[c])
            .sum::<f64>()
            / classes.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                z,
                classes: classes.to_vec(),
            },
            &[z],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into every leaf
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let mut contribs = self.backward_node(i, &g);
            if let Some(f) = &self.fault {
                if f == self.nodes[i].op.name() {
                    for (_, c) in &mut contribs {
                        c.iter_mut().for_each(|v| *v *= 1.5);
                    }
                }
            }
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc, &c),
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Matmul(a, b) | Op::Affine(a, b, _) => {
                if let Op::Affine(_, w, bias) = &node.op {
                    if needs(*bias) {
                        let n = self.shape(*w)[1];
                        let mut db = vec![0.0; n];
                        for row in g.chunks_exact(n) {
                            add_into(&mut db, row);
                        }
                        res.push((*bias, db));
                    }
                }
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm::gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::row_major(g, n),
                        View::transposed(self.data(*b), n),
                        0.0,
                        ViewMut::row_major(&mut da, k),
                    );
                    res.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm::gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::transposed(self.data(*a), k),
                        View::row_major(g, n),
                        0.0,
                        ViewMut::row_major(&mut db, n),
                    );
                    res.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    res.push((*a, g.iter().zip(db).map(|(g, y)| g * y).collect()));
                }
                if needs(*b) {
                    res.push((*b, g.iter().zip(da).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|v| v * c).collect())),
            Op::AddScalar(a) | Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::AddCols(x, b) => {
                let n = self.shape(*b)[0];
                if needs(*b) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        add_into(&mut db, row);
                    }
                    res.push((*b, db));
                }
                res.push((*x, g.to_vec()));
            }
            Op::MulCols(x, w) => {
                let n = self.shape(*w)[0];
                let (xd, wd) = (self.data(*x), self.data(*w));
                if needs(*w) {
                    let mut dw = vec![0.0; n];
                    for (grow, xrow) in g.chunks_exact(n).zip(xd.chunks_exact(n)) {
                        for j in 0..n {
                            dw[j] += grow[j] * xrow[j];
                        }
                    }
                    res.push((*w, dw));
                }
                if needs(*x) {
                    let dx = g
                        .chunks_exact(n)
                        .flat_map(|r| r.iter().zip(wd).map(|(g, w)| g * w))
                        .collect();
                    res.push((*x, dx));
                }
            }
            Op::Sum(a) => res.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                res.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::Sigmoid(a) => res.push((
                *a,
                g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )),
            Op::Gelu(a) => res.push((
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| g * gelu(x).1)
                    .collect(),
            )),
            Op::Log(a) => res.push((
                *a,
                g.iter().zip(self.data(*a)).map(|(g, x)| g / x).collect(),
            )),
            Op::Exp(a) => res.push((*a, g.iter().zip(out).map(|(g, y)| g * y).collect())),
            Op::Clamp(a, lo, hi) => res.push((
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x < *lo || x > *hi { 0.0 } else { *g })
                    .collect(),
            )),
            Op::Magnitude(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let rule = |num: &[f64]| -> Vec<f64> {
                    g.iter()
                        .zip(num)
                        .zip(out)
                        .map(|((g, n), m)| if *m > 0.0 { g * n / m } else { 0.0 })
                        .collect()
                };
                if needs(*a) {
                    res.push((*a, rule(ad)));
                }
                if needs(*b) {
                    res.push((*b, rule(bd)));
                }
            }
            Op::SoftmaxRows(a) => {
                let n = *self.shape(*a).last().unwrap();
                res.push((*a, super::nn::softmax_backward(out, g, n)));
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *self.shape(*x).last().unwrap();
                res.push((*x, super::nn::layer_norm_backward(out, g, inv_std, n)));
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                scale,
                probs,
            } => {
                let grads = super::nn::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    *batch,
                    *heads,
                    *scale,
                );
                res.push((*q, grads.0));
                res.push((*k, grads.1));
                res.push((*v, grads.2));
            }
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
                cols,
            } => {
                let (dx, dk) = super::conv::conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    cols,
                    g,
                    *stride,
                    *padding,
                    needs(*x),
                    needs(*k),
                );
                if let Some(dx) = dx {
                    res.push((*x, dx));
                }
                if let Some(dk) = dk {
                    res.push((*k, dk));
                }
            }
            Op::PadEdge { x, py, px } => {
                res.push((*x, super::conv::pad_edge_backward(self.shape(*x), g, *py, *px)));
            }
            Op::Resample { x, plan } => {
                res.push((*x, plan.backward(self.shape(*x), g)));
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (o, &w) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                res.extend(parts.iter().copied().zip(outs));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    res.push((*p, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, grow) in g.chunks_exact(len).enumerate() {
                    dx[r * n + start..r * n + start + len].copy_from_slice(grow);
                }
                res.push((*x, dx));
            }
            Op::GroupMean { x, groups } => {
                let s = self.shape(*x);
                let (rows, d) = (s[0], s[1]);
                let per = rows / groups;
                let mut dx = Vec::with_capacity(rows * d);
                for gi in 0..*groups {
                    for _ in 0..per {
                        dx.extend(g[gi * d..(gi + 1) * d].iter().map(|v| v / per as f64));
                    }
                }
                res.push((*x, dx));
            }
            Op::BceMean { p, target } => {
                let n = target.len() as f64;
                let dp = self
                    .data(*p)
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p < BCE_EPS || p > 1.0 - BCE_EPS {
                            return 0.0;
                        }
                        g[0] * (p - t) / (p * (1.0 - p)) / n
                    })
                    .collect();
                res.push((*p, dp));
            }
            Op::Dice {
                p,
                target,
                groups,
                eps,
            } => {
                let pd = self.data(*p);
                let per = pd.len() / groups;
                let mut dp = Vec::with_capacity(pd.len());
                for gi in 0..*groups {
                    let ps = &pd[gi * per..(gi + 1) * per];
                    let ts = &target[gi * per..(gi + 1) * per];
                    let (inter, denom) = dice_sums(ps, ts, *eps);
                    let numer = 2.0 * inter + eps;
                    let c = -g[0] / *groups as f64;
                    dp.extend(ts.iter().map(|&t| c * (2.0 * t * denom - numer) / (denom * denom)));
                }
                res.push((*p, dp));
            }
            Op::NllMean { p, classes } => {
                let c = self.shape(*p)[1];
                let b = classes.len() as f64;
                let pd = self.data(*p);
                let mut dp = vec![0.0; pd.len()];
                for (i, &cls) in classes.iter().enumerate() {
                    let v = pd[i * c + cls];
                    if v >= BCE_EPS {
                        dp[i * c + cls] = -g[0] / (b * v);
                    }
                }
                res.push((*p, dp));
            }
            Op::BceLogits { z, target } => {
                let scale = g[0] / target.len() as f64;
                let dz = self.data(*z).iter().zip(target).map(|(&z, &t)| scale * (sigmoid(z) - t)).collect();
                res.push((*z, dz));
            }
            Op::CrossEntropy { z, classes } => {
                let c = self.shape(*z)[1];
                let scale = g[0] / classes.len() as f64;
                let mut dz = Vec::with_capacity(self.value(*z).len());
                for (row, &cls) in self.data(*z).chunks_exact(c).zip(classes) {
                    let lse = log_sum_exp(row);
                    dz.extend(row.iter().enumerate().map(|(j, &v)| scale * ((v - lse).exp() - f64::from(u8::from(j == cls)))));
                }
                res.push((*z, dz));
            }
        }
        res
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

const BCE_EPS: f64 = 1e-12;

fn dice_sums(p: &[f64], t: &[f64], eps: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&p, &t) in p.iter().zip(t) {
        inter += p * t;
        sp += p;
        st += t;
    }
    (inter, sp + st + eps)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU value and derivative (tanh form).
pub(crate) fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    // tanh through one exp; saturates cleanly to +-1 when exp overflows.
    let t = 1.0 - 2.0 / ((2.0 * inner).exp() + 1.0);
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}
