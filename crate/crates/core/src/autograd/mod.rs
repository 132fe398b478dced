//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes
//! are appended in evaluation order, so the tape is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Gradients are only
//! materialized for nodes that transitively depend on a parameter leaf.

mod gradcheck;
pub mod kernels;

pub use gradcheck::{finite_diff_check, FdConfig, FdFailure, FdReport};

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Parameter name → gradient.
pub type GradStore = BTreeMap<String, Tensor>;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is `rows × 1`
    Col,
    /// rhs is `1 × cols`
    Row,
    /// rhs is `1 × 1`
    Scalar,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Silu(Var),
    Relu(Var),
    Powf(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Outer(Var, Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    SliceCols(Var, usize),
    CausalConv {
        x: Var,
        kernel: Var,
        bias: Var,
        seq_len: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    RowNorm(Var),
    FrobeniusNorm(Var),
    SumAll(Var),
    MeanAll(Var),
    Scan {
        a_bar: Var,
        b_bar: Var,
        x: Var,
        mask: Vec<bool>,
        seq_len: usize,
    },
    Readout {
        h: Var,
        c: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Computation tape. Confined to one thread; independent graphs may be built
/// concurrently.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn bcast(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Bcast> {
    let [r, c] = lhs.shape();
    match rhs.shape() {
        [rr, rc] if rr == r && rc == c => Ok(Bcast::Same),
        [1, 1] => Ok(Bcast::Scalar),
        [rr, 1] if rr == r => Ok(Bcast::Col),
        [1, rc] if rc == c => Ok(Bcast::Row),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: lhs.shape(),
            rhs: rhs.shape(),
        }),
    }
}

fn binary_map(
    lhs: &Tensor,
    rhs: &Tensor,
    kind: Bcast,
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let cols = lhs.cols();
    let (l, r) = (lhs.data(), rhs.data());
    let mut data = Vec::with_capacity(l.len());
    match kind {
        Bcast::Same => data.extend(l.iter().zip(r).map(|(&a, &b)| f(a, b))),
        Bcast::Scalar => data.extend(l.iter().map(|&a| f(a, r[0]))),
        Bcast::Col => {
            for (row, &b) in l.chunks_exact(cols.max(1)).zip(r) {
                data.extend(row.iter().map(|&a| f(a, b)));
            }
        }
        Bcast::Row => {
            for row in l.chunks_exact(cols.max(1)) {
                data.extend(row.iter().zip(r).map(|(&a, &b)| f(a, b)));
            }
        }
    }
    Tensor::new(lhs.rows(), lhs.cols(), data).expect("shape preserved")
}

/// Reduce a full-shape gradient onto a broadcast operand's shape.
fn reduce_to(kind: Bcast, g: &Tensor, rhs_shape: [usize; 2]) -> Tensor {
    let mut out = Tensor::zeros(rhs_shape[0], rhs_shape[1]);
    let cols = g.cols().max(1);
    let o = out.data_mut();
    match kind {
        Bcast::Same => return g.clone(),
        Bcast::Scalar => o[0] = tensor::pairwise_sum(g.data()),
        Bcast::Col => {
            for (acc, row) in o.iter_mut().zip(g.data().chunks_exact(cols)) {
                *acc = row.iter().sum();
            }
        }
        Bcast::Row => {
            for row in g.data().chunks_exact(cols) {
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf. Its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value, no gradient flows back through the result.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast("add", self.value(a), self.value(b))?;
        let value = binary_map(self.value(a), self.value(b), kind, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b, kind), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast("sub", self.value(a), self.value(b))?;
        let value = binary_map(self.value(a), self.value(b), kind, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b, kind), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast("mul", self.value(a), self.value(b))?;
        let value = binary_map(self.value(a), self.value(b), kind, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b, kind), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast("div", self.value(a), self.value(b))?;
        if self.value(b).data().contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let value = binary_map(self.value(a), self.value(b), kind, |x, y| x / y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Div(a, b, kind), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("log", "argument must be positive"));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, silu, Op::Silu(a))
    }

    /// `max(0, x)`, the hinge.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 && self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::domain("powf", "fractional power of a negative value"));
        }
        Ok(self.unary(a, |x| x.powf(p), Op::Powf(a, p)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// `max(x, lo)`; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    /// Row-wise outer product: `(m, p) ⊗ (m, q) → (m, p·q)` with the
    /// `p` index major.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "outer",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(m * p * q);
        for r in 0..m {
            for &x in av.row(r) {
                out.extend(bv.row(r).iter().map(|&y| x * y));
            }
        }
        let value = Tensor::new(m, p * q, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Outer(a, b), rg))
    }

    /// Select rows by index (embedding lookup, position selection).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::domain(
                "gather_rows",
                format!("index {bad} out of range for {} rows", av.rows()),
            ));
        }
        let cols = av.cols();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            out.extend_from_slice(av.row(i));
        }
        let value = Tensor::new(idx.len(), cols, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherRows(a, idx), rg))
    }

    /// Rows of `a` whose mask entry is true.
    pub fn masked_select(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(a).rows() {
            return Err(Error::ShapeMismatch {
                op: "masked_select",
                lhs: self.value(a).shape(),
                rhs: [mask.len(), 1],
            });
        }
        let idx = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        self.gather_rows(a, idx)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let value = Tensor::new(av.rows() + bv.rows(), av.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatRows(a, b), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::domain(
                "slice_cols",
                format!("columns {start}..{} of {}", start + len, av.cols()),
            ));
        }
        let mut out = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let value = Tensor::new(av.rows(), len, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Depthwise causal convolution along the sequence axis of a
    /// `(batch · seq_len) × channels` input, left-padded with `width − 1`
    /// zeros. `kernel` is `width × channels`, `bias` is `1 × channels`.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var, seq_len: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        if seq_len == 0 || xv.rows() % seq_len != 0 {
            return Err(Error::domain(
                "causal_conv1d",
                format!("{} rows is not a whole number of length-{seq_len} sequences", xv.rows()),
            ));
        }
        if kv.cols() != xv.cols() || kv.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "causal_conv1d",
                lhs: xv.shape(),
                rhs: kv.shape(),
            });
        }
        if bv.shape() != [1, xv.cols()] {
            return Err(Error::ShapeMismatch {
                op: "causal_conv1d",
                lhs: xv.shape(),
                rhs: bv.shape(),
            });
        }
        let value = kernels::causal_conv1d(xv, kv, bv, seq_len);
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(
            value,
            Op::CausalConv {
                x,
                kernel,
                bias,
                seq_len,
            },
            rg,
        ))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (`1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = xv.cols();
        if gv.shape() != [1, cols] || bv.shape() != [1, cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape(),
                rhs: gv.shape(),
            });
        }
        let (normalized, inv_std) = kernels::normalize_rows(xv, LAYER_NORM_EPS);
        let mut value = normalized.clone();
        for r in 0..value.rows() {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * gv.data()[c] + bv.data()[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> Var {
        if !train || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.rows(), av.cols(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(value, Op::Dropout(a, mask), rg)
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lv.shape(),
                rhs: [targets.len(), 1],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::domain(
                "softmax_cross_entropy",
                format!("target {t} out of range for {} classes", lv.cols()),
            ));
        }
        let (probs, loss) = kernels::softmax_xent(lv, targets);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Euclidean norm of each row, `m × 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows())
            .map(|r| tensor::dot(av.row(r), av.row(r)).sqrt())
            .collect();
        let value = Tensor::column(data);
        let rg = self.rg(&[a]);
        self.push(value, Op::RowNorm(a), rg)
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).frobenius());
        let rg = self.rg(&[a]);
        self.push(value, Op::FrobeniusNorm(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(tensor::pairwise_sum(self.value(a).data()));
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::domain("mean", "empty tensor"));
        }
        let value = Tensor::scalar(tensor::pairwise_sum(self.value(a).data()) / n as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MeanAll(a), rg))
    }

    /// Full selective scan over `(batch · seq_len)` rows. Returns every
    /// hidden state `h_t` flattened to `(batch · seq_len) × (d_s · d)`.
    ///
    /// `h_t = ā_t · h_{t−1} + b̄_t ⊗ x_t` on unmasked steps, `h_t = h_{t−1}`
    /// on masked ones, `h_0 = 0`.
    pub fn sequential_scan(
        &mut self,
        a_bar: Var,
        b_bar: Var,
        x: Var,
        mask: &[bool],
        seq_len: usize,
    ) -> Result<Var> {
        let (av, bv, xv) = (self.value(a_bar), self.value(b_bar), self.value(x));
        let n = xv.rows();
        if av.shape() != [n, 1] || bv.rows() != n || mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "sequential_scan",
                lhs: xv.shape(),
                rhs: bv.shape(),
            });
        }
        if seq_len == 0 || n % seq_len != 0 {
            return Err(Error::domain(
                "sequential_scan",
                format!("{n} rows is not a whole number of length-{seq_len} sequences"),
            ));
        }
        let value = kernels::scan_states(av, bv, xv, mask, seq_len);
        let rg = self.rg(&[a_bar, b_bar, x]);
        Ok(self.push(
            value,
            Op::Scan {
                a_bar,
                b_bar,
                x,
                mask: mask.to_vec(),
                seq_len,
            },
            rg,
        ))
    }

    /// One recurrence step `ā · h_prev + b̄ ⊗ x` for a batch of states.
    /// `a_bar` is `m × 1`, `b_bar` is `m × d_s`, `x` is `m × d`.
    pub fn scan_step(&mut self, h_prev: Var, a_bar: Var, b_bar: Var, x: Var) -> Result<Var> {
        let decayed = self.mul(h_prev, a_bar)?;
        let input = self.outer(b_bar, x)?;
        self.add(decayed, input)
    }

    /// `y_t = h_tᵀ C_t` for every row, with `h` flattened `d_s × d`.
    pub fn readout(&mut self, h: Var, c: Var) -> Result<Var> {
        let (hv, cv) = (self.value(h), self.value(c));
        if hv.rows() != cv.rows() || cv.cols() == 0 || hv.cols() % cv.cols() != 0 {
            return Err(Error::ShapeMismatch {
                op: "readout",
                lhs: hv.shape(),
                rhs: cv.shape(),
            });
        }
        let value = kernels::readout(hv, cv);
        let rg = self.rg(&[h, c]);
        Ok(self.push(value, Op::Readout { h, c }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every named parameter; unreachable ones are zero.
    pub fn param_grads(&self, grads: &Gradients) -> GradStore {
        let mut out = GradStore::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                let g = grads.grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    let ga = tensor::matmul_nt(g, val(*b)).expect("shapes checked");
                    self.accumulate(grads, *a, ga);
                }
                if need(*b) {
                    let gb = tensor::matmul_tn(val(*a), g).expect("shapes checked");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                if need(*a) {
                    let ga = tensor::matmul(g, val(*b)).expect("shapes checked");
                    self.accumulate(grads, *a, ga);
                }
                if need(*b) {
                    let gb = tensor::matmul_tn(g, val(*a)).expect("shapes checked");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b, k) | Op::Sub(a, b, k) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if need(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if need(*b) {
                    let mut gb = reduce_to(*k, g, val(*b).shape());
                    if sign < 0.0 {
                        gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, k) => {
                let (av, bv) = (val(*a), val(*b));
                if need(*a) {
                    let ga = binary_map(g, bv, *k, |gi, bi| gi * bi);
                    self.accumulate(grads, *a, ga);
                }
                if need(*b) {
                    let full = binary_map(g, av, Bcast::Same, |gi, ai| gi * ai);
                    self.accumulate(grads, *b, reduce_to(*k, &full, bv.shape()));
                }
            }
            Op::Div(a, b, k) => {
                let bv = val(*b);
                if need(*a) {
                    let ga = binary_map(g, bv, *k, |gi, bi| gi / bi);
                    self.accumulate(grads, *a, ga);
                }
                if need(*b) {
                    // d(a/b)/db = −(a/b)/b
                    let q = binary_map(out, bv, *k, |oi, bi| -oi / bi);
                    let full = binary_map(g, &q, Bcast::Same, |gi, qi| gi * qi);
                    self.accumulate(grads, *b, reduce_to(*k, &full, bv.shape()));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|v| -v)),
            Op::Exp(a) => {
                let ga = binary_map(g, out, Bcast::Same, |gi, oi| gi * oi);
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = binary_map(g, val(*a), Bcast::Same, |gi, ai| gi / ai);
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = binary_map(g, val(*a), Bcast::Same, |gi, ai| gi * sigmoid(ai));
                self.accumulate(grads, *a, ga);
            }
            Op::Silu(a) => {
                let ga = binary_map(g, val(*a), Bcast::Same, |gi, ai| {
                    let s = sigmoid(ai);
                    gi * (s + ai * s * (1.0 - s))
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = binary_map(g, val(*a), Bcast::Same, |gi, ai| if ai > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Powf(a, p) => {
                let p = *p;
                let ga = binary_map(g, val(*a), Bcast::Same, |gi, ai| gi * p * ai.powf(p - 1.0));
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                let ga = binary_map(g, val(*a), Bcast::Same, |gi, ai| if ai > lo { gi } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Outer(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, p, q) = (av.rows(), av.cols(), bv.cols());
                if need(*a) {
                    let mut ga = Tensor::zeros(m, p);
                    for r in 0..m {
                        let grow = g.row(r);
                        for i in 0..p {
                            ga.set(r, i, tensor::dot(&grow[i * q..(i + 1) * q], bv.row(r)));
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if need(*b) {
                    let mut gb = Tensor::zeros(m, q);
                    for r in 0..m {
                        let grow = g.row(r);
                        let arow = av.row(r);
                        let gbrow = gb.row_mut(r);
                        for (i, &ai) in arow.iter().enumerate() {
                            for (j, gbj) in gbrow.iter_mut().enumerate() {
                                *gbj += grow[i * q + j] * ai;
                            }
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::GatherRows(a, idx) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, s) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let split = av.len();
                if need(*a) {
                    let ga = Tensor::new(av.rows(), av.cols(), g.data()[..split].to_vec())
                        .expect("shape preserved");
                    self.accumulate(grads, *a, ga);
                }
                if need(*b) {
                    let gb = Tensor::new(bv.rows(), bv.cols(), g.data()[split..].to_vec())
                        .expect("shape preserved");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let len = g.cols();
                for r in 0..av.rows() {
                    ga.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CausalConv {
                x,
                kernel,
                bias,
                seq_len,
            } => {
                let (gx, gk, gb) = kernels::causal_conv1d_backward(g, val(*x), val(*kernel), *seq_len);
                if need(*x) {
                    self.accumulate(grads, *x, gx);
                }
                if need(*kernel) {
                    self.accumulate(grads, *kernel, gk);
                }
                if need(*bias) {
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let gv = val(*gamma);
                let cols = g.cols() as f64;
                if need(*x) {
                    let mut gx = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let gh: Vec<f64> = g
                            .row(r)
                            .iter()
                            .zip(gv.data())
                            .map(|(gi, gm)| gi * gm)
                            .collect();
                        let xh = normalized.row(r);
                        let mean_gh = gh.iter().sum::<f64>() / cols;
                        let mean_gh_xh = tensor::dot(&gh, xh) / cols;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (gh[c] - mean_gh - xh[c] * mean_gh_xh);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if need(*gamma) {
                    let prod = binary_map(g, normalized, Bcast::Same, |a, b| a * b);
                    self.accumulate(grads, *gamma, reduce_to(Bcast::Row, &prod, gv.shape()));
                }
                if need(*beta) {
                    self.accumulate(grads, *beta, reduce_to(Bcast::Row, g, val(*beta).shape()));
                }
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                let ga = Tensor::new(g.rows(), g.cols(), data).expect("shape preserved");
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / targets.len() as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let v = gl.get(r, t);
                    gl.set(r, t, v - 1.0);
                }
                gl.data_mut().iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, gl);
            }
            Op::RowNorm(a) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let norm = out.get(r, 0);
                    if norm > 0.0 {
                        let s = g.get(r, 0) / norm;
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = s * x;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::FrobeniusNorm(a) => {
                let norm = out.item();
                let av = val(*a);
                let ga = if norm > 0.0 {
                    let s = g.item() / norm;
                    av.map(|x| s * x)
                } else {
                    Tensor::zeros(av.rows(), av.cols())
                };
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, Tensor::full(av.rows(), av.cols(), g.item()));
            }
            Op::MeanAll(a) => {
                let av = val(*a);
                let v = g.item() / av.len() as f64;
                self.accumulate(grads, *a, Tensor::full(av.rows(), av.cols(), v));
            }
            Op::Scan {
                a_bar,
                b_bar,
                x,
                mask,
                seq_len,
            } => {
                let (ga, gb, gx) =
                    kernels::scan_backward(g, out, val(*a_bar), val(*b_bar), val(*x), mask, *seq_len);
                if need(*a_bar) {
                    self.accumulate(grads, *a_bar, ga);
                }
                if need(*b_bar) {
                    self.accumulate(grads, *b_bar, gb);
                }
                if need(*x) {
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Readout { h, c } => {
                let (gh, gc) = kernels::readout_backward(g, val(*h), val(*c));
                if need(*h) {
                    self.accumulate(grads, *h, gh);
                }
                if need(*c) {
                    self.accumulate(grads, *c, gc);
                }
            }
        }
    }
}
