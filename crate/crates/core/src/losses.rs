//! Recommendation cross-entropy and the two self-supervised alignment losses.
//!
//! The time-interval loss asks step sizes to order like the observed gaps
//! between interactions. The interest-state loss steps the final state one
//! step forward with the extension step, then one step back with the
//! backward recurrence `h_n ≈ P̄·ĥ_{n+1} + Q̄ ⊗ x_n`, and penalizes the
//! reconstruction error.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ingest::Batch;
use crate::model::{block_param, ForwardTrace, StepExtension};
use crate::tensor::{dot, Tensor};

/// Lower bound applied to the extension step before it divides anything.
pub const MIN_STEP: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mu1_train: f64,
    pub mu2_train: f64,
    pub mu1_test: f64,
    pub mu2_test: f64,
    /// Interval scale in seconds. `None` uses the median positive training
    /// interval.
    pub lambda: Option<f64>,
    pub block_size: usize,
    /// Exponent of the step-size divisor in the state loss.
    pub dilution_power: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu1_train: 0.1,
            mu2_train: 1.0,
            mu1_test: 1e-2,
            mu2_test: 1e-1,
            lambda: None,
            block_size: 10,
            dilution_power: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("mu1_train", self.mu1_train),
            ("mu2_train", self.mu2_train),
            ("mu1_test", self.mu1_test),
            ("mu2_test", self.mu2_test),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be a finite non-negative number"));
            }
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                errs.push("lambda must be positive".into());
            }
        }
        if self.block_size < 2 {
            errs.push("block_size must be at least 2".into());
        }
        if !self.dilution_power.is_finite() {
            errs.push("dilution_power must be finite".into());
        }
        errs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// Mean cross-entropy of `logits` rows against `targets`.
pub fn rec_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, targets)
}

/// Median of the strictly positive gaps between consecutive timestamps.
/// Falls back to 1 when there are none.
pub fn median_positive_interval<'a>(sequences: impl IntoIterator<Item = &'a [i64]>) -> f64 {
    let mut gaps: Vec<i64> = sequences
        .into_iter()
        .flat_map(|ts| ts.windows(2).map(|w| w[1] - w[0]))
        .filter(|&g| g > 0)
        .collect();
    if gaps.is_empty() {
        return 1.0;
    }
    gaps.sort_unstable();
    let n = gaps.len();
    if n % 2 == 1 {
        gaps[n / 2] as f64
    } else {
        (gaps[n / 2 - 1] as f64 + gaps[n / 2] as f64) / 2.0
    }
}

/// Index pairs compared by the time loss and their scaled interval gaps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimePairs {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    /// `(T_i − T_j) / λ`.
    pub ratio: Vec<f64>,
}

impl TimePairs {
    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

/// Enumerates within-block pairs.
///
/// `seq_index[r]` maps sequence positions `0..=n_r` of row `r` to rows of
/// the step-size column, and `intervals[r][k]` is the gap at position `k`.
/// Position 0 carries no gap and is skipped; positions `1..=n_r` are cut
/// into consecutive blocks of `block` and every `i < j` inside a block forms
/// a pair.
pub fn time_pairs(seq_index: &[Vec<usize>], intervals: &[&[f64]], lambda: f64, block: usize) -> Result<TimePairs> {
    if !(lambda > 0.0) {
        return Err(Error::domain("time_alignment_loss", format!("lambda {lambda} must be positive")));
    }
    if block < 2 {
        return Err(Error::domain("time_alignment_loss", "block size must be at least 2"));
    }
    if seq_index.len() != intervals.len() {
        return Err(Error::ShapeMismatch {
            op: "time_alignment_loss",
            lhs: [seq_index.len(), 1],
            rhs: [intervals.len(), 1],
        });
    }
    let mut pairs = TimePairs::default();
    for (idx, t) in seq_index.iter().zip(intervals) {
        if t.len() < idx.len() {
            return Err(Error::ShapeMismatch {
                op: "time_alignment_loss",
                lhs: [idx.len(), 1],
                rhs: [t.len(), 1],
            });
        }
        let positions = idx.len().saturating_sub(1);
        for start in (1..=positions).step_by(block) {
            let end = (start + block).min(positions + 1);
            for i in start..end {
                for j in i + 1..end {
                    pairs.left.push(idx[i]);
                    pairs.right.push(idx[j]);
                    pairs.ratio.push((t[i] - t[j]) / lambda);
                }
            }
        }
    }
    Ok(pairs)
}

/// Mean hinge `max(0, 1 − (Δ_i − Δ_j)·(T_i − T_j)/λ)` over `pairs`.
/// No pairs gives a constant zero.
pub fn time_alignment_loss(g: &mut Graph, delta_full: Var, pairs: &TimePairs) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let di = g.gather_rows(delta_full, pairs.left.clone())?;
    let dj = g.gather_rows(delta_full, pairs.right.clone())?;
    let diff = g.sub(di, dj)?;
    let ratio = g.constant(Tensor::column(pairs.ratio.clone()));
    let prod = g.mul(diff, ratio)?;
    let margin = g.neg(prod);
    let margin = g.add_scalar(margin, 1.0);
    let hinge = g.relu(margin);
    let total = g.sum(hinge);
    Ok(g.scale(total, 1.0 / pairs.len() as f64))
}

/// Time loss of a forward pass: the sequence step sizes followed by the
/// extension step, against the batch's intervals.
pub fn trace_time_loss(
    g: &mut Graph,
    trace: &ForwardTrace,
    ext: &StepExtension,
    batch: &Batch,
    lambda: f64,
    block: usize,
) -> Result<Var> {
    let delta_full = g.concat_rows(trace.delta, ext.delta)?;
    let n_flat = batch.rows() * batch.max_len;
    let seq_index: Vec<Vec<usize>> = (0..batch.rows())
        .map(|r| {
            let n = batch.lengths[r];
            let mut idx: Vec<usize> = (0..n).map(|k| batch.position(r, k)).collect();
            idx.push(n_flat + r);
            idx
        })
        .collect();
    let intervals: Vec<&[f64]> = (0..batch.rows()).map(|r| batch.intervals.row(r)).collect();
    let pairs = time_pairs(&seq_index, &intervals, lambda, block)?;
    time_alignment_loss(g, delta_full, &pairs)
}

/// `Q = x_n · W₂ + b₂`, no activation.
pub fn backward_projection(g: &mut Graph, x_n: Var, w2: Var, b2: Var) -> Result<Var> {
    let q = g.matmul(x_n, w2)?;
    g.add(q, b2)
}

/// Graph inputs of the state loss, one row per example.
#[derive(Clone, Copy, Debug)]
pub struct StateInputs {
    /// Final states, `d_s · d` columns.
    pub h_n: Var,
    pub x_n: Var,
    pub x_hat: Var,
    pub b_next: Var,
    pub delta_next: Var,
    /// The scalar `A`.
    pub a: Var,
    pub w2: Var,
    pub b2: Var,
}

impl StateInputs {
    pub fn from_trace(trace: &ForwardTrace, ext: &StepExtension) -> Self {
        let b = trace.block_index;
        Self {
            h_n: trace.h_n,
            x_n: trace.x_n,
            x_hat: ext.x_hat,
            b_next: ext.b,
            delta_next: ext.delta,
            a: trace.a,
            w2: trace.params.get(&block_param(b, "back_proj.weight")),
            b2: trace.params.get(&block_param(b, "back_proj.bias")),
        }
    }
}

/// Intermediate values of the state loss. Per-example quantities have one
/// row per example; states are flattened `d_s · d`.
#[derive(Clone, Debug)]
pub struct StateAlignIntermediates {
    pub a: f64,
    /// Step sizes after clamping.
    pub delta: Vec<f64>,
    /// `ln(−1/A) / Δ`; reported only, `P̄` is formed directly.
    pub p: Vec<f64>,
    /// `−1/A`.
    pub p_bar: f64,
    pub q: Tensor,
    pub q_bar: Tensor,
    pub h_next: Tensor,
    pub h_back: Tensor,
    /// `Q − (−A⁻¹·B_{n+1})`.
    pub eps: Tensor,
    /// Per-example loss before the batch mean.
    pub per_example: Vec<f64>,
    /// Number of step sizes raised to [`MIN_STEP`].
    pub clamped: usize,
}

/// `mean_r ‖h_n − (P̄·ĥ_{n+1} + Q̄ ⊗ x_n)‖ / Δ^power` with
/// `ĥ_{n+1} = exp(ΔA)·h_n + (Δ·B_{n+1}) ⊗ x̂`, `P̄ = −1/A`, `Q̄ = Δ·Q`.
pub fn state_alignment_loss(
    g: &mut Graph,
    inp: &StateInputs,
    power: f64,
) -> Result<(Var, StateAlignIntermediates)> {
    let a_val = g.value(inp.a).item();
    if !(a_val < 0.0) {
        return Err(Error::StabilityViolated(a_val));
    }
    let clamped = g.value(inp.delta_next).data().iter().filter(|&&v| !(v >= MIN_STEP)).count();
    let delta = g.clamp_min(inp.delta_next, MIN_STEP);

    let da = g.mul(delta, inp.a)?;
    let a_next = g.exp(da);
    let b_bar = g.mul(inp.b_next, delta)?;
    let h_next = g.scan_step(inp.h_n, a_next, b_bar, inp.x_hat)?;

    let one = g.constant(Tensor::scalar(1.0));
    let neg_a = g.neg(inp.a);
    let p_bar = g.div(one, neg_a)?;
    let q = backward_projection(g, inp.x_n, inp.w2, inp.b2)?;
    let q_bar = g.mul(q, delta)?;
    let carried = g.mul(h_next, p_bar)?;
    let injected = g.outer(q_bar, inp.x_n)?;
    let h_back = g.add(carried, injected)?;

    let diff = g.sub(inp.h_n, h_back)?;
    let norms = g.row_norm(diff);
    let dil = g.powf(delta, power)?;
    let per = g.div(norms, dil)?;
    let loss = g.mean(per)?;

    let delta_v: Vec<f64> = g.value(delta).data().to_vec();
    let p_bar_v = g.value(p_bar).item();
    let q_v = g.value(q).clone();
    let b_v = g.value(inp.b_next);
    let mut eps = q_v.clone();
    for r in 0..eps.rows() {
        for (e, &b) in eps.row_mut(r).iter_mut().zip(b_v.row(r)) {
            *e -= p_bar_v * b;
        }
    }
    let inter = StateAlignIntermediates {
        a: a_val,
        p: delta_v.iter().map(|&d| (-1.0 / a_val).ln() / d).collect(),
        delta: delta_v,
        p_bar: p_bar_v,
        q: q_v,
        q_bar: g.value(q_bar).clone(),
        h_next: g.value(h_next).clone(),
        h_back: g.value(h_back).clone(),
        eps,
        per_example: g.value(per).data().to_vec(),
        clamped,
    };
    Ok((loss, inter))
}

/// State loss of a forward pass.
pub fn trace_state_loss(
    g: &mut Graph,
    trace: &ForwardTrace,
    ext: &StepExtension,
    power: f64,
) -> Result<(Var, StateAlignIntermediates)> {
    state_alignment_loss(g, &StateInputs::from_trace(trace, ext), power)
}

/// Plain values feeding the bound, one row per example.
#[derive(Clone, Debug)]
pub struct BoundInputs<'a> {
    pub h_n: &'a Tensor,
    pub x_n: &'a Tensor,
    pub x_hat: &'a Tensor,
    pub b_next: &'a Tensor,
    pub a: f64,
}

impl<'a> BoundInputs<'a> {
    pub fn from_graph(g: &'a Graph, inp: &StateInputs) -> Self {
        Self {
            h_n: g.value(inp.h_n),
            x_n: g.value(inp.x_n),
            x_hat: g.value(inp.x_hat),
            b_next: g.value(inp.b_next),
            a: g.value(inp.a).item(),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Per-example upper bound on the state loss with dilution power 2:
///
/// `‖h_n‖/Δ² + ‖x_n‖·‖ε‖/Δ + |A|⁻¹·‖B_{n+1}‖·‖x_n − x̂‖/Δ`.
///
/// Requires `A ≤ −1`. The last term as stated does not dominate the true
/// residual, which involves `x_n + x̂`; see [`sign_corrected_bound`].
pub fn theorem_bound(inp: &BoundInputs, inter: &StateAlignIntermediates) -> Result<Vec<f64>> {
    bound_with(inp, inter, -1.0)
}

/// The bound with the third term's residual taken as `‖x_n + x̂‖`, which the
/// triangle inequality does guarantee.
pub fn sign_corrected_bound(inp: &BoundInputs, inter: &StateAlignIntermediates) -> Result<Vec<f64>> {
    bound_with(inp, inter, 1.0)
}

fn bound_with(inp: &BoundInputs, inter: &StateAlignIntermediates, sign: f64) -> Result<Vec<f64>> {
    if inp.a > -1.0 {
        return Err(Error::BoundPrecondition(inp.a));
    }
    let inv_a = 1.0 / inp.a.abs();
    Ok((0..inp.h_n.rows())
        .map(|r| {
            let d = inter.delta[r];
            let x = inp.x_n.row(r);
            let resid: Vec<f64> = x.iter().zip(inp.x_hat.row(r)).map(|(a, b)| a + sign * b).collect();
            norm(inp.h_n.row(r)) / (d * d)
                + norm(x) * norm(inter.eps.row(r)) / d
                + inv_a * norm(inp.b_next.row(r)) * norm(&resid) / d
        })
        .collect())
}

/// Train: `L_rec + μ1·L_time + μ2·L_state`; test: `μ1·L_time + μ2·L_state`
/// with the test-phase weights.
pub fn total_loss(
    g: &mut Graph,
    rec: Option<Var>,
    time: Var,
    state: Var,
    w: &LossWeights,
    phase: Phase,
) -> Result<Var> {
    let (mu1, mu2) = match phase {
        Phase::Train => (w.mu1_train, w.mu2_train),
        Phase::Test => (w.mu1_test, w.mu2_test),
    };
    let t = g.scale(time, mu1);
    let s = g.scale(state, mu2);
    let ssl = g.add(t, s)?;
    match phase {
        Phase::Train => {
            let rec = rec.ok_or_else(|| Error::Invalid("training loss needs the recommendation term".into()))?;
            g.add(rec, ssl)
        }
        Phase::Test => Ok(ssl),
    }
}
