//! Test-time alignment. Each batch gets `M` plain gradient steps on the two
//! self-supervised losses, is scored with the adapted parameters, and the
//! parameters are then restored bit for bit before the next batch.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::eval::{rank_metrics, RankMetrics};
use crate::ingest::{make_batches, Batch, Example, PadSide};
use crate::losses::{total_loss, trace_state_loss, trace_time_loss, LossWeights, Phase};
use crate::model::{mask_padding_logits, Mode, ModelOptions, ModelParams};
use crate::optim::{restore, sgd_step, snapshot};
use crate::tensor::{checksum, tensor_checksum, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
    pub use_time: bool,
    pub use_state: bool,
    /// Rows per adaptation batch; `None` adapts on the whole set at once.
    pub batch_size: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 1,
            lr: 0.005,
            use_time: true,
            use_state: true,
            batch_size: Some(256),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push("adapt.lr must be a finite non-negative number".into());
        }
        if self.batch_size == Some(0) {
            errs.push("adapt.batch_size must be positive".into());
        }
        errs
    }
}

/// Everything an adaptation pass needs besides the parameters.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub cfg: AdaptConfig,
    pub weights: LossWeights,
    pub lambda: f64,
    pub opts: ModelOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub time: f64,
    pub state: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub batch: usize,
    pub rows: usize,
    pub steps: Vec<StepLog>,
    /// Why adaptation stopped early, if it did.
    pub aborted: Option<String>,
    pub params_checksum: String,
    pub logits_checksum: String,
    pub restored: bool,
    pub clamped_steps: usize,
    pub adapt_seconds: f64,
    pub predict_seconds: f64,
}

/// Logits of a batch with the padding column at `−∞`.
pub fn predict_frozen(model: &ModelParams, batch: &Batch, opts: &ModelOptions) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = model.forward(&mut g, batch, Mode::Eval, opts, &mut rng)?;
    let logits = model.predict(&mut g, &trace)?;
    let mut out = g.value(logits).clone();
    mask_padding_logits(&mut out);
    Ok(out)
}

impl Adapter {
    fn step(&self, model: &mut ModelParams, batch: &Batch, step: usize, clamped: &mut usize) -> Result<StepLog> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = model.forward(&mut g, batch, Mode::Eval, &self.opts, &mut rng)?;
        let ext = model.extend_step(&mut g, &trace, &self.opts)?;
        let time = if self.cfg.use_time {
            trace_time_loss(&mut g, &trace, &ext, batch, self.lambda, self.weights.block_size)?
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        let state = if self.cfg.use_state {
            let (l, inter) = trace_state_loss(&mut g, &trace, &ext, self.weights.dilution_power)?;
            *clamped += inter.clamped;
            l
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        let total = total_loss(&mut g, None, time, state, &self.weights, Phase::Test)?;
        let log = StepLog {
            step,
            time: g.value(time).item(),
            state: g.value(state).item(),
            total: g.value(total).item(),
        };
        if !log.total.is_finite() {
            return Err(Error::NonFinite(format!("adaptation loss at step {step}")));
        }
        let grads = g.param_grads(&g.backward(total)?);
        sgd_step(&mut model.params, &grads, self.cfg.lr)?;
        Ok(log)
    }

    /// Adapts on `batch`, scores it, then restores `model`.
    ///
    /// A non-finite loss or gradient stops adaptation; the batch is then
    /// scored with the original parameters and the report says why.
    pub fn adapt_and_predict(&self, model: &mut ModelParams, batch: &Batch, index: usize) -> Result<(Tensor, AdaptReport)> {
        let snap = snapshot(&model.params);
        let start = Instant::now();
        let mut steps = Vec::with_capacity(self.cfg.steps);
        let mut aborted = None;
        let mut clamped = 0;
        for s in 0..self.cfg.steps {
            match self.step(model, batch, s, &mut clamped) {
                Ok(log) => steps.push(log),
                Err(e @ (Error::NonFinite(_) | Error::Domain { .. })) => {
                    restore(&mut model.params, &snap)?;
                    aborted = Some(e.to_string());
                    break;
                }
                Err(e) => {
                    restore(&mut model.params, &snap)?;
                    return Err(e);
                }
            }
        }
        let adapt_seconds = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let logits = predict_frozen(model, batch, &self.opts);
        let predict_seconds = start.elapsed().as_secs_f64();
        restore(&mut model.params, &snap)?;
        let logits = logits?;
        let params_checksum = checksum(&model.params);
        Ok((
            logits.clone(),
            AdaptReport {
                batch: index,
                rows: batch.rows(),
                steps,
                aborted,
                restored: params_checksum == snap.checksum(),
                params_checksum,
                logits_checksum: tensor_checksum(&logits),
                clamped_steps: clamped,
                adapt_seconds,
                predict_seconds,
            },
        ))
    }
}

/// Splits `examples` per the adaptation batch policy.
pub fn adaptation_batches(examples: &[Example], batch_size: Option<usize>, max_len: usize, pad_side: PadSide) -> Result<Vec<Batch>> {
    make_batches(examples, max_len, batch_size.unwrap_or(examples.len().max(1)), pad_side)
}

fn score(logits: &Tensor, batch: &Batch, k: usize) -> Vec<RankMetrics> {
    (0..batch.rows())
        .map(|r| rank_metrics(logits.row(r), batch.target_item[r], k))
        .collect()
}

/// Frozen-model metrics of every example, in input order.
pub fn evaluate_frozen(
    model: &ModelParams,
    examples: &[Example],
    opts: &ModelOptions,
    batch_size: usize,
    max_len: usize,
    pad_side: PadSide,
    k: usize,
) -> Result<Vec<RankMetrics>> {
    let mut out = Vec::with_capacity(examples.len());
    for b in make_batches(examples, max_len, batch_size, pad_side)? {
        out.extend(score(&predict_frozen(model, &b, opts)?, &b, k));
    }
    Ok(out)
}

/// Adapted metrics of every example, in input order, plus one report per
/// batch. Fails if the parameters do not end where they started.
pub fn evaluate_with_adaptation(
    model: &mut ModelParams,
    examples: &[Example],
    adapter: &Adapter,
    max_len: usize,
    pad_side: PadSide,
    k: usize,
) -> Result<(Vec<RankMetrics>, Vec<AdaptReport>)> {
    let initial = checksum(&model.params);
    let mut metrics = Vec::with_capacity(examples.len());
    let mut reports = Vec::new();
    for (i, b) in adaptation_batches(examples, adapter.cfg.batch_size, max_len, pad_side)?
        .iter()
        .enumerate()
    {
        let (logits, report) = adapter.adapt_and_predict(model, b, i)?;
        metrics.extend(score(&logits, b, k));
        reports.push(report);
    }
    let end = checksum(&model.params);
    if end != initial {
        return Err(Error::Checkpoint(format!("parameters drifted from {initial} to {end}")));
    }
    Ok((metrics, reports))
}
