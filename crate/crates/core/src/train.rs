//! Data preparation and the Adam training loop with periodic validation and
//! early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::evaluate_frozen;
use crate::autograd::Graph;
use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::ingest::{
    filter_min_interactions, leave_one_out_split, load_tsv, make_batches, synth_shift_generate, Example, InteractionDataset,
    SplitDataset, SplitManifest,
};
use crate::losses::{median_positive_interval, rec_loss, total_loss, trace_state_loss, trace_time_loss, Phase};
use crate::model::{Mode, ModelParams};
use crate::optim::{adam_step, AdamState, EarlyStopper, StopDecision};

pub struct PreparedData {
    pub dataset: InteractionDataset,
    pub split: SplitDataset,
    /// Interval scale used by the time loss.
    pub lambda: f64,
    pub manifest: SplitManifest,
}

/// Loads or generates the interactions, filters, splits and resolves `λ`.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let raw = match &cfg.data.source {
        DataSource::Synth { config, seed } => synth_shift_generate(config, *seed)?,
        DataSource::Tsv { path, schema } => load_tsv(path, schema)?,
    };
    let dataset = filter_min_interactions(&raw, cfg.data.min_interactions)?;
    let split = leave_one_out_split(&dataset)?;
    let lambda = cfg.loss.lambda.unwrap_or_else(|| {
        median_positive_interval(dataset.users.iter().map(|u| &u.timestamps[..u.timestamps.len() - 2]))
    });
    let manifest = split.manifest(&dataset);
    Ok(PreparedData {
        dataset,
        split,
        lambda,
        manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Row-weighted means over the epoch's batches.
    pub loss: f64,
    pub rec: f64,
    pub time: f64,
    pub state: f64,
    pub clamped_steps: usize,
    pub valid: Option<MetricsReport>,
}

pub struct TrainOutcome {
    /// Parameters of the best validation evaluation.
    pub model: ModelParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_ndcg: f64,
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(cfg: &RunConfig, data: &PreparedData) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = cfg.model.dims(data.dataset.num_items());
    let mut model = ModelParams::init(dims, &mut rng)?;
    train_from(cfg, data, &mut model, &mut rng)
}

fn train_from(cfg: &RunConfig, data: &PreparedData, model: &mut ModelParams, rng: &mut ChaCha8Rng) -> Result<TrainOutcome> {
    let opts = cfg.model.options();
    let tc = &cfg.train;
    let mut adam = AdamState::new(tc.optimizer.clone(), &model.params);
    let mut stopper = EarlyStopper::new(tc.patience);
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..data.split.train.len()).collect();
    if order.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }

    for epoch in 1..=tc.epochs {
        order.shuffle(rng);
        bucket_by_length(&mut order, &data.split.train, tc.batch_size);
        let examples: Vec<_> = order.iter().map(|&i| data.split.train[i].clone()).collect();
        let mut sums = [0.0; 4];
        let mut clamped = 0;
        let mut batches = make_batches(&examples, cfg.data.max_len, tc.batch_size, cfg.data.pad_side)?;
        batches.shuffle(rng);
        for batch in batches {
            let mut g = Graph::new();
            let (trace, ext, logits) = model.forward_full(&mut g, &batch, Mode::Train, &opts, rng)?;
            let rec = rec_loss(&mut g, logits, &batch.target_item)?;
            let time = trace_time_loss(&mut g, &trace, &ext, &batch, data.lambda, cfg.loss.block_size)?;
            let (state, inter) = trace_state_loss(&mut g, &trace, &ext, cfg.loss.dilution_power)?;
            let total = total_loss(&mut g, Some(rec), time, state, &cfg.loss, Phase::Train)?;
            let values = [total, rec, time, state].map(|v| g.value(v).item());
            if !values.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}: total {} rec {} time {} state {}",
                    values[0], values[1], values[2], values[3]
                )));
            }
            let grads = g.param_grads(&g.backward(total)?);
            adam_step(&mut model.params, &grads, &mut adam)?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * batch.rows() as f64;
            }
            clamped += inter.clamped;
        }
        let n = examples.len() as f64;
        let mut entry = EpochLog {
            epoch,
            loss: sums[0] / n,
            rec: sums[1] / n,
            time: sums[2] / n,
            state: sums[3] / n,
            clamped_steps: clamped,
            valid: None,
        };
        let mut stop = false;
        if epoch % tc.eval_every == 0 || epoch == tc.epochs {
            let per = evaluate_frozen(
                model,
                &data.split.valid,
                &opts,
                cfg.eval.batch_size,
                cfg.data.max_len,
                cfg.data.pad_side,
                tc.k,
            )?;
            let report = MetricsReport::from_examples(&per, tc.k);
            let decision = stopper.observe(report.ndcg);
            if stopper.improved() {
                best = (model.clone(), epoch, report.ndcg);
            }
            stop = decision == StopDecision::Stop;
            entry.valid = Some(report);
        }
        log.push(entry);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        log,
        best_epoch: best.1,
        best_ndcg: best.2,
    })
}

/// Groups of this many batches are sorted by input length before cutting.
const BUCKET_SPAN: usize = 8;

/// Sorts each window of `BUCKET_SPAN` batches of a shuffled order by input
/// length so batches carry little padding. Ties keep the shuffled order.
fn bucket_by_length(order: &mut [usize], examples: &[Example], batch_size: usize) {
    for window in order.chunks_mut(batch_size.saturating_mul(BUCKET_SPAN).max(1)) {
        window.sort_by_key(|&i| examples[i].input_items().len());
    }
}

/// The log as JSON lines.
pub fn log_lines(log: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}
