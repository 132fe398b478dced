//! Command-line entry points. Each command resolves a [`RunConfig`], does its
//! work and writes JSON/CSV reports plus a `manifest.json` into the output
//! directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adapt::{evaluate_frozen, evaluate_with_adaptation, predict_frozen, AdaptReport, Adapter};
use crate::autograd::{finite_diff_check, FdConfig, FdReport, Graph};
use crate::config::{Preset, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{segment_deltas, throughput, MetricsReport, RankMetrics, SegmentDelta, ThroughputReport};
use crate::ingest::{make_batches, synth_shift_generate, Batch, Example, PadSide};
use crate::losses::{rec_loss, total_loss, trace_state_loss, trace_time_loss, LossWeights, Phase};
use crate::model::{load_checkpoint, save_checkpoint, Mode, ModelDims, ModelOptions, ModelParams};
use crate::tensor::{hex_digest, ParamMap};
use crate::train::{log_lines, prepare_data, train, PreparedData};

#[derive(Parser, Debug)]
#[command(name = "shiftrec", version, about = "Selective state-space recommender with test-time alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train and write the best checkpoint with a JSON-lines log.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Toggle::On)]
        ttt: Toggle,
    },
    /// Write the configured synthetic dataset as TSV.
    Gen(CommonArgs),
    /// Finite-difference check of every loss on a tiny model.
    Gradcheck(CommonArgs),
    /// Train and evaluate over a grid of training loss weights.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Values for both weights.
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.1, 1.0, 10.0])]
        grid: Vec<f64>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub ablate: Vec<Ablation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Drop the time loss in training and at test time.
    Time,
    /// Drop the state loss in training and at test time.
    State,
    TimeTrain,
    StateTrain,
    TimeTest,
    StateTest,
}

/// Applies ablations to a config.
pub fn apply_ablations(cfg: &mut RunConfig, ablations: &[Ablation]) {
    for a in ablations {
        match a {
            Ablation::Time => {
                cfg.loss.mu1_train = 0.0;
                cfg.adapt.use_time = false;
            }
            Ablation::State => {
                cfg.loss.mu2_train = 0.0;
                cfg.adapt.use_state = false;
            }
            Ablation::TimeTrain => cfg.loss.mu1_train = 0.0,
            Ablation::StateTrain => cfg.loss.mu2_train = 0.0,
            Ablation::TimeTest => cfg.adapt.use_time = false,
            Ablation::StateTest => cfg.adapt.use_state = false,
        }
    }
}

/// Config file (or defaults), then preset, then flags; validated.
pub fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = args.preset {
        cfg.apply_preset(p);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    apply_ablations(&mut cfg, &args.ablate);
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn file_sha256(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(path)?);
    Ok(hex_digest(h))
}

#[derive(Serialize)]
struct Manifest<'a, E: Serialize> {
    command: &'a str,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<&'a crate::ingest::SplitManifest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_sha256: Option<String>,
    details: E,
}

#[derive(Serialize)]
struct TrainDetails {
    best_epoch: usize,
    best_valid_ndcg: f64,
    epochs_run: usize,
}

/// Trains and writes `checkpoint.t2ar`, `train_log.jsonl` and the manifest.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out_dir(cfg)?;
    let data = prepare_data(cfg)?;
    let outcome = train(cfg, &data)?;
    fs::write(dir.join("train_log.jsonl"), log_lines(&outcome.log)?)?;
    let ckpt = dir.join("checkpoint.t2ar");
    save_checkpoint(&outcome.model, &ckpt)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command: "train",
            config: cfg,
            lambda: Some(data.lambda),
            data: Some(&data.manifest),
            checkpoint_sha256: Some(file_sha256(&ckpt)?),
            details: TrainDetails {
                best_epoch: outcome.best_epoch,
                best_valid_ndcg: outcome.best_ndcg,
                epochs_run: outcome.log.len(),
            },
        },
    )?;
    Ok(ckpt)
}

/// Test metrics of one evaluation mode with the per-segment breakdown.
#[derive(Clone, Debug, Serialize)]
pub struct EvalOutcome {
    pub metrics: MetricsReport,
    pub per_example: Vec<RankMetrics>,
    pub reports: Vec<AdaptReport>,
}

/// Indices of `test` per time segment, matching
/// [`crate::ingest::segment_test_by_time`].
pub fn segment_indices(test: &[Example], k: usize) -> Result<Vec<Vec<usize>>> {
    let segs = crate::ingest::segment_test_by_time(test, k)?;
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.sort_by_key(|&i| test[i].target_timestamp());
    let mut rest = order.into_iter();
    Ok(segs.iter().map(|s| rest.by_ref().take(s.len()).collect()).collect())
}

/// Overall and per-segment report from per-example metrics.
pub fn report_with_segments(per: &[RankMetrics], test: &[Example], segments: usize, k: usize) -> Result<MetricsReport> {
    let mut report = MetricsReport::from_examples(per, k);
    report.segments = segment_indices(test, segments)?
        .iter()
        .map(|idx| MetricsReport::from_examples(&idx.iter().map(|&i| per[i]).collect::<Vec<_>>(), k))
        .collect();
    Ok(report)
}

pub fn adapter_for(cfg: &RunConfig, lambda: f64) -> Adapter {
    Adapter {
        cfg: cfg.adapt.clone(),
        weights: cfg.loss.clone(),
        lambda,
        opts: ModelOptions {
            dropout: 0.0,
            ..cfg.model.options()
        },
    }
}

/// Evaluates `model` on `test`, adapted per batch when `ttt` is set.
pub fn evaluate_test(
    cfg: &RunConfig,
    model: &mut ModelParams,
    test: &[Example],
    lambda: f64,
    ttt: bool,
) -> Result<EvalOutcome> {
    let (per, reports) = if ttt {
        evaluate_with_adaptation(model, test, &adapter_for(cfg, lambda), cfg.data.max_len, cfg.data.pad_side, cfg.eval.k)?
    } else {
        let per = evaluate_frozen(
            model,
            test,
            &cfg.model.options(),
            cfg.eval.batch_size,
            cfg.data.max_len,
            cfg.data.pad_side,
            cfg.eval.k,
        )?;
        (per, Vec::new())
    };
    Ok(EvalOutcome {
        metrics: report_with_segments(&per, test, cfg.eval.segments, cfg.eval.k)?,
        per_example: per,
        reports,
    })
}

/// Frozen and adapted throughput on batches of `cfg.eval.batch_size`.
pub fn measure_throughput(
    cfg: &RunConfig,
    model: &mut ModelParams,
    test: &[Example],
    lambda: f64,
) -> Result<(ThroughputReport, ThroughputReport)> {
    let batches = make_batches(test, cfg.data.max_len, cfg.eval.batch_size, cfg.data.pad_side)?;
    let opts = cfg.model.options();
    let (w, r, bs) = (cfg.eval.throughput_warmup, cfg.eval.throughput_reps, cfg.eval.batch_size);
    let frozen = throughput(|b: &Batch| predict_frozen(model, b, &opts).map(drop), &batches, w, r, bs, false)?;
    let adapter = adapter_for(cfg, lambda);
    let adapted = throughput(|b: &Batch| adapter.adapt_and_predict(model, b, 0).map(drop), &batches, w, r, bs, true)?;
    Ok((frozen, adapted))
}

#[derive(Serialize)]
struct ThroughputFile {
    frozen: ThroughputReport,
    adapted: ThroughputReport,
    ratio: f64,
}

#[derive(Serialize)]
struct EvalDetails {
    ttt: bool,
    metrics: MetricsReport,
}

fn check_dims(cfg: &RunConfig, model: &ModelParams, vocab: usize) -> Result<()> {
    let want: ModelDims = cfg.model.dims(vocab);
    if want != model.dims {
        return Err(Error::ArchitectureMismatch(format!(
            "config expects {want:?}, checkpoint holds {:?}",
            model.dims
        )));
    }
    Ok(())
}

/// Writes `metrics.json`, `throughput.json`, `adapt_reports.jsonl` (with
/// adaptation) and the manifest.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, ttt: bool) -> Result<MetricsReport> {
    let dir = out_dir(cfg)?;
    let data = prepare_data(cfg)?;
    let mut model = load_checkpoint(checkpoint)?;
    check_dims(cfg, &model, data.dataset.num_items())?;
    let outcome = evaluate_test(cfg, &mut model, &data.split.test, data.lambda, ttt)?;
    write_json(&dir.join("metrics.json"), &outcome.metrics)?;
    if ttt {
        let mut f = fs::File::create(dir.join("adapt_reports.jsonl"))?;
        for r in &outcome.reports {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
    }
    let (frozen, adapted) = measure_throughput(cfg, &mut model, &data.split.test, data.lambda)?;
    write_json(
        &dir.join("throughput.json"),
        &ThroughputFile {
            ratio: adapted.iterations_per_second / frozen.iterations_per_second,
            frozen,
            adapted,
        },
    )?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command: "eval",
            config: cfg,
            lambda: Some(data.lambda),
            data: Some(&data.manifest),
            checkpoint_sha256: Some(file_sha256(checkpoint)?),
            details: EvalDetails {
                ttt,
                metrics: outcome.metrics.clone(),
            },
        },
    )?;
    Ok(outcome.metrics)
}

/// Writes `interactions.tsv` and the manifest.
pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out_dir(cfg)?;
    let crate::config::DataSource::Synth { config, seed } = &cfg.data.source else {
        return Err(Error::Config(vec!["gen needs a synthetic data source".into()]));
    };
    let ds = synth_shift_generate(config, *seed)?;
    let path = dir.join("interactions.tsv");
    ds.write_tsv(&path)?;
    #[derive(Serialize)]
    struct GenDetails {
        users: usize,
        items: usize,
        interactions: usize,
        tsv_sha256: String,
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command: "gen",
            config: cfg,
            lambda: None,
            data: None,
            checkpoint_sha256: None,
            details: GenDetails {
                users: ds.users.len(),
                items: ds.num_items() - 1,
                interactions: ds.num_interactions(),
                tsv_sha256: file_sha256(&path)?,
            },
        },
    )?;
    Ok(path)
}

/// A small random model and batch for gradient checks.
pub struct GradcheckCase {
    pub model: ModelParams,
    pub batch: Batch,
    pub lambda: f64,
    pub weights: LossWeights,
}

/// `d = 8`, `d_s = 4`, `n = 6`, `|V| = 20`, three rows of mixed length.
pub fn gradcheck_case(seed: u64) -> Result<GradcheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        vocab: 20,
        d: 8,
        d_state: 4,
        conv_width: 4,
        d_ff: 32,
        blocks: 1,
    };
    let mut model = ModelParams::init(dims, &mut rng)?;
    // Move A off the bound's edge and give biases non-trivial values.
    for (name, t) in model.params.iter_mut() {
        if name.ends_with("bias") || name.ends_with("beta") || name.ends_with(".b1") || name.ends_with(".b2") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        if name.ends_with("a_log") {
            t.data_mut()[0] = rng.random_range(-0.5..0.5);
        }
    }
    let examples: Vec<Example> = [6usize, 4, 6]
        .iter()
        .enumerate()
        .map(|(u, &n)| {
            let items: Vec<usize> = (0..n).map(|_| rng.random_range(1..20)).collect();
            let mut t = 0i64;
            let ts: Vec<i64> = (0..n)
                .map(|_| {
                    t += rng.random_range(1..100);
                    t
                })
                .collect();
            let target_ts = t + rng.random_range(1..100);
            Example::new(u, items, ts, rng.random_range(1..20), target_ts)
        })
        .collect::<Result<_>>()?;
    let batch = Batch::from_examples(&examples, 6, PadSide::Left)?;
    Ok(GradcheckCase {
        model,
        batch,
        lambda: 40.0,
        weights: LossWeights {
            block_size: 4,
            ..LossWeights::default()
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Rec,
    Time,
    State,
    Total,
}

/// Builds the chosen loss of `case` on `g` from `params`. Dropout is off
/// and the extension step is not detached, so the loss is a plain function
/// of every parameter.
pub fn case_loss(case: &GradcheckCase, kind: LossKind, params: &ParamMap, g: &mut Graph) -> Result<crate::autograd::Var> {
    let model = ModelParams {
        dims: case.model.dims.clone(),
        params: params.clone(),
    };
    let opts = ModelOptions {
        dropout: 0.0,
        detach_extension: false,
        ..ModelOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (trace, ext, logits) = model.forward_full(g, &case.batch, Mode::Eval, &opts, &mut rng)?;
    let rec = rec_loss(g, logits, &case.batch.target_item)?;
    let time = trace_time_loss(g, &trace, &ext, &case.batch, case.lambda, case.weights.block_size)?;
    let (state, _) = trace_state_loss(g, &trace, &ext, case.weights.dilution_power)?;
    match kind {
        LossKind::Rec => Ok(rec),
        LossKind::Time => Ok(time),
        LossKind::State => Ok(state),
        LossKind::Total => total_loss(g, Some(rec), time, state, &case.weights, Phase::Train),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckResult {
    pub seed: u64,
    pub loss: LossKind,
    pub report: FdReport,
}

pub fn gradcheck_suite(seed: u64, coords: usize) -> Result<Vec<GradcheckResult>> {
    let case = gradcheck_case(seed)?;
    [LossKind::Rec, LossKind::Time, LossKind::State, LossKind::Total]
        .into_iter()
        .map(|kind| {
            let cfg = FdConfig {
                coords,
                seed,
                ..FdConfig::default()
            };
            let report = finite_diff_check(&case.model.params, |p, g| case_loss(&case, kind, p, g), &cfg)?;
            Ok(GradcheckResult { seed, loss: kind, report })
        })
        .collect()
}

/// Writes `gradcheck.json`; fails if any coordinate disagrees.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<GradcheckResult>> {
    let dir = out_dir(cfg)?;
    let results = gradcheck_suite(cfg.seed, 24)?;
    write_json(&dir.join("gradcheck.json"), &results)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command: "gradcheck",
            config: cfg,
            lambda: None,
            data: None,
            checkpoint_sha256: None,
            details: (),
        },
    )?;
    if let Some(bad) = results.iter().find(|r| !r.report.passed()) {
        return Err(Error::NonFinite(format!(
            "gradient check failed for {:?} (max relative error {:.3e})",
            bad.loss, bad.report.max_rel_err
        )));
    }
    Ok(results)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub mu1_train: f64,
    pub mu2_train: f64,
    pub ttt: bool,
    pub recall: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

/// Trains one model per `(μ1, μ2)` in `grid × grid` and writes `sweep.csv`
/// with frozen and adapted test metrics.
pub fn cmd_sweep(cfg: &RunConfig, grid: &[f64]) -> Result<Vec<SweepRow>> {
    let dir = out_dir(cfg)?;
    let data: PreparedData = prepare_data(cfg)?;
    let mut rows = Vec::new();
    for &mu1 in grid {
        for &mu2 in grid {
            let mut c = cfg.clone();
            c.loss.mu1_train = mu1;
            c.loss.mu2_train = mu2;
            let mut model = train(&c, &data)?.model;
            for ttt in [false, true] {
                let m = evaluate_test(&c, &mut model, &data.split.test, data.lambda, ttt)?.metrics;
                rows.push(SweepRow {
                    mu1_train: mu1,
                    mu2_train: mu2,
                    ttt,
                    recall: m.recall,
                    mrr: m.mrr,
                    ndcg: m.ndcg,
                });
            }
        }
    }
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command: "sweep",
            config: cfg,
            lambda: Some(data.lambda),
            data: Some(&data.manifest),
            checkpoint_sha256: None,
            details: grid,
        },
    )?;
    Ok(rows)
}

/// Segment-wise `adapted − frozen` differences.
pub fn ttt_segment_deltas(frozen: &MetricsReport, adapted: &MetricsReport) -> Vec<SegmentDelta> {
    segment_deltas(&frozen.segments, &adapted.segments)
}

/// Runs the parsed command; the return value is the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => resolve_config(&a).and_then(|c| cmd_train(&c)).map(|p| {
            println!("checkpoint written to {}", p.display());
        }),
        Command::Eval { common, checkpoint, ttt } => resolve_config(&common)
            .and_then(|c| cmd_eval(&c, &checkpoint, ttt == Toggle::On))
            .map(|m| println!("recall@{k} {:.4}  mrr@{k} {:.4}  ndcg@{k} {:.4}", m.recall, m.mrr, m.ndcg, k = m.k)),
        Command::Gen(a) => resolve_config(&a).and_then(|c| cmd_gen(&c)).map(|p| {
            println!("dataset written to {}", p.display());
        }),
        Command::Gradcheck(a) => resolve_config(&a).and_then(|c| cmd_gradcheck(&c)).map(|r| {
            for x in r {
                println!("{:?}: max relative error {:.3e}", x.loss, x.report.max_rel_err);
            }
        }),
        Command::Sweep { common, grid } => resolve_config(&common)
            .and_then(|c| cmd_sweep(&c, &grid))
            .map(|rows| println!("{} sweep rows written", rows.len())),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
