//! Acceptance criteria. Prints one `PASS`/`FAIL` line per criterion straight
//! to stderr, so the lines show up even when the harness captures output.
//!
//! Criteria 4, 6 and 8 are reported but not asserted; README.md explains
//! why each of them is expected to be reported as it is. Every other
//! criterion must pass for the test to pass.

mod common;

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shiftrec::adapt::{adaptation_batches, evaluate_frozen, evaluate_with_adaptation};
use shiftrec::autograd::Graph;
use shiftrec::cli::{adapter_for, cmd_eval, cmd_train, evaluate_test, gradcheck_suite, measure_throughput};
use shiftrec::config::{DataSource, RunConfig};
use shiftrec::eval::{rank_metrics, MetricsReport};
use shiftrec::losses::{
    sign_corrected_bound, state_alignment_loss, theorem_bound, time_alignment_loss, time_pairs, BoundInputs, StateInputs,
};
use shiftrec::model::{decode_checkpoint, encode_checkpoint, ModelParams};
use shiftrec::tensor::{checksum, tensor_checksum};
use shiftrec::train::{prepare_data, train, PreparedData};
use shiftrec::Tensor;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn desk_config(seed: u64) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let mut cfg = RunConfig::load(&path).expect("desk config");
    cfg.seed = seed;
    if let DataSource::Synth { seed: s, .. } = &mut cfg.data.source {
        *s = seed;
    }
    cfg
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut min_checked = usize::MAX;
    for seed in 0..5 {
        for r in gradcheck_suite(seed, 24).expect("gradcheck") {
            worst = worst.max(r.report.max_rel_err);
            failures += r.report.failures.len();
            min_checked = min_checked.min(r.report.checked);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        failures == 0 && min_checked >= 20 && secs < 60.0,
        format!("4 losses x 5 seeds, >= {min_checked} coords each, max rel err {worst:.2e}, {failures} failures, {secs:.1}s"),
    )
}

fn scan_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let (d, ds) = (rng.random_range(1..6), rng.random_range(1..5));
        let pad = rng.random_range(0..n);
        // Row 0 is full, row 1 is left-padded by `pad`.
        let rows = 2 * n;
        let a: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<Vector> = (0..rows).map(|_| (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let x: Vec<Vector> = (0..rows).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mask: Vec<bool> = (0..rows).map(|i| i < n || i - n >= pad).collect();
        let mut g = Graph::new();
        let av = g.constant(Tensor::column(a.clone()));
        let bv = g.constant(Tensor::from_rows(&b).unwrap());
        let xv = g.constant(Tensor::from_rows(&x).unwrap());
        let h = g.sequential_scan(av, bv, xv, &mask, n).unwrap();
        let h = g.value(h);
        for (start, skip) in [(0, 0), (n, pad)] {
            let lo = start + skip;
            let want = naive_states(&a[lo..start + n], &b[lo..start + n], &x[lo..start + n]);
            for (t, w) in want.iter().enumerate() {
                let flat: Vec<f64> = w.iter().flatten().copied().collect();
                worst = worst.max(max_diff(h.row(lo + t), &flat));
            }
            for t in start..lo {
                worst = worst.max(h.row(t).iter().fold(0.0, |m, v| m.max(v.abs())));
            }
        }
    }
    verdict(worst <= 1e-12, format!("100 instances up to n=64, max abs diff {worst:.2e}"))
}

fn time_loss_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut worst_full, mut worst_block, mut scale_mismatch) = (0.0f64, 0.0f64, 0);
    for _ in 0..200 {
        let rows = rng.random_range(1..4);
        let seqs: Vec<(Vector, Vec<i64>)> = (0..rows)
            .map(|_| {
                let n = rng.random_range(1..30);
                let d = (0..=n).map(|_| rng.random_range(0.0..3.0)).collect();
                let t = (0..=n).map(|k| if k == 0 { 0 } else { rng.random_range(0..100_000) }).collect();
                (d, t)
            })
            .collect();
        let longest = seqs.iter().map(|s| s.0.len() - 1).max().unwrap();
        let lambda = rng.random_range(1..50_000) as f64;
        let eval = |block: usize, scale: i64| {
            let mut delta = Vec::new();
            let mut idx = Vec::new();
            let mut ts = Vec::new();
            for (d, t) in &seqs {
                idx.push((delta.len()..delta.len() + d.len()).collect::<Vec<_>>());
                delta.extend(d.iter().copied());
                ts.push(t.iter().map(|&v| (v * scale) as f64).collect::<Vec<f64>>());
            }
            let refs: Vec<&[f64]> = ts.iter().map(|t| t.as_slice()).collect();
            let pairs = time_pairs(&idx, &refs, lambda * scale as f64, block).unwrap();
            let mut g = Graph::new();
            let dv = g.constant(Tensor::column(delta));
            let l = time_alignment_loss(&mut g, dv, &pairs).unwrap();
            g.value(l).item()
        };
        let plain: Vec<(Vector, Vector)> =
            seqs.iter().map(|(d, t)| (d.clone(), t.iter().map(|&v| v as f64).collect())).collect();
        let full = brute_time_loss(&plain, lambda, usize::MAX / 2);
        worst_full = worst_full.max((eval(longest + 1 + rng.random_range(0..5), 1) - full).abs());
        let block = rng.random_range(2..=longest.max(2));
        let got = eval(block, 1);
        worst_block = worst_block.max((got - brute_time_loss(&plain, lambda, block)).abs());
        let c = rng.random_range(2..1000);
        if eval(block, c).to_bits() != got.to_bits() {
            scale_mismatch += 1;
        }
    }
    verdict(
        worst_full <= 1e-12 && worst_block <= 1e-12 && scale_mismatch == 0,
        format!(
            "200 instances: full-pair diff {worst_full:.2e}, within-block diff {worst_block:.2e}, \
             {scale_mismatch} scaling mismatches"
        ),
    )
}

fn bound() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut stated, mut corrected) = (0usize, 0usize);
    let mut worst_ratio = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..9);
        let ds = rng.random_range(1..5);
        let a = rng.random_range(-4.0..=-1.0);
        let delta = rng.random_range(0.05..=2.0);
        let mut g = Graph::new();
        let mut t = |r: usize, c: usize, g: &mut Graph| g.constant(Tensor::randn(r, c, 1.0, &mut rng));
        let inp = StateInputs {
            h_n: t(1, d * ds, &mut g),
            x_n: t(1, d, &mut g),
            x_hat: t(1, d, &mut g),
            b_next: t(1, ds, &mut g),
            delta_next: g.constant(Tensor::scalar(delta)),
            a: g.constant(Tensor::scalar(a)),
            w2: t(d, ds, &mut g),
            b2: t(1, ds, &mut g),
        };
        let (_, inter) = state_alignment_loss(&mut g, &inp, 2.0).unwrap();
        let loss = inter.per_example[0];
        let bi = BoundInputs::from_graph(&g, &inp);
        let s = theorem_bound(&bi, &inter).unwrap()[0];
        let c = sign_corrected_bound(&bi, &inter).unwrap()[0];
        if loss > s {
            stated += 1;
            worst_ratio = worst_ratio.max(loss / s);
        }
        if loss > c * (1.0 + 1e-12) {
            corrected += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        stated == 0 && secs < 30.0,
        format!(
            "1000 instances: {stated} violations of the stated bound (worst loss/bound {worst_ratio:.3}), \
             {corrected} of the sign-corrected bound, {secs:.1}s"
        ),
    )
}

fn hermeticity(cfg: &RunConfig, model: &ModelParams, data: &PreparedData) -> Verdict {
    let test = &data.split.test;
    let bytes = encode_checkpoint(model).unwrap();
    let mut m = decode_checkpoint(&bytes).unwrap();
    let reference = checksum(&m.params);
    let mut ok = true;
    let mut notes = Vec::new();

    for lr in [cfg.adapt.lr, 0.5] {
        let mut c = cfg.clone();
        c.adapt.lr = lr;
        let out = evaluate_test(&c, &mut m, test, data.lambda, true).unwrap();
        let same = checksum(&m.params) == reference && out.reports.iter().all(|r| r.restored);
        ok &= same;
        notes.push(format!("lr {lr}: checksum {}", if same { "kept" } else { "CHANGED" }));
    }

    let frozen = evaluate_frozen(&m, test, &cfg.model.options(), cfg.eval.batch_size, cfg.data.max_len, cfg.data.pad_side, 10)
        .unwrap();
    for (steps, lr) in [(0, cfg.adapt.lr), (1, 0.0)] {
        let mut c = cfg.clone();
        c.adapt.steps = steps;
        c.adapt.lr = lr;
        let (per, _) =
            evaluate_with_adaptation(&mut m, test, &adapter_for(&c, data.lambda), c.data.max_len, c.data.pad_side, 10).unwrap();
        let same = MetricsReport::from_examples(&per, 10) == MetricsReport::from_examples(&frozen, 10) && per == frozen;
        ok &= same;
        notes.push(format!("M={steps} a={lr}: {}", if same { "equal to frozen" } else { "DIFFERS" }));
    }

    let mut c = cfg.clone();
    c.adapt.batch_size = Some(64);
    c.adapt.lr = 0.5;
    let adapter = adapter_for(&c, data.lambda);
    let batches = adaptation_batches(test, c.adapt.batch_size, c.data.max_len, c.data.pad_side).unwrap();
    let run = |m: &mut ModelParams, order: &[usize]| {
        let mut sums = vec![String::new(); batches.len()];
        for &i in order {
            let (logits, _) = adapter.adapt_and_predict(m, &batches[i], i).unwrap();
            sums[i] = tensor_checksum(&logits);
        }
        sums
    };
    let forward: Vec<usize> = (0..batches.len()).collect();
    let mut shuffled = forward.clone();
    shuffled.reverse();
    shuffled.rotate_left(batches.len() / 3);
    let same = run(&mut m, &forward) == run(&mut m, &shuffled);
    ok &= same && checksum(&m.params) == reference;
    notes.push(format!(
        "{} batches permuted: predictions {}",
        batches.len(),
        if same { "identical" } else { "DIFFER" }
    ));
    verdict(ok, notes.join("; "))
}

struct SeedRun {
    frozen: MetricsReport,
    adapted: MetricsReport,
}

fn seg_ndcg(r: &MetricsReport) -> Vec<f64> {
    r.segments.iter().map(|s| s.ndcg).collect()
}

fn fmt4(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn shift_direction(runs: &[SeedRun], secs: f64) -> Verdict {
    let k = runs.len() as f64;
    let mean = |f: &dyn Fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / k;
    let late = |r: &MetricsReport| (r.segments[2].ndcg + r.segments[3].ndcg) / 2.0;
    let early = |r: &MetricsReport| (r.segments[0].ndcg + r.segments[1].ndcg) / 2.0;
    let frozen_late = mean(&|r| late(&r.frozen));
    let adapted_late = mean(&|r| late(&r.adapted));
    let delta_late = adapted_late - frozen_late;
    let delta_early = mean(&|r| early(&r.adapted) - early(&r.frozen));
    let deltas: Vec<f64> = (0..4)
        .map(|s| mean(&|r| r.adapted.segments[s].ndcg - r.frozen.segments[s].ndcg))
        .collect();
    verdict(
        adapted_late >= frozen_late && delta_late > delta_early && secs < 600.0,
        format!(
            "5 seeds: segments 3-4 NDCG frozen {frozen_late:.4} adapted {adapted_late:.4}; \
             delta 3-4 {delta_late:+.2e} vs 1-2 {delta_early:+.2e}; per-segment deltas {}; {secs:.0}s",
            deltas.iter().map(|d| format!("{d:+.1e}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn degradation(runs: &[SeedRun]) -> Verdict {
    let lower = runs.iter().filter(|r| r.frozen.segments[3].ndcg < r.frozen.segments[0].ndcg).count();
    let detail: Vec<String> = runs.iter().map(|r| fmt4(&seg_ndcg(&r.frozen))).collect();
    verdict(lower == runs.len(), format!("segment 4 < segment 1 on {lower}/{} seeds; {}", runs.len(), detail.join(" ")))
}

fn throughput_ratio(cfg: &RunConfig, model: &ModelParams, data: &PreparedData) -> Verdict {
    let mut m = model.clone();
    let mut c = cfg.clone();
    c.eval.batch_size = 256;
    c.eval.throughput_warmup = 1;
    c.eval.throughput_reps = 5;
    let (frozen, adapted) = measure_throughput(&c, &mut m, &data.split.test, data.lambda).unwrap();
    let ratio = adapted.iterations_per_second / frozen.iterations_per_second;
    verdict(
        (0.3..=0.8).contains(&ratio),
        format!(
            "batch 256: frozen {:.2} it/s, adapted {:.2} it/s, ratio {ratio:.3}",
            frozen.iterations_per_second, adapted.iterations_per_second
        ),
    )
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let levels = rng.random_range(1..10);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let target = rng.random_range(0..n);
        let k = rng.random_range(1..20);
        let m = rank_metrics(&logits, target, k);
        if m.rank != brute_rank(&logits, target) || (m.recall, m.rr, m.ndcg) != brute_metrics(&logits, target, k) {
            mismatches += 1;
        }
    }
    let three = rank_metrics(&[0.9, 0.8, 0.7, 0.1], 2, 10);
    verdict(
        mismatches == 0 && three.ndcg == 0.5,
        format!("1000 tied instances: {mismatches} mismatches; rank-3 NDCG = {}", three.ndcg),
    )
}

fn strip_timings(text: &str) -> Vec<serde_json::Value> {
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let o = v.as_object_mut().unwrap();
            o.remove("adapt_seconds");
            o.remove("predict_seconds");
            v
        })
        .collect()
}

fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk_config(7);
    cfg.train.epochs = 2;
    cfg.train.eval_every = 1;
    cfg.eval.throughput_reps = 1;
    cfg.eval.throughput_warmup = 0;
    let runs: Vec<PathBuf> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let mut c = cfg.clone();
            c.out_dir = Some(out.clone());
            let ckpt = cmd_train(&c).unwrap();
            cmd_eval(&c, &ckpt, true).unwrap();
            out
        })
        .collect();
    let read = |p: &Path, f: &str| std::fs::read(p.join(f)).unwrap();
    let mut same = Vec::new();
    for f in ["train_log.jsonl", "checkpoint.t2ar", "metrics.json"] {
        same.push((f, read(&runs[0], f) == read(&runs[1], f)));
    }
    let reports = |p: &Path| strip_timings(&String::from_utf8(read(p, "adapt_reports.jsonl")).unwrap());
    same.push(("adapt_reports.jsonl", reports(&runs[0]) == reports(&runs[1])));
    let ok = same.iter().all(|s| s.1);
    let detail: Vec<String> = same.iter().map(|(f, s)| format!("{f} {}", if *s { "identical" } else { "DIFFERS" })).collect();
    verdict(ok, detail.join(", "))
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

/// Criteria reported without failing the test; see the module docs.
const REPORT_ONLY: [usize; 3] = [4, 6, 8];

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Verdict)> = vec![
        (1, "gradient correctness", guarded(gradients)),
        (2, "scan oracle", guarded(scan_oracle)),
        (3, "time-loss oracle", guarded(time_loss_oracle)),
        (4, "state-loss bound", guarded(bound)),
    ];

    let start = Instant::now();
    let mut runs = Vec::new();
    let mut first = None;
    let experiment = guarded(|| {
        for seed in 0..5 {
            let cfg = desk_config(seed);
            let data = prepare_data(&cfg).unwrap();
            let mut model = train(&cfg, &data).unwrap().model;
            let frozen = evaluate_test(&cfg, &mut model, &data.split.test, data.lambda, false).unwrap().metrics;
            let adapted = evaluate_test(&cfg, &mut model, &data.split.test, data.lambda, true).unwrap().metrics;
            say(&format!(
                "  seed {seed}: frozen segments {} adapted {}",
                fmt4(&seg_ndcg(&frozen)),
                fmt4(&seg_ndcg(&adapted))
            ));
            runs.push(SeedRun { frozen, adapted });
            if first.is_none() {
                first = Some((cfg, model, data));
            }
        }
        verdict(true, "")
    });
    let secs = start.elapsed().as_secs_f64();
    let from_runs = |f: &dyn Fn() -> Verdict| {
        if experiment.pass {
            guarded(f)
        } else {
            verdict(false, format!("experiment did not complete: {}", experiment.detail))
        }
    };
    let (cfg, model, data) = first.expect("seed 0 run");
    results.push((5, "adaptation hermeticity", guarded(|| hermeticity(&cfg, &model, &data))));
    results.push((6, "shift-adaptation direction", from_runs(&|| shift_direction(&runs, secs))));
    results.push((7, "frozen degradation trend", from_runs(&|| degradation(&runs))));
    results.push((8, "throughput ratio", guarded(|| throughput_ratio(&cfg, &model, &data))));
    results.push((9, "metric oracle", guarded(metric_oracle)));
    results.push((10, "reproducibility", guarded(reproducibility)));

    let mut hard_failures = Vec::new();
    for (id, name, v) in &results {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let note = if REPORT_ONLY.contains(id) { " (reported)" } else { "" };
        say(&format!("criterion {id:>2} {tag}{note}: {name}: {}", v.detail));
        if !v.pass && !REPORT_ONLY.contains(id) {
            hard_failures.push(*id);
        }
    }
    assert!(hard_failures.is_empty(), "criteria failed: {hard_failures:?}");
}
