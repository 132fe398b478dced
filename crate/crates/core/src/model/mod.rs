//! The selective state-space recommender: item embedding, input-dependent
//! transform, zero-order-hold discretization, selective scan, position-wise
//! FFN with residual layer norms, and the full-catalog prediction head.
//!
//! All operations build nodes on an [`autograd::Graph`]. A forward pass binds
//! every parameter once and records the intermediate tensors the alignment
//! losses need in a [`ForwardTrace`].

mod checkpoint;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ingest::Batch;
use crate::tensor::{ParamMap, Tensor};

pub const ITEM_EMB: &str = "item_emb";

/// Architecture sizes. `vocab` counts the padding row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub d: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub d_ff: usize,
    pub blocks: usize,
}

impl ModelDims {
    /// Channels fed to the convolution: `x`, `B` and `C`.
    pub fn conv_channels(&self) -> usize {
        self.d + 2 * self.d_state
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("vocab", self.vocab),
            ("d", self.d),
            ("d_state", self.d_state),
            ("conv_width", self.conv_width),
            ("d_ff", self.d_ff),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.vocab < 2 {
            errs.push("vocab must hold the padding row and at least one item".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Where the extension step's convolution takes its `w − 1` history rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtensionHistory {
    /// The row's real trailing pre-activation channels.
    #[default]
    Trailing,
    Zeros,
}

/// Behavioural switches that are not part of the stored architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub dropout: f64,
    pub detach_extension: bool,
    pub extension_history: ExtensionHistory,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            dropout: 0.2,
            detach_extension: true,
            extension_history: ExtensionHistory::Trailing,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter name of block `b`.
pub fn block_param(b: usize, name: &str) -> String {
    format!("blocks.{b}.{name}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub params: ParamMap,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let (d, ds, ch) = (dims.d, dims.d_state, dims.conv_channels());
        let mut params = ParamMap::new();
        params.insert(ITEM_EMB.into(), Tensor::randn(dims.vocab, d, (d as f64).powf(-0.5), rng));
        let lin = |fan_in: usize, fan_out: usize, rng: &mut R| {
            Tensor::uniform(fan_in, fan_out, (fan_in as f64).powf(-0.5), rng)
        };
        for b in 0..dims.blocks {
            let mut put = |name: &str, t: Tensor| {
                params.insert(block_param(b, name), t);
            };
            put("in_proj.weight", lin(d, ch + 1, rng));
            put("in_proj.bias", Tensor::zeros(1, ch + 1));
            put("conv.weight", Tensor::uniform(dims.conv_width, ch, (dims.conv_width as f64).powf(-0.5), rng));
            put("conv.bias", Tensor::zeros(1, ch));
            put("a_log", Tensor::scalar(0.0));
            put("back_proj.weight", lin(d, ds, rng));
            put("back_proj.bias", Tensor::zeros(1, ds));
            put("norm1.gamma", Tensor::full(1, d, 1.0));
            put("norm1.beta", Tensor::zeros(1, d));
            put("ffn.w1", lin(d, dims.d_ff, rng));
            put("ffn.b1", Tensor::zeros(1, dims.d_ff));
            put("ffn.w2", lin(dims.d_ff, d, rng));
            put("ffn.b2", Tensor::zeros(1, d));
            put("norm2.gamma", Tensor::full(1, d, 1.0));
            put("norm2.beta", Tensor::zeros(1, d));
        }
        Ok(Self { dims, params })
    }

    /// Every tensor name and its expected shape.
    pub fn expected_shapes(dims: &ModelDims) -> BTreeMap<String, [usize; 2]> {
        let (d, ds, ch) = (dims.d, dims.d_state, dims.conv_channels());
        let mut out = BTreeMap::new();
        out.insert(ITEM_EMB.to_owned(), [dims.vocab, d]);
        for b in 0..dims.blocks {
            for (name, shape) in [
                ("in_proj.weight", [d, ch + 1]),
                ("in_proj.bias", [1, ch + 1]),
                ("conv.weight", [dims.conv_width, ch]),
                ("conv.bias", [1, ch]),
                ("a_log", [1, 1]),
                ("back_proj.weight", [d, ds]),
                ("back_proj.bias", [1, ds]),
                ("norm1.gamma", [1, d]),
                ("norm1.beta", [1, d]),
                ("ffn.w1", [d, dims.d_ff]),
                ("ffn.b1", [1, dims.d_ff]),
                ("ffn.w2", [dims.d_ff, d]),
                ("ffn.b2", [1, d]),
                ("norm2.gamma", [1, d]),
                ("norm2.beta", [1, d]),
            ] {
                out.insert(block_param(b, name), shape);
            }
        }
        out
    }

    /// Checks that `params` holds exactly the tensors `dims` calls for.
    pub fn check_architecture(&self) -> Result<()> {
        let expected = Self::expected_shapes(&self.dims);
        let actual: BTreeMap<String, [usize; 2]> =
            self.params.iter().map(|(k, v)| (k.clone(), v.shape())).collect();
        if expected == actual {
            return Ok(());
        }
        let mut diffs = Vec::new();
        for (k, s) in &expected {
            match actual.get(k) {
                None => diffs.push(format!("missing {k}")),
                Some(a) if a != s => diffs.push(format!("{k}: expected {s:?}, found {a:?}")),
                _ => {}
            }
        }
        diffs.extend(actual.keys().filter(|k| !expected.contains_key(*k)).map(|k| format!("unexpected {k}")));
        Err(Error::ArchitectureMismatch(diffs.join("; ")))
    }

    /// The scalar `A = −exp(a_log)` of block `b`.
    pub fn a(&self, b: usize) -> f64 {
        -self.params[&block_param(b, "a_log")].item().exp()
    }

    /// Binds every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams(self.params.iter().map(|(k, v)| (k.clone(), g.param(k.clone(), v.clone()))).collect())
    }

    /// Forward pass through every block. Logits are left to [`Self::predict`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: Mode,
        opts: &ModelOptions,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let p = self.bind(g);
        let seq_len = batch.max_len;
        let mask_col = g.constant(Tensor::column(
            batch.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        ));
        let train = mode == Mode::Train;

        let emb = embed(g, p.get(ITEM_EMB), &batch.items, self.dims.vocab)?;
        let emb = g.dropout(emb, opts.dropout, train, rng);
        let emb = g.mul(emb, mask_col)?;

        let last = batch.last_positions();
        let mut input = emb;
        let mut block = None;
        for b in 0..self.dims.blocks {
            let v = BlockVars::of(&p, b);
            let t = transform(g, input, &v, mask_col, seq_len, self.dims.d, self.dims.d_state)?;
            let a = v.a(g);
            let (a_bar, b_bar) = discretize(g, t.delta, a, t.b)?;
            let scan = scan(g, a_bar, b_bar, t.x, t.c, &batch.mask, seq_len, &last)?;
            let o = ffn_and_norm(g, input, scan.y, &v, opts.dropout, train, rng)?;
            let o = g.mul(o, mask_col)?;
            block = Some(BlockTrace {
                input,
                e2: t.e2,
                x: t.x,
                b: t.b,
                c: t.c,
                delta: t.delta,
                a,
                a_bar,
                b_bar,
                states: scan.states,
                h_n: scan.h_n,
                y: scan.y,
                o,
            });
            input = o;
        }
        let block = block.expect("at least one block");
        let o_n = g.gather_rows(block.o, last.clone())?;
        let x_n = g.gather_rows(block.x, last.clone())?;
        Ok(ForwardTrace {
            params: p,
            embeddings: emb,
            block_index: self.dims.blocks - 1,
            x: block.x,
            b: block.b,
            c: block.c,
            delta: block.delta,
            a: block.a,
            a_bar: block.a_bar,
            b_bar: block.b_bar,
            states: block.states,
            h_n: block.h_n,
            x_n,
            y: block.y,
            o: block.o,
            o_n,
            e2: block.e2,
            block_input: block.input,
            last,
            rows: batch.rows(),
            seq_len,
            d: self.dims.d,
            d_state: self.dims.d_state,
        })
    }

    /// Full-catalog logits `o_n · Eᵀ`, one row per example.
    pub fn predict(&self, g: &mut Graph, trace: &ForwardTrace) -> Result<Var> {
        g.matmul_nt(trace.o_n, trace.params.get(ITEM_EMB))
    }

    /// Re-feeds `o_n` through the last block's transform as one extra step.
    pub fn extend_step(&self, g: &mut Graph, trace: &ForwardTrace, opts: &ModelOptions) -> Result<StepExtension> {
        let v = BlockVars::of(&trace.params, trace.block_index);
        let (d, ds) = (self.dims.d, self.dims.d_state);
        let ch = self.dims.conv_channels();
        let w = self.dims.conv_width;
        let o = if opts.detach_extension {
            g.stop_gradient(trace.o_n)
        } else {
            trace.o_n
        };
        let lin = linear(g, o, v.in_w, v.in_b)?;
        let e2_new = g.slice_cols(lin, 0, ch)?;
        let e3_new = g.slice_cols(lin, ch, 1)?;

        // Window per row: w − 1 history rows then the new row, gathered from
        // [masked e2 ‖ zero row ‖ new rows].
        let n_flat = g.value(trace.e2).rows();
        let zero = g.constant(Tensor::zeros(1, ch));
        let pool = g.concat_rows(trace.e2, zero)?;
        let pool = g.concat_rows(pool, e2_new)?;
        let mut idx = Vec::with_capacity(trace.rows * w);
        for (r, &p) in trace.last.iter().enumerate() {
            let row_start = r * trace.seq_len;
            for k in (1..w).rev() {
                let src = (p + 1).checked_sub(k).filter(|&s| s >= row_start);
                idx.push(match (opts.extension_history, src) {
                    (ExtensionHistory::Trailing, Some(s)) => s,
                    _ => n_flat,
                });
            }
            idx.push(n_flat + 1 + r);
        }
        let window = g.gather_rows(pool, idx)?;
        let conv = g.causal_conv1d(window, v.conv_w, v.conv_b, w)?;
        let step_rows = (0..trace.rows).map(|r| r * w + w - 1).collect();
        let conv = g.gather_rows(conv, step_rows)?;
        let act = g.silu(conv);
        Ok(StepExtension {
            x_hat: g.slice_cols(act, 0, d)?,
            b: g.slice_cols(act, d, ds)?,
            c: g.slice_cols(act, d + ds, ds)?,
            delta: g.softplus(e3_new),
        })
    }

    /// Forward, extension step and logits in one call.
    pub fn forward_full<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: Mode,
        opts: &ModelOptions,
        rng: &mut R,
    ) -> Result<(ForwardTrace, StepExtension, Var)> {
        let trace = self.forward(g, batch, mode, opts, rng)?;
        let ext = self.extend_step(g, &trace, opts)?;
        let logits = self.predict(g, &trace)?;
        Ok((trace, ext, logits))
    }
}

/// Parameter leaves bound on one graph.
#[derive(Clone, Debug)]
pub struct BoundParams(BTreeMap<String, Var>);

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        match self.0.get(name) {
            Some(&v) => v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

struct BlockVars {
    in_w: Var,
    in_b: Var,
    conv_w: Var,
    conv_b: Var,
    a_log: Var,
    n1_g: Var,
    n1_b: Var,
    f_w1: Var,
    f_b1: Var,
    f_w2: Var,
    f_b2: Var,
    n2_g: Var,
    n2_b: Var,
}

impl BlockVars {
    fn of(p: &BoundParams, b: usize) -> Self {
        let v = |n: &str| p.get(&block_param(b, n));
        Self {
            in_w: v("in_proj.weight"),
            in_b: v("in_proj.bias"),
            conv_w: v("conv.weight"),
            conv_b: v("conv.bias"),
            a_log: v("a_log"),
            n1_g: v("norm1.gamma"),
            n1_b: v("norm1.beta"),
            f_w1: v("ffn.w1"),
            f_b1: v("ffn.b1"),
            f_w2: v("ffn.w2"),
            f_b2: v("ffn.b2"),
            n2_g: v("norm2.gamma"),
            n2_b: v("norm2.beta"),
        }
    }

    fn a(&self, g: &mut Graph) -> Var {
        let e = g.exp(self.a_log);
        g.neg(e)
    }
}

struct BlockTrace {
    input: Var,
    e2: Var,
    x: Var,
    b: Var,
    c: Var,
    delta: Var,
    a: Var,
    a_bar: Var,
    b_bar: Var,
    states: Var,
    h_n: Var,
    y: Var,
    o: Var,
}

/// Graph handles of one forward pass. Per-position tensors are flattened
/// `(rows · seq_len) × ·`; per-example ones are `rows × ·`. Block-level
/// fields belong to the last block.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub params: BoundParams,
    pub embeddings: Var,
    pub block_index: usize,
    pub x: Var,
    pub b: Var,
    pub c: Var,
    /// Step sizes, one column.
    pub delta: Var,
    /// The scalar `A`.
    pub a: Var,
    pub a_bar: Var,
    pub b_bar: Var,
    /// Every hidden state, `d_s · d` columns.
    pub states: Var,
    /// State after each row's last valid step.
    pub h_n: Var,
    /// Input row at each row's last valid step.
    pub x_n: Var,
    pub y: Var,
    pub o: Var,
    pub o_n: Var,
    /// Masked transform channels fed to the convolution.
    pub e2: Var,
    pub block_input: Var,
    pub last: Vec<usize>,
    pub rows: usize,
    pub seq_len: usize,
    pub d: usize,
    pub d_state: usize,
}

/// The extra step predicted from `o_n`, one row per example.
#[derive(Clone, Copy, Debug)]
pub struct StepExtension {
    pub x_hat: Var,
    pub b: Var,
    pub c: Var,
    pub delta: Var,
}

/// Output of [`transform`].
#[derive(Clone, Copy, Debug)]
pub struct Transformed {
    pub e2: Var,
    pub x: Var,
    pub b: Var,
    pub c: Var,
    pub delta: Var,
}

/// Output of [`scan`].
#[derive(Clone, Copy, Debug)]
pub struct ScanOutput {
    pub states: Var,
    pub h_n: Var,
    pub y: Var,
}

/// Looks up embedding rows.
pub fn embed(g: &mut Graph, table: Var, items: &[usize], vocab: usize) -> Result<Var> {
    if let Some(&bad) = items.iter().find(|&&i| i >= vocab) {
        return Err(Error::domain("embed", format!("item index {bad} out of range for vocabulary {vocab}")));
    }
    g.gather_rows(table, items.to_vec())
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn transform(
    g: &mut Graph,
    input: Var,
    v: &BlockVars,
    mask_col: Var,
    seq_len: usize,
    d: usize,
    ds: usize,
) -> Result<Transformed> {
    transform_with(g, input, v.in_w, v.in_b, v.conv_w, v.conv_b, mask_col, seq_len, d, ds)
}

/// Linear projection, masked causal depthwise convolution and activations:
/// `x, B, C = SiLU(conv(E2))`, `Δ = softplus(E3)`.
#[allow(clippy::too_many_arguments)]
pub fn transform_with(
    g: &mut Graph,
    input: Var,
    in_w: Var,
    in_b: Var,
    conv_w: Var,
    conv_b: Var,
    mask_col: Var,
    seq_len: usize,
    d: usize,
    ds: usize,
) -> Result<Transformed> {
    let ch = d + 2 * ds;
    let lin = linear(g, input, in_w, in_b)?;
    let e2 = g.slice_cols(lin, 0, ch)?;
    let e2 = g.mul(e2, mask_col)?;
    let e3 = g.slice_cols(lin, ch, 1)?;
    let conv = g.causal_conv1d(e2, conv_w, conv_b, seq_len)?;
    let act = g.silu(conv);
    Ok(Transformed {
        e2,
        x: g.slice_cols(act, 0, d)?,
        b: g.slice_cols(act, d, ds)?,
        c: g.slice_cols(act, d + ds, ds)?,
        delta: g.softplus(e3),
    })
}

/// Zero-order hold: `Ā = exp(Δ·A)`, `B̄ = Δ·B` row-wise.
pub fn discretize(g: &mut Graph, delta: Var, a: Var, b: Var) -> Result<(Var, Var)> {
    let av = g.value(a).item();
    if !(av < 0.0) {
        return Err(Error::StabilityViolated(av));
    }
    let da = g.mul(delta, a)?;
    let a_bar = g.exp(da);
    let b_bar = g.mul(b, delta)?;
    Ok((a_bar, b_bar))
}

/// Selective scan with readout `y_t = h_tᵀ C_t`; `h_n` is gathered at `last`.
#[allow(clippy::too_many_arguments)]
pub fn scan(
    g: &mut Graph,
    a_bar: Var,
    b_bar: Var,
    x: Var,
    c: Var,
    mask: &[bool],
    seq_len: usize,
    last: &[usize],
) -> Result<ScanOutput> {
    let states = g.sequential_scan(a_bar, b_bar, x, mask, seq_len)?;
    let y = g.readout(states, c)?;
    let h_n = g.gather_rows(states, last.to_vec())?;
    Ok(ScanOutput { states, h_n, y })
}

fn ffn_and_norm<R: Rng + ?Sized>(
    g: &mut Graph,
    input: Var,
    y: Var,
    v: &BlockVars,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let y = g.dropout(y, rate, train, rng);
    let z = g.add(input, y)?;
    let z = g.layer_norm(z, v.n1_g, v.n1_b)?;
    let h = linear(g, z, v.f_w1, v.f_b1)?;
    let h = g.silu(h);
    let f = linear(g, h, v.f_w2, v.f_b2)?;
    let f = g.dropout(f, rate, train, rng);
    let r = g.add(z, f)?;
    g.layer_norm(r, v.n2_g, v.n2_b)
}

/// Sets the padding column to `−∞` so it never ranks.
pub fn mask_padding_logits(logits: &mut Tensor) {
    for r in 0..logits.rows() {
        logits.row_mut(r)[0] = f64::NEG_INFINITY;
    }
}
