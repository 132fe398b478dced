//! Independent reference implementations used as oracles by the
//! integration tests. Everything here works on plain `Vec<f64>` with
//! straight-line loops and shares no code with the crate beyond the
//! parameter names.

#![allow(dead_code)]

use shiftrec::model::{block_param, ModelDims, ModelParams};
use shiftrec::{ParamMap, Tensor};

pub type Vector = Vec<f64>;
pub type Matrix = Vec<Vec<f64>>;

pub fn to_matrix(t: &Tensor) -> Matrix {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn vec_mat(v: &[f64], m: &Matrix) -> Vector {
    let mut out = vec![0.0; m[0].len()];
    for (i, &vi) in v.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(&m[i]) {
            *o += vi * w;
        }
    }
    out
}

pub fn add(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vector {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

/// `h_t = exp(Δ_t A)·h_{t−1} + Δ_t·B_t ⊗ x_t` from `h_0 = 0`, states as
/// `d_s × d` matrices.
pub fn naive_states(a_bar: &[f64], b_bar: &[Vector], x: &[Vector]) -> Vec<Matrix> {
    let (ds, d) = (b_bar[0].len(), x[0].len());
    let mut h = vec![vec![0.0; d]; ds];
    let mut out = Vec::new();
    for t in 0..a_bar.len() {
        for s in 0..ds {
            for j in 0..d {
                h[s][j] = a_bar[t] * h[s][j] + b_bar[t][s] * x[t][j];
            }
        }
        out.push(h.clone());
    }
    out
}

/// Hinge time loss over one or more sequences: every `i < j` inside a block
/// of positions `1..=n`, averaged over all pairs of all sequences.
pub fn brute_time_loss(seqs: &[(Vector, Vector)], lambda: f64, block: usize) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (delta, t) in seqs {
        let n = delta.len() - 1;
        for i in 1..=n {
            for j in i + 1..=n {
                if (i - 1) / block != (j - 1) / block {
                    continue;
                }
                let v = 1.0 - (delta[i] - delta[j]) * (t[i] - t[j]) / lambda;
                total += v.max(0.0);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Rank by fully sorting `(−logit, index)`.
pub fn brute_rank(logits: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    1 + order.iter().position(|&i| i == target).unwrap()
}

/// `(recall, rr, ndcg)` at `k` from the sorted rank.
pub fn brute_metrics(logits: &[f64], target: usize, k: usize) -> (f64, f64, f64) {
    let r = brute_rank(logits, target);
    if r > k {
        (0.0, 0.0, 0.0)
    } else {
        (1.0, 1.0 / r as f64, 1.0 / ((r + 1) as f64).log2())
    }
}

struct Block {
    in_w: Matrix,
    in_b: Vector,
    conv_w: Matrix,
    conv_b: Vector,
    a: f64,
    back_w: Matrix,
    back_b: Vector,
    n1: (Vector, Vector),
    w1: Matrix,
    b1: Vector,
    w2: Matrix,
    b2: Vector,
    n2: (Vector, Vector),
}

/// Every quantity the reference computes for one example.
#[derive(Clone, Debug)]
pub struct RefOutput {
    pub logits: Vector,
    /// Step sizes of the last block, one per input position.
    pub delta: Vector,
    pub x_n: Vector,
    /// Final state, flattened `s · d + j`.
    pub h_n: Vector,
    pub x_hat: Vector,
    pub b_next: Vector,
    pub delta_next: f64,
    pub a: f64,
    pub state_loss: f64,
    /// `(Δ_full, T)` indexed by sequence position `0..=n`.
    pub time_seq: (Vector, Vector),
}

pub struct RefModel {
    dims: ModelDims,
    emb: Matrix,
    blocks: Vec<Block>,
}

impl RefModel {
    pub fn new(m: &ModelParams) -> Self {
        Self::from_params(&m.dims, &m.params)
    }

    pub fn from_params(dims: &ModelDims, p: &ParamMap) -> Self {
        let mat = |b: usize, n: &str| to_matrix(&p[&block_param(b, n)]);
        let row = |b: usize, n: &str| p[&block_param(b, n)].data().to_vec();
        let blocks = (0..dims.blocks)
            .map(|b| Block {
                in_w: mat(b, "in_proj.weight"),
                in_b: row(b, "in_proj.bias"),
                conv_w: mat(b, "conv.weight"),
                conv_b: row(b, "conv.bias"),
                a: -row(b, "a_log")[0].exp(),
                back_w: mat(b, "back_proj.weight"),
                back_b: row(b, "back_proj.bias"),
                n1: (row(b, "norm1.gamma"), row(b, "norm1.beta")),
                w1: mat(b, "ffn.w1"),
                b1: row(b, "ffn.b1"),
                w2: mat(b, "ffn.w2"),
                b2: row(b, "ffn.b2"),
                n2: (row(b, "norm2.gamma"), row(b, "norm2.beta")),
            })
            .collect();
        Self {
            dims: dims.clone(),
            emb: to_matrix(&p["item_emb"]),
            blocks,
        }
    }

    fn conv_at(blk: &Block, window: &[Vector]) -> Vector {
        // window[k] pairs with kernel row k; the last row is the current step.
        let mut out = blk.conv_b.clone();
        for (k, e) in window.iter().enumerate() {
            for c in 0..out.len() {
                out[c] += blk.conv_w[k][c] * e[c];
            }
        }
        out.into_iter().map(silu).collect()
    }

    /// Runs one unpadded example with dropout off; the dilution power is 2.
    pub fn run(&self, items: &[usize], timestamps: &[i64], target_ts: i64) -> RefOutput {
        let (d, ds, w) = (self.dims.d, self.dims.d_state, self.dims.conv_width);
        let ch = d + 2 * ds;
        let n = items.len();
        let mut input: Vec<Vector> = items.iter().map(|&i| self.emb[i].clone()).collect();
        let mut last = None;
        for blk in &self.blocks {
            let lin: Vec<Vector> = input.iter().map(|e| add(&vec_mat(e, &blk.in_w), &blk.in_b)).collect();
            let e2: Vec<Vector> = lin.iter().map(|l| l[..ch].to_vec()).collect();
            let delta: Vector = lin.iter().map(|l| softplus(l[ch])).collect();
            let mut xs = Vec::new();
            let mut bs = Vec::new();
            let mut cs = Vec::new();
            for t in 0..n {
                let window: Vec<Vector> = (0..w)
                    .map(|k| {
                        let back = w - 1 - k;
                        if t >= back { e2[t - back].clone() } else { vec![0.0; ch] }
                    })
                    .collect();
                let act = Self::conv_at(blk, &window);
                xs.push(act[..d].to_vec());
                bs.push(act[d..d + ds].to_vec());
                cs.push(act[d + ds..].to_vec());
            }
            let a_bar: Vector = delta.iter().map(|dl| (dl * blk.a).exp()).collect();
            let b_bar: Vec<Vector> = bs.iter().zip(&delta).map(|(b, dl)| b.iter().map(|v| v * dl).collect()).collect();
            let states = naive_states(&a_bar, &b_bar, &xs);
            let mut out = Vec::new();
            for t in 0..n {
                let y: Vector = (0..d).map(|j| (0..ds).map(|s| states[t][s][j] * cs[t][s]).sum()).collect();
                let z = layer_norm(&add(&input[t], &y), &blk.n1.0, &blk.n1.1);
                let hdn: Vector = add(&vec_mat(&z, &blk.w1), &blk.b1).into_iter().map(silu).collect();
                let f = add(&vec_mat(&hdn, &blk.w2), &blk.b2);
                out.push(layer_norm(&add(&z, &f), &blk.n2.0, &blk.n2.1));
            }
            last = Some((e2, delta, xs, states[n - 1].clone()));
            input = out;
        }
        let (e2, delta, xs, h_last) = last.unwrap();
        let blk = self.blocks.last().unwrap();
        let o_n = input[n - 1].clone();
        let logits: Vector = self.emb.iter().map(|e| e.iter().zip(&o_n).map(|(a, b)| a * b).sum()).collect();

        let lin = add(&vec_mat(&o_n, &blk.in_w), &blk.in_b);
        let window: Vec<Vector> = (0..w)
            .map(|k| {
                if k == w - 1 {
                    lin[..ch].to_vec()
                } else {
                    let back = w - 1 - k;
                    if n >= back { e2[n - back].clone() } else { vec![0.0; ch] }
                }
            })
            .collect();
        let act = Self::conv_at(blk, &window);
        let x_hat = act[..d].to_vec();
        let b_next = act[d..d + ds].to_vec();
        let dn = softplus(lin[ch]);

        let a = blk.a;
        let p_bar = -1.0 / a;
        let x_n = xs[n - 1].clone();
        let q = add(&vec_mat(&x_n, &blk.back_w), &blk.back_b);
        let mut resid = 0.0;
        let mut h_n = Vec::new();
        for s in 0..ds {
            for j in 0..d {
                let h = h_last[s][j];
                let next = (dn * a).exp() * h + dn * b_next[s] * x_hat[j];
                let back = p_bar * next + dn * q[s] * x_n[j];
                resid += (h - back).powi(2);
                h_n.push(h);
            }
        }
        let state_loss = resid.sqrt() / (dn * dn);

        let mut t_seq = vec![0.0];
        for k in 1..n {
            t_seq.push((timestamps[k] - timestamps[k - 1]) as f64);
        }
        t_seq.push((target_ts - timestamps[n - 1]) as f64);
        let mut d_seq = delta.clone();
        d_seq.push(dn);
        RefOutput {
            logits,
            delta,
            x_n,
            h_n,
            x_hat,
            b_next,
            delta_next: dn,
            a,
            state_loss,
            time_seq: (d_seq, t_seq),
        }
    }
}

/// Largest absolute difference of two equally long slices.
pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
