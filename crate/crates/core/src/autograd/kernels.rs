//! Forward and backward kernels for the fused primitives.
//!
//! Inputs are flattened `(batch · seq_len) × channels`; the sequence index
//! varies fastest within a batch row.

use crate::tensor::{dot, Tensor};

/// `out[b, t, c] = bias[c] + Σ_k kernel[k, c] · x[b, t − (w − 1) + k, c]`,
/// with out-of-range history read as zero.
pub fn causal_conv1d(x: &Tensor, kernel: &Tensor, bias: &Tensor, seq_len: usize) -> Tensor {
    let (n, ch) = (x.rows(), x.cols());
    let w = kernel.rows();
    let mut out = Tensor::zeros(n, ch);
    for seq in 0..n / seq_len {
        let base = seq * seq_len;
        for t in 0..seq_len {
            let orow = out.row_mut(base + t);
            orow.copy_from_slice(bias.data());
            for k in 0..w {
                let Some(src) = (t + k + 1).checked_sub(w) else { continue };
                let xrow = x.row(base + src);
                let krow = kernel.row(k);
                for c in 0..ch {
                    orow[c] += krow[c] * xrow[c];
                }
            }
        }
    }
    out
}

pub fn causal_conv1d_backward(
    g: &Tensor,
    x: &Tensor,
    kernel: &Tensor,
    seq_len: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, ch) = (x.rows(), x.cols());
    let w = kernel.rows();
    let mut gx = Tensor::zeros(n, ch);
    let mut gk = Tensor::zeros(w, ch);
    let mut gb = Tensor::zeros(1, ch);
    for seq in 0..n / seq_len {
        let base = seq * seq_len;
        for t in 0..seq_len {
            let grow = g.row(base + t);
            for (b, &gv) in gb.data_mut().iter_mut().zip(grow) {
                *b += gv;
            }
            for k in 0..w {
                let Some(src) = (t + k + 1).checked_sub(w) else { continue };
                let xrow = x.row(base + src);
                let krow = kernel.row(k);
                let gkrow = gk.row_mut(k);
                for c in 0..ch {
                    gkrow[c] += grow[c] * xrow[c];
                }
                let gxrow = gx.row_mut(base + src);
                for c in 0..ch {
                    gxrow[c] += grow[c] * krow[c];
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Row standardization; returns `(x̂, 1/σ)` per row.
pub fn normalize_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let cols = x.cols() as f64;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / cols;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    (out, inv_std)
}

/// Row softmax and mean negative log-likelihood of `targets`.
pub fn softmax_xent(logits: &Tensor, targets: &[usize]) -> (Tensor, f64) {
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = probs.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        let log_z = z.ln() + max;
        total += log_z - logits.get(r, t);
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    (probs, total / targets.len().max(1) as f64)
}

/// All hidden states of the selective scan, `(batch · L) × (d_s · d)`.
pub fn scan_states(a_bar: &Tensor, b_bar: &Tensor, x: &Tensor, mask: &[bool], seq_len: usize) -> Tensor {
    let (n, ds, d) = (x.rows(), b_bar.cols(), x.cols());
    let mut h = Tensor::zeros(n, ds * d);
    let mut state = vec![0.0; ds * d];
    for i in 0..n {
        if i % seq_len == 0 {
            state.iter_mut().for_each(|v| *v = 0.0);
        }
        if mask[i] {
            let a = a_bar.get(i, 0);
            let (brow, xrow) = (b_bar.row(i), x.row(i));
            for s in 0..ds {
                let bs = brow[s];
                let srow = &mut state[s * d..(s + 1) * d];
                for (hv, &xv) in srow.iter_mut().zip(xrow) {
                    *hv = a * *hv + bs * xv;
                }
            }
        }
        h.row_mut(i).copy_from_slice(&state);
    }
    h
}

/// Gradients of the scan w.r.t. `(ā, b̄, x)` given `∂L/∂h_t` for all `t`.
pub fn scan_backward(
    g: &Tensor,
    h: &Tensor,
    a_bar: &Tensor,
    b_bar: &Tensor,
    x: &Tensor,
    mask: &[bool],
    seq_len: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, ds, d) = (x.rows(), b_bar.cols(), x.cols());
    let mut ga = Tensor::zeros(n, 1);
    let mut gb = Tensor::zeros(n, ds);
    let mut gx = Tensor::zeros(n, d);
    // carry = total ∂L/∂h_t including the path through later steps
    let mut carry = vec![0.0; ds * d];
    let zeros = vec![0.0; ds * d];
    for i in (0..n).rev() {
        let t = i % seq_len;
        if t == seq_len - 1 {
            carry.iter_mut().for_each(|v| *v = 0.0);
        }
        for (c, &gv) in carry.iter_mut().zip(g.row(i)) {
            *c += gv;
        }
        if !mask[i] {
            continue;
        }
        let prev = if t == 0 { &zeros[..] } else { h.row(i - 1) };
        ga.set(i, 0, dot(&carry, prev));
        let (brow, xrow) = (b_bar.row(i), x.row(i));
        let gbrow = gb.row_mut(i);
        for s in 0..ds {
            gbrow[s] = dot(&carry[s * d..(s + 1) * d], xrow);
        }
        let gxrow = gx.row_mut(i);
        for s in 0..ds {
            let bs = brow[s];
            for (o, &cv) in gxrow.iter_mut().zip(&carry[s * d..(s + 1) * d]) {
                *o += bs * cv;
            }
        }
        let a = a_bar.get(i, 0);
        carry.iter_mut().for_each(|v| *v *= a);
    }
    (ga, gb, gx)
}

/// `y[i, j] = Σ_s h[i, s·d + j] · c[i, s]`.
pub fn readout(h: &Tensor, c: &Tensor) -> Tensor {
    let (n, ds) = (c.rows(), c.cols());
    let d = h.cols() / ds;
    let mut y = Tensor::zeros(n, d);
    for i in 0..n {
        let (hrow, crow) = (h.row(i), c.row(i));
        let yrow = y.row_mut(i);
        for s in 0..ds {
            let cs = crow[s];
            for (o, &hv) in yrow.iter_mut().zip(&hrow[s * d..(s + 1) * d]) {
                *o += hv * cs;
            }
        }
    }
    y
}

pub fn readout_backward(g: &Tensor, h: &Tensor, c: &Tensor) -> (Tensor, Tensor) {
    let (n, ds) = (c.rows(), c.cols());
    let d = h.cols() / ds;
    let mut gh = Tensor::zeros(n, ds * d);
    let mut gc = Tensor::zeros(n, ds);
    for i in 0..n {
        let (grow, hrow, crow) = (g.row(i), h.row(i), c.row(i));
        for s in 0..ds {
            gc.set(i, s, dot(grow, &hrow[s * d..(s + 1) * d]));
        }
        let ghrow = gh.row_mut(i);
        for s in 0..ds {
            let cs = crow[s];
            for (o, &gv) in ghrow[s * d..(s + 1) * d].iter_mut().zip(grow) {
                *o = gv * cs;
            }
        }
    }
    (gh, gc)
}
