//! Adam for training, plain SGD for test-time steps, parameter snapshots and
//! early stopping.

use serde::{Deserialize, Serialize};

use crate::autograd::GradStore;
use crate::error::{Error, Result};
use crate::tensor::{checksum, ParamMap, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: ParamMap,
    pub v: ParamMap,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &ParamMap) -> Self {
        let zeros: ParamMap = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

fn check_grads(params: &ParamMap, grads: &GradStore) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(())
}

/// Bias-corrected Adam update. Parameters without a gradient see a zero
/// gradient. Nothing changes if any gradient is not finite.
pub fn adam_step(params: &mut ParamMap, grads: &GradStore, state: &mut AdamState) -> Result<()> {
    check_grads(params, grads)?;
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.cfg;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name);
        let m = state.m.get_mut(name).expect("moment per parameter");
        let v = state.v.get_mut(name).expect("moment per parameter");
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `θ ← θ − lr·∇θ`.
pub fn sgd_step(params: &mut ParamMap, grads: &GradStore, lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked");
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// Deep copy of a parameter set with its checksum.
#[derive(Clone, Debug)]
pub struct Snapshot {
    params: ParamMap,
    checksum: String,
}

impl Snapshot {
    pub fn checksum(&self) -> &str {
        &self.checksum
    }
}

pub fn snapshot(params: &ParamMap) -> Snapshot {
    Snapshot {
        params: params.clone(),
        checksum: checksum(params),
    }
}

/// Copies the snapshot back and verifies the checksum.
pub fn restore(params: &mut ParamMap, snap: &Snapshot) -> Result<()> {
    if params.len() != snap.params.len()
        || params
            .iter()
            .zip(&snap.params)
            .any(|((ka, a), (kb, b))| ka != kb || a.shape() != b.shape())
    {
        return Err(Error::ArchitectureMismatch("snapshot does not match the parameter set".into()));
    }
    for (p, s) in params.values_mut().zip(snap.params.values()) {
        p.data_mut().copy_from_slice(s.data());
    }
    let now = checksum(params);
    if now != snap.checksum {
        return Err(Error::Checkpoint(format!("restore checksum {now} differs from {}", snap.checksum)));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive evaluations without a strict
/// improvement of the tracked metric.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    best: Option<f64>,
    stale: usize,
    pub history: Vec<f64>,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
            history: Vec::new(),
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Whether the last observed value was a new best.
    pub fn improved(&self) -> bool {
        self.stale == 0 && !self.history.is_empty()
    }

    pub fn observe(&mut self, metric: f64) -> StopDecision {
        self.history.push(metric);
        match self.best {
            Some(b) if !(metric > b) => self.stale += 1,
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("w".into(), Tensor::row_vector(vec![1.0, -2.0]));
        p
    }

    fn grads(v: [f64; 2]) -> GradStore {
        let mut g = GradStore::new();
        g.insert("w".into(), Tensor::row_vector(v.to_vec()));
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = params();
        let mut s = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &grads([0.0, 0.0]), &mut s).unwrap();
        assert_eq!(p, params());
        assert_eq!(s.step, 1);
        s.m.get_mut("w").unwrap().data_mut()[1] = 0.4;
        adam_step(&mut p, &grads([0.0, 0.0]), &mut s).unwrap();
        assert_eq!(s.m["w"].data()[1], 0.9 * 0.4);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = params();
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(cfg.clone(), &p);
        adam_step(&mut p, &grads([0.2, -4.0]), &mut s).unwrap();
        // m̂ = g, v̂ = g², update = lr·g / (|g| + eps).
        let want0 = 1.0 - cfg.lr * 0.2 / (0.2 + cfg.eps);
        let want1 = -2.0 - cfg.lr * -4.0 / (4.0 + cfg.eps);
        assert!((p["w"].data()[0] - want0).abs() < 1e-15);
        assert!((p["w"].data()[1] - want1).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = params();
        let mut s = AdamState::new(AdamConfig::default(), &p);
        assert!(matches!(
            adam_step(&mut p, &grads([f64::NAN, 0.0]), &mut s),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, params());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = params();
        let mut s = AdamState::new(
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            &p,
        );
        adam_step(&mut p, &grads([1.0, 3.0]), &mut s).unwrap();
        assert_eq!(p, params());
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut p = params();
        let snap = snapshot(&p);
        sgd_step(&mut p, &grads([1.0, 1.0]), 0.1).unwrap();
        assert_ne!(checksum(&p), snap.checksum());
        restore(&mut p, &snap).unwrap();
        assert_eq!(checksum(&p), snap.checksum());
        restore(&mut p, &snap).unwrap();
        assert_eq!(p, params());
    }

    #[test]
    fn restore_rejects_other_architecture() {
        let snap = snapshot(&params());
        let mut other = ParamMap::new();
        other.insert("w".into(), Tensor::zeros(2, 1));
        assert!(matches!(restore(&mut other, &snap), Err(Error::ArchitectureMismatch(_))));
    }

    #[test]
    fn early_stopping() {
        let mut s = EarlyStopper::new(3);
        for v in [0.1, 0.2, 0.3, 0.4] {
            assert_eq!(s.observe(v), StopDecision::Continue);
        }
        let mut s = EarlyStopper::new(3);
        let d: Vec<_> = [0.5, 0.4, 0.4, 0.4].iter().map(|&v| s.observe(v)).collect();
        assert_eq!(d[..3], [StopDecision::Continue; 3]);
        assert_eq!(d[3], StopDecision::Stop);
        let mut s = EarlyStopper::new(2);
        s.observe(0.5);
        s.observe(0.5);
        assert_eq!(s.observe(0.5), StopDecision::Stop);
    }
}
