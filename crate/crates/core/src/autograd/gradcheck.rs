use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::ParamMap;

#[derive(Clone, Debug)]
pub struct FdConfig {
    pub eps: f64,
    pub tol: f64,
    pub coords: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            coords: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FdFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<FdFailure>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares reverse-mode gradients of `f` against central differences on a
/// sampled set of coordinates.
///
/// `f` builds the loss on a fresh graph from the given parameters and must be
/// deterministic. Coordinates are drawn round-robin over the parameter
/// tensors so every tensor is probed. A coordinate fails when
/// `|analytic − numeric| / max(|analytic|, eps) > tol`.
pub fn finite_diff_check<F>(params: &ParamMap, f: F, cfg: &FdConfig) -> Result<FdReport>
where
    F: Fn(&ParamMap, &mut Graph) -> Result<Var>,
{
    if !(cfg.eps > 0.0 && cfg.eps <= 1e-2) {
        return Err(Error::Invalid(format!("finite-difference step {} outside (0, 1e-2]", cfg.eps)));
    }
    let mut graph = Graph::new();
    let loss = f(params, &mut graph)?;
    let analytic = graph.param_grads(&graph.backward(loss)?);

    let names: Vec<&String> = params.keys().filter(|k| !params[*k].is_empty()).collect();
    if names.is_empty() {
        return Ok(FdReport {
            checked: 0,
            max_rel_err: 0.0,
            failures: Vec::new(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = |p: &ParamMap| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(p, &mut g)?;
        Ok(g.value(l).item())
    };

    let mut work = params.clone();
    let mut failures = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for k in 0..cfg.coords {
        let name = names[k % names.len()];
        let index = rng.random_range(0..params[name].len());
        let orig = params[name].data()[index];

        work.get_mut(name).expect("present").data_mut()[index] = orig + cfg.eps;
        let up = eval(&work)?;
        work.get_mut(name).expect("present").data_mut()[index] = orig - cfg.eps;
        let down = eval(&work)?;
        work.get_mut(name).expect("present").data_mut()[index] = orig;

        let numeric = (up - down) / (2.0 * cfg.eps);
        let a = analytic.get(name.as_str()).map_or(0.0, |t| t.data()[index]);
        let rel_err = (a - numeric).abs() / a.abs().max(cfg.eps);
        max_rel_err = max_rel_err.max(rel_err);
        if !(rel_err <= cfg.tol) {
            failures.push(FdFailure {
                param: name.clone(),
                index,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    Ok(FdReport {
        checked: cfg.coords,
        max_rel_err,
        failures,
    })
}
