//! Synthetic interaction streams with a per-user interest switch and a slow
//! calendar drift of item popularity.
//!
//! Items are split into contiguous clusters. Each user draws one preferred
//! cluster per regime from that regime's cluster weights and consumes items
//! from it; the regime changes at fixed fractions of the user's history.
//! Within a cluster, item popularity is Zipf-shaped and its ranking rotates
//! with calendar time, so interactions late in the calendar favour items
//! that are rare early on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Uniform, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Cluster preference weights, one vector per regime. Empty selects two
    /// regimes over disjoint halves of the clusters.
    pub regimes: Vec<Vec<f64>>,
    /// Fractions of each user's history at which the regime advances.
    /// Empty spreads `regimes.len() − 1` switches evenly.
    pub switch_fractions: Vec<f64>,
    /// Probability that an interaction is a uniformly random item.
    pub noise_rate: f64,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Users start uniformly within this window.
    pub start_spread_secs: i64,
    pub mean_gap_secs: f64,
    /// Zipf exponent of within-cluster popularity.
    pub popularity_exponent: f64,
    /// Fraction of a cluster's popularity ranking rotated over the calendar.
    pub popularity_drift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 500,
            items: 200,
            clusters: 10,
            regimes: Vec::new(),
            switch_fractions: vec![0.6],
            noise_rate: 0.05,
            min_interactions: 15,
            max_interactions: 40,
            start_spread_secs: 30 * 86_400,
            mean_gap_secs: 86_400.0,
            popularity_exponent: 1.0,
            popularity_drift: 0.5,
        }
    }
}

impl SynthConfig {
    fn resolved_regimes(&self) -> Vec<Vec<f64>> {
        if !self.regimes.is_empty() {
            return self.regimes.clone();
        }
        let half = self.clusters / 2;
        let early = (0..self.clusters).map(|c| if c < half.max(1) { 1.0 } else { 0.0 }).collect();
        let late = (0..self.clusters)
            .map(|c| if c >= half || self.clusters == 1 { 1.0 } else { 0.0 })
            .collect();
        vec![early, late]
    }

    fn resolved_switches(&self, regimes: usize) -> Vec<f64> {
        if !self.switch_fractions.is_empty() {
            return self.switch_fractions.clone();
        }
        (1..regimes).map(|r| r as f64 / regimes as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.users == 0 {
            errs.push("users must be positive".to_owned());
        }
        if self.clusters == 0 {
            errs.push("clusters must be positive".to_owned());
        }
        if self.items < self.clusters {
            errs.push(format!("item count {} is below cluster count {}", self.items, self.clusters));
        }
        let regimes = self.resolved_regimes();
        if regimes.len() < 2 {
            errs.push("at least two regimes are required".to_owned());
        }
        for (r, w) in regimes.iter().enumerate() {
            if w.len() != self.clusters {
                errs.push(format!("regime {r} has {} weights for {} clusters", w.len(), self.clusters));
            } else if w.iter().any(|&v| !(v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                errs.push(format!("regime {r} weights must be non-negative with positive sum"));
            }
        }
        let switches = self.resolved_switches(regimes.len());
        if switches.len() + 1 != regimes.len() {
            errs.push(format!(
                "{} switch fractions for {} regimes",
                switches.len(),
                regimes.len()
            ));
        }
        if switches.windows(2).any(|w| w[0] > w[1]) || switches.iter().any(|f| !(0.0..=1.0).contains(f)) {
            errs.push("switch fractions must be sorted within [0, 1]".to_owned());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            errs.push("noise_rate must lie in [0, 1]".to_owned());
        }
        if self.min_interactions < 3 || self.max_interactions < self.min_interactions {
            errs.push("interaction counts must satisfy 3 <= min <= max".to_owned());
        }
        if self.start_spread_secs < 0 || !(self.mean_gap_secs > 0.0) {
            errs.push("time parameters must be positive".to_owned());
        }
        if errs.is_empty() {
            Ok(())
        } else if self.items < self.clusters {
            Err(Error::Invalid(errs.join("; ")))
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Cluster of the `k`-th generated item (0-based).
    pub fn cluster_of(&self, k: usize) -> usize {
        k * self.clusters / self.items
    }

    fn cluster_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.clusters];
        for k in 0..self.items {
            members[self.cluster_of(k)].push(k);
        }
        members
    }
}

/// Item id used by the generator for the `k`-th item of `cluster`.
pub fn item_id(cluster: usize, k: usize) -> String {
    format!("c{cluster}_i{k}")
}

/// Cluster encoded in a generated item id.
pub fn cluster_of_item_id(id: &str) -> Option<usize> {
    id.strip_prefix('c')?.split('_').next()?.parse().ok()
}

pub fn synth_shift_generate(cfg: &SynthConfig, seed: u64) -> Result<InteractionDataset> {
    cfg.validate()?;
    let regimes = cfg.resolved_regimes();
    let switches = cfg.resolved_switches(regimes.len());
    let members = cfg.cluster_members();
    let regime_dists = regimes
        .iter()
        .map(|w| WeightedIndex::new(w).map_err(|e| Error::Invalid(e.to_string())))
        .collect::<Result<Vec<_>>>()?;

    let horizon =
        cfg.start_spread_secs as f64 + cfg.max_interactions as f64 * cfg.mean_gap_secs * 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = Uniform::new_inclusive(0.5, 2.0).expect("valid range");
    let mut rows = Vec::new();

    for u in 0..cfg.users {
        let n = rng.random_range(cfg.min_interactions..=cfg.max_interactions);
        let personas: Vec<usize> = regime_dists.iter().map(|d| d.sample(&mut rng)).collect();
        let gap = Exp::new(1.0 / (cfg.mean_gap_secs * rate.sample(&mut rng)))
            .map_err(|e| Error::Invalid(e.to_string()))?;
        let mut t = rng.random_range(0..=cfg.start_spread_secs);
        for i in 0..n {
            let progress = i as f64 / n as f64;
            let regime = switches.iter().take_while(|&&f| progress >= f).count();
            let k = if rng.random::<f64>() < cfg.noise_rate {
                rng.random_range(0..cfg.items)
            } else {
                let pool = &members[personas[regime]];
                let phase = (t as f64 / horizon).min(1.0);
                pick_popular(pool, phase * cfg.popularity_drift, cfg.popularity_exponent, &mut rng)
            };
            rows.push(Interaction {
                user_id: format!("u{u}"),
                item_id: item_id(cfg.cluster_of(k), k),
                timestamp: t,
            });
            t += 1 + gap.sample(&mut rng).floor() as i64;
        }
    }
    InteractionDataset::from_interactions(rows)
}

/// Zipf draw over `pool` whose ranking is rotated by `shift` of its length.
fn pick_popular<R: Rng>(pool: &[usize], shift: f64, exponent: f64, rng: &mut R) -> usize {
    let s = pool.len();
    let offset = ((shift * s as f64).floor() as usize) % s;
    let weights: Vec<f64> = (0..s)
        .map(|p| {
            let rank = (p + s - offset) % s;
            1.0 / ((rank + 1) as f64).powf(exponent)
        })
        .collect();
    let idx = WeightedIndex::new(&weights).expect("positive weights").sample(rng);
    pool[idx]
}
