//! Choosing between the independent and the spatial susceptibility prior.
//!
//! Fit the independent model, score each unit by the cross-entropy of its
//! fitted outbreak probabilities, and look for spatial autocorrelation in
//! those scores with a binned correlogram and a permutation envelope.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epimodel::{cross_entropy_by_unit, BackgroundRate, ForceTable, OutbreakPanel};
use crate::error::{invalid, Error, Result};
use crate::mcmc::{fit_ism, quantile_sorted, McmcConfig, ModelKind};
use crate::rng::StreamKey;
use crate::spatial::{DistanceMatrix, KernelParams};

/// Minimum number of units for a correlogram.
pub const MIN_UNITS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelogramConfig {
    pub n_bins: usize,
    pub n_perms: usize,
    /// Bins with fewer pairs report no estimate.
    pub min_pairs: usize,
    pub seed: u64,
}

impl Default for CorrelogramConfig {
    fn default() -> Self {
        Self {
            n_bins: 10,
            n_perms: 999,
            min_pairs: 30,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlogram {
    pub bin_edges: Vec<f64>,
    pub bin_centers: Vec<f64>,
    /// `None` where the bin has fewer than `min_pairs` pairs.
    pub estimate: Vec<Option<f64>>,
    pub n_pairs: Vec<usize>,
    pub env_lo: Vec<Option<f64>>,
    pub env_hi: Vec<Option<f64>>,
    pub n_permutations: usize,
    pub min_pairs: usize,
}

impl Correlogram {
    /// Indices of bins that carry an estimate, in distance order.
    pub fn valid_bins(&self) -> Vec<usize> {
        (0..self.estimate.len())
            .filter(|&b| self.estimate[b].is_some())
            .collect()
    }
}

/// Pairs `(i, j)`, `i < j`, grouped by distance bin; pairs beyond the last
/// edge are dropped. Bin `b` covers `(edges[b], edges[b+1]]`, and the first
/// bin also takes zero distances.
fn bin_pairs(d: &DistanceMatrix, edges: &[f64]) -> Vec<Vec<(u32, u32)>> {
    let n_bins = edges.len() - 1;
    let width = edges[1] - edges[0];
    let top = edges[n_bins];
    let mut bins = vec![Vec::new(); n_bins];
    for i in 0..d.len() {
        for j in i + 1..d.len() {
            let dist = d.get(i, j);
            if dist > top {
                continue;
            }
            let b = if dist <= 0.0 {
                0
            } else {
                ((dist / width).ceil() as usize).clamp(1, n_bins) - 1
            };
            bins[b].push((i as u32, j as u32));
        }
    }
    bins
}

fn centered(values: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let r: Vec<f64> = values.iter().map(|v| v - m).collect();
    let var = r.iter().map(|v| v * v).sum::<f64>() / n;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::UndefinedCorrelation(
            "values are constant; the correlogram is undefined".into(),
        ));
    }
    Ok((r, var))
}

fn estimates(r: &[f64], var: f64, bins: &[Vec<(u32, u32)>]) -> Vec<f64> {
    bins.iter()
        .map(|pairs| {
            if pairs.is_empty() {
                return f64::NAN;
            }
            let s: f64 = pairs.iter().map(|&(i, j)| r[i as usize] * r[j as usize]).sum();
            s / pairs.len() as f64 / var
        })
        .collect()
}

/// Binned autocorrelation `c(b) = mean_{pairs in b}(r_i r_j) / var(r)` with
/// `r` the centred values and `var` the population variance, over equal
/// bins of `(0, max_distance]`. Empty bins give NaN. No size guard.
pub fn binned_autocorrelation(values: &[f64], d: &DistanceMatrix, n_bins: usize, max_distance: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if values.len() != d.len() {
        return invalid("values and distances disagree on the unit count");
    }
    if n_bins == 0 || !(max_distance > 0.0) {
        return invalid("need at least one bin over a positive distance range");
    }
    let edges: Vec<f64> = (0..=n_bins).map(|b| max_distance * b as f64 / n_bins as f64).collect();
    let bins = bin_pairs(d, &edges);
    let (r, var) = centered(values)?;
    Ok((estimates(&r, var, &bins), bins.iter().map(Vec::len).collect()))
}

/// Correlogram over `(0, max_distance / 2]` with a permutation envelope.
/// Permutation `k` shuffles the values with its own stream, so the envelope
/// does not depend on the thread count.
pub fn spatial_correlogram(values: &[f64], d: &DistanceMatrix, cfg: &CorrelogramConfig) -> Result<Correlogram> {
    let n = values.len();
    if n < MIN_UNITS {
        return invalid(format!("correlogram needs at least {MIN_UNITS} units, got {n}"));
    }
    if d.len() != n {
        return invalid("values and distances disagree on the unit count");
    }
    if cfg.n_bins == 0 || cfg.n_perms == 0 {
        return invalid("n_bins and n_perms must be positive");
    }
    let half = d.max_distance() / 2.0;
    if !(half > 0.0) {
        return invalid("all units coincide");
    }
    let nb = cfg.n_bins;
    let edges: Vec<f64> = (0..=nb).map(|b| half * b as f64 / nb as f64).collect();
    let centers: Vec<f64> = (0..nb).map(|b| 0.5 * (edges[b] + edges[b + 1])).collect();
    let bins = bin_pairs(d, &edges);
    let counts: Vec<usize> = bins.iter().map(Vec::len).collect();
    let (r, var) = centered(values)?;
    let observed = estimates(&r, var, &bins);

    let key = StreamKey::new(cfg.seed, "permutations");
    let perms: Vec<Vec<f64>> = (0..cfg.n_perms)
        .into_par_iter()
        .map(|k| {
            let mut rng = key.child(k as u64).rng();
            let mut rp = r.clone();
            rp.shuffle(&mut rng);
            estimates(&rp, var, &bins)
        })
        .collect();

    let valid = |b: usize| counts[b] >= cfg.min_pairs && counts[b] > 0;
    let mut env_lo = vec![None; nb];
    let mut env_hi = vec![None; nb];
    for b in (0..nb).filter(|&b| valid(b)) {
        let mut col: Vec<f64> = perms.iter().map(|p| p[b]).collect();
        col.sort_by(f64::total_cmp);
        env_lo[b] = Some(quantile_sorted(&col, 0.025));
        env_hi[b] = Some(quantile_sorted(&col, 0.975));
    }
    Ok(Correlogram {
        bin_edges: edges,
        bin_centers: centers,
        estimate: (0..nb).map(|b| valid(b).then_some(observed[b])).collect(),
        n_pairs: counts,
        env_lo,
        env_hi,
        n_permutations: cfg.n_perms,
        min_pairs: cfg.min_pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Independent,
    Dependent,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Independent => "independent",
            Verdict::Dependent => "dependent",
        }
    }

    /// Model recommended by the verdict.
    pub fn model(self) -> ModelKind {
        match self {
            Verdict::Independent => ModelKind::Ism,
            Verdict::Dependent => ModelKind::Sdsm,
        }
    }
}

/// Dependent iff at least `min_exceed` of the first `first_bins` valid bins
/// lie above the upper envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionRule {
    pub first_bins: usize,
    pub min_exceed: usize,
}

impl Default for DecisionRule {
    fn default() -> Self {
        Self { first_bins: 5, min_exceed: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceDecision {
    pub verdict: Verdict,
    /// Bins (by index) above the upper envelope among those inspected.
    pub flagged_bins: Vec<usize>,
    pub rule: DecisionRule,
}

pub fn decide(c: &Correlogram, rule: DecisionRule) -> DependenceDecision {
    let flagged: Vec<usize> = c
        .valid_bins()
        .into_iter()
        .take(rule.first_bins)
        .filter(|&b| matches!((c.estimate[b], c.env_hi[b]), (Some(e), Some(h)) if e > h))
        .collect();
    DependenceDecision {
        verdict: if flagged.len() >= rule.min_exceed {
            Verdict::Dependent
        } else {
            Verdict::Independent
        },
        flagged_bins: flagged,
        rule,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct HeuristicConfig {
    pub mcmc: McmcConfig,
    pub correlogram: CorrelogramConfig,
    pub rule: DecisionRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicResult {
    pub correlogram: Correlogram,
    pub decision: DependenceDecision,
    /// Posterior-mean susceptibility under the independent model.
    pub beta_mean: Vec<f64>,
    /// Per-unit cross-entropy of the fitted probabilities.
    pub losses: Vec<f64>,
}

/// Fits the independent model, scores units by cross-entropy under the
/// posterior-mean field and applies the correlogram rule to the scores.
pub fn dependence_heuristic(
    panel: &OutbreakPanel,
    d: &DistanceMatrix,
    k: &KernelParams,
    gamma: BackgroundRate,
    cfg: &HeuristicConfig,
) -> Result<HeuristicResult> {
    if panel.n_units() < MIN_UNITS {
        return invalid(format!("the heuristic needs at least {MIN_UNITS} units, got {}", panel.n_units()));
    }
    let chain = fit_ism(panel, d, k, gamma, &cfg.mcmc)?;
    let beta_mean = chain.beta_mean();
    let probs = ForceTable::new(panel, d, k).probabilities(&beta_mean, gamma.value());
    let losses = cross_entropy_by_unit(panel, &probs)?;
    let correlogram = spatial_correlogram(&losses, d, &cfg.correlogram)?;
    let decision = decide(&correlogram, cfg.rule);
    Ok(HeuristicResult { correlogram, decision, beta_mean, losses })
}
