//! The discrete-time SIS outbreak model.
//!
//! A unit `i` at step `t` receives force of infection
//! `lambda_i(t) = beta_i * sum_{j in I(t-1)} k(d_ij)` from the units infected
//! at the previous step (the unit itself included), and has an outbreak with
//! probability `1 - exp(-lambda_i(t) - gamma)`.
//!
//! Time columns are 0-based throughout this crate: column `0` is the first
//! observation and the likelihood runs over columns `1..T`, conditioning on
//! column `0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spatial::{DistanceMatrix, KernelParams};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs in
/// cross-entropy losses.
pub const PROB_CLAMP: f64 = 1e-12;

/// Binary `N x T` outbreak history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutbreakPanel {
    n: usize,
    t: usize,
    /// Row-major, `y[i * t + col]`.
    y: Vec<u8>,
    time_labels: Vec<String>,
}

impl OutbreakPanel {
    pub fn new(n: usize, t: usize, y: Vec<u8>) -> Result<Self> {
        let labels = (1..=t).map(|s| s.to_string()).collect();
        Self::with_labels(n, t, y, labels)
    }

    pub fn with_labels(n: usize, t: usize, y: Vec<u8>, time_labels: Vec<String>) -> Result<Self> {
        if n == 0 {
            return invalid("panel needs at least one unit");
        }
        if t < 2 {
            return invalid(format!("panel needs T >= 2 time steps, got {t}"));
        }
        if y.len() != n * t {
            return invalid(format!("panel data has {} cells, expected {}", y.len(), n * t));
        }
        if let Some(p) = y.iter().position(|&v| v > 1) {
            return invalid(format!("non-binary entry {} at cell {p}", y[p]));
        }
        if time_labels.len() != t {
            return invalid("time label count does not match T");
        }
        Ok(Self { n, t, y, time_labels })
    }

    /// Builds a panel from per-unit rows.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return invalid("ragged panel rows");
        }
        Self::new(n, t, rows.concat())
    }

    pub fn n_units(&self) -> usize {
        self.n
    }

    pub fn n_times(&self) -> usize {
        self.t
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize) -> u8 {
        self.y[i * self.t + t]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.y[i * self.t..(i + 1) * self.t]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.y
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    /// Indices of the units infected in column `t`.
    pub fn infected_at(&self, t: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.get(i, t) == 1).collect()
    }

    /// Number of outbreaks in column `t`.
    pub fn column_count(&self, t: usize) -> usize {
        (0..self.n).map(|i| self.get(i, t) as usize).sum()
    }

    pub fn total_outbreaks(&self) -> usize {
        self.y.iter().map(|&v| v as usize).sum()
    }

    /// Panel restricted to the given unit rows, in that order.
    pub fn subset_units(&self, idx: &[usize]) -> Result<Self> {
        let y = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self::with_labels(idx.len(), self.t, y, self.time_labels.clone())
    }

    /// Panel restricted to columns `start..end`.
    pub fn subset_times(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t {
            return Err(Error::Index(format!("time range {start}..{end} outside 0..{}", self.t)));
        }
        let y = (0..self.n)
            .flat_map(|i| self.row(i)[start..end].iter().copied())
            .collect();
        Self::with_labels(self.n, end - start, y, self.time_labels[start..end].to_vec())
    }
}

/// Per-unit susceptibility `beta_i > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityField {
    beta: Vec<f64>,
}

impl SusceptibilityField {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if let Some(i) = beta.iter().position(|&b| !(b.is_finite() && b > 0.0)) {
            return invalid(format!("susceptibility at unit {i} must be positive and finite, got {}", beta[i]));
        }
        Ok(Self { beta })
    }

    pub fn from_log(log_beta: &[f64]) -> Result<Self> {
        Self::new(log_beta.iter().map(|v| v.exp()).collect())
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.beta
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.beta
    }
}

/// Spontaneous per-unit, per-step infection hazard `gamma >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct BackgroundRate(f64);

impl BackgroundRate {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return invalid(format!("background rate must be finite and >= 0, got {gamma}"));
        }
        Ok(Self(gamma))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Likelihood variants. The default multiplies over every unit at every
/// step; `exclude_infected_prev` drops cells whose unit was infected at the
/// previous step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodOptions {
    pub exclude_infected_prev: bool,
}

fn check_shapes(panel: &OutbreakPanel, beta: &SusceptibilityField, d: &DistanceMatrix) -> Result<()> {
    if beta.len() != panel.n_units() || d.len() != panel.n_units() {
        return invalid(format!(
            "size mismatch: panel has {} units, beta {}, distances {}",
            panel.n_units(),
            beta.len(),
            d.len()
        ));
    }
    Ok(())
}

/// Transmission force at column `t` (`1 <= t < T`), driven by column `t-1`.
pub fn force_of_infection(
    panel: &OutbreakPanel,
    beta: &SusceptibilityField,
    d: &DistanceMatrix,
    k: &KernelParams,
    t: usize,
) -> Result<Vec<f64>> {
    check_shapes(panel, beta, d)?;
    if t == 0 || t >= panel.n_times() {
        return Err(Error::Index(format!(
            "time column {t} outside 1..{}",
            panel.n_times()
        )));
    }
    let infected = panel.infected_at(t - 1);
    Ok((0..panel.n_units())
        .map(|i| {
            let s: f64 = infected.iter().map(|&j| k.eval_unchecked(d.get(i, j))).sum();
            beta.values()[i] * s
        })
        .collect())
}

/// `P = 1 - exp(-lambda - gamma)`.
pub fn outbreak_probability(lambda: f64, gamma: BackgroundRate) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 {
        return invalid(format!("force of infection must be >= 0, got {lambda}"));
    }
    Ok(prob_unchecked(lambda + gamma.value()))
}

#[inline]
fn prob_unchecked(hazard: f64) -> f64 {
    -(-hazard).exp_m1()
}

/// `ln(1 - exp(-h))`, accurate for small hazards.
#[inline]
pub(crate) fn ln_prob(hazard: f64) -> f64 {
    (-(-hazard).exp_m1()).ln()
}

/// Result of a full likelihood evaluation. `degenerate` is set when an
/// observed outbreak has zero probability, in which case `value` is `-inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikelihood {
    pub value: f64,
    pub degenerate: bool,
}

/// Bernoulli log-likelihood of columns `1..T` given column `0`.
pub fn log_likelihood(
    panel: &OutbreakPanel,
    beta: &SusceptibilityField,
    gamma: BackgroundRate,
    d: &DistanceMatrix,
    k: &KernelParams,
) -> Result<LogLikelihood> {
    log_likelihood_with(panel, beta, gamma, d, k, LikelihoodOptions::default())
}

pub fn log_likelihood_with(
    panel: &OutbreakPanel,
    beta: &SusceptibilityField,
    gamma: BackgroundRate,
    d: &DistanceMatrix,
    k: &KernelParams,
    opts: LikelihoodOptions,
) -> Result<LogLikelihood> {
    check_shapes(panel, beta, d)?;
    let slices: Vec<f64> = (1..panel.n_times())
        .into_par_iter()
        .map(|t| slice_log_likelihood(panel, beta, gamma, d, k, t, opts))
        .collect();
    // Sequential reduction keeps the result independent of the thread count.
    let value: f64 = slices.iter().sum();
    Ok(LogLikelihood {
        value,
        degenerate: value == f64::NEG_INFINITY,
    })
}

/// Log-likelihood contribution of a single column `t >= 1`.
pub fn slice_log_likelihood(
    panel: &OutbreakPanel,
    beta: &SusceptibilityField,
    gamma: BackgroundRate,
    d: &DistanceMatrix,
    k: &KernelParams,
    t: usize,
    opts: LikelihoodOptions,
) -> f64 {
    let infected = panel.infected_at(t - 1);
    let g = gamma.value();
    let mut acc = 0.0;
    for i in 0..panel.n_units() {
        if opts.exclude_infected_prev && panel.get(i, t - 1) == 1 {
            continue;
        }
        let s: f64 = infected.iter().map(|&j| k.eval_unchecked(d.get(i, j))).sum();
        let h = beta.values()[i] * s + g;
        acc += if panel.get(i, t) == 1 { ln_prob(h) } else { -h };
    }
    acc
}

/// Fitted outbreak probabilities `P_i(t)` for columns `1..T`, as an
/// `N x (T-1)` row-major matrix.
pub fn fitted_probabilities(
    panel: &OutbreakPanel,
    beta: &SusceptibilityField,
    gamma: BackgroundRate,
    d: &DistanceMatrix,
    k: &KernelParams,
) -> Result<Vec<f64>> {
    check_shapes(panel, beta, d)?;
    let forces = ForceTable::new(panel, d, k);
    Ok(forces.probabilities(beta.values(), gamma.value()))
}

/// Per-unit cross-entropy `L_i = -sum_t [y ln P + (1-y) ln(1-P)]` over
/// columns `1..T`. `probs` is `N x (T-1)` row-major; probabilities are
/// clamped to `[1e-12, 1 - 1e-12]`.
pub fn cross_entropy_by_unit(panel: &OutbreakPanel, probs: &[f64]) -> Result<Vec<f64>> {
    let (n, tm1) = (panel.n_units(), panel.n_times() - 1);
    if probs.len() != n * tm1 {
        return invalid(format!("expected {} probabilities, got {}", n * tm1, probs.len()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return invalid(format!("probability {p} outside [0, 1]"));
    }
    Ok((0..n)
        .map(|i| {
            (1..panel.n_times())
                .map(|t| {
                    let p = probs[i * tm1 + t - 1].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    if panel.get(i, t) == 1 {
                        -p.ln()
                    } else {
                        -(1.0 - p).ln()
                    }
                })
                .sum()
        })
        .collect())
}

/// Unscaled transmission force `F_i(t) = sum_{j in I(t-1)} k(d_ij)` for all
/// units and columns `1..T`. Since the infectious sets are observed, this
/// table is fixed data once the kernel is fixed, and `lambda = beta * F`.
#[derive(Debug, Clone)]
pub struct ForceTable {
    n: usize,
    t: usize,
    /// `f[i * (t-1) + (col-1)]`.
    f: Vec<f64>,
}

impl ForceTable {
    pub fn new(panel: &OutbreakPanel, d: &DistanceMatrix, k: &KernelParams) -> Self {
        let kmat = k.matrix(d);
        Self::from_kernel_matrix(panel, &kmat, d.len())
    }

    /// `kmat` is the row-major `n x n` kernel matrix over the panel's units.
    pub fn from_kernel_matrix(panel: &OutbreakPanel, kmat: &[f64], n: usize) -> Self {
        let (pn, t) = (panel.n_units(), panel.n_times());
        debug_assert_eq!(pn, n);
        let tm1 = t - 1;
        let mut f = vec![0.0; n * tm1];
        for col in 1..t {
            for j in panel.infected_at(col - 1) {
                let krow = &kmat[j * n..(j + 1) * n];
                for (i, kv) in krow.iter().enumerate() {
                    f[i * tm1 + col - 1] += kv;
                }
            }
        }
        Self { n, t, f }
    }

    /// Force on `targets` from infections among `sources`, where the
    /// infection history of the sources is `source_panel` and `kernel(i, j)`
    /// is evaluated between target `i` and source `j`.
    pub fn cross(
        source_panel: &OutbreakPanel,
        n_targets: usize,
        kernel: impl Fn(usize, usize) -> f64,
    ) -> Self {
        let t = source_panel.n_times();
        let tm1 = t - 1;
        let mut f = vec![0.0; n_targets * tm1];
        for col in 1..t {
            for j in source_panel.infected_at(col - 1) {
                for i in 0..n_targets {
                    f[i * tm1 + col - 1] += kernel(i, j);
                }
            }
        }
        Self { n: n_targets, t, f }
    }

    pub fn n_units(&self) -> usize {
        self.n
    }

    pub fn n_times(&self) -> usize {
        self.t
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let tm1 = self.t - 1;
        &self.f[i * tm1..(i + 1) * tm1]
    }

    /// Mean unscaled force on unit `i` over columns `1..T`.
    pub fn mean_force(&self, i: usize) -> f64 {
        let r = self.row(i);
        r.iter().sum::<f64>() / r.len() as f64
    }

    /// Total force series `M_t = sum_i F_i(t)`, columns `1..T`.
    pub fn column_totals(&self) -> Vec<f64> {
        let tm1 = self.t - 1;
        let mut out = vec![0.0; tm1];
        for i in 0..self.n {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// `N x (T-1)` outbreak probabilities for the given susceptibilities.
    pub fn probabilities(&self, beta: &[f64], gamma: f64) -> Vec<f64> {
        let tm1 = self.t - 1;
        (0..self.n)
            .flat_map(|i| {
                let b = beta[i];
                self.f[i * tm1..(i + 1) * tm1]
                    .iter()
                    .map(move |&f| prob_unchecked(b * f + gamma))
            })
            .collect()
    }
}

/// Sufficient statistics of one unit's likelihood row. The row log-likelihood
/// is `sum_{y=1} ln(1 - exp(-beta F - gamma)) - beta * S0 - gamma * n0`,
/// where `S0` and `n0` are the total force and count over `y = 0` cells.
#[derive(Debug, Clone)]
pub struct UnitRow {
    ones: Vec<f64>,
    zero_force: f64,
    zero_count: f64,
}

impl UnitRow {
    pub fn log_likelihood(&self, beta: f64, gamma: f64) -> f64 {
        let mut acc = -beta * self.zero_force - gamma * self.zero_count;
        for &f in &self.ones {
            acc += ln_prob(beta * f + gamma);
        }
        acc
    }

    /// True when some observed outbreak receives zero force.
    pub fn has_unforced_outbreak(&self) -> bool {
        self.ones.iter().any(|&f| f == 0.0)
    }

    pub fn n_outbreaks(&self) -> usize {
        self.ones.len()
    }
}

/// Likelihood rows for every unit, the form used by the samplers: given the
/// panel and kernel the likelihood factorises over units.
#[derive(Debug, Clone)]
pub struct RowLikelihood {
    rows: Vec<UnitRow>,
    gamma: f64,
}

impl RowLikelihood {
    pub fn new(
        panel: &OutbreakPanel,
        forces: &ForceTable,
        gamma: BackgroundRate,
        opts: LikelihoodOptions,
    ) -> Self {
        let t = panel.n_times();
        let rows = (0..panel.n_units())
            .map(|i| {
                let f = forces.row(i);
                let mut ones = Vec::new();
                let (mut zero_force, mut zero_count) = (0.0, 0.0);
                for col in 1..t {
                    if opts.exclude_infected_prev && panel.get(i, col - 1) == 1 {
                        continue;
                    }
                    if panel.get(i, col) == 1 {
                        ones.push(f[col - 1]);
                    } else {
                        zero_force += f[col - 1];
                        zero_count += 1.0;
                    }
                }
                UnitRow { ones, zero_force, zero_count }
            })
            .collect();
        Self { rows, gamma: gamma.value() }
    }

    pub fn n_units(&self) -> usize {
        self.rows.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn row(&self, i: usize) -> &UnitRow {
        &self.rows[i]
    }

    #[inline]
    pub fn unit(&self, i: usize, beta: f64) -> f64 {
        self.rows[i].log_likelihood(beta, self.gamma)
    }

    pub fn total(&self, beta: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(beta)
            .map(|(r, &b)| r.log_likelihood(b, self.gamma))
            .sum()
    }

    /// With `gamma = 0`, an outbreak that receives no transmission force has
    /// probability zero for every susceptibility value.
    pub fn check_identifiable(&self) -> Result<()> {
        if self.gamma == 0.0 {
            if let Some(i) = self.rows.iter().position(UnitRow::has_unforced_outbreak) {
                return Err(Error::DegenerateLikelihood(format!(
                    "background rate is 0 but unit {i} has an outbreak with no infectious source; \
                     the posterior is -inf everywhere"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{pairwise_distances, SpatialUnits};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_units() -> (DistanceMatrix, KernelParams) {
        let u = SpatialUnits::from_coords(vec![[0.0, 0.0], [10.0, 0.0]]).unwrap();
        (pairwise_distances(&u).unwrap(), KernelParams::new(10.0, 2.0).unwrap())
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, t: usize) -> (OutbreakPanel, SusceptibilityField, DistanceMatrix, KernelParams, BackgroundRate) {
        let pts = (0..n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
        let d = pairwise_distances(&SpatialUnits::from_coords(pts).unwrap()).unwrap();
        let y = (0..n * t).map(|_| rng.random_bool(0.4) as u8).collect();
        let panel = OutbreakPanel::new(n, t, y).unwrap();
        let beta = SusceptibilityField::new((0..n).map(|_| rng.random_range(0.05..2.0)).collect()).unwrap();
        let k = KernelParams::new(rng.random_range(5.0..50.0), rng.random_range(1.0..4.0)).unwrap();
        let g = BackgroundRate::new(rng.random_range(0.01..0.5)).unwrap();
        (panel, beta, d, k, g)
    }

    #[test]
    fn empty_infectious_set_gives_zero_force() {
        let (d, k) = two_units();
        let panel = OutbreakPanel::from_rows(&[vec![0, 1], vec![0, 0]]).unwrap();
        let beta = SusceptibilityField::new(vec![2.0, 3.0]).unwrap();
        assert_eq!(force_of_infection(&panel, &beta, &d, &k, 1).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_infectious_neighbour() {
        let (d, k) = two_units();
        let panel = OutbreakPanel::from_rows(&[vec![0, 0], vec![1, 0]]).unwrap();
        let beta = SusceptibilityField::new(vec![2.0, 3.0]).unwrap();
        let lam = force_of_infection(&panel, &beta, &d, &k, 1).unwrap();
        assert_eq!(lam[0], 0.5);
        // the infected unit feels its own k(0) = 1
        assert_eq!(lam[1], 3.0);
    }

    #[test]
    fn force_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (panel, beta, d, k, _) = random_instance(&mut rng, 5, 6);
        for t in 1..6 {
            let lam = force_of_infection(&panel, &beta, &d, &k, t).unwrap();
            for i in 0..5 {
                let mut s = 0.0;
                for j in 0..5 {
                    if panel.get(j, t - 1) == 1 {
                        s += (1.0 + d.get(i, j) / k.phi).powf(-k.b0);
                    }
                }
                assert!((lam[i] - beta.values()[i] * s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn force_time_bounds() {
        let (d, k) = two_units();
        let panel = OutbreakPanel::from_rows(&[vec![0, 0], vec![1, 0]]).unwrap();
        let beta = SusceptibilityField::new(vec![1.0, 1.0]).unwrap();
        assert!(matches!(force_of_infection(&panel, &beta, &d, &k, 0), Err(Error::Index(_))));
        assert!(matches!(force_of_infection(&panel, &beta, &d, &k, 2), Err(Error::Index(_))));
    }

    #[test]
    fn probability_identities() {
        let g0 = BackgroundRate::new(0.0).unwrap();
        assert_eq!(outbreak_probability(0.0, g0).unwrap(), 0.0);
        let g = BackgroundRate::new(0.001).unwrap();
        let p = outbreak_probability(0.0, g).unwrap();
        assert!((p - (1.0 - (-0.001f64).exp())).abs() < 1e-15);
        assert!((p - 0.0009995).abs() < 1e-7);
        let g = BackgroundRate::new(std::f64::consts::LN_2).unwrap();
        let p = outbreak_probability(std::f64::consts::LN_2, g).unwrap();
        assert!((p - 0.75).abs() <= 0.75 * 1e-15);
        assert!(outbreak_probability(-1.0, g).is_err());
        assert!(BackgroundRate::new(-0.1).is_err());
    }

    #[test]
    fn all_zero_panel_has_zero_loglik_without_background() {
        let (d, k) = two_units();
        let panel = OutbreakPanel::from_rows(&[vec![0, 0, 0], vec![0, 0, 0]]).unwrap();
        let beta = SusceptibilityField::new(vec![1.3, 0.2]).unwrap();
        let ll = log_likelihood(&panel, &beta, BackgroundRate::new(0.0).unwrap(), &d, &k).unwrap();
        assert_eq!(ll.value, 0.0);
        assert!(!ll.degenerate);
    }

    #[test]
    fn single_bernoulli_half() {
        let u = SpatialUnits::from_coords(vec![[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let d = pairwise_distances(&u).unwrap().subset(&[0]);
        let panel = OutbreakPanel::from_rows(&[vec![0, 1]]).unwrap();
        let beta = SusceptibilityField::new(vec![1.0]).unwrap();
        let g = BackgroundRate::new(std::f64::consts::LN_2).unwrap();
        let k = KernelParams::new(1.0, 3.0).unwrap();
        let ll = log_likelihood(&panel, &beta, g, &d, &k).unwrap();
        assert!((ll.value - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_outbreak_is_flagged() {
        let (d, k) = two_units();
        let panel = OutbreakPanel::from_rows(&[vec![0, 1], vec![0, 0]]).unwrap();
        let beta = SusceptibilityField::new(vec![1.0, 1.0]).unwrap();
        let ll = log_likelihood(&panel, &beta, BackgroundRate::new(0.0).unwrap(), &d, &k).unwrap();
        assert!(ll.degenerate);
        assert_eq!(ll.value, f64::NEG_INFINITY);
    }

    #[test]
    fn loglik_is_sum_of_slices_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (panel, beta, d, k, g) = random_instance(&mut rng, 6, 7);
        let full = log_likelihood(&panel, &beta, g, &d, &k).unwrap().value;
        let by_slice: f64 = (1..7)
            .map(|t| slice_log_likelihood(&panel, &beta, g, &d, &k, t, LikelihoodOptions::default()))
            .sum();
        assert!((full - by_slice).abs() < 1e-12);
        let rows = RowLikelihood::new(&panel, &ForceTable::new(&panel, &d, &k), g, LikelihoodOptions::default());
        assert!((full - rows.total(beta.values())).abs() < 1e-10);
    }

    #[test]
    fn excluding_previously_infected_cells() {
        let (d, k) = two_units();
        let panel = OutbreakPanel::from_rows(&[vec![1, 1, 0], vec![0, 1, 1]]).unwrap();
        let beta = SusceptibilityField::new(vec![0.7, 1.1]).unwrap();
        let g = BackgroundRate::new(0.05).unwrap();
        let opts = LikelihoodOptions { exclude_infected_prev: true };
        let ll = log_likelihood_with(&panel, &beta, g, &d, &k, opts).unwrap().value;
        // unit 0 is infected in columns 0 and 1, so both of its cells drop;
        // unit 1 keeps column 1 only
        let lam = force_of_infection(&panel, &beta, &d, &k, 1).unwrap();
        let expected = outbreak_probability(lam[1], g).unwrap().ln();
        assert!((ll - expected).abs() < 1e-14);
        let rows = RowLikelihood::new(&panel, &ForceTable::new(&panel, &d, &k), g, opts);
        assert!((rows.total(beta.values()) - expected).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_cases() {
        let panel = OutbreakPanel::from_rows(&[vec![0, 1, 0], vec![1, 0, 1]]).unwrap();
        let eps = 1e-12;
        let perfect = vec![1.0 - eps, eps, eps, 1.0 - eps];
        let l = cross_entropy_by_unit(&panel, &perfect).unwrap();
        assert!(l.iter().all(|&v| (0.0..1e-10).contains(&v)));

        let panel = OutbreakPanel::new(1, 11, vec![0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0]).unwrap();
        let l = cross_entropy_by_unit(&panel, &[0.5; 10]).unwrap();
        assert!((l[0] - 10.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_resummation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (panel, beta, d, k, g) = random_instance(&mut rng, 5, 8);
        let probs = fitted_probabilities(&panel, &beta, g, &d, &k).unwrap();
        let l = cross_entropy_by_unit(&panel, &probs).unwrap();
        for i in 0..5 {
            let mut s = 0.0;
            for t in 1..8 {
                let lam = force_of_infection(&panel, &beta, &d, &k, t).unwrap()[i];
                let p = 1.0 - (-lam - g.value()).exp();
                let y = panel.get(i, t) as f64;
                s -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
            assert!((l[i] - s).abs() < 1e-10, "{} vs {}", l[i], s);
            assert!(l[i] >= 0.0);
        }
    }

    #[test]
    fn panel_validation() {
        assert!(OutbreakPanel::new(1, 1, vec![0]).is_err());
        assert!(OutbreakPanel::new(1, 2, vec![0, 2]).is_err());
        assert!(OutbreakPanel::new(2, 2, vec![0, 1, 0]).is_err());
        assert!(SusceptibilityField::new(vec![1.0, 0.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn loglik_invariant_to_unit_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
            let y: Vec<u8> = (0..n * 4).map(|_| rng.random_bool(0.4) as u8).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
            let k = KernelParams::new(20.0, 3.0).unwrap();
            let g = BackgroundRate::new(0.05).unwrap();
            let panel = OutbreakPanel::new(n, 4, y).unwrap();
            let d = pairwise_distances(&SpatialUnits::from_coords(pts.clone()).unwrap()).unwrap();
            let ll = log_likelihood(&panel, &SusceptibilityField::new(b.clone()).unwrap(), g, &d, &k).unwrap().value;

            let perm = [3usize, 0, 4, 1, 2];
            let d2 = pairwise_distances(&SpatialUnits::from_coords(perm.iter().map(|&i| pts[i]).collect()).unwrap()).unwrap();
            let p2 = panel.subset_units(&perm).unwrap();
            let b2 = SusceptibilityField::new(perm.iter().map(|&i| b[i]).collect()).unwrap();
            let ll2 = log_likelihood(&p2, &b2, g, &d2, &k).unwrap().value;
            proptest::prop_assert!((ll - ll2).abs() < 1e-10);
        }

        #[test]
        fn probability_bounded_and_monotone(l in 0.0f64..50.0, g in 0.0f64..5.0, dl in 1e-6f64..1.0) {
            let gr = BackgroundRate::new(g).unwrap();
            let p = outbreak_probability(l, gr).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&p));
            let p2 = outbreak_probability(l + dl, gr).unwrap();
            proptest::prop_assert!(p2 >= p);
        }
    }
}
