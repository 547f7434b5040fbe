//! Forward simulation of susceptibility fields and outbreak panels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epimodel::{BackgroundRate, OutbreakPanel, SusceptibilityField};
use crate::error::{invalid, Result};
use crate::linalg::jittered_cholesky;
use crate::rng::StreamKey;
use crate::spatial::{pairwise_distances, DistanceMatrix, KernelParams, SpatialUnits};

/// Hyperparameters of `log beta ~ GP(omega, sigma2 * exp(-d / rho))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub omega: f64,
    pub sigma2: f64,
    pub rho: f64,
}

impl GpHyperparams {
    pub fn new(omega: f64, sigma2: f64, rho: f64) -> Result<Self> {
        if !omega.is_finite() {
            return invalid("GP mean omega must be finite");
        }
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return invalid(format!("GP variance must be > 0, got {sigma2}"));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return invalid(format!("GP range must be > 0, got {rho}"));
        }
        Ok(Self { omega, sigma2, rho })
    }
}

/// `beta_i ~ Exponential` with mean `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsmPrior {
    pub alpha: f64,
}

impl IsmPrior {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return invalid(format!("exponential mean alpha must be > 0, got {alpha}"));
        }
        Ok(Self { alpha })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSpec {
    Independent(IsmPrior),
    Gp(GpHyperparams),
    /// Every unit has the same susceptibility.
    Constant { beta: f64 },
}

/// How the first panel column is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// Each unit infected independently with probability `p0`.
    Random { p0: f64 },
    /// Exactly these unit indices infected.
    Seeds { units: Vec<usize> },
}

impl Default for InitialCondition {
    fn default() -> Self {
        Self::Random { p0: 0.05 }
    }
}

/// Everything needed to generate one synthetic data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub units: SpatialUnits,
    pub kernel: KernelParams,
    pub gamma: f64,
    pub n_times: usize,
    pub field: FieldSpec,
    pub seed: u64,
    pub initial: InitialCondition,
    /// Columns `[start, end)` during which transmission is switched off and
    /// only background infections occur.
    pub transmission_off: Option<(usize, usize)>,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_times < 2 {
            return invalid(format!("T must be >= 2, got {}", self.n_times));
        }
        BackgroundRate::new(self.gamma)?;
        KernelParams::new(self.kernel.phi, self.kernel.b0)?;
        match &self.initial {
            InitialCondition::Random { p0 } if !(0.0..=1.0).contains(p0) => {
                return invalid(format!("p0 must be in [0, 1], got {p0}"));
            }
            InitialCondition::Seeds { units } if units.iter().any(|&u| u >= self.units.len()) => {
                return invalid("seed unit index out of range");
            }
            _ => {}
        }
        match &self.field {
            FieldSpec::Independent(p) => {
                IsmPrior::new(p.alpha)?;
            }
            FieldSpec::Gp(g) => {
                GpHyperparams::new(g.omega, g.sigma2, g.rho)?;
            }
            FieldSpec::Constant { beta } if !(beta.is_finite() && *beta > 0.0) => {
                return invalid(format!("constant susceptibility must be > 0, got {beta}"));
            }
            FieldSpec::Constant { .. } => {}
        }
        Ok(())
    }

    fn key(&self, label: &str) -> StreamKey {
        StreamKey::new(self.seed, label)
    }
}

/// `Sigma[i][j] = sigma2 * exp(-d[i][j] / rho)`.
pub fn cov_matrix(d: &DistanceMatrix, gp: &GpHyperparams) -> DMatrix<f64> {
    let n = d.len();
    DMatrix::from_fn(n, n, |i, j| gp.sigma2 * (-d.get(i, j) / gp.rho).exp())
}

/// `log beta = omega + L z` with `L L' = Sigma` and `z` standard normal.
pub fn sample_beta_gp<R: Rng + ?Sized>(
    d: &DistanceMatrix,
    gp: &GpHyperparams,
    rng: &mut R,
) -> Result<SusceptibilityField> {
    let (chol, _) = jittered_cholesky(&cov_matrix(d, gp))?;
    let z = DVector::from_iterator(d.len(), (0..d.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let x = chol.l_dirty().lower_triangle() * z;
    SusceptibilityField::new(x.iter().map(|v| (gp.omega + v).exp()).collect())
}

/// I.i.d. exponential susceptibilities with mean `alpha`.
pub fn sample_beta_independent<R: Rng + ?Sized>(
    prior: &IsmPrior,
    n: usize,
    rng: &mut R,
) -> Result<SusceptibilityField> {
    let exp = Exp::new(1.0 / prior.alpha).map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
    // An exponential draw of exactly 0 has probability ~2^-53; keep beta > 0.
    SusceptibilityField::new((0..n).map(|_| exp.sample(rng).max(f64::MIN_POSITIVE)).collect())
}

/// Draws the susceptibility field of a scenario from its `field` stream.
pub fn sample_field(scenario: &SimScenario, d: &DistanceMatrix) -> Result<SusceptibilityField> {
    let mut rng = scenario.key("field").rng();
    match &scenario.field {
        FieldSpec::Independent(p) => sample_beta_independent(p, scenario.units.len(), &mut rng),
        FieldSpec::Gp(g) => sample_beta_gp(d, g, &mut rng),
        FieldSpec::Constant { beta } => SusceptibilityField::new(vec![*beta; scenario.units.len()]),
    }
}

const PAR_UNITS: usize = 512;

/// Simulates a panel for a given field. Column 0 follows the initial
/// condition; column `t` is Bernoulli with `P = 1 - exp(-beta F - gamma)`
/// where `F` is driven by column `t-1`. The per-cell uniforms come from the
/// `(unit, t)`-addressed `cells` stream.
pub fn simulate_panel(scenario: &SimScenario, beta: &SusceptibilityField) -> Result<OutbreakPanel> {
    scenario.validate()?;
    let n = scenario.units.len();
    if beta.len() != n {
        return invalid(format!("field has {} units, scenario {}", beta.len(), n));
    }
    let d = pairwise_distances(&scenario.units)?;
    let kmat = scenario.kernel.matrix(&d);
    let t_len = scenario.n_times;
    let mut cols: Vec<Vec<u8>> = Vec::with_capacity(t_len);

    let init_key = scenario.key("initial");
    cols.push(match &scenario.initial {
        InitialCondition::Random { p0 } => (0..n)
            .map(|i| (init_key.cell_uniform(i, 0) < *p0) as u8)
            .collect(),
        InitialCondition::Seeds { units } => {
            let mut c = vec![0u8; n];
            for &u in units {
                c[u] = 1;
            }
            c
        }
    });

    let cells = scenario.key("cells");
    let b = beta.values();
    for t in 1..t_len {
        let prev = &cols[t - 1];
        let infected: Vec<usize> = (0..n).filter(|&j| prev[j] == 1).collect();
        let off = scenario
            .transmission_off
            .is_some_and(|(s, e)| (s..e).contains(&t));
        let cell = |i: usize| -> u8 {
            let force = if off {
                0.0
            } else {
                infected.iter().map(|&j| kmat[i * n + j]).sum::<f64>()
            };
            let p = -(-(b[i] * force + scenario.gamma)).exp_m1();
            (cells.cell_uniform(i, t) < p) as u8
        };
        let col: Vec<u8> = if n >= PAR_UNITS {
            (0..n).into_par_iter().map(cell).collect()
        } else {
            (0..n).map(cell).collect()
        };
        cols.push(col);
    }

    let mut y = vec![0u8; n * t_len];
    for (t, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            y[i * t_len + t] = v;
        }
    }
    OutbreakPanel::new(n, t_len, y)
}

/// Samples the field and then the panel.
pub fn simulate(scenario: &SimScenario) -> Result<(SusceptibilityField, OutbreakPanel)> {
    scenario.validate()?;
    let d = pairwise_distances(&scenario.units)?;
    let beta = sample_field(scenario, &d)?;
    let panel = simulate_panel(scenario, &beta)?;
    Ok((beta, panel))
}

/// `n` units uniform over `[0, width] x [0, height]` km.
pub fn uniform_units<R: Rng + ?Sized>(n: usize, width: f64, height: f64, rng: &mut R) -> Result<SpatialUnits> {
    SpatialUnits::from_coords(
        (0..n)
            .map(|_| [rng.random_range(0.0..width), rng.random_range(0.0..height)])
            .collect(),
    )
}

/// Farm-like clustered layout: `n_clusters` centres uniform over the
/// rectangle, relative cluster sizes uniform on `[0.2, 3)`, and each unit
/// placed with an isotropic normal offset of sd `spread` (km) around a
/// size-weighted random centre. Offsets may leave the rectangle.
pub fn clustered_units<R: Rng + ?Sized>(
    n: usize,
    width: f64,
    height: f64,
    n_clusters: usize,
    spread: f64,
    rng: &mut R,
) -> Result<SpatialUnits> {
    if n_clusters == 0 || !(spread.is_finite() && spread > 0.0) {
        return invalid("need at least one cluster and a positive spread");
    }
    let centres: Vec<[f64; 2]> = (0..n_clusters)
        .map(|_| [rng.random_range(0.0..width), rng.random_range(0.0..height)])
        .collect();
    let weights: Vec<f64> = (0..n_clusters).map(|_| rng.random_range(0.2..3.0)).collect();
    let pick = rand::distr::weighted::WeightedIndex::new(&weights)
        .map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
    SpatialUnits::from_coords(
        (0..n)
            .map(|_| {
                let c = centres[pick.sample(rng)];
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                [c[0] + spread * dx, c[1] + spread * dy]
            })
            .collect(),
    )
}

/// `nx x ny` regular grid with the given spacing (km).
pub fn grid_units(nx: usize, ny: usize, spacing: f64) -> Result<SpatialUnits> {
    SpatialUnits::from_coords(
        (0..ny)
            .flat_map(|r| (0..nx).map(move |c| [c as f64 * spacing, r as f64 * spacing]))
            .collect(),
    )
}
