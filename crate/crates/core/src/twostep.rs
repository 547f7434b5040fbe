//! First-stage estimators: the background rate from a low-activity window
//! and the kernel range by least squares over a grid.
//!
//! Both are held fixed while the susceptibilities are sampled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epimodel::{BackgroundRate, ForceTable, OutbreakPanel};
use crate::error::{invalid, Error, Result};
use crate::spatial::{DistanceMatrix, KernelParams};

/// Columns `[t1, t2)` of a panel (0-based, half-open), `t2 - t1 >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuietWindow {
    pub t1: usize,
    pub t2: usize,
}

impl QuietWindow {
    pub fn new(t1: usize, t2: usize) -> Result<Self> {
        if t2 <= t1 {
            return invalid(format!("window end {t2} must exceed start {t1}"));
        }
        Ok(Self { t1, t2 })
    }

    pub fn width(&self) -> usize {
        self.t2 - self.t1
    }

    fn check(&self, panel: &OutbreakPanel) -> Result<()> {
        if self.t2 > panel.n_times() {
            return Err(Error::Index(format!(
                "window {}..{} exceeds panel length {}",
                self.t1,
                self.t2,
                panel.n_times()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: BackgroundRate,
    pub outbreaks: usize,
    /// Set when the window holds no outbreaks; `gamma` is then 0 and the
    /// fitted likelihood may be degenerate.
    pub empty_window: bool,
}

/// `gamma = outbreaks in window / (N * width)`.
pub fn estimate_gamma_mom(panel: &OutbreakPanel, window: QuietWindow) -> Result<GammaEstimate> {
    window.check(panel)?;
    let outbreaks: usize = (window.t1..window.t2).map(|t| panel.column_count(t)).sum();
    let gamma = outbreaks as f64 / (panel.n_units() * window.width()) as f64;
    Ok(GammaEstimate {
        gamma: BackgroundRate::new(gamma)?,
        outbreaks,
        empty_window: outbreaks == 0,
    })
}

/// The window of the given width with the fewest outbreaks; ties go to the
/// earliest start.
pub fn find_quiet_window(panel: &OutbreakPanel, width: usize) -> Result<QuietWindow> {
    let t = panel.n_times();
    if width == 0 || width >= t {
        return invalid(format!("window width must be in 1..{t}, got {width}"));
    }
    let counts: Vec<usize> = (0..t).map(|c| panel.column_count(c)).collect();
    let mut running: usize = counts[..width].iter().sum();
    let (mut best, mut best_start) = (running, 0);
    for start in 1..=(t - width) {
        running = running + counts[start + width - 1] - counts[start - 1];
        if running < best {
            best = running;
            best_start = start;
        }
    }
    QuietWindow::new(best_start, best_start + width)
}

/// Default window width, `max(4, T / 10)`, capped below `T`.
pub fn default_window_width(n_times: usize) -> usize {
    (n_times / 10).max(4).min(n_times - 1)
}

/// Strictly increasing candidate values for the kernel range (km).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiGrid {
    values: Vec<f64>,
}

impl PhiGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("phi grid is empty");
        }
        if values.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return invalid("phi grid values must be positive and finite");
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("phi grid must be strictly increasing");
        }
        Ok(Self { values })
    }

    /// `size` values spaced evenly in log between `lo` and `hi`.
    pub fn log_spaced(lo: f64, hi: f64, size: usize) -> Result<Self> {
        if size == 0 || !(lo > 0.0 && hi >= lo) {
            return invalid(format!("bad log grid [{lo}, {hi}] x {size}"));
        }
        if size == 1 {
            return Self::new(vec![lo]);
        }
        let (a, b) = (lo.ln(), hi.ln());
        Self::new(
            (0..size)
                .map(|i| (a + (b - a) * i as f64 / (size - 1) as f64).exp())
                .collect(),
        )
    }

    /// 20 log-spaced values between the smallest positive and the largest
    /// pairwise distance.
    pub fn default_for(d: &DistanceMatrix) -> Result<Self> {
        let lo = d
            .min_positive_distance()
            .ok_or_else(|| Error::InvalidInput("all units coincide".into()))?;
        Self::log_spaced(lo, d.max_distance(), 20)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `M_t = sum_i sum_{j in I(t-1)} k(d_ij)` for columns `1..T`.
pub fn total_force_series(panel: &OutbreakPanel, d: &DistanceMatrix, k: &KernelParams) -> Result<Vec<f64>> {
    if d.len() != panel.n_units() {
        return invalid("distance matrix does not match panel");
    }
    let kmat = k.matrix(d);
    let n = d.len();
    // column sums of the kernel matrix: total force emitted by one source
    let emitted: Vec<f64> = (0..n).map(|j| (0..n).map(|i| kmat[i * n + j]).sum()).collect();
    Ok((1..panel.n_times())
        .map(|t| panel.infected_at(t - 1).iter().map(|&j| emitted[j]).sum())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiEstimate {
    pub phi: f64,
    pub index: usize,
    /// Residual sum of squares per grid value.
    pub residuals: Vec<f64>,
    /// Profiled amplitude per grid value.
    pub amplitudes: Vec<f64>,
}

/// For each grid value, fits `O_t ~ c M_t` by least squares (`O_t` the
/// observed outbreak count at column `t`) and keeps the residual sum of
/// squares. The amplitude `c` absorbs the unknown susceptibility scale, so
/// only the shape of the force series is compared. Ties go to the smaller
/// range.
pub fn estimate_phi_grid(panel: &OutbreakPanel, d: &DistanceMatrix, grid: &PhiGrid, b0: f64) -> Result<PhiEstimate> {
    let observed: Vec<f64> = (1..panel.n_times())
        .map(|t| panel.column_count(t) as f64)
        .collect();
    let fits: Vec<(f64, f64, bool)> = grid
        .values()
        .par_iter()
        .map(|&phi| -> Result<(f64, f64, bool)> {
            let k = KernelParams::new(phi, b0)?;
            let m = total_force_series(panel, d, &k)?;
            let mm: f64 = m.iter().map(|v| v * v).sum();
            let om: f64 = observed.iter().zip(&m).map(|(o, v)| o * v).sum();
            let c = if mm > 0.0 { om / mm } else { 0.0 };
            let r = observed
                .iter()
                .zip(&m)
                .map(|(o, v)| (o - c * v).powi(2))
                .sum();
            Ok((r, c, mm > 0.0))
        })
        .collect::<Result<_>>()?;
    if fits.iter().all(|f| !f.2) {
        return Err(Error::EstimationFailed(
            "no infectious units before the last column; the force series is identically zero".into(),
        ));
    }
    let mut index = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.0 < fits[index].0 {
            index = i;
        }
    }
    Ok(PhiEstimate {
        phi: grid.values()[index],
        index,
        residuals: fits.iter().map(|f| f.0).collect(),
        amplitudes: fits.iter().map(|f| f.1).collect(),
    })
}

/// Window selection for the background-rate estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowChoice {
    Fixed(QuietWindow),
    /// Lowest-activity window; width defaults to `max(4, T/10)`.
    Auto { width: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step1Config {
    pub window: WindowChoice,
    /// `None` uses [`PhiGrid::default_for`].
    pub grid: Option<PhiGrid>,
    pub b0: f64,
}

impl Default for Step1Config {
    fn default() -> Self {
        Self {
            window: WindowChoice::Auto { width: None },
            grid: None,
            b0: crate::spatial::DEFAULT_B0,
        }
    }
}

/// Output of the first stage, serialised as `step1.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step1Report {
    pub gamma: f64,
    pub phi: f64,
    pub b0: f64,
    pub window: QuietWindow,
    pub outbreaks_in_window: usize,
    pub gamma_empty_window: bool,
    pub grid: Vec<f64>,
    pub residuals: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// The kernel fit profiles out a scalar amplitude per grid value.
    pub amplitude_profiled: bool,
}

impl Step1Report {
    pub fn kernel(&self) -> Result<KernelParams> {
        KernelParams::new(self.phi, self.b0)
    }

    pub fn background(&self) -> Result<BackgroundRate> {
        BackgroundRate::new(self.gamma)
    }
}

pub fn run_step1(panel: &OutbreakPanel, d: &DistanceMatrix, cfg: &Step1Config) -> Result<Step1Report> {
    let window = match &cfg.window {
        WindowChoice::Fixed(w) => *w,
        WindowChoice::Auto { width } => find_quiet_window(
            panel,
            width.unwrap_or_else(|| default_window_width(panel.n_times())),
        )?,
    };
    let g = estimate_gamma_mom(panel, window)?;
    let grid = match &cfg.grid {
        Some(g) => g.clone(),
        None => PhiGrid::default_for(d)?,
    };
    let phi = estimate_phi_grid(panel, d, &grid, cfg.b0)?;
    Ok(Step1Report {
        gamma: g.gamma.value(),
        phi: phi.phi,
        b0: cfg.b0,
        window,
        outbreaks_in_window: g.outbreaks,
        gamma_empty_window: g.empty_window,
        grid: grid.values().to_vec(),
        residuals: phi.residuals,
        amplitudes: phi.amplitudes,
        amplitude_profiled: true,
    })
}

/// `ForceTable` convenience for a fitted first stage.
pub fn force_table(panel: &OutbreakPanel, d: &DistanceMatrix, report: &Step1Report) -> Result<ForceTable> {
    Ok(ForceTable::new(panel, d, &report.kernel()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::spatial::{pairwise_distances, SpatialUnits};
    use rand::Rng;

    fn random_panel(seed: u64, n: usize, t: usize, p: f64) -> OutbreakPanel {
        let mut rng = stream(seed, "panel");
        OutbreakPanel::new(n, t, (0..n * t).map(|_| rng.random_bool(p) as u8).collect()).unwrap()
    }

    #[test]
    fn gamma_direct_formula() {
        // N = 10, width 6, three outbreaks
        let mut y = vec![0u8; 10 * 8];
        y[0 * 8 + 1] = 1;
        y[4 * 8 + 3] = 1;
        y[9 * 8 + 6] = 1;
        y[9 * 8 + 7] = 1; // outside the window
        let panel = OutbreakPanel::new(10, 8, y).unwrap();
        let g = estimate_gamma_mom(&panel, QuietWindow::new(1, 7).unwrap()).unwrap();
        assert_eq!(g.outbreaks, 3);
        assert!((g.gamma.value() - 0.05).abs() < 1e-15);
        assert!(!g.empty_window);
    }

    #[test]
    fn empty_window_warns() {
        let panel = OutbreakPanel::new(3, 5, vec![0; 15]).unwrap();
        let g = estimate_gamma_mom(&panel, QuietWindow::new(0, 4).unwrap()).unwrap();
        assert_eq!(g.gamma.value(), 0.0);
        assert!(g.empty_window);
        assert!(estimate_gamma_mom(&panel, QuietWindow::new(2, 6).unwrap()).is_err());
    }

    #[test]
    fn gamma_matches_recount() {
        let panel = random_panel(3, 12, 30, 0.2);
        let w = QuietWindow::new(7, 19).unwrap();
        let mut count = 0;
        for i in 0..12 {
            for t in 7..19 {
                count += panel.get(i, t) as usize;
            }
        }
        let g = estimate_gamma_mom(&panel, w).unwrap();
        assert_eq!(g.outbreaks, count);
        assert!((g.gamma.value() - count as f64 / (12.0 * 12.0)).abs() < 1e-15);
    }

    #[test]
    fn quiet_stretch_is_found() {
        let mut rows = vec![vec![1u8; 20]; 4];
        for r in rows.iter_mut() {
            for v in &mut r[9..14] {
                *v = 0;
            }
        }
        let panel = OutbreakPanel::from_rows(&rows).unwrap();
        assert_eq!(find_quiet_window(&panel, 5).unwrap(), QuietWindow::new(9, 14).unwrap());
    }

    #[test]
    fn uniform_panel_picks_earliest_window() {
        let panel = OutbreakPanel::new(3, 10, vec![1; 30]).unwrap();
        assert_eq!(find_quiet_window(&panel, 4).unwrap().t1, 0);
        assert!(find_quiet_window(&panel, 10).is_err());
    }

    #[test]
    fn quiet_window_matches_exhaustive_scan() {
        for seed in 0..20 {
            let panel = random_panel(seed, 6, 25, 0.3);
            let width = 5;
            let mut best = (usize::MAX, 0);
            for s in 0..=(25 - width) {
                let c: usize = (s..s + width).map(|t| panel.column_count(t)).sum();
                if c < best.0 {
                    best = (c, s);
                }
            }
            assert_eq!(find_quiet_window(&panel, width).unwrap().t1, best.1);
        }
    }

    #[test]
    fn force_series_cases() {
        let u = SpatialUnits::from_coords(vec![[0.0, 0.0], [10.0, 0.0]]).unwrap();
        let d = pairwise_distances(&u).unwrap();
        let k = KernelParams::new(10.0, 2.0).unwrap();
        let quiet = OutbreakPanel::from_rows(&[vec![0, 0, 1], vec![0, 0, 0]]).unwrap();
        assert_eq!(total_force_series(&quiet, &d, &k).unwrap(), vec![0.0, 0.0]);
        let one = OutbreakPanel::from_rows(&[vec![1, 0], vec![0, 0]]).unwrap();
        assert_eq!(total_force_series(&one, &d, &k).unwrap(), vec![1.25]);
    }

    #[test]
    fn force_series_matches_triple_loop() {
        let mut rng = stream(8, "pts");
        let u = SpatialUnits::from_coords((0..7).map(|_| [rng.random_range(0.0..80.0), rng.random_range(0.0..80.0)]).collect()).unwrap();
        let d = pairwise_distances(&u).unwrap();
        let k = KernelParams::new(15.0, 2.5).unwrap();
        let panel = random_panel(4, 7, 9, 0.35);
        let m = total_force_series(&panel, &d, &k).unwrap();
        for t in 1..9 {
            let mut s = 0.0;
            for i in 0..7 {
                for j in 0..7 {
                    if panel.get(j, t - 1) == 1 {
                        s += (1.0 + d.get(i, j) / 15.0).powf(-2.5);
                    }
                }
            }
            assert!((m[t - 1] - s).abs() < 1e-12);
        }
        // also equals the force-table totals
        let ft = ForceTable::new(&panel, &d, &k).column_totals();
        for (a, b) in m.iter().zip(&ft) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn exact_fit_setup() -> (OutbreakPanel, DistanceMatrix, PhiGrid) {
        let u = SpatialUnits::from_coords(vec![[0.0, 0.0], [30.0, 0.0], [0.0, 40.0], [90.0, 60.0]]).unwrap();
        let d = pairwise_distances(&u).unwrap();
        let grid = PhiGrid::log_spaced(5.0, 200.0, 8).unwrap();
        let panel = random_panel(2, 4, 12, 0.4);
        (panel, d, grid)
    }

    #[test]
    fn singleton_grid() {
        let (panel, d, _) = exact_fit_setup();
        let g = PhiGrid::new(vec![33.0]).unwrap();
        assert_eq!(estimate_phi_grid(&panel, &d, &g, 3.0).unwrap().phi, 33.0);
    }

    #[test]
    fn residuals_nonnegative_and_scale_free() {
        let (panel, d, grid) = exact_fit_setup();
        let est = estimate_phi_grid(&panel, &d, &grid, 3.0).unwrap();
        assert!(est.residuals.iter().all(|&r| r >= 0.0));
        // Doubling every count is the same fit with twice the amplitude;
        // do it by stacking the panel onto itself at zero distance.
        let stacked_units: Vec<usize> = (0..4).chain(0..4).collect();
        let d2 = d.subset(&stacked_units);
        let p2 = panel.subset_units(&stacked_units).unwrap();
        let est2 = estimate_phi_grid(&p2, &d2, &grid, 3.0).unwrap();
        assert_eq!(est.index, est2.index);
    }

    #[test]
    fn all_zero_force_fails() {
        let (_, d, grid) = exact_fit_setup();
        let mut y = vec![0u8; 4 * 6];
        y[5] = 1; // only in the last column
        let panel = OutbreakPanel::new(4, 6, y).unwrap();
        assert!(matches!(estimate_phi_grid(&panel, &d, &grid, 3.0), Err(Error::EstimationFailed(_))));
    }

    #[test]
    fn grid_validation() {
        assert!(PhiGrid::new(vec![]).is_err());
        assert!(PhiGrid::new(vec![1.0, 1.0]).is_err());
        assert!(PhiGrid::new(vec![-1.0, 1.0]).is_err());
        let g = PhiGrid::log_spaced(1.0, 100.0, 3).unwrap();
        assert!((g.values()[1] - 10.0).abs() < 1e-12);
    }
}
