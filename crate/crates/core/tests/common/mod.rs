//! Reference computations written independently of the library code paths
//! they check. Shared with the acceptance target in the cli crate.
#![allow(dead_code)]

use susmap_core::rng::StreamKey;
use susmap_core::simulate::{clustered_units, FieldSpec, InitialCondition, SimScenario};
use susmap_core::twostep::PhiGrid;
use susmap_core::KernelParams;

/// Term-by-term Bernoulli log-likelihood of columns `1..T`, with distances,
/// kernel and force recomputed from scratch for every cell.
pub fn loglik_oracle(coords: &[[f64; 2]], y: &[Vec<u8>], beta: &[f64], phi: f64, b0: f64, gamma: f64) -> f64 {
    let n = coords.len();
    let t_len = y[0].len();
    let mut total = 0.0;
    for t in 1..t_len {
        for i in 0..n {
            let mut force = 0.0;
            for j in 0..n {
                if y[j][t - 1] == 1 {
                    let d = ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
                    force += (1.0 + d / phi).powf(-b0);
                }
            }
            let h = beta[i] * force + gamma;
            total += if y[i][t] == 1 { (-(-h).exp_m1()).ln() } else { -h };
        }
    }
    total
}

/// Exponential integral `E1(x)` for `x > 0`: power series below 1,
/// continued fraction above.
pub fn e1(x: f64) -> f64 {
    assert!(x > 0.0);
    if x <= 1.0 {
        let euler = 0.577_215_664_901_532_9;
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..200 {
            term *= -x / k as f64;
            let add = term / k as f64;
            sum += add;
            if add.abs() < 1e-18 * sum.abs().max(1e-300) {
                break;
            }
        }
        -euler - x.ln() - sum
    } else {
        // modified Lentz on e^x E1(x) = 1/(x+1- 1/(x+3- 4/(x+5- ...)))
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let a = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-x).exp()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadSummary {
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Posterior of `beta` for a single unit whose only transmission source is
/// itself (`k(0) = 1`), under `beta | alpha ~ Exp(mean alpha)`,
/// `alpha ~ U(0, alpha_max)`. The marginal prior is
/// `E1(beta / alpha_max) / alpha_max`. Trapezoid rule on a log-beta grid.
pub fn single_unit_quadrature(y: &[u8], gamma: f64, alpha_max: f64, n_points: usize) -> QuadSummary {
    let (mut n11, mut n10) = (0.0, 0.0);
    for w in y.windows(2) {
        if w[0] == 1 {
            if w[1] == 1 {
                n11 += 1.0;
            } else {
                n10 += 1.0;
            }
        }
    }
    let ll = |b: f64| n11 * (-(-(b + gamma)).exp_m1()).ln() - n10 * (b + gamma);
    let (lo, hi) = (1e-8f64.ln(), 50f64.ln());
    let du = (hi - lo) / (n_points - 1) as f64;
    let us: Vec<f64> = (0..n_points).map(|k| lo + k as f64 * du).collect();
    let logw: Vec<f64> = us
        .iter()
        .map(|&u| {
            let b = u.exp();
            ll(b) + e1(b / alpha_max).ln() + u
        })
        .collect();
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    summarize_log_grid(&us, &w)
}

/// Mean and 95% interval of a density given by weights `w` on an evenly
/// spaced grid of `u = ln beta` (density already in `u`).
fn summarize_log_grid(us: &[f64], w: &[f64]) -> QuadSummary {
    let n_points = us.len();
    let du = us[1] - us[0];
    let mut cdf = vec![0.0; n_points];
    let (mut z, mut first) = (0.0, 0.0);
    for k in 1..n_points {
        z += 0.5 * (w[k - 1] + w[k]) * du;
        first += 0.5 * (w[k - 1] * us[k - 1].exp() + w[k] * us[k].exp()) * du;
        cdf[k] = z;
    }
    let quant = |q: f64| {
        let target = q * z;
        let k = cdf.partition_point(|&c| c < target).clamp(1, n_points - 1);
        let f = (target - cdf[k - 1]) / (cdf[k] - cdf[k - 1]);
        (us[k - 1] + f * du).exp()
    };
    QuadSummary { mean: first / z, q025: quant(0.025), q975: quant(0.975) }
}

/// Log-likelihood of one unit's row as a function of its susceptibility,
/// with `force[t]` the kernel-weighted infections at `t - 1`.
fn row_loglik(y: &[u8], force: &[f64], gamma: f64, beta: f64) -> f64 {
    (1..y.len())
        .map(|t| {
            let h = beta * force[t] + gamma;
            if y[t] == 1 {
                (-(-h).exp_m1()).ln()
            } else {
                -h
            }
        })
        .sum()
}

/// Marginal posteriors of two units under the ISM prior. Integrating
/// `alpha ~ U(0, A)` out of `prod_i Exp(beta_i; mean alpha)` gives the joint
/// prior `exp(-s / A) / (A s)` with `s = beta_1 + beta_2`. Product trapezoid
/// rule on a log-beta grid of `n_points` per axis.
pub fn two_unit_quadrature(y: [&[u8]; 2], k12: f64, gamma: f64, alpha_max: f64, n_points: usize) -> [QuadSummary; 2] {
    let t_len = y[0].len();
    let force = |i: usize| -> Vec<f64> {
        let j = 1 - i;
        (0..t_len).map(|t| if t == 0 { 0.0 } else { y[i][t - 1] as f64 + k12 * y[j][t - 1] as f64 }).collect()
    };
    let f = [force(0), force(1)];
    let (lo, hi) = (1e-6f64.ln(), 30f64.ln());
    let du = (hi - lo) / (n_points - 1) as f64;
    let us: Vec<f64> = (0..n_points).map(|k| lo + k as f64 * du).collect();
    let ll: Vec<Vec<f64>> = (0..2).map(|i| us.iter().map(|&u| row_loglik(y[i], &f[i], gamma, u.exp())).collect()).collect();
    let mut logw = vec![0.0; n_points * n_points];
    for a in 0..n_points {
        for b in 0..n_points {
            let s = us[a].exp() + us[b].exp();
            logw[a * n_points + b] = ll[0][a] + ll[1][b] - s / alpha_max - s.ln() + us[a] + us[b];
        }
    }
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    let trap = |k: usize| if k == 0 || k == n_points - 1 { 0.5 } else { 1.0 };
    let marg0: Vec<f64> = (0..n_points).map(|a| (0..n_points).map(|b| trap(b) * w[a * n_points + b]).sum()).collect();
    let marg1: Vec<f64> = (0..n_points).map(|b| (0..n_points).map(|a| trap(a) * w[a * n_points + b]).sum()).collect();
    [summarize_log_grid(&us, &marg0), summarize_log_grid(&us, &marg1)]
}

/// `exp(-d / rho)` correlation, recomputed from coordinates.
pub fn exp_cov(coords: &[[f64; 2]], sigma2: f64, rho: f64) -> Vec<Vec<f64>> {
    coords
        .iter()
        .map(|a| {
            coords
                .iter()
                .map(|b| sigma2 * (-((a[0] - b[0]).hypot(a[1] - b[1])) / rho).exp())
                .collect()
        })
        .collect()
}

/// Kernel-range grid for the two-step recovery design: 5, 10, ..., 640 km.
pub fn twostep_grid() -> PhiGrid {
    PhiGrid::new((0..8).map(|k| 5.0 * 2f64.powi(k)).collect()).unwrap()
}

pub const TWOSTEP_PHI: f64 = 40.0;
pub const TWOSTEP_GAMMA: f64 = 0.02;
pub const TWOSTEP_WINDOW: (usize, usize) = (60, 75);

/// Two-step recovery design: 200 units in 8 clusters over 1000 x 500 km,
/// equal susceptibility 0.4, T = 150, and transmission switched off for
/// columns 60..75 so that a transmission-free window exists.
pub fn twostep_scenario(replicate: u64) -> SimScenario {
    let key = StreamKey::new(7, "twostep").child(replicate);
    let units = clustered_units(200, 1000.0, 500.0, 8, 30.0, &mut key.labeled("units").rng()).unwrap();
    SimScenario {
        units,
        kernel: KernelParams::new(TWOSTEP_PHI, 3.0).unwrap(),
        gamma: TWOSTEP_GAMMA,
        n_times: 150,
        field: FieldSpec::Constant { beta: 0.4 },
        seed: key.value(),
        initial: InitialCondition::Random { p0: 0.05 },
        transmission_off: Some(TWOSTEP_WINDOW),
    }
}

/// Ordinary least-squares fit of `y` on `x`; returns `(slope, r_squared)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, sxy * sxy / (sxx * syy))
}
