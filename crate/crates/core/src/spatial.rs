//! Unit geometry: planar coordinates, pairwise distances and the
//! power-law transmission kernel `k(d) = (1 + d/phi)^(-b0)`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Default kernel exponent. The exponent is configuration, never estimated.
pub const DEFAULT_B0: f64 = 3.0;

/// A set of geolocated epidemiological units. Coordinates are planar
/// kilometres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialUnits {
    ids: Vec<String>,
    coords: Vec<[f64; 2]>,
}

impl SpatialUnits {
    pub fn new(ids: Vec<String>, coords: Vec<[f64; 2]>) -> Result<Self> {
        if ids.len() != coords.len() {
            return invalid(format!(
                "{} ids but {} coordinate pairs",
                ids.len(),
                coords.len()
            ));
        }
        if ids.len() < 2 {
            return invalid("at least two units are required");
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return invalid(format!("duplicate unit id `{id}`"));
            }
        }
        if let Some(i) = coords
            .iter()
            .position(|c| !c[0].is_finite() || !c[1].is_finite())
        {
            return invalid(format!("non-finite coordinates for unit `{}`", ids[i]));
        }
        Ok(Self { ids, coords })
    }

    /// Units with ids `"0".."n-1"`.
    pub fn from_coords(coords: Vec<[f64; 2]>) -> Result<Self> {
        let ids = (0..coords.len()).map(|i| i.to_string()).collect();
        Self::new(ids, coords)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// The units at the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            idx.iter().map(|&i| self.ids[i].clone()).collect(),
            idx.iter().map(|&i| self.coords[i]).collect(),
        )
    }
}

/// Dense symmetric matrix of Euclidean distances in kilometres.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds a distance matrix from raw row-major data, checking symmetry,
    /// a zero diagonal and non-negativity.
    pub fn from_raw(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return invalid(format!("expected {} entries, got {}", n * n, d.len()));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return invalid(format!("nonzero diagonal at {i}"));
            }
            for j in 0..i {
                let v = d[i * n + j];
                if !(v.is_finite() && v >= 0.0) || v != d[j * n + i] {
                    return invalid(format!("entry ({i},{j}) is not a symmetric distance"));
                }
            }
        }
        Ok(Self { n, d })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }

    pub fn max_distance(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_positive_distance(&self) -> Option<f64> {
        self.d
            .iter()
            .copied()
            .filter(|&v| v > 0.0)
            .min_by(f64::total_cmp)
    }

    /// Restriction to the given indices (rows and columns).
    pub fn subset(&self, idx: &[usize]) -> Self {
        let m = idx.len();
        let mut d = Vec::with_capacity(m * m);
        for &i in idx {
            for &j in idx {
                d.push(self.get(i, j));
            }
        }
        Self { n: m, d }
    }

    /// Rectangular block `rows x cols`, row-major.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> Vec<f64> {
        rows.iter()
            .flat_map(|&i| cols.iter().map(move |&j| self.get(i, j)))
            .collect()
    }
}

/// Transmission kernel parameters: range `phi` (km) and exponent `b0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub phi: f64,
    pub b0: f64,
}

impl KernelParams {
    pub fn new(phi: f64, b0: f64) -> Result<Self> {
        if !(phi.is_finite() && phi > 0.0) {
            return invalid(format!("kernel range phi must be > 0, got {phi}"));
        }
        if !(b0.is_finite() && b0 > 0.0) {
            return invalid(format!("kernel exponent b0 must be > 0, got {b0}"));
        }
        Ok(Self { phi, b0 })
    }

    /// Kernel value without input checks; `d` must be non-negative.
    #[inline]
    pub fn eval_unchecked(&self, d: f64) -> f64 {
        (1.0 + d / self.phi).powf(-self.b0)
    }

    /// Dense kernel matrix `k(d[i][j])`, row-major.
    pub fn matrix(&self, d: &DistanceMatrix) -> Vec<f64> {
        d.as_slice().iter().map(|&v| self.eval_unchecked(v)).collect()
    }
}

/// Euclidean distances between all pairs of units.
pub fn pairwise_distances(units: &SpatialUnits) -> Result<DistanceMatrix> {
    let c = units.coords();
    if c.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return invalid("non-finite coordinates");
    }
    let n = c.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (c[i][0] - c[j][0]).hypot(c[i][1] - c[j][1]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let out = DistanceMatrix { n, d };
    debug_assert!((0..n).all(|i| out.get(i, i) == 0.0));
    Ok(out)
}

/// `k(d) = (1 + d/phi)^(-b0)`. Equals 1 at `d = 0` and decreases to 0.
pub fn kernel_eval(d: f64, k: &KernelParams) -> Result<f64> {
    if d.is_nan() || d < 0.0 {
        return invalid(format!("distance must be >= 0, got {d}"));
    }
    Ok(k.eval_unchecked(d))
}
