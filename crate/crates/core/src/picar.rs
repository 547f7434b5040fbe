//! Reduced-rank SDSM: `log beta = A M delta + omega`.
//!
//! The field lives on the vertices of a Delaunay mesh over the unit
//! locations (plus a buffer ring); `M` holds the leading eigenvectors of the
//! Moran operator of the mesh graph and `A` interpolates vertex values
//! linearly to arbitrary points. With `Q = I` and orthonormal `M`, the prior
//! `delta ~ N(0, tau^-1 (M'QM)^-1)` reduces to i.i.d. `N(0, 1/tau)`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spade::{DelaunayTriangulation, Point2, Triangulation};

use crate::epimodel::{cross_entropy_by_unit, BackgroundRate, ForceTable, OutbreakPanel, SusceptibilityField};
use crate::error::{invalid, Error, Result};
use crate::linalg::helmert_basis;
use crate::mcmc::{initial_log_beta, prepare, Chain, McmcConfig, ModelKind, ScaleAdapter, UnitLik, OMEGA_MAX, OMEGA_MIN};
use crate::rng::StreamKey;
use crate::spatial::{DistanceMatrix, KernelParams, SpatialUnits};

/// Default rank of the basis.
pub const DEFAULT_RANK: usize = 50;
/// Default buffer width as a fraction of the domain diameter.
pub const DEFAULT_BUFFER_FRACTION: f64 = 0.05;
/// Shape and scale of the gamma prior on `tau`.
pub const TAU_SHAPE: f64 = 0.5;
pub const TAU_SCALE: f64 = 2000.0;

const COVER_TOL: f64 = 1e-9;

/// Planar triangular mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl Mesh {
    /// Builds a mesh from explicit parts, deriving the edges from the
    /// triangles.
    pub fn from_parts(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::Mesh("mesh has no triangles".into()));
        }
        let nv = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&v| v >= nv)) {
            return Err(Error::Mesh(format!("triangle {t:?} references a missing vertex")));
        }
        let mut edges: Vec<(usize, usize)> = triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        Ok(Self { vertices, triangles, edges })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Dense 0/1 adjacency matrix.
    pub fn adjacency(&self) -> DMatrix<f64> {
        adjacency(self.n_vertices(), &self.edges)
    }
}

fn adjacency(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    for &(a, b) in edges {
        w[(a, b)] = 1.0;
        w[(b, a)] = 1.0;
    }
    w
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Offset ring around a counter-clockwise hull: one point per hull vertex
/// on the mitred offset corner, and edges subdivided so that ring points
/// are at most about `buffer` apart.
fn buffer_ring(hull: &[[f64; 2]], buffer: f64) -> Vec<[f64; 2]> {
    let m = hull.len();
    let normal = |a: [f64; 2], b: [f64; 2]| {
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let l = dx.hypot(dy);
        [dy / l, -dx / l]
    };
    let mut ring = Vec::new();
    for i in 0..m {
        let (prev, cur, next) = (hull[(i + m - 1) % m], hull[i], hull[(i + 1) % m]);
        let (n1, n2) = (normal(prev, cur), normal(cur, next));
        let dot = n1[0] * n2[0] + n1[1] * n2[1];
        let corner = if 1.0 + dot > 0.5 {
            let f = buffer / (1.0 + dot);
            [cur[0] + f * (n1[0] + n2[0]), cur[1] + f * (n1[1] + n2[1])]
        } else {
            let (bx, by) = (n1[0] + n2[0], n1[1] + n2[1]);
            let l = bx.hypot(by).max(1e-12);
            [cur[0] + 2.0 * buffer * bx / l, cur[1] + 2.0 * buffer * by / l]
        };
        ring.push(corner);
        let len = (next[0] - cur[0]).hypot(next[1] - cur[1]);
        let pieces = (len / buffer).ceil().max(1.0) as usize;
        for s in 1..pieces {
            let f = s as f64 / pieces as f64;
            // a slight outward bow keeps consecutive ring points off a line
            let off = buffer * (1.0 + 0.1 * (std::f64::consts::PI * f).sin());
            ring.push([
                cur[0] + f * (next[0] - cur[0]) + off * n2[0],
                cur[1] + f * (next[1] - cur[1]) + off * n2[1],
            ]);
        }
    }
    ring
}

fn triangulate(points: &[[f64; 2]]) -> Result<DelaunayTriangulation<Point2<f64>>> {
    let mut tri: DelaunayTriangulation<Point2<f64>> = DelaunayTriangulation::new();
    for p in points {
        tri.insert(Point2::new(p[0], p[1]))
            .map_err(|e| Error::Mesh(format!("cannot insert ({}, {}): {e:?}", p[0], p[1])))?;
    }
    Ok(tri)
}

/// Delaunay mesh of the unit locations plus a buffer ring offset `buffer`
/// km outside the convex hull (`buffer = 0` adds no ring). Units come first
/// in the vertex list, in input order; coincident units share a vertex.
pub fn build_mesh(units: &SpatialUnits, buffer: f64) -> Result<Mesh> {
    if !(buffer.is_finite() && buffer >= 0.0) {
        return invalid(format!("buffer must be finite and >= 0, got {buffer}"));
    }
    let pts = units.coords();
    if pts.len() < 3 {
        return Err(Error::Mesh("need at least 3 points".into()));
    }
    let base = triangulate(pts)?;
    if base.num_inner_faces() == 0 {
        return Err(Error::Mesh("points are collinear".into()));
    }
    let mut all: Vec<[f64; 2]> = base.vertices().map(|v| [v.position().x, v.position().y]).collect();
    if buffer > 0.0 {
        let mut hull: Vec<[f64; 2]> = base
            .convex_hull()
            .map(|e| {
                let p = e.from().position();
                [p.x, p.y]
            })
            .collect();
        let area: f64 = (0..hull.len())
            .map(|i| cross([0.0, 0.0], hull[i], hull[(i + 1) % hull.len()]))
            .sum();
        if area < 0.0 {
            hull.reverse();
        }
        all.extend(buffer_ring(&hull, buffer));
    }
    let tri = if buffer > 0.0 { triangulate(&all)? } else { base };
    let vertices: Vec<[f64; 2]> = tri.vertices().map(|v| [v.position().x, v.position().y]).collect();
    let triangles = tri
        .inner_faces()
        .map(|f| {
            let v = f.vertices();
            [v[0].fix().index(), v[1].fix().index(), v[2].fix().index()]
        })
        .collect();
    Mesh::from_parts(vertices, triangles)
}

/// Buffer width from the default fraction of the domain diameter.
pub fn default_buffer(units: &SpatialUnits) -> f64 {
    let c = units.coords();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in c {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    DEFAULT_BUFFER_FRACTION * (hi[0] - lo[0]).hypot(hi[1] - lo[1])
}

/// Sparse interpolation operator: row `i` holds up to three
/// `(vertex, weight)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub n_vertices: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl Projector {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows.len(), self.n_vertices);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, w) in r {
                a[(i, j)] += w;
            }
        }
        a
    }

    /// `A v` for a vertex field `v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, w)| w * v[j]).sum())
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            n_vertices: self.n_vertices,
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 3]> {
    let det = cross(a, b, c);
    let scale = [(a, b), (b, c), (c, a)]
        .iter()
        .map(|(u, v)| (u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2))
        .fold(0.0, f64::max);
    // slivers carry no area to interpolate over
    if det.abs() <= 1e-10 * scale {
        return None;
    }
    let l1 = cross(p, b, c) / det;
    let l2 = cross(a, p, c) / det;
    Some([l1, l2, 1.0 - l1 - l2])
}

fn locate(mesh: &Mesh, p: [f64; 2]) -> Option<Vec<(usize, f64)>> {
    if let Some(v) = mesh.vertices.iter().position(|&v| v == p) {
        return Some(vec![(v, 1.0)]);
    }
    // exact containment wins; otherwise the least-violating triangle
    // within tolerance (points on the hull boundary)
    let mut best: Option<(f64, usize, [f64; 3])> = None;
    for (k, t) in mesh.triangles.iter().enumerate() {
        let [a, b, c] = t.map(|i| mesh.vertices[i]);
        if let Some(l) = barycentric(p, a, b, c) {
            let worst = l[0].min(l[1]).min(l[2]);
            if best.is_none_or(|b| worst > b.0) {
                best = Some((worst, k, l));
            }
            if worst >= 0.0 {
                break;
            }
        }
    }
    let (worst, k, l) = best?;
    if worst < -COVER_TOL {
        return None;
    }
    let w = l.map(|w| w.max(0.0));
    let s: f64 = w.iter().sum();
    Some(
        mesh.triangles[k]
            .iter()
            .zip(w)
            .filter(|(_, w)| *w > 0.0)
            .map(|(&v, w)| (v, w / s))
            .collect(),
    )
}

/// Barycentric weights of each point inside its containing triangle.
pub fn projector(mesh: &Mesh, points: &[[f64; 2]]) -> Result<Projector> {
    let rows = points
        .par_iter()
        .enumerate()
        .map(|(i, &p)| locate(mesh, p).ok_or(Error::Coverage { index: i, x: p[0], y: p[1] }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Projector { n_vertices: mesh.n_vertices(), rows })
}

/// Leading `p` eigenvectors of `P W P`, `P = I - 11'/n`, for the graph with
/// the given edges. The operator is diagonalised on the orthogonal
/// complement of the constant vector, so every column is exactly centred.
/// Returns `(M, eigenvalues)` with eigenvalues non-increasing.
pub fn moran_basis_from_edges(n: usize, edges: &[(usize, usize)], p: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if p == 0 || p >= n {
        return Err(Error::Rank(format!("rank must lie in 1..{n}, got {p}")));
    }
    let h = helmert_basis(n);
    // W H from the edge list, then H' (W H)
    let mut wh = DMatrix::zeros(n, n - 1);
    for &(a, b) in edges {
        for c in 0..n - 1 {
            wh[(a, c)] += h[(b, c)];
            wh[(b, c)] += h[(a, c)];
        }
    }
    let inner = h.transpose() * wh;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut order: Vec<usize> = (0..n - 1).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut m = DMatrix::zeros(n, p);
    let mut vals = Vec::with_capacity(p);
    for (c, &k) in order.iter().take(p).enumerate() {
        let mut col = &h * eig.eigenvectors.column(k);
        // fix the sign so the largest-magnitude entry is positive
        let big = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if big < 0.0 {
            col = -col;
        }
        m.set_column(c, &col);
        vals.push(eig.eigenvalues[k]);
    }
    Ok((m, vals))
}

pub fn moran_basis(mesh: &Mesh, p: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    moran_basis_from_edges(mesh.n_vertices(), &mesh.edges, p)
}

/// Mesh, basis and projector for one set of observation points.
#[derive(Debug, Clone, PartialEq)]
pub struct PicarBasis {
    pub mesh: Mesh,
    /// `n_v x p`, orthonormal columns orthogonal to the constant vector.
    pub m: DMatrix<f64>,
    pub eigvals: Vec<f64>,
    pub a: Projector,
    /// `A M`, `N x p`.
    pub phi: DMatrix<f64>,
}

impl PicarBasis {
    pub fn new(mesh: Mesh, m: DMatrix<f64>, eigvals: Vec<f64>, a: Projector) -> Result<Self> {
        if m.nrows() != mesh.n_vertices() || a.n_vertices != mesh.n_vertices() {
            return invalid("basis, projector and mesh disagree on the vertex count");
        }
        if eigvals.len() != m.ncols() {
            return invalid("one eigenvalue per basis column expected");
        }
        let phi = a.dense() * &m;
        Ok(Self { mesh, m, eigvals, a, phi })
    }

    pub fn rank(&self) -> usize {
        self.m.ncols()
    }

    pub fn n_units(&self) -> usize {
        self.a.n_rows()
    }

    /// The same mesh and basis, projected onto other points.
    pub fn project(&self, points: &[[f64; 2]]) -> Result<Self> {
        let a = projector(&self.mesh, points)?;
        Self::new(self.mesh.clone(), self.m.clone(), self.eigvals.clone(), a)
    }

    /// Keeps only the listed observation rows.
    pub fn restrict(&self, idx: &[usize]) -> Result<Self> {
        if idx.iter().any(|&i| i >= self.n_units()) {
            return Err(Error::Index("row index out of range".into()));
        }
        let a = self.a.subset(idx);
        Self::new(self.mesh.clone(), self.m.clone(), self.eigvals.clone(), a)
    }

    /// `A M delta + omega`.
    pub fn log_beta(&self, delta: &[f64], omega: f64) -> Vec<f64> {
        let d = nalgebra::DVector::from_column_slice(delta);
        (&self.phi * d).iter().map(|v| v + omega).collect()
    }

    /// `tau delta' (M' Q M) delta` with an explicit identity `Q`.
    pub fn prior_quadratic_general(&self, delta: &[f64], tau: f64) -> f64 {
        let q = DMatrix::<f64>::identity(self.m.nrows(), self.m.nrows());
        let g = self.m.transpose() * q * &self.m;
        let d = nalgebra::DVector::from_column_slice(delta);
        tau * (d.transpose() * g * &d)[(0, 0)]
    }

    /// The same form using `M'M = I`.
    pub fn prior_quadratic(&self, delta: &[f64], tau: f64) -> f64 {
        tau * delta.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Mesh with the given buffer (default when `None`), rank-`p` basis and
/// the projector for `units`.
pub fn build_basis(units: &SpatialUnits, buffer: Option<f64>, p: usize) -> Result<PicarBasis> {
    let buffer = buffer.unwrap_or_else(|| default_buffer(units));
    let mesh = build_mesh(units, buffer)?;
    let (m, vals) = moran_basis(&mesh, p)?;
    let a = projector(&mesh, units.coords())?;
    PicarBasis::new(mesh, m, vals, a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicarChainState {
    pub delta: Vec<f64>,
    pub tau: f64,
    pub omega: f64,
}

/// `beta = exp(A M delta + omega)`.
pub fn recover_beta(state: &PicarChainState, basis: &PicarBasis) -> Result<SusceptibilityField> {
    if state.delta.len() != basis.rank() {
        return invalid(format!("delta has {} entries, basis rank {}", state.delta.len(), basis.rank()));
    }
    if !(state.tau > 0.0) {
        return invalid("tau must be positive");
    }
    SusceptibilityField::from_log(&basis.log_beta(&state.delta, state.omega))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicarOptions {
    /// Hold `tau` at this value instead of sampling it.
    pub fixed_tau: Option<f64>,
}

impl Default for PicarOptions {
    fn default() -> Self {
        Self { fixed_tau: None }
    }
}

pub fn fit_sdsm_picar(
    panel: &OutbreakPanel,
    d: &DistanceMatrix,
    k: &KernelParams,
    gamma: BackgroundRate,
    basis: &PicarBasis,
    cfg: &McmcConfig,
) -> Result<Chain> {
    fit_sdsm_picar_with(panel, d, k, gamma, basis, cfg, &PicarOptions::default())
}

/// Samples `delta` by block random walk, `omega` by a scalar walk on
/// `(-10, 0)` and `log tau` by a scalar walk against the gamma prior.
///
/// The block proposal is `s * D z` with `D` diagonal. `D` starts at the
/// identity and is replaced halfway through burn-in by the per-coordinate
/// posterior standard deviations seen in the second quarter of burn-in;
/// `s` adapts toward the block target throughout burn-in.
#[allow(clippy::too_many_arguments)]
pub fn fit_sdsm_picar_with(
    panel: &OutbreakPanel,
    d: &DistanceMatrix,
    k: &KernelParams,
    gamma: BackgroundRate,
    basis: &PicarBasis,
    cfg: &McmcConfig,
    opts: &PicarOptions,
) -> Result<Chain> {
    let n = panel.n_units();
    if basis.n_units() != n {
        return invalid(format!("basis has {} rows, panel {} units", basis.n_units(), n));
    }
    if let Some(t) = opts.fixed_tau {
        if !(t.is_finite() && t > 0.0) {
            return invalid("fixed tau must be positive");
        }
    }
    let (forces, rows) = prepare(panel, d, k, gamma, cfg)?;
    let lik = UnitLik::new(&rows, cfg.use_likelihood);
    let mut rng = StreamKey::new(cfg.seed, "mcmc").rng();
    let p = basis.rank();
    let phi = &basis.phi;

    let (mut delta, mut omega) = initial_weights(basis, &initial_log_beta(panel, &forces), cfg.use_likelihood);
    let mut tau = opts.fixed_tau.unwrap_or_else(|| {
        let ms = delta.iter().map(|v| v * v).sum::<f64>() / p as f64;
        (1.0 / ms.max(1e-6)).clamp(1e-3, 1e4)
    });
    let mut eta = basis.log_beta(&delta, omega);
    let mut ll: Vec<f64> = (0..n).map(|i| lik.eval(i, eta[i])).collect();
    let mut ll_sum: f64 = ll.iter().sum();
    let mut dd: f64 = delta.iter().map(|v| v * v).sum();

    let block0 = 2.38 / (p as f64).sqrt();
    let mut block_ad = ScaleAdapter::new(block0 * cfg.init_step, cfg.target_block);
    let mut omega_ad = ScaleAdapter::new(cfg.init_step_hyper, cfg.target_scalar);
    let mut tau_ad = ScaleAdapter::new(cfg.init_step_hyper, cfg.target_scalar);
    let mut diag = vec![1.0; p];
    let (q1, q2) = (cfg.burn_in / 4, cfg.burn_in / 2);
    let mut welford = Welford::new(p);
    let mut acc = [(0u64, 0u64); 3];

    let kept = cfg.n_kept();
    let mut out_beta = Vec::with_capacity(kept * n);
    let mut out_delta = Vec::with_capacity(kept * p);
    let (mut out_tau, mut out_omega, mut out_lp) = (Vec::with_capacity(kept), Vec::with_capacity(kept), Vec::with_capacity(kept));
    let mut step = vec![0.0; p];
    let mut eta_prop = vec![0.0; n];
    let mut ll_prop = vec![0.0; n];

    let tau_target = |t: f64, dd: f64| (0.5 * p as f64 + TAU_SHAPE) * t.ln() - t * (0.5 * dd + 1.0 / TAU_SCALE);

    for iter in 0..cfg.n_iter {
        if iter == cfg.burn_in {
            block_ad.freeze();
            omega_ad.freeze();
            tau_ad.freeze();
        }
        if iter == q2 && q2 > q1 + 10 {
            diag = welford.sd().iter().map(|s| s.max(1e-6)).collect();
            block_ad = ScaleAdapter::new(block0, cfg.target_block);
        }
        let post = iter >= cfg.burn_in;

        // delta block
        let s = block_ad.scale();
        for (st, dj) in step.iter_mut().zip(&diag) {
            *st = s * dj * rng.sample::<f64, _>(StandardNormal);
        }
        // phi is column-major: sweep whole columns
        eta_prop.copy_from_slice(&eta);
        for (col, st) in phi.as_slice().chunks_exact(n).zip(&step) {
            for (e, c) in eta_prop.iter_mut().zip(col) {
                *e += c * st;
            }
        }
        let mut ll_prop_sum = 0.0;
        for i in 0..n {
            ll_prop[i] = lik.eval(i, eta_prop[i]);
            ll_prop_sum += ll_prop[i];
        }
        let dd_prop: f64 = delta.iter().zip(&step).map(|(a, b)| (a + b) * (a + b)).sum();
        let ratio = ll_prop_sum - ll_sum - 0.5 * tau * (dd_prop - dd);
        let (pa, ok) = accept(&mut rng, ratio);
        block_ad.update(pa);
        if post {
            acc[0].0 += 1;
            acc[0].1 += ok as u64;
        }
        if ok {
            for (a, b) in delta.iter_mut().zip(&step) {
                *a += b;
            }
            std::mem::swap(&mut eta, &mut eta_prop);
            std::mem::swap(&mut ll, &mut ll_prop);
            ll_sum = ll_prop_sum;
            dd = dd_prop;
        }
        if iter >= q1 && iter < q2 {
            welford.push(&delta);
        }

        // omega
        let h = omega_ad.scale() * rng.sample::<f64, _>(StandardNormal);
        let w_prop = omega + h;
        let (pa, ok) = if w_prop > OMEGA_MIN && w_prop < OMEGA_MAX {
            let mut s = 0.0;
            for i in 0..n {
                ll_prop[i] = lik.eval(i, eta[i] + h);
                s += ll_prop[i];
            }
            let r = accept(&mut rng, s - ll_sum);
            if r.1 {
                std::mem::swap(&mut ll, &mut ll_prop);
                eta.iter_mut().for_each(|e| *e += h);
                ll_sum = s;
            }
            r
        } else {
            (0.0, false)
        };
        omega_ad.update(pa);
        if post {
            acc[1].0 += 1;
            acc[1].1 += ok as u64;
        }
        if ok {
            omega = w_prop;
        }

        // log tau; the Jacobian adds one to the shape exponent
        if opts.fixed_tau.is_none() {
            let t_prop = tau * (tau_ad.scale() * rng.sample::<f64, _>(StandardNormal)).exp();
            let (pa, ok) = accept(&mut rng, tau_target(t_prop, dd) - tau_target(tau, dd));
            tau_ad.update(pa);
            if post {
                acc[2].0 += 1;
                acc[2].1 += ok as u64;
            }
            if ok {
                tau = t_prop;
            }
        }

        if iter % 512 == 511 {
            // resynchronise the running linear predictor
            eta = basis.log_beta(&delta, omega);
            ll = (0..n).map(|i| lik.eval(i, eta[i])).collect();
            ll_sum = ll.iter().sum();
            dd = delta.iter().map(|v| v * v).sum();
        }

        if cfg.keeps(iter) {
            out_beta.extend(eta.iter().map(|v| v.exp()));
            out_delta.extend_from_slice(&delta);
            out_tau.push(tau);
            out_omega.push(omega);
            let lp = ll_sum + 0.5 * p as f64 * tau.ln() - 0.5 * tau * dd + (TAU_SHAPE - 1.0) * tau.ln() - tau / TAU_SCALE;
            out_lp.push(lp);
        }
    }

    let rate = |(t, a): (u64, u64)| if t == 0 { 0.0 } else { a as f64 / t as f64 };
    Ok(Chain {
        model: ModelKind::SdsmPicar,
        n_units: n,
        beta: out_beta,
        hyper: vec![("tau".into(), out_tau), ("omega".into(), out_omega)],
        delta: Some((p, out_delta)),
        acceptance: vec![
            ("delta".into(), rate(acc[0])),
            ("omega".into(), rate(acc[1])),
            ("tau".into(), rate(acc[2])),
        ],
        log_posterior: out_lp,
    })
}

fn accept(rng: &mut crate::rng::StreamRng, log_ratio: f64) -> (f64, bool) {
    if log_ratio.is_nan() {
        return (0.0, false);
    }
    let p = log_ratio.min(0.0).exp();
    let u: f64 = rng.random();
    (p, u < p)
}

/// Least-squares weights for a starting log-susceptibility field.
fn initial_weights(basis: &PicarBasis, x0: &[f64], use_likelihood: bool) -> (Vec<f64>, f64) {
    let p = basis.rank();
    if !use_likelihood {
        return (vec![0.0; p], (OMEGA_MIN + OMEGA_MAX) / 2.0);
    }
    let omega = (x0.iter().sum::<f64>() / x0.len() as f64).clamp(OMEGA_MIN + 0.01, OMEGA_MAX - 0.01);
    let r = nalgebra::DVector::from_iterator(x0.len(), x0.iter().map(|v| v - omega));
    let mut g = basis.phi.transpose() * &basis.phi;
    for j in 0..p {
        g[(j, j)] += 1e-6;
    }
    let rhs = basis.phi.transpose() * r;
    let delta = g
        .cholesky()
        .map(|c| c.solve(&rhs).as_slice().to_vec())
        .unwrap_or_else(|| vec![0.0; p]);
    (delta, omega)
}

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(p: usize) -> Self {
        Self { n: 0.0, mean: vec![0.0; p], m2: vec![0.0; p] }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn sd(&self) -> Vec<f64> {
        if self.n < 2.0 {
            return vec![1.0; self.mean.len()];
        }
        self.m2.iter().map(|s| (s / (self.n - 1.0)).sqrt()).collect()
    }
}

/// Held-out-time cross-entropy for each candidate rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankChoice {
    pub rank: usize,
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Fits each candidate rank on the leading `1 - holdout` share of the
/// columns and scores the posterior-mean field by cross-entropy on the
/// remaining columns. Candidates not below the vertex count are skipped;
/// ties go to the smaller rank.
#[allow(clippy::too_many_arguments)]
pub fn select_rank(
    panel: &OutbreakPanel,
    units: &SpatialUnits,
    d: &DistanceMatrix,
    k: &KernelParams,
    gamma: BackgroundRate,
    buffer: Option<f64>,
    candidates: &[usize],
    holdout: f64,
    cfg: &McmcConfig,
) -> Result<RankChoice> {
    let t = panel.n_times();
    let cut = ((t as f64) * (1.0 - holdout)).round() as usize;
    if !(holdout > 0.0 && holdout < 1.0) || cut < 2 || cut >= t {
        return invalid(format!("holdout {holdout} leaves no usable split of {t} columns"));
    }
    let buffer = buffer.unwrap_or_else(|| default_buffer(units));
    let mesh = build_mesh(units, buffer)?;
    let a = projector(&mesh, units.coords())?;
    let fit_panel = panel.subset_times(0, cut)?;
    // the scored columns are cut..T, each driven by its predecessor
    let test_panel = panel.subset_times(cut - 1, t)?;
    let forces = ForceTable::new(&test_panel, d, k);
    let usable: Vec<usize> = candidates.iter().copied().filter(|&p| p > 0 && p < mesh.n_vertices()).collect();
    if usable.is_empty() {
        return Err(Error::Rank(format!("no candidate rank below {} vertices", mesh.n_vertices())));
    }
    let mut scores = Vec::with_capacity(usable.len());
    for &p in &usable {
        let (m, vals) = moran_basis(&mesh, p)?;
        let basis = PicarBasis::new(mesh.clone(), m, vals, a.clone())?;
        let chain = fit_sdsm_picar(&fit_panel, d, k, gamma, &basis, cfg)?;
        let probs = forces.probabilities(&chain.beta_mean(), gamma.value());
        scores.push(cross_entropy_by_unit(&test_panel, &probs)?.iter().sum::<f64>());
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok(RankChoice { rank: usable[best], candidates: usable, scores })
}
