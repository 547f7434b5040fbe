use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

pub const JITTER_START: f64 = 1e-8;
pub const JITTER_CAP: f64 = 1e-4;

/// Cholesky factor of `a + jitter * s * I`, where `s` is the largest diagonal
/// entry. Jitter starts at `1e-8` and grows tenfold up to `1e-4`.
pub fn jittered_cholesky(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)]).fold(0.0, f64::max);
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Numerical(format!(
            "matrix diagonal scale {scale} is not positive and finite"
        )));
    }
    let mut jitter = JITTER_START;
    loop {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += jitter * scale;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
        if jitter > JITTER_CAP * (1.0 + 1e-9) {
            return Err(Error::Numerical(format!(
                "Cholesky factorisation of a {n}x{n} matrix failed with jitter up to {JITTER_CAP:e} \
                 (diagonal scale {scale:e}); check for duplicated locations"
            )));
        }
    }
}

/// `ln det` from a Cholesky factor.
pub fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// `A^-1` from the Cholesky factor of `A`, as `L^-T L^-1`.
///
/// Much faster than `Cholesky::inverse`, which solves against a dense
/// identity without using the triangular structure.
pub fn cholesky_inverse(c: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let l = c.l_dirty();
    let n = l.nrows();
    let ls = l.as_slice();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for (j, col) in m.as_mut_slice().chunks_exact_mut(n).enumerate() {
        col[j] = 1.0;
        for k in j..n {
            let xk = col[k] / ls[k * n + k];
            col[k] = xk;
            if xk != 0.0 {
                for (x, lv) in col[k + 1..].iter_mut().zip(&ls[k * n + k + 1..(k + 1) * n]) {
                    *x -= xk * lv;
                }
            }
        }
    }
    // (L^-T L^-1)_ij is the dot product of columns i and j of L^-1 below max(i, j)
    let ms = m.as_slice();
    let mut q = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let cj = &ms[j * n + j..(j + 1) * n];
        for i in 0..=j {
            let ci = &ms[i * n + j..(i + 1) * n];
            let v: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
            q[(i, j)] = v;
            q[(j, i)] = v;
        }
    }
    q
}

/// Orthonormal basis of the complement of the constant vector (Helmert
/// contrasts), as an `n x (n-1)` matrix.
pub fn helmert_basis(n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(n, n - 1);
    for k in 1..n {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            h[(i, k - 1)] = 1.0 / norm;
        }
        h[(k, k - 1)] = -(k as f64) / norm;
    }
    h
}
