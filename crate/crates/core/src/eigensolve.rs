//! Symmetric eigenvalues, empirical spectra and resolvent evaluations.
//!
//! Eigenvalues come from Householder reduction to tridiagonal form followed
//! by implicit-shift QL iteration. Only values are computed.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{require_upper_half, ComplexSum, ComplexValue, NeumaierSum};

/// Default relative tolerance for the eigensolver contract.
pub const DEFAULT_EIG_TOL: f64 = 1e-10;

/// Relative slack below zero tolerated for spectra of `Z Z^T / p`.
pub const PSD_TOLERANCE: f64 = 1e-8;

const COV_TILE: usize = 4;

/// All `lhs[r] . rhs[c]` for up to four vectors on each side, sharing loads.
fn dot_tile(lhs: &[&[f64]], rhs: &[&[f64]]) -> Vec<Vec<f64>> {
    if lhs.len() != COV_TILE || rhs.len() != COV_TILE {
        return lhs.iter().map(|a| rhs.iter().map(|b| dot(a, b)).collect()).collect();
    }
    let mut acc = [[0.0f64; COV_TILE]; COV_TILE];
    let len = lhs[0].len();
    let a: [&[f64]; COV_TILE] = std::array::from_fn(|r| &lhs[r][..len]);
    let b: [&[f64]; COV_TILE] = std::array::from_fn(|c| &rhs[c][..len]);
    for t in 0..len {
        let x = [a[0][t], a[1][t], a[2][t], a[3][t]];
        let y = [b[0][t], b[1][t], b[2][t], b[3][t]];
        for r in 0..COV_TILE {
            for c in 0..COV_TILE {
                acc[r][c] += x[r] * y[c];
            }
        }
    }
    acc.iter().map(|row| row.to_vec()).collect()
}

/// Dot product with independent partial sums, which lets the compiler vectorize it.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for t in 0..8 {
            acc[t] += x[t] * y[t];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `S = Z Z^T / p` with `p` the number of columns of `Z`.
///
/// Only the lower triangle is accumulated and then mirrored, so the result is
/// exactly symmetric.
pub fn covariance(z: &Matrix) -> Result<Matrix> {
    let p = z.cols();
    if p == 0 {
        return Err(Error::validation("covariance needs at least one column"));
    }
    let n = z.rows();
    let rows = z.transpose();
    let inv_p = 1.0 / p as f64;
    let lower: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .step_by(COV_TILE)
        .flat_map_iter(|start| {
            let end = (start + COV_TILE).min(n);
            let mut block: Vec<Vec<f64>> = (start..end).map(|i| vec![0.0; i + 1]).collect();
            for k0 in (0..end).step_by(COV_TILE) {
                let lhs: Vec<&[f64]> = (start..end).map(|i| rows.column(i)).collect();
                let rhs: Vec<&[f64]> = (k0..(k0 + COV_TILE).min(end)).map(|k| rows.column(k)).collect();
                let tile = dot_tile(&lhs, &rhs);
                for (r, row) in block.iter_mut().enumerate() {
                    let i = start + r;
                    for (c, &v) in tile[r].iter().enumerate() {
                        if k0 + c <= i {
                            row[k0 + c] = v * inv_p;
                        }
                    }
                }
            }
            block
        })
        .collect();
    let mut s = Matrix::zeros(n, n);
    for (i, row) in lower.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            s[(i, k)] = v;
            s[(k, i)] = v;
        }
    }
    Ok(s)
}

/// All eigenvalues of a symmetric matrix, ascending.
///
/// After the solve the trace and Frobenius identities are checked against
/// `tol * N * ||A||` (and its square); a breach is reported as a numeric error.
pub fn sym_eigenvalues(a: &Matrix, tol: f64) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(Error::validation(format!(
            "eigenvalues need a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let scale = a.max_abs();
    if a.as_col_major().iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("matrix has non-finite entries"));
    }
    if a.asymmetry() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::validation(format!(
            "matrix is not symmetric (max asymmetry {:e})",
            a.asymmetry()
        )));
    }
    let (mut diag, mut off) = tridiagonalize(a);
    implicit_ql(&mut diag, &mut off)?;
    diag.sort_by(|x, y| x.total_cmp(y));

    let norm = a.frobenius_norm_sq().sqrt();
    let trace_gap = (NeumaierSum::from_iter(diag.iter().copied()).value() - a.trace()).abs();
    let frob_gap = (diag.iter().map(|v| v * v).collect::<NeumaierSum>().value()
        - a.frobenius_norm_sq())
    .abs();
    let budget = tol * n as f64;
    if trace_gap > budget * norm.max(f64::MIN_POSITIVE) || frob_gap > budget * norm * norm {
        return Err(Error::Numeric(format!(
            "eigenvalue moment check failed: trace gap {trace_gap:e}, frobenius gap {frob_gap:e}"
        )));
    }
    Ok(diag)
}

/// Householder reduction to tridiagonal form.
///
/// Returns the diagonal and the subdiagonal, the latter stored in `off[1..]`
/// with `off[0] = 0`.
fn tridiagonalize(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows();
    // Row-major working copy; symmetric so the layout only matters for locality.
    let mut a: Vec<f64> = m.transpose().as_col_major().to_vec();
    let idx = |i: usize, j: usize| i * n + j;
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];

    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a[idx(i, k)].abs()).sum();
            if scale == 0.0 {
                e[i] = a[idx(i, l)];
            } else {
                for k in 0..=l {
                    a[idx(i, k)] /= scale;
                    h += a[idx(i, k)] * a[idx(i, k)];
                }
                let f = a[idx(i, l)];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[idx(i, l)] = f - g;
                // p = A u over the lower triangle, one contiguous row at a time
                let (head, tail) = a.split_at_mut(idx(i, 0));
                let u = &tail[..=l];
                e[..=l].fill(0.0);
                for j in 0..=l {
                    let row = &head[idx(j, 0)..idx(j, 0) + j];
                    let uj = u[j];
                    for (ek, &ajk) in e[..j].iter_mut().zip(row) {
                        *ek += ajk * uj;
                    }
                    e[j] += dot(row, &u[..j]) + head[idx(j, j)] * uj;
                }
                let mut f = 0.0;
                for j in 0..=l {
                    e[j] /= h;
                    f += e[j] * u[j];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    e[j] -= hh * u[j];
                }
                for j in 0..=l {
                    let (fj, gj) = (u[j], e[j]);
                    let row = &mut head[idx(j, 0)..=idx(j, j)];
                    for ((ajk, &ek), &uk) in row.iter_mut().zip(&e[..=j]).zip(&u[..=j]) {
                        *ajk -= fj * ek + gj * uk;
                    }
                }
            }
        } else {
            e[i] = a[idx(i, l)];
        }
        d[i] = h;
    }
    e[0] = 0.0;
    for (i, di) in d.iter_mut().enumerate() {
        *di = a[idx(i, i)];
    }
    (d, e)
}

/// Implicit-shift QL on a symmetric tridiagonal matrix; eigenvalues land in `d`.
fn implicit_ql(d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    if n < 2 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let budget = 30 * n;
    let mut sweeps = 0usize;

    for l in 0..n {
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            sweeps += 1;
            if sweeps > budget {
                return Err(Error::Numeric(format!(
                    "QL iteration did not converge within {budget} sweeps \
                     (block {l}..{m}, off-diagonal {:e})",
                    e[l]
                )));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Ascending eigenvalues of a symmetric matrix, viewed as a probability measure.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSpectrum {
    eigenvalues: Vec<f64>,
}

impl EmpiricalSpectrum {
    /// Sorts the values; NaNs are rejected.
    pub fn new(mut eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::validation("empty spectrum"));
        }
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("spectrum has non-finite values"));
        }
        eigenvalues.sort_by(|a, b| a.total_cmp(b));
        Ok(Self { eigenvalues })
    }

    /// Spectrum of a covariance matrix: values below `-PSD_TOLERANCE * max(1, max λ)`
    /// are an error, and anything within that tolerance of zero (null-space
    /// roundoff of either sign) is set to exactly zero.
    pub fn from_psd(eigenvalues: Vec<f64>) -> Result<Self> {
        let mut spec = Self::new(eigenvalues)?;
        let top = *spec.eigenvalues.last().expect("nonempty");
        let floor = -PSD_TOLERANCE * top.max(1.0);
        if spec.eigenvalues[0] < floor {
            return Err(Error::Numeric(format!(
                "covariance spectrum is not PSD: min eigenvalue {:e}",
                spec.eigenvalues[0]
            )));
        }
        for v in spec.eigenvalues.iter_mut().take_while(|v| **v <= -floor) {
            *v = 0.0;
        }
        Ok(spec)
    }

    /// Eigenvalues of `covariance(z)`.
    pub fn of_covariance(z: &Matrix) -> Result<Self> {
        let s = covariance(z)?;
        Self::from_psd(sym_eigenvalues(&s, DEFAULT_EIG_TOL)?)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// Fraction of eigenvalues `<= x` (right-continuous).
    pub fn cdf(&self, x: f64) -> f64 {
        self.eigenvalues.partition_point(|&v| v <= x) as f64 / self.len() as f64
    }

    /// Fraction of eigenvalues `< x`, the left limit of [`Self::cdf`].
    pub fn cdf_left(&self, x: f64) -> f64 {
        self.eigenvalues.partition_point(|&v| v < x) as f64 / self.len() as f64
    }

    /// `(1/N) sum_j 1/(z - λ_j)`.
    pub fn stieltjes(&self, z: ComplexValue) -> Result<ComplexValue> {
        stieltjes_of_values(&self.eigenvalues, z)
    }
}

pub fn esd_cdf(spec: &EmpiricalSpectrum, x: f64) -> f64 {
    spec.cdf(x)
}

pub fn stieltjes_of_spectrum(spec: &EmpiricalSpectrum, z: ComplexValue) -> Result<ComplexValue> {
    spec.stieltjes(z)
}

pub(crate) fn stieltjes_of_values(values: &[f64], z: ComplexValue) -> Result<ComplexValue> {
    require_upper_half(z)?;
    let mut acc = ComplexSum::default();
    for &lam in values {
        acc.add((z - lam).inv());
    }
    Ok(acc.value() / values.len() as f64)
}

fn complex_norm(v: &[ComplexValue]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Solves `(z I - A) x = b` for symmetric real `A` and `Im z > 0`.
pub fn shifted_solve(a: &Matrix, z: ComplexValue, b: &[ComplexValue]) -> Result<Vec<ComplexValue>> {
    require_upper_half(z)?;
    let n = a.rows();
    if !a.is_square() || b.len() != n {
        return Err(Error::validation(format!(
            "shifted solve: matrix {}x{}, right-hand side {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    // Row-major augmented system.
    let mut m: Vec<ComplexValue> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let diag = if i == j { z } else { ComplexValue::new(0.0, 0.0) };
            m.push(diag - a[(i, j)]);
        }
    }
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| m[r * n + col].norm().total_cmp(&m[s * n + col].norm()))
            .expect("nonempty range");
        if m[pivot * n + col].norm() == 0.0 {
            return Err(Error::Numeric(format!("zero pivot in column {col}")));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            x.swap(col, pivot);
        }
        let inv = m[col * n + col].inv();
        for r in (col + 1)..n {
            let factor = m[r * n + col] * inv;
            if factor == ComplexValue::new(0.0, 0.0) {
                continue;
            }
            for j in col..n {
                let upd = factor * m[col * n + j];
                m[r * n + j] -= upd;
            }
            let upd = factor * x[col];
            x[r] -= upd;
        }
    }
    for i in (0..n).rev() {
        let mut acc = x[i];
        for j in (i + 1)..n {
            acc -= m[i * n + j] * x[j];
        }
        x[i] = acc / m[i * n + i];
    }

    // Residual against the original system.
    let mut resid = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = z * x[i] - b[i];
        for j in 0..n {
            r -= a[(i, j)] * x[j];
        }
        resid.push(r);
    }
    let cond_scale = ((z.norm() + a.frobenius_norm_sq().sqrt()) / z.im).max(1.0);
    let limit = 1e-10 * complex_norm(b) * cond_scale;
    let got = complex_norm(&resid);
    if got > limit {
        return Err(Error::Numeric(format!(
            "shifted solve residual {got:e} exceeds {limit:e}"
        )));
    }
    Ok(x)
}

/// Normalized resolvent trace `(1/N) tr((zI - A)^{-1})` via eigenvalues.
pub fn resolvent_trace(a: &Matrix, z: ComplexValue) -> Result<ComplexValue> {
    require_upper_half(z)?;
    let eigs = sym_eigenvalues(a, DEFAULT_EIG_TOL)?;
    stieltjes_of_values(&eigs, z)
}

/// Same quantity as [`resolvent_trace`] assembled from `N` shifted solves.
///
/// Cross-check only; production paths use the eigenvalue route.
pub fn resolvent_trace_via_solves(a: &Matrix, z: ComplexValue) -> Result<ComplexValue> {
    let n = a.rows();
    let mut acc = ComplexSum::default();
    for k in 0..n {
        let mut e = vec![ComplexValue::new(0.0, 0.0); n];
        e[k] = ComplexValue::new(1.0, 0.0);
        let x = shifted_solve(a, z, &e)?;
        acc.add(x[k]);
    }
    Ok(acc.value() / n as f64)
}
