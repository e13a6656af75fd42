//! Numerical checks of the resolvent algebra behind the limit theorem.
//!
//! Each check evaluates both sides of an exact identity (or an inequality)
//! on a concrete instance and reports the discrepancy. With `S = Z Z^T / p`,
//! `G = (zI - S)^{-1}` and `R_j = (zI - S + Z_j Z_j^T / p)^{-1}`:
//!
//! - trace identity: `-1 + z tr(G)/N = -p/N + (1/N) sum_j 1/(1 - Z_j^T R_j Z_j / p)`
//! - rank-one rearrangement: `1/(1 - x_j) = 1 + Z_j^T G Z_j / p` with
//!   `x_j = Z_j^T R_j Z_j / p`, and `G Z_j = R_j Z_j / (1 - x_j)`
//! - resolvent difference: `tr G - tr R_j = (Z_j^T G^2 Z_j / p) / (1 + Z_j^T G Z_j / p)`,
//!   bounded in modulus by `1 / Im z`
//! - truncated expansion: `1/(1-x) = sum_{m<=M} x^m + x^{M+1}/(1-x)`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::eigensolve::{covariance, shifted_solve, sym_eigenvalues, DEFAULT_EIG_TOL};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{derive_seed, require_upper_half, ComplexSum, ComplexValue};
use crate::tensor_model::{sample_matrix, ModelParams, MomentModel, DEFAULT_MAX_ENTRIES};

/// Residual threshold for the randomized suite.
pub const SUITE_TOLERANCE: f64 = 1e-8;

/// Condition estimate above which a Sherman–Morrison instance is skipped.
pub const CONDITION_LIMIT: f64 = 1e10;

const INSTANCE_STREAM: u64 = 0x1D_E471;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl BoundCheck {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs <= rhs,
        }
    }
}

/// Enough to regenerate the instance a report came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceDigest {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub rows: usize,
    pub cols: usize,
    pub z: Option<ComplexValue>,
    pub column: Option<usize>,
}

impl InstanceDigest {
    fn of(z_mat: &Matrix) -> Self {
        Self {
            seed: None,
            n: None,
            d: None,
            rows: z_mat.rows(),
            cols: z_mat.cols(),
            z: None,
            column: None,
        }
    }

    fn at(mut self, z: ComplexValue, column: Option<usize>) -> Self {
        self.z = Some(z);
        self.column = column;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub name: String,
    pub residual: f64,
    pub bound_checked: Option<BoundCheck>,
    pub instance_digest: InstanceDigest,
    /// Set when the instance was outside the check's premise.
    pub skipped: Option<String>,
}

impl IdentityReport {
    fn new(name: &str, residual: f64, digest: InstanceDigest) -> Self {
        Self {
            name: name.to_string(),
            residual,
            bound_checked: None,
            instance_digest: digest,
            skipped: None,
        }
    }

    fn with_bound(mut self, bound: BoundCheck) -> Self {
        self.bound_checked = Some(bound);
        self
    }

    fn skipped(name: &str, digest: InstanceDigest, reason: String) -> Self {
        Self {
            name: name.to_string(),
            residual: 0.0,
            bound_checked: None,
            instance_digest: digest,
            skipped: Some(reason),
        }
    }

    /// Residual within `tol` and any bound satisfied; skipped reports pass.
    pub fn passes(&self, tol: f64) -> bool {
        self.skipped.is_some()
            || (self.residual <= tol && self.bound_checked.is_none_or(|b| b.holds))
    }

    pub fn bound_violated(&self) -> bool {
        self.bound_checked.is_some_and(|b| !b.holds)
    }
}

fn complexify(v: &[f64]) -> Vec<ComplexValue> {
    v.iter().map(|&x| ComplexValue::new(x, 0.0)).collect()
}

/// Unconjugated bilinear form `a^T b`.
fn bilinear(a: &[ComplexValue], b: &[ComplexValue]) -> ComplexValue {
    let mut acc = ComplexSum::default();
    for (x, y) in a.iter().zip(b) {
        acc.add(x * y);
    }
    acc.value()
}

fn real_bilinear(a: &[f64], b: &[ComplexValue]) -> ComplexValue {
    let mut acc = ComplexSum::default();
    for (x, y) in a.iter().zip(b) {
        acc.add(x * y);
    }
    acc.value()
}

/// `S - Z_j Z_j^T / p`, the covariance with column `j` left out.
fn leave_one_out(s: &Matrix, column: &[f64], p: usize) -> Matrix {
    let mut sj = s.clone();
    let inv_p = 1.0 / p as f64;
    for k in 0..column.len() {
        for i in 0..column.len() {
            sj[(i, k)] -= column[i] * column[k] * inv_p;
        }
    }
    sj
}

fn check_column(z_mat: &Matrix, j: usize) -> Result<()> {
    if j >= z_mat.cols() {
        return Err(Error::validation(format!(
            "column {j} out of range for {} columns",
            z_mat.cols()
        )));
    }
    Ok(())
}

/// Unnormalized `tr((zI - A)^{-1})` from eigenvalues.
fn resolvent_trace_sum(a: &Matrix, z: ComplexValue) -> Result<ComplexValue> {
    let eigs = sym_eigenvalues(a, DEFAULT_EIG_TOL)?;
    let mut acc = ComplexSum::default();
    for lam in eigs {
        acc.add((z - lam).inv());
    }
    Ok(acc.value())
}

/// `x_j = Z_j^T R_j Z_j / p` together with `R_j Z_j`.
fn leave_one_out_form(
    s: &Matrix,
    z_mat: &Matrix,
    j: usize,
    z: ComplexValue,
) -> Result<(ComplexValue, Vec<ComplexValue>)> {
    let p = z_mat.cols();
    let col = z_mat.column(j);
    let sj = leave_one_out(s, col, p);
    let rz = shifted_solve(&sj, z, &complexify(col))?;
    Ok((real_bilinear(col, &rz) / p as f64, rz))
}

/// Both sides of the trace identity; `p` is the column count of `z_mat`.
pub fn check_trace_identity(z_mat: &Matrix, z: ComplexValue) -> Result<IdentityReport> {
    require_upper_half(z)?;
    let (big_n, p) = (z_mat.rows(), z_mat.cols());
    let s = covariance(z_mat)?;
    let lhs = -1.0 + z * resolvent_trace_sum(&s, z)? / big_n as f64;
    let mut acc = ComplexSum::default();
    for j in 0..p {
        let (x, _) = leave_one_out_form(&s, z_mat, j, z)?;
        acc.add((1.0 - x).inv());
    }
    let rhs = (-(p as f64) + acc.value()) / big_n as f64;
    Ok(IdentityReport::new("trace_identity", (lhs - rhs).norm(), InstanceDigest::of(z_mat).at(z, None)))
}

/// `(A + u v^T)^{-1}` against the rank-one update formula, max-entry residual.
pub fn check_sherman_morrison(a: &Matrix, u: &[f64], v: &[f64]) -> Result<IdentityReport> {
    let n = a.rows();
    if !a.is_square() || u.len() != n || v.len() != n {
        return Err(Error::validation("Sherman–Morrison needs square A and matching vectors"));
    }
    const NAME: &str = "sherman_morrison";
    let digest = InstanceDigest::of(a);
    let mut updated = a.clone();
    for k in 0..n {
        for i in 0..n {
            updated[(i, k)] += u[i] * v[k];
        }
    }
    let (a_inv, up_inv) = match (a.inverse(), updated.inverse()) {
        (Ok(x), Ok(y)) => (x, y),
        _ => return Ok(IdentityReport::skipped(NAME, digest, "singular input".into())),
    };
    let cond = (a.norm_1() * a_inv.norm_1()).max(updated.norm_1() * up_inv.norm_1());
    if cond.is_nan() || cond >= CONDITION_LIMIT {
        return Ok(IdentityReport::skipped(NAME, digest, format!("condition estimate {cond:e}")));
    }
    let ainv_u = a_inv.matvec(u);
    let vt_ainv = a_inv.transpose().matvec(v);
    let denom = 1.0 + v.iter().zip(&ainv_u).map(|(a, b)| a * b).sum::<f64>();
    let mut worst: f64 = 0.0;
    for k in 0..n {
        for i in 0..n {
            let formula = a_inv[(i, k)] - ainv_u[i] * vt_ainv[k] / denom;
            worst = worst.max((up_inv[(i, k)] - formula).abs());
        }
    }
    Ok(IdentityReport::new(NAME, worst, digest))
}

/// Scalar and vector forms of the rank-one rearrangement for column `j` (0-based).
pub fn check_rank_one_rearrangement(
    z_mat: &Matrix,
    j: usize,
    z: ComplexValue,
) -> Result<[IdentityReport; 2]> {
    require_upper_half(z)?;
    check_column(z_mat, j)?;
    let p = z_mat.cols() as f64;
    let s = covariance(z_mat)?;
    let col = z_mat.column(j);
    let (x, rz) = leave_one_out_form(&s, z_mat, j, z)?;
    let gz = shifted_solve(&s, z, &complexify(col))?;
    let scalar = ((1.0 - x).inv() - (1.0 + real_bilinear(col, &gz) / p)).norm();
    let vector = gz
        .iter()
        .zip(&rz)
        .map(|(g, r)| (g - r / (1.0 - x)).norm())
        .fold(0.0, f64::max);
    let digest = InstanceDigest::of(z_mat).at(z, Some(j));
    Ok([
        IdentityReport::new("rank_one_scalar", scalar, digest.clone()),
        IdentityReport::new("rank_one_vector", vector, digest),
    ])
}

/// `|tr G - tr R_j| <= 1/Im z` with both traces from eigenvalues; the
/// residual is the gap to the closed form of the difference.
pub fn check_resolvent_diff_bound(
    z_mat: &Matrix,
    j: usize,
    z: ComplexValue,
) -> Result<IdentityReport> {
    require_upper_half(z)?;
    check_column(z_mat, j)?;
    let p = z_mat.cols() as f64;
    let s = covariance(z_mat)?;
    let col = z_mat.column(j);
    let sj = leave_one_out(&s, col, z_mat.cols());
    let diff = resolvent_trace_sum(&s, z)? - resolvent_trace_sum(&sj, z)?;
    let gz = shifted_solve(&s, z, &complexify(col))?;
    let closed = (bilinear(&gz, &gz) / p) / (1.0 + real_bilinear(col, &gz) / p);
    let bound = BoundCheck::new(diff.norm(), 1.0 / z.im);
    Ok(IdentityReport::new(
        "resolvent_difference",
        (diff - closed).norm(),
        InstanceDigest::of(z_mat).at(z, Some(j)),
    )
    .with_bound(bound))
}

fn expansion_residual(x: ComplexValue, m: u32) -> (f64, ComplexValue) {
    let one = ComplexValue::new(1.0, 0.0);
    let mut acc = ComplexSum::default();
    let mut power = one;
    for _ in 0..=m {
        acc.add(power);
        power *= x;
    }
    let remainder = power / (one - x);
    let residual = ((one - x).inv() - (acc.value() + remainder)).norm();
    (residual, remainder)
}

/// `1/(1-x)` against its degree-`M` truncation plus remainder, for `|x| <= 1/2`,
/// with the tail bound `|remainder| <= 2 * 2^{-M}`.
pub fn check_truncated_expansion(x: ComplexValue, m: u32) -> Result<IdentityReport> {
    if x.norm().is_nan() || x.norm() > 0.5 {
        return Err(Error::domain(format!("|x| = {} exceeds 1/2", x.norm())));
    }
    let (residual, remainder) = expansion_residual(x, m);
    let digest = InstanceDigest {
        seed: None,
        n: None,
        d: None,
        rows: 1,
        cols: 1,
        z: None,
        column: None,
    };
    Ok(IdentityReport::new("truncated_expansion", residual, digest)
        .with_bound(BoundCheck::new(remainder.norm(), 2.0 * 0.5f64.powi(m as i32))))
}

/// `|Z_1^T R_1 Z_1 / p| <= 1/2` when `||Z_1||^2 <= 2N` and `Im z >= 4 N/p`.
/// Instances outside the premise are reported as skipped.
pub fn check_small_quadratic_form(z_mat: &Matrix, z: ComplexValue) -> Result<IdentityReport> {
    require_upper_half(z)?;
    const NAME: &str = "small_quadratic_form";
    let (big_n, p) = (z_mat.rows(), z_mat.cols());
    let digest = InstanceDigest::of(z_mat).at(z, Some(0));
    let gamma_n = big_n as f64 / p as f64;
    let norm_sq: f64 = z_mat.column(0).iter().map(|v| v * v).sum();
    if norm_sq > 2.0 * big_n as f64 || z.im < 4.0 * gamma_n {
        return Ok(IdentityReport::skipped(
            NAME,
            digest,
            format!("premise fails: ||Z_1||^2 = {norm_sq}, Im z = {}", z.im),
        ));
    }
    let s = covariance(z_mat)?;
    let (x, _) = leave_one_out_form(&s, z_mat, 0, z)?;
    Ok(IdentityReport::new(NAME, 0.0, digest).with_bound(BoundCheck::new(x.norm(), 0.5)))
}

/// Expansion of `1/(1-x)` at the sampled `x = Z_1^T R_1 Z_1 / p`, to order `m`.
pub fn check_sampled_expansion(z_mat: &Matrix, z: ComplexValue, m: u32) -> Result<IdentityReport> {
    require_upper_half(z)?;
    let s = covariance(z_mat)?;
    let (x, _) = leave_one_out_form(&s, z_mat, 0, z)?;
    let (residual, _) = expansion_residual(x, m);
    Ok(IdentityReport::new("sampled_expansion", residual, InstanceDigest::of(z_mat).at(z, Some(0))))
}

/// Ranges for randomized instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InstanceRanges {
    pub n: (usize, usize),
    pub d: (usize, usize),
    pub p: (usize, usize),
    pub re_z: (f64, f64),
    pub im_z: (f64, f64),
}

impl Default for InstanceRanges {
    fn default() -> Self {
        Self {
            n: (4, 8),
            d: (1, 3),
            p: (4, 16),
            re_z: (-1.0, 4.0),
            im_z: (1.0, 5.0),
        }
    }
}

impl InstanceRanges {
    /// Default ranges with `Im z` in `[floor, floor + 4]`.
    pub fn with_im_floor(floor: f64) -> Result<Self> {
        if !(floor.is_finite() && floor > 0.0) {
            return Err(Error::domain(format!("Im z floor must be positive, got {floor}")));
        }
        Ok(Self {
            im_z: (floor, floor + 4.0),
            ..Self::default()
        })
    }
}

/// A sampled tensor-model instance with a spectral argument and a column.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub matrix: Matrix,
    pub z: ComplexValue,
    pub column: usize,
}

impl Instance {
    pub fn generate(
        master: u64,
        index: u64,
        model: &MomentModel,
        ranges: &InstanceRanges,
    ) -> Result<Self> {
        let seed = derive_seed(master, INSTANCE_STREAM, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(ranges.n.0..=ranges.n.1);
        let d = rng.random_range(ranges.d.0..=ranges.d.1.min(n));
        let p = rng.random_range(ranges.p.0..=ranges.p.1);
        let re = rng.random_range(ranges.re_z.0..=ranges.re_z.1);
        let im = rng.random_range(ranges.im_z.0..=ranges.im_z.1);
        let column = rng.random_range(0..p);
        let params = ModelParams::new(n, d, p)?;
        let matrix = sample_matrix(&params, model, rng.random(), DEFAULT_MAX_ENTRIES)?;
        Ok(Self {
            seed,
            n,
            d,
            matrix,
            z: ComplexValue::new(re, im),
            column,
        })
    }

    fn stamp(&self, mut report: IdentityReport) -> IdentityReport {
        report.instance_digest.seed = Some(self.seed);
        report.instance_digest.n = Some(self.n);
        report.instance_digest.d = Some(self.d);
        report
    }

    /// Every check on this instance. Sherman–Morrison uses `A = S + I` and
    /// `u = v = Z_j / sqrt(p)`; the small-form check uses `Im z` raised to
    /// `4 gamma_n` when needed.
    pub fn check_all(&self) -> Result<Vec<IdentityReport>> {
        let (z_mat, z, j) = (&self.matrix, self.z, self.column);
        let mut out = vec![check_trace_identity(z_mat, z)?];
        out.extend(check_rank_one_rearrangement(z_mat, j, z)?);
        out.push(check_resolvent_diff_bound(z_mat, j, z)?);

        let mut a = covariance(z_mat)?;
        for i in 0..a.rows() {
            a[(i, i)] += 1.0;
        }
        let u: Vec<f64> = z_mat
            .column(j)
            .iter()
            .map(|v| v / (z_mat.cols() as f64).sqrt())
            .collect();
        out.push(check_sherman_morrison(&a, &u, &u)?);

        let gamma_n = z_mat.rows() as f64 / z_mat.cols() as f64;
        let z_small = ComplexValue::new(z.re, z.im.max(4.0 * gamma_n));
        out.push(check_small_quadratic_form(z_mat, z_small)?);
        out.push(check_sampled_expansion(z_mat, z_small, 8)?);
        Ok(out.into_iter().map(|r| self.stamp(r)).collect())
    }
}

/// Runs every check on `count` sampled instances, in instance order.
pub fn run_suite(
    master: u64,
    count: usize,
    model: &MomentModel,
    ranges: &InstanceRanges,
) -> Result<Vec<IdentityReport>> {
    let per_instance: Vec<Result<Vec<IdentityReport>>> = (0..count as u64)
        .into_par_iter()
        .map(|i| Instance::generate(master, i, model, ranges)?.check_all())
        .collect();
    let mut out = Vec::new();
    for r in per_instance {
        out.extend(r?);
    }
    Ok(out)
}
