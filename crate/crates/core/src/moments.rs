//! Combinatorial moments of the tensor model.
//!
//! Exact variance of `||Z_0||^2` with its upper and lower bounds, the
//! multi-column moment `c(m, n, (d_j))` by exhaustive enumeration, shared
//! degrees of subset tuples, and Monte Carlo estimates used as oracles.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{ln_binomial, NeumaierSum};
use crate::tensor_model::{binomial, sample_x_vector, MomentModel, SubsetIndex};

/// Largest `prod_j C(n, d_j)` that [`c_moment`] will enumerate.
pub const C_MOMENT_BUDGET: u128 = 10_000_000;

/// Largest total subset size accepted by [`tensor_moment`].
pub const TENSOR_MOMENT_MAX_SIZE: usize = 64;

/// Slack for comparing a bound with the exact value, relative to their size.
const ORDERING_SLACK: f64 = 1e-12;

fn check_nd(n: usize, d: usize) -> Result<()> {
    if d == 0 || d > n {
        return Err(Error::validation(format!("need 1 <= d <= n, got n = {n}, d = {d}")));
    }
    Ok(())
}

fn check_b(b: f64) -> Result<()> {
    if !(b.is_finite() && b >= 1.0) {
        return Err(Error::validation(format!("fourth moment B must be >= 1, got {b}")));
    }
    Ok(())
}

/// `Var(||Z_0||^2) / N^2 = sum_k (B^k - 1) C(d,k) C(n-d,d-k) / C(n,d)`.
pub fn norm_variance_ratio(n: usize, d: usize, b: f64) -> Result<f64> {
    check_nd(n, d)?;
    check_b(b)?;
    let ln_n = ln_binomial(n as u64, d as u64);
    Ok(variance_terms(n, d, b, -ln_n))
}

/// `exp(offset) * sum_k (B^k - 1) C(d,k) C(n-d,d-k)`, each term in log space.
fn variance_terms(n: usize, d: usize, b: f64, offset: f64) -> f64 {
    if b == 1.0 {
        return 0.0;
    }
    let ln_b = b.ln();
    let mut acc = NeumaierSum::new();
    for k in 1..=d {
        if n - d < d - k {
            continue;
        }
        let ln_term = (k as f64 * ln_b).exp_m1().ln()
            + ln_binomial(d as u64, k as u64)
            + ln_binomial((n - d) as u64, (d - k) as u64)
            + offset;
        acc.add(ln_term.exp());
    }
    acc.value()
}

/// `Var(||Z_0||^2) = C(n,d) sum_{k=1..d} (B^k - 1) C(d,k) C(n-d,d-k)`.
pub fn exact_norm_variance(n: usize, d: usize, b: f64) -> Result<f64> {
    check_nd(n, d)?;
    check_b(b)?;
    if let Some(v) = direct_variance(n, d, b) {
        return Ok(v);
    }
    Ok(variance_terms(n, d, b, ln_binomial(n as u64, d as u64)))
}

/// Term-by-term product in `f64` while every binomial fits in `u64`; exact
/// for integer `B` as long as the terms stay below `2^53`.
fn direct_variance(n: usize, d: usize, b: f64) -> Option<f64> {
    let big_n = binomial(n as u64, d as u64).ok()? as f64;
    let mut acc = NeumaierSum::new();
    for k in 1..=d {
        if n - d < d - k {
            continue;
        }
        let ways = binomial(d as u64, k as u64).ok()? as f64
            * binomial((n - d) as u64, (d - k) as u64).ok()? as f64;
        acc.add((b.powi(k as i32) - 1.0) * ways * big_n);
    }
    let v = acc.value();
    v.is_finite().then_some(v)
}

/// `2 N^2 B (d^2/n) e^{-(d-1)^2/(n-1)}` where it applies.
pub fn variance_upper_bound(n: usize, d: usize, b: f64) -> Result<Option<f64>> {
    check_nd(n, d)?;
    check_b(b)?;
    Ok(upper_ratio(n, d, b).map(|r| r * n_squared(n, d)))
}

/// The upper-bound expression evaluated without its applicability check.
pub fn variance_upper_bound_formula(n: usize, d: usize, b: f64) -> Result<f64> {
    check_nd(n, d)?;
    check_b(b)?;
    Ok(upper_formula_ratio(n, d, b) * n_squared(n, d))
}

fn upper_ratio(n: usize, d: usize, b: f64) -> Option<f64> {
    let applies =
        d == 1 || (2 * d <= n && b * ((d - 1) * (d - 1)) as f64 <= (n + 2 - 2 * d) as f64);
    applies.then(|| upper_formula_ratio(n, d, b))
}

fn upper_formula_ratio(n: usize, d: usize, b: f64) -> f64 {
    let (nf, df) = (n as f64, d as f64);
    let decay = if d == 1 { 1.0 } else { (-(df - 1.0).powi(2) / (nf - 1.0)).exp() };
    2.0 * b * df * df / nf * decay
}

/// `N^2 (B - 1) (d^2/n) e^{-2(d-1)^2/(n-d+1)}` for `d <= n/5`. At `B = 1` the
/// value is `0`, which holds trivially.
pub fn variance_lower_bound(n: usize, d: usize, b: f64) -> Result<Option<f64>> {
    check_nd(n, d)?;
    check_b(b)?;
    Ok(lower_ratio(n, d, b).map(|r| r * n_squared(n, d)))
}

fn lower_ratio(n: usize, d: usize, b: f64) -> Option<f64> {
    if 5 * d > n {
        return None;
    }
    let (nf, df) = (n as f64, d as f64);
    let decay = (-2.0 * (df - 1.0).powi(2) / (nf - df + 1.0)).exp();
    Some((b - 1.0) * df * df / nf * decay)
}

/// Lower bound for `sqrt(2n) <= d <= n/8`, kept relative to `N^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LargeDBound {
    /// `(1 - B^{-d^2/n}) / 8 * (B / (8 e^4))^{d^2/n}`.
    pub ratio: f64,
    pub ln_n_squared: f64,
}

pub fn variance_lower_bound_large_d(n: usize, d: usize, b: f64) -> Result<Option<LargeDBound>> {
    check_nd(n, d)?;
    check_b(b)?;
    Ok(large_d_ratio(n, d, b).map(|ratio| LargeDBound {
        ratio,
        ln_n_squared: 2.0 * ln_binomial(n as u64, d as u64),
    }))
}

fn large_d_ratio(n: usize, d: usize, b: f64) -> Option<f64> {
    if d * d < 2 * n || 8 * d > n {
        return None;
    }
    if b == 1.0 {
        return Some(0.0);
    }
    let q = (d * d) as f64 / n as f64;
    let ln_b = b.ln();
    let ln_ratio = (-(-q * ln_b).exp_m1()).ln() - 8f64.ln() + q * (ln_b - 8f64.ln() - 4.0);
    Some(ln_ratio.exp())
}

fn n_squared(n: usize, d: usize) -> f64 {
    (2.0 * ln_binomial(n as u64, d as u64)).exp()
}

/// Exact variance with every applicable bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceReport {
    pub n: usize,
    pub d: usize,
    pub b: f64,
    pub exact: f64,
    /// `exact / N^2`.
    pub ratio: f64,
    pub upper_bound: Option<f64>,
    pub lower_bound: Option<f64>,
    /// Large-`d` bound as a ratio to `N^2`.
    pub lower_bound_large_d: Option<f64>,
    pub upper_applicable: bool,
    pub lower_applicable: bool,
    pub large_d_applicable: bool,
}

impl VarianceReport {
    pub fn compute(n: usize, d: usize, b: f64) -> Result<Self> {
        let exact = exact_norm_variance(n, d, b)?;
        let ratio = norm_variance_ratio(n, d, b)?;
        let upper = upper_ratio(n, d, b);
        let lower = lower_ratio(n, d, b);
        let large = large_d_ratio(n, d, b);
        let nn = n_squared(n, d);
        Ok(Self {
            n,
            d,
            b,
            exact,
            ratio,
            upper_bound: upper.map(|r| r * nn),
            lower_bound: lower.map(|r| r * nn),
            lower_bound_large_d: large,
            upper_applicable: upper.is_some(),
            lower_applicable: lower.is_some(),
            large_d_applicable: large.is_some(),
        })
    }

    /// Bound ordering, compared relative to `N^2`.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let slack = ORDERING_SLACK * self.ratio.max(f64::MIN_POSITIVE);
        let (n, d, b) = (self.n, self.d, self.b);
        if let Some(u) = upper_ratio(n, d, b) {
            if self.ratio > u + slack {
                out.push(format!("exact ratio {} above upper bound {u}", self.ratio));
            }
        }
        if let Some(l) = lower_ratio(n, d, b) {
            if self.ratio + slack < l {
                out.push(format!("exact ratio {} below lower bound {l}", self.ratio));
            }
        }
        if let Some(l) = large_d_ratio(n, d, b) {
            if self.ratio + slack < l {
                out.push(format!("exact ratio {} below large-d bound {l}", self.ratio));
            }
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        match self.violations().first() {
            None => Ok(()),
            Some(v) => Err(Error::Invariant(format!(
                "n = {}, d = {}, B = {}: {v}",
                self.n, self.d, self.b
            ))),
        }
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// `||Z_0||^2 = e_d(x_1^2, ..., x_n^2)`, the elementary symmetric polynomial.
pub fn column_norm_sq(x: &[f64], d: usize) -> f64 {
    let mut e = vec![0.0; d + 1];
    e[0] = 1.0;
    for xi in x {
        let s = xi * xi;
        for k in (1..=d).rev() {
            e[k] += e[k - 1] * s;
        }
    }
    e[d]
}

/// Sample variance of `||Z_0||^2` over independent draws.
pub fn mc_norm_variance<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    model: &MomentModel,
    trials: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_nd(n, d)?;
    if trials < 1000 {
        return Err(Error::validation(format!("need at least 1000 trials, got {trials}")));
    }
    let norms: Vec<f64> = (0..trials)
        .map(|_| column_norm_sq(&sample_x_vector(model, n, rng), d))
        .collect();
    let t = trials as f64;
    let mean = norms.iter().copied().collect::<NeumaierSum>().value() / t;
    let m2 = norms.iter().map(|v| (v - mean).powi(2)).collect::<NeumaierSum>().value() / t;
    let m4 = norms.iter().map(|v| (v - mean).powi(4)).collect::<NeumaierSum>().value() / t;
    let estimate = m2 * t / (t - 1.0);
    let spread = (m4 - m2 * m2 * (t - 3.0) / (t - 1.0)).max(0.0);
    Ok(McEstimate {
        estimate,
        stderr: (spread / t).sqrt(),
        trials,
    })
}

/// Shared degrees of a tuple of `2m` subsets, positions paired `(1,2), (3,4), ...`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SharedDegreeProfile {
    pub degrees: Vec<usize>,
}

impl SharedDegreeProfile {
    pub fn total(&self) -> usize {
        self.degrees.iter().sum()
    }
}

pub fn shared_degrees(subsets: &[SubsetIndex]) -> Result<SharedDegreeProfile> {
    if subsets.is_empty() || subsets.len() % 2 == 1 {
        return Err(Error::validation(format!(
            "shared degrees need an even, nonzero number of subsets, got {}",
            subsets.len()
        )));
    }
    let size = subsets[0].len();
    if subsets.iter().any(|s| s.len() != size) {
        return Err(Error::validation("shared degrees need subsets of equal size"));
    }
    let degrees = subsets
        .iter()
        .enumerate()
        .map(|(v, sv)| {
            let counterpart = v ^ 1;
            sv.members()
                .iter()
                .filter(|r| {
                    subsets
                        .iter()
                        .enumerate()
                        .any(|(w, sw)| w != v && w != counterpart && sw.members().contains(r))
                })
                .count()
        })
        .collect();
    Ok(SharedDegreeProfile { degrees })
}

/// `E[prod_r x_r^{g_r}]` where `g_r` counts how often `r` occurs across the subsets.
pub fn tensor_moment(model: &MomentModel, subsets: &[SubsetIndex]) -> Result<f64> {
    if subsets.is_empty() {
        return Err(Error::validation("tensor moment needs at least one subset"));
    }
    let total: usize = subsets.iter().map(SubsetIndex::len).sum();
    if total > TENSOR_MOMENT_MAX_SIZE {
        return Err(Error::validation(format!(
            "total subset size {total} exceeds {TENSOR_MOMENT_MAX_SIZE}"
        )));
    }
    let mut exponents: BTreeMap<usize, u32> = BTreeMap::new();
    for s in subsets {
        for &r in s.members() {
            *exponents.entry(r).or_default() += 1;
        }
    }
    Ok(exponents.values().map(|&g| model.moment(g)).product())
}

/// Right-hand side of `E[...] <= E[x^{2m}]^{(1/2) sum shdeg}` for a tuple of `2m` subsets.
pub fn tensor_moment_bound(model: &MomentModel, profile: &SharedDegreeProfile) -> f64 {
    let m = (profile.degrees.len() / 2) as u32;
    model.even_moment(m).powf(0.5 * profile.total() as f64)
}

fn check_d_list(n: usize, d_list: &[usize]) -> Result<()> {
    if d_list.is_empty() {
        return Err(Error::validation("d list must be nonempty"));
    }
    for &d in d_list {
        check_nd(n, d)?;
    }
    Ok(())
}

/// Average of `E[Z_{d_1,i_1}^2 ... Z_{d_m,i_m}^2]` over all index tuples.
pub fn c_moment(m: usize, n: usize, d_list: &[usize], model: &MomentModel) -> Result<f64> {
    if m != d_list.len() {
        return Err(Error::validation(format!(
            "m = {m} but {} degrees were given",
            d_list.len()
        )));
    }
    check_d_list(n, d_list)?;
    let mut count: u128 = 1;
    for &d in d_list {
        let c = binomial(n as u64, d as u64)? as u128;
        count = count.saturating_mul(c);
        if count > C_MOMENT_BUDGET {
            return Err(Error::Resource {
                what: "c_moment enumeration",
                requested: count,
                cap: C_MOMENT_BUDGET,
            });
        }
    }
    let levels: Vec<SubsetTable> = d_list.iter().map(|&d| SubsetTable::new(n, d)).collect();
    // ratio[c] = E[x^{2(c+1)}] / E[x^{2c}]
    let ratio: Vec<f64> = (0..=m as u32)
        .map(|c| model.even_moment(c + 1) / model.even_moment(c))
        .collect();
    let partials: Vec<f64> = (0..levels[0].len())
        .into_par_iter()
        .map(|i| {
            let mut counts = vec![0u32; n];
            let mut acc = NeumaierSum::new();
            let w = push_subset(levels[0].get(i), &mut counts, &ratio);
            enumerate(&levels[1..], &mut counts, &ratio, w, &mut acc);
            acc.value()
        })
        .collect();
    let total = partials.into_iter().collect::<NeumaierSum>().value();
    Ok(total / count as f64)
}

/// All `d`-subsets of `{0..n-1}`, stored flat.
struct SubsetTable {
    d: usize,
    flat: Vec<u32>,
}

impl SubsetTable {
    fn new(n: usize, d: usize) -> Self {
        let mut flat = Vec::new();
        let mut current: Vec<u32> = (0..d as u32).collect();
        loop {
            flat.extend_from_slice(&current);
            // advance to the next combination in lexicographic order
            let Some(i) = (0..d).rev().find(|&i| (current[i] as usize) < n - d + i) else {
                break;
            };
            current[i] += 1;
            for j in i + 1..d {
                current[j] = current[j - 1] + 1;
            }
        }
        Self { d, flat }
    }

    fn len(&self) -> usize {
        self.flat.len() / self.d
    }

    fn get(&self, i: usize) -> &[u32] {
        &self.flat[i * self.d..(i + 1) * self.d]
    }
}

fn push_subset(subset: &[u32], counts: &mut [u32], ratio: &[f64]) -> f64 {
    let mut factor = 1.0;
    for &r in subset {
        let c = &mut counts[r as usize];
        factor *= ratio[*c as usize];
        *c += 1;
    }
    factor
}

fn pop_subset(subset: &[u32], counts: &mut [u32]) {
    for &r in subset {
        counts[r as usize] -= 1;
    }
}

fn enumerate(
    levels: &[SubsetTable],
    counts: &mut [u32],
    ratio: &[f64],
    w: f64,
    acc: &mut NeumaierSum,
) {
    match levels.split_first() {
        None => acc.add(w),
        Some((level, rest)) => {
            for i in 0..level.len() {
                let subset = level.get(i);
                let f = push_subset(subset, counts, ratio);
                enumerate(rest, counts, ratio, w * f, acc);
                pop_subset(subset, counts);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CMomentBound {
    pub bound: f64,
    pub applicable: bool,
    /// `s = sum_j d_j`.
    pub s: usize,
}

/// `1 + e^{a} a` with `a = 2 C^2 e^2 s^2 / n`, applicable when `s <= sqrt(n) / (3 C e)`.
pub fn c_moment_bound(m: usize, n: usize, d_list: &[usize], c: f64) -> Result<CMomentBound> {
    if m != d_list.len() {
        return Err(Error::validation(format!(
            "m = {m} but {} degrees were given",
            d_list.len()
        )));
    }
    if !(c.is_finite() && c >= 1.0) {
        return Err(Error::validation(format!("moment constant must be >= 1, got {c}")));
    }
    if n == 0 {
        return Err(Error::validation("n must be positive"));
    }
    let s: usize = d_list.iter().sum();
    let e = std::f64::consts::E;
    let a = 2.0 * c * c * e * e * (s * s) as f64 / n as f64;
    Ok(CMomentBound {
        bound: 1.0 + a.exp() * a,
        applicable: s as f64 <= (n as f64).sqrt() / (3.0 * c * e),
        s,
    })
}
