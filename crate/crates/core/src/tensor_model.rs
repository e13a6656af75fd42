//! The random tensor product model.
//!
//! A column is indexed by the `d`-subsets of `{1, ..., n}` and its entry for
//! subset `{i_1 < ... < i_d}` is `x_{i_1} * ... * x_{i_d}` for one draw of
//! `n` i.i.d. scalars. Subsets are laid out in colexicographic order, which is
//! the combinatorial number system: rank is `sum_j C(s_j - 1, j)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::derive_seed;

/// Default ceiling on `N * p` for sampled matrices.
pub const DEFAULT_MAX_ENTRIES: u64 = 1 << 26;

const COLUMN_STREAM: u64 = 0x636f_6c75_6d6e;

/// Exact `C(n, k)`, or an overflow error when it does not fit in `u64`.
pub fn binomial(n: u64, k: u64) -> Result<u64> {
    if k > n {
        return Ok(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k {
        // acc * (n-k+i) / i is C(n-k+i, i), always integral
        acc = acc * u128::from(n - k + i) / u128::from(i);
        if acc > u128::from(u64::MAX) {
            return Err(Error::Overflow { n, k });
        }
    }
    Ok(acc as u64)
}

/// `C(n, k)` for inputs already known to be representable.
fn small_binomial(n: usize, k: usize) -> u64 {
    binomial(n as u64, k as u64).expect("binomial within validated range")
}

/// A strictly increasing `d`-tuple of 1-based indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubsetIndex(Vec<usize>);

impl SubsetIndex {
    pub fn new(members: Vec<usize>) -> Result<Self> {
        if members.first() == Some(&0) {
            return Err(Error::validation("subset members are 1-based"));
        }
        if members.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(format!(
                "subset {members:?} is not strictly increasing"
            )));
        }
        Ok(Self(members))
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check_domain(&self, n: usize, d: usize) -> Result<()> {
        if self.0.len() != d {
            return Err(Error::validation(format!(
                "subset has {} members, expected {d}",
                self.0.len()
            )));
        }
        if self.0.last().is_some_and(|&m| m > n) {
            return Err(Error::validation(format!(
                "subset {:?} leaves [1, {n}]",
                self.0
            )));
        }
        Ok(())
    }
}

impl fmt::Display for SubsetIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, m) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{m}")?;
        }
        write!(f, "}}")
    }
}

/// Colexicographic rank of `s` among the `d`-subsets of `{1..n}`.
pub fn rank_subset(s: &SubsetIndex, n: usize, d: usize) -> Result<u64> {
    s.check_domain(n, d)?;
    binomial(n as u64, d as u64)?;
    Ok(s
        .members()
        .iter()
        .enumerate()
        .map(|(j, &m)| small_binomial(m - 1, j + 1))
        .sum())
}

/// Inverse of [`rank_subset`] by greedy largest-binomial decoding.
pub fn unrank_subset(rank: u64, n: usize, d: usize) -> Result<SubsetIndex> {
    if d > n {
        return Err(Error::validation(format!("d = {d} exceeds n = {n}")));
    }
    let total = binomial(n as u64, d as u64)?;
    if rank >= total {
        return Err(Error::validation(format!(
            "rank {rank} outside [0, C({n},{d}) = {total})"
        )));
    }
    let mut members = vec![0; d];
    let mut r = rank;
    let mut c = n;
    for j in (1..=d).rev() {
        // largest c with C(c, j) <= r; c >= j - 1 always qualifies
        c -= 1;
        while small_binomial(c, j) > r {
            c -= 1;
        }
        r -= small_binomial(c, j);
        members[j - 1] = c + 1;
    }
    Ok(SubsetIndex(members))
}

/// Dimensions of one experiment instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    /// `C(n, d)`.
    pub big_n: usize,
    /// `N / p`.
    pub gamma_n: f64,
}

impl ModelParams {
    pub fn new(n: usize, d: usize, p: usize) -> Result<Self> {
        if n == 0 || d == 0 || p == 0 {
            return Err(Error::validation("n, d and p must be positive"));
        }
        if d > n {
            return Err(Error::validation(format!("d = {d} exceeds n = {n}")));
        }
        let big_n = binomial(n as u64, d as u64)?;
        let big_n = usize::try_from(big_n).map_err(|_| Error::Overflow {
            n: n as u64,
            k: d as u64,
        })?;
        Ok(Self {
            n,
            d,
            p,
            big_n,
            gamma_n: big_n as f64 / p as f64,
        })
    }

    /// Resolves `p = round(N / gamma)`, at least 1.
    pub fn with_gamma(n: usize, d: usize, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::validation(format!("gamma must be positive, got {gamma}")));
        }
        let probe = Self::new(n, d, 1)?;
        let p = (probe.big_n as f64 / gamma).round().max(1.0) as usize;
        Self::new(n, d, p)
    }

    pub fn entries(&self) -> u128 {
        self.big_n as u128 * self.p as u128
    }
}

/// Symmetric, unit-variance scalar law for the coordinates `x_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MomentModel {
    Rademacher,
    Gaussian,
    /// `±sqrt(B)` with probability `1/(2B)` each, `0` otherwise; `E[x^4] = B`.
    ThreePoint { b: f64 },
}

impl MomentModel {
    pub fn three_point(b: f64) -> Result<Self> {
        if !(b.is_finite() && b >= 1.0) {
            return Err(Error::validation(format!("three-point B must be >= 1, got {b}")));
        }
        Ok(MomentModel::ThreePoint { b })
    }

    /// `E[x^{2k}]` in closed form.
    pub fn even_moment(&self, k: u32) -> f64 {
        match *self {
            MomentModel::Rademacher => 1.0,
            MomentModel::Gaussian => (1..=k).map(|i| (2 * i - 1) as f64).product(),
            MomentModel::ThreePoint { b } => {
                if k == 0 {
                    1.0
                } else {
                    b.powi(k as i32 - 1)
                }
            }
        }
    }

    /// `E[x^power]`; odd powers vanish by symmetry.
    pub fn moment(&self, power: u32) -> f64 {
        if power % 2 == 1 {
            0.0
        } else {
            self.even_moment(power / 2)
        }
    }

    pub fn fourth_moment(&self) -> f64 {
        self.even_moment(2)
    }

    /// Growth constant `C = max_{k <= 8} E[x^{2k}]^{1/k} / k`.
    pub fn moment_constant(&self) -> f64 {
        (1..=8u32)
            .map(|k| self.even_moment(k).powf(1.0 / k as f64) / k as f64)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MomentModel::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            MomentModel::Gaussian => rng.sample(StandardNormal),
            MomentModel::ThreePoint { b } => {
                let u: f64 = rng.random();
                if u < 1.0 / b {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * b.sqrt()
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for MomentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentModel::Rademacher => write!(f, "rademacher"),
            MomentModel::Gaussian => write!(f, "gaussian"),
            MomentModel::ThreePoint { b } => write!(f, "threepoint:{b}"),
        }
    }
}

impl FromStr for MomentModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "rademacher" => Ok(MomentModel::Rademacher),
            "gaussian" => Ok(MomentModel::Gaussian),
            other => match other.strip_prefix("threepoint:") {
                Some(b) => {
                    let b: f64 = b
                        .parse()
                        .map_err(|_| Error::validation(format!("bad three-point B in {s:?}")))?;
                    MomentModel::three_point(b)
                }
                None => Err(Error::validation(format!(
                    "unknown distribution {s:?} (rademacher | gaussian | threepoint:B)"
                ))),
            },
        }
    }
}

pub fn sample_x_vector<R: Rng + ?Sized>(model: &MomentModel, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| model.sample(rng)).collect()
}

/// All degree-`d` products of `x` in colex order.
///
/// Level `k` holds the products over `k`-subsets. Subsets of `{1..e}` form a
/// prefix of the colex order, so level `k` is the concatenation over the
/// largest element `e` of (prefix of level `k-1` over `{1..e-1}`) times
/// `x_e`, costing `sum_{k<=d} C(n,k)` multiplications in total.
pub fn build_column(x: &[f64], d: usize) -> Vec<f64> {
    let n = x.len();
    assert!(d >= 1 && d <= n, "build_column requires 1 <= d <= n");
    let mut level = vec![1.0];
    for k in 1..=d {
        let mut next = Vec::with_capacity(small_binomial(n, k) as usize);
        for e in k..=n {
            let prefix = small_binomial(e - 1, k - 1) as usize;
            let xe = x[e - 1];
            next.extend(level[..prefix].iter().map(|v| v * xe));
        }
        level = next;
    }
    level
}

/// Draws column `j` of the sampled matrix from its own sub-stream.
pub fn sample_column(params: &ModelParams, model: &MomentModel, seed: u64, j: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, COLUMN_STREAM, j as u64));
    let x = sample_x_vector(model, params.n, &mut rng);
    build_column(&x, params.d)
}

/// Samples the `N x p` data matrix. Column `j` depends only on `(seed, j)`.
pub fn sample_matrix(
    params: &ModelParams,
    model: &MomentModel,
    seed: u64,
    max_entries: u64,
) -> Result<Matrix> {
    if params.entries() > u128::from(max_entries) {
        return Err(Error::Resource {
            what: "N*p matrix entries",
            requested: params.entries(),
            cap: u128::from(max_entries),
        });
    }
    let rows = params.big_n;
    let mut z = Matrix::zeros(rows, params.p);
    z.as_col_major_mut()
        .par_chunks_mut(rows)
        .enumerate()
        .for_each(|(j, col)| col.copy_from_slice(&sample_column(params, model, seed, j)));
    Ok(z)
}

/// Basis in which the population square root is diagonal.
#[derive(Debug, Clone, Copy)]
pub enum PopulationBasis<'a> {
    Diagonal,
    /// Orthogonal `Q` with `T^{1/2} = Q^T diag(s) Q`.
    Orthogonal(&'a Matrix),
}

/// Returns `T^{1/2} Z` for `T^{1/2} = basis^T diag(t_sqrt_eigs) basis`.
pub fn apply_population_sqrt(
    z: &Matrix,
    t_sqrt_eigs: &[f64],
    basis: PopulationBasis<'_>,
) -> Result<Matrix> {
    let n = z.rows();
    if t_sqrt_eigs.len() != n {
        return Err(Error::validation(format!(
            "{} population square-root eigenvalues for {n} rows",
            t_sqrt_eigs.len()
        )));
    }
    if let Some(bad) = t_sqrt_eigs.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::validation(format!(
            "population square-root eigenvalue {bad} is not a finite nonnegative number"
        )));
    }
    let scale_rows = |m: &mut Matrix| {
        for j in 0..m.cols() {
            for (v, s) in m.column_mut(j).iter_mut().zip(t_sqrt_eigs) {
                *v *= s;
            }
        }
    };
    match basis {
        PopulationBasis::Diagonal => {
            let mut out = z.clone();
            scale_rows(&mut out);
            Ok(out)
        }
        PopulationBasis::Orthogonal(q) => {
            if q.rows() != n || q.cols() != n {
                return Err(Error::validation(format!(
                    "basis is {}x{}, expected {n}x{n}",
                    q.rows(),
                    q.cols()
                )));
            }
            let qt = q.transpose();
            let mut gram = qt.matmul(q)?;
            for i in 0..n {
                gram[(i, i)] -= 1.0;
            }
            if gram.max_abs() > 1e-10 {
                return Err(Error::validation("basis is not orthogonal"));
            }
            let mut rotated = q.matmul(z)?;
            scale_rows(&mut rotated);
            qt.matmul(&rotated)
        }
    }
}
