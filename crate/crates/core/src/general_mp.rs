//! Limiting spectrum for anisotropic populations.
//!
//! For columns `T^{1/2} Z_0` the limiting Stieltjes transform solves
//!
//! ```text
//! m(z) = sum_i w_i / (z - t_i (1 - gamma + gamma z m(z)))
//! ```
//!
//! for a discrete population measure `H = sum_i w_i delta_{t_i}`. The solver
//! runs a damped fixed-point iteration started at `1/z` on the companion
//! transform `u = -(1 - gamma + gamma z m) / z`, whose map keeps the upper
//! half-plane invariant and has a unique fixed point there; periodic Newton
//! steps finish slow cases. Densities are then
//! recovered by Stieltjes inversion at a small height `eta`, walking the grid
//! with warm starts.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{require_upper_half, trapezoid, ComplexSum, ComplexValue};

/// Smallest inversion height accepted by [`density_from_stieltjes`].
pub const ETA_FLOOR: f64 = 1e-4;

/// Atoms and weights of a population spectral distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteMeasure {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::validation(format!(
                "measure needs matching nonempty atoms/weights, got {} and {}",
                atoms.len(),
                weights.len()
            )));
        }
        if atoms.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::validation("population atoms must be finite and nonnegative"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::validation("weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::validation(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { atoms, weights })
    }

    /// Point mass at `t`.
    pub fn dirac(t: f64) -> Result<Self> {
        Self::new(vec![t], vec![1.0])
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight carried by the atom at exactly zero.
    pub fn mass_at_zero(&self) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .filter(|(t, _)| **t == 0.0)
            .map(|(_, w)| w)
            .sum()
    }

    pub fn max_atom(&self) -> f64 {
        self.atoms.iter().copied().fold(0.0, f64::max)
    }
}

/// Empirical spectral distribution of a population covariance given its eigenvalues.
pub fn esd_of_population(t_eigs: &[f64]) -> Result<DiscreteMeasure> {
    if t_eigs.is_empty() {
        return Err(Error::validation("empty population spectrum"));
    }
    if let Some(bad) = t_eigs.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::validation(format!(
            "population eigenvalue {bad} is negative or non-finite"
        )));
    }
    let mut sorted = t_eigs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut atoms: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for t in sorted {
        if atoms.last() == Some(&t) {
            *counts.last_mut().expect("paired with atoms") += 1;
        } else {
            atoms.push(t);
            counts.push(1);
        }
    }
    let n = t_eigs.len() as f64;
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    // renormalize the last weight so the sum is 1 to the last bit
    let head: f64 = weights[..weights.len() - 1].iter().sum();
    let mut weights = weights;
    let last = weights.len() - 1;
    weights[last] = 1.0 - head;
    DiscreteMeasure::new(atoms, weights)
}

/// One application of the fixed-point map.
pub fn ie_map(
    h: &DiscreteMeasure,
    gamma: f64,
    z: ComplexValue,
    m: ComplexValue,
) -> Result<ComplexValue> {
    require_upper_half(z)?;
    let scale = 1.0 - gamma + gamma * z * m;
    let mut acc = ComplexSum::default();
    for (&t, &w) in h.atoms.iter().zip(&h.weights) {
        let denom = z - t * scale;
        if denom.norm() < 1e-14 {
            return Err(Error::Numeric(format!(
                "fixed-point map singular at z = {z}, m = {m} (atom {t})"
            )));
        }
        acc.add(w / denom);
    }
    Ok(acc.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveOptions {
    /// Stop once successive iterates differ by less than this.
    pub tol: f64,
    pub max_iter: usize,
    /// Weight of the new map value in each update.
    pub damping: f64,
    /// Smallest accepted `Im z`.
    pub im_floor: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 10_000,
            damping: 0.5,
            im_floor: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixpointResult {
    pub m: ComplexValue,
    pub iterations: usize,
    /// `|m - ie_map(m)|` at the returned iterate.
    pub residual: f64,
}

/// Solves the fixed-point equation from the cold start `m = 1/z`.
pub fn solve_ie(
    h: &DiscreteMeasure,
    gamma: f64,
    z: ComplexValue,
    opts: &SolveOptions,
) -> Result<FixpointResult> {
    require_upper_half(z)?;
    solve_ie_from(h, gamma, z, z.inv(), opts)
}

/// Solves the fixed-point equation from a caller-supplied starting point.
pub fn solve_ie_from(
    h: &DiscreteMeasure,
    gamma: f64,
    z: ComplexValue,
    start: ComplexValue,
    opts: &SolveOptions,
) -> Result<FixpointResult> {
    require_upper_half(z)?;
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::validation(format!("gamma must be positive, got {gamma}")));
    }
    if z.im < opts.im_floor {
        return Err(Error::domain(format!(
            "Im z = {} is below the solver floor {}",
            z.im, opts.im_floor
        )));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::validation(format!("damping {} outside (0, 1]", opts.damping)));
    }
    let mut u = companion_of(gamma, z, start);
    if !(u.im > 0.0 && u.re.is_finite()) {
        u = -z.inv();
    }
    let mut change = f64::INFINITY;
    let mut iteration = 0;
    while iteration < opts.max_iter {
        iteration += 1;
        let next = u + opts.damping * (companion_map(h, gamma, z, u) - u);
        change = (next - u).norm();
        u = next;
        if !(u.re.is_finite() && u.im.is_finite()) {
            break;
        }
        if change < opts.tol {
            return finish(h, gamma, z, u, iteration);
        }
        if iteration % NEWTON_EVERY == 0 {
            if let Some((root, steps)) = companion_newton(h, gamma, z, u, opts.tol) {
                return finish(h, gamma, z, root, iteration + steps);
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual: change,
    })
}

const NEWTON_EVERY: usize = 32;

/// `u = -(1 - gamma + gamma z m) / z`, the Stieltjes transform (in the
/// `1/(t - z)` convention) of the companion `p x p` Gram spectrum.
fn companion_of(gamma: f64, z: ComplexValue, m: ComplexValue) -> ComplexValue {
    -(1.0 - gamma + gamma * z * m) / z
}

fn companion_map(h: &DiscreteMeasure, gamma: f64, z: ComplexValue, u: ComplexValue) -> ComplexValue {
    let mut acc = ComplexSum::default();
    for (&t, &w) in h.atoms.iter().zip(&h.weights) {
        acc.add(w * t / (1.0 + t * u));
    }
    -(z - gamma * acc.value()).inv()
}

/// Newton on `u (z - gamma A(u)) + 1 = 0`. Only a root in the upper
/// half-plane is accepted.
fn companion_newton(
    h: &DiscreteMeasure,
    gamma: f64,
    z: ComplexValue,
    mut u: ComplexValue,
    tol: f64,
) -> Option<(ComplexValue, usize)> {
    for step in 1..=40 {
        let mut a = ComplexSum::default();
        let mut da = ComplexSum::default();
        for (&t, &w) in h.atoms.iter().zip(&h.weights) {
            let q = (1.0 + t * u).inv();
            a.add(w * t * q);
            da.add(w * t * t * q * q);
        }
        let base = z - gamma * a.value();
        let f = u * base + 1.0;
        let df = base + gamma * u * da.value();
        let delta = f / df;
        u -= delta;
        if !(u.re.is_finite() && u.im.is_finite() && u.im > 0.0) {
            return None;
        }
        if delta.norm() <= tol.min(1e-14 * u.norm().max(1.0)) {
            return Some((u, step));
        }
    }
    None
}

fn finish(
    h: &DiscreteMeasure,
    gamma: f64,
    z: ComplexValue,
    u: ComplexValue,
    iterations: usize,
) -> Result<FixpointResult> {
    let mut acc = ComplexSum::default();
    for (&t, &w) in h.atoms.iter().zip(&h.weights) {
        acc.add(w / (1.0 + t * u));
    }
    let m = acc.value() / z;
    if !(u.im > 0.0 && m.im < 0.0) {
        return Err(Error::Invariant(format!(
            "fixed point {m} at z = {z} is not in the lower half-plane"
        )));
    }
    let residual = (m - ie_map(h, gamma, z, m)?).norm();
    Ok(FixpointResult {
        m,
        iterations,
        residual,
    })
}

/// Solves along a grid at height `eta`, warm-starting each point from the
/// previous converged one. Failures are returned per point.
pub fn solve_grid(
    h: &DiscreteMeasure,
    gamma: f64,
    x_grid: &[f64],
    eta: f64,
    opts: &SolveOptions,
) -> Result<Vec<Result<FixpointResult>>> {
    if !(eta.is_finite() && eta >= ETA_FLOOR) {
        return Err(Error::validation(format!(
            "eta = {eta} is below the inversion floor {ETA_FLOOR}"
        )));
    }
    let opts = SolveOptions {
        im_floor: opts.im_floor.min(eta),
        ..*opts
    };
    let mut out = Vec::with_capacity(x_grid.len());
    let mut warm: Option<ComplexValue> = None;
    for &x in x_grid {
        let z = ComplexValue::new(x, eta);
        let attempt = match warm {
            Some(start) => solve_ie_from(h, gamma, z, start, &opts)
                .or_else(|_| solve_ie(h, gamma, z, &opts)),
            None => solve_ie(h, gamma, z, &opts),
        };
        warm = attempt.as_ref().ok().map(|r| r.m);
        out.push(attempt);
    }
    Ok(out)
}

/// Density recovered on a grid by Stieltjes inversion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityCurve {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub solutions: Vec<FixpointResult>,
    pub eta: f64,
    /// Points where `-Im m / pi` came out negative and was set to zero.
    pub clamped: usize,
}

/// `-(1/pi) Im m(x + i eta)` on each grid point.
pub fn density_from_stieltjes(
    h: &DiscreteMeasure,
    gamma: f64,
    x_grid: &[f64],
    eta: f64,
) -> Result<DensityCurve> {
    let solved = solve_grid(h, gamma, x_grid, eta, &SolveOptions::default())?;
    let mut density = Vec::with_capacity(x_grid.len());
    let mut solutions = Vec::with_capacity(x_grid.len());
    let mut clamped = 0;
    for (&x, r) in x_grid.iter().zip(solved) {
        let r = r.map_err(|e| Error::Numeric(format!("inversion failed at x = {x}: {e}")))?;
        let mut v = -r.m.im / std::f64::consts::PI;
        if v < 0.0 {
            v = 0.0;
            clamped += 1;
        }
        density.push(v);
        solutions.push(r);
    }
    Ok(DensityCurve {
        x: x_grid.to_vec(),
        density,
        solutions,
        eta,
        clamped,
    })
}

/// Mass the limiting law puts at zero: the larger of `1 - 1/gamma` (rank
/// deficiency from too few samples) and `H({0})` (null population directions).
pub fn zero_mass(h: &DiscreteMeasure, gamma: f64) -> f64 {
    (1.0 - 1.0 / gamma).max(h.mass_at_zero()).max(0.0)
}

/// Piecewise-linear CDF of the limiting law, built from an inverted density.
///
/// The Lorentzian that the zero atom leaves in `-Im m / pi` is subtracted,
/// the remaining density is integrated by trapezoids and rescaled to carry
/// exactly `1 - zero_mass`, and the atom is added back as a jump at zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitCdf {
    x: Vec<f64>,
    cumulative: Vec<f64>,
    atom: f64,
    /// Mass of the continuous part before rescaling.
    pub raw_mass: f64,
}

impl LimitCdf {
    pub fn build(h: &DiscreteMeasure, gamma: f64, x_grid: &[f64], eta: f64) -> Result<Self> {
        if x_grid.len() < 2 || x_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("CDF grid must be strictly increasing with 2+ points"));
        }
        let curve = density_from_stieltjes(h, gamma, x_grid, eta)?;
        let atom = zero_mass(h, gamma);
        let continuous: Vec<f64> = curve
            .x
            .iter()
            .zip(&curve.density)
            .map(|(&x, &d)| {
                let lorentz = atom * eta / (std::f64::consts::PI * (x * x + eta * eta));
                (d - lorentz).max(0.0)
            })
            .collect();
        let mut cumulative = Vec::with_capacity(x_grid.len());
        cumulative.push(0.0);
        for i in 1..x_grid.len() {
            let step = trapezoid(&x_grid[i - 1..=i], &continuous[i - 1..=i]);
            cumulative.push(cumulative[i - 1] + step);
        }
        let raw_mass = *cumulative.last().expect("nonempty");
        if raw_mass > 0.0 {
            let scale = (1.0 - atom) / raw_mass;
            cumulative.iter_mut().for_each(|c| *c *= scale);
        }
        Ok(Self {
            x: x_grid.to_vec(),
            cumulative,
            atom,
            raw_mass,
        })
    }

    pub fn atom(&self) -> f64 {
        self.atom
    }

    /// Smallest grid interval outside of which the continuous part carries
    /// less than `1e-6` of the mass on each side.
    pub fn bulk_span(&self) -> (f64, f64) {
        let total = self.cumulative[self.cumulative.len() - 1];
        let cut = 1e-6 * total.max(f64::MIN_POSITIVE);
        let lo = self.cumulative.partition_point(|&c| c <= cut).saturating_sub(1);
        let hi = self.cumulative.partition_point(|&c| c < total - cut).min(self.x.len() - 1);
        (self.x[lo], self.x[hi.max(lo)])
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let jump = if x >= 0.0 { self.atom } else { 0.0 };
        let cont = if x <= self.x[0] {
            0.0
        } else if x >= self.x[self.x.len() - 1] {
            self.cumulative[self.cumulative.len() - 1]
        } else {
            let i = self.x.partition_point(|&g| g <= x);
            let (x0, x1) = (self.x[i - 1], self.x[i]);
            let (c0, c1) = (self.cumulative[i - 1], self.cumulative[i]);
            c0 + (c1 - c0) * (x - x0) / (x1 - x0)
        };
        (jump + cont).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mp_law::{mp_density, mp_stieltjes};
    use crate::numeric::linspace;

    fn c(re: f64, im: f64) -> ComplexValue {
        ComplexValue::new(re, im)
    }

    fn two_atoms() -> DiscreteMeasure {
        DiscreteMeasure::new(vec![1.0, 4.0], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn measure_validation() {
        assert!(DiscreteMeasure::new(vec![1.0], vec![0.9]).is_err());
        assert!(DiscreteMeasure::new(vec![-1.0], vec![1.0]).is_err());
        assert!(DiscreteMeasure::new(vec![1.0, 2.0], vec![1.0]).is_err());
        assert!(DiscreteMeasure::new(vec![1.0, 2.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn population_esd_examples() {
        let h = esd_of_population(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((h.atoms(), h.weights()), (&[1.0][..], &[1.0][..]));
        let h = esd_of_population(&[4.0, 1.0]).unwrap();
        assert_eq!((h.atoms(), h.weights()), (&[1.0, 4.0][..], &[0.5, 0.5][..]));
        let h = esd_of_population(&[0.0, 3.0, 0.0]).unwrap();
        assert_eq!(h.atoms(), &[0.0, 3.0]);
        assert!((h.weights()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((h.weights()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(esd_of_population(&[1.0, -0.5]).is_err());
        let many = esd_of_population(&vec![0.1; 7].into_iter().chain([0.2; 3]).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(many.weights().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn ie_map_examples() {
        let z = c(0.3, 1.2);
        let m = c(0.1, -0.4);
        let zero = DiscreteMeasure::dirac(0.0).unwrap();
        assert!((ie_map(&zero, 2.0, z, m).unwrap() - z.inv()).norm() < 1e-15);
        let one = DiscreteMeasure::dirac(1.0).unwrap();
        let g = 1.7;
        let expect = (z - (1.0 - g + g * z * m)).inv();
        assert!((ie_map(&one, g, z, m).unwrap() - expect).norm() < 1e-15);

        // gamma = 1: scale = z m = (2i)(-0.4i) = 0.8, so the sum is
        // 0.5/(2i - 0.8) + 0.5/(2i - 3.2)
        let got = ie_map(&two_atoms(), 1.0, c(0.0, 2.0), c(0.0, -0.4)).unwrap();
        let expect = 0.5 / c(-0.8, 2.0) + 0.5 / c(-3.2, 2.0);
        assert!((got - expect).norm() < 1e-15);
        let hand = c(-0.4 / 4.64 - 1.6 / 14.24, -1.0 / 4.64 - 1.0 / 14.24);
        assert!((got - hand).norm() < 1e-15);
        assert!(ie_map(&one, 1.0, c(0.0, 0.0), m).is_err());
    }

    #[test]
    fn solve_examples() {
        let opts = SolveOptions::default();
        let z = c(0.7, 1.3);
        let r = solve_ie(&DiscreteMeasure::dirac(0.0).unwrap(), 2.0, z, &opts).unwrap();
        assert_eq!(r.m, z.inv());
        assert_eq!(r.iterations, 1);

        let r = solve_ie(&DiscreteMeasure::dirac(1.0).unwrap(), 2.0, c(0.0, 3.0), &opts).unwrap();
        let closed = mp_stieltjes(2.0, c(0.0, 3.0)).unwrap();
        assert!((r.m - closed).norm() < 1e-10);

        let r = solve_ie(&two_atoms(), 1.0, c(2.0, 2.0), &opts).unwrap();
        assert!(r.residual < 1e-11);
        assert!(r.m.im < 0.0);
    }

    #[test]
    fn solve_errors() {
        let opts = SolveOptions::default();
        let h = two_atoms();
        assert!(matches!(solve_ie(&h, 1.0, c(0.0, 0.1), &opts), Err(Error::Domain(_))));
        assert!(matches!(solve_ie(&h, 1.0, c(0.0, -1.0), &opts), Err(Error::Domain(_))));
        let tight = SolveOptions {
            max_iter: 3,
            ..opts
        };
        assert!(matches!(
            solve_ie(&h, 1.0, c(2.0, 0.6), &tight),
            Err(Error::NonConvergence { iterations: 3, .. })
        ));
    }

    #[test]
    fn isotropic_reduction_on_grid() {
        let opts = SolveOptions::default();
        let h = DiscreteMeasure::dirac(1.0).unwrap();
        for g in [0.25, 0.5, 1.0, 2.0, 4.0] {
            for re in linspace(-3.0, 12.0, 11) {
                for im in [1.0, 2.0, 5.0] {
                    let z = c(re, im);
                    let r = solve_ie(&h, g, z, &opts).unwrap();
                    assert!((r.m - mp_stieltjes(g, z).unwrap()).norm() <= 1e-9, "g {g} z {z}");
                    assert!(r.residual < 10.0 * opts.tol);
                }
            }
        }
    }

    #[test]
    fn inversion_matches_mp_density() {
        let h = DiscreteMeasure::dirac(1.0).unwrap();
        let xs = linspace(0.1, 3.9, 77);
        let curve = density_from_stieltjes(&h, 1.0, &xs, 1e-3).unwrap();
        for (x, d) in xs.iter().zip(&curve.density) {
            let exact = mp_density(1.0, *x).unwrap();
            assert!((d - exact).abs() <= 3e-2, "x {x}: {d} vs {exact}");
        }
        let far = density_from_stieltjes(&h, 1.0, &[1e3], 1e-3).unwrap();
        assert!(far.density[0] < 1e-4);
        assert!(density_from_stieltjes(&h, 1.0, &xs, 1e-5).is_err());
    }

    #[test]
    fn two_atom_density_has_unit_mass() {
        let xs = linspace(-1.0, 25.0, 5201);
        let curve = density_from_stieltjes(&two_atoms(), 1.0, &xs, 1e-2).unwrap();
        let mass = trapezoid(&xs, &curve.density);
        assert!((mass - 1.0).abs() < 5e-2, "mass {mass}");
        assert!(curve.solutions.iter().all(|s| s.residual < 1e-10));
    }

    #[test]
    fn limit_cdf_of_isotropic_case_tracks_mp() {
        let h = DiscreteMeasure::dirac(1.0).unwrap();
        for g in [0.5, 2.0] {
            let law = crate::mp_law::MpLaw::new(g).unwrap();
            let xs = linspace(-0.5, law.support_hi + 1.0, 3001);
            let cdf = LimitCdf::build(&h, g, &xs, 1e-3).unwrap();
            assert!((cdf.atom() - law.atom_at_zero).abs() < 1e-15);
            for x in linspace(-0.2, law.support_hi + 0.5, 40) {
                assert!((cdf.cdf(x) - law.cdf(x)).abs() < 1e-2, "g {g} x {x}");
            }
        }
    }
}
