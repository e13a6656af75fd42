//! Closed-form Marchenko–Pastur law with ratio `gamma`.
//!
//! The law has density `sqrt((b - y)(y - a)) / (2 pi gamma y)` on
//! `[a, b] = [(1 - sqrt(gamma))^2, (1 + sqrt(gamma))^2]` plus an atom of mass
//! `1 - 1/gamma` at zero when `gamma > 1`. Its Stieltjes transform (with the
//! `1/(z - t)` convention, so `Im m < 0` on the upper half-plane) is the root
//! of `gamma z m^2 - (z + gamma - 1) m + 1 = 0` lying in the lower half-plane.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{integrate_adaptive, require_upper_half, ComplexValue};

/// Absolute tolerance for the CDF and moment quadratures.
pub const QUADRATURE_TOL: f64 = 1e-10;

/// Largest moment order the quadrature budget is sized for.
pub const MAX_MOMENT_ORDER: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MpLaw {
    pub gamma: f64,
    pub support_lo: f64,
    pub support_hi: f64,
    pub atom_at_zero: f64,
}

impl MpLaw {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::validation(format!("gamma must be positive, got {gamma}")));
        }
        let s = gamma.sqrt();
        Ok(Self {
            gamma,
            support_lo: (1.0 - s) * (1.0 - s),
            support_hi: (1.0 + s) * (1.0 + s),
            atom_at_zero: (1.0 - 1.0 / gamma).max(0.0),
        })
    }

    fn half_width(&self) -> f64 {
        0.5 * (self.support_hi - self.support_lo)
    }

    /// Density of the absolutely continuous part. Returns 0 at `y = 0` and at
    /// the support endpoints.
    pub fn density(&self, y: f64) -> f64 {
        if y <= 0.0 || y <= self.support_lo || y >= self.support_hi {
            return 0.0;
        }
        let inner = (self.support_hi - y) * (y - self.support_lo);
        inner.max(0.0).sqrt() / (2.0 * std::f64::consts::PI * self.gamma * y)
    }

    /// Density integrand after `y = a + 2r sin^2(theta/2)`, `theta in [0, pi]`.
    ///
    /// `dy = r sin(theta) dtheta` and `sqrt((b-y)(y-a)) = r sin(theta)`, so the
    /// square-root endpoints cancel; for `a = 0` the `1/y` pole cancels too.
    fn theta_integrand(&self, theta: f64, power: i32) -> f64 {
        let r = self.half_width();
        let (s, c) = (0.5 * theta).sin_cos();
        let y = self.support_lo + 2.0 * r * s * s;
        let body = 4.0 * r * r * s * s * c * c / (2.0 * std::f64::consts::PI * self.gamma * y);
        let body = if y == 0.0 {
            // a = 0 and theta = 0: limit of r^2 sin^2(theta) / y is 2r
            2.0 * r / (2.0 * std::f64::consts::PI * self.gamma)
        } else {
            body
        };
        if power == 0 {
            body
        } else {
            body * y.powi(power)
        }
    }

    fn theta_of(&self, x: f64) -> f64 {
        let r = self.half_width();
        let t = ((x - self.support_lo) / (2.0 * r)).clamp(0.0, 1.0);
        2.0 * t.sqrt().asin()
    }

    /// `F(x) = atom * [x >= 0] + integral of the density up to x`.
    pub fn cdf(&self, x: f64) -> f64 {
        let atom = if x >= 0.0 { self.atom_at_zero } else { 0.0 };
        if x <= self.support_lo {
            return atom;
        }
        let upper = self.theta_of(x.min(self.support_hi));
        let mass = integrate_adaptive(|t| self.theta_integrand(t, 0), 0.0, upper, QUADRATURE_TOL);
        (atom + mass).clamp(0.0, 1.0)
    }

    /// Mass of the continuous part, `1 - atom` up to quadrature error.
    pub fn continuous_mass(&self) -> f64 {
        integrate_adaptive(
            |t| self.theta_integrand(t, 0),
            0.0,
            std::f64::consts::PI,
            QUADRATURE_TOL,
        )
    }

    /// `k`-th moment; the atom contributes only to `k = 0`.
    pub fn moment(&self, k: u32) -> Result<f64> {
        if k > MAX_MOMENT_ORDER {
            return Err(Error::validation(format!(
                "moment order {k} exceeds {MAX_MOMENT_ORDER}"
            )));
        }
        if k == 0 {
            return Ok(1.0);
        }
        Ok(integrate_adaptive(
            |t| self.theta_integrand(t, k as i32),
            0.0,
            std::f64::consts::PI,
            QUADRATURE_TOL,
        ))
    }

    /// The root of the defining quadratic with negative imaginary part.
    pub fn stieltjes(&self, z: ComplexValue) -> Result<ComplexValue> {
        require_upper_half(z)?;
        let g = self.gamma;
        let a = g * z;
        let b = -(z + g - 1.0);
        let disc = (b * b - 4.0 * a).sqrt();
        // pick the sign avoiding cancellation in b + sqrt
        let q = if (b.conj() * disc).re >= 0.0 {
            -0.5 * (b + disc)
        } else {
            -0.5 * (b - disc)
        };
        let roots = [q / a, q.inv()];
        let mut lower = roots.iter().filter(|m| m.im < 0.0);
        match (lower.next(), lower.next()) {
            (Some(&m), None) => Ok(m),
            _ => Err(Error::Invariant(format!(
                "expected exactly one root in the lower half-plane at z = {z}, got {roots:?}"
            ))),
        }
    }

    /// `|gamma z m^2 - m (z + gamma - 1) + 1|`.
    pub fn quadratic_residual(&self, z: ComplexValue, m: ComplexValue) -> f64 {
        let g = self.gamma;
        (g * z * m * m - m * (z + g - 1.0) + 1.0).norm()
    }

    /// `|(gamma m - 1)(z m - 1) + m|`, the factored form of the quadratic.
    pub fn factored_residual(&self, z: ComplexValue, m: ComplexValue) -> f64 {
        ((self.gamma * m - 1.0) * (z * m - 1.0) + m).norm()
    }

    /// `|(-1 + z m) - (-1/gamma + 1/(gamma (1 - gamma m)))|`.
    pub fn trace_form_residual(&self, z: ComplexValue, m: ComplexValue) -> f64 {
        let g = self.gamma;
        let lhs = z * m - 1.0;
        let rhs = -1.0 / g + (g * (1.0 - g * m)).inv();
        (lhs - rhs).norm()
    }
}

pub fn mp_density(gamma: f64, y: f64) -> Result<f64> {
    Ok(MpLaw::new(gamma)?.density(y))
}

pub fn mp_cdf(gamma: f64, x: f64) -> Result<f64> {
    Ok(MpLaw::new(gamma)?.cdf(x))
}

pub fn mp_stieltjes(gamma: f64, z: ComplexValue) -> Result<ComplexValue> {
    MpLaw::new(gamma)?.stieltjes(z)
}

pub fn mp_moment(gamma: f64, k: u32) -> Result<f64> {
    MpLaw::new(gamma)?.moment(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{linspace, trapezoid};
    use crate::tensor_model::binomial;

    const GAMMAS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

    /// Narayana-polynomial moments, independent of the quadrature path.
    fn narayana_moment(gamma: f64, k: u32) -> f64 {
        (0..k)
            .map(|j| {
                let nk = binomial(k as u64, j as u64).unwrap() as f64;
                let nk1 = binomial(k as u64 - 1, j as u64).unwrap() as f64;
                gamma.powi(j as i32) * nk * nk1 / (j as f64 + 1.0)
            })
            .sum()
    }

    fn z_grid() -> Vec<ComplexValue> {
        let mut out = Vec::new();
        for re in linspace(-5.0, 10.0, 7) {
            for im in linspace(0.5, 10.0, 7) {
                out.push(ComplexValue::new(re, im));
            }
        }
        out
    }

    #[test]
    fn density_examples() {
        assert!((mp_density(1.0, 2.0).unwrap() - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert_eq!(mp_density(1.0, 5.0).unwrap(), 0.0);
        assert_eq!(mp_density(4.0, 1.0).unwrap(), 0.0);
        assert_eq!(mp_density(1.0, 0.0).unwrap(), 0.0);
        assert_eq!(mp_density(1.0, -1.0).unwrap(), 0.0);
        assert!(mp_density(0.0, 1.0).is_err());
    }

    #[test]
    fn cdf_examples() {
        assert!((mp_cdf(2.0, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(mp_cdf(2.0, -1e-300).unwrap(), 0.0);
        for g in GAMMAS {
            let law = MpLaw::new(g).unwrap();
            assert_eq!(law.cdf(law.support_hi + 1.0), 1.0);
            assert!((law.atom_at_zero + law.continuous_mass() - 1.0).abs() < 1e-8, "gamma {g}");
        }
        assert!((mp_cdf(1.0, 4.0).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn cdf_agrees_with_trapezoid() {
        for g in GAMMAS {
            let law = MpLaw::new(g).unwrap();
            // y = a + u^2 removes the square-root edge at a; for gamma = 1
            // it also absorbs the 1/sqrt(y) pole.
            let umax = (law.support_hi - law.support_lo).sqrt();
            let us = linspace(0.0, umax, 400_001);
            let f: Vec<f64> = us
                .iter()
                .map(|&u| {
                    // continuous extension at u = 0, where density() returns 0 by convention
                    let u = u.max(1e-12);
                    2.0 * u * law.density(law.support_lo + u * u)
                })
                .collect();
            for frac in [0.1, 0.3, 0.5, 0.8, 1.0] {
                let cut = frac * umax;
                let k = us.partition_point(|&u| u <= cut);
                let trap = trapezoid(&us[..k], &f[..k]);
                let x = law.support_lo + us[k - 1] * us[k - 1];
                let cdf = law.cdf(x) - law.atom_at_zero;
                assert!((trap - cdf).abs() < 1e-6, "gamma {g} frac {frac}: {trap} vs {cdf}");
            }
        }
    }

    #[test]
    fn cdf_is_monotone() {
        for g in GAMMAS {
            let law = MpLaw::new(g).unwrap();
            let xs = linspace(-1.0, law.support_hi + 1.0, 300);
            let vals: Vec<f64> = xs.iter().map(|&x| law.cdf(x)).collect();
            assert!(vals.windows(2).all(|w| w[0] <= w[1] + 1e-12));
            assert_eq!(vals[0], 0.0);
            assert!((vals[vals.len() - 1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_match_narayana() {
        for g in GAMMAS {
            for k in 0..=8 {
                let q = mp_moment(g, k).unwrap();
                let exact = if k == 0 { 1.0 } else { narayana_moment(g, k) };
                assert!((q - exact).abs() < 1e-8 * exact.max(1.0), "gamma {g} k {k}: {q} vs {exact}");
            }
        }
        assert!((mp_moment(1.0, 1).unwrap() - 1.0).abs() < 1e-8);
        assert!((mp_moment(1.0, 2).unwrap() - 2.0).abs() < 1e-6);
        assert!(mp_moment(1.0, 13).is_err());
    }

    #[test]
    fn stieltjes_large_z_asymptotic() {
        let z = ComplexValue::new(0.0, 1e6);
        let m = mp_stieltjes(1.0, z).unwrap();
        assert!((z * m - 1.0).norm() < 1e-4);
    }

    #[test]
    fn stieltjes_grid_residuals() {
        for g in GAMMAS {
            let law = MpLaw::new(g).unwrap();
            for z in z_grid() {
                let m = law.stieltjes(z).unwrap();
                assert!(m.im < 0.0);
                assert!(law.quadratic_residual(z, m) < 1e-12, "g {g} z {z}");
                assert!(law.factored_residual(z, m) < 1e-12, "g {g} z {z}");
                assert!(law.trace_form_residual(z, m) < 1e-10, "g {g} z {z}");
            }
        }
        assert!(matches!(
            mp_stieltjes(1.0, ComplexValue::new(1.0, 0.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn stieltjes_inversion_recovers_density() {
        let eta = 1e-4;
        for g in GAMMAS {
            let law = MpLaw::new(g).unwrap();
            let width = law.support_hi - law.support_lo;
            let lo = law.support_lo + 0.05 * width;
            let hi = law.support_hi - 0.05 * width;
            for x in linspace(lo, hi, 50) {
                let m = law.stieltjes(ComplexValue::new(x, eta)).unwrap();
                let approx = -m.im / std::f64::consts::PI;
                assert!((approx - law.density(x)).abs() <= 1e-2, "g {g} x {x}");
            }
        }
    }
}
