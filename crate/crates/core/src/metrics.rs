//! Distances and summaries of empirical spectra.

use serde::Serialize;

use crate::eigensolve::EmpiricalSpectrum;
use crate::error::{Error, Result};
use crate::general_mp::LimitCdf;
use crate::mp_law::MpLaw;
use crate::numeric::NeumaierSum;

/// A distribution function, with its left limit where it has atoms.
pub trait ReferenceCdf {
    fn cdf(&self, x: f64) -> f64;

    fn cdf_left(&self, x: f64) -> f64 {
        self.cdf(x)
    }
}

impl<F: Fn(f64) -> f64> ReferenceCdf for F {
    fn cdf(&self, x: f64) -> f64 {
        self(x)
    }
}

impl ReferenceCdf for MpLaw {
    fn cdf(&self, x: f64) -> f64 {
        MpLaw::cdf(self, x)
    }

    fn cdf_left(&self, x: f64) -> f64 {
        if x == 0.0 {
            MpLaw::cdf(self, 0.0) - self.atom_at_zero
        } else {
            MpLaw::cdf(self, x)
        }
    }
}

impl ReferenceCdf for LimitCdf {
    fn cdf(&self, x: f64) -> f64 {
        LimitCdf::cdf(self, x)
    }

    fn cdf_left(&self, x: f64) -> f64 {
        if x == 0.0 {
            LimitCdf::cdf(self, 0.0) - self.atom()
        } else {
            LimitCdf::cdf(self, x)
        }
    }
}

impl ReferenceCdf for EmpiricalSpectrum {
    fn cdf(&self, x: f64) -> f64 {
        EmpiricalSpectrum::cdf(self, x)
    }

    fn cdf_left(&self, x: f64) -> f64 {
        EmpiricalSpectrum::cdf_left(self, x)
    }
}

/// Kolmogorov–Smirnov distance between the spectrum's step CDF and `reference`.
///
/// Both one-sided limits are compared at every jump point, which is exact
/// when the reference is continuous away from those points.
pub fn ks_distance<R: ReferenceCdf + ?Sized>(spec: &EmpiricalSpectrum, reference: &R) -> f64 {
    let values = spec.eigenvalues();
    let n = values.len() as f64;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < values.len() {
        let lam = values[i];
        let mut j = i;
        while j < values.len() && values[j] == lam {
            j += 1;
        }
        let below = i as f64 / n;
        let at = j as f64 / n;
        worst = worst
            .max((at - reference.cdf(lam)).abs())
            .max((below - reference.cdf_left(lam)).abs());
        i = j;
    }
    worst.min(1.0)
}

pub const MAX_SPECTRAL_MOMENT: u32 = 12;

/// `(1/N) sum_j λ_j^k`.
pub fn spectral_moment(spec: &EmpiricalSpectrum, k: u32) -> Result<f64> {
    if k > MAX_SPECTRAL_MOMENT {
        return Err(Error::validation(format!(
            "moment order {k} exceeds {MAX_SPECTRAL_MOMENT}"
        )));
    }
    let acc: NeumaierSum = spec.eigenvalues().iter().map(|v| v.powi(k as i32)).collect();
    Ok(acc.value() / spec.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// `count / (N * width)`.
    pub densities: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }
}

/// Default histogram range: `[min, max]` widened by 1% of its width on each side.
pub fn padded_range(lo: f64, hi: f64) -> (f64, f64) {
    let width = hi - lo;
    let pad = if width > 0.0 {
        0.01 * width
    } else {
        0.01 * lo.abs().max(1.0)
    };
    (lo - pad, hi + pad)
}

/// Equal-width bins, left-closed except the last, which is closed.
/// Values outside `range` are not counted.
pub fn histogram(
    spec: &EmpiricalSpectrum,
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::validation("histogram needs at least one bin"));
    }
    let (lo, hi) = range.unwrap_or_else(|| padded_range(spec.min(), spec.max()));
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::validation(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0u64; bins];
    for &v in spec.eigenvalues() {
        if v < lo || v > hi {
            continue;
        }
        // the computed index can be off by one near an edge; settle it against the edges
        let mut b = (((v - lo) / width) as usize).min(bins - 1);
        while b > 0 && v < edges[b] {
            b -= 1;
        }
        while b + 1 < bins && v >= edges[b + 1] {
            b += 1;
        }
        counts[b] += 1;
    }
    let total = spec.len() as f64;
    let densities = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, e)| c as f64 / (total * (e[1] - e[0])))
        .collect();
    Ok(Histogram {
        edges,
        counts,
        densities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(v: &[f64]) -> EmpiricalSpectrum {
        EmpiricalSpectrum::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ks_examples() {
        let s = spec(&[0.3, 1.0, 1.0, 2.5]);
        assert_eq!(ks_distance(&s, &s), 0.0);
        let mp = MpLaw::new(1.0).unwrap();
        assert_eq!(ks_distance(&spec(&[0.0]), &mp), 1.0);
        // a uniform reference against a two-point spectrum
        let u = |x: f64| x.clamp(0.0, 1.0);
        let d = ks_distance(&spec(&[0.25, 0.75]), &u);
        assert!((d - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ks_respects_the_zero_atom() {
        // half the mass at zero and half spread over (0, 1]
        let law = |x: f64| if x < 0.0 { 0.0 } else { 0.5 + 0.5 * x.min(1.0) };
        struct Atom<F>(F);
        impl<F: Fn(f64) -> f64> ReferenceCdf for Atom<F> {
            fn cdf(&self, x: f64) -> f64 {
                (self.0)(x)
            }
            fn cdf_left(&self, x: f64) -> f64 {
                if x == 0.0 { 0.0 } else { (self.0)(x) }
            }
        }
        let s = spec(&[0.0, 0.0, 0.25, 0.75]);
        let d = ks_distance(&s, &Atom(law));
        assert!((d - 0.125).abs() < 1e-15, "{d}");
        let mp = MpLaw::new(2.0).unwrap();
        assert_eq!(ReferenceCdf::cdf_left(&mp, 0.0), 0.0);
        assert_eq!(ReferenceCdf::cdf(&mp, 0.0), 0.5);
    }

    #[test]
    fn moment_examples() {
        let s = spec(&[0.5, 1.5, 2.0]);
        assert_eq!(spectral_moment(&s, 0).unwrap(), 1.0);
        assert!((spectral_moment(&s, 2).unwrap() - (0.25 + 2.25 + 4.0) / 3.0).abs() < 1e-15);
        assert!(spectral_moment(&s, 13).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&spec(&[0.0, 1.0, 2.0, 3.0]), 2, Some((0.0, 4.0))).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.edges, vec![0.0, 2.0, 4.0]);
        let h = histogram(&spec(&[0.0, 1.0, 2.0, 4.0]), 2, Some((0.0, 4.0))).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        let h = histogram(&spec(&[1.5; 5]), 7, None).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
        assert!(histogram(&spec(&[1.0]), 0, None).is_err());
        assert!(histogram(&spec(&[1.0]), 3, Some((2.0, 1.0))).is_err());
    }

    fn values() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..20.0, 1..60)
    }

    proptest! {
        #[test]
        fn ks_invariant_under_duplication(v in values(), copies in 2usize..5) {
            let mp = MpLaw::new(0.5).unwrap();
            let padded: Vec<f64> = v.iter().flat_map(|&x| std::iter::repeat_n(x, copies)).collect();
            let a = ks_distance(&spec(&v), &mp);
            let b = ks_distance(&spec(&padded), &mp);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn histogram_conserves_mass(v in values(), bins in 1usize..40) {
            let h = histogram(&spec(&v), bins, None).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<u64>(), v.len() as u64);
            let mass: f64 = h.densities.iter().zip(h.edges.windows(2)).map(|(d, e)| d * (e[1] - e[0])).sum();
            prop_assert!((mass - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ks_is_bounded_by_sup_over_fine_grid(v in values()) {
            let s = spec(&v);
            let mp = MpLaw::new(1.0).unwrap();
            let d = ks_distance(&s, &mp);
            for i in 0..=400 {
                let x = -6.0 + 0.07 * i as f64;
                prop_assert!((s.cdf(x) - mp.cdf(x)).abs() <= d + 1e-12);
            }
        }
    }
}
