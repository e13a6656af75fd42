//! Small numeric building blocks shared by the other modules.

use std::sync::OnceLock;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Complex scalar used for all Stieltjes-transform arithmetic.
pub type ComplexValue = Complex64;

/// Rejects `z` outside the open upper half-plane.
pub fn require_upper_half(z: ComplexValue) -> Result<()> {
    if !(z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::domain(format!("non-finite spectral argument {z}")));
    }
    if z.im <= 0.0 {
        return Err(Error::domain(format!("Im z must be positive, got {z}")));
    }
    Ok(())
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = NeumaierSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<NeumaierSum>().value()
}

/// Compensated sum of complex terms, real and imaginary parts tracked separately.
#[derive(Debug, Clone, Copy, Default)]
pub struct ComplexSum {
    re: NeumaierSum,
    im: NeumaierSum,
}

impl ComplexSum {
    pub fn add(&mut self, z: ComplexValue) {
        self.re.add(z.re);
        self.im.add(z.im);
    }

    pub fn value(&self) -> ComplexValue {
        ComplexValue::new(self.re.value(), self.im.value())
    }
}

/// `ln C(n, k)` by summing logarithms of the multiplicative form.
///
/// Accurate to a few ulps per factor; used where the exact coefficient would
/// overflow and only ratios matter.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    let mut acc = NeumaierSum::new();
    for i in 1..=k {
        acc.add(((n - k + i) as f64).ln() - (i as f64).ln());
    }
    acc.value()
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent 64-bit seed for sub-stream `index` under `tag`.
///
/// Tags separate unrelated uses of the same master seed (trials, columns,
/// instance generators) so their streams never coincide.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(tag)).wrapping_add(index))
}

const GAUSS_POINTS: usize = 20;

struct GaussRule {
    nodes: [f64; GAUSS_POINTS],
    weights: [f64; GAUSS_POINTS],
}

fn gauss_rule() -> &'static GaussRule {
    static RULE: OnceLock<GaussRule> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GAUSS_POINTS;
        let mut nodes = [0.0; GAUSS_POINTS];
        let mut weights = [0.0; GAUSS_POINTS];
        for i in 0..n.div_ceil(2) {
            // Chebyshev-like initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussRule { nodes, weights }
    })
}

fn gauss_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let rule = gauss_rule();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = NeumaierSum::new();
    for (x, w) in rule.nodes.iter().zip(rule.weights.iter()) {
        acc.add(w * f(mid + half * x));
    }
    half * acc.value()
}

/// Adaptive Gauss–Legendre quadrature of `f` over `[a, b]`.
///
/// Each panel uses a 20-point rule and is bisected until the panel estimate
/// and the sum of its halves agree to the local share of `abs_tol`.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let whole = gauss_panel(&f, a, b);
    refine(&f, a, b, whole, abs_tol, 0)
}

fn refine<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let mid = 0.5 * (a + b);
    let left = gauss_panel(f, a, mid);
    let right = gauss_panel(f, mid, b);
    let split = left + right;
    // below this the two estimates differ only by rounding
    let floor = 64.0 * f64::EPSILON * split.abs().max(whole.abs());
    if depth >= 30 || (split - whole).abs() <= tol.max(floor) {
        return split;
    }
    refine(f, a, mid, left, 0.5 * tol, depth + 1) + refine(f, mid, b, right, 0.5 * tol, depth + 1)
}

/// Trapezoid rule over a tabulated function.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "trapezoid: length mismatch");
    let mut acc = NeumaierSum::new();
    for i in 1..xs.len() {
        acc.add(0.5 * (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]));
    }
    acc.value()
}

/// `steps` equally spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let h = (hi - lo) / (steps - 1) as f64;
            (0..steps)
                .map(|i| if i + 1 == steps { hi } else { lo + h * i as f64 })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_rule_integrates_polynomials_exactly() {
        // degree 39 is the limit of a 20-point rule
        let v = integrate_adaptive(|x| x.powi(38), -1.0, 1.0, 1e-14);
        assert!((v - 2.0 / 39.0).abs() < 1e-14);
        let w: f64 = gauss_rule().weights.iter().sum();
        assert!((w - 2.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_sqrt_endpoint() {
        let v = integrate_adaptive(|x| x.sqrt(), 0.0, 1.0, 1e-12);
        assert!((v - 2.0 / 3.0).abs() < 1e-11);
    }

    #[test]
    fn neumaier_recovers_cancelled_terms() {
        let s = compensated_sum([1e16, 1.0, -1e16]);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn ln_binomial_matches_exact() {
        assert!((ln_binomial(30, 15) - (155_117_520f64).ln()).abs() < 1e-12);
        assert_eq!(ln_binomial(5, 0), 0.0);
        assert_eq!(ln_binomial(3, 4), f64::NEG_INFINITY);
    }

    #[test]
    fn derived_seeds_differ_by_index_and_tag() {
        let a = derive_seed(7, 1, 0);
        assert_ne!(a, derive_seed(7, 1, 1));
        assert_ne!(a, derive_seed(7, 2, 0));
        assert_eq!(a, derive_seed(7, 1, 0));
    }

    #[test]
    fn upper_half_guard() {
        assert!(require_upper_half(ComplexValue::new(1.0, 1e-300)).is_ok());
        assert!(matches!(
            require_upper_half(ComplexValue::new(1.0, 0.0)),
            Err(Error::Domain(_))
        ));
    }
}
