//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed; exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rtp_lab::experiments::{self, sample_spectrum, Experiment, ExperimentConfig, Reference};
use rtp_lab::general_mp::{
    density_from_stieltjes, ie_map, solve_grid, DiscreteMeasure, SolveOptions,
};
use rtp_lab::identities::{run_suite, InstanceRanges, SUITE_TOLERANCE};
use rtp_lab::metrics::ks_distance;
use rtp_lab::moments::{
    c_moment, c_moment_bound, exact_norm_variance, shared_degrees, tensor_moment,
    tensor_moment_bound, VarianceReport,
};
use rtp_lab::mp_law::{mp_stieltjes, MpLaw};
use rtp_lab::numeric::{derive_seed, linspace, trapezoid};
use rtp_lab::tensor_model::{ModelParams, MomentModel, SubsetIndex, DEFAULT_MAX_ENTRIES};
use rtp_lab::ComplexValue;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:.2?}, limit {limit:?}"))
}

/// All `d`-subsets of `{1..n}` in lexicographic order.
fn subsets(n: usize, d: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, d: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == d {
            out.push(cur.clone());
            return;
        }
        for r in start..=n {
            cur.push(r);
            rec(r + 1, n, d, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(1, n, d, &mut Vec::new(), &mut out);
    out
}

/// `E[x^{2k}]`: 1 for Rademacher, `(2k-1)!!` for Gaussian.
fn even_moment(model: &MomentModel, k: u32) -> f64 {
    match model {
        MomentModel::Rademacher => 1.0,
        MomentModel::Gaussian => (1..=k).map(|i| (2 * i - 1) as f64).product(),
        other => panic!("no oracle for {other:?}"),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_mass: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    for gamma in [0.5, 1.0, 2.0, 4.0] {
        let law = MpLaw::new(gamma).map_err(|e| e.to_string())?;
        worst_mass = worst_mass.max((law.atom_at_zero + law.continuous_mass() - 1.0).abs());
        for re in linspace(-1.0, 8.0, 7) {
            for im in linspace(0.5, 10.0, 7) {
                let z = ComplexValue::new(re, im);
                let m = law.stieltjes(z).map_err(|e| e.to_string())?;
                worst_residual = worst_residual.max(law.quadratic_residual(z, m));
            }
        }
    }
    ensure(worst_mass < 1e-8, format!("mass error {worst_mass:e}"))?;
    ensure(worst_residual < 1e-12, format!("residual {worst_residual:e}"))?;
    within_time(start, Duration::from_secs(1))?;
    Ok(format!(
        "mass error {worst_mass:.1e}, max residual {worst_residual:.1e}, {:.2?}",
        start.elapsed()
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let ranges = InstanceRanges::default();
    let mut total = 0;
    let mut skipped = 0;
    let mut worst: f64 = 0.0;
    for (seed, model) in [(2024, MomentModel::Rademacher), (2025, MomentModel::Gaussian)] {
        let reports = run_suite(seed, 200, &model, &ranges).map_err(|e| e.to_string())?;
        for r in &reports {
            total += 1;
            if r.skipped.is_some() {
                skipped += 1;
                continue;
            }
            ensure(!r.bound_violated(), format!("{} bound violated: {:?}", r.name, r.instance_digest))?;
            ensure(
                r.passes(SUITE_TOLERANCE),
                format!("{} residual {:e}: {:?}", r.name, r.residual, r.instance_digest),
            )?;
            worst = worst.max(r.residual);
        }
    }
    within_time(start, Duration::from_secs(30))?;
    Ok(format!(
        "{total} reports ({skipped} skipped), max residual {worst:.1e}, {:.2?}",
        start.elapsed()
    ))
}

/// `Var ||Z_0||^2 = sum_{S,T} (E[x_S^2 x_T^2] - 1)`, with `E[...] = B^{|S ∩ T|}`.
fn variance_by_pairs(n: usize, d: usize, b: f64) -> f64 {
    let all = subsets(n, d);
    let mut total = 0.0;
    for s in &all {
        for t in &all {
            let shared = s.iter().filter(|r| t.contains(r)).count();
            total += b.powi(shared as i32) - 1.0;
        }
    }
    total
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut cases = 0;
    for n in 1..=10 {
        for d in 1..=n.min(3) {
            for b in [1.0, 3.0] {
                let exact = exact_norm_variance(n, d, b).map_err(|e| e.to_string())?;
                let oracle = variance_by_pairs(n, d, b);
                ensure(exact == oracle, format!("n={n} d={d} B={b}: {exact} vs {oracle}"))?;
                cases += 1;
            }
        }
    }

    let (n, trials) = (12, 200_000);
    let exact = exact_norm_variance(n, 2, 3.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let ys: Vec<f64> = (0..trials)
        .map(|_| {
            let sq: Vec<f64> = (0..n)
                .map(|_| {
                    let x: f64 = rng.sample(StandardNormal);
                    x * x
                })
                .collect();
            let s: f64 = sq.iter().sum();
            let s2: f64 = sq.iter().map(|v| v * v).sum();
            0.5 * (s * s - s2)
        })
        .collect();
    let t = trials as f64;
    let mean = ys.iter().sum::<f64>() / t;
    let m2 = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / t;
    let m4 = ys.iter().map(|y| (y - mean).powi(4)).sum::<f64>() / t;
    let estimate = m2 * t / (t - 1.0);
    let stderr = ((m4 - m2 * m2) / t).sqrt();
    let z = (estimate - exact) / stderr;
    ensure(z.abs() <= 3.0, format!("MC {estimate:.3} ± {stderr:.3} vs exact {exact}"))?;
    within_time(start, Duration::from_secs(60))?;
    Ok(format!(
        "{cases} exact matches; MC {estimate:.2} vs {exact} ({z:+.2} se), {:.2?}",
        start.elapsed()
    ))
}

fn criterion_4() -> Outcome {
    let mut rows = 0;
    let mut checked = 0;
    for n in experiments::VARIANCE_GRID_N {
        for d in 1..=n.min(16) {
            for b in experiments::VARIANCE_GRID_B {
                let r = VarianceReport::compute(n, d, b).map_err(|e| e.to_string())?;
                rows += 1;
                let slack = 1e-12 * r.exact.abs();
                if let Some(lo) = r.lower_bound {
                    checked += 1;
                    ensure(lo <= r.exact + slack, format!("lower bound {lo} > {} at n={n} d={d} B={b}", r.exact))?;
                }
                if let Some(hi) = r.upper_bound {
                    checked += 1;
                    ensure(r.exact <= hi + slack, format!("upper bound {hi} < {} at n={n} d={d} B={b}", r.exact))?;
                }
                if let Some(lo) = r.lower_bound_large_d {
                    checked += 1;
                    ensure(
                        lo <= r.ratio * (1.0 + 1e-12),
                        format!("large-d bound {lo} > {} at n={n} d={d} B={b}", r.ratio),
                    )?;
                }
            }
        }
    }
    Ok(format!("{rows} grid rows, {checked} applicable comparisons, 0 violations"))
}

fn c_moment_oracle(n: usize, d_list: &[usize], model: &MomentModel) -> f64 {
    let families: Vec<Vec<Vec<usize>>> = d_list.iter().map(|&d| subsets(n, d)).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut idx = vec![0usize; d_list.len()];
    loop {
        let mut g = vec![0u32; n + 1];
        for (f, &i) in families.iter().zip(&idx) {
            for &r in &f[i] {
                g[r] += 1;
            }
        }
        total += g.iter().map(|&k| even_moment(model, k)).product::<f64>();
        count += 1;
        let mut j = 0;
        loop {
            if j == idx.len() {
                return total / count as f64;
            }
            idx[j] += 1;
            if idx[j] < families[j].len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

fn criterion_5() -> Outcome {
    let mut cases = 0;
    let mut bounded = 0;
    for model in [MomentModel::Rademacher, MomentModel::Gaussian] {
        for n in 1..=8 {
            let ds: Vec<Vec<usize>> = (1..=n.min(3))
                .flat_map(|a| std::iter::once(vec![a]).chain((1..=n.min(3)).map(move |b| vec![a, b])))
                .collect();
            for d_list in ds {
                let got = c_moment(d_list.len(), n, &d_list, &model).map_err(|e| e.to_string())?;
                let want = c_moment_oracle(n, &d_list, &model);
                ensure(got == want, format!("{model} n={n} d={d_list:?}: {got} vs {want}"))?;
                let bound = c_moment_bound(d_list.len(), n, &d_list, model.moment_constant())
                    .map_err(|e| e.to_string())?;
                if bound.applicable {
                    bounded += 1;
                    ensure(got <= bound.bound, format!("{model} n={n} d={d_list:?}: {got} > {}", bound.bound))?;
                }
                cases += 1;
            }
        }
    }

    // the bound first applies at s <= sqrt(n) / (3 C e), beyond the exhaustive grid
    for model in [MomentModel::Rademacher, MomentModel::Gaussian] {
        for (n, d_list) in [(300, vec![1, 1]), (400, vec![1, 1]), (400, vec![2])] {
            let got = c_moment(d_list.len(), n, &d_list, &model).map_err(|e| e.to_string())?;
            let want = c_moment_oracle(n, &d_list, &model);
            ensure((got - want).abs() <= 1e-12 * want, format!("{model} n={n} d={d_list:?}: {got} vs {want}"))?;
            let bound = c_moment_bound(d_list.len(), n, &d_list, model.moment_constant())
                .map_err(|e| e.to_string())?;
            if bound.applicable {
                bounded += 1;
                ensure(got <= bound.bound, format!("{model} n={n} d={d_list:?}: {got} > {}", bound.bound))?;
            }
        }
    }

    let gauss = MomentModel::Gaussian;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    for _ in 0..1000 {
        let n = rng.random_range(1..=8usize);
        let d = rng.random_range(1..=n.min(3));
        let m = rng.random_range(1..=3usize);
        let all = subsets(n, d);
        let tuple: Vec<Vec<usize>> = (0..2 * m).map(|_| all[rng.random_range(0..all.len())].clone()).collect();
        let mut g = vec![0u32; n + 1];
        for s in &tuple {
            for &r in s {
                g[r] += 1;
            }
        }
        let value: f64 = g
            .iter()
            .map(|&k| if k % 2 == 1 { 0.0 } else { even_moment(&gauss, k / 2) })
            .product();
        let shdeg: usize = (0..2 * m)
            .map(|v| {
                tuple[v]
                    .iter()
                    .filter(|r| (0..2 * m).any(|w| w != v && w != (v ^ 1) && tuple[w].contains(r)))
                    .count()
            })
            .sum();
        let oracle_bound = even_moment(&gauss, m as u32).powf(0.5 * shdeg as f64);
        ensure(value <= oracle_bound, format!("tuple {tuple:?}: {value} > {oracle_bound}"))?;

        let indices: Vec<SubsetIndex> = tuple
            .iter()
            .map(|s| SubsetIndex::new(s.clone()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let got = tensor_moment(&gauss, &indices).map_err(|e| e.to_string())?;
        let profile = shared_degrees(&indices).map_err(|e| e.to_string())?;
        ensure(got == value && profile.total() == shdeg, format!("tuple {tuple:?}: library disagrees"))?;
        let bound = tensor_moment_bound(&gauss, &profile);
        ensure((bound - oracle_bound).abs() <= 1e-12 * oracle_bound, format!("tuple {tuple:?}: bound {bound}"))?;
    }
    ensure(bounded > 0, "no applicable bound cell")?;
    Ok(format!("{cases} exact c_moment matches, {bounded} applicable cells within bound; 1000 tuples within bound"))
}

fn mean_ks(n: usize, d: usize, seeds: u64, population: Option<&[f64]>) -> Result<Vec<f64>, String> {
    let params = ModelParams::with_gamma(n, d, 1.0).map_err(|e| e.to_string())?;
    let diagonal: Option<Vec<f64>> = population.map(|list| {
        let block = params.big_n / list.len();
        list.iter().flat_map(|&t| std::iter::repeat_n(t, block)).collect()
    });
    let reference = Reference::for_population(params.gamma_n, diagonal.as_deref(), 1e-3)
        .map_err(|e| e.to_string())?;
    (0..seeds)
        .map(|s| {
            let seed = derive_seed(0xACC, n as u64, s);
            let spec = sample_spectrum(&params, &MomentModel::Rademacher, seed, diagonal.as_deref(), DEFAULT_MAX_ENTRIES)
                .map_err(|e| e.to_string())?;
            Ok(ks_distance(&spec, &reference))
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut means = Vec::new();
    for n in [16, 20, 24] {
        let ks = mean_ks(n, 2, 5, None)?;
        means.push(ks.iter().sum::<f64>() / ks.len() as f64);
    }
    ensure(
        means.windows(2).all(|w| w[1] <= w[0]),
        format!("mean KS not non-increasing: {means:?}"),
    )?;
    ensure(means[2] <= 0.10, format!("mean KS at n=24 is {}", means[2]))?;
    within_time(start, Duration::from_secs(120))?;
    Ok(format!(
        "mean KS n=16,20,24: {:.4}, {:.4}, {:.4}, {:.2?}",
        means[0], means[1], means[2], start.elapsed()
    ))
}

fn criterion_7() -> Outcome {
    let opts = SolveOptions::default();
    let grid = linspace(0.1, 3.9, 77);
    let eta = 1e-3;
    let dirac = DiscreteMeasure::dirac(1.0).map_err(|e| e.to_string())?;
    let mut worst_iso: f64 = 0.0;
    for (x, r) in grid.iter().zip(solve_grid(&dirac, 1.0, &grid, eta, &opts).map_err(|e| e.to_string())?) {
        let z = ComplexValue::new(*x, eta);
        let m = r.map_err(|e| format!("x={x}: {e}"))?.m;
        let exact = mp_stieltjes(1.0, z).map_err(|e| e.to_string())?;
        worst_iso = worst_iso.max((m - exact).norm());
    }
    ensure(worst_iso <= 1e-9, format!("isotropic mismatch {worst_iso:e}"))?;

    let two = DiscreteMeasure::new(vec![1.0, 4.0], vec![0.5, 0.5]).map_err(|e| e.to_string())?;
    let wide = linspace(-0.5, 20.0, 4001);
    let mut worst_self: f64 = 0.0;
    for (x, r) in wide.iter().zip(solve_grid(&two, 1.0, &wide, eta, &opts).map_err(|e| e.to_string())?) {
        let z = ComplexValue::new(*x, eta);
        let m = r.map_err(|e| format!("x={x}: {e}"))?.m;
        let image = ie_map(&two, 1.0, z, m).map_err(|e| e.to_string())?;
        worst_self = worst_self.max((image - m).norm());
    }
    ensure(worst_self < 1e-10, format!("self-residual {worst_self:e}"))?;
    let curve = density_from_stieltjes(&two, 1.0, &wide, eta).map_err(|e| e.to_string())?;
    let mass = trapezoid(&curve.x, &curve.density);
    ensure((mass - 1.0).abs() <= 5e-2, format!("density mass {mass}"))?;

    let ks = mean_ks(20, 2, 5, Some(&[1.0, 4.0]))?;
    let worst_ks = ks.iter().cloned().fold(0.0, f64::max);
    ensure(worst_ks <= 0.12, format!("anisotropic KS per seed {ks:?}"))?;
    Ok(format!(
        "isotropic |Δm| {worst_iso:.1e}, self-residual {worst_self:.1e}, mass {mass:.4}, max KS {worst_ks:.4}"
    ))
}

fn criterion_8() -> Outcome {
    let base = ExperimentConfig {
        seed: Some(31),
        trials: Some(3),
        ..ExperimentConfig::default()
    };
    let configs = [
        (Experiment::Esd, ExperimentConfig { n: Some(12), d: vec![2], gamma: Some(1.0), ..base.clone() }),
        (
            Experiment::Esd,
            ExperimentConfig { n: Some(8), d: vec![2], gamma: Some(0.5), population: Some(vec![1.0, 4.0]), ..base.clone() },
        ),
        (Experiment::ThresholdScan, ExperimentConfig { n: Some(16), d: vec![1, 2], gamma: Some(1.0), ..base.clone() }),
        (Experiment::VarianceCheck, ExperimentConfig { n: Some(8), trials: Some(2000), ..base.clone() }),
        (Experiment::MomentsCheck, ExperimentConfig { trials: Some(100), ..base.clone() }),
        (Experiment::IdentitySuite, ExperimentConfig { trials: Some(20), ..base.clone() }),
        (Experiment::Fixpoint, ExperimentConfig { gamma: Some(2.0), population: Some(vec![1.0, 4.0]), ..base.clone() }),
    ];
    let mut files = 0;
    for (experiment, cfg) in &configs {
        let a = experiments::run(*experiment, cfg).map_err(|e| e.to_string())?;
        let b = experiments::run(*experiment, cfg).map_err(|e| e.to_string())?;
        ensure(a.artifacts == b.artifacts, format!("{} differs between runs", experiment.name()))?;
        files += a.artifacts.len();
    }
    Ok(format!("{} experiments, {files} files byte-identical", configs.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 MP law consistency", criterion_1),
        ("2 identity suite", criterion_2),
        ("3 exact variance vs oracles", criterion_3),
        ("4 variance bound sandwich", criterion_4),
        ("5 tensor-moment oracle", criterion_5),
        ("6 weak convergence at desk scale", criterion_6),
        ("7 fixed-point solver", criterion_7),
        ("8 determinism", criterion_8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
