//! Batch experiments behind the `rtp-lab` command line.
//!
//! Every experiment takes a resolved [`ExperimentConfig`] and returns its
//! output files in memory, so runs can be compared or written atomically.
//! Sampling is keyed by `(seed, stream, index)` and parallel work is collected
//! in index order, which makes reruns byte-identical.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigensolve::EmpiricalSpectrum;
use crate::error::{Error, Result};
use crate::general_mp::{esd_of_population, solve_grid, DiscreteMeasure, LimitCdf, SolveOptions};
use crate::identities::{run_suite, InstanceRanges, SUITE_TOLERANCE};
use crate::metrics::{histogram, ks_distance, padded_range, spectral_moment, ReferenceCdf};
use crate::moments::{
    c_moment, c_moment_bound, mc_norm_variance, norm_variance_ratio, shared_degrees,
    tensor_moment, tensor_moment_bound, VarianceReport,
};
use crate::mp_law::{mp_stieltjes, MpLaw};
use crate::numeric::{derive_seed, linspace};
use crate::tensor_model::{
    apply_population_sqrt, binomial, sample_matrix, ModelParams, MomentModel, PopulationBasis,
    SubsetIndex, DEFAULT_MAX_ENTRIES,
};
use crate::ARTIFACT_VERSION;

const ESD_STREAM: u64 = 0xE5D;
const SCAN_STREAM: u64 = 0x5CA4;
const MC_STREAM: u64 = 0x3C;
const TUPLE_STREAM: u64 = 0x7491E;

/// Share of grid points allowed to fail before `fixpoint` reports non-convergence.
pub const FIXPOINT_FAILURE_QUOTA: f64 = 0.01;

/// Grid on which limit CDFs for anisotropic populations are tabulated.
const LIMIT_CDF_STEPS: usize = 4001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Esd,
    ThresholdScan,
    VarianceCheck,
    MomentsCheck,
    IdentitySuite,
    Fixpoint,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Esd => "esd",
            Experiment::ThresholdScan => "threshold-scan",
            Experiment::VarianceCheck => "variance-check",
            Experiment::MomentsCheck => "moments-check",
            Experiment::IdentitySuite => "identity-suite",
            Experiment::Fixpoint => "fixpoint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::validation(format!("unknown format {other:?} (csv | json)"))),
        }
    }
}

/// `lo:hi:steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        linspace(self.lo, self.hi, self.steps)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation(format!("grid must be lo:hi:steps, got {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, steps] = parts.as_slice() else {
            return Err(bad());
        };
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        let steps: usize = steps.trim().parse().map_err(|_| bad())?;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) || steps < 2 {
            return Err(Error::validation(format!(
                "grid needs finite lo < hi and at least 2 steps, got {s:?}"
            )));
        }
        Ok(Self { lo, hi, steps })
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lo, self.hi, self.steps)
    }
}

mod as_string {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<T: Display, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => s.collect_str(v),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, T, D>(d: D) -> Result<Option<T>, D::Error>
        where
            T: FromStr,
            T::Err: Display,
            D: Deserializer<'de>,
        {
            match Option::<String>::deserialize(d)? {
                Some(raw) => raw.parse().map(Some).map_err(serde::de::Error::custom),
                None => Ok(None),
            }
        }
    }
}

/// Parameters shared by all experiments. Unused fields are ignored by each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: Option<usize>,
    pub d: Vec<usize>,
    pub p: Option<usize>,
    pub gamma: Option<f64>,
    #[serde(with = "as_string")]
    pub dist: MomentModel,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub z_im_floor: f64,
    #[serde(with = "as_string::option")]
    pub grid: Option<GridSpec>,
    pub eta: f64,
    pub bins: usize,
    pub population: Option<Vec<f64>>,
    pub format: OutputFormat,
    pub max_entries: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: None,
            d: Vec::new(),
            p: None,
            gamma: None,
            dist: MomentModel::Rademacher,
            trials: None,
            seed: None,
            z_im_floor: 1.0,
            grid: None,
            eta: 1e-3,
            bins: 40,
            population: None,
            format: OutputFormat::Csv,
            max_entries: DEFAULT_MAX_ENTRIES,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::validation(format!("config file: {e}")))
    }

    fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::validation("this experiment samples and needs --seed"))
    }

    fn n(&self) -> Result<usize> {
        self.n.ok_or_else(|| Error::validation("--n is required"))
    }

    fn trials(&self, default: usize) -> Result<usize> {
        match self.trials.unwrap_or(default) {
            0 => Err(Error::validation("trials must be at least 1")),
            t => Ok(t),
        }
    }

    fn single_d(&self) -> Result<usize> {
        match self.d.as_slice() {
            [d] => Ok(*d),
            [] => Err(Error::validation("--d is required")),
            _ => Err(Error::validation("this experiment takes a single --d")),
        }
    }

    /// `p` directly, or `round(N / gamma)`.
    fn params(&self, n: usize, d: usize) -> Result<ModelParams> {
        match (self.p, self.gamma) {
            (Some(p), None) => ModelParams::new(n, d, p),
            (None, Some(g)) => ModelParams::with_gamma(n, d, g),
            (Some(_), Some(_)) => Err(Error::validation("give either --p or --gamma, not both")),
            (None, None) => Err(Error::validation("one of --p or --gamma is required")),
        }
    }

    /// Full diagonal of `T`: the population list, each entry repeated in a
    /// contiguous block of `N / len` rows.
    fn population_diagonal(&self, big_n: usize) -> Result<Option<Vec<f64>>> {
        let Some(list) = &self.population else {
            return Ok(None);
        };
        if list.is_empty() || !big_n.is_multiple_of(list.len()) {
            return Err(Error::validation(format!(
                "population of length {} does not tile N = {big_n}",
                list.len()
            )));
        }
        if list.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::validation("population eigenvalues must be nonnegative"));
        }
        let block = big_n / list.len();
        Ok(Some(list.iter().flat_map(|&t| std::iter::repeat_n(t, block)).collect()))
    }
}

/// One output file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    BoundViolation(String),
    NonConvergence(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub artifacts: Vec<Artifact>,
    pub warnings: Vec<String>,
    pub verdict: Verdict,
}

impl RunOutcome {
    fn ok(artifacts: Vec<Artifact>, warnings: Vec<String>) -> Self {
        Self {
            artifacts,
            warnings,
            verdict: Verdict::Ok,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.verdict {
            Verdict::Ok => 0,
            Verdict::BoundViolation(_) => 2,
            Verdict::NonConvergence(_) => 3,
        }
    }

    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for a in &self.artifacts {
            std::fs::write(dir.join(&a.name), &a.contents)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    artifact_version: &'static str,
    experiment: &'static str,
    config: &'a ExperimentConfig,
    #[serde(flatten)]
    body: T,
}

fn json_artifact<T: Serialize>(
    name: String,
    experiment: Experiment,
    cfg: &ExperimentConfig,
    body: T,
) -> Result<Artifact> {
    let envelope = Envelope {
        artifact_version: ARTIFACT_VERSION,
        experiment: experiment.name(),
        config: cfg,
        body,
    };
    let mut contents = serde_json::to_string_pretty(&envelope)
        .map_err(|e| Error::Numeric(format!("serializing {name}: {e}")))?;
    contents.push('\n');
    Ok(Artifact { name, contents })
}

#[derive(Serialize)]
struct Rows<'a, T> {
    rows: &'a [T],
}

/// A table as `<stem>.csv` or as `<stem>.json` with a config envelope.
fn table<T: Serialize>(
    stem: &str,
    rows: &[T],
    experiment: Experiment,
    cfg: &ExperimentConfig,
) -> Result<Artifact> {
    match cfg.format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r)
                    .map_err(|e| Error::Numeric(format!("writing {stem}.csv: {e}")))?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::Numeric(format!("writing {stem}.csv: {e}")))?;
            Ok(Artifact {
                name: format!("{stem}.csv"),
                contents: String::from_utf8(bytes).expect("csv output is UTF-8"),
            })
        }
        OutputFormat::Json => json_artifact(format!("{stem}.json"), experiment, cfg, Rows { rows }),
    }
}

pub fn run(experiment: Experiment, cfg: &ExperimentConfig) -> Result<RunOutcome> {
    match experiment {
        Experiment::Esd => run_esd(cfg),
        Experiment::ThresholdScan => run_threshold_scan(cfg),
        Experiment::VarianceCheck => run_variance_check(cfg),
        Experiment::MomentsCheck => run_moments_check(cfg),
        Experiment::IdentitySuite => run_identity_suite(cfg),
        Experiment::Fixpoint => run_fixpoint(cfg),
    }
}

/// Reference law for a sampled spectrum.
pub enum Reference {
    Mp(MpLaw),
    FixedPoint(LimitCdf),
}

impl Reference {
    /// Marchenko–Pastur for identity populations, otherwise the fixed-point limit.
    pub fn for_population(gamma: f64, diagonal: Option<&[f64]>, eta: f64) -> Result<Self> {
        match diagonal {
            None => Ok(Reference::Mp(MpLaw::new(gamma)?)),
            Some(t) => {
                let h = esd_of_population(t)?;
                let hi = h.max_atom() * (1.0 + gamma.sqrt()).powi(2) * 1.2 + 1.0;
                let grid = linspace(-0.05 * hi, hi, LIMIT_CDF_STEPS);
                Ok(Reference::FixedPoint(LimitCdf::build(&h, gamma, &grid, eta)?))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Reference::Mp(_) => "marchenko_pastur",
            Reference::FixedPoint(_) => "fixed_point",
        }
    }

    /// Interval that holds the reference's support.
    fn span(&self) -> (f64, f64) {
        match self {
            Reference::Mp(law) => {
                let lo = if law.atom_at_zero > 0.0 { 0.0 } else { law.support_lo };
                (lo, law.support_hi)
            }
            Reference::FixedPoint(cdf) => {
                let (lo, hi) = cdf.bulk_span();
                (lo.max(0.0), hi)
            }
        }
    }
}

impl ReferenceCdf for Reference {
    fn cdf(&self, x: f64) -> f64 {
        match self {
            Reference::Mp(l) => ReferenceCdf::cdf(l, x),
            Reference::FixedPoint(c) => ReferenceCdf::cdf(c, x),
        }
    }

    fn cdf_left(&self, x: f64) -> f64 {
        match self {
            Reference::Mp(l) => ReferenceCdf::cdf_left(l, x),
            Reference::FixedPoint(c) => ReferenceCdf::cdf_left(c, x),
        }
    }
}

/// Spectrum of one sampled trial, with the population applied when given.
pub fn sample_spectrum(
    params: &ModelParams,
    model: &MomentModel,
    seed: u64,
    diagonal: Option<&[f64]>,
    max_entries: u64,
) -> Result<EmpiricalSpectrum> {
    let z = sample_matrix(params, model, seed, max_entries)?;
    let z = match diagonal {
        Some(t) => {
            let roots: Vec<f64> = t.iter().map(|v| v.sqrt()).collect();
            apply_population_sqrt(&z, &roots, PopulationBasis::Diagonal)?
        }
        None => z,
    };
    EmpiricalSpectrum::of_covariance(&z)
}

#[derive(Serialize)]
struct EigenRow {
    trial: usize,
    index: usize,
    eigenvalue: f64,
}

#[derive(Serialize)]
struct HistogramRow {
    bin_left: f64,
    bin_right: f64,
    count: u64,
    density: f64,
}

#[derive(Serialize)]
struct ReferenceRow {
    bin_left: f64,
    bin_right: f64,
    mass: f64,
    density: f64,
}

#[derive(Serialize)]
struct TrialSummary {
    trial: usize,
    seed: u64,
    ks_to_mp: f64,
    moments: [f64; 4],
}

#[derive(Serialize)]
struct EsdSummary {
    n_features: usize,
    p: usize,
    gamma_n: f64,
    reference: &'static str,
    mean_ks: f64,
    trials: Vec<TrialSummary>,
}

/// Sampled spectra against the limit law.
pub fn run_esd(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let n = cfg.n()?;
    let d = cfg.single_d()?;
    let trials = cfg.trials(5)?;
    let seed = cfg.seed()?;
    if cfg.bins == 0 {
        return Err(Error::validation("bins must be at least 1"));
    }
    let params = cfg.params(n, d)?;
    let diagonal = cfg.population_diagonal(params.big_n)?;
    let reference = Reference::for_population(params.gamma_n, diagonal.as_deref(), cfg.eta)?;
    let mut warnings = Vec::new();
    if params.big_n == 1 {
        warnings.push("N = 1: the spectrum is a single point".to_string());
    }

    let spectra: Vec<(u64, EmpiricalSpectrum)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let s = derive_seed(seed, ESD_STREAM, t as u64);
            Ok((
                s,
                sample_spectrum(&params, &cfg.dist, s, diagonal.as_deref(), cfg.max_entries)?,
            ))
        })
        .collect::<Result<_>>()?;

    let (ref_lo, ref_hi) = reference.span();
    let lo = spectra.iter().map(|(_, s)| s.min()).fold(ref_lo, f64::min);
    let hi = spectra.iter().map(|(_, s)| s.max()).fold(ref_hi, f64::max);
    let range = padded_range(lo, hi);

    let mut artifacts = Vec::new();
    let mut eig_rows = Vec::new();
    let mut summaries = Vec::new();
    for (t, (s, spec)) in spectra.iter().enumerate() {
        eig_rows.extend(spec.eigenvalues().iter().enumerate().map(|(i, &v)| EigenRow {
            trial: t,
            index: i,
            eigenvalue: v,
        }));
        let h = histogram(spec, cfg.bins, Some(range))?;
        let rows: Vec<HistogramRow> = (0..h.bins())
            .map(|b| HistogramRow {
                bin_left: h.edges[b],
                bin_right: h.edges[b + 1],
                count: h.counts[b],
                density: h.densities[b],
            })
            .collect();
        artifacts.push(table(&format!("histogram_t{t}"), &rows, Experiment::Esd, cfg)?);
        let mut moments = [0.0; 4];
        for (k, m) in moments.iter_mut().enumerate() {
            *m = spectral_moment(spec, k as u32 + 1)?;
        }
        summaries.push(TrialSummary {
            trial: t,
            seed: *s,
            ks_to_mp: ks_distance(spec, &reference),
            moments,
        });
    }
    artifacts.insert(0, table("eigenvalues", &eig_rows, Experiment::Esd, cfg)?);

    let edges = histogram(&spectra[0].1, cfg.bins, Some(range))?.edges;
    let ref_rows: Vec<ReferenceRow> = edges
        .windows(2)
        .map(|e| {
            let mass = reference.cdf(e[1]) - reference.cdf(e[0]);
            ReferenceRow {
                bin_left: e[0],
                bin_right: e[1],
                mass,
                density: mass / (e[1] - e[0]),
            }
        })
        .collect();
    artifacts.push(table("mp_reference", &ref_rows, Experiment::Esd, cfg)?);

    let mean_ks = summaries.iter().map(|s| s.ks_to_mp).sum::<f64>() / trials as f64;
    let summary = EsdSummary {
        n_features: params.big_n,
        p: params.p,
        gamma_n: params.gamma_n,
        reference: reference.name(),
        mean_ks,
        trials: summaries,
    };
    artifacts.push(json_artifact("summary.json".into(), Experiment::Esd, cfg, summary)?);
    Ok(RunOutcome::ok(artifacts, warnings))
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanRow {
    pub n: usize,
    pub d: usize,
    pub d_over_sqrt_n: f64,
    pub mean_ks: f64,
    pub std_ks: f64,
    pub exact_norm_variance_ratio: f64,
}

/// KS to Marchenko–Pastur and the normalized norm variance across `d`.
pub fn run_threshold_scan(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let n = cfg.n()?;
    if cfg.d.is_empty() {
        return Err(Error::validation("threshold-scan needs at least one --d"));
    }
    if let Some(&bad) = cfg.d.iter().find(|&&d| d == 0 || d > n) {
        return Err(Error::validation(format!("d = {bad} outside 1..={n}")));
    }
    let trials = cfg.trials(5)?;
    let seed = cfg.seed()?;
    let b = cfg.dist.fourth_moment();
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for (row, &d) in cfg.d.iter().enumerate() {
        let ratio = norm_variance_ratio(n, d, b)?;
        let base = ScanRow {
            n,
            d,
            d_over_sqrt_n: d as f64 / (n as f64).sqrt(),
            mean_ks: f64::NAN,
            std_ks: f64::NAN,
            exact_norm_variance_ratio: ratio,
        };
        let params = match binomial(n as u64, d as u64).and_then(|_| cfg.params(n, d)) {
            Ok(p) => p,
            Err(Error::Overflow { .. }) => {
                warnings.push(format!("d = {d}: N overflows, KS skipped"));
                rows.push(base);
                continue;
            }
            Err(e) => return Err(e),
        };
        if params.entries() > u128::from(cfg.max_entries) {
            warnings.push(format!(
                "d = {d}: N*p = {} exceeds the cap {}, KS skipped",
                params.entries(),
                cfg.max_entries
            ));
            rows.push(base);
            continue;
        }
        if params.big_n == 1 {
            warnings.push(format!("d = {d}: N = 1, KS against the limit law is degenerate"));
        }
        let law = MpLaw::new(params.gamma_n)?;
        let ks: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let s = derive_seed(seed, SCAN_STREAM, ((row as u64) << 32) | t as u64);
                let spec = sample_spectrum(&params, &cfg.dist, s, None, cfg.max_entries)?;
                Ok(ks_distance(&spec, &law))
            })
            .collect::<Result<_>>()?;
        let mean = ks.iter().sum::<f64>() / trials as f64;
        let std = if trials > 1 {
            (ks.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(ScanRow {
            mean_ks: mean,
            std_ks: std,
            ..base
        });
    }
    let artifacts = vec![table("threshold_scan", &rows, Experiment::ThresholdScan, cfg)?];
    Ok(RunOutcome::ok(artifacts, warnings))
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceRow {
    pub n: usize,
    pub d: usize,
    pub b: f64,
    pub exact: f64,
    pub exact_ratio: f64,
    pub upper_bound: Option<f64>,
    pub upper_applicable: bool,
    pub lower_bound: Option<f64>,
    pub lower_applicable: bool,
    pub lower_bound_large_d_ratio: Option<f64>,
    pub large_d_applicable: bool,
    pub mc_estimate: Option<f64>,
    pub mc_stderr: Option<f64>,
    pub mc_within_3se: Option<bool>,
    pub violation: bool,
}

pub const VARIANCE_GRID_N: [usize; 7] = [4, 8, 12, 16, 32, 64, 128];
pub const VARIANCE_GRID_B: [f64; 4] = [1.0, 2.0, 3.0, 9.0];
const VARIANCE_MAX_D: usize = 16;
const MC_MAX_N: usize = 12;

fn model_with_fourth_moment(b: f64) -> Result<MomentModel> {
    if b == 1.0 {
        Ok(MomentModel::Rademacher)
    } else if b == 3.0 {
        Ok(MomentModel::Gaussian)
    } else {
        MomentModel::three_point(b)
    }
}

/// Exact norm variance against its bounds, with Monte Carlo for small `n`.
///
/// The grid is `n` in [`VARIANCE_GRID_N`] (or `--n`), `d` up to 16 (or the
/// `--d` list) and `B` in [`VARIANCE_GRID_B`]. Rows with `n <= 12` carry a
/// Monte Carlo estimate over `trials` draws (default 20000) from the law
/// with that fourth moment: Rademacher, Gaussian or three-point.
pub fn run_variance_check(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let seed = cfg.seed()?;
    let trials = cfg.trials(20_000)?;
    let ns: Vec<usize> = match cfg.n {
        Some(n) => vec![n],
        None => VARIANCE_GRID_N.to_vec(),
    };
    let mut cells = Vec::new();
    for &n in &ns {
        let ds: Vec<usize> = if cfg.d.is_empty() {
            (1..=n.min(VARIANCE_MAX_D)).collect()
        } else {
            cfg.d.clone()
        };
        for d in ds {
            for b in VARIANCE_GRID_B {
                cells.push((n, d, b));
            }
        }
    }
    let rows: Vec<VarianceRow> = cells
        .par_iter()
        .enumerate()
        .map(|(i, &(n, d, b))| {
            let report = VarianceReport::compute(n, d, b)?;
            let mc = if n <= MC_MAX_N && trials >= 1000 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, MC_STREAM, i as u64));
                Some(mc_norm_variance(n, d, &model_with_fourth_moment(b)?, trials, &mut rng)?)
            } else {
                None
            };
            Ok(VarianceRow {
                n,
                d,
                b,
                exact: report.exact,
                exact_ratio: report.ratio,
                upper_bound: report.upper_bound,
                upper_applicable: report.upper_applicable,
                lower_bound: report.lower_bound,
                lower_applicable: report.lower_applicable,
                lower_bound_large_d_ratio: report.lower_bound_large_d,
                large_d_applicable: report.large_d_applicable,
                mc_estimate: mc.map(|m| m.estimate),
                mc_stderr: mc.map(|m| m.stderr),
                mc_within_3se: mc.map(|m| (m.estimate - report.exact).abs() <= 3.0 * m.stderr),
                violation: !report.violations().is_empty(),
            })
        })
        .collect::<Result<_>>()?;
    let mut warnings = Vec::new();
    if trials < 1000 {
        warnings.push("fewer than 1000 trials: Monte Carlo columns left empty".to_string());
    }
    let violations: Vec<String> = rows
        .iter()
        .filter(|r| r.violation)
        .map(|r| format!("n = {}, d = {}, B = {}", r.n, r.d, r.b))
        .collect();
    let artifacts = vec![table("variance_check", &rows, Experiment::VarianceCheck, cfg)?];
    let mut outcome = RunOutcome::ok(artifacts, warnings);
    if !violations.is_empty() {
        outcome.verdict = Verdict::BoundViolation(format!("bound violated at {}", violations.join("; ")));
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub model: String,
    pub m: usize,
    pub n: usize,
    pub d_list: String,
    pub c_moment: f64,
    pub moment_constant: f64,
    pub bound: f64,
    pub applicable: bool,
    pub holds: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TupleRow {
    pub tuple: String,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub value: f64,
    pub shared_degree_total: usize,
    pub bound: f64,
    pub holds: bool,
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

fn moment_cells() -> Vec<(usize, Vec<usize>)> {
    let mut cells = Vec::new();
    for n in 1..=8 {
        for d1 in 1..=n.min(3) {
            cells.push((n, vec![d1]));
            for d2 in 1..=n.min(3) {
                cells.push((n, vec![d1, d2]));
            }
        }
    }
    for n in [300, 400] {
        cells.push((n, vec![1, 1]));
        cells.push((n, vec![2]));
    }
    cells
}

/// `c(m, n, (d_j))` against its bound, and the shared-degree bound on random tuples.
///
/// Moments are computed for Rademacher, Gaussian and the configured law over
/// `n <= 8, m <= 2, d_j <= 3` plus `n` in {300, 400} with `d = (1,1)` and
/// `(2)`. The tuple table draws `trials` (default 1000) random tuples with
/// `n <= 8, d <= 3, m <= 3` and evaluates them under the Gaussian law.
pub fn run_moments_check(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let seed = cfg.seed()?;
    let tuples = cfg.trials(1000)?;
    let mut models = vec![MomentModel::Rademacher, MomentModel::Gaussian];
    if !models.contains(&cfg.dist) {
        models.push(cfg.dist);
    }
    let jobs: Vec<(MomentModel, usize, Vec<usize>)> = models
        .iter()
        .flat_map(|model| moment_cells().into_iter().map(move |(n, ds)| (*model, n, ds)))
        .collect();
    let rows: Vec<MomentRow> = jobs
        .par_iter()
        .map(|(model, n, ds)| {
            let m = ds.len();
            let value = c_moment(m, *n, ds, model)?;
            let constant = model.moment_constant();
            let bound = c_moment_bound(m, *n, ds, constant)?;
            Ok(MomentRow {
                model: model.to_string(),
                m,
                n: *n,
                d_list: join(ds, ";"),
                c_moment: value,
                moment_constant: constant,
                bound: bound.bound,
                applicable: bound.applicable,
                holds: bound.applicable.then_some(value <= bound.bound),
            })
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TUPLE_STREAM, 0));
    let gauss = MomentModel::Gaussian;
    let mut tuple_rows = Vec::with_capacity(tuples);
    for _ in 0..tuples {
        let n = rng.random_range(1..=8usize);
        let d = rng.random_range(1..=n.min(3));
        let m = rng.random_range(1..=3usize);
        let subsets: Vec<SubsetIndex> = (0..2 * m)
            .map(|_| {
                let mut members: Vec<usize> =
                    sample_indices(&mut rng, n, d).into_iter().map(|i| i + 1).collect();
                members.sort_unstable();
                SubsetIndex::new(members)
            })
            .collect::<Result<_>>()?;
        let value = tensor_moment(&gauss, &subsets)?;
        let profile = shared_degrees(&subsets)?;
        let bound = tensor_moment_bound(&gauss, &profile);
        tuple_rows.push(TupleRow {
            tuple: join(&subsets.iter().map(|s| join(s.members(), ".")).collect::<Vec<_>>(), "|"),
            n,
            d,
            m,
            value,
            shared_degree_total: profile.total(),
            bound,
            holds: (0.0..=bound).contains(&value),
        });
    }

    let mut failures: Vec<String> = rows
        .iter()
        .filter(|r| r.holds == Some(false))
        .map(|r| format!("c_moment {} n = {} d = ({})", r.model, r.n, r.d_list))
        .collect();
    failures.extend(
        tuple_rows
            .iter()
            .filter(|r| !r.holds)
            .map(|r| format!("tuple {}", r.tuple)),
    );
    let artifacts = vec![
        table("moments_check", &rows, Experiment::MomentsCheck, cfg)?,
        table("shared_degree_check", &tuple_rows, Experiment::MomentsCheck, cfg)?,
    ];
    let mut outcome = RunOutcome::ok(artifacts, Vec::new());
    if !failures.is_empty() {
        outcome.verdict = Verdict::BoundViolation(format!("bound violated: {}", failures.join("; ")));
    }
    Ok(outcome)
}

#[derive(Serialize)]
struct FlatIdentityRow {
    name: String,
    residual: f64,
    lhs: Option<f64>,
    rhs: Option<f64>,
    holds: Option<bool>,
    skipped: Option<String>,
    seed: Option<u64>,
    n: Option<usize>,
    d: Option<usize>,
    rows: usize,
    cols: usize,
    z_re: Option<f64>,
    z_im: Option<f64>,
    column: Option<usize>,
}

#[derive(Serialize)]
struct Reports<'a> {
    reports: &'a [crate::identities::IdentityReport],
}

/// Randomized identity checks; `trials` is the instance count (default 200).
pub fn run_identity_suite(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let seed = cfg.seed()?;
    let count = cfg.trials(200)?;
    let ranges = InstanceRanges::with_im_floor(cfg.z_im_floor)?;
    let reports = run_suite(seed, count, &cfg.dist, &ranges)?;
    let artifact = match cfg.format {
        OutputFormat::Json => json_artifact(
            "identity_reports.json".into(),
            Experiment::IdentitySuite,
            cfg,
            Reports { reports: &reports },
        )?,
        OutputFormat::Csv => {
            let flat: Vec<FlatIdentityRow> = reports
                .iter()
                .map(|r| FlatIdentityRow {
                    name: r.name.clone(),
                    residual: r.residual,
                    lhs: r.bound_checked.map(|b| b.lhs),
                    rhs: r.bound_checked.map(|b| b.rhs),
                    holds: r.bound_checked.map(|b| b.holds),
                    skipped: r.skipped.clone(),
                    seed: r.instance_digest.seed,
                    n: r.instance_digest.n,
                    d: r.instance_digest.d,
                    rows: r.instance_digest.rows,
                    cols: r.instance_digest.cols,
                    z_re: r.instance_digest.z.map(|z| z.re),
                    z_im: r.instance_digest.z.map(|z| z.im),
                    column: r.instance_digest.column,
                })
                .collect();
            table("identity_reports", &flat, Experiment::IdentitySuite, cfg)?
        }
    };
    let mut outcome = RunOutcome::ok(vec![artifact], Vec::new());
    if let Some(bad) = reports.iter().find(|r| !r.passes(SUITE_TOLERANCE)) {
        outcome.verdict = Verdict::BoundViolation(format!(
            "{} failed (residual {:e}) on instance {:?}",
            bad.name, bad.residual, bad.instance_digest
        ));
    }
    Ok(outcome)
}

#[derive(Serialize)]
struct FixpointRow {
    x: f64,
    re_m: f64,
    im_m: f64,
    density: f64,
    iterations: usize,
    residual: f64,
}

#[derive(Serialize)]
struct IsotropicFixpointRow {
    x: f64,
    re_m: f64,
    im_m: f64,
    density: f64,
    iterations: usize,
    residual: f64,
    mp_re_m: f64,
    mp_im_m: f64,
    mp_density: f64,
    delta_m: f64,
    delta_density: f64,
}

/// Solves the fixed-point equation along `x + i eta`.
///
/// `gamma` comes from `--gamma` or from `(n, d, p)`. Without `--population`
/// the population is the identity and closed-form columns are added.
pub fn run_fixpoint(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let gamma = match (cfg.gamma, cfg.n, cfg.p) {
        (Some(g), _, None) => g,
        (None, Some(n), Some(_)) => cfg.params(n, cfg.single_d()?)?.gamma_n,
        _ => return Err(Error::validation("fixpoint needs --gamma, or --n, --d and --p")),
    };
    MpLaw::new(gamma)?;
    let grid = cfg
        .grid
        .unwrap_or(GridSpec {
            lo: 0.1,
            hi: 3.9,
            steps: 77,
        })
        .points();
    let isotropic = cfg.population.is_none();
    let h = match &cfg.population {
        Some(t) => esd_of_population(t)?,
        None => DiscreteMeasure::dirac(1.0)?,
    };
    let opts = SolveOptions::default();
    let solved = solve_grid(&h, gamma, &grid, cfg.eta, &opts)?;
    let mut failures = Vec::new();
    let mut base = Vec::with_capacity(grid.len());
    for (&x, r) in grid.iter().zip(&solved) {
        base.push(match r {
            Ok(f) => FixpointRow {
                x,
                re_m: f.m.re,
                im_m: f.m.im,
                density: (-f.m.im / std::f64::consts::PI).max(0.0),
                iterations: f.iterations,
                residual: f.residual,
            },
            Err(e) => {
                failures.push(format!("x = {x}: {e}"));
                let (iterations, residual) = match e {
                    Error::NonConvergence {
                        iterations,
                        residual,
                    } => (*iterations, *residual),
                    _ => (0, f64::NAN),
                };
                FixpointRow {
                    x,
                    re_m: f64::NAN,
                    im_m: f64::NAN,
                    density: f64::NAN,
                    iterations,
                    residual,
                }
            }
        });
    }
    let artifact = if isotropic {
        let law = MpLaw::new(gamma)?;
        let rows: Vec<IsotropicFixpointRow> = base
            .iter()
            .map(|r| {
                let exact = mp_stieltjes(gamma, crate::numeric::ComplexValue::new(r.x, cfg.eta))?;
                let mp_density = law.density(r.x);
                Ok(IsotropicFixpointRow {
                    x: r.x,
                    re_m: r.re_m,
                    im_m: r.im_m,
                    density: r.density,
                    iterations: r.iterations,
                    residual: r.residual,
                    mp_re_m: exact.re,
                    mp_im_m: exact.im,
                    mp_density,
                    delta_m: (crate::numeric::ComplexValue::new(r.re_m, r.im_m) - exact).norm(),
                    delta_density: (r.density - mp_density).abs(),
                })
            })
            .collect::<Result<_>>()?;
        table("fixpoint", &rows, Experiment::Fixpoint, cfg)?
    } else {
        table("fixpoint", &base, Experiment::Fixpoint, cfg)?
    };
    let mut outcome = RunOutcome::ok(vec![artifact], failures.clone());
    if failures.len() as f64 > FIXPOINT_FAILURE_QUOTA * grid.len() as f64 {
        outcome.verdict = Verdict::NonConvergence(format!(
            "{} of {} grid points failed",
            failures.len(),
            grid.len()
        ));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig {
            n: Some(8),
            d: vec![2],
            gamma: Some(1.0),
            seed: Some(9),
            trials: Some(2),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn grid_spec_parsing() {
        let g: GridSpec = "0.1:3.9:77".parse().unwrap();
        assert_eq!((g.lo, g.hi, g.steps), (0.1, 3.9, 77));
        assert_eq!(g.to_string(), "0.1:3.9:77");
        assert!("1:0:5".parse::<GridSpec>().is_err());
        assert!("0:1".parse::<GridSpec>().is_err());
        assert!("0:1:1".parse::<GridSpec>().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let mut c = cfg();
        c.dist = MomentModel::ThreePoint { b: 9.0 };
        c.grid = Some("0:2:5".parse().unwrap());
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"threepoint:9\""));
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        assert!(ExperimentConfig::from_json("{\"bogus\": 1}").is_err());
        let partial = ExperimentConfig::from_json("{\"n\": 5, \"dist\": \"gaussian\"}").unwrap();
        assert_eq!((partial.n, partial.dist, partial.bins), (Some(5), MomentModel::Gaussian, 40));
    }

    #[test]
    fn population_tiles_in_blocks() {
        let c = ExperimentConfig {
            population: Some(vec![1.0, 4.0]),
            ..cfg()
        };
        assert_eq!(c.population_diagonal(4).unwrap().unwrap(), vec![1.0, 1.0, 4.0, 4.0]);
        assert!(c.population_diagonal(5).is_err());
    }

    #[test]
    fn esd_outputs() {
        let out = run_esd(&cfg()).unwrap();
        let names: Vec<&str> = out.artifacts.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(
            names,
            ["eigenvalues.csv", "histogram_t0.csv", "histogram_t1.csv", "mp_reference.csv", "summary.json"]
        );
        assert!(out.artifact("eigenvalues.csv").unwrap().contents.starts_with("trial,index,eigenvalue\n"));
        assert!(out.artifact("histogram_t0.csv").unwrap().contents.starts_with("bin_left,bin_right,count,density\n"));
        let summary: serde_json::Value =
            serde_json::from_str(&out.artifact("summary.json").unwrap().contents).unwrap();
        assert_eq!(summary["trials"].as_array().unwrap().len(), 2);
        assert_eq!(summary["artifact_version"], ARTIFACT_VERSION);
        assert_eq!(summary["config"]["n"], 8);
        assert_eq!(run_esd(&cfg()).unwrap(), out);

        let zero = ExperimentConfig { trials: Some(0), ..cfg() };
        assert!(matches!(run_esd(&zero), Err(Error::Validation(_))));
        let unseeded = ExperimentConfig { seed: None, ..cfg() };
        assert!(run_esd(&unseeded).is_err());
        let both = ExperimentConfig { p: Some(10), ..cfg() };
        assert!(run_esd(&both).is_err());
    }

    #[test]
    fn threshold_scan_rows() {
        let c = ExperimentConfig {
            n: Some(12),
            d: vec![1, 2, 3, 12],
            dist: MomentModel::Gaussian,
            max_entries: 40_000,
            ..cfg()
        };
        let out = run_threshold_scan(&c).unwrap();
        let text = &out.artifacts[0].contents;
        assert!(text.starts_with("n,d,d_over_sqrt_n,mean_ks,std_ks,exact_norm_variance_ratio\n"));
        assert_eq!(text.lines().count(), 5);
        // d = 3 has N = 220, p = 220: above the cap
        assert!(text.lines().nth(3).unwrap().contains("NaN"));
        assert!(out.warnings.iter().any(|w| w.contains("d = 3")));
        assert!(out.warnings.iter().any(|w| w.contains("N = 1")));
        let empty = ExperimentConfig { d: vec![], ..c.clone() };
        assert!(run_threshold_scan(&empty).is_err());
    }

    #[test]
    fn fixpoint_isotropic_matches_closed_form() {
        let c = ExperimentConfig {
            n: None,
            gamma: Some(1.0),
            ..ExperimentConfig::default()
        };
        let out = run_fixpoint(&c).unwrap();
        assert_eq!(out.verdict, Verdict::Ok);
        let mut reader = csv::Reader::from_reader(out.artifacts[0].contents.as_bytes());
        let headers = reader.headers().unwrap().clone();
        let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
        let (dd, res) = (col("delta_density"), col("residual"));
        for rec in reader.records() {
            let rec = rec.unwrap();
            assert!(rec[dd].parse::<f64>().unwrap() <= 3e-2);
            assert!(rec[res].parse::<f64>().unwrap() < 1e-10);
        }
        let low = ExperimentConfig { eta: 1e-5, ..c };
        assert!(matches!(run_fixpoint(&low), Err(Error::Validation(_))));
    }
}
