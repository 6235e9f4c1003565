//! Monte Carlo validation of the audit's guarantees.
//!
//! A trial runs the whole pipeline once: sample one qualified audience per
//! group, score it on the platform, optionally privatize, and evaluate the gap.
//! An experiment repeats trials under independent seeds and reports how often
//! the test flagged the estimator. For a fair estimator (identical analytic
//! group distributions) that is the failure rate the planner bounds by δ; for a
//! biased one it is the empirical power.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{privatize_histogram, LaplaceNoiser};
use crate::error::{Error, Result};
use crate::fairness::{
    evaluate_audit, evaluate_exact, AuditSpec, FairnessReport, ScoreDomain,
};
use crate::planner::{n_min_nonprivate, n_min_private};
use crate::platform::{
    generate_population, sample_audience, score_audience, EstimatorConfig, GroupSpec, Population,
    PopulationModel, UserRecord,
};
use crate::seed::{stream, SeedPath};

/// Fair estimators are those whose analytic group distributions coincide.
const FAIR_GAP_TOLERANCE: f64 = 1e-12;
/// Below this many trials rate estimates are too coarse to mean much.
pub const MIN_TRIALS_FOR_RATES: usize = 100;

/// Where audiences come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum AudienceSource {
    /// A finite population generated once per experiment; audiences are
    /// sampled without replacement from its qualified strata.
    Population { size: usize },
    /// Fresh users drawn from the generative model for every audience.
    Iid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub audit: AuditSpec,
    pub estimator: EstimatorConfig,
    pub population: PopulationModel,
    pub audience_source: AudienceSource,
    pub n_per_group: usize,
    pub trials: usize,
    pub seed: u64,
    pub use_privacy: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.audit.validate()?;
        self.population.validate()?;
        if self.population.groups.len() != self.audit.attributes.len()
            || self
                .population
                .groups
                .iter()
                .zip(&self.audit.attributes)
                .any(|(g, a)| g.label != a.label)
        {
            return Err(Error::InvalidParameter(
                "population groups must match the audit attributes in order".into(),
            ));
        }
        self.estimator
            .validate(&self.audit.domain, self.audit.attributes.len())?;
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be >= 1".into()));
        }
        if self.n_per_group == 0 {
            return Err(Error::InvalidParameter("n_per_group must be >= 1".into()));
        }
        Ok(())
    }

    /// Planner minimum for this spec's parameters (private or not).
    pub fn planned_n(&self) -> Result<usize> {
        planned_n(&self.audit, self.use_privacy)
    }

    pub fn true_gap(&self) -> f64 {
        self.estimator
            .true_gap(&self.audit.domain, self.audit.attributes.len())
    }

    pub fn is_fair(&self) -> bool {
        self.true_gap() <= FAIR_GAP_TOLERANCE
    }
}

fn planned_n(audit: &AuditSpec, private: bool) -> Result<usize> {
    let groups = audit.attributes.len() as u64;
    let bins = audit.domain.size() as u64;
    let plan = if private {
        n_min_private(audit.alpha, audit.delta, audit.epsilon, groups, bins)?
    } else {
        n_min_nonprivate(audit.alpha, audit.delta, groups, bins)?
    };
    Ok(plan.n_min_per_group as usize)
}

/// Resources shared by all trials of one experiment.
#[derive(Debug)]
pub struct TrialContext {
    population: Option<Population>,
}

impl TrialContext {
    pub fn new(spec: &ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let population = match spec.audience_source {
            AudienceSource::Population { size } => {
                let seed = SeedPath::new(spec.seed).child(stream::POPULATION).seed();
                Some(generate_population(&spec.population, size, seed)?)
            }
            AudienceSource::Iid => None,
        };
        Ok(TrialContext { population })
    }

    pub fn population(&self) -> Option<&Population> {
        self.population.as_ref()
    }
}

fn audience(
    spec: &ExperimentSpec,
    ctx: &TrialContext,
    trial: SeedPath,
    group: usize,
) -> Result<Vec<UserRecord>> {
    let attr = &spec.audit.attributes[group];
    let seed = trial.child(stream::AUDIENCE).index(group as u64);
    match &ctx.population {
        Some(pop) => sample_audience(pop, attr, true, spec.n_per_group, seed.seed()),
        None => spec
            .population
            .draw_qualified(attr, spec.n_per_group, &mut seed.rng()),
    }
}

/// Seed path of trial `index` within an experiment.
pub fn trial_seed(spec_seed: u64, index: u64) -> SeedPath {
    SeedPath::new(spec_seed).child("trial").index(index)
}

/// One pass of the pipeline for every group.
pub fn run_trial(spec: &ExperimentSpec, ctx: &TrialContext, trial: SeedPath) -> Result<FairnessReport> {
    let groups = spec.audit.attributes.len();
    let raw = (0..groups)
        .map(|g| {
            let users = audience(spec, ctx, trial, g)?;
            let mut rng = trial.child(stream::SCORE).index(g as u64).rng();
            score_audience(&spec.estimator, &users, &spec.audit.domain, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    if !spec.use_privacy {
        return evaluate_exact(&spec.audit, &raw);
    }
    let noisy = raw
        .iter()
        .enumerate()
        .map(|(g, h)| {
            let seed = trial.child(stream::NOISE).index(g as u64).seed();
            let mut noiser = LaplaceNoiser::for_epsilon(spec.audit.epsilon, seed)?;
            privatize_histogram(h, spec.audit.epsilon, &mut noiser)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_audit(&spec.audit, &noisy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfgSummary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl EfgSummary {
    fn from_values(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |q: f64| {
            let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[idx - 1]
        };
        EfgSummary {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    pub trials: usize,
    pub n_per_group: usize,
    pub use_privacy: bool,
    pub alpha: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub true_gap: f64,
    /// Trials with EFG > α.
    pub flagged: usize,
    /// Flag rate for a fair estimator.
    pub failure_rate: Option<f64>,
    /// Flag rate for a biased estimator.
    pub power: Option<f64>,
    pub efg: EfgSummary,
    pub wall_clock: Duration,
    pub warnings: Vec<String>,
}

impl ExperimentResult {
    pub fn flagged_rate(&self) -> f64 {
        self.flagged as f64 / self.trials as f64
    }
}

/// Runs `spec.trials` trials in parallel. Results are reduced in trial order,
/// so the outcome does not depend on scheduling.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let ctx = TrialContext::new(spec)?;
    let seeds: Vec<SeedPath> = (0..spec.trials as u64)
        .map(|i| trial_seed(spec.seed, i))
        .collect();
    run_with_seeds(spec, &ctx, &seeds)
}

/// As [`run_experiment`] with explicit trial seeds.
pub fn run_with_seeds(
    spec: &ExperimentSpec,
    ctx: &TrialContext,
    seeds: &[SeedPath],
) -> Result<ExperimentResult> {
    let started = Instant::now();
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let gaps = seeds
        .par_iter()
        .map(|&s| run_trial(spec, ctx, s).map(|r| r.efg))
        .collect::<Result<Vec<f64>>>()?;
    let flagged = gaps.iter().filter(|&&g| g > spec.audit.alpha).count();
    let rate = flagged as f64 / gaps.len() as f64;
    let true_gap = spec.true_gap();
    let fair = true_gap <= FAIR_GAP_TOLERANCE;
    let mut warnings = Vec::new();
    if gaps.len() < MIN_TRIALS_FOR_RATES {
        warnings.push(format!(
            "InsufficientTrials: {} trials (< {MIN_TRIALS_FOR_RATES}); rates are coarse",
            gaps.len()
        ));
    }
    Ok(ExperimentResult {
        name: spec.name.clone(),
        trials: gaps.len(),
        n_per_group: spec.n_per_group,
        use_privacy: spec.use_privacy,
        alpha: spec.audit.alpha,
        delta: spec.audit.delta,
        epsilon: spec.audit.epsilon,
        true_gap,
        flagged,
        failure_rate: fair.then_some(rate),
        power: (!fair).then_some(rate),
        efg: EfgSummary::from_values(&gaps),
        wall_clock: started.elapsed(),
        warnings,
    })
}

pub const RESULT_CSV_HEADER: &str = "name,trials,n_per_group,use_privacy,alpha,delta,epsilon,true_gap,flagged,failure_rate,power,efg_mean,efg_p50,efg_p95";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with [`RESULT_CSV_HEADER`]. Wall-clock time is left out so that the
/// file is reproducible.
pub fn results_csv(results: &[ExperimentResult]) -> String {
    let mut out = format!("{RESULT_CSV_HEADER}\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.name,
            r.trials,
            r.n_per_group,
            r.use_privacy,
            r.alpha,
            r.delta,
            r.epsilon,
            r.true_gap,
            r.flagged,
            opt(r.failure_rate),
            opt(r.power),
            r.efg.mean,
            r.efg.p50,
            r.efg.p95
        );
    }
    out
}

/// Binomial margin `z·sqrt(p(1−p)/trials)`.
pub fn binomial_margin(p: f64, trials: usize, z: f64) -> f64 {
    z * (p * (1.0 - p) / trials as f64).sqrt()
}

/// Human-readable summary, including the comparison against δ.
pub fn summary(r: &ExperimentResult) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "experiment {}: {} trials, n={} per group, privacy={}, alpha={}, delta={}, epsilon={}",
        r.name, r.trials, r.n_per_group, r.use_privacy, r.alpha, r.delta, r.epsilon
    );
    let _ = writeln!(s, "true gap {:.6}", r.true_gap);
    if let Some(f) = r.failure_rate {
        let limit = r.delta + 3.0 * binomial_margin(r.delta, r.trials, 1.0);
        let verdict = if f <= limit { "within" } else { "EXCEEDS" };
        let _ = writeln!(
            s,
            "failure_rate {f:.4} ({}/{}) vs delta {} + 3 sd = {limit:.4}: {verdict}",
            r.flagged, r.trials, r.delta
        );
    }
    if let Some(p) = r.power {
        let _ = writeln!(s, "power {p:.4} ({}/{})", r.flagged, r.trials);
    }
    let _ = writeln!(
        s,
        "efg mean {:.6}, p50 {:.6}, p95 {:.6}",
        r.efg.mean, r.efg.p50, r.efg.p95
    );
    let _ = writeln!(s, "wall clock {:.2?}", r.wall_clock);
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

/// Grid for [`tradeoff_curve`].
#[derive(Debug, Clone, PartialEq)]
pub enum TradeoffGrid {
    Epsilon(Vec<f64>),
    Alpha(Vec<f64>),
    /// Multiples of the planned per-group sample size.
    SampleFraction(Vec<f64>),
}

impl TradeoffGrid {
    fn name(&self) -> &'static str {
        match self {
            TradeoffGrid::Epsilon(_) => "epsilon",
            TradeoffGrid::Alpha(_) => "alpha",
            TradeoffGrid::SampleFraction(_) => "n_fraction",
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            TradeoffGrid::Epsilon(v) | TradeoffGrid::Alpha(v) | TradeoffGrid::SampleFraction(v) => v,
        }
    }

    pub fn parse(kind: &str, values: Vec<f64>) -> Result<Self> {
        match kind {
            "epsilon" => Ok(TradeoffGrid::Epsilon(values)),
            "alpha" => Ok(TradeoffGrid::Alpha(values)),
            "n_fraction" | "n" => Ok(TradeoffGrid::SampleFraction(values)),
            other => Err(Error::InvalidParameter(format!(
                "unknown trade-off grid `{other}` (expected epsilon, alpha or n_fraction)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub parameter: &'static str,
    pub value: f64,
    pub n_per_group: usize,
    pub n_min: usize,
    pub failure_rate: f64,
    pub mean_efg: f64,
}

/// Pairs planner predictions with measured behaviour across a grid. With an
/// ε or α grid each point runs at its planned sample size; with a sample
/// fraction grid `n = ⌈fraction · n_min⌉`.
pub fn tradeoff_curve(grid: &TradeoffGrid, spec: &ExperimentSpec) -> Result<Vec<TradeoffRow>> {
    if grid.values().is_empty() {
        return Err(Error::InvalidParameter("trade-off grid is empty".into()));
    }
    grid.values()
        .iter()
        .map(|&value| {
            let mut point = spec.clone();
            match grid {
                TradeoffGrid::Epsilon(_) => point.audit.epsilon = value,
                TradeoffGrid::Alpha(_) => point.audit.alpha = value,
                TradeoffGrid::SampleFraction(_) => {}
            }
            point.audit.validate()?;
            let n_min = point.planned_n()?;
            point.n_per_group = match grid {
                TradeoffGrid::SampleFraction(_) => {
                    if !(value > 0.0 && value.is_finite()) {
                        return Err(Error::InvalidParameter(format!(
                            "sample fraction must be > 0, got {value}"
                        )));
                    }
                    (value * n_min as f64).ceil() as usize
                }
                _ => n_min,
            };
            let r = run_experiment(&point)?;
            Ok(TradeoffRow {
                parameter: grid.name(),
                value,
                n_per_group: point.n_per_group,
                n_min,
                failure_rate: r.flagged_rate(),
                mean_efg: r.efg.mean,
            })
        })
        .collect()
}

pub const TRADEOFF_CSV_HEADER: &str = "parameter,value,n_per_group,n_min,failure_rate,mean_efg";

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let mut out = format!("{TRADEOFF_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.parameter, r.value, r.n_per_group, r.n_min, r.failure_rate, r.mean_efg
        );
    }
    out
}

/// Score domain as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    #[serde(default = "default_kind")]
    pub kind: String,
    /// Number of bins (discrete, or equal-width continuous over `range`).
    pub bins: Option<usize>,
    pub labels: Option<Vec<String>>,
    pub edges: Option<Vec<f64>>,
    pub range: Option<[f64; 2]>,
}

fn default_kind() -> String {
    "discrete".into()
}

impl DomainConfig {
    pub fn build(&self) -> Result<ScoreDomain> {
        match self.kind.as_str() {
            "discrete" => match (&self.labels, self.bins) {
                (Some(labels), _) => ScoreDomain::discrete_labels(labels.clone()),
                (None, Some(n)) => ScoreDomain::discrete(n),
                (None, None) => Err(Error::Config("discrete domain needs `bins` or `labels`".into())),
            },
            "continuous" => match (&self.edges, self.bins) {
                (Some(edges), _) => ScoreDomain::continuous(edges.clone()),
                (None, Some(n)) => {
                    let [lo, hi] = self.range.unwrap_or([0.0, 1.0]);
                    ScoreDomain::equal_width(lo, hi, n)
                }
                (None, None) => Err(Error::Config("continuous domain needs `edges` or `bins`".into())),
            },
            other => Err(Error::Config(format!("unknown domain kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub alpha: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub groups: Vec<String>,
    pub domain: DomainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    #[serde(default = "default_source")]
    pub source: String,
    #[serde(default = "default_population_size")]
    pub size: usize,
    /// Group shares; equal when omitted.
    pub shares: Option<Vec<f64>>,
    #[serde(default = "default_qualification_rate")]
    pub qualification_rate: f64,
    #[serde(default)]
    pub qualification_tilt: f64,
}

fn default_source() -> String {
    "population".into()
}
fn default_population_size() -> usize {
    200_000
}
fn default_qualification_rate() -> f64 {
    0.5
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            source: default_source(),
            size: default_population_size(),
            shares: None,
            qualification_rate: default_qualification_rate(),
            qualification_tilt: 0.0,
        }
    }
}

/// `"planned"` or an explicit count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleSizeConfig {
    Fixed(usize),
    Keyword(String),
}

impl Default for SampleSizeConfig {
    fn default() -> Self {
        SampleSizeConfig::Keyword("planned".into())
    }
}

/// On-disk experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_true")]
    pub use_privacy: bool,
    #[serde(default)]
    pub n_per_group: SampleSizeConfig,
    pub audit: AuditConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub population: PopulationConfig,
}

fn default_trials() -> usize {
    2000
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Parses TOML; errors carry line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn build(&self) -> Result<ExperimentSpec> {
        let domain = self.audit.domain.build()?;
        let audit = AuditSpec::new(
            self.audit.alpha,
            self.audit.delta,
            self.audit.epsilon,
            &self.audit.groups,
            domain,
        )?;
        let shares = match &self.population.shares {
            Some(s) if s.len() != self.audit.groups.len() => {
                return Err(Error::InvalidMix(format!(
                    "{} shares for {} groups",
                    s.len(),
                    self.audit.groups.len()
                )))
            }
            Some(s) => s.clone(),
            None => vec![1.0 / self.audit.groups.len() as f64; self.audit.groups.len()],
        };
        let population = PopulationModel::new(
            self.audit
                .groups
                .iter()
                .zip(shares)
                .map(|(label, share)| GroupSpec {
                    label: label.clone(),
                    share,
                    qualification_rate: self.population.qualification_rate,
                })
                .collect(),
            self.population.qualification_tilt,
        )?;
        let audience_source = match self.population.source.as_str() {
            "population" => AudienceSource::Population {
                size: self.population.size,
            },
            "iid" => AudienceSource::Iid,
            other => {
                return Err(Error::Config(format!(
                    "unknown population source `{other}` (expected population or iid)"
                )))
            }
        };
        let n_per_group = match &self.n_per_group {
            SampleSizeConfig::Fixed(n) => *n,
            SampleSizeConfig::Keyword(k) if k == "planned" => planned_n(&audit, self.use_privacy)?,
            SampleSizeConfig::Keyword(k) => {
                return Err(Error::Config(format!(
                    "n_per_group must be an integer or \"planned\", got `{k}`"
                )))
            }
        };
        let spec = ExperimentSpec {
            name: self.name.clone(),
            audit,
            estimator: self.estimator.clone(),
            population,
            audience_source,
            n_per_group,
            trials: self.trials,
            seed: self.seed,
            use_privacy: self.use_privacy,
        };
        spec.validate()?;
        Ok(spec)
    }
}
