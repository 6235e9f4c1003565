//! Privacy-preserving, platform-supported fairness auditing.
//!
//! A platform scores an auditor-supplied audience with its relevance
//! estimator, releases Laplace-noised score histograms per group, and the
//! auditor checks the equality-of-opportunity gap against a tolerance `alpha`.
//! The [`planner`] gives the per-group sample sizes that make that test hold
//! with probability `1 - delta`, with and without privacy.

pub mod dp;
pub mod error;
pub mod fairness;
pub mod harness;
pub mod planner;
pub mod platform;
pub mod protocol;
pub mod seed;

pub use dp::{
    histogram_sensitivity, privatize_histogram, BudgetLedger, LaplaceNoiser, LedgerEntry,
    PersistentLedger,
};
pub use error::{Error, Result};
pub use fairness::{
    efg, efg_cdf, empirical_distribution, evaluate_audit, evaluate_exact, noisy_distribution,
    AttributeId, AuditSpec, DomainKind, EstimateKind, FairnessReport, GapLocation,
    GroupDistribution, NoisyHistogram, ScoreDomain, ScoreHistogram,
};
pub use planner::{
    factor_sweep, n_min_nonprivate, n_min_private, sdp_factor, PlanRequest, PlanResult,
    SweepParameter, SweepRow,
};
pub use platform::{
    generate_population, sample_audience, score, score_audience, BaseDistribution, BiasModel,
    BiasOutcome, EstimatorConfig, GroupSpec, Population, PopulationModel, UserRecord,
};
pub use seed::SeedPath;
