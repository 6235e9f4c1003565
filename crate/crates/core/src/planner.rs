//! Minimum qualified samples per group for the fairness test.
//!
//! Without privacy the Hoeffding plus union bound gives
//! `n ≥ (2/α²)·ln(2|A||Y|/δ)`. With Laplace noise on each bin, splitting the
//! error budget between sampling and noise gives
//! `n ≥ (8/α²)·ln(3|A||Y|/δ)`, valid whenever `ε > α/2` and otherwise free of
//! ε. Their ratio is `f(P) = 4·(ln 3 + P)/(ln 2 + P)` with
//! `P = ln(|A||Y|/δ)`, which decreases from `4·ln3/ln2 ≈ 6.34` at `P = 0`
//! towards 4. Natural logarithms throughout.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `4·ln 3 / ln 2`, the supremum of the privacy overhead factor.
pub fn upper_bound_factor() -> f64 {
    4.0 * 3f64.ln() / 2f64.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub alpha: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub num_attributes: u64,
    pub num_bins: u64,
    pub private: bool,
}

impl PlanRequest {
    /// The worked-example parameters: α=0.2, δ=0.05, ε=1, |A|=2, |Y|=100.
    pub fn worked_example() -> Self {
        PlanRequest {
            alpha: 0.2,
            delta: 0.05,
            epsilon: 1.0,
            num_attributes: 2,
            num_bins: 100,
            private: true,
        }
    }

    fn validate_common(&self) -> Result<()> {
        validate_ranges(self.alpha, self.delta, self.num_attributes, self.num_bins)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_common()?;
        if self.private {
            check_private_epsilon(self.alpha, self.epsilon)?;
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<PlanResult> {
        if self.private {
            n_min_private(
                self.alpha,
                self.delta,
                self.epsilon,
                self.num_attributes,
                self.num_bins,
            )
        } else {
            n_min_nonprivate(self.alpha, self.delta, self.num_attributes, self.num_bins)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    /// `⌈raw_bound⌉`.
    pub n_min_per_group: u64,
    pub raw_bound: f64,
    /// Ratio of this bound to the non-private bound (1 for the non-private plan).
    pub factor_vs_nonprivate: f64,
    pub upper_bound_factor: f64,
}

fn validate_ranges(alpha: f64, delta: f64, groups: u64, bins: u64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if groups < 2 {
        return Err(Error::InvalidParameter(format!(
            "at least 2 groups are required, got {groups}"
        )));
    }
    if bins < 1 {
        return Err(Error::InvalidParameter("at least 1 score bin is required".into()));
    }
    Ok(())
}

fn check_private_epsilon(alpha: f64, epsilon: f64) -> Result<()> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    if epsilon <= alpha / 2.0 {
        return Err(Error::EpsilonTooSmall {
            epsilon,
            half_alpha: alpha / 2.0,
        });
    }
    Ok(())
}

fn cells(groups: u64, bins: u64) -> f64 {
    groups as f64 * bins as f64
}

fn nonprivate_raw(alpha: f64, delta: f64, groups: u64, bins: u64) -> f64 {
    2.0 / (alpha * alpha) * (2.0 * cells(groups, bins) / delta).ln()
}

fn private_raw(alpha: f64, delta: f64, groups: u64, bins: u64) -> f64 {
    8.0 / (alpha * alpha) * (3.0 * cells(groups, bins) / delta).ln()
}

fn ceil_count(raw: f64) -> u64 {
    raw.ceil() as u64
}

/// Minimum qualified samples per group for the (α, δ) test without privacy.
pub fn n_min_nonprivate(alpha: f64, delta: f64, groups: u64, bins: u64) -> Result<PlanResult> {
    validate_ranges(alpha, delta, groups, bins)?;
    let raw = nonprivate_raw(alpha, delta, groups, bins);
    Ok(PlanResult {
        n_min_per_group: ceil_count(raw),
        raw_bound: raw,
        factor_vs_nonprivate: 1.0,
        upper_bound_factor: upper_bound_factor(),
    })
}

/// Minimum qualified samples per group for the (α, δ, ε) test. Requires `ε > α/2`;
/// the result does not otherwise depend on ε.
pub fn n_min_private(
    alpha: f64,
    delta: f64,
    epsilon: f64,
    groups: u64,
    bins: u64,
) -> Result<PlanResult> {
    validate_ranges(alpha, delta, groups, bins)?;
    check_private_epsilon(alpha, epsilon)?;
    let raw = private_raw(alpha, delta, groups, bins);
    Ok(PlanResult {
        n_min_per_group: ceil_count(raw),
        raw_bound: raw,
        factor_vs_nonprivate: raw / nonprivate_raw(alpha, delta, groups, bins),
        upper_bound_factor: upper_bound_factor(),
    })
}

/// `f(P) = 4·(ln 3 + P)/(ln 2 + P)` for `P ≥ 0`.
pub fn overhead_factor_at(log_ratio: f64) -> f64 {
    4.0 * (3f64.ln() + log_ratio) / (2f64.ln() + log_ratio)
}

/// Privacy overhead factor `S_dp`. Independent of α.
pub fn sdp_factor(alpha: f64, delta: f64, groups: u64, bins: u64) -> Result<f64> {
    validate_ranges(alpha, delta, groups, bins)?;
    Ok(overhead_factor_at((cells(groups, bins) / delta).ln()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Alpha,
    Delta,
    Groups,
    Bins,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Alpha => "alpha",
            SweepParameter::Delta => "delta",
            SweepParameter::Groups => "groups",
            SweepParameter::Bins => "bins",
        }
    }

    /// Grid used for the figure when none is given.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParameter::Alpha => (1..=50).map(|i| i as f64 / 100.0).collect(),
            SweepParameter::Delta => (1..=20).map(|i| i as f64 / 100.0).collect(),
            SweepParameter::Groups => (2..=10).map(f64::from).collect(),
            SweepParameter::Bins => (2..=1000).map(f64::from).collect(),
        }
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParameter::Alpha),
            "delta" => Ok(SweepParameter::Delta),
            "groups" => Ok(SweepParameter::Groups),
            "bins" => Ok(SweepParameter::Bins),
            other => Err(Error::InvalidParameter(format!(
                "unknown sweep `{other}` (expected alpha, delta, groups or bins)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: SweepParameter,
    pub value: f64,
    pub factor: f64,
    pub n_private: u64,
    pub n_nonprivate: u64,
}

fn as_count(value: f64, what: &str) -> Result<u64> {
    if value.fract() != 0.0 || value < 0.0 || !value.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "{what} must be a non-negative integer, got {value}"
        )));
    }
    Ok(value as u64)
}

/// One curve of the overhead-factor figure: vary one parameter, hold the rest
/// at `fixed`. The α curve is flat because α cancels in the ratio.
pub fn factor_sweep(
    varying: SweepParameter,
    grid: &[f64],
    fixed: &PlanRequest,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("sweep grid is empty".into()));
    }
    grid.iter()
        .map(|&value| {
            let mut req = *fixed;
            match varying {
                SweepParameter::Alpha => req.alpha = value,
                SweepParameter::Delta => req.delta = value,
                SweepParameter::Groups => req.num_attributes = as_count(value, "groups")?,
                SweepParameter::Bins => req.num_bins = as_count(value, "bins")?,
            }
            let epsilon = req.epsilon.max(req.alpha);
            let private = n_min_private(
                req.alpha,
                req.delta,
                epsilon,
                req.num_attributes,
                req.num_bins,
            )?;
            let nonprivate =
                n_min_nonprivate(req.alpha, req.delta, req.num_attributes, req.num_bins)?;
            Ok(SweepRow {
                parameter: varying,
                value,
                factor: sdp_factor(req.alpha, req.delta, req.num_attributes, req.num_bins)?,
                n_private: private.n_min_per_group,
                n_nonprivate: nonprivate.n_min_per_group,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "parameter,value,factor,n_private,n_nonprivate";

/// Renders sweep rows as CSV with [`SWEEP_CSV_HEADER`]. Floats use the shortest
/// round-trip representation.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.parameter.name(),
            r.value,
            r.factor,
            r.n_private,
            r.n_nonprivate
        );
    }
    out
}
