//! Platform-side ε-differential privacy for score histograms.
//!
//! Neighbouring datasets differ by adding or removing one user. Each user
//! lands in exactly one bin, so every bin count has sensitivity 1 and adding
//! independent `Lap(1/ε)` noise to each bin makes the whole histogram release
//! ε-DP. Groups are disjoint audiences, so one query releases one histogram
//! per group at the same ε.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{NoisyHistogram, ScoreDomain, ScoreHistogram};
use crate::seed::AuditRng;

/// Maps the top 52 bits of a 64-bit draw to the open interval (0, 1).
pub fn open_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Inverse CDF of `Lap(0, scale)` at `u ∈ (0, 1)`.
pub fn laplace_inverse_cdf(u: f64, scale: f64) -> f64 {
    let centered = u - 0.5;
    if centered == 0.0 {
        return 0.0;
    }
    -scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
}

/// Seeded Laplace sampler. Owns its RNG stream.
#[derive(Debug, Clone)]
pub struct LaplaceNoiser {
    scale: f64,
    seed: u64,
    rng: AuditRng,
}

impl LaplaceNoiser {
    pub fn new(scale: f64, seed: u64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Laplace scale must be finite and > 0, got {scale}"
            )));
        }
        Ok(LaplaceNoiser {
            scale,
            seed,
            rng: rand::SeedableRng::seed_from_u64(seed),
        })
    }

    /// Noiser with scale `1/ε`, the calibration for unit-sensitivity counts.
    pub fn for_epsilon(epsilon: f64, seed: u64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Self::new(1.0 / epsilon, seed)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sample(&mut self) -> f64 {
        laplace_inverse_cdf(open_unit(self.rng.next_u64()), self.scale)
    }
}

pub fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon.is_finite() && epsilon > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidEpsilon(epsilon))
    }
}

/// Per-bin L∞ sensitivity of a score histogram under add/remove-one neighbours.
pub fn histogram_sensitivity(_domain: &ScoreDomain) -> u32 {
    1
}

/// Adds independent `Lap(1/ε)` noise to every bin. The noiser must already be
/// calibrated to `1/ε`.
pub fn privatize_histogram(
    h: &ScoreHistogram,
    epsilon: f64,
    noiser: &mut LaplaceNoiser,
) -> Result<NoisyHistogram> {
    check_epsilon(epsilon)?;
    let expected = 1.0 / epsilon;
    if (noiser.scale() - expected).abs() > 1e-12 * expected {
        return Err(Error::InvalidParameter(format!(
            "noiser scale {} does not match 1/epsilon = {expected}",
            noiser.scale()
        )));
    }
    let noisy_counts = h
        .counts
        .iter()
        .map(|&c| c as f64 + noiser.sample())
        .collect();
    Ok(NoisyHistogram {
        group: h.group.clone(),
        noisy_counts,
        n_declared: h.n(),
        epsilon_spent: epsilon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub query_id: String,
    pub epsilon: f64,
    pub timestamp_ms: u64,
    pub running_total: f64,
}

impl LedgerEntry {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.query_id, self.epsilon, self.timestamp_ms, self.running_total
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Io(format!("corrupt ledger line `{line}`"));
        let mut parts = line.split(',');
        let query_id = parts.next().ok_or_else(bad)?.to_string();
        let epsilon = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let timestamp_ms = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let running_total = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(LedgerEntry {
            query_id,
            epsilon,
            timestamp_ms,
            running_total,
        })
    }
}

/// Sequential-composition privacy budget for one auditor.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLedger {
    auditor_id: String,
    total_epsilon: f64,
    spent: f64,
    entries: Vec<LedgerEntry>,
}

impl BudgetLedger {
    pub fn new(auditor_id: impl Into<String>, total_epsilon: f64) -> Result<Self> {
        check_epsilon(total_epsilon)?;
        Ok(BudgetLedger {
            auditor_id: auditor_id.into(),
            total_epsilon,
            spent: 0.0,
            entries: Vec::new(),
        })
    }

    pub fn auditor_id(&self) -> &str {
        &self.auditor_id
    }

    pub fn total_epsilon(&self) -> f64 {
        self.total_epsilon
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    pub fn remaining(&self) -> f64 {
        (self.total_epsilon - self.spent).max(0.0)
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Checks a charge without applying it.
    fn prepare(&self, query_id: &str, epsilon: f64, timestamp_ms: u64) -> Result<LedgerEntry> {
        check_epsilon(epsilon)?;
        if query_id.is_empty() || query_id.contains([',', '\n', '\r']) {
            return Err(Error::InvalidParameter(format!(
                "query id must be non-empty without commas or newlines: `{query_id}`"
            )));
        }
        let running_total = self.spent + epsilon;
        if running_total > self.total_epsilon {
            return Err(Error::BudgetExhausted {
                requested: epsilon,
                remaining: self.remaining(),
            });
        }
        Ok(LedgerEntry {
            query_id: query_id.to_string(),
            epsilon,
            timestamp_ms,
            running_total,
        })
    }

    fn apply(&mut self, entry: LedgerEntry) -> &LedgerEntry {
        self.spent = entry.running_total;
        self.entries.push(entry);
        self.entries.last().expect("just pushed")
    }

    /// Spends `epsilon` if the budget allows it; otherwise leaves the ledger untouched.
    pub fn charge(&mut self, query_id: &str, epsilon: f64) -> Result<&LedgerEntry> {
        let entry = self.prepare(query_id, epsilon, now_ms())?;
        Ok(self.apply(entry))
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// A [`BudgetLedger`] backed by an append-only file, one entry per line:
/// `query_id,epsilon,timestamp_ms,running_total`.
#[derive(Debug)]
pub struct PersistentLedger {
    ledger: BudgetLedger,
    path: PathBuf,
    file: File,
}

impl PersistentLedger {
    /// Opens (creating if needed) the ledger file and replays existing entries.
    pub fn open(path: impl AsRef<Path>, auditor_id: &str, total_epsilon: f64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut ledger = BudgetLedger::new(auditor_id, total_epsilon)?;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let mut entry = LedgerEntry::parse(&line)?;
                entry.running_total = ledger.spent + entry.epsilon;
                ledger.apply(entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(PersistentLedger { ledger, path, file })
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Durably records the charge before applying it in memory.
    pub fn charge(&mut self, query_id: &str, epsilon: f64) -> Result<&LedgerEntry> {
        let entry = self.ledger.prepare(query_id, epsilon, now_ms())?;
        writeln!(self.file, "{}", entry.to_line())?;
        self.file.sync_data()?;
        Ok(self.ledger.apply(entry))
    }
}
