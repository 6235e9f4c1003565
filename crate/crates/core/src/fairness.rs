//! Auditor-side equality-of-opportunity mathematics.
//!
//! Every histogram handled here is already conditioned on qualification: the
//! auditor uploads only qualified members of each group, so `n` is the
//! qualified count `n_{a,q}` and `counts[y]` is `n_{a,q,y}`.
//!
//! The empirical fairness gap (EFG) is the largest absolute difference, over
//! every pair of groups and every score bin, between the per-group probability
//! of landing in that bin. An audit passes when the gap is at most `alpha`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A value of the sensitive attribute. Indices are dense `0..|A|`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttributeId {
    pub label: String,
    pub index: usize,
}

impl AttributeId {
    pub fn new(label: impl Into<String>, index: usize) -> Self {
        AttributeId {
            label: label.into(),
            index,
        }
    }
}

/// Builds dense attribute ids from unique labels.
pub fn attributes_from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Vec<AttributeId>> {
    let mut seen = std::collections::HashSet::new();
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let l = l.as_ref();
            if l.is_empty() || !seen.insert(l.to_string()) {
                return Err(Error::InvalidParameter(format!(
                    "attribute labels must be non-empty and unique, got `{l}`"
                )));
            }
            Ok(AttributeId::new(l, i))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Discrete,
    Continuous,
}

/// The set of relevance scores `Y`.
///
/// Discrete domains carry one label per score. Continuous domains carry
/// `|Y| + 1` strictly increasing edges; bin `i` is `[edges[i], edges[i+1])`
/// with the last bin closed and out-of-range scores clipped to the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreDomain {
    Discrete { bins: Vec<String> },
    Continuous { edges: Vec<f64> },
}

impl ScoreDomain {
    /// Discrete scores labelled `1..=size`.
    pub fn discrete(size: usize) -> Result<Self> {
        Self::discrete_labels((1..=size).map(|i| i.to_string()).collect())
    }

    pub fn discrete_labels(bins: Vec<String>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::InvalidDomain("at least one bin is required".into()));
        }
        let unique: std::collections::HashSet<_> = bins.iter().collect();
        if unique.len() != bins.len() {
            return Err(Error::InvalidDomain("bin labels must be unique".into()));
        }
        Ok(ScoreDomain::Discrete { bins })
    }

    pub fn continuous(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidDomain("at least two edges are required".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidDomain(
                "edges must be finite and strictly increasing".into(),
            ));
        }
        Ok(ScoreDomain::Continuous { edges })
    }

    /// `size` equal-width bins over `[lo, hi]`.
    pub fn equal_width(lo: f64, hi: f64, size: usize) -> Result<Self> {
        if size == 0 || lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(Error::InvalidDomain(format!(
                "need size >= 1 and lo < hi, got size={size}, [{lo}, {hi}]"
            )));
        }
        let width = (hi - lo) / size as f64;
        let mut edges: Vec<f64> = (0..size).map(|i| lo + width * i as f64).collect();
        edges.push(hi);
        Self::continuous(edges)
    }

    pub fn kind(&self) -> DomainKind {
        match self {
            ScoreDomain::Discrete { .. } => DomainKind::Discrete,
            ScoreDomain::Continuous { .. } => DomainKind::Continuous,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            ScoreDomain::Discrete { bins } => bins.len(),
            ScoreDomain::Continuous { edges } => edges.len() - 1,
        }
    }

    /// Bin index for a continuous score; discrete domains treat the value as a
    /// 0-based bin position. Out-of-range values clip to the end bins.
    pub fn bin_of(&self, value: f64) -> usize {
        let last = self.size() - 1;
        match self {
            ScoreDomain::Discrete { .. } => {
                if value.is_nan() || value <= 0.0 {
                    0
                } else {
                    (value.floor() as usize).min(last)
                }
            }
            ScoreDomain::Continuous { edges } => {
                // number of interior edges <= value
                let interior = &edges[1..edges.len() - 1];
                interior.partition_point(|e| *e <= value)
            }
        }
    }

    /// Bin boundaries rescaled onto `[0, 1]`. Discrete domains are treated as
    /// equal-width partitions.
    pub fn unit_edges(&self) -> Vec<f64> {
        match self {
            ScoreDomain::Discrete { bins } => {
                let n = bins.len() as f64;
                (0..=bins.len()).map(|i| i as f64 / n).collect()
            }
            ScoreDomain::Continuous { edges } => {
                let lo = edges[0];
                let span = edges[edges.len() - 1] - lo;
                let mut unit: Vec<f64> = edges.iter().map(|e| (e - lo) / span).collect();
                let last = unit.len() - 1;
                unit[0] = 0.0;
                unit[last] = 1.0;
                unit
            }
        }
    }
}

/// The auditor's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSpec {
    pub alpha: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub attributes: Vec<AttributeId>,
    pub domain: ScoreDomain,
}

impl AuditSpec {
    pub fn new<S: AsRef<str>>(
        alpha: f64,
        delta: f64,
        epsilon: f64,
        attribute_labels: &[S],
        domain: ScoreDomain,
    ) -> Result<Self> {
        let spec = AuditSpec {
            alpha,
            delta,
            epsilon,
            attributes: attributes_from_labels(attribute_labels)?,
            domain,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidEpsilon(self.epsilon));
        }
        if self.epsilon <= self.alpha / 2.0 {
            return Err(Error::EpsilonTooSmall {
                epsilon: self.epsilon,
                half_alpha: self.alpha / 2.0,
            });
        }
        if self.attributes.len() < 2 {
            return Err(Error::TooFewGroups {
                found: self.attributes.len(),
            });
        }
        if self.attributes.iter().enumerate().any(|(i, a)| a.index != i) {
            return Err(Error::InvalidParameter(
                "attribute indices must be dense 0..|A|".into(),
            ));
        }
        Ok(())
    }

    pub fn attribute(&self, label: &str) -> Option<&AttributeId> {
        self.attributes.iter().find(|a| a.label == label)
    }
}

/// Raw per-bin counts of qualified members of one group. Never leaves the platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreHistogram {
    pub group: AttributeId,
    pub counts: Vec<u64>,
}

impl ScoreHistogram {
    pub fn new(group: AttributeId, counts: Vec<u64>) -> Self {
        ScoreHistogram { group, counts }
    }

    pub fn zeros(group: AttributeId, bins: usize) -> Self {
        ScoreHistogram {
            group,
            counts: vec![0; bins],
        }
    }

    /// Total qualified members, `n_{a,q}`.
    pub fn n(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Laplace-noised counts as released to the auditor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyHistogram {
    pub group: AttributeId,
    /// May be negative; never clamped.
    pub noisy_counts: Vec<f64>,
    /// Group size known to the auditor.
    pub n_declared: u64,
    pub epsilon_spent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    Exact,
    Noisy,
}

/// Per-bin probability estimates for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDistribution {
    pub group: AttributeId,
    pub probabilities: Vec<f64>,
    pub n: u64,
    pub kind: EstimateKind,
}

/// Where the maximum gap was found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapLocation {
    pub group_a: AttributeId,
    pub group_b: AttributeId,
    /// Score bin for the per-bin statistic; threshold index (score above bin
    /// `bin`) for the CDF statistic.
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub efg: f64,
    pub argmax: Option<GapLocation>,
    pub alpha: f64,
    pub passed: bool,
    pub mode: EstimateKind,
    pub per_group_n: BTreeMap<String, u64>,
}

/// `P̄_{a,y} = n_{a,q,y} / n_{a,q}`.
pub fn empirical_distribution(h: &ScoreHistogram) -> Result<GroupDistribution> {
    let n = h.n();
    if n == 0 {
        return Err(Error::ZeroQualifiedGroup {
            group: h.group.label.clone(),
        });
    }
    let denom = n as f64;
    Ok(GroupDistribution {
        group: h.group.clone(),
        probabilities: h.counts.iter().map(|&c| c as f64 / denom).collect(),
        n,
        kind: EstimateKind::Exact,
    })
}

/// `P*_{a,y} = (n_{a,q,y} + r) / n_{a,q}`, not renormalized.
pub fn noisy_distribution(h: &NoisyHistogram) -> Result<GroupDistribution> {
    if h.n_declared == 0 {
        return Err(Error::ZeroQualifiedGroup {
            group: h.group.label.clone(),
        });
    }
    let denom = h.n_declared as f64;
    Ok(GroupDistribution {
        group: h.group.clone(),
        probabilities: h.noisy_counts.iter().map(|&c| c / denom).collect(),
        n: h.n_declared,
        kind: EstimateKind::Noisy,
    })
}

fn check_shapes(dists: &[GroupDistribution], bins: usize) -> Result<()> {
    if dists.len() < 2 {
        return Err(Error::TooFewGroups { found: dists.len() });
    }
    if let Some(bad) = dists.iter().find(|d| d.probabilities.len() != bins) {
        return Err(Error::GroupCountMismatch {
            expected: bins,
            found: bad.probabilities.len(),
        });
    }
    Ok(())
}

/// Max |v_i[k] − v_j[k]| over i < j and k, with lexicographic tie-breaking.
fn max_gap(vectors: &[&[f64]]) -> Option<(f64, usize, usize, usize)> {
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for i in 0..vectors.len() {
        for j in (i + 1)..vectors.len() {
            for (k, (x, y)) in vectors[i].iter().zip(vectors[j]).enumerate() {
                let gap = (x - y).abs();
                if best.is_none_or(|(g, ..)| gap > g) {
                    best = Some((gap, i, j, k));
                }
            }
        }
    }
    best
}

fn report(
    dists: &[GroupDistribution],
    gap: Option<(f64, usize, usize, usize)>,
    alpha: f64,
) -> FairnessReport {
    let mode = if dists.iter().any(|d| d.kind == EstimateKind::Noisy) {
        EstimateKind::Noisy
    } else {
        EstimateKind::Exact
    };
    let efg = gap.map_or(0.0, |(g, ..)| g);
    FairnessReport {
        efg,
        argmax: gap.map(|(_, i, j, bin)| GapLocation {
            group_a: dists[i].group.clone(),
            group_b: dists[j].group.clone(),
            bin,
        }),
        alpha,
        passed: efg <= alpha,
        mode,
        per_group_n: dists.iter().map(|d| (d.group.label.clone(), d.n)).collect(),
    }
}

/// Empirical fairness gap over discrete score bins.
pub fn efg(dists: &[GroupDistribution], domain: &ScoreDomain, alpha: f64) -> Result<FairnessReport> {
    check_shapes(dists, domain.size())?;
    let vectors: Vec<&[f64]> = dists.iter().map(|d| d.probabilities.as_slice()).collect();
    Ok(report(dists, max_gap(&vectors), alpha))
}

/// `Q_{a,y} = Σ_{y' > y} P_{a,y'}` for the interior thresholds `y = 0..|Y|-1`.
pub fn complementary_cdf(probabilities: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(probabilities.len().saturating_sub(1));
    let mut tail = 0.0;
    for p in probabilities.iter().skip(1).rev() {
        tail += p;
        out.push(tail);
    }
    out.reverse();
    out
}

/// Fairness gap between complementary CDFs, for continuous score domains.
pub fn efg_cdf(
    dists: &[GroupDistribution],
    domain: &ScoreDomain,
    alpha: f64,
) -> Result<FairnessReport> {
    if domain.kind() != DomainKind::Continuous {
        return Err(Error::WrongDomainKind {
            expected: "continuous",
        });
    }
    check_shapes(dists, domain.size())?;
    let tails: Vec<Vec<f64>> = dists
        .iter()
        .map(|d| complementary_cdf(&d.probabilities))
        .collect();
    let vectors: Vec<&[f64]> = tails.iter().map(Vec::as_slice).collect();
    Ok(report(dists, max_gap(&vectors), alpha))
}

fn ordered_by_spec<'a, T>(
    spec: &AuditSpec,
    items: &'a [T],
    group_of: impl Fn(&T) -> &AttributeId,
) -> Result<Vec<&'a T>> {
    if items.len() < 2 {
        return Err(Error::TooFewGroups { found: items.len() });
    }
    if items.len() != spec.attributes.len() {
        return Err(Error::GroupCountMismatch {
            expected: spec.attributes.len(),
            found: items.len(),
        });
    }
    spec.attributes
        .iter()
        .map(|attr| {
            items
                .iter()
                .find(|h| group_of(h) == attr)
                .ok_or_else(|| Error::UnknownAttribute(attr.label.clone()))
        })
        .collect()
}

fn gap_for_domain(spec: &AuditSpec, dists: &[GroupDistribution]) -> Result<FairnessReport> {
    match spec.domain.kind() {
        DomainKind::Discrete => efg(dists, &spec.domain, spec.alpha),
        DomainKind::Continuous => efg_cdf(dists, &spec.domain, spec.alpha),
    }
}

/// Auditor's final step on released histograms. Does not enforce the planner's
/// minimum sample size; the per-group counts are reported instead.
pub fn evaluate_audit(spec: &AuditSpec, noisy: &[NoisyHistogram]) -> Result<FairnessReport> {
    let ordered = ordered_by_spec(spec, noisy, |h| &h.group)?;
    let dists = ordered
        .into_iter()
        .map(noisy_distribution)
        .collect::<Result<Vec<_>>>()?;
    gap_for_domain(spec, &dists)
}

/// Same as [`evaluate_audit`] on raw histograms (non-private baseline).
pub fn evaluate_exact(spec: &AuditSpec, raw: &[ScoreHistogram]) -> Result<FairnessReport> {
    let ordered = ordered_by_spec(spec, raw, |h| &h.group)?;
    let dists = ordered
        .into_iter()
        .map(empirical_distribution)
        .collect::<Result<Vec<_>>>()?;
    gap_for_domain(spec, &dists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(label: &str, index: usize, p: &[f64]) -> GroupDistribution {
        GroupDistribution {
            group: AttributeId::new(label, index),
            probabilities: p.to_vec(),
            n: 100,
            kind: EstimateKind::Exact,
        }
    }

    fn two(p: &[f64], q: &[f64]) -> Vec<GroupDistribution> {
        vec![dist("a1", 0, p), dist("a2", 1, q)]
    }

    #[test]
    fn empirical_ratios() {
        let h = ScoreHistogram::new(AttributeId::new("a", 0), vec![30, 70]);
        assert_eq!(empirical_distribution(&h).unwrap().probabilities, vec![0.3, 0.7]);

        let h = ScoreHistogram::new(AttributeId::new("a", 0), vec![0, 0, 5]);
        assert_eq!(empirical_distribution(&h).unwrap().probabilities, vec![0.0, 0.0, 1.0]);

        let h = ScoreHistogram::new(AttributeId::new("a", 0), vec![0, 0]);
        assert!(matches!(
            empirical_distribution(&h),
            Err(Error::ZeroQualifiedGroup { .. })
        ));
    }

    #[test]
    fn noisy_ratios_pass_negatives_through() {
        let g = AttributeId::new("a", 0);
        let h = NoisyHistogram {
            group: g.clone(),
            noisy_counts: vec![29.2, 71.1],
            n_declared: 100,
            epsilon_spent: 1.0,
        };
        let p = noisy_distribution(&h).unwrap().probabilities;
        assert!((p[0] - 0.292).abs() < 1e-15 && (p[1] - 0.711).abs() < 1e-15);

        let h = NoisyHistogram {
            noisy_counts: vec![-1.5, 101.5],
            ..h
        };
        let p = noisy_distribution(&h).unwrap().probabilities;
        assert!((p[0] + 0.015).abs() < 1e-15 && (p[1] - 1.015).abs() < 1e-15);

        let exact = ScoreHistogram::new(g.clone(), vec![30, 70]);
        let zero_noise = NoisyHistogram {
            group: g,
            noisy_counts: vec![30.0, 70.0],
            n_declared: 100,
            epsilon_spent: f64::INFINITY,
        };
        assert_eq!(
            noisy_distribution(&zero_noise).unwrap().probabilities,
            empirical_distribution(&exact).unwrap().probabilities
        );

        let empty = NoisyHistogram {
            n_declared: 0,
            ..zero_noise
        };
        assert!(noisy_distribution(&empty).is_err());
    }

    #[test]
    fn efg_examples() {
        let domain = ScoreDomain::discrete(2).unwrap();
        let r = efg(&two(&[0.3, 0.7], &[0.5, 0.5]), &domain, 0.2).unwrap();
        assert!((r.efg - 0.2).abs() < 1e-12);
        // 0.5 - 0.3 rounds to 0.2 exactly here
        assert!(r.passed);

        let r = efg(&two(&[0.4, 0.6], &[0.4, 0.6]), &domain, 0.2).unwrap();
        assert_eq!(r.efg, 0.0);
        assert!(r.passed);

        let r = efg(&two(&[1.0, 0.0], &[0.0, 1.0]), &domain, 0.5).unwrap();
        assert_eq!(r.efg, 1.0);
        assert_eq!(r.argmax.as_ref().unwrap().bin, 0);
        assert!(!r.passed);
    }

    #[test]
    fn efg_errors() {
        let domain = ScoreDomain::discrete(2).unwrap();
        assert!(matches!(
            efg(&[dist("a", 0, &[0.5, 0.5])], &domain, 0.1),
            Err(Error::TooFewGroups { found: 1 })
        ));
        assert!(matches!(
            efg(&two(&[0.5, 0.5], &[1.0]), &domain, 0.1),
            Err(Error::GroupCountMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn argmax_tie_breaks_lexicographically() {
        let domain = ScoreDomain::discrete(2).unwrap();
        let dists = vec![
            dist("a", 0, &[0.5, 0.5]),
            dist("b", 1, &[0.5, 0.5]),
            dist("c", 2, &[0.0, 1.0]),
        ];
        let r = efg(&dists, &domain, 0.1).unwrap();
        let at = r.argmax.unwrap();
        assert_eq!((at.group_a.index, at.group_b.index, at.bin), (0, 2, 0));
    }

    #[test]
    fn cdf_examples() {
        let domain = ScoreDomain::equal_width(0.0, 1.0, 2).unwrap();
        let r = efg_cdf(&two(&[0.5, 0.5], &[0.5, 0.5]), &domain, 0.1).unwrap();
        assert_eq!(r.efg, 0.0);

        let r = efg_cdf(&two(&[0.3, 0.7], &[0.5, 0.5]), &domain, 0.1).unwrap();
        assert!((r.efg - 0.2).abs() < 1e-12);
        assert_eq!(r.argmax.unwrap().bin, 0);

        let single = ScoreDomain::equal_width(0.0, 1.0, 1).unwrap();
        let r = efg_cdf(&two(&[1.0], &[1.0]), &single, 0.1).unwrap();
        assert_eq!(r.efg, 0.0);
        assert!(r.argmax.is_none());

        let discrete = ScoreDomain::discrete(2).unwrap();
        assert!(matches!(
            efg_cdf(&two(&[0.5, 0.5], &[0.5, 0.5]), &discrete, 0.1),
            Err(Error::WrongDomainKind { .. })
        ));
    }

    #[test]
    fn complementary_cdf_tails() {
        assert_eq!(complementary_cdf(&[0.3, 0.7]), vec![0.7]);
        let q = complementary_cdf(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(q.len(), 3);
        assert!((q[0] - 0.9).abs() < 1e-12 && (q[2] - 0.4).abs() < 1e-12);
        assert!(complementary_cdf(&[1.0]).is_empty());
    }

    fn spec(alpha: f64) -> AuditSpec {
        AuditSpec::new(alpha, 0.05, 1.0, &["a1", "a2"], ScoreDomain::discrete(2).unwrap()).unwrap()
    }

    fn noisy(spec: &AuditSpec, i: usize, counts: &[f64]) -> NoisyHistogram {
        NoisyHistogram {
            group: spec.attributes[i].clone(),
            noisy_counts: counts.to_vec(),
            n_declared: 100,
            epsilon_spent: 1.0,
        }
    }

    #[test]
    fn evaluate_audit_composes() {
        let s = spec(0.25);
        let hs = [noisy(&s, 0, &[30.0, 70.0]), noisy(&s, 1, &[50.0, 50.0])];
        let r = evaluate_audit(&s, &hs).unwrap();
        assert!((r.efg - 0.2).abs() < 1e-12);
        assert!(r.passed);
        assert_eq!(r.mode, EstimateKind::Noisy);
        assert_eq!(r.per_group_n["a1"], 100);

        let r = evaluate_audit(&spec(0.19), &hs).unwrap();
        assert!(!r.passed);

        assert!(matches!(
            evaluate_audit(&s, &hs[..1]),
            Err(Error::TooFewGroups { .. })
        ));

        // order of the histograms does not matter
        let swapped = [hs[1].clone(), hs[0].clone()];
        assert_eq!(evaluate_audit(&s, &swapped).unwrap(), evaluate_audit(&s, &hs).unwrap());
    }

    #[test]
    fn audit_spec_validation() {
        let d = ScoreDomain::discrete(2).unwrap();
        assert!(AuditSpec::new(0.2, 0.05, 0.1, &["a", "b"], d.clone()).is_err());
        assert!(AuditSpec::new(0.2, 0.05, 1.0, &["a"], d.clone()).is_err());
        assert!(AuditSpec::new(0.2, 0.05, 1.0, &["a", "a"], d.clone()).is_err());
        assert!(AuditSpec::new(0.0, 0.05, 1.0, &["a", "b"], d.clone()).is_err());
        assert!(AuditSpec::new(0.2, 1.0, 1.0, &["a", "b"], d).is_err());
    }

    #[test]
    fn domain_binning() {
        let d = ScoreDomain::continuous(vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(d.size(), 3);
        assert_eq!(d.bin_of(-3.0), 0);
        assert_eq!(d.bin_of(0.25), 1);
        assert_eq!(d.bin_of(0.49), 1);
        assert_eq!(d.bin_of(1.0), 2);
        assert_eq!(d.bin_of(7.0), 2);
        assert_eq!(d.unit_edges(), vec![0.0, 0.25, 0.5, 1.0]);
        assert!(ScoreDomain::continuous(vec![0.0, 0.0]).is_err());
        assert!(ScoreDomain::discrete(0).is_err());
        assert_eq!(ScoreDomain::discrete(4).unwrap().unit_edges()[1], 0.25);
    }

    fn arb_dists(groups: usize, bins: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0u32..50, bins), groups).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let total: u32 = r.iter().sum::<u32>().max(1);
                    r.into_iter().map(|c| c as f64 / total as f64).collect()
                })
                .collect()
        })
    }

    fn as_dists(rows: &[Vec<f64>]) -> Vec<GroupDistribution> {
        rows.iter()
            .enumerate()
            .map(|(i, p)| dist(&format!("g{i}"), i, p))
            .collect()
    }

    proptest! {
        #[test]
        fn efg_is_permutation_invariant(rows in arb_dists(4, 5), rot in 0usize..4) {
            let domain = ScoreDomain::discrete(5).unwrap();
            let base = efg(&as_dists(&rows), &domain, 0.1).unwrap().efg;
            let mut rotated = rows.clone();
            rotated.rotate_left(rot);
            rotated.swap(0, 1);
            let other = efg(&as_dists(&rotated), &domain, 0.1).unwrap().efg;
            prop_assert_eq!(base, other);
        }

        #[test]
        fn efg_exact_in_unit_interval(rows in arb_dists(3, 4)) {
            let domain = ScoreDomain::discrete(4).unwrap();
            let r = efg(&as_dists(&rows), &domain, 0.1).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.efg));
            let identical = rows.iter().all(|r| r == &rows[0]);
            prop_assert_eq!(r.efg == 0.0, identical);
        }

        #[test]
        fn efg_is_one_lipschitz(
            rows in arb_dists(3, 4),
            which in 0usize..3,
            bumps in prop::collection::vec(-0.1f64..0.1, 4),
        ) {
            let domain = ScoreDomain::discrete(4).unwrap();
            let base = efg(&as_dists(&rows), &domain, 0.1).unwrap().efg;
            let mut perturbed = rows.clone();
            for (p, b) in perturbed[which].iter_mut().zip(&bumps) {
                *p += b;
            }
            let eta = bumps.iter().fold(0.0f64, |m, b| m.max(b.abs()));
            let moved = efg(&as_dists(&perturbed), &domain, 0.1).unwrap().efg;
            prop_assert!((moved - base).abs() <= eta + 1e-12);
        }

        #[test]
        fn cdf_gap_bounded_by_bin_gap(rows in arb_dists(3, 6)) {
            let discrete = ScoreDomain::discrete(6).unwrap();
            let continuous = ScoreDomain::equal_width(0.0, 1.0, 6).unwrap();
            let d = as_dists(&rows);
            let bin_gap = efg(&d, &discrete, 0.1).unwrap().efg;
            let cdf_gap = efg_cdf(&d, &continuous, 0.1).unwrap().efg;
            prop_assert!(cdf_gap <= 5.0 * bin_gap + 1e-12);
            if bin_gap == 0.0 {
                prop_assert_eq!(cdf_gap, 0.0);
            }
        }

        #[test]
        fn empirical_sums_to_one(counts in prop::collection::vec(0u64..10_000, 1..20)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let h = ScoreHistogram::new(AttributeId::new("a", 0), counts.clone());
            let sum: f64 = empirical_distribution(&h).unwrap().probabilities.iter().sum();
            prop_assert!((sum - 1.0).abs() <= counts.len() as f64 * f64::EPSILON);
        }
    }
}
