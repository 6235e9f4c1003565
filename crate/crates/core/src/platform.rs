//! Synthetic platform: users, relevance estimators and audience scoring.
//!
//! Each user carries a latent trait drawn from the standard logistic
//! distribution. The estimator's unbiased part `T(x)` is a deterministic
//! transform of that trait onto the score bins, so the distribution of `T`
//! over the population is known in closed form. Group-dependent bias is then
//! applied on the bin scale:
//!
//! * additive: `R = T + b_a`
//! * multiplicative: `R = T · b_a` on the 1-based score value, rounded
//! * random additive: `R = T + B_a` with `B_a` a discrete random offset
//!
//! Results that leave the score range are clipped to the end bins.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dp::open_unit;
use crate::error::{Error, Result};
use crate::fairness::{AttributeId, ScoreDomain, ScoreHistogram};
use crate::seed::{stream, SeedPath};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        (p / (1.0 - p)).ln()
    }
}

/// Draws from the standard logistic distribution.
pub fn sample_logistic<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    logit(open_unit(rng.next_u64()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub attribute: AttributeId,
    pub qualified: bool,
    pub latent_trait: f64,
}

/// Distribution of the unbiased score `T(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseDistribution {
    /// Unit score `σ(location + temperature · trait)`, binned by the domain's
    /// edges. `temperature = 1, location = 0` is uniform on [0, 1]; smaller
    /// temperatures concentrate mass around `σ(location)`.
    Logistic { location: f64, temperature: f64 },
    /// Explicit bin probabilities, realised by inverting the cumulative sum at
    /// `σ(trait)`.
    Categorical { probabilities: Vec<f64> },
}

impl Default for BaseDistribution {
    fn default() -> Self {
        BaseDistribution::Logistic {
            location: 0.0,
            temperature: 0.5,
        }
    }
}

impl BaseDistribution {
    fn validate(&self, domain: &ScoreDomain) -> Result<()> {
        match self {
            BaseDistribution::Logistic {
                location,
                temperature,
            } => {
                if !location.is_finite() || !(temperature.is_finite() && *temperature > 0.0) {
                    return Err(Error::InvalidParameter(
                        "logistic base needs finite location and temperature > 0".into(),
                    ));
                }
            }
            BaseDistribution::Categorical { probabilities } => {
                if probabilities.len() != domain.size() {
                    return Err(Error::GroupCountMismatch {
                        expected: domain.size(),
                        found: probabilities.len(),
                    });
                }
                let sum: f64 = probabilities.iter().sum();
                if probabilities.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(
                        "categorical probabilities must be >= 0 and sum to 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Bin of `T(x)` for a user with the given trait.
    pub fn bin(&self, latent_trait: f64, domain: &ScoreDomain) -> usize {
        self.compile(domain).bin(latent_trait)
    }

    fn compile(&self, domain: &ScoreDomain) -> CompiledBase {
        match self {
            BaseDistribution::Logistic {
                location,
                temperature,
            } => {
                let edges = domain.unit_edges();
                CompiledBase::Logistic {
                    location: *location,
                    temperature: *temperature,
                    interior: edges[1..edges.len() - 1].to_vec(),
                }
            }
            BaseDistribution::Categorical { probabilities } => {
                let mut acc = 0.0;
                let mut cumulative: Vec<f64> = probabilities
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect();
                cumulative.pop();
                CompiledBase::Categorical { cumulative }
            }
        }
    }

    /// Closed-form `Pr[T = y]` for a standard-logistic trait.
    pub fn pmf(&self, domain: &ScoreDomain) -> Vec<f64> {
        match self {
            BaseDistribution::Logistic {
                location,
                temperature,
            } => {
                let cdf = |w: f64| {
                    if w <= 0.0 {
                        0.0
                    } else if w >= 1.0 {
                        1.0
                    } else {
                        sigmoid((logit(w) - location) / temperature)
                    }
                };
                domain
                    .unit_edges()
                    .windows(2)
                    .map(|w| cdf(w[1]) - cdf(w[0]))
                    .collect()
            }
            BaseDistribution::Categorical { probabilities } => probabilities.clone(),
        }
    }
}

#[derive(Debug, Clone)]
enum CompiledBase {
    Logistic {
        location: f64,
        temperature: f64,
        interior: Vec<f64>,
    },
    /// Cumulative probabilities without the final 1.
    Categorical { cumulative: Vec<f64> },
}

impl CompiledBase {
    fn bin(&self, latent_trait: f64) -> usize {
        match self {
            CompiledBase::Logistic {
                location,
                temperature,
                interior,
            } => {
                let u = sigmoid(location + temperature * latent_trait);
                interior.partition_point(|e| *e <= u)
            }
            CompiledBase::Categorical { cumulative } => {
                let u = sigmoid(latent_trait);
                cumulative.partition_point(|c| *c <= u)
            }
        }
    }
}

/// An estimator bound to a score domain, ready to score many users.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    base: CompiledBase,
    bias: &'a BiasModel,
    bins: usize,
}

impl<'a> Scorer<'a> {
    pub fn new(config: &'a EstimatorConfig, domain: &ScoreDomain) -> Self {
        Scorer {
            base: config.base.compile(domain),
            bias: &config.bias,
            bins: domain.size(),
        }
    }

    pub fn score<R: RngCore + ?Sized>(&self, user: &UserRecord, rng: &mut R) -> usize {
        let base = self.base.bin(user.latent_trait);
        self.bias.apply(base, user.attribute.index, self.bins, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasOutcome {
    pub offset: i64,
    pub probability: f64,
}

/// Group-dependent bias, indexed by attribute index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum BiasModel {
    #[default]
    None,
    /// Constant shift in bins per group.
    Additive { shifts: Vec<i64> },
    /// Constant multiplier per group on the 1-based score value.
    Multiplicative { factors: Vec<f64> },
    /// Discrete random shift per group.
    RandomAdditive { distributions: Vec<Vec<BiasOutcome>> },
}

impl BiasModel {
    fn validate(&self, groups: usize) -> Result<()> {
        let check_len = |len: usize| {
            if len == groups {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "bias model lists {len} groups, expected {groups}"
                )))
            }
        };
        match self {
            BiasModel::None => Ok(()),
            BiasModel::Additive { shifts } => check_len(shifts.len()),
            BiasModel::Multiplicative { factors } => {
                check_len(factors.len())?;
                if factors.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
                    return Err(Error::InvalidParameter(
                        "multiplicative bias factors must be finite and > 0".into(),
                    ));
                }
                Ok(())
            }
            BiasModel::RandomAdditive { distributions } => {
                check_len(distributions.len())?;
                for d in distributions {
                    let sum: f64 = d.iter().map(|o| o.probability).sum();
                    if d.is_empty()
                        || d.iter().any(|o| o.probability.is_nan() || o.probability < 0.0)
                        || (sum - 1.0).abs() > 1e-9
                    {
                        return Err(Error::InvalidParameter(
                            "random bias outcomes must be non-empty with probabilities summing to 1"
                                .into(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    fn draw_offset<R: RngCore + ?Sized>(outcomes: &[BiasOutcome], rng: &mut R) -> i64 {
        let u: f64 = open_unit(rng.next_u64());
        let mut acc = 0.0;
        for o in outcomes {
            acc += o.probability;
            if u < acc {
                return o.offset;
            }
        }
        outcomes.last().map_or(0, |o| o.offset)
    }

    /// Applies the bias for `group` to base bin `base`, clipping to `0..bins`.
    pub fn apply<R: RngCore + ?Sized>(
        &self,
        base: usize,
        group: usize,
        bins: usize,
        rng: &mut R,
    ) -> usize {
        let last = bins as i64 - 1;
        let shifted = match self {
            BiasModel::None => base as i64,
            BiasModel::Additive { shifts } => base as i64 + shifts[group],
            BiasModel::Multiplicative { factors } => {
                ((base + 1) as f64 * factors[group]).round() as i64 - 1
            }
            BiasModel::RandomAdditive { distributions } => {
                base as i64 + Self::draw_offset(&distributions[group], rng)
            }
        };
        shifted.clamp(0, last) as usize
    }
}

/// The platform's relevance estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub base: BaseDistribution,
    #[serde(default)]
    pub bias: BiasModel,
}

impl EstimatorConfig {
    pub fn validate(&self, domain: &ScoreDomain, groups: usize) -> Result<()> {
        self.base.validate(domain)?;
        self.bias.validate(groups)
    }

    /// Exact `Pr[R = y]` for qualified members of `group`, by summing over base
    /// bins and bias outcomes.
    pub fn analytic_distribution(&self, domain: &ScoreDomain, group: usize) -> Vec<f64> {
        let bins = domain.size();
        let base = self.base.pmf(domain);
        let mut out = vec![0.0; bins];
        let last = bins as i64 - 1;
        // deterministic transforms never touch the rng
        let mut unused = crate::seed::AuditRng::seed_from_u64(0);
        for (t, p) in base.iter().enumerate() {
            match &self.bias {
                BiasModel::RandomAdditive { distributions } => {
                    for o in &distributions[group] {
                        let y = (t as i64 + o.offset).clamp(0, last) as usize;
                        out[y] += p * o.probability;
                    }
                }
                other => {
                    let y = other.apply(t, group, bins, &mut unused);
                    out[y] += p;
                }
            }
        }
        out
    }

    /// True fairness gap `max |P_{a1,y} − P_{a2,y}|` between the analytic
    /// group distributions.
    pub fn true_gap(&self, domain: &ScoreDomain, groups: usize) -> f64 {
        let dists: Vec<Vec<f64>> = (0..groups)
            .map(|g| self.analytic_distribution(domain, g))
            .collect();
        let mut gap = 0.0f64;
        for i in 0..groups {
            for j in (i + 1)..groups {
                for (x, y) in dists[i].iter().zip(&dists[j]) {
                    gap = gap.max((x - y).abs());
                }
            }
        }
        gap
    }
}

/// Scores one user: base bin from the latent trait, then the group's bias.
pub fn score<R: RngCore + ?Sized>(
    config: &EstimatorConfig,
    domain: &ScoreDomain,
    user: &UserRecord,
    rng: &mut R,
) -> usize {
    Scorer::new(config, domain).score(user, rng)
}

/// Scores a single-group audience into a histogram. Raw scores stay inside.
pub fn score_audience<R: RngCore + ?Sized>(
    config: &EstimatorConfig,
    audience: &[UserRecord],
    domain: &ScoreDomain,
    rng: &mut R,
) -> Result<ScoreHistogram> {
    let first = audience.first().ok_or(Error::EmptyAudience)?;
    if let Some(other) = audience.iter().find(|u| u.attribute != first.attribute) {
        return Err(Error::MixedGroupAudience {
            first: first.attribute.label.clone(),
            other: other.attribute.label.clone(),
        });
    }
    let scorer = Scorer::new(config, domain);
    let mut hist = ScoreHistogram::zeros(first.attribute.clone(), domain.size());
    for user in audience {
        hist.counts[scorer.score(user, rng)] += 1;
    }
    Ok(hist)
}

/// One attribute value's share of the population and its qualification rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub label: String,
    pub share: f64,
    pub qualification_rate: f64,
}

/// Generative model for users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    pub groups: Vec<GroupSpec>,
    /// Logit-scale coupling between trait and qualification; 0 makes them independent.
    #[serde(default)]
    pub qualification_tilt: f64,
}

impl PopulationModel {
    pub fn new(groups: Vec<GroupSpec>, qualification_tilt: f64) -> Result<Self> {
        let model = PopulationModel {
            groups,
            qualification_tilt,
        };
        model.validate()?;
        Ok(model)
    }

    /// Equal shares and a common qualification rate.
    pub fn balanced<S: AsRef<str>>(labels: &[S], qualification_rate: f64) -> Result<Self> {
        let share = 1.0 / labels.len().max(1) as f64;
        Self::new(
            labels
                .iter()
                .map(|l| GroupSpec {
                    label: l.as_ref().to_string(),
                    share,
                    qualification_rate,
                })
                .collect(),
            0.0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::InvalidMix("no groups".into()));
        }
        crate::fairness::attributes_from_labels(
            &self.groups.iter().map(|g| g.label.as_str()).collect::<Vec<_>>(),
        )
        .map_err(|e| Error::InvalidMix(e.to_string()))?;
        if self
            .groups
            .iter()
            .any(|g| !(0.0..=1.0).contains(&g.share) || !(0.0..=1.0).contains(&g.qualification_rate))
        {
            return Err(Error::InvalidMix(
                "shares and qualification rates must lie in [0, 1]".into(),
            ));
        }
        let total: f64 = self.groups.iter().map(|g| g.share).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMix(format!("shares sum to {total}, not 1")));
        }
        if !self.qualification_tilt.is_finite() {
            return Err(Error::InvalidMix("qualification tilt must be finite".into()));
        }
        Ok(())
    }

    pub fn attributes(&self) -> Vec<AttributeId> {
        self.groups
            .iter()
            .enumerate()
            .map(|(i, g)| AttributeId::new(g.label.clone(), i))
            .collect()
    }

    fn qualification_probability(&self, group: usize, latent: f64) -> f64 {
        let rate = self.groups[group].qualification_rate;
        if self.qualification_tilt == 0.0 {
            rate
        } else {
            sigmoid(logit(rate) + self.qualification_tilt * latent)
        }
    }

    fn draw_group<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        let u = open_unit(rng.next_u64());
        let mut acc = 0.0;
        for (i, g) in self.groups.iter().enumerate() {
            acc += g.share;
            if u < acc {
                return i;
            }
        }
        // rounding slack in the shares
        self.groups.iter().rposition(|g| g.share > 0.0).unwrap_or(0)
    }

    pub fn draw_user<R: RngCore + ?Sized>(&self, user_id: String, rng: &mut R) -> UserRecord {
        let latent_trait = sample_logistic(rng);
        let group = self.draw_group(rng);
        let qualified = rng.random::<f64>() < self.qualification_probability(group, latent_trait);
        UserRecord {
            user_id,
            attribute: AttributeId::new(self.groups[group].label.clone(), group),
            qualified,
            latent_trait,
        }
    }

    /// Fresh i.i.d. qualified members of `group`, drawn from the model rather
    /// than from a finite population.
    pub fn draw_qualified<R: RngCore + ?Sized>(
        &self,
        group: &AttributeId,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<UserRecord>> {
        let spec = self
            .groups
            .get(group.index)
            .filter(|g| g.label == group.label)
            .ok_or_else(|| Error::UnknownAttribute(group.label.clone()))?;
        if spec.qualification_rate <= 0.0 && n > 0 {
            return Err(Error::InsufficientPopulation {
                requested: n,
                available: 0,
            });
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let latent_trait = sample_logistic(rng);
            let accept = self.qualification_tilt == 0.0
                || rng.random::<f64>() < self.qualification_probability(group.index, latent_trait);
            if accept {
                out.push(UserRecord {
                    user_id: format!("iid-{}", out.len()),
                    attribute: group.clone(),
                    qualified: true,
                    latent_trait,
                });
            }
        }
        Ok(out)
    }
}

/// A finite user base with stratum indices for sampling.
#[derive(Debug, Clone)]
pub struct Population {
    pub model: PopulationModel,
    pub seed: u64,
    users: Vec<UserRecord>,
    by_id: HashMap<String, usize>,
    /// `strata[group][qualified as usize]`
    strata: Vec<[Vec<usize>; 2]>,
}

impl PartialEq for Population {
    fn eq(&self, other: &Self) -> bool {
        self.model == other.model && self.seed == other.seed && self.users == other.users
    }
}

impl Population {
    pub fn from_users(model: PopulationModel, seed: u64, users: Vec<UserRecord>) -> Result<Self> {
        model.validate()?;
        let mut strata = vec![[Vec::new(), Vec::new()]; model.groups.len()];
        let mut by_id = HashMap::with_capacity(users.len());
        for (i, u) in users.iter().enumerate() {
            if model
                .groups
                .get(u.attribute.index)
                .is_none_or(|g| g.label != u.attribute.label)
            {
                return Err(Error::UnknownAttribute(u.attribute.label.clone()));
            }
            if !u.latent_trait.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "user `{}` has a non-finite trait",
                    u.user_id
                )));
            }
            if by_id.insert(u.user_id.clone(), i).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "duplicate user id `{}`",
                    u.user_id
                )));
            }
            strata[u.attribute.index][usize::from(u.qualified)].push(i);
        }
        Ok(Population {
            model,
            seed,
            users,
            by_id,
            strata,
        })
    }

    pub fn users(&self) -> &[UserRecord] {
        &self.users
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn get(&self, user_id: &str) -> Option<&UserRecord> {
        self.by_id.get(user_id).map(|&i| &self.users[i])
    }

    pub fn attribute(&self, label: &str) -> Option<AttributeId> {
        self.model
            .groups
            .iter()
            .position(|g| g.label == label)
            .map(|i| AttributeId::new(label, i))
    }

    /// Number of users in a group, optionally only the qualified ones.
    pub fn stratum_size(&self, group: &AttributeId, qualified_only: bool) -> usize {
        self.strata.get(group.index).map_or(0, |s| {
            if qualified_only {
                s[1].len()
            } else {
                s[0].len() + s[1].len()
            }
        })
    }

    /// Writes the population as JSON lines: one header, then one user per line.
    pub fn export<W: Write>(&self, mut out: W) -> Result<()> {
        let header = PopulationHeader {
            format: POPULATION_FORMAT.to_string(),
            version: 1,
            seed: self.seed,
            model: self.model.clone(),
        };
        writeln!(out, "{}", to_json(&header)?)?;
        for u in &self.users {
            let line = UserLine {
                user_id: u.user_id.clone(),
                attribute: u.attribute.label.clone(),
                qualified: u.qualified,
                latent_trait: u.latent_trait,
            };
            writeln!(out, "{}", to_json(&line)?)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn import<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Config("population file is empty".into()))?;
        let header: PopulationHeader = serde_json::from_str(&header?)
            .map_err(|e| Error::Config(format!("population header (line 1): {e}")))?;
        if header.format != POPULATION_FORMAT || header.version != 1 {
            return Err(Error::Config(format!(
                "unsupported population format {} v{}",
                header.format, header.version
            )));
        }
        let labels: HashMap<&str, usize> = header
            .model
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| (g.label.as_str(), i))
            .collect();
        let mut users = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: UserLine = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("population line {}: {e}", i + 1)))?;
            let index = *labels
                .get(rec.attribute.as_str())
                .ok_or_else(|| Error::UnknownAttribute(rec.attribute.clone()))?;
            users.push(UserRecord {
                user_id: rec.user_id,
                attribute: AttributeId::new(rec.attribute, index),
                qualified: rec.qualified,
                latent_trait: rec.latent_trait,
            });
        }
        Population::from_users(header.model.clone(), header.seed, users)
    }
}

const POPULATION_FORMAT: &str = "ppaudit-population";

#[derive(Serialize, Deserialize)]
struct PopulationHeader {
    format: String,
    version: u32,
    seed: u64,
    model: PopulationModel,
}

#[derive(Serialize, Deserialize)]
struct UserLine {
    user_id: String,
    attribute: String,
    qualified: bool,
    latent_trait: f64,
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Io(e.to_string()))
}

/// Generates `size` users independently from `model`, reproducibly from `seed`.
pub fn generate_population(model: &PopulationModel, size: usize, seed: u64) -> Result<Population> {
    model.validate()?;
    if size == 0 {
        return Err(Error::InvalidParameter("population size must be > 0".into()));
    }
    let mut rng = SeedPath::new(seed).child(stream::POPULATION).rng();
    let users = (0..size)
        .map(|i| model.draw_user(format!("u{i:09}"), &mut rng))
        .collect();
    Population::from_users(model.clone(), seed, users)
}

/// Uniform sample without replacement from one group's stratum.
pub fn sample_audience(
    pop: &Population,
    group: &AttributeId,
    qualified_only: bool,
    n: usize,
    seed: u64,
) -> Result<Vec<UserRecord>> {
    let stratum = pop
        .strata
        .get(group.index)
        .filter(|_| pop.model.groups[group.index].label == group.label)
        .ok_or_else(|| Error::UnknownAttribute(group.label.clone()))?;
    let pool: std::borrow::Cow<'_, [usize]> = if qualified_only {
        std::borrow::Cow::Borrowed(&stratum[1])
    } else {
        let mut all: Vec<usize> = stratum[0].iter().chain(&stratum[1]).copied().collect();
        all.sort_unstable();
        std::borrow::Cow::Owned(all)
    };
    if n > pool.len() {
        return Err(Error::InsufficientPopulation {
            requested: n,
            available: pool.len(),
        });
    }
    let mut rng = SeedPath::new(seed).child(stream::AUDIENCE).rng();
    Ok(rand::seq::index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pop.users[pool[i]].clone())
        .collect())
}
