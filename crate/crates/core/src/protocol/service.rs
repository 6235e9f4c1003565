use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{encode, ErrorCode, Request, Response};
use crate::dp::{check_epsilon, privatize_histogram, LaplaceNoiser, PersistentLedger};
use crate::error::{Error, Result};
use crate::fairness::{AttributeId, NoisyHistogram, ScoreDomain};
use crate::harness::DomainConfig;
use crate::platform::{
    generate_population, score_audience, EstimatorConfig, Population, PopulationModel, UserRecord,
};
use crate::seed::{stream, SeedPath};

/// Users for the platform, either a population file or generated at startup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PopulationSource {
    File(PathBuf),
    Synthetic(SyntheticPopulation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPopulation {
    pub groups: Vec<String>,
    pub size: usize,
    #[serde(default = "half")]
    pub qualification_rate: f64,
}

fn half() -> f64 {
    0.5
}

/// Platform service configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_address")]
    pub address: String,
    #[serde(default)]
    pub seed: u64,
    pub budget_per_auditor: f64,
    pub ledger_dir: PathBuf,
    /// JSON-lines request/response log.
    pub log: Option<PathBuf>,
    pub population: PopulationSource,
    pub domain: DomainConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
}

fn default_address() -> String {
    "127.0.0.1:7878".into()
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a config file; relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.ledger_dir);
        if let Some(log) = config.log.as_mut() {
            resolve(log);
        }
        if let PopulationSource::File(p) = &mut config.population {
            resolve(p);
        }
        Ok(config)
    }
}

/// Seeds for the `seq`-th query of `auditor_id`: `(score, noise)`.
pub fn query_seeds(master: u64, auditor_id: &str, seq: u64) -> (u64, u64) {
    let root = SeedPath::new(master);
    (
        root.child(stream::SCORE).child(auditor_id).index(seq).seed(),
        root.child(stream::NOISE).child(auditor_id).index(seq).seed(),
    )
}

/// Scores one single-group audience and privatizes the histogram.
pub fn release_histogram(
    estimator: &EstimatorConfig,
    domain: &ScoreDomain,
    audience: &[UserRecord],
    epsilon: f64,
    (score_seed, noise_seed): (u64, u64),
) -> Result<NoisyHistogram> {
    let mut rng = SeedPath::new(score_seed).rng();
    let raw = score_audience(estimator, audience, domain, &mut rng)?;
    let mut noiser = LaplaceNoiser::for_epsilon(epsilon, noise_seed)?;
    privatize_histogram(&raw, epsilon, &mut noiser)
}

#[derive(Debug)]
struct Audience {
    group: AttributeId,
    users: Vec<UserRecord>,
}

#[derive(Debug, Default)]
struct State {
    audiences: HashMap<(String, String), Arc<Audience>>,
    ledgers: HashMap<String, PersistentLedger>,
}

/// The platform side of an audit: holds the users, the estimator and one
/// persistent budget ledger per auditor. Safe to share between connections.
#[derive(Debug)]
pub struct PlatformService {
    population: Population,
    domain: ScoreDomain,
    estimator: EstimatorConfig,
    seed: u64,
    budget: f64,
    ledger_dir: PathBuf,
    state: Mutex<State>,
    log: Option<Mutex<File>>,
}

fn fail(code: ErrorCode, message: impl Into<String>) -> Response {
    Response::error(code, message)
}

fn valid_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && !s.starts_with('.')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl PlatformService {
    pub fn new(config: &ServiceConfig) -> Result<Self> {
        let domain = config.domain.build()?;
        let population = match &config.population {
            PopulationSource::File(path) => {
                let file = File::open(path)
                    .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                Population::import(BufReader::new(file))?
            }
            PopulationSource::Synthetic(s) => {
                let model = PopulationModel::balanced(&s.groups, s.qualification_rate)?;
                let seed = SeedPath::new(config.seed).child(stream::POPULATION).seed();
                generate_population(&model, s.size, seed)?
            }
        };
        Self::with_population(config, population, domain)
    }

    fn with_population(config: &ServiceConfig, population: Population, domain: ScoreDomain) -> Result<Self> {
        check_epsilon(config.budget_per_auditor)?;
        config
            .estimator
            .validate(&domain, population.model.groups.len())?;
        fs::create_dir_all(&config.ledger_dir)?;
        let log = match &config.log {
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                Some(Mutex::new(
                    OpenOptions::new().create(true).append(true).open(path)?,
                ))
            }
            None => None,
        };
        Ok(PlatformService {
            population,
            domain,
            estimator: config.estimator.clone(),
            seed: config.seed,
            budget: config.budget_per_auditor,
            ledger_dir: config.ledger_dir.clone(),
            state: Mutex::new(State::default()),
            log,
        })
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn domain(&self) -> &ScoreDomain {
        &self.domain
    }

    pub fn estimator(&self) -> &EstimatorConfig {
        &self.estimator
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ledger_path(&self, auditor_id: &str) -> PathBuf {
        self.ledger_dir.join(format!("{auditor_id}.ledger"))
    }

    /// Decodes, handles, logs and encodes one request line.
    pub fn handle_line(&self, line: &str, peer: &str) -> String {
        let response = match super::decode::<Request>(line) {
            Ok(request) => self.handle(request),
            Err(err) => err,
        };
        let out = encode(&response);
        self.log_exchange(peer, line, &out);
        out
    }

    fn log_exchange(&self, peer: &str, request: &str, response: &str) {
        let Some(log) = &self.log else { return };
        let ts_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let request: Value =
            serde_json::from_str(request).unwrap_or_else(|_| Value::String(request.to_string()));
        let response: Value = serde_json::from_str(response).unwrap_or(Value::Null);
        let entry = json!({ "ts_ms": ts_ms, "peer": peer, "request": request, "response": response });
        let mut file = log.lock().unwrap_or_else(|p| p.into_inner());
        let _ = writeln!(file, "{entry}");
    }

    pub fn handle(&self, request: Request) -> Response {
        match request {
            Request::UploadAudience {
                auditor_id,
                audience_handle,
                group,
                user_ids,
            } => self.upload(auditor_id, audience_handle, &group, &user_ids),
            Request::QueryRelevance {
                auditor_id,
                audience_handle,
                epsilon,
                ..
            } => self.query(&auditor_id, audience_handle, epsilon),
            Request::Budget { auditor_id } => self.budget_status(&auditor_id),
            Request::SampleAudience { .. } => fail(
                ErrorCode::Unimplemented,
                "platform-assisted audience sampling is reserved but not implemented",
            ),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn check_auditor(auditor_id: &str) -> Result<(), Response> {
        if valid_identifier(auditor_id) {
            Ok(())
        } else {
            Err(fail(
                ErrorCode::InvalidAuditor,
                format!("auditor id `{auditor_id}` must be 1-128 chars of [A-Za-z0-9_.-]"),
            ))
        }
    }

    fn upload(&self, auditor_id: String, handle: String, group: &str, user_ids: &[String]) -> Response {
        if let Err(e) = Self::check_auditor(&auditor_id) {
            return e;
        }
        if handle.is_empty() || handle.contains(['\n', '\r']) {
            return fail(ErrorCode::InvalidHandle, "audience handle must be a non-empty single line");
        }
        let Some(attribute) = self.population.attribute(group) else {
            return fail(ErrorCode::UnknownGroup, format!("unknown group `{group}`"));
        };
        let mut seen = HashSet::with_capacity(user_ids.len());
        if let Some(dup) = user_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return fail(ErrorCode::DuplicateUserIds, format!("user id `{dup}` appears more than once"));
        }
        let mut users = Vec::with_capacity(user_ids.len());
        for id in user_ids {
            if let Some(user) = self.population.get(id) {
                if user.attribute != attribute {
                    return fail(
                        ErrorCode::MixedGroup,
                        format!("audience for `{group}` contains a member of another group"),
                    );
                }
                users.push(user.clone());
            }
        }
        let matched = users.len() as u64;
        let mut state = self.lock();
        let key = (auditor_id, handle);
        if state.audiences.contains_key(&key) {
            return fail(
                ErrorCode::DuplicateHandle,
                format!("audience handle `{}` already exists", key.1),
            );
        }
        let audience_handle = key.1.clone();
        state.audiences.insert(key, Arc::new(Audience { group: attribute, users }));
        Response::UploadAudienceOk {
            accepted: user_ids.len() as u64,
            matched,
            audience_handle,
        }
    }

    fn ledger<'s>(&self, state: &'s mut State, auditor_id: &str) -> Result<&'s mut PersistentLedger> {
        if !state.ledgers.contains_key(auditor_id) {
            let ledger = PersistentLedger::open(self.ledger_path(auditor_id), auditor_id, self.budget)?;
            state.ledgers.insert(auditor_id.to_string(), ledger);
        }
        Ok(state.ledgers.get_mut(auditor_id).expect("inserted above"))
    }

    fn query(&self, auditor_id: &str, handle: String, epsilon: f64) -> Response {
        if check_epsilon(epsilon).is_err() {
            return fail(ErrorCode::InvalidEpsilon, format!("epsilon must be finite and > 0, got {epsilon}"));
        }
        if let Err(e) = Self::check_auditor(auditor_id) {
            return e;
        }
        let (audience, seq, remaining) = {
            let mut state = self.lock();
            let Some(audience) = state
                .audiences
                .get(&(auditor_id.to_string(), handle.clone()))
                .cloned()
            else {
                return fail(ErrorCode::UnknownAudience, format!("unknown audience handle `{handle}`"));
            };
            if audience.users.is_empty() {
                return fail(ErrorCode::EmptyAudience, format!("audience `{handle}` matched no users"));
            }
            let ledger = match self.ledger(&mut state, auditor_id) {
                Ok(l) => l,
                Err(e) => return fail(ErrorCode::Internal, e.to_string()),
            };
            let seq = ledger.ledger().entries().len() as u64;
            match ledger.charge(&format!("q{seq}"), epsilon) {
                Ok(_) => {}
                Err(Error::BudgetExhausted { requested, remaining }) => {
                    return Response::Error {
                        code: ErrorCode::BudgetExhausted,
                        message: format!(
                            "privacy budget exhausted: requested {requested}, remaining {remaining}"
                        ),
                        remaining_budget: Some(remaining),
                    }
                }
                Err(e) => return fail(ErrorCode::Internal, e.to_string()),
            }
            (audience, seq, ledger.ledger().remaining())
        };
        let seeds = query_seeds(self.seed, auditor_id, seq);
        match release_histogram(&self.estimator, &self.domain, &audience.users, epsilon, seeds) {
            Ok(h) => Response::QueryRelevanceOk {
                group: audience.group.label.clone(),
                noisy_counts: h.noisy_counts,
                n_declared: h.n_declared,
                epsilon_spent: h.epsilon_spent,
                remaining_budget: remaining,
            },
            Err(e) => fail(ErrorCode::Internal, e.to_string()),
        }
    }

    fn budget_status(&self, auditor_id: &str) -> Response {
        if let Err(e) = Self::check_auditor(auditor_id) {
            return e;
        }
        let mut state = self.lock();
        match self.ledger(&mut state, auditor_id) {
            Ok(l) => {
                let l = l.ledger();
                Response::BudgetOk {
                    auditor_id: auditor_id.to_string(),
                    total: l.total_epsilon(),
                    spent: l.spent(),
                    remaining: l.remaining(),
                }
            }
            Err(e) => fail(ErrorCode::Internal, e.to_string()),
        }
    }
}
