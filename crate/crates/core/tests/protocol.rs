use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::thread;

use ppaudit_core::protocol::{
    client_audit, encode, AuditClient, AudienceUpload, ClientError, Content, ErrorCode,
    PlatformService, Request, Server, ServerHandle, ServiceConfig, TcpTransport,
};
use ppaudit_core::{AuditSpec, ScoreDomain};
use serde_json::Value;

fn config(dir: &Path, extra: &str) -> ServiceConfig {
    config_with_budget(dir, 1.0, extra)
}

fn config_with_budget(dir: &Path, budget: f64, extra: &str) -> ServiceConfig {
    ServiceConfig::from_toml(&format!(
        r#"
address = "127.0.0.1:0"
seed = 11
budget_per_auditor = {budget:?}
ledger_dir = "{}"
log = "{}"
population = {{ groups = ["a1", "a2"], size = 8000 }}
domain = {{ kind = "discrete", bins = 10 }}
{extra}
"#,
        dir.join("ledgers").display(),
        dir.join("requests.jsonl").display()
    ))
    .unwrap()
}

fn start(config: &ServiceConfig) -> (Arc<PlatformService>, ServerHandle) {
    let service = Arc::new(PlatformService::new(config).unwrap());
    let server = Server::bind(Arc::clone(&service), &config.address).unwrap();
    (service, server.spawn().unwrap())
}

fn qualified_ids(service: &PlatformService, group: &str, n: usize) -> Vec<String> {
    let ids: Vec<String> = service
        .population()
        .users()
        .iter()
        .filter(|u| u.attribute.label == group && u.qualified)
        .take(n)
        .map(|u| u.user_id.clone())
        .collect();
    assert_eq!(ids.len(), n, "population too small for the test");
    ids
}

fn content() -> Content {
    Content {
        id: "ad-1".into(),
        text: "summer sale".into(),
    }
}

fn keys(line: &str) -> BTreeSet<String> {
    let v: Value = serde_json::from_str(line).unwrap();
    v.as_object().unwrap().keys().cloned().collect()
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn upload_line(auditor: &str, handle: &str, group: &str, ids: Vec<String>) -> String {
    encode(&Request::UploadAudience {
        auditor_id: auditor.into(),
        audience_handle: handle.into(),
        group: group.into(),
        user_ids: ids,
    })
}

fn query_line(auditor: &str, handle: &str, epsilon: f64) -> String {
    encode(&Request::QueryRelevance {
        auditor_id: auditor.into(),
        audience_handle: handle.into(),
        content: content(),
        epsilon,
    })
}

#[test]
fn upload_full_match_at_planned_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let (service, server) = start(&cfg);
    // two groups of 8000 users hold about 2000 qualified each
    let ids: Vec<String> = service
        .population()
        .users()
        .iter()
        .filter(|u| u.attribute.label == "a1")
        .take(1879)
        .map(|u| u.user_id.clone())
        .collect();
    let mut client = AuditClient::new(TcpTransport::connect(server.addr()).unwrap(), "aud");
    assert_eq!(client.upload("big", "a1", &ids).unwrap(), (1879, 1879));
}

#[test]
fn responses_carry_only_released_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let (service, server) = start(&cfg);
    let mut t = TcpTransport::connect(server.addr()).unwrap();
    let ids = qualified_ids(&service, "a1", 200);

    let up = t.exchange_line(&upload_line("aud", "h", "a1", ids)).unwrap();
    assert_eq!(keys(&up), set(&["v", "type", "accepted", "matched", "audience_handle"]));

    let q = t.exchange_line(&query_line("aud", "h", 0.3)).unwrap();
    assert_eq!(
        keys(&q),
        set(&["v", "type", "group", "noisy_counts", "n_declared", "epsilon_spent", "remaining_budget"])
    );
    let v: Value = serde_json::from_str(&q).unwrap();
    let counts = v["noisy_counts"].as_array().unwrap();
    assert_eq!(counts.len(), 10);
    // Laplace noise makes integral values essentially impossible
    assert!(counts.iter().all(|c| c.as_f64().unwrap().fract() != 0.0));

    let b = t.exchange_line(&encode(&Request::Budget { auditor_id: "aud".into() })).unwrap();
    assert_eq!(keys(&b), set(&["v", "type", "auditor_id", "total", "spent", "remaining"]));

    let e = t.exchange_line(&query_line("aud", "nope", 0.3)).unwrap();
    assert_eq!(keys(&e), set(&["v", "type", "code", "message"]));

    for line in [&up, &q, &b, &e] {
        for forbidden in ["latent_trait", "\"counts\"", "score\"", "user_id\""] {
            assert!(!line.contains(forbidden), "{forbidden} leaked in {line}");
        }
    }
}

#[test]
fn malformed_messages_keep_the_connection_open() {
    let dir = tempfile::tempdir().unwrap();
    let (_service, server) = start(&config(dir.path(), ""));
    let mut t = TcpTransport::connect(server.addr()).unwrap();
    for garbage in ["{", "42", r#"{"v":1,"type":"launch"}"#, r#"{"type":"budget","auditor_id":"a"}"#] {
        let reply: Value = serde_json::from_str(&t.exchange_line(garbage).unwrap()).unwrap();
        assert_eq!(reply["type"], "error");
        assert_eq!(reply["code"], "malformed", "{garbage}");
    }
    let reply: Value = serde_json::from_str(
        &t.exchange_line(r#"{"v":7,"type":"budget","auditor_id":"a"}"#).unwrap(),
    )
    .unwrap();
    assert_eq!(reply["code"], "unsupported_version");
    let ok: Value = serde_json::from_str(
        &t.exchange_line(&encode(&Request::Budget { auditor_id: "a".into() })).unwrap(),
    )
    .unwrap();
    assert_eq!(ok["type"], "budget_ok");
    assert_eq!(ok["remaining"], 1.0);
}

#[test]
fn unknown_audience_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_service, server) = start(&config(dir.path(), ""));
    let mut client = AuditClient::new(TcpTransport::connect(server.addr()).unwrap(), "aud");
    match client.query("ghost", &content(), 0.2) {
        Err(ClientError::Server { code, .. }) => assert_eq!(code, ErrorCode::UnknownAudience),
        other => panic!("{other:?}"),
    }
    // no budget is spent on a failed lookup
    assert_eq!(client.budget().unwrap().1, 0.0);
}

#[test]
fn non_positive_epsilon_never_reaches_the_server() {
    let dir = tempfile::tempdir().unwrap();
    let (service, server) = start(&config(dir.path(), ""));
    let mut client = AuditClient::new(TcpTransport::connect(server.addr()).unwrap(), "aud");
    client.upload("h", "a1", &qualified_ids(&service, "a1", 10)).unwrap();
    for eps in [0.0, -1.0, f64::NAN] {
        assert!(matches!(client.query("h", &content(), eps), Err(ClientError::Audit(_))));
    }
    let log = std::fs::read_to_string(dir.path().join("requests.jsonl")).unwrap();
    assert!(!log.contains("query_relevance"));
    assert!(!service.ledger_path("aud").exists() || std::fs::read_to_string(service.ledger_path("aud")).unwrap().is_empty());
}

#[test]
fn budget_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let (service, server) = start(&cfg);
    let ids = qualified_ids(&service, "a2", 100);
    {
        let mut client = AuditClient::new(TcpTransport::connect(server.addr()).unwrap(), "aud");
        client.upload("h", "a2", &ids).unwrap();
        assert!((client.query("h", &content(), 0.4).unwrap().remaining_budget - 0.6).abs() < 1e-12);
        assert!((client.query("h", &content(), 0.4).unwrap().remaining_budget - 0.2).abs() < 1e-12);
    }
    server.shutdown();
    drop(service);

    let (_service, server) = start(&cfg);
    let mut client = AuditClient::new(TcpTransport::connect(server.addr()).unwrap(), "aud");
    let (total, spent, _) = client.budget().unwrap();
    assert_eq!(total, 1.0);
    assert!((spent - 0.8).abs() < 1e-12);
    client.upload("h", "a2", &ids).unwrap();
    match client.query("h", &content(), 0.4) {
        Err(ClientError::Server {
            code: ErrorCode::BudgetExhausted,
            remaining_budget: Some(r),
            ..
        }) => assert!((r - 0.2).abs() < 1e-12),
        other => panic!("{other:?}"),
    }
    assert!(client.query("h", &content(), 0.2).is_ok());
}

#[test]
fn concurrent_queries_never_overspend() {
    let dir = tempfile::tempdir().unwrap();
    let (service, server) = start(&config(dir.path(), ""));
    let addr = server.addr();
    let mut setup = AuditClient::new(TcpTransport::connect(addr).unwrap(), "aud");
    setup.upload("h", "a1", &qualified_ids(&service, "a1", 50)).unwrap();

    let workers: Vec<_> = (0..8)
        .map(|_| {
            thread::spawn(move || {
                let mut client = AuditClient::new(TcpTransport::connect(addr).unwrap(), "aud");
                (0..50)
                    .filter(|_| client.query("h", &content(), 0.03).is_ok())
                    .count()
            })
        })
        .collect();
    let granted: usize = workers.into_iter().map(|w| w.join().unwrap()).sum();
    // 33 * 0.03 = 0.99 fits, a 34th charge would not
    assert_eq!(granted, 33);
    let ledger = std::fs::read_to_string(service.ledger_path("aud")).unwrap();
    assert_eq!(ledger.lines().count(), 33);
    let (_, spent, _) = setup.budget().unwrap();
    assert!(spent <= 1.0);
}

#[test]
fn request_log_records_every_exchange() {
    let dir = tempfile::tempdir().unwrap();
    let (_service, server) = start(&config(dir.path(), ""));
    let mut t = TcpTransport::connect(server.addr()).unwrap();
    t.exchange_line("not json").unwrap();
    t.exchange_line(&encode(&Request::Budget { auditor_id: "a".into() })).unwrap();
    let log = std::fs::read_to_string(dir.path().join("requests.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["request"], "not json");
    assert_eq!(lines[0]["response"]["code"], "malformed");
    assert_eq!(lines[1]["request"]["type"], "budget");
    assert!(lines[1]["ts_ms"].as_u64().unwrap() > 0);
}

#[test]
fn sample_audience_is_reserved() {
    let dir = tempfile::tempdir().unwrap();
    let (_service, server) = start(&config(dir.path(), ""));
    let mut t = TcpTransport::connect(server.addr()).unwrap();
    let line = encode(&Request::SampleAudience {
        auditor_id: "a".into(),
        group: "a1".into(),
        n: 10,
    });
    let reply: Value = serde_json::from_str(&t.exchange_line(&line).unwrap()).unwrap();
    assert_eq!(reply["code"], "unimplemented");
}

fn audit_spec() -> AuditSpec {
    AuditSpec::new(0.2, 0.05, 1.0, &["a1", "a2"], ScoreDomain::discrete(10).unwrap()).unwrap()
}

fn planned_audiences(service: &PlatformService) -> Vec<AudienceUpload> {
    let n = ppaudit_core::n_min_private(0.2, 0.05, 1.0, 2, 10).unwrap().n_min_per_group as usize;
    ["a1", "a2"]
        .iter()
        .map(|g| AudienceUpload {
            group: g.to_string(),
            user_ids: qualified_ids(service, g, n),
        })
        .collect()
}

#[test]
fn biased_platform_fails_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with_budget(
        dir.path(),
        2.0,
        r#"
[estimator]
base = { kind = "logistic", location = 0.0, temperature = 0.1 }
bias = { model = "additive", shifts = [0, 2] }
"#,
    );
    let (service, server) = start(&cfg);
    let outcome = client_audit(server.addr(), "aud", &audit_spec(), &planned_audiences(&service), &content()).unwrap();
    assert!(!outcome.report.passed, "efg = {}", outcome.report.efg);
    assert!(outcome.report.efg > 0.2);
}

#[test]
fn fair_platform_passes_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (service, server) = start(&config_with_budget(dir.path(), 2.0, ""));
    let outcome = client_audit(server.addr(), "aud", &audit_spec(), &planned_audiences(&service), &content()).unwrap();
    assert!(outcome.report.passed, "efg = {}", outcome.report.efg);
    assert_eq!(outcome.histograms.len(), 2);
    assert!(outcome.remaining_budget.abs() < 1e-12);
    // one query per group at epsilon 1 spends the whole budget of 2, so a repeat audit is refused
    let again = client_audit(
        server.addr(),
        "aud",
        &audit_spec(),
        &planned_audiences(&service),
        &Content { id: "ad-2".into(), text: String::new() },
    );
    assert!(matches!(again, Err(ClientError::Server { code: ErrorCode::BudgetExhausted, .. })));
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let spec = audit_spec();
    let err = client_audit(addr, "aud", &spec, &[], &content()).unwrap_err();
    assert!(matches!(err, ClientError::Transport(_)), "{err:?}");
}
