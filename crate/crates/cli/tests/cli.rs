use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use ppaudit_core::{n_min_nonprivate, n_min_private};

fn ppaudit() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ppaudit"));
    cmd.env_remove("PPAUDIT_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    ppaudit().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
}

#[test]
fn plan_matches_library_exactly() {
    let out = run(&["plan", "--alpha", "0.2", "--delta", "0.05", "--epsilon", "1", "--groups", "2", "--bins", "100"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let lib = n_min_private(0.2, 0.05, 1.0, 2, 100).unwrap();
    assert_eq!(field(&text, "n_min_per_group"), "1879");
    assert_eq!(field(&text, "n_min_nonprivate"), "450");
    assert_eq!(field(&text, "raw_bound").parse::<f64>().unwrap(), lib.raw_bound);
    assert_eq!(field(&text, "factor").parse::<f64>().unwrap(), lib.factor_vs_nonprivate);
    let ceil: f64 = field(&text, "factor_ceilinged").parse().unwrap();
    assert!((ceil - 4.1756).abs() < 1e-4);
    let bound: f64 = field(&text, "upper_bound_factor").parse().unwrap();
    assert!((bound - 6.3399).abs() < 1e-4);

    let out = run(&["plan", "--no-privacy", "--bins", "100"]);
    let text = stdout(&out);
    assert_eq!(field(&text, "n_min_per_group"), "450");
    let lib = n_min_nonprivate(0.2, 0.05, 2, 100).unwrap();
    assert_eq!(field(&text, "raw_bound").parse::<f64>().unwrap(), lib.raw_bound);
}

#[test]
fn plan_rejects_small_epsilon() {
    let out = run(&["plan", "--alpha", "0.2", "--epsilon", "0.1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha/2"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["plan", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

fn factors(csv: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("parameter,value,factor,n_private,n_nonprivate"));
    lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect()
}

#[test]
fn figure_curves_have_the_expected_shape() {
    let bins = factors(&stdout(&run(&["figure", "--sweep", "bins"])));
    assert_eq!(bins.len(), 999);
    assert!(bins.windows(2).all(|w| w[1] <= w[0]));
    let alpha = factors(&stdout(&run(&["figure", "--sweep", "alpha"])));
    assert!(alpha.windows(2).all(|w| w[0] == w[1]));
    for sweep in ["alpha", "delta", "groups", "bins"] {
        let f = factors(&stdout(&run(&["figure", "--sweep", sweep])));
        assert!(f.iter().all(|&x| x > 4.0 && x <= 6.34), "{sweep}");
    }
}

#[test]
fn figure_writes_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert!(run(&["figure", "--sweep", "groups", "--out", a.to_str().unwrap()]).status.success());
    assert!(run(&["--output", b.to_str().unwrap(), "figure", "--sweep", "groups"]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let out = run(&["figure", "--sweep", "gamma"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_is_deterministic_given_seed() {
    let args = ["simulate", "--preset", "fair_default", "--trials", "50", "--seed", "5"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let via_env = ppaudit()
        .env("PPAUDIT_SEED", "5")
        .args(["simulate", "--preset", "fair_default", "--trials", "50"])
        .output()
        .unwrap();
    assert_eq!(a.stdout, via_env.stdout);
    // fewer than 100 trials is allowed but flagged
    assert!(String::from_utf8_lossy(&a.stderr).contains("InsufficientTrials"));
}

#[test]
fn simulate_tradeoff_csv() {
    let out = run(&[
        "simulate", "--preset", "fair_default", "--trials", "20", "--tradeoff", "epsilon", "--grid", "0.5,1,2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "parameter,value,n_per_group,n_min,failure_rate,mean_efg");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("epsilon,0.5,1419,1419,"));
}

#[test]
fn simulate_missing_config_fails() {
    let out = run(&["simulate", "--config", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "name = \"x\"\n\n[audit]\nalpha = \"high\"\n").unwrap();
    let out = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
}

fn csv_field(csv: &str, name: &str) -> f64 {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    row[i].parse().unwrap()
}

#[test]
fn bundled_fair_preset_stays_below_delta() {
    let out = run(&["simulate", "--preset", "fair_default"]);
    assert!(out.status.success());
    let csv = stdout(&out);
    assert_eq!(csv_field(&csv, "trials"), 2000.0);
    assert!(csv_field(&csv, "failure_rate") <= 0.06);
    assert!(String::from_utf8_lossy(&out.stderr).contains("failure_rate"));
}

#[test]
fn bundled_biased_preset_has_power() {
    let out = run(&["simulate", "--preset", "biased_shift2"]);
    assert!(out.status.success());
    assert!(csv_field(&stdout(&out), "power") >= 0.95);
}

struct ServerProcess {
    child: Child,
    addr: String,
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn write_server_config(dir: &Path, estimator: &str) -> std::path::PathBuf {
    let pop = dir.join("pop.jsonl");
    if !pop.exists() {
        let out = run(&[
            "--seed", "3", "--output", pop.to_str().unwrap(), "population", "generate", "--size", "8000",
        ]);
        assert!(out.status.success());
    }
    let path = dir.join("server.toml");
    std::fs::write(
        &path,
        format!(
            "seed = 4\nbudget_per_auditor = 2.0\nledger_dir = \"ledgers\"\nlog = \"requests.jsonl\"\npopulation = \"pop.jsonl\"\ndomain = {{ kind = \"discrete\", bins = 10 }}\n{estimator}\n"
        ),
    )
    .unwrap();
    path
}

fn serve(config: &Path) -> ServerProcess {
    let mut child = ppaudit()
        .args(["serve", "--config", config.to_str().unwrap(), "--address", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected banner `{line}`"))
        .to_string();
    ServerProcess { child, addr }
}

fn audiences(dir: &Path) -> Vec<String> {
    let pop = dir.join("pop.jsonl");
    ["a1", "a2"]
        .iter()
        .map(|g| {
            let file = dir.join(format!("{g}.txt"));
            let out = run(&[
                "--output", file.to_str().unwrap(), "population", "sample", "--population",
                pop.to_str().unwrap(), "--group", g, "--n", "1419",
            ]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            format!("{g}={}", file.display())
        })
        .collect()
}

fn audit(addr: &str, audiences: &[String]) -> Output {
    let mut args = vec!["audit", "--endpoint", addr, "--bins", "10"];
    for a in audiences {
        args.push("--audience");
        args.push(a);
    }
    run(&args)
}

#[test]
fn end_to_end_fair_platform_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_server_config(dir.path(), "");
    let server = serve(&config);
    let out = audit(&server.addr, &audiences(dir.path()));
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(0), "{text}{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(field(&text, "result"), "fair");
    assert_eq!(field(&text, "n[a1]"), "1419");
    assert!(dir.path().join("ledgers/auditor.ledger").exists());
    assert!(dir.path().join("requests.jsonl").exists());
}

#[test]
fn end_to_end_biased_platform_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_server_config(
        dir.path(),
        "[estimator]\nbase = { kind = \"logistic\", location = 0.0, temperature = 0.1 }\nbias = { model = \"additive\", shifts = [0, 2] }",
    );
    let server = serve(&config);
    let out = audit(&server.addr, &audiences(dir.path()));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(field(&stdout(&out), "result"), "unfair");
}

#[test]
fn unreachable_endpoint_exits_one() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let dir = tempfile::tempdir().unwrap();
    let ids = dir.path().join("ids.txt");
    std::fs::write(&ids, "u000000001\n").unwrap();
    let a1 = format!("a1={}", ids.display());
    let a2 = format!("a2={}", ids.display());
    let out = audit(&addr, &[a1, a2]);
    assert_eq!(out.status.code(), Some(1));
}
