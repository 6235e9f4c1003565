use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ppaudit_core::harness::{
    results_csv, run_experiment, summary, tradeoff_csv, tradeoff_curve, ExperimentConfig,
    TradeoffGrid,
};
use ppaudit_core::planner::{sweep_csv, upper_bound_factor};
use ppaudit_core::protocol::{client_audit, AudienceUpload, Content, PlatformService, Server, ServiceConfig};
use ppaudit_core::seed::stream;
use ppaudit_core::{
    factor_sweep, generate_population, n_min_nonprivate, n_min_private, sample_audience,
    AuditSpec, FairnessReport, PlanRequest, Population, PopulationModel, ScoreDomain, SeedPath,
    SweepParameter,
};

const FAIR_DEFAULT: &str = include_str!("../configs/fair_default.toml");
const BIASED_SHIFT2: &str = include_str!("../configs/biased_shift2.toml");

/// Privacy-preserving fairness audits: planning, simulation, serving and auditing.
#[derive(Parser)]
#[command(name = "ppaudit", version)]
struct Cli {
    /// Master seed; overrides the seed in config files.
    #[arg(long, global = true, env = "PPAUDIT_SEED")]
    seed: Option<u64>,

    /// Write the main output here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimum qualified samples per group.
    Plan(PlanArgs),
    /// Monte Carlo experiment from a config or a bundled preset.
    Simulate(SimulateArgs),
    /// Data for the privacy overhead figure.
    Figure(FigureArgs),
    /// Run the platform service.
    Serve(ServeArgs),
    /// Audit a running platform service.
    Audit(AuditArgs),
    /// Generate a population file or sample audiences from one.
    #[command(subcommand)]
    Population(PopulationCommand),
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Number of protected groups.
    #[arg(long, default_value_t = 2)]
    groups: u64,
    /// Number of score bins.
    #[arg(long, default_value_t = 100)]
    bins: u64,
    /// Plan for the test without privacy.
    #[arg(long)]
    no_privacy: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "fair_default")]
    FairDefault,
    #[value(name = "biased_shift2")]
    BiasedShift2,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tradeoff {
    Epsilon,
    Alpha,
    /// Multiples of the planned sample size.
    Fraction,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override the number of trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Sweep one parameter instead of running a single experiment.
    #[arg(long, value_enum, requires = "grid")]
    tradeoff: Option<Tradeoff>,
    /// Comma-separated grid for --tradeoff.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
}

#[derive(Args)]
struct FigureArgs {
    #[arg(long)]
    sweep: String,
    /// Comma-separated values; the default covers the usual plotted range.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    /// Alias for the global --output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Service config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the listen address, e.g. 127.0.0.1:0 for any free port.
    #[arg(long)]
    address: Option<String>,
}

#[derive(Args)]
struct AuditArgs {
    /// Platform address, host:port.
    #[arg(long)]
    endpoint: String,
    #[arg(long, default_value = "auditor")]
    auditor: String,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Number of score bins.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Treat scores as continuous on [0, 1] with equal-width bins.
    #[arg(long)]
    continuous: bool,
    /// GROUP=FILE with one qualified user id per line; repeat per group.
    #[arg(long = "audience", required = true)]
    audiences: Vec<String>,
    #[arg(long, default_value = "content-1")]
    content_id: String,
    #[arg(long, default_value = "")]
    content_text: String,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum PopulationCommand {
    /// Write a synthetic population as JSON lines.
    Generate {
        #[arg(long, value_delimiter = ',', default_value = "a1,a2")]
        groups: Vec<String>,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        qualification_rate: f64,
    },
    /// Sample qualified user ids of one group, one per line.
    Sample {
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        group: String,
        #[arg(long)]
        n: usize,
    },
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn plan(args: &PlanArgs, output: Option<&Path>) -> Result<()> {
    let request = PlanRequest {
        alpha: args.alpha,
        delta: args.delta,
        epsilon: args.epsilon,
        num_attributes: args.groups,
        num_bins: args.bins,
        private: !args.no_privacy,
    };
    request.validate()?;
    let result = request.plan()?;
    let plain = n_min_nonprivate(args.alpha, args.delta, args.groups, args.bins)?;
    let mut text = format!(
        "privacy: {}\nn_min_per_group: {}\nraw_bound: {}\n",
        request.private, result.n_min_per_group, result.raw_bound
    );
    if request.private {
        text += &format!(
            "n_min_nonprivate: {}\nfactor: {}\nfactor_ceilinged: {}\nupper_bound_factor: {}\n",
            plain.n_min_per_group,
            result.factor_vs_nonprivate,
            result.n_min_per_group as f64 / plain.n_min_per_group as f64,
            upper_bound_factor()
        );
    }
    write_output(output, &text)
}

fn simulate(args: &SimulateArgs, seed: Option<u64>, output: Option<&Path>) -> Result<()> {
    let mut config = match (&args.config, args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(Preset::FairDefault)) => ExperimentConfig::from_toml(FAIR_DEFAULT)?,
        (None, Some(Preset::BiasedShift2)) => ExperimentConfig::from_toml(BIASED_SHIFT2)?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    let spec = config.build()?;
    if let Some(kind) = args.tradeoff {
        let grid = match kind {
            Tradeoff::Epsilon => TradeoffGrid::Epsilon(args.grid.clone()),
            Tradeoff::Alpha => TradeoffGrid::Alpha(args.grid.clone()),
            Tradeoff::Fraction => TradeoffGrid::SampleFraction(args.grid.clone()),
        };
        let rows = tradeoff_curve(&grid, &spec)?;
        for r in &rows {
            eprintln!(
                "{}={}: n={} (planned {}), flagged rate {:.4}, mean efg {:.6}",
                r.parameter, r.value, r.n_per_group, r.n_min, r.failure_rate, r.mean_efg
            );
        }
        return write_output(output, &tradeoff_csv(&rows));
    }
    let result = run_experiment(&spec)?;
    eprint!("{}", summary(&result));
    write_output(output, &results_csv(&[result]))
}

fn figure(args: &FigureArgs, output: Option<&Path>) -> Result<()> {
    let sweep: SweepParameter = args.sweep.parse()?;
    let grid = if args.grid.is_empty() {
        sweep.default_grid()
    } else {
        args.grid.clone()
    };
    let fixed = PlanRequest::worked_example();
    eprintln!(
        "fixed: alpha={} delta={} epsilon={} groups={} bins={}",
        fixed.alpha, fixed.delta, fixed.epsilon, fixed.num_attributes, fixed.num_bins
    );
    let rows = factor_sweep(sweep, &grid, &fixed)?;
    write_output(args.out.as_deref().or(output), &sweep_csv(&rows))
}

fn serve(args: &ServeArgs, seed: Option<u64>) -> Result<()> {
    let mut config = ServiceConfig::load(&args.config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(address) = &args.address {
        config.address = address.clone();
    }
    let service = Arc::new(PlatformService::new(&config)?);
    let server = Server::bind(service, &config.address)
        .with_context(|| format!("binding {}", config.address))?;
    println!("listening on {}", server.local_addr()?);
    io::stdout().flush()?;
    server.run()?;
    Ok(())
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut ids = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let id = line.trim();
        if !id.is_empty() {
            ids.push(id.to_string());
        }
    }
    Ok(ids)
}

fn render_report(report: &FairnessReport, remaining: f64, n_min: Option<u64>) -> String {
    let mut text = format!(
        "efg: {}\nalpha: {}\nresult: {}\n",
        report.efg,
        report.alpha,
        if report.passed { "fair" } else { "unfair" }
    );
    if let Some(loc) = &report.argmax {
        text += &format!(
            "argmax: {} vs {} at bin {}\n",
            loc.group_a.label, loc.group_b.label, loc.bin
        );
    }
    for (group, n) in &report.per_group_n {
        text += &format!("n[{group}]: {n}\n");
    }
    if let Some(n_min) = n_min {
        if report.per_group_n.values().any(|&n| n < n_min) {
            text += &format!("warning: some groups are below the planned minimum of {n_min}\n");
        }
    }
    text += &format!("remaining_budget: {remaining}\n");
    text
}

fn audit(args: &AuditArgs, output: Option<&Path>) -> Result<bool> {
    let mut uploads = Vec::new();
    for spec in &args.audiences {
        let (group, path) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--audience expects GROUP=FILE, got `{spec}`"))?;
        uploads.push(AudienceUpload {
            group: group.to_string(),
            user_ids: read_ids(Path::new(path))?,
        });
    }
    let labels: Vec<&str> = uploads.iter().map(|u| u.group.as_str()).collect();
    let domain = if args.continuous {
        ScoreDomain::equal_width(0.0, 1.0, args.bins)?
    } else {
        ScoreDomain::discrete(args.bins)?
    };
    let spec = AuditSpec::new(args.alpha, args.delta, args.epsilon, &labels, domain)?;
    let content = Content {
        id: args.content_id.clone(),
        text: args.content_text.clone(),
    };
    let outcome = client_audit(args.endpoint.as_str(), &args.auditor, &spec, &uploads, &content)?;
    let n_min = n_min_private(
        args.alpha,
        args.delta,
        args.epsilon,
        labels.len() as u64,
        args.bins as u64,
    )
    .ok()
    .map(|p| p.n_min_per_group);
    let text = if args.json {
        let mut s = serde_json::to_string_pretty(&outcome.report)?;
        s.push('\n');
        s
    } else {
        render_report(&outcome.report, outcome.remaining_budget, n_min)
    };
    write_output(output, &text)?;
    Ok(outcome.report.passed)
}

fn population(cmd: &PopulationCommand, seed: u64, output: Option<&Path>) -> Result<()> {
    match cmd {
        PopulationCommand::Generate {
            groups,
            size,
            qualification_rate,
        } => {
            let model = PopulationModel::balanced(groups, *qualification_rate)?;
            let pop_seed = SeedPath::new(seed).child(stream::POPULATION).seed();
            let pop = generate_population(&model, *size, pop_seed)?;
            match output {
                Some(path) => {
                    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
                    pop.export(BufWriter::new(file))?;
                }
                None => pop.export(io::stdout().lock())?,
            }
            Ok(())
        }
        PopulationCommand::Sample {
            population,
            group,
            n,
        } => {
            let file = File::open(population)
                .with_context(|| format!("opening {}", population.display()))?;
            let pop = Population::import(BufReader::new(file))?;
            let attribute = pop
                .attribute(group)
                .ok_or_else(|| anyhow!("unknown group `{group}`"))?;
            let sample_seed = SeedPath::new(seed).child(stream::AUDIENCE).child(group).seed();
            let users = sample_audience(&pop, &attribute, true, *n, sample_seed)?;
            let mut text = String::new();
            for u in users {
                text.push_str(&u.user_id);
                text.push('\n');
            }
            write_output(output, &text)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let output = cli.output.as_deref();
    let result = match &cli.command {
        Command::Plan(args) => plan(args, output).map(|_| true),
        Command::Simulate(args) => simulate(args, cli.seed, output).map(|_| true),
        Command::Figure(args) => figure(args, output).map(|_| true),
        Command::Serve(args) => serve(args, cli.seed).map(|_| true),
        Command::Audit(args) => audit(args, output),
        Command::Population(cmd) => population(cmd, cli.seed.unwrap_or(0), output).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
