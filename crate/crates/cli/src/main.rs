use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use adaptive_shield::config::{ExperimentConfig, PriorKind, ScenarioSource};
use adaptive_shield::estimator::{DirichletTable, ModelPrior};
use adaptive_shield::harness::{self, BenchConfig, RunReport, BENCH_K_VALUES};
use adaptive_shield::solver::SolverConfig;
use adaptive_shield::Error;
use clap::{Args, Parser, Subcommand};

/// Overrides the output directory of every subcommand that writes one.
const OUTPUT_ENV: &str = "SHIELD_OUTPUT_DIR";

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "shieldctl", version, about = "Run adaptive-shield traffic experiments")]
struct Cli {
    /// Require an explicit seed for reproducible runs.
    #[arg(long, global = true)]
    ci: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace, summary and cut-off table.
    Run(ExperimentArgs),
    /// Run every combination of the c2, gamma and lambda lists.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',')]
        c2_list: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        gamma_list: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        lambda_list: Vec<f64>,
        /// Instead of simulating, solve the initial abstraction once per
        /// gamma and print both long-run cost components.
        #[arg(long)]
        pareto: bool,
    },
    /// Time abstraction building and solving for uniform cut-offs.
    Bench {
        #[arg(long, value_delimiter = ',')]
        k: Vec<u32>,
        #[arg(long, default_value_t = 0.375)]
        rate: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Write the table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Save or inspect estimator snapshots.
    #[command(subcommand)]
    Snapshot(SnapshotCommand),
}

#[derive(Subcommand)]
enum SnapshotCommand {
    /// Run the experiment and save the final estimator of every node.
    Save {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Snapshot file prefix; node n is written to `<prefix>.<n>.snap`.
        #[arg(long)]
        prefix: PathBuf,
    },
    /// Load a snapshot and report its contents.
    Load {
        #[command(flatten)]
        exp: ExperimentArgs,
        file: PathBuf,
        /// Solve the initial abstraction of the loaded estimator per gamma.
        #[arg(long, value_delimiter = ',')]
        pareto: Vec<f64>,
    },
}

#[derive(Args, Clone, Default)]
struct ExperimentArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario name or path to a scenario TOML file.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, conflicts_with = "no_shield")]
    shield: bool,
    #[arg(long)]
    no_shield: bool,
    #[arg(long)]
    c2: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    period: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Skip rebuilds unless a distribution change was detected.
    #[arg(long)]
    change_gate: bool,
    #[arg(long)]
    padding: Option<u32>,
    /// Use a symmetric Dirichlet prior instead of the initial traffic model.
    #[arg(long)]
    symmetric_prior: bool,
}

impl ExperimentArgs {
    fn resolve(&self, ci: bool) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.scenario {
            cfg.scenario = ScenarioSource::Named(s.clone());
        }
        if self.shield {
            cfg.shield = true;
        }
        if self.no_shield {
            cfg.shield = false;
        }
        cfg.c2 = self.c2.or(cfg.c2);
        cfg.gamma = self.gamma.or(cfg.gamma);
        cfg.lambda = self.lambda.or(cfg.lambda);
        cfg.steps = self.steps.or(cfg.steps);
        cfg.seed = self.seed.or(cfg.seed);
        cfg.period = self.period.unwrap_or(cfg.period);
        cfg.warmup = self.warmup.unwrap_or(cfg.warmup);
        cfg.eps = self.eps.unwrap_or(cfg.eps);
        cfg.padding = self.padding.unwrap_or(cfg.padding);
        cfg.change_gate |= self.change_gate;
        if self.symmetric_prior {
            cfg.prior = PriorKind::Symmetric;
        }
        if let Some(o) = &self.output {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(o) = std::env::var_os(OUTPUT_ENV) {
            cfg.output_dir = Some(PathBuf::from(o));
        }
        if ci && cfg.seed.is_none() {
            return Err(Error::Config("--seed is required in CI mode".into()));
        }
        cfg.validate()?;
        cfg.resolve_scenario()?;
        Ok(cfg)
    }
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

fn config<T>(r: Result<T, Error>) -> Result<T, Failure> {
    r.map_err(Failure::Config)
}

fn runtime<T>(r: Result<T, Error>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => {
            let cfg = config(args.resolve(cli.ci))?;
            let report = runtime(harness::run(&cfg))?;
            print_report(&report)
        }
        Command::Sweep {
            exp,
            c2_list,
            gamma_list,
            lambda_list,
            pareto,
        } => {
            let mut cfg = config(exp.resolve(cli.ci))?;
            if !c2_list.is_empty() {
                cfg.sweep.c2 = c2_list;
            }
            if !gamma_list.is_empty() {
                cfg.sweep.gamma = gamma_list;
            }
            if !lambda_list.is_empty() {
                cfg.sweep.lambda = lambda_list;
            }
            config(cfg.validate())?;
            if pareto {
                let gammas = if cfg.sweep.gamma.is_empty() {
                    vec![0.0, 0.25, 0.5, 0.75, 1.0]
                } else {
                    cfg.sweep.gamma.clone()
                };
                let points = runtime(harness::sweep_gamma(&cfg, &gammas, None))?;
                return write_json(&points);
            }
            for (label, report) in runtime(harness::sweep(&cfg))? {
                println!("# {label}");
                print_report(&report)?;
            }
            Ok(())
        }
        Command::Bench { k, rate, eps, output } => {
            if !(rate > 0.0 && rate <= 1.0) || !(eps > 0.0) {
                return Err(Failure::Config(Error::Config(format!("rate {rate} / eps {eps}"))));
            }
            let ks = if k.is_empty() { BENCH_K_VALUES.to_vec() } else { k };
            let bench = BenchConfig {
                rate,
                solver: SolverConfig::with_eps(eps),
                ..BenchConfig::default()
            };
            let rows = runtime(harness::bench_synthesis(&ks, &bench))?;
            match output.or_else(|| std::env::var_os(OUTPUT_ENV).map(|d| Path::new(&d).join("bench.csv"))) {
                Some(p) => {
                    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                        runtime(std::fs::create_dir_all(dir).map_err(Error::from))?;
                    }
                    let f = runtime(File::create(&p).map_err(Error::from))?;
                    runtime(harness::write_bench_table(&rows, BufWriter::new(f)))
                }
                None => runtime(harness::write_bench_table(&rows, io::stdout().lock())),
            }
        }
        Command::Snapshot(SnapshotCommand::Save { exp, prefix }) => {
            let cfg = config(exp.resolve(cli.ci))?;
            let report = runtime(harness::run(&cfg))?;
            for (n, est) in report.estimators.iter().enumerate() {
                let path = PathBuf::from(format!("{}.{n}.snap", prefix.display()));
                let f = runtime(File::create(&path).map_err(Error::from))?;
                let mut w = BufWriter::new(f);
                runtime(est.snapshot(&mut w))?;
                runtime(w.flush().map_err(Error::from))?;
                println!("{}\t{} keys", path.display(), est.len());
            }
            Ok(())
        }
        Command::Snapshot(SnapshotCommand::Load { exp, file, pareto }) => {
            let cfg = config(exp.resolve(cli.ci))?;
            let scn = config(cfg.resolve_scenario())?;
            let template = Arc::new(harness::template_for(&cfg, &scn));
            let f = runtime(File::open(&file).map_err(Error::from))?;
            let mut est = runtime(DirichletTable::load(BufReader::new(f), template))?;
            if matches!(cfg.prior, PriorKind::InitialModel) {
                let model = config(harness::initial_model(&scn, 0))?;
                est = est.with_prior_model(Arc::new(ModelPrior(model)));
            }
            println!("{}\t{} keys\t{:?}", file.display(), est.len(), est.schedule());
            if !pareto.is_empty() {
                let points = runtime(harness::sweep_gamma(&cfg, &pareto, Some(&est)))?;
                return write_json(&points);
            }
            Ok(())
        }
    }
}

fn print_report(report: &RunReport) -> Result<(), Failure> {
    if let Some(dir) = &report.output_dir {
        println!("wrote {}", dir.display());
    }
    write_json(&report.summary)
}

fn write_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    runtime(serde_json::to_writer_pretty(&mut out, value).map_err(Error::from))?;
    runtime(writeln!(out).map_err(Error::from))
}
