use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgt_core::experiment::{self, ExperimentConfig, ExperimentError, ProbeSettings};
use cgt_core::graph::{Edge, GraphSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Clipped gradient tracking experiments over directed graphs.
///
/// Exit status: 0 success, 2 configuration error, 3 I/O error,
/// 4 numerical failure.
#[derive(Parser)]
#[command(name = "cgt", version)]
struct Cli {
    /// Overrides the seed of the config (the graph seed for `graph`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output prefix.
    #[arg(long, global = true)]
    output: Option<String>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads for per-agent evaluation (results do not depend on it).
    #[arg(long, global = true, env = "CGT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a config (or re-run a .meta file) and write <prefix>.csv and <prefix>.meta.
    Run { config: PathBuf },
    /// Build a mixing pair, print its validation report, Perron vectors and spectral radii.
    Graph(GraphArgs),
    /// Estimate smoothness and dissimilarity constants of a config's objectives.
    Probe {
        config: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// The c of the A, B constants.
        #[arg(long, default_value_t = 1.0)]
        c: f64,
    },
    /// Run with c0 = 1/sqrt(K) for each budget K and fit the log-log slope of the minimum gradient norm.
    Rate {
        config: PathBuf,
        /// Comma-separated budgets, at least three, increasing.
        #[arg(long = "k", value_delimiter = ',', required = true)]
        ks: Vec<usize>,
    },
    /// Run several configs and merge their trajectories into one long CSV.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ring,
    Random,
    Explicit,
}

#[derive(Args)]
struct GraphArgs {
    /// Read the [graph] section of this config instead of the flags below.
    #[arg(long, conflicts_with_all = ["kind", "n", "density", "edges"])]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "random")]
    kind: Kind,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 0.4)]
    density: f64,
    /// Edges `from,to,weight` separated by `;`, agents numbered from 1.
    #[arg(long)]
    edges: Option<String>,
}

fn parse_edges(text: &str) -> Result<Vec<Edge>, ExperimentError> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|triple| {
            let parts: Vec<&str> = triple.split(',').map(str::trim).collect();
            let bad = || ExperimentError::Config {
                path: "--edges".into(),
                msg: format!("expected from,to,weight, got {triple:?}"),
            };
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(Edge(
                parts[0].parse().map_err(|_| bad())?,
                parts[1].parse().map_err(|_| bad())?,
                parts[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

fn load(path: &Path, cli: &Cli) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
    let (mut cfg, base) = experiment::load_config(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.output {
        cfg.output = o.clone();
    }
    Ok((cfg, base))
}

fn write(path: &Path, body: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, body).map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(cli: &Cli) -> Result<(), ExperimentError> {
    let say = |s: String| {
        if !cli.quiet {
            println!("{s}");
        }
    };
    match &cli.cmd {
        Cmd::Run { config } => {
            let (cfg, base) = load(config, cli)?;
            for art in experiment::cmd_run(&cfg, &base)? {
                say(format!(
                    "{}: {} after {} iterations",
                    art.csv_path().display(),
                    art.stop,
                    art.iterations
                ));
            }
        }
        Cmd::Graph(args) => {
            let mut spec = match &args.config {
                Some(p) => experiment::load_config(p)?.0.graph,
                None => match args.kind {
                    Kind::Ring => GraphSpec::ring(args.n),
                    Kind::Random => GraphSpec::random(args.n, args.density, 0),
                    Kind::Explicit => {
                        let edges = args.edges.as_deref().ok_or_else(|| ExperimentError::Config {
                            path: "--edges".into(),
                            msg: "required for --kind explicit".into(),
                        })?;
                        GraphSpec::explicit(args.n, parse_edges(edges)?)
                    }
                },
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let report = experiment::graph_report(&spec);
            say(report.to_string());
            if let Err(e) = report.pair {
                return Err(ExperimentError::Config {
                    path: "graph".into(),
                    msg: e.to_string(),
                });
            }
        }
        Cmd::Probe { config, radius, samples, c } => {
            let (cfg, base) = load(config, cli)?;
            let prep = experiment::prepare(&cfg, &base)?;
            let settings = ProbeSettings {
                radius: *radius,
                n_samples: *samples,
                seed: cfg.seed,
                c: *c,
            };
            say(experiment::probe(&prep, &settings)?.to_string());
        }
        Cmd::Rate { config, ks } => {
            let (cfg, base) = load(config, cli)?;
            let (report, runs) = experiment::rate_study(&cfg, &base, ks)?;
            for art in &runs {
                art.write()?;
            }
            let table = experiment::resolve_prefix(&format!("{}_rate.csv", cfg.output));
            write(&table, &report.table_csv())?;
            say(report.to_string());
            say(format!("table: {}", table.display()));
        }
        Cmd::Compare { configs } => {
            let loaded = configs
                .iter()
                .map(|p| {
                    let (mut cfg, base) = experiment::load_config(p)?;
                    if let Some(s) = cli.seed {
                        cfg.seed = s;
                    }
                    Ok((cfg, base))
                })
                .collect::<Result<Vec<_>, ExperimentError>>()?;
            let (merged, runs) = experiment::compare(&loaded)?;
            for art in &runs {
                art.write()?;
                say(format!("{}: {}", art.csv_path().display(), art.stop));
            }
            let prefix = cli.output.clone().unwrap_or_else(|| "compare".into());
            let path = experiment::resolve_prefix(&format!("{prefix}.csv"));
            write(&path, &merged)?;
            say(format!("merged: {}", path.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(t) if t > 0 => experiment::with_threads(t, || execute(&cli)),
        _ => execute(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
