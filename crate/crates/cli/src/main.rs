use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rosfl::config::{ExperimentConfig, Method, TransportKind};
use rosfl::data::{export_shards, shard_file_name, ShardManifest, Split};
use rosfl::experiment::{
    output_root, run_experiment, run_mu_sweep, run_round_epoch_tradeoff, validate_run_dir, RunSummary, SweepTable,
};
use rosfl::parties::Shards;

#[derive(Parser)]
#[command(name = "rosfl", version, about = "Split-federated U-Net training on synthetic medical-imaging tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Rosfl,
    Fedavg,
    Sl,
    Central,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Rosfl => Method::Rosfl,
            MethodArg::Fedavg => Method::Fedavg,
            MethodArg::Sl => Method::Sl,
            MethodArg::Central => Method::Central,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment file; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Replaces the configured seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to a folder under $ROSFL_OUTPUT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write a run directory.
    Run {
        #[arg(value_enum)]
        method: MethodArg,
        #[command(flatten)]
        common: Common,
    },
    /// One run per DWCS strength.
    SweepMu {
        /// Comma-separated strengths, e.g. 1e-6,1e-4,1,100.
        #[arg(long, value_delimiter = ',', required = true)]
        mu: Vec<f64>,
        #[arg(long, value_enum, default_value = "rosfl")]
        method: MethodArg,
        #[command(flatten)]
        common: Common,
    },
    /// One run per (rounds, local epochs) pair at a fixed total budget.
    SweepRe {
        /// Comma-separated ROUNDSxEPOCHS pairs, e.g. 40x5,200x1.
        #[arg(long, value_delimiter = ',', required = true, value_parser = parse_pair)]
        pairs: Vec<(u32, u32)>,
        #[arg(long, value_enum, default_value = "rosfl")]
        method: MethodArg,
        #[command(flatten)]
        common: Common,
    },
    /// Parse and validate an experiment file, then print it with defaults filled in.
    ValidateConfig {
        file: PathBuf,
        /// Supplies the method when the file has none.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Check that a run directory is complete.
    ValidateRun { dir: PathBuf },
    /// Write the generated data shards of one seed to disk.
    ExportShards {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_pair(s: &str) -> Result<(u32, u32), String> {
    let (r, e) = s.split_once(['x', 'X', '/']).ok_or_else(|| format!("expected ROUNDSxEPOCHS, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(r)?, num(e)?))
}

fn load_config(common: &Common, method: Method) -> rosfl::Result<ExperimentConfig> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| rosfl::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::parse_with_method(&text, method)?;
    if let Some(t) = common.transport {
        cfg.transport = match t {
            TransportArg::Inproc => TransportKind::Inproc,
            TransportArg::Tcp => TransportKind::Tcp,
        };
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, default_name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| output_root().join(default_name))
}

fn print_summary(label: &str, s: &RunSummary) {
    let input = s.input_psnr.map(|p| format!(" input_psnr={p:.3}")).unwrap_or_default();
    println!(
        "{label}: {}={:.4} spread={:.4}{input} per_client=[{}]",
        s.metric,
        s.mean_final,
        s.mean_spread,
        s.per_client_mean.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
    );
}

fn report_sweep(table: &SweepTable, dir: &Path) -> ExitCode {
    for cell in &table.cells {
        match (&cell.summary, &cell.error) {
            (Some(s), _) => print_summary(&format!("{}={}", table.knob, cell.label), s),
            (None, e) => println!("{}={}: FAILED {}", table.knob, cell.label, e.as_deref().unwrap_or("")),
        }
    }
    println!("wrote {}", dir.display());
    if table.all_completed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn execute(cli: Cli) -> rosfl::Result<ExitCode> {
    match cli.command {
        Command::Run { method, common } => {
            let cfg = load_config(&common, method.into())?;
            let dir = out_dir(&common, cfg.method.name());
            let summary = run_experiment(&cfg, &dir)?;
            print_summary(cfg.method.name(), &summary);
            println!("wrote {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::SweepMu { mu, method, common } => {
            let cfg = load_config(&common, method.into())?;
            let dir = out_dir(&common, "sweep-mu");
            let table = run_mu_sweep(&cfg, &mu, &dir)?;
            Ok(report_sweep(&table, &dir))
        }
        Command::SweepRe { pairs, method, common } => {
            let cfg = load_config(&common, method.into())?;
            let dir = out_dir(&common, "sweep-re");
            let table = run_round_epoch_tradeoff(&cfg, &pairs, &dir)?;
            Ok(report_sweep(&table, &dir))
        }
        Command::ValidateConfig { file, method } => {
            let cfg = match method {
                Some(m) => {
                    let text = fs::read_to_string(&file)?;
                    ExperimentConfig::parse_with_method(&text, m.into())?
                }
                None => ExperimentConfig::load(&file)?,
            };
            print!("{}", cfg.to_toml()?);
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateRun { dir } => {
            let summary = validate_run_dir(&dir)?;
            print_summary(&summary.method, &summary);
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportShards { common } => {
            let cfg = load_config(&common, Method::Central)?;
            let seed = cfg.seeds[0];
            let shards = Shards::generate(&cfg, seed)?;
            let mut names = BTreeMap::new();
            let mut data = Vec::new();
            for (n, (train, test)) in shards.train.iter().zip(&shards.test).enumerate() {
                let n = n as u32;
                names.insert(shard_file_name(n, Split::Train), (n, Split::Train, train.len()));
                names.insert(shard_file_name(n, Split::Test), (n, Split::Test, test.len()));
            }
            for (name, &(n, split, _)) in &names {
                let set = match split {
                    Split::Train => &shards.train[n as usize],
                    Split::Test => &shards.test[n as usize],
                };
                debug_assert_eq!(name, &shard_file_name(n, split));
                data.push(set);
            }
            let dir = out_dir(&common, "shards");
            let manifest = ShardManifest { task: cfg.task, seed, spec: cfg.data.clone(), shards: names };
            export_shards(&dir, &manifest, &data)?;
            println!("wrote {} shards to {}", data.len(), dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
