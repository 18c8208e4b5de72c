use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kvmix::config::SimConfig;
use kvmix::report::Report;
use kvmix::run::{calibrate, run_trace, RunError, RunOptions};
use kvmix::sim::simulate;
use kvmix::workload::{read_trace, write_trace, Trace};

#[derive(Parser)]
#[command(name = "kvmix", version, about = "Mixed-precision KV cache compression driver")]
struct Cli {
    /// Worker threads for per-head parallel work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic trace to <out>/trace.jsonl.
    GenWorkload(Common),
    /// Compress every request of a trace in one batch and write a report.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
        /// Also write the store snapshot after the last step.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Serving simulation against an FP16 baseline.
    Simulate(Common),
    /// Sweep the thresholds and write the memory/error frontier.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Validate a report and render it as CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Trace(String),
    OutOfMemory(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Trace(_) => 3,
            Failure::OutOfMemory(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Trace(m) | Failure::OutOfMemory(m) | Failure::Other(m) => m,
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(_) => Failure::Config(e.to_string()),
            RunError::Trace(_) => Failure::Trace(e.to_string()),
            RunError::OutOfMemory(_) => Failure::OutOfMemory(e.to_string()),
            RunError::Engine(_) => Failure::Other(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Other(format!("{}: {e}", path.display()))
}

fn load_config(common: &Common, fallback: Option<&SimConfig>) -> Result<SimConfig, Failure> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            SimConfig::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(c)) => c.clone(),
        (None, None) => SimConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn load_trace(path: &Path) -> Result<Trace, Failure> {
    let f = fs::File::open(path).map_err(|e| Failure::Trace(format!("{}: {e}", path.display())))?;
    read_trace(BufReader::new(f)).map_err(|e| Failure::Trace(format!("{}: {e}", path.display())))
}

fn write_report(report: &Report, out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(io(out))?;
    let json = out.join("report.json");
    fs::write(&json, report.to_json()).map_err(io(&json))?;
    for (stem, body) in report.to_csv() {
        let p = out.join(format!("report_{stem}.csv"));
        fs::write(&p, body).map_err(io(&p))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenWorkload(common) => {
            let cfg = load_config(&common, None)?;
            fs::create_dir_all(&common.out).map_err(io(&common.out))?;
            let path = common.out.join("trace.jsonl");
            let f = fs::File::create(&path).map_err(io(&path))?;
            let mut w = BufWriter::new(f);
            write_trace(&cfg, &mut w).map_err(|e| Failure::Other(e.to_string()))?;
            w.flush().map_err(io(&path))?;
        }
        Command::Run { common, trace, snapshot } => {
            let t = load_trace(&trace)?;
            let cfg = load_config(&common, Some(&t.header.config))?;
            let out = run_trace(&t, &cfg, RunOptions { measure_quality: false, snapshot: snapshot.is_some() })?;
            write_report(&out.report, &common.out)?;
            if let (Some(path), Some(bytes)) = (snapshot, out.snapshot) {
                fs::write(&path, bytes).map_err(io(&path))?;
            }
        }
        Command::Simulate(common) => {
            let cfg = load_config(&common, None)?;
            write_report(&simulate(&cfg)?, &common.out)?;
        }
        Command::Calibrate { common, trace } => {
            let t = load_trace(&trace)?;
            let cfg = load_config(&common, Some(&t.header.config))?;
            write_report(&calibrate(&t, &cfg)?, &common.out)?;
        }
        Command::Report { input, out } => {
            let text = fs::read_to_string(&input).map_err(io(&input))?;
            let report = Report::from_json(&text).map_err(|e| Failure::Other(format!("{}: {e}", input.display())))?;
            write_report(&report, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build();
    let result = match pool {
        Ok(pool) => pool.install(|| execute(cli)),
        Err(e) => Err(Failure::Other(e.to_string())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("kvmix: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
