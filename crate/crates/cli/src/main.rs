//! `eps`: runs elastic pipeline training scenarios and writes their reports.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{debug, info};
use serde_json::json;

use eps_core::config::{self, ScenarioConfig};
use eps_core::engine::{simulate_run, speedup_breakdown, Comparison, Features, Scenario};
use eps_core::report;
use eps_core::sweep::{parse_values, sweep, SweepAxis};
use eps_core::{Error, Execution};

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "eps", version, about = "Elastic pipeline training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario against its static baseline, or sweep one axis.
    Run(RunArgs),
    /// Throughput of the cumulative feature ladder.
    Breakdown(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Feature list, e.g. `baseline`, `all`, `autopipe,autodp`.
    #[arg(long)]
    flags: Option<String>,
    /// Sweep axis: alpha, chunks or bandwidth.
    #[arg(long, requires = "values")]
    sweep: Option<String>,
    /// Comma-separated sweep values; fractions like 1/3 are accepted.
    #[arg(long, requires = "sweep")]
    values: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EPS_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Breakdown(args) => breakdown(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_IO })
        }
    }
}

fn execution(common: &CommonArgs) -> Execution {
    if common.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn load(common: &CommonArgs) -> Result<(ScenarioConfig, Scenario), Error> {
    let (mut cfg, mut scenario) = config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        let base = common.config.parent().unwrap_or(Path::new("."));
        scenario = cfg.build(base)?;
    }
    debug!("loaded {} ({} layers)", common.config.display(), scenario.model.layer_count());
    Ok((cfg, scenario))
}

fn run(args: RunArgs) -> Result<(), Error> {
    let (cfg, scenario) = load(&args.common)?;
    let features = match &args.flags {
        Some(list) => list.parse()?,
        None => cfg.features.normalized(),
    };
    let exec = execution(&args.common);
    if let (Some(axis), Some(values)) = (&args.sweep, &args.values) {
        let axis: SweepAxis = axis.parse()?;
        let values = parse_values(values)?;
        info!("sweeping {axis} over {} values", values.len());
        let out = sweep(&scenario, features, axis, &values, exec)?;
        let path = args.common.out.join(format!("sweep_{axis}.csv"));
        write_atomic(&path, |w| out.write_csv(w))?;
        return to_stdout(|w| writeln!(w, "wrote {}", path.display()));
    }

    info!("simulating {} with {features}", scenario.model.name());
    let comparison = simulate_run(&scenario, features, exec)?;
    let out = &args.common.out;
    let names = &cfg.outputs;
    let outcome = &comparison.run;
    write_atomic(&out.join(&names.report), |w| {
        report::write_report_csv(&outcome.report.rows, w)
    })?;
    write_atomic(&out.join(&names.timeline), |w| {
        report::write_timeline(&outcome.timeline(), w)
    })?;
    write_atomic(&out.join(&names.cache_events), |w| {
        report::write_cache_events(&outcome.cache_events, w)
    })?;
    write_atomic(&out.join(&names.transitions), |w| {
        report::write_transitions(&outcome.transitions, w)
    })?;
    write_atomic(&out.join(&names.summary), |w| {
        report::write_json(&summary(&comparison, scenario.seed), w)
    })?;
    to_stdout(|w| print_summary(&comparison, w))
}

fn breakdown(args: CommonArgs) -> Result<(), Error> {
    let (_, scenario) = load(&args)?;
    let rows = speedup_breakdown(&scenario, &Features::ladder(), execution(&args))?;
    let path = args.out.join("breakdown.csv");
    write_atomic(&path, |w| report::write_csv(&rows, w))?;
    to_stdout(|w| {
        for r in &rows {
            writeln!(w, "{:<32} {:>12.1} samples/s  {:.3}x", r.features, r.throughput, r.speedup)?;
        }
        Ok(())
    })
}

fn summary(c: &Comparison, seed: u64) -> serde_json::Value {
    let rows = &c.run.report.rows;
    json!({
        "features": c.run.report.features.label(),
        "seed": seed,
        "speedup": c.speedup(),
        "total_time": c.run.report.total_time(),
        "baseline_time": c.baseline.total_time(),
        "comm_ratio": c.run.report.comm_ratio(),
        "pipeline_lengths": rows.iter().map(|r| r.pipeline_length).collect::<Vec<_>>(),
        "replicas": rows.iter().map(|r| r.replicas).collect::<Vec<_>>(),
        "micro_batches": rows.iter().map(|r| r.micro_batches).collect::<Vec<_>>(),
        "frozen_layers": rows.iter().map(|r| r.frozen_layers).collect::<Vec<_>>(),
    })
}

fn print_summary(c: &Comparison, w: &mut impl Write) -> io::Result<()> {
    let report = &c.run.report;
    writeln!(w, "features: {}", report.features.label())?;
    writeln!(
        w,
        "total {:.1} s vs baseline {:.1} s, speedup {:.3}x, comm ratio {:.2}%",
        report.total_time(),
        c.baseline.total_time(),
        c.speedup(),
        100.0 * report.comm_ratio()
    )?;
    writeln!(w, "epoch  frozen  K  R  M  throughput")?;
    for r in &report.rows {
        writeln!(
            w,
            "{:>5} {:>7} {:>2} {:>2} {:>2}  {:.1}",
            r.epoch, r.frozen_layers, r.pipeline_length, r.replicas, r.micro_batches, r.throughput
        )?;
    }
    Ok(())
}

/// Console output; a closed pipe (e.g. `| head`) is not an error.
fn to_stdout(print: impl FnOnce(&mut io::StdoutLock) -> io::Result<()>) -> Result<(), Error> {
    let mut out = io::stdout().lock();
    match print(&mut out).and_then(|()| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::Io(e)),
        _ => Ok(()),
    }
}

/// Writes through a temporary file in the target directory, then renames it
/// into place.
fn write_atomic<F>(path: &Path, write: F) -> Result<(), Error>
where
    F: FnOnce(&mut io::BufWriter<&mut tempfile::NamedTempFile>) -> eps_core::Result<()>,
{
    let with_path = |e: io::Error| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())));
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(with_path)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(with_path)?;
    {
        let mut w = io::BufWriter::new(&mut tmp);
        write(&mut w)?;
        w.flush().map_err(with_path)?;
    }
    tmp.persist(path).map_err(|e| with_path(e.error))?;
    debug!("wrote {}", path.display());
    Ok(())
}
