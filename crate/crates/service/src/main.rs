use std::io::{self, BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use psc_sim::scenario::{ClockMode, Scenario};
use psc_sim::server::{self, Pacing, ServerConfig};
use psc_sim::{execute_command, Host};

#[derive(Parser)]
#[command(name = "psc-sim", version, about = "Power-supply controller emulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load a scenario and run it.
    Run(RunArgs),
    /// Validate a scenario file and print its topology.
    Check { scenario: PathBuf },
}

#[derive(Parser)]
struct RunArgs {
    /// Scenario file (.toml or .json).
    scenario: PathBuf,
    /// Serve `/events` here; the text protocol listens on the next port.
    #[arg(long)]
    listen: Option<SocketAddr>,
    /// Text protocol address, overriding the default next to `--listen`.
    #[arg(long, requires = "listen")]
    text_listen: Option<SocketAddr>,
    /// Run the virtual clock as fast as possible.
    #[arg(long, conflicts_with = "realtime")]
    fast: bool,
    /// Run the virtual clock at this multiple of wall time.
    #[arg(long, value_name = "SCALE")]
    realtime: Option<f64>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Execute the commands in this file, printing one response per line.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Without `--listen` or `--script`: virtual seconds to run before
    /// printing a summary.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Limit each text session to 15 commands per second, like the serial
    /// checkout port.
    #[arg(long)]
    serial_rate_limit: bool,
    /// Cap on trigger-driven frame events per channel per virtual second.
    #[arg(long, value_name = "HZ", default_value_t = 20.0)]
    frame_event_hz: f64,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run(args) => run(args),
        Cmd::Check { scenario } => check(&scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("psc-sim: {e}");
            ExitCode::FAILURE
        }
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

fn check(path: &Path) -> Result<(), BoxError> {
    let scenario = Scenario::load(path)?;
    println!(
        "{}: {} controllers, {} channels",
        scenario.name.as_deref().unwrap_or("scenario"),
        scenario.pscs.len(),
        scenario.channel_count()
    );
    for psc in &scenario.pscs {
        let ports: Vec<_> = psc.channels.iter().map(|c| c.psi_address.to_string()).collect();
        println!("  psc {}: channels [{}]", psc.id, ports.join(", "));
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<(), BoxError> {
    let scenario = Scenario::load(&args.scenario)?;
    let mut host = scenario.build(args.seed)?;

    if let Some(script) = &args.script {
        run_script(&mut host, script, &mut io::stdout().lock())?;
    }

    let Some(http_addr) = args.listen else {
        if args.script.is_none() {
            run_headless(&mut host, args.duration)?;
        }
        return Ok(());
    };

    let pacing = match (args.fast, args.realtime) {
        (true, _) => Pacing::Fast,
        (false, Some(scale)) if scale > 0.0 && scale.is_finite() => Pacing::Realtime(scale),
        (false, Some(scale)) => return Err(format!("realtime scale must be positive, got {scale}").into()),
        (false, None) => match scenario.clock.mode {
            ClockMode::Fast => Pacing::Fast,
            ClockMode::Realtime => Pacing::Realtime(scenario.clock.realtime_scale),
        },
    };
    host.set_frame_event_rate(Some(args.frame_event_hz));
    let config = ServerConfig {
        http_addr,
        text_addr: args.text_listen,
        pacing,
        serial_rate_limit: args.serial_rate_limit,
        event_capacity: psc_sim::events::DEFAULT_CAPACITY,
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let running = server::start(config, host).await?;
        eprintln!(
            "events on ws://{}/events, commands on {}",
            running.http_addr, running.text_addr
        );
        tokio::signal::ctrl_c().await?;
        running.shutdown();
        Ok::<_, BoxError>(())
    })
}

/// Feeds a command file through the protocol; blank lines and `#` comments
/// are skipped.
fn run_script(host: &mut Host, path: &Path, out: &mut impl Write) -> Result<(), BoxError> {
    let file = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    for line in BufReader::new(file).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        writeln!(out, "{}", execute_command(host, line))?;
    }
    Ok(())
}

fn run_headless(host: &mut Host, duration: f64) -> Result<(), BoxError> {
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(format!("duration must be non-negative, got {duration}").into());
    }
    let started = Instant::now();
    host.sim_mut().advance(Duration::from_secs_f64(duration));
    let wall = started.elapsed();
    let sim = host.sim();
    let mut total = 0;
    println!("ran {duration} s of virtual time in {:.3} s", wall.as_secs_f64());
    for ch in sim.channels() {
        let (psc, port) = host.label(ch);
        let c = sim.counters(ch)?;
        let s = sim.channel_status(ch)?;
        total += c.reads_ok;
        println!(
            "psc {psc} ch {port}: frames={} stored={} link_errors={} checksum_errors={} missed={} latched(link={} cksum={})",
            c.reads_ok,
            c.frames_stored,
            c.link_errors,
            c.checksum_errors,
            c.missed_triggers,
            u8::from(s.link_error),
            u8::from(s.checksum_error)
        );
    }
    if wall > Duration::ZERO {
        println!("{total} frames, {:.0} frames/s wall", total as f64 / wall.as_secs_f64());
    }
    Ok(())
}
