use std::error::Error;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crossbeam_channel::{bounded, Receiver};
use rio::bench::{emit_report, latency_bench, pipeline_profile, render_report, synthetic_bench, Report, ReportFormat};
use rio::gateway::{run_session, Gateway, GatewayOptions, SessionOptions, DEFAULT_CONSOLE_DIR, DEFAULT_GATEWAY_PORT};
use rio::middleware::BackendKind;
use rio::policy::{deploy, DeployOptions, Mode, PolicyKind};
use rio::recorder::{episode_paths, export, mix, record};
use rio::station::{build_station, StationConfig, REGISTRY};
use rio::teleop::{run_teleop, TeleopOptions, TeleopSource, DEFAULT_FILTER_ALPHA, DEFAULT_TELEOP_RATE_HZ};
use rio_core::executor::ExecutorConfig;
use serde::Serialize;

type Result<T> = std::result::Result<T, Box<dyn Error + Send + Sync>>;

#[derive(Parser)]
#[command(name = "rio", version, about = "Real-time robot I/O: stations, teleop, recording, deployment and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run or list station components
    #[command(subcommand)]
    Station(StationCmd),
    /// Teleoperate a station
    Teleop(TeleopArgs),
    /// Teleoperate and record one episode
    Record(RecordArgs),
    /// Convert recorded episodes to a flat dataset
    Export(ExportArgs),
    /// Merge flat datasets from several embodiments
    Mix(MixArgs),
    /// Run a policy on a station
    Deploy(DeployArgs),
    /// Latency and pipeline benchmarks
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Serve the browser bridge for a station
    Gateway(GatewayArgs),
}

#[derive(Subcommand)]
enum StationCmd {
    /// Start every component and run until interrupted
    Up {
        config: PathBuf,
        /// Stop after this many seconds
        #[arg(long)]
        duration: Option<f64>,
    },
    /// List registered component specs
    Ls,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Source {
    Scripted,
    Gateway,
}

#[derive(Args, Clone)]
struct TeleopFlags {
    #[arg(long, value_enum, default_value = "scripted")]
    source: Source,
    #[arg(long, default_value_t = DEFAULT_FILTER_ALPHA)]
    filter_alpha: f64,
    #[arg(long, default_value_t = DEFAULT_TELEOP_RATE_HZ)]
    rate: f64,
    /// Seconds; gateway sessions also end on interrupt
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = DEFAULT_GATEWAY_PORT)]
    port: u16,
    #[arg(long)]
    serve_console: bool,
    #[arg(long, default_value = DEFAULT_CONSOLE_DIR)]
    console_dir: PathBuf,
}

#[derive(Args)]
struct TeleopArgs {
    config: PathBuf,
    #[command(flatten)]
    flags: TeleopFlags,
}

#[derive(Args)]
struct RecordArgs {
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "")]
    instruction: String,
    #[command(flatten)]
    flags: TeleopFlags,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    Flat,
}

#[derive(Args)]
struct ExportArgs {
    dir: PathBuf,
    #[arg(long, value_enum, default_value = "flat")]
    format: ExportFormat,
    /// Defaults to `<dir>/flat`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MixArgs {
    #[arg(required = true, num_args = 1..)]
    dirs: Vec<PathBuf>,
    #[arg(long, default_value = "mixed")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Scripted,
    Latency,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Scripted => PolicyKind::Scripted,
            PolicyArg::Latency => PolicyKind::Latency,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Async,
    Sync,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Async => Mode::Async,
            ModeArg::Sync => Mode::Sync,
        }
    }
}

#[derive(Args)]
struct PolicyFlags {
    #[arg(long, value_enum, default_value = "scripted")]
    policy: PolicyArg,
    #[arg(long, value_enum, default_value = "async")]
    mode: ModeArg,
    #[arg(long, default_value_t = 15.0)]
    rate: f64,
    #[arg(long, default_value_t = 16)]
    horizon: usize,
    #[arg(long, default_value_t = 0.5)]
    trigger: f64,
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    /// Policy parameter `key=value`; values parse as JSON when they can
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

impl PolicyFlags {
    fn options(&self) -> Result<DeployOptions> {
        let mut params = serde_json::Map::new();
        for p in &self.params {
            let (k, v) = p.split_once('=').ok_or_else(|| format!("--param `{p}` is not key=value"))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.into()));
            params.insert(k.into(), v);
        }
        Ok(DeployOptions {
            policy: self.policy.into(),
            params,
            mode: self.mode.into(),
            executor: ExecutorConfig::new(self.rate, self.horizon, self.trigger),
            duration: seconds(self.duration)?,
        })
    }
}

#[derive(Args)]
struct DeployArgs {
    config: PathBuf,
    #[command(flatten)]
    policy: PolicyFlags,
    /// Write the per-tick trace as JSON lines
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Request/reply round trips against an echo node
    Latency {
        /// One or more of inproc, shm, tcp, comma separated
        #[arg(long, default_value = "inproc")]
        backend: String,
        #[arg(long, default_value_t = rio::bench::DEFAULT_PAYLOAD_BYTES)]
        payload: usize,
        #[arg(long, default_value_t = rio::bench::DEFAULT_PASSES)]
        passes: usize,
        /// Report file; the format follows the extension unless given
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Inject seeded log-normal round trips instead of measuring
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Profile one deployment end to end
    Pipeline {
        config: PathBuf,
        #[command(flatten)]
        policy: PolicyFlags,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
}

#[derive(Args)]
struct GatewayArgs {
    config: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GATEWAY_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    serve_console: bool,
    #[arg(long, default_value = DEFAULT_CONSOLE_DIR)]
    console_dir: PathBuf,
    /// Enables record_ctl; episodes go here
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FILTER_ALPHA)]
    filter_alpha: f64,
    /// Seconds; runs until interrupted when unset
    #[arg(long)]
    duration: Option<f64>,
}

/// Long enough to mean "until interrupted".
const FOREVER: Duration = Duration::from_secs(365 * 24 * 3600);

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

/// Fires once on SIGINT or SIGTERM.
fn interrupts() -> Receiver<()> {
    // SAFETY: the handler only stores to an atomic.
    unsafe {
        libc::signal(libc::SIGINT, on_signal as *const () as libc::sighandler_t);
        libc::signal(libc::SIGTERM, on_signal as *const () as libc::sighandler_t);
    }
    let (tx, rx) = bounded(1);
    thread::spawn(move || {
        while !INTERRUPTED.load(Ordering::SeqCst) {
            thread::sleep(Duration::from_millis(50));
        }
        let _ = tx.send(());
    });
    rx
}

fn seconds(s: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(s).map_err(|_| format!("bad duration {s}").into())
}

fn print_out(text: &str) -> Result<()> {
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    print_out(&(serde_json::to_string_pretty(v)? + "\n"))
}

fn load(config: &PathBuf) -> Result<StationConfig> {
    Ok(StationConfig::load(config)?)
}

fn gateway_options(port: u16, serve_console: bool, console_dir: &PathBuf) -> GatewayOptions {
    GatewayOptions {
        port,
        console_dir: serve_console.then(|| console_dir.clone()),
        ..GatewayOptions::default()
    }
}

fn announce(gw: &Gateway) {
    eprintln!("gateway listening on {}", gw.url());
}

fn teleop_options(flags: &TeleopFlags, instruction: &str) -> Result<TeleopOptions> {
    Ok(TeleopOptions {
        rate_hz: flags.rate,
        filter_alpha: flags.filter_alpha,
        duration: seconds(flags.duration)?,
        instruction: instruction.into(),
        ..TeleopOptions::default()
    })
}

fn emit<R: Report>(report: &R, out: Option<&PathBuf>, format: Option<FormatArg>) -> Result<()> {
    let format = match (format, out) {
        (Some(FormatArg::Json), _) => ReportFormat::Json,
        (Some(FormatArg::Csv), _) => ReportFormat::Csv,
        (None, Some(p)) => ReportFormat::for_path(p),
        (None, None) => ReportFormat::Json,
    };
    match out {
        Some(p) => emit_report(report, format, p)?,
        None => print_out(&render_report(report, format)?)?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Station(StationCmd::Ls) => {
            for e in REGISTRY {
                println!("{:<14} {:<8} {}", e.name, format!("{:?}", e.kind).to_lowercase(), e.description);
            }
        }
        Command::Station(StationCmd::Up { config, duration }) => {
            let station = build_station(&load(&config)?)?;
            eprintln!("station `{}` up on {}", station.name, station.backend().kind());
            for t in station.topics() {
                eprintln!("  {t}");
            }
            let stop = interrupts();
            let limit = duration.map(seconds).transpose()?.unwrap_or(FOREVER);
            let _ = stop.recv_timeout(limit);
            station.shutdown();
        }
        Command::Teleop(a) => {
            let mut station = build_station(&load(&a.config)?)?;
            let opts = teleop_options(&a.flags, "")?;
            match a.flags.source {
                Source::Scripted => print_json(&run_teleop(&mut station, &opts, TeleopSource::Scripted, |_| Ok(()))?)?,
                Source::Gateway => {
                    let session = SessionOptions {
                        gateway: gateway_options(a.flags.port, a.flags.serve_console, &a.flags.console_dir),
                        teleop: opts,
                        out_dir: None,
                    };
                    print_json(&run_session(&mut station, session, Some(interrupts()), announce)?)?;
                }
            }
        }
        Command::Record(a) => {
            let mut station = build_station(&load(&a.config)?)?;
            let opts = teleop_options(&a.flags, &a.instruction)?;
            match a.flags.source {
                Source::Scripted => print_json(&record(&mut station, &opts, TeleopSource::Scripted, &a.out)?)?,
                Source::Gateway => {
                    let session = SessionOptions {
                        gateway: gateway_options(a.flags.port, a.flags.serve_console, &a.flags.console_dir),
                        teleop: opts,
                        out_dir: Some(a.out.clone()),
                    };
                    print_json(&run_session(&mut station, session, Some(interrupts()), announce)?)?;
                }
            }
        }
        Command::Export(a) => {
            let ExportFormat::Flat = a.format;
            let episodes = episode_paths(&a.dir)?;
            if episodes.is_empty() {
                return Err(format!("no episodes in {}", a.dir.display()).into());
            }
            let out = a.out.unwrap_or_else(|| a.dir.join("flat"));
            let ds = export(&episodes, &out)?;
            eprintln!("{} rows from {} episodes into {}", ds.rows, ds.episodes.len(), out.display());
        }
        Command::Mix(a) => {
            let ds = mix(&a.dirs, &a.out)?;
            eprintln!("{} rows ({}) into {}", ds.rows, ds.embodiment, a.out.display());
        }
        Command::Deploy(a) => {
            let mut station = build_station(&load(&a.config)?)?;
            let (report, trace) = deploy(&mut station, &a.policy.options()?)?;
            if let Some(path) = &a.trace {
                trace.write_jsonl(path)?;
            }
            print_json(&report)?;
        }
        Command::Bench(BenchCmd::Latency { backend, payload, passes, out, format, synthetic, seed }) => {
            if synthetic {
                return emit(&synthetic_bench(seed, payload, passes)?, out.as_ref(), format);
            }
            let mut reports = Vec::new();
            for name in backend.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                reports.push(latency_bench(&BackendKind::parse(name)?, payload, passes)?);
            }
            match reports.len() {
                1 => emit(&reports[0], out.as_ref(), format)?,
                _ => emit(&reports, out.as_ref(), format)?,
            }
        }
        Command::Bench(BenchCmd::Pipeline { config, policy, out, format }) => {
            let profile = pipeline_profile(&load(&config)?, &policy.options()?)?;
            emit(&profile, out.as_ref(), format)?;
        }
        Command::Gateway(a) => {
            let mut station = build_station(&load(&a.config)?)?;
            let mut gateway = gateway_options(a.port, a.serve_console, &a.console_dir);
            gateway.host = a.host;
            let teleop = TeleopOptions {
                filter_alpha: a.filter_alpha,
                duration: a.duration.map(seconds).transpose()?.unwrap_or(FOREVER),
                ..TeleopOptions::default()
            };
            let session = SessionOptions { gateway, teleop, out_dir: a.out };
            print_json(&run_session(&mut station, session, Some(interrupts()), announce)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rio: {e}");
            ExitCode::FAILURE
        }
    }
}
