//! `renewqif`: command-line client of the renewqif service. Without `--server`
//! it starts the service in-process on a loopback port.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use renewqif_client::api::*;
use renewqif_client::{Client, ClientError};
use renewqif_core::bench::{Scale, Table};
use renewqif_core::qif::NewtonConfig;
use renewqif_core::renew::{CoefficientReport, RenewConfig};
use renewqif_core::simulate::SimConfig;
use renewqif_core::stream::driver::{report_header, report_row};
use renewqif_core::stream::{BatchReport, StreamConfig};
use renewqif_core::{CorrStructure, Family, ModelSpec};

#[derive(Parser)]
#[command(name = "renewqif", version, about = "Renewable QIF estimation and monitoring for streaming clustered data")]
struct Cli {
    /// Service URL; an in-process service is started when omitted.
    #[arg(long, global = true, env = "RENEWQIF_SERVER")]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a stream of batch files from the standard design.
    Simulate(SimulateArgs),
    /// Offline fit of one batch file.
    Fit {
        #[arg(value_enum)]
        method: Method,
        #[command(flatten)]
        model: ModelArgs,
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Renewable estimation over batch files with a persisted state.
    #[command(subcommand)]
    Stream(StreamCommand),
    /// Reproduce a simulation table.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Gee,
    Qif,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "gaussian")]
    family: Family,
    #[arg(long, default_value = "compound-symmetry")]
    corr: CorrStructure,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "gaussian")]
    family: Family,
    /// Clusters per batch.
    #[arg(long, default_value_t = 100)]
    n_b: usize,
    #[arg(long, default_value_t = 10)]
    batches: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Batch indices generated under the departed coefficient vector.
    #[arg(long, value_delimiter = ',')]
    contaminate: Vec<u64>,
    /// Departure added to the magnitude of the second coefficient.
    #[arg(long, default_value_t = 1.0)]
    departure: f64,
    /// Output directory for `batch_NNNN.csv` files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum StreamCommand {
    /// Initialize a state file from the first batch.
    Init {
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Monitoring significance level.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        no_monitor: bool,
        /// Also carry a RenewGEE estimate.
        #[arg(long)]
        gee: bool,
        file: PathBuf,
    },
    /// Screen and renew with further batches, in order.
    Update {
        #[arg(long)]
        state: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Inference report of a state file.
    Report {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "linear-growing-B")]
    table: Table,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value = "desk")]
    scale: Scale,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory for per-batch `-log10 p` trace files.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug)]
enum Failure {
    Kind(WireErrorKind, String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Kind(WireErrorKind::Parse, _) => 2,
            Failure::Kind(WireErrorKind::Numerical, _) => 3,
            Failure::Kind(WireErrorKind::StateVersion, _) => 4,
            _ => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Kind(_, m) | Failure::Other(m) => m,
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Api { body, .. } => Failure::Kind(body.kind, body.message),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

fn read_payload(path: &Path) -> Result<BatchPayload, Failure> {
    let csv = std::fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    Ok(BatchPayload { batch_id: None, csv })
}

fn read_state(path: &Path) -> Result<StateBlob, Failure> {
    let bytes = std::fs::read(path).map_err(|e| io_fail(path, e))?;
    Ok(StateBlob::encode(&bytes))
}

fn write_state(path: &Path, blob: &StateBlob) -> Result<(), Failure> {
    let bytes = blob.decode().map_err(|e| Failure::Other(format!("service returned a malformed state: {e}")))?;
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_fail(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| io_fail(path, e))?;
    tmp.persist(path).map_err(|e| io_fail(path, e.error))?;
    Ok(())
}

fn print_reports(reports: &[BatchReport], header: bool, p: usize) {
    if header {
        println!("{}", report_header(p));
    }
    for r in reports {
        println!("{}", report_row(r));
    }
}

fn coefficient_table(coefs: &[CoefficientReport]) -> String {
    let mut out = format!("{:>4} {:>14} {:>12} {:>10} {:>12} {:>12}\n", "k", "estimate", "std_error", "z", "p", "-log10 p");
    for (k, c) in coefs.iter().enumerate() {
        out += &format!(
            "{:>4} {:>14.6e} {:>12.4e} {:>10.3} {:>12.4e} {:>12.3}\n",
            k + 1,
            c.estimate,
            c.std_error,
            c.z,
            c.p_value,
            c.neg_log10_p
        );
    }
    out
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli, client: &Client) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(a) => {
            let mut config = SimConfig::standard(a.family, a.n_b, a.batches, a.seed);
            if !a.contaminate.is_empty() {
                config = config.with_contamination(a.contaminate, a.departure);
            }
            let sim = client.simulate(&SimulateRequest { config })?;
            std::fs::create_dir_all(&a.out).map_err(|e| io_fail(&a.out, e))?;
            for (i, b) in sim.batches.iter().enumerate() {
                let path = a.out.join(format!("batch_{:04}.csv", b.batch_id.unwrap_or(i as u64 + 1)));
                std::fs::write(&path, &b.csv).map_err(|e| io_fail(&path, e))?;
                println!("{}", path.display());
            }
        }
        Command::Fit { method, model, file, json: as_json } => {
            let batch = read_payload(&file)?;
            let p = batch.csv.lines().next().map_or(0, |h| h.split(',').count().saturating_sub(2));
            let model = ModelSpec::new(model.family, p.max(1), model.corr).map_err(|e| Failure::Other(e.to_string()))?;
            let method = match method {
                Method::Gee => FitMethod::Gee,
                Method::Qif => FitMethod::Qif,
            };
            let fit = client.fit(&FitRequest { method, model, batch, newton: None })?;
            if as_json {
                println!("{}", json(&fit));
            } else {
                println!("clusters={} iterations={} converged={}", fit.clusters, fit.iterations, fit.converged);
                if let Some(n) = fit.nuisance {
                    println!("alpha={:.6} phi={:.6}", n.alpha, n.phi);
                }
                if let Some(q) = fit.q {
                    println!("Q={q:.6e}");
                }
                print!("{}", coefficient_table(&fit.coefficients));
            }
        }
        Command::Stream(StreamCommand::Init { state, model, alpha, no_monitor, gee, file }) => {
            if state.exists() {
                return Err(Failure::Other(format!("{} already exists; use `stream update`", state.display())));
            }
            let batch = read_payload(&file)?;
            let p = batch.csv.lines().next().map_or(0, |h| h.split(',').count().saturating_sub(2));
            let model = ModelSpec::new(model.family, p.max(1), model.corr).map_err(|e| Failure::Other(e.to_string()))?;
            let config = StreamConfig {
                renew: RenewConfig { newton: NewtonConfig::default(), monitor: !no_monitor, alpha },
                track_gee: gee,
            };
            let resp = client.stream_init(&StreamInitRequest { model, config, batch: BatchPayload { batch_id: Some(1), ..batch } })?;
            write_state(&state, &resp.state)?;
            print_reports(&resp.reports, true, model.p);
        }
        Command::Stream(StreamCommand::Update { state, files }) => {
            let blob = read_state(&state)?;
            let batches = files.iter().map(|f| read_payload(f)).collect::<Result<Vec<_>, _>>()?;
            let resp = client.stream_update(&StreamUpdateRequest { state: blob, batches })?;
            write_state(&state, &resp.state)?;
            let p = resp.reports.first().map_or(0, |r| r.report.coefficients.len());
            print_reports(&resp.reports, p > 0, p);
            if let Some(h) = resp.halted {
                let file = files.get(resp.reports.len()).map(|f| f.display().to_string()).unwrap_or_default();
                return Err(Failure::Kind(h.kind, format!("{file}: {}", h.message)));
            }
        }
        Command::Stream(StreamCommand::Report { state, json: as_json }) => {
            let r = client.stream_report(&read_state(&state)?)?;
            if as_json {
                println!("{}", json(&r));
            } else {
                println!(
                    "batches={} clusters={} rejected={} family={} corr={} monitor={} alpha={}",
                    r.report.b,
                    r.report.n_total,
                    r.report.batches_rejected,
                    r.model.family.name(),
                    r.model.corr.name(),
                    r.config.renew.monitor,
                    r.config.renew.alpha
                );
                print!("{}", coefficient_table(&r.report.coefficients));
                if let Some(g) = &r.gee {
                    println!("RenewGEE");
                    print!("{}", coefficient_table(g));
                }
            }
        }
        Command::Bench(a) => {
            let trace_dir = a.trace_dir.map(|d| std::path::absolute(&d).unwrap_or(d));
            let report = client.bench(&BenchRequest { table: a.table, reps: a.reps, scale: a.scale, seed: a.seed, trace_dir })?;
            if a.json {
                println!("{}", json(&report));
            } else {
                print!("{}", report.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut runtime = None;
    let base = match &cli.server {
        Some(url) => url.clone(),
        None => {
            let rt = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => {
                    eprintln!("error: cannot start runtime: {e}");
                    return ExitCode::from(1);
                }
            };
            let addr = match rt.block_on(renewqif_server::spawn("127.0.0.1:0".parse().expect("loopback address"))) {
                Ok((addr, _)) => addr,
                Err(e) => {
                    eprintln!("error: cannot start the local service: {e}");
                    return ExitCode::from(1);
                }
            };
            runtime = Some(rt);
            format!("http://{addr}")
        }
    };
    let result = Client::new(base).map_err(Failure::from).and_then(|c| run(cli, &c));
    drop(runtime);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
