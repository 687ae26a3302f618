//! Command-line entry points. Exit status 2 means the inputs were rejected,
//! 1 means the command failed for another reason.

use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use qa_core::aggregation::Granularity;
use qa_core::eval::{compare_scores, pair_scores, read_score_table, ComparisonReport, ScoreEntry};
use qa_core::events::{generate_cohort, write_cohort_csv, write_cohort_json, ComplianceProfile, EventFormat};
use qa_core::protocol::parse_protocol_file;

use crate::query::{load_cohort, parse_time, rows_to_csv, to_json, InputError, QueryFilter, Snapshot, Sources};
use crate::service::{serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "qa", version, about = "Score clinical event logs against a care protocol")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score a cohort and write the score tree or a flat table.
    Score(ScoreArgs),
    /// Serve the HTTP API over a loaded snapshot.
    Serve(ServeArgs),
    /// Generate a synthetic cohort.
    Generate(GenerateArgs),
    /// Correlate manual and automated scores per metric.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Start of the scoring frame (ISO-8601); defaults to the first admission.
    #[arg(long)]
    pub from: Option<String>,
    /// End of the scoring frame, exclusive; defaults to the last discharge.
    #[arg(long)]
    pub to: Option<String>,
    #[arg(long = "ward")]
    pub wards: Vec<String>,
    #[arg(long = "patient")]
    pub patients: Vec<String>,
    #[arg(long)]
    pub stage: Option<String>,
    /// `whole`, `day` or `hours:N`.
    #[arg(long, default_value = "whole")]
    pub granularity: Granularity,
}

impl FilterArgs {
    fn to_filter(&self) -> Result<QueryFilter, InputError> {
        let time = |param: &str, v: &Option<String>| v.as_deref().map(|s| parse_time(param, s)).transpose();
        Ok(QueryFilter {
            from: time("from", &self.from)?,
            to: time("to", &self.to)?,
            wards: self.wards.clone(),
            patients: self.patients.clone(),
            stage: self.stage.clone(),
            granularity: self.granularity,
            prefix: String::new(),
        })
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    /// Event file (`.csv` or `.json`), or `-` for CSV on stdin.
    #[arg(long)]
    pub events: PathBuf,
    #[command(flatten)]
    pub filter: FilterArgs,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    #[arg(long)]
    pub n: usize,
    /// Compliance profile (JSON); every action fully compliant when absent.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; `.json` selects JSON, anything else CSV. Stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Manual scores: `metric,patient_id,manual_score` (or `score`).
    #[arg(long)]
    pub manual: PathBuf,
    /// Automated scores: `metric,patient_id,automated_score` (or `score`).
    #[arg(long, required_unless_present = "auto", conflicts_with = "auto")]
    pub automated: Option<PathBuf>,
    /// Score `--events` against `--protocol` instead of reading automated scores.
    #[arg(long, requires_all = ["events", "protocol"])]
    pub auto: bool,
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    #[command(flatten)]
    pub filter: FilterArgs,
    /// Use exact permutation p-values where the sample is small enough.
    #[arg(long)]
    pub exact: bool,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of a command, with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub status: i32,
    pub message: String,
}

impl From<InputError> for Failure {
    fn from(e: InputError) -> Self {
        Failure {
            status: 2,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        status: 1,
        message: format!("IoError writing {}: {e}", path.display()),
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| io_failure(path, e)),
        // A reader that stops early (`| head`) is not a failure.
        None => match std::io::stdout().lock().write_all(text.as_bytes()) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io_failure(Path::new("stdout"), e)),
            _ => Ok(()),
        },
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, InputError> {
    std::fs::read(path).map_err(|e| InputError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// The `score` output exactly as the service would render it.
pub fn render_score(snapshot: &Snapshot, filter: &QueryFilter, format: Format) -> Result<String, InputError> {
    Ok(match format {
        Format::Json => to_json(&snapshot.score(filter)?),
        Format::Csv => rows_to_csv(&snapshot.score_rows(filter)?),
    })
}

fn score(args: &ScoreArgs) -> Result<(), Failure> {
    let protocol = parse_protocol_file(&args.protocol).map_err(InputError::from)?;
    let (cohort, report) = load_cohort(&args.events)?;
    if report.duplicates_dropped > 0 {
        eprintln!("dropped {} duplicate event(s)", report.duplicates_dropped);
    }
    let snapshot = Snapshot { protocol, cohort, report };
    let text = render_score(&snapshot, &args.filter.to_filter()?, args.format)?;
    emit(&args.out, &text)
}

fn generate(args: &GenerateArgs) -> Result<(), Failure> {
    let protocol = parse_protocol_file(&args.protocol).map_err(InputError::from)?;
    let profile = match &args.profile {
        Some(path) => {
            let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
            ComplianceProfile::from_json(&text).map_err(InputError::from)?
        }
        None => ComplianceProfile::default(),
    };
    let cohort = generate_cohort(&protocol, args.n, &profile, args.seed).map_err(InputError::from)?;
    let format = args.out.as_deref().and_then(EventFormat::from_path).unwrap_or(EventFormat::Csv);
    let mut buf = Vec::new();
    let written = match format {
        EventFormat::Csv => write_cohort_csv(&cohort, &mut buf).map_err(|e| e.to_string()),
        EventFormat::Json => write_cohort_json(&cohort, &mut buf).map_err(|e| e.to_string()),
    };
    written.map_err(|e| io_failure(Path::new("buffer"), e))?;
    emit(&args.out, &String::from_utf8(buf).expect("writers emit utf-8"))
}

fn score_table(path: &Path, columns: &[&str]) -> Result<Vec<ScoreEntry>, Failure> {
    let bytes = read_file(path)?;
    read_score_table(bytes.as_slice(), columns).map_err(|e| Failure {
        status: 2,
        message: format!("{e} in {}", path.display()),
    })
}

fn compare(args: &CompareArgs) -> Result<(), Failure> {
    let manual = score_table(&args.manual, &["manual_score", "score"])?;
    let (automated, manual_only) = match (&args.automated, &args.events, &args.protocol) {
        (Some(path), _, _) => (score_table(path, &["automated_score", "score"])?, false),
        (None, Some(events), Some(protocol)) => {
            let snapshot = Snapshot::load(&Sources {
                protocol: protocol.clone(),
                events: events.clone(),
            })?;
            let scores = snapshot.automated_scores(&args.filter.to_filter()?).map_err(InputError::from)?;
            (scores, true)
        }
        _ => unreachable!("clap requires --automated or --auto with --events and --protocol"),
    };
    let (pairs, warning_rows) = pair_scores(&manual, &automated, manual_only);
    let mut report = compare_scores(&pairs, args.exact);
    report.warnings.extend(warning_rows.iter().map(|r| format!("{}: {}", r.metric, r.flag)));
    report.rows.extend(warning_rows);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit(&args.out, &render_report(&report, args.format))
}

pub fn render_report(report: &ComparisonReport, format: Format) -> String {
    match format {
        Format::Csv => report.to_csv(),
        Format::Json => to_json(report),
    }
}

fn serve_cmd(args: &ServeArgs) -> Result<(), Failure> {
    let sources = Sources {
        protocol: args.protocol.clone(),
        events: args.events.clone(),
    };
    let snapshot = Snapshot::load(&sources)?;
    let state = AppState::new(snapshot, Some(sources));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure {
        status: 1,
        message: format!("cannot start runtime: {e}"),
    })?;
    runtime
        .block_on(serve(state, SocketAddr::new(args.host, args.port)))
        .map_err(|e| Failure {
            status: 1,
            message: format!("cannot serve on {}:{}: {e}", args.host, args.port),
        })
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Score(a) => score(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Compare(a) => compare(a),
    }
}
