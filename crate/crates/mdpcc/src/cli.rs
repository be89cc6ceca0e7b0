//! Command-line front end. Every flag is an override of a config-file
//! key, so a run is reproducible from the config alone. Exit codes are a
//! stable contract: 0 success, 1 usage or config error, 2 environment or
//! backend error.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mdpcc_core::backends::{MockTableBackend, WireRequest, WireResponse};
use mdpcc_core::expression::Ablation;
use mdpcc_core::metrics::MetricsReport;

use crate::backends::{dispatch_wire, parse_backend_spec};
use crate::config::{Overrides, ResolvedConfig};
use crate::harness::{
    run_augment, run_eval, run_sweep_k, run_train, run_validate_stats, RunError,
};
use crate::pipeline::RunSummary;

#[derive(Parser)]
#[command(
    name = "mdpcc",
    version,
    about = "Append commonsense conflict expressions to articles and train \
             misinformation detectors on the result"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command; each one overrides the matching
/// config-file key.
#[derive(Args)]
struct CommonArgs {
    /// TOML config file; flags override its keys
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Corpus directory holding train/val/test.jsonl
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Output directory for artifacts (default: out)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// In-context examples per extraction prompt
    #[arg(long, value_name = "INT")]
    k: Option<usize>,
    /// Filter threshold on per-token negative log-likelihood
    #[arg(long, value_name = "FLOAT")]
    epsilon: Option<f64>,
    /// Conflict threshold selecting the contrastive expression form
    #[arg(long, value_name = "FLOAT")]
    mu: Option<f64>,
    /// Expression ablation: full, no_icl, no_conj, or no_obj
    #[arg(long, value_name = "NAME")]
    ablation: Option<Ablation>,
    /// Training seeds, comma-separated
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Train on unaugmented articles (the no-expression baseline)
    #[arg(long)]
    raw: bool,
    /// Backend binding, ROLE=KIND, e.g. extractor=mock:fixtures/mock.jsonl
    /// (repeatable; roles: extractor, reasoner)
    #[arg(long = "backend", value_name = "ROLE=KIND")]
    backend: Vec<String>,
    /// Cache directory (also settable via MDPCC_CACHE_DIR)
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    /// Worker threads for augmentation (0 = logical cores)
    #[arg(long, value_name = "INT")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract, score, and append a commonsense expression to every article
    Augment(CommonArgs),
    /// Train the detector across seeds on augmented (or raw) articles
    Train(CommonArgs),
    /// Re-evaluate stored checkpoints on the test split
    Eval(CommonArgs),
    /// Rerun augment + train for several in-context example counts
    #[command(name = "sweep-k")]
    SweepK {
        #[command(flatten)]
        common: CommonArgs,
        /// Example counts to sweep, comma-separated
        #[arg(long, value_name = "LIST", value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Compare corpus split statistics against a published dataset table
    #[command(name = "validate-stats")]
    ValidateStats {
        #[command(flatten)]
        common: CommonArgs,
        /// Published dataset the corpus claims to be
        #[arg(long, value_name = "NAME")]
        dataset: String,
    },
    /// Serve a mock fixture over the stdio wire protocol (for testing
    /// local-process backends)
    #[command(name = "mock-serve", hide = true)]
    MockServe {
        #[arg(long, value_name = "PATH")]
        fixture: PathBuf,
    },
}

/// Parses `args` and runs the selected command, returning the process
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::MockServe { fixture } => serve_mock(&fixture),
        command => match execute(command) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    }
}

fn resolve(common: CommonArgs) -> Result<ResolvedConfig, RunError> {
    let mut backends = Vec::with_capacity(common.backend.len());
    for spec in &common.backend {
        backends.push(parse_backend_spec(spec).map_err(RunError::Usage)?);
    }
    Ok(crate::config::resolve(Overrides {
        config: common.config,
        corpus: common.corpus,
        out: common.out,
        k: common.k,
        epsilon: common.epsilon,
        mu: common.mu,
        ablation: common.ablation,
        seeds: common.seeds,
        raw: common.raw,
        backends,
        cache_dir: common.cache_dir,
        workers: common.workers,
    })?)
}

fn execute(command: Command) -> Result<i32, RunError> {
    match command {
        Command::Augment(common) => {
            let config = resolve(common)?;
            let output = run_augment(&config)?;
            for reject in &output.rejects {
                eprintln!(
                    "warning: skipped {} line {}: {}",
                    reject.split.as_str(),
                    reject.line,
                    reject.reason
                );
            }
            print_augment_summary(&config, &output.summary);
            Ok(0)
        }
        Command::Train(common) => {
            let config = resolve(common)?;
            let report = run_train(&config)?;
            print!("{}", report.render_text());
            println!("wrote {}", config.report_path().display());
            // A seed failure is reported, not hidden: the partial report is
            // on disk but the run did not do what was asked.
            Ok(if report.failure.is_some() { 2 } else { 0 })
        }
        Command::Eval(common) => {
            let config = resolve(common)?;
            let report = run_eval(&config)?;
            for (seed, row) in &report.rows {
                println!(
                    "seed {seed}: test macro F1 {:.2}, accuracy {:.2}",
                    row.macro_f1, row.accuracy
                );
            }
            println!(
                "test macro F1 {}  accuracy {}  precision {}  recall {}",
                MetricsReport::format_pm(report.mean.macro_f1, report.std.macro_f1),
                MetricsReport::format_pm(report.mean.accuracy, report.std.accuracy),
                MetricsReport::format_pm(report.mean.precision, report.std.precision),
                MetricsReport::format_pm(report.mean.recall, report.std.recall),
            );
            Ok(0)
        }
        Command::SweepK { common, values } => {
            let config = resolve(common)?;
            let output = run_sweep_k(&config, &values)?;
            for row in &output.rows {
                println!(
                    "k={}: test macro F1 {}",
                    row.k,
                    MetricsReport::format_pm(row.test_macro_f1_mean, row.test_macro_f1_std)
                );
            }
            for (k, error) in &output.failures {
                eprintln!("k={k} failed: {error}");
            }
            println!("wrote {}", output.table_path.display());
            Ok(if output.failures.is_empty() { 0 } else { 2 })
        }
        Command::ValidateStats { common, dataset } => {
            let config = resolve(common)?;
            let report = run_validate_stats(&config.corpus_dir, &dataset)?;
            // Advisory check: mismatches are data for the operator, not a
            // failure of this tool, so the exit code stays 0.
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            Ok(0)
        }
        Command::MockServe { .. } => unreachable!("handled before config resolution"),
    }
}

fn print_augment_summary(config: &ResolvedConfig, summary: &RunSummary) {
    println!(
        "config {}  extractor {}  reasoner {}",
        &summary.config_hash[..12],
        summary.extractor_id,
        summary.reasoner_id
    );
    for split in &summary.splits {
        let mean = split
            .mean_conflict
            .map(|c| format!("{c:.3}"))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "  {}: {} articles, {} conflicted, {} empty expressions, mean conflict {}, \
             {} triplets filtered",
            split.split.as_str(),
            split.articles,
            split.conflicted,
            split.empty_expressions,
            mean,
            split.filter_drops,
        );
    }
    println!(
        "backend calls: extractor {}, reasoner {}; cache hits: generation {}, record {}",
        summary.extractor_calls,
        summary.reasoner_calls,
        summary.generation_cache_hits,
        summary.record_cache_hits
    );
    println!("wrote {}", config.summary_path().display());
}

/// Speaks the stdio wire protocol around a mock fixture: a ready
/// handshake, then one JSON response line per JSON request line.
fn serve_mock(fixture: &Path) -> i32 {
    let mut stdout = std::io::stdout().lock();
    let mut fail = |message: String| -> i32 {
        let line = serde_json::json!({ "status": "error", "message": message });
        let _ = writeln!(stdout, "{line}");
        let _ = stdout.flush();
        2
    };
    let content = match std::fs::read_to_string(fixture) {
        Ok(content) => content,
        Err(e) => return fail(format!("cannot read {}: {e}", fixture.display())),
    };
    let backend = match MockTableBackend::from_jsonl_str("serve", &content) {
        Ok(backend) => backend,
        Err(e) => return fail(format!("invalid fixture {}: {e}", fixture.display())),
    };

    let ready = serde_json::json!({ "status": "ready" });
    if writeln!(stdout, "{ready}").and_then(|()| stdout.flush()).is_err() {
        return 2;
    }
    for line in std::io::stdin().lock().lines() {
        let line = match line {
            Ok(line) => line,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<WireRequest>(&line) {
            Ok(request) => dispatch_wire(&backend, &request),
            Err(e) => WireResponse {
                text: String::new(),
                tokens: None,
                logprobs: None,
                error: Some(format!("invalid request: {e}")),
            },
        };
        let encoded = serde_json::to_string(&response).expect("response serializes");
        if writeln!(stdout, "{encoded}").and_then(|()| stdout.flush()).is_err() {
            break; // client hung up
        }
    }
    0
}
