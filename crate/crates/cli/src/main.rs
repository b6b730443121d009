//! `evidencesql` command-line entry point.

mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evidencesql::canonical::{format_real, to_canonical_json};
use evidencesql::exec::execute;
use evidencesql::guard::{validate_pipeline, SourceAgent};
use evidencesql::knowledge::{compute_empirical_ranges, read_ranges, write_ranges, KnowledgeError, RangeBook};
use evidencesql::pipeline::{batch_eval, run_case, write_case_artifacts, PipelineContext, PipelineError, QuestionSet};
use evidencesql::report::{write_atomic, Mode};
use evidencesql::store::{ingest_case_dir, load_manifest, load_training_split, SchemaManifest, StoreError, Value};
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "evidencesql", version, about = "Auditable SQL evidence reasoning over per-case feature tables")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Schema manifest (JSON). Defaults to the built-in canonical manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// full, sql_only or cnn_only.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// CNN weight in the fusion, in [0, 1].
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Worker threads for batch evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate one case directory.
    Ingest {
        #[arg(long)]
        case: PathBuf,
    },
    /// Run the guard pipeline on a query.
    Validate {
        #[arg(long, conflicts_with = "sql", required_unless_present = "sql")]
        query_file: Option<PathBuf>,
        #[arg(long)]
        sql: Option<String>,
    },
    /// Validate and execute a query against one case.
    Query {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        sql: String,
        /// Print CSV instead of a table.
        #[arg(long, conflicts_with = "json")]
        csv: bool,
    },
    /// Derive empirical reference ranges from a labelled training split.
    CalibrateRanges {
        #[arg(long)]
        train: PathBuf,
        /// Comma-separated table.column keys.
        #[arg(long, value_delimiter = ',', required = true)]
        features: Vec<String>,
        /// Comma-separated option labels; defaults to the labels in the split.
        #[arg(long, value_delimiter = ',')]
        options: Vec<String>,
        #[arg(long)]
        quantile: Option<f64>,
        /// Ranges file to write; defaults to <out>/ranges.json.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Answer one question for one case and write its report.
    Ask {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        question: PathBuf,
        #[arg(long)]
        ranges: Option<PathBuf>,
    },
    /// Evaluate a labelled dataset and summarise accuracy.
    BatchEval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        ranges: Option<PathBuf>,
    },
}

/// An error with its exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    detail: Option<serde_json::Value>,
}

impl Failure {
    pub fn config(message: String) -> Failure {
        Failure {
            code: 2,
            kind: "config",
            message,
            detail: None,
        }
    }

    fn pipeline(kind: &'static str, message: String) -> Failure {
        Failure {
            code: 1,
            kind,
            message,
            detail: None,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Failure {
        Failure {
            code: e.exit_code() as u8,
            kind: e.kind(),
            message: e.to_string(),
            detail: None,
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Failure {
        Failure::pipeline("store", e.to_string())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::pipeline("io", format!("{}: {e}", path.display()))
}

struct Env {
    manifest: SchemaManifest,
    config: RunConfig,
    opts: GlobalOpts,
}

impl Env {
    fn new(opts: GlobalOpts) -> Result<Env, Failure> {
        let mut config = RunConfig::load(opts.config.as_deref())?;
        if let Some(m) = opts.mode {
            config.mode = m;
        }
        if let Some(a) = opts.alpha {
            config.alpha = a;
        }
        if opts.manifest.is_some() {
            config.manifest = opts.manifest.clone();
        }
        config.check()?;
        let manifest = match &config.manifest {
            Some(p) => load_manifest(p).map_err(|e| Failure::config(e.to_string()))?,
            None => SchemaManifest::canonical(),
        };
        if opts.workers == 0 {
            return Err(Failure::config("--workers must be at least 1".into()));
        }
        Ok(Env { manifest, config, opts })
    }

    fn ranges(&self, flag: Option<&Path>) -> Result<RangeBook, Failure> {
        let path = flag.or(self.config.ranges.as_deref());
        Ok(match path {
            Some(p) => RangeBook::new(read_ranges(p).map_err(|e| Failure::config(e.to_string()))?),
            None => RangeBook::default(),
        })
    }

    fn write_run_json(&self, command: &str) -> Result<(), Failure> {
        let run = json!({
            "command": command,
            "config": self.config,
            "config_sha256": self.config.sha256(),
            "manifest_version": self.manifest.version,
            "tool_version": env!("CARGO_PKG_VERSION"),
        });
        let path = self.opts.out.join("run.json");
        write_atomic(&path, to_canonical_json(&run).expect("serializes").as_bytes()).map_err(io(&path))
    }
}

fn print_json(v: &impl serde::Serialize) {
    print!("{}", to_canonical_json(v).expect("serializes"));
}

fn cell(v: &Value) -> String {
    match v {
        Value::Real(r) => format_real(*r),
        other => other.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let env = Env::new(cli.global)?;
    let as_json = env.opts.json;
    match cli.command {
        Command::Ingest { case } => {
            let bundle = ingest_case_dir(&env.manifest, &case)?;
            let tables: serde_json::Map<String, serde_json::Value> =
                bundle.tables().map(|t| (t.name().to_owned(), json!(t.row_count()))).collect();
            let summary = json!({
                "case_id": bundle.case_id(),
                "tables": tables,
                "cnn_probs": bundle.cnn_probs().map(|p| p.iter().cloned().collect::<std::collections::BTreeMap<_, _>>()),
                "ground_truth": bundle.ground_truth(),
            });
            if as_json {
                print_json(&summary);
            } else {
                println!("case {}", bundle.case_id());
                for t in bundle.tables() {
                    println!("  {}: {} rows", t.name(), t.row_count());
                }
            }
        }
        Command::Validate { query_file, sql } => {
            let text = match (query_file, sql) {
                (Some(p), _) => read_text(&p)?,
                (None, Some(s)) => s,
                (None, None) => unreachable!("clap requires one"),
            };
            match validate_pipeline(&text, &env.manifest, SourceAgent::Manual) {
                Ok(vq) => {
                    if as_json {
                        print_json(&vq);
                    } else {
                        println!("{}", vq.canonical_text());
                    }
                }
                Err(rejection) => {
                    print_json(&rejection);
                    return Err(Failure {
                        code: 1,
                        kind: "guard",
                        message: rejection.to_string(),
                        detail: Some(serde_json::to_value(&rejection).expect("serializes")),
                    });
                }
            }
        }
        Command::Query { case, sql, csv } => {
            let bundle = ingest_case_dir(&env.manifest, &case)?;
            let vq = validate_pipeline(&sql, &env.manifest, SourceAgent::Manual).map_err(|r| Failure {
                code: 1,
                kind: "guard",
                message: r.to_string(),
                detail: Some(serde_json::to_value(&r).expect("serializes")),
            })?;
            let result = execute(&vq, &bundle).map_err(|e| Failure::pipeline("exec", e.to_string()))?;
            if as_json {
                print_json(&result);
            } else if csv {
                println!("{}", result.column_names.join(","));
                for row in &result.rows {
                    let cells: Vec<String> = row.iter().map(cell).collect();
                    println!("{}", cells.join(","));
                }
            } else {
                println!("{}", result.column_names.join(" | "));
                for row in &result.rows {
                    let cells: Vec<String> = row.iter().map(cell).collect();
                    println!("{}", cells.join(" | "));
                }
            }
        }
        Command::CalibrateRanges {
            train,
            features,
            options,
            quantile,
            output,
        } => {
            let split = load_training_split(&env.manifest, &train)?;
            let options = if options.is_empty() {
                split
                    .iter()
                    .filter_map(|c| c.ground_truth().map(str::to_owned))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            } else {
                options
            };
            let q = quantile.unwrap_or(env.config.quantile);
            let (ranges, notes) =
                compute_empirical_ranges(&split, &env.manifest, &features, &options, q).map_err(|e| match e {
                    KnowledgeError::InvalidQuantile(_) | KnowledgeError::UnknownFeature(_) => {
                        Failure::config(e.to_string())
                    }
                    other => Failure::pipeline("knowledge", other.to_string()),
                })?;
            let path = output.unwrap_or_else(|| env.opts.out.join("ranges.json"));
            write_ranges(&path, &ranges).map_err(io(&path))?;
            if as_json {
                print_json(&json!({"path": path, "ranges": ranges, "notes": notes}));
            } else {
                println!("wrote {} range(s) to {}", ranges.len(), path.display());
                for n in notes {
                    println!("note: {n}");
                }
            }
        }
        Command::Ask { case, question, ranges } => {
            let questions = QuestionSet::from_json(&read_text(&question)?).map_err(Failure::config)?;
            let book = env.ranges(ranges.as_deref())?;
            let bundle = ingest_case_dir(&env.manifest, &case)?;
            let q = questions
                .for_case(bundle.case_id())
                .ok_or_else(|| Failure::config(format!("no question for case {}", bundle.case_id())))?;
            let backend = env.config.backend(&env.manifest)?;
            let settings = env.config.settings();
            let ctx = PipelineContext {
                manifest: &env.manifest,
                ranges: &book,
                backend: backend.as_ref(),
                settings: &settings,
            };
            let outcome = run_case(&bundle, &q, &ctx)?;
            env.write_run_json("ask")?;
            write_case_artifacts(&env.opts.out, &outcome)?;
            if as_json {
                print_json(&outcome.report);
            } else {
                let r = &outcome.report;
                println!(
                    "{}: {} (confidence {}){}",
                    r.case_id,
                    r.diagnosis.label,
                    format_real(r.diagnosis.confidence),
                    if r.decision.review_flag { ", flagged for review" } else { "" }
                );
                println!("report: {}", env.opts.out.join("reports").join(format!("{}.json", r.case_id)).display());
            }
        }
        Command::BatchEval {
            dataset,
            questions,
            ranges,
        } => {
            let questions = QuestionSet::from_json(&read_text(&questions)?).map_err(Failure::config)?;
            let book = env.ranges(ranges.as_deref())?;
            let backend = env.config.backend(&env.manifest)?;
            let settings = env.config.settings();
            let ctx = PipelineContext {
                manifest: &env.manifest,
                ranges: &book,
                backend: backend.as_ref(),
                settings: &settings,
            };
            let (summary, _) = batch_eval(&dataset, &questions, &ctx, env.opts.workers, Some(&env.opts.out))?;
            env.write_run_json("batch-eval")?;
            let path = env.opts.out.join("summary.json");
            write_atomic(&path, to_canonical_json(&summary).expect("serializes").as_bytes()).map_err(io(&path))?;
            if as_json {
                print_json(&summary);
            } else {
                println!(
                    "{} cases, {} correct, accuracy {}, {} flagged, {} failed",
                    summary.n_cases,
                    summary.n_correct,
                    format_real(summary.accuracy),
                    summary.n_flagged,
                    summary.failures.len()
                );
                for (class, acc) in &summary.per_class_accuracy {
                    println!("  {class}: {}", format_real(*acc));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let mut err = json!({"kind": f.kind, "message": f.message, "exit_code": f.code});
            if let Some(d) = f.detail {
                err["detail"] = d;
            }
            eprint!("{}", to_canonical_json(&json!({ "error": err })).expect("serializes"));
            ExitCode::from(f.code)
        }
    }
}
