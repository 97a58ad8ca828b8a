//! Command-line entry point for the impression pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use radimpress::config::{load_config, EngineConfig};
use radimpress::inconsistency::{
    flag_candidates, load_annotations, save_annotations, summarize,
};
use radimpress::orchestrator::{run_batch, run_case, SessionContext};
use radimpress::pipeline::{
    judge_stage, metrics_stage, read_run_dir, run_pipeline, write_run_dir, RunRecord,
};
use radimpress::report::{load_corpus, parse_report, save_corpus, split_corpus, Corpus, RadiologyReport};
use radimpress::retrieval::{build_index, retrieve_top_k, RetrievalConfig, VectorIndex};

#[derive(Parser)]
#[command(name = "radimpress", version, about = "Retrieval-augmented generate/review engine for radiology report impressions")]
struct Cli {
    /// Engine config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Verbose logging.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw sectioned report files into a corpus.
    Ingest {
        /// A report text file or a directory of them.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the rule-based impression cleaning pass.
        #[arg(long)]
        no_clean: bool,
    },
    /// Split a corpus into eval and database sets.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        n_eval: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_eval: PathBuf,
        #[arg(long)]
        out_db: PathBuf,
    },
    /// Build a vector index over a database corpus.
    Index {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query an index for the top-k similar reports.
    Query {
        #[arg(long)]
        index: PathBuf,
        /// Database corpus backing the index.
        #[arg(long)]
        db: PathBuf,
        /// Query report as a JSON object file.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run one case and print the session transcript JSON.
    Run {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Run every eval case into a run directory.
    Batch {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Score a run directory against reference impressions.
    Metrics {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Judge single-agent vs multi-agent run directories.
    Judge {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        single_runs: PathBuf,
        #[arg(long)]
        multi_runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Tabulate inconsistency annotations per variant.
    InconsistencyReport {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draft machine-generated inconsistency annotations for a run dir.
    InconsistencyDraft {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "multi-agent")]
        variant: String,
        /// Use the configured agent backend to pre-screen cases.
        #[arg(long)]
        use_backend: bool,
    },
    /// Run split, index, both batches, metrics, and optional judge.
    Pipeline,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }),
    )
    .init();

    let config = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(config) => config,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => EngineConfig::default(),
    };

    match dispatch(cli.command, &config) {
        Ok(partial_failures) if partial_failures > 0 => {
            eprintln!("completed with {partial_failures} failed case(s)");
            ExitCode::from(2)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Returns the number of per-case failures, for the partial-failure exit
/// code.
fn dispatch(command: Command, config: &EngineConfig) -> Result<usize> {
    match command {
        Command::Ingest { input, out, no_clean } => {
            let corpus = ingest(&input, !no_clean, config)?;
            save_corpus(&corpus, &out)?;
            println!("wrote {} report(s) to {}", corpus.len(), out.display());
            Ok(0)
        }
        Command::Split { corpus, n_eval, seed, out_eval, out_db } => {
            let corpus = load_corpus(&corpus)?;
            let split = split_corpus(&corpus, n_eval, seed)?;
            save_corpus(&split.eval_set, &out_eval)?;
            save_corpus(&split.database_set, &out_db)?;
            println!(
                "split {} report(s) into {} eval / {} database",
                corpus.len(),
                split.eval_set.len(),
                split.database_set.len()
            );
            Ok(0)
        }
        Command::Index { db, out } => {
            let db = load_corpus(&db)?;
            let embedder = config.embedder_backend()?;
            let index = build_index(&db, embedder.as_ref())?;
            index.save(&out)?;
            println!("indexed {} report(s) to {}", index.len(), out.display());
            Ok(0)
        }
        Command::Query { index, db, report, k } => {
            let db = load_corpus(&db)?;
            let mut index = VectorIndex::load(&index)?;
            index.attach_reports(&db)?;
            let embedder = config.embedder_backend()?;
            index.ensure_matches(embedder.as_ref())?;
            let query = read_report_json(&report)?;
            let cfg = RetrievalConfig { k: k.unwrap_or(config.retrieval.k) };
            let hits = retrieve_top_k(&index, &query, &cfg, embedder.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&hits)?);
            Ok(0)
        }
        Command::Run { report, index, db } => {
            let query = read_report_json(&report)?;
            let prompts = config.prompt_set()?;
            let provider = config.backend_provider()?;
            let embedder = config.embedder_backend()?;
            let index = load_index_with_reports(index.as_deref(), db.as_deref())?;
            let ctx = SessionContext {
                provider: provider.as_ref(),
                prompts: &prompts,
                index: index.as_ref(),
                embedder: Some(embedder.as_ref()),
            };
            let result = run_case(&query.without_impression(), &ctx, &config.session)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(0)
        }
        Command::Batch { eval, index, db, out, parallelism } => {
            if parallelism == 0 {
                bail!("--parallelism must be >= 1");
            }
            let eval = load_corpus(&eval)?;
            let prompts = config.prompt_set()?;
            let provider = config.backend_provider()?;
            let embedder = config.embedder_backend()?;
            let index = load_index_with_reports(index.as_deref(), db.as_deref())?;
            let ctx = SessionContext {
                provider: provider.as_ref(),
                prompts: &prompts,
                index: index.as_ref(),
                embedder: Some(embedder.as_ref()),
            };
            let entries = run_batch(&eval, &ctx, &config.session, parallelism);
            let failures = write_run_dir(&entries, &out)?;
            println!("ran {} case(s), {} failed, into {}", entries.len(), failures, out.display());
            Ok(failures)
        }
        Command::Metrics { runs, references, out } => {
            let records = read_run_dir(&runs)?;
            let references = load_corpus(&references)?;
            let aggregate = metrics_stage(&records, &references, &out)?;
            println!("{}", serde_json::to_string_pretty(&aggregate)?);
            Ok(0)
        }
        Command::Judge { eval, single_runs, multi_runs, out, parallelism } => {
            let eval = load_corpus(&eval)?;
            let prompts = config.prompt_set()?;
            let provider = config.backend_provider()?;
            let single = read_run_dir(&single_runs)?;
            let multi = read_run_dir(&multi_runs)?;
            let file = judge_stage(
                &eval,
                &single,
                &multi,
                provider.as_ref(),
                &prompts.judge,
                parallelism,
                &out,
            )?;
            if let Some(aggregate) = &file.aggregate {
                println!("{}", serde_json::to_string_pretty(aggregate)?);
            }
            Ok(file.failures.len())
        }
        Command::InconsistencyReport { annotations, out } => {
            let annotations = load_annotations(&annotations)?;
            let summary = summarize(&annotations);
            std::fs::write(&out, serde_json::to_string_pretty(&summary)?)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(0)
        }
        Command::InconsistencyDraft { runs, out, variant, use_backend } => {
            let records = read_run_dir(&runs)?;
            let prompts = config.prompt_set()?;
            let provider = if use_backend { Some(config.backend_provider()?) } else { None };
            let mut drafts = Vec::new();
            for record in &records {
                let RunRecord::Success(result) = record else { continue };
                let task = result
                    .transcript
                    .iter()
                    .find(|m| m.agent == radimpress::orchestrator::Agent::User)
                    .map(|m| m.content.clone())
                    .unwrap_or_default();
                let backend = match &provider {
                    Some(p) => {
                        Some(p.backend(&result.case_id, radimpress::chat::AgentRole::Flagger)?)
                    }
                    None => None,
                };
                let mut draft = flag_candidates(
                    &task,
                    &result.final_impression,
                    backend.as_deref(),
                    &prompts.flagger,
                )?;
                draft.case_id = result.case_id.clone();
                draft.variant = variant.clone();
                drafts.push(draft);
            }
            save_annotations(&drafts, &out)?;
            println!("wrote {} draft(s) to {}", drafts.len(), out.display());
            Ok(0)
        }
        Command::Pipeline => {
            let summary = run_pipeline(config)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(summary.partial_failures())
        }
    }
}

fn ingest(input: &Path, clean: bool, config: &EngineConfig) -> Result<Corpus> {
    let mut files = Vec::new();
    if input.is_dir() {
        for entry in std::fs::read_dir(input)? {
            let path = entry?.path();
            if path.extension().is_some_and(|ext| ext == "txt") {
                files.push(path);
            }
        }
        files.sort();
    } else {
        files.push(input.to_path_buf());
    }
    if files.is_empty() {
        bail!("no .txt report files under {}", input.display());
    }

    let mut reports = Vec::new();
    for path in &files {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut report =
            parse_report(&raw).with_context(|| format!("parsing {}", path.display()))?;
        report.id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("report{}", reports.len()));
        if clean && report.impression.is_some() {
            report = radimpress::report::clean_impression(&report, &config.cleaner.phrases, None)?;
        }
        reports.push(report);
    }
    Ok(Corpus::new(reports))
}

fn read_report_json(path: &Path) -> Result<RadiologyReport> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))
}

fn load_index_with_reports(
    index: Option<&Path>,
    db: Option<&Path>,
) -> Result<Option<VectorIndex>> {
    let Some(index_path) = index else { return Ok(None) };
    let mut index = VectorIndex::load(index_path)?;
    let db_path = db.with_context(|| {
        format!("--db is required alongside --index {}", index_path.display())
    })?;
    let db = load_corpus(db_path)?;
    index.attach_reports(&db)?;
    Ok(Some(index))
}
