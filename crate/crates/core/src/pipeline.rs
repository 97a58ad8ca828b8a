//! End-to-end experiment pipeline and run-directory conventions.
//!
//! `run_pipeline` executes split -> index -> batch (single-agent and
//! multi-agent) -> metrics -> optional judge, writing every artifact
//! under the configured runs directory plus a manifest of completed
//! stages. Outputs are deterministic given the same inputs, config, and
//! scripted backends: re-running must reproduce byte-identical metric and
//! summary files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EngineConfig;
use crate::judge::{aggregate_judge, judge_batch, JudgeAggregate, JudgeCase, JudgePair};
use crate::metrics::{evaluate_corpus, per_case_metrics, CaseMetrics, HashedTokenEmbedder, MetricsReport};
use crate::orchestrator::{
    run_batch, AgentMessage, BatchEntry, SessionConfig, SessionContext, SessionResult,
};
use crate::report::{load_corpus, save_corpus, split_corpus, Corpus};
use crate::retrieval::build_index;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage}: {reason}")]
    Stage { stage: &'static str, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage, reason: e.to_string() }
}

/// One per-case file in a run directory: a finished session or an
/// isolated failure with whatever transcript was recorded.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RunRecord {
    Success(SessionResult),
    Failure { case_id: String, error: String, partial_transcript: Vec<AgentMessage> },
}

impl RunRecord {
    pub fn case_id(&self) -> &str {
        match self {
            RunRecord::Success(result) => &result.case_id,
            RunRecord::Failure { case_id, .. } => case_id,
        }
    }
}

/// Write one `<case_id>.json` per batch entry; returns the failure count.
pub fn write_run_dir(entries: &[BatchEntry], dir: impl AsRef<Path>) -> Result<usize, PipelineError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)
        .map_err(|source| PipelineError::Io { path: dir.display().to_string(), source })?;
    let mut failures = 0;
    for entry in entries {
        let record = match &entry.outcome {
            Ok(result) => RunRecord::Success(result.clone()),
            Err(failure) => {
                failures += 1;
                RunRecord::Failure {
                    case_id: failure.case_id.clone(),
                    error: failure.reason.to_string(),
                    partial_transcript: failure.partial_transcript.clone(),
                }
            }
        };
        let path = dir.join(format!("{}.json", entry.case_id));
        let text = serde_json::to_string_pretty(&record).expect("record serializes");
        fs::write(&path, text)
            .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
    }
    Ok(failures)
}

/// Read every `*.json` record in a run directory, sorted by file name.
pub fn read_run_dir(dir: impl AsRef<Path>) -> Result<Vec<RunRecord>, PipelineError> {
    let dir = dir.as_ref();
    let io_err = |source| PipelineError::Io { path: dir.display().to_string(), source };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();

    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path)
            .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
        let record: RunRecord = serde_json::from_str(&text).map_err(|e| PipelineError::Stage {
            stage: "read-runs",
            reason: format!("{}: {e}", path.display()),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Pair each successful run's final impression with its reference
/// impression from the eval corpus, in record order.
pub fn pair_with_references(
    records: &[RunRecord],
    references: &Corpus,
) -> Result<Vec<(String, String, String)>, PipelineError> {
    let mut pairs = Vec::new();
    for record in records {
        let RunRecord::Success(result) = record else { continue };
        let reference = references
            .get(&result.case_id)
            .and_then(|r| r.impression.clone())
            .ok_or_else(|| PipelineError::Stage {
                stage: "metrics",
                reason: format!("no reference impression for case {}", result.case_id),
            })?;
        pairs.push((result.case_id.clone(), result.final_impression.clone(), reference));
    }
    Ok(pairs)
}

/// Metrics output file shape: the aggregate plus a per-case breakdown.
#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsFile {
    pub aggregate: MetricsReport,
    pub per_case: Vec<PerCaseMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PerCaseMetrics {
    pub case_id: String,
    #[serde(flatten)]
    pub metrics: CaseMetrics,
}

/// Compute metrics over a run directory against reference impressions and
/// write the JSON report.
pub fn metrics_stage(
    records: &[RunRecord],
    references: &Corpus,
    out: impl AsRef<Path>,
) -> Result<MetricsReport, PipelineError> {
    let triples = pair_with_references(records, references)?;
    let pairs: Vec<(String, String)> =
        triples.iter().map(|(_, c, r)| (c.clone(), r.clone())).collect();
    let embedder = HashedTokenEmbedder::default();
    let aggregate = evaluate_corpus(&pairs, &embedder).map_err(|e| stage_err("metrics", e))?;
    let cases = per_case_metrics(&pairs, &embedder).map_err(|e| stage_err("metrics", e))?;
    let file = MetricsFile {
        aggregate: aggregate.clone(),
        per_case: triples
            .iter()
            .zip(cases)
            .map(|((case_id, _, _), metrics)| PerCaseMetrics { case_id: case_id.clone(), metrics })
            .collect(),
    };
    let out = out.as_ref();
    fs::write(out, serde_json::to_string_pretty(&file).expect("metrics serialize"))
        .map_err(|source| PipelineError::Io { path: out.display().to_string(), source })?;
    Ok(aggregate)
}

/// Judge output file shape.
#[derive(Debug, Serialize, Deserialize)]
pub struct JudgeFile {
    pub pairs: Vec<JudgePair>,
    pub failures: Vec<JudgeFileFailure>,
    pub aggregate: Option<JudgeAggregate>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgeFileFailure {
    pub case_id: String,
    pub error: String,
}

/// Judge single-agent vs multi-agent finals for every case present in
/// both run directories, then aggregate.
pub fn judge_stage(
    eval: &Corpus,
    single_records: &[RunRecord],
    multi_records: &[RunRecord],
    provider: &dyn crate::chat::BackendProvider,
    system_prompt: &str,
    parallelism: usize,
    out: impl AsRef<Path>,
) -> Result<JudgeFile, PipelineError> {
    let final_of = |records: &[RunRecord], id: &str| {
        records.iter().find_map(|r| match r {
            RunRecord::Success(result) if result.case_id == id => {
                Some(result.final_impression.clone())
            }
            _ => None,
        })
    };
    let mut cases = Vec::new();
    for report in &eval.reports {
        let (Some(single), Some(multi)) =
            (final_of(single_records, &report.id), final_of(multi_records, &report.id))
        else {
            continue;
        };
        cases.push(JudgeCase {
            original: report.clone(),
            single_impression: single,
            multi_impression: multi,
        });
    }

    let results = judge_batch(&cases, provider, system_prompt, parallelism);
    let mut pairs = Vec::new();
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok(pair) => pairs.push(pair),
            Err(failure) => failures
                .push(JudgeFileFailure { case_id: failure.case_id, error: failure.reason }),
        }
    }
    let aggregate = if pairs.is_empty() {
        None
    } else {
        Some(aggregate_judge(&pairs).map_err(|e| stage_err("judge", e))?)
    };
    let file = JudgeFile { pairs, failures, aggregate };
    let out = out.as_ref();
    fs::write(out, serde_json::to_string_pretty(&file).expect("judge file serialize"))
        .map_err(|source| PipelineError::Io { path: out.display().to_string(), source })?;
    Ok(file)
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub outputs: Vec<String>,
}

/// Pipeline summary written at the end and returned to the caller.
#[derive(Debug, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub n_eval: usize,
    pub n_database: usize,
    pub single_agent_failures: usize,
    pub multi_agent_failures: usize,
    pub metrics_single: MetricsReport,
    pub metrics_multi: MetricsReport,
    pub judge_aggregate: Option<JudgeAggregate>,
}

impl PipelineSummary {
    pub fn partial_failures(&self) -> usize {
        self.single_agent_failures + self.multi_agent_failures
    }
}

struct ManifestWriter {
    path: PathBuf,
    manifest: Manifest,
}

impl ManifestWriter {
    fn record(&mut self, name: &str, outputs: &[&Path]) -> Result<(), PipelineError> {
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        });
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serialize");
        fs::write(&self.path, text)
            .map_err(|source| PipelineError::Io { path: self.path.display().to_string(), source })
    }
}

/// Run the full pipeline per the config. The manifest exists only once at
/// least one stage has completed, so a missing corpus leaves nothing
/// behind.
pub fn run_pipeline(config: &EngineConfig) -> Result<PipelineSummary, PipelineError> {
    let runs = &config.paths.runs;
    let prompts = config.prompt_set().map_err(|e| stage_err("config", e))?;
    let provider = config.backend_provider().map_err(|e| stage_err("config", e))?;
    let embedder = config.embedder_backend().map_err(|e| stage_err("config", e))?;

    // split
    let corpus = load_corpus(&config.paths.corpus).map_err(|e| stage_err("split", e))?;
    let split = split_corpus(&corpus, config.split.n_eval, config.split.seed)
        .map_err(|e| stage_err("split", e))?;
    fs::create_dir_all(runs)
        .map_err(|source| PipelineError::Io { path: runs.display().to_string(), source })?;
    let eval_path = runs.join("eval.jsonl");
    let db_path = runs.join("db.jsonl");
    save_corpus(&split.eval_set, &eval_path).map_err(|e| stage_err("split", e))?;
    save_corpus(&split.database_set, &db_path).map_err(|e| stage_err("split", e))?;
    let mut manifest =
        ManifestWriter { path: runs.join("manifest.json"), manifest: Manifest::default() };
    manifest.record("split", &[&eval_path, &db_path])?;

    // index
    let index = build_index(&split.database_set, embedder.as_ref())
        .map_err(|e| stage_err("index", e))?;
    index.save(&config.paths.index).map_err(|e| stage_err("index", e))?;
    manifest.record("index", &[&config.paths.index])?;

    // batches: forced single-agent baseline, then the configured session
    let ctx = SessionContext {
        provider: provider.as_ref(),
        prompts: &prompts,
        index: Some(&index),
        embedder: Some(embedder.as_ref()),
    };
    let single_cfg = SessionConfig {
        use_retrieval: false,
        use_reviewer: false,
        ..config.session
    };
    let single_dir = runs.join("single");
    let single_entries = run_batch(&split.eval_set, &ctx, &single_cfg, batch_parallelism());
    let single_failures = write_run_dir(&single_entries, &single_dir)?;
    manifest.record("batch-single", &[&single_dir])?;

    let multi_dir = runs.join("multi");
    let multi_entries = run_batch(&split.eval_set, &ctx, &config.session, batch_parallelism());
    let multi_failures = write_run_dir(&multi_entries, &multi_dir)?;
    manifest.record("batch-multi", &[&multi_dir])?;

    // metrics
    let single_records = read_run_dir(&single_dir)?;
    let multi_records = read_run_dir(&multi_dir)?;
    let metrics_single_path = runs.join("metrics_single.json");
    let metrics_multi_path = runs.join("metrics_multi.json");
    let metrics_single = metrics_stage(&single_records, &split.eval_set, &metrics_single_path)?;
    let metrics_multi = metrics_stage(&multi_records, &split.eval_set, &metrics_multi_path)?;
    manifest.record("metrics", &[&metrics_single_path, &metrics_multi_path])?;

    // judge, only when a judge backend is configured
    let judge_aggregate = if matches!(config.judge_backend, crate::config::BackendSpec::None) {
        None
    } else {
        let judge_path = runs.join("judge.json");
        let file = judge_stage(
            &split.eval_set,
            &single_records,
            &multi_records,
            provider.as_ref(),
            &prompts.judge,
            batch_parallelism(),
            &judge_path,
        )?;
        manifest.record("judge", &[&judge_path])?;
        file.aggregate
    };

    let summary = PipelineSummary {
        n_eval: split.eval_set.len(),
        n_database: split.database_set.len(),
        single_agent_failures: single_failures,
        multi_agent_failures: multi_failures,
        metrics_single,
        metrics_multi,
        judge_aggregate,
    };
    let summary_path = runs.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("summary serialize"))
        .map_err(|source| PipelineError::Io { path: summary_path.display().to_string(), source })?;
    manifest.record("summary", &[&summary_path])?;
    Ok(summary)
}

fn batch_parallelism() -> usize {
    std::thread::available_parallelism().map(|n| n.get().min(8)).unwrap_or(1)
}
