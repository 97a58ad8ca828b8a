//! Python bindings exposing the main report, retrieval, session, metric,
//! and judge operations. Structured results cross the boundary as JSON
//! strings; callers `json.loads` them.

use std::collections::BTreeMap;
use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use radimpress::chat::{BackendProvider, Script, ScriptedProvider};
use radimpress::config::PromptSet;
use radimpress::metrics::{self, HashedTokenEmbedder};
use radimpress::orchestrator::{run_case, SessionConfig, SessionContext};
use radimpress::report::{self, RadiologyReport};
use radimpress::retrieval::{self, HashedBowEmbedder, RetrievalConfig};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// One radiology report.
#[pyclass(name = "Report", from_py_object)]
#[derive(Clone)]
struct PyReport {
    inner: RadiologyReport,
}

#[pymethods]
impl PyReport {
    #[new]
    #[pyo3(signature = (id, procedure_name, findings, impression=None))]
    fn new(id: String, procedure_name: String, findings: String, impression: Option<String>) -> Self {
        Self { inner: RadiologyReport::new(id, procedure_name, findings, impression) }
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn procedure_name(&self) -> String {
        self.inner.procedure_name.clone()
    }

    #[getter]
    fn findings(&self) -> String {
        self.inner.findings.clone()
    }

    #[getter]
    fn impression(&self) -> Option<String> {
        self.inner.impression.clone()
    }

    fn __repr__(&self) -> String {
        format!("Report(id={:?}, procedure_name={:?})", self.inner.id, self.inner.procedure_name)
    }
}

/// Parse sectioned report text into a Report.
#[pyfunction]
#[pyo3(signature = (raw, id=String::new()))]
fn parse_report(raw: &str, id: String) -> PyResult<PyReport> {
    let mut inner = report::parse_report(raw).map_err(value_error)?;
    inner.id = id;
    Ok(PyReport { inner })
}

/// Rule-based impression cleaning; returns the cleaned impression text.
#[pyfunction]
#[pyo3(signature = (impression, phrases=None))]
fn clean_impression(impression: &str, phrases: Option<Vec<String>>) -> PyResult<String> {
    let phrases = phrases.unwrap_or_else(|| {
        report::DEFAULT_BOILERPLATE_PHRASES.iter().map(|s| s.to_string()).collect()
    });
    let inner = RadiologyReport::new("", "XR", "findings", Some(impression.to_string()));
    let cleaned = report::clean_impression(&inner, &phrases, None).map_err(value_error)?;
    Ok(cleaned.impression.unwrap_or_default())
}

/// Deterministic seeded split; returns (eval, database) report lists.
#[pyfunction]
fn split_corpus(reports: Vec<PyReport>, n_eval: usize, seed: u64) -> PyResult<(Vec<PyReport>, Vec<PyReport>)> {
    let corpus = report::Corpus::new(reports.into_iter().map(|r| r.inner).collect());
    let split = report::split_corpus(&corpus, n_eval, seed).map_err(value_error)?;
    let wrap = |c: report::Corpus| c.reports.into_iter().map(|inner| PyReport { inner }).collect();
    Ok((wrap(split.eval_set), wrap(split.database_set)))
}

#[pyfunction]
fn embedding_key(report: &PyReport) -> String {
    retrieval::embedding_key(&report.inner)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    retrieval::cosine_similarity(&a, &b).map_err(value_error)
}

/// Exact-search cosine index over a report database, using the built-in
/// deterministic hashed embedder.
#[pyclass(name = "VectorIndex")]
struct PyVectorIndex {
    index: retrieval::VectorIndex,
    embedder: HashedBowEmbedder,
}

#[pymethods]
impl PyVectorIndex {
    #[staticmethod]
    #[pyo3(signature = (db, dim=64))]
    fn build(db: Vec<PyReport>, dim: usize) -> PyResult<Self> {
        let embedder = HashedBowEmbedder::new(dim);
        let corpus = report::Corpus::new(db.into_iter().map(|r| r.inner).collect());
        let index = retrieval::build_index(&corpus, &embedder).map_err(value_error)?;
        Ok(Self { index, embedder })
    }

    fn __len__(&self) -> usize {
        self.index.len()
    }

    /// Top-k hits as (report, score) tuples.
    #[pyo3(signature = (query, k=10))]
    fn search(&self, query: &PyReport, k: usize) -> PyResult<Vec<(PyReport, f64)>> {
        let hits =
            retrieval::retrieve_top_k(&self.index, &query.inner, &RetrievalConfig { k }, &self.embedder)
                .map_err(value_error)?;
        Ok(hits.into_iter().map(|h| (PyReport { inner: h.report }, h.score)).collect())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.index.save(path).map_err(value_error)
    }
}

#[pyfunction]
fn format_exemplars(hits: Vec<(PyReport, f64)>) -> PyResult<String> {
    let hits: Vec<retrieval::RetrievalHit> = hits
        .into_iter()
        .map(|(r, score)| retrieval::RetrievalHit { report: r.inner, score })
        .collect();
    retrieval::format_exemplars(&hits).map_err(value_error)
}

/// Run one case against ordered scripted completions; returns the session
/// result as a JSON string.
#[pyfunction]
#[pyo3(signature = (report, radiologist, reviewer=None, index=None, k=10, max_rounds=3))]
fn run_scripted_case(
    report: &PyReport,
    radiologist: Vec<String>,
    reviewer: Option<Vec<String>>,
    index: Option<&PyVectorIndex>,
    k: usize,
    max_rounds: u32,
) -> PyResult<String> {
    let mut roles = BTreeMap::new();
    roles.insert("radiologist".to_string(), radiologist);
    let use_reviewer = reviewer.is_some();
    if let Some(reviewer) = reviewer {
        roles.insert("reviewer".to_string(), reviewer);
    }
    let provider: Arc<dyn BackendProvider> = Arc::new(ScriptedProvider::new(Script { roles }));
    let prompts = PromptSet::default();
    let embedder = index.map(|i| i.embedder.clone());
    let ctx = SessionContext {
        provider: provider.as_ref(),
        prompts: &prompts,
        index: index.map(|i| &i.index),
        embedder: embedder.as_ref().map(|e| e as &dyn retrieval::EmbeddingBackend),
    };
    let cfg = SessionConfig { k, max_rounds, use_retrieval: index.is_some(), use_reviewer };
    let result = run_case(&report.inner.without_impression(), &ctx, &cfg).map_err(value_error)?;
    serde_json::to_string(&result).map_err(value_error)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    metrics::tokenize(text)
}

#[pyfunction]
fn bleu(candidate: &str, reference: &str) -> f64 {
    metrics::bleu(&metrics::tokenize(candidate), &metrics::tokenize(reference))
}

#[pyfunction]
fn rouge_n(candidate: &str, reference: &str, n: usize) -> (f64, f64, f64) {
    let prf = metrics::rouge_n(&metrics::tokenize(candidate), &metrics::tokenize(reference), n);
    (prf.precision, prf.recall, prf.f1)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> (f64, f64, f64) {
    let prf = metrics::rouge_l(&metrics::tokenize(candidate), &metrics::tokenize(reference));
    (prf.precision, prf.recall, prf.f1)
}

/// Greedy embedding-match score under the hashed token embedder.
#[pyfunction]
fn bertscore(candidate: &str, reference: &str) -> PyResult<(f64, f64, f64)> {
    let prf = metrics::bertscore(candidate, reference, &HashedTokenEmbedder::default())
        .map_err(value_error)?;
    Ok((prf.precision, prf.recall, prf.f1))
}

/// Corpus aggregate over (candidate, reference) pairs as a JSON string.
#[pyfunction]
fn evaluate_corpus(pairs: Vec<(String, String)>) -> PyResult<String> {
    let report = metrics::evaluate_corpus(&pairs, &HashedTokenEmbedder::default())
        .map_err(value_error)?;
    serde_json::to_string(&report).map_err(value_error)
}

/// (impression_text, missing_prefix_flag)
#[pyfunction]
fn parse_impression(raw: &str) -> (String, bool) {
    radimpress::agents::parse_impression(raw)
}

/// True when the sentinel says revision is needed.
#[pyfunction]
fn parse_verdict(raw: &str) -> PyResult<bool> {
    Ok(radimpress::agents::parse_verdict(raw).map_err(value_error)?.needs_revision)
}

#[pyfunction]
fn radiologist_system_prompt() -> &'static str {
    radimpress::agents::radiologist_system_prompt()
}

#[pyfunction]
fn reviewer_system_prompt() -> &'static str {
    radimpress::agents::reviewer_system_prompt()
}

#[pyfunction]
fn judge_system_prompt() -> &'static str {
    radimpress::judge::judge_system_prompt()
}

/// Validate a judge completion; returns the parsed pair as a JSON string.
#[pyfunction]
fn parse_judge_json(raw: &str) -> PyResult<String> {
    let pair = radimpress::judge::parse_judge_json(raw).map_err(value_error)?;
    serde_json::to_string(&pair).map_err(value_error)
}

/// Tabulate annotation JSONL text into the per-variant summary, as JSON.
#[pyfunction]
fn summarize_annotations(jsonl: &str) -> PyResult<String> {
    let mut annotations = Vec::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let annotation: radimpress::inconsistency::CaseAnnotation = serde_json::from_str(line)
            .map_err(|e| value_error(format!("line {}: {e}", i + 1)))?;
        annotations.push(annotation);
    }
    let summary = radimpress::inconsistency::summarize(&annotations);
    serde_json::to_string(&summary).map_err(value_error)
}

#[pymodule]
fn radimpress_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyReport>()?;
    m.add_class::<PyVectorIndex>()?;
    m.add_function(wrap_pyfunction!(parse_report, m)?)?;
    m.add_function(wrap_pyfunction!(clean_impression, m)?)?;
    m.add_function(wrap_pyfunction!(split_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(embedding_key, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(format_exemplars, m)?)?;
    m.add_function(wrap_pyfunction!(run_scripted_case, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_n, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(bertscore, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(parse_impression, m)?)?;
    m.add_function(wrap_pyfunction!(parse_verdict, m)?)?;
    m.add_function(wrap_pyfunction!(radiologist_system_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(reviewer_system_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(judge_system_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_judge_json, m)?)?;
    m.add_function(wrap_pyfunction!(summarize_annotations, m)?)?;
    Ok(())
}
