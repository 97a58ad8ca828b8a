//! LLM-as-judge scoring of single-agent vs multi-agent impressions.
//!
//! The judge sees the original findings and impression plus both
//! candidates, and must answer with a fixed JSON object carrying five
//! 0-10 criterion scores per model. Parsing is strict about the schema
//! but tolerant about the envelope: the first balanced JSON object is
//! extracted from prose or code fences before validation.

use std::sync::Arc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{AgentRole, BackendError, BackendProvider, ChatBackend, ChatMessage};
use crate::report::RadiologyReport;

/// Default system prompt for the judge role.
pub fn judge_system_prompt() -> &'static str {
    include_str!("../assets/judge_system.txt")
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("no JSON object found in judge output")]
    NoJsonFound,
    #[error("schema violation at {0}")]
    SchemaViolation(String),
    #[error("score out of range at {path}: {value}")]
    ScoreOutOfRange { path: String, value: i64 },
    #[error("original report {0} has no impression")]
    MissingImpression(String),
    #[error("no judge results to aggregate")]
    EmptyResults,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// One criterion: an integer score 0-10 plus the judge's explanation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionScore {
    #[serde(rename = "Score")]
    pub score: u8,
    #[serde(rename = "Reason", default)]
    pub reason: String,
}

/// The five criteria scored per model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScores {
    #[serde(rename = "Significant_findings")]
    pub significant_findings: CriterionScore,
    #[serde(rename = "Consistency")]
    pub consistency: CriterionScore,
    #[serde(rename = "Diagnosis")]
    pub diagnosis: CriterionScore,
    #[serde(rename = "Style")]
    pub style: CriterionScore,
    #[serde(rename = "Conciseness_and_clarity")]
    pub conciseness_and_clarity: CriterionScore,
}

/// Parsed judge output for one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgePair {
    #[serde(rename = "Single_agent_model")]
    pub single_agent: JudgeScores,
    #[serde(rename = "Multi_agent_model")]
    pub multi_agent: JudgeScores,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub case_id: String,
}

pub const CRITERIA: [&str; 5] =
    ["Significant_findings", "Consistency", "Diagnosis", "Style", "Conciseness_and_clarity"];
const MODELS: [&str; 2] = ["Single_agent_model", "Multi_agent_model"];

/// Judge context: the original report and both candidates, labeled; never
/// transcripts or exemplar blocks.
pub fn build_judge_prompt(
    original: &RadiologyReport,
    single_impression: &str,
    multi_impression: &str,
    system_prompt: &str,
) -> Result<(String, Vec<ChatMessage>), JudgeError> {
    let reference = original
        .impression
        .as_deref()
        .ok_or_else(|| JudgeError::MissingImpression(original.id.clone()))?;
    let user = format!(
        "ORIGINAL REPORT\nPROCEDURE NAME: {}\nFINDINGS:\n{}\nORIGINAL IMPRESSION:\n{}\n\n\
         SINGLE-AGENT MODEL IMPRESSION:\n{}\n\nMULTI-AGENT MODEL IMPRESSION:\n{}",
        original.procedure_name, original.findings, reference, single_impression, multi_impression
    );
    Ok((system_prompt.to_string(), vec![ChatMessage::user(user)]))
}

fn balanced_object_at(raw: &str, start: usize) -> Option<&str> {
    let bytes = raw.as_bytes();
    let mut depth = 0i32;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parse the first balanced JSON object in the text, tolerating prose and
/// code fences around it and stray braces before it.
fn extract_json_value(raw: &str) -> Option<serde_json::Value> {
    let mut from = 0;
    while let Some(offset) = raw[from..].find('{') {
        let start = from + offset;
        if let Some(slice) = balanced_object_at(raw, start) {
            if let Ok(value) = serde_json::from_str(slice) {
                return Some(value);
            }
        }
        from = start + 1;
    }
    None
}

fn criterion_from_value(value: &serde_json::Value, path: &str) -> Result<CriterionScore, JudgeError> {
    let obj = value.as_object().ok_or_else(|| JudgeError::SchemaViolation(path.to_string()))?;
    let score_value =
        obj.get("Score").ok_or_else(|| JudgeError::SchemaViolation(format!("{path}.Score")))?;
    // Integer-valued floats (e.g. 8.0) are accepted; 8.5 is not.
    let score = match (score_value.as_i64(), score_value.as_f64()) {
        (Some(i), _) => i,
        (None, Some(f)) if f.fract() == 0.0 => f as i64,
        _ => return Err(JudgeError::SchemaViolation(format!("{path}.Score"))),
    };
    if !(0..=10).contains(&score) {
        return Err(JudgeError::ScoreOutOfRange { path: format!("{path}.Score"), value: score });
    }
    let reason = obj.get("Reason").and_then(|r| r.as_str()).unwrap_or_default().to_string();
    Ok(CriterionScore { score: score as u8, reason })
}

fn scores_from_value(value: &serde_json::Value, model: &str) -> Result<JudgeScores, JudgeError> {
    let obj = value
        .get(model)
        .and_then(|v| v.as_object())
        .ok_or_else(|| JudgeError::SchemaViolation(model.to_string()))?;
    let get = |name: &str| {
        obj.get(name)
            .ok_or_else(|| JudgeError::SchemaViolation(format!("{model}.{name}")))
            .and_then(|v| criterion_from_value(v, &format!("{model}.{name}")))
    };
    Ok(JudgeScores {
        significant_findings: get("Significant_findings")?,
        consistency: get("Consistency")?,
        diagnosis: get("Diagnosis")?,
        style: get("Style")?,
        conciseness_and_clarity: get("Conciseness_and_clarity")?,
    })
}

/// Parse and validate a judge completion into a [`JudgePair`].
pub fn parse_judge_json(raw: &str) -> Result<JudgePair, JudgeError> {
    let value = extract_json_value(raw).ok_or(JudgeError::NoJsonFound)?;
    Ok(JudgePair {
        single_agent: scores_from_value(&value, MODELS[0])?,
        multi_agent: scores_from_value(&value, MODELS[1])?,
        case_id: String::new(),
    })
}

/// One backend call for one case.
pub fn judge_case(
    original: &RadiologyReport,
    single_impression: &str,
    multi_impression: &str,
    backend: &dyn ChatBackend,
    system_prompt: &str,
) -> Result<JudgePair, JudgeError> {
    let (system, messages) =
        build_judge_prompt(original, single_impression, multi_impression, system_prompt)?;
    let raw = backend.complete(&system, &messages)?;
    let mut pair = parse_judge_json(&raw)?;
    pair.case_id = original.id.clone();
    Ok(pair)
}

/// Inputs for one judged case.
#[derive(Debug, Clone)]
pub struct JudgeCase {
    pub original: RadiologyReport,
    pub single_impression: String,
    pub multi_impression: String,
}

/// A failed case, kept alongside the successes.
#[derive(Debug)]
pub struct JudgeFailure {
    pub case_id: String,
    pub reason: String,
}

/// Judge a batch, isolating per-case failures; cases run concurrently up
/// to `parallelism` and results keep input order.
pub fn judge_batch(
    cases: &[JudgeCase],
    provider: &dyn BackendProvider,
    system_prompt: &str,
    parallelism: usize,
) -> Vec<Result<JudgePair, JudgeFailure>> {
    let n = cases.len();
    let workers = parallelism.clamp(1, n.max(1));
    let slots: Vec<Mutex<Option<Result<JudgePair, JudgeFailure>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let case = &cases[i];
                let outcome = provider
                    .backend(&case.original.id, AgentRole::Judge)
                    .map_err(JudgeError::from)
                    .and_then(|backend: Arc<dyn ChatBackend>| {
                        judge_case(
                            &case.original,
                            &case.single_impression,
                            &case.multi_impression,
                            backend.as_ref(),
                            system_prompt,
                        )
                    })
                    .map_err(|e| JudgeFailure { case_id: case.original.id.clone(), reason: e.to_string() });
                *slots[i].lock().expect("slot poisoned") = Some(outcome);
            });
        }
    });

    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot poisoned").expect("every slot filled"))
        .collect()
}

/// Per-criterion means for one model, in criterion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeans {
    pub significant_findings: f64,
    pub consistency: f64,
    pub diagnosis: f64,
    pub style: f64,
    pub conciseness_and_clarity: f64,
}

impl ModelMeans {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.significant_findings,
            self.consistency,
            self.diagnosis,
            self.style,
            self.conciseness_and_clarity,
        ]
    }
}

/// Aggregate judge table: per-model, per-criterion arithmetic means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeAggregate {
    pub single_agent: ModelMeans,
    pub multi_agent: ModelMeans,
    pub n_cases: usize,
}

fn means_of<F: Fn(&JudgePair) -> &JudgeScores>(results: &[JudgePair], pick: F) -> ModelMeans {
    let n = results.len() as f64;
    let mean = |get: fn(&JudgeScores) -> u8| {
        results.iter().map(|r| get(pick(r)) as f64).sum::<f64>() / n
    };
    ModelMeans {
        significant_findings: mean(|s| s.significant_findings.score),
        consistency: mean(|s| s.consistency.score),
        diagnosis: mean(|s| s.diagnosis.score),
        style: mean(|s| s.style.score),
        conciseness_and_clarity: mean(|s| s.conciseness_and_clarity.score),
    }
}

/// Arithmetic means over successfully judged cases. Values are intended
/// to be reported at two decimals along with the case count.
pub fn aggregate_judge(results: &[JudgePair]) -> Result<JudgeAggregate, JudgeError> {
    if results.is_empty() {
        return Err(JudgeError::EmptyResults);
    }
    Ok(JudgeAggregate {
        single_agent: means_of(results, |r| &r.single_agent),
        multi_agent: means_of(results, |r| &r.multi_agent),
        n_cases: results.len(),
    })
}
