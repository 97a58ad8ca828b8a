//! Finding/impression inconsistency taxonomy: annotations and tabulation.
//!
//! Five closed categories of mismatch between the findings and the
//! generated impression. Annotations are human (or machine-drafted and
//! human-confirmed) labels per case and pipeline variant; the summary
//! counts distinct affected cases per variant, so a case carrying two
//! inconsistency types still counts once in `affected_cases`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{BackendError, ChatBackend, ChatMessage};

/// Default system prompt for machine-drafted annotations.
pub fn flagger_system_prompt() -> &'static str {
    include_str!("../assets/flagger_system.txt")
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("{path}:{line}: malformed annotation: {reason}")]
    MalformedAnnotation { path: String, line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// The five mismatch categories, a closed enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InconsistencyType {
    Presence,
    ProgressionStatus,
    Severity,
    Size,
    Location,
}

impl InconsistencyType {
    pub const ALL: [InconsistencyType; 5] = [
        InconsistencyType::Presence,
        InconsistencyType::ProgressionStatus,
        InconsistencyType::Severity,
        InconsistencyType::Size,
        InconsistencyType::Location,
    ];

    pub fn label(self) -> &'static str {
        match self {
            InconsistencyType::Presence => "Presence",
            InconsistencyType::ProgressionStatus => "ProgressionStatus",
            InconsistencyType::Severity => "Severity",
            InconsistencyType::Size => "Size",
            InconsistencyType::Location => "Location",
        }
    }
}

/// One annotated case under one pipeline variant. An empty `types` set
/// means the case was reviewed and found consistent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseAnnotation {
    pub case_id: String,
    pub variant: String,
    pub types: BTreeSet<InconsistencyType>,
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub machine_generated: bool,
}

/// Counts per pipeline variant.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSummary {
    /// Distinct cases with a nonempty type set. Per-type counts can sum
    /// above this because types co-occur within a case.
    pub affected_cases: usize,
    pub counts: BTreeMap<InconsistencyType, usize>,
    pub annotated_cases: usize,
}

/// Tabulated inconsistency counts, one row per variant.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InconsistencySummary {
    pub variants: BTreeMap<String, VariantSummary>,
}

/// Load line-delimited annotations; unknown type labels are rejected with
/// the offending line number.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<CaseAnnotation>, AnnotationError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file =
        File::open(path).map_err(|source| AnnotationError::Io { path: display.clone(), source })?;
    let mut annotations = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AnnotationError::Io { path: display.clone(), source })?;
        let annotation: CaseAnnotation =
            serde_json::from_str(&line).map_err(|e| AnnotationError::MalformedAnnotation {
                path: display.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        annotations.push(annotation);
    }
    Ok(annotations)
}

pub fn save_annotations(
    annotations: &[CaseAnnotation],
    path: impl AsRef<Path>,
) -> Result<(), AnnotationError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut file =
        File::create(path).map_err(|source| AnnotationError::Io { path: display.clone(), source })?;
    for annotation in annotations {
        let line = serde_json::to_string(annotation).expect("annotation serializes");
        writeln!(file, "{line}")
            .map_err(|source| AnnotationError::Io { path: display.clone(), source })?;
    }
    Ok(())
}

/// Tabulate annotations per variant: distinct affected cases plus one
/// count per distinct (case, type) occurrence.
pub fn summarize(annotations: &[CaseAnnotation]) -> InconsistencySummary {
    let mut variants: BTreeMap<String, VariantSummary> = BTreeMap::new();
    let mut affected: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    let mut annotated: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    let mut pairs: BTreeMap<String, BTreeSet<(&str, InconsistencyType)>> = BTreeMap::new();

    for annotation in annotations {
        let variant = annotation.variant.clone();
        annotated.entry(variant.clone()).or_default().insert(&annotation.case_id);
        if !annotation.types.is_empty() {
            affected.entry(variant.clone()).or_default().insert(&annotation.case_id);
        }
        for &ty in &annotation.types {
            pairs.entry(variant.clone()).or_default().insert((&annotation.case_id, ty));
        }
    }

    for (variant, cases) in &annotated {
        let summary = variants.entry(variant.clone()).or_default();
        summary.annotated_cases = cases.len();
        summary.affected_cases = affected.get(variant).map_or(0, |s| s.len());
        for ty in InconsistencyType::ALL {
            let count = pairs
                .get(variant)
                .map_or(0, |set| set.iter().filter(|(_, t)| *t == ty).count());
            summary.counts.insert(ty, count);
        }
    }
    InconsistencySummary { variants }
}

/// Draft an annotation for one case. With a backend, the completion is
/// parsed as five `<Category>: YES|NO` lines; without one, or when the
/// output cannot be parsed, the draft is empty. Drafts are always marked
/// machine-generated and await human confirmation.
pub fn flag_candidates(
    findings: &str,
    impression: &str,
    backend: Option<&dyn ChatBackend>,
    system_prompt: &str,
) -> Result<CaseAnnotation, AnnotationError> {
    let mut draft = CaseAnnotation {
        case_id: String::new(),
        variant: String::new(),
        types: BTreeSet::new(),
        note: String::new(),
        machine_generated: true,
    };
    let Some(backend) = backend else {
        return Ok(draft);
    };

    let message = format!("FINDINGS:\n{findings}\n\nIMPRESSION:\n{impression}");
    let raw = backend.complete(system_prompt, &[ChatMessage::user(message)])?;
    match parse_flag_response(&raw) {
        Some(types) => draft.types = types,
        None => {
            draft.note = format!("unparseable flagger output: {raw:?}");
        }
    }
    Ok(draft)
}

fn parse_flag_response(raw: &str) -> Option<BTreeSet<InconsistencyType>> {
    let mut types = BTreeSet::new();
    let mut seen = 0;
    for line in raw.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (label, answer) = line.split_once(':')?;
        let ty = InconsistencyType::ALL
            .into_iter()
            .find(|t| t.label().eq_ignore_ascii_case(label.trim()))?;
        seen += 1;
        match answer.trim().to_ascii_uppercase().as_str() {
            "YES" => {
                types.insert(ty);
            }
            "NO" => {}
            _ => return None,
        }
    }
    (seen == InconsistencyType::ALL.len()).then_some(types)
}
