//! Sectioned radiology reports: parsing, cleaning, storage, and corpus splits.
//!
//! A report is plain text with `PROCEDURE NAME:`, `FINDINGS:`, and an
//! optional `IMPRESSION:` marker, in that order. Corpora are stored as
//! UTF-8 JSON Lines, one report object per line.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{BackendError, ChatBackend, ChatMessage, Role};

pub const PROCEDURE_MARKER: &str = "PROCEDURE NAME:";
pub const FINDINGS_MARKER: &str = "FINDINGS:";
pub const IMPRESSION_MARKER: &str = "IMPRESSION:";

/// Phrases whose presence marks a line as communication/management
/// boilerplate. Matched case-insensitively; overridable via config.
pub const DEFAULT_BOILERPLATE_PHRASES: &[&str] = &[
    "communicated to",
    "discussed with",
    "notified",
    "was paged",
    "read back",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("missing section marker: {0}")]
    MissingSection(&'static str),
    #[error("empty section: {0}")]
    EmptySection(&'static str),
    #[error("field {field} contains section marker {marker:?}; cannot serialize unambiguously")]
    MarkerInField { field: &'static str, marker: &'static str },
    #[error("report {0} has no impression")]
    MissingImpression(String),
    #[error("invalid split size {n_eval} for corpus of {corpus_len}")]
    InvalidSplitSize { n_eval: usize, corpus_len: usize },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: String, line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cleaner backend failed: {0}")]
    Backend(#[from] BackendError),
}

/// One radiology report. `impression` is present for database/reference
/// reports and absent for generation inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiologyReport {
    pub id: String,
    pub procedure_name: String,
    pub findings: String,
    pub impression: Option<String>,
}

impl RadiologyReport {
    pub fn new(
        id: impl Into<String>,
        procedure_name: impl Into<String>,
        findings: impl Into<String>,
        impression: Option<String>,
    ) -> Self {
        Self {
            id: id.into(),
            procedure_name: procedure_name.into(),
            findings: findings.into(),
            impression,
        }
    }

    /// Copy without the impression, for use as a generation input.
    pub fn without_impression(&self) -> Self {
        Self { impression: None, ..self.clone() }
    }
}

/// Ordered collection of reports with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub reports: Vec<RadiologyReport>,
    pub source_path: String,
}

impl Corpus {
    pub fn new(reports: Vec<RadiologyReport>) -> Self {
        Self { reports, source_path: String::new() }
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&RadiologyReport> {
        self.reports.iter().find(|r| r.id == id)
    }
}

/// Disjoint eval/database partition of a corpus.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub eval_set: Corpus,
    pub database_set: Corpus,
    pub seed: u64,
}

/// Case-insensitive substring search over ASCII markers.
pub(crate) fn find_marker(haystack: &str, needle: &str, from: usize) -> Option<usize> {
    let hay = haystack.as_bytes();
    let pat = needle.as_bytes();
    if pat.is_empty() || from + pat.len() > hay.len() {
        return None;
    }
    (from..=hay.len() - pat.len())
        .find(|&i| hay[i..i + pat.len()].iter().zip(pat).all(|(a, b)| a.eq_ignore_ascii_case(b)))
}

/// Parse sectioned report text into its fields.
///
/// Markers are matched case-insensitively as ordered substrings, so both
/// the inline `PROCEDURE NAME: ... FINDINGS:` layout and one-marker-per-line
/// layouts parse. Text before the first marker is ignored.
pub fn parse_report(raw: &str) -> Result<RadiologyReport, ReportError> {
    let proc_at = find_marker(raw, PROCEDURE_MARKER, 0)
        .ok_or(ReportError::MissingSection("PROCEDURE NAME"))?;
    let proc_end = proc_at + PROCEDURE_MARKER.len();
    let find_at =
        find_marker(raw, FINDINGS_MARKER, proc_end).ok_or(ReportError::MissingSection("FINDINGS"))?;
    let find_end = find_at + FINDINGS_MARKER.len();
    let impression_at = find_marker(raw, IMPRESSION_MARKER, find_end);

    let procedure_name = raw[proc_end..find_at].trim().to_string();
    let findings_end = impression_at.unwrap_or(raw.len());
    let findings = raw[find_end..findings_end].trim().to_string();
    let impression = match impression_at {
        Some(at) => {
            let text = raw[at + IMPRESSION_MARKER.len()..].trim().to_string();
            if text.is_empty() {
                return Err(ReportError::EmptySection("IMPRESSION"));
            }
            Some(text)
        }
        None => None,
    };

    if procedure_name.is_empty() {
        return Err(ReportError::EmptySection("PROCEDURE NAME"));
    }
    if findings.is_empty() {
        return Err(ReportError::EmptySection("FINDINGS"));
    }
    Ok(RadiologyReport { id: String::new(), procedure_name, findings, impression })
}

/// Render a report back to sectioned text, the inverse of [`parse_report`].
///
/// Fields that contain a marker string are rejected rather than escaped,
/// keeping the parse unambiguous. This is a documented limitation.
pub fn serialize_report(report: &RadiologyReport) -> Result<String, ReportError> {
    let fields: [(&str, Option<&str>); 3] = [
        ("procedure_name", Some(report.procedure_name.as_str())),
        ("findings", Some(report.findings.as_str())),
        ("impression", report.impression.as_deref()),
    ];
    for (name, value) in fields {
        let Some(value) = value else { continue };
        for marker in [PROCEDURE_MARKER, FINDINGS_MARKER, IMPRESSION_MARKER] {
            if find_marker(value, marker, 0).is_some() {
                return Err(ReportError::MarkerInField { field: name, marker });
            }
        }
    }
    let mut out = format!(
        "{} {} {}\n{}",
        PROCEDURE_MARKER, report.procedure_name, FINDINGS_MARKER, report.findings
    );
    if let Some(impression) = &report.impression {
        out.push_str("\nIMPRESSION:\n");
        out.push_str(impression);
    }
    Ok(out)
}

/// Strip trailing communication/management boilerplate from an impression.
///
/// Without a cleaner backend, trailing lines containing any of the given
/// phrases (case-insensitive) are removed along with trailing blank lines.
/// With a backend, the rewritten impression replaces the original.
pub fn clean_impression(
    report: &RadiologyReport,
    phrases: &[String],
    cleaner: Option<(&dyn ChatBackend, &str)>,
) -> Result<RadiologyReport, ReportError> {
    let impression = report
        .impression
        .as_deref()
        .ok_or_else(|| ReportError::MissingImpression(report.id.clone()))?;

    let cleaned = match cleaner {
        Some((backend, system_prompt)) => {
            let messages = [ChatMessage { role: Role::User, content: impression.to_string() }];
            backend.complete(system_prompt, &messages)?.trim().to_string()
        }
        None => strip_boilerplate_lines(impression, phrases),
    };
    Ok(RadiologyReport { impression: Some(cleaned), ..report.clone() })
}

fn strip_boilerplate_lines(impression: &str, phrases: &[String]) -> String {
    let matches_phrase = |line: &str| {
        phrases.iter().any(|p| !p.is_empty() && find_marker(line, p, 0).is_some())
    };
    let mut lines: Vec<&str> = impression.lines().collect();
    while let Some(last) = lines.last() {
        if last.trim().is_empty() || matches_phrase(last) {
            lines.pop();
        } else {
            break;
        }
    }
    lines.join("\n")
}

/// Deterministic seeded split into `n_eval` eval reports and the rest.
pub fn split_corpus(corpus: &Corpus, n_eval: usize, seed: u64) -> Result<CorpusSplit, ReportError> {
    if n_eval == 0 || n_eval >= corpus.len() {
        return Err(ReportError::InvalidSplitSize { n_eval, corpus_len: corpus.len() });
    }
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let eval_ids: HashSet<usize> = indices[..n_eval].iter().copied().collect();
    let mut eval = Vec::with_capacity(n_eval);
    let mut database = Vec::with_capacity(corpus.len() - n_eval);
    for (i, report) in corpus.reports.iter().enumerate() {
        if eval_ids.contains(&i) {
            eval.push(report.clone());
        } else {
            database.push(report.clone());
        }
    }
    Ok(CorpusSplit {
        eval_set: Corpus::new(eval),
        database_set: Corpus::new(database),
        seed,
    })
}

/// Load a JSON Lines corpus. Blank lines are rejected, duplicate ids are
/// rejected, and unknown keys are rejected.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, ReportError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| ReportError::Io { path: display.clone(), source })?;
    let reader = BufReader::new(file);

    let mut reports = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| ReportError::Io { path: display.clone(), source })?;
        let report: RadiologyReport =
            serde_json::from_str(&line).map_err(|e| ReportError::MalformedRecord {
                path: display.clone(),
                line: line_no,
                reason: e.to_string(),
            })?;
        if !seen.insert(report.id.clone()) {
            return Err(ReportError::MalformedRecord {
                path: display.clone(),
                line: line_no,
                reason: format!("duplicate id {:?}", report.id),
            });
        }
        reports.push(report);
    }
    Ok(Corpus { reports, source_path: display })
}

/// Save a corpus as JSON Lines; the inverse of [`load_corpus`].
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), ReportError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let io_err = |source| ReportError::Io { path: display.clone(), source };
    let mut file = File::create(path).map_err(io_err)?;
    for report in &corpus.reports {
        let line = serde_json::to_string(report).expect("report serializes");
        writeln!(file, "{line}").map_err(|source| ReportError::Io { path: display.clone(), source })?;
    }
    Ok(())
}
