//! The impression-writing and consistency-reviewing agent roles.
//!
//! Each role is a system prompt plus strict parsing of the completion
//! protocol: the writer must open with `IMPRESSION:` (tolerated with a
//! diagnostic when it does not), the reviewer must end with a
//! `REVISION: YES` or `REVISION: NO` sentinel line (a hard error when it
//! does not, because the loop cannot proceed without a verdict).

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::chat::{BackendError, ChatBackend, ChatMessage};

/// Default system prompt for the impression-writing role.
pub fn radiologist_system_prompt() -> &'static str {
    include_str!("../assets/radiologist_system.txt")
}

/// Default system prompt for the consistency-reviewing role.
pub fn reviewer_system_prompt() -> &'static str {
    include_str!("../assets/reviewer_system.txt")
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no REVISION sentinel line in reviewer output")]
    MalformedVerdict,
}

/// Reviewer output: full commentary plus the decoded sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewVerdict {
    pub commentary: String,
    pub needs_revision: bool,
}

/// The writer's own previous impression and the reviewer feedback on it,
/// the only history carried into a revision round.
#[derive(Debug, Clone)]
pub struct LastExchange {
    pub impression: String,
    pub feedback: String,
}

/// A parsed generation, keeping the raw completion for transcripts.
#[derive(Debug, Clone)]
pub struct GeneratedImpression {
    pub text: String,
    pub raw: String,
    /// True when the completion did not start with the `IMPRESSION:` prefix.
    pub missing_prefix: bool,
}

/// Strip the `IMPRESSION:` prefix from a completion.
///
/// Returns the remainder trimmed, or when the prefix is absent the whole
/// text trimmed plus a `true` flag; a missing prefix is a diagnostic, not
/// an error, since models occasionally add preamble despite instructions.
pub fn parse_impression(raw: &str) -> (String, bool) {
    let trimmed = raw.trim();
    let prefix = "IMPRESSION:";
    if trimmed.len() >= prefix.len() && trimmed[..prefix.len()].eq_ignore_ascii_case(prefix) {
        (trimmed[prefix.len()..].trim().to_string(), false)
    } else {
        (trimmed.to_string(), true)
    }
}

static SENTINEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*REVISION\s*:\s*(YES|NO)[\s.,!;:]*$").expect("sentinel regex")
});

/// Decode the reviewer sentinel, scanning lines from the end and taking
/// the last match so quoted instruction text earlier in the commentary
/// cannot shadow the verdict.
pub fn parse_verdict(raw: &str) -> Result<ReviewVerdict, AgentError> {
    for line in raw.lines().rev() {
        if let Some(caps) = SENTINEL.captures(line) {
            let needs_revision = caps[1].eq_ignore_ascii_case("YES");
            return Ok(ReviewVerdict { commentary: raw.to_string(), needs_revision });
        }
    }
    Err(AgentError::MalformedVerdict)
}

/// Assemble the writer's user message for one round.
///
/// Round 1 carries the exemplar block before the task; revision rounds
/// carry the task plus only the previous impression and the feedback on
/// it, in a single user message.
pub fn radiologist_user_message(
    task: &str,
    exemplars: Option<&str>,
    last: Option<&LastExchange>,
) -> String {
    match (exemplars, last) {
        (Some(exemplars), None) => format!("{exemplars}\n\n{task}"),
        (None, Some(last)) => format!(
            "{task}\n\nYOUR PREVIOUS IMPRESSION:\n{}\n\nREVIEWER FEEDBACK:\n{}",
            last.impression, last.feedback
        ),
        (None, None) => task.to_string(),
        (Some(_), Some(_)) => unreachable!("exemplars and feedback are mutually exclusive"),
    }
}

/// Assemble the reviewer's user message: the task and the candidate
/// impression, nothing else.
pub fn reviewer_user_message(task_findings: &str, impression: &str) -> String {
    format!("{task_findings}\n\nIMPRESSION:\n{impression}")
}

/// One writer call: assemble the round's message, complete, parse.
///
/// At most one of `exemplars` (first round) and `last` (revision rounds)
/// may be present.
pub fn generate_impression(
    task: &str,
    exemplars: Option<&str>,
    last: Option<&LastExchange>,
    backend: &dyn ChatBackend,
    system_prompt: &str,
) -> Result<GeneratedImpression, AgentError> {
    assert!(
        exemplars.is_none() || last.is_none(),
        "exemplars and feedback are mutually exclusive"
    );
    let message = radiologist_user_message(task, exemplars, last);
    let raw = backend.complete(system_prompt, &[ChatMessage::user(message)])?;
    let (text, missing_prefix) = parse_impression(&raw);
    if missing_prefix {
        log::warn!("completion did not start with IMPRESSION:, accepting as-is");
    }
    Ok(GeneratedImpression { text, raw, missing_prefix })
}

/// One reviewer call: findings plus candidate impression in, verdict out.
/// Both texts must be non-empty.
pub fn review_impression(
    task_findings: &str,
    impression: &str,
    backend: &dyn ChatBackend,
    system_prompt: &str,
) -> Result<ReviewVerdict, AgentError> {
    let message = reviewer_user_message(task_findings, impression);
    let raw = backend.complete(system_prompt, &[ChatMessage::user(message)])?;
    parse_verdict(&raw)
}
