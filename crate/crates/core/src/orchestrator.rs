//! Drives one case through retrieve -> generate -> review -> (revise ->
//! review)* with a hard round cap.
//!
//! A round is one generation followed by one verdict. Memory is scoped
//! per round: in revision rounds the writer sees the task plus only its
//! own previous impression and the feedback on it; the reviewer sees only
//! the task and the current candidate. Exemplars appear in round 1 only.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    generate_impression, radiologist_user_message, review_impression, reviewer_user_message,
    AgentError, LastExchange,
};
use crate::chat::{AgentRole, BackendProvider, ChatMessage};
use crate::config::PromptSet;
use crate::report::{Corpus, RadiologyReport};
use crate::retrieval::{retrieve_top_k, EmbeddingBackend, RetrievalConfig, RetrievalHit, VectorIndex};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("round {0} needs the previous exchange but none was supplied")]
    MissingLastExchange(u32),
    #[error("retrieval is enabled but no index was supplied")]
    MissingIndex,
    #[error("retrieval is enabled but no embedder was supplied")]
    MissingEmbedder,
}

/// A session failure carrying everything recorded before the failure.
#[derive(Debug, Error)]
#[error("case {case_id} failed: {reason}")]
pub struct SessionError {
    pub case_id: String,
    pub reason: String,
    pub partial_transcript: Vec<AgentMessage>,
}

/// Per-session knobs; `max_rounds` caps reviewer invocations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default = "default_true")]
    pub use_retrieval: bool,
    #[serde(default = "default_true")]
    pub use_reviewer: bool,
}

fn default_k() -> usize {
    10
}

fn default_max_rounds() -> u32 {
    3
}

fn default_true() -> bool {
    true
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { k: 10, max_rounds: 3, use_retrieval: true, use_reviewer: true }
    }
}

impl SessionConfig {
    /// The baseline configuration: one generation, no exemplars, no review.
    pub fn single_agent() -> Self {
        Self { use_retrieval: false, use_reviewer: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Agent {
    User,
    Retriever,
    Radiologist,
    Reviewer,
}

/// One transcript entry. Radiologist and Reviewer entries hold the raw
/// completion, so a transcript can be replayed as a script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub agent: Agent,
    pub round: u32,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationCause {
    ReviewerApproved,
    RoundCapReached,
    ReviewerDisabled,
}

/// Final impression plus the full multi-round transcript.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionResult {
    pub case_id: String,
    pub config: SessionConfig,
    pub final_impression: String,
    pub transcript: Vec<AgentMessage>,
    pub rounds_used: u32,
    pub terminated_by: TerminationCause,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_hits: Option<Vec<RetrievalHit>>,
}

/// Everything a session reads besides its input report. Shared immutably
/// across concurrent sessions.
pub struct SessionContext<'a> {
    pub provider: &'a dyn BackendProvider,
    pub prompts: &'a PromptSet,
    pub index: Option<&'a VectorIndex>,
    pub embedder: Option<&'a dyn EmbeddingBackend>,
}

/// The user task text: procedure name plus findings, never the impression.
pub fn task_text(report: &RadiologyReport) -> String {
    crate::retrieval::embedding_key(report)
}

/// Writer context for one round: round 1 sees the exemplar block then the
/// task; later rounds see the task and only the previous exchange.
pub fn build_radiologist_context(
    prompts: &PromptSet,
    round: u32,
    task: &str,
    exemplars: Option<&str>,
    last: Option<&LastExchange>,
) -> Result<(String, Vec<ChatMessage>), OrchestratorError> {
    let content = if round <= 1 {
        radiologist_user_message(task, exemplars, None)
    } else {
        let last = last.ok_or(OrchestratorError::MissingLastExchange(round))?;
        radiologist_user_message(task, None, Some(last))
    };
    Ok((prompts.radiologist.clone(), vec![ChatMessage::user(content)]))
}

/// Reviewer context: exactly the task and the candidate impression.
pub fn build_reviewer_context(
    prompts: &PromptSet,
    task_findings: &str,
    impression: &str,
) -> (String, Vec<ChatMessage>) {
    (prompts.reviewer.clone(), vec![ChatMessage::user(reviewer_user_message(task_findings, impression))])
}

/// Run one case to completion. The input report's impression, if any, is
/// never read; retrieval, generation, and review see only the procedure
/// name and findings.
pub fn run_case(
    input: &RadiologyReport,
    ctx: &SessionContext,
    cfg: &SessionConfig,
) -> Result<SessionResult, SessionError> {
    let mut transcript: Vec<AgentMessage> = Vec::new();
    let fail = |reason: String, transcript: &[AgentMessage]| SessionError {
        case_id: input.id.clone(),
        reason,
        partial_transcript: transcript.to_vec(),
    };

    let task = task_text(input);
    transcript.push(AgentMessage { agent: Agent::User, round: 0, content: task.clone() });

    // Retrieval happens once, before the round loop.
    let mut hits: Option<Vec<RetrievalHit>> = None;
    let mut exemplars: Option<String> = None;
    if cfg.use_retrieval {
        let index = ctx.index.ok_or_else(|| fail(OrchestratorError::MissingIndex.to_string(), &transcript))?;
        let embedder =
            ctx.embedder.ok_or_else(|| fail(OrchestratorError::MissingEmbedder.to_string(), &transcript))?;
        let retrieved = retrieve_top_k(index, input, &RetrievalConfig { k: cfg.k }, embedder)
            .map_err(|e| fail(e.to_string(), &transcript))?;
        let block = crate::retrieval::format_exemplars(&retrieved)
            .map_err(|e| fail(e.to_string(), &transcript))?;
        transcript.push(AgentMessage { agent: Agent::Retriever, round: 0, content: block.clone() });
        hits = Some(retrieved);
        exemplars = Some(block);
    }

    let radiologist = ctx
        .provider
        .backend(&input.id, AgentRole::Radiologist)
        .map_err(|e| fail(e.to_string(), &transcript))?;
    let reviewer = if cfg.use_reviewer {
        Some(
            ctx.provider
                .backend(&input.id, AgentRole::Reviewer)
                .map_err(|e| fail(e.to_string(), &transcript))?,
        )
    } else {
        None
    };

    let mut last: Option<LastExchange> = None;
    let mut final_impression;
    let mut rounds_used = 0;
    let terminated_by;

    loop {
        let round = rounds_used + 1;
        let round_exemplars = if round == 1 { exemplars.as_deref() } else { None };
        let generated = generate_impression(
            &task,
            round_exemplars,
            last.as_ref(),
            radiologist.as_ref(),
            &ctx.prompts.radiologist,
        )
        .map_err(|e| fail(e.to_string(), &transcript))?;
        transcript.push(AgentMessage {
            agent: Agent::Radiologist,
            round,
            content: generated.raw.clone(),
        });
        final_impression = generated.text.clone();
        rounds_used = round;

        let Some(reviewer) = reviewer.as_deref() else {
            terminated_by = TerminationCause::ReviewerDisabled;
            break;
        };

        let verdict =
            review_impression(&task, &generated.text, reviewer, &ctx.prompts.reviewer)
                .map_err(|e: AgentError| fail(e.to_string(), &transcript))?;
        transcript.push(AgentMessage {
            agent: Agent::Reviewer,
            round,
            content: verdict.commentary.clone(),
        });

        if !verdict.needs_revision {
            terminated_by = TerminationCause::ReviewerApproved;
            break;
        }
        if round >= cfg.max_rounds {
            // Cap reached: emit the last impression rather than failing.
            terminated_by = TerminationCause::RoundCapReached;
            break;
        }
        last = Some(LastExchange { impression: generated.text, feedback: verdict.commentary });
    }

    Ok(SessionResult {
        case_id: input.id.clone(),
        config: *cfg,
        final_impression,
        transcript,
        rounds_used,
        terminated_by,
        retrieval_hits: hits,
    })
}

/// One batch entry: a finished session or an isolated failure.
#[derive(Debug)]
pub struct BatchEntry {
    pub case_id: String,
    pub outcome: Result<SessionResult, SessionError>,
}

/// Run every eval report, up to `parallelism` sessions at a time. Results
/// come back in corpus order regardless of completion order, and one
/// failing case never aborts the batch.
pub fn run_batch(
    eval: &Corpus,
    ctx: &SessionContext,
    cfg: &SessionConfig,
    parallelism: usize,
) -> Vec<BatchEntry> {
    let n = eval.len();
    let workers = parallelism.clamp(1, n.max(1));
    let slots: Vec<Mutex<Option<BatchEntry>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let report = &eval.reports[i];
                let input = report.without_impression();
                let outcome = run_case(&input, ctx, cfg);
                *slots[i].lock().expect("slot poisoned") =
                    Some(BatchEntry { case_id: report.id.clone(), outcome });
            });
        }
    });

    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot poisoned").expect("every slot filled"))
        .collect()
}
