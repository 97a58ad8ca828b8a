//! Acceptance suite: one test per release criterion, each with its
//! tolerance pinned in the assertions. Oracles here are written
//! independently of the library implementation they check.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radimpress::agents::{parse_verdict, AgentError};
use radimpress::chat::{AgentRole, RecordingProvider, Script, ScriptedProvider};
use radimpress::config::{load_config, PromptSet};
use radimpress::inconsistency::{summarize, CaseAnnotation, InconsistencyType};
use radimpress::judge::{aggregate_judge, parse_judge_json, CriterionScore, JudgeError, JudgePair, JudgeScores};
use radimpress::metrics::{bertscore, bleu, rouge_l, rouge_n, tokenize, HashedTokenEmbedder, Prf, TokenEmbedder};
use radimpress::orchestrator::{
    run_batch, run_case, Agent, SessionConfig, SessionContext, TerminationCause,
};
use radimpress::pipeline::run_pipeline;
use radimpress::report::{Corpus, RadiologyReport};
use radimpress::retrieval::{
    build_index, embedding_key, retrieve_top_k, EmbeddingBackend, EmbeddingVector, RetrievalConfig,
    RetrievalError,
};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn scripted(radiologist: &[&str], reviewer: &[&str]) -> ScriptedProvider {
    let mut roles = BTreeMap::new();
    roles.insert(
        "radiologist".to_string(),
        radiologist.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
    );
    if !reviewer.is_empty() {
        roles.insert("reviewer".to_string(), reviewer.iter().map(|s| s.to_string()).collect());
    }
    ScriptedProvider::new(Script { roles })
}

// ---------------------------------------------------------------------------
// Termination
// ---------------------------------------------------------------------------

#[test]
fn termination_holds_for_1000_random_verdict_scripts() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let prompts = PromptSet::default();
    let input = RadiologyReport::new("case", "XR CHEST", "No effusion.", None);
    let cfg = SessionConfig { use_retrieval: false, ..SessionConfig::default() };

    for _ in 0..1000 {
        let len = rng.random_range(1..=6usize);
        let verdicts: Vec<bool> = (0..len).map(|_| rng.random_bool(0.5)).collect();
        let reviewer: Vec<String> = verdicts
            .iter()
            .map(|yes| format!("commentary\nREVISION: {}", if *yes { "YES" } else { "NO" }))
            .collect();
        let reviewer_refs: Vec<&str> = reviewer.iter().map(|s| s.as_str()).collect();
        let provider = scripted(&["IMPRESSION: x"], &reviewer_refs);
        let ctx = SessionContext { provider: &provider, prompts: &prompts, index: None, embedder: None };

        let result = run_case(&input, &ctx, &cfg).expect("session completes");
        assert!(result.rounds_used <= 3);
        match verdicts.iter().position(|yes| !yes) {
            Some(i) if (i as u32) < cfg.max_rounds => {
                assert_eq!(result.terminated_by, TerminationCause::ReviewerApproved);
                assert_eq!(result.rounds_used, i as u32 + 1);
            }
            _ => {
                assert_eq!(result.terminated_by, TerminationCause::RoundCapReached);
                assert_eq!(result.rounds_used, cfg.max_rounds);
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}, budget 5s");
    println!("PASS: termination over 1000 random verdict scripts in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// Memory scoping
// ---------------------------------------------------------------------------

#[test]
fn memory_scoping_limits_context_to_the_last_round() {
    let embedder = radimpress::retrieval::HashedBowEmbedder::default();
    let db = Corpus::new(
        (0..6)
            .map(|i| {
                RadiologyReport::new(
                    format!("db{i}"),
                    "XR CHEST",
                    format!("exemplar body {i}"),
                    Some(format!("EXEMPLAR-IMP-{i}.")),
                )
            })
            .collect(),
    );
    let index = build_index(&db, &embedder).unwrap();

    let provider = RecordingProvider::new(scripted(
        &["IMPRESSION: alpha-one", "IMPRESSION: alpha-two", "IMPRESSION: alpha-three"],
        &[
            "feedback-one is critical\nREVISION: YES",
            "feedback-two is critical\nREVISION: YES",
            "feedback-three is critical\nREVISION: YES",
        ],
    ));
    let prompts = PromptSet::default();
    let ctx = SessionContext {
        provider: &provider,
        prompts: &prompts,
        index: Some(&index),
        embedder: Some(&embedder),
    };
    let eval = Corpus::new(vec![
        RadiologyReport::new("e0", "XR CHEST", "query findings zero", Some("GROUND-TRUTH-SECRET-0".into())),
        RadiologyReport::new("e1", "XR CHEST", "query findings one", Some("GROUND-TRUTH-SECRET-1".into())),
    ]);
    let entries = run_batch(&eval, &ctx, &SessionConfig { k: 3, ..SessionConfig::default() }, 2);
    for entry in &entries {
        let result = entry.outcome.as_ref().expect("session completes");
        assert_eq!(result.rounds_used, 3);
    }

    let requests = provider.requests();
    for case in ["e0", "e1"] {
        let rad: Vec<_> = requests
            .iter()
            .filter(|r| r.case_id == case && r.role == AgentRole::Radiologist)
            .collect();
        assert_eq!(rad.len(), 3);
        let round1 = rad[0].joined_content();
        assert!(round1.contains("Here are some examples:"));
        assert!(round1.contains("EXAMPLE 1:"));

        let round2 = rad[1].joined_content();
        assert!(!round2.contains("EXAMPLE"), "round 2 must carry no exemplar text");
        assert!(!round2.contains("EXEMPLAR-IMP"));
        assert!(round2.contains("alpha-one"));
        assert!(round2.contains("feedback-one"));

        let round3 = rad[2].joined_content();
        assert!(!round3.contains("EXAMPLE"), "round 3 must carry no exemplar text");
        assert!(round3.contains("alpha-two"));
        assert!(round3.contains("feedback-two"));
        assert!(!round3.contains("alpha-one"), "round 3 must not see round-1 impressions");
        assert!(!round3.contains("feedback-one"), "round 3 must not see round-1 feedback");

        let reviewer: Vec<_> = requests
            .iter()
            .filter(|r| r.case_id == case && r.role == AgentRole::Reviewer)
            .collect();
        assert_eq!(reviewer.len(), 3);
        for (i, request) in reviewer.iter().enumerate() {
            let content = request.joined_content();
            assert!(!content.contains("EXAMPLE"), "reviewer must never see exemplars");
            assert!(!content.contains("EXEMPLAR-IMP"));
            assert!(!content.contains("GROUND-TRUTH-SECRET"));
            assert!(!content.contains("feedback-"), "reviewer input carries no prior feedback");
            assert!(content.contains(&format!("alpha-{}", ["one", "two", "three"][i])));
        }
        for request in &rad {
            assert!(!request.joined_content().contains("GROUND-TRUTH-SECRET"));
        }
    }
    println!("PASS: memory scoping over recorded 3-round sessions");
}

// ---------------------------------------------------------------------------
// Two-round transcript replay
// ---------------------------------------------------------------------------

#[test]
fn two_round_replay_matches_the_reference_transcript_shape() {
    let provider = ScriptedProvider::load(fixture("two_round_script.json")).unwrap();
    let embedder = radimpress::retrieval::HashedBowEmbedder::default();
    let db = Corpus::new(vec![RadiologyReport::new(
        "ex1",
        "XR CHEST PORTABLE.",
        "Lines/tubes: Endotracheal tube terminates below the carina in the proximal right mainstem bronchus. \
         Lungs: Redemonstration of patchy ill-defined opacities in the right mid to upper lung. Focus of patchy \
         opacity in the left base is unchanged. No pulmonary edema. Pleura: There is no pleural effusion or \
         pneumothorax. Heart and mediastinum: The heart and the mediastinum are unchanged. Bones: The thoracic \
         skeleton is unchanged.",
        Some(
            "Endotracheal tube terminates in the proximal right mainstem bronchus. Unchanged patchy opacities \
             in the right mid to upper lung representing pulmonary hemorrhage. Superimposing aspiration or \
             pneumonia may also be considered."
                .into(),
        ),
    )]);
    let index = build_index(&db, &embedder).unwrap();
    let prompts = PromptSet::default();
    let ctx = SessionContext {
        provider: &provider,
        prompts: &prompts,
        index: Some(&index),
        embedder: Some(&embedder),
    };

    let input = RadiologyReport::new(
        "case",
        "XR CHEST PORTABLE.",
        "Lines/tubes: ET tube tip is projected at the level of the carina with tip projected near the origin \
         of the right mainstem bronchus. Evidence of embolization coils project over the right upper hemithorax.\n\
         Lungs: Patchy ill-defined opacities in the right upper lung are again noted. No gross pulmonary edema.\n\
         Pleura: There is no pleural effusion or pneumothorax.\n\
         Heart and mediastinum: The heart and the mediastinum are unchanged.\n\
         Bones: The thoracic skeleton is unchanged.",
        None,
    );
    let result = run_case(&input, &ctx, &SessionConfig { k: 1, ..SessionConfig::default() }).unwrap();

    assert_eq!(result.rounds_used, 2);
    assert_eq!(result.terminated_by, TerminationCause::ReviewerApproved);
    assert!(result.final_impression.contains("No evidence of pulmonary edema"));

    let agents: Vec<Agent> = result.transcript.iter().map(|m| m.agent).collect();
    assert_eq!(
        agents,
        vec![
            Agent::User,
            Agent::Retriever,
            Agent::Radiologist,
            Agent::Reviewer,
            Agent::Radiologist,
            Agent::Reviewer,
        ]
    );
    let verdicts: Vec<bool> = result
        .transcript
        .iter()
        .filter(|m| m.agent == Agent::Reviewer)
        .map(|m| parse_verdict(&m.content).unwrap().needs_revision)
        .collect();
    assert_eq!(verdicts, vec![true, false]);
    assert!(result.transcript[1].content.contains("Here are some examples:"));
    assert!(result.transcript[2].content.starts_with("IMPRESSION:"));
    let (first_impression, missing) = radimpress::agents::parse_impression(&result.transcript[2].content);
    assert!(first_impression.starts_with("Tubes as described above."));
    assert!(!missing);
    println!("PASS: two-round replay (YES then NO, final mentions the corrected finding)");
}

// ---------------------------------------------------------------------------
// Retrieval exactness
// ---------------------------------------------------------------------------

/// Deterministic pseudo-random embedder: the text hashes to an RNG seed.
struct SeededEmbedder {
    dim: usize,
}

impl EmbeddingBackend for SeededEmbedder {
    fn id(&self) -> &str {
        "seeded-test"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        let mut hash = 0xcbf29ce484222325u64;
        for b in text.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hash);
        Ok((0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }
}

#[test]
fn retrieval_matches_brute_force_exactly() {
    let embedder = SeededEmbedder { dim: 16 };
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    for corpus_idx in 0..20 {
        let size = rng.random_range(50..=500usize);
        // Roughly half the findings strings repeat, forcing score ties.
        let vocab_size = (size / 2).max(1);
        let mut reports: Vec<RadiologyReport> = (0..size)
            .map(|i| {
                let token = rng.random_range(0..vocab_size);
                RadiologyReport::new(
                    format!("r{i:04}"),
                    "XR",
                    format!("shared finding text {token}"),
                    Some("ref.".into()),
                )
            })
            .collect();
        // One entry gets a unique key so the self-query target is unambiguous.
        let target = rng.random_range(0..size);
        reports[target].findings = format!("unique self target {corpus_idx}");
        let target_id = reports[target].id.clone();
        let db = Corpus::new(reports);
        let index = build_index(&db, &embedder).unwrap();

        let query = RadiologyReport::new(
            "query",
            "XR",
            format!("unique self target {corpus_idx}"),
            None,
        );

        // Brute force: embed every key locally, sort by (-score, id).
        let query_vec = embedder.embed(&embedding_key(&query)).unwrap();
        let mut all: Vec<(f64, String)> = db
            .reports
            .iter()
            .map(|r| {
                let v = embedder.embed(&embedding_key(r)).unwrap();
                let dot: f64 = query_vec.iter().zip(&v).map(|(a, b)| a * b).sum();
                let nq: f64 = query_vec.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                ((dot / (nq * nv)).clamp(-1.0, 1.0), r.id.clone())
            })
            .collect();
        all.sort_by(|(sa, ia), (sb, ib)| sb.partial_cmp(sa).unwrap().then_with(|| ia.cmp(ib)));

        for k in [1usize, 5, 10] {
            let hits = retrieve_top_k(&index, &query, &RetrievalConfig { k }, &embedder).unwrap();
            assert_eq!(hits.len(), k.min(db.len()));
            for (hit, (score, id)) in hits.iter().zip(&all) {
                assert_eq!(&hit.report.id, id, "order mismatch in corpus {corpus_idx} k={k}");
                assert!((hit.score - score).abs() < 1e-9);
            }
        }

        // Self-query: identical key ranks first with unit similarity.
        let hits = retrieve_top_k(&index, &query, &RetrievalConfig { k: 1 }, &embedder).unwrap();
        assert_eq!(hits[0].report.id, target_id);
        assert!((hits[0].score - 1.0).abs() <= 1e-12);
    }
    println!("PASS: retrieval equals brute force on 20 corpora, k in {{1,5,10}}");
}

// ---------------------------------------------------------------------------
// Metric oracle equivalence
// ---------------------------------------------------------------------------

fn oracle_ngrams(tokens: &[String], n: usize) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n && n >= 1 {
        for start in 0..=tokens.len() - n {
            *out.entry(tokens[start..start + n].join("\u{1}")).or_insert(0) += 1;
        }
    }
    out
}

fn oracle_bleu(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_mean = 0.0;
    for n in 1..=4 {
        let cand = oracle_ngrams(candidate, n);
        let refc = oracle_ngrams(reference, n);
        let clipped: usize =
            cand.iter().map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0))).sum();
        let total: usize = cand.values().sum();
        let p = if n == 1 {
            if clipped == 0 {
                return 0.0;
            }
            clipped as f64 / total as f64
        } else {
            (clipped as f64 + 1e-9) / (total as f64 + 1e-9)
        };
        log_mean += p.ln() / 4.0;
    }
    let bp = if candidate.len() < reference.len() {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * log_mean.exp()
}

fn oracle_rouge_n(candidate: &[String], reference: &[String], n: usize) -> (f64, f64, f64) {
    let cand = oracle_ngrams(candidate, n);
    let refc = oracle_ngrams(reference, n);
    let overlap: usize =
        cand.iter().map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0))).sum();
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refc.values().sum();
    let p = if cand_total > 0 { overlap as f64 / cand_total as f64 } else { 0.0 };
    let r = if ref_total > 0 { overlap as f64 / ref_total as f64 } else { 0.0 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

fn oracle_lcs(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == 0 || j == 0 {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i - 1] == b[j - 1] {
        oracle_lcs(a, b, i - 1, j - 1, memo) + 1
    } else {
        oracle_lcs(a, b, i - 1, j, memo).max(oracle_lcs(a, b, i, j - 1, memo))
    };
    memo.insert((i, j), v);
    v
}

fn oracle_rouge_l(candidate: &[String], reference: &[String]) -> (f64, f64, f64) {
    if candidate.is_empty() || reference.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let lcs =
        oracle_lcs(candidate, reference, candidate.len(), reference.len(), &mut HashMap::new()) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

fn oracle_bertscore(candidate: &str, reference: &str, embedder: &dyn TokenEmbedder) -> (f64, f64, f64) {
    let cand = embedder.embed_tokens(candidate).unwrap();
    let refs = embedder.embed_tokens(reference).unwrap();
    if cand.is_empty() || refs.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let cos = |x: &EmbeddingVector, y: &EmbeddingVector| -> f64 {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        (dot / (nx * ny)).clamp(-1.0, 1.0)
    };
    let matrix: Vec<Vec<f64>> =
        cand.iter().map(|c| refs.iter().map(|r| cos(c, r)).collect()).collect();
    let p = matrix.iter().map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>()
        / cand.len() as f64;
    let r = (0..refs.len())
        .map(|j| matrix.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / refs.len() as f64;
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

fn random_sentence(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let words = [
        "lung", "heart", "clear", "effusion", "edema", "stable", "tube", "no", "right", "left",
        "opacity", "pleural", "unchanged", "mild", "atelectasis",
    ];
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
}

#[test]
fn metrics_match_independent_oracles_within_1e9() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let embedder = HashedTokenEmbedder::default();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let close_prf = |got: Prf, want: (f64, f64, f64)| {
        close(got.precision, want.0) && close(got.recall, want.1) && close(got.f1, want.2)
    };

    for case in 0..50 {
        let cand_text = random_sentence(&mut rng, 30);
        let ref_text = random_sentence(&mut rng, 30);
        let cand = tokenize(&cand_text);
        let refs = tokenize(&ref_text);

        assert!(
            close(bleu(&cand, &refs), oracle_bleu(&cand, &refs)),
            "bleu mismatch on case {case}: {cand_text:?} vs {ref_text:?}"
        );
        for n in 1..=2 {
            assert!(
                close_prf(rouge_n(&cand, &refs, n), oracle_rouge_n(&cand, &refs, n)),
                "rouge-{n} mismatch on case {case}"
            );
        }
        assert!(
            close_prf(rouge_l(&cand, &refs), oracle_rouge_l(&cand, &refs)),
            "rouge-l mismatch on case {case}"
        );
        let got = bertscore(&cand_text, &ref_text, &embedder).unwrap();
        assert!(
            close_prf(got, oracle_bertscore(&cand_text, &ref_text, &embedder)),
            "bertscore mismatch on case {case}"
        );
    }

    // Identity pairs score perfectly; empty candidates score zero.
    let text = "no acute cardiopulmonary process identified today";
    let tokens = tokenize(text);
    assert!((bleu(&tokens, &tokens) - 100.0).abs() < 1e-6);
    for prf in [rouge_n(&tokens, &tokens, 1), rouge_n(&tokens, &tokens, 2), rouge_l(&tokens, &tokens)] {
        assert!((prf.f1 - 1.0).abs() < 1e-12);
    }
    assert!((bertscore(text, text, &embedder).unwrap().f1 - 1.0).abs() <= 1e-9);

    assert_eq!(bleu(&[], &tokens), 0.0);
    assert_eq!(rouge_n(&[], &tokens, 1).f1, 0.0);
    assert_eq!(rouge_l(&[], &tokens).f1, 0.0);
    assert_eq!(bertscore("", text, &embedder).unwrap().f1, 0.0);
    println!("PASS: metric oracle equivalence on 50 random pairs at 1e-9");
}

// ---------------------------------------------------------------------------
// Judge schema
// ---------------------------------------------------------------------------

fn random_scores(rng: &mut ChaCha8Rng) -> JudgeScores {
    let mut mk = |_| CriterionScore {
        score: rng.random_range(0..=10u8),
        reason: format!("reason {}", rng.random_range(0..1000)),
    };
    JudgeScores {
        significant_findings: mk(0),
        consistency: mk(1),
        diagnosis: mk(2),
        style: mk(3),
        conciseness_and_clarity: mk(4),
    }
}

fn constant_scores(score: u8) -> JudgeScores {
    let mk = || CriterionScore { score, reason: String::new() };
    JudgeScores {
        significant_findings: mk(),
        consistency: mk(),
        diagnosis: mk(),
        style: mk(),
        conciseness_and_clarity: mk(),
    }
}

#[test]
fn judge_schema_round_trip_corruption_and_aggregation() {
    // 100 random valid objects round-trip exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let pair = JudgePair {
            single_agent: random_scores(&mut rng),
            multi_agent: random_scores(&mut rng),
            case_id: String::new(),
        };
        let raw = serde_json::to_string(&pair).unwrap();
        assert_eq!(parse_judge_json(&raw).unwrap(), pair);
    }

    // Fence-wrapped JSON parses.
    let pair = JudgePair {
        single_agent: constant_scores(8),
        multi_agent: constant_scores(9),
        case_id: String::new(),
    };
    let fenced = format!("Sure!\n```json\n{}\n```", serde_json::to_string_pretty(&pair).unwrap());
    assert_eq!(parse_judge_json(&fenced).unwrap().multi_agent.style.score, 9);

    // 10 corrupted objects, each raising its specific named error.
    let base = serde_json::to_value(&pair).unwrap();
    let corrupt = |f: &dyn Fn(&mut serde_json::Value)| {
        let mut v = base.clone();
        f(&mut v);
        parse_judge_json(&v.to_string()).unwrap_err()
    };
    let schema_violation = |err: JudgeError, want: &str| match err {
        JudgeError::SchemaViolation(path) => assert_eq!(path, want),
        other => panic!("expected SchemaViolation({want}), got {other}"),
    };

    schema_violation(
        corrupt(&|v| {
            v.as_object_mut().unwrap().remove("Multi_agent_model");
        }),
        "Multi_agent_model",
    );
    schema_violation(
        corrupt(&|v| {
            v["Multi_agent_model"].as_object_mut().unwrap().remove("Diagnosis");
        }),
        "Multi_agent_model.Diagnosis",
    );
    schema_violation(
        corrupt(&|v| {
            v["Single_agent_model"]["Style"].as_object_mut().unwrap().remove("Score");
        }),
        "Single_agent_model.Style.Score",
    );
    schema_violation(
        corrupt(&|v| v["Single_agent_model"]["Consistency"]["Score"] = serde_json::json!("high")),
        "Single_agent_model.Consistency.Score",
    );
    schema_violation(
        corrupt(&|v| v["Multi_agent_model"]["Diagnosis"]["Score"] = serde_json::json!(8.5)),
        "Multi_agent_model.Diagnosis.Score",
    );
    schema_violation(
        corrupt(&|v| v["Multi_agent_model"]["Consistency"] = serde_json::json!("fine")),
        "Multi_agent_model.Consistency",
    );
    schema_violation(
        corrupt(&|v| v["Single_agent_model"] = serde_json::json!([1, 2, 3])),
        "Single_agent_model",
    );
    match corrupt(&|v| v["Single_agent_model"]["Style"]["Score"] = serde_json::json!(11)) {
        JudgeError::ScoreOutOfRange { path, value } => {
            assert_eq!(path, "Single_agent_model.Style.Score");
            assert_eq!(value, 11);
        }
        other => panic!("expected ScoreOutOfRange, got {other}"),
    }
    match corrupt(&|v| v["Multi_agent_model"]["Style"]["Score"] = serde_json::json!(-1)) {
        JudgeError::ScoreOutOfRange { path, value } => {
            assert_eq!(path, "Multi_agent_model.Style.Score");
            assert_eq!(value, -1);
        }
        other => panic!("expected ScoreOutOfRange, got {other}"),
    }
    assert!(matches!(parse_judge_json("no json in sight"), Err(JudgeError::NoJsonFound)));

    // Aggregation over a mean-exact fixture reproduces the reported table.
    let single_means = [8.51, 8.77, 8.15, 7.80, 7.93];
    let multi_means = [8.51, 8.63, 8.24, 8.53, 8.77];
    let score_for = |mean: f64, case: usize| -> u8 {
        let floor = mean.floor();
        let ups = ((mean - floor) * 100.0).round() as usize;
        (floor as u8) + u8::from(case < ups)
    };
    let pairs: Vec<JudgePair> = (0..100)
        .map(|case| {
            let build = |means: [f64; 5]| {
                let mk = |m: f64| CriterionScore { score: score_for(m, case), reason: String::new() };
                JudgeScores {
                    significant_findings: mk(means[0]),
                    consistency: mk(means[1]),
                    diagnosis: mk(means[2]),
                    style: mk(means[3]),
                    conciseness_and_clarity: mk(means[4]),
                }
            };
            JudgePair {
                single_agent: build(single_means),
                multi_agent: build(multi_means),
                case_id: format!("case{case:03}"),
            }
        })
        .collect();
    let aggregate = aggregate_judge(&pairs).unwrap();
    assert_eq!(aggregate.n_cases, 100);
    for (got, want) in aggregate.single_agent.as_array().iter().zip(single_means) {
        assert!((got - want).abs() < 1e-12, "single {got} vs {want}");
    }
    for (got, want) in aggregate.multi_agent.as_array().iter().zip(multi_means) {
        assert!((got - want).abs() < 1e-12, "multi {got} vs {want}");
    }
    println!("PASS: judge schema round-trip, 10 corruptions, fence unwrap, exact aggregation");
}

// ---------------------------------------------------------------------------
// Inconsistency tabulation
// ---------------------------------------------------------------------------

#[test]
fn inconsistency_tabulation_reproduces_the_reference_rows() {
    use InconsistencyType::*;
    let annotate = |case: &str, variant: &str, types: &[InconsistencyType]| CaseAnnotation {
        case_id: case.to_string(),
        variant: variant.to_string(),
        types: types.iter().copied().collect(),
        note: String::new(),
        machine_generated: false,
    };

    let mut annotations = Vec::new();
    // single-agent row: 2 affected cases, one status and one size
    annotations.push(annotate("s01", "single-agent", &[ProgressionStatus]));
    annotations.push(annotate("s02", "single-agent", &[Size]));
    // retriever-only row: 10 affected; presence 7, status 6, size 1, location 1
    for i in 0..5 {
        annotations.push(annotate(&format!("r{i:02}"), "retriever-only", &[Presence, ProgressionStatus]));
    }
    annotations.push(annotate("r05", "retriever-only", &[Presence]));
    annotations.push(annotate("r06", "retriever-only", &[Presence]));
    annotations.push(annotate("r07", "retriever-only", &[ProgressionStatus]));
    annotations.push(annotate("r08", "retriever-only", &[Size]));
    annotations.push(annotate("r09", "retriever-only", &[Location]));
    // retriever+reviewer row: 6 affected; status 6, size 1, location 1
    annotations.push(annotate("v00", "retriever+reviewer", &[ProgressionStatus, Size]));
    annotations.push(annotate("v01", "retriever+reviewer", &[ProgressionStatus, Location]));
    for i in 2..6 {
        annotations.push(annotate(&format!("v{i:02}"), "retriever+reviewer", &[ProgressionStatus]));
    }

    let summary = summarize(&annotations);
    let expect = |variant: &str, affected: usize, counts: [usize; 5]| {
        let row = &summary.variants[variant];
        assert_eq!(row.affected_cases, affected, "{variant} affected");
        for (ty, want) in InconsistencyType::ALL.iter().zip(counts) {
            assert_eq!(row.counts[ty], want, "{variant} {ty:?}");
        }
    };
    expect("single-agent", 2, [0, 1, 0, 1, 0]);
    expect("retriever-only", 10, [7, 6, 0, 1, 1]);
    expect("retriever+reviewer", 6, [0, 6, 0, 1, 1]);
    println!("PASS: inconsistency tabulation rows {{2, 10, 6}} with exact per-type counts");
}

// ---------------------------------------------------------------------------
// Sentinel robustness
// ---------------------------------------------------------------------------

#[test]
fn sentinel_parsing_survives_20_variants_and_rejects_malformed() {
    let bases = ["REVISION: YES", "revision: yes", "Revision: Yes", "REVISION:YES", "REVISION :  YES"];
    let tails = ["", ".", "!", "   ", " . "];
    let mut variants = Vec::new();
    for base in bases {
        for tail in tails {
            variants.push(format!("\t{base}{tail}"));
        }
    }
    assert!(variants.len() >= 20);
    for variant in variants.iter().take(25) {
        let raw = format!("some commentary here\n{variant}");
        assert!(parse_verdict(&raw).unwrap().needs_revision, "YES variant {variant:?}");
        let no = variant.replace("YES", "NO").replace("yes", "no").replace("Yes", "No");
        let raw = format!("some commentary here\n{no}");
        assert!(!parse_verdict(&raw).unwrap().needs_revision, "NO variant {no:?}");
    }

    assert!(matches!(parse_verdict("REVISION: MAYBE"), Err(AgentError::MalformedVerdict)));
    assert!(matches!(parse_verdict("everything is fine"), Err(AgentError::MalformedVerdict)));
    println!("PASS: sentinel robustness over casing/whitespace/punctuation variants");
}

// ---------------------------------------------------------------------------
// End-to-end pipeline
// ---------------------------------------------------------------------------

#[test]
fn pipeline_runs_deterministically_on_the_fixture_corpus() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let config_path = dir.path().join("cfg.toml");
    std::fs::write(
        &config_path,
        format!(
            r#"
[agent_backend]
kind = "scripted"
script = {script:?}

[judge_backend]
kind = "scripted"
script = {script:?}

[split]
n_eval = 4
seed = 7

[paths]
corpus = {corpus:?}
index = {index:?}
runs = {runs:?}
"#,
            script = fixture("pipeline_script.json"),
            corpus = fixture("corpus_12.jsonl"),
            index = dir.path().join("index.json"),
            runs = runs,
        ),
    )
    .unwrap();

    let config = load_config(&config_path).unwrap();
    let summary = run_pipeline(&config).unwrap();
    assert_eq!(summary.n_eval, 4);
    assert_eq!(summary.n_database, 8);
    assert_eq!(summary.partial_failures(), 0);
    assert!(summary.judge_aggregate.is_some());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(runs.join("manifest.json")).unwrap()).unwrap();
    let stages: Vec<&str> = manifest["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        stages,
        vec!["split", "index", "batch-single", "batch-multi", "metrics", "judge", "summary"]
    );

    let snapshot = |name: &str| std::fs::read(runs.join(name)).unwrap();
    let first: Vec<(String, Vec<u8>)> =
        ["metrics_single.json", "metrics_multi.json", "summary.json", "judge.json"]
            .iter()
            .map(|name| (name.to_string(), snapshot(name)))
            .collect();

    // Second run, same config: byte-identical metric and summary outputs.
    let summary2 = run_pipeline(&config).unwrap();
    assert_eq!(summary2.n_eval, 4);
    for (name, bytes) in &first {
        assert_eq!(&snapshot(name), bytes, "{name} changed between identical runs");
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}, budget 30s");
    println!("PASS: end-to-end pipeline, deterministic twice in {elapsed:?}");
}
