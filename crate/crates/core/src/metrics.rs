//! Text-overlap metrics for candidate impressions against references:
//! BLEU, ROUGE-1/2/L, and a greedy embedding-match score.
//!
//! One tokenizer feeds BLEU and ROUGE so their numbers are comparable.
//! The embedding score delegates tokenization to its token embedder.
//! BLEU is sentence-level with add-epsilon smoothing by default; a pooled
//! corpus-level variant is reported alongside it, since the two are not
//! interchangeable and which one a headline number means is often
//! unstated.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::{EmbeddingVector, RetrievalError};

/// Smoothing constant for zero n-gram counts at n >= 2.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_MAX_N: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty corpus: no candidate/reference pairs")]
    EmptyCorpus,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Precision/recall/F1 triple in [0, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

/// Per-case metric values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub bleu: f64,
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub bertscore: Prf,
}

/// Corpus aggregate: arithmetic means of per-case values, plus the pooled
/// corpus-level BLEU alternative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean of per-case sentence-level BLEU, in [0, 100].
    pub bleu: f64,
    /// Corpus-level BLEU over pooled n-gram counts, in [0, 100].
    pub bleu_corpus: f64,
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub bertscore: Prf,
    pub n_cases: usize,
}

/// Per-token embedder for the greedy matching score; one vector per token
/// of the embedder's own segmentation.
pub trait TokenEmbedder {
    fn embed_tokens(&self, text: &str) -> Result<Vec<EmbeddingVector>, RetrievalError>;
}

/// Hashed per-token embedder using the shared tokenizer; the offline
/// default for the embedding score.
#[derive(Debug, Clone)]
pub struct HashedTokenEmbedder {
    dim: usize,
}

impl HashedTokenEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Default for HashedTokenEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

impl TokenEmbedder for HashedTokenEmbedder {
    fn embed_tokens(&self, text: &str) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        Ok(tokenize(text)
            .iter()
            .map(|t| crate::retrieval::hashed_token_vector(t, self.dim))
            .collect())
    }
}

/// Lowercase, split on whitespace, strip leading/trailing punctuation per
/// token, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n >= 1 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and total candidate n-grams for one order.
fn clipped_counts(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(gram, &count)| count.min(refc.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = candidate.len().saturating_sub(n - 1);
    (matched, total)
}

fn bleu_from_counts(matched: &[usize], total: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_MAX_N {
        let (m, t) = (matched[n - 1] as f64, total[n - 1] as f64);
        let p = if n == 1 {
            if m == 0.0 {
                return 0.0;
            }
            m / t
        } else {
            (m + BLEU_EPSILON) / (t + BLEU_EPSILON)
        };
        log_sum += p.ln();
    }
    let brevity = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    100.0 * brevity * (log_sum / BLEU_MAX_N as f64).exp()
}

/// Sentence-level BLEU in [0, 100]: geometric mean of clipped modified
/// n-gram precisions for n = 1..4, epsilon-smoothed at n >= 2, times the
/// brevity penalty. Empty candidates score 0.
pub fn bleu(candidate: &[String], reference: &[String]) -> f64 {
    let mut matched = [0usize; BLEU_MAX_N];
    let mut total = [0usize; BLEU_MAX_N];
    for n in 1..=BLEU_MAX_N {
        let (m, t) = clipped_counts(candidate, reference, n);
        matched[n - 1] = m;
        total[n - 1] = t;
    }
    bleu_from_counts(&matched, &total, candidate.len(), reference.len())
}

/// Corpus-level BLEU: n-gram counts and lengths pooled over all pairs
/// before the geometric mean and brevity penalty.
pub fn bleu_corpus(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let mut matched = [0usize; BLEU_MAX_N];
    let mut total = [0usize; BLEU_MAX_N];
    let mut cand_len = 0;
    let mut ref_len = 0;
    for (candidate, reference) in pairs {
        for n in 1..=BLEU_MAX_N {
            let (m, t) = clipped_counts(candidate, reference, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        cand_len += candidate.len();
        ref_len += reference.len();
    }
    bleu_from_counts(&matched, &total, cand_len, ref_len)
}

/// ROUGE-N: multiset n-gram overlap. Zero denominators score 0.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> Prf {
    assert!(n >= 1, "rouge_n requires n >= 1");
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(gram, &count)| count.min(refc.get(gram).copied().unwrap_or(0)))
        .sum();
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refc.values().sum();
    let precision = if cand_total > 0 { overlap as f64 / cand_total as f64 } else { 0.0 };
    let recall = if ref_total > 0 { overlap as f64 / ref_total as f64 } else { 0.0 };
    Prf::new(precision, recall)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(curr[j]) };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-L: longest common subsequence, precision over the candidate
/// length and recall over the reference length.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::default();
    }
    let lcs = lcs_len(candidate, reference) as f64;
    Prf::new(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

fn greedy_side(from: &[EmbeddingVector], to: &[EmbeddingVector]) -> f64 {
    let usable: Vec<&EmbeddingVector> =
        from.iter().filter(|v| v.iter().any(|x| *x != 0.0)).collect();
    let targets: Vec<&EmbeddingVector> = to.iter().filter(|v| v.iter().any(|x| *x != 0.0)).collect();
    if usable.len() < from.len() || targets.len() < to.len() {
        log::warn!("skipping zero-norm token vectors in embedding score");
    }
    if usable.is_empty() || targets.is_empty() {
        return 0.0;
    }
    let mean: f64 = usable
        .iter()
        .map(|v| {
            targets
                .iter()
                .map(|w| crate::retrieval::cosine_similarity(v, w).expect("nonzero vectors"))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / usable.len() as f64;
    mean
}

/// Greedy embedding match: recall is the mean over reference tokens of
/// the best cosine against any candidate token, precision symmetrically.
/// No idf weighting and no baseline rescaling. Zero-norm token vectors
/// are skipped with a diagnostic.
pub fn bertscore(
    candidate: &str,
    reference: &str,
    embedder: &dyn TokenEmbedder,
) -> Result<Prf, MetricsError> {
    let cand = embedder.embed_tokens(candidate)?;
    let refs = embedder.embed_tokens(reference)?;
    if cand.is_empty() || refs.is_empty() {
        return Ok(Prf::default());
    }
    let precision = greedy_side(&cand, &refs);
    let recall = greedy_side(&refs, &cand);
    Ok(Prf::new(precision, recall))
}

fn mean_prf(values: impl Iterator<Item = Prf> + Clone, n: f64) -> Prf {
    Prf {
        precision: values.clone().map(|p| p.precision).sum::<f64>() / n,
        recall: values.clone().map(|p| p.recall).sum::<f64>() / n,
        f1: values.map(|p| p.f1).sum::<f64>() / n,
    }
}

/// All metrics for one candidate/reference pair.
pub fn evaluate_case(
    candidate: &str,
    reference: &str,
    embedder: &dyn TokenEmbedder,
) -> Result<CaseMetrics, MetricsError> {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    Ok(CaseMetrics {
        bleu: bleu(&cand, &refs),
        rouge1: rouge_n(&cand, &refs, 1),
        rouge2: rouge_n(&cand, &refs, 2),
        rouge_l: rouge_l(&cand, &refs),
        bertscore: bertscore(candidate, reference, embedder)?,
    })
}

/// Per-case metrics arithmetically averaged over the corpus.
pub fn evaluate_corpus(
    pairs: &[(String, String)],
    embedder: &dyn TokenEmbedder,
) -> Result<MetricsReport, MetricsError> {
    let cases = per_case_metrics(pairs, embedder)?;
    let n = cases.len() as f64;
    let tokenized: Vec<(Vec<String>, Vec<String>)> =
        pairs.iter().map(|(c, r)| (tokenize(c), tokenize(r))).collect();
    Ok(MetricsReport {
        bleu: cases.iter().map(|c| c.bleu).sum::<f64>() / n,
        bleu_corpus: bleu_corpus(&tokenized),
        rouge1: mean_prf(cases.iter().map(|c| c.rouge1), n),
        rouge2: mean_prf(cases.iter().map(|c| c.rouge2), n),
        rouge_l: mean_prf(cases.iter().map(|c| c.rouge_l), n),
        bertscore: mean_prf(cases.iter().map(|c| c.bertscore), n),
        n_cases: cases.len(),
    })
}

/// The per-case breakdown behind [`evaluate_corpus`].
pub fn per_case_metrics(
    pairs: &[(String, String)],
    embedder: &dyn TokenEmbedder,
) -> Result<Vec<CaseMetrics>, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    pairs.iter().map(|(c, r)| evaluate_case(c, r, embedder)).collect()
}
