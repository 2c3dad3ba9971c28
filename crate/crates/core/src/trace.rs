//! Labeled query traces: ingest, validation, rewards, splits, and a
//! synthetic generator for desk-scale experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{Marketplace, Usage};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("record {query_id:?} references unknown llm_id {llm_id:?}")]
    UnknownLlm { query_id: String, llm_id: String },
    #[error("duplicate query_id {0:?}")]
    DuplicateQueryId(String),
    #[error("record {query_id:?} has no responses")]
    NoResponses { query_id: String },
    #[error("record {query_id:?} llm {llm_id:?}: reward {reward} outside [0,1]")]
    RewardOutOfRange {
        query_id: String,
        llm_id: String,
        reward: f64,
    },
    #[error("cannot split {0} records (need at least 2)")]
    TooFewRecords(usize),
    #[error("test_fraction {0} must be strictly between 0 and 1")]
    BadFraction(f64),
    #[error("synthetic spec: {0}")]
    BadSyntheticSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One LLM's recorded response to one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub answer_text: String,
    #[serde(flatten)]
    pub usage: Usage,
    /// r(true_answer, answer_text), materialized at ingest.
    pub reward: f64,
}

/// One query with ground truth and every LLM's recorded response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query_id: String,
    pub query_text: String,
    pub true_answer: String,
    pub responses: BTreeMap<String, LlmResponse>,
}

impl TraceRecord {
    pub fn response(&self, llm_id: &str) -> Option<&LlmResponse> {
        self.responses.get(llm_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// An ordered slice of the trace, tagged with its split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<TraceRecord>,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    /// Wrap a full trace as a train-side dataset (no held-out split).
    pub fn full(records: Vec<TraceRecord>) -> Dataset {
        Dataset {
            records,
            split: Split::Train,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Reward functions measure agreement between ground truth and a generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFn {
    ExactMatch,
    TokenF1,
}

impl RewardFn {
    pub fn apply(self, truth: &str, answer: &str) -> f64 {
        match self {
            RewardFn::ExactMatch => reward_exact_match(truth, answer),
            RewardFn::TokenF1 => reward_token_f1(truth, answer),
        }
    }
}

/// Case-fold, collapse internal whitespace, strip surrounding whitespace and
/// terminal punctuation.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let trimmed = lowered
        .trim()
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim_end();
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1 when the normalized strings are equal, else 0.
pub fn reward_exact_match(truth: &str, answer: &str) -> f64 {
    if normalize_answer(truth) == normalize_answer(answer) {
        1.0
    } else {
        0.0
    }
}

/// Harmonic mean of token precision and recall over normalized
/// whitespace tokens.
pub fn reward_token_f1(truth: &str, answer: &str) -> f64 {
    let t = normalize_answer(truth);
    let a = normalize_answer(answer);
    let t_tokens: Vec<&str> = t.split_whitespace().collect();
    let a_tokens: Vec<&str> = a.split_whitespace().collect();
    match (t_tokens.is_empty(), a_tokens.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut truth_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for tok in &t_tokens {
        *truth_counts.entry(tok).or_default() += 1;
    }
    let mut overlap = 0usize;
    for tok in &a_tokens {
        if let Some(c) = truth_counts.get_mut(tok) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / a_tokens.len() as f64;
    let recall = overlap as f64 / t_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Raw trace file line. Rewards are optional on disk; they are recomputed
/// at ingest and any stored value is cross-checked.
#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    query_id: String,
    query_text: String,
    true_answer: String,
    responses: Vec<TraceRowResponse>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRowResponse {
    llm_id: String,
    answer_text: String,
    input_tokens: u32,
    output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reward: Option<f64>,
}

/// Result of loading a trace: validated records plus non-fatal warnings.
#[derive(Debug)]
pub struct TraceLoad {
    pub records: Vec<TraceRecord>,
    pub warnings: Vec<String>,
}

pub fn load_trace(
    path: &Path,
    marketplace: &Marketplace,
    reward_fn: RewardFn,
) -> Result<TraceLoad, TraceError> {
    let text = std::fs::read_to_string(path)?;
    load_trace_str(&text, marketplace, reward_fn)
}

pub fn load_trace_str(
    text: &str,
    marketplace: &Marketplace,
    reward_fn: RewardFn,
) -> Result<TraceLoad, TraceError> {
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: TraceRow = serde_json::from_str(line).map_err(|e| TraceError::Malformed {
            line: line_no,
            msg: e.to_string(),
        })?;
        if !seen_ids.insert(row.query_id.clone()) {
            return Err(TraceError::DuplicateQueryId(row.query_id));
        }
        if row.responses.is_empty() {
            return Err(TraceError::NoResponses {
                query_id: row.query_id,
            });
        }
        let mut responses = BTreeMap::new();
        for resp in row.responses {
            if !marketplace.contains(&resp.llm_id) {
                return Err(TraceError::UnknownLlm {
                    query_id: row.query_id,
                    llm_id: resp.llm_id,
                });
            }
            let computed = reward_fn.apply(&row.true_answer, &resp.answer_text);
            if let Some(stored) = resp.reward {
                if !(0.0..=1.0).contains(&stored) {
                    return Err(TraceError::RewardOutOfRange {
                        query_id: row.query_id,
                        llm_id: resp.llm_id,
                        reward: stored,
                    });
                }
                if (stored - computed).abs() > 1e-9 {
                    warnings.push(format!(
                        "record {:?} llm {:?}: stored reward {} != recomputed {}",
                        row.query_id, resp.llm_id, stored, computed
                    ));
                }
            }
            responses.insert(
                resp.llm_id,
                LlmResponse {
                    answer_text: resp.answer_text,
                    usage: Usage::new(resp.input_tokens, resp.output_tokens),
                    reward: computed,
                },
            );
        }
        records.push(TraceRecord {
            query_id: row.query_id,
            query_text: row.query_text,
            true_answer: row.true_answer,
            responses,
        });
    }
    if records.is_empty() {
        warnings.push("trace file contains no records".to_string());
    }
    Ok(TraceLoad { records, warnings })
}

pub fn save_trace(path: &Path, records: &[TraceRecord]) -> Result<(), TraceError> {
    std::fs::write(path, save_trace_str(records))?;
    Ok(())
}

pub fn save_trace_str(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        let row = TraceRow {
            query_id: rec.query_id.clone(),
            query_text: rec.query_text.clone(),
            true_answer: rec.true_answer.clone(),
            responses: rec
                .responses
                .iter()
                .map(|(llm_id, r)| TraceRowResponse {
                    llm_id: llm_id.clone(),
                    answer_text: r.answer_text.clone(),
                    input_tokens: r.usage.input_tokens,
                    output_tokens: r.usage.output_tokens,
                    reward: Some(r.reward),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&row).expect("row serializes"));
        out.push('\n');
    }
    out
}

/// Deterministic seeded split into disjoint train/test datasets.
pub fn split_trace(
    records: Vec<TraceRecord>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), TraceError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(TraceError::BadFraction(test_fraction));
    }
    let n = records.len();
    if n < 2 {
        return Err(TraceError::TooFewRecords(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let test_n = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let test_idx: BTreeSet<usize> = order[..test_n].iter().copied().collect();
    let mut train = Vec::with_capacity(n - test_n);
    let mut test = Vec::with_capacity(test_n);
    for (i, rec) in records.into_iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(rec);
        } else {
            train.push(rec);
        }
    }
    Ok((
        Dataset {
            records: train,
            split: Split::Train,
            seed,
        },
        Dataset {
            records: test,
            split: Split::Test,
            seed,
        },
    ))
}

/// Generator spec for one synthetic LLM.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticLlm {
    pub llm_id: String,
    /// Marginal probability of a correct answer.
    pub accuracy: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

/// Joint correctness probability for one pair of LLMs. Each llm_id may
/// appear in at most one pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairOverlap {
    pub llm_a: String,
    pub llm_b: String,
    /// P(both correct).
    pub joint_correct: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub llms: Vec<SyntheticLlm>,
    #[serde(default)]
    pub overlaps: Vec<PairOverlap>,
    pub n_records: usize,
}

const LABELS: [&str; 4] = ["up", "down", "neutral", "none"];
/// Wrong answers carry this marker so a text scorer can separate them.
pub const WRONG_MARKER: &str = "unsure-zxqv";

/// Generate a labeled trace whose per-LLM accuracies converge to the spec.
///
/// Correct responses repeat the true label; wrong responses emit a marked
/// off-label token, which keeps the trace linearly separable for the
/// built-in scorer.
pub fn synthesize_trace(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<Vec<TraceRecord>, TraceError> {
    if spec.llms.is_empty() {
        return Err(TraceError::BadSyntheticSpec("no llms".into()));
    }
    for llm in &spec.llms {
        if !(0.0..=1.0).contains(&llm.accuracy) {
            return Err(TraceError::BadSyntheticSpec(format!(
                "accuracy {} for {:?} outside [0,1]",
                llm.accuracy, llm.llm_id
            )));
        }
    }
    let mut paired: BTreeMap<&str, (&PairOverlap, bool)> = BTreeMap::new();
    for ov in &spec.overlaps {
        let pa = marginal(spec, &ov.llm_a)?;
        let pb = marginal(spec, &ov.llm_b)?;
        let lo = (pa + pb - 1.0).max(0.0);
        let hi = pa.min(pb);
        if ov.joint_correct < lo - 1e-12 || ov.joint_correct > hi + 1e-12 {
            return Err(TraceError::BadSyntheticSpec(format!(
                "joint_correct {} for ({}, {}) infeasible: must lie in [{lo}, {hi}]",
                ov.joint_correct, ov.llm_a, ov.llm_b
            )));
        }
        for (id, is_a) in [(&ov.llm_a, true), (&ov.llm_b, false)] {
            if paired.insert(id, (ov, is_a)).is_some() {
                return Err(TraceError::BadSyntheticSpec(format!(
                    "llm {id:?} appears in more than one overlap constraint"
                )));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(spec.n_records);
    for i in 0..spec.n_records {
        let label = LABELS[rng.gen_range(0..LABELS.len())];
        // Draw correctness: paired LLMs jointly from the 2x2 table, the rest
        // independently. One uniform per pair, consumed when its first
        // member comes up.
        let mut correct: BTreeMap<String, bool> = BTreeMap::new();
        for llm in &spec.llms {
            if correct.contains_key(&llm.llm_id) {
                continue;
            }
            match paired.get(llm.llm_id.as_str()) {
                Some((ov, _)) => {
                    let pa = marginal(spec, &ov.llm_a)?;
                    let pb = marginal(spec, &ov.llm_b)?;
                    let u: f64 = rng.gen();
                    // cells: both, a only, b only, neither
                    let p_both = ov.joint_correct;
                    let p_a_only = pa - p_both;
                    let p_b_only = pb - p_both;
                    let (a_ok, b_ok) = if u < p_both {
                        (true, true)
                    } else if u < p_both + p_a_only {
                        (true, false)
                    } else if u < p_both + p_a_only + p_b_only {
                        (false, true)
                    } else {
                        (false, false)
                    };
                    correct.insert(ov.llm_a.clone(), a_ok);
                    correct.insert(ov.llm_b.clone(), b_ok);
                }
                None => {
                    let ok = rng.gen::<f64>() < llm.accuracy;
                    correct.insert(llm.llm_id.clone(), ok);
                }
            }
        }
        let mut responses = BTreeMap::new();
        for llm in &spec.llms {
            let ok = correct[&llm.llm_id];
            let answer = if ok {
                label.to_string()
            } else {
                let off = LABELS[(LABELS.iter().position(|l| *l == label).unwrap() + 1) % LABELS.len()];
                format!("{WRONG_MARKER} {off}")
            };
            let reward = reward_exact_match(label, &answer);
            responses.insert(
                llm.llm_id.clone(),
                LlmResponse {
                    answer_text: answer,
                    usage: Usage::new(llm.input_tokens, llm.output_tokens),
                    reward,
                },
            );
        }
        records.push(TraceRecord {
            query_id: format!("q{i:06}"),
            query_text: format!("headline {i}: which way is the price trend moving?"),
            true_answer: label.to_string(),
            responses,
        });
    }
    Ok(records)
}

fn marginal(spec: &SyntheticSpec, llm_id: &str) -> Result<f64, TraceError> {
    spec.llms
        .iter()
        .find(|l| l.llm_id == llm_id)
        .map(|l| l.accuracy)
        .ok_or_else(|| {
            TraceError::BadSyntheticSpec(format!("overlap references unknown llm {llm_id:?}"))
        })
}

/// Binarized correctness label used by the scorer, disagreement pruning,
/// and MPI: a generation counts as correct only when its reward is 1.
pub fn is_correct(response: &LlmResponse) -> bool {
    response.reward >= 1.0
}
