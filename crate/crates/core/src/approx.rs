//! Cost-reduction strategies that avoid or shrink LLM calls: the completion
//! cache, query concatenation, and prompt example selection.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cascade::{route, CascadeConfig, CascadeError, FailurePolicy, RouteOutcome};
use crate::cost::{Marketplace, Money};
use crate::providers::{CompletionRequest, Provider, ProviderRegistry};
use crate::scorer::{featurize_text, FeatureVector, Scorer};
use crate::trace::{normalize_answer, Dataset, RewardFn};

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("cache log line {line}: {msg}")]
    BadCacheLine { line: usize, msg: String },
    #[error("batch of {k} queries but response contains {found} answers")]
    AnswerCountMismatch { k: usize, found: usize },
    #[error("batch size {0} outside 1..={1}")]
    BadBatchSize(usize, usize),
    #[error("cannot select {n} examples from a template with {available}")]
    NotEnoughExamples { n: usize, available: usize },
    #[error("provider failed beyond the retry budget: {0}")]
    ProviderExhausted(String),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One cached completion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    /// Hex digest of the normalized query text.
    pub key: String,
    pub normalized_query: String,
    pub query_text: String,
    pub answer_text: String,
    pub llm_id: String,
    pub stored_cost: Money,
    pub hit_count: u64,
    pub created_at: u64,
}

pub fn cache_key(query: &str) -> String {
    let normalized = normalize_answer(query);
    let mut hasher = Sha256::new();
    hasher.update(normalized.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Completion cache: append-only log on disk, in-memory index, concurrent
/// lookups with serialized inserts.
pub struct CompletionCache {
    log_path: Option<PathBuf>,
    inner: Mutex<CacheInner>,
}

struct CacheInner {
    entries: Vec<CacheEntry>,
    by_key: HashMap<String, usize>,
    features: Vec<FeatureVector>,
}

impl CompletionCache {
    pub fn in_memory() -> CompletionCache {
        CompletionCache {
            log_path: None,
            inner: Mutex::new(CacheInner {
                entries: Vec::new(),
                by_key: HashMap::new(),
                features: Vec::new(),
            }),
        }
    }

    /// Open (or create) a cache backed by an append-only log file.
    pub fn open(path: &Path) -> Result<CompletionCache, ApproxError> {
        let mut inner = CacheInner {
            entries: Vec::new(),
            by_key: HashMap::new(),
            features: Vec::new(),
        };
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry =
                    serde_json::from_str(line).map_err(|e| ApproxError::BadCacheLine {
                        line: idx + 1,
                        msg: e.to_string(),
                    })?;
                insert_into(&mut inner, entry);
            }
        }
        Ok(CompletionCache {
            log_path: Some(path.to_path_buf()),
            inner: Mutex::new(inner),
        })
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Totals for reporting: (entries, accumulated hit count, stored cost).
    pub fn stats(&self) -> (usize, u64, Money) {
        let inner = self.inner.lock().unwrap();
        let hits = inner.entries.iter().map(|e| e.hit_count).sum();
        let cost = inner
            .entries
            .iter()
            .fold(Money::ZERO, |acc, e| acc.checked_add(e.stored_cost).unwrap_or(acc));
        (inner.entries.len(), hits, cost)
    }

    /// Exact normalized match first; otherwise the entry with maximal
    /// cosine similarity over hashed features when it clears the
    /// threshold. A threshold above 1.0 disables the cache.
    pub fn lookup(&self, query: &str, similarity_threshold: f64) -> Option<CacheEntry> {
        if similarity_threshold > 1.0 {
            return None;
        }
        let key = cache_key(query);
        let normalized = normalize_answer(query);
        let mut inner = self.inner.lock().unwrap();
        if let Some(&idx) = inner.by_key.get(&key) {
            // digest collisions are ruled out by comparing the stored text
            if inner.entries[idx].normalized_query == normalized {
                inner.entries[idx].hit_count += 1;
                return Some(inner.entries[idx].clone());
            }
        }
        if similarity_threshold < 1.0 {
            let probe = featurize_text(&normalized);
            let mut best: Option<(usize, f64)> = None;
            for (idx, fv) in inner.features.iter().enumerate() {
                let sim = probe.cosine(fv);
                if sim >= similarity_threshold
                    && best.map_or(true, |(_, s)| sim > s)
                {
                    best = Some((idx, sim));
                }
            }
            if let Some((idx, _)) = best {
                inner.entries[idx].hit_count += 1;
                return Some(inner.entries[idx].clone());
            }
        }
        None
    }

    /// Insert a completed route's answer. Single-writer contract: inserts
    /// are serialized by the internal lock.
    pub fn insert(
        &self,
        query: &str,
        answer: &str,
        llm_id: &str,
        cost: Money,
    ) -> Result<(), ApproxError> {
        let entry = CacheEntry {
            key: cache_key(query),
            normalized_query: normalize_answer(query),
            query_text: query.to_string(),
            answer_text: answer.to_string(),
            llm_id: llm_id.to_string(),
            stored_cost: cost,
            hit_count: 0,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let mut inner = self.inner.lock().unwrap();
        if let Some(path) = &self.log_path {
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(file, "{}", serde_json::to_string(&entry).expect("entry serializes"))?;
        }
        insert_into(&mut inner, entry);
        Ok(())
    }
}

fn insert_into(inner: &mut CacheInner, entry: CacheEntry) {
    inner.features.push(featurize_text(&entry.normalized_query));
    // first entry for a key wins; the cache only grows on misses, so a
    // duplicate means a concurrent writer lost the race
    inner.by_key.entry(entry.key.clone()).or_insert(inner.entries.len());
    inner.entries.push(entry);
}

/// Route through the cache: on a hit the answer is served at zero cost; on
/// a miss the cascade runs and the result is inserted.
pub fn cached_route(
    cache: &CompletionCache,
    config: &CascadeConfig,
    scorer: &dyn Scorer,
    providers: &ProviderRegistry,
    pricing: &Marketplace,
    query: &str,
    similarity_threshold: f64,
    policy: FailurePolicy,
) -> Result<RouteOutcome, ApproxError> {
    if let Some(entry) = cache.lookup(query, similarity_threshold) {
        return Ok(RouteOutcome {
            answer: entry.answer_text,
            stop_index: 0,
            per_step: Vec::new(),
            total_cost: Money::ZERO,
            cached: true,
        });
    }
    let outcome = route(config, scorer, providers, pricing, query, policy)?;
    if similarity_threshold <= 1.0 {
        let llm_id = &outcome.per_step[outcome.stop_index - 1].llm_id;
        cache.insert(query, &outcome.answer, llm_id, outcome.total_cost)?;
    }
    Ok(outcome)
}

/// A prompt: shared instruction plus in-context examples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
    pub examples: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_examples: Option<usize>,
}

impl PromptTemplate {
    pub fn new(instruction: &str) -> PromptTemplate {
        PromptTemplate {
            instruction: instruction.to_string(),
            examples: Vec::new(),
            max_examples: None,
        }
    }

    pub fn with_examples(mut self, examples: Vec<(String, String)>) -> PromptTemplate {
        self.examples = examples;
        self
    }

    /// Render the shared prefix once and the queries as a numbered list.
    /// The k = 1 rendering is the single-query prompt.
    pub fn render(&self, queries: &[String]) -> String {
        let mut out = String::new();
        out.push_str(&self.instruction);
        out.push('\n');
        if queries.len() > 1 {
            out.push_str(&format!(
                "Answer each of the {} numbered questions below. After each answer, emit the line {} with n replaced by the question number.\n",
                queries.len(),
                ANSWER_DELIMITER_CONTRACT,
            ));
        }
        for (q, a) in &self.examples {
            out.push_str(&format!("Q: {q}\nA: {a}\n"));
        }
        for (i, q) in queries.iter().enumerate() {
            out.push_str(&format!("Q{}: {q}\n", i + 1));
        }
        out.push_str("A:");
        out
    }
}

/// Sentinel line closing each answer in a concatenated batch.
const ANSWER_DELIMITER_PREFIX: &str = "=====END-ANSWER-";
const ANSWER_DELIMITER_CONTRACT: &str = "=====END-ANSWER-n=====";

fn delimiter_for(n: usize) -> String {
    format!("{ANSWER_DELIMITER_PREFIX}{n}=====")
}

/// Splits a batched response back into exactly k answers.
#[derive(Clone, Debug)]
pub struct BatchParser {
    k: usize,
}

impl BatchParser {
    pub fn parse(&self, response: &str) -> Result<Vec<String>, ApproxError> {
        let mut answers = Vec::new();
        let mut current = String::new();
        for line in response.lines() {
            if line.trim().starts_with(ANSWER_DELIMITER_PREFIX) {
                answers.push(current.trim().to_string());
                current.clear();
            } else {
                current.push_str(line);
                current.push('\n');
            }
        }
        // a single-query response may omit the trailing delimiter
        if self.k == 1 && answers.is_empty() && !current.trim().is_empty() {
            answers.push(current.trim().to_string());
        }
        if answers.len() != self.k {
            return Err(ApproxError::AnswerCountMismatch {
                k: self.k,
                found: answers.len(),
            });
        }
        Ok(answers)
    }
}

pub const DEFAULT_MAX_BATCH: usize = 8;

/// Render k queries as one prompt sharing the instruction and examples,
/// paired with the parser that recovers the k answers.
pub fn concat_queries(
    template: &PromptTemplate,
    queries: &[String],
    k: usize,
    max_batch: usize,
) -> Result<(String, BatchParser), ApproxError> {
    if k < 1 || k > max_batch || queries.len() != k {
        return Err(ApproxError::BadBatchSize(k, max_batch));
    }
    Ok((template.render(queries), BatchParser { k }))
}

/// Render the delimited answers for a batch (what a cooperating provider
/// is asked to produce). Round-trips through [`BatchParser::parse`].
pub fn render_batch_answers(answers: &[String]) -> String {
    let mut out = String::new();
    for (i, a) in answers.iter().enumerate() {
        out.push_str(a);
        out.push('\n');
        out.push_str(&delimiter_for(i + 1));
        out.push('\n');
    }
    out
}

/// Greedy forward selection of in-context examples: starting from the empty
/// set, repeatedly add the example that maximizes mean reward on the
/// validation slice, queried through the provider. Ties keep original order.
pub fn select_prompt_examples(
    template: &PromptTemplate,
    validation: &Dataset,
    provider: &dyn Provider,
    n: usize,
    reward_fn: RewardFn,
    retry_budget: u32,
) -> Result<PromptTemplate, ApproxError> {
    if n > template.examples.len() {
        return Err(ApproxError::NotEnoughExamples {
            n,
            available: template.examples.len(),
        });
    }
    let mut selected_idx: Vec<usize> = Vec::new();
    while selected_idx.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for (idx, _) in template.examples.iter().enumerate() {
            if selected_idx.contains(&idx) {
                continue;
            }
            let mut trial_idx = selected_idx.clone();
            trial_idx.push(idx);
            trial_idx.sort_unstable();
            let trial = PromptTemplate {
                instruction: template.instruction.clone(),
                examples: trial_idx
                    .iter()
                    .map(|&i| template.examples[i].clone())
                    .collect(),
                max_examples: template.max_examples,
            };
            let reward = mean_validation_reward(&trial, validation, provider, reward_fn, retry_budget)?;
            // strict improvement keeps the earliest index on ties
            if best.map_or(true, |(_, r)| reward > r) {
                best = Some((idx, reward));
            }
        }
        let (idx, _) = best.expect("examples remain");
        selected_idx.push(idx);
    }
    selected_idx.sort_unstable();
    Ok(PromptTemplate {
        instruction: template.instruction.clone(),
        examples: selected_idx
            .iter()
            .map(|&i| template.examples[i].clone())
            .collect(),
        max_examples: template.max_examples,
    })
}

/// Mean reward of the template over the validation slice.
pub fn mean_validation_reward(
    template: &PromptTemplate,
    validation: &Dataset,
    provider: &dyn Provider,
    reward_fn: RewardFn,
    retry_budget: u32,
) -> Result<f64, ApproxError> {
    if validation.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for rec in &validation.records {
        let prompt = template.render(std::slice::from_ref(&rec.query_text));
        let mut last_err = String::new();
        let mut answered = None;
        for _ in 0..=retry_budget {
            match provider.complete(&CompletionRequest::new("prompt-selection", &prompt)) {
                Ok(resp) => {
                    answered = Some(resp.text);
                    break;
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        let answer = answered.ok_or(ApproxError::ProviderExhausted(last_err))?;
        sum += reward_fn.apply(&rec.true_answer, &answer);
    }
    Ok(sum / validation.len() as f64)
}
