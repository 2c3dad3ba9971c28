//! Reliability scoring of generations: g(query, answer) -> [0,1].
//!
//! The built-in scorer is a hashed-feature logistic regression trained on
//! the labeled trace. Anything implementing [`Scorer`] can stand in for it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{is_correct, Dataset};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("model file: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that can judge how reliable a generation is.
pub trait Scorer: Send + Sync {
    /// Reliability of `answer` for `query`, in [0,1].
    fn score(&self, query: &str, answer: &str, llm_id: &str) -> f64;
}

/// Default feature dimension (2^16 hashed slots).
pub const DEFAULT_DIMS: usize = 1 << 16;

// Reserved dense slots for meta-features; hashed features land above these.
const META_ANSWER_LEN: usize = 0;
const META_ANSWER_TOKENS: usize = 1;
const META_SINGLE_TOKEN: usize = 2;
const META_SLOTS: usize = 3;

/// Sparse L2-normalized feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub dims: usize,
    /// Sorted by index, indices unique.
    pub values: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn dot_dense(&self, weights: &[f64]) -> f64 {
        self.values
            .iter()
            .map(|&(i, v)| weights[i as usize] * v)
            .sum()
    }

    /// Cosine similarity between two vectors of the same dimension.
    /// Both sides are already unit length, so this is a sparse dot product.
    pub fn cosine(&self, other: &FeatureVector) -> f64 {
        let mut a = self.values.iter().peekable();
        let mut b = other.values.iter().peekable();
        let mut dot = 0.0;
        while let (Some(&&(ia, va)), Some(&&(ib, vb))) = (a.peek(), b.peek()) {
            match ia.cmp(&ib) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    dot += va * vb;
                    a.next();
                    b.next();
                }
            }
        }
        dot
    }
}

// FNV-1a, hand-rolled so feature indices are stable across Rust versions.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn hashed_index(namespace: &str, token: &str, dims: usize) -> u32 {
    let mut buf = Vec::with_capacity(namespace.len() + token.len() + 1);
    buf.extend_from_slice(namespace.as_bytes());
    buf.push(0);
    buf.extend_from_slice(token.as_bytes());
    let slot = (fnv1a(&buf) as usize) % (dims - META_SLOTS) + META_SLOTS;
    slot as u32
}

fn add_text_features(
    counts: &mut BTreeMap<u32, f64>,
    namespace: &str,
    text: &str,
    dims: usize,
) {
    let lowered = text.to_lowercase();
    for word in lowered.split_whitespace() {
        counts
            .entry(hashed_index(&format!("{namespace}:w"), word, dims))
            .and_modify(|v| *v += 1.0)
            .or_insert(1.0);
    }
    let chars: Vec<char> = lowered.chars().collect();
    for n in 2..=4usize {
        if chars.len() < n {
            continue;
        }
        for window in chars.windows(n) {
            let gram: String = window.iter().collect();
            counts
                .entry(hashed_index(&format!("{namespace}:c{n}"), &gram, dims))
                .and_modify(|v| *v += 1.0)
                .or_insert(1.0);
        }
    }
}

/// Hashed character-n-gram and word features of query and answer in
/// separate namespaces, plus answer meta-features. L2-normalized.
pub fn featurize(query: &str, answer: &str) -> FeatureVector {
    featurize_with_dims(query, answer, DEFAULT_DIMS)
}

pub fn featurize_with_dims(query: &str, answer: &str, dims: usize) -> FeatureVector {
    assert!(dims > META_SLOTS);
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    add_text_features(&mut counts, "q", query, dims);
    add_text_features(&mut counts, "a", answer, dims);
    let answer_tokens = answer.split_whitespace().count();
    counts.insert(META_ANSWER_LEN as u32, (answer.chars().count() as f64).ln_1p());
    counts.insert(META_ANSWER_TOKENS as u32, (answer_tokens as f64).ln_1p());
    counts.insert(
        META_SINGLE_TOKEN as u32,
        if answer_tokens == 1 { 1.0 } else { 0.0 },
    );
    let mut values: Vec<(u32, f64)> = counts.into_iter().collect();
    let norm = values.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, v) in &mut values {
            *v /= norm;
        }
    }
    FeatureVector { dims, values }
}

/// Features of a bare text (used by the completion cache for similarity).
pub fn featurize_text(text: &str) -> FeatureVector {
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    add_text_features(&mut counts, "t", text, DEFAULT_DIMS);
    let mut values: Vec<(u32, f64)> = counts.into_iter().collect();
    let norm = values.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, v) in &mut values {
            *v /= norm;
        }
    }
    FeatureVector {
        dims: DEFAULT_DIMS,
        values,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train an extra head per llm_id in addition to the shared head.
    pub per_llm_heads: bool,
    pub dims: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.5,
            l2: 1e-6,
            batch_size: 32,
            seed: 0,
            per_llm_heads: false,
            dims: DEFAULT_DIMS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub n_examples: usize,
    /// Set when every training label was identical.
    pub degenerate_labels: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

const MODEL_FORMAT_VERSION: u32 = 1;

/// Trained logistic-regression scorer. Immutable once trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerModel {
    pub version: u32,
    pub dims: usize,
    pub shared: LinearHead,
    /// Optional per-LLM heads; the shared head is the fallback.
    pub per_llm: BTreeMap<String, LinearHead>,
    pub training_meta: TrainingMeta,
}

impl Scorer for ScorerModel {
    fn score(&self, query: &str, answer: &str, llm_id: &str) -> f64 {
        let head = self.per_llm.get(llm_id).unwrap_or(&self.shared);
        let fv = featurize_with_dims(query, answer, self.dims);
        sigmoid(fv.dot_dense(&head.weights) + head.bias)
    }
}

impl ScorerModel {
    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        let json = serde_json::to_string(self).expect("model serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ScorerModel, ScorerError> {
        let text = std::fs::read_to_string(path)?;
        let model: ScorerModel =
            serde_json::from_str(&text).map_err(|e| ScorerError::BadModelFile(e.to_string()))?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(ScorerError::BadModelFile(format!(
                "unsupported model version {}",
                model.version
            )));
        }
        if model.shared.weights.len() != model.dims {
            return Err(ScorerError::BadModelFile(
                "weight vector length does not match dims".into(),
            ));
        }
        Ok(model)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One training pair: (query, answer) -> correct?
struct Example {
    features: FeatureVector,
    label: f64,
    llm_id: String,
}

fn collect_examples(train: &Dataset, dims: usize) -> Vec<Example> {
    let mut examples = Vec::new();
    for rec in &train.records {
        for (llm_id, resp) in &rec.responses {
            examples.push(Example {
                features: featurize_with_dims(&rec.query_text, &resp.answer_text, dims),
                label: if is_correct(resp) { 1.0 } else { 0.0 },
                llm_id: llm_id.clone(),
            });
        }
    }
    examples
}

fn mean_loss(head: &LinearHead, examples: &[&Example], l2: f64) -> f64 {
    let n = examples.len() as f64;
    let mut loss = 0.0;
    for ex in examples {
        let z = ex.features.dot_dense(&head.weights) + head.bias;
        // log(1 + exp(-y*z)) with y in {-1, +1}, numerically stable
        let yz = if ex.label > 0.5 { z } else { -z };
        loss += if yz > 0.0 {
            (-yz).exp().ln_1p()
        } else {
            -yz + yz.exp().ln_1p()
        };
    }
    loss / n + 0.5 * l2 * head.weights.iter().map(|w| w * w).sum::<f64>()
}

fn fit_head(
    examples: &[&Example],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (LinearHead, f64, f64) {
    let mut head = LinearHead {
        weights: vec![0.0; config.dims],
        bias: 0.0,
    };
    let initial = mean_loss(&head, examples, config.l2);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let scale = config.learning_rate / batch.len() as f64;
            let mut bias_grad = 0.0;
            // accumulate sparse gradient contributions directly into weights
            let mut updates: Vec<(u32, f64)> = Vec::new();
            for &idx in batch {
                let ex = &examples[idx];
                let z = ex.features.dot_dense(&head.weights) + head.bias;
                let err = sigmoid(z) - ex.label;
                for &(i, v) in &ex.features.values {
                    updates.push((i, err * v));
                }
                bias_grad += err;
            }
            for (i, g) in updates {
                head.weights[i as usize] -= scale * g;
            }
            head.bias -= scale * bias_grad;
            if config.l2 > 0.0 {
                let decay = 1.0 - config.learning_rate * config.l2;
                for w in &mut head.weights {
                    *w *= decay;
                }
            }
        }
    }
    let final_loss = mean_loss(&head, examples, config.l2);
    (head, initial, final_loss)
}

/// Fit the logistic scorer by seeded mini-batch gradient descent.
pub fn train_scorer(train: &Dataset, config: &TrainConfig) -> Result<ScorerModel, ScorerError> {
    let examples = collect_examples(train, config.dims);
    if examples.is_empty() {
        return Err(ScorerError::EmptyTrainingSet);
    }
    let degenerate = examples.windows(2).all(|w| w[0].label == w[1].label);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let refs: Vec<&Example> = examples.iter().collect();
    let (shared, initial, final_loss) = fit_head(&refs, config, &mut rng);

    let mut per_llm = BTreeMap::new();
    if config.per_llm_heads {
        let mut by_llm: BTreeMap<&str, Vec<&Example>> = BTreeMap::new();
        for ex in &examples {
            by_llm.entry(&ex.llm_id).or_default().push(ex);
        }
        for (llm_id, exs) in by_llm {
            let (head, _, _) = fit_head(&exs, config, &mut rng);
            per_llm.insert(llm_id.to_string(), head);
        }
    }

    Ok(ScorerModel {
        version: MODEL_FORMAT_VERSION,
        dims: config.dims,
        shared,
        per_llm,
        training_meta: TrainingMeta {
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            l2: config.l2,
            seed: config.seed,
            initial_loss: initial,
            final_loss,
            n_examples: examples.len(),
            degenerate_labels: degenerate,
        },
    })
}

/// Compare the analytic gradient of the shared head's loss against central
/// finite differences. Returns the max relative error over sampled
/// coordinates (absolute error when the denominator vanishes).
pub fn gradient_check(model: &ScorerModel, sample: &Dataset, coords: usize) -> f64 {
    let examples = collect_examples(sample, model.dims);
    assert!(!examples.is_empty(), "gradient_check needs a non-empty sample");
    let refs: Vec<&Example> = examples.iter().collect();
    let l2 = model.training_meta.l2;

    // analytic gradient of the mean loss
    let n = refs.len() as f64;
    let mut grad = vec![0.0; model.dims];
    for ex in &refs {
        let z = ex.features.dot_dense(&model.shared.weights) + model.shared.bias;
        let err = sigmoid(z) - ex.label;
        for &(i, v) in &ex.features.values {
            grad[i as usize] += err * v / n;
        }
    }
    for (i, g) in grad.iter_mut().enumerate() {
        *g += l2 * model.shared.weights[i];
    }

    // probe the coordinates that actually carry features
    let mut active: Vec<u32> = refs
        .iter()
        .flat_map(|ex| ex.features.values.iter().map(|&(i, _)| i))
        .collect();
    active.sort_unstable();
    active.dedup();
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut head = model.shared.clone();
    for &i in active.iter().take(coords) {
        let orig = head.weights[i as usize];
        head.weights[i as usize] = orig + step;
        let plus = mean_loss(&head, &refs, l2);
        head.weights[i as usize] = orig - step;
        let minus = mean_loss(&head, &refs, l2);
        head.weights[i as usize] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grad[i as usize];
        let denom = analytic.abs().max(numeric.abs());
        let err = if denom > 1e-8 {
            (analytic - numeric).abs() / denom
        } else {
            (analytic - numeric).abs()
        };
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{LlmResponse, TraceRecord};
    use crate::cost::Usage;
    use std::collections::BTreeMap as Map;

    fn record(id: &str, q: &str, truth: &str, answers: &[(&str, &str)]) -> TraceRecord {
        let mut responses = Map::new();
        for (llm, ans) in answers {
            responses.insert(
                llm.to_string(),
                LlmResponse {
                    answer_text: ans.to_string(),
                    usage: Usage::new(10, 2),
                    reward: crate::trace::reward_exact_match(truth, ans),
                },
            );
        }
        TraceRecord {
            query_id: id.to_string(),
            query_text: q.to_string(),
            true_answer: truth.to_string(),
            responses,
        }
    }

    /// Separable toy set: correct answers contain token "yes", wrong ones "no".
    fn separable_dataset(n: usize) -> Dataset {
        let mut records = Vec::new();
        for i in 0..n {
            let truth = if i % 2 == 0 { "yes sir" } else { "fine" };
            let answer = if i % 3 == 0 { truth } else { "no way" };
            records.push(record(
                &format!("q{i}"),
                &format!("question number {i}"),
                truth,
                &[("m", answer)],
            ));
        }
        Dataset::full(records)
    }

    #[test]
    fn featurize_is_deterministic() {
        let a = featurize("what is up", "down");
        let b = featurize("what is up", "down");
        assert_eq!(a, b);
    }

    #[test]
    fn featurize_empty_has_only_meta() {
        let fv = featurize("", "");
        assert!(fv.values.iter().all(|&(i, _)| (i as usize) < META_SLOTS));
    }

    #[test]
    fn one_char_answer_difference_changes_vector() {
        let a = featurize("q", "answer alpha");
        let b = featurize("q", "answer alphb");
        assert_ne!(a, b);
    }

    #[test]
    fn zero_weight_model_scores_half() {
        let model = ScorerModel {
            version: 1,
            dims: 64,
            shared: LinearHead {
                weights: vec![0.0; 64],
                bias: 0.0,
            },
            per_llm: Map::new(),
            training_meta: TrainingMeta {
                epochs: 0,
                learning_rate: 0.0,
                l2: 0.0,
                seed: 0,
                initial_loss: 0.0,
                final_loss: 0.0,
                n_examples: 0,
                degenerate_labels: false,
            },
        };
        assert_eq!(model.score("any", "thing", "m"), 0.5);
        let s = model.score("x", "y", "m");
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn trains_to_perfect_accuracy_on_separable_set() {
        let data = separable_dataset(200);
        let config = TrainConfig {
            epochs: 50,
            dims: 1 << 12,
            ..TrainConfig::default()
        };
        let model = train_scorer(&data, &config).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for rec in &data.records {
            for (llm, resp) in &rec.responses {
                let s = model.score(&rec.query_text, &resp.answer_text, llm);
                let predicted = s >= 0.5;
                if predicted == is_correct(resp) {
                    correct += 1;
                }
                total += 1;
            }
        }
        assert_eq!(correct, total, "training accuracy must reach 1.0");
        assert!(model.training_meta.final_loss <= model.training_meta.initial_loss);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = separable_dataset(60);
        let config = TrainConfig {
            epochs: 5,
            dims: 1 << 10,
            ..TrainConfig::default()
        };
        let m1 = train_scorer(&data, &config).unwrap();
        let m2 = train_scorer(&data, &config).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn empty_training_set_errors() {
        let data = Dataset::full(vec![]);
        assert!(matches!(
            train_scorer(&data, &TrainConfig::default()),
            Err(ScorerError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn degenerate_labels_flagged() {
        let records = vec![
            record("a", "q1", "x", &[("m", "x")]),
            record("b", "q2", "y", &[("m", "y")]),
        ];
        let config = TrainConfig {
            epochs: 2,
            dims: 1 << 10,
            ..TrainConfig::default()
        };
        let model = train_scorer(&Dataset::full(records), &config).unwrap();
        assert!(model.training_meta.degenerate_labels);
    }

    #[test]
    fn gradient_check_small_error() {
        let data = separable_dataset(10);
        let config = TrainConfig {
            epochs: 3,
            dims: 1 << 10,
            ..TrainConfig::default()
        };
        let model = train_scorer(&data, &config).unwrap();
        let err = gradient_check(&model, &data, 20);
        assert!(err < 1e-4, "gradient check error {err} too large");
    }

    #[test]
    fn score_survives_reserialization() {
        let data = separable_dataset(40);
        let config = TrainConfig {
            epochs: 5,
            dims: 1 << 10,
            ..TrainConfig::default()
        };
        let model = train_scorer(&data, &config).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: ScorerModel = serde_json::from_str(&json).unwrap();
        assert_eq!(model, back);
        assert_eq!(
            model.score("question number 1", "no way", "m").to_bits(),
            back.score("question number 1", "no way", "m").to_bits()
        );
    }

    #[test]
    fn l2_bounds_weight_norm() {
        let data = separable_dataset(80);
        let l2 = 1e-3;
        let config = TrainConfig {
            epochs: 30,
            l2,
            dims: 1 << 10,
            ..TrainConfig::default()
        };
        let model = train_scorer(&data, &config).unwrap();
        // At any minimum, 0.5*l2*||w||^2 <= loss(0) = ln 2.
        let norm_sq: f64 = model.shared.weights.iter().map(|w| w * w).sum();
        let bound = 2.0 * (2.0f64).ln() / l2;
        assert!(norm_sq <= bound, "||w||^2 = {norm_sq} exceeds {bound}");
    }

    #[test]
    fn held_out_auc_high_on_separable_data() {
        let train = separable_dataset(200);
        let config = TrainConfig {
            epochs: 50,
            dims: 1 << 12,
            ..TrainConfig::default()
        };
        let model = train_scorer(&train, &config).unwrap();
        // fresh held-out records with the same generating rule
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for i in 1000..1200usize {
            let truth = if i % 2 == 0 { "yes sir" } else { "fine" };
            let answer = if i % 3 == 0 { truth } else { "no way" };
            let s = model.score(&format!("question number {i}"), answer, "m");
            if crate::trace::reward_exact_match(truth, answer) == 1.0 {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        let mut wins = 0.0;
        for &p in &pos {
            for &q in &neg {
                if p > q {
                    wins += 1.0;
                } else if p == q {
                    wins += 0.5;
                }
            }
        }
        let auc = wins / (pos.len() as f64 * neg.len() as f64);
        assert!(auc > 0.95, "AUC {auc} too low");
    }

    #[test]
    fn per_llm_heads_used_when_present() {
        let records = vec![
            record("a", "q1", "x", &[("m1", "x"), ("m2", "no")]),
            record("b", "q2", "y", &[("m1", "y"), ("m2", "no")]),
            record("c", "q3", "z", &[("m1", "no"), ("m2", "z")]),
        ];
        let config = TrainConfig {
            epochs: 10,
            dims: 1 << 10,
            per_llm_heads: true,
            ..TrainConfig::default()
        };
        let model = train_scorer(&Dataset::full(records), &config).unwrap();
        assert!(model.per_llm.contains_key("m1"));
        assert!(model.per_llm.contains_key("m2"));
        // per-llm head differs from shared on at least one input
        let q = "q1";
        let shared_only = ScorerModel {
            per_llm: Map::new(),
            ..model.clone()
        };
        assert_ne!(
            model.score(q, "x", "m1"),
            shared_only.score(q, "x", "m1")
        );
    }
}
