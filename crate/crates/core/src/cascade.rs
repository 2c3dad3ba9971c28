//! Cascade execution: call LLMs in order, score each answer, stop at the
//! first acceptance, account itemized cost.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{query_cost, CostError, Marketplace, Money, Usage};
use crate::providers::{CompletionRequest, ProviderError, ProviderRegistry};
use crate::scorer::Scorer;
use crate::trace::{Dataset, TraceRecord};

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("cascade list is empty")]
    EmptyList,
    #[error("cascade list longer than the configured maximum {max}")]
    TooLong { max: usize },
    #[error("cascade list repeats llm_id {0:?}")]
    RepeatedLlm(String),
    #[error("threshold {0} outside [0,1]")]
    BadThreshold(f64),
    #[error("thresholds length {thresholds} does not match list length {list}")]
    LengthMismatch { list: usize, thresholds: usize },
    #[error("trace record {query_id:?} has no response for llm {llm_id:?}")]
    MissingResponse { query_id: String, llm_id: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("all cascade steps failed; last: {0}")]
    AllStepsFailed(String),
    #[error("cascade config file: {0}")]
    BadConfigFile(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What to do when a provider fails mid-cascade.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Record the failure and try the next step; error only when no step
    /// produced an answer.
    #[default]
    Skip,
    /// Fail the whole route on the first provider error.
    Fail,
}

const CASCADE_FORMAT_VERSION: u32 = 1;

/// A learned cascade: ordered LLM list plus acceptance thresholds.
///
/// The final threshold is stored but inert: the last list element always
/// answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub version: u32,
    pub list: Vec<String>,
    pub thresholds: Vec<f64>,
    pub scorer_ref: String,
    pub budget: Money,
}

impl CascadeConfig {
    pub fn new(
        list: Vec<String>,
        thresholds: Vec<f64>,
        scorer_ref: &str,
        budget: Money,
    ) -> CascadeConfig {
        CascadeConfig {
            version: CASCADE_FORMAT_VERSION,
            list,
            thresholds,
            scorer_ref: scorer_ref.to_string(),
            budget,
        }
    }

    pub fn validate(&self, max_length: usize, registry: &Marketplace) -> Result<(), CascadeError> {
        if self.list.is_empty() {
            return Err(CascadeError::EmptyList);
        }
        if self.list.len() > max_length {
            return Err(CascadeError::TooLong { max: max_length });
        }
        if self.list.len() != self.thresholds.len() {
            return Err(CascadeError::LengthMismatch {
                list: self.list.len(),
                thresholds: self.thresholds.len(),
            });
        }
        for (i, id) in self.list.iter().enumerate() {
            if self.list[..i].contains(id) {
                return Err(CascadeError::RepeatedLlm(id.clone()));
            }
            registry.get(id)?;
        }
        for &t in &self.thresholds {
            if !(0.0..=1.0).contains(&t) {
                return Err(CascadeError::BadThreshold(t));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CascadeError> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("config serializes"),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CascadeConfig, CascadeError> {
        let text = std::fs::read_to_string(path)?;
        let config: CascadeConfig =
            serde_json::from_str(&text).map_err(|e| CascadeError::BadConfigFile(e.to_string()))?;
        if config.version != CASCADE_FORMAT_VERSION {
            return Err(CascadeError::BadConfigFile(format!(
                "unsupported version {}",
                config.version
            )));
        }
        Ok(config)
    }
}

/// One executed cascade step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteStep {
    pub llm_id: String,
    pub answer: String,
    pub score: f64,
    pub usage: Usage,
    pub cost: Money,
    pub accepted: bool,
    /// Set when the provider failed and the skip policy moved on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Result of executing a cascade on one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteOutcome {
    pub answer: String,
    /// 1-based position of the accepted step in the cascade list.
    pub stop_index: usize,
    pub per_step: Vec<RouteStep>,
    pub total_cost: Money,
    /// True when the answer came from the completion cache.
    #[serde(default)]
    pub cached: bool,
}

///// The stop rule: accept step i when score >= threshold_i, or
/// unconditionally at the last step.
fn accepts(score: f64, threshold: f64, is_last: bool) -> bool {
    is_last || score >= threshold
}

/// Execute the cascade against live providers. Costs are computed locally
/// from the marketplace pricing and each provider's reported usage.
pub fn route(
    config: &CascadeConfig,
    scorer: &dyn Scorer,
    providers: &ProviderRegistry,
    pricing: &Marketplace,
    query: &str,
    policy: FailurePolicy,
) -> Result<RouteOutcome, CascadeError> {
    let m = config.list.len();
    let mut per_step: Vec<RouteStep> = Vec::new();
    let mut total_cost = Money::ZERO;
    let mut last_failure = String::from("empty cascade");
    for (i, llm_id) in config.list.iter().enumerate() {
        let is_last = i + 1 == m;
        let provider = providers
            .get(llm_id)
            .ok_or_else(|| ProviderError::Unregistered(llm_id.clone()))?;
        let response = match provider.complete(&CompletionRequest::new(llm_id, query)) {
            Ok(r) => r,
            Err(e) => match policy {
                FailurePolicy::Fail => return Err(e.into()),
                FailurePolicy::Skip => {
                    last_failure = e.to_string();
                    per_step.push(RouteStep {
                        llm_id: llm_id.clone(),
                        answer: String::new(),
                        score: 0.0,
                        usage: Usage::default(),
                        cost: Money::ZERO,
                        accepted: false,
                        failure: Some(last_failure.clone()),
                    });
                    continue;
                }
            },
        };
        let cost = query_cost(&pricing.get(llm_id)?.pricing, response.usage)?;
        total_cost = total_cost.checked_add(cost)?;
        let score = scorer.score(query, &response.text, llm_id);
        let accepted = accepts(score, config.thresholds[i], is_last);
        per_step.push(RouteStep {
            llm_id: llm_id.clone(),
            answer: response.text,
            score,
            usage: response.usage,
            cost,
            accepted,
            failure: None,
        });
        if accepted {
            return Ok(outcome_from_steps(per_step, total_cost));
        }
    }
    // Reaching here means the final step failed (a successful final step
    // always accepts); under the skip policy that is still a route error.
    Err(CascadeError::AllStepsFailed(last_failure))
}

fn outcome_from_steps(per_step: Vec<RouteStep>, total_cost: Money) -> RouteOutcome {
    let stop = per_step
        .iter()
        .rposition(|s| s.accepted)
        .expect("an accepted step exists");
    RouteOutcome {
        answer: per_step[stop].answer.clone(),
        stop_index: stop + 1,
        per_step,
        total_cost,
        cached: false,
    }
}

/// Execute the cascade's acceptance logic against recorded responses.
/// Bit-identical outcome for identical inputs.
pub fn replay_route(
    config: &CascadeConfig,
    scorer: &dyn Scorer,
    pricing: &Marketplace,
    record: &TraceRecord,
) -> Result<RouteOutcome, CascadeError> {
    let m = config.list.len();
    let mut per_step: Vec<RouteStep> = Vec::new();
    let mut total_cost = Money::ZERO;
    for (i, llm_id) in config.list.iter().enumerate() {
        let is_last = i + 1 == m;
        let resp = record
            .response(llm_id)
            .ok_or_else(|| CascadeError::MissingResponse {
                query_id: record.query_id.clone(),
                llm_id: llm_id.clone(),
            })?;
        let cost = query_cost(&pricing.get(llm_id)?.pricing, resp.usage)?;
        total_cost = total_cost.checked_add(cost)?;
        let score = scorer.score(&record.query_text, &resp.answer_text, llm_id);
        let accepted = accepts(score, config.thresholds[i], is_last);
        per_step.push(RouteStep {
            llm_id: llm_id.clone(),
            answer: resp.answer_text.clone(),
            score,
            usage: resp.usage,
            cost,
            accepted,
            failure: None,
        });
        if accepted {
            break;
        }
    }
    Ok(outcome_from_steps(per_step, total_cost))
}

/// Per-query outcome paired with the reward of the routed answer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: String,
    pub stop_index: usize,
    pub answer_llm: String,
    pub reward: f64,
    pub cost: Money,
}

/// Dataset-level evaluation. Mean cost is kept exact as (total, count).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_reward: f64,
    pub total_cost: Money,
    pub n: usize,
    pub per_query: Vec<QueryEval>,
}

impl EvalReport {
    /// Mean cost rounded down to nano-USD, for display.
    pub fn mean_cost(&self) -> Money {
        Money::from_nano_usd(self.total_cost.nano_usd() / self.n as i64)
    }

    /// Exact check: mean cost <= budget, i.e. total <= budget * n.
    pub fn mean_cost_within(&self, budget: Money) -> bool {
        i128::from(self.total_cost.nano_usd()) <= i128::from(budget.nano_usd()) * self.n as i128
    }
}

/// Replay the cascade over a dataset; exact cost accounting throughout.
pub fn evaluate_cascade(
    config: &CascadeConfig,
    scorer: &dyn Scorer,
    pricing: &Marketplace,
    dataset: &Dataset,
) -> Result<EvalReport, CascadeError> {
    if dataset.is_empty() {
        return Err(CascadeError::EmptyDataset);
    }
    let mut total_cost = Money::ZERO;
    let mut reward_sum = 0.0;
    let mut per_query = Vec::with_capacity(dataset.len());
    for record in &dataset.records {
        let outcome = replay_route(config, scorer, pricing, record)?;
        let answer_llm = outcome.per_step[outcome.stop_index - 1].llm_id.clone();
        let reward = record
            .response(&answer_llm)
            .map(|r| r.reward)
            .unwrap_or(0.0);
        total_cost = total_cost.checked_add(outcome.total_cost)?;
        reward_sum += reward;
        per_query.push(QueryEval {
            query_id: record.query_id.clone(),
            stop_index: outcome.stop_index,
            answer_llm,
            reward,
            cost: outcome.total_cost,
        });
    }
    Ok(EvalReport {
        mean_reward: reward_sum / dataset.len() as f64,
        total_cost,
        n: dataset.len(),
        per_query,
    })
}
