//! Learn (list, thresholds) maximizing expected reward under the budget:
//! disagreement-based list pruning, quantile-grid threshold search, an
//! optional subsample-then-rerank pass, and an exhaustive oracle used to
//! validate the fast path.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{evaluate_cascade, CascadeConfig, CascadeError};
use crate::cost::{query_cost, CostError, Marketplace, Money};
use crate::scorer::Scorer;
use crate::trace::{is_correct, Dataset};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("marketplace registry is empty")]
    EmptyRegistry,
    #[error("no records cover both {0:?} and {1:?}")]
    NoCommonRecords(String, String),
    #[error("budget must be positive")]
    NonPositiveBudget,
    #[error("invalid optimizer config: {0}")]
    BadConfig(String),
    #[error("oracle guard exceeded: {0}")]
    OracleGuard(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Maximum cascade length m.
    pub max_length: usize,
    pub budget: Money,
    /// Number of score-quantile grid points per position; {0,1} are always
    /// added on top.
    pub threshold_grid: usize,
    /// Lists whose every adjacent pair disagrees less than this are pruned.
    pub disagreement_floor: f64,
    /// Optional first-pass fraction of the train split; 1.0 disables it.
    pub subsample: f64,
    /// How many top candidates survive the first pass for full re-evaluation.
    pub rerank_top: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn new(budget: Money) -> OptimizerConfig {
        OptimizerConfig {
            max_length: 3,
            budget,
            threshold_grid: 17,
            disagreement_floor: 0.02,
            subsample: 1.0,
            rerank_top: 20,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), OptimizerError> {
        if self.max_length < 1 {
            return Err(OptimizerError::BadConfig("max_length must be >= 1".into()));
        }
        if self.threshold_grid < 2 {
            return Err(OptimizerError::BadConfig(
                "threshold_grid must be >= 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.disagreement_floor) {
            return Err(OptimizerError::BadConfig(
                "disagreement_floor must be in [0,1]".into(),
            ));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(OptimizerError::BadConfig(
                "subsample must be in (0,1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    pub lists_enumerated: usize,
    pub lists_pruned: usize,
    pub grid_points_evaluated: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerResult {
    pub best: CascadeConfig,
    pub train_mean_reward: f64,
    /// Exact total over the train split; mean = total / n_train.
    pub train_total_cost: Money,
    pub n_train: usize,
    pub feasible: bool,
    pub search_stats: SearchStats,
}

impl OptimizerResult {
    pub fn train_mean_cost(&self) -> Money {
        Money::from_nano_usd(self.train_total_cost.nano_usd() / self.n_train as i64)
    }
}

/// Fraction of records (covering both LLMs) where exactly one of the two is
/// correct. Records missing either LLM are excluded.
pub fn pairwise_disagreement(
    dataset: &Dataset,
    llm_a: &str,
    llm_b: &str,
) -> Result<f64, OptimizerError> {
    let mut common = 0usize;
    let mut differing = 0usize;
    for rec in &dataset.records {
        let (Some(a), Some(b)) = (rec.response(llm_a), rec.response(llm_b)) else {
            continue;
        };
        common += 1;
        if is_correct(a) != is_correct(b) {
            differing += 1;
        }
    }
    if common == 0 {
        return Err(OptimizerError::NoCommonRecords(
            llm_a.to_string(),
            llm_b.to_string(),
        ));
    }
    Ok(differing as f64 / common as f64)
}

/// All ordered repeat-free lists of length 1..=m over the registry, with
/// lists of length >= 2 dropped when every adjacent pair disagrees less
/// than the floor. Singletons are never pruned.
pub fn enumerate_lists(
    registry: &Marketplace,
    dataset: &Dataset,
    config: &OptimizerConfig,
) -> Result<(Vec<Vec<String>>, SearchStats), OptimizerError> {
    if registry.is_empty() {
        return Err(OptimizerError::EmptyRegistry);
    }
    let ids = registry.llm_ids();
    // disagreement per unordered pair, computed once
    let mut disagreement: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..ids.len() {
        for j in (i + 1)..ids.len() {
            disagreement.insert((i, j), pairwise_disagreement(dataset, &ids[i], &ids[j])?);
        }
    }
    let pair = |a: usize, b: usize| -> f64 {
        let key = if a < b { (a, b) } else { (b, a) };
        disagreement[&key]
    };

    let mut lists = Vec::new();
    let mut stats = SearchStats::default();
    let mut current: Vec<usize> = Vec::new();
    fn extend(
        ids: &[String],
        current: &mut Vec<usize>,
        max_len: usize,
        out: &mut Vec<Vec<usize>>,
    ) {
        if !current.is_empty() {
            out.push(current.clone());
        }
        if current.len() == max_len {
            return;
        }
        for k in 0..ids.len() {
            if current.contains(&k) {
                continue;
            }
            current.push(k);
            extend(ids, current, max_len, out);
            current.pop();
        }
    }
    let mut raw: Vec<Vec<usize>> = Vec::new();
    extend(&ids, &mut current, config.max_length, &mut raw);
    // depth-first order is deterministic but interleaves lengths; sort by
    // (length, lexicographic ids) for a stable, readable order
    raw.sort_by(|a, b| {
        a.len()
            .cmp(&b.len())
            .then_with(|| key_of(a, &ids).cmp(&key_of(b, &ids)))
    });
    for list in raw {
        stats.lists_enumerated += 1;
        if list.len() >= 2 {
            let all_low = list
                .windows(2)
                .all(|w| pair(w[0], w[1]) < config.disagreement_floor);
            if all_low {
                stats.lists_pruned += 1;
                continue;
            }
        }
        lists.push(list.iter().map(|&k| ids[k].clone()).collect());
    }
    Ok((lists, stats))
}

fn key_of(list: &[usize], ids: &[String]) -> Vec<String> {
    list.iter().map(|&k| ids[k].clone()).collect()
}

/// Threshold grid for one LLM: `g` empirical score quantiles union {0,1},
/// sorted and deduplicated.
pub fn threshold_grid(scores: &[f64], g: usize) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut grid = vec![0.0, 1.0];
    if !sorted.is_empty() {
        for j in 0..g {
            // nearest-rank quantile at j/(g-1)
            let q = j as f64 / (g - 1).max(1) as f64;
            let idx = ((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
            grid.push(sorted[idx]);
        }
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    grid
}

/// Dense per-record tables the grid search walks.
struct EvalTables {
    /// scores[r][k]
    scores: Vec<Vec<f64>>,
    /// costs[r][k] in nano-USD
    costs: Vec<Vec<i64>>,
    /// rewards[r][k]
    rewards: Vec<Vec<f64>>,
    ids: Vec<String>,
}

fn build_tables(
    train: &Dataset,
    scorer: &dyn Scorer,
    registry: &Marketplace,
) -> Result<EvalTables, OptimizerError> {
    let ids = registry.llm_ids();
    let mut scores = Vec::with_capacity(train.len());
    let mut costs = Vec::with_capacity(train.len());
    let mut rewards = Vec::with_capacity(train.len());
    for rec in &train.records {
        let mut s_row = Vec::with_capacity(ids.len());
        let mut c_row = Vec::with_capacity(ids.len());
        let mut r_row = Vec::with_capacity(ids.len());
        for id in &ids {
            let resp = rec.response(id).ok_or_else(|| {
                OptimizerError::Cascade(CascadeError::MissingResponse {
                    query_id: rec.query_id.clone(),
                    llm_id: id.clone(),
                })
            })?;
            s_row.push(scorer.score(&rec.query_text, &resp.answer_text, id));
            c_row.push(query_cost(&registry.get(id)?.pricing, resp.usage)?.nano_usd());
            r_row.push(resp.reward);
        }
        scores.push(s_row);
        costs.push(c_row);
        rewards.push(r_row);
    }
    Ok(EvalTables {
        scores,
        costs,
        rewards,
        ids,
    })
}

/// A fully evaluated candidate, kept comparable by the deterministic
/// tie-break chain: reward desc, cost asc, shorter list, lexicographic ids,
/// lexicographic thresholds.
#[derive(Clone, Debug)]
struct Candidate {
    list: Vec<usize>,
    thresholds: Vec<f64>,
    reward_sum: f64,
    cost_sum: i128,
}

impl Candidate {
    fn better_than(&self, other: &Candidate, tables: &EvalTables) -> bool {
        if self.reward_sum != other.reward_sum {
            return self.reward_sum > other.reward_sum;
        }
        if self.cost_sum != other.cost_sum {
            return self.cost_sum < other.cost_sum;
        }
        if self.list.len() != other.list.len() {
            return self.list.len() < other.list.len();
        }
        let a_ids = key_of(&self.list, &tables.ids);
        let b_ids = key_of(&other.list, &tables.ids);
        if a_ids != b_ids {
            return a_ids < b_ids;
        }
        for (a, b) in self.thresholds.iter().zip(&other.thresholds) {
            if a != b {
                return a < b;
            }
        }
        false
    }

    fn cheaper_than(&self, other: &Candidate, tables: &EvalTables) -> bool {
        if self.cost_sum != other.cost_sum {
            return self.cost_sum < other.cost_sum;
        }
        self.better_than(other, tables)
    }
}

/// Walk the stop rule over a set of record indices; returns (reward sum,
/// exact cost sum).
fn evaluate_on(
    tables: &EvalTables,
    records: &[usize],
    list: &[usize],
    thresholds: &[f64],
) -> (f64, i128) {
    let m = list.len();
    let mut reward_sum = 0.0;
    let mut cost_sum: i128 = 0;
    for &r in records {
        let scores = &tables.scores[r];
        let costs = &tables.costs[r];
        let mut stop = m - 1;
        for i in 0..m {
            if i + 1 == m || scores[list[i]] >= thresholds[i] {
                stop = i;
                break;
            }
        }
        for &k in &list[..=stop] {
            cost_sum += i128::from(costs[k]);
        }
        reward_sum += tables.rewards[r][list[stop]];
    }
    (reward_sum, cost_sum)
}

fn feasible(cost_sum: i128, budget: Money, n: usize) -> bool {
    cost_sum <= i128::from(budget.nano_usd()) * n as i128
}

/// Cartesian product of the per-position grids for the first m-1 positions;
/// the final threshold is inert and fixed at 0.
fn threshold_combos(grids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = grids.len();
    if m == 1 {
        return vec![vec![0.0]];
    }
    let mut combos: Vec<Vec<f64>> = vec![vec![]];
    for grid in &grids[..m - 1] {
        let mut next = Vec::with_capacity(combos.len() * grid.len());
        for combo in &combos {
            for &t in grid {
                let mut c = combo.clone();
                c.push(t);
                next.push(c);
            }
        }
        combos = next;
    }
    for combo in &mut combos {
        combo.push(0.0);
    }
    combos
}

fn result_from(
    best: &Candidate,
    tables: &EvalTables,
    config: &OptimizerConfig,
    n: usize,
    stats: SearchStats,
    scorer_ref: &str,
) -> OptimizerResult {
    let is_feasible = feasible(best.cost_sum, config.budget, n);
    OptimizerResult {
        best: CascadeConfig::new(
            key_of(&best.list, &tables.ids),
            best.thresholds.clone(),
            scorer_ref,
            config.budget,
        ),
        train_mean_reward: best.reward_sum / n as f64,
        train_total_cost: Money::from_nano_usd(best.cost_sum as i64),
        n_train: n,
        feasible: is_feasible,
        search_stats: stats,
    }
}

/// Grid search over candidate lists and per-position threshold grids.
///
/// Returns the feasible configuration maximizing train mean reward, or the
/// cheapest configuration flagged infeasible when the budget admits none.
pub fn optimize(
    train: &Dataset,
    scorer: &dyn Scorer,
    registry: &Marketplace,
    config: &OptimizerConfig,
) -> Result<OptimizerResult, OptimizerError> {
    config.validate()?;
    if train.is_empty() {
        return Err(OptimizerError::EmptyTrainSet);
    }
    if config.budget.nano_usd() <= 0 {
        return Err(OptimizerError::NonPositiveBudget);
    }
    let tables = build_tables(train, scorer, registry)?;
    let (lists, mut stats) = enumerate_lists(registry, train, config)?;
    let id_index: BTreeMap<&str, usize> = tables
        .ids
        .iter()
        .enumerate()
        .map(|(k, id)| (id.as_str(), k))
        .collect();
    let lists: Vec<Vec<usize>> = lists
        .iter()
        .map(|l| l.iter().map(|id| id_index[id.as_str()]).collect())
        .collect();

    let grids: Vec<Vec<f64>> = (0..tables.ids.len())
        .map(|k| {
            let scores: Vec<f64> = tables.scores.iter().map(|row| row[k]).collect();
            threshold_grid(&scores, config.threshold_grid)
        })
        .collect();

    let n = train.len();
    let full: Vec<usize> = (0..n).collect();
    let first_pass: Vec<usize> = if config.subsample < 1.0 {
        let take = ((n as f64 * config.subsample).ceil() as usize).clamp(1, n);
        let mut order = full.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        order.shuffle(&mut rng);
        let mut picked = order[..take].to_vec();
        picked.sort_unstable();
        picked
    } else {
        full.clone()
    };

    // Pass 1: evaluate every (list, tau) on the first-pass records.
    let mut candidates: Vec<Candidate> = Vec::new();
    for list in &lists {
        let position_grids: Vec<Vec<f64>> = list.iter().map(|&k| grids[k].clone()).collect();
        for thresholds in threshold_combos(&position_grids) {
            stats.grid_points_evaluated += 1;
            let (reward_sum, cost_sum) = evaluate_on(&tables, &first_pass, list, &thresholds);
            candidates.push(Candidate {
                list: list.clone(),
                thresholds,
                reward_sum,
                cost_sum,
            });
        }
    }

    let pick_best = |cands: &[Candidate], records: &[usize]| -> Candidate {
        let n_here = records.len();
        let mut best_feasible: Option<&Candidate> = None;
        let mut cheapest: Option<&Candidate> = None;
        for cand in cands {
            if feasible(cand.cost_sum, config.budget, n_here)
                && best_feasible.is_none_or(|b| cand.better_than(b, &tables))
            {
                best_feasible = Some(cand);
            }
            if cheapest.is_none_or(|b| cand.cheaper_than(b, &tables)) {
                cheapest = Some(cand);
            }
        }
        best_feasible.or(cheapest).expect("candidates non-empty").clone()
    };

    let winner = if config.subsample < 1.0 && first_pass.len() < n {
        // Rerank: keep the top-T by the same total order (feasible ones
        // first), re-evaluate on the full split, choose among those.
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = feasible(candidates[a].cost_sum, config.budget, first_pass.len());
            let fb = feasible(candidates[b].cost_sum, config.budget, first_pass.len());
            fb.cmp(&fa).then_with(|| {
                if candidates[a].better_than(&candidates[b], &tables) {
                    std::cmp::Ordering::Less
                } else if candidates[b].better_than(&candidates[a], &tables) {
                    std::cmp::Ordering::Greater
                } else {
                    std::cmp::Ordering::Equal
                }
            })
        });
        let top: Vec<Candidate> = order
            .iter()
            .take(config.rerank_top.max(1))
            .map(|&i| {
                let c = &candidates[i];
                let (reward_sum, cost_sum) = evaluate_on(&tables, &full, &c.list, &c.thresholds);
                stats.grid_points_evaluated += 1;
                Candidate {
                    list: c.list.clone(),
                    thresholds: c.thresholds.clone(),
                    reward_sum,
                    cost_sum,
                }
            })
            .collect();
        pick_best(&top, &full)
    } else {
        pick_best(&candidates, &full)
    };

    Ok(result_from(&winner, &tables, config, n, stats, "scorer"))
}

/// Memoizes scores so the exhaustive oracle stays tractable without
/// touching its evaluation path.
struct MemoScorer<'a> {
    inner: &'a dyn Scorer,
    cache: Mutex<BTreeMap<(String, String, String), f64>>,
}

impl Scorer for MemoScorer<'_> {
    fn score(&self, query: &str, answer: &str, llm_id: &str) -> f64 {
        let key = (query.to_string(), answer.to_string(), llm_id.to_string());
        if let Some(&v) = self.cache.lock().unwrap().get(&key) {
            return v;
        }
        let v = self.inner.score(query, answer, llm_id);
        self.cache.lock().unwrap().insert(key, v);
        v
    }
}

/// Exhaustive search over the same grid with no pruning and no subsampling,
/// evaluated through the cascade engine's replay path. Validates `optimize`.
pub fn brute_force_oracle(
    train: &Dataset,
    scorer: &dyn Scorer,
    registry: &Marketplace,
    config: &OptimizerConfig,
) -> Result<OptimizerResult, OptimizerError> {
    if registry.len() > 5 || train.len() > 500 {
        return Err(OptimizerError::OracleGuard(format!(
            "K={} (max 5), n={} (max 500)",
            registry.len(),
            train.len()
        )));
    }
    if train.is_empty() {
        return Err(OptimizerError::EmptyTrainSet);
    }
    if config.budget.nano_usd() <= 0 {
        return Err(OptimizerError::NonPositiveBudget);
    }
    let memo = MemoScorer {
        inner: scorer,
        cache: Mutex::new(BTreeMap::new()),
    };
    let ids = registry.llm_ids();
    let n = train.len();

    // same grid definition as optimize, computed through the engine path
    let mut grids: Vec<Vec<f64>> = Vec::new();
    for id in &ids {
        let mut scores = Vec::with_capacity(n);
        for rec in &train.records {
            let resp = rec.response(id).ok_or_else(|| {
                OptimizerError::Cascade(CascadeError::MissingResponse {
                    query_id: rec.query_id.clone(),
                    llm_id: id.clone(),
                })
            })?;
            scores.push(memo.score(&rec.query_text, &resp.answer_text, id));
        }
        grids.push(threshold_grid(&scores, config.threshold_grid));
    }

    // all ordered repeat-free lists, no pruning
    fn all_lists(k: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        fn extend(k: usize, current: &mut Vec<usize>, max_len: usize, out: &mut Vec<Vec<usize>>) {
            if !current.is_empty() {
                out.push(current.clone());
            }
            if current.len() == max_len {
                return;
            }
            for i in 0..k {
                if current.contains(&i) {
                    continue;
                }
                current.push(i);
                extend(k, current, max_len, out);
                current.pop();
            }
        }
        extend(k, &mut current, max_len, &mut out);
        out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        out
    }

    let mut stats = SearchStats::default();
    let mut best: Option<(CascadeConfig, f64, i128, Vec<usize>, Vec<f64>)> = None;
    let mut cheapest: Option<(CascadeConfig, f64, i128, Vec<usize>, Vec<f64>)> = None;
    let budget_total = i128::from(config.budget.nano_usd()) * n as i128;

    for list in all_lists(ids.len(), config.max_length) {
        stats.lists_enumerated += 1;
        let list_ids: Vec<String> = list.iter().map(|&k| ids[k].clone()).collect();
        let position_grids: Vec<Vec<f64>> = list.iter().map(|&k| grids[k].clone()).collect();
        for thresholds in threshold_combos(&position_grids) {
            stats.grid_points_evaluated += 1;
            let cascade = CascadeConfig::new(
                list_ids.clone(),
                thresholds.clone(),
                "scorer",
                config.budget,
            );
            let report = evaluate_cascade(&cascade, &memo, registry, train)?;
            let reward_sum = report.mean_reward * n as f64;
            let cost_sum = i128::from(report.total_cost.nano_usd());
            let entry = (cascade, reward_sum, cost_sum, list.clone(), thresholds);
            if cost_sum <= budget_total
                && better_entry(&entry, best.as_ref(), &ids)
            {
                best = Some(entry.clone());
            }
            if cheaper_entry(&entry, cheapest.as_ref(), &ids) {
                cheapest = Some(entry);
            }
        }
    }

    let (cascade, reward_sum, cost_sum, ..) = best.or(cheapest).expect("candidates exist");
    let is_feasible = cost_sum <= budget_total;
    Ok(OptimizerResult {
        best: cascade,
        train_mean_reward: reward_sum / n as f64,
        train_total_cost: Money::from_nano_usd(cost_sum as i64),
        n_train: n,
        feasible: is_feasible,
        search_stats: stats,
    })
}

type Entry = (CascadeConfig, f64, i128, Vec<usize>, Vec<f64>);

fn entry_beats(a: &Entry, b: &Entry) -> bool {
    let (ca, ra, costa, la, ta) = (&a.0, a.1, a.2, &a.3, &a.4);
    let (cb, rb, costb, lb, tb) = (&b.0, b.1, b.2, &b.3, &b.4);
    if ra != rb {
        return ra > rb;
    }
    if costa != costb {
        return costa < costb;
    }
    if la.len() != lb.len() {
        return la.len() < lb.len();
    }
    if ca.list != cb.list {
        return ca.list < cb.list;
    }
    for (x, y) in ta.iter().zip(tb) {
        if x != y {
            return x < y;
        }
    }
    false
}

fn better_entry(candidate: &Entry, incumbent: Option<&Entry>, _ids: &[String]) -> bool {
    match incumbent {
        None => true,
        Some(b) => entry_beats(candidate, b),
    }
}

fn cheaper_entry(candidate: &Entry, incumbent: Option<&Entry>, _ids: &[String]) -> bool {
    match incumbent {
        None => true,
        Some(b) => {
            if candidate.2 != b.2 {
                candidate.2 < b.2
            } else {
                entry_beats(candidate, b)
            }
        }
    }
}
