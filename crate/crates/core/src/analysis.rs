//! Post-hoc analysis: marginal pairwise improvement, budget sweeps, and the
//! cost-savings report, plus CSV emission for each.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{evaluate_cascade, CascadeConfig, CascadeError};
use crate::cost::{format_money, Marketplace, Money};
use crate::optimizer::{optimize, OptimizerConfig, OptimizerError, OptimizerResult};
use crate::scorer::Scorer;
use crate::trace::{is_correct, Dataset};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("llm '{0}' absent from the trace")]
    UnknownLlm(String),
    #[error("no singleton fits any budget in the sweep")]
    EmptyFrontier,
    #[error("llms '{0}' and '{1}' share no records")]
    NoCommonRecords(String, String),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Maximum performance improvement of LLM a over LLM b: the fraction of
/// common records where a's binarized reward is 1 while b's is 0. Stored
/// as integer counts so the ratio is exact. The denominator is every
/// record answered by both (not just b's failures) — the counting base
/// used throughout the reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpiCell {
    pub improved: u64,
    pub total: u64,
}

impl MpiCell {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.improved as f64 / self.total as f64
        }
    }
}

pub fn mpi(dataset: &Dataset, llm_a: &str, llm_b: &str) -> Result<MpiCell, AnalysisError> {
    let mut seen_a = false;
    let mut seen_b = false;
    let mut improved = 0u64;
    let mut total = 0u64;
    for rec in &dataset.records {
        let a = rec.response(llm_a);
        let b = rec.response(llm_b);
        seen_a |= a.is_some();
        seen_b |= b.is_some();
        let (Some(a), Some(b)) = (a, b) else { continue };
        total += 1;
        if is_correct(a) && !is_correct(b) {
            improved += 1;
        }
    }
    if !seen_a {
        return Err(AnalysisError::UnknownLlm(llm_a.to_string()));
    }
    if !seen_b {
        return Err(AnalysisError::UnknownLlm(llm_b.to_string()));
    }
    if total == 0 {
        return Err(AnalysisError::NoCommonRecords(
            llm_a.to_string(),
            llm_b.to_string(),
        ));
    }
    Ok(MpiCell { improved, total })
}

/// Full MPI matrix, zero on the diagonal. The (row, col) entry is the MPI
/// of the column LLM with respect to the row LLM: how often the column is
/// right where the row is wrong.
pub fn mpi_matrix(
    dataset: &Dataset,
    llm_ids: &[String],
) -> Result<BTreeMap<(String, String), MpiCell>, AnalysisError> {
    let mut out = BTreeMap::new();
    for row in llm_ids {
        for col in llm_ids {
            let cell = if row == col {
                MpiCell { improved: 0, total: 0 }
            } else {
                mpi(dataset, col, row)?
            };
            out.insert((row.clone(), col.clone()), cell);
        }
    }
    Ok(out)
}

/// One optimized point on the budget/reward frontier.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub budget: Money,
    pub config: CascadeConfig,
    pub train_mean_reward: f64,
    pub train_total_cost: Money,
    pub test_mean_reward: f64,
    pub test_total_cost: Money,
    pub n_train: usize,
    pub n_test: usize,
    pub feasible: bool,
}

/// Run the optimizer once per budget and evaluate each winner on the test
/// split. Budgets are processed in the order given.
pub fn budget_sweep(
    train: &Dataset,
    test: &Dataset,
    scorer: &dyn Scorer,
    registry: &Marketplace,
    base: &OptimizerConfig,
    budgets: &[Money],
) -> Result<Vec<FrontierPoint>, AnalysisError> {
    let mut points = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let mut cfg = base.clone();
        cfg.budget = budget;
        let result: OptimizerResult = optimize(train, scorer, registry, &cfg)?;
        let test_report = evaluate_cascade(&result.best, scorer, registry, test)?;
        points.push(FrontierPoint {
            budget,
            config: result.best,
            train_mean_reward: result.train_mean_reward,
            train_total_cost: result.train_total_cost,
            test_mean_reward: test_report.mean_reward,
            test_total_cost: test_report.total_cost,
            n_train: result.n_train,
            n_test: test_report.n,
            feasible: result.feasible,
        });
    }
    Ok(points)
}

/// How the frontier compares against always calling one fixed model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavingsReport {
    pub baseline_llm: String,
    pub baseline_mean_reward: f64,
    pub baseline_total_cost: Money,
    /// Cheapest frontier point whose test reward matches or beats the
    /// baseline; None when nothing on the frontier matches.
    pub matching_point: Option<FrontierPoint>,
    /// 1 - matching_cost / baseline_cost over the test split, when a match
    /// exists.
    pub cost_savings: Option<f64>,
}

/// Compare the frontier against the single-LLM baseline on the test split.
pub fn cost_savings_report(
    test: &Dataset,
    scorer: &dyn Scorer,
    registry: &Marketplace,
    frontier: &[FrontierPoint],
    baseline_llm: &str,
) -> Result<SavingsReport, AnalysisError> {
    let baseline_cfg = CascadeConfig::new(
        vec![baseline_llm.to_string()],
        vec![0.0],
        "baseline",
        Money::ZERO,
    );
    let baseline = evaluate_cascade(&baseline_cfg, scorer, registry, test)?;
    let mut matching: Option<&FrontierPoint> = None;
    for point in frontier {
        if !point.feasible || point.test_mean_reward < baseline.mean_reward {
            continue;
        }
        if matching.map_or(true, |m| {
            point.test_total_cost.nano_usd() < m.test_total_cost.nano_usd()
        }) {
            matching = Some(point);
        }
    }
    let cost_savings = matching.map(|m| {
        if baseline.total_cost.nano_usd() == 0 {
            0.0
        } else {
            1.0 - m.test_total_cost.nano_usd() as f64 / baseline.total_cost.nano_usd() as f64
        }
    });
    Ok(SavingsReport {
        baseline_llm: baseline_llm.to_string(),
        baseline_mean_reward: baseline.mean_reward,
        baseline_total_cost: baseline.total_cost,
        matching_point: matching.cloned(),
        cost_savings,
    })
}

/// mpi.csv: row_llm,col_llm,improved,total,mpi
pub fn write_mpi_csv(
    path: &Path,
    matrix: &BTreeMap<(String, String), MpiCell>,
) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row_llm", "col_llm", "improved", "total", "mpi"])?;
    for ((i, j), cell) in matrix {
        w.write_record([
            i.as_str(),
            j.as_str(),
            &cell.improved.to_string(),
            &cell.total.to_string(),
            &format!("{:.6}", cell.value()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// frontier.csv: budget_usd,train_reward,train_cost_usd,test_reward,test_cost_usd,feasible,list,thresholds
pub fn write_frontier_csv(path: &Path, frontier: &[FrontierPoint]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "budget_usd",
        "train_reward",
        "train_cost_usd",
        "test_reward",
        "test_cost_usd",
        "feasible",
        "list",
        "thresholds",
    ])?;
    for p in frontier {
        let thresholds: Vec<String> =
            p.config.thresholds.iter().map(|t| format!("{t:.6}")).collect();
        w.write_record([
            &format_money(p.budget),
            &format!("{:.6}", p.train_mean_reward),
            &format_money(p.train_total_cost),
            &format!("{:.6}", p.test_mean_reward),
            &format_money(p.test_total_cost),
            &p.feasible.to_string(),
            &p.config.list.join("|"),
            &thresholds.join("|"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// savings.csv: one row per report.
pub fn write_savings_csv(path: &Path, reports: &[SavingsReport]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "baseline_llm",
        "baseline_reward",
        "baseline_cost_usd",
        "match_budget_usd",
        "match_reward",
        "match_cost_usd",
        "savings",
    ])?;
    for r in reports {
        match (&r.matching_point, r.cost_savings) {
            (Some(p), Some(s)) => w.write_record([
                r.baseline_llm.as_str(),
                &format!("{:.6}", r.baseline_mean_reward),
                &format_money(r.baseline_total_cost),
                &format_money(p.budget),
                &format!("{:.6}", p.test_mean_reward),
                &format_money(p.test_total_cost),
                &format!("{s:.6}"),
            ])?,
            _ => w.write_record([
                r.baseline_llm.as_str(),
                &format!("{:.6}", r.baseline_mean_reward),
                &format_money(r.baseline_total_cost),
                "no_match",
                "no_match",
                "no_match",
                "no_match",
            ])?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Human-readable savings summary used by the CLI.
pub fn render_savings(report: &SavingsReport) -> String {
    match (&report.matching_point, report.cost_savings) {
        (Some(p), Some(s)) => format!(
            "baseline {} reward {:.4} cost {} -> cascade at budget {} reward {:.4} cost {} (savings {:.1}%)",
            report.baseline_llm,
            report.baseline_mean_reward,
            format_money(report.baseline_total_cost),
            format_money(p.budget),
            p.test_mean_reward,
            format_money(p.test_total_cost),
            s * 100.0,
        ),
        _ => format!(
            "baseline {} reward {:.4} cost {}: no frontier point matches the baseline reward",
            report.baseline_llm,
            report.baseline_mean_reward,
            format_money(report.baseline_total_cost),
        ),
    }
}
