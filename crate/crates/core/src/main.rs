use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use frugal::analysis::{
    budget_sweep, cost_savings_report, mpi_matrix, render_savings, write_frontier_csv,
    write_mpi_csv, write_savings_csv,
};
use frugal::approx::CompletionCache;
use frugal::cascade::{evaluate_cascade, route, CascadeConfig, FailurePolicy};
use frugal::cost::{format_money, parse_money, parse_pricing_table, Marketplace, ProviderKind};
use frugal::gateway::{serve, GatewayConfig};
use frugal::optimizer::{optimize, OptimizerConfig};
use frugal::providers::{HttpProvider, MockProvider, MockRule, ProviderRegistry, TraceReplayProvider};
use frugal::scorer::{train_scorer, ScorerModel, TrainConfig};
use frugal::trace::{
    load_trace, save_trace, split_trace, synthesize_trace, Dataset, RewardFn, SyntheticSpec,
    TraceRecord,
};

#[derive(Parser)]
#[command(name = "frugal", version, about = "Budget-aware LLM cascade toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RewardArg {
    Exact,
    F1,
}

impl From<RewardArg> for RewardFn {
    fn from(r: RewardArg) -> RewardFn {
        match r {
            RewardArg::Exact => RewardFn::ExactMatch,
            RewardArg::F1 => RewardFn::TokenF1,
        }
    }
}

#[derive(Args)]
struct TraceArgs {
    /// Line-delimited JSON trace file.
    #[arg(long)]
    trace: PathBuf,
    /// Line-delimited JSON marketplace (pricing) file.
    #[arg(long)]
    marketplace: PathBuf,
    /// Reward function used to relabel responses.
    #[arg(long, value_enum, default_value = "exact")]
    reward: RewardArg,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a trace against a marketplace, or synthesize one.
    Ingest {
        #[command(flatten)]
        common: TraceArgs,
        /// Write the normalized trace here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Synthesize the trace from this spec instead of reading --trace.
        #[arg(long)]
        synthesize: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the answer scorer on a trace.
    TrainScorer {
        #[command(flatten)]
        common: TraceArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        /// Also fit one head per LLM on top of the shared head.
        #[arg(long)]
        per_llm_heads: bool,
    },
    /// Search for the best cascade under a budget.
    Optimize {
        #[command(flatten)]
        common: TraceArgs,
        /// Trained scorer model file.
        #[arg(long)]
        scorer: PathBuf,
        /// Mean per-query budget in USD, e.g. 0.00002.
        #[arg(long)]
        budget: String,
        #[arg(long, default_value_t = 3)]
        max_length: usize,
        #[arg(long, default_value_t = 17)]
        grid: usize,
        #[arg(long, default_value_t = 0.02)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        subsample: f64,
        #[arg(long, default_value_t = 20)]
        rerank_top: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Held-out fraction; the search runs on the rest.
        #[arg(long, default_value_t = 0.3)]
        test_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a cascade config over a trace and report reward and cost.
    Evaluate {
        #[command(flatten)]
        common: TraceArgs,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        cascade: PathBuf,
    },
    /// Optimize across a list of budgets; write frontier and savings CSVs.
    Sweep {
        #[command(flatten)]
        common: TraceArgs,
        #[arg(long)]
        scorer: PathBuf,
        /// Comma-separated USD budgets, e.g. 0.00001,0.00002,0.00005.
        #[arg(long)]
        budgets: String,
        /// Single-LLM baseline for the savings report.
        #[arg(long)]
        baseline: String,
        #[arg(long, default_value_t = 3)]
        max_length: usize,
        #[arg(long, default_value_t = 17)]
        grid: usize,
        #[arg(long, default_value_t = 0.02)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        test_fraction: f64,
        /// Directory for frontier.csv and savings.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Marginal pairwise improvement matrix over all LLM pairs.
    Mpi {
        #[command(flatten)]
        common: TraceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Route one query through a cascade (replaying providers from the trace).
    Route {
        #[command(flatten)]
        common: TraceArgs,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        cascade: PathBuf,
        #[arg(long)]
        query: String,
    },
    /// Start the HTTP gateway.
    Serve {
        /// GatewayConfig JSON file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        marketplace: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        /// Trace file backing replay providers (required unless every
        /// marketplace entry is kind mock or http).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "exact")]
        reward: RewardArg,
    },
    /// Print completion-cache statistics.
    CacheStats {
        /// Cache log file.
        #[arg(long)]
        cache: PathBuf,
    },
}

/// Exit codes: 0 ok, 2 usage, 3 data, 4 provider.
enum CliError {
    Usage(String),
    Data(String),
    Provider(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Provider(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Provider(m) => m,
        }
    }
}

fn data_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_market(path: &Path) -> Result<Marketplace, CliError> {
    parse_pricing_table(path).map_err(data_err)
}

fn load_records(common: &TraceArgs, market: &Marketplace) -> Result<Vec<TraceRecord>, CliError> {
    let loaded = load_trace(&common.trace, market, common.reward.into()).map_err(data_err)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(loaded.records)
}

/// Build providers per the marketplace's declared kinds. Replay providers
/// need the trace records; http providers read FRUGAL_* env vars.
fn build_providers(
    market: &Marketplace,
    records: Option<&[TraceRecord]>,
) -> Result<ProviderRegistry, CliError> {
    let mut registry: ProviderRegistry = BTreeMap::new();
    for spec in market.providers() {
        let provider: Box<dyn frugal::providers::Provider> = match spec.provider_kind {
            ProviderKind::Mock => Box::new(MockProvider::new(&spec.llm_id, MockRule::LastWord)),
            ProviderKind::TraceReplay => {
                let records = records.ok_or_else(|| {
                    CliError::Usage(format!(
                        "llm '{}' is kind trace_replay but no --trace was given",
                        spec.llm_id
                    ))
                })?;
                Box::new(TraceReplayProvider::from_records(&spec.llm_id, records))
            }
            ProviderKind::Http => Box::new(
                HttpProvider::from_env(&spec.llm_id)
                    .map_err(|e| CliError::Provider(e.to_string()))?,
            ),
        };
        registry.insert(spec.llm_id.clone(), provider);
    }
    Ok(registry)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest { common, out, synthesize, seed } => {
            let market = load_market(&common.marketplace)?;
            let records = match synthesize {
                Some(spec_path) => {
                    let text = std::fs::read_to_string(&spec_path).map_err(data_err)?;
                    let spec: SyntheticSpec = serde_json::from_str(&text).map_err(data_err)?;
                    for llm in &spec.llms {
                        if !market.contains(&llm.llm_id) {
                            return Err(CliError::Data(format!(
                                "synthetic llm '{}' missing from marketplace",
                                llm.llm_id
                            )));
                        }
                    }
                    synthesize_trace(&spec, seed).map_err(data_err)?
                }
                None => load_records(&common, &market)?,
            };
            println!(
                "{} records across {} llms",
                records.len(),
                market.len()
            );
            if let Some(out) = out {
                save_trace(&out, &records).map_err(data_err)?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
        Command::TrainScorer { common, out, seed, epochs, per_llm_heads } => {
            let market = load_market(&common.marketplace)?;
            let records = load_records(&common, &market)?;
            let dataset = Dataset::full(records);
            let config = TrainConfig {
                epochs,
                seed,
                per_llm_heads,
                ..TrainConfig::default()
            };
            let model = train_scorer(&dataset, &config).map_err(data_err)?;
            println!(
                "trained on {} examples: loss {:.4} -> {:.4}",
                model.training_meta.n_examples,
                model.training_meta.initial_loss,
                model.training_meta.final_loss
            );
            model.save(&out).map_err(data_err)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Optimize {
            common, scorer, budget, max_length, grid, delta, subsample, rerank_top, seed,
            test_fraction, out,
        } => {
            let market = load_market(&common.marketplace)?;
            let records = load_records(&common, &market)?;
            let model = ScorerModel::load(&scorer).map_err(data_err)?;
            let budget = parse_money(&budget)
                .map_err(|e| CliError::Usage(format!("--budget: {e}")))?;
            let (train, test) = split_trace(records, test_fraction, seed).map_err(data_err)?;
            let cfg = OptimizerConfig {
                max_length,
                budget,
                threshold_grid: grid,
                disagreement_floor: delta,
                subsample,
                rerank_top,
                seed,
            };
            let result = optimize(&train, &model, &market, &cfg).map_err(data_err)?;
            let test_report = evaluate_cascade(&result.best, &model, &market, &test)
                .map_err(data_err)?;
            println!(
                "best cascade: [{}] thresholds [{}]",
                result.best.list.join(", "),
                result
                    .best
                    .thresholds
                    .iter()
                    .map(|t| format!("{t:.4}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            println!(
                "train: reward {:.4}, mean cost {} (feasible: {})",
                result.train_mean_reward,
                format_money(result.train_mean_cost()),
                result.feasible
            );
            println!(
                "test:  reward {:.4}, mean cost {}",
                test_report.mean_reward,
                format_money(test_report.mean_cost())
            );
            result.best.save(&out).map_err(data_err)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Evaluate { common, scorer, cascade } => {
            let market = load_market(&common.marketplace)?;
            let records = load_records(&common, &market)?;
            let model = ScorerModel::load(&scorer).map_err(data_err)?;
            let config = CascadeConfig::load(&cascade).map_err(data_err)?;
            let dataset = Dataset::full(records);
            let report = evaluate_cascade(&config, &model, &market, &dataset).map_err(data_err)?;
            println!(
                "n {}  mean reward {:.4}  mean cost {}  total cost {}  within budget: {}",
                report.n,
                report.mean_reward,
                format_money(report.mean_cost()),
                format_money(report.total_cost),
                report.mean_cost_within(config.budget)
            );
            Ok(())
        }
        Command::Sweep {
            common, scorer, budgets, baseline, max_length, grid, delta, seed, test_fraction,
            out_dir,
        } => {
            let market = load_market(&common.marketplace)?;
            let records = load_records(&common, &market)?;
            let model = ScorerModel::load(&scorer).map_err(data_err)?;
            let budget_list: Vec<_> = budgets
                .split(',')
                .map(|s| parse_money(s.trim()))
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Usage(format!("--budgets: {e}")))?;
            if !market.contains(&baseline) {
                return Err(CliError::Usage(format!(
                    "--baseline '{baseline}' missing from marketplace"
                )));
            }
            let (train, test) = split_trace(records, test_fraction, seed).map_err(data_err)?;
            let base_cfg = OptimizerConfig {
                max_length,
                threshold_grid: grid,
                disagreement_floor: delta,
                seed,
                ..OptimizerConfig::new(frugal::cost::Money::ZERO)
            };
            let frontier = budget_sweep(&train, &test, &model, &market, &base_cfg, &budget_list)
                .map_err(data_err)?;
            let savings = cost_savings_report(&test, &model, &market, &frontier, &baseline)
                .map_err(data_err)?;
            std::fs::create_dir_all(&out_dir).map_err(data_err)?;
            write_frontier_csv(&out_dir.join("frontier.csv"), &frontier).map_err(data_err)?;
            write_savings_csv(&out_dir.join("savings.csv"), std::slice::from_ref(&savings))
                .map_err(data_err)?;
            println!("{}", render_savings(&savings));
            println!("wrote {}", out_dir.join("frontier.csv").display());
            println!("wrote {}", out_dir.join("savings.csv").display());
            Ok(())
        }
        Command::Mpi { common, out } => {
            let market = load_market(&common.marketplace)?;
            let records = load_records(&common, &market)?;
            let dataset = Dataset::full(records);
            let ids = market.llm_ids();
            let matrix = mpi_matrix(&dataset, &ids).map_err(data_err)?;
            write_mpi_csv(&out, &matrix).map_err(data_err)?;
            println!("wrote {} ({} cells)", out.display(), matrix.len());
            Ok(())
        }
        Command::Route { common, scorer, cascade, query } => {
            let market = load_market(&common.marketplace)?;
            let records = load_records(&common, &market)?;
            let model = ScorerModel::load(&scorer).map_err(data_err)?;
            let config = CascadeConfig::load(&cascade).map_err(data_err)?;
            let providers = build_providers(&market, Some(&records))?;
            let outcome = route(&config, &model, &providers, &market, &query, FailurePolicy::Skip)
                .map_err(|e| CliError::Provider(e.to_string()))?;
            println!(
                "answer: {}\nllm: {}  stop index: {}  cost: {}",
                outcome.answer,
                outcome.per_step[outcome.stop_index - 1].llm_id,
                outcome.stop_index,
                format_money(outcome.total_cost)
            );
            Ok(())
        }
        Command::Serve { config, marketplace, scorer, trace, reward } => {
            let market = load_market(&marketplace)?;
            let model = ScorerModel::load(&scorer).map_err(data_err)?;
            let text = std::fs::read_to_string(&config).map_err(data_err)?;
            let gw_config: GatewayConfig = serde_json::from_str(&text).map_err(data_err)?;
            let records = match trace {
                Some(path) => {
                    let loaded =
                        load_trace(&path, &market, reward.into()).map_err(data_err)?;
                    Some(loaded.records)
                }
                None => None,
            };
            let providers = build_providers(&market, records.as_deref())?;
            let handle = serve(gw_config, Box::new(model), providers, market)
                .map_err(|e| CliError::Provider(e.to_string()))?;
            println!("listening on {}", handle.addr());
            // serve until interrupted
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        Command::CacheStats { cache } => {
            let cache = CompletionCache::open(&cache).map_err(data_err)?;
            let (entries, hits, stored_cost) = cache.stats();
            println!(
                "entries {entries}  hits {hits}  stored cost {}",
                format_money(stored_cost)
            );
            Ok(())
        }
    }
}
