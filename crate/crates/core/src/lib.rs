//! Budget-aware LLM cascades: learn which ordered list of models to call,
//! and with which acceptance thresholds, so answer quality is maximized
//! while expected dollar cost stays under a budget. Cascades run offline
//! against labeled traces or online through an HTTP gateway.
//!
//! Modules, bottom-up:
//! - [`cost`]: fixed-point money (nano-USD) and per-query pricing
//! - [`trace`]: labeled trace ingestion, reward functions, synthesis
//! - [`scorer`]: hashed-feature logistic regression answer scorer
//! - [`cascade`]: the routing engine and its stop rule
//! - [`optimizer`]: constrained search over lists and thresholds
//! - [`approx`]: completion cache, query concatenation, prompt selection
//! - [`analysis`]: MPI, budget sweeps, savings reports
//! - [`providers`]: mock / trace-replay / HTTP provider clients
//! - [`gateway`]: the serving layer with exact budget accounting

pub mod analysis;
pub mod approx;
pub mod cascade;
pub mod cost;
pub mod gateway;
pub mod optimizer;
pub mod providers;
pub mod scorer;
pub mod trace;

pub use cascade::{evaluate_cascade, replay_route, route, CascadeConfig, RouteOutcome};
pub use cost::{format_money, parse_money, query_cost, Marketplace, Money, PricingPlan, Usage};
pub use optimizer::{brute_force_oracle, optimize, OptimizerConfig, OptimizerResult};
pub use scorer::{train_scorer, Scorer, ScorerModel};
pub use trace::{load_trace, save_trace, split_trace, Dataset, RewardFn, TraceRecord};
