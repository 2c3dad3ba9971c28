//! HTTP gateway: routes live queries through a learned cascade with exact
//! running budget accounting.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tiny_http::{Header, Method, Response, Server};

use crate::approx::CompletionCache;
use crate::cascade::{route, CascadeConfig, FailurePolicy};
use crate::cost::{format_money, query_cost, Marketplace, Money, Usage};
use crate::providers::ProviderRegistry;
use crate::scorer::Scorer;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("max_concurrency must be >= 1")]
    ZeroConcurrency,
    #[error("strict mode needs at least one cascade llm priced in the marketplace")]
    NoSingleton,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Running spend. `spent` is the exact sum of served total_costs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LedgerSnapshot {
    pub spent: Money,
    pub served: u64,
}

pub struct BudgetLedger {
    budget: Money,
    inner: Mutex<LedgerSnapshot>,
}

impl BudgetLedger {
    pub fn new(budget: Money) -> BudgetLedger {
        BudgetLedger {
            budget,
            inner: Mutex::new(LedgerSnapshot::default()),
        }
    }

    pub fn budget(&self) -> Money {
        self.budget
    }

    /// Atomic per-query update: spent += cost, served += 1.
    pub fn record(&self, cost: Money) -> LedgerSnapshot {
        let mut inner = self.inner.lock().unwrap();
        inner.spent = inner
            .spent
            .checked_add(cost)
            .expect("ledger total within money bounds");
        inner.served += 1;
        *inner
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        *self.inner.lock().unwrap()
    }

    /// Mean cost per served query, rounded down to a nano-USD.
    pub fn mean_cost(&self) -> Money {
        let s = self.snapshot();
        if s.served == 0 {
            Money::ZERO
        } else {
            Money::from_nano_usd(s.spent.nano_usd() / s.served as i64)
        }
    }

    /// Exact integer check: spent > budget * served.
    pub fn over_budget(&self) -> bool {
        let s = self.snapshot();
        s.spent.nano_usd() as i128 > self.budget.nano_usd() as i128 * s.served as i128
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub cascade: CascadeConfig,
    #[serde(default)]
    pub cache_enabled: bool,
    /// Cosine threshold for approximate cache hits; 1.0 = exact only.
    #[serde(default = "default_cache_threshold")]
    pub cache_threshold: f64,
    #[serde(default = "default_listen")]
    pub listen_address: String,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    /// When true and the rolling mean exceeds the budget, requests shed to
    /// the cheapest singleton in the cascade list.
    #[serde(default)]
    pub strict: bool,
}

fn default_cache_threshold() -> f64 {
    1.0
}
fn default_listen() -> String {
    "127.0.0.1:0".to_string()
}
fn default_concurrency() -> usize {
    4
}

#[derive(Deserialize)]
struct RouteBody {
    query: String,
}

#[derive(Serialize)]
struct RouteReply {
    answer: String,
    llm_used: String,
    stop_index: usize,
    cost_usd: String,
    cached: bool,
}

#[derive(Serialize)]
struct StatsReply {
    served: u64,
    spent_usd: String,
    mean_cost_usd: String,
    budget_usd: String,
    over_budget: bool,
}

#[derive(Serialize)]
struct ErrorReply {
    error: String,
}

struct Shared {
    config: GatewayConfig,
    scorer: Box<dyn Scorer + Send + Sync>,
    providers: ProviderRegistry,
    pricing: Marketplace,
    ledger: BudgetLedger,
    cache: CompletionCache,
    /// Pre-built shed target for strict mode.
    cheapest_singleton: CascadeConfig,
}

/// A running gateway. Dropping it (or calling shutdown) stops the workers.
pub struct GatewayHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
    shared: Arc<Shared>,
}

impl GatewayHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn ledger_snapshot(&self) -> LedgerSnapshot {
        self.shared.ledger.snapshot()
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Cheapest cascade member by cost of a nominal request, ties by id.
fn cheapest_singleton(
    cascade: &CascadeConfig,
    pricing: &Marketplace,
) -> Result<CascadeConfig, GatewayError> {
    let nominal = Usage::new(1000, 100);
    let mut best: Option<(Money, &String)> = None;
    for llm_id in &cascade.list {
        let Ok(spec) = pricing.get(llm_id) else { continue };
        let Ok(cost) = query_cost(&spec.pricing, nominal) else { continue };
        if best.map_or(true, |(c, _)| cost.nano_usd() < c.nano_usd()) {
            best = Some((cost, llm_id));
        }
    }
    let (_, llm_id) = best.ok_or(GatewayError::NoSingleton)?;
    Ok(CascadeConfig::new(
        vec![llm_id.clone()],
        vec![0.0],
        &cascade.scorer_ref,
        cascade.budget,
    ))
}

pub fn serve(
    config: GatewayConfig,
    scorer: Box<dyn Scorer + Send + Sync>,
    providers: ProviderRegistry,
    pricing: Marketplace,
) -> Result<GatewayHandle, GatewayError> {
    if config.max_concurrency < 1 {
        return Err(GatewayError::ZeroConcurrency);
    }
    let server = Server::http(&config.listen_address)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::AddrInUse, e.to_string()))?;
    let addr = match server.server_addr() {
        tiny_http::ListenAddr::IP(a) => a,
        #[allow(unreachable_patterns)]
        _ => unreachable!("gateway listens on IP sockets"),
    };
    let shed = cheapest_singleton(&config.cascade, &pricing)?;
    let shared = Arc::new(Shared {
        ledger: BudgetLedger::new(config.cascade.budget),
        cache: CompletionCache::in_memory(),
        cheapest_singleton: shed,
        config,
        scorer,
        providers,
        pricing,
    });
    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));
    let mut workers = Vec::new();
    for _ in 0..shared.config.max_concurrency {
        let server = Arc::clone(&server);
        let stop = Arc::clone(&stop);
        let shared = Arc::clone(&shared);
        workers.push(std::thread::spawn(move || loop {
            if stop.load(Ordering::SeqCst) {
                return;
            }
            match server.recv_timeout(Duration::from_millis(25)) {
                Ok(Some(req)) => handle(req, &shared),
                Ok(None) => {}
                Err(_) => return,
            }
        }));
    }
    Ok(GatewayHandle {
        addr,
        stop,
        workers,
        shared,
    })
}

fn json_response<T: Serialize>(status: u32, body: &T) -> Response<std::io::Cursor<Vec<u8>>> {
    let data = serde_json::to_vec(body).expect("reply serializes");
    Response::from_data(data)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").unwrap())
}

fn handle(mut req: tiny_http::Request, shared: &Shared) {
    let url = req.url().to_string();
    let method = req.method().clone();
    let response = match (method, url.as_str()) {
        (Method::Get, "/v1/healthz") => json_response(200, &serde_json::json!({"status": "ok"})),
        (Method::Get, "/v1/stats") => {
            let snap = shared.ledger.snapshot();
            json_response(
                200,
                &StatsReply {
                    served: snap.served,
                    spent_usd: format_money(snap.spent),
                    mean_cost_usd: format_money(shared.ledger.mean_cost()),
                    budget_usd: format_money(shared.ledger.budget()),
                    over_budget: shared.ledger.over_budget(),
                },
            )
        }
        (Method::Post, "/v1/route") => {
            let mut body = String::new();
            if req.as_reader().read_to_string(&mut body).is_err() {
                json_response(400, &ErrorReply { error: "unreadable body".into() })
            } else {
                match serde_json::from_str::<RouteBody>(&body) {
                    Err(e) => json_response(400, &ErrorReply { error: format!("bad request: {e}") }),
                    Ok(parsed) => route_query(&parsed.query, shared),
                }
            }
        }
        _ => json_response(404, &ErrorReply { error: "not found".into() }),
    };
    let _ = req.respond(response);
}

fn route_query(query: &str, shared: &Shared) -> Response<std::io::Cursor<Vec<u8>>> {
    if shared.config.cache_enabled {
        if let Some(entry) = shared.cache.lookup(query, shared.config.cache_threshold) {
            shared.ledger.record(Money::ZERO);
            return json_response(
                200,
                &RouteReply {
                    answer: entry.answer_text,
                    llm_used: entry.llm_id,
                    stop_index: 0,
                    cost_usd: format_money(Money::ZERO),
                    cached: true,
                },
            );
        }
    }
    let cascade = if shared.config.strict && shared.ledger.over_budget() {
        &shared.cheapest_singleton
    } else {
        &shared.config.cascade
    };
    match route(
        cascade,
        shared.scorer.as_ref(),
        &shared.providers,
        &shared.pricing,
        query,
        FailurePolicy::Skip,
    ) {
        Err(e) => json_response(502, &ErrorReply { error: format!("downstream: {e}") }),
        Ok(outcome) => {
            let llm_used = outcome.per_step[outcome.stop_index - 1].llm_id.clone();
            if shared.config.cache_enabled {
                let _ = shared
                    .cache
                    .insert(query, &outcome.answer, &llm_used, outcome.total_cost);
            }
            shared.ledger.record(outcome.total_cost);
            json_response(
                200,
                &RouteReply {
                    answer: outcome.answer,
                    llm_used,
                    stop_index: outcome.stop_index,
                    cost_usd: format_money(outcome.total_cost),
                    cached: false,
                },
            )
        }
    }
}
