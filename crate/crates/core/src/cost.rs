//! Fixed-point cost accounting for LLM API calls.
//!
//! All currency amounts are integer counts of nano-USD (10^-9 USD). The
//! three-component price structure is: a per-input-token rate, a
//! per-output-token rate, and a fixed fee per request.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nano-USD per USD.
pub const NANO_PER_USD: i64 = 1_000_000_000;

/// Any amount must stay strictly below this bound after every operation.
/// Exclusive bound on |nano-USD| values.
pub const MONEY_BOUND: i64 = 1 << 62;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("money arithmetic overflow (misconfigured pricing?)")]
    Overflow,
    #[error("cannot parse money value {0:?}: {1}")]
    ParseMoney(String, String),
    #[error("marketplace line {line}: {msg}")]
    Marketplace { line: usize, msg: String },
    #[error("duplicate llm_id {0:?} in marketplace")]
    DuplicateLlm(String),
    #[error("negative rate for llm_id {0:?}")]
    NegativeRate(String),
    #[error("unknown llm_id {0:?}")]
    UnknownLlm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An exact amount of money, stored as nano-USD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money {
    nano_usd: i64,
}

impl Money {
    pub const ZERO: Money = Money { nano_usd: 0 };

    pub fn from_nano_usd(nano_usd: i64) -> Money {
        Money { nano_usd }
    }

    pub fn nano_usd(self) -> i64 {
        self.nano_usd
    }

    /// Approximate dollar value, for display only. Never used in accounting.
    pub fn as_usd_f64(self) -> f64 {
        self.nano_usd as f64 / NANO_PER_USD as f64
    }

    pub fn checked_add(self, other: Money) -> Result<Money, CostError> {
        let sum = self
            .nano_usd
            .checked_add(other.nano_usd)
            .ok_or(CostError::Overflow)?;
        bounded(sum)
    }

    pub fn checked_mul(self, count: u32) -> Result<Money, CostError> {
        let product = self
            .nano_usd
            .checked_mul(i64::from(count))
            .ok_or(CostError::Overflow)?;
        bounded(product)
    }

    pub fn is_negative(self) -> bool {
        self.nano_usd < 0
    }
}

fn bounded(nano: i64) -> Result<Money, CostError> {
    if nano.unsigned_abs() >= MONEY_BOUND as u64 {
        return Err(CostError::Overflow);
    }
    Ok(Money { nano_usd: nano })
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_money(*self))
    }
}

// Money crosses every file format and API boundary as a decimal USD string.
impl Serialize for Money {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_money(*self))
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Money, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_money(&s).map_err(serde::de::Error::custom)
    }
}

/// Render as a decimal USD string with up to 9 fractional digits and no
/// precision loss. Round-trips through [`parse_money`].
pub fn format_money(m: Money) -> String {
    let negative = m.nano_usd < 0;
    let abs = m.nano_usd.unsigned_abs();
    let whole = abs / NANO_PER_USD as u64;
    let frac = abs % NANO_PER_USD as u64;
    let mut s = String::new();
    if negative {
        s.push('-');
    }
    s.push_str(&whole.to_string());
    if frac != 0 {
        let digits = format!("{frac:09}");
        s.push('.');
        s.push_str(digits.trim_end_matches('0'));
    }
    s
}

/// Parse a decimal USD string (at most 9 fractional digits) exactly.
pub fn parse_money(s: &str) -> Result<Money, CostError> {
    let err = |msg: &str| CostError::ParseMoney(s.to_string(), msg.to_string());
    let t = s.trim();
    if t.is_empty() {
        return Err(err("empty string"));
    }
    let (negative, t) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t),
    };
    let (whole, frac) = match t.split_once('.') {
        Some((w, f)) => (w, f),
        None => (t, ""),
    };
    if whole.is_empty() && frac.is_empty() {
        return Err(err("no digits"));
    }
    if frac.len() > 9 {
        return Err(err("more than 9 fractional digits"));
    }
    if !whole.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
        return Err(err("non-digit character"));
    }
    let whole: i64 = if whole.is_empty() {
        0
    } else {
        whole.parse().map_err(|_| err("whole part out of range"))?
    };
    let mut frac_nano: i64 = 0;
    for (i, c) in frac.chars().enumerate() {
        frac_nano += (c as i64 - '0' as i64) * 10i64.pow(8 - i as u32);
    }
    let nano = whole
        .checked_mul(NANO_PER_USD)
        .and_then(|w| w.checked_add(frac_nano))
        .ok_or(CostError::Overflow)?;
    bounded(if negative { -nano } else { nano })
}

/// Per-token and per-request rates for one LLM API.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricingPlan {
    /// Nano-USD per input token.
    pub input_rate: Money,
    /// Nano-USD per output token.
    pub output_rate: Money,
    /// Nano-USD per request, independent of length.
    pub fixed_per_request: Money,
}

impl PricingPlan {
    pub fn new(input_rate: Money, output_rate: Money, fixed_per_request: Money) -> PricingPlan {
        PricingPlan {
            input_rate,
            output_rate,
            fixed_per_request,
        }
    }

    pub fn free() -> PricingPlan {
        PricingPlan::new(Money::ZERO, Money::ZERO, Money::ZERO)
    }

    fn validate(&self, llm_id: &str) -> Result<(), CostError> {
        if self.input_rate.is_negative()
            || self.output_rate.is_negative()
            || self.fixed_per_request.is_negative()
        {
            return Err(CostError::NegativeRate(llm_id.to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    TraceReplay,
    Http,
}

impl Default for ProviderKind {
    fn default() -> Self {
        ProviderKind::TraceReplay
    }
}

/// One registered LLM API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub llm_id: String,
    pub display_name: String,
    pub pricing: PricingPlan,
    #[serde(default)]
    pub provider_kind: ProviderKind,
}

/// Token counts for one request/response pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u32,
    pub output_tokens: u32,
}

impl Usage {
    pub fn new(input_tokens: u32, output_tokens: u32) -> Usage {
        Usage {
            input_tokens,
            output_tokens,
        }
    }
}

/// Exact cost of one call: output·output_rate + input·input_rate + fixed.
pub fn query_cost(plan: &PricingPlan, usage: Usage) -> Result<Money, CostError> {
    plan.output_rate
        .checked_mul(usage.output_tokens)?
        .checked_add(plan.input_rate.checked_mul(usage.input_tokens)?)?
        .checked_add(plan.fixed_per_request)
}

/// The registry of available LLM APIs with their pricing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Marketplace {
    providers: BTreeMap<String, ProviderSpec>,
}

impl Marketplace {
    pub fn new() -> Marketplace {
        Marketplace::default()
    }

    pub fn insert(&mut self, spec: ProviderSpec) -> Result<(), CostError> {
        spec.pricing.validate(&spec.llm_id)?;
        if self.providers.contains_key(&spec.llm_id) {
            return Err(CostError::DuplicateLlm(spec.llm_id));
        }
        self.providers.insert(spec.llm_id.clone(), spec);
        Ok(())
    }

    pub fn get(&self, llm_id: &str) -> Result<&ProviderSpec, CostError> {
        self.providers
            .get(llm_id)
            .ok_or_else(|| CostError::UnknownLlm(llm_id.to_string()))
    }

    pub fn contains(&self, llm_id: &str) -> bool {
        self.providers.contains_key(llm_id)
    }

    /// Providers in llm_id order.
    pub fn providers(&self) -> impl Iterator<Item = &ProviderSpec> {
        self.providers.values()
    }

    pub fn llm_ids(&self) -> Vec<String> {
        self.providers.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.providers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.providers.is_empty()
    }
}

/// One line of the marketplace file. Dollar figures are decimal strings;
/// token rates are quoted per 10M tokens, as provider price sheets do.
#[derive(Debug, Serialize, Deserialize)]
struct MarketplaceRow {
    llm_id: String,
    provider: String,
    input_usd_per_10m: String,
    output_usd_per_10m: String,
    fixed_usd_per_request: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<ProviderKind>,
}

const TOKENS_PER_RATE_UNIT: i64 = 10_000_000;

fn per_token_rate(usd_per_10m: &str, line: usize) -> Result<Money, CostError> {
    let total = parse_money(usd_per_10m)?;
    let nano = total.nano_usd();
    if nano % TOKENS_PER_RATE_UNIT != 0 {
        return Err(CostError::Marketplace {
            line,
            msg: format!("rate {usd_per_10m} per 10M tokens is not a whole nano-USD per token"),
        });
    }
    Ok(Money::from_nano_usd(nano / TOKENS_PER_RATE_UNIT))
}

/// Parse a line-delimited marketplace file into a registry.
pub fn parse_pricing_table(path: &Path) -> Result<Marketplace, CostError> {
    let text = std::fs::read_to_string(path)?;
    parse_pricing_str(&text)
}

pub fn parse_pricing_str(text: &str) -> Result<Marketplace, CostError> {
    let mut market = Marketplace::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: MarketplaceRow =
            serde_json::from_str(line).map_err(|e| CostError::Marketplace {
                line: line_no,
                msg: e.to_string(),
            })?;
        let spec = ProviderSpec {
            llm_id: row.llm_id.clone(),
            display_name: row.provider,
            pricing: PricingPlan::new(
                per_token_rate(&row.input_usd_per_10m, line_no)?,
                per_token_rate(&row.output_usd_per_10m, line_no)?,
                parse_money(&row.fixed_usd_per_request)?,
            ),
            provider_kind: row.kind.unwrap_or_default(),
        };
        market.insert(spec)?;
    }
    Ok(market)
}

/// Serialize a registry back to the line-delimited marketplace format.
pub fn serialize_pricing_table(market: &Marketplace) -> String {
    let mut out = String::new();
    for spec in market.providers() {
        let row = MarketplaceRow {
            llm_id: spec.llm_id.clone(),
            provider: spec.display_name.clone(),
            input_usd_per_10m: format_money(
                Money::from_nano_usd(spec.pricing.input_rate.nano_usd() * TOKENS_PER_RATE_UNIT),
            ),
            output_usd_per_10m: format_money(
                Money::from_nano_usd(spec.pricing.output_rate.nano_usd() * TOKENS_PER_RATE_UNIT),
            ),
            fixed_usd_per_request: format_money(spec.pricing.fixed_per_request),
            kind: Some(spec.provider_kind),
        };
        out.push_str(&serde_json::to_string(&row).expect("row serializes"));
        out.push('\n');
    }
    out
}
