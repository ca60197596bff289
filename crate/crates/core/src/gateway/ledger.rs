use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelRole;

/// A non-negative amount of money in integer micro-dollars.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money {
    micros: u64,
}

const MICROS_PER_DOLLAR: u64 = 1_000_000;
const TOKENS_PER_PRICE_UNIT: u128 = 1_000_000;

impl Money {
    pub const ZERO: Money = Money { micros: 0 };

    pub const fn from_micros(micros: u64) -> Self {
        Self { micros }
    }

    pub const fn from_dollars(dollars: u64) -> Self {
        Self { micros: dollars * MICROS_PER_DOLLAR }
    }

    pub fn micros(self) -> u64 {
        self.micros
    }

    /// Exact decimal string with at least two fractional digits: `5.00`,
    /// `0.65`, `0.000015`.
    pub fn to_decimal_string(self) -> String {
        let whole = self.micros / MICROS_PER_DOLLAR;
        let frac = format!("{:06}", self.micros % MICROS_PER_DOLLAR);
        let frac = frac.trim_end_matches('0');
        let frac = if frac.len() < 2 { format!("{frac:0<2}") } else { frac.to_string() };
        format!("{whole}.{frac}")
    }

    /// Divides by `n`, rounding half up.
    pub fn div_round(self, n: u64) -> Money {
        if n == 0 {
            return Money::ZERO;
        }
        Money::from_micros((self.micros + n / 2) / n)
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money::from_micros(self.micros + rhs.micros)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}", self.to_decimal_string())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid amount {0:?}: expected a non-negative decimal with at most 6 fractional digits")]
pub struct MoneyParseError(String);

impl FromStr for Money {
    type Err = MoneyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || MoneyParseError(s.to_string());
        let t = s.trim().trim_start_matches('$');
        let (whole, frac) = t.split_once('.').unwrap_or((t, ""));
        let digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
        if whole.is_empty() || !digits(whole) || !digits(frac) || frac.len() > 6 {
            return Err(err());
        }
        let whole: u64 = whole.parse().map_err(|_| err())?;
        let frac: u64 = if frac.is_empty() { 0 } else { format!("{frac:0<6}").parse().map_err(|_| err())? };
        whole
            .checked_mul(MICROS_PER_DOLLAR)
            .and_then(|w| w.checked_add(frac))
            .map(Money::from_micros)
            .ok_or_else(err)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_decimal_string())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(u64),
            Float(f64),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Text(s) => s,
            Raw::Int(i) => i.to_string(),
            Raw::Float(f) => f.to_string(),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Price per million input and output tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pricing {
    pub price_in: Money,
    pub price_out: Money,
}

/// One model call attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub role: ModelRole,
    /// Stage and item that issued the call, e.g. `03-filter/00007`.
    pub call_site: String,
    /// 1-based attempt number within one `complete` call.
    pub attempt: u32,
    pub prompt: String,
    pub response: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Token counts were estimated locally because the provider sent none.
    #[serde(default)]
    pub usage_estimated: bool,
    /// The reply reached the output token cap.
    #[serde(default)]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub latency: Duration,
}

/// Every exchange of a run plus the prices they are charged at.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<ChatExchange>,
    pub pricing: BTreeMap<ModelRole, Pricing>,
}

impl CostLedger {
    pub fn new(pricing: BTreeMap<ModelRole, Pricing>) -> Self {
        Self { entries: Vec::new(), pricing }
    }

    fn matching(&self, role: Option<ModelRole>) -> impl Iterator<Item = &ChatExchange> {
        self.entries.iter().filter(move |e| role.is_none_or(|r| e.role == r))
    }

    /// Exact cost of the matching entries. Per-entry products are summed in
    /// units of 1e-12 dollars and rounded half up to micro-dollars once.
    pub fn total_cost(&self, role: Option<ModelRole>) -> Money {
        let exact: u128 = self
            .matching(role)
            .map(|e| {
                let p = self.pricing.get(&e.role).copied().unwrap_or_default();
                e.input_tokens as u128 * p.price_in.micros() as u128
                    + e.output_tokens as u128 * p.price_out.micros() as u128
            })
            .sum();
        let micros = (exact + TOKENS_PER_PRICE_UNIT / 2) / TOKENS_PER_PRICE_UNIT;
        Money::from_micros(u64::try_from(micros).unwrap_or(u64::MAX))
    }

    pub fn input_tokens(&self, role: Option<ModelRole>) -> u64 {
        self.matching(role).map(|e| e.input_tokens).sum()
    }

    pub fn output_tokens(&self, role: Option<ModelRole>) -> u64 {
        self.matching(role).map(|e| e.output_tokens).sum()
    }

    pub fn calls(&self, role: Option<ModelRole>) -> usize {
        self.matching(role).count()
    }

    /// Orders entries by call site then attempt so concurrent runs produce
    /// the same ledger.
    pub fn sort(&mut self) {
        self.entries
            .sort_by(|a, b| a.call_site.cmp(&b.call_site).then(a.attempt.cmp(&b.attempt)));
    }
}

pub fn total_cost(ledger: &CostLedger, role_filter: Option<ModelRole>) -> Money {
    ledger.total_cost(role_filter)
}
