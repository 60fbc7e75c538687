//! Domain types shared by every stage of the engine.
//!
//! All monetary amounts are `f64` in a single unit of account fixed at ingest.
//! Timestamps are integer UTC seconds.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = i64;

pub const SECONDS_PER_HOUR: i64 = 3_600;
pub const SECONDS_PER_DAY: i64 = 86_400;
pub const HOURS_PER_YEAR: f64 = 8_760.0;

/// Asset symbol. Ordering is by symbol so that every map keyed by asset
/// iterates deterministically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AssetId(String);

impl AssetId {
    pub fn new(symbol: impl Into<String>) -> Result<Self> {
        let symbol = symbol.into();
        if symbol.trim().is_empty() {
            return Err(Error::domain("asset symbol must be nonempty"));
        }
        Ok(AssetId(symbol))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AssetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AssetId {
    /// Panics on an empty symbol; use [`AssetId::new`] for untrusted input.
    fn from(s: &str) -> Self {
        AssetId::new(s).expect("nonempty asset symbol")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AssetKind {
    #[default]
    CryptoNative,
    /// Liquid-staking token.
    Lst,
    /// Tokenized real-world asset.
    Rwa,
    /// Share token of another vault.
    ShareToken,
}

fn check_amount(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::DataIntegrity(format!(
            "{name} must be finite and non-negative, got {v}"
        )));
    }
    Ok(())
}

/// Vault balance sheet at one timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaultSnapshot {
    pub time: Timestamp,
    pub deposits: f64,
    pub borrows: f64,
    pub liabilities: f64,
    pub assets_book: f64,
    /// Vault-wide holdings in asset units.
    pub collateral_qty: BTreeMap<AssetId, f64>,
    pub share_supply: f64,
}

impl VaultSnapshot {
    pub fn validate(&self) -> Result<()> {
        check_amount("deposits", self.deposits)?;
        check_amount("borrows", self.borrows)?;
        check_amount("liabilities", self.liabilities)?;
        check_amount("assets_book", self.assets_book)?;
        if self.borrows > self.deposits {
            return Err(Error::DataIntegrity(format!(
                "borrows {} exceed deposits {} at t={}",
                self.borrows, self.deposits, self.time
            )));
        }
        if !(self.share_supply.is_finite() && self.share_supply > 0.0) {
            return Err(Error::DataIntegrity(format!(
                "share supply must be positive at t={}",
                self.time
            )));
        }
        for (a, q) in &self.collateral_qty {
            check_amount(&format!("collateral quantity of {a}"), *q)?;
        }
        Ok(())
    }
}

/// Solvency and liquidation parameters in force from `effective_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub effective_time: Timestamp,
    pub ltv0: BTreeMap<AssetId, f64>,
    pub lltv: BTreeMap<AssetId, f64>,
    pub liq_incentive: f64,
    pub close_factor: f64,
    pub caps: BTreeMap<AssetId, f64>,
    pub timelock_hours: f64,
    pub u_max: f64,
}

impl ParamVector {
    pub fn validate(&self) -> Result<()> {
        for (a, l0) in &self.ltv0 {
            let lt = self
                .lltv
                .get(a)
                .ok_or_else(|| Error::DataIntegrity(format!("asset {a} has ltv0 but no lltv")))?;
            if !(*l0 > 0.0 && *l0 <= 1.0 && *lt > 0.0 && *lt <= 1.0) {
                return Err(Error::DataIntegrity(format!(
                    "ltv0/lltv for {a} must lie in (0,1]"
                )));
            }
            if l0 > lt {
                return Err(Error::DataIntegrity(format!(
                    "ltv0 {l0} exceeds lltv {lt} for {a}"
                )));
            }
        }
        if self.liq_incentive < 0.0 || !self.liq_incentive.is_finite() {
            return Err(Error::DataIntegrity("liquidation incentive must be >= 0".into()));
        }
        if !(self.close_factor > 0.0 && self.close_factor <= 1.0) {
            return Err(Error::DataIntegrity("close factor must lie in (0,1]".into()));
        }
        if self.timelock_hours < 0.0 {
            return Err(Error::DataIntegrity("timelock must be >= 0".into()));
        }
        if !(self.u_max > 0.0 && self.u_max <= 1.0) {
            return Err(Error::DataIntegrity("u_max must lie in (0,1]".into()));
        }
        Ok(())
    }

    /// Liquidation threshold for `asset`, or a data error naming it.
    pub fn lltv_of(&self, asset: &AssetId) -> Result<f64> {
        self.lltv
            .get(asset)
            .copied()
            .ok_or_else(|| Error::DataIntegrity(format!("no lltv configured for {asset}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRecord {
    pub account: String,
    pub time: Timestamp,
    pub collateral: BTreeMap<AssetId, f64>,
    pub debt: BTreeMap<AssetId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepaidLeg {
    pub quantity: f64,
    pub oracle_price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeizedLeg {
    pub quantity: f64,
    pub oracle_price: f64,
    pub execution_price: f64,
}

impl SeizedLeg {
    /// Execution deviation `1 - exec/oracle`, clipped at zero for above-oracle fills.
    pub fn deviation(&self) -> f64 {
        (1.0 - self.execution_price / self.oracle_price).max(0.0)
    }

    pub fn above_oracle(&self) -> bool {
        self.execution_price > self.oracle_price
    }
}

/// One liquidation attempt. A missing `completion_time` means the position
/// was never resolved inside the observed window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiquidationEvent {
    pub trigger_time: Timestamp,
    pub completion_time: Option<Timestamp>,
    pub account: String,
    pub repaid_debt: BTreeMap<AssetId, RepaidLeg>,
    pub seized_collateral: BTreeMap<AssetId, SeizedLeg>,
    pub gas_units: f64,
    pub gas_price: f64,
    pub mev_cost: f64,
    pub fees: f64,
}

impl LiquidationEvent {
    pub fn repaid_value(&self) -> f64 {
        self.repaid_debt
            .values()
            .map(|l| l.quantity * l.oracle_price)
            .sum()
    }

    pub fn seized_oracle_value(&self) -> f64 {
        self.seized_collateral
            .values()
            .map(|l| l.quantity * l.oracle_price)
            .sum()
    }

    pub fn gross_proceeds(&self) -> f64 {
        self.seized_collateral
            .values()
            .map(|l| l.quantity * l.execution_price)
            .sum()
    }

    pub fn execution_cost(&self) -> f64 {
        self.gas_units * self.gas_price + self.mev_cost
    }

    /// True when any seized leg filled above its oracle mark.
    pub fn violates_execution_bound(&self) -> bool {
        self.seized_collateral.values().any(SeizedLeg::above_oracle)
    }

    /// Value-weighted execution deviation across seized legs, each clipped at 0.
    pub fn weighted_deviation(&self) -> f64 {
        let total = self.seized_oracle_value();
        if total <= 0.0 {
            return 0.0;
        }
        self.seized_collateral
            .values()
            .map(|l| l.quantity * l.oracle_price / total * l.deviation())
            .sum()
    }

    pub fn hours_to_completion(&self) -> Option<f64> {
        self.completion_time
            .map(|c| (c - self.trigger_time) as f64 / SECONDS_PER_HOUR as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSeries {
    pub asset: AssetId,
    pub points: Vec<(Timestamp, f64)>,
    pub update_times: Vec<Timestamp>,
    pub reference_points: Option<Vec<(Timestamp, f64)>>,
}

impl OracleSeries {
    /// Last observed price at or before `t`.
    pub fn price_at(&self, t: Timestamp) -> Option<f64> {
        last_at_or_before(&self.points, t)
    }

    pub fn last_price(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    pub fn span(&self) -> Option<(Timestamp, Timestamp)> {
        Some((self.points.first()?.0, self.points.last()?.0))
    }
}

pub(crate) fn last_at_or_before(points: &[(Timestamp, f64)], t: Timestamp) -> Option<f64> {
    let idx = points.partition_point(|p| p.0 <= t);
    if idx == 0 {
        None
    } else {
        Some(points[idx - 1].1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSnapshot {
    pub asset: AssetId,
    pub time: Timestamp,
    pub depth: f64,
    pub venue: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasPoint {
    pub time: Timestamp,
    pub gas_price: f64,
    /// Priority fee, used as the MEV proxy. `None` when the producer did not
    /// supply one.
    pub priority_fee: Option<f64>,
}

/// Rehypothecation metadata for a share-token collateral asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RehypoMeta {
    pub hd: u32,
    pub per_layer_ltv: Vec<f64>,
}

/// Oracle prices for a set of assets at one instant.
pub type PriceMap = BTreeMap<AssetId, f64>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_symbol_rejected() {
        assert!(AssetId::new("").is_err());
        assert!(AssetId::new("  ").is_err());
        assert_eq!(AssetId::new("ETH").unwrap().as_str(), "ETH");
    }

    #[test]
    fn snapshot_rejects_borrows_above_deposits() {
        let s = VaultSnapshot {
            time: 0,
            deposits: 100.0,
            borrows: 101.0,
            liabilities: 100.0,
            assets_book: 100.0,
            collateral_qty: BTreeMap::new(),
            share_supply: 100.0,
        };
        assert!(matches!(s.validate(), Err(Error::DataIntegrity(_))));
    }

    #[test]
    fn params_require_ltv0_below_lltv() {
        let a = AssetId::from("ETH");
        let p = ParamVector {
            effective_time: 0,
            ltv0: [(a.clone(), 0.9)].into(),
            lltv: [(a, 0.8)].into(),
            liq_incentive: 0.05,
            close_factor: 0.5,
            caps: BTreeMap::new(),
            timelock_hours: 24.0,
            u_max: 1.0,
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn price_lookup_uses_last_point_not_after() {
        let s = OracleSeries {
            asset: "ETH".into(),
            points: vec![(0, 1.0), (10, 2.0), (20, 3.0)],
            update_times: vec![0],
            reference_points: None,
        };
        assert_eq!(s.price_at(-1), None);
        assert_eq!(s.price_at(0), Some(1.0));
        assert_eq!(s.price_at(15), Some(2.0));
        assert_eq!(s.price_at(99), Some(3.0));
    }
}
