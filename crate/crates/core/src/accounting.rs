//! Accounting identities: share price, coverage, utilization, health factor,
//! recovery and shortfall.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::{AssetId, LiquidationEvent, ParamVector, PositionRecord, PriceMap, VaultSnapshot};

/// Returns `(share_price, loss_rate)`.
pub fn share_price_and_loss(
    assets_book: f64,
    share_supply: f64,
    entry_price: f64,
    exit_price: f64,
) -> Result<(f64, f64)> {
    if !(share_supply > 0.0) {
        return Err(Error::domain("share supply must be positive"));
    }
    if !(entry_price > 0.0) {
        return Err(Error::domain("entry share price must be positive"));
    }
    let price = assets_book / share_supply;
    let loss = (1.0 - exit_price / entry_price).max(0.0);
    Ok((price, loss))
}

pub fn acr(assets_liq: f64, liabilities: f64) -> Result<f64> {
    if !(liabilities > 0.0) {
        return Err(Error::domain("liabilities must be positive for ACR"));
    }
    Ok(assets_liq / liabilities)
}

pub fn utilization(borrows: f64, deposits: f64) -> Result<f64> {
    if !(deposits > 0.0) {
        return Err(Error::domain("deposits must be positive for utilization"));
    }
    if borrows > deposits {
        return Err(Error::DataIntegrity(format!(
            "borrows {borrows} exceed deposits {deposits}"
        )));
    }
    Ok(borrows / deposits)
}

fn price_of(prices: &PriceMap, a: &AssetId) -> Result<f64> {
    prices
        .get(a)
        .copied()
        .ok_or_else(|| Error::DataIntegrity(format!("missing price for {a}")))
}

/// Health factor `Σ lltv·P·C / Σ P·B`. Returns `f64::INFINITY` for a debt-free
/// position.
pub fn health_factor(position: &PositionRecord, prices: &PriceMap, params: &ParamVector) -> Result<f64> {
    let mut debt = 0.0;
    for (a, q) in &position.debt {
        debt += price_of(prices, a)? * q;
    }
    let mut coll = 0.0;
    for (a, q) in &position.collateral {
        coll += params.lltv_of(a)? * price_of(prices, a)? * q;
    }
    if debt <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(coll / debt)
}

/// Realized recovery rate. Can be negative when costs exceed proceeds.
pub fn recovery_rate(event: &LiquidationEvent) -> Result<f64> {
    let repaid = event.repaid_value();
    if !(repaid > 0.0) {
        return Err(Error::domain("recovery rate needs positive repaid debt"));
    }
    let net = event.gross_proceeds() - event.fees - event.execution_cost();
    Ok(net / repaid)
}

/// Oracle-valued collateral weights. Sums to one.
pub fn collateral_weights(snapshot: &VaultSnapshot, prices: &PriceMap) -> Result<BTreeMap<AssetId, f64>> {
    weights_from_quantities(&snapshot.collateral_qty, prices)
}

pub fn weights_from_quantities(
    qty: &BTreeMap<AssetId, f64>,
    prices: &PriceMap,
) -> Result<BTreeMap<AssetId, f64>> {
    let mut values = BTreeMap::new();
    let mut total = 0.0;
    for (a, q) in qty {
        let v = price_of(prices, a)? * q;
        total += v;
        values.insert(a.clone(), v);
    }
    if !(total > 0.0) {
        return Err(Error::domain("collateral has zero oracle value"));
    }
    Ok(values.into_iter().map(|(a, v)| (a, v / total)).collect())
}

/// Oracle value of a set of holdings.
pub fn oracle_value(qty: &BTreeMap<AssetId, f64>, prices: &PriceMap) -> Result<f64> {
    let mut total = 0.0;
    for (a, q) in qty {
        total += price_of(prices, a)? * q;
    }
    Ok(total)
}

/// `(Δ, ℓ)` with `Δ = (L - A)⁺` and `ℓ = Δ / L`.
pub fn shortfall(liabilities: f64, assets_liq: f64) -> Result<(f64, f64)> {
    if !(liabilities > 0.0) {
        return Err(Error::domain("liabilities must be positive for shortfall"));
    }
    let delta = (liabilities - assets_liq).max(0.0);
    Ok((delta, delta / liabilities))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{RepaidLeg, SeizedLeg};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn eth() -> AssetId {
        AssetId::from("ETH")
    }

    fn params(lltv: f64) -> ParamVector {
        ParamVector {
            effective_time: 0,
            ltv0: [(eth(), lltv.min(0.8))].into(),
            lltv: [(eth(), lltv), (AssetId::from("USD"), 1.0)].into(),
            liq_incentive: 0.05,
            close_factor: 0.5,
            caps: BTreeMap::new(),
            timelock_hours: 0.0,
            u_max: 1.0,
        }
    }

    fn event(proceeds: f64, costs: f64, debt: f64) -> LiquidationEvent {
        LiquidationEvent {
            trigger_time: 0,
            completion_time: Some(0),
            account: "a".into(),
            repaid_debt: [(AssetId::from("USD"), RepaidLeg { quantity: debt, oracle_price: 1.0 })].into(),
            seized_collateral: [(
                eth(),
                SeizedLeg { quantity: 1.0, oracle_price: proceeds.max(1.0), execution_price: proceeds },
            )]
            .into(),
            gas_units: 0.0,
            gas_price: 0.0,
            mev_cost: 0.0,
            fees: costs,
        }
    }

    #[test]
    fn share_price_cases() {
        assert_eq!(share_price_and_loss(1000.0, 1000.0, 1.0, 1.0).unwrap(), (1.0, 0.0));
        let (p, l) = share_price_and_loss(1100.0, 1000.0, 1.0, 1.1).unwrap();
        assert_abs_diff_eq!(p, 1.1, epsilon = 1e-15);
        assert_eq!(l, 0.0);
        let (_, l) = share_price_and_loss(1.0, 1.0, 1.0, 0.8).unwrap();
        assert_abs_diff_eq!(l, 0.2, epsilon = 1e-15);
        assert!(share_price_and_loss(1.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn coverage_and_utilization() {
        assert_eq!(acr(125.0, 100.0).unwrap(), 1.25);
        assert_eq!(acr(100.0, 100.0).unwrap(), 1.0);
        assert_eq!(acr(80.0, 100.0).unwrap(), 0.8);
        assert!(acr(1.0, 0.0).is_err());
        assert_eq!(utilization(0.0, 100.0).unwrap(), 0.0);
        assert_eq!(utilization(100.0, 100.0).unwrap(), 1.0);
        assert_eq!(utilization(80.0, 100.0).unwrap(), 0.8);
        assert!(matches!(utilization(101.0, 100.0), Err(Error::DataIntegrity(_))));
    }

    #[test]
    fn health_factor_cases() {
        let prices: PriceMap = [(eth(), 1.0), (AssetId::from("USD"), 1.0)].into();
        let mut pos = PositionRecord {
            account: "u".into(),
            time: 0,
            collateral: [(eth(), 100.0)].into(),
            debt: [(AssetId::from("USD"), 50.0)].into(),
        };
        assert_abs_diff_eq!(health_factor(&pos, &prices, &params(0.9)).unwrap(), 1.8, epsilon = 1e-12);
        pos.debt.insert(AssetId::from("USD"), 100.0);
        assert!(health_factor(&pos, &prices, &params(0.9)).unwrap() < 1.0);
        pos.debt.clear();
        assert!(health_factor(&pos, &prices, &params(0.9)).unwrap().is_infinite());
        pos.collateral.insert(AssetId::from("BTC"), 1.0);
        assert!(health_factor(&pos, &prices, &params(0.9)).is_err());
    }

    #[test]
    fn recovery_cases() {
        assert_abs_diff_eq!(recovery_rate(&event(100.0, 0.0, 100.0)).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(recovery_rate(&event(95.0, 3.0, 100.0)).unwrap(), 0.92, epsilon = 1e-12);
        assert_abs_diff_eq!(recovery_rate(&event(2.0, 5.0, 100.0)).unwrap(), -0.03, epsilon = 1e-12);
        assert!(recovery_rate(&event(2.0, 5.0, 0.0)).is_err());
    }

    #[test]
    fn weight_cases() {
        let b = AssetId::from("BTC");
        let prices: PriceMap = [(eth(), 3.0), (b.clone(), 1.0)].into();
        let w = weights_from_quantities(&[(eth(), 100.0), (b.clone(), 100.0)].into(), &prices).unwrap();
        assert_abs_diff_eq!(w[&eth()], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(w[&b], 0.25, epsilon = 1e-15);
        assert!(weights_from_quantities(&BTreeMap::new(), &prices).is_err());
    }

    #[test]
    fn shortfall_cases() {
        assert_eq!(shortfall(100.0, 120.0).unwrap(), (0.0, 0.0));
        assert_eq!(shortfall(100.0, 100.0).unwrap(), (0.0, 0.0));
        let (d, l) = shortfall(100.0, 70.0).unwrap();
        assert_abs_diff_eq!(d, 30.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.3, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(vals in prop::collection::vec(0.001f64..1e6, 1..12)) {
            let qty: BTreeMap<AssetId, f64> = vals.iter().enumerate()
                .map(|(i, v)| (AssetId::from(format!("A{i:02}").as_str()), *v)).collect();
            let prices: PriceMap = qty.keys().map(|a| (a.clone(), 1.0)).collect();
            let w = weights_from_quantities(&qty, &prices).unwrap();
            let s: f64 = w.values().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(w.values().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn shortfall_nonincreasing_in_assets(l in 1.0f64..1e6, a in 0.0f64..2e6, da in 0.0f64..1e5) {
            let (d1, r1) = shortfall(l, a).unwrap();
            let (d2, _) = shortfall(l, a + da).unwrap();
            prop_assert!(d2 <= d1);
            prop_assert!((0.0..=1.0).contains(&r1));
        }

        #[test]
        fn health_factor_scale_free(p in 0.1f64..1e4, c in 0.01f64..100.0) {
            let usd = AssetId::from("USD");
            let pos = PositionRecord {
                account: "u".into(), time: 0,
                collateral: [(eth(), 10.0)].into(),
                debt: [(usd.clone(), 50.0)].into(),
            };
            let p1: PriceMap = [(eth(), p), (usd.clone(), 1.0)].into();
            let p2: PriceMap = [(eth(), p * c), (usd, c)].into();
            let h1 = health_factor(&pos, &p1, &params(0.9)).unwrap();
            let h2 = health_factor(&pos, &p2, &params(0.9)).unwrap();
            prop_assert!((h1 - h2).abs() <= 1e-10 * h1.max(1.0));
        }

        #[test]
        fn recovery_monotone(fees in 0.0f64..50.0, bump in 0.01f64..10.0) {
            let base = recovery_rate(&event(90.0, fees, 100.0)).unwrap();
            prop_assert!(recovery_rate(&event(90.0, fees + bump, 100.0)).unwrap() < base);
            prop_assert!(recovery_rate(&event(90.0 + bump, fees, 100.0)).unwrap() > base);
        }
    }
}
