//! Fixed inputs shared by the benches.

use std::collections::BTreeMap;

use vaultcredit::metrics::{V2Asset, V2Input, VolumeModel};
use vaultcredit::AssetId;

/// Two-asset book with a fixed liquidation notional.
pub fn v2_book(notional: f64) -> V2Input {
    let line = |a: &str, p: f64, q: f64, d: f64, l: f64| V2Asset {
        asset: AssetId::from(a),
        price: p,
        quantity: q,
        depth: Some(d),
        lambda: l,
        sigma_per_sqrt_hour: 0.01,
        drawdown: 0.2,
        depth_factor: 0.5,
    };
    V2Input {
        liabilities: 9.0e6,
        assets: vec![line("ETH", 2000.0, 3000.0, 5e6, 0.5), line("WBTC", 30000.0, 150.0, 8e6, 0.3)],
        horizon_hours: 24.0,
        volume: VolumeModel::Fixed(notional),
        exec_cost: 1000.0,
        depth_vol_k: 1.0,
        gamma: 0.0,
        clr: 0.0,
    }
}

pub fn lambdas() -> BTreeMap<AssetId, f64> {
    BTreeMap::from([(AssetId::from("ETH"), 0.5), (AssetId::from("WBTC"), 0.3)])
}
