//! Synthetic worlds with known generating parameters, plus brute-force
//! oracles used by the test suite.
//!
//! `generate` only writes what an on-chain observer could see into the
//! `DataBundle`. True prices, oracle error and per-trigger failure outcomes
//! go to the `Truth` sidecar, which nothing on the scoring path reads.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::ImpactObs;
use crate::ingest::{write_atomic, write_bundle, DataBundle};
use crate::rng;
use crate::stats::{mean, norm_cdf, var_pop};
use crate::types::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssetConfig {
    pub id: AssetId,
    pub kind: AssetKind,
    pub price0: f64,
    pub drift_annual: f64,
    pub vol_annual: f64,
    pub jump_rate_per_year: f64,
    pub jump_mean: f64,
    pub jump_sd: f64,
    pub lambda: f64,
    pub depth0: f64,
    /// AR(1) innovation sd of log depth.
    pub depth_noise: f64,
    /// Log depth falls by this times the absolute hourly log return.
    pub depth_stress: f64,
    pub oracle_interval_hours: u32,
    pub oracle_lag_hours: u32,
    pub oracle_bias: f64,
    /// Sd of the log noise on the reference feed.
    pub reference_noise: f64,
    /// Sd of log noise on execution prices.
    pub exec_noise: f64,
    pub ltv0: f64,
    pub lltv: f64,
    /// Fraction of borrowers posting this asset.
    pub borrower_share: f64,
}

impl Default for AssetConfig {
    fn default() -> Self {
        AssetConfig {
            id: AssetId::from("ETH"),
            kind: AssetKind::CryptoNative,
            price0: 2000.0,
            drift_annual: 0.0,
            vol_annual: 0.7,
            jump_rate_per_year: 4.0,
            jump_mean: -0.05,
            jump_sd: 0.03,
            lambda: 0.5,
            depth0: 5.0e6,
            depth_noise: 0.05,
            depth_stress: 15.0,
            oracle_interval_hours: 1,
            oracle_lag_hours: 1,
            oracle_bias: 0.0,
            reference_noise: 0.001,
            exec_noise: 0.002,
            ltv0: 0.75,
            lltv: 0.83,
            borrower_share: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub n_borrowers: usize,
    /// Median initial collateral value, unit of account.
    pub size_median: f64,
    pub size_sigma: f64,
    pub hf_min: f64,
    pub hf_max: f64,
    pub loop_depth: u32,
    /// Expected re-leverage events per borrower per day.
    pub refresh_per_day: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            n_borrowers: 150,
            size_median: 20_000.0,
            size_sigma: 1.0,
            hf_min: 1.02,
            hf_max: 1.6,
            loop_depth: 0,
            refresh_per_day: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GasConfig {
    /// Mean gas price, unit of account per gas unit.
    pub base: f64,
    pub phi: f64,
    pub vol: f64,
    /// Log gas rises by this times the hourly stress measure.
    pub stress_coupling: f64,
    pub priority_frac: f64,
    pub units_per_liquidation: f64,
    pub mev_frac: f64,
}

impl Default for GasConfig {
    fn default() -> Self {
        GasConfig {
            base: 5.0e-5,
            phi: 0.9,
            vol: 0.15,
            stress_coupling: 4.0,
            priority_frac: 0.1,
            units_per_liquidation: 500_000.0,
            mev_frac: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilConfig {
    pub u0: f64,
    pub drift_per_hour: f64,
    pub sigma_per_sqrt_hour: f64,
    pub jump_rate_per_hour: f64,
    pub jump_mean: f64,
    pub jump_sd: f64,
    /// Mean reversion toward `u0` per hour.
    pub kappa: f64,
    pub cap: f64,
}

impl Default for UtilConfig {
    fn default() -> Self {
        UtilConfig {
            u0: 0.8,
            drift_per_hour: 0.0,
            sigma_per_sqrt_hour: 0.004,
            jump_rate_per_hour: 0.002,
            jump_mean: 0.03,
            jump_sd: 0.01,
            kappa: 0.01,
            cap: 0.995,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crash {
    pub hour: usize,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub start: Timestamp,
    pub hours: usize,
    pub debt_asset: AssetId,
    pub assets: Vec<AssetConfig>,
    pub population: PopulationConfig,
    pub gas: GasConfig,
    pub utilization: UtilConfig,
    pub liq_incentive: f64,
    pub close_factor: f64,
    pub timelock_hours: f64,
    /// Window within which a trigger must be liquidated to count as handled.
    pub tau_max_hours: f64,
    pub crash: Option<Crash>,
    pub positions_every_hours: usize,
    pub include_reference: bool,
    pub include_gas: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            start: 1_672_531_200,
            hours: 400 * 24,
            debt_asset: AssetId::from("USDC"),
            assets: vec![
                AssetConfig::default(),
                AssetConfig {
                    id: AssetId::from("WBTC"),
                    price0: 30_000.0,
                    vol_annual: 0.55,
                    lambda: 0.3,
                    depth0: 8.0e6,
                    oracle_interval_hours: 2,
                    ltv0: 0.73,
                    lltv: 0.8,
                    borrower_share: 0.6,
                    ..AssetConfig::default()
                },
            ],
            population: PopulationConfig::default(),
            gas: GasConfig::default(),
            utilization: UtilConfig::default(),
            liq_incentive: 0.05,
            close_factor: 0.5,
            timelock_hours: 24.0,
            tau_max_hours: 24.0,
            crash: None,
            positions_every_hours: 24,
            include_reference: true,
            include_gas: true,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hours < 2 {
            return Err(Error::config("world needs at least two hours"));
        }
        if self.assets.is_empty() {
            return Err(Error::config("world needs at least one collateral asset"));
        }
        if self.assets.iter().any(|a| a.id == self.debt_asset) {
            return Err(Error::config("debt asset cannot also be collateral"));
        }
        for a in &self.assets {
            if !(a.price0 > 0.0 && a.vol_annual >= 0.0 && a.lambda >= 0.0 && a.depth0 > 0.0) {
                return Err(Error::config(format!("{}: price, vol, lambda or depth out of range", a.id)));
            }
            if !(a.ltv0 > 0.0 && a.ltv0 <= a.lltv && a.lltv < 1.0) || a.oracle_interval_hours == 0 {
                return Err(Error::config(format!("{}: bad ltv or oracle interval", a.id)));
            }
        }
        let p = &self.population;
        if !(p.hf_min > 0.0 && p.hf_min <= p.hf_max) {
            return Err(Error::config("population HF range invalid"));
        }
        if !(self.close_factor > 0.0 && self.close_factor <= 1.0) || self.liq_incentive < 0.0 {
            return Err(Error::config("close factor or incentive out of range"));
        }
        let u = &self.utilization;
        if !(u.u0 > 0.0 && u.u0 < 1.0 && u.cap <= 1.0 && u.cap > 0.0) {
            return Err(Error::config("utilization settings out of range"));
        }
        if let Some(c) = self.crash {
            if !(0.0..1.0).contains(&c.size) {
                return Err(Error::config("crash size must lie in [0,1)"));
            }
        }
        Ok(())
    }

    fn time(&self, hour: usize) -> Timestamp {
        self.start + hour as i64 * SECONDS_PER_HOUR
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerTruth {
    pub trigger_time: Timestamp,
    pub account: String,
    /// Not liquidated within `tau_max`, or bad debt arose while open.
    pub failed: bool,
    pub bad_debt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetTruth {
    pub true_prices: Vec<f64>,
    /// Hourly `ln(oracle / true)`.
    pub eta: Vec<f64>,
    /// Hourly `ln(reference / true)`.
    pub zeta: Vec<f64>,
    pub var_eta: f64,
    pub var_zeta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    pub assets: BTreeMap<AssetId, AssetTruth>,
    pub triggers: Vec<TriggerTruth>,
    pub failure_prob: Option<f64>,
    pub bad_debt_total: f64,
    pub tau_max_hours: f64,
}

#[derive(Debug, Clone)]
struct Borrower {
    account: String,
    asset: usize,
    collateral: f64,
    debt: f64,
    open: Option<OpenTrigger>,
}

#[derive(Debug, Clone)]
struct OpenTrigger {
    hour: usize,
    last_repay: f64,
    bad_debt: bool,
}

fn price_path(cfg: &WorldConfig, i: usize, seed: u64) -> Vec<f64> {
    let a = &cfg.assets[i];
    let mut r = rng::stream(seed, "prices", i as u64);
    let dt = 1.0 / HOURS_PER_YEAR as f64;
    let s = a.vol_annual * dt.sqrt();
    let mu = (a.drift_annual - 0.5 * a.vol_annual * a.vol_annual) * dt;
    let pj = a.jump_rate_per_year * dt;
    let mut out = Vec::with_capacity(cfg.hours);
    let mut lp = a.price0.ln();
    out.push(lp.exp());
    for h in 1..cfg.hours {
        let z: f64 = StandardNormal.sample(&mut r);
        let u: f64 = r.random();
        let zj: f64 = StandardNormal.sample(&mut r);
        lp += mu + s * z;
        if u < pj {
            lp += a.jump_mean + a.jump_sd * zj;
        }
        if let Some(c) = cfg.crash {
            if c.hour == h {
                lp += (1.0 - c.size).ln();
            }
        }
        out.push(lp.exp());
    }
    out
}

/// Generates a world. Same `(config, seed)` always gives the same bundle.
pub fn generate(cfg: &WorldConfig, seed: u64) -> Result<(DataBundle, Truth)> {
    cfg.validate()?;
    let n_assets = cfg.assets.len();
    let hours = cfg.hours;
    let true_p: Vec<Vec<f64>> = (0..n_assets).into_par_iter().map(|i| price_path(cfg, i, seed)).collect();

    // oracle and reference feeds
    let mut oracle_p = vec![vec![0.0; hours]; n_assets];
    let mut ref_p = vec![vec![0.0; hours]; n_assets];
    for (i, a) in cfg.assets.iter().enumerate() {
        let mut r = rng::stream(seed, "reference", i as u64);
        let iv = a.oracle_interval_hours as usize;
        for h in 0..hours {
            let upd = (h / iv) * iv;
            let src = upd.saturating_sub(a.oracle_lag_hours as usize);
            oracle_p[i][h] = true_p[i][src] * (1.0 + a.oracle_bias);
            let z: f64 = StandardNormal.sample(&mut r);
            ref_p[i][h] = true_p[i][h] * (a.reference_noise * z).exp();
        }
    }

    // stress, depth, gas
    let share_sum: f64 = cfg.assets.iter().map(|a| a.borrower_share).sum::<f64>().max(1e-12);
    let mut stress = vec![0.0; hours];
    for h in 1..hours {
        stress[h] = cfg
            .assets
            .iter()
            .enumerate()
            .map(|(i, a)| a.borrower_share / share_sum * (true_p[i][h] / true_p[i][h - 1]).ln().abs())
            .sum();
    }
    let mut depth = vec![vec![0.0; hours]; n_assets];
    for (i, a) in cfg.assets.iter().enumerate() {
        let mut r = rng::stream(seed, "depth", i as u64);
        let mut xi = 0.0;
        for h in 0..hours {
            let z: f64 = StandardNormal.sample(&mut r);
            xi = 0.95 * xi + a.depth_noise * z;
            let ret = if h > 0 { (true_p[i][h] / true_p[i][h - 1]).ln().abs() } else { 0.0 };
            depth[i][h] = a.depth0 * (xi - a.depth_stress * ret).exp();
        }
    }
    let g = &cfg.gas;
    let mut gas = vec![0.0; hours];
    {
        let mut r = rng::stream(seed, "gas", 0);
        let mut y = 0.0;
        for h in 0..hours {
            let z: f64 = StandardNormal.sample(&mut r);
            y = g.phi * y + g.vol * z + g.stress_coupling * stress[h];
            gas[h] = g.base * y.exp();
        }
    }

    // utilization driver
    let uc = &cfg.utilization;
    let mut util = vec![uc.u0; hours];
    {
        let mut r = rng::stream(seed, "utilization", 0);
        for h in 1..hours {
            let z: f64 = StandardNormal.sample(&mut r);
            let uj: f64 = r.random();
            let zj: f64 = StandardNormal.sample(&mut r);
            let mut u = util[h - 1] + uc.drift_per_hour + uc.kappa * (uc.u0 - util[h - 1]) + uc.sigma_per_sqrt_hour * z;
            if uj < uc.jump_rate_per_hour {
                u += uc.jump_mean + uc.jump_sd * zj;
            }
            util[h] = u.clamp(0.01, uc.cap);
        }
    }

    // borrowers
    let pop = &cfg.population;
    let mut br = rng::stream(seed, "borrowers", 0);
    let new_size = |r: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let z: f64 = StandardNormal.sample(r);
        pop.size_median * (pop.size_sigma * z).exp()
    };
    let loop_mult = |ltv: f64| -> f64 {
        if pop.loop_depth == 0 {
            1.0
        } else {
            (1.0 - ltv.powi(pop.loop_depth as i32 + 1)) / (1.0 - ltv)
        }
    };
    let mut borrowers: Vec<Borrower> = Vec::with_capacity(pop.n_borrowers);
    for k in 0..pop.n_borrowers {
        let pick: f64 = br.random::<f64>() * share_sum;
        let mut acc = 0.0;
        let mut asset = n_assets - 1;
        for (i, a) in cfg.assets.iter().enumerate() {
            acc += a.borrower_share;
            if pick < acc {
                asset = i;
                break;
            }
        }
        let a = &cfg.assets[asset];
        let hf = pop.hf_min + (pop.hf_max - pop.hf_min) * br.random::<f64>();
        let value = new_size(&mut br) * loop_mult(a.lltv / hf);
        let qty = value / oracle_p[asset][0];
        borrowers.push(Borrower {
            account: format!("acct{k:04}"),
            asset,
            collateral: qty,
            debt: a.lltv * value / hf,
            open: None,
        });
    }

    let mut lr = rng::stream(seed, "liquidator", 0);
    let mut events: Vec<LiquidationEvent> = Vec::new();
    let mut triggers: Vec<TriggerTruth> = Vec::new();
    let mut snapshots = Vec::with_capacity(hours);
    let mut positions = Vec::new();
    let mut bad_debt_total = 0.0;
    let pi = cfg.liq_incentive;
    let debt_id = &cfg.debt_asset;

    for h in 0..hours {
        let t = cfg.time(h);
        for b in borrowers.iter_mut() {
            let a = &cfg.assets[b.asset];
            let o = oracle_p[b.asset][h];
            let ptrue = true_p[b.asset][h];
            // refresh (never while a trigger is open)
            let u_ref: f64 = br.random();
            let hf_draw: f64 = br.random();
            let size = new_size(&mut br);
            if b.open.is_none() && (u_ref < pop.refresh_per_day / 24.0 || b.debt <= 0.0 || b.collateral <= 0.0) {
                let hf = pop.hf_min + (pop.hf_max - pop.hf_min) * hf_draw;
                if b.collateral * o < 0.1 * pop.size_median {
                    b.collateral = size * loop_mult(a.lltv / hf) / o;
                }
                b.debt = a.lltv * b.collateral * o / hf;
            }
            let hf = if b.debt > 0.0 { a.lltv * b.collateral * o / b.debt } else { f64::INFINITY };
            let z: f64 = StandardNormal.sample(&mut lr);
            let um: f64 = lr.random();
            if hf >= 1.0 {
                if let Some(open) = b.open.take() {
                    // recovered without liquidation
                    close_trigger(&mut events, &mut triggers, cfg, b, open);
                }
                continue;
            }
            if b.open.is_none() {
                b.open = Some(OpenTrigger { hour: h, last_repay: 0.0, bad_debt: false });
            }
            if b.collateral * ptrue < b.debt {
                b.open.as_mut().unwrap().bad_debt = true;
            }
            let cv = b.collateral * o;
            let mut repay = cfg.close_factor * b.debt;
            let mut seize_val = repay * (1.0 + pi);
            if seize_val > cv {
                seize_val = cv;
                repay = cv / (1.0 + pi);
            }
            let qty = seize_val / o;
            let x = qty * ptrue / depth[b.asset][h];
            let exec = (ptrue * (1.0 - a.lambda * x)).max(0.0) * (a.exec_noise * z).exp();
            let gas_cost = g.units_per_liquidation * gas[h];
            let mev = g.mev_frac * repay * (0.5 + um);
            let profit = qty * exec - repay - gas_cost - mev;
            b.open.as_mut().unwrap().last_repay = repay;
            if profit < 0.0 {
                continue;
            }
            b.collateral -= qty;
            b.debt -= repay;
            if b.collateral <= 1e-12 * qty.max(1.0) && b.debt > 0.0 {
                bad_debt_total += b.debt;
                b.open.as_mut().unwrap().bad_debt = true;
                b.debt = 0.0;
                b.collateral = 0.0;
            }
            let open = b.open.take().unwrap();
            let e = LiquidationEvent {
                trigger_time: cfg.time(open.hour),
                completion_time: Some(t + 12),
                account: b.account.clone(),
                repaid_debt: [(debt_id.clone(), RepaidLeg { quantity: repay, oracle_price: 1.0 })].into(),
                seized_collateral: [(
                    a.id.clone(),
                    SeizedLeg { quantity: qty, oracle_price: o, execution_price: exec },
                )]
                .into(),
                gas_units: g.units_per_liquidation,
                gas_price: gas[h],
                mev_cost: mev,
                fees: 0.0,
            };
            let late = (h - open.hour) as f64 + 12.0 / 3600.0 > cfg.tau_max_hours;
            triggers.push(TriggerTruth {
                trigger_time: e.trigger_time,
                account: e.account.clone(),
                failed: late || open.bad_debt,
                bad_debt: open.bad_debt,
            });
            events.push(e);
        }

        // balance sheet
        let borrows: f64 = borrowers.iter().map(|b| b.debt).sum();
        let deposits = (borrows / util[h]).max(borrows);
        let mut collateral_qty: BTreeMap<AssetId, f64> = cfg.assets.iter().map(|a| (a.id.clone(), 0.0)).collect();
        for b in &borrowers {
            *collateral_qty.get_mut(&cfg.assets[b.asset].id).unwrap() += b.collateral;
        }
        collateral_qty.insert(debt_id.clone(), deposits - borrows);
        snapshots.push(VaultSnapshot {
            time: t,
            deposits,
            borrows,
            liabilities: deposits,
            assets_book: (deposits - bad_debt_total).max(0.0),
            collateral_qty,
            share_supply: deposits.max(1e-9),
        });
        if cfg.positions_every_hours > 0 && h % cfg.positions_every_hours == 0 {
            for b in &borrowers {
                if b.debt <= 0.0 {
                    continue;
                }
                positions.push(PositionRecord {
                    account: b.account.clone(),
                    time: t,
                    collateral: [(cfg.assets[b.asset].id.clone(), b.collateral)].into(),
                    debt: [(debt_id.clone(), b.debt)].into(),
                });
            }
        }
    }
    for b in borrowers.iter_mut() {
        if let Some(open) = b.open.take() {
            close_trigger(&mut events, &mut triggers, cfg, b, open);
        }
    }
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|i, j| {
        (events[*i].trigger_time, &events[*i].account).cmp(&(events[*j].trigger_time, &events[*j].account))
    });
    let events: Vec<LiquidationEvent> = order.iter().map(|i| events[*i].clone()).collect();
    let triggers: Vec<TriggerTruth> = order.iter().map(|i| triggers[*i].clone()).collect();

    // assemble bundle
    let times: Vec<Timestamp> = (0..hours).map(|h| cfg.time(h)).collect();
    let mut oracles = BTreeMap::new();
    let mut truth_assets = BTreeMap::new();
    let mut depth_map = BTreeMap::new();
    for (i, a) in cfg.assets.iter().enumerate() {
        let iv = a.oracle_interval_hours as usize;
        oracles.insert(
            a.id.clone(),
            OracleSeries {
                asset: a.id.clone(),
                points: times.iter().copied().zip(oracle_p[i].iter().copied()).collect(),
                update_times: (0..hours).filter(|h| h % iv == 0).map(|h| times[h]).collect(),
                reference_points: cfg
                    .include_reference
                    .then(|| times.iter().copied().zip(ref_p[i].iter().copied()).collect()),
            },
        );
        let eta: Vec<f64> = (0..hours).map(|h| (oracle_p[i][h] / true_p[i][h]).ln()).collect();
        let zeta: Vec<f64> = (0..hours).map(|h| (ref_p[i][h] / true_p[i][h]).ln()).collect();
        truth_assets.insert(
            a.id.clone(),
            AssetTruth {
                var_eta: var_pop(&eta),
                var_zeta: var_pop(&zeta),
                eta,
                zeta,
                true_prices: true_p[i].clone(),
                lambda: a.lambda,
            },
        );
        depth_map.insert(
            a.id.clone(),
            (0..hours)
                .map(|h| DepthSnapshot { asset: a.id.clone(), time: times[h], depth: depth[i][h], venue: "amm".into() })
                .collect(),
        );
    }
    oracles.insert(
        debt_id.clone(),
        OracleSeries {
            asset: debt_id.clone(),
            points: times.iter().map(|t| (*t, 1.0)).collect(),
            update_times: times.iter().copied().step_by(24).collect(),
            reference_points: cfg.include_reference.then(|| times.iter().map(|t| (*t, 1.0)).collect()),
        },
    );
    depth_map.insert(
        debt_id.clone(),
        times
            .iter()
            .step_by(24)
            .map(|t| DepthSnapshot { asset: debt_id.clone(), time: *t, depth: 1.0e9, venue: "amm".into() })
            .collect(),
    );
    let gas_points = if cfg.include_gas {
        (0..hours)
            .map(|h| GasPoint { time: times[h], gas_price: gas[h], priority_fee: Some(gas[h] * g.priority_frac) })
            .collect()
    } else {
        Vec::new()
    };
    let params = vec![ParamVector {
        effective_time: cfg.start,
        ltv0: cfg.assets.iter().map(|a| (a.id.clone(), a.ltv0)).collect(),
        lltv: cfg.assets.iter().map(|a| (a.id.clone(), a.lltv)).collect(),
        liq_incentive: cfg.liq_incentive,
        close_factor: cfg.close_factor,
        caps: cfg.assets.iter().map(|a| (a.id.clone(), 0.0)).collect(),
        timelock_hours: cfg.timelock_hours,
        u_max: 1.0,
    }];
    let asset_kinds = cfg.assets.iter().map(|a| (a.id.clone(), a.kind)).collect();
    let bundle = DataBundle {
        snapshots,
        positions,
        liquidations: events,
        oracles,
        depth: depth_map,
        gas: gas_points,
        params,
        rehypo_meta: BTreeMap::new(),
        asset_kinds,
    };
    bundle.validate()?;
    let n_fail = triggers.iter().filter(|t| t.failed).count();
    let failure_prob = (!triggers.is_empty()).then(|| n_fail as f64 / triggers.len() as f64);
    let truth = Truth {
        seed,
        assets: truth_assets,
        triggers,
        failure_prob,
        bad_debt_total,
        tau_max_hours: cfg.tau_max_hours,
    };
    Ok((bundle, truth))
}

fn close_trigger(
    events: &mut Vec<LiquidationEvent>,
    triggers: &mut Vec<TriggerTruth>,
    cfg: &WorldConfig,
    b: &Borrower,
    open: OpenTrigger,
) {
    let repay = if open.last_repay > 0.0 { open.last_repay } else { cfg.close_factor * b.debt };
    events.push(LiquidationEvent {
        trigger_time: cfg.time(open.hour),
        completion_time: None,
        account: b.account.clone(),
        repaid_debt: [(cfg.debt_asset.clone(), RepaidLeg { quantity: repay, oracle_price: 1.0 })].into(),
        seized_collateral: BTreeMap::new(),
        gas_units: cfg.gas.units_per_liquidation,
        gas_price: 0.0,
        mev_cost: 0.0,
        fees: 0.0,
    });
    triggers.push(TriggerTruth {
        trigger_time: cfg.time(open.hour),
        account: b.account.clone(),
        failed: true,
        bad_debt: open.bad_debt,
    });
}

/// Writes the bundle CSVs and `truth.json` into `dir`.
pub fn write_world(bundle: &DataBundle, truth: &Truth, dir: &Path) -> Result<()> {
    write_bundle(bundle, dir)?;
    let json = serde_json::to_vec_pretty(truth)?;
    write_atomic(&dir.join("truth.json"), &json)
}

// ---------------------------------------------------------------------------
// oracles

/// Crossing probability of `max_{s≤T} (u0 + μs + σW_s) ≥ b` (reflection
/// principle). Drift and sigma per hour.
pub fn first_passage_analytic(u0: f64, barrier: f64, drift: f64, sigma: f64, horizon: f64) -> f64 {
    let a = barrier - u0;
    if a <= 0.0 {
        return 1.0;
    }
    if sigma == 0.0 {
        return if drift * horizon >= a { 1.0 } else { 0.0 };
    }
    let s = sigma * horizon.sqrt();
    let mt = drift * horizon;
    let p = norm_cdf((mt - a) / s) + (2.0 * drift * a / (sigma * sigma)).exp() * norm_cdf((-a - mt) / s);
    p.clamp(0.0, 1.0)
}

/// One collateral line for the brute-force shortfall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteLine {
    pub price: f64,
    pub quantity: f64,
    pub notional: f64,
    pub depth: f64,
    pub lambda: f64,
}

/// `Δ = (L - A)⁺` with `A = Σ P·max(0, 1 - λQ/D)·C - costs`, evaluated
/// directly.
pub fn brute_force_shortfall(liabilities: f64, lines: &[BruteLine], costs: f64) -> f64 {
    let mut a = -costs;
    for l in lines {
        let f = if l.notional == 0.0 { 0.0 } else { l.lambda * l.notional / l.depth };
        let exec = if f >= 1.0 { 0.0 } else { l.price - l.price * f };
        a += exec * l.quantity;
    }
    if liabilities > a {
        liabilities - a
    } else {
        0.0
    }
}

/// Observations from `ε = λ_a x (+ noise)` with `x` uniform on
/// `[0.001, 0.2]`. With `clr_beta`, `ε` also loads on an independent
/// covariate.
pub fn impact_observations(
    lambdas: &BTreeMap<AssetId, f64>,
    n_per_asset: usize,
    noise_sd: f64,
    clr_beta: Option<f64>,
    start: Timestamp,
    seed: u64,
) -> Vec<ImpactObs> {
    let mut out = Vec::new();
    for (k, (a, lam)) in lambdas.iter().enumerate() {
        let mut r = rng::stream(seed, "impact", k as u64);
        for i in 0..n_per_asset {
            let x = 0.001 + 0.199 * r.random::<f64>();
            let z: f64 = StandardNormal.sample(&mut r);
            let c = r.random::<f64>();
            let mut eps = lam * x + noise_sd * z;
            let clr = clr_beta.map(|b| {
                eps += b * x * c;
                c
            });
            out.push(ImpactObs { asset: a.clone(), time: start + i as i64 * SECONDS_PER_HOUR, x, clr, eps });
        }
    }
    out
}

/// Backtest population: episode start coverage V1 and whether a shortfall
/// followed within the horizon. Each vault has coverage `ACR` and scenario
/// slippage `ε̄`; the realized slippage and price move are noisy, and a
/// shortfall happens when realized coverage drops below one.
pub fn backtest_population(n: usize, seed: u64, rep: u64) -> Vec<(f64, bool)> {
    let mut r = rng::stream(seed, "backtest", rep);
    (0..n)
        .map(|_| {
            let acr = 1.0 + 0.5 * r.random::<f64>();
            let eps = 0.2 * r.random::<f64>();
            let v1 = acr * (1.0 - eps);
            let z1: f64 = StandardNormal.sample(&mut r);
            let z2: f64 = StandardNormal.sample(&mut r);
            let eps_real = (eps + 0.05 * z1).clamp(0.0, 0.999);
            let realized = acr * (1.0 - eps_real) * (0.08 * z2).exp();
            (v1, realized < 1.0)
        })
        .collect()
}

/// Outcomes drawn independently of V1.
pub fn independent_population(n: usize, p: f64, seed: u64, rep: u64) -> Vec<(f64, bool)> {
    let mut r = rng::stream(seed, "independent", rep);
    (0..n)
        .map(|_| {
            let v1 = 0.8 + 0.6 * r.random::<f64>();
            (v1, r.random::<f64>() < p)
        })
        .collect()
}

/// Small, volatile world used for the partial-identification checks.
pub fn pi_world(index: u64) -> WorldConfig {
    let mut c = WorldConfig {
        hours: 60 * 24,
        positions_every_hours: 24,
        ..WorldConfig::default()
    };
    c.population.n_borrowers = 60;
    c.population.hf_min = 1.01;
    c.population.refresh_per_day = 0.5;
    c.assets.truncate(1);
    c.assets[0].vol_annual = 0.8 + 0.1 * (index % 5) as f64;
    c.assets[0].oracle_lag_hours = 1 + (index % 3) as u32;
    c.assets[0].oracle_interval_hours = 1 + (index % 4) as u32;
    c.gas.stress_coupling = 8.0;
    c
}

/// `Var(η)` and mean of `η` in the truth sidecar for one asset.
pub fn eta_moments(t: &AssetTruth) -> (f64, f64) {
    (var_pop(&t.eta), mean(&t.eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> WorldConfig {
        let mut c = WorldConfig { hours: 30 * 24, ..WorldConfig::default() };
        c.population.n_borrowers = 40;
        c
    }

    #[test]
    fn deterministic() {
        let c = small();
        let (b1, t1) = generate(&c, 7).unwrap();
        let (b2, t2) = generate(&c, 7).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(t1, t2);
        let (b3, _) = generate(&c, 8).unwrap();
        assert_ne!(b1, b3);
    }

    #[test]
    fn zero_vol_world_is_quiet() {
        let mut c = small();
        for a in &mut c.assets {
            a.vol_annual = 0.0;
            a.jump_rate_per_year = 0.0;
            a.exec_noise = 0.0;
        }
        let (b, _) = generate(&c, 1).unwrap();
        assert!(b.liquidations.is_empty());
        for s in b.oracles.values() {
            assert!(s.points.iter().all(|p| p.1 == s.points[0].1));
        }
    }

    #[test]
    fn crash_clusters_liquidations() {
        let mut c = small();
        for a in &mut c.assets {
            a.vol_annual = 0.05;
            a.jump_rate_per_year = 0.0;
        }
        c.population.refresh_per_day = 0.0;
        c.crash = Some(Crash { hour: 100, size: 0.3 });
        let (b, _) = generate(&c, 3).unwrap();
        let t100 = c.start + 100 * 3600;
        assert!(!b.liquidations.is_empty());
        assert!(b.liquidations.iter().all(|e| e.trigger_time >= t100));
        let first_day = b.liquidations.iter().filter(|e| e.trigger_time < t100 + 24 * 3600).count();
        assert!(first_day * 2 >= b.liquidations.len());
    }

    #[test]
    fn liquidator_indifference() {
        let (b, _) = generate(&small(), 11).unwrap();
        let pi = b.params[0].liq_incentive;
        let mut n = 0;
        for e in b.liquidations.iter().filter(|e| e.completion_time.is_some()) {
            let rep = e.repaid_value();
            let capped = e.seized_oracle_value() < rep * (1.0 + pi) * (1.0 - 1e-9);
            if capped {
                continue;
            }
            let c = e.execution_cost() / rep;
            let eps = 1.0 - e.gross_proceeds() / e.seized_oracle_value();
            let star = (c + eps) / (1.0 - eps);
            assert!(pi >= star - 1e-9, "executed below indifference: pi {pi} < {star}");
            n += 1;
        }
        assert!(n > 0);
    }

    #[test]
    fn analytic_first_passage() {
        assert_eq!(first_passage_analytic(1.0, 0.9, 0.0, 0.01, 24.0), 1.0);
        assert_eq!(first_passage_analytic(0.5, 1.0, 0.01, 0.0, 24.0), 0.0);
        assert_abs_diff_eq!(first_passage_analytic(0.9, 1.0, 0.0, 0.01, 24.0), 0.04123, epsilon = 1e-4);
    }

    #[test]
    fn brute_hand_example() {
        let l = BruteLine { price: 1.0, quantity: 110.0, notional: 50.0, depth: 100.0, lambda: 0.4 };
        assert_abs_diff_eq!(brute_force_shortfall(100.0, &[l], 0.0), 12.0, epsilon = 1e-12);
    }

    #[test]
    fn bundle_round_trips() {
        let (b, t) = generate(&small(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_world(&b, &t, dir.path()).unwrap();
        let kinds = crate::ingest::IngestConfig {
            asset_kinds: b.asset_kinds.clone(),
            ..Default::default()
        };
        let back = crate::ingest::load_bundle(dir.path(), &kinds).unwrap();
        assert_eq!(back, b);
    }
}
