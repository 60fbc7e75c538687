//! The five Level 1 metrics.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{false_solvency_prob, UtilizationFit};
use crate::rng;
use crate::types::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricName {
    V1,
    V2,
    V3,
    V4,
    V4a,
    V4b,
    V5,
    V5ES,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Units {
    Ratio,
    UnitOfAccount,
    Probability,
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: MetricName,
    /// `None` when the metric is undefined for the available data.
    pub value: Option<f64>,
    pub units: Units,
    pub scenario_id: Option<String>,
    pub bounds: Option<(f64, f64)>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl MetricValue {
    pub fn new(name: MetricName, value: Option<f64>, units: Units) -> Self {
        MetricValue {
            name,
            value,
            units,
            scenario_id: None,
            bounds: None,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn scenario(mut self, id: impl Into<String>) -> Self {
        self.scenario_id = Some(id.into());
        self
    }

    pub fn diag(mut self, k: &str, v: f64) -> Self {
        self.diagnostics.insert(k.into(), v);
        self
    }
}

// ---------------------------------------------------------------------------
// V1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V1Result {
    pub per_scenario: BTreeMap<String, f64>,
    pub overall: f64,
    pub worst_scenario: String,
    /// Weighted deviation at which coverage falls to one: `1 - 1/ACR`.
    pub breach_threshold: f64,
    pub acr: f64,
}

/// `V1(s) = ACR · (1 - Σ ω_a ε_a(s))`, minimized over scenarios. Missing
/// assets in a scenario's slippage map count as zero deviation.
pub fn v1_stressed_coverage(
    weights: &BTreeMap<AssetId, f64>,
    slippage: &BTreeMap<String, BTreeMap<AssetId, f64>>,
    acr: f64,
) -> Result<V1Result> {
    if slippage.is_empty() {
        return Err(Error::domain("V1 needs at least one scenario"));
    }
    if !(acr >= 0.0 && acr.is_finite()) {
        return Err(Error::domain("ACR must be finite and non-negative"));
    }
    let mut per = BTreeMap::new();
    let mut worst: Option<(String, f64)> = None;
    for (id, eps) in slippage {
        let mut bar = 0.0;
        for (a, e) in eps {
            if !(0.0..1.0).contains(e) {
                return Err(Error::domain(format!("slippage for {a} in {id} outside [0,1): {e}")));
            }
            bar += weights.get(a).copied().unwrap_or(0.0) * e;
        }
        let v = acr * (1.0 - bar);
        if worst.as_ref().is_none_or(|w| v < w.1) {
            worst = Some((id.clone(), v));
        }
        per.insert(id.clone(), v);
    }
    let (worst_scenario, overall) = worst.expect("nonempty");
    Ok(V1Result {
        per_scenario: per,
        overall,
        worst_scenario,
        breach_threshold: if acr > 0.0 { 1.0 - 1.0 / acr } else { f64::NEG_INFINITY },
        acr,
    })
}

// ---------------------------------------------------------------------------
// V2

/// One collateral line in the V2 model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2Asset {
    pub asset: AssetId,
    pub price: f64,
    pub quantity: f64,
    /// Pool depth in unit of account; `None` when unobserved.
    pub depth: Option<f64>,
    pub lambda: f64,
    pub sigma_per_sqrt_hour: f64,
    pub drawdown: f64,
    pub depth_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BorrowerState {
    pub collateral: BTreeMap<AssetId, f64>,
    pub debt_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VolumeModel {
    /// Total liquidation notional at stressed oracle prices, split across
    /// assets by collateral weight.
    Fixed(f64),
    /// Positions with HF < 1 at path prices are liquidated: the liquidator
    /// repays `close_factor · debt` and seizes `(1 + π)` times that value.
    Positions {
        borrowers: Vec<BorrowerState>,
        lltv: BTreeMap<AssetId, f64>,
        close_factor: f64,
        liq_incentive: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2Input {
    pub liabilities: f64,
    pub assets: Vec<V2Asset>,
    pub horizon_hours: f64,
    pub volume: VolumeModel,
    /// Execution costs (gas, MEV) deducted from liquidation value.
    pub exec_cost: f64,
    /// Exponent on the realized-volatility ratio in the depth contraction.
    pub depth_vol_k: f64,
    /// Loop amplification `λ·(1 + γ·CLR)`.
    pub gamma: f64,
    pub clr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2Result {
    pub v2: f64,
    pub loss_rate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    /// Paths on which linear impact pushed some execution price below zero.
    pub clipped_paths: usize,
    pub mean_volume: f64,
}

/// Realized-volatility ratio `max(1, |ln(1-d)| / (σ √h))`.
pub fn vol_ratio(drawdown: f64, sigma_per_sqrt_hour: f64, horizon_hours: f64) -> f64 {
    let scen = (1.0 - drawdown).ln().abs();
    let base = sigma_per_sqrt_hour * horizon_hours.sqrt();
    if base <= 0.0 {
        return 1.0;
    }
    (scen / base).max(1.0)
}

pub fn stressed_depth(a: &V2Asset, horizon_hours: f64, k: f64) -> Option<f64> {
    a.depth
        .map(|d| d * a.depth_factor / vol_ratio(a.drawdown, a.sigma_per_sqrt_hour, horizon_hours).powf(k))
}

/// One evaluated Monte Carlo path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathOutcome {
    pub shortfall: f64,
    pub volume: f64,
    pub clipped: bool,
}

/// Liquidation value and shortfall for given stressed prices and per-asset
/// liquidation notionals. Every unit of collateral is marked at the impacted
/// execution price `P·max(0, 1 - λx)`, `x = notional / depth`.
pub fn evaluate_path(
    input: &V2Input,
    prices: &[f64],
    depths: &[Option<f64>],
    notional: &[f64],
) -> Result<PathOutcome> {
    let mut a_liq = 0.0;
    let mut clipped = false;
    for (i, a) in input.assets.iter().enumerate() {
        let q = notional[i];
        let x = if q > 0.0 {
            match depths[i] {
                Some(d) if d > 0.0 => q / d,
                _ => {
                    return Err(Error::Infeasible(format!(
                        "positive liquidation volume in {} with zero depth",
                        a.asset
                    )))
                }
            }
        } else {
            0.0
        };
        let lam = a.lambda * (1.0 + input.gamma * input.clr);
        let s = lam * x;
        if s > 1.0 {
            clipped = true;
        }
        a_liq += prices[i] * (1.0 - s).max(0.0) * a.quantity;
    }
    a_liq -= input.exec_cost;
    Ok(PathOutcome {
        shortfall: (input.liabilities - a_liq).max(0.0),
        volume: notional.iter().sum(),
        clipped,
    })
}

/// Per-asset liquidation notional at stressed prices.
pub fn liquidation_notional(input: &V2Input, prices: &[f64]) -> Vec<f64> {
    let n = input.assets.len();
    match &input.volume {
        VolumeModel::Fixed(total) => {
            let values: Vec<f64> = input.assets.iter().zip(prices).map(|(a, p)| a.quantity * p).collect();
            let sum: f64 = values.iter().sum();
            if sum <= 0.0 {
                return vec![0.0; n];
            }
            values.iter().map(|v| total * v / sum).collect()
        }
        VolumeModel::Positions {
            borrowers,
            lltv,
            close_factor,
            liq_incentive,
        } => {
            let index: BTreeMap<&AssetId, usize> =
                input.assets.iter().enumerate().map(|(i, a)| (&a.asset, i)).collect();
            let mut out = vec![0.0; n];
            for b in borrowers {
                if b.debt_value <= 0.0 {
                    continue;
                }
                let mut cv = 0.0;
                let mut adj = 0.0;
                for (a, q) in &b.collateral {
                    let p = index.get(a).map(|i| prices[*i]).unwrap_or(0.0);
                    cv += p * q;
                    adj += lltv.get(a).copied().unwrap_or(0.0) * p * q;
                }
                if adj >= b.debt_value || cv <= 0.0 {
                    continue;
                }
                let seize = (close_factor * b.debt_value * (1.0 + liq_incentive)).min(cv);
                for (a, q) in &b.collateral {
                    if let Some(i) = index.get(a) {
                        out[*i] += seize * prices[*i] * q / cv;
                    }
                }
            }
            out
        }
    }
}

fn path_prices(input: &V2Input, rng: &mut impl Rng) -> Vec<f64> {
    input
        .assets
        .iter()
        .map(|a| {
            let z: f64 = StandardNormal.sample(rng);
            let s = a.sigma_per_sqrt_hour * input.horizon_hours.sqrt();
            a.price * (1.0 - a.drawdown) * (s * z - 0.5 * s * s).exp()
        })
        .collect()
}

/// Monte Carlo V2. Path `i` always uses stream `(seed, "v2", i)`, so runs
/// that differ only in λ, volume or scenario share random numbers.
pub fn v2_expected_shortfall(input: &V2Input, n_paths: usize, seed: u64) -> Result<V2Result> {
    if n_paths == 0 {
        return Err(Error::domain("n_paths must be >= 1"));
    }
    if !(input.liabilities > 0.0) {
        return Err(Error::domain("liabilities must be positive"));
    }
    for a in &input.assets {
        if a.lambda < 0.0 || !a.lambda.is_finite() {
            return Err(Error::domain(format!("lambda for {} must be >= 0", a.asset)));
        }
        if !(0.0..1.0).contains(&a.drawdown) || !(a.depth_factor > 0.0 && a.depth_factor <= 1.0) {
            return Err(Error::domain(format!("scenario shock for {} out of range", a.asset)));
        }
    }
    let depths: Vec<Option<f64>> = input
        .assets
        .iter()
        .map(|a| stressed_depth(a, input.horizon_hours, input.depth_vol_k))
        .collect();
    let outcomes: Vec<Result<PathOutcome>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, "v2", i as u64);
            let prices = path_prices(input, &mut r);
            let notional = liquidation_notional(input, &prices);
            evaluate_path(input, &prices, &depths, &notional)
        })
        .collect();
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut vol = 0.0;
    let mut clipped = 0;
    for o in outcomes {
        let o = o?;
        sum += o.shortfall;
        sum2 += o.shortfall * o.shortfall;
        vol += o.volume;
        clipped += usize::from(o.clipped);
    }
    let n = n_paths as f64;
    let m = sum / n;
    let var = (sum2 / n - m * m).max(0.0);
    Ok(V2Result {
        v2: m,
        loss_rate: m / input.liabilities,
        std_error: (var / n).sqrt(),
        n_paths,
        clipped_paths: clipped,
        mean_volume: vol / n,
    })
}

// ---------------------------------------------------------------------------
// V3

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V3Result {
    pub probability: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

/// Probability that utilization reaches `barrier` within `horizon_hours`.
///
/// Hourly Euler steps `U' = max(0, U + μ + σZ + J)`. Between steps the path
/// is treated as a Brownian bridge, so a crossing inside the hour is counted
/// with probability `exp(-2 (b-U)(b-U') / σ²)`. Path `i` uses stream
/// `(seed, "v3", i)` and consumes the same draws every step whether or not a
/// jump fires, which keeps paths aligned across `u0` and the jump overlay.
pub fn v3_boundary_hitting(
    u0: f64,
    fit: &UtilizationFit,
    barrier: f64,
    horizon_hours: usize,
    n_paths: usize,
    seed: u64,
    overlay: f64,
) -> Result<V3Result> {
    if n_paths == 0 {
        return Err(Error::domain("n_paths must be >= 1"));
    }
    if !(0.0..=1.0).contains(&u0) {
        return Err(Error::domain(format!("u0 must lie in [0,1], got {u0}")));
    }
    if horizon_hours == 0 {
        return Err(Error::domain("horizon must be at least one step"));
    }
    if overlay < 0.0 {
        return Err(Error::domain("jump overlay must be >= 0"));
    }
    let mu = fit.drift_per_hour;
    let sigma = fit.sigma_per_sqrt_hour;
    let p_jump = if fit.jump_sizes.is_empty() {
        0.0
    } else {
        1.0 - (-fit.jump_rate_per_hour * overlay).exp()
    };
    let sizes = &fit.jump_sizes;
    let hits: usize = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            if u0 >= barrier {
                return 1;
            }
            let mut r = rng::stream(seed, "v3", i as u64);
            let mut u = u0;
            for _ in 0..horizon_hours {
                let z: f64 = StandardNormal.sample(&mut r);
                let uj: f64 = r.random();
                let ui: f64 = r.random();
                let ub: f64 = r.random();
                let jump = if uj < p_jump {
                    sizes[((ui * sizes.len() as f64) as usize).min(sizes.len() - 1)]
                } else {
                    0.0
                };
                let next = (u + mu + sigma * z + jump).max(0.0);
                if next >= barrier {
                    return 1;
                }
                if sigma > 0.0 {
                    let pb = (-2.0 * (barrier - u) * (barrier - next) / (sigma * sigma)).exp();
                    if ub < pb {
                        return 1;
                    }
                }
                u = next;
            }
            0
        })
        .collect::<Vec<usize>>()
        .into_iter()
        .sum();
    let p = hits as f64 / n_paths as f64;
    Ok(V3Result {
        probability: p,
        std_error: (p * (1.0 - p) / n_paths as f64).sqrt(),
        n_paths,
    })
}

// ---------------------------------------------------------------------------
// V4

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RwaInput {
    pub f_rwa: f64,
    pub nav_latency_days: f64,
    pub drift_down_per_day: f64,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V4Input {
    /// Liquidation buffer as a price gap, `1 - ltv0/lltv`.
    pub eta_bar: f64,
    pub sigma_per_sqrt_hour: f64,
    pub staleness_hours: f64,
    pub benefit: f64,
    pub cost: f64,
    pub liabilities: f64,
    pub rwa: Option<RwaInput>,
    /// Market closure length in hours for assets with off-chain trading hours.
    pub closure_hours: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V4Result {
    pub v4a: f64,
    pub v4b: f64,
    pub v4: f64,
    pub false_solvency: f64,
    pub effective_staleness_hours: f64,
    pub nav_floor: Option<f64>,
    pub degenerate_manipulation_inputs: bool,
    pub no_buffer: bool,
}

/// `f · L · δ · drift / P`.
pub fn nav_shortfall_floor(f_rwa: f64, liabilities: f64, nav_latency_days: f64, drift_down_per_day: f64, price: f64) -> Result<f64> {
    if !(price > 0.0) {
        return Err(Error::domain("price must be positive"));
    }
    if [f_rwa, liabilities, nav_latency_days].iter().any(|v| *v < 0.0) {
        return Err(Error::domain("NAV inputs must be non-negative"));
    }
    Ok(f_rwa * liabilities * nav_latency_days * drift_down_per_day.abs() / price)
}

/// Expected absolute open gap `P · σ_annual · √(days/365)`.
pub fn gap_risk(price: f64, sigma_annual: f64, closure_days: f64) -> f64 {
    price * sigma_annual * (closure_days / 365.0).sqrt()
}

pub fn v4_oracle_integrity(input: &V4Input) -> Result<V4Result> {
    if !(input.liabilities > 0.0) {
        return Err(Error::domain("liabilities must be positive"));
    }
    if input.cost < 0.0 || input.benefit < 0.0 {
        return Err(Error::domain("manipulation cost and benefit must be >= 0"));
    }
    let delta = input.staleness_hours.max(input.closure_hours.unwrap_or(0.0));
    let no_buffer = input.eta_bar <= 0.0;
    let p = if no_buffer {
        if input.sigma_per_sqrt_hour * delta.sqrt() > 0.0 {
            0.5
        } else {
            0.0
        }
    } else {
        false_solvency_prob(input.eta_bar, input.sigma_per_sqrt_hour, delta)?
    };
    let v4a = 1.0 - p;
    let degenerate = input.cost == 0.0 && input.benefit == 0.0;
    let v4b = if input.cost >= input.benefit {
        1.0
    } else {
        (input.cost / input.benefit).clamp(0.0, 1.0)
    };
    let mut v4 = v4a * v4b;
    let mut nav_floor = None;
    if let Some(r) = &input.rwa {
        let floor = nav_shortfall_floor(r.f_rwa, input.liabilities, r.nav_latency_days, r.drift_down_per_day, r.price)?;
        v4 = v4.min((1.0 - floor / input.liabilities).clamp(0.0, 1.0));
        nav_floor = Some(floor);
    }
    Ok(V4Result {
        v4a,
        v4b,
        v4,
        false_solvency: p,
        effective_staleness_hours: delta,
        nav_floor,
        degenerate_manipulation_inputs: degenerate,
        no_buffer,
    })
}

// ---------------------------------------------------------------------------
// V5

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V5Result {
    pub v5: f64,
    pub v5_es: f64,
    pub pi_star: Option<f64>,
    pub n_triggers: usize,
    pub n_stalled: usize,
    pub rho_g: Option<f64>,
    /// Weighted by repaid debt notional (false: plain counts).
    pub debt_weighted: bool,
    pub default_shortfall_given_failure: bool,
}

/// `(C + ε) / (1 - ε)`.
pub fn pi_star(cost_ratio: f64, eps: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::domain(format!("slippage must lie in [0,1), got {eps}")));
    }
    if cost_ratio < 0.0 {
        return Err(Error::domain("cost ratio must be >= 0"));
    }
    Ok((cost_ratio + eps) / (1.0 - eps))
}

pub fn stalled(e: &LiquidationEvent, tau_max_hours: f64) -> bool {
    match e.hours_to_completion() {
        None => true,
        Some(h) => h > tau_max_hours,
    }
}

fn trigger_weights(events: &[LiquidationEvent]) -> (Vec<f64>, bool) {
    let w: Vec<f64> = events.iter().map(LiquidationEvent::repaid_value).collect();
    if w.iter().sum::<f64>() > 0.0 {
        (w, true)
    } else {
        (vec![1.0; events.len()], false)
    }
}

/// Execution viability over the trigger set. `shortfall_given_failure`
/// defaults to the mean oracle-valued debt of stalled triggers.
pub fn v5_execution_viability(
    events: &[LiquidationEvent],
    tau_max_hours: f64,
    rho_g: Option<f64>,
    shortfall_given_failure: Option<f64>,
) -> Result<V5Result> {
    if events.is_empty() {
        return Err(Error::Undefined("V5: no liquidation triggers".into()));
    }
    if !(tau_max_hours > 0.0) {
        return Err(Error::domain("tau_max must be positive"));
    }
    let (w, weighted) = trigger_weights(events);
    let total: f64 = w.iter().sum();
    let mut failed = 0.0;
    let mut n_stalled = 0;
    let mut stalled_debt = 0.0;
    for (e, wi) in events.iter().zip(&w) {
        if stalled(e, tau_max_hours) {
            failed += wi;
            n_stalled += 1;
            stalled_debt += e.repaid_value();
        }
    }
    let fail_frac = failed / total;
    let sgf = shortfall_given_failure.unwrap_or(if n_stalled > 0 {
        stalled_debt / n_stalled as f64
    } else {
        0.0
    });
    let mut pis = Vec::new();
    for e in events.iter().filter(|e| e.completion_time.is_some()) {
        let repaid = e.repaid_value();
        if repaid <= 0.0 {
            continue;
        }
        if let Ok(p) = pi_star(e.execution_cost() / repaid, e.weighted_deviation().min(1.0 - 1e-12)) {
            pis.push(p);
        }
    }
    Ok(V5Result {
        v5: 1.0 - fail_frac,
        v5_es: sgf * fail_frac,
        pi_star: (!pis.is_empty()).then(|| crate::stats::mean(&pis)),
        n_triggers: events.len(),
        n_stalled,
        rho_g,
        debt_weighted: weighted,
        default_shortfall_given_failure: shortfall_given_failure.is_none(),
    })
}

/// Viability indicator `repaid·((1+π)(1-ε) - 1) ≥ gas + MEV`.
pub fn viable(e: &LiquidationEvent, pi: f64) -> bool {
    let repaid = e.repaid_value();
    let eps = e.weighted_deviation();
    repaid * ((1.0 + pi) * (1.0 - eps) - 1.0) >= e.execution_cost()
}

/// V5 computed from the viability indicator at bonus `pi`.
pub fn v5_from_viability(events: &[LiquidationEvent], pi: f64) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::Undefined("V5: no liquidation triggers".into()));
    }
    let (w, _) = trigger_weights(events);
    let total: f64 = w.iter().sum();
    let ok: f64 = events.iter().zip(&w).filter(|(e, _)| viable(e, pi)).map(|(_, w)| w).sum();
    Ok(ok / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn eth() -> AssetId {
        AssetId::from("ETH")
    }

    fn one_asset(lambda: f64, depth: f64, sigma: f64) -> V2Input {
        V2Input {
            liabilities: 100.0,
            assets: vec![V2Asset {
                asset: eth(),
                price: 1.0,
                quantity: 110.0,
                depth: Some(depth),
                lambda,
                sigma_per_sqrt_hour: sigma,
                drawdown: 0.0,
                depth_factor: 1.0,
            }],
            horizon_hours: 24.0,
            volume: VolumeModel::Fixed(50.0),
            exec_cost: 0.0,
            depth_vol_k: 1.0,
            gamma: 0.0,
            clr: 0.0,
        }
    }

    #[test]
    fn v1_cases() {
        let w: BTreeMap<AssetId, f64> = [(eth(), 1.0)].into();
        let sc = |e: f64| -> BTreeMap<String, BTreeMap<AssetId, f64>> { [("s".to_string(), [(eth(), e)].into())].into() };
        assert_eq!(v1_stressed_coverage(&w, &sc(0.0), 1.25).unwrap().overall, 1.25);
        let r = v1_stressed_coverage(&w, &sc(0.2), 1.25).unwrap();
        assert_abs_diff_eq!(r.overall, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.breach_threshold, 0.2, epsilon = 1e-15);
        let two: BTreeMap<String, BTreeMap<AssetId, f64>> =
            [("a".to_string(), [(eth(), 0.05)].into()), ("b".to_string(), [(eth(), 0.25)].into())].into();
        let r = v1_stressed_coverage(&w, &two, 1.25).unwrap();
        assert_abs_diff_eq!(r.overall, 0.9375, epsilon = 1e-15);
        assert_eq!(r.worst_scenario, "b");
        assert!(v1_stressed_coverage(&w, &BTreeMap::new(), 1.25).is_err());
        assert!(v1_stressed_coverage(&w, &sc(1.0), 1.25).is_err());
    }

    #[test]
    fn v2_zero_lambda_no_shortfall() {
        let r = v2_expected_shortfall(&one_asset(0.0, 100.0, 0.0), 100, 1).unwrap();
        assert_eq!(r.v2, 0.0);
    }

    #[test]
    fn v2_one_path_arithmetic() {
        // λ·x = 0.4 · 50/100 = 0.2
        let r = v2_expected_shortfall(&one_asset(0.4, 100.0, 0.0), 1, 1).unwrap();
        assert_abs_diff_eq!(r.v2, 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.loss_rate, 0.12, epsilon = 1e-14);
    }

    #[test]
    fn v2_zero_depth_infeasible_and_clip_flagged() {
        let mut inp = one_asset(0.4, 100.0, 0.0);
        inp.assets[0].depth = None;
        assert!(matches!(v2_expected_shortfall(&inp, 1, 1), Err(Error::Infeasible(_))));
        let r = v2_expected_shortfall(&one_asset(10.0, 100.0, 0.0), 1, 1).unwrap();
        assert_eq!(r.clipped_paths, 1);
        assert_abs_diff_eq!(r.v2, 100.0);
    }

    #[test]
    fn v2_positions_volume() {
        let mut inp = one_asset(0.1, 1000.0, 0.0);
        inp.assets[0].drawdown = 0.2;
        inp.volume = VolumeModel::Positions {
            borrowers: vec![
                BorrowerState { collateral: [(eth(), 10.0)].into(), debt_value: 8.0 },
                BorrowerState { collateral: [(eth(), 10.0)].into(), debt_value: 5.0 },
            ],
            lltv: [(eth(), 0.85)].into(),
            close_factor: 0.5,
            liq_incentive: 0.05,
        };
        let prices = [0.8];
        let q = liquidation_notional(&inp, &prices);
        // first: 0.85·8 = 6.8 < 8 → seize 0.5·8·1.05 = 4.2; second healthy
        assert_abs_diff_eq!(q[0], 4.2, epsilon = 1e-12);
    }

    #[test]
    fn v3_cases() {
        let fit = UtilizationFit::diffusion(0.0, 0.01);
        assert_eq!(v3_boundary_hitting(1.0, &fit, 1.0, 24, 10, 1, 1.0).unwrap().probability, 1.0);
        let det = UtilizationFit::diffusion(0.01, 0.0);
        assert_eq!(v3_boundary_hitting(0.95, &det, 1.0, 10, 10, 1, 1.0).unwrap().probability, 1.0);
        assert_eq!(v3_boundary_hitting(0.5, &det, 1.0, 10, 10, 1, 1.0).unwrap().probability, 0.0);
        assert!(v3_boundary_hitting(0.5, &det, 1.0, 10, 0, 1, 1.0).is_err());
    }

    #[test]
    fn v3_monotone_in_overlay_for_upward_jumps() {
        let mut fit = UtilizationFit::diffusion(0.0, 0.005);
        fit.jump_sizes = vec![0.05, 0.08];
        fit.jump_rate_per_hour = 0.01;
        let mut prev = 0.0;
        for ov in [0.0, 1.0, 2.0, 5.0] {
            let p = v3_boundary_hitting(0.8, &fit, 1.0, 48, 4000, 3, ov).unwrap().probability;
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn v4_cases() {
        let base = V4Input {
            eta_bar: 0.1,
            sigma_per_sqrt_hour: 0.01,
            staleness_hours: 0.0,
            benefit: 1.0,
            cost: 100.0,
            liabilities: 100.0,
            rwa: None,
            closure_hours: None,
        };
        assert_eq!(v4_oracle_integrity(&base).unwrap().v4, 1.0);
        let r = v4_oracle_integrity(&V4Input {
            eta_bar: 1.6449,
            sigma_per_sqrt_hour: 1.0,
            staleness_hours: 1.0,
            benefit: 1.0,
            cost: 0.8,
            ..base.clone()
        })
        .unwrap();
        assert_abs_diff_eq!(r.v4, 0.76, epsilon = 1e-4);
        let r = v4_oracle_integrity(&V4Input { benefit: 0.0, cost: 0.0, ..base.clone() }).unwrap();
        assert!(r.degenerate_manipulation_inputs);
        assert_eq!(r.v4b, 1.0);
        let r = v4_oracle_integrity(&V4Input { closure_hours: Some(48.0), ..base.clone() }).unwrap();
        assert_eq!(r.effective_staleness_hours, 48.0);
        assert!(r.v4a < 1.0);
        let r = v4_oracle_integrity(&V4Input {
            rwa: Some(RwaInput { f_rwa: 0.5, nav_latency_days: 2.0, drift_down_per_day: 1.0, price: 100.0 }),
            ..base
        })
        .unwrap();
        assert_abs_diff_eq!(r.v4, 0.99, epsilon = 1e-12);
    }

    #[test]
    fn nav_and_gap() {
        assert_eq!(nav_shortfall_floor(0.0, 100.0, 2.0, 1.0, 100.0).unwrap(), 0.0);
        assert_abs_diff_eq!(nav_shortfall_floor(0.5, 100.0, 2.0, 1.0, 100.0).unwrap(), 1.0);
        assert_eq!(nav_shortfall_floor(0.5, 100.0, 2.0, 0.0, 100.0).unwrap(), 0.0);
        assert!(nav_shortfall_floor(0.5, 100.0, 2.0, 1.0, 0.0).is_err());
        assert_abs_diff_eq!(gap_risk(100.0, 0.2, 2.0), 20.0 * (2.0f64 / 365.0).sqrt(), epsilon = 1e-12);
    }

    fn ev(hours: Option<i64>, debt: f64) -> LiquidationEvent {
        LiquidationEvent {
            trigger_time: 0,
            completion_time: hours.map(|h| h * 3600),
            account: "u".into(),
            repaid_debt: [(AssetId::from("USD"), RepaidLeg { quantity: debt, oracle_price: 1.0 })].into(),
            seized_collateral: [(eth(), SeizedLeg { quantity: debt * 1.05, oracle_price: 1.0, execution_price: 0.98 })].into(),
            gas_units: 200_000.0,
            gas_price: 1e-6,
            mev_cost: 0.1,
            fees: 0.0,
        }
    }

    #[test]
    fn v5_cases() {
        assert_eq!(pi_star(0.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(pi_star(0.01, 0.05).unwrap(), 0.06 / 0.95, epsilon = 1e-15);
        let mut evs: Vec<LiquidationEvent> = (0..8).map(|_| ev(Some(1), 10.0)).collect();
        evs.push(ev(None, 10.0));
        evs.push(ev(Some(100), 10.0));
        let r = v5_execution_viability(&evs, 24.0, None, Some(5.0)).unwrap();
        assert_abs_diff_eq!(r.v5, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(r.v5_es, 1.0, epsilon = 1e-15);
        assert_eq!(r.n_stalled, 2);
        assert!(v5_execution_viability(&[], 24.0, None, None).is_err());
        // shorter window never raises V5
        let r2 = v5_execution_viability(&evs, 0.5, None, Some(5.0)).unwrap();
        assert!(r2.v5 <= r.v5);
    }

    #[test]
    fn viability_tends_to_one() {
        let evs: Vec<LiquidationEvent> = (1..20).map(|i| ev(Some(1), i as f64)).collect();
        let mut prev = 0.0;
        for pi in [0.0, 0.01, 0.05, 0.1, 1.0, 10.0] {
            let v = v5_from_viability(&evs, pi).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert_eq!(prev, 1.0);
    }

    proptest! {
        #[test]
        fn pi_star_increasing(c in 0.0f64..1.0, e in 0.0f64..0.9, d in 0.001f64..0.05) {
            let p = pi_star(c, e).unwrap();
            prop_assert!(pi_star(c + d, e).unwrap() > p);
            prop_assert!(pi_star(c, e + d).unwrap() > p);
        }

        #[test]
        fn v4_bounded(eta in -0.1f64..0.5, s in 0.0f64..0.1, d in 0.0f64..100.0, b in 0.0f64..10.0, c in 0.0f64..10.0) {
            let r = v4_oracle_integrity(&V4Input {
                eta_bar: eta, sigma_per_sqrt_hour: s, staleness_hours: d, benefit: b, cost: c,
                liabilities: 1.0, rwa: None, closure_hours: None,
            }).unwrap();
            for v in [r.v4, r.v4a, r.v4b] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn v1_concentration(c in 0.01f64..0.5, w in 0.5f64..0.9, spread in 0.0f64..0.09) {
            // ε(ω) = c·ω is convex; a mean-preserving spread of weights lowers V1
            let a = AssetId::from("A");
            let b = AssetId::from("B");
            let v1 = |wa: f64| {
                let wb = 1.0 - wa;
                let weights: BTreeMap<AssetId, f64> = [(a.clone(), wa), (b.clone(), wb)].into();
                let s: BTreeMap<String, BTreeMap<AssetId, f64>> =
                    [("s".into(), [(a.clone(), c * wa), (b.clone(), c * wb)].into())].into();
                v1_stressed_coverage(&weights, &s, 1.3).unwrap().overall
            };
            prop_assert!(v1(w + spread) <= v1(w) + 1e-15);
        }
    }
}
