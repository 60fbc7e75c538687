//! Backtesting, the Gap diagnostic and the partial-identification bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::stalled;
use crate::stats::{hourly_grid, mean, pearson, var_pop};
use crate::types::*;

pub const MIN_EPISODES: usize = 10;
pub const NEWTON_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 200;
/// One-sided 5% critical value for the Wald test on α₁.
pub const WALD_CRIT: f64 = -1.644_853_626_951_472;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha1_std_error: f64,
    pub wald_z: f64,
    pub n_episodes: usize,
    pub n_shortfalls: usize,
    pub iterations: usize,
    /// α₁ < 0 and significant at the one-sided 5% level.
    pub directional_pass: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression of the shortfall indicator on V1 at episode start.
pub fn backtest_v1(episodes: &[(f64, bool)]) -> Result<BacktestResult> {
    let n = episodes.len();
    if n < MIN_EPISODES {
        return Err(Error::insufficient("backtest episodes", n, MIN_EPISODES));
    }
    if episodes.iter().any(|e| !e.0.is_finite()) {
        return Err(Error::domain("non-finite V1 in backtest episodes"));
    }
    let n1 = episodes.iter().filter(|e| e.1).count();
    if n1 == 0 || n1 == n {
        return Err(Error::Degenerate(format!("single outcome class ({n1} of {n} shortfalls)")));
    }
    let max_of = |flag: bool| episodes.iter().filter(|e| e.1 == flag).map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
    let min_of = |flag: bool| episodes.iter().filter(|e| e.1 == flag).map(|e| e.0).fold(f64::INFINITY, f64::min);
    if max_of(true) <= min_of(false) || max_of(false) <= min_of(true) {
        return Err(Error::Degenerate(format!(
            "outcomes separated by V1 (shortfall V1 in [{}, {}], no-shortfall V1 in [{}, {}])",
            min_of(true),
            max_of(true),
            min_of(false),
            max_of(false)
        )));
    }
    let (mut b0, mut b1) = (0.0, 0.0);
    for it in 1..=MAX_NEWTON {
        let mut g = [0.0; 2];
        let mut info = [[0.0; 2]; 2];
        for (x, y) in episodes {
            let p = sigmoid(b0 + b1 * x);
            let r = f64::from(u8::from(*y)) - p;
            let w = p * (1.0 - p);
            g[0] += r;
            g[1] += r * x;
            info[0][0] += w;
            info[0][1] += w * x;
            info[1][1] += w * x * x;
        }
        info[1][0] = info[0][1];
        let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
        if !(det > 0.0) {
            return Err(Error::Degenerate("singular information matrix in logistic fit".into()));
        }
        let d0 = (info[1][1] * g[0] - info[0][1] * g[1]) / det;
        let d1 = (info[0][0] * g[1] - info[1][0] * g[0]) / det;
        b0 += d0;
        b1 += d1;
        if d0.abs().max(d1.abs()) < NEWTON_TOL {
            let se = (info[0][0] / det).sqrt();
            let z = b1 / se;
            return Ok(BacktestResult {
                alpha0: b0,
                alpha1: b1,
                alpha1_std_error: se,
                wald_z: z,
                n_episodes: n,
                n_shortfalls: n1,
                iterations: it,
                directional_pass: b1 < 0.0 && z < WALD_CRIT,
            });
        }
    }
    Err(Error::Degenerate("logistic fit did not converge".into()))
}

/// Mean shortfall-within-Δ* indicator minus mean timely-action indicator.
pub fn gap_diagnostic(time_to_shortfall: &[Option<f64>], delta_star_hours: f64, latencies: Option<&[f64]>) -> Result<f64> {
    if time_to_shortfall.is_empty() {
        return Err(Error::insufficient("gap episodes", 0, 1));
    }
    let hit = time_to_shortfall.iter().filter(|t| t.is_some_and(|h| h <= delta_star_hours)).count();
    let first = hit as f64 / time_to_shortfall.len() as f64;
    let second = match latencies {
        Some(l) if !l.is_empty() => l.iter().filter(|h| **h <= delta_star_hours).count() as f64 / l.len() as f64,
        _ => 0.0,
    };
    Ok(first - second)
}

pub const MIN_SPREAD_OBS: usize = 30;
pub const LEAD_LAG_HOURS: i32 = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pi1Result {
    /// `Var(S)` of the log spread `S = ln(oracle / reference)`.
    pub var_spread: f64,
    pub mean_spread: f64,
    pub bias_sign: i8,
    /// `(lag, corr(r_oracle[t], r_reference[t - lag]))`.
    pub lead_lag: Vec<(i32, Option<f64>)>,
    pub n_obs: usize,
}

/// Reported statistic for the oracle error channel. Aligned hourly prices.
pub fn pi1_oracle_bound(oracle: &[f64], reference: &[f64]) -> Result<Pi1Result> {
    assert_eq!(oracle.len(), reference.len());
    let n = oracle.len();
    if n < MIN_SPREAD_OBS {
        return Err(Error::insufficient("oracle/reference spread observations", n, MIN_SPREAD_OBS));
    }
    let s: Vec<f64> = oracle.iter().zip(reference).map(|(o, r)| (o / r).ln()).collect();
    let m = mean(&s);
    let sign = if m > 0.0 {
        1
    } else if m < 0.0 {
        -1
    } else {
        0
    };
    let ro: Vec<f64> = oracle.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let rr: Vec<f64> = reference.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let mut lead_lag = Vec::new();
    for lag in -LEAD_LAG_HOURS..=LEAD_LAG_HOURS {
        let k = lag.unsigned_abs() as usize;
        let c = if k + 2 > ro.len() {
            None
        } else if lag >= 0 {
            pearson(&ro[k..], &rr[..rr.len() - k])
        } else {
            pearson(&ro[..ro.len() - k], &rr[k..])
        };
        lead_lag.push((lag, c));
    }
    Ok(Pi1Result { var_spread: var_pop(&s), mean_spread: m, bias_sign: sign, lead_lag, n_obs: n })
}

/// PI-1 on an oracle series with a reference column, sampled hourly.
pub fn pi1_from_series(series: &OracleSeries) -> Result<Pi1Result> {
    let refs = series
        .reference_points
        .as_ref()
        .ok_or_else(|| Error::insufficient(format!("reference prices for {}", series.asset), 0, MIN_SPREAD_OBS))?;
    let (Some(a), Some(b)) = (refs.first(), refs.last()) else {
        return Err(Error::insufficient(format!("reference prices for {}", series.asset), 0, MIN_SPREAD_OBS));
    };
    let rg = hourly_grid(refs, a.0, b.0);
    let mut o = Vec::with_capacity(rg.len());
    let mut r = Vec::with_capacity(rg.len());
    for (t, p) in rg {
        if let Some(op) = series.price_at(t) {
            o.push(op);
            r.push(p);
        }
    }
    pi1_oracle_bound(&o, &r)
}

/// Share of triggers not liquidated within `tau_max_hours`.
pub fn pi2_liquidation_bound(events: &[LiquidationEvent], tau_max_hours: f64) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::Undefined("PI-2: no liquidation triggers".into()));
    }
    if tau_max_hours < 0.0 {
        return Err(Error::domain("tau_max must be >= 0"));
    }
    Ok(events.iter().filter(|e| stalled(e, tau_max_hours)).count() as f64 / events.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    #[test]
    fn separation_is_degenerate() {
        let eps: Vec<(f64, bool)> = (0..20).map(|i| (0.8 + 0.02 * i as f64, 0.8 + 0.02 * (i as f64) < 1.0)).collect();
        assert!(matches!(backtest_v1(&eps), Err(Error::Degenerate(_))));
        let one: Vec<(f64, bool)> = (0..20).map(|i| (i as f64, false)).collect();
        assert!(matches!(backtest_v1(&one), Err(Error::Degenerate(_))));
        assert!(matches!(backtest_v1(&one[..5]), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn decreasing_risk_detected() {
        let r = backtest_v1(&simkit::backtest_population(200, 17, 0)).unwrap();
        assert!(r.alpha1 < 0.0);
        assert!(r.directional_pass);
    }

    #[test]
    fn independent_outcomes_not_significant() {
        let r = backtest_v1(&simkit::independent_population(200, 0.3, 5, 0)).unwrap();
        assert!(r.alpha1.abs() < 2.0 * r.alpha1_std_error);
        assert!(!r.directional_pass);
    }

    #[test]
    fn newton_matches_likelihood_stationarity() {
        let data = simkit::backtest_population(300, 2, 1);
        let r = backtest_v1(&data).unwrap();
        // score equations vanish at the MLE
        let (mut g0, mut g1) = (0.0, 0.0);
        for (x, y) in &data {
            let p = sigmoid(r.alpha0 + r.alpha1 * x);
            g0 += f64::from(u8::from(*y)) - p;
            g1 += (f64::from(u8::from(*y)) - p) * x;
        }
        assert!(g0.abs() < 1e-8 && g1.abs() < 1e-8);
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap_diagnostic(&[None, None], 24.0, None).unwrap(), 0.0);
        assert_eq!(gap_diagnostic(&[Some(1.0), Some(5.0)], 24.0, Some(&[48.0, 72.0])).unwrap(), 1.0);
        assert_eq!(gap_diagnostic(&[Some(1.0), None], 24.0, Some(&[1.0, 72.0])).unwrap(), 0.0);
        assert!(gap_diagnostic(&[], 24.0, None).is_err());
    }

    #[test]
    fn pi1_examples() {
        let p: Vec<f64> = (0..50).map(|i| 100.0 + i as f64).collect();
        let r = pi1_oracle_bound(&p, &p).unwrap();
        assert_eq!(r.var_spread, 0.0);
        assert_eq!(r.bias_sign, 0);
        let hi: Vec<f64> = p.iter().map(|x| x * 1.01).collect();
        let r = pi1_oracle_bound(&hi, &p).unwrap();
        assert_eq!(r.bias_sign, 1);
        assert_abs_diff_eq!(r.var_spread, 0.0, epsilon = 1e-20);
        assert_eq!(r.lead_lag.len(), 49);
        assert!(pi1_oracle_bound(&p[..10], &p[..10]).is_err());
    }

    fn ev(completion_h: Option<f64>) -> LiquidationEvent {
        LiquidationEvent {
            trigger_time: 0,
            completion_time: completion_h.map(|h| (h * 3600.0) as i64),
            account: "a".into(),
            repaid_debt: [(AssetId::from("USD"), RepaidLeg { quantity: 1.0, oracle_price: 1.0 })].into(),
            seized_collateral: BTreeMap::new(),
            gas_units: 0.0,
            gas_price: 0.0,
            mev_cost: 0.0,
            fees: 0.0,
        }
    }

    #[test]
    fn pi2_examples() {
        let all: Vec<_> = (0..10).map(|_| ev(Some(0.0))).collect();
        assert_eq!(pi2_liquidation_bound(&all, 24.0).unwrap(), 0.0);
        let mut mix: Vec<_> = (0..7).map(|_| ev(Some(1.0))).collect();
        mix.extend((0..3).map(|_| ev(Some(48.0))));
        assert_abs_diff_eq!(pi2_liquidation_bound(&mix, 24.0).unwrap(), 0.3);
        // τ → 0: only same-instant completions count as handled
        assert_eq!(pi2_liquidation_bound(&mix, 0.0).unwrap(), 1.0);
        assert_eq!(pi2_liquidation_bound(&all, 0.0).unwrap(), 0.0);
        assert!(matches!(pi2_liquidation_bound(&[], 1.0), Err(Error::Undefined(_))));
        let mut prev = 1.0;
        for tau in [0.0, 0.5, 1.0, 10.0, 100.0] {
            let b = pi2_liquidation_bound(&mix, tau).unwrap();
            assert!(b <= prev);
            prev = b;
        }
    }
}
