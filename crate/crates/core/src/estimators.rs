//! Parameter estimation from a [`DataBundle`]: impact coefficients, oracle
//! latency, gas/stress correlation, utilization dynamics, scenario quantile
//! inputs, CLR and the yield decomposition.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::accounting;
use crate::error::{Error, Result};
use crate::ingest::DataBundle;
use crate::stats::{self, hourly_grid, log_returns, mean, norm_cdf, pearson, quantile};
use crate::types::*;

/// Fewer observations than this for one asset and it falls back to the
/// pooled coefficient.
pub const MIN_OBS: usize = 8;

pub const DEFAULT_WINDOW_HOURS: i64 = 30 * 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Window {
    pub fn trailing(end: Timestamp, hours: i64) -> Self {
        Window {
            start: end - hours * SECONDS_PER_HOUR,
            end,
        }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.start && t <= self.end
    }

    pub fn hours(&self) -> f64 {
        (self.end - self.start) as f64 / SECONDS_PER_HOUR as f64
    }
}

// ---------------------------------------------------------------------------
// P1: impact regression

/// One liquidation fill used in the impact regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactObs {
    pub asset: AssetId,
    pub time: Timestamp,
    /// Normalized volume: oracle notional over contemporaneous depth.
    pub x: f64,
    pub clr: Option<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactFit {
    pub lambda: BTreeMap<AssetId, f64>,
    pub lambda_se: BTreeMap<AssetId, f64>,
    pub beta_clr: Option<f64>,
    pub beta_clr_se: Option<f64>,
    pub n_obs: usize,
    pub n_obs_by_asset: BTreeMap<AssetId, usize>,
    pub hac_lag: usize,
    pub window: Window,
    /// Assets whose coefficient is the pooled one.
    pub pooled: Vec<AssetId>,
    /// Assets whose raw estimate was negative and clamped to zero.
    pub clamped: Vec<AssetId>,
    /// Seized legs filled above the oracle price (deviation clipped to zero).
    pub above_oracle_fills: usize,
}

impl ImpactFit {
    /// Coefficient for `a`, falling back to the pooled estimate or zero.
    pub fn lambda_of(&self, a: &AssetId) -> f64 {
        self.lambda
            .get(a)
            .copied()
            .or_else(|| self.lambda.get(&pooled_key()).copied())
            .unwrap_or(0.0)
    }
}

fn pooled_key() -> AssetId {
    AssetId::from("*pooled*")
}

/// Newey-West lag `ceil(n^(1/3))`.
pub fn newey_west_lag(n: usize) -> usize {
    let mut l = (n as f64).cbrt().ceil() as usize;
    // guard against cbrt rounding just above an exact cube
    if l > 0 && (l - 1).pow(3) >= n {
        l -= 1;
    }
    l
}

/// OLS of `eps` on per-asset `x` columns (and CLR if requested), through the
/// origin, with Newey-West (Bartlett) covariance. Observations must be in
/// time order for the HAC lags to be meaningful.
pub fn fit_impact(obs: &[ImpactObs], include_clr: bool, window: Window) -> Result<ImpactFit> {
    let n = obs.len();
    if n < MIN_OBS {
        return Err(Error::insufficient("impact regression observations", n, MIN_OBS));
    }
    let mut counts: BTreeMap<AssetId, usize> = BTreeMap::new();
    for o in obs {
        if !(o.x.is_finite() && o.eps.is_finite()) {
            return Err(Error::DataIntegrity(format!("non-finite impact observation at {}", o.time)));
        }
        *counts.entry(o.asset.clone()).or_default() += 1;
    }
    let own: Vec<AssetId> = counts
        .iter()
        .filter(|(_, c)| **c >= MIN_OBS)
        .map(|(a, _)| a.clone())
        .collect();
    let pooled: Vec<AssetId> = counts
        .iter()
        .filter(|(_, c)| **c < MIN_OBS)
        .map(|(a, _)| a.clone())
        .collect();
    let mut cols: Vec<AssetId> = own.clone();
    if !pooled.is_empty() {
        cols.push(pooled_key());
    }
    let col_of = |a: &AssetId| -> usize {
        own.iter()
            .position(|c| c == a)
            .unwrap_or(cols.len() - 1)
    };
    let k = cols.len() + usize::from(include_clr);
    let mut x = DMatrix::<f64>::zeros(n, k);
    let mut y = DVector::<f64>::zeros(n);
    for (i, o) in obs.iter().enumerate() {
        x[(i, col_of(&o.asset))] = o.x;
        if include_clr {
            x[(i, k - 1)] = o
                .clr
                .ok_or_else(|| Error::DataIntegrity(format!("missing CLR covariate at {}", o.time)))?;
        }
        y[i] = o.eps;
    }
    let xtx = x.transpose() * &x;
    let xtx_inv = xtx
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Degenerate("impact design matrix is singular".into()))?;
    let coef = &xtx_inv * (x.transpose() * &y);
    let resid = &y - &x * &coef;

    let lag = newey_west_lag(n);
    let mut s = DMatrix::<f64>::zeros(k, k);
    let row = |i: usize| x.row(i).transpose();
    for i in 0..n {
        let xi = row(i);
        s += &xi * xi.transpose() * (resid[i] * resid[i]);
    }
    for l in 1..=lag.min(n - 1) {
        let w = 1.0 - l as f64 / (lag as f64 + 1.0);
        for i in l..n {
            let xi = row(i);
            let xj = row(i - l);
            let g = &xi * xj.transpose() * (resid[i] * resid[i - l]);
            s += (&g + g.transpose()) * w;
        }
    }
    let cov = &xtx_inv * s * &xtx_inv;
    let se = |j: usize| cov[(j, j)].max(0.0).sqrt();

    let mut lambda = BTreeMap::new();
    let mut lambda_se = BTreeMap::new();
    let mut clamped = Vec::new();
    for (j, a) in cols.iter().enumerate() {
        let mut v = coef[j];
        if v < 0.0 {
            clamped.push(a.clone());
            v = 0.0;
        }
        lambda.insert(a.clone(), v);
        lambda_se.insert(a.clone(), se(j));
    }
    if !pooled.is_empty() {
        let pv = lambda[&pooled_key()];
        let ps = lambda_se[&pooled_key()];
        for a in &pooled {
            lambda.insert(a.clone(), pv);
            lambda_se.insert(a.clone(), ps);
        }
    }
    Ok(ImpactFit {
        lambda,
        lambda_se,
        beta_clr: include_clr.then(|| coef[k - 1]),
        beta_clr_se: include_clr.then(|| se(k - 1)),
        n_obs: n,
        n_obs_by_asset: counts,
        hac_lag: lag,
        window,
        pooled,
        clamped,
        above_oracle_fills: 0,
    })
}

/// Builds impact observations from completed liquidations in `window`. Legs
/// without a depth observation at or before the trigger are skipped.
pub fn impact_observations(bundle: &DataBundle, window: Window, include_clr: bool) -> Result<(Vec<ImpactObs>, usize)> {
    let mut out = Vec::new();
    let mut above = 0;
    let depth: BTreeMap<&AssetId, Vec<(Timestamp, f64)>> =
        bundle.depth.keys().map(|a| (a, bundle.depth_series(a))).collect();
    let mut clr_cache: BTreeMap<Timestamp, Option<f64>> = BTreeMap::new();
    for e in &bundle.liquidations {
        if !window.contains(e.trigger_time) || e.completion_time.is_none() {
            continue;
        }
        for (a, leg) in &e.seized_collateral {
            let Some(d) = depth.get(a).and_then(|s| last_at_or_before(s, e.trigger_time)) else {
                continue;
            };
            if d <= 0.0 {
                return Err(Error::DataIntegrity(format!("zero depth for {a} at {}", e.trigger_time)));
            }
            if leg.above_oracle() {
                above += 1;
            }
            let clr = if include_clr {
                // CLR just before the event, on the hour
                let t = (e.trigger_time - 1).div_euclid(SECONDS_PER_HOUR) * SECONDS_PER_HOUR;
                *clr_cache
                    .entry(t)
                    .or_insert_with(|| estimate_clr(bundle, Window::trailing(t, DEFAULT_WINDOW_HOURS)).ok())
            } else {
                None
            };
            if include_clr && clr.is_none() {
                continue;
            }
            out.push(ImpactObs {
                asset: a.clone(),
                time: e.trigger_time,
                x: leg.quantity * leg.oracle_price / d,
                clr,
                eps: leg.deviation(),
            });
        }
    }
    Ok((out, above))
}

pub fn estimate_lambda(bundle: &DataBundle, window: Window, include_clr: bool) -> Result<ImpactFit> {
    let (obs, above) = impact_observations(bundle, window, include_clr)?;
    let mut fit = fit_impact(&obs, include_clr, window)?;
    fit.above_oracle_fills = above;
    Ok(fit)
}

// ---------------------------------------------------------------------------
// P2: oracle latency

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    pub staleness_hours: f64,
    pub sigma_per_sqrt_hour: f64,
    pub n_returns: usize,
    /// Volatility came from the reference series rather than the oracle.
    pub from_reference: bool,
    /// Fewer than 48 hourly prices in the window.
    pub short_sample: bool,
    /// No update row at or before the window end.
    pub never_updated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleLatencyFit {
    pub entries: BTreeMap<AssetId, LatencyEntry>,
    pub window: Window,
}

/// Close-to-close volatility `sqrt(mean(r^2))` of hourly log returns
/// (no demeaning).
pub fn close_to_close_sigma(prices: &[f64]) -> Result<f64> {
    if prices.len() < 2 {
        return Err(Error::insufficient("close-to-close volatility prices", prices.len(), 2));
    }
    let r = log_returns(prices);
    Ok((r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64).sqrt())
}

pub fn estimate_oracle_latency(bundle: &DataBundle, asset: &AssetId, window: Window) -> Result<LatencyEntry> {
    let series = bundle
        .oracles
        .get(asset)
        .ok_or_else(|| Error::DataIntegrity(format!("no oracle series for {asset}")))?;
    let (pts, from_reference) = match &series.reference_points {
        Some(r) if r.len() >= 2 => (r.as_slice(), true),
        _ => (series.points.as_slice(), false),
    };
    let grid: Vec<f64> = hourly_grid(pts, window.start, window.end).into_iter().map(|p| p.1).collect();
    let sigma = close_to_close_sigma(&grid)?;
    let idx = series.update_times.partition_point(|t| *t <= window.end);
    let (staleness, never) = if idx == 0 {
        let first = series.points.first().map(|p| p.0).unwrap_or(window.end);
        ((window.end - first).max(0) as f64 / SECONDS_PER_HOUR as f64, true)
    } else {
        (
            (window.end - series.update_times[idx - 1]) as f64 / SECONDS_PER_HOUR as f64,
            false,
        )
    };
    Ok(LatencyEntry {
        staleness_hours: staleness,
        sigma_per_sqrt_hour: sigma,
        n_returns: grid.len() - 1,
        from_reference,
        short_sample: grid.len() < 48,
        never_updated: never,
    })
}

pub fn estimate_oracle_latency_all(bundle: &DataBundle, window: Window) -> Result<OracleLatencyFit> {
    let mut entries = BTreeMap::new();
    for a in bundle.oracles.keys() {
        entries.insert(a.clone(), estimate_oracle_latency(bundle, a, window)?);
    }
    Ok(OracleLatencyFit { entries, window })
}

/// `Φ(-η̄ / (σ √δ))`; zero when `σ √δ = 0`.
pub fn false_solvency_prob(eta_bar: f64, sigma: f64, staleness_hours: f64) -> Result<f64> {
    if !(eta_bar > 0.0) {
        return Err(Error::domain("price gap threshold must be positive"));
    }
    if sigma < 0.0 || staleness_hours < 0.0 {
        return Err(Error::domain("sigma and staleness must be non-negative"));
    }
    let scale = sigma * staleness_hours.sqrt();
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(norm_cdf(-eta_bar / scale))
}

// ---------------------------------------------------------------------------
// P3: gas / stress correlation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasStressCorr {
    pub rho_g: f64,
    pub n_stress: usize,
    pub n_joint: usize,
    pub quantile: f64,
}

/// Pearson correlation of `gas` and `stress` on rows with stress at or above
/// its empirical `q`-quantile.
pub fn stress_conditional_corr(gas: &[f64], stress: &[f64], q: f64) -> Result<GasStressCorr> {
    assert_eq!(gas.len(), stress.len());
    let n = gas.len();
    if n < 30 {
        return Err(Error::insufficient("joint gas/stress observations", n, 30));
    }
    let thr = quantile(stress, q);
    let (g, s): (Vec<f64>, Vec<f64>) = gas
        .iter()
        .zip(stress)
        .filter(|(_, s)| **s >= thr)
        .map(|(g, s)| (*g, *s))
        .unzip();
    let rho = pearson(&g, &s).ok_or_else(|| {
        Error::Undefined(format!(
            "gas/stress correlation: zero variance on {} stress rows",
            g.len()
        ))
    })?;
    Ok(GasStressCorr {
        rho_g: rho,
        n_stress: g.len(),
        n_joint: n,
        quantile: q,
    })
}

/// Hourly stress measure `S_t = Σ ω_a |r_{a,t}|` with weights from the latest
/// snapshot in the window. Returns `(time, S)` pairs.
pub fn stress_series(bundle: &DataBundle, window: Window) -> Result<Vec<(Timestamp, f64)>> {
    let snap_idx = bundle.snapshots.partition_point(|s| s.time <= window.end);
    let snap = &bundle.snapshots[snap_idx.saturating_sub(1)];
    let prices = bundle.prices_at(snap.time);
    let weights = accounting::collateral_weights(snap, &prices)?;
    let mut acc: BTreeMap<Timestamp, f64> = BTreeMap::new();
    let mut first = true;
    for (a, w) in &weights {
        let series = &bundle.oracles[a];
        let grid = hourly_grid(&series.points, window.start, window.end);
        let mut this: BTreeMap<Timestamp, f64> = BTreeMap::new();
        for p in grid.windows(2) {
            this.insert(p[1].0, w * (p[1].1 / p[0].1).ln().abs());
        }
        if first {
            acc = this;
            first = false;
        } else {
            acc = acc
                .into_iter()
                .filter_map(|(t, v)| this.get(&t).map(|x| (t, v + x)))
                .collect();
        }
    }
    Ok(acc.into_iter().collect())
}

pub fn estimate_gas_stress_corr(bundle: &DataBundle, window: Window, q: f64) -> Result<GasStressCorr> {
    if bundle.gas.is_empty() {
        return Err(Error::insufficient("gas observations", 0, 30));
    }
    let stress = stress_series(bundle, window)?;
    let gas = bundle.gas_series();
    let (mut g, mut s) = (Vec::new(), Vec::new());
    for (t, v) in stress {
        if let Some(x) = last_at_or_before(&gas, t) {
            g.push(x);
            s.push(v);
        }
    }
    stress_conditional_corr(&g, &s, q)
}

// ---------------------------------------------------------------------------
// P4: utilization dynamics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationFit {
    pub drift_per_hour: f64,
    pub sigma_per_sqrt_hour: f64,
    pub jump_times: Vec<Timestamp>,
    pub jump_sizes: Vec<f64>,
    pub jump_rate_per_hour: f64,
    pub n_increments: usize,
    pub u_last: f64,
}

impl UtilizationFit {
    pub fn diffusion(drift_per_hour: f64, sigma_per_sqrt_hour: f64) -> Self {
        UtilizationFit {
            drift_per_hour,
            sigma_per_sqrt_hour,
            jump_times: Vec::new(),
            jump_sizes: Vec::new(),
            jump_rate_per_hour: 0.0,
            n_increments: 0,
            u_last: f64::NAN,
        }
    }
}

pub const DEFAULT_JUMP_MULT: f64 = 4.0;
pub const MIN_UTIL_OBS: usize = 72;

/// Fits drift, diffusion and jumps to an hourly utilization path. Rows with
/// `|ΔU| > n·σ` (σ from the current non-jump rows) are flagged as jumps and
/// the fit repeated until the flagged set stops changing.
pub fn fit_utilization(times: &[Timestamp], u: &[f64], n_mult: f64) -> Result<UtilizationFit> {
    assert_eq!(times.len(), u.len());
    if u.len() < MIN_UTIL_OBS {
        return Err(Error::insufficient("hourly utilization observations", u.len(), MIN_UTIL_OBS));
    }
    let du: Vec<f64> = u.windows(2).map(|w| w[1] - w[0]).collect();
    let mut jump = vec![false; du.len()];
    let (mut mu, mut sd);
    let mut iter = 0;
    loop {
        let kept: Vec<f64> = du.iter().zip(&jump).filter(|(_, j)| !**j).map(|(d, _)| *d).collect();
        mu = mean(&kept);
        sd = stats::var_sample(&kept).sqrt();
        iter += 1;
        if sd == 0.0 || iter > 100 {
            break;
        }
        let next: Vec<bool> = du.iter().map(|d| d.abs() > n_mult * sd).collect();
        if next == jump || next.iter().all(|j| *j) {
            break;
        }
        jump = next;
    }
    let hours = (times[times.len() - 1] - times[0]) as f64 / SECONDS_PER_HOUR as f64;
    let dt = hours / du.len() as f64;
    let jump_times: Vec<Timestamp> = jump.iter().enumerate().filter(|(_, j)| **j).map(|(i, _)| times[i + 1]).collect();
    let jump_sizes: Vec<f64> = jump.iter().zip(&du).filter(|(j, _)| **j).map(|(_, d)| *d).collect();
    Ok(UtilizationFit {
        drift_per_hour: mu / dt,
        sigma_per_sqrt_hour: sd / dt.sqrt(),
        jump_rate_per_hour: jump_sizes.len() as f64 / hours,
        jump_times,
        jump_sizes,
        n_increments: du.len(),
        u_last: u[u.len() - 1],
    })
}

pub fn utilization_path(bundle: &DataBundle, window: Window) -> Result<Vec<(Timestamp, f64)>> {
    let mut pts = Vec::new();
    for s in &bundle.snapshots {
        pts.push((s.time, accounting::utilization(s.borrows, s.deposits)?));
    }
    Ok(hourly_grid(&pts, window.start, window.end))
}

pub fn fit_utilization_dynamics(bundle: &DataBundle, window: Window, n_mult: f64) -> Result<UtilizationFit> {
    let path = utilization_path(bundle, window)?;
    let (t, u): (Vec<Timestamp>, Vec<f64>) = path.into_iter().unzip();
    fit_utilization(&t, &u, n_mult)
}

// ---------------------------------------------------------------------------
// P5: scenario inputs

pub const DEFAULT_LEVELS: [f64; 5] = [0.5, 0.75, 0.9, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInputs {
    pub levels: Vec<f64>,
    pub stress_quantile: f64,
    /// asset → horizon hours → drawdown quantile per level.
    pub drawdown: BTreeMap<AssetId, BTreeMap<u32, Vec<f64>>>,
    /// asset → depth quantile at `1 - level` over stress hours (low depth).
    pub depth: BTreeMap<AssetId, Vec<f64>>,
    /// gas quantile per level over stress hours.
    pub gas: Option<Vec<f64>>,
    pub worst_case: Vec<String>,
}

/// Drawdown `max(0, 1 - min(P[t..=t+h]) / P[t])` for every start `t` with a
/// full window.
pub fn window_drawdowns(prices: &[f64], h: usize) -> Vec<f64> {
    if h == 0 || prices.len() <= h {
        return Vec::new();
    }
    (0..prices.len() - h)
        .map(|i| {
            let lo = prices[i..=i + h].iter().copied().fold(f64::INFINITY, f64::min);
            (1.0 - lo / prices[i]).max(0.0)
        })
        .collect()
}

pub const WORST_DRAWDOWN: f64 = 0.99;

pub fn scenario_inputs(
    bundle: &DataBundle,
    window: Window,
    horizons: &[u32],
    levels: &[f64],
    stress_quantile: f64,
) -> Result<ScenarioInputs> {
    let mut worst = Vec::new();
    let snap = bundle.latest_snapshot();
    let mut drawdown = BTreeMap::new();
    for a in snap.collateral_qty.keys() {
        let grid: Vec<f64> = hourly_grid(&bundle.oracles[a].points, window.start, window.end)
            .into_iter()
            .map(|p| p.1)
            .collect();
        let mut by_h = BTreeMap::new();
        for &h in horizons {
            let dd = window_drawdowns(&grid, h as usize);
            let ladder = if dd.is_empty() {
                worst.push(format!("drawdown:{a}:{h}h"));
                vec![WORST_DRAWDOWN; levels.len()]
            } else {
                levels.iter().map(|l| quantile(&dd, *l)).collect()
            };
            by_h.insert(h, ladder);
        }
        drawdown.insert(a.clone(), by_h);
    }

    let stress = stress_series(bundle, window).unwrap_or_default();
    let stress_hours: Vec<Timestamp> = if stress.len() >= 2 {
        let vals: Vec<f64> = stress.iter().map(|p| p.1).collect();
        let thr = quantile(&vals, stress_quantile);
        stress.iter().filter(|p| p.1 >= thr).map(|p| p.0).collect()
    } else {
        Vec::new()
    };
    let mut depth = BTreeMap::new();
    for a in snap.collateral_qty.keys() {
        let series = bundle.depth_series(a);
        let vals: Vec<f64> = stress_hours.iter().filter_map(|t| last_at_or_before(&series, *t)).collect();
        if vals.is_empty() {
            worst.push(format!("depth:{a}"));
        } else {
            depth.insert(a.clone(), levels.iter().map(|l| quantile(&vals, 1.0 - l)).collect());
        }
    }
    let gas_series = bundle.gas_series();
    let gvals: Vec<f64> = stress_hours.iter().filter_map(|t| last_at_or_before(&gas_series, *t)).collect();
    let gas = if gvals.is_empty() {
        worst.push("gas".into());
        None
    } else {
        Some(levels.iter().map(|l| quantile(&gvals, *l)).collect())
    };
    Ok(ScenarioInputs {
        levels: levels.to_vec(),
        stress_quantile,
        drawdown,
        depth,
        gas,
        worst_case: worst,
    })
}

// ---------------------------------------------------------------------------
// CLR

/// `Σ w·Var(ra - rb) / Σ w·Var(ra)` over weighted (collateral, debt) return
/// pairs. Population variances.
pub fn clr_from_returns(pairs: &[(f64, &[f64], &[f64])]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (w, ra, rb) in pairs {
        assert_eq!(ra.len(), rb.len());
        if ra.is_empty() {
            continue;
        }
        let diff: Vec<f64> = ra.iter().zip(rb.iter()).map(|(a, b)| a - b).collect();
        num += w * stats::var_pop(&diff);
        den += w * stats::var_pop(ra);
    }
    if !(den > 0.0) {
        return Err(Error::Undefined("CLR denominator is zero".into()));
    }
    Ok(num / den)
}

/// Debt share backed by each (collateral, debt) pair, from the latest
/// position records at or before `t`.
pub fn pair_weights(bundle: &DataBundle, t: Timestamp) -> Result<BTreeMap<(AssetId, AssetId), f64>> {
    let idx = bundle.positions.partition_point(|p| p.time <= t);
    if idx == 0 {
        return Err(Error::insufficient("position records for CLR weights", 0, 1));
    }
    let at = bundle.positions[idx - 1].time;
    let prices = bundle.prices_at(t);
    let mut w: BTreeMap<(AssetId, AssetId), f64> = BTreeMap::new();
    let mut total = 0.0;
    for p in bundle.positions[..idx].iter().rev().take_while(|p| p.time == at) {
        let cv = accounting::oracle_value(&p.collateral, &prices)?;
        if cv <= 0.0 {
            continue;
        }
        for (b, qb) in &p.debt {
            let dv = qb * prices.get(b).copied().unwrap_or(0.0);
            for (a, qa) in &p.collateral {
                let share = qa * prices.get(a).copied().unwrap_or(0.0) / cv;
                *w.entry((a.clone(), b.clone())).or_default() += share * dv;
                total += share * dv;
            }
        }
    }
    if !(total > 0.0) {
        return Err(Error::Undefined("no outstanding debt for CLR weights".into()));
    }
    Ok(w.into_iter().map(|(k, v)| (k, v / total)).collect())
}

pub fn estimate_clr(bundle: &DataBundle, window: Window) -> Result<f64> {
    let weights = pair_weights(bundle, window.end)?;
    let assets: BTreeSet<&AssetId> = weights.keys().flat_map(|(a, b)| [a, b]).collect();
    let returns: BTreeMap<&AssetId, Vec<f64>> = assets
        .into_iter()
        .map(|a| {
            let g: Vec<f64> = hourly_grid(&bundle.oracles[a].points, window.start, window.end)
                .into_iter()
                .map(|p| p.1)
                .collect();
            (a, log_returns(&g))
        })
        .collect();
    let mut pairs = Vec::new();
    for ((a, b), w) in &weights {
        let (ra, rb) = (&returns[a], &returns[b]);
        let n = ra.len().min(rb.len());
        pairs.push((*w, &ra[ra.len() - n..], &rb[rb.len() - n..]));
    }
    clr_from_returns(&pairs)
}

// ---------------------------------------------------------------------------
// P6: yield decomposition

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamLabel {
    Rate,
    Emission,
    Basis,
    Arb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncomeStream {
    pub label: StreamLabel,
    /// Income over the horizon in unit of account.
    pub income: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldDecomposition {
    pub organic: f64,
    pub incentive: f64,
    pub basis: f64,
    pub arb: f64,
    pub total: f64,
    /// `None` when total yield is not positive.
    pub organic_ratio: Option<f64>,
}

/// Annualizes labeled income over `horizon_days` against `principal`.
pub fn decompose_yield(
    streams: &[IncomeStream],
    principal: f64,
    horizon_days: f64,
    protocol_bound: bool,
) -> Result<YieldDecomposition> {
    if !(principal > 0.0 && horizon_days > 0.0) {
        return Err(Error::domain("yield needs positive principal and horizon"));
    }
    let scale = 365.0 / horizon_days / principal;
    let mut sums: BTreeMap<StreamLabel, f64> = BTreeMap::new();
    for s in streams {
        if !s.income.is_finite() {
            return Err(Error::DataIntegrity("non-finite income stream".into()));
        }
        *sums.entry(s.label).or_default() += s.income * scale;
    }
    let get = |l| sums.get(&l).copied().unwrap_or(0.0);
    let (organic, incentive, basis, arb) = (
        get(StreamLabel::Rate),
        get(StreamLabel::Emission),
        get(StreamLabel::Basis),
        get(StreamLabel::Arb),
    );
    if protocol_bound && basis != 0.0 {
        return Err(Error::DataIntegrity(
            "protocol-bound vault reports a nonzero basis stream".into(),
        ));
    }
    let total = organic + incentive + basis + arb;
    Ok(YieldDecomposition {
        organic,
        incentive,
        basis,
        arb,
        total,
        organic_ratio: (total > 0.0).then(|| (organic / total).clamp(0.0, 1.0)),
    })
}
