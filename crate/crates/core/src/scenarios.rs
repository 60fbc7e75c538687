//! Stress scenario construction: historical episodes, parametric grids and
//! adversarial search.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting;
use crate::error::{Error, Result};
use crate::estimators::{window_drawdowns, Window};
use crate::ingest::DataBundle;
use crate::stats::{hourly_grid, quantile};
use crate::types::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Historical,
    Parametric,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub pass: bool,
    /// `(B + ΔB) / (D - ΔD)`.
    pub implied_bound: f64,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub kind: ScenarioKind,
    pub price_shock: BTreeMap<AssetId, f64>,
    pub depth_shock: BTreeMap<AssetId, f64>,
    pub gas_quantile: f64,
    #[serde(default)]
    pub delta_borrows: f64,
    /// Net withdrawals over the horizon (deposit decrease).
    #[serde(default)]
    pub delta_deposits: f64,
    pub horizon_hours: u32,
    pub provenance: String,
    /// Scenario utilization; `None` means the implied bound itself.
    #[serde(default)]
    pub utilization: Option<f64>,
    #[serde(default)]
    pub consistency: Option<Consistency>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        for (a, d) in &self.price_shock {
            if !(0.0..1.0).contains(d) {
                return Err(Error::config(format!("{}: drawdown for {a} outside [0,1)", self.id)));
            }
        }
        for (a, f) in &self.depth_shock {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(Error::config(format!("{}: depth factor for {a} outside (0,1]", self.id)));
            }
        }
        if !(0.0..=1.0).contains(&self.gas_quantile) {
            return Err(Error::config(format!("{}: gas quantile outside [0,1]", self.id)));
        }
        if self.horizon_hours == 0 {
            return Err(Error::config(format!("{}: horizon must be positive", self.id)));
        }
        Ok(())
    }

    pub fn drawdown(&self, a: &AssetId) -> f64 {
        self.price_shock.get(a).copied().unwrap_or(0.0)
    }

    pub fn depth_factor(&self, a: &AssetId) -> f64 {
        self.depth_shock.get(a).copied().unwrap_or(1.0)
    }

    /// Flagged: consistency was checked and failed.
    pub fn flagged(&self) -> bool {
        self.consistency.as_ref().is_some_and(|c| !c.pass)
    }
}

/// Checks `U^(s) ≤ (B + ΔB) / (D - ΔD)`.
pub fn check_consistency(s: &ScenarioSpec, snap: &VaultSnapshot) -> Result<Consistency> {
    let d = snap.deposits - s.delta_deposits;
    if d <= 0.0 {
        return Err(Error::Infeasible(format!(
            "{}: withdrawals {} exhaust deposits {}",
            s.id, s.delta_deposits, snap.deposits
        )));
    }
    let bound = (snap.borrows + s.delta_borrows) / d;
    let u = s.utilization.unwrap_or(bound);
    Ok(Consistency { pass: u <= bound, implied_bound: bound, utilization: u })
}

/// Runs the consistency check and stores the verdict on each scenario.
pub fn annotate_consistency(set: &mut [ScenarioSpec], snap: &VaultSnapshot) -> Result<()> {
    for s in set.iter_mut() {
        s.consistency = Some(check_consistency(s, snap)?);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// historical

pub const DEFAULT_Q_H: f64 = 0.9;
pub const DEFAULT_TRAILING_YEARS: f64 = 2.0;
pub const EPISODE_GAP_HOURS: usize = 6;
/// Episode boundaries come from this fixed drawdown quantile so that raising
/// `q_H` only filters episodes and never splits them.
pub const SEGMENT_QUANTILE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoricalConfig {
    pub q_h: f64,
    pub trailing_years: f64,
    pub horizon_hours: u32,
}

impl Default for HistoricalConfig {
    fn default() -> Self {
        HistoricalConfig { q_h: DEFAULT_Q_H, trailing_years: DEFAULT_TRAILING_YEARS, horizon_hours: 24 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawdownProfile {
    pub starts: Vec<Timestamp>,
    /// Collateral-weighted window drawdown per start.
    pub weighted: Vec<f64>,
    pub per_asset: BTreeMap<AssetId, Vec<f64>>,
}

/// Window drawdowns on the hourly grid, weighted by latest-snapshot collateral
/// value.
pub fn drawdown_profile(bundle: &DataBundle, window: Window, h: u32) -> Result<DrawdownProfile> {
    let snap = bundle.latest_snapshot();
    let weights = accounting::collateral_weights(snap, &bundle.prices_at(snap.time))?;
    let grids: BTreeMap<&AssetId, Vec<(Timestamp, f64)>> = weights
        .keys()
        .map(|a| (a, hourly_grid(&bundle.oracles[a].points, window.start, window.end)))
        .collect();
    // align on the common hourly span
    let start = grids.values().filter_map(|g| g.first().map(|p| p.0)).max().unwrap_or(0);
    let end = grids.values().filter_map(|g| g.last().map(|p| p.0)).min().unwrap_or(-1);
    let mut per_asset = BTreeMap::new();
    let mut starts = Vec::new();
    for (a, g) in &grids {
        let vals: Vec<f64> = g.iter().filter(|p| p.0 >= start && p.0 <= end).map(|p| p.1).collect();
        let dd = window_drawdowns(&vals, h as usize);
        if starts.is_empty() {
            starts = g
                .iter()
                .filter(|p| p.0 >= start && p.0 <= end)
                .map(|p| p.0)
                .take(dd.len())
                .collect();
        }
        per_asset.insert((*a).clone(), dd);
    }
    let n = starts.len();
    let weighted = (0..n)
        .map(|i| weights.iter().map(|(a, w)| w * per_asset[a][i]).sum())
        .collect();
    Ok(DrawdownProfile { starts, weighted, per_asset })
}

/// Which windows clear the `q_H` drawdown threshold.
pub fn qualifying_windows(dd: &[f64], q_h: f64) -> Vec<bool> {
    if dd.is_empty() {
        return Vec::new();
    }
    let thr = quantile(dd, q_h);
    dd.iter().map(|d| *d >= thr && *d > 0.0).collect()
}

/// Index ranges of episodes: runs of marked windows, merging runs separated by
/// at most `gap` unmarked windows.
pub fn segment(marked: &[bool], gap: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (i, m) in marked.iter().enumerate() {
        if !m {
            continue;
        }
        match out.last_mut() {
            Some(last) if i - last.1 <= gap + 1 => last.1 = i,
            _ => out.push((i, i)),
        }
    }
    out
}

pub fn build_historical(bundle: &DataBundle, cfg: &HistoricalConfig) -> Result<(Vec<ScenarioSpec>, Vec<String>)> {
    if !(0.0..=1.0).contains(&cfg.q_h) || !(cfg.trailing_years > 0.0) || cfg.horizon_hours == 0 {
        return Err(Error::config("historical scenario settings out of range"));
    }
    let end = bundle.eval_time();
    let hours = (cfg.trailing_years * HOURS_PER_YEAR as f64).round() as i64;
    let window = Window::trailing(end, hours);
    let mut warnings = Vec::new();
    let prof = drawdown_profile(bundle, window, cfg.horizon_hours)?;
    if prof.weighted.is_empty() {
        warnings.push("historical: price history shorter than one scenario horizon; no episodes".to_string());
        return Ok((Vec::new(), warnings));
    }
    let thr = quantile(&prof.weighted, cfg.q_h);
    let episodes = segment(&qualifying_windows(&prof.weighted, SEGMENT_QUANTILE), EPISODE_GAP_HOURS);
    let gas = bundle.gas_series();
    let gas_sorted = {
        let mut g: Vec<f64> = gas.iter().map(|p| p.1).collect();
        g.sort_by(f64::total_cmp);
        g
    };
    let snap_series = &bundle.snapshots;
    let mut out = Vec::new();
    for (lo, hi) in episodes {
        let (peak_i, peak) = (lo..=hi)
            .map(|i| (i, prof.weighted[i]))
            .fold((lo, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        if !(peak >= thr && peak > 0.0) {
            continue;
        }
        let t0 = prof.starts[lo];
        let t1 = prof.starts[hi] + cfg.horizon_hours as i64 * SECONDS_PER_HOUR;
        let mut price_shock = BTreeMap::new();
        let mut depth_shock = BTreeMap::new();
        for (a, dd) in &prof.per_asset {
            price_shock.insert(a.clone(), dd[peak_i].min(0.99));
            let series = bundle.depth_series(a);
            let d0 = last_at_or_before(&series, t0);
            let dmin = series.iter().filter(|p| p.0 > t0 && p.0 <= t1).map(|p| p.1).fold(f64::INFINITY, f64::min);
            let f = match d0 {
                Some(d0) if d0 > 0.0 => (dmin.min(d0) / d0).clamp(1e-6, 1.0),
                _ => 1.0,
            };
            depth_shock.insert(a.clone(), f);
        }
        let gas_q = if gas_sorted.is_empty() {
            1.0
        } else {
            let gmax = gas.iter().filter(|p| p.0 >= t0 && p.0 <= t1).map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            if gmax.is_finite() {
                gas_sorted.partition_point(|g| *g <= gmax) as f64 / gas_sorted.len() as f64
            } else {
                1.0
            }
        };
        let at = |t: Timestamp| {
            let i = snap_series.partition_point(|s| s.time <= t);
            snap_series.get(i.saturating_sub(1))
        };
        let (db, dd) = match (at(t0), at(t1)) {
            (Some(a), Some(b)) => (b.borrows - a.borrows, a.deposits - b.deposits),
            _ => (0.0, 0.0),
        };
        out.push(ScenarioSpec {
            id: format!("hist-{t0}"),
            kind: ScenarioKind::Historical,
            price_shock,
            depth_shock,
            gas_quantile: gas_q,
            delta_borrows: db,
            delta_deposits: dd,
            horizon_hours: cfg.horizon_hours,
            provenance: format!("window [{t0}, {t1}], peak weighted drawdown {peak:.6}"),
            utilization: None,
            consistency: None,
        });
    }
    if out.is_empty() {
        warnings.push(format!("historical: no episodes at q_H = {}", cfg.q_h));
    }
    Ok((out, warnings))
}

// ---------------------------------------------------------------------------
// parametric

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricGrid {
    pub drawdowns: Vec<f64>,
    pub depth_factors: Vec<f64>,
    pub gas_quantile: f64,
    pub horizon_hours: u32,
}

impl Default for ParametricGrid {
    fn default() -> Self {
        ParametricGrid {
            drawdowns: vec![0.1, 0.2, 0.3, 0.5],
            depth_factors: vec![1.0, 0.5, 0.25],
            gas_quantile: 0.99,
            horizon_hours: 24,
        }
    }
}

/// Cartesian product; each point shocks every listed asset uniformly.
pub fn build_parametric(grid: &ParametricGrid, assets: &[AssetId]) -> Result<Vec<ScenarioSpec>> {
    if grid.drawdowns.is_empty() || grid.depth_factors.is_empty() {
        return Err(Error::config("parametric grid axes must be non-empty"));
    }
    let mut out = Vec::new();
    for &d in &grid.drawdowns {
        for &f in &grid.depth_factors {
            let s = ScenarioSpec {
                id: format!("par-dd{d:.4}-df{f:.4}"),
                kind: ScenarioKind::Parametric,
                price_shock: assets.iter().map(|a| (a.clone(), d)).collect(),
                depth_shock: assets.iter().map(|a| (a.clone(), f)).collect(),
                gas_quantile: grid.gas_quantile,
                delta_borrows: 0.0,
                delta_deposits: 0.0,
                horizon_hours: grid.horizon_hours,
                provenance: format!("grid drawdown={d} depth_factor={f}"),
                utilization: None,
                consistency: None,
            };
            s.validate()?;
            out.push(s);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// adversarial

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Drawdown,
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub asset: AssetId,
    pub axis: Axis,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleBox {
    pub dims: Vec<Dimension>,
    /// Points per dimension.
    pub resolution: usize,
    pub gas_quantile: f64,
    pub horizon_hours: u32,
}

impl FeasibleBox {
    /// Drawdown up to the `k`-sigma log move over the horizon and depth down
    /// to `depth_floor`, per asset.
    pub fn k_sigma(sigmas: &BTreeMap<AssetId, f64>, k: f64, horizon_hours: u32, depth_floor: f64, resolution: usize) -> Self {
        let mut dims = Vec::new();
        for (a, s) in sigmas {
            let hi = (1.0 - (-k * s * (horizon_hours as f64).sqrt()).exp()).min(0.99);
            dims.push(Dimension { asset: a.clone(), axis: Axis::Drawdown, lo: 0.0, hi });
            dims.push(Dimension { asset: a.clone(), axis: Axis::Depth, lo: depth_floor, hi: 1.0 });
        }
        FeasibleBox { dims, resolution, gas_quantile: 0.99, horizon_hours }
    }

    pub fn points(&self) -> Result<Vec<Vec<f64>>> {
        if self.resolution == 0 {
            return Err(Error::config("adversarial resolution must be >= 1"));
        }
        for d in &self.dims {
            if !(d.lo.is_finite() && d.hi.is_finite() && d.lo <= d.hi) {
                return Err(Error::config(format!("bad bounds for {} {:?}", d.asset, d.axis)));
            }
        }
        let axes: Vec<Vec<f64>> = self
            .dims
            .iter()
            .map(|d| {
                if self.resolution == 1 {
                    vec![d.hi]
                } else {
                    (0..self.resolution)
                        .map(|i| d.lo + (d.hi - d.lo) * i as f64 / (self.resolution - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
        for ax in &axes {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    ax.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        Ok(pts)
    }

    pub fn scenario(&self, point: &[f64]) -> ScenarioSpec {
        let mut price_shock = BTreeMap::new();
        let mut depth_shock = BTreeMap::new();
        let mut coords = Vec::new();
        for (d, v) in self.dims.iter().zip(point) {
            match d.axis {
                Axis::Drawdown => {
                    price_shock.insert(d.asset.clone(), v.clamp(0.0, 0.99));
                    coords.push(format!("{}:dd={v:.6}", d.asset));
                }
                Axis::Depth => {
                    depth_shock.insert(d.asset.clone(), v.clamp(1e-9, 1.0));
                    coords.push(format!("{}:df={v:.6}", d.asset));
                }
            }
        }
        let id = format!("adv-{}", coords.join(","));
        ScenarioSpec {
            id,
            kind: ScenarioKind::Adversarial,
            price_shock,
            depth_shock,
            gas_quantile: self.gas_quantile,
            delta_borrows: 0.0,
            delta_deposits: 0.0,
            horizon_hours: self.horizon_hours,
            provenance: format!("grid point {}", coords.join(" ")),
            utilization: None,
            consistency: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialResult {
    pub scenario: ScenarioSpec,
    pub objective: f64,
    pub n_evaluated: usize,
}

/// Exhaustive grid argmin of `objective`. Ties go to the smallest id.
pub fn build_adversarial<F>(bounds: &FeasibleBox, objective: F) -> Result<AdversarialResult>
where
    F: Fn(&ScenarioSpec) -> Result<f64> + Sync,
{
    let pts = bounds.points()?;
    let evals: Vec<(ScenarioSpec, Result<f64>)> = pts
        .par_iter()
        .map(|p| {
            let s = bounds.scenario(p);
            let v = objective(&s);
            (s, v)
        })
        .collect();
    let n = evals.len();
    let mut best: Option<(ScenarioSpec, f64)> = None;
    for (s, v) in evals {
        let v = v.map_err(|e| Error::Scenario { id: s.id.clone(), source: Box::new(e) })?;
        let better = match &best {
            None => true,
            Some((bs, bv)) => v < *bv || (v == *bv && s.id < bs.id),
        };
        if better {
            best = Some((s, v));
        }
    }
    let (scenario, objective) = best.ok_or_else(|| Error::config("empty adversarial grid"))?;
    Ok(AdversarialResult { scenario, objective, n_evaluated: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snap(b: f64, d: f64) -> VaultSnapshot {
        VaultSnapshot {
            time: 0,
            deposits: d,
            borrows: b,
            liabilities: d,
            assets_book: d,
            collateral_qty: BTreeMap::new(),
            share_supply: d,
        }
    }

    fn bare(id: &str) -> ScenarioSpec {
        build_parametric(
            &ParametricGrid { drawdowns: vec![0.1], depth_factors: vec![1.0], gas_quantile: 0.5, horizon_hours: 24 },
            &[],
        )
        .unwrap()
        .remove(0)
        .with_id(id)
    }

    impl ScenarioSpec {
        fn with_id(mut self, id: &str) -> Self {
            self.id = id.into();
            self
        }
    }

    #[test]
    fn consistency_examples() {
        let s = snap(80.0, 100.0);
        let mut sc = bare("a");
        let c = check_consistency(&sc, &s).unwrap();
        assert_eq!(c.implied_bound, 0.8);
        sc.utilization = Some(0.7);
        assert!(check_consistency(&sc, &s).unwrap().pass);
        sc.utilization = Some(0.81);
        assert!(!check_consistency(&sc, &s).unwrap().pass);
        sc.delta_borrows = 10.0;
        sc.delta_deposits = 20.0;
        sc.utilization = Some(1.0);
        let c = check_consistency(&sc, &s).unwrap();
        assert_eq!(c.implied_bound, 1.125);
        assert!(c.pass);
        sc.delta_deposits = 100.0;
        assert!(matches!(check_consistency(&sc, &s), Err(Error::Infeasible(_))));
    }

    #[test]
    fn parametric_examples() {
        let a = [AssetId::from("ETH")];
        let g = ParametricGrid { drawdowns: vec![0.1, 0.2, 0.3], depth_factors: vec![1.0, 0.5], ..Default::default() };
        assert_eq!(build_parametric(&g, &a).unwrap().len(), 6);
        let e = ParametricGrid { drawdowns: vec![], ..Default::default() };
        assert!(matches!(build_parametric(&e, &a), Err(Error::Config(_))));
        assert!(ParametricGrid::default().depth_factors.contains(&0.5));
        let bad = ParametricGrid { drawdowns: vec![1.0], ..Default::default() };
        assert!(build_parametric(&bad, &a).is_err());
    }

    #[test]
    fn segmentation() {
        let m = [false, true, true, false, false, true, false, false, false, false, false, false, false, false, true];
        assert_eq!(segment(&m, 2), vec![(1, 5), (14, 14)]);
        assert_eq!(segment(&m, 0), vec![(1, 2), (5, 5), (14, 14)]);
        assert!(qualifying_windows(&[0.0; 5], 0.9).iter().all(|q| !q));
        assert!(qualifying_windows(&[0.1, 0.2, 0.3], 0.0).iter().all(|q| *q));
    }

    fn box2(res: usize) -> FeasibleBox {
        FeasibleBox {
            dims: vec![
                Dimension { asset: "A".into(), axis: Axis::Drawdown, lo: 0.0, hi: 0.5 },
                Dimension { asset: "B".into(), axis: Axis::Drawdown, lo: 0.0, hi: 0.5 },
            ],
            resolution: res,
            gas_quantile: 0.9,
            horizon_hours: 24,
        }
    }

    #[test]
    fn adversarial_corner_and_ties() {
        let b = box2(5);
        let r = build_adversarial(&b, |s| Ok(1.3 * (1.0 - 0.5 * s.drawdown(&"A".into()) - 0.5 * s.drawdown(&"B".into()))))
            .unwrap();
        assert_eq!(r.scenario.drawdown(&"A".into()), 0.5);
        assert_eq!(r.scenario.drawdown(&"B".into()), 0.5);
        assert_eq!(r.n_evaluated, 25);
        // symmetric objective with two minima: smallest id wins
        let r = build_adversarial(&b, |s| {
            let a = s.drawdown(&"A".into());
            let bb = s.drawdown(&"B".into());
            Ok(-(a - bb).abs())
        })
        .unwrap();
        assert_eq!(r.scenario.id, "adv-A:dd=0.000000,B:dd=0.500000");
        let e = build_adversarial(&b, |_| Err(Error::domain("boom"))).unwrap_err();
        assert!(matches!(e, Error::Scenario { .. }));
    }

    proptest! {
        #[test]
        fn adversarial_matches_enumeration(ca in 0.0f64..0.5, cb in 0.0f64..0.5, k in 0.1f64..3.0) {
            let b = box2(7);
            let f = |s: &ScenarioSpec| {
                let x = s.drawdown(&"A".into()) - ca;
                let y = s.drawdown(&"B".into()) - cb;
                k * x * x + y * y
            };
            let r = build_adversarial(&b, |s| Ok(f(s))).unwrap();
            let mut best = f64::INFINITY;
            for p in b.points().unwrap() {
                let v = f(&b.scenario(&p));
                best = best.min(v);
                prop_assert!(r.objective <= v);
            }
            prop_assert_eq!(r.objective, best);
        }
    }
}
