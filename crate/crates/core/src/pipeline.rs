//! End-to-end scoring: estimates, scenarios, V1-V5, bounds, VCS and the
//! structural diagnostics, assembled into one report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accounting;
use crate::aggregate::{self, NormalizationSpec, Normalized, VcsReport, COMPONENTS};
use crate::error::{Error, Result};
use crate::estimators::{self, GasStressCorr, ImpactFit, LatencyEntry, UtilizationFit, Window, YieldDecomposition};
use crate::ingest::{check_data_depth, Coverage, CoverageReport, DataBundle, IngestConfig};
use crate::metrics::*;
use crate::scenarios::{self, FeasibleBox, HistoricalConfig, ParametricGrid, ScenarioKind, ScenarioSpec};
use crate::stats;
use crate::structural::*;
use crate::types::*;
use crate::validate::{self, BacktestResult, Pi1Result};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RNG_NAME: &str = "ChaCha8 (rand_chacha), streams keyed by (seed, label, index)";

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    /// Trailing window for λ, σ, CLR and the gas correlation.
    pub window_hours: i64,
    pub utilization_window_hours: i64,
    pub include_clr: bool,
    pub gas_stress_quantile: f64,
    pub jump_mult: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            window_hours: estimators::DEFAULT_WINDOW_HOURS,
            utilization_window_hours: 90 * 24,
            include_clr: false,
            gas_stress_quantile: 0.9,
            jump_mult: estimators::DEFAULT_JUMP_MULT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialConfig {
    pub enabled: bool,
    pub k_sigma: f64,
    pub depth_floor: f64,
    pub resolution: usize,
    pub horizon_hours: u32,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig { enabled: true, k_sigma: 3.0, depth_floor: 0.25, resolution: 4, horizon_hours: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// `all`, `historical`, `parametric` or `adversarial`.
    pub set: String,
    pub historical: HistoricalConfig,
    pub parametric: ParametricGrid,
    pub adversarial: AdversarialConfig,
    /// Explicit scenario list; replaces the generated set when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub custom: Option<Vec<ScenarioSpec>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            set: "all".into(),
            historical: HistoricalConfig::default(),
            parametric: ParametricGrid::default(),
            adversarial: AdversarialConfig::default(),
            custom: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct V2Config {
    pub n_paths: usize,
    pub gamma: f64,
    pub depth_vol_k: f64,
}

impl Default for V2Config {
    fn default() -> Self {
        V2Config { n_paths: 2000, gamma: 0.0, depth_vol_k: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct V3Config {
    pub horizon_hours: usize,
    pub n_paths: usize,
    pub jump_overlay: f64,
    /// Overrides the protocol's `u_max`.
    pub barrier: Option<f64>,
}

impl Default for V3Config {
    fn default() -> Self {
        V3Config { horizon_hours: 168, n_paths: 10_000, jump_overlay: 1.0, barrier: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manipulation {
    pub benefit: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct V4Config {
    pub manipulation: BTreeMap<AssetId, Manipulation>,
    pub rwa: BTreeMap<AssetId, RwaInput>,
    pub closure_hours: BTreeMap<AssetId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct V5Config {
    pub tau_max_hours: f64,
    pub shortfall_given_failure: Option<f64>,
}

impl Default for V5Config {
    fn default() -> Self {
        V5Config { tau_max_hours: 24.0, shortfall_given_failure: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitQueueInput {
    pub queue_len: f64,
    pub churn_per_epoch: f64,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAdequacyInput {
    pub q0: f64,
    pub q_min: f64,
    pub worst_std: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructuralConfig {
    pub graph: Option<DependencyGraph>,
    pub horizon_years: f64,
    /// `None` means an unbounded loop.
    pub loop_depth: Option<u32>,
    pub monitor_freq_per_year: f64,
    pub k_q: f64,
    /// `(fraction of deposits, withdrawable cap)` per strategy.
    pub strategies: Vec<(f64, f64)>,
    pub exit_queue: Option<ExitQueueInput>,
    pub oracle_adequacy: Option<OracleAdequacyInput>,
}

impl Default for StructuralConfig {
    fn default() -> Self {
        StructuralConfig {
            graph: None,
            horizon_years: 1.0,
            loop_depth: None,
            monitor_freq_per_year: 8760.0,
            k_q: DEFAULT_KQ,
            strategies: Vec::new(),
            exit_queue: None,
            oracle_adequacy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldConfig {
    pub streams: Vec<estimators::IncomeStream>,
    pub principal: f64,
    pub horizon_days: f64,
    #[serde(default)]
    pub protocol_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub backtest_horizon_hours: u32,
    pub delta_star_hours: f64,
    pub action_latencies_hours: Option<Vec<f64>>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { backtest_horizon_hours: 24, delta_star_hours: 24.0, action_latencies_hours: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub seed: u64,
    /// Bundle directory, relative to the config file.
    pub data: String,
    pub ingest: IngestConfig,
    pub estimation: EstimationConfig,
    pub scenarios: ScenarioConfig,
    pub v2: V2Config,
    pub v3: V3Config,
    pub v4: V4Config,
    pub v5: V5Config,
    pub normalization: NormalizationSpec,
    pub structural: StructuralConfig,
    #[serde(rename = "yield")]
    pub yield_streams: Option<YieldConfig>,
    pub validation: ValidationConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 0,
            data: "data".into(),
            ingest: IngestConfig::default(),
            estimation: EstimationConfig::default(),
            scenarios: ScenarioConfig::default(),
            v2: V2Config::default(),
            v3: V3Config::default(),
            v4: V4Config::default(),
            v5: V5Config::default(),
            normalization: NormalizationSpec::default(),
            structural: StructuralConfig::default(),
            yield_streams: None,
            validation: ValidationConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.normalization.validate()?;
        if self.v2.n_paths == 0 || self.v3.n_paths == 0 {
            return Err(Error::config("path counts must be >= 1"));
        }
        if !(self.v5.tau_max_hours > 0.0) {
            return Err(Error::config("tau_max_hours must be positive"));
        }
        if !["all", "historical", "parametric", "adversarial"].contains(&self.scenarios.set.as_str()) {
            return Err(Error::config(format!("unknown scenario set {}", self.scenarios.set)));
        }
        if let Some(g) = &self.structural.graph {
            g.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub engine_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub rng: String,
    pub eval_time: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Estimates {
    pub impact: Option<ImpactFit>,
    /// Used instead of λ when the impact fit is unavailable.
    pub fallback_slippage: Option<f64>,
    pub oracle: BTreeMap<AssetId, LatencyEntry>,
    pub gas_stress: Option<GasStressCorr>,
    pub utilization: Option<UtilizationFit>,
    pub clr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub id: String,
    pub kind: ScenarioKind,
    pub flagged: bool,
    pub v1: Option<f64>,
    pub slippage: BTreeMap<AssetId, f64>,
    pub v2: Option<V2Result>,
    pub exec_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V4Line {
    pub asset: AssetId,
    pub weight: f64,
    pub result: V4Result,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiBounds {
    pub pi1: BTreeMap<AssetId, Pi1Result>,
    /// Lower bound on Pr(failure | trigger).
    pub pi2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level3 {
    pub code: CodeFailure,
    pub expected_l1_loss: f64,
    pub verdict: DominanceVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetStructure {
    pub leverage_multiplier: Option<f64>,
    pub trigger_price_ratio: Option<f64>,
    pub buffer: Option<BufferCheck>,
    pub cascade_multiplier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralReport {
    pub assets: BTreeMap<AssetId, AssetStructure>,
    pub clr: Option<f64>,
    pub pi_star: Option<f64>,
    pub withdrawal_capacity: Option<WithdrawalCapacity>,
    pub exit_queue: Option<ExitQueue>,
    pub oracle_adequacy: Option<OracleAdequacy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_episodes: usize,
    pub backtest: Option<BacktestResult>,
    pub backtest_error: Option<String>,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub v1: Option<V1Result>,
    pub v2_worst: Option<String>,
    pub v3: Option<V3Result>,
    pub v4: Vec<V4Line>,
    pub v5: Option<V5Result>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: RunMeta,
    pub config: EngineConfig,
    pub data_depth: CoverageReport,
    pub estimates: Estimates,
    pub scenarios: Vec<ScenarioSpec>,
    pub per_scenario: Vec<ScenarioResult>,
    pub metrics: Vec<MetricValue>,
    pub components: Components,
    pub pi_bounds: PiBounds,
    pub normalized: BTreeMap<String, Normalized>,
    pub vcs: VcsReport,
    pub level3: Option<Level3>,
    pub structural: StructuralReport,
    #[serde(rename = "yield")]
    pub yield_decomposition: Option<YieldDecomposition>,
    pub validation: ValidationReport,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// book: vault state at one instant

#[derive(Debug, Clone)]
enum Slippage {
    Impact(ImpactFit),
    Constant(f64),
    None,
}

#[derive(Debug, Clone)]
struct ExecCostModel {
    gas_units: f64,
    mev_ratio: f64,
    /// Sorted gas prices for quantile lookup.
    gas: Vec<f64>,
}

impl ExecCostModel {
    fn from_bundle(bundle: &DataBundle) -> Option<Self> {
        let ev: Vec<&LiquidationEvent> = bundle.liquidations.iter().filter(|e| e.gas_units > 0.0).collect();
        if ev.is_empty() || bundle.gas.is_empty() {
            return None;
        }
        let gas_units = ev.iter().map(|e| e.gas_units).sum::<f64>() / ev.len() as f64;
        let repaid: f64 = bundle.liquidations.iter().map(LiquidationEvent::repaid_value).sum();
        let mev: f64 = bundle.liquidations.iter().map(|e| e.mev_cost).sum();
        let mut gas: Vec<f64> = bundle.gas.iter().map(|g| g.gas_price).collect();
        gas.sort_by(f64::total_cmp);
        Some(ExecCostModel { gas_units, mev_ratio: if repaid > 0.0 { mev / repaid } else { 0.0 }, gas })
    }

    fn cost(&self, q: f64, n_liq: usize, notional: f64) -> f64 {
        n_liq as f64 * self.gas_units * stats::quantile_sorted(&self.gas, q) + self.mev_ratio * notional
    }
}

#[derive(Debug, Clone)]
struct Book {
    snap: VaultSnapshot,
    acr: f64,
    weights: BTreeMap<AssetId, f64>,
    lines: Vec<V2Asset>,
    borrowers: Vec<BorrowerState>,
    params: ParamVector,
}

fn positions_at(bundle: &DataBundle, t: Timestamp, prices: &PriceMap) -> Vec<BorrowerState> {
    let idx = bundle.positions.partition_point(|p| p.time <= t);
    if idx == 0 {
        return Vec::new();
    }
    let at = bundle.positions[idx - 1].time;
    let mut out: Vec<BorrowerState> = bundle.positions[..idx]
        .iter()
        .rev()
        .take_while(|p| p.time == at)
        .map(|p| BorrowerState {
            collateral: p.collateral.clone(),
            debt_value: p.debt.iter().map(|(a, q)| q * prices.get(a).copied().unwrap_or(0.0)).sum(),
        })
        .collect();
    out.reverse();
    out
}

fn snapshot_at(bundle: &DataBundle, t: Timestamp) -> Option<&VaultSnapshot> {
    let idx = bundle.snapshots.partition_point(|s| s.time <= t);
    (idx > 0).then(|| &bundle.snapshots[idx - 1])
}

impl Book {
    fn at(bundle: &DataBundle, t: Timestamp, est: &Estimates, lambda: &Slippage) -> Result<Book> {
        let snap = snapshot_at(bundle, t)
            .ok_or_else(|| Error::insufficient("balance-sheet snapshots before evaluation time", 0, 1))?
            .clone();
        let prices = bundle.prices_at(t);
        let params = bundle.params_at(t).clone();
        let weights = accounting::collateral_weights(&snap, &prices)?;
        let acr = accounting::acr(accounting::oracle_value(&snap.collateral_qty, &prices)?, snap.liabilities)?;
        let mut lines = Vec::new();
        for (a, q) in &snap.collateral_qty {
            let Some(p) = prices.get(a) else { continue };
            lines.push(V2Asset {
                asset: a.clone(),
                price: *p,
                quantity: *q,
                depth: bundle.depth_at(a, t),
                lambda: match lambda {
                    Slippage::Impact(f) => f.lambda_of(a),
                    _ => 0.0,
                },
                sigma_per_sqrt_hour: est.oracle.get(a).map(|e| e.sigma_per_sqrt_hour).unwrap_or(0.0),
                drawdown: 0.0,
                depth_factor: 1.0,
            });
        }
        Ok(Book { snap, acr, weights, lines, borrowers: positions_at(bundle, t, &prices), params })
    }

    fn input(&self, s: &ScenarioSpec, cfg: &EngineConfig, clr: f64) -> V2Input {
        let assets = self
            .lines
            .iter()
            .map(|l| V2Asset { drawdown: s.drawdown(&l.asset), depth_factor: s.depth_factor(&l.asset), ..l.clone() })
            .collect();
        V2Input {
            liabilities: self.snap.liabilities,
            assets,
            horizon_hours: s.horizon_hours as f64,
            volume: VolumeModel::Positions {
                borrowers: self.borrowers.clone(),
                lltv: self.params.lltv.clone(),
                close_factor: self.params.close_factor,
                liq_incentive: self.params.liq_incentive,
            },
            exec_cost: 0.0,
            depth_vol_k: cfg.v2.depth_vol_k,
            gamma: cfg.v2.gamma,
            clr,
        }
    }

    /// Deterministic stressed prices, per-asset notional and liquidated count.
    fn stressed(&self, input: &V2Input) -> (Vec<f64>, Vec<f64>, usize) {
        let prices: Vec<f64> = input.assets.iter().map(|a| a.price * (1.0 - a.drawdown)).collect();
        let notional = liquidation_notional(input, &prices);
        let idx: BTreeMap<&AssetId, f64> = input.assets.iter().zip(&prices).map(|(a, p)| (&a.asset, *p)).collect();
        let n_liq = self
            .borrowers
            .iter()
            .filter(|b| {
                let adj: f64 = b
                    .collateral
                    .iter()
                    .map(|(a, q)| self.params.lltv.get(a).copied().unwrap_or(0.0) * idx.get(a).copied().unwrap_or(0.0) * q)
                    .sum();
                b.debt_value > 0.0 && adj < b.debt_value
            })
            .count();
        (prices, notional, n_liq)
    }

    fn slippage(&self, input: &V2Input, notional: &[f64], lambda: &Slippage) -> Result<BTreeMap<AssetId, f64>> {
        let mut out = BTreeMap::new();
        for (a, x) in input.assets.iter().zip(notional) {
            let eps = match lambda {
                _ if *x <= 0.0 => 0.0,
                Slippage::Constant(e) => *e,
                Slippage::None => return Err(Error::Undefined("no impact coefficient or realized slippage".into())),
                Slippage::Impact(_) => {
                    let d = stressed_depth(a, input.horizon_hours, input.depth_vol_k)
                        .filter(|d| *d > 0.0)
                        .ok_or_else(|| Error::Infeasible(format!("no depth for {} with positive volume", a.asset)))?;
                    a.lambda * (1.0 + input.gamma * input.clr) * x / d
                }
            };
            out.insert(a.asset.clone(), eps.clamp(0.0, 0.999));
        }
        Ok(out)
    }

    fn v1(&self, s: &ScenarioSpec, cfg: &EngineConfig, clr: f64, lambda: &Slippage) -> Result<(f64, BTreeMap<AssetId, f64>)> {
        let input = self.input(s, cfg, clr);
        let (_, notional, _) = self.stressed(&input);
        let eps = self.slippage(&input, &notional, lambda)?;
        let one = BTreeMap::from([(s.id.clone(), eps.clone())]);
        Ok((v1_stressed_coverage(&self.weights, &one, self.acr)?.overall, eps))
    }
}

// ---------------------------------------------------------------------------
// pipeline stages

fn estimate(bundle: &DataBundle, cfg: &EngineConfig, warn: &mut Vec<String>) -> (Estimates, Slippage) {
    let end = bundle.eval_time();
    let win = Window::trailing(end, cfg.estimation.window_hours);
    let mut est = Estimates::default();
    let slip = match estimators::estimate_lambda(bundle, win, cfg.estimation.include_clr) {
        Ok(f) => {
            if !f.clamped.is_empty() {
                warn.push(format!("impact: negative λ clamped to zero for {:?}", f.clamped));
            }
            est.impact = Some(f.clone());
            Slippage::Impact(f)
        }
        Err(e) => {
            let devs: Vec<f64> = bundle
                .liquidations
                .iter()
                .filter(|e| e.completion_time.is_some())
                .map(LiquidationEvent::weighted_deviation)
                .collect();
            if devs.is_empty() {
                warn.push(format!("impact: {e}; no realized slippage either, V1/V2 undefined"));
                Slippage::None
            } else {
                let m = stats::quantile(&devs, 0.5);
                warn.push(format!("impact: {e}; using median realized slippage {m:.6} for all scenarios"));
                est.fallback_slippage = Some(m);
                Slippage::Constant(m)
            }
        }
    };
    for a in bundle.oracles.keys() {
        match estimators::estimate_oracle_latency(bundle, a, win) {
            Ok(l) => {
                if l.short_sample {
                    warn.push(format!("oracle {a}: fewer than 48 hourly prices in estimation window"));
                }
                est.oracle.insert(a.clone(), l);
            }
            Err(e) => warn.push(format!("oracle {a}: {e}")),
        }
    }
    if bundle.gas.is_empty() {
        warn.push("gas: no gas series; ρ_G not estimated".into());
    } else {
        match estimators::estimate_gas_stress_corr(bundle, win, cfg.estimation.gas_stress_quantile) {
            Ok(g) => est.gas_stress = Some(g),
            Err(e) => warn.push(format!("gas stress correlation: {e}")),
        }
    }
    let uwin = Window::trailing(end, cfg.estimation.utilization_window_hours);
    match estimators::fit_utilization_dynamics(bundle, uwin, cfg.estimation.jump_mult) {
        Ok(u) => est.utilization = Some(u),
        Err(e) => warn.push(format!("utilization dynamics: {e}")),
    }
    match estimators::estimate_clr(bundle, win) {
        Ok(c) => est.clr = Some(c),
        Err(e) => warn.push(format!("CLR: {e}; γ·CLR amplification set to zero")),
    }
    (est, slip)
}

fn shocked_assets(book: &Book) -> Vec<AssetId> {
    book.lines.iter().filter(|l| book.params.lltv.contains_key(&l.asset)).map(|l| l.asset.clone()).collect()
}

fn build_scenarios(
    bundle: &DataBundle,
    cfg: &EngineConfig,
    book: &Book,
    est: &Estimates,
    lambda: &Slippage,
    warn: &mut Vec<String>,
) -> Result<Vec<ScenarioSpec>> {
    let sc = &cfg.scenarios;
    let mut set = Vec::new();
    if let Some(custom) = &sc.custom {
        for s in custom {
            s.validate()?;
        }
        set = custom.clone();
    } else {
        let want = |k: &str| sc.set == "all" || sc.set == k;
        if want("historical") {
            match scenarios::build_historical(bundle, &sc.historical) {
                Ok((h, w)) => {
                    warn.extend(w);
                    set.extend(h);
                }
                Err(e) => warn.push(format!("historical scenarios: {e}")),
            }
        }
        if want("parametric") {
            set.extend(scenarios::build_parametric(&sc.parametric, &shocked_assets(book))?);
        }
        if want("adversarial") && sc.adversarial.enabled {
            let sig: BTreeMap<AssetId, f64> = shocked_assets(book)
                .into_iter()
                .map(|a| {
                    let s = est.oracle.get(&a).map(|e| e.sigma_per_sqrt_hour).unwrap_or(0.0);
                    (a, s)
                })
                .collect();
            let a = &sc.adversarial;
            let fbox = FeasibleBox::k_sigma(&sig, a.k_sigma, a.horizon_hours, a.depth_floor, a.resolution);
            let clr = est.clr.unwrap_or(0.0);
            match scenarios::build_adversarial(&fbox, |s| book.v1(s, cfg, clr, lambda).map(|r| r.0)) {
                Ok(r) => set.push(r.scenario),
                Err(e) => warn.push(format!("adversarial scenario: {e}")),
            }
        }
    }
    scenarios::annotate_consistency(&mut set, &book.snap)?;
    for s in &set {
        if s.flagged() {
            warn.push(format!("scenario {} flagged: utilization exceeds implied bound; excluded from headline V1/V2", s.id));
        }
    }
    if set.is_empty() {
        warn.push("scenario set is empty".into());
    }
    Ok(set)
}

fn score_scenarios(
    cfg: &EngineConfig,
    book: &Book,
    set: &[ScenarioSpec],
    est: &Estimates,
    lambda: &Slippage,
    cost: Option<&ExecCostModel>,
    warn: &mut Vec<String>,
) -> Vec<ScenarioResult> {
    let clr = est.clr.unwrap_or(0.0);
    let mut out = Vec::new();
    for s in set {
        let mut input = book.input(s, cfg, clr);
        let (_, notional, n_liq) = book.stressed(&input);
        input.exec_cost = cost.map(|c| c.cost(s.gas_quantile, n_liq, notional.iter().sum())).unwrap_or(0.0);
        let (v1, slippage) = match book.slippage(&input, &notional, lambda) {
            Ok(eps) => {
                let one = BTreeMap::from([(s.id.clone(), eps.clone())]);
                match v1_stressed_coverage(&book.weights, &one, book.acr) {
                    Ok(r) => (Some(r.overall), eps),
                    Err(e) => {
                        warn.push(format!("V1 {}: {e}", s.id));
                        (None, eps)
                    }
                }
            }
            Err(e) => {
                warn.push(format!("V1 {}: {e}", s.id));
                (None, BTreeMap::new())
            }
        };
        let v2 = match lambda {
            Slippage::Impact(_) => match v2_expected_shortfall(&input, cfg.v2.n_paths, cfg.seed) {
                Ok(r) => Some(r),
                Err(e) => {
                    warn.push(format!("V2 {}: {e}", s.id));
                    None
                }
            },
            _ => None,
        };
        out.push(ScenarioResult { id: s.id.clone(), kind: s.kind, flagged: s.flagged(), v1, slippage, v2, exec_cost: input.exec_cost });
    }
    out
}

fn v4_lines(bundle: &DataBundle, cfg: &EngineConfig, book: &Book, est: &Estimates, warn: &mut Vec<String>) -> Vec<V4Line> {
    let mut lines = Vec::new();
    let t = bundle.eval_time();
    let total: f64 = shocked_assets(book).iter().map(|a| book.weights.get(a).copied().unwrap_or(0.0)).sum();
    for a in shocked_assets(book) {
        let (Some(l0), Ok(lt)) = (book.params.ltv0.get(&a).copied(), book.params.lltv_of(&a)) else { continue };
        let Some(lat) = est.oracle.get(&a) else {
            warn.push(format!("V4 {a}: no oracle latency estimate"));
            continue;
        };
        let eta = 1.0 - l0 / lt;
        let line = book.lines.iter().find(|l| l.asset == a).expect("shocked asset has a line");
        let (benefit, cost) = match cfg.v4.manipulation.get(&a) {
            Some(m) => (m.benefit, m.cost),
            None => {
                let cv = line.price * line.quantity;
                let depth = bundle.depth_at(&a, t).unwrap_or(0.0);
                (lt * cv * eta, depth * eta)
            }
        };
        let input = V4Input {
            eta_bar: eta,
            sigma_per_sqrt_hour: lat.sigma_per_sqrt_hour,
            staleness_hours: lat.staleness_hours,
            benefit,
            cost,
            liabilities: book.snap.liabilities,
            rwa: cfg.v4.rwa.get(&a).cloned(),
            closure_hours: cfg.v4.closure_hours.get(&a).copied(),
        };
        match v4_oracle_integrity(&input) {
            Ok(r) => {
                if r.degenerate_manipulation_inputs {
                    warn.push(format!("V4 {a}: manipulation cost and benefit both zero"));
                }
                let w = if total > 0.0 { book.weights.get(&a).copied().unwrap_or(0.0) / total } else { 0.0 };
                lines.push(V4Line { asset: a, weight: w, result: r });
            }
            Err(e) => warn.push(format!("V4 {a}: {e}")),
        }
    }
    lines
}

fn backtest_episodes(
    bundle: &DataBundle,
    cfg: &EngineConfig,
    est: &Estimates,
    lambda: &Slippage,
    warn: &mut Vec<String>,
) -> ValidationReport {
    let h = cfg.validation.backtest_horizon_hours;
    let hist = HistoricalConfig { horizon_hours: h, ..cfg.scenarios.historical.clone() };
    let episodes = match scenarios::build_historical(bundle, &hist) {
        Ok((s, _)) => s,
        Err(e) => {
            warn.push(format!("backtest: {e}"));
            Vec::new()
        }
    };
    let clr = est.clr.unwrap_or(0.0);
    let mut pairs = Vec::new();
    let mut tts = Vec::new();
    for s in &episodes {
        let Some(t0) = s.id.strip_prefix("hist-").and_then(|x| x.parse::<Timestamp>().ok()) else { continue };
        let Ok(book) = Book::at(bundle, t0, est, lambda) else { continue };
        let Ok((v1, _)) = book.v1(s, cfg, clr, lambda) else { continue };
        let base = book.snap.assets_book;
        let end = t0 + h as i64 * SECONDS_PER_HOUR;
        let hit = bundle
            .snapshots
            .iter()
            .filter(|x| x.time > t0 && x.time <= end)
            .find(|x| x.assets_book < base * (1.0 - 1e-12))
            .map(|x| (x.time - t0) as f64 / SECONDS_PER_HOUR as f64);
        pairs.push((v1, hit.is_some()));
        tts.push(hit);
    }
    let (backtest, backtest_error) = match validate::backtest_v1(&pairs) {
        Ok(b) => (Some(b), None),
        Err(e) => {
            warn.push(format!("backtest: {e}"));
            (None, Some(e.to_string()))
        }
    };
    let gap = if tts.is_empty() {
        None
    } else {
        validate::gap_diagnostic(&tts, cfg.validation.delta_star_hours, cfg.validation.action_latencies_hours.as_deref()).ok()
    };
    ValidationReport { n_episodes: pairs.len(), backtest, backtest_error, gap }
}

fn structural_report(cfg: &EngineConfig, book: &Book, bundle: &DataBundle, est: &Estimates, v5: Option<&V5Result>, warn: &mut Vec<String>) -> StructuralReport {
    let sc = &cfg.structural;
    let mut assets = BTreeMap::new();
    for a in shocked_assets(book) {
        let l0 = book.params.ltv0.get(&a).copied();
        let lt = book.params.lltv.get(&a).copied();
        let sigma = est.oracle.get(&a).map(|e| e.sigma_per_sqrt_hour * HOURS_PER_YEAR.sqrt());
        let cm = bundle.rehypo_meta.get(&a).and_then(|m| {
            let layers: Vec<f64> = m.per_layer_ltv.iter().map(|l| 1.0 / (1.0 - l)).collect();
            cascade_multiplier(m.hd, &layers).map_err(|e| warn.push(format!("cascade multiplier {a}: {e}"))).ok()
        });
        if bundle.kind_of(&a) == AssetKind::ShareToken && !bundle.rehypo_meta.contains_key(&a) {
            warn.push(format!("share-token collateral {a} has no rehypothecation metadata; CM not computed"));
        }
        assets.insert(
            a.clone(),
            AssetStructure {
                leverage_multiplier: l0.and_then(|l| leverage_multiplier(l, sc.loop_depth).ok()),
                trigger_price_ratio: l0.zip(lt).and_then(|(x, y)| trigger_price_ratio(x, y).ok()),
                buffer: l0.zip(lt).zip(sigma).and_then(|((x, y), s)| buffer_adequacy(x, y, s, sc.monitor_freq_per_year, sc.k_q).ok()),
                cascade_multiplier: cm,
            },
        );
    }
    if sc.k_q <= DEFAULT_KQ {
        warn.push(KQ_WARNING.to_string());
    }
    let u = accounting::utilization(book.snap.borrows, book.snap.deposits).unwrap_or(0.0);
    let wc = withdrawal_capacity(book.snap.deposits, u, &sc.strategies)
        .map_err(|e| warn.push(format!("withdrawal capacity: {e}")))
        .ok();
    let eq = sc.exit_queue.as_ref().and_then(|q| {
        exit_queue_duration(q.queue_len, q.churn_per_epoch, q.epoch_seconds)
            .map_err(|e| warn.push(format!("exit queue: {e}")))
            .ok()
    });
    let oa = sc.oracle_adequacy.as_ref().and_then(|o| {
        oracle_adequacy(o.q0, o.q_min, o.worst_std, o.sensitivity)
            .map_err(|e| warn.push(format!("oracle adequacy: {e}")))
            .ok()
    });
    StructuralReport {
        assets,
        clr: est.clr,
        pi_star: v5.and_then(|v| v.pi_star),
        withdrawal_capacity: wc,
        exit_queue: eq,
        oracle_adequacy: oa,
    }
}

fn worst_case(cov: &CoverageReport, item: &str) -> bool {
    cov.status(item) == Some(Coverage::WorstCase)
}

/// Runs the full scoring pipeline. Rayon parallelism inside the Monte Carlo
/// and grid stages does not affect the output.
pub fn score(bundle: &DataBundle, cfg: &EngineConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let mut warn = Vec::new();
    if cfg.normalization.status.eq_ignore_ascii_case("UNCALIBRATED") {
        warn.push("normalization spec is UNCALIBRATED: breakpoints are placeholders".into());
    }
    let cov = check_data_depth(bundle, &cfg.ingest.depth_requirements);
    for i in &cov.items {
        match i.status {
            Coverage::WorstCase => warn.push(format!("data depth: {} missing, WORST-CASE substitution", i.item)),
            Coverage::Fail => warn.push(format!(
                "data depth: {} covers {:.1} of {:.1} required days",
                i.item,
                i.observed_days.unwrap_or(0.0),
                i.required_days.unwrap_or(0.0)
            )),
            Coverage::Pass => {}
        }
    }
    let t = bundle.eval_time();
    let (est, lambda) = estimate(bundle, cfg, &mut warn);
    let book = Book::at(bundle, t, &est, &lambda)?;
    let set = build_scenarios(bundle, cfg, &book, &est, &lambda, &mut warn)?;
    let cost = ExecCostModel::from_bundle(bundle);
    if cost.is_none() {
        warn.push("execution costs: no gas series or gas-bearing liquidations; V2 execution costs set to zero".into());
    }
    let per = score_scenarios(cfg, &book, &set, &est, &lambda, cost.as_ref(), &mut warn);
    let mut metrics = Vec::new();

    // V1
    let v1_ok = !(worst_case(&cov, "dex_depth") || worst_case(&cov, "execution_prices"));
    let slip: BTreeMap<String, BTreeMap<AssetId, f64>> = per
        .iter()
        .filter(|r| !r.flagged && r.v1.is_some())
        .map(|r| (r.id.clone(), r.slippage.clone()))
        .collect();
    let v1 = if v1_ok && !slip.is_empty() {
        v1_stressed_coverage(&book.weights, &slip, book.acr).map_err(|e| warn.push(format!("V1: {e}"))).ok()
    } else {
        if !v1_ok {
            warn.push("V1 undefined: depth or execution prices missing".into());
        }
        None
    };
    for r in &per {
        let mut m = MetricValue::new(MetricName::V1, r.v1, Units::Ratio).scenario(&r.id);
        if r.flagged {
            m = m.diag("flagged", 1.0);
        }
        metrics.push(m);
    }

    // V2
    let v2_ok = v1_ok && !worst_case(&cov, "positions");
    let mut v2_worst: Option<(String, f64)> = None;
    for r in per.iter().filter(|r| !r.flagged) {
        if let Some(v) = &r.v2 {
            if v2_worst.as_ref().is_none_or(|w| v.loss_rate > w.1) {
                v2_worst = Some((r.id.clone(), v.loss_rate));
            }
        }
    }
    for r in &per {
        if let Some(v) = &r.v2 {
            metrics.push(
                MetricValue::new(MetricName::V2, Some(v.v2), Units::UnitOfAccount)
                    .scenario(&r.id)
                    .diag("loss_rate", v.loss_rate)
                    .diag("std_error", v.std_error)
                    .diag("clipped_paths", v.clipped_paths as f64),
            );
        }
    }
    if !v2_ok {
        warn.push("V2 undefined: depth, execution prices or positions missing".into());
    }
    let v2_raw = if v2_ok { v2_worst.as_ref().map(|w| w.1) } else { None };

    // V3
    let barrier = cfg.v3.barrier.unwrap_or(book.params.u_max);
    let u0 = accounting::utilization(book.snap.borrows, book.snap.deposits)?;
    let v3 = est.utilization.as_ref().and_then(|f| {
        v3_boundary_hitting(u0, f, barrier, cfg.v3.horizon_hours, cfg.v3.n_paths, cfg.seed, cfg.v3.jump_overlay)
            .map_err(|e| warn.push(format!("V3: {e}")))
            .ok()
    });
    if let Some(r) = &v3 {
        metrics.push(
            MetricValue::new(MetricName::V3, Some(r.probability), Units::Probability)
                .diag("std_error", r.std_error)
                .diag("barrier", barrier)
                .diag("u0", u0),
        );
    }

    // V4
    let v4l = v4_lines(bundle, cfg, &book, &est, &mut warn);
    let v4_ok = !worst_case(&cov, "reference_prices") && !v4l.is_empty();
    if worst_case(&cov, "reference_prices") {
        warn.push("V4 undefined: reference prices missing".into());
    }
    let wsum = |f: fn(&V4Result) -> f64| v4l.iter().map(|l| l.weight * f(&l.result)).sum::<f64>();
    let v4_raw = v4_ok.then(|| wsum(|r| r.v4));
    if v4_ok {
        metrics.push(MetricValue::new(MetricName::V4a, Some(wsum(|r| r.v4a)), Units::Probability));
        metrics.push(MetricValue::new(MetricName::V4b, Some(wsum(|r| r.v4b)), Units::Ratio));
    }
    metrics.push(MetricValue::new(MetricName::V4, v4_raw, Units::Score));

    // V5
    let v5_ok = !(worst_case(&cov, "gas") || worst_case(&cov, "mev_proxy"));
    let v5 = if v5_ok {
        v5_execution_viability(
            &bundle.liquidations,
            cfg.v5.tau_max_hours,
            est.gas_stress.as_ref().map(|g| g.rho_g),
            cfg.v5.shortfall_given_failure,
        )
        .map_err(|e| warn.push(format!("V5: {e}")))
        .ok()
    } else {
        warn.push("V5 undefined: gas or MEV proxy missing".into());
        None
    };
    if let Some(r) = &v5 {
        if r.default_shortfall_given_failure {
            warn.push("V5ES: shortfall given failure defaulted to mean stalled debt".into());
        }
        metrics.push(MetricValue::new(MetricName::V5, Some(r.v5), Units::Score).diag("n_triggers", r.n_triggers as f64));
        metrics.push(MetricValue::new(MetricName::V5ES, Some(r.v5_es), Units::UnitOfAccount));
    } else {
        metrics.push(MetricValue::new(MetricName::V5, None, Units::Score));
    }

    // PI bounds
    let mut pi1 = BTreeMap::new();
    for (a, s) in &bundle.oracles {
        if s.reference_points.is_none() {
            continue;
        }
        match validate::pi1_from_series(s) {
            Ok(r) => {
                pi1.insert(a.clone(), r);
            }
            Err(e) => warn.push(format!("PI-1 {a}: {e}")),
        }
    }
    let pi2 = validate::pi2_liquidation_bound(&bundle.liquidations, cfg.v5.tau_max_hours)
        .map_err(|e| warn.push(format!("PI-2: {e}")))
        .ok();

    // aggregate
    let raws = [v1.as_ref().map(|r| r.overall), v2_raw, v3.as_ref().map(|r| r.probability), v4_raw, v5.as_ref().map(|r| r.v5)];
    let mut normalized = BTreeMap::new();
    let mut scores = [0.0; 5];
    for (i, c) in COMPONENTS.iter().enumerate() {
        let n = aggregate::normalize(raws[i], &cfg.normalization.maps[*c])?;
        if n.worst_case {
            warn.push(format!("{c} undefined: normalized to 0 (worst case)"));
        }
        scores[i] = n.score;
        normalized.insert(c.to_string(), n);
    }
    let vcs = aggregate::vcs(scores, cfg.normalization.weights)?;

    // level 3
    let level3 = match &cfg.structural.graph {
        Some(g) => {
            let code = code_failure_prob(g, cfg.structural.horizon_years)?;
            let l1 = v2_raw.unwrap_or(0.0);
            if v2_raw.is_none() {
                warn.push("Level 3: E[l^L1] unavailable, using 0".into());
            }
            let verdict = dominance_check(code.q_code, l1)?;
            Some(Level3 { code, expected_l1_loss: l1, verdict })
        }
        None => {
            warn.push("Level 3: no dependency graph configured; verdict not computed".into());
            None
        }
    };
    let structural = structural_report(cfg, &book, bundle, &est, v5.as_ref(), &mut warn);
    let yield_decomposition = match &cfg.yield_streams {
        Some(y) => estimators::decompose_yield(&y.streams, y.principal, y.horizon_days, y.protocol_bound)
            .map_err(|e| warn.push(format!("yield: {e}")))
            .ok(),
        None => {
            warn.push("yield: no income streams configured".into());
            None
        }
    };
    let validation = backtest_episodes(bundle, cfg, &est, &lambda, &mut warn);

    Ok(MetricReport {
        meta: RunMeta {
            engine_version: ENGINE_VERSION.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            rng: RNG_NAME.into(),
            eval_time: t,
        },
        config: cfg.clone(),
        data_depth: cov,
        estimates: est,
        scenarios: set,
        per_scenario: per,
        metrics,
        components: Components { v1, v2_worst: v2_worst.map(|w| w.0), v3, v4: v4l, v5 },
        pi_bounds: PiBounds { pi1, pi2 },
        normalized,
        vcs,
        level3,
        structural,
        yield_decomposition,
        validation,
        warnings: warn,
    })
}

/// Estimates only, for the `estimate` command.
pub fn estimates(bundle: &DataBundle, cfg: &EngineConfig) -> (Estimates, Vec<String>) {
    let mut warn = Vec::new();
    let (e, _) = estimate(bundle, cfg, &mut warn);
    (e, warn)
}

/// Annotated scenario set, for the `stress` command.
pub fn stress(bundle: &DataBundle, cfg: &EngineConfig) -> Result<(Vec<ScenarioSpec>, Vec<String>)> {
    cfg.validate()?;
    let mut warn = Vec::new();
    let (est, lambda) = estimate(bundle, cfg, &mut warn);
    let book = Book::at(bundle, bundle.eval_time(), &est, &lambda)?;
    let set = build_scenarios(bundle, cfg, &book, &est, &lambda, &mut warn)?;
    Ok((set, warn))
}

/// Backtest and Gap only, for the `backtest` command.
pub fn backtest(bundle: &DataBundle, cfg: &EngineConfig) -> (ValidationReport, Vec<String>) {
    let mut warn = Vec::new();
    let (est, lambda) = estimate(bundle, cfg, &mut warn);
    let v = backtest_episodes(bundle, cfg, &est, &lambda, &mut warn);
    (v, warn)
}

/// Short text rendering of a report.
pub fn summary(r: &MetricReport) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into());
    let mut s = String::new();
    s.push_str(&format!("config {}  seed {}\n", &r.meta.config_hash[..12], r.meta.seed));
    for c in COMPONENTS {
        let n = &r.normalized[c];
        s.push_str(&format!("{c}  score {:.4}{}\n", n.score, if n.worst_case { "  (worst case)" } else { "" }));
    }
    s.push_str(&format!(
        "VCS mult {:.4}  add {:.4}  weakest {}\n",
        r.vcs.vcs_mult, r.vcs.vcs_add, r.vcs.worst_link
    ));
    s.push_str(&format!("V1 {}  PI-2 {}\n", f(r.components.v1.as_ref().map(|v| v.overall)), f(r.pi_bounds.pi2)));
    s.push_str(&format!("{} scenarios, {} warnings\n", r.scenarios.len(), r.warnings.len()));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{self, WorldConfig};

    fn small() -> (DataBundle, EngineConfig) {
        let w = WorldConfig { hours: 24 * 40, ..WorldConfig::default() };
        let (b, _) = simkit::generate(&w, 3).unwrap();
        let mut cfg = EngineConfig { seed: 11, ..EngineConfig::default() };
        cfg.v2.n_paths = 200;
        cfg.v3.n_paths = 500;
        cfg.scenarios.adversarial.resolution = 2;
        (b, cfg)
    }

    #[test]
    fn hash_changes_with_seed() {
        let a = EngineConfig::default();
        let b = EngineConfig { seed: 1, ..EngineConfig::default() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), EngineConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn score_populates_sections() {
        let (b, cfg) = small();
        let r = score(&b, &cfg).unwrap();
        assert!(!r.scenarios.is_empty());
        assert!(r.components.v1.is_some());
        assert!(r.per_scenario.iter().any(|p| p.v2.is_some()));
        assert!(r.pi_bounds.pi2.is_some());
        assert!(r.warnings.iter().any(|w| w.contains("UNCALIBRATED")));
        let v1 = r.components.v1.as_ref().unwrap();
        assert!(v1.overall <= v1.acr);
    }

    #[test]
    fn missing_gas_zeroes_v5() {
        let (mut b, cfg) = small();
        b.gas.clear();
        let r = score(&b, &cfg).unwrap();
        assert_eq!(r.normalized["V5"].score, 0.0);
        assert!(r.normalized["V5"].worst_case);
        assert!(r.warnings.iter().any(|w| w.contains("V5 undefined")));
    }
}
