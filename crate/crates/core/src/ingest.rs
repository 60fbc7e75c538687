//! Flat-file data stack: loading, validation, canonical re-serialization and
//! the data-depth coverage report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::*;

pub const SNAPSHOTS: &str = "snapshots.csv";
pub const COLLATERAL: &str = "collateral.csv";
pub const POSITIONS: &str = "positions.csv";
pub const LIQUIDATIONS: &str = "liquidations.csv";
pub const ORACLE: &str = "oracle.csv";
pub const DEPTH: &str = "depth.csv";
pub const GAS: &str = "gas.csv";
pub const PARAMS: &str = "params.csv";
pub const REHYPO: &str = "rehypo.csv";

const H_SNAPSHOTS: &[&str] = &["time", "deposits", "borrows", "liabilities", "assets_book", "share_supply"];
const H_COLLATERAL: &[&str] = &["time", "asset", "quantity"];
const H_POSITIONS: &[&str] = &["time", "account", "asset", "side", "quantity"];
const H_LIQUIDATIONS: &[&str] = &[
    "trigger_time",
    "completion_time",
    "account",
    "asset",
    "side",
    "quantity",
    "oracle_price",
    "execution_price",
    "gas_units",
    "gas_price",
    "mev_cost",
    "fees",
];
const H_ORACLE: &[&str] = &["asset", "time", "price", "is_update", "reference_price"];
const H_DEPTH: &[&str] = &["asset", "time", "depth", "venue"];
const H_GAS: &[&str] = &["time", "gas_price", "priority_fee"];
const H_PARAMS: &[&str] = &[
    "effective_time",
    "asset",
    "ltv0",
    "lltv",
    "liq_incentive",
    "close_factor",
    "cap",
    "timelock_hours",
];
const H_REHYPO: &[&str] = &["asset", "hd", "per_layer_ltv"];

/// Minimum history per data item, in days. `None` fields have no span
/// requirement (presence only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthRequirements {
    pub balance_sheet_days: f64,
    pub positions_days: f64,
    pub liquidations_days: f64,
    pub oracle_days: f64,
    pub reference_days: f64,
    pub dex_depth_days: f64,
    pub execution_prices_days: f64,
    pub gas_days: f64,
    pub mev_days: f64,
}

const YEAR: f64 = 365.0;
const HALF_YEAR: f64 = 182.0;

impl Default for DepthRequirements {
    fn default() -> Self {
        DepthRequirements {
            balance_sheet_days: YEAR,
            positions_days: HALF_YEAR,
            liquidations_days: HALF_YEAR,
            oracle_days: YEAR,
            reference_days: 2.0 * YEAR,
            dex_depth_days: HALF_YEAR,
            execution_prices_days: HALF_YEAR,
            gas_days: YEAR,
            mev_days: HALF_YEAR,
        }
    }
}

impl DepthRequirements {
    fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("balance_sheet", self.balance_sheet_days),
            ("positions", self.positions_days),
            ("liquidations", self.liquidations_days),
            ("oracle_prices", self.oracle_days),
            ("reference_prices", self.reference_days),
            ("dex_depth", self.dex_depth_days),
            ("execution_prices", self.execution_prices_days),
            ("gas", self.gas_days),
            ("mev_proxy", self.mev_days),
        ]
    }

    /// Requirements may be tightened freely. Relaxing any of them below the
    /// defaults needs `force`.
    pub fn check(&self, force: bool) -> Result<()> {
        let defaults = DepthRequirements::default();
        for ((name, v), (_, d)) in self.fields().iter().zip(defaults.fields()) {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::config(format!("depth requirement {name} must be >= 0")));
            }
            if *v < d && !force {
                return Err(Error::config(format!(
                    "depth requirement {name} = {v} days is below the default {d}; pass --force to relax"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub asset_kinds: BTreeMap<AssetId, AssetKind>,
    pub u_max: f64,
    pub depth_requirements: DepthRequirements,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            asset_kinds: BTreeMap::new(),
            u_max: 1.0,
            depth_requirements: DepthRequirements::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataBundle {
    pub snapshots: Vec<VaultSnapshot>,
    pub positions: Vec<PositionRecord>,
    pub liquidations: Vec<LiquidationEvent>,
    pub oracles: BTreeMap<AssetId, OracleSeries>,
    pub depth: BTreeMap<AssetId, Vec<DepthSnapshot>>,
    pub gas: Vec<GasPoint>,
    pub params: Vec<ParamVector>,
    pub rehypo_meta: BTreeMap<AssetId, RehypoMeta>,
    pub asset_kinds: BTreeMap<AssetId, AssetKind>,
}

impl DataBundle {
    pub fn kind_of(&self, a: &AssetId) -> AssetKind {
        self.asset_kinds.get(a).copied().unwrap_or_default()
    }

    pub fn latest_snapshot(&self) -> &VaultSnapshot {
        self.snapshots.last().expect("bundle has at least one snapshot")
    }

    pub fn params_at(&self, t: Timestamp) -> &ParamVector {
        let idx = self.params.partition_point(|p| p.effective_time <= t);
        &self.params[idx.saturating_sub(1)]
    }

    pub fn prices_at(&self, t: Timestamp) -> PriceMap {
        self.oracles
            .iter()
            .filter_map(|(a, s)| s.price_at(t).map(|p| (a.clone(), p)))
            .collect()
    }

    /// Latest snapshot time, taken as the evaluation time.
    pub fn eval_time(&self) -> Timestamp {
        self.latest_snapshot().time
    }

    /// Aggregate depth across venues as a step series (last value per venue
    /// carried forward).
    pub fn depth_series(&self, a: &AssetId) -> Vec<(Timestamp, f64)> {
        let Some(rows) = self.depth.get(a) else {
            return Vec::new();
        };
        let mut by_venue: BTreeMap<&str, f64> = BTreeMap::new();
        let mut out: Vec<(Timestamp, f64)> = Vec::new();
        for r in rows {
            by_venue.insert(&r.venue, r.depth);
            let total: f64 = by_venue.values().sum();
            match out.last_mut() {
                Some(last) if last.0 == r.time => last.1 = total,
                _ => out.push((r.time, total)),
            }
        }
        out
    }

    pub fn depth_at(&self, a: &AssetId, t: Timestamp) -> Option<f64> {
        last_at_or_before(&self.depth_series(a), t)
    }

    pub fn gas_series(&self) -> Vec<(Timestamp, f64)> {
        self.gas.iter().map(|g| (g.time, g.gas_price)).collect()
    }

    /// Cross-reference and ordering checks for bundles built in memory.
    pub fn validate(&self) -> Result<()> {
        if self.snapshots.is_empty() {
            return Err(Error::DataIntegrity("bundle has no snapshots".into()));
        }
        if self.params.is_empty() {
            return Err(Error::DataIntegrity("bundle has no parameter history".into()));
        }
        for w in self.snapshots.windows(2) {
            if w[1].time <= w[0].time {
                return Err(Error::DataIntegrity(format!("snapshot times not increasing at {}", w[1].time)));
            }
        }
        for s in &self.snapshots {
            s.validate()?;
        }
        for p in &self.params {
            p.validate()?;
        }
        for (a, s) in &self.oracles {
            if s.points.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::DataIntegrity(format!("oracle times for {a} not increasing")));
            }
            if s.points.iter().any(|p| !(p.1 > 0.0 && p.1.is_finite())) {
                return Err(Error::DataIntegrity(format!("non-positive oracle price for {a}")));
            }
        }
        let known = |a: &AssetId| -> Result<()> {
            if self.oracles.contains_key(a) {
                Ok(())
            } else {
                Err(Error::DataIntegrity(format!("asset {a} has no oracle series")))
            }
        };
        for s in &self.snapshots {
            s.collateral_qty.keys().try_for_each(known)?;
        }
        for p in &self.positions {
            p.collateral.keys().chain(p.debt.keys()).try_for_each(known)?;
        }
        for e in &self.liquidations {
            e.repaid_debt.keys().chain(e.seized_collateral.keys()).try_for_each(known)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum TimeMode {
    Epoch,
    Iso,
}

fn detect_mode(s: &str) -> TimeMode {
    if s.trim().parse::<i64>().is_ok() {
        TimeMode::Epoch
    } else {
        TimeMode::Iso
    }
}

fn parse_iso(s: &str) -> Option<Timestamp> {
    use chrono::{DateTime, NaiveDate, NaiveDateTime};
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

struct Rows {
    file: String,
    mode: Option<TimeMode>,
    records: Vec<(u64, csv::StringRecord)>,
}

impl Rows {
    fn err(&self, line: u64, message: impl Into<String>) -> Error {
        Error::Data {
            file: self.file.clone(),
            line,
            message: message.into(),
        }
    }

    fn time(&mut self, line: u64, s: &str) -> Result<Timestamp> {
        let s = s.trim();
        let mode = *self.mode.get_or_insert_with(|| detect_mode(s));
        let parsed = match mode {
            TimeMode::Epoch => s.parse::<i64>().ok(),
            TimeMode::Iso => parse_iso(s),
        };
        parsed.ok_or_else(|| {
            let want = if mode == TimeMode::Epoch { "epoch seconds" } else { "ISO-8601" };
            self.err(line, format!("bad timestamp {s:?} (file uses {want})"))
        })
    }

    fn num(&self, line: u64, name: &str, s: &str) -> Result<f64> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| self.err(line, format!("column {name}: not a number: {s:?}")))?;
        if !v.is_finite() {
            return Err(self.err(line, format!("column {name}: non-finite value")));
        }
        Ok(v)
    }

    fn nonneg(&self, line: u64, name: &str, s: &str) -> Result<f64> {
        let v = self.num(line, name, s)?;
        if v < 0.0 {
            return Err(self.err(line, format!("column {name}: negative value {v}")));
        }
        Ok(v)
    }

    fn asset(&self, line: u64, s: &str) -> Result<AssetId> {
        AssetId::new(s.trim()).map_err(|_| self.err(line, "empty asset symbol"))
    }
}

fn read_rows(dir: &Path, name: &str, header: &[&str], optional_tail: usize) -> Result<Option<Rows>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(&path)
        .map_err(|e| csv_err(name, e))?;
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(name, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let ok = (0..=optional_tail).any(|k| got.iter().map(String::as_str).eq(header[..header.len() - k].iter().copied()));
    if !ok {
        return Err(Error::Data {
            file: name.into(),
            line: 1,
            message: format!("header must be `{}`, got `{}`", header.join(","), got.join(",")),
        });
    }
    let width = got.len();
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(name, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != width {
            return Err(Error::Data {
                file: name.into(),
                line,
                message: format!("expected {width} fields, got {}", rec.len()),
            });
        }
        records.push((line, rec));
    }
    Ok(Some(Rows {
        file: name.into(),
        mode: None,
        records,
    }))
}

fn csv_err(file: &str, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Data {
        file: file.into(),
        line,
        message: e.to_string(),
    }
}

fn required(rows: Option<Rows>, name: &str) -> Result<Rows> {
    rows.ok_or_else(|| Error::Data {
        file: name.into(),
        line: 0,
        message: "required file is missing".into(),
    })
}

/// Loads every layer file found in `dir`. `snapshots.csv`, `oracle.csv` and
/// `params.csv` are required; other layers may be absent and are then empty.
pub fn load_bundle(dir: &Path, config: &IngestConfig) -> Result<DataBundle> {
    let oracles = load_oracle(required(read_rows(dir, ORACLE, H_ORACLE, 1)?, ORACLE)?)?;
    let known: BTreeSet<AssetId> = oracles.keys().cloned().collect();
    let check = |rows: &Rows, line: u64, a: &AssetId| -> Result<()> {
        if known.contains(a) {
            Ok(())
        } else {
            Err(rows.err(line, format!("dangling reference: asset {a} has no oracle series")))
        }
    };

    let mut snapshots = load_snapshots(required(read_rows(dir, SNAPSHOTS, H_SNAPSHOTS, 0)?, SNAPSHOTS)?)?;
    if let Some(rows) = read_rows(dir, COLLATERAL, H_COLLATERAL, 0)? {
        attach_collateral(rows, &mut snapshots, &check)?;
    }
    let positions = match read_rows(dir, POSITIONS, H_POSITIONS, 0)? {
        Some(rows) => load_positions(rows, &check)?,
        None => Vec::new(),
    };
    let liquidations = match read_rows(dir, LIQUIDATIONS, H_LIQUIDATIONS, 0)? {
        Some(rows) => load_liquidations(rows, &check)?,
        None => Vec::new(),
    };
    let depth = match read_rows(dir, DEPTH, H_DEPTH, 0)? {
        Some(rows) => load_depth(rows, &check)?,
        None => BTreeMap::new(),
    };
    let gas = match read_rows(dir, GAS, H_GAS, 0)? {
        Some(rows) => load_gas(rows)?,
        None => Vec::new(),
    };
    let params = load_params(required(read_rows(dir, PARAMS, H_PARAMS, 0)?, PARAMS)?, config.u_max, &check)?;
    let rehypo_meta = match read_rows(dir, REHYPO, H_REHYPO, 0)? {
        Some(rows) => load_rehypo(rows, &check)?,
        None => BTreeMap::new(),
    };

    let bundle = DataBundle {
        snapshots,
        positions,
        liquidations,
        oracles,
        depth,
        gas,
        params,
        rehypo_meta,
        asset_kinds: config.asset_kinds.clone(),
    };
    bundle.validate()?;
    Ok(bundle)
}

fn load_oracle(mut rows: Rows) -> Result<BTreeMap<AssetId, OracleSeries>> {
    let mut out: BTreeMap<AssetId, OracleSeries> = BTreeMap::new();
    let records = std::mem::take(&mut rows.records);
    for (line, r) in &records {
        let line = *line;
        let asset = rows.asset(line, &r[0])?;
        let t = rows.time(line, &r[1])?;
        let price = rows.num(line, "price", &r[2])?;
        if price <= 0.0 {
            return Err(rows.err(line, "price must be positive"));
        }
        let is_update = match r[3].trim() {
            "0" => false,
            "1" => true,
            other => return Err(rows.err(line, format!("is_update must be 0 or 1, got {other:?}"))),
        };
        let reference = match r.get(4).map(str::trim) {
            None | Some("") => None,
            Some(s) => {
                let v = rows.num(line, "reference_price", s)?;
                if v <= 0.0 {
                    return Err(rows.err(line, "reference price must be positive"));
                }
                Some(v)
            }
        };
        let series = out.entry(asset.clone()).or_insert_with(|| OracleSeries {
            asset: asset.clone(),
            points: Vec::new(),
            update_times: Vec::new(),
            reference_points: None,
        });
        if let Some(&(prev, _)) = series.points.last() {
            if t <= prev {
                return Err(rows.err(line, format!("time order violation for {asset}: {t} after {prev}")));
            }
        }
        series.points.push((t, price));
        if is_update {
            series.update_times.push(t);
        }
        if let Some(v) = reference {
            series.reference_points.get_or_insert_with(Vec::new).push((t, v));
        }
    }
    if out.is_empty() {
        return Err(rows.err(0, "no oracle rows"));
    }
    Ok(out)
}

fn load_snapshots(mut rows: Rows) -> Result<Vec<VaultSnapshot>> {
    let records = std::mem::take(&mut rows.records);
    let mut out: Vec<VaultSnapshot> = Vec::new();
    for (line, r) in &records {
        let line = *line;
        let s = VaultSnapshot {
            time: rows.time(line, &r[0])?,
            deposits: rows.nonneg(line, "deposits", &r[1])?,
            borrows: rows.nonneg(line, "borrows", &r[2])?,
            liabilities: rows.nonneg(line, "liabilities", &r[3])?,
            assets_book: rows.nonneg(line, "assets_book", &r[4])?,
            collateral_qty: BTreeMap::new(),
            share_supply: rows.num(line, "share_supply", &r[5])?,
        };
        if let Some(prev) = out.last() {
            if s.time <= prev.time {
                return Err(rows.err(line, format!("time order violation: {} after {}", s.time, prev.time)));
            }
        }
        s.validate().map_err(|e| rows.err(line, e.to_string()))?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(rows.err(0, "no snapshot rows"));
    }
    Ok(out)
}

type AssetCheck<'a> = dyn Fn(&Rows, u64, &AssetId) -> Result<()> + 'a;

fn attach_collateral(mut rows: Rows, snapshots: &mut [VaultSnapshot], check: &AssetCheck) -> Result<()> {
    let records = std::mem::take(&mut rows.records);
    let mut prev_t = i64::MIN;
    for (line, r) in &records {
        let line = *line;
        let t = rows.time(line, &r[0])?;
        if t < prev_t {
            return Err(rows.err(line, format!("time order violation: {t} after {prev_t}")));
        }
        prev_t = t;
        let a = rows.asset(line, &r[1])?;
        check(&rows, line, &a)?;
        let q = rows.nonneg(line, "quantity", &r[2])?;
        let idx = snapshots
            .binary_search_by_key(&t, |s| s.time)
            .map_err(|_| rows.err(line, format!("no snapshot at time {t}")))?;
        if snapshots[idx].collateral_qty.insert(a.clone(), q).is_some() {
            return Err(rows.err(line, format!("duplicate collateral row for {a} at {t}")));
        }
    }
    Ok(())
}

fn load_positions(mut rows: Rows, check: &AssetCheck) -> Result<Vec<PositionRecord>> {
    let records = std::mem::take(&mut rows.records);
    let mut grouped: BTreeMap<(Timestamp, String), PositionRecord> = BTreeMap::new();
    let mut prev_t = i64::MIN;
    for (line, r) in &records {
        let line = *line;
        let t = rows.time(line, &r[0])?;
        if t < prev_t {
            return Err(rows.err(line, format!("time order violation: {t} after {prev_t}")));
        }
        prev_t = t;
        let account = r[1].trim().to_string();
        if account.is_empty() {
            return Err(rows.err(line, "empty account"));
        }
        let a = rows.asset(line, &r[2])?;
        check(&rows, line, &a)?;
        let q = rows.nonneg(line, "quantity", &r[4])?;
        let rec = grouped.entry((t, account.clone())).or_insert_with(|| PositionRecord {
            account,
            time: t,
            collateral: BTreeMap::new(),
            debt: BTreeMap::new(),
        });
        let map = match r[3].trim() {
            "C" => &mut rec.collateral,
            "D" => &mut rec.debt,
            other => return Err(rows.err(line, format!("side must be C or D, got {other:?}"))),
        };
        if map.insert(a.clone(), q).is_some() {
            return Err(rows.err(line, format!("duplicate position row for {a}")));
        }
    }
    Ok(grouped.into_values().collect())
}

fn load_liquidations(mut rows: Rows, check: &AssetCheck) -> Result<Vec<LiquidationEvent>> {
    let records = std::mem::take(&mut rows.records);
    let mut out: Vec<LiquidationEvent> = Vec::new();
    let mut prev_t = i64::MIN;
    for (line, r) in &records {
        let line = *line;
        let trigger = rows.time(line, &r[0])?;
        if trigger < prev_t {
            return Err(rows.err(line, format!("time order violation: {trigger} after {prev_t}")));
        }
        prev_t = trigger;
        let completion = match r[1].trim() {
            "" => None,
            s => Some(rows.time(line, s)?),
        };
        if let Some(c) = completion {
            if c < trigger {
                return Err(rows.err(line, "completion_time precedes trigger_time"));
            }
        }
        let account = r[2].trim().to_string();
        let a = rows.asset(line, &r[3])?;
        check(&rows, line, &a)?;
        let qty = rows.nonneg(line, "quantity", &r[5])?;
        let oracle_price = rows.num(line, "oracle_price", &r[6])?;
        if oracle_price <= 0.0 {
            return Err(rows.err(line, "oracle_price must be positive"));
        }
        let gas_units = rows.nonneg(line, "gas_units", &r[8])?;
        let gas_price = rows.nonneg(line, "gas_price", &r[9])?;
        let mev_cost = rows.nonneg(line, "mev_cost", &r[10])?;
        let fees = rows.nonneg(line, "fees", &r[11])?;

        let same = out
            .last()
            .is_some_and(|e| e.trigger_time == trigger && e.account == account);
        if !same {
            out.push(LiquidationEvent {
                trigger_time: trigger,
                completion_time: completion,
                account,
                repaid_debt: BTreeMap::new(),
                seized_collateral: BTreeMap::new(),
                gas_units,
                gas_price,
                mev_cost,
                fees,
            });
        }
        let ev = out.last_mut().expect("just pushed");
        if ev.completion_time != completion
            || ev.gas_units != gas_units
            || ev.gas_price != gas_price
            || ev.mev_cost != mev_cost
            || ev.fees != fees
        {
            return Err(rows.err(line, "event-level fields differ between legs of one event"));
        }
        match r[4].trim() {
            "repaid" => {
                if ev.repaid_debt.insert(a, RepaidLeg { quantity: qty, oracle_price }).is_some() {
                    return Err(rows.err(line, "duplicate repaid leg"));
                }
            }
            "seized" => {
                let execution_price = rows.nonneg(line, "execution_price", &r[7])?;
                let leg = SeizedLeg {
                    quantity: qty,
                    oracle_price,
                    execution_price,
                };
                if ev.seized_collateral.insert(a, leg).is_some() {
                    return Err(rows.err(line, "duplicate seized leg"));
                }
            }
            other => return Err(rows.err(line, format!("side must be repaid or seized, got {other:?}"))),
        }
    }
    Ok(out)
}

fn load_depth(mut rows: Rows, check: &AssetCheck) -> Result<BTreeMap<AssetId, Vec<DepthSnapshot>>> {
    let records = std::mem::take(&mut rows.records);
    let mut out: BTreeMap<AssetId, Vec<DepthSnapshot>> = BTreeMap::new();
    let mut last: BTreeMap<(AssetId, String), Timestamp> = BTreeMap::new();
    for (line, r) in &records {
        let line = *line;
        let a = rows.asset(line, &r[0])?;
        check(&rows, line, &a)?;
        let t = rows.time(line, &r[1])?;
        let depth = rows.num(line, "depth", &r[2])?;
        if depth <= 0.0 {
            return Err(rows.err(line, "depth must be positive"));
        }
        let venue = r[3].trim().to_string();
        let series = out.entry(a.clone()).or_default();
        if series.last().is_some_and(|p| p.time > t) {
            return Err(rows.err(line, format!("time order violation for {a}")));
        }
        if let Some(prev) = last.insert((a.clone(), venue.clone()), t) {
            if t <= prev {
                return Err(rows.err(line, format!("time order violation for {a}@{venue}")));
            }
        }
        series.push(DepthSnapshot {
            asset: a,
            time: t,
            depth,
            venue,
        });
    }
    Ok(out)
}

fn load_gas(mut rows: Rows) -> Result<Vec<GasPoint>> {
    let records = std::mem::take(&mut rows.records);
    let mut out: Vec<GasPoint> = Vec::new();
    for (line, r) in &records {
        let line = *line;
        let t = rows.time(line, &r[0])?;
        if out.last().is_some_and(|g| g.time >= t) {
            return Err(rows.err(line, format!("time order violation at {t}")));
        }
        let gas_price = rows.nonneg(line, "gas_price", &r[1])?;
        let priority_fee = match r[2].trim() {
            "" => None,
            s => Some(rows.nonneg(line, "priority_fee", s)?),
        };
        out.push(GasPoint {
            time: t,
            gas_price,
            priority_fee,
        });
    }
    Ok(out)
}

fn load_params(mut rows: Rows, u_max: f64, check: &AssetCheck) -> Result<Vec<ParamVector>> {
    let records = std::mem::take(&mut rows.records);
    let mut out: Vec<ParamVector> = Vec::new();
    let mut first_line: Vec<u64> = Vec::new();
    for (line, r) in &records {
        let line = *line;
        let t = rows.time(line, &r[0])?;
        let a = rows.asset(line, &r[1])?;
        check(&rows, line, &a)?;
        let ltv0 = rows.num(line, "ltv0", &r[2])?;
        let lltv = rows.num(line, "lltv", &r[3])?;
        let liq_incentive = rows.nonneg(line, "liq_incentive", &r[4])?;
        let close_factor = rows.num(line, "close_factor", &r[5])?;
        let cap = rows.nonneg(line, "cap", &r[6])?;
        let timelock_hours = rows.nonneg(line, "timelock_hours", &r[7])?;
        match out.last() {
            Some(p) if p.effective_time > t => {
                return Err(rows.err(line, format!("time order violation: {t} after {}", p.effective_time)));
            }
            Some(p) if p.effective_time == t => {}
            _ => {
                out.push(ParamVector {
                    effective_time: t,
                    ltv0: BTreeMap::new(),
                    lltv: BTreeMap::new(),
                    liq_incentive,
                    close_factor,
                    caps: BTreeMap::new(),
                    timelock_hours,
                    u_max,
                });
                first_line.push(line);
            }
        }
        let p = out.last_mut().expect("nonempty");
        if p.liq_incentive != liq_incentive || p.close_factor != close_factor || p.timelock_hours != timelock_hours {
            return Err(rows.err(line, "vault-level parameters differ within one effective_time"));
        }
        if p.ltv0.insert(a.clone(), ltv0).is_some() {
            return Err(rows.err(line, format!("duplicate parameter row for {a}")));
        }
        p.lltv.insert(a.clone(), lltv);
        p.caps.insert(a, cap);
    }
    for (p, line) in out.iter().zip(&first_line) {
        p.validate().map_err(|e| rows.err(*line, e.to_string()))?;
    }
    if out.is_empty() {
        return Err(rows.err(0, "no parameter rows"));
    }
    Ok(out)
}

fn load_rehypo(mut rows: Rows, check: &AssetCheck) -> Result<BTreeMap<AssetId, RehypoMeta>> {
    let records = std::mem::take(&mut rows.records);
    let mut out = BTreeMap::new();
    for (line, r) in &records {
        let line = *line;
        let a = rows.asset(line, &r[0])?;
        check(&rows, line, &a)?;
        let hd: u32 = r[1]
            .trim()
            .parse()
            .ok()
            .filter(|h| *h >= 1)
            .ok_or_else(|| rows.err(line, "hd must be a positive integer"))?;
        let mut layers = Vec::new();
        for part in r[2].split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let v = rows.num(line, "per_layer_ltv", part)?;
            if !(0.0..1.0).contains(&v) {
                return Err(rows.err(line, "per-layer ltv must lie in [0,1)"));
            }
            layers.push(v);
        }
        if out.insert(a.clone(), RehypoMeta { hd, per_layer_ltv: layers }).is_some() {
            return Err(rows.err(line, format!("duplicate rehypo row for {a}")));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Canonical writer

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(dir: &Path, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let path = dir.join(name);
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_err(name, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(name, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
    write_atomic(&path, &bytes)
}

/// Writes `bytes` to a sibling temp file and renames it into place, so a
/// failed run never leaves a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes the bundle as canonical CSV (epoch-second timestamps, shortest
/// round-trip decimals). Loading the output reproduces the bundle exactly.
pub fn write_bundle(bundle: &DataBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(
        dir,
        SNAPSHOTS,
        H_SNAPSHOTS,
        bundle
            .snapshots
            .iter()
            .map(|s| {
                vec![
                    s.time.to_string(),
                    s.deposits.to_string(),
                    s.borrows.to_string(),
                    s.liabilities.to_string(),
                    s.assets_book.to_string(),
                    s.share_supply.to_string(),
                ]
            })
            .collect(),
    )?;
    write_file(
        dir,
        COLLATERAL,
        H_COLLATERAL,
        bundle
            .snapshots
            .iter()
            .flat_map(|s| {
                s.collateral_qty
                    .iter()
                    .map(move |(a, q)| vec![s.time.to_string(), a.to_string(), q.to_string()])
            })
            .collect(),
    )?;
    let mut pos_rows = Vec::new();
    for p in &bundle.positions {
        for (side, map) in [("C", &p.collateral), ("D", &p.debt)] {
            for (a, q) in map {
                pos_rows.push(vec![
                    p.time.to_string(),
                    p.account.clone(),
                    a.to_string(),
                    side.to_string(),
                    q.to_string(),
                ]);
            }
        }
    }
    write_file(dir, POSITIONS, H_POSITIONS, pos_rows)?;

    let mut liq_rows = Vec::new();
    for e in &bundle.liquidations {
        let common = |a: &AssetId, side: &str, q: f64, op: f64, ex: Option<f64>| {
            vec![
                e.trigger_time.to_string(),
                e.completion_time.map(|c| c.to_string()).unwrap_or_default(),
                e.account.clone(),
                a.to_string(),
                side.to_string(),
                q.to_string(),
                op.to_string(),
                fmt_opt(ex),
                e.gas_units.to_string(),
                e.gas_price.to_string(),
                e.mev_cost.to_string(),
                e.fees.to_string(),
            ]
        };
        for (a, l) in &e.repaid_debt {
            liq_rows.push(common(a, "repaid", l.quantity, l.oracle_price, None));
        }
        for (a, l) in &e.seized_collateral {
            liq_rows.push(common(a, "seized", l.quantity, l.oracle_price, Some(l.execution_price)));
        }
    }
    write_file(dir, LIQUIDATIONS, H_LIQUIDATIONS, liq_rows)?;

    let any_ref = bundle.oracles.values().any(|s| s.reference_points.is_some());
    let oracle_header = if any_ref { H_ORACLE } else { &H_ORACLE[..4] };
    let mut oracle_rows = Vec::new();
    for (a, s) in &bundle.oracles {
        let updates: BTreeSet<Timestamp> = s.update_times.iter().copied().collect();
        let refs: BTreeMap<Timestamp, f64> = s.reference_points.iter().flatten().copied().collect();
        for (t, p) in &s.points {
            let mut row = vec![
                a.to_string(),
                t.to_string(),
                p.to_string(),
                if updates.contains(t) { "1" } else { "0" }.to_string(),
            ];
            if any_ref {
                row.push(fmt_opt(refs.get(t).copied()));
            }
            oracle_rows.push(row);
        }
    }
    write_file(dir, ORACLE, oracle_header, oracle_rows)?;

    write_file(
        dir,
        DEPTH,
        H_DEPTH,
        bundle
            .depth
            .values()
            .flatten()
            .map(|d| vec![d.asset.to_string(), d.time.to_string(), d.depth.to_string(), d.venue.clone()])
            .collect(),
    )?;
    write_file(
        dir,
        GAS,
        H_GAS,
        bundle
            .gas
            .iter()
            .map(|g| vec![g.time.to_string(), g.gas_price.to_string(), fmt_opt(g.priority_fee)])
            .collect(),
    )?;
    let mut param_rows = Vec::new();
    for p in &bundle.params {
        for (a, l0) in &p.ltv0 {
            param_rows.push(vec![
                p.effective_time.to_string(),
                a.to_string(),
                l0.to_string(),
                p.lltv[a].to_string(),
                p.liq_incentive.to_string(),
                p.close_factor.to_string(),
                p.caps.get(a).copied().unwrap_or(0.0).to_string(),
                p.timelock_hours.to_string(),
            ]);
        }
    }
    write_file(dir, PARAMS, H_PARAMS, param_rows)?;
    write_file(
        dir,
        REHYPO,
        H_REHYPO,
        bundle
            .rehypo_meta
            .iter()
            .map(|(a, m)| {
                let layers: Vec<String> = m.per_layer_ltv.iter().map(f64::to_string).collect();
                vec![a.to_string(), m.hd.to_string(), layers.join(";")]
            })
            .collect(),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Data depth

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum Coverage {
    Pass,
    Fail,
    WorstCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageItem {
    pub item: String,
    pub required_days: Option<f64>,
    pub observed_days: Option<f64>,
    pub status: Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub items: Vec<CoverageItem>,
}

impl CoverageReport {
    pub fn status(&self, item: &str) -> Option<Coverage> {
        self.items.iter().find(|i| i.item == item).map(|i| i.status)
    }

    pub fn worst_case_items(&self) -> Vec<&str> {
        self.items
            .iter()
            .filter(|i| i.status == Coverage::WorstCase)
            .map(|i| i.item.as_str())
            .collect()
    }
}

fn span_days(first: Option<Timestamp>, last: Option<Timestamp>) -> Option<f64> {
    Some((last? - first?) as f64 / SECONDS_PER_DAY as f64)
}

fn span_item(item: &str, required: f64, observed: Option<f64>) -> CoverageItem {
    let status = match observed {
        None => Coverage::WorstCase,
        Some(d) if d >= required => Coverage::Pass,
        Some(_) => Coverage::Fail,
    };
    CoverageItem {
        item: item.into(),
        required_days: Some(required),
        observed_days: observed,
        status,
    }
}

/// Compares each data item's observed span against its requirement. Absent
/// items are marked WORST-CASE.
pub fn check_data_depth(bundle: &DataBundle, req: &DepthRequirements) -> CoverageReport {
    let mut items = Vec::new();
    let snaps = &bundle.snapshots;
    items.push(span_item(
        "balance_sheet",
        req.balance_sheet_days,
        span_days(snaps.first().map(|s| s.time), snaps.last().map(|s| s.time)),
    ));
    items.push(span_item(
        "positions",
        req.positions_days,
        span_days(bundle.positions.first().map(|p| p.time), bundle.positions.last().map(|p| p.time)),
    ));
    let param_span = span_days(
        bundle.params.first().map(|p| p.effective_time),
        snaps.last().map(|s| s.time),
    );
    items.push(CoverageItem {
        item: "params".into(),
        required_days: None,
        observed_days: param_span,
        status: if bundle.params.is_empty() { Coverage::WorstCase } else { Coverage::Pass },
    });
    let liq = &bundle.liquidations;
    items.push(span_item(
        "liquidations",
        req.liquidations_days,
        span_days(liq.first().map(|e| e.trigger_time), liq.last().map(|e| e.trigger_time)),
    ));

    let min_span = |spans: Vec<Option<f64>>| -> Option<f64> {
        if spans.is_empty() || spans.iter().any(Option::is_none) {
            return None;
        }
        spans.into_iter().flatten().reduce(f64::min)
    };
    let oracle_spans = bundle
        .oracles
        .values()
        .map(|s| s.span().map(|(a, b)| (b - a) as f64 / SECONDS_PER_DAY as f64))
        .collect();
    items.push(span_item("oracle_prices", req.oracle_days, min_span(oracle_spans)));
    let ref_spans = bundle
        .oracles
        .values()
        .map(|s| {
            let r = s.reference_points.as_ref()?;
            span_days(r.first().map(|p| p.0), r.last().map(|p| p.0))
        })
        .collect();
    items.push(span_item("reference_prices", req.reference_days, min_span(ref_spans)));

    let collateral_assets: BTreeSet<&AssetId> = snaps.iter().flat_map(|s| s.collateral_qty.keys()).collect();
    let depth_spans = collateral_assets
        .iter()
        .filter(|a| bundle.kind_of(a) != AssetKind::Rwa)
        .map(|a| {
            let d = bundle.depth.get(*a)?;
            span_days(d.first().map(|p| p.time), d.last().map(|p| p.time))
        })
        .collect();
    items.push(span_item("dex_depth", req.dex_depth_days, min_span(depth_spans)));

    let exec: Vec<Timestamp> = liq
        .iter()
        .filter(|e| !e.seized_collateral.is_empty() && e.completion_time.is_some())
        .map(|e| e.trigger_time)
        .collect();
    items.push(span_item(
        "execution_prices",
        req.execution_prices_days,
        span_days(exec.first().copied(), exec.last().copied()),
    ));
    items.push(span_item(
        "gas",
        req.gas_days,
        span_days(bundle.gas.first().map(|g| g.time), bundle.gas.last().map(|g| g.time)),
    ));
    let mev: Vec<Timestamp> = bundle
        .gas
        .iter()
        .filter(|g| g.priority_fee.is_some())
        .map(|g| g.time)
        .collect();
    items.push(span_item(
        "mev_proxy",
        req.mev_days,
        span_days(mev.first().copied(), mev.last().copied()),
    ));

    let share_tokens: Vec<&AssetId> = collateral_assets
        .iter()
        .copied()
        .filter(|a| bundle.kind_of(a) == AssetKind::ShareToken)
        .collect();
    let rehypo_ok = share_tokens.iter().all(|a| bundle.rehypo_meta.contains_key(*a));
    items.push(CoverageItem {
        item: "rehypo_meta".into(),
        required_days: None,
        observed_days: None,
        status: if rehypo_ok { Coverage::Pass } else { Coverage::WorstCase },
    });
    CoverageReport { items }
}
