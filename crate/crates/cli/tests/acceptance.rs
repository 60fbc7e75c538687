//! One pass/fail line per acceptance criterion. Criterion 9 is reported as
//! 9a (PI-2) and 9b (PI-1).
//!
//! 9b cannot hold: with S = η - ζ and independent ζ, Var(S) = Var(η) +
//! Var(ζ) ≥ Var(η). It is evaluated and printed like the others but does not
//! fail this test; `pi1_lower_bound_strict` asserts it and is ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use vaultcredit::aggregate::vcs;
use vaultcredit::estimators::{fit_impact, UtilizationFit, Window};
use vaultcredit::metrics::*;
use vaultcredit::rng;
use vaultcredit::simkit;
use vaultcredit::structural::*;
use vaultcredit::validate::{backtest_v1, pi1_from_series, pi2_liquidation_bound};
use vaultcredit::AssetId;

const UNATTAINABLE: &[&str] = &["9b"];

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: &'static str, pass: bool, detail: String) -> Line {
    Line { id, pass, detail }
}

fn c1() -> Line {
    let t = Instant::now();
    let mut r = rng::stream(1, "acceptance-c1", 0);
    let (mut bad, mut eq_cases) = (0, 0);
    for i in 0..10_000 {
        let acr = 0.5 + 2.0 * r.random::<f64>();
        let k = 1 + (i % 4);
        let raw: Vec<f64> = (0..k).map(|_| 0.01 + r.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let zero = i % 10 == 0;
        let mut w = BTreeMap::new();
        let mut e = BTreeMap::new();
        for (j, x) in raw.iter().enumerate() {
            let a = AssetId::from(format!("A{j}").as_str());
            w.insert(a.clone(), x / s);
            e.insert(a, if zero { 0.0 } else { 0.001 + 0.9 * r.random::<f64>() });
        }
        let v = v1_stressed_coverage(&w, &BTreeMap::from([("s".to_string(), e)]), acr).unwrap().overall;
        let ok = if zero { v == acr } else { v < acr };
        eq_cases += zero as usize;
        bad += (!ok) as usize;
    }
    let secs = t.elapsed().as_secs_f64();
    line("1", bad == 0 && secs < 5.0, format!("10000 draws, {bad} violations, {eq_cases} equality cases, {secs:.2}s"))
}

fn c2() -> Line {
    let acr = 1.25;
    let w = BTreeMap::from([(AssetId::from("A"), 1.0)]);
    let at = |e: f64| {
        v1_stressed_coverage(&w, &BTreeMap::from([("s".into(), BTreeMap::from([(AssetId::from("A"), e)]))]), acr).unwrap()
    };
    let r = at(0.2);
    let pass = (r.overall - 1.0).abs() <= 1e-12
        && (r.breach_threshold - 0.2).abs() <= 1e-12
        && at(0.2 - 1e-6).overall > 1.0
        && at(0.2 + 1e-6).overall < 1.0;
    line("2", pass, format!("V1(0.2) = {:.15}, threshold {:.15}", r.overall, r.breach_threshold))
}

fn v2_input(notional: f64, lambda: f64) -> V2Input {
    V2Input {
        liabilities: 90_000.0,
        assets: vec![V2Asset {
            asset: AssetId::from("A"),
            price: 100.0,
            quantity: 1000.0,
            depth: Some(1e6),
            lambda,
            sigma_per_sqrt_hour: 0.01,
            drawdown: 0.1,
            depth_factor: 1.0,
        }],
        horizon_hours: 24.0,
        volume: VolumeModel::Fixed(notional),
        exec_cost: 0.0,
        depth_vol_k: 1.0,
        gamma: 0.0,
        clr: 0.0,
    }
}

fn c3() -> Line {
    let t = Instant::now();
    let grid: Vec<f64> = (0..20).map(|i| 5_000.0 * i as f64).collect();
    let run = |lam: f64| -> Vec<f64> {
        grid.iter().map(|n| v2_expected_shortfall(&v2_input(*n, lam), 10_000, 42).unwrap().v2).collect()
    };
    let a = run(0.5);
    let b = run(1.0);
    let min_d2 = a.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).fold(f64::INFINITY, f64::min);
    let mono = a.iter().zip(&b).all(|(x, y)| y >= x);
    let secs = t.elapsed().as_secs_f64();
    line(
        "3",
        min_d2 >= -1e-9 && mono && secs < 30.0 && a[19] > a[0],
        format!("min second difference {min_d2:.3e}, λ→2λ monotone {mono}, V2 {:.2}..{:.2}, {secs:.2}s", a[0], a[19]),
    )
}

fn c4() -> Line {
    let t = Instant::now();
    let fit = UtilizationFit::diffusion(0.0, 0.01);
    let mc = v3_boundary_hitting(0.9, &fit, 1.0, 24, 100_000, 7, 1.0).unwrap();
    let exact = simkit::first_passage_analytic(0.9, 1.0, 0.0, 0.01, 24.0);
    let z = (mc.probability - exact).abs() / mc.std_error;
    let u0s = [0.80, 0.85, 0.90, 0.95, 0.99];
    let ps: Vec<f64> = u0s.iter().map(|u| v3_boundary_hitting(*u, &fit, 1.0, 24, 100_000, 7, 1.0).unwrap().probability).collect();
    let mono = ps.windows(2).all(|w| w[1] >= w[0]);
    let secs = t.elapsed().as_secs_f64();
    line(
        "4",
        z <= 3.0 && mono && secs < 60.0,
        format!("MC {:.5} vs analytic {exact:.5} ({z:.2} se), monotone in u0 {mono}, {secs:.2}s", mc.probability),
    )
}

fn c5() -> Line {
    let lambdas = BTreeMap::from([(AssetId::from("ETH"), 0.5), (AssetId::from("WBTC"), 0.3)]);
    let w = Window { start: 0, end: 1_000_000_000 };
    let clean = fit_impact(&simkit::impact_observations(&lambdas, 200, 0.0, None, 0, 5), false, w).unwrap();
    let noisy = fit_impact(&simkit::impact_observations(&lambdas, 200, 1e-4, None, 0, 5), false, w).unwrap();
    let mut err = 0.0f64;
    let mut zmax = 0.0f64;
    for (a, l) in &lambdas {
        err = err.max((clean.lambda[a] - l).abs());
        zmax = zmax.max((noisy.lambda[a] - l).abs() / noisy.lambda_se[a]);
    }
    line("5", err <= 1e-10 && zmax <= 3.0, format!("noiseless max error {err:.2e}, noisy max {zmax:.2} HAC se"))
}

fn c6() -> Line {
    let w = [0.2; 5];
    let mut zero_ok = true;
    for i in 0..5 {
        let mut s = [0.9; 5];
        s[i] = 0.0;
        let r = vcs(s, w).unwrap();
        zero_ok &= r.vcs_mult == 0.0 && r.worst_link == format!("V{}", i + 1);
    }
    let mut r = rng::stream(6, "acceptance-c6", 0);
    let mut bad = 0;
    for _ in 0..10_000 {
        let s: [f64; 5] = std::array::from_fn(|_| r.random::<f64>());
        let v = vcs(s, w).unwrap();
        bad += (v.vcs_mult > v.vcs_add) as usize;
    }
    line("6", zero_ok && bad == 0, format!("single-zero patterns zeroed {zero_ok}, mult > add in {bad} of 10000"))
}

fn c7() -> Line {
    let q = 0.0013;
    let one = code_failure_prob(&DependencyGraph::uniform(1, q), 1.0).unwrap();
    let ref_ok = (one.q_code - 0.0013).abs() <= 1e-12;
    let mut marg = 0.0f64;
    for k in 1..=10 {
        let c = code_failure_prob(&DependencyGraph::uniform(k, q), 1.0).unwrap();
        marg = marg.max((c.next_node_marginal - (1.0 - q).powi(k as i32) * q).abs());
    }
    let below = dominance_check(q, q + 1e-9).unwrap().verdict;
    let at = dominance_check(q, q).unwrap().verdict;
    let above = dominance_check(q, q - 1e-9).unwrap().verdict;
    let flip = below == Dominance::L1Dominant && at == Dominance::L1Dominant && above == Dominance::L3Dominant;
    line(
        "7",
        ref_ok && marg <= 1e-15 && flip,
        format!("q_code(k=1) = {}, marginal max error {marg:.1e}, flip at q_code = E[l1] {flip}", one.q_code),
    )
}

fn c8() -> Line {
    let lev = leverage_multiplier(0.8, None).unwrap();
    let trig = trigger_price_ratio(0.8, 0.9).unwrap();
    let gap = gap_risk(100.0, 0.2, 2.0);
    let pass = (lev - 5.0).abs() <= 1e-9
        && (trig - 0.8 / 0.9).abs() <= 1e-9
        && (gap - 100.0 * 0.2 * (2.0f64 / 365.0).sqrt()).abs() <= 1e-9;
    line("8", pass, format!("Λ = {lev}, trigger ratio = {trig:.12}, gap risk = {gap:.12}"))
}

struct PiWorld {
    pi2: f64,
    truth_fail: f64,
    var_spread: f64,
    var_eta: f64,
}

fn pi_worlds() -> Vec<PiWorld> {
    (0..50u64)
        .map(|i| {
            let cfg = simkit::pi_world(i);
            let (b, truth) = simkit::generate(&cfg, 1000 + i).unwrap();
            let a = &cfg.assets[0].id;
            let pi1 = pi1_from_series(&b.oracles[a]).unwrap();
            PiWorld {
                pi2: pi2_liquidation_bound(&b.liquidations, cfg.tau_max_hours).unwrap(),
                truth_fail: truth.failure_prob.unwrap(),
                var_spread: pi1.var_spread,
                var_eta: simkit::eta_moments(&truth.assets[a]).0,
            }
        })
        .collect()
}

fn c9(worlds: &[PiWorld]) -> (Line, Line) {
    let a = worlds.iter().filter(|w| w.pi2 <= w.truth_fail + 1e-12).count();
    let b = worlds.iter().filter(|w| w.var_spread <= w.var_eta).count();
    let ratio = worlds.iter().map(|w| w.var_spread / w.var_eta).fold(f64::INFINITY, f64::min);
    (
        line("9a", a == worlds.len(), format!("PI-2 ≤ true failure probability in {a} of {} worlds", worlds.len())),
        line(
            "9b",
            b == worlds.len(),
            format!(
                "Var(S) ≤ Var(η) in {b} of {} worlds (min Var(S)/Var(η) = {ratio:.3}); Var(S) = Var(η) + Var(ζ) is an upper bound",
                worlds.len()
            ),
        ),
    )
}

fn c10() -> Line {
    let reps = 100;
    let mut pass = 0;
    let mut neg = 0;
    for rep in 0..reps {
        let r = backtest_v1(&simkit::backtest_population(200, 10, rep)).unwrap();
        pass += r.directional_pass as usize;
        neg += (r.alpha1 < 0.0) as usize;
    }
    line("10", pass * 100 >= 95 * reps as usize, format!("directional_pass in {pass} of {reps}, α1 < 0 in {neg}"))
}

fn demo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo/config.json")
}

fn score_bytes(workers: usize, out: &Path) -> Vec<u8> {
    let st = Command::new(env!("CARGO_BIN_EXE_vce"))
        .args(["score", "--config"])
        .arg(demo_config())
        .args(["--workers", &workers.to_string(), "--out"])
        .arg(out)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stdout));
    std::fs::read(out.join("report.json")).unwrap()
}

fn c11() -> Line {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<Vec<u8>> = [1, 1, 1, 4]
        .iter()
        .enumerate()
        .map(|(i, w)| score_bytes(*w, &dir.path().join(format!("r{i}"))))
        .collect();
    let same = runs.iter().all(|r| *r == runs[0]);
    let secs = t.elapsed().as_secs_f64();
    line("11", same && secs < 120.0, format!("3 runs + workers 1/4 byte-identical {same}, {secs:.2}s"))
}

#[test]
fn acceptance_criteria() {
    let worlds = pi_worlds();
    let (l9a, l9b) = c9(&worlds);
    let lines = vec![c1(), c2(), c3(), c4(), c5(), c6(), c7(), c8(), l9a, l9b, c10(), c11()];
    let mut unexpected = Vec::new();
    for l in &lines {
        let known = UNATTAINABLE.contains(&l.id);
        let tag = match (l.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (unattainable as stated)",
            (false, false) => "FAIL",
        };
        println!("criterion {:>3}: {tag}: {}", l.id, l.detail);
        if !l.pass && !known {
            unexpected.push(l.id);
        }
    }
    assert!(unexpected.is_empty(), "failed criteria: {unexpected:?}");
}

#[test]
#[ignore = "criterion 9b contradicts Var(S) = Var(η) + Var(ζ); run with --ignored to see it fail"]
fn pi1_lower_bound_strict() {
    let (_, l) = c9(&pi_worlds());
    assert!(l.pass, "{}", l.detail);
}
