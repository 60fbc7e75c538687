//! Code-integrity probabilities and closed-form structural diagnostics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Vault,
    Protocol,
    Oracle,
    Bridge,
    Messaging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub q_annual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

impl DependencyGraph {
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::config("dependency graph needs at least one node"));
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(Error::config(format!("duplicate node id {}", n.id)));
            }
            if !(0.0..=1.0).contains(&n.q_annual) {
                return Err(Error::config(format!("q for {} outside [0,1]", n.id)));
            }
        }
        for (a, b) in &self.edges {
            if !ids.contains(a.as_str()) || !ids.contains(b.as_str()) {
                return Err(Error::config(format!("edge {a}->{b} references unknown node")));
            }
        }
        Ok(())
    }

    /// Homogeneous chain of `k` nodes with the same annual probability.
    pub fn uniform(k: usize, q: f64) -> Self {
        DependencyGraph {
            nodes: (0..k)
                .map(|i| Node { id: format!("n{i}"), kind: NodeKind::Protocol, q_annual: q })
                .collect(),
            edges: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeFailure {
    pub q_code: f64,
    pub per_node: Vec<(String, f64)>,
    /// `(1-q)^k q` for one more node with the mean per-node probability.
    pub next_node_marginal: f64,
}

pub fn horizon_prob(q_annual: f64, years: f64) -> f64 {
    1.0 - (1.0 - q_annual).powf(years)
}

/// `1 - Π(1 - q_i)`, independence across nodes.
pub fn code_failure_prob(graph: &DependencyGraph, horizon_years: f64) -> Result<CodeFailure> {
    graph.validate()?;
    if !(horizon_years > 0.0) {
        return Err(Error::domain("horizon must be positive"));
    }
    let qs: Vec<f64> = graph.nodes.iter().map(|n| horizon_prob(n.q_annual, horizon_years)).collect();
    let survive: f64 = qs.iter().map(|q| 1.0 - q).product();
    let k = qs.len();
    let qbar = qs.iter().sum::<f64>() / k as f64;
    Ok(CodeFailure {
        q_code: 1.0 - survive,
        per_node: graph.nodes.iter().map(|n| n.id.clone()).zip(qs).collect(),
        next_node_marginal: (1.0 - qbar).powi(k as i32) * qbar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dominance {
    L3Dominant,
    L1Dominant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceVerdict {
    pub verdict: Dominance,
    pub margin: f64,
    /// `(1 - q) E[ℓ1] + q E[ℓ3]` with `E[ℓ3] = 1`.
    pub full_loss: f64,
}

pub fn dominance_check(q_code: f64, expected_l1_loss: f64) -> Result<DominanceVerdict> {
    for v in [q_code, expected_l1_loss] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain("dominance inputs must lie in [0,1]"));
        }
    }
    Ok(DominanceVerdict {
        verdict: if q_code > expected_l1_loss { Dominance::L3Dominant } else { Dominance::L1Dominant },
        margin: q_code - expected_l1_loss,
        full_loss: (1.0 - q_code) * expected_l1_loss + q_code,
    })
}

/// `(1 - ltv^(n+1)) / (1 - ltv)`; `n = None` is the infinite loop.
pub fn leverage_multiplier(ltv0: f64, n: Option<u32>) -> Result<f64> {
    if !(ltv0 > 0.0 && ltv0 < 1.0) {
        return Err(Error::domain("ltv0 must lie in (0,1)"));
    }
    Ok(match n {
        None => 1.0 / (1.0 - ltv0),
        Some(n) => (1.0 - ltv0.powi(n as i32 + 1)) / (1.0 - ltv0),
    })
}

/// Product of the first `hd - 1` layer multipliers.
pub fn cascade_multiplier(hd: u32, layers: &[f64]) -> Result<f64> {
    if hd == 0 {
        return Err(Error::domain("rehypothecation depth must be >= 1"));
    }
    let need = (hd - 1) as usize;
    if layers.len() < need {
        return Err(Error::domain(format!("need {need} layer multipliers, got {}", layers.len())));
    }
    if layers[..need].iter().any(|l| !(*l >= 1.0)) {
        return Err(Error::domain("layer multipliers must be >= 1"));
    }
    Ok(layers[..need].iter().product())
}

pub fn cascade_multiplier_uniform(hd: u32, lambda: f64) -> Result<f64> {
    cascade_multiplier(hd, &vec![lambda; hd.saturating_sub(1) as usize])
}

pub fn trigger_price_ratio(ltv0: f64, lltv: f64) -> Result<f64> {
    if !(ltv0 > 0.0 && ltv0 <= lltv && lltv <= 1.0) {
        return Err(Error::domain("need 0 < ltv0 <= lltv <= 1"));
    }
    Ok(ltv0 / lltv)
}

pub const DEFAULT_KQ: f64 = 3.0;
pub const KQ_WARNING: &str = "k_q = 3 assumes near-normal returns; fat-tailed crypto returns need larger buffers";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferCheck {
    pub buffer: f64,
    pub required: f64,
    pub pass: bool,
}

pub fn buffer_adequacy(ltv0: f64, lltv: f64, sigma_annual: f64, monitor_freq_per_year: f64, k_q: f64) -> Result<BufferCheck> {
    if !(monitor_freq_per_year > 0.0 && k_q > 0.0) {
        return Err(Error::domain("monitoring frequency and k_q must be positive"));
    }
    if sigma_annual < 0.0 {
        return Err(Error::domain("sigma must be >= 0"));
    }
    let buffer = lltv - ltv0;
    let required = k_q * sigma_annual / monitor_freq_per_year.sqrt();
    Ok(BufferCheck { buffer, required, pass: buffer >= required })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitQueue {
    pub epochs: f64,
    pub seconds: f64,
}

pub fn exit_queue_duration(queue_len: f64, churn_per_epoch: f64, epoch_seconds: f64) -> Result<ExitQueue> {
    if !(churn_per_epoch > 0.0) {
        return Err(Error::domain("churn must be positive"));
    }
    if queue_len < 0.0 {
        return Err(Error::domain("queue length must be >= 0"));
    }
    let epochs = queue_len / churn_per_epoch;
    Ok(ExitQueue { epochs, seconds: epochs * epoch_seconds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Binding {
    Liquidity,
    Strategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WithdrawalCapacity {
    pub capacity: f64,
    pub binding: Binding,
}

/// `min(D(1-U), Σ f_k W_k)`. Ties count as liquidity-bound.
pub fn withdrawal_capacity(deposits: f64, utilization: f64, strategies: &[(f64, f64)]) -> Result<WithdrawalCapacity> {
    if !(0.0..=1.0).contains(&utilization) || deposits < 0.0 {
        return Err(Error::domain("need deposits >= 0 and utilization in [0,1]"));
    }
    let fsum: f64 = strategies.iter().map(|s| s.0).sum();
    if fsum > 1.0 + 1e-12 || strategies.iter().any(|(f, w)| *f < 0.0 || *w < 0.0) {
        return Err(Error::domain("strategy fractions must be >= 0 and sum to <= 1; caps >= 0"));
    }
    let liq = deposits * (1.0 - utilization);
    let strat: f64 = if strategies.is_empty() {
        f64::INFINITY
    } else {
        strategies.iter().map(|(f, w)| if *f == 0.0 { 0.0 } else { f * w }).sum()
    };
    Ok(if strat < liq {
        WithdrawalCapacity { capacity: strat, binding: Binding::Strategy }
    } else {
        WithdrawalCapacity { capacity: liq, binding: Binding::Liquidity }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleAdequacy {
    pub required_q0: f64,
    pub pass: bool,
}

pub fn oracle_adequacy(q0: f64, q_min: f64, worst_std: f64, sensitivity: f64) -> Result<OracleAdequacy> {
    if !(sensitivity > 0.0) {
        return Err(Error::domain("V4 sensitivity must be positive"));
    }
    let required = q_min + worst_std / sensitivity;
    Ok(OracleAdequacy { required_q0: required, pass: q0 >= required })
}
