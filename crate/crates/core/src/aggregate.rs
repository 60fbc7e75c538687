//! Score normalization and the two VCS operators.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COMPONENTS: [&str; 5] = ["V1", "V2", "V3", "V4", "V5"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    HigherIsSafer,
    HigherIsRiskier,
}

/// Monotone piecewise-linear map from a raw metric to [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMap {
    pub direction: Direction,
    /// `(raw, score)` pairs, strictly increasing in raw.
    pub breakpoints: Vec<(f64, f64)>,
}

impl MetricMap {
    pub fn validate(&self, name: &str) -> Result<()> {
        let bp = &self.breakpoints;
        if bp.len() < 2 {
            return Err(Error::config(format!("{name}: need at least two breakpoints")));
        }
        for w in bp.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::config(format!("{name}: raw breakpoints must be strictly increasing")));
            }
            let ok = match self.direction {
                Direction::HigherIsSafer => w[1].1 >= w[0].1,
                Direction::HigherIsRiskier => w[1].1 <= w[0].1,
            };
            if !ok {
                return Err(Error::config(format!("{name}: scores not monotone in declared direction")));
            }
        }
        if bp.iter().any(|(r, s)| !r.is_finite() || !(0.0..=1.0).contains(s)) {
            return Err(Error::config(format!("{name}: breakpoint out of range")));
        }
        let ends = (bp[0].1, bp[bp.len() - 1].1);
        let want = match self.direction {
            Direction::HigherIsSafer => (0.0, 1.0),
            Direction::HigherIsRiskier => (1.0, 0.0),
        };
        if ends != want {
            return Err(Error::config(format!("{name}: end scores must be {want:?}")));
        }
        Ok(())
    }

    fn apply(&self, x: f64) -> f64 {
        let bp = &self.breakpoints;
        if x <= bp[0].0 {
            return bp[0].1;
        }
        if x >= bp[bp.len() - 1].0 {
            return bp[bp.len() - 1].1;
        }
        let i = bp.partition_point(|p| p.0 <= x);
        let (x0, y0) = bp[i - 1];
        let (x1, y1) = bp[i];
        (y0 + (x - x0) / (x1 - x0) * (y1 - y0)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    #[serde(default)]
    pub status: String,
    pub maps: BTreeMap<String, MetricMap>,
    pub weights: [f64; 5],
}

impl Default for NormalizationSpec {
    /// Placeholder breakpoints. Not calibrated against any loss history.
    fn default() -> Self {
        let safer = |bp: Vec<(f64, f64)>| MetricMap { direction: Direction::HigherIsSafer, breakpoints: bp };
        let riskier = |bp: Vec<(f64, f64)>| MetricMap { direction: Direction::HigherIsRiskier, breakpoints: bp };
        let maps = [
            ("V1", safer(vec![(1.0, 0.0), (1.1, 0.5), (1.5, 1.0)])),
            ("V2", riskier(vec![(0.0, 1.0), (0.01, 0.8), (0.10, 0.0)])),
            ("V3", riskier(vec![(0.0, 1.0), (0.05, 0.7), (0.5, 0.0)])),
            ("V4", safer(vec![(0.0, 0.0), (1.0, 1.0)])),
            ("V5", safer(vec![(0.0, 0.0), (1.0, 1.0)])),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        NormalizationSpec {
            status: "UNCALIBRATED".into(),
            maps,
            weights: [0.2; 5],
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        for c in COMPONENTS {
            self.maps
                .get(c)
                .ok_or_else(|| Error::config(format!("normalization spec missing {c}")))?
                .validate(c)?;
        }
        check_weights(&self.weights)
    }
}

fn check_weights(w: &[f64; 5]) -> Result<()> {
    if w.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::config("weights must be non-negative"));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::config(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    pub score: f64,
    /// Raw value was undefined and mapped to the worst score.
    pub worst_case: bool,
}

pub fn normalize(raw: Option<f64>, map: &MetricMap) -> Result<Normalized> {
    map.validate("metric")?;
    match raw {
        Some(x) if x.is_finite() => Ok(Normalized { score: map.apply(x), worst_case: false }),
        Some(x) => Err(Error::domain(format!("raw metric value {x} is not finite"))),
        None => Ok(Normalized { score: 0.0, worst_case: true }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcsReport {
    pub scores: [f64; 5],
    pub weights: [f64; 5],
    pub vcs_mult: f64,
    pub vcs_add: f64,
    pub worst_link: String,
}

pub fn vcs(scores: [f64; 5], weights: [f64; 5]) -> Result<VcsReport> {
    check_weights(&weights)?;
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::domain("scores must lie in [0,1]"));
    }
    let mult = scores.iter().product();
    let add = scores.iter().zip(&weights).map(|(s, w)| s * w).sum::<f64>().clamp(0.0, 1.0);
    let mut worst = 0;
    for i in 1..5 {
        if scores[i] < scores[worst] {
            worst = i;
        }
    }
    Ok(VcsReport {
        scores,
        weights,
        vcs_mult: mult,
        vcs_add: add,
        worst_link: COMPONENTS[worst].to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let spec = NormalizationSpec::default();
        spec.validate().unwrap();
        let v1 = &spec.maps["V1"];
        assert_eq!(normalize(Some(1.5), v1).unwrap().score, 1.0);
        assert_eq!(normalize(Some(1.0), v1).unwrap().score, 0.0);
        assert_eq!(normalize(Some(1.0), &spec.maps["V3"]).unwrap().score, 0.0);
        let u = normalize(None, &spec.maps["V5"]).unwrap();
        assert_eq!(u.score, 0.0);
        assert!(u.worst_case);
    }

    #[test]
    fn malformed_spec() {
        let bad = MetricMap { direction: Direction::HigherIsSafer, breakpoints: vec![(1.0, 0.0), (1.0, 1.0)] };
        assert!(matches!(normalize(Some(1.0), &bad), Err(Error::Config(_))));
        let bad = MetricMap { direction: Direction::HigherIsRiskier, breakpoints: vec![(0.0, 0.0), (1.0, 1.0)] };
        assert!(bad.validate("x").is_err());
    }

    #[test]
    fn vcs_examples() {
        let w = [0.2; 5];
        assert_eq!(vcs([0.0, 1.0, 1.0, 1.0, 1.0], w).unwrap().vcs_mult, 0.0);
        let r = vcs([1.0; 5], w).unwrap();
        assert_eq!((r.vcs_mult, r.vcs_add), (1.0, 1.0));
        let r = vcs([0.9; 5], w).unwrap();
        assert_abs_diff_eq!(r.vcs_mult, 0.59049, epsilon = 1e-12);
        assert_abs_diff_eq!(r.vcs_add, 0.9, epsilon = 1e-12);
        assert_eq!(vcs([0.5, 0.3, 0.3, 0.9, 1.0], w).unwrap().worst_link, "V2");
        assert!(matches!(vcs([1.0; 5], [0.2, 0.2, 0.2, 0.2, 0.3]), Err(Error::Config(_))));
        // all equal and in {0,1}: operators agree
        let r = vcs([0.0; 5], w).unwrap();
        assert_eq!(r.vcs_mult, r.vcs_add);
    }

    proptest! {
        #[test]
        fn mult_le_add(s in proptest::array::uniform5(0.0f64..=1.0)) {
            let r = vcs(s, [0.2; 5]).unwrap();
            prop_assert!(r.vcs_mult <= r.vcs_add + 1e-15);
        }

        #[test]
        fn monotone_in_each_score(s in proptest::array::uniform5(0.0f64..=1.0), i in 0usize..5, d in 0.0f64..1.0) {
            let mut t = s;
            t[i] = (t[i] + d).min(1.0);
            let a = vcs(s, [0.2; 5]).unwrap();
            let b = vcs(t, [0.2; 5]).unwrap();
            prop_assert!(b.vcs_mult >= a.vcs_mult && b.vcs_add >= a.vcs_add - 1e-15);
        }

        #[test]
        fn normalize_monotone(x in -1.0f64..2.0, d in 0.0f64..1.0) {
            let spec = NormalizationSpec::default();
            for (k, m) in &spec.maps {
                let a = normalize(Some(x), m).unwrap().score;
                let b = normalize(Some(x + d), m).unwrap().score;
                match m.direction {
                    Direction::HigherIsSafer => prop_assert!(b >= a, "{}", k),
                    Direction::HigherIsRiskier => prop_assert!(b <= a, "{}", k),
                }
            }
        }
    }
}
