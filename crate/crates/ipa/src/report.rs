//! Metric reports: canonical JSON documents plus comparison with
//! per-metric deltas and regression flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flat metric map with provenance and a config echo. Keys are sorted, so
/// serialization is canonical for a given content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recipe_digest: String,
    pub seed: u64,
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.canonical_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MetricReport> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("report: {e}")))
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricDelta {
    pub a: f64,
    pub b: f64,
    pub abs_delta: f64,
    /// (b - a) / |a|; None when a == 0.
    pub rel_delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDiff {
    pub deltas: BTreeMap<String, MetricDelta>,
}

/// Per-metric tolerance: flag metric movements beyond `max_rel_degradation`
/// in the bad direction when comparing report `b` against baseline `a`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tolerance {
    pub metric: String,
    pub lower_is_better: bool,
    pub max_rel_degradation: f64,
}

/// Compare two reports sharing the same metric keys.
pub fn compare_report(a: &MetricReport, b: &MetricReport) -> Result<ReportDiff> {
    let ka: Vec<&String> = a.metrics.keys().collect();
    let kb: Vec<&String> = b.metrics.keys().collect();
    if ka != kb {
        let only_a: Vec<&&String> = ka.iter().filter(|k| !kb.contains(k)).collect();
        let only_b: Vec<&&String> = kb.iter().filter(|k| !ka.contains(k)).collect();
        return Err(Error::Report(format!(
            "metric keys differ; only in a: {only_a:?}, only in b: {only_b:?}"
        )));
    }
    let mut deltas = BTreeMap::new();
    for (k, &va) in &a.metrics {
        let vb = b.metrics[k];
        deltas.insert(
            k.clone(),
            MetricDelta {
                a: va,
                b: vb,
                abs_delta: vb - va,
                rel_delta: if va != 0.0 {
                    Some((vb - va) / va.abs())
                } else {
                    None
                },
            },
        );
    }
    Ok(ReportDiff { deltas })
}

/// Metrics in `diff` that degrade beyond their tolerance.
pub fn regressions(diff: &ReportDiff, tolerances: &[Tolerance]) -> Vec<String> {
    let mut out = Vec::new();
    for t in tolerances {
        if let Some(d) = diff.deltas.get(&t.metric) {
            let rel = match d.rel_delta {
                Some(r) => r,
                None => {
                    // baseline zero: any increase of a lower-is-better metric
                    // (or decrease of a higher-is-better one) is a regression
                    if (t.lower_is_better && d.b > 0.0) || (!t.lower_is_better && d.b < 0.0) {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                }
            };
            let degradation = if t.lower_is_better { rel } else { -rel };
            if degradation > t.max_rel_degradation {
                out.push(t.metric.clone());
            }
        }
    }
    out
}

/// Aligned plain-text table of a diff.
pub fn render_diff(diff: &ReportDiff) -> String {
    let mut out = String::new();
    let width = diff
        .deltas
        .keys()
        .map(|k| k.len())
        .max()
        .unwrap_or(6)
        .max(6);
    out.push_str(&format!(
        "{:<width$}  {:>12}  {:>12}  {:>12}  {:>9}\n",
        "metric", "a", "b", "abs", "rel"
    ));
    for (k, d) in &diff.deltas {
        let rel = match d.rel_delta {
            Some(r) => format!("{:+.1}%", r * 100.0),
            None => "n/a".to_string(),
        };
        out.push_str(&format!(
            "{k:<width$}  {:>12.6}  {:>12.6}  {:>+12.6}  {rel:>9}\n",
            d.a, d.b, d.abs_delta
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(metrics: &[(&str, f64)]) -> MetricReport {
        MetricReport {
            recipe_digest: "d".into(),
            seed: 0,
            task: "t".into(),
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            config: serde_json::json!({}),
        }
    }

    #[test]
    fn identical_reports_have_zero_deltas() {
        let a = report(&[("x", 0.5), ("y", 2.0)]);
        let diff = compare_report(&a, &a.clone()).unwrap();
        for d in diff.deltas.values() {
            assert_eq!(d.abs_delta, 0.0);
            assert_eq!(d.rel_delta, Some(0.0));
        }
    }

    #[test]
    fn relative_delta_hand_case() {
        let a = report(&[("x", 0.5)]);
        let b = report(&[("x", 0.25)]);
        let diff = compare_report(&a, &b).unwrap();
        assert_eq!(diff.deltas["x"].rel_delta, Some(-0.5));
    }

    #[test]
    fn key_mismatch_lists_the_difference() {
        let a = report(&[("x", 0.5)]);
        let b = report(&[("y", 0.5)]);
        let err = compare_report(&a, &b).unwrap_err();
        match err {
            Error::Report(msg) => {
                assert!(msg.contains('x') && msg.contains('y'), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn regression_detection_respects_direction() {
        let a = report(&[("tox", 0.2), ("cov", 0.8)]);
        let b = report(&[("tox", 0.4), ("cov", 0.5)]);
        let diff = compare_report(&a, &b).unwrap();
        let tol = vec![
            Tolerance {
                metric: "tox".into(),
                lower_is_better: true,
                max_rel_degradation: 0.5,
            },
            Tolerance {
                metric: "cov".into(),
                lower_is_better: false,
                max_rel_degradation: 0.1,
            },
        ];
        let regs = regressions(&diff, &tol);
        assert!(regs.contains(&"tox".to_string()));
        assert!(regs.contains(&"cov".to_string()));
        // improvements never regress
        let better = report(&[("tox", 0.1), ("cov", 0.9)]);
        let diff = compare_report(&a, &better).unwrap();
        assert!(regressions(&diff, &tol).is_empty());
    }

    #[test]
    fn canonical_json_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let a = report(&[("x", 0.123456), ("y", -4.0)]);
        a.save(&path).unwrap();
        let b = MetricReport::load(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.canonical_json(), b.canonical_json());
    }
}
