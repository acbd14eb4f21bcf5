//! Run manifests: one directory per run holding the config snapshot,
//! metrics, matrix, loss curve and parameters.

use std::fmt::Write as _;
use std::path::Path;

use gradia_core::model::Parameters;
use gradia_core::reasonability::{MetricsReport, Quadrant, ReasonabilityMatrix};
use gradia_core::trainer::LossPoint;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::archive::write_params;
use crate::config::WorkbenchConfig;
use crate::error::{read_required, write_file, Result, WorkbenchError};

pub const CONFIG_FILE: &str = "config.toml";
pub const PARAMS_FILE: &str = "params.bin";
pub const METRICS_FILE: &str = "metrics.txt";
pub const MATRIX_FILE: &str = "matrix.json";
pub const CURVE_FILE: &str = "loss_curve.csv";
pub const REPORT_FILE: &str = "report.json";

/// `key value` per line, in a fixed order.
pub fn metrics_text(m: &MetricsReport) -> String {
    let mut out = String::new();
    for (k, v) in [
        ("m1_accuracy", m.m1_accuracy),
        ("m2_ra_performance", m.m2_ra_performance),
        ("m3_mean_iou", m.m3_mean_iou),
        ("m3_std_iou", m.m3_std_iou),
        ("m4_attention_accuracy", m.m4_attention_accuracy),
    ] {
        writeln!(out, "{k} {v}").expect("write to String");
    }
    out
}

/// Inverse of [`metrics_text`].
pub fn parse_metrics_text(text: &str) -> Result<MetricsReport> {
    let mut values = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| WorkbenchError::Config(format!("bad metrics line {line:?}")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| WorkbenchError::Config(format!("bad metrics value {line:?}")))?;
        values.insert(k.to_string(), v);
    }
    let get = |k: &str| {
        values
            .get(k)
            .copied()
            .ok_or_else(|| WorkbenchError::Config(format!("metrics lack {k}")))
    };
    Ok(MetricsReport {
        m1_accuracy: get("m1_accuracy")?,
        m2_ra_performance: get("m2_ra_performance")?,
        m3_mean_iou: get("m3_mean_iou")?,
        m3_std_iou: get("m3_std_iou")?,
        m4_attention_accuracy: get("m4_attention_accuracy")?,
    })
}

/// Long-format CSV with columns `step,term,value`.
pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,term,value\n");
    for p in curve {
        for (term, v) in p.breakdown.terms() {
            writeln!(out, "{},{term},{v}", p.step).expect("write to String");
        }
    }
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| WorkbenchError::Runtime(e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    serde_json::from_slice(&read_required(path, what)?)
        .map_err(|e| WorkbenchError::Config(format!("{}: {e}", path.display())))
}

/// Writes whichever artifacts a stage produced into `dir`.
#[derive(Default)]
pub struct RunArtifacts<'a> {
    pub config: Option<&'a WorkbenchConfig>,
    pub params: Option<&'a Parameters>,
    pub curve: Option<&'a [LossPoint]>,
    pub matrix: Option<&'a ReasonabilityMatrix>,
    pub metrics: Option<&'a MetricsReport>,
}

impl RunArtifacts<'_> {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| WorkbenchError::io(dir, e))?;
        if let Some(c) = self.config {
            write_file(&dir.join(CONFIG_FILE), c.to_toml()?)?;
        }
        if let Some(p) = self.params {
            write_params(&dir.join(PARAMS_FILE), p)?;
        }
        if let Some(c) = self.curve {
            write_file(&dir.join(CURVE_FILE), loss_curve_csv(c))?;
        }
        if let Some(m) = self.matrix {
            write_json(&dir.join(MATRIX_FILE), m)?;
        }
        if let Some(m) = self.metrics {
            write_file(&dir.join(METRICS_FILE), metrics_text(m))?;
        }
        Ok(())
    }
}

/// One row of the side-by-side condition table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub name: String,
    pub matrix: [usize; 4],
    pub metrics: MetricsReport,
}

impl ConditionRow {
    pub fn new(name: impl Into<String>, matrix: &ReasonabilityMatrix, metrics: &MetricsReport) -> Self {
        Self {
            name: name.into(),
            matrix: Quadrant::ALL.map(|q| matrix.count(q)),
            metrics: metrics.clone(),
        }
    }
}

/// Markdown table with the matrix as `[RA UA; RIA UIA]`, M1 and M2 in
/// percent, M3 as mean ± std and M4 in percent.
pub fn condition_table(rows: &[ConditionRow]) -> String {
    let mut out = String::from("| Condition | Matrix [RA UA; RIA UIA] | M1 | M2 | M3 (IoU) | M4 |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let [ra, ua, ria, uia] = r.matrix;
        let m = &r.metrics;
        writeln!(
            out,
            "| {} | [{ra} {ua}; {ria} {uia}] | {:.2}% | {:.2}% | {:.2} ± {:.2} | {:.2}% |",
            r.name,
            100.0 * m.m1_accuracy,
            100.0 * m.m2_ra_performance,
            m.m3_mean_iou,
            m.m3_std_iou,
            100.0 * m.m4_attention_accuracy
        )
        .expect("write to String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradia_core::loss::LossBreakdown;

    #[test]
    fn metrics_text_round_trips() {
        let m = MetricsReport {
            m1_accuracy: 0.8213333333333334,
            m2_ra_performance: 0.408,
            m3_mean_iou: 0.31,
            m3_std_iou: 0.17,
            m4_attention_accuracy: 0.452,
        };
        let text = metrics_text(&m);
        assert_eq!(text.lines().count(), 5);
        assert_eq!(parse_metrics_text(&text).unwrap(), m);
    }

    #[test]
    fn loss_curve_has_one_row_per_term() {
        let curve = [
            LossPoint {
                step: 0,
                breakdown: LossBreakdown::default(),
            },
            LossPoint {
                step: 1,
                breakdown: LossBreakdown::default(),
            },
        ];
        let csv = loss_curve_csv(&curve);
        assert_eq!(csv.lines().next(), Some("step,term,value"));
        assert_eq!(csv.lines().count(), 1 + 2 * 8);
        assert!(csv.contains("1,total,0\n"));
    }
}
