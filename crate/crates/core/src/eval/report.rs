//! Report rendering and per-turn drift statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{SessionReport, TurnScore, REPORT_SCHEMA_VERSION};

/// Metric names used in drift series, in report order.
pub const DRIFT_METRICS: [&str; 6] = ["if", "ic", "psnr_om", "ssim_om", "perceptual_om", "perceptual_drift"];

fn metric(t: &TurnScore, name: &str) -> Option<f64> {
    match name {
        "if" => Some(t.if_score),
        "ic" => Some(t.ic_score),
        "psnr_om" => Some(t.psnr_om),
        "ssim_om" => t.ssim_om,
        "perceptual_om" => t.perceptual_om,
        "perceptual_drift" => t.perceptual_drift,
        _ => None,
    }
}

/// Per-turn means for one system across several sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSeries {
    pub system: String,
    /// metric → value per turn (1-based turns at index `t - 1`); `None`
    /// where no session reported the metric for that turn.
    pub series: BTreeMap<String, Vec<Option<f64>>>,
}

/// Averages each metric per turn over `reports` (all of one system).
pub fn mean_series(system: &str, reports: &[SessionReport]) -> SystemSeries {
    let n = reports.iter().map(|r| r.turns.len()).max().unwrap_or(0);
    let mut series = BTreeMap::new();
    for m in DRIFT_METRICS {
        let vals = (0..n)
            .map(|i| {
                let xs: Vec<f64> = reports
                    .iter()
                    .filter_map(|r| r.turns.get(i))
                    .filter_map(|t| metric(t, m))
                    .collect();
                (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
            })
            .collect();
        series.insert(m.to_string(), vals);
    }
    SystemSeries {
        system: system.to_string(),
        series,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    /// Least-squares slope against the turn number.
    pub slope: f64,
    pub max_abs_delta: f64,
}

impl DriftStats {
    /// `None` for fewer than two points.
    pub fn of(ys: &[f64]) -> Option<DriftStats> {
        if ys.len() < 2 {
            return None;
        }
        let n = ys.len() as f64;
        let mx = (n + 1.0) / 2.0;
        let my = ys.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, y) in ys.iter().enumerate() {
            let dx = (i + 1) as f64 - mx;
            sxy += dx * (y - my);
            sxx += dx * dx;
        }
        let max_abs_delta = ys.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        Some(DriftStats {
            slope: sxy / sxx,
            max_abs_delta,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemDrift {
    pub system: String,
    pub series: BTreeMap<String, Vec<Option<f64>>>,
    /// Only for metrics present on every turn.
    pub stats: BTreeMap<String, DriftStats>,
    /// PSNR_OM rises on every turn, the signature of an editor that drifts
    /// the background toward itself.
    pub psnr_increasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub schema_version: u32,
    pub systems: Vec<SystemDrift>,
}

pub fn drift_report(systems: &[SystemSeries]) -> DriftReport {
    let systems = systems
        .iter()
        .map(|s| {
            let mut stats = BTreeMap::new();
            for (m, vals) in &s.series {
                let full: Option<Vec<f64>> = vals.iter().copied().collect();
                if let Some(st) = full.as_deref().and_then(DriftStats::of) {
                    stats.insert(m.clone(), st);
                }
            }
            let psnr: Option<Vec<f64>> = s.series.get("psnr_om").and_then(|v| v.iter().copied().collect());
            let psnr_increasing = psnr.is_some_and(|p| p.len() >= 2 && p.windows(2).all(|w| w[1] > w[0]));
            SystemDrift {
                system: s.system.clone(),
                series: s.series.clone(),
                stats,
                psnr_increasing,
            }
        })
        .collect();
    DriftReport {
        schema_version: REPORT_SCHEMA_VERSION,
        systems,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl SessionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "session {} (seed {})", self.session, self.seed);
        let _ = writeln!(
            s,
            "{:>4}  {:>6}  {:>6}  {:>8}  {:>7}  {:>10}  {:>8}",
            "turn", "IF", "IC", "PSNR_OM", "SSIM_OM", "perceptual", "coverage"
        );
        let row = |s: &mut String, label: &str, i: f64, c: f64, p: f64, ss: Option<f64>, pe: Option<f64>, cov: f64| {
            let _ = writeln!(
                s,
                "{label:>4}  {i:>6.4}  {c:>6.4}  {p:>8.3}  {:>7}  {:>10}  {cov:>8.4}",
                cell(ss),
                cell(pe)
            );
        };
        for t in &self.turns {
            let label = if t.missing_output {
                format!("{}*", t.turn_index)
            } else {
                t.turn_index.to_string()
            };
            row(
                &mut s,
                &label,
                t.if_score,
                t.ic_score,
                t.psnr_om,
                t.ssim_om,
                t.perceptual_om,
                t.mask_coverage,
            );
        }
        let m = &self.summary;
        row(
            &mut s,
            "mean",
            m.if_score,
            m.ic_score,
            m.psnr_om,
            m.ssim_om,
            m.perceptual_om,
            m.mask_coverage,
        );
        if let Some(p) = &self.perceptual_provider {
            let _ = writeln!(s, "perceptual: {p}");
        }
        let _ = writeln!(s, "PSNR capped at 100 dB; * marks a turn without output");
        s
    }
}

impl DriftReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Long format: `system,metric,turn,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("system,metric,turn,value\n");
        for sys in &self.systems {
            for (m, vals) in &sys.series {
                for (i, v) in vals.iter().enumerate() {
                    let v = v.map(|x| x.to_string()).unwrap_or_default();
                    let _ = writeln!(s, "{},{m},{},{v}", sys.system, i + 1);
                }
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sys in &self.systems {
            let flag = if sys.psnr_increasing {
                "  [PSNR_OM increases every turn]"
            } else {
                ""
            };
            let _ = writeln!(s, "{}{flag}", sys.system);
            for (m, st) in &sys.stats {
                let _ = writeln!(
                    s,
                    "  {m:<14} slope {:>+10.6}  max delta {:>10.6}",
                    st.slope, st.max_abs_delta
                );
            }
        }
        s
    }
}
