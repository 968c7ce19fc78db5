//! Per-slot query outcome counters and the windowed ratios derived from them.
//!
//! Every query is counted in the slot of its emission time, whenever its
//! outcome becomes known.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::policies::PolicyKind;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub success: u64,
    pub failed: u64,
    pub rejected: u64,
    pub app_success: Vec<u64>,
    pub app_failed: Vec<u64>,
    pub app_rejected: Vec<u64>,
}

impl SlotCounts {
    pub fn new(apps: usize) -> Self {
        SlotCounts {
            app_success: vec![0; apps],
            app_failed: vec![0; apps],
            app_rejected: vec![0; apps],
            ..Default::default()
        }
    }

    pub fn total(&self) -> u64 {
        self.success + self.failed + self.rejected
    }

    pub fn app_total(&self, app: usize) -> u64 {
        self.app_success[app] + self.app_failed[app] + self.app_rejected[app]
    }
}

/// Outcome ratios over the queries emitted in `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsWindow {
    pub start: f64,
    pub end: f64,
    pub success: u64,
    pub failed: u64,
    pub rejected: u64,
    pub q_success: f64,
    pub q_fail: f64,
    pub q_reject: f64,
    /// Success ratio per application; 1.0 for apps without queries.
    pub app_success: Vec<f64>,
}

impl MetricsWindow {
    pub fn total(&self) -> u64 {
        self.success + self.failed + self.rejected
    }
}

fn ratio(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        part as f64 / total as f64
    }
}

/// Sums `slots[first..last)` into a window. An empty window reports full success.
pub fn windowed_metrics(slots: &[SlotCounts], first: usize, last: usize, period: f64) -> MetricsWindow {
    let last = last.min(slots.len());
    let first = first.min(last);
    let apps = slots.first().map_or(0, |s| s.app_success.len());
    let mut sum = SlotCounts::new(apps);
    for s in &slots[first..last] {
        sum.success += s.success;
        sum.failed += s.failed;
        sum.rejected += s.rejected;
        for a in 0..apps {
            sum.app_success[a] += s.app_success[a];
            sum.app_failed[a] += s.app_failed[a];
            sum.app_rejected[a] += s.app_rejected[a];
        }
    }
    let total = sum.total();
    let q_fail = ratio(sum.failed, total);
    let q_reject = ratio(sum.rejected, total);
    MetricsWindow {
        start: first as f64 * period,
        end: last as f64 * period,
        success: sum.success,
        failed: sum.failed,
        rejected: sum.rejected,
        q_success: 1.0 - q_fail - q_reject,
        q_fail,
        q_reject,
        app_success: (0..apps)
            .map(|a| {
                let t = sum.app_total(a);
                if t == 0 {
                    1.0
                } else {
                    ratio(sum.app_success[a], t)
                }
            })
            .collect(),
    }
}

/// One CSV row: the slot ending at `time_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub time_s: f64,
    pub policy: PolicyKind,
    pub q_success: f64,
    pub q_fail: f64,
    pub q_reject: f64,
    pub offered_qps: f64,
    pub app_success: Vec<f64>,
}

pub fn metrics_rows(slots: &[SlotCounts], policies: &[PolicyKind], period: f64) -> Vec<MetricsRow> {
    slots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let w = windowed_metrics(slots, i, i + 1, period);
            MetricsRow {
                time_s: (i + 1) as f64 * period,
                policy: policies[i],
                q_success: w.q_success,
                q_fail: w.q_fail,
                q_reject: w.q_reject,
                offered_qps: s.total() as f64 / period,
                app_success: w.app_success,
            }
        })
        .collect()
}

/// Column name for an application: lowercase, non-alphanumerics as `_`.
pub fn app_column(name: &str) -> String {
    let slug: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    format!("success_{slug}")
}

/// Writes the metrics table preceded by a `#` provenance line.
pub fn write_metrics_csv<W: Write>(
    out: &mut W,
    provenance: &str,
    app_names: &[String],
    rows: &[MetricsRow],
) -> std::io::Result<()> {
    writeln!(out, "# {provenance}")?;
    write!(out, "time_s,policy,q_success,q_fail,q_reject,offered_qps")?;
    for name in app_names {
        write!(out, ",{}", app_column(name))?;
    }
    writeln!(out)?;
    for r in rows {
        write!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.3}",
            r.time_s, r.policy, r.q_success, r.q_fail, r.q_reject, r.offered_qps
        )?;
        for a in &r.app_success {
            write!(out, ",{a:.6}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot(success: u64, failed: u64, rejected: u64) -> SlotCounts {
        SlotCounts {
            success,
            failed,
            rejected,
            app_success: vec![success],
            app_failed: vec![failed],
            app_rejected: vec![rejected],
        }
    }

    #[test]
    fn counting_example() {
        let w = windowed_metrics(&[slot(4, 1, 0), slot(3, 1, 1)], 0, 2, 1.0);
        assert!((w.q_fail - 0.2).abs() < 1e-12);
        assert!((w.q_reject - 0.1).abs() < 1e-12);
        assert!((w.q_success - 0.7).abs() < 1e-12);
        assert!((w.q_success + w.q_fail + w.q_reject - 1.0).abs() < 1e-15);
        assert!((w.app_success[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_window_is_full_success() {
        let w = windowed_metrics(&[slot(0, 0, 0)], 0, 1, 1.0);
        assert_eq!((w.q_fail, w.q_reject, w.q_success), (0.0, 0.0, 1.0));
        assert_eq!(w.app_success, vec![1.0]);
        let w = windowed_metrics(&[], 0, 5, 1.0);
        assert_eq!(w.q_success, 1.0);
    }

    #[test]
    fn all_rejected() {
        let w = windowed_metrics(&[slot(0, 0, 9)], 0, 1, 1.0);
        assert_eq!(w.q_reject, 1.0);
        assert_eq!(w.q_success, 0.0);
    }

    #[test]
    fn window_bounds_clamped() {
        let slots = vec![slot(1, 0, 0), slot(0, 1, 0), slot(0, 0, 1)];
        let w = windowed_metrics(&slots, 1, 10, 1.0);
        assert_eq!((w.success, w.failed, w.rejected), (0, 1, 1));
        assert_eq!((w.start, w.end), (1.0, 3.0));
    }

    #[test]
    fn csv_layout() {
        let slots = vec![slot(3, 1, 0)];
        let rows = metrics_rows(&slots, &[PolicyKind::Closest], 1.0);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, "seed=1", &["Ping-pong".into()], &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# seed=1");
        assert_eq!(
            lines[1],
            "time_s,policy,q_success,q_fail,q_reject,offered_qps,success_ping_pong"
        );
        assert_eq!(lines[2], "1,closest,0.750000,0.250000,0.000000,4.000,0.750000");
    }
}
