//! Evaluation metrics, per-window records and error traces.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::round_half_away;
use crate::error::{Error, Result};

/// How AccDev compares a prediction with the ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccDevMode {
    /// Whole-meter rounded values differ by at most one.
    #[default]
    Rounded,
    /// Raw distances differ by at most one meter.
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowRecord {
    pub sequence: String,
    pub start: usize,
    pub gt: f64,
    pub prediction: f64,
}

impl WindowRecord {
    /// Signed error; positive when the prediction exceeds the true distance.
    pub fn error(&self) -> f64 {
        self.prediction - self.gt
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub acc: f64,
    pub acc_dev: f64,
    pub n_samples: usize,
    pub records: Vec<WindowRecord>,
}

/// Sums in sorted order so the result does not depend on record order.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v.iter().sum()
}

impl MetricsReport {
    pub fn from_records(records: Vec<WindowRecord>, mode: AccDevMode) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::domain("cannot evaluate an empty dataset"));
        }
        let n = records.len();
        let sq = ordered_sum(records.iter().map(|r| r.error() * r.error()).collect());
        let mut hits = 0usize;
        let mut near = 0usize;
        for r in &records {
            let (p, g) = (round_half_away(r.prediction), round_half_away(r.gt));
            hits += (p == g) as usize;
            near += match mode {
                AccDevMode::Rounded => (p - g).abs() <= 1.0,
                AccDevMode::Raw => (r.prediction - r.gt).abs() <= 1.0,
            } as usize;
        }
        Ok(MetricsReport { rmse: (sq / n as f64).sqrt(), acc: hits as f64 / n as f64, acc_dev: near as f64 / n as f64, n_samples: n, records })
    }

    /// Metrics for bare prediction/ground-truth pairs.
    pub fn from_pairs(predictions: &[f64], gts: &[f64], mode: AccDevMode) -> Result<Self> {
        if predictions.len() != gts.len() {
            return Err(Error::dim("evaluate", format!("{} predictions for {} windows", predictions.len(), gts.len())));
        }
        let records = predictions
            .iter()
            .zip(gts)
            .enumerate()
            .map(|(i, (&p, &g))| WindowRecord { sequence: String::new(), start: i, gt: g, prediction: p })
            .collect();
        Self::from_records(records, mode)
    }

    pub fn summary_csv(&self) -> String {
        format!("n_samples,rmse,acc,acc_dev\n{},{},{},{}\n", self.n_samples, self.rmse, self.acc, self.acc_dev)
    }

    pub fn windows_csv(&self) -> String {
        let mut s = String::from("sequence,start,gt_distance,prediction,error\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.sequence, r.start, r.gt, r.prediction, r.error());
        }
        s
    }

    /// Records grouped by sequence id, in first-appearance order.
    pub fn sequences(&self) -> Vec<(String, Vec<&WindowRecord>)> {
        let mut out: Vec<(String, Vec<&WindowRecord>)> = Vec::new();
        for r in &self.records {
            match out.iter_mut().find(|(s, _)| *s == r.sequence) {
                Some((_, v)) => v.push(r),
                None => out.push((r.sequence.clone(), vec![r])),
            }
        }
        out
    }
}

/// Parses the per-window CSV written by [`MetricsReport::windows_csv`].
pub fn parse_windows_csv(text: &str) -> Result<Vec<WindowRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("sequence")) {
            continue;
        }
        let bad = |msg: &str| Error::Parse { line: n + 1, msg: msg.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected sequence,start,gt_distance,prediction,error"));
        }
        out.push(WindowRecord {
            sequence: f[0].to_string(),
            start: f[1].parse().map_err(|_| bad("bad start frame"))?,
            gt: f[2].parse().map_err(|_| bad("bad gt_distance"))?,
            prediction: f[3].parse().map_err(|_| bad("bad prediction"))?,
        });
    }
    Ok(out)
}

/// `(start frame, signed error)` ordered by start frame, for windows of a
/// single sequence.
pub fn error_trace(records: &[WindowRecord]) -> Result<Vec<(usize, f64)>> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.sequence != first.sequence) {
            return Err(Error::contract(format!("trace mixes sequences {:?} and {:?}", first.sequence, other.sequence)));
        }
    }
    let mut trace: Vec<(usize, f64)> = records.iter().map(|r| (r.start, r.error())).collect();
    trace.sort_by_key(|&(f, _)| f);
    Ok(trace)
}

pub fn trace_csv(trace: &[(usize, f64)]) -> String {
    let mut s = String::from("frame,error\n");
    for (f, e) in trace {
        let _ = writeln!(s, "{f},{e}");
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line plot of one or more error traces over the frame index.
pub fn trace_svg(series: &[(String, Vec<(usize, f64)>)]) -> String {
    let (w, h, pad) = (800.0, 300.0, 40.0);
    let points = series.iter().flat_map(|(_, t)| t.iter());
    let max_frame = points.clone().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let max_err = points.map(|p| p.1.abs()).fold(0.0f64, f64::max).max(0.5);
    let x = |f: usize| pad + (w - 2.0 * pad) * f as f64 / max_frame;
    let y = |e: f64| h / 2.0 - (h / 2.0 - pad) * e / max_err;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r##"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="#888" stroke-dasharray="4 3"/>"##, h / 2.0, w - pad, h / 2.0);
    let _ = writeln!(s, r#"<text x="4" y="{}" font-size="11">+{max_err:.2} m</text>"#, pad);
    let _ = writeln!(s, r#"<text x="4" y="{}" font-size="11">-{max_err:.2} m</text>"#, h - pad + 10.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">frame</text>"#, w / 2.0, h - 8.0);
    for (i, (name, trace)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = trace.iter().map(|&(f, e)| format!("{:.2},{:.2}", x(f), y(e))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" fill="{color}">{name}</text>"#, w - pad - 120.0, pad + 14.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let r = MetricsReport::from_pairs(&[1.0, 2.0], &[1.0, 4.0], AccDevMode::Rounded).unwrap();
        assert_eq!(r.rmse, 2f64.sqrt());
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.acc_dev, 0.5);
    }

    #[test]
    fn rounding_boundary() {
        let r = MetricsReport::from_pairs(&[2.6], &[1.6], AccDevMode::Rounded).unwrap();
        assert_eq!((r.acc, r.acc_dev), (0.0, 1.0));
        let perfect = MetricsReport::from_pairs(&[0.3, 2.0], &[0.3, 2.0], AccDevMode::Raw).unwrap();
        assert_eq!((perfect.rmse, perfect.acc, perfect.acc_dev), (0.0, 1.0, 1.0));
        assert!(MetricsReport::from_pairs(&[], &[], AccDevMode::Raw).is_err());
    }

    #[test]
    fn order_invariant() {
        let p = [0.31, 1.7, 2.2, 0.05, 3.0, 1.49];
        let g = [0.3, 1.2, 2.9, 0.0, 2.4, 1.51];
        let a = MetricsReport::from_pairs(&p, &g, AccDevMode::Rounded).unwrap();
        let mut idx: Vec<usize> = (0..p.len()).rev().collect();
        idx.swap(1, 4);
        let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let gg: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        let b = MetricsReport::from_pairs(&pp, &gg, AccDevMode::Rounded).unwrap();
        assert_eq!((a.rmse, a.acc, a.acc_dev), (b.rmse, b.acc, b.acc_dev));
    }

    #[test]
    fn traces() {
        let recs: Vec<WindowRecord> = (0..5)
            .rev()
            .map(|i| WindowRecord { sequence: "04".into(), start: i, gt: i as f64, prediction: i as f64 + 0.3 })
            .collect();
        let t = error_trace(&recs).unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.iter().enumerate().all(|(i, &(f, e))| f == i && (e - 0.3).abs() < 1e-12));
        assert_eq!(trace_csv(&t).lines().count(), 6);
        let mut mixed = recs.clone();
        mixed[0].sequence = "05".into();
        assert!(error_trace(&mixed).is_err());
        let svg = trace_svg(&[("04".into(), t)]);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn windows_csv_roundtrip() {
        let r = MetricsReport::from_pairs(&[0.5, 1.25], &[0.4, 1.0], AccDevMode::Rounded).unwrap();
        let back = parse_windows_csv(&r.windows_csv()).unwrap();
        assert_eq!(back, r.records);
    }
}
