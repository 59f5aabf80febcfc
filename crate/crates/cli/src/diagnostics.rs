//! Window/center distributions per layer and head, n-gram tables, and trace export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use localness::AttentionTrace;
use serde::Serialize;

pub const WINDOWS_HEADER: &str = "layer,head,seq,pos,center,window";
pub const SUMMARY_HEADER: &str = "layer,count,mean,min,q1,median,q3,max";
pub const NGRAM_HEADER: &str = "n,rate";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowRow {
    pub layer: usize,
    pub head: usize,
    pub seq: usize,
    pub pos: usize,
    pub center: f64,
    pub window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticsRecord {
    pub rows: Vec<WindowRow>,
    pub summaries: Vec<LayerSummary>,
}

/// Quantile by linear interpolation between order statistics; `sorted` must be non-empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

impl DiagnosticsRecord {
    pub fn from_traces(traces: &[AttentionTrace]) -> Self {
        let mut rows = Vec::new();
        let mut by_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for t in traces {
            for (pos, (&center, &window)) in t.center.iter().zip(&t.window).enumerate() {
                rows.push(WindowRow {
                    layer: t.layer,
                    head: t.head,
                    seq: t.seq,
                    pos,
                    center,
                    window,
                });
                by_layer.entry(t.layer).or_default().push(window);
            }
        }
        rows.sort_by_key(|r| (r.layer, r.head, r.seq, r.pos));
        let summaries = by_layer
            .into_iter()
            .map(|(layer, mut w)| {
                w.sort_by(f64::total_cmp);
                LayerSummary {
                    layer,
                    count: w.len(),
                    mean: w.iter().sum::<f64>() / w.len() as f64,
                    min: w[0],
                    q1: quantile(&w, 0.25),
                    median: quantile(&w, 0.5),
                    q3: quantile(&w, 0.75),
                    max: w[w.len() - 1],
                }
            })
            .collect();
        Self { rows, summaries }
    }

    pub fn mean_window(&self, layer: usize) -> Option<f64> {
        self.summaries.iter().find(|s| s.layer == layer).map(|s| s.mean)
    }

    pub fn windows_csv(&self) -> String {
        let mut out = String::from(WINDOWS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.layer, r.head, r.seq, r.pos, r.center, r.window);
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(SUMMARY_HEADER);
        out.push('\n');
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.layer, s.count, s.mean, s.min, s.q1, s.median, s.q3, s.max
            );
        }
        out
    }
}

pub fn ngram_csv(ngram: &[(usize, f64)]) -> String {
    let mut out = String::from(NGRAM_HEADER);
    out.push('\n');
    for (n, rate) in ngram {
        let _ = writeln!(out, "{n},{rate}");
    }
    out
}

pub fn traces_json(traces: &[AttentionTrace]) -> String {
    let mut s = serde_json::to_string(traces).expect("trace values are finite");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(layer: usize, head: usize, window: Vec<f64>) -> AttentionTrace {
        let n = window.len();
        AttentionTrace {
            layer,
            head,
            seq: 0,
            center: vec![1.0; n],
            window,
            weights: vec![vec![1.0 / n as f64; n]; n],
        }
    }

    #[test]
    fn quartiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn summary_groups_by_layer() {
        let rec = DiagnosticsRecord::from_traces(&[
            trace(1, 0, vec![1.0, 3.0]),
            trace(1, 1, vec![2.0, 2.0]),
            trace(2, 0, vec![6.0, 8.0]),
        ]);
        assert_eq!(rec.rows.len(), 6);
        assert_eq!(rec.mean_window(1), Some(2.0));
        assert_eq!(rec.mean_window(2), Some(7.0));
        let csv = rec.windows_csv();
        assert!(csv.starts_with("layer,head,seq,pos,center,window\n1,0,0,0,1,1\n"));
        assert_eq!(rec.summary_csv().lines().count(), 3);
    }

    #[test]
    fn ngram_table() {
        assert_eq!(ngram_csv(&[(1, 0.5), (2, 0.25)]), "n,rate\n1,0.5\n2,0.25\n");
    }
}
