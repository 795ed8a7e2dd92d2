use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::model::AttentionCapture;

/// Mean, population standard deviation and sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Moments {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), count: xs.len() }
    }
}

/// Readout attention aggregated by target type.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AttentionSummary {
    /// (target type, hop, neighbor type) -> type-readout weight.
    pub alpha: BTreeMap<(String, usize, String), Moments>,
    /// (target type, hop) -> hop-readout weight.
    pub gamma: BTreeMap<(String, usize), Moments>,
}

impl AttentionSummary {
    pub fn from_capture(g: &HeteroGraph, cap: &AttentionCapture) -> Self {
        let mut alpha: BTreeMap<(String, usize, String), Vec<f64>> = BTreeMap::new();
        for &(s, hop, t, w) in &cap.alpha {
            let key = (g.node_type_name(s).to_string(), hop, g.schema().type_name(t).to_string());
            alpha.entry(key).or_default().push(w);
        }
        let mut gamma: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
        for &(s, hop, w) in &cap.gamma {
            gamma.entry((g.node_type_name(s).to_string(), hop)).or_default().push(w);
        }
        Self {
            alpha: alpha.into_iter().map(|(k, v)| (k, Moments::of(&v))).collect(),
            gamma: gamma.into_iter().map(|(k, v)| (k, Moments::of(&v))).collect(),
        }
    }
}

fn writer(dir: &Path, name: &str, header: &[&str], files: &mut Vec<PathBuf>) -> Result<csv::Writer<std::fs::File>> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(header)?;
    files.push(path);
    Ok(w)
}

/// Write attention CSVs into `dir` and return their paths:
///
/// * `alpha_targets.csv`, `gamma_targets.csv`: raw weights per target
/// * `alpha.csv`, `gamma.csv`: moments by target type
/// * `alpha_series.csv`, `gamma_series.csv`: moments per epoch, when
///   `series` is nonempty
///
/// `capture` is `None` when the forward pass ran without capture.
pub fn export_attention(
    g: &HeteroGraph,
    capture: Option<&AttentionCapture>,
    series: &[(usize, AttentionSummary)],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let cap = capture.ok_or(Error::CaptureDisabled)?;
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();

    let mut w = writer(dir, "alpha_targets.csv", &["target", "hop", "neighbor_type", "alpha"], &mut files)?;
    for &(s, hop, t, a) in &cap.alpha {
        w.write_record([g.node_id(s), &hop.to_string(), g.schema().type_name(t), &a.to_string()])?;
    }
    w.flush()?;
    let mut w = writer(dir, "gamma_targets.csv", &["target", "hop", "gamma"], &mut files)?;
    for &(s, hop, x) in &cap.gamma {
        w.write_record([g.node_id(s), &hop.to_string(), &x.to_string()])?;
    }
    w.flush()?;

    let summary = AttentionSummary::from_capture(g, cap);
    let alpha_cols = ["target_type", "hop", "neighbor_type", "mean", "std", "count"];
    let gamma_cols = ["target_type", "hop", "mean", "std", "count"];
    let mut w = writer(dir, "alpha.csv", &alpha_cols, &mut files)?;
    for ((tt, hop, nt), m) in &summary.alpha {
        w.write_record([tt, &hop.to_string(), nt, &m.mean.to_string(), &m.std.to_string(), &m.count.to_string()])?;
    }
    w.flush()?;
    let mut w = writer(dir, "gamma.csv", &gamma_cols, &mut files)?;
    for ((tt, hop), m) in &summary.gamma {
        w.write_record([tt, &hop.to_string(), &m.mean.to_string(), &m.std.to_string(), &m.count.to_string()])?;
    }
    w.flush()?;

    if !series.is_empty() {
        let mut w = writer(dir, "alpha_series.csv", &[&["epoch"][..], &alpha_cols].concat(), &mut files)?;
        for (epoch, s) in series {
            for ((tt, hop, nt), m) in &s.alpha {
                w.write_record([
                    &epoch.to_string(),
                    tt,
                    &hop.to_string(),
                    nt,
                    &m.mean.to_string(),
                    &m.std.to_string(),
                    &m.count.to_string(),
                ])?;
            }
        }
        w.flush()?;
        let mut w = writer(dir, "gamma_series.csv", &[&["epoch"][..], &gamma_cols].concat(), &mut files)?;
        for (epoch, s) in series {
            for ((tt, hop), m) in &s.gamma {
                w.write_record([
                    &epoch.to_string(),
                    tt,
                    &hop.to_string(),
                    &m.mean.to_string(),
                    &m.std.to_string(),
                    &m.count.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{tests::schema, GraphBuilder};

    fn graph() -> HeteroGraph {
        let mut b = GraphBuilder::new(schema(&["a", "b", "c"], &[("ab", "a", "b"), ("ac", "a", "c")])).unwrap();
        for (id, t) in [("a0", "a"), ("a1", "a"), ("b0", "b"), ("c0", "c")] {
            b.add_node(id, t, Some(id)).unwrap();
        }
        b.add_edge("a0", "b0", "ab").unwrap();
        b.add_edge("a1", "c0", "ac").unwrap();
        b.build()
    }

    #[test]
    fn moments_and_disabled_capture() {
        let g = graph();
        let cap = AttentionCapture {
            alpha: vec![(0, 1, 1, 1.0), (1, 1, 2, 1.0), (0, 2, 0, 0.25), (1, 2, 0, 0.75)],
            gamma: vec![(0, 1, 0.4), (1, 1, 0.6)],
        };
        let s = AttentionSummary::from_capture(&g, &cap);
        let m = s.alpha[&("a".to_string(), 2, "a".to_string())];
        assert_eq!((m.mean, m.std, m.count), (0.5, 0.25, 2));
        assert_eq!(s.alpha[&("a".to_string(), 1, "b".to_string())].mean, 1.0);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(export_attention(&g, None, &[], dir.path()), Err(Error::CaptureDisabled)));
    }

    #[test]
    fn series_rows_follow_epochs() {
        let g = graph();
        let cap = AttentionCapture { alpha: vec![(0, 1, 1, 1.0)], gamma: vec![(0, 1, 1.0)] };
        let s = AttentionSummary::from_capture(&g, &cap);
        let series: Vec<_> = (0..20).map(|e| (e, s.clone())).collect();
        let dir = tempfile::tempdir().unwrap();
        let files = export_attention(&g, Some(&cap), &series, dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        let text = std::fs::read_to_string(dir.path().join("alpha_series.csv")).unwrap();
        let epochs: Vec<usize> =
            text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(epochs, (0..20).collect::<Vec<_>>());
    }
}
