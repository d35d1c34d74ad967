//! Report rendering: rank tables, gap tables and comparison grids as CSV,
//! JSON and aligned text.
//!
//! Display values are rounded (means and gaps to 2 d.p., p-values to 3 d.p.,
//! dominance ratios to 2 d.p.); machine formats carry full precision next to
//! them. Ranks always come from the unrounded means.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::robustness::{GapRow, SeedStabilityReport};
use crate::significance::{ComparisonMatrix, MatrixKind};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to render: {0}")]
    Empty(&'static str),
    #[error("inconsistent model sets: {0}")]
    InconsistentModels(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Display multiplier per metric; metrics not listed display unscaled.
#[derive(Debug, Clone, Default)]
pub struct DisplayScales(HashMap<String, f64>);

impl DisplayScales {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, metric: impl Into<String>, scale: f64) -> Self {
        self.0.insert(metric.into(), scale);
        self
    }

    pub fn get(&self, metric: &str) -> f64 {
        self.0.get(metric).copied().unwrap_or(1.0)
    }
}

fn csv_string(rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Left-aligns the first column, right-aligns the rest.
fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0; cols];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let pad = widths[i] - cell.chars().count();
            if i == 0 {
                line.push_str(cell);
                line.push_str(&" ".repeat(pad));
            } else {
                line.push_str(&" ".repeat(pad));
                line.push_str(cell);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCell {
    pub metric: String,
    pub seed: i64,
    /// Full-precision mean as stored.
    pub mean: f64,
    pub rank: usize,
    pub tied: bool,
    /// `<scaled mean to 2 d.p.>(<rank>)`
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub model: String,
    pub cells: Vec<RankCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankGroup {
    pub metric: String,
    pub display_scale: f64,
    pub seeds: Vec<i64>,
    pub consistent: bool,
}

/// Models as rows; metrics as column groups with one sub-column per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTableDocument {
    pub models: Vec<String>,
    pub groups: Vec<RankGroup>,
    pub rows: Vec<RankRow>,
}

pub fn render_rank_table(
    reports: &[SeedStabilityReport],
    scales: &DisplayScales,
) -> Result<RankTableDocument, ReportError> {
    let first = reports.first().ok_or(ReportError::Empty("no seed stability reports"))?;
    for r in reports {
        if r.models != first.models {
            return Err(ReportError::InconsistentModels(format!(
                "{} has {:?}, {} has {:?}",
                first.metric, first.models, r.metric, r.models
            )));
        }
    }
    let groups = reports
        .iter()
        .map(|r| RankGroup {
            metric: r.metric.clone(),
            display_scale: scales.get(&r.metric),
            seeds: r.per_seed.iter().map(|c| c.seed).collect(),
            consistent: r.consistent,
        })
        .collect();
    let rows = first
        .models
        .iter()
        .enumerate()
        .map(|(i, model)| {
            let mut cells = Vec::new();
            for r in reports {
                let scale = scales.get(&r.metric);
                for col in &r.per_seed {
                    let mean = col.means[i];
                    let rank = col.ranks[i];
                    let tied = col.ranking.iter().any(|x| &x.model == model && x.tied);
                    cells.push(RankCell {
                        metric: r.metric.clone(),
                        seed: col.seed,
                        mean,
                        rank,
                        tied,
                        display: format!("{:.2}({rank})", mean * scale),
                    });
                }
            }
            RankRow {
                model: model.clone(),
                cells,
            }
        })
        .collect();
    Ok(RankTableDocument {
        models: first.models.clone(),
        groups,
        rows,
    })
}

impl RankTableDocument {
    /// Long format, one line per (metric, seed, model).
    pub fn to_csv(&self) -> String {
        let header = ["metric", "seed", "model", "mean", "rank", "tied", "display"]
            .map(String::from)
            .to_vec();
        let mut lines = vec![header];
        for g in &self.groups {
            for &seed in &g.seeds {
                for row in &self.rows {
                    if let Some(c) = row.cells.iter().find(|c| c.metric == g.metric && c.seed == seed) {
                        lines.push(vec![
                            c.metric.clone(),
                            c.seed.to_string(),
                            row.model.clone(),
                            c.mean.to_string(),
                            c.rank.to_string(),
                            c.tied.to_string(),
                            c.display.clone(),
                        ]);
                    }
                }
            }
        }
        csv_string(lines)
    }

    pub fn to_json(&self) -> String {
        json_string(self)
    }

    /// Wide layout mirroring the familiar paper-style table.
    pub fn to_text(&self) -> String {
        let mut metric_row = vec!["Model".to_string()];
        let mut seed_row = vec![String::new()];
        for g in &self.groups {
            for (k, seed) in g.seeds.iter().enumerate() {
                metric_row.push(if k == 0 { g.metric.clone() } else { String::new() });
                seed_row.push(seed.to_string());
            }
        }
        let mut rows = vec![metric_row, seed_row];
        for r in &self.rows {
            let mut line = vec![r.model.clone()];
            line.extend(r.cells.iter().map(|c| c.display.clone()));
            rows.push(line);
        }
        aligned(&rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTableRow {
    pub metric: String,
    /// Full-precision pooled average, unscaled.
    pub average_gap: f64,
    /// Full-precision pooled maximum, unscaled.
    pub max_gap: f64,
    pub display_scale: f64,
    pub average_display: String,
    pub max_display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTableDocument {
    pub rows: Vec<GapTableRow>,
}

pub fn render_gap_table(rows: &[GapRow], scales: &DisplayScales) -> Result<GapTableDocument, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty("no gap rows"));
    }
    Ok(GapTableDocument {
        rows: rows
            .iter()
            .map(|r| {
                let scale = scales.get(&r.metric);
                GapTableRow {
                    metric: r.metric.clone(),
                    average_gap: r.average_gap,
                    max_gap: r.max_gap,
                    display_scale: scale,
                    average_display: format!("{:.2}", r.average_gap * scale),
                    max_display: format!("{:.2}", r.max_gap * scale),
                }
            })
            .collect(),
    })
}

impl GapTableDocument {
    pub fn to_csv(&self) -> String {
        let header = ["metric", "Avg. ΔJ", "Max. ΔJ", "avg_gap", "max_gap"].map(String::from).to_vec();
        let mut lines = vec![header];
        for r in &self.rows {
            lines.push(vec![
                r.metric.clone(),
                r.average_display.clone(),
                r.max_display.clone(),
                r.average_gap.to_string(),
                r.max_gap.to_string(),
            ]);
        }
        csv_string(lines)
    }

    pub fn to_json(&self) -> String {
        json_string(self)
    }

    pub fn to_text(&self) -> String {
        let mut rows = vec![vec!["Metric".to_string(), "Avg. ΔJ".into(), "Max. ΔJ".into()]];
        for r in &self.rows {
            rows.push(vec![r.metric.clone(), r.average_display.clone(), r.max_display.clone()]);
        }
        aligned(&rows)
    }
}

/// One K×K grid ready for a heatmap plotter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDocument {
    pub metric: String,
    pub seed: i64,
    pub kind: MatrixKind,
    pub models: Vec<String>,
    /// Full precision, row i against column j.
    pub values: Vec<Vec<f64>>,
    pub display: Vec<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub direction: Option<Vec<Vec<i8>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ties: Option<Vec<Vec<f64>>>,
}

fn grid(m: &ComparisonMatrix, decimals: usize) -> GridDocument {
    GridDocument {
        metric: m.metric.clone(),
        seed: m.seed,
        kind: m.kind,
        models: m.models.clone(),
        values: m.cells.clone(),
        display: m
            .cells
            .iter()
            .map(|row| row.iter().map(|v| format!("{v:.decimals$}")).collect())
            .collect(),
        direction: m.direction.clone(),
        ties: m.ties.clone(),
    }
}

/// p-value grid at 3 d.p. and dominance grid at 2 d.p.
pub fn render_matrices(
    p_matrix: &ComparisonMatrix,
    dominance: &ComparisonMatrix,
) -> Result<(GridDocument, GridDocument), ReportError> {
    if p_matrix.kind != MatrixKind::PValue || dominance.kind != MatrixKind::Dominance {
        return Err(ReportError::Shape("expected a p-value and a dominance matrix".into()));
    }
    if p_matrix.models != dominance.models {
        return Err(ReportError::Shape("matrices list different models".into()));
    }
    let k = p_matrix.models.len();
    for m in [p_matrix, dominance] {
        if m.cells.len() != k || m.cells.iter().any(|r| r.len() != k) {
            return Err(ReportError::Shape(format!("{:?} grid is not {k}x{k}", m.kind)));
        }
    }
    Ok((grid(p_matrix, 3), grid(dominance, 2)))
}

/// All grids of one kind as a single CSV: `metric,seed,model,<column models>`.
pub fn grids_to_csv(grids: &[GridDocument]) -> String {
    let columns: Vec<String> = grids.first().map(|g| g.models.clone()).unwrap_or_default();
    let mut header = vec!["metric".to_string(), "seed".into(), "model".into()];
    header.extend(columns);
    let mut lines = vec![header];
    for g in grids {
        for (i, model) in g.models.iter().enumerate() {
            let mut line = vec![g.metric.clone(), g.seed.to_string(), model.clone()];
            line.extend(g.display[i].iter().cloned());
            lines.push(line);
        }
    }
    csv_string(lines)
}

pub fn grids_to_json(grids: &[GridDocument]) -> String {
    json_string(&grids)
}

/// Writes `<dir>/<stem>.<ext>` for each rendered format, atomically.
pub fn write_outputs(dir: &Path, stem: &str, outputs: &[(&str, String)]) -> Result<Vec<PathBuf>, ReportError> {
    let mut written = Vec::new();
    for (ext, content) in outputs {
        let path = dir.join(format!("{stem}.{ext}"));
        write_atomic(&path, content.as_bytes()).map_err(|source| ReportError::Write {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

/// Groups per-seed reports by metric preserving first-seen order.
pub fn by_metric<T, F: Fn(&T) -> &str>(items: Vec<T>, key: F) -> Vec<(String, Vec<T>)> {
    let mut order = Vec::new();
    let mut map: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for item in items {
        let k = key(&item).to_string();
        if !map.contains_key(&k) {
            order.push(k.clone());
        }
        map.entry(k).or_default().push(item);
    }
    order
        .into_iter()
        .map(|k| {
            let v = map.remove(&k).unwrap_or_default();
            (k, v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScoreRecord, ScoreSet, Variant};
    use crate::robustness::{seed_stability, AuditScope};
    use crate::significance::pairwise_matrices;

    fn stability(metric: &str, means: &[(&str, i64, f64)], models: &[&str], seeds: &[i64]) -> SeedStabilityReport {
        let records: Vec<ScoreRecord> = means
            .iter()
            .map(|&(model, seed, score)| ScoreRecord {
                metric: metric.into(),
                model: model.into(),
                seed,
                prompt_id: "p".into(),
                variant: Variant::Original,
                score,
            })
            .collect();
        let set = ScoreSet::from_records(&records).unwrap();
        let scope = AuditScope {
            prompt_ids: vec!["p".into()],
            models: models.iter().map(|s| s.to_string()).collect(),
            seeds: seeds.to_vec(),
        };
        seed_stability(metric, &set, &scope).unwrap()
    }

    #[test]
    fn rank_cells_render_mean_and_rank() {
        let r = stability(
            "VQAScore",
            &[("SD-3", 42, 91.18), ("SD-XL", 42, 86.63), ("SD-3", 1, 90.0), ("SD-XL", 1, 91.0)],
            &["SD-3", "SD-XL"],
            &[42, 1],
        );
        let doc = render_rank_table(&[r], &DisplayScales::new()).unwrap();
        assert_eq!(doc.rows[0].cells[0].display, "91.18(1)");
        assert_eq!(doc.rows[0].cells[1].display, "90.00(2)");
        let text = doc.to_text();
        assert!(text.starts_with("Model"), "{text}");
        assert!(text.contains("91.18(1)"));
        let csv = doc.to_csv();
        assert!(csv.starts_with("metric,seed,model,mean,rank,tied,display\n"), "{csv}");
        assert!(csv.contains("VQAScore,42,SD-3,91.18,1,false,91.18(1)"), "{csv}");
    }

    #[test]
    fn display_scale_applies_only_to_display() {
        let r = stability("m", &[("A", 1, 0.9118), ("B", 1, 0.5), ("A", 2, 0.9), ("B", 2, 0.4)], &["A", "B"], &[1, 2]);
        let doc = render_rank_table(&[r], &DisplayScales::new().with("m", 100.0)).unwrap();
        assert_eq!(doc.rows[0].cells[0].display, "91.18(1)");
        assert_eq!(doc.rows[0].cells[0].mean, 0.9118);
    }

    #[test]
    fn inconsistent_models_rejected() {
        let a = stability("a", &[("A", 1, 1.0), ("B", 1, 0.0), ("A", 2, 1.0), ("B", 2, 0.0)], &["A", "B"], &[1, 2]);
        let b = stability("b", &[("A", 1, 1.0), ("C", 1, 0.0), ("A", 2, 1.0), ("C", 2, 0.0)], &["A", "C"], &[1, 2]);
        assert!(matches!(
            render_rank_table(&[a, b], &DisplayScales::new()),
            Err(ReportError::InconsistentModels(_))
        ));
        assert!(matches!(render_rank_table(&[], &DisplayScales::new()), Err(ReportError::Empty(_))));
    }

    #[test]
    fn gap_table_rows() {
        let rows = [
            GapRow {
                metric: "CLIPScore".into(),
                average_gap: 0.74,
                max_gap: 7.30,
            },
            GapRow {
                metric: "m".into(),
                average_gap: 0.0,
                max_gap: 0.0,
            },
        ];
        let doc = render_gap_table(&rows, &DisplayScales::new()).unwrap();
        let text = doc.to_text();
        assert!(text.lines().nth(1).unwrap().ends_with("0.74     7.30"), "{text}");
        let csv = doc.to_csv();
        assert!(csv.contains("CLIPScore,0.74,7.30,0.74,7.3\n"), "{csv}");
        assert!(csv.contains("m,0.00,0.00,0,0\n"), "{csv}");
        assert!(matches!(render_gap_table(&[], &DisplayScales::new()), Err(ReportError::Empty(_))));
    }

    #[test]
    fn grids_carry_labels_and_precision() {
        let records: Vec<ScoreRecord> = [("A", [3.0, 1.0, 2.0]), ("B", [1.0, 2.0, 2.0])]
            .iter()
            .flat_map(|(m, s)| {
                s.iter().enumerate().map(move |(i, &score)| ScoreRecord {
                    metric: "m".into(),
                    model: m.to_string(),
                    seed: 7,
                    prompt_id: format!("p{i}"),
                    variant: Variant::Original,
                    score,
                })
            })
            .collect();
        let set = ScoreSet::from_records(&records).unwrap();
        let scope = AuditScope {
            prompt_ids: vec!["p0".into(), "p1".into(), "p2".into()],
            models: vec!["A".into(), "B".into()],
            seeds: vec![7],
        };
        let (p, d) = pairwise_matrices("m", 7, &set, &scope).unwrap();
        let (pg, dg) = render_matrices(&p, &d).unwrap();
        assert_eq!(pg.display[0][0], "1.000");
        assert_eq!(dg.display[0][0], "0.00");
        assert_eq!(dg.display[0][1], "0.33");
        let csv = grids_to_csv(std::slice::from_ref(&dg));
        assert_eq!(csv, "metric,seed,model,A,B\nm,7,A,0.00,0.33\nm,7,B,0.33,0.00\n");
        let back: Vec<GridDocument> = serde_json::from_str(&grids_to_json(&[pg.clone(), dg])).unwrap();
        assert_eq!(back[0], pg);
        assert!(render_matrices(&d, &p).is_err());
    }
}
