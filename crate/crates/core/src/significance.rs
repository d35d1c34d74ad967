//! Pairwise significance: paired t-test p-values and dominance ratios for
//! every model pair of one metric and seed, plus per-pair verdicts.

use serde::{Deserialize, Serialize};

use crate::model::{mean, ScoreSet, Variant};
use crate::robustness::{AuditError, AuditScope};
use crate::stats::{dominance_ratio, paired_t, PairedSample};

/// Conventional significance level; p must be strictly below it.
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    PValue,
    Dominance,
}

/// K×K comparison grid. Row i against column j.
///
/// p-value grids are symmetric with a unit diagonal; `direction[i][j]` is the
/// sign of mean(S_i − S_j). Dominance grids hold R(i, j) with a zero diagonal
/// and `ties[i][j]` the tie mass, so R(i, j) + R(j, i) + ties[i][j] = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMatrix {
    pub metric: String,
    pub seed: i64,
    pub kind: MatrixKind,
    pub models: Vec<String>,
    /// Model means in `models` order.
    pub means: Vec<f64>,
    pub cells: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub direction: Option<Vec<Vec<i8>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ties: Option<Vec<Vec<f64>>>,
    /// Whether the t-test fell back to the zero-variance convention.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub degenerate: Option<Vec<Vec<bool>>>,
}

impl ComparisonMatrix {
    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn cell(&self, row: &str, col: &str) -> Option<f64> {
        let i = self.models.iter().position(|m| m == row)?;
        let j = self.models.iter().position(|m| m == col)?;
        Some(self.cells[i][j])
    }

    fn check_shape(&self) -> Result<(), AuditError> {
        let k = self.k();
        let square = |g: &[Vec<f64>]| g.len() == k && g.iter().all(|r| r.len() == k);
        if self.means.len() != k || !square(&self.cells) {
            return Err(AuditError::Shape(format!("{:?} matrix is not {k}x{k}", self.kind)));
        }
        if let Some(t) = &self.ties {
            if !square(t) {
                return Err(AuditError::Shape("tie grid is not square".into()));
            }
        }
        if let Some(d) = &self.direction {
            if d.len() != k || d.iter().any(|r| r.len() != k) {
                return Err(AuditError::Shape("direction grid is not square".into()));
            }
        }
        Ok(())
    }
}

/// Builds the p-value and dominance grids for one metric and seed.
pub fn pairwise_matrices(
    metric: &str,
    seed: i64,
    scores: &ScoreSet,
    scope: &AuditScope,
) -> Result<(ComparisonMatrix, ComparisonMatrix), AuditError> {
    let k = scope.models.len();
    if k < 2 {
        return Err(AuditError::TooFew {
            what: "models",
            required: 2,
            got: k,
        });
    }
    let vectors = scope
        .models
        .iter()
        .map(|m| scores.vector(metric, m, seed, Variant::Original, &scope.prompt_ids))
        .collect::<Result<Vec<_>, _>>()?;
    let means = vectors.iter().map(|v| mean(&v.scores)).collect::<Result<Vec<_>, _>>()?;

    let mut p = vec![vec![1.0; k]; k];
    let mut direction = vec![vec![0i8; k]; k];
    let mut degenerate = vec![vec![true; k]; k];
    let mut dom = vec![vec![0.0; k]; k];
    let mut ties = vec![vec![1.0; k]; k];

    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = dominance_ratio(&vectors[i].scores, &vectors[j].scores)?;
            dom[i][j] = d.ratio();
            ties[i][j] = d.tie_mass();
            if j > i {
                let sample = PairedSample::from_scores(&vectors[i].scores, &vectors[j].scores)?;
                let t = paired_t(&sample)?;
                p[i][j] = t.p_value;
                p[j][i] = t.p_value;
                degenerate[i][j] = t.degenerate;
                degenerate[j][i] = t.degenerate;
                let sign = if t.mean_difference > 0.0 {
                    1
                } else if t.mean_difference < 0.0 {
                    -1
                } else {
                    0
                };
                direction[i][j] = sign;
                direction[j][i] = -sign;
            }
        }
    }

    let base = ComparisonMatrix {
        metric: metric.to_string(),
        seed,
        kind: MatrixKind::PValue,
        models: scope.models.clone(),
        means,
        cells: p,
        direction: Some(direction),
        ties: None,
        degenerate: Some(degenerate),
    };
    let dominance = ComparisonMatrix {
        kind: MatrixKind::Dominance,
        cells: dom,
        direction: None,
        ties: Some(ties),
        degenerate: None,
        ..base.clone()
    };
    Ok((base, dominance))
}

/// Outcome for one unordered model pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceVerdict {
    pub metric: String,
    pub seed: i64,
    pub models: (String, String),
    pub p_value: f64,
    /// p strictly below alpha.
    pub significant: bool,
    pub dominance_forward: f64,
    pub dominance_backward: f64,
    pub tie_mass: f64,
    /// Mean of the first model minus mean of the second.
    pub mean_gap: f64,
}

impl SignificanceVerdict {
    /// The model with the higher mean, if any.
    pub fn leader(&self) -> Option<&str> {
        if self.mean_gap > 0.0 {
            Some(&self.models.0)
        } else if self.mean_gap < 0.0 {
            Some(&self.models.1)
        } else {
            None
        }
    }

    /// Dominance ratio of the higher-mean model.
    pub fn leader_dominance(&self) -> Option<f64> {
        if self.mean_gap > 0.0 {
            Some(self.dominance_forward)
        } else if self.mean_gap < 0.0 {
            Some(self.dominance_backward)
        } else {
            None
        }
    }
}

/// One verdict per unordered pair (i < j in model order).
pub fn verdicts(
    p_matrix: &ComparisonMatrix,
    dominance: &ComparisonMatrix,
    alpha: f64,
) -> Result<Vec<SignificanceVerdict>, AuditError> {
    if p_matrix.kind != MatrixKind::PValue || dominance.kind != MatrixKind::Dominance {
        return Err(AuditError::Shape("expected a p-value and a dominance matrix".into()));
    }
    p_matrix.check_shape()?;
    dominance.check_shape()?;
    if p_matrix.models != dominance.models || p_matrix.metric != dominance.metric || p_matrix.seed != dominance.seed {
        return Err(AuditError::Shape("matrices describe different metric, seed or models".into()));
    }
    let k = p_matrix.k();
    let mut out = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            let p = p_matrix.cells[i][j];
            let tie_mass = match &dominance.ties {
                Some(t) => t[i][j],
                None => 1.0 - dominance.cells[i][j] - dominance.cells[j][i],
            };
            out.push(SignificanceVerdict {
                metric: p_matrix.metric.clone(),
                seed: p_matrix.seed,
                models: (p_matrix.models[i].clone(), p_matrix.models[j].clone()),
                p_value: p,
                significant: p < alpha,
                dominance_forward: dominance.cells[i][j],
                dominance_backward: dominance.cells[j][i],
                tie_mass,
                mean_gap: p_matrix.means[i] - p_matrix.means[j],
            });
        }
    }
    Ok(out)
}
