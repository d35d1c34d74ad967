//! Robustness audits: ranking stability across generation seeds, and score
//! gaps between original and +1-perturbed images.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{mean, mean_score, rank_models, RankedModel, ScoreError, ScoreSet, ScoreVector, Variant};
use crate::stats::{kendall_tau_tied, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuditError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("need at least {required} {what}, got {got}")]
    TooFew {
        what: &'static str,
        required: usize,
        got: usize,
    },
    #[error("score vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("score vectors do not describe the same cell: {0}")]
    KeyMismatch(String),
    #[error("no gap reports to summarise")]
    NothingToSummarise,
    #[error("{0}")]
    Shape(String),
}

/// Which slice of the score table an audit covers. Order is significant:
/// prompt order pairs scores, model and seed order drive report layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditScope {
    pub prompt_ids: Vec<String>,
    pub models: Vec<String>,
    pub seeds: Vec<i64>,
}

/// One seed's means and ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedColumn {
    pub seed: i64,
    /// Means in scope model order.
    pub means: Vec<f64>,
    /// Competition rank per model, in scope model order.
    pub ranks: Vec<usize>,
    /// Ranking in rank order.
    pub ranking: Vec<RankedModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedPairTau {
    pub seed_a: i64,
    pub seed_b: i64,
    pub tau: f64,
}

/// A model pair whose relative order is not the same under every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankFlip {
    pub models: (String, String),
    /// Every seed pair (in scope order) on which the pair's order differs.
    pub seed_pairs: Vec<(i64, i64)>,
    /// Consecutive seeds (in scope order) across which the order changes.
    pub transitions: Vec<(i64, i64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStabilityReport {
    pub metric: String,
    pub models: Vec<String>,
    pub per_seed: Vec<SeedColumn>,
    /// Identical rank ordering under every seed.
    pub consistent: bool,
    pub pairwise_tau: Vec<SeedPairTau>,
    pub flips: Vec<RankFlip>,
}

impl SeedStabilityReport {
    pub fn column(&self, seed: i64) -> Option<&SeedColumn> {
        self.per_seed.iter().find(|c| c.seed == seed)
    }

    pub fn mean_of(&self, model: &str, seed: i64) -> Option<f64> {
        let i = self.models.iter().position(|m| m == model)?;
        self.column(seed).map(|c| c.means[i])
    }

    pub fn rank_of(&self, model: &str, seed: i64) -> Option<usize> {
        let i = self.models.iter().position(|m| m == model)?;
        self.column(seed).map(|c| c.ranks[i])
    }
}

/// Compares model rankings across seeds for one metric, on original images.
pub fn seed_stability(metric: &str, scores: &ScoreSet, scope: &AuditScope) -> Result<SeedStabilityReport, AuditError> {
    if scope.models.len() < 2 {
        return Err(AuditError::TooFew {
            what: "models",
            required: 2,
            got: scope.models.len(),
        });
    }
    if scope.seeds.len() < 2 {
        return Err(AuditError::TooFew {
            what: "seeds",
            required: 2,
            got: scope.seeds.len(),
        });
    }

    let mut per_seed = Vec::with_capacity(scope.seeds.len());
    for &seed in &scope.seeds {
        let mut means = Vec::with_capacity(scope.models.len());
        for model in &scope.models {
            let v = scores.vector(metric, model, seed, Variant::Original, &scope.prompt_ids)?;
            means.push(mean_score(&v)?);
        }
        let by_name: BTreeMap<String, f64> = scope.models.iter().cloned().zip(means.iter().copied()).collect();
        let ranking = rank_models(&by_name)?;
        let ranks = scope
            .models
            .iter()
            .map(|m| ranking.iter().find(|r| &r.model == m).map(|r| r.rank).expect("ranked"))
            .collect();
        per_seed.push(SeedColumn {
            seed,
            means,
            ranks,
            ranking,
        });
    }

    let mut pairwise_tau = Vec::new();
    for a in 0..per_seed.len() {
        for b in (a + 1)..per_seed.len() {
            pairwise_tau.push(SeedPairTau {
                seed_a: per_seed[a].seed,
                seed_b: per_seed[b].seed,
                tau: kendall_tau_tied(&per_seed[a].ranks, &per_seed[b].ranks)?,
            });
        }
    }

    let order = |col: &SeedColumn, i: usize, j: usize| col.ranks[i].cmp(&col.ranks[j]);
    let mut flips = Vec::new();
    for i in 0..scope.models.len() {
        for j in (i + 1)..scope.models.len() {
            let mut seed_pairs = Vec::new();
            for a in 0..per_seed.len() {
                for b in (a + 1)..per_seed.len() {
                    if order(&per_seed[a], i, j) != order(&per_seed[b], i, j) {
                        seed_pairs.push((per_seed[a].seed, per_seed[b].seed));
                    }
                }
            }
            if seed_pairs.is_empty() {
                continue;
            }
            let transitions = per_seed
                .windows(2)
                .filter(|w| order(&w[0], i, j) != order(&w[1], i, j))
                .map(|w| (w[0].seed, w[1].seed))
                .collect();
            flips.push(RankFlip {
                models: (scope.models[i].clone(), scope.models[j].clone()),
                seed_pairs,
                transitions,
            });
        }
    }

    Ok(SeedStabilityReport {
        metric: metric.to_string(),
        models: scope.models.clone(),
        consistent: flips.is_empty(),
        per_seed,
        pairwise_tau,
        flips,
    })
}

/// Per-prompt |original − perturbed| for one (metric, model, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub metric: String,
    pub model: String,
    pub seed: i64,
    pub per_prompt_gaps: Vec<f64>,
    pub average_gap: f64,
    pub max_gap: f64,
    /// Prompt with the largest gap; the earliest one wins ties.
    pub argmax_prompt: String,
}

pub fn perturbation_gap(
    original: &ScoreVector,
    perturbed: &ScoreVector,
    prompt_ids: &[String],
) -> Result<GapReport, AuditError> {
    if original.scores.len() != perturbed.scores.len() {
        return Err(AuditError::LengthMismatch(original.scores.len(), perturbed.scores.len()));
    }
    if original.scores.len() != prompt_ids.len() {
        return Err(AuditError::LengthMismatch(original.scores.len(), prompt_ids.len()));
    }
    if original.metric != perturbed.metric || original.model != perturbed.model || original.seed != perturbed.seed {
        return Err(AuditError::KeyMismatch(format!(
            "({}, {}, {}) vs ({}, {}, {})",
            original.metric, original.model, original.seed, perturbed.metric, perturbed.model, perturbed.seed
        )));
    }
    let gaps: Vec<f64> = original
        .scores
        .iter()
        .zip(&perturbed.scores)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let average_gap = mean(&gaps)?;
    let (argmax, max_gap) = gaps
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, g)| if g > best.1 { (i, g) } else { best });
    Ok(GapReport {
        metric: original.metric.clone(),
        model: original.model.clone(),
        seed: original.seed,
        per_prompt_gaps: gaps,
        average_gap,
        max_gap,
        argmax_prompt: prompt_ids[argmax].clone(),
    })
}

/// Gap reports for every (model, seed) in scope.
pub fn gap_reports(metric: &str, scores: &ScoreSet, scope: &AuditScope) -> Result<Vec<GapReport>, AuditError> {
    let mut out = Vec::new();
    for model in &scope.models {
        for &seed in &scope.seeds {
            let original = scores.vector(metric, model, seed, Variant::Original, &scope.prompt_ids)?;
            let perturbed = scores.vector(metric, model, seed, Variant::Perturbed, &scope.prompt_ids)?;
            out.push(perturbation_gap(&original, &perturbed, &scope.prompt_ids)?);
        }
    }
    Ok(out)
}

/// One summary row: pooled average and maximum gap for a metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub metric: String,
    pub average_gap: f64,
    pub max_gap: f64,
}

/// Pools per-prompt gaps per metric (metrics in first-appearance order).
pub fn gap_summary(reports: &[GapReport]) -> Result<Vec<GapRow>, AuditError> {
    if reports.is_empty() {
        return Err(AuditError::NothingToSummarise);
    }
    let mut order: Vec<&str> = Vec::new();
    let mut pooled: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in reports {
        if !pooled.contains_key(r.metric.as_str()) {
            order.push(&r.metric);
        }
        pooled.entry(&r.metric).or_default().extend_from_slice(&r.per_prompt_gaps);
    }
    order
        .into_iter()
        .map(|metric| {
            let gaps = &pooled[metric];
            Ok(GapRow {
                metric: metric.to_string(),
                average_gap: mean(gaps)?,
                max_gap: gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}
