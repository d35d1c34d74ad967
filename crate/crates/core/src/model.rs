//! Evaluation data model: prompts, model profiles, seeds, images and scores,
//! plus the mean-score and ranking primitives every audit builds on.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scorer::{RawBinding, ScorerBinding};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse manifest {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

/// Errors from score aggregation and lookup.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("cannot take the mean of an empty score vector")]
    EmptyVector,
    #[error("cannot rank an empty set of models")]
    NothingToRank,
    #[error("non-finite mean {value} for model {model}")]
    NonFiniteMean { model: String, value: f64 },
    #[error("non-finite score {score} for {key}")]
    NonFiniteScore { key: CellKey, score: f64 },
    #[error("duplicate score record for {0}")]
    DuplicateRecord(CellKey),
    #[error("missing score for {0}")]
    MissingCell(CellKey),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
}

/// A text-to-image model with the inference settings its images were made with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    /// Total denoising steps.
    #[serde(rename = "steps")]
    pub denoising_steps: u32,
    /// Classifier-free guidance scale.
    #[serde(rename = "guidance")]
    pub guidance_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Perturbed,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Original, Variant::Perturbed];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Perturbed => "perturbed",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(Variant::Original),
            "perturbed" => Ok(Variant::Perturbed),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

/// One generated image on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRef {
    pub prompt_id: String,
    pub model: String,
    pub seed: i64,
    pub variant: Variant,
    pub location: PathBuf,
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "image (model {}, seed {}, prompt {}, {}) at {}",
            self.model,
            self.seed,
            self.prompt_id,
            self.variant,
            self.location.display()
        )
    }
}

/// Identifies one score cell within a metric.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub metric: String,
    pub model: String,
    pub seed: i64,
    pub prompt_id: String,
    pub variant: Variant,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "metric {} / model {} / seed {} / prompt {} / {}",
            self.metric, self.model, self.seed, self.prompt_id, self.variant
        )
    }
}

/// One metric score for one (metric, model, seed, prompt, variant) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub metric: String,
    pub model: String,
    pub seed: i64,
    pub prompt_id: String,
    pub variant: Variant,
    pub score: f64,
}

impl ScoreRecord {
    pub fn key(&self) -> CellKey {
        CellKey {
            metric: self.metric.clone(),
            model: self.model.clone(),
            seed: self.seed,
            prompt_id: self.prompt_id.clone(),
            variant: self.variant,
        }
    }
}

/// Per-prompt scores of one model, aligned to the manifest's prompt order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub metric: String,
    pub model: String,
    pub seed: i64,
    pub variant: Variant,
    pub scores: Vec<f64>,
}

/// Run configuration: what was generated, and which metrics score it.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditManifest {
    pub prompts: Vec<Prompt>,
    pub models: Vec<ModelProfile>,
    pub seeds: Vec<i64>,
    pub metrics: Vec<ScorerBinding>,
    pub image_root: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    prompts: Vec<Prompt>,
    models: Vec<ModelProfile>,
    seeds: Vec<i64>,
    metrics: Vec<RawBinding>,
    image_root: PathBuf,
}

/// Extensions tried, in order, when resolving an original image.
pub const IMAGE_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "webp", "tif", "tiff"];

/// Reads and validates a manifest. Relative paths inside it resolve against
/// the manifest's own directory.
pub fn load_manifest(path: &Path) -> Result<AuditManifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base).map_err(|e| match e {
        ManifestError::Parse { source, .. } => ManifestError::Parse {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Parses manifest JSON; `base` anchors relative paths.
pub fn parse_manifest(text: &str, base: &Path) -> Result<AuditManifest, ManifestError> {
    let raw: RawManifest = serde_json::from_str(text).map_err(|source| ManifestError::Parse {
        path: PathBuf::new(),
        source,
    })?;
    let metrics = raw
        .metrics
        .into_iter()
        .map(|b| b.validate(base))
        .collect::<Result<Vec<_>, _>>()
        .map_err(ManifestError::Invalid)?;
    let image_root = if raw.image_root.is_absolute() {
        raw.image_root
    } else {
        base.join(raw.image_root)
    };
    let manifest = AuditManifest {
        prompts: raw.prompts,
        models: raw.models,
        seeds: raw.seeds,
        metrics,
        image_root,
    };
    manifest.validate().map_err(ManifestError::Invalid)?;
    Ok(manifest)
}

/// Names that become path components must stay inside their directory.
fn check_path_component(kind: &str, name: &str) -> Result<(), String> {
    if name.is_empty() {
        return Err(format!("{kind} name must be non-empty"));
    }
    if name == "." || name == ".." || name.contains(['/', '\\']) || name.contains('\0') {
        return Err(format!("{kind} {name:?} is not usable as a file name"));
    }
    Ok(())
}

impl AuditManifest {
    /// Checks every invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.prompts.is_empty() {
            return Err("at least one prompt is required".into());
        }
        if self.models.is_empty() {
            return Err("at least one model is required".into());
        }
        if self.seeds.is_empty() {
            return Err("at least one seed is required".into());
        }
        if self.metrics.is_empty() {
            return Err("at least one metric is required".into());
        }
        let mut ids = HashSet::new();
        for p in &self.prompts {
            check_path_component("prompt id", &p.id)?;
            if p.text.trim().is_empty() {
                return Err(format!("prompt {:?} has empty text", p.id));
            }
            if !ids.insert(p.id.as_str()) {
                return Err(format!("duplicate prompt id {:?}", p.id));
            }
        }
        let mut names = HashSet::new();
        for m in &self.models {
            check_path_component("model", &m.name)?;
            if m.name == "perturbed" {
                return Err("model name \"perturbed\" is reserved".into());
            }
            if !names.insert(m.name.as_str()) {
                return Err(format!("duplicate model name {:?}", m.name));
            }
            if m.denoising_steps < 1 {
                return Err(format!("model {:?}: steps must be at least 1", m.name));
            }
            if !(m.guidance_scale > 0.0 && m.guidance_scale.is_finite()) {
                return Err(format!("model {:?}: guidance must be positive", m.name));
            }
        }
        let mut seeds = HashSet::new();
        for s in &self.seeds {
            if !seeds.insert(*s) {
                return Err(format!("duplicate seed {s}"));
            }
        }
        let mut metrics = HashSet::new();
        for b in &self.metrics {
            check_path_component("metric", &b.metric_name)?;
            if !metrics.insert(b.metric_name.as_str()) {
                return Err(format!("duplicate metric name {:?}", b.metric_name));
            }
        }
        Ok(())
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn prompt_ids(&self) -> Vec<String> {
        self.prompts.iter().map(|p| p.id.clone()).collect()
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.iter().map(|m| m.name.clone()).collect()
    }

    pub fn metric(&self, name: &str) -> Option<&ScorerBinding> {
        self.metrics.iter().find(|b| b.metric_name == name)
    }

    pub fn prompt(&self, id: &str) -> Option<&Prompt> {
        self.prompts.iter().find(|p| p.id == id)
    }

    /// Directory holding the originals of one (model, seed).
    pub fn image_dir(&self, model: &str, seed: i64) -> PathBuf {
        self.image_root.join(model).join(seed.to_string())
    }

    /// Where the perturbed twin of a prompt's image lives. Always PNG.
    pub fn perturbed_path(&self, model: &str, seed: i64, prompt_id: &str) -> PathBuf {
        self.image_dir(model, seed)
            .join("perturbed")
            .join(format!("{prompt_id}.png"))
    }

    /// Finds the original image for a cell, trying each known extension.
    pub fn resolve_original(&self, model: &str, seed: i64, prompt_id: &str) -> Option<PathBuf> {
        let dir = self.image_dir(model, seed);
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| dir.join(format!("{prompt_id}.{ext}")))
            .find(|p| p.is_file())
    }

    /// The image reference for a cell. Originals that do not exist yet resolve
    /// to the `.png` path so error messages can name it.
    pub fn image_ref(&self, model: &str, seed: i64, prompt_id: &str, variant: Variant) -> ImageRef {
        let location = match variant {
            Variant::Original => self
                .resolve_original(model, seed, prompt_id)
                .unwrap_or_else(|| self.image_dir(model, seed).join(format!("{prompt_id}.png"))),
            Variant::Perturbed => self.perturbed_path(model, seed, prompt_id),
        };
        ImageRef {
            prompt_id: prompt_id.to_string(),
            model: model.to_string(),
            seed,
            variant,
            location,
        }
    }
}

/// Mean of the scores in a vector.
pub fn mean_score(v: &ScoreVector) -> Result<f64, ScoreError> {
    mean(&v.scores)
}

pub(crate) fn mean(values: &[f64]) -> Result<f64, ScoreError> {
    if values.is_empty() {
        return Err(ScoreError::EmptyVector);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// A model's position in a ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub model: String,
    pub mean: f64,
    pub rank: usize,
    /// Shares its rank with at least one other model.
    pub tied: bool,
}

/// Ranks models by mean score, highest first.
///
/// Competition ranking: tied models share a rank and the following rank is
/// skipped. Within a tie, output order is by model name.
pub fn rank_models(means: &BTreeMap<String, f64>) -> Result<Vec<RankedModel>, ScoreError> {
    if means.is_empty() {
        return Err(ScoreError::NothingToRank);
    }
    if let Some((model, &value)) = means.iter().find(|(_, v)| !v.is_finite()) {
        return Err(ScoreError::NonFiniteMean {
            model: model.clone(),
            value,
        });
    }
    // BTreeMap iteration is already name-ordered; a stable sort keeps it within ties.
    let mut ordered: Vec<(&String, f64)> = means.iter().map(|(k, v)| (k, *v)).collect();
    ordered.sort_by(|a, b| b.1.total_cmp(&a.1));

    let mut out = Vec::with_capacity(ordered.len());
    let mut i = 0;
    while i < ordered.len() {
        let mut j = i + 1;
        while j < ordered.len() && ordered[j].1 == ordered[i].1 {
            j += 1;
        }
        let tied = j - i > 1;
        for &(model, mean) in &ordered[i..j] {
            out.push(RankedModel {
                model: model.clone(),
                mean,
                rank: i + 1,
                tied,
            });
        }
        i = j;
    }
    Ok(out)
}

/// Validated, indexed scores for lookups by cell.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    cells: HashMap<CellKey, f64>,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Indexes records, rejecting duplicates and non-finite scores.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ScoreRecord>) -> Result<Self, ScoreError> {
        let mut set = Self::new();
        for r in records {
            set.insert(r)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, record: &ScoreRecord) -> Result<(), ScoreError> {
        let key = record.key();
        if !record.score.is_finite() {
            return Err(ScoreError::NonFiniteScore {
                key,
                score: record.score,
            });
        }
        if self.cells.contains_key(&key) {
            return Err(ScoreError::DuplicateRecord(key));
        }
        self.cells.insert(key, record.score);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, key: &CellKey) -> Option<f64> {
        self.cells.get(key).copied()
    }

    /// Gathers one model's scores in the given prompt order. The first absent
    /// cell is an error.
    pub fn vector(
        &self,
        metric: &str,
        model: &str,
        seed: i64,
        variant: Variant,
        prompt_ids: &[String],
    ) -> Result<ScoreVector, ScoreError> {
        let mut scores = Vec::with_capacity(prompt_ids.len());
        for prompt_id in prompt_ids {
            let key = CellKey {
                metric: metric.to_string(),
                model: model.to_string(),
                seed,
                prompt_id: prompt_id.clone(),
                variant,
            };
            match self.cells.get(&key) {
                Some(&s) => scores.push(s),
                None => return Err(ScoreError::MissingCell(key)),
            }
        }
        Ok(ScoreVector {
            metric: metric.to_string(),
            model: model.to_string(),
            seed,
            variant,
            scores,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn means(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn manifest_json(prompts: &str, models: &str, seeds: &str) -> String {
        format!(
            r#"{{"prompts": {prompts}, "models": {models}, "seeds": {seeds},
                "metrics": [{{"name": "meanpixel", "kind": "builtin_meanpixel"}}],
                "image_root": "images"}}"#
        )
    }

    const ONE_MODEL: &str = r#"[{"name": "SD-3", "steps": 28, "guidance": 7.0}]"#;

    #[test]
    fn parses_minimal_manifest() {
        let text = manifest_json(
            r#"[{"id": "p1", "text": "a cat"}, {"id": "p2", "text": "a dog"}]"#,
            ONE_MODEL,
            "[42]",
        );
        let m = parse_manifest(&text, Path::new("/data/run")).unwrap();
        assert_eq!(m.n_prompts(), 2);
        assert_eq!(m.n_models(), 1);
        assert_eq!(m.models[0].denoising_steps, 28);
        assert_eq!(m.models[0].guidance_scale, 7.0);
        assert_eq!(m.image_root, PathBuf::from("/data/run/images"));
    }

    #[test]
    fn duplicate_prompt_id_is_named() {
        let text = manifest_json(
            r#"[{"id": "p1", "text": "a cat"}, {"id": "p1", "text": "a dog"}]"#,
            ONE_MODEL,
            "[42]",
        );
        let err = parse_manifest(&text, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("\"p1\""), "{err}");
    }

    #[test]
    fn validation_failures() {
        let prompts = r#"[{"id": "p1", "text": "a cat"}]"#;
        let cases = [
            (manifest_json("[]", ONE_MODEL, "[42]"), "prompt"),
            (manifest_json(prompts, "[]", "[42]"), "model"),
            (manifest_json(prompts, ONE_MODEL, "[]"), "seed"),
            (manifest_json(prompts, ONE_MODEL, "[1, 1]"), "duplicate seed 1"),
            (
                manifest_json(prompts, r#"[{"name": "A", "steps": 0, "guidance": 1.0}]"#, "[1]"),
                "steps",
            ),
            (
                manifest_json(prompts, r#"[{"name": "A", "steps": 1, "guidance": 0.0}]"#, "[1]"),
                "guidance",
            ),
            (
                manifest_json(r#"[{"id": "../x", "text": "t"}]"#, ONE_MODEL, "[1]"),
                "file name",
            ),
            (manifest_json(r#"[{"id": "p", "text": " "}]"#, ONE_MODEL, "[1]"), "empty text"),
        ];
        for (text, needle) in cases {
            let err = parse_manifest(&text, Path::new(".")).unwrap_err().to_string();
            assert!(err.contains(needle), "{err} should mention {needle}");
        }
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(
            parse_manifest("{not json", Path::new(".")),
            Err(ManifestError::Parse { .. })
        ));
        assert!(matches!(
            parse_manifest(r#"{"prompts": []}"#, Path::new(".")),
            Err(ManifestError::Parse { .. })
        ));
    }

    #[test]
    fn paper_setup_manifest() {
        let text = manifest_json(
            r#"[{"id": "p1", "text": "a cat"}]"#,
            r#"[{"name": "SD-3", "steps": 28, "guidance": 7.0},
                {"name": "SD-XL", "steps": 50, "guidance": 5.0},
                {"name": "SD-1.5", "steps": 50, "guidance": 7.5},
                {"name": "Pixart", "steps": 20, "guidance": 4.5}]"#,
            "[42, 3407, 5096]",
        );
        let m = parse_manifest(&text, Path::new(".")).unwrap();
        assert_eq!(m.seeds, vec![42, 3407, 5096]);
        assert_eq!(m.n_models(), 4);
    }

    #[test]
    fn image_layout() {
        let text = manifest_json(r#"[{"id": "p1", "text": "a cat"}]"#, ONE_MODEL, "[42]");
        let m = parse_manifest(&text, Path::new("/r")).unwrap();
        assert_eq!(
            m.perturbed_path("SD-3", 42, "p1"),
            PathBuf::from("/r/images/SD-3/42/perturbed/p1.png")
        );
        let missing = m.image_ref("SD-3", 42, "p1", Variant::Original);
        assert_eq!(missing.location, PathBuf::from("/r/images/SD-3/42/p1.png"));
    }

    #[test]
    fn mean_examples() {
        let v = |scores: Vec<f64>| ScoreVector {
            metric: "m".into(),
            model: "a".into(),
            seed: 0,
            variant: Variant::Original,
            scores,
        };
        assert_eq!(mean_score(&v(vec![1.0, 2.0, 3.0])).unwrap(), 2.0);
        assert_eq!(mean_score(&v(vec![5.0])).unwrap(), 5.0);
        assert_eq!(mean_score(&v(vec![])), Err(ScoreError::EmptyVector));
    }

    #[test]
    fn ranks_table_one_vqa_column() {
        let ranked = rank_models(&means(&[
            ("SD3", 91.18),
            ("SDXL", 86.63),
            ("Pixart", 87.04),
            ("SD1.5", 76.26),
        ]))
        .unwrap();
        let got: Vec<_> = ranked.iter().map(|r| (r.model.as_str(), r.rank)).collect();
        assert_eq!(got, vec![("SD3", 1), ("Pixart", 2), ("SDXL", 3), ("SD1.5", 4)]);
        assert!(ranked.iter().all(|r| !r.tied));
    }

    #[test]
    fn ties_share_rank_and_skip() {
        let ranked = rank_models(&means(&[("B", 2.0), ("A", 2.0), ("C", 1.0)])).unwrap();
        let got: Vec<_> = ranked.iter().map(|r| (r.model.as_str(), r.rank, r.tied)).collect();
        assert_eq!(got, vec![("A", 1, true), ("B", 1, true), ("C", 3, false)]);
    }

    #[test]
    fn rank_edge_cases() {
        let single = rank_models(&means(&[("A", 1.0)])).unwrap();
        assert_eq!(single[0].rank, 1);
        assert_eq!(rank_models(&BTreeMap::new()), Err(ScoreError::NothingToRank));
        assert!(matches!(
            rank_models(&means(&[("A", f64::NAN)])),
            Err(ScoreError::NonFiniteMean { .. })
        ));
    }

    #[test]
    fn score_set_fails_closed() {
        let rec = |prompt: &str, score: f64| ScoreRecord {
            metric: "m".into(),
            model: "A".into(),
            seed: 1,
            prompt_id: prompt.into(),
            variant: Variant::Original,
            score,
        };
        let set = ScoreSet::from_records(&[rec("p1", 0.5)]).unwrap();
        let err = set
            .vector("m", "A", 1, Variant::Original, &["p1".into(), "p2".into()])
            .unwrap_err();
        assert!(err.to_string().contains("prompt p2"), "{err}");
        assert!(matches!(
            ScoreSet::from_records(&[rec("p1", 0.5), rec("p1", 0.6)]),
            Err(ScoreError::DuplicateRecord(_))
        ));
        assert!(matches!(
            ScoreSet::from_records(&[rec("p1", f64::INFINITY)]),
            Err(ScoreError::NonFiniteScore { .. })
        ));
    }
}
