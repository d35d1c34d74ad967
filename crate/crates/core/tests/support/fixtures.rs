#![allow(dead_code)]

use std::path::{Path, PathBuf};

use its_audit::model::{ScoreRecord, Variant};
use its_audit::perturb::{write_png, RasterImage};
use its_audit::scorer::score_file_bytes;

pub const T1_MODELS: [&str; 4] = ["SD-3", "SD-XL", "Pixart", "SD-1.5"];
pub const T1_SEEDS: [i64; 3] = [42, 3407, 5096];

/// Per-metric means, rows in `T1_MODELS` order, columns in `T1_SEEDS` order.
pub const T1_MEANS: [(&str, [[f64; 3]; 4]); 3] = [
    (
        "VQAScore",
        [
            [91.18, 90.90, 91.06],
            [86.63, 86.01, 85.77],
            [87.04, 87.16, 86.72],
            [76.26, 75.79, 77.32],
        ],
    ),
    (
        "CLIPScore",
        [
            [26.39, 26.34, 26.36],
            [25.93, 25.81, 25.85],
            [25.78, 25.71, 25.75],
            [25.76, 25.58, 25.76],
        ],
    ),
    (
        "DSGScore",
        [
            [93.66, 91.99, 93.52],
            [89.68, 90.04, 90.44],
            [90.52, 90.53, 89.99],
            [83.23, 82.64, 83.88],
        ],
    ),
];

/// Ranks printed next to each mean, same layout as `T1_MEANS`.
pub const T1_RANKS: [(&str, [[usize; 3]; 4]); 3] = [
    ("VQAScore", [[1, 1, 1], [3, 3, 3], [2, 2, 2], [4, 4, 4]]),
    ("CLIPScore", [[1, 1, 1], [2, 2, 2], [3, 3, 4], [4, 4, 3]]),
    ("DSGScore", [[1, 1, 1], [3, 3, 2], [2, 2, 3], [4, 4, 4]]),
];

pub const T1_PROMPTS: [&str; 1] = ["p0"];

/// One original-variant record per (model, seed) carrying the table mean.
pub fn table1_records(metric: &str) -> Vec<ScoreRecord> {
    let (_, means) = T1_MEANS.iter().find(|(m, _)| *m == metric).expect("known metric");
    let mut out = Vec::new();
    for (i, model) in T1_MODELS.iter().enumerate() {
        for (j, &seed) in T1_SEEDS.iter().enumerate() {
            out.push(ScoreRecord {
                metric: metric.into(),
                model: model.to_string(),
                seed,
                prompt_id: T1_PROMPTS[0].into(),
                variant: Variant::Original,
                score: means[i][j],
            });
        }
    }
    out
}

/// Writes a manifest whose metrics are score files holding the table means.
pub fn table1_manifest(dir: &Path) -> PathBuf {
    let mut metrics = Vec::new();
    for (metric, _) in T1_MEANS {
        let file = format!("{metric}.scores.csv");
        std::fs::write(dir.join(&file), score_file_bytes(&table1_records(metric))).unwrap();
        metrics.push(serde_json::json!({"name": metric, "kind": "score_file", "path": file}));
    }
    let manifest = serde_json::json!({
        "prompts": [{"id": "p0", "text": "a photo"}],
        "models": [
            {"name": "SD-3", "steps": 28, "guidance": 7.0},
            {"name": "SD-XL", "steps": 50, "guidance": 5.0},
            {"name": "Pixart", "steps": 20, "guidance": 4.5},
            {"name": "SD-1.5", "steps": 50, "guidance": 7.5},
        ],
        "seeds": T1_SEEDS,
        "metrics": metrics,
        "image_root": "images",
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

/// Deterministic small image whose content depends on every coordinate.
pub fn corpus_image(model: usize, seed: i64, prompt: usize, channels: u8) -> RasterImage {
    let (w, h) = (12u32, 9u32);
    let mut px = Vec::with_capacity((w * h) as usize * channels as usize);
    let mut state = (model as u64 + 1) * 7_919 + (seed as u64) * 104_729 + (prompt as u64 + 3) * 1_299_709;
    for _ in 0..(w * h) as usize * channels as usize {
        state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        px.push((state >> 56) as u8);
    }
    RasterImage::new(w, h, channels, px).unwrap()
}

/// Writes originals for every (model, seed, prompt) and a manifest with a
/// built-in mean-pixel metric plus any extra metric bindings.
pub fn meanpixel_corpus(
    dir: &Path,
    models: &[&str],
    seeds: &[i64],
    n_prompts: usize,
    extra_metrics: Vec<serde_json::Value>,
) -> PathBuf {
    for (mi, model) in models.iter().enumerate() {
        for &seed in seeds {
            for p in 0..n_prompts {
                let path = dir.join("images").join(model).join(seed.to_string()).join(format!("p{p}.png"));
                write_png(&path, &corpus_image(mi, seed, p, 3)).unwrap();
            }
        }
    }
    let mut metrics = vec![serde_json::json!({"name": "meanpixel", "kind": "builtin_meanpixel"})];
    metrics.extend(extra_metrics);
    let manifest = serde_json::json!({
        "prompts": (0..n_prompts).map(|p| serde_json::json!({"id": format!("p{p}"), "text": format!("prompt number {p}")})).collect::<Vec<_>>(),
        "models": models.iter().map(|m| serde_json::json!({"name": m, "steps": 30, "guidance": 5.0})).collect::<Vec<_>>(),
        "seeds": seeds,
        "metrics": metrics,
        "image_root": "images",
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

/// Every file under `dir` as (relative path, bytes), sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
