//! Conformance checks for out-of-process scorers.
//!
//! Runs a candidate scorer against a handful of generated images and reports
//! each protocol obligation separately, so an adapter author can see exactly
//! which one is broken.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::perturb::{write_png, RasterImage};
use crate::scorer::{ExchangeResult, GatewayConfig, ScoreRequest, ScorerError, SubprocessScorer};

#[derive(Debug, Clone, PartialEq)]
pub struct ConformanceCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConformanceReport {
    pub metric: String,
    pub checks: Vec<ConformanceCheck>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &'static str, result: Result<String, String>) -> bool {
        let passed = result.is_ok();
        let detail = match result {
            Ok(d) | Err(d) => d,
        };
        self.checks.push(ConformanceCheck { name, passed, detail });
        passed
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            if c.detail.is_empty() {
                writeln!(f, "{mark} {}", c.name)?;
            } else {
                writeln!(f, "{mark} {}: {}", c.name, c.detail)?;
            }
        }
        let verdict = if self.passed() { "conformant" } else { "NOT conformant" };
        write!(f, "{}: {verdict}", self.metric)
    }
}

const PROMPTS: [&str; 3] = ["a red cube on a table", "two dogs playing in snow", "an empty street at night"];

/// Writes the three probe images into `dir` and returns their absolute paths.
pub fn write_probe_images(dir: &Path) -> Result<Vec<PathBuf>, String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let mut gradient = Vec::with_capacity(32 * 32 * 3);
    for h in 0..32u32 {
        for w in 0..32u32 {
            gradient.extend([(h * 8) as u8, (w * 8) as u8, 255]);
        }
    }
    let images = [
        RasterImage::filled(16, 16, 3, 0),
        RasterImage::filled(24, 8, 4, 200),
        RasterImage::new(32, 32, 3, gradient),
    ];
    let mut paths = Vec::new();
    for (i, img) in images.into_iter().enumerate() {
        let img = img.map_err(|e| e.to_string())?;
        let path = dir.join(format!("probe-{i}.png"));
        write_png(&path, &img).map_err(|e| e.to_string())?;
        paths.push(std::path::absolute(&path).unwrap_or(path));
    }
    Ok(paths)
}

fn requests(paths: &[PathBuf], tag: &str) -> Vec<ScoreRequest> {
    paths
        .iter()
        .zip(PROMPTS)
        .enumerate()
        .map(|(i, (p, prompt))| ScoreRequest {
            id: format!("{tag}-{i}"),
            prompt: prompt.to_string(),
            image: p.to_string_lossy().into_owned(),
        })
        .collect()
}

fn scores(results: &[ExchangeResult]) -> Result<Vec<f64>, String> {
    results
        .iter()
        .enumerate()
        .map(|(i, r)| match r {
            ExchangeResult::Score(s) => Ok(*s),
            ExchangeResult::Error(e) => Err(format!("request {i} answered with error {e:?}")),
        })
        .collect()
}

/// Runs every check against `command`. Probe images are written under `workdir`.
pub fn run_conformance(
    metric: &str,
    command: &[String],
    config: &GatewayConfig,
    workdir: &Path,
) -> ConformanceReport {
    let mut report = ConformanceReport {
        metric: metric.to_string(),
        checks: Vec::new(),
    };
    let paths = match write_probe_images(workdir) {
        Ok(p) => p,
        Err(e) => {
            report.record("probe images", Err(e));
            return report;
        }
    };

    let mut scorer = match SubprocessScorer::spawn(metric, command, config.clone()) {
        Ok(s) => {
            let version = s.protocol_version().to_string();
            report.record("handshake", Ok(format!("protocol {version}, metric {metric}")));
            s
        }
        Err(e) => {
            report.record("handshake", Err(e.to_string()));
            return report;
        }
    };

    let first = match scorer.session().exchange(&requests(&paths, "a")).map_err(|e| e.to_string()) {
        Ok(results) => scores(&results),
        Err(e) => Err(e),
    };
    let ok = report.record(
        "scores three requests",
        first.as_ref().map(|s| format!("{s:?}")).map_err(Clone::clone),
    );
    if !ok {
        scorer.close_within(Duration::from_secs(2));
        return report;
    }
    let first = first.unwrap_or_default();

    let missing = workdir.join("does-not-exist.png");
    let probe = vec![
        ScoreRequest {
            id: "missing".into(),
            prompt: PROMPTS[0].into(),
            image: missing.to_string_lossy().into_owned(),
        },
        ScoreRequest {
            id: "after-missing".into(),
            prompt: PROMPTS[0].into(),
            image: paths[0].to_string_lossy().into_owned(),
        },
    ];
    let exchanged = scorer.session().exchange(&probe);
    let alive = exchanged.is_ok();
    let survived = match exchanged {
        Ok(r) => match (&r[0], &r[1]) {
            (ExchangeResult::Error(e), ExchangeResult::Score(_)) => Ok(format!("error response {e:?}")),
            (ExchangeResult::Score(s), _) => Err(format!("scored a nonexistent image as {s}")),
            (_, ExchangeResult::Error(e)) => Err(format!("failed the request after the bad one: {e}")),
        },
        Err(e @ (ScorerError::BrokenPipe { .. } | ScorerError::Timeout { .. })) => {
            Err(format!("did not survive a nonexistent image: {e}"))
        }
        Err(e) => Err(e.to_string()),
    };
    report.record("per-item error on missing image", survived);

    if alive {
        let second = scorer
            .session()
            .exchange(&requests(&paths, "b"))
            .map_err(|e| e.to_string())
            .and_then(|r| scores(&r));
        let deterministic = match second {
            Ok(s) if s.iter().zip(&first).all(|(a, b)| a.to_bits() == b.to_bits()) => Ok(String::new()),
            Ok(s) => Err(format!("first pass {first:?}, second pass {s:?}")),
            Err(e) => Err(e),
        };
        report.record("deterministic rescoring", deterministic);
    }

    let exited = scorer.close_within(Duration::from_secs(5));
    report.record(
        "exits when input closes",
        if exited { Ok(String::new()) } else { Err("still running 5s after stdin closed; killed".into()) },
    );
    report
}
