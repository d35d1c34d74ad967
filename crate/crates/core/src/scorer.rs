//! Scorer gateway. Metrics attach as external processes speaking a
//! line-delimited JSON protocol on stdin/stdout, as a precomputed score file,
//! or as the built-in mean-pixel scorer.
//!
//! Protocol `its-audit/1`:
//!
//! ```text
//! scorer -> harness   {"protocol": "its-audit/1", "metric": "<name>"}
//! harness -> scorer   {"id": "<opaque>", "prompt": "<text>", "image": "/abs/path.png"}
//! scorer -> harness   {"id": "<opaque>", "score": <number>}
//!                   | {"id": "<opaque>", "error": "<message>"}
//! ```
//!
//! One UTF-8 JSON object per line; the scorer flushes after every response.
//! Responses may arrive in any order and are matched back by id.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CellKey, ScoreRecord, Variant};
use crate::perturb::{decode_image, RasterImage};

pub const PROTOCOL_VERSION: &str = "its-audit/1";
pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_ITEM_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_WINDOW: usize = 8;
/// With duplicate checking on, every request whose index is a multiple of
/// this is sent twice.
pub const DUPLICATE_STRIDE: usize = 100;
/// Header of the columnar score file.
pub const SCORE_FILE_HEADER: [&str; 5] = ["prompt_id", "model", "seed", "variant", "score"];

const DIAGNOSTIC_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum ScorerKind {
    Subprocess { command: Vec<String> },
    ScoreFile { path: PathBuf },
    BuiltinMeanPixel,
}

impl ScorerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScorerKind::Subprocess { .. } => "subprocess",
            ScorerKind::ScoreFile { .. } => "score_file",
            ScorerKind::BuiltinMeanPixel => "builtin_meanpixel",
        }
    }
}

/// How one metric is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerBinding {
    pub metric_name: String,
    pub kind: ScorerKind,
    /// Multiplier applied when scores are displayed (never to stored data).
    pub display_scale: f64,
}

/// Binding as written in the manifest, before validation.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawBinding {
    name: String,
    kind: String,
    command: Option<Vec<String>>,
    path: Option<PathBuf>,
    display_scale: Option<f64>,
}

impl RawBinding {
    pub(crate) fn validate(self, base: &Path) -> Result<ScorerBinding, String> {
        let name = self.name;
        let kind = match self.kind.as_str() {
            "subprocess" => {
                if self.path.is_some() {
                    return Err(format!("metric {name:?}: subprocess binding must not set path"));
                }
                match self.command {
                    Some(command) if !command.is_empty() && !command[0].is_empty() => {
                        ScorerKind::Subprocess { command }
                    }
                    _ => return Err(format!("metric {name:?}: subprocess binding needs a non-empty command")),
                }
            }
            "score_file" => {
                if self.command.is_some() {
                    return Err(format!("metric {name:?}: score_file binding must not set command"));
                }
                match self.path {
                    Some(p) => ScorerKind::ScoreFile {
                        path: if p.is_absolute() { p } else { base.join(p) },
                    },
                    None => return Err(format!("metric {name:?}: score_file binding needs a path")),
                }
            }
            "builtin_meanpixel" => {
                if self.command.is_some() || self.path.is_some() {
                    return Err(format!(
                        "metric {name:?}: builtin_meanpixel binding takes neither command nor path"
                    ));
                }
                ScorerKind::BuiltinMeanPixel
            }
            other => return Err(format!("metric {name:?}: unknown scorer kind {other:?}")),
        };
        let display_scale = self.display_scale.unwrap_or(1.0);
        if !(display_scale > 0.0 && display_scale.is_finite()) {
            return Err(format!("metric {name:?}: display_scale must be positive"));
        }
        Ok(ScorerBinding {
            metric_name: name,
            kind,
            display_scale,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    pub prompt: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoreResponse {
    Score { id: String, score: f64 },
    Error { id: String, error: String },
}

impl ScoreResponse {
    pub fn id(&self) -> &str {
        match self {
            ScoreResponse::Score { id, .. } | ScoreResponse::Error { id, .. } => id,
        }
    }
}

/// One cell to score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreJob {
    pub prompt_id: String,
    pub prompt: String,
    pub model: String,
    pub seed: i64,
    pub variant: Variant,
    pub image: PathBuf,
}

impl ScoreJob {
    pub fn key(&self, metric: &str) -> CellKey {
        CellKey {
            metric: metric.to_string(),
            model: self.model.clone(),
            seed: self.seed,
            prompt_id: self.prompt_id.clone(),
            variant: self.variant,
        }
    }

    fn record(&self, metric: &str, score: f64) -> ScoreRecord {
        ScoreRecord {
            metric: metric.to_string(),
            model: self.model.clone(),
            seed: self.seed,
            prompt_id: self.prompt_id.clone(),
            variant: self.variant,
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemFailure {
    pub key: CellKey,
    pub message: String,
}

/// Result of a batch: successful records in job order plus per-item failures.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutcome {
    pub records: Vec<ScoreRecord>,
    pub failures: Vec<ItemFailure>,
    pub warnings: Vec<String>,
}

impl BatchOutcome {
    /// Applies the failure policy: fail-closed turns any item failure into an error.
    pub fn enforce(self, policy: FailurePolicy) -> Result<BatchOutcome, ScorerError> {
        if policy == FailurePolicy::FailClosed && !self.failures.is_empty() {
            return Err(ScorerError::ItemFailures(self.failures));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum FailurePolicy {
    #[default]
    FailClosed,
    AllowPartial,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub handshake_timeout: Duration,
    pub item_timeout: Duration,
    /// Maximum requests in flight.
    pub window: usize,
    /// Re-send a deterministic 1% of requests and warn on differing scores.
    pub duplicate_check: bool,
    /// Worker threads for in-process scorers; 0 means one per core.
    pub jobs: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            handshake_timeout: DEFAULT_HANDSHAKE_TIMEOUT,
            item_timeout: DEFAULT_ITEM_TIMEOUT,
            window: DEFAULT_WINDOW,
            duplicate_check: false,
            jobs: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("cannot spawn scorer {command:?}: {source}")]
    Spawn {
        command: Vec<String>,
        #[source]
        source: std::io::Error,
    },
    #[error("handshake failed: {message}{}", fmt_diagnostics(.diagnostics))]
    Handshake { message: String, diagnostics: String },
    #[error("protocol version mismatch: expected {expected}, scorer declared {got}")]
    VersionMismatch { expected: String, got: String },
    #[error("scorer declared metric {got:?}, binding expects {expected:?}")]
    MetricMismatch { expected: String, got: String },
    #[error("timed out after {timeout:?} waiting for {waiting_for}{}", fmt_diagnostics(.diagnostics))]
    Timeout {
        waiting_for: String,
        timeout: Duration,
        diagnostics: String,
    },
    #[error("broken pipe: {message}{}", fmt_diagnostics(.diagnostics))]
    BrokenPipe { message: String, diagnostics: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("{} item(s) failed to score; first: {}: {}", .0.len(), .0[0].key, .0[0].message)]
    ItemFailures(Vec<ItemFailure>),
    #[error("image does not exist: {0}")]
    MissingImage(PathBuf),
    #[error("score file {path}: {message}")]
    ScoreFile { path: PathBuf, message: String },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

fn fmt_diagnostics(d: &str) -> String {
    if d.is_empty() {
        String::new()
    } else {
        format!(" [{d}]")
    }
}

/// Anything that can turn jobs into scores for one metric.
pub trait Scorer {
    fn metric(&self) -> &str;

    /// Scores every job. Per-item failures land in the outcome; transport and
    /// protocol failures abort the batch.
    fn score_batch(&mut self, jobs: &[ScoreJob]) -> Result<BatchOutcome, ScorerError>;
}

fn check_images(jobs: &[ScoreJob]) -> Result<(), ScorerError> {
    match jobs.iter().find(|j| !j.image.is_file()) {
        Some(j) => Err(ScorerError::MissingImage(j.image.clone())),
        None => Ok(()),
    }
}

/// Mean color value over all pixels, scaled to [0, 1]. Alpha is ignored.
pub fn builtin_meanpixel(img: &RasterImage) -> f64 {
    let ch = img.channels() as usize;
    let color = img.color_channels() as usize;
    let total: u64 = img
        .pixels()
        .chunks_exact(ch)
        .map(|px| px[..color].iter().map(|&v| u64::from(v)).sum::<u64>())
        .sum();
    let count = (img.width() as u64) * (img.height() as u64) * color as u64;
    total as f64 / count as f64 / 255.0
}

/// In-process mean-pixel metric.
pub struct MeanPixelScorer {
    metric: String,
    jobs: usize,
}

impl MeanPixelScorer {
    pub fn new(metric: impl Into<String>, jobs: usize) -> Self {
        Self {
            metric: metric.into(),
            jobs,
        }
    }
}

impl Scorer for MeanPixelScorer {
    fn metric(&self) -> &str {
        &self.metric
    }

    fn score_batch(&mut self, jobs: &[ScoreJob]) -> Result<BatchOutcome, ScorerError> {
        check_images(jobs)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| ScorerError::Pool(e.to_string()))?;
        let scored: Vec<Result<f64, String>> = pool.install(|| {
            jobs.par_iter()
                .map(|j| decode_image(&j.image).map(|img| builtin_meanpixel(&img)).map_err(|e| e.to_string()))
                .collect()
        });
        let mut outcome = BatchOutcome::default();
        for (job, result) in jobs.iter().zip(scored) {
            match result {
                Ok(score) => outcome.records.push(job.record(&self.metric, score)),
                Err(message) => outcome.failures.push(ItemFailure {
                    key: job.key(&self.metric),
                    message,
                }),
            }
        }
        Ok(outcome)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    prompt_id: String,
    model: String,
    seed: i64,
    variant: Variant,
    score: f64,
}

/// Reads a score file. Rows must be unique per cell and carry finite scores.
pub fn read_score_file(path: &Path, metric: &str) -> Result<Vec<ScoreRecord>, ScorerError> {
    let err = |message: String| ScorerError::ScoreFile {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != SCORE_FILE_HEADER {
        return Err(err(format!(
            "expected header {}, found {}",
            SCORE_FILE_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<ScoreRow>().enumerate() {
        let row = row.map_err(|e| err(format!("row {}: {e}", i + 1)))?;
        if !row.score.is_finite() {
            return Err(err(format!("row {}: non-finite score", i + 1)));
        }
        let record = ScoreRecord {
            metric: metric.to_string(),
            model: row.model,
            seed: row.seed,
            prompt_id: row.prompt_id,
            variant: row.variant,
            score: row.score,
        };
        if !seen.insert(record.key()) {
            return Err(err(format!("row {}: duplicate cell {}", i + 1, record.key())));
        }
        records.push(record);
    }
    Ok(records)
}

/// Serializes records in the given order. Scores carry full precision.
pub fn score_file_bytes(records: &[ScoreRecord]) -> Vec<u8> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(SCORE_FILE_HEADER).expect("in-memory write");
    for r in records {
        writer
            .write_record([
                r.prompt_id.as_str(),
                r.model.as_str(),
                &r.seed.to_string(),
                r.variant.as_str(),
                &r.score.to_string(),
            ])
            .expect("in-memory write");
    }
    writer.into_inner().expect("in-memory flush")
}

/// Precomputed scores looked up by cell.
pub struct ScoreFileScorer {
    metric: String,
    scores: HashMap<CellKey, f64>,
}

impl ScoreFileScorer {
    pub fn load(metric: impl Into<String>, path: &Path) -> Result<Self, ScorerError> {
        let metric = metric.into();
        let scores = read_score_file(path, &metric)?
            .into_iter()
            .map(|r| (r.key(), r.score))
            .collect();
        Ok(Self { metric, scores })
    }
}

impl Scorer for ScoreFileScorer {
    fn metric(&self) -> &str {
        &self.metric
    }

    fn score_batch(&mut self, jobs: &[ScoreJob]) -> Result<BatchOutcome, ScorerError> {
        let mut outcome = BatchOutcome::default();
        for job in jobs {
            let key = job.key(&self.metric);
            match self.scores.get(&key) {
                Some(&score) => outcome.records.push(job.record(&self.metric, score)),
                None => outcome.failures.push(ItemFailure {
                    key,
                    message: "no row in score file".into(),
                }),
            }
        }
        Ok(outcome)
    }
}

enum LineEvent {
    Line(String),
    Eof,
    Failed(String),
}

fn spawn_line_reader(reader: impl Read + Send + 'static) -> Receiver<LineEvent> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => {
                    let _ = tx.send(LineEvent::Eof);
                    return;
                }
                Ok(_) => {
                    if tx.send(LineEvent::Line(line)).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    let _ = tx.send(LineEvent::Failed(e.to_string()));
                    return;
                }
            }
        }
    });
    rx
}

/// Outcome of one raw request.
#[derive(Debug, Clone, PartialEq)]
pub enum ExchangeResult {
    Score(f64),
    Error(String),
}

/// Harness side of the protocol over any byte streams.
pub struct ProtocolSession {
    metric: String,
    writer: Option<Box<dyn Write + Send>>,
    lines: Receiver<LineEvent>,
    diagnostics: Arc<Mutex<String>>,
    config: GatewayConfig,
}

impl ProtocolSession {
    pub fn new(
        metric: impl Into<String>,
        writer: impl Write + Send + 'static,
        reader: impl Read + Send + 'static,
        config: GatewayConfig,
    ) -> Self {
        Self {
            metric: metric.into(),
            writer: Some(Box::new(writer)),
            lines: spawn_line_reader(reader),
            diagnostics: Arc::new(Mutex::new(String::new())),
            config,
        }
    }

    fn with_diagnostics(mut self, diagnostics: Arc<Mutex<String>>) -> Self {
        self.diagnostics = diagnostics;
        self
    }

    fn diagnostics(&self) -> String {
        self.diagnostics.lock().map(|d| d.trim().to_string()).unwrap_or_default()
    }

    /// Reads the scorer's first line and checks version and metric name.
    pub fn handshake(&mut self) -> Result<String, ScorerError> {
        let line = match self.lines.recv_timeout(self.config.handshake_timeout) {
            Ok(LineEvent::Line(l)) => l,
            Ok(LineEvent::Eof) | Err(RecvTimeoutError::Disconnected) => {
                return Err(ScorerError::Handshake {
                    message: "scorer closed its output before the handshake".into(),
                    diagnostics: self.diagnostics(),
                })
            }
            Ok(LineEvent::Failed(e)) => {
                return Err(ScorerError::Handshake {
                    message: format!("cannot read handshake: {e}"),
                    diagnostics: self.diagnostics(),
                })
            }
            Err(RecvTimeoutError::Timeout) => {
                return Err(ScorerError::Timeout {
                    waiting_for: "handshake".into(),
                    timeout: self.config.handshake_timeout,
                    diagnostics: self.diagnostics(),
                })
            }
        };
        let hs: Handshake = serde_json::from_str(line.trim()).map_err(|e| ScorerError::Handshake {
            message: format!("malformed handshake line {:?}: {e}", line.trim()),
            diagnostics: self.diagnostics(),
        })?;
        if hs.protocol != PROTOCOL_VERSION {
            return Err(ScorerError::VersionMismatch {
                expected: PROTOCOL_VERSION.into(),
                got: hs.protocol,
            });
        }
        if hs.metric != self.metric {
            return Err(ScorerError::MetricMismatch {
                expected: self.metric.clone(),
                got: hs.metric,
            });
        }
        Ok(hs.protocol)
    }

    fn send(&mut self, request: &ScoreRequest) -> Result<(), ScorerError> {
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        let diagnostics = self.diagnostics();
        let writer = self.writer.as_mut().ok_or_else(|| ScorerError::BrokenPipe {
            message: "session input already closed".into(),
            diagnostics: String::new(),
        })?;
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| ScorerError::BrokenPipe {
                message: format!("cannot send request {}: {e}", request.id),
                diagnostics,
            })
    }

    /// Streams requests with a bounded in-flight window and matches responses
    /// back by id. Results are returned in request order.
    pub fn exchange(&mut self, requests: &[ScoreRequest]) -> Result<Vec<ExchangeResult>, ScorerError> {
        let mut index_of = HashMap::with_capacity(requests.len());
        for (i, r) in requests.iter().enumerate() {
            if index_of.insert(r.id.clone(), i).is_some() {
                return Err(ScorerError::Protocol(format!("duplicate request id {:?}", r.id)));
            }
        }
        let window = self.config.window.max(1);
        let mut results: Vec<Option<ExchangeResult>> = vec![None; requests.len()];
        let mut pending: HashSet<&str> = HashSet::new();
        let mut next = 0;
        while next < requests.len() || !pending.is_empty() {
            while pending.len() < window && next < requests.len() {
                self.send(&requests[next])?;
                pending.insert(&requests[next].id);
                next += 1;
            }
            let deadline = Instant::now() + self.config.item_timeout;
            let line = loop {
                let remaining = deadline.saturating_duration_since(Instant::now());
                match self.lines.recv_timeout(remaining) {
                    Ok(LineEvent::Line(l)) if l.trim().is_empty() => continue,
                    Ok(LineEvent::Line(l)) => break l,
                    Ok(LineEvent::Eof) | Err(RecvTimeoutError::Disconnected) => {
                        return Err(ScorerError::BrokenPipe {
                            message: format!("scorer closed its output with {} request(s) pending", pending.len()),
                            diagnostics: self.diagnostics(),
                        })
                    }
                    Ok(LineEvent::Failed(e)) => {
                        return Err(ScorerError::BrokenPipe {
                            message: format!("cannot read response: {e}"),
                            diagnostics: self.diagnostics(),
                        })
                    }
                    Err(RecvTimeoutError::Timeout) => {
                        let mut ids: Vec<&str> = pending.iter().copied().collect();
                        ids.sort_unstable();
                        return Err(ScorerError::Timeout {
                            waiting_for: format!("response to request(s) {}", ids.join(", ")),
                            timeout: self.config.item_timeout,
                            diagnostics: self.diagnostics(),
                        });
                    }
                }
            };
            let response: ScoreResponse = serde_json::from_str(line.trim())
                .map_err(|e| ScorerError::Protocol(format!("malformed response {:?}: {e}", line.trim())))?;
            let id = response.id().to_string();
            if !pending.remove(id.as_str()) {
                return Err(ScorerError::Protocol(format!("response for unknown or settled id {id:?}")));
            }
            let slot = index_of[&id];
            results[slot] = Some(match response {
                ScoreResponse::Score { score, .. } if score.is_finite() => ExchangeResult::Score(score),
                ScoreResponse::Score { score, .. } => ExchangeResult::Error(format!("non-finite score {score}")),
                ScoreResponse::Error { error, .. } => ExchangeResult::Error(error),
            });
        }
        Ok(results.into_iter().map(|r| r.expect("every request settled")).collect())
    }

    /// Scores jobs over the protocol. Request ids are job indices.
    pub fn score(&mut self, jobs: &[ScoreJob]) -> Result<BatchOutcome, ScorerError> {
        check_images(jobs)?;
        let mut requests = Vec::with_capacity(jobs.len());
        for (i, job) in jobs.iter().enumerate() {
            let image = std::path::absolute(&job.image).unwrap_or_else(|_| job.image.clone());
            requests.push(ScoreRequest {
                id: i.to_string(),
                prompt: job.prompt.clone(),
                image: image.to_string_lossy().into_owned(),
            });
        }
        let n_primary = requests.len();
        if self.config.duplicate_check {
            for i in (0..n_primary).step_by(DUPLICATE_STRIDE) {
                let mut dup = requests[i].clone();
                dup.id = format!("{i}#dup");
                requests.push(dup);
            }
        }
        let results = self.exchange(&requests)?;

        let mut outcome = BatchOutcome::default();
        for (job, result) in jobs.iter().zip(&results) {
            match result {
                ExchangeResult::Score(s) => outcome.records.push(job.record(&self.metric, *s)),
                ExchangeResult::Error(message) => outcome.failures.push(ItemFailure {
                    key: job.key(&self.metric),
                    message: message.clone(),
                }),
            }
        }
        for (k, dup) in results[n_primary..].iter().enumerate() {
            let i = k * DUPLICATE_STRIDE;
            if let (ExchangeResult::Score(a), ExchangeResult::Score(b)) = (&results[i], dup) {
                if a.to_bits() != b.to_bits() {
                    outcome.warnings.push(format!(
                        "non-deterministic scorer: {} scored {a} then {b}",
                        jobs[i].key(&self.metric)
                    ));
                }
            }
        }
        Ok(outcome)
    }

    /// Closes the scorer's input, signalling shutdown.
    pub fn close(&mut self) {
        self.writer = None;
    }
}

/// A scorer running as a child process.
pub struct SubprocessScorer {
    child: Child,
    session: ProtocolSession,
    version: String,
    stderr_thread: Option<JoinHandle<()>>,
}

impl SubprocessScorer {
    /// Spawns the scorer and completes the handshake.
    pub fn spawn(metric: &str, command: &[String], config: GatewayConfig) -> Result<Self, ScorerError> {
        let (program, args) = command.split_first().ok_or_else(|| ScorerError::Spawn {
            command: command.to_vec(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| ScorerError::Spawn {
                command: command.to_vec(),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");

        let diagnostics = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&diagnostics);
        let stderr_thread = std::thread::spawn(move || {
            let mut buf = [0u8; 1024];
            while let Ok(n) = stderr.read(&mut buf) {
                if n == 0 {
                    break;
                }
                if let Ok(mut d) = sink.lock() {
                    d.push_str(&String::from_utf8_lossy(&buf[..n]));
                    if d.len() > DIAGNOSTIC_LIMIT {
                        let cut = d.len() - DIAGNOSTIC_LIMIT;
                        let cut = (cut..d.len()).find(|&i| d.is_char_boundary(i)).unwrap_or(d.len());
                        d.drain(..cut);
                    }
                }
            }
        });

        let session = ProtocolSession::new(metric, stdin, stdout, config).with_diagnostics(diagnostics);
        let mut scorer = Self {
            child,
            session,
            version: String::new(),
            stderr_thread: Some(stderr_thread),
        };
        match scorer.session.handshake() {
            Ok(v) => {
                scorer.version = v;
                Ok(scorer)
            }
            Err(e) => Err(scorer.fail_with_exit_status(e)),
        }
    }

    /// Stops the child and folds its exit status and stderr into handshake errors.
    fn fail_with_exit_status(mut self, err: ScorerError) -> ScorerError {
        self.shutdown();
        let status = self.child.try_wait().ok().flatten();
        // A grandchild may still hold stderr open; give the reader a moment only.
        if let Some(t) = self.stderr_thread.take() {
            let deadline = Instant::now() + Duration::from_millis(500);
            while !t.is_finished() && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(5));
            }
            if t.is_finished() {
                let _ = t.join();
            }
        }
        let stderr = self.session.diagnostics();
        let diagnostics = match status {
            Some(s) if stderr.is_empty() => format!("exit {s}"),
            Some(s) => format!("exit {s}; stderr: {stderr}"),
            None if stderr.is_empty() => String::new(),
            None => format!("stderr: {stderr}"),
        };
        match err {
            ScorerError::Handshake { message, .. } => ScorerError::Handshake { message, diagnostics },
            ScorerError::Timeout {
                waiting_for, timeout, ..
            } => ScorerError::Timeout {
                waiting_for,
                timeout,
                diagnostics,
            },
            other => other,
        }
    }

    pub fn protocol_version(&self) -> &str {
        &self.version
    }

    pub fn session(&mut self) -> &mut ProtocolSession {
        &mut self.session
    }

    fn shutdown(&mut self) {
        self.close_within(Duration::from_secs(2));
    }

    /// Closes the scorer's input and waits for it to exit, killing it after
    /// `grace`. Returns whether it exited on its own.
    pub fn close_within(&mut self, grace: Duration) -> bool {
        self.session.close();
        let deadline = Instant::now() + grace;
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) | Err(_) => return true,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    return false;
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            }
        }
    }
}

impl Scorer for SubprocessScorer {
    fn metric(&self) -> &str {
        &self.session.metric
    }

    fn score_batch(&mut self, jobs: &[ScoreJob]) -> Result<BatchOutcome, ScorerError> {
        self.session.score(jobs)
    }
}

impl Drop for SubprocessScorer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Opens the scorer a binding describes.
pub fn open_scorer(binding: &ScorerBinding, config: &GatewayConfig) -> Result<Box<dyn Scorer>, ScorerError> {
    Ok(match &binding.kind {
        ScorerKind::Subprocess { command } => {
            Box::new(SubprocessScorer::spawn(&binding.metric_name, command, config.clone())?)
        }
        ScorerKind::ScoreFile { path } => Box::new(ScoreFileScorer::load(&binding.metric_name, path)?),
        ScorerKind::BuiltinMeanPixel => Box::new(MeanPixelScorer::new(&binding.metric_name, config.jobs)),
    })
}

/// Scorer side of the protocol: writes the handshake, then answers each
/// request line until input closes. Per-item failures become error responses.
pub fn serve<R, W, F>(input: R, mut output: W, metric: &str, mut score: F) -> std::io::Result<usize>
where
    R: BufRead,
    W: Write,
    F: FnMut(&str, &Path) -> Result<f64, String>,
{
    let hs = Handshake {
        protocol: PROTOCOL_VERSION.into(),
        metric: metric.into(),
    };
    writeln!(output, "{}", serde_json::to_string(&hs).expect("handshake serializes"))?;
    output.flush()?;
    let mut served = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<ScoreRequest>(&line) {
            Ok(req) => match score(&req.prompt, Path::new(&req.image)) {
                Ok(s) if s.is_finite() => ScoreResponse::Score { id: req.id, score: s },
                Ok(s) => ScoreResponse::Error {
                    id: req.id,
                    error: format!("non-finite score {s}"),
                },
                Err(error) => ScoreResponse::Error { id: req.id, error },
            },
            Err(e) => {
                // Without a parseable id there is nothing to answer.
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string));
                match id {
                    Some(id) => ScoreResponse::Error {
                        id,
                        error: format!("malformed request: {e}"),
                    },
                    None => continue,
                }
            }
        };
        writeln!(output, "{}", serde_json::to_string(&response).expect("response serializes"))?;
        output.flush()?;
        served += 1;
    }
    Ok(served)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{pipe, PipeReader, PipeWriter};

    fn raw(json: &str) -> Result<ScorerBinding, String> {
        serde_json::from_str::<RawBinding>(json).unwrap().validate(Path::new("/base"))
    }

    #[test]
    fn binding_validation() {
        let b = raw(r#"{"name": "m", "kind": "subprocess", "command": ["python", "x.py"]}"#).unwrap();
        assert_eq!(b.kind.name(), "subprocess");
        let f = raw(r#"{"name": "m", "kind": "score_file", "path": "s.csv"}"#).unwrap();
        assert_eq!(f.kind, ScorerKind::ScoreFile { path: PathBuf::from("/base/s.csv") });
        assert!(raw(r#"{"name": "m", "kind": "subprocess"}"#).is_err());
        assert!(raw(r#"{"name": "m", "kind": "subprocess", "command": ["x"], "path": "p"}"#).is_err());
        assert!(raw(r#"{"name": "m", "kind": "builtin_meanpixel", "path": "p"}"#).is_err());
        assert!(raw(r#"{"name": "m", "kind": "score_file"}"#).is_err());
        assert!(raw(r#"{"name": "m", "kind": "neural"}"#).is_err());
        assert!(raw(r#"{"name": "m", "kind": "builtin_meanpixel", "display_scale": 0}"#).is_err());
    }

    #[test]
    fn meanpixel_examples() {
        assert_eq!(builtin_meanpixel(&RasterImage::filled(2, 2, 3, 0).unwrap()), 0.0);
        assert_eq!(builtin_meanpixel(&RasterImage::filled(2, 2, 3, 255).unwrap()), 1.0);
        assert_eq!(builtin_meanpixel(&RasterImage::new(2, 1, 1, vec![0, 255]).unwrap()), 0.5);
        let rgba = RasterImage::new(1, 1, 4, vec![255, 255, 255, 0]).unwrap();
        assert_eq!(builtin_meanpixel(&rgba), 1.0);
        let uniform = RasterImage::filled(4, 4, 3, 100).unwrap();
        assert!((builtin_meanpixel(&uniform) - 100.0 / 255.0).abs() < 1e-15);
    }

    fn job(i: usize, image: &Path) -> ScoreJob {
        ScoreJob {
            prompt_id: format!("p{i}"),
            prompt: format!("prompt {i}"),
            model: "A".into(),
            seed: 1,
            variant: Variant::Original,
            image: image.to_path_buf(),
        }
    }

    /// Runs a scorer closure on the far end of in-memory pipes.
    fn session_with<F>(config: GatewayConfig, scorer: F) -> ProtocolSession
    where
        F: FnOnce(BufReader<PipeReader>, PipeWriter) + Send + 'static,
    {
        let (req_r, req_w) = pipe().unwrap();
        let (resp_r, resp_w) = pipe().unwrap();
        std::thread::spawn(move || scorer(BufReader::new(req_r), resp_w));
        ProtocolSession::new("m", req_w, resp_r, config)
    }

    fn handshake_line(w: &mut PipeWriter, protocol: &str) {
        writeln!(w, r#"{{"protocol": "{protocol}", "metric": "m"}}"#).unwrap();
    }

    /// Reads `batch` requests, then answers them in reverse order.
    fn reversing_scorer(batch: usize) -> impl FnOnce(BufReader<PipeReader>, PipeWriter) + Send {
        move |mut r, mut w| {
            handshake_line(&mut w, PROTOCOL_VERSION);
            loop {
                let mut got = Vec::new();
                for _ in 0..batch {
                    let mut line = String::new();
                    if r.read_line(&mut line).unwrap() == 0 {
                        break;
                    }
                    got.push(serde_json::from_str::<ScoreRequest>(&line).unwrap());
                }
                if got.is_empty() {
                    return;
                }
                for req in got.iter().rev() {
                    let score: f64 = req.prompt.trim_start_matches("prompt ").parse().unwrap();
                    writeln!(w, r#"{{"id": "{}", "score": {}}}"#, req.id, score * 10.0).unwrap();
                }
            }
        }
    }

    #[test]
    fn reassembles_out_of_order_responses() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i.png");
        std::fs::write(&img, b"x").unwrap();
        let jobs: Vec<_> = (0..8).map(|i| job(i, &img)).collect();
        let config = GatewayConfig {
            window: 4,
            ..GatewayConfig::default()
        };
        let mut s = session_with(config, reversing_scorer(4));
        assert_eq!(s.handshake().unwrap(), PROTOCOL_VERSION);
        let out = s.score(&jobs).unwrap();
        let scores: Vec<f64> = out.records.iter().map(|r| r.score).collect();
        assert_eq!(scores, (0..8).map(|i| i as f64 * 10.0).collect::<Vec<_>>());
        assert!(out.failures.is_empty());
    }

    #[test]
    fn version_mismatch_aborts() {
        let mut s = session_with(GatewayConfig::default(), |_r, mut w| handshake_line(&mut w, "its-audit/2"));
        assert!(matches!(s.handshake(), Err(ScorerError::VersionMismatch { got, .. }) if got == "its-audit/2"));
    }

    #[test]
    fn metric_mismatch_aborts() {
        let mut s = session_with(GatewayConfig::default(), |_r, mut w| {
            writeln!(w, r#"{{"protocol": "its-audit/1", "metric": "other"}}"#).unwrap();
        });
        assert!(matches!(s.handshake(), Err(ScorerError::MetricMismatch { .. })));
    }

    #[test]
    fn silent_scorer_times_out() {
        let config = GatewayConfig {
            handshake_timeout: Duration::from_millis(50),
            item_timeout: Duration::from_millis(50),
            ..GatewayConfig::default()
        };
        let (tx, rx) = mpsc::channel::<()>();
        let mut s = session_with(config, move |_r, mut w| {
            handshake_line(&mut w, PROTOCOL_VERSION);
            let _ = rx.recv();
        });
        s.handshake().unwrap();
        let req = ScoreRequest {
            id: "7".into(),
            prompt: "p".into(),
            image: "/x".into(),
        };
        let err = s.exchange(&[req]).unwrap_err();
        assert!(matches!(&err, ScorerError::Timeout { waiting_for, .. } if waiting_for.contains('7')), "{err}");
        drop(tx);
    }

    #[test]
    fn closed_output_is_broken_pipe() {
        let mut s = session_with(GatewayConfig::default(), |_r, mut w| handshake_line(&mut w, PROTOCOL_VERSION));
        s.handshake().unwrap();
        let req = ScoreRequest {
            id: "0".into(),
            prompt: "p".into(),
            image: "/x".into(),
        };
        assert!(matches!(s.exchange(&[req]), Err(ScorerError::BrokenPipe { .. })));
    }

    #[test]
    fn per_item_errors_are_isolated_and_fail_closed_by_default() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i.png");
        std::fs::write(&img, b"x").unwrap();
        let jobs: Vec<_> = (0..3).map(|i| job(i, &img)).collect();
        let mut s = session_with(GatewayConfig::default(), |r, mut w| {
            handshake_line(&mut w, PROTOCOL_VERSION);
            for line in r.lines() {
                let req: ScoreRequest = serde_json::from_str(&line.unwrap()).unwrap();
                if req.id == "1" {
                    writeln!(w, r#"{{"id": "1", "error": "cannot read image"}}"#).unwrap();
                } else {
                    writeln!(w, r#"{{"id": "{}", "score": 0.5}}"#, req.id).unwrap();
                }
            }
        });
        s.handshake().unwrap();
        let out = s.score(&jobs).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].key.prompt_id, "p1");
        assert!(out.clone().enforce(FailurePolicy::AllowPartial).is_ok());
        assert!(matches!(
            out.enforce(FailurePolicy::FailClosed),
            Err(ScorerError::ItemFailures(f)) if f.len() == 1
        ));
    }

    #[test]
    fn unknown_response_id_is_a_protocol_error() {
        let mut s = session_with(GatewayConfig::default(), |mut r, mut w| {
            handshake_line(&mut w, PROTOCOL_VERSION);
            let mut line = String::new();
            r.read_line(&mut line).unwrap();
            writeln!(w, r#"{{"id": "nope", "score": 1}}"#).unwrap();
        });
        s.handshake().unwrap();
        let req = ScoreRequest {
            id: "0".into(),
            prompt: "p".into(),
            image: "/x".into(),
        };
        assert!(matches!(s.exchange(&[req]), Err(ScorerError::Protocol(_))));
    }

    #[test]
    fn duplicate_check_flags_nondeterminism() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i.png");
        std::fs::write(&img, b"x").unwrap();
        let jobs: Vec<_> = (0..2).map(|i| job(i, &img)).collect();
        let config = GatewayConfig {
            duplicate_check: true,
            ..GatewayConfig::default()
        };
        let mut s = session_with(config, |r, mut w| {
            handshake_line(&mut w, PROTOCOL_VERSION);
            for (n, line) in r.lines().enumerate() {
                let req: ScoreRequest = serde_json::from_str(&line.unwrap()).unwrap();
                writeln!(w, r#"{{"id": "{}", "score": {n}}}"#, req.id).unwrap();
            }
        });
        s.handshake().unwrap();
        let out = s.score(&jobs).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.warnings.len(), 1, "{:?}", out.warnings);
    }

    #[test]
    fn missing_image_rejected_before_sending() {
        let mut s = session_with(GatewayConfig::default(), |_r, mut w| handshake_line(&mut w, PROTOCOL_VERSION));
        s.handshake().unwrap();
        let err = s.score(&[job(0, Path::new("/definitely/not/here.png"))]).unwrap_err();
        assert!(matches!(err, ScorerError::MissingImage(_)));
    }

    #[test]
    fn serve_answers_every_request() {
        let input = "{\"id\": \"a\", \"prompt\": \"x\", \"image\": \"/i.png\"}\n\n{\"id\": \"b\", \"prompt\": \"y\", \"image\": \"/missing\"}\n{\"id\": \"c\"}\n";
        let mut out = Vec::new();
        let served = serve(input.as_bytes(), &mut out, "m", |_, img| {
            if img == Path::new("/missing") {
                Err("no such file".into())
            } else {
                Ok(0.25)
            }
        })
        .unwrap();
        assert_eq!(served, 3);
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines[0], r#"{"protocol":"its-audit/1","metric":"m"}"#);
        assert_eq!(lines[1], r#"{"id":"a","score":0.25}"#);
        assert_eq!(lines[2], r#"{"id":"b","error":"no such file"}"#);
        assert!(lines[3].starts_with(r#"{"id":"c","error":"malformed request"#));
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let records = vec![
            ScoreRecord {
                metric: "m".into(),
                model: "SD-3".into(),
                seed: 42,
                prompt_id: "p1".into(),
                variant: Variant::Original,
                score: 0.1 + 0.2,
            },
            ScoreRecord {
                metric: "m".into(),
                model: "SD-3".into(),
                seed: 42,
                prompt_id: "p1".into(),
                variant: Variant::Perturbed,
                score: -3.0,
            },
        ];
        std::fs::write(&path, score_file_bytes(&records)).unwrap();
        assert_eq!(read_score_file(&path, "m").unwrap(), records);
        assert_eq!(read_score_file(&path, "m").unwrap(), read_score_file(&path, "m").unwrap());

        let mut scorer = ScoreFileScorer::load("m", &path).unwrap();
        let mut j = job(1, Path::new("/unused"));
        j.model = "SD-3".into();
        j.seed = 42;
        let out = scorer.score_batch(&[j.clone()]).unwrap();
        assert_eq!(out.records[0].score, 0.1 + 0.2);
        j.seed = 7;
        assert_eq!(scorer.score_batch(&[j]).unwrap().failures.len(), 1);
    }

    #[test]
    fn score_file_rejects_bad_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, "prompt,score\np1,1\n").unwrap();
        assert!(read_score_file(&path, "m").is_err());
        std::fs::write(&path, "prompt_id,model,seed,variant,score\np1,A,1,original,NaN\n").unwrap();
        assert!(read_score_file(&path, "m").is_err());
        std::fs::write(
            &path,
            "prompt_id,model,seed,variant,score\np1,A,1,original,1\np1,A,1,original,2\n",
        )
        .unwrap();
        assert!(read_score_file(&path, "m").unwrap_err().to_string().contains("duplicate"));
    }
}
