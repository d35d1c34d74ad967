//! Command-line front end. Each pipeline stage is its own subcommand so a
//! partial rerun only repeats the stage that changed.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 scorer, 4 audit or report.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::conformance::run_conformance;
use crate::fsutil::write_atomic;
use crate::model::{load_manifest, AuditManifest, CellKey, ScoreRecord, ScoreSet, Variant};
use crate::perturb::{corpus_tasks, decode_image, perturb_tasks, AlphaMode, PerturbError, PerturbOptions};
use crate::report::{
    grids_to_csv, grids_to_json, render_gap_table, render_matrices, render_rank_table, write_outputs, DisplayScales,
    ReportError,
};
use crate::robustness::{gap_reports, gap_summary, seed_stability, AuditError, AuditScope, GapReport};
use crate::scorer::{
    builtin_meanpixel, open_scorer, read_score_file, score_file_bytes, serve, FailurePolicy, GatewayConfig,
    ScoreJob, ScorerError, ScorerKind, DEFAULT_ITEM_TIMEOUT, DEFAULT_WINDOW,
};
use crate::significance::{pairwise_matrices, verdicts, DEFAULT_ALPHA};

#[derive(Debug, Parser)]
#[command(name = "its-audit", version, about = "Robustness and significance audits for image-text alignment metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the +1 perturbed twin of every original image.
    Perturb(PerturbArgs),
    /// Score images with each metric and write one score file per metric.
    Score(ScoreArgs),
    /// Run one audit over existing score files.
    Audit {
        #[command(subcommand)]
        audit: AuditCommand,
    },
    /// Run every audit and write all reports.
    Report(ReportArgs),
    /// Serve the built-in mean-pixel metric over the scorer protocol on stdin/stdout.
    ServeBuiltin {
        #[arg(long)]
        metric: String,
    },
    /// Check that an external scorer follows the scorer protocol.
    CheckScorer {
        #[arg(long)]
        metric: String,
        /// Per-item timeout in seconds.
        #[arg(long, default_value_t = 30)]
        timeout: u64,
        /// Scorer command line, after `--`.
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Ranking stability across seeds and/or perturbation gaps.
    Robustness(RobustnessArgs),
    /// Pairwise paired t-tests and dominance ratios.
    Significance(SignificanceArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Selection {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Metric names, comma separated (default: all in the manifest).
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    /// Model names, comma separated (default: all in the manifest).
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    /// Seeds, comma separated (default: all in the manifest).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub seeds: Vec<i64>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Perturb the alpha channel of RGBA images as well.
    #[arg(long)]
    pub include_alpha: bool,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub seeds: Vec<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantChoice {
    Original,
    Perturbed,
    Both,
}

impl VariantChoice {
    fn variants(self) -> Vec<Variant> {
        match self {
            VariantChoice::Original => vec![Variant::Original],
            VariantChoice::Perturbed => vec![Variant::Perturbed],
            VariantChoice::Both => Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub selection: Selection,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantChoice::Original)]
    pub variants: VariantChoice,
    /// Worker threads for in-process scorers (0: one per core).
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Record unscored cells in `<metric>.missing.csv` instead of failing.
    #[arg(long)]
    pub allow_partial: bool,
    /// Keep existing rows and score only the cells not yet present.
    #[arg(long)]
    pub resume: bool,
    /// Maximum requests in flight per scorer.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Per-item timeout in seconds.
    #[arg(long, default_value_t = DEFAULT_ITEM_TIMEOUT.as_secs())]
    pub timeout: u64,
    /// Re-send 1% of requests and warn when a scorer answers differently.
    #[arg(long)]
    pub check_determinism: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RobustnessKind {
    Seed,
    Perturb,
    Both,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub selection: Selection,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = RobustnessKind::Both)]
    pub kind: RobustnessKind,
}

#[derive(Debug, Args)]
pub struct SignificanceArgs {
    #[command(flatten)]
    pub selection: Selection,
    #[arg(long)]
    pub out: PathBuf,
    /// Significance level; p must be strictly below it.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub selection: Selection,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
}

/// A failed command with its exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SCORER: i32 = 3;
pub const EXIT_AUDIT: i32 = 4;

fn validation(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_VALIDATION,
        message: message.into(),
    }
}

fn scorer_failure(e: ScorerError) -> CliError {
    let code = match e {
        ScorerError::MissingImage(_) => EXIT_VALIDATION,
        _ => EXIT_SCORER,
    };
    CliError {
        code,
        message: e.to_string(),
    }
}

fn audit_failure(message: impl fmt::Display) -> CliError {
    CliError {
        code: EXIT_AUDIT,
        message: message.to_string(),
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> Self {
        audit_failure(e)
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        audit_failure(e)
    }
}

/// Parses arguments and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Perturb(args) => cmd_perturb(&args),
        Command::Score(args) => cmd_score(&args),
        Command::Audit {
            audit: AuditCommand::Robustness(args),
        } => {
            let ctx = Context::load(&args.selection, &args.out)?;
            ctx.record_config("audit robustness", json!({ "kind": args.kind }))?;
            cmd_robustness(&ctx, args.kind)
        }
        Command::Audit {
            audit: AuditCommand::Significance(args),
        } => {
            let ctx = Context::load(&args.selection, &args.out)?;
            check_alpha(args.alpha)?;
            ctx.record_config("audit significance", json!({ "alpha": args.alpha }))?;
            cmd_significance(&ctx, args.alpha)
        }
        Command::Report(args) => {
            let ctx = Context::load(&args.selection, &args.out)?;
            check_alpha(args.alpha)?;
            ctx.record_config("report", json!({ "alpha": args.alpha }))?;
            cmd_robustness(&ctx, RobustnessKind::Both)?;
            cmd_significance(&ctx, args.alpha)
        }
        Command::ServeBuiltin { metric } => {
            let stdin = std::io::stdin();
            serve(stdin.lock(), std::io::stdout().lock(), &metric, |_, path| {
                decode_image(path).map(|img| builtin_meanpixel(&img)).map_err(|e| e.to_string())
            })
            .map(|_| ())
            .map_err(|e| CliError {
                code: EXIT_SCORER,
                message: format!("scorer I/O failed: {e}"),
            })
        }
        Command::CheckScorer {
            metric,
            timeout,
            command,
        } => cmd_check_scorer(&metric, timeout, &command),
    }
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(validation(format!("--alpha must lie in (0, 1), got {alpha}")))
    }
}

fn manifest(path: &Path) -> Result<AuditManifest, CliError> {
    load_manifest(path).map_err(|e| validation(e.to_string()))
}

fn pick_models(manifest: &AuditManifest, requested: &[String]) -> Result<Vec<String>, CliError> {
    if requested.is_empty() {
        return Ok(manifest.model_names());
    }
    let known = manifest.model_names();
    match requested.iter().find(|m| !known.contains(m)) {
        Some(m) => Err(validation(format!("model {m:?} is not in the manifest"))),
        None => Ok(requested.to_vec()),
    }
}

fn pick_seeds(manifest: &AuditManifest, requested: &[i64]) -> Result<Vec<i64>, CliError> {
    if requested.is_empty() {
        return Ok(manifest.seeds.clone());
    }
    match requested.iter().find(|s| !manifest.seeds.contains(s)) {
        Some(s) => Err(validation(format!("seed {s} is not in the manifest"))),
        None => Ok(requested.to_vec()),
    }
}

fn pick_metrics(manifest: &AuditManifest, requested: &[String]) -> Result<Vec<String>, CliError> {
    if requested.is_empty() {
        return Ok(manifest.metrics.iter().map(|b| b.metric_name.clone()).collect());
    }
    match requested.iter().find(|m| manifest.metric(m).is_none()) {
        Some(m) => Err(validation(format!("metric {m:?} is not in the manifest"))),
        None => Ok(requested.to_vec()),
    }
}

fn cmd_perturb(args: &PerturbArgs) -> Result<(), CliError> {
    let manifest = manifest(&args.manifest)?;
    let models = pick_models(&manifest, &args.models)?;
    let seeds = pick_seeds(&manifest, &args.seeds)?;
    let opts = PerturbOptions {
        alpha: if args.include_alpha {
            AlphaMode::Perturb
        } else {
            AlphaMode::Preserve
        },
        jobs: args.jobs,
    };
    let tasks = corpus_tasks(&manifest, &models, &seeds);
    let written = perturb_tasks(&tasks, &opts).map_err(|e| {
        let code = match e {
            PerturbError::MissingInput(_) | PerturbError::Decode { .. } | PerturbError::Unsupported { .. } => {
                EXIT_VALIDATION
            }
            _ => EXIT_AUDIT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    })?;
    let alpha = match opts.alpha {
        AlphaMode::Preserve => "alpha preserved",
        AlphaMode::Perturb => "alpha perturbed",
    };
    println!("perturbed {written} images ({alpha})");
    Ok(())
}

/// Manifest, selection and output directory shared by the audit commands.
struct Context {
    manifest_arg: PathBuf,
    manifest: AuditManifest,
    metrics: Vec<String>,
    models: Vec<String>,
    seeds: Vec<i64>,
    explicit_models: bool,
    explicit_seeds: bool,
    out: PathBuf,
}

impl Context {
    fn load(selection: &Selection, out: &Path) -> Result<Self, CliError> {
        let manifest = manifest(&selection.manifest)?;
        Ok(Self {
            metrics: pick_metrics(&manifest, &selection.metrics)?,
            models: pick_models(&manifest, &selection.models)?,
            seeds: pick_seeds(&manifest, &selection.seeds)?,
            explicit_models: !selection.models.is_empty(),
            explicit_seeds: !selection.seeds.is_empty(),
            manifest_arg: selection.manifest.clone(),
            manifest,
            out: out.to_path_buf(),
        })
    }

    fn scores_dir(&self) -> PathBuf {
        self.out.join("scores")
    }

    fn score_path(&self, metric: &str) -> PathBuf {
        self.scores_dir().join(format!("{metric}.csv"))
    }

    fn scales(&self) -> DisplayScales {
        self.manifest
            .metrics
            .iter()
            .fold(DisplayScales::new(), |s, b| s.with(b.metric_name.clone(), b.display_scale))
    }

    fn scope(&self, models: Vec<String>, seeds: Vec<i64>) -> AuditScope {
        AuditScope {
            prompt_ids: self.manifest.prompt_ids(),
            models,
            seeds,
        }
    }

    /// Scores for one metric: the score file written by `score`, or the
    /// manifest's own score file for score_file bindings.
    fn load_scores(&self, metric: &str) -> Result<ScoreSet, CliError> {
        let written = self.score_path(metric);
        let path = if written.is_file() {
            written
        } else {
            match self.manifest.metric(metric).map(|b| &b.kind) {
                Some(ScorerKind::ScoreFile { path }) => path.clone(),
                _ => {
                    return Err(audit_failure(format!(
                        "no scores for metric {metric}: {} does not exist (run `its-audit score` first)",
                        written.display()
                    )))
                }
            }
        };
        let records = read_score_file(&path, metric).map_err(audit_failure)?;
        ScoreSet::from_records(&records).map_err(audit_failure)
    }

    /// Merges this command's effective settings into `run_config.json`.
    fn record_config(&self, command: &str, options: Value) -> Result<(), CliError> {
        let entry = json!({
            "manifest": self.manifest_arg,
            "metrics": self.metrics.iter().map(|m| {
                let b = self.manifest.metric(m).expect("selected metric exists");
                json!({ "name": m, "kind": b.kind.name(), "display_scale": b.display_scale })
            }).collect::<Vec<_>>(),
            "models": self.models.iter().map(|m| {
                let p = self.manifest.models.iter().find(|p| &p.name == m).expect("selected model exists");
                json!({ "name": m, "steps": p.denoising_steps, "guidance": p.guidance_scale })
            }).collect::<Vec<_>>(),
            "seeds": self.seeds,
            "prompts": self.manifest.prompts.len(),
            "options": options,
        });
        write_config(&self.out, command, entry)
    }
}

fn write_config(out: &Path, command: &str, entry: Value) -> Result<(), CliError> {
    let path = out.join("run_config.json");
    let mut config: serde_json::Map<String, Value> = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => serde_json::Map::new(),
    };
    config.insert(command.to_string(), entry);
    let mut text = serde_json::to_string_pretty(&config).expect("config serializes");
    text.push('\n');
    write_atomic(&path, text.as_bytes()).map_err(|e| audit_failure(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("results serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(|e| audit_failure(format!("cannot write {}: {e}", path.display())))
}

fn cmd_score(args: &ScoreArgs) -> Result<(), CliError> {
    let ctx = Context::load(&args.selection, &args.out)?;
    if args.window == 0 {
        return Err(validation("--window must be at least 1"));
    }
    ctx.record_config(
        "score",
        json!({
            "variants": args.variants,
            "jobs": args.jobs,
            "allow_partial": args.allow_partial,
            "resume": args.resume,
            "window": args.window,
            "timeout_secs": args.timeout,
            "check_determinism": args.check_determinism,
        }),
    )?;
    let config = GatewayConfig {
        item_timeout: Duration::from_secs(args.timeout),
        window: args.window,
        duplicate_check: args.check_determinism,
        jobs: args.jobs,
        ..GatewayConfig::default()
    };
    let policy = if args.allow_partial {
        FailurePolicy::AllowPartial
    } else {
        FailurePolicy::FailClosed
    };
    let variants = args.variants.variants();
    for metric in &ctx.metrics {
        score_metric(&ctx, metric, &variants, &config, policy, args.resume)?;
    }
    Ok(())
}

fn score_metric(
    ctx: &Context,
    metric: &str,
    variants: &[Variant],
    config: &GatewayConfig,
    policy: FailurePolicy,
    resume: bool,
) -> Result<(), CliError> {
    let binding = ctx.manifest.metric(metric).expect("selected metric exists");
    let path = ctx.score_path(metric);
    let existing = if resume && path.is_file() {
        read_score_file(&path, metric).map_err(scorer_failure)?
    } else {
        Vec::new()
    };
    let have: HashSet<CellKey> = existing.iter().map(ScoreRecord::key).collect();

    let mut jobs = Vec::new();
    for model in &ctx.models {
        for &seed in &ctx.seeds {
            for &variant in variants {
                for prompt in &ctx.manifest.prompts {
                    let job = ScoreJob {
                        prompt_id: prompt.id.clone(),
                        prompt: prompt.text.clone(),
                        model: model.clone(),
                        seed,
                        variant,
                        image: ctx.manifest.image_ref(model, seed, &prompt.id, variant).location,
                    };
                    if !have.contains(&job.key(metric)) {
                        jobs.push(job);
                    }
                }
            }
        }
    }
    if !matches!(binding.kind, ScorerKind::ScoreFile { .. }) {
        if let Some(job) = jobs.iter().find(|j| !j.image.is_file()) {
            let hint = match job.variant {
                Variant::Perturbed => " (run `its-audit perturb` first)",
                Variant::Original => "",
            };
            return Err(validation(format!(
                "missing image for {}: {}{hint}",
                job.key(metric),
                job.image.display()
            )));
        }
    }

    let outcome = if jobs.is_empty() {
        Default::default()
    } else {
        let mut scorer = open_scorer(binding, config).map_err(scorer_failure)?;
        scorer.score_batch(&jobs).map_err(scorer_failure)?
    };
    for w in &outcome.warnings {
        eprintln!("warning: {metric}: {w}");
    }
    let outcome = outcome.enforce(policy).map_err(scorer_failure)?;

    let scored = outcome.records.len();
    let mut records = existing;
    records.extend(outcome.records);
    sort_canonical(ctx, &mut records);
    write_atomic(&path, &score_file_bytes(&records))
        .map_err(|e| audit_failure(format!("cannot write {}: {e}", path.display())))?;

    let missing_path = ctx.scores_dir().join(format!("{metric}.missing.csv"));
    if outcome.failures.is_empty() {
        if missing_path.is_file() {
            std::fs::remove_file(&missing_path)
                .map_err(|e| audit_failure(format!("cannot remove {}: {e}", missing_path.display())))?;
        }
    } else {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["prompt_id", "model", "seed", "variant", "error"])
            .expect("in-memory write");
        for f in &outcome.failures {
            w.write_record([
                f.key.prompt_id.as_str(),
                f.key.model.as_str(),
                &f.key.seed.to_string(),
                f.key.variant.as_str(),
                f.message.as_str(),
            ])
            .expect("in-memory write");
        }
        let bytes = w.into_inner().expect("in-memory flush");
        write_atomic(&missing_path, &bytes)
            .map_err(|e| audit_failure(format!("cannot write {}: {e}", missing_path.display())))?;
        eprintln!(
            "warning: {metric}: {} cell(s) unscored, listed in {}",
            outcome.failures.len(),
            missing_path.display()
        );
    }
    println!("{metric}: scored {scored} cell(s), {} row(s) in {}", records.len(), path.display());
    Ok(())
}

/// Manifest model order, then seed, variant and prompt order. Rows outside
/// the manifest keep their relative order at the end.
fn sort_canonical(ctx: &Context, records: &mut [ScoreRecord]) {
    let model_pos: HashMap<&str, usize> = ctx
        .manifest
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| (m.name.as_str(), i))
        .collect();
    let seed_pos: HashMap<i64, usize> = ctx.manifest.seeds.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let prompt_pos: HashMap<&str, usize> = ctx
        .manifest
        .prompts
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect();
    let key = |r: &ScoreRecord| {
        (
            model_pos.get(r.model.as_str()).copied().unwrap_or(usize::MAX),
            seed_pos.get(&r.seed).copied().unwrap_or(usize::MAX),
            r.variant,
            prompt_pos.get(r.prompt_id.as_str()).copied().unwrap_or(usize::MAX),
        )
    };
    records.sort_by_key(|r| key(r));
}

fn flip_summary(report: &crate::robustness::SeedStabilityReport) -> String {
    if report.consistent {
        return format!("{}: CONSISTENT", report.metric);
    }
    let mut parts = Vec::new();
    for flip in &report.flips {
        for (a, b) in &flip.transitions {
            parts.push(format!("{}/{} @ seeds {a}→{b}", flip.models.0, flip.models.1));
        }
    }
    format!("{}: INCONSISTENT (flip: {})", report.metric, parts.join(", "))
}

fn cmd_robustness(ctx: &Context, kind: RobustnessKind) -> Result<(), CliError> {
    let scales = ctx.scales();
    let mut loaded = BTreeMap::new();
    for metric in &ctx.metrics {
        loaded.insert(metric.clone(), ctx.load_scores(metric)?);
    }

    if matches!(kind, RobustnessKind::Seed | RobustnessKind::Both) {
        let scope = ctx.scope(ctx.models.clone(), ctx.seeds.clone());
        let mut reports = Vec::new();
        for metric in &ctx.metrics {
            reports.push(seed_stability(metric, &loaded[metric], &scope)?);
        }
        let doc = render_rank_table(&reports, &scales)?;
        write_outputs(
            &ctx.out,
            "rank_table",
            &[("csv", doc.to_csv()), ("json", doc.to_json()), ("txt", doc.to_text())],
        )?;
        write_json(&ctx.out.join("seed_stability.json"), &reports)?;
        for r in &reports {
            println!("{}", flip_summary(r));
        }
    }

    if matches!(kind, RobustnessKind::Perturb | RobustnessKind::Both) {
        let models = if ctx.explicit_models {
            ctx.models.clone()
        } else {
            ctx.models.iter().take(1).cloned().collect()
        };
        let seeds = if ctx.explicit_seeds {
            ctx.seeds.clone()
        } else {
            ctx.seeds.iter().take(1).copied().collect()
        };
        let scope = ctx.scope(models, seeds);
        let mut reports: Vec<GapReport> = Vec::new();
        for metric in &ctx.metrics {
            reports.extend(gap_reports(metric, &loaded[metric], &scope)?);
        }
        let rows = gap_summary(&reports)?;
        let doc = render_gap_table(&rows, &scales)?;
        write_outputs(
            &ctx.out,
            "gap_table",
            &[("csv", doc.to_csv()), ("json", doc.to_json()), ("txt", doc.to_text())],
        )?;
        write_json(&ctx.out.join("gap_reports.json"), &reports)?;
        for row in &doc.rows {
            let worst = reports
                .iter()
                .filter(|r| r.metric == row.metric)
                .fold(None::<&GapReport>, |best, r| match best {
                    Some(b) if b.max_gap >= r.max_gap => Some(b),
                    _ => Some(r),
                });
            let at = worst
                .map(|r| format!(" at {} / seed {} / prompt {}", r.model, r.seed, r.argmax_prompt))
                .unwrap_or_default();
            println!(
                "{}: Avg. ΔJ {}, Max. ΔJ {}{at}",
                row.metric, row.average_display, row.max_display
            );
        }
    }
    Ok(())
}

fn cmd_significance(ctx: &Context, alpha: f64) -> Result<(), CliError> {
    let scope = ctx.scope(ctx.models.clone(), ctx.seeds.clone());
    let mut p_grids = Vec::new();
    let mut d_grids = Vec::new();
    let mut all_verdicts = Vec::new();
    let mut lines = Vec::new();
    for metric in &ctx.metrics {
        let scores = ctx.load_scores(metric)?;
        for &seed in &ctx.seeds {
            let (p, d) = pairwise_matrices(metric, seed, &scores, &scope)?;
            let (pg, dg) = render_matrices(&p, &d)?;
            let vs = verdicts(&p, &d, alpha)?;
            let significant: Vec<_> = vs.iter().filter(|v| v.significant).collect();
            lines.push(format!(
                "{metric} @ seed {seed}: {}/{} pairs significant at α={alpha}",
                significant.len(),
                vs.len()
            ));
            for v in significant {
                let (winner, loser) = match v.leader() {
                    Some(l) if l == v.models.0 => (&v.models.0, &v.models.1),
                    _ => (&v.models.1, &v.models.0),
                };
                let dom = v.leader_dominance().unwrap_or(0.0);
                let caveat = if dom <= 0.5 { " (dominance ≤ 0.5)" } else { "" };
                lines.push(format!(
                    "  {winner} > {loser}: p={:.3}, dominance {dom:.2}{caveat}",
                    v.p_value
                ));
            }
            p_grids.push(pg);
            d_grids.push(dg);
            all_verdicts.extend(vs);
        }
    }
    write_outputs(
        &ctx.out,
        "pvalue_matrix",
        &[("csv", grids_to_csv(&p_grids)), ("json", grids_to_json(&p_grids))],
    )?;
    write_outputs(
        &ctx.out,
        "dominance_matrix",
        &[("csv", grids_to_csv(&d_grids)), ("json", grids_to_json(&d_grids))],
    )?;
    write_json(&ctx.out.join("significance_verdicts.json"), &all_verdicts)?;
    for line in lines {
        println!("{line}");
    }
    Ok(())
}

fn cmd_check_scorer(metric: &str, timeout: u64, command: &[String]) -> Result<(), CliError> {
    let config = GatewayConfig {
        item_timeout: Duration::from_secs(timeout),
        ..GatewayConfig::default()
    };
    let workdir = std::env::temp_dir().join(format!("its-audit-conformance-{}", std::process::id()));
    let report = run_conformance(metric, command, &config, &workdir);
    let _ = std::fs::remove_dir_all(&workdir);
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_SCORER,
            message: format!("scorer for {metric} failed conformance"),
        })
    }
}
