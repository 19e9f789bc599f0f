//! Run orchestration: dataset → split → elicitation → threshold calibration
//! → grading → classification → aggregated reports, with an append-only
//! ledger that makes interrupted runs resumable.

pub mod config;
pub mod ledger;

pub use config::{
    EndpointConfig, EndpointRole, JudgeConfig, MethodEntry, RunConfig, UnparsedPolicy,
};
pub use ledger::{read_ledger, FlagSeverity, Ledger, LedgerLine, ResumeState};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::StreamExt;
use sha2::Digest as _;
use tokio::sync::Semaphore;

use crate::calibrate::{apply_threshold, fit_threshold, CalibrationError, Direction, ThresholdFit};
use crate::data::{assign_splits, load_dataset, MethodSpec, QueryRecord, Split, Variant};
use crate::elicit::{ElicitError, Elicitor, ModalInput, SignalKind};
use crate::gateway::Gateway;
use crate::judging::{Judge, JudgeStrategy};
use crate::metrics::{compute_metrics, EvalOutcome};
use crate::perturb::{composed_png, ImageCache};
use crate::report::{
    emit_report, render_report, Modality, ReportEntry, ReportFormat, ReportKey,
};

use config::validate_run;

/// A (method, modality) group aborts when more than this fraction of its
/// records hard-fail.
const ABORT_HARD_FRACTION: f64 = 0.5;
/// A report row warns when more than this fraction of its records carry any
/// flag.
const WARN_FLAG_FRACTION: f64 = 0.05;
/// Unconfidence rate at which the blanket-denial footnote is attached.
const DENIAL_UNC_R: f64 = 0.995;

/// Runner failures, partitioned by CLI exit code.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    /// Bad configuration, dataset, or CLI usage (exit code 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// Too many records hard-failed (exit code 3).
    #[error("run aborted: {0}")]
    Aborted(String),
    /// Everything else (exit code 1).
    #[error("{0}")]
    Other(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Aborted(_) => 3,
            RunError::Other(_) => 1,
        }
    }

    pub(crate) fn ledger_io(path: &Path, err: std::io::Error) -> Self {
        RunError::Other(format!("ledger I/O at {}: {err}", path.display()))
    }
}

/// What a completed run hands back to the caller.
#[derive(Debug)]
pub struct RunSummary {
    pub reports: BTreeMap<ReportKey, ReportEntry>,
    pub warnings: Vec<String>,
    /// Backend executions across all endpoints (cache hits excluded).
    pub backend_calls: u64,
    /// Files written under the output directory.
    pub report_paths: Vec<PathBuf>,
    /// Fitted thresholds keyed `method@modality`.
    pub fits: BTreeMap<String, ThresholdFit>,
}

/// All gateways of a run, sharing one concurrency limiter and cache root.
struct GatewaySet {
    subject: Arc<Gateway>,
    rephraser: Option<Arc<Gateway>>,
    judge: Option<Arc<Gateway>>,
    others: Vec<Arc<Gateway>>,
}

impl GatewaySet {
    fn build(config: &RunConfig) -> Result<Self, RunError> {
        let limiter = Arc::new(Semaphore::new(config.concurrency));
        let mut subject = None;
        let mut rephraser = None;
        let mut judge = None;
        let mut others = Vec::new();
        for endpoint in &config.endpoints {
            let gateway = Gateway::new(endpoint.to_spec(), &config.cache_dir, limiter.clone())
                .map_err(|e| RunError::Config(format!("endpoint {:?}: {e}", endpoint.name)))?;
            let gateway = Arc::new(gateway);
            match endpoint.role {
                EndpointRole::Subject => subject = Some(gateway),
                EndpointRole::Rephraser => rephraser = Some(gateway),
                EndpointRole::Judge => judge = Some(gateway),
                EndpointRole::Other => others.push(gateway),
            }
        }
        Ok(GatewaySet {
            subject: subject.expect("config validation guarantees one subject"),
            rephraser,
            judge,
            others,
        })
    }

    fn backend_calls(&self) -> u64 {
        let mut total = self.subject.backend_calls();
        if let Some(g) = &self.rephraser {
            total += g.backend_calls();
        }
        if let Some(g) = &self.judge {
            total += g.backend_calls();
        }
        for g in &self.others {
            total += g.backend_calls();
        }
        total
    }
}

fn build_judge(config: &RunConfig, gateways: &GatewaySet) -> Result<Judge, RunError> {
    match config.judge.strategy {
        JudgeStrategy::Exact => Ok(Judge::exact()),
        JudgeStrategy::Normalized => Ok(Judge::normalized()),
        JudgeStrategy::Llm => {
            let gateway = gateways.judge.clone().ok_or_else(|| {
                RunError::Config(
                    "judge.strategy = \"llm\" requires an endpoint with role \"judge\"".into(),
                )
            })?;
            Ok(Judge::llm(gateway, config.seed as i64))
        }
    }
}

/// Builds the per-modality model input for one record. `vqa` sends question
/// plus image, `qa` sends the parallel text question only, `image_only`
/// renders the question into the image and sends no text question at all.
fn modal_input(
    record: &QueryRecord,
    modality: Modality,
    image_cache: &ImageCache,
) -> Result<ModalInput, String> {
    match modality {
        Modality::Qa => {
            let question = record.qa_question.as_deref().unwrap_or(&record.question);
            Ok(ModalInput::text_only(question))
        }
        Modality::Vqa => {
            let png = read_image(record)?;
            Ok(ModalInput {
                question: record.question.clone(),
                judge_question: record.question.clone(),
                image_png: Some(png),
            })
        }
        Modality::ImageOnly => {
            let png = read_image(record)?;
            let source_hash = hex::encode(sha2::Sha256::digest(&png));
            let composed = image_cache
                .get_or_insert_with(
                    &source_hash,
                    &ImageCache::compose_tag(&record.question),
                    || composed_png(&png, &record.question),
                )
                .map_err(|e| format!("composing question onto image: {e}"))?;
            Ok(ModalInput {
                question: String::new(),
                judge_question: record.question.clone(),
                image_png: Some(composed),
            })
        }
    }
}

fn read_image(record: &QueryRecord) -> Result<Vec<u8>, String> {
    let path = record
        .image
        .as_ref()
        .ok_or_else(|| format!("record {:?} has no image", record.id))?;
    std::fs::read(path).map_err(|e| format!("reading image {}: {e}", path.display()))
}

/// Everything shared by the records of one (method, modality) group.
struct GroupContext<'a> {
    elicitor: Elicitor<'a>,
    judge: &'a Judge,
    config: &'a RunConfig,
    method: &'a MethodSpec,
    modality: Modality,
    fit: Option<ThresholdFit>,
    model: &'a str,
    image_cache: &'a ImageCache,
}

impl<'a> GroupContext<'a> {
    fn new(
        config: &'a RunConfig,
        gateways: &'a GatewaySet,
        judge: &'a Judge,
        image_cache: &'a ImageCache,
        method: &'a MethodSpec,
        modality: Modality,
    ) -> Self {
        GroupContext {
            elicitor: Elicitor {
                subject: gateways.subject.as_ref(),
                judge,
                rephraser: gateways.rephraser.as_deref(),
                others: &gateways.others,
                image_cache: Some(image_cache),
                run_seed: config.seed,
                sigma_offset: config.sigma_offset,
                max_tokens: config.answer_max_tokens,
            },
            judge,
            config,
            method,
            modality,
            fit: None,
            model: &gateways.subject.endpoint().model_id,
            image_cache,
        }
    }

    fn flag(&self, record: &QueryRecord, severity: FlagSeverity, reason: String) -> LedgerLine {
        LedgerLine::Flagged {
            model: self.model.to_string(),
            dataset: record.dataset.clone(),
            method: self.method.name().to_string(),
            modality: self.modality,
            record_id: record.id.clone(),
            severity,
            reason,
        }
    }
}

/// Ledger lines (in append order) plus bookkeeping for one processed record.
#[derive(Default)]
struct RecordOutput {
    lines: Vec<LedgerLine>,
    hard: bool,
    soft: bool,
}

impl RecordOutput {
    fn hard_flag(mut self, ctx: &GroupContext<'_>, record: &QueryRecord, reason: String) -> Self {
        log::warn!(
            "method {} / record {}: {reason}",
            ctx.method.name(),
            record.id
        );
        self.lines.push(ctx.flag(record, FlagSeverity::Hard, reason));
        self.hard = true;
        self
    }
}

/// Elicits, binarizes, grades, and classifies one record.
async fn process_record(ctx: &GroupContext<'_>, record: &QueryRecord) -> RecordOutput {
    let mut out = RecordOutput::default();
    let input = match modal_input(record, ctx.modality, ctx.image_cache) {
        Ok(input) => input,
        Err(reason) => {
            return out.hard_flag(ctx, record, format!("input preparation failed: {reason}"))
        }
    };
    let (answer_text, confident) = match ctx.elicitor.elicit(&record.id, &input, ctx.method).await
    {
        Ok(signal) => {
            out.lines.push(LedgerLine::Signal {
                method: ctx.method.name().to_string(),
                modality: ctx.modality,
                record_id: record.id.clone(),
                answer_text: signal.answer_text.clone(),
                signal_kind: signal.kind,
                binary_value: signal.binary_value,
                score_value: signal.score_value,
            });
            if signal.judge_dropped > 0 {
                out.soft = true;
                out.lines.push(ctx.flag(
                    record,
                    FlagSeverity::Soft,
                    format!(
                        "{} consistency samples dropped: equivalence judgement failed",
                        signal.judge_dropped
                    ),
                ));
            }
            let confident = match signal.kind {
                SignalKind::Binary => signal.binary_value.unwrap_or(false),
                SignalKind::Score => {
                    let Some(fit) = &ctx.fit else {
                        return out.hard_flag(
                            ctx,
                            record,
                            "score signal produced without a fitted threshold".into(),
                        );
                    };
                    apply_threshold(fit, signal.score_value.unwrap_or(f64::NAN))
                }
            };
            (signal.answer_text, confident)
        }
        Err(ElicitError::UnparsedConfidence { response })
            if ctx.config.unparsed_confidence == UnparsedPolicy::Unconfident =>
        {
            out.soft = true;
            out.lines.push(ctx.flag(
                record,
                FlagSeverity::Soft,
                "no confidence keyword in reply; treated as unconfident".into(),
            ));
            (response.trim().to_string(), false)
        }
        Err(e) => return out.hard_flag(ctx, record, format!("elicitation failed: {e}")),
    };
    let correct = match ctx
        .judge
        .grade(&input.judge_question, &answer_text, &record.gold)
        .await
    {
        Ok(correct) => correct,
        Err(e) => return out.hard_flag(ctx, record, format!("answer grading failed: {e}")),
    };
    let outcome = EvalOutcome::new(record.id.clone(), answer_text, correct, confident);
    out.lines.push(LedgerLine::Outcome {
        model: ctx.model.to_string(),
        dataset: record.dataset.clone(),
        method: ctx.method.name().to_string(),
        modality: ctx.modality,
        record_id: outcome.record_id.clone(),
        answer_text: outcome.answer_text.clone(),
        correct: outcome.correct,
        confident: outcome.confident,
        cell: outcome.cell,
    });
    out
}

fn fit_direction(method: &MethodSpec) -> Direction {
    if method.variant == Variant::PplThr {
        // Low perplexity means high confidence.
        Direction::ConfidentIfScoreAtMost
    } else {
        Direction::ConfidentIfScoreAtLeast
    }
}

/// One held-out record's contribution to threshold fitting: its (score,
/// correct) pair, or why it had to be excluded.
type HeldoutOutcome = Result<(f64, bool), String>;

/// Elicits scores on the held-out split and fits the alignment-maximizing
/// threshold. Failed records are excluded; the count is returned.
async fn fit_on_heldout(
    ctx: &GroupContext<'_>,
    heldout: &[&QueryRecord],
) -> Result<(ThresholdFit, usize), RunError> {
    if heldout.is_empty() {
        return Err(RunError::Config(format!(
            "method {:?} needs a non-empty held-out split for threshold fitting",
            ctx.method.name()
        )));
    }
    let tasks = heldout.iter().map(|record| async move {
        let result: Result<(f64, bool), String> = async {
            let input = modal_input(record, ctx.modality, ctx.image_cache)?;
            let signal = ctx
                .elicitor
                .elicit(&record.id, &input, ctx.method)
                .await
                .map_err(|e| e.to_string())?;
            let score = signal
                .score_value
                .ok_or_else(|| "no score in signal".to_string())?;
            let correct = ctx
                .judge
                .grade(&input.judge_question, &signal.answer_text, &record.gold)
                .await
                .map_err(|e| e.to_string())?;
            Ok((score, correct))
        }
        .await;
        (record.id.clone(), result)
    });
    let results: Vec<(String, HeldoutOutcome)> =
        futures::stream::iter(tasks).buffered(ctx.config.concurrency).collect().await;

    let mut pairs = Vec::with_capacity(results.len());
    let mut excluded = 0usize;
    for (record_id, result) in results {
        match result {
            Ok(pair) => pairs.push(pair),
            Err(reason) => {
                excluded += 1;
                log::warn!(
                    "method {} / held-out record {record_id} excluded from fit: {reason}",
                    ctx.method.name()
                );
            }
        }
    }
    let fit = fit_threshold(&pairs, fit_direction(ctx.method)).map_err(|e| match e {
        CalibrationError::Empty => RunError::Aborted(format!(
            "method {:?}: every held-out record failed during threshold fitting",
            ctx.method.name()
        )),
        other => RunError::Other(format!(
            "threshold fitting for {:?}: {other}",
            ctx.method.name()
        )),
    })?;
    Ok((fit, excluded))
}

/// Per-group result: the fit used (if any) and flag counts.
struct GroupStats {
    fit: Option<ThresholdFit>,
    hard: u64,
    soft: u64,
}

/// Runs one method under one modality: fit (score methods), evaluate every
/// pending record, append to the ledger, and enforce the abort threshold.
#[allow(clippy::too_many_arguments)]
async fn evaluate_method(
    config: &RunConfig,
    gateways: &GatewaySet,
    judge: &Judge,
    image_cache: &ImageCache,
    method: &MethodSpec,
    modality: Modality,
    heldout: &[&QueryRecord],
    eval: &[&QueryRecord],
    ledger: &mut Ledger,
    resume_state: &ResumeState,
) -> Result<GroupStats, RunError> {
    let mut ctx = GroupContext::new(config, gateways, judge, image_cache, method, modality);
    let method_name = method.name();

    let fit = if method.is_score_kind() {
        if let Some(fit) = resume_state.fit_for(method_name, modality) {
            log::info!("method {method_name}: reusing threshold fit from ledger");
            Some(fit.clone())
        } else {
            let (fit, excluded) = fit_on_heldout(&ctx, heldout).await?;
            if excluded > 0 {
                ledger.append(&LedgerLine::Warning {
                    message: format!(
                        "method {method_name} ({}): {excluded} of {} held-out records \
                         failed and were excluded from threshold fitting",
                        modality.as_str(),
                        heldout.len()
                    ),
                })?;
            }
            ledger.append(&LedgerLine::Fit {
                method: method_name.to_string(),
                modality,
                fit: fit.clone(),
            })?;
            Some(fit)
        }
    } else {
        None
    };
    ctx.fit = fit.clone();

    let pending: Vec<&QueryRecord> = eval
        .iter()
        .copied()
        .filter(|r| !resume_state.is_completed(method_name, modality, &r.id))
        .collect();
    log::info!(
        "method {method_name} ({}): evaluating {} records ({} already in ledger)",
        modality.as_str(),
        pending.len(),
        eval.len() - pending.len()
    );

    let mut hard = resume_state
        .hard_flags
        .iter()
        .filter(|line| {
            matches!(line, LedgerLine::Flagged { method, modality: m, .. }
                if method == method_name && *m == modality)
        })
        .count() as u64;
    let mut soft = 0u64;
    {
        let futures_iter = pending.iter().map(|record| process_record(&ctx, record));
        let mut stream = futures::stream::iter(futures_iter).buffered(config.concurrency);
        while let Some(output) = stream.next().await {
            for line in &output.lines {
                ledger.append(line)?;
            }
            if output.hard {
                hard += 1;
            }
            if output.soft {
                soft += 1;
            }
        }
    }
    ledger.sync()?;

    let attempted = eval.len() as u64;
    if attempted > 0 && hard as f64 / attempted as f64 > ABORT_HARD_FRACTION {
        let message = format!(
            "method {method_name} ({}): {hard} of {attempted} records hard-failed \
             (more than {:.0}%)",
            modality.as_str(),
            ABORT_HARD_FRACTION * 100.0
        );
        ledger.append(&LedgerLine::Warning {
            message: message.clone(),
        })?;
        ledger.sync()?;
        return Err(RunError::Aborted(message));
    }
    Ok(GroupStats { fit, hard, soft })
}

/// Rebuilds report rows and warnings from ledger lines. Warnings are the
/// ledger's own warning lines plus flag-rate and blanket-denial notes
/// recomputed from the aggregates, so a report derived from a resumed ledger
/// matches the one the original run would have emitted.
fn aggregate_report(
    lines: &[LedgerLine],
) -> Result<(BTreeMap<ReportKey, ReportEntry>, Vec<String>), RunError> {
    let mut outcome_map: BTreeMap<ReportKey, Vec<EvalOutcome>> = BTreeMap::new();
    let mut hard_map: BTreeMap<ReportKey, u64> = BTreeMap::new();
    let mut soft_map: BTreeMap<ReportKey, u64> = BTreeMap::new();
    let mut warnings: Vec<String> = Vec::new();
    for line in lines {
        match line {
            LedgerLine::Outcome {
                model,
                dataset,
                method,
                modality,
                record_id,
                answer_text,
                correct,
                confident,
                ..
            } => {
                let key = ReportKey {
                    model: model.clone(),
                    dataset: dataset.clone(),
                    method: method.clone(),
                    modality: *modality,
                };
                outcome_map.entry(key).or_default().push(EvalOutcome::new(
                    record_id.clone(),
                    answer_text.clone(),
                    *correct,
                    *confident,
                ));
            }
            LedgerLine::Flagged {
                model,
                dataset,
                method,
                modality,
                severity,
                ..
            } => {
                let key = ReportKey {
                    model: model.clone(),
                    dataset: dataset.clone(),
                    method: method.clone(),
                    modality: *modality,
                };
                match severity {
                    FlagSeverity::Hard => *hard_map.entry(key).or_default() += 1,
                    FlagSeverity::Soft => *soft_map.entry(key).or_default() += 1,
                }
            }
            LedgerLine::Warning { message } => warnings.push(message.clone()),
            _ => {}
        }
    }
    if outcome_map.is_empty() {
        return Err(RunError::Other(
            "ledger holds no graded outcomes; nothing to report".into(),
        ));
    }

    let mut reports = BTreeMap::new();
    for (key, outcomes) in &outcome_map {
        let metrics = compute_metrics(outcomes).map_err(|e| {
            RunError::Other(format!(
                "metrics for {}/{}/{}/{}: {e}",
                key.model,
                key.dataset,
                key.method,
                key.modality.as_str()
            ))
        })?;
        let hard = hard_map.get(key).copied().unwrap_or(0);
        let soft = soft_map.get(key).copied().unwrap_or(0);
        let attempted = outcomes.len() as u64 + hard;
        if (hard + soft) as f64 > WARN_FLAG_FRACTION * attempted as f64 {
            warnings.push(format!(
                "{}/{}/{}/{}: {} of {attempted} records flagged (more than {:.0}%)",
                key.model,
                key.dataset,
                key.method,
                key.modality.as_str(),
                hard + soft,
                WARN_FLAG_FRACTION * 100.0
            ));
        }
        if metrics.unc_r >= DENIAL_UNC_R {
            warnings.push(format!(
                "{}/{}/{}/{}: answers nearly always unconfident (Unc-R = {:.4}); \
                 possible blanket-denial behavior",
                key.model,
                key.dataset,
                key.method,
                key.modality.as_str(),
                metrics.unc_r
            ));
        }
        reports.insert(key.clone(), ReportEntry { metrics, flagged: hard });
    }
    for key in hard_map.keys() {
        if !outcome_map.contains_key(key) {
            warnings.push(format!(
                "{}/{}/{}/{}: every record hard-failed; row omitted",
                key.model,
                key.dataset,
                key.method,
                key.modality.as_str()
            ));
        }
    }
    Ok((reports, warnings))
}

fn load_records(config: &RunConfig) -> Result<Vec<QueryRecord>, RunError> {
    load_dataset(&config.dataset).map_err(|e| RunError::Config(e.to_string()))
}

/// Honors explicit split tags when every record has one; otherwise derives
/// splits from `heldout_fraction` and the run seed.
fn with_splits(config: &RunConfig, records: Vec<QueryRecord>) -> Result<Vec<QueryRecord>, RunError> {
    let tagged = records.iter().filter(|r| r.split.is_some()).count();
    if tagged == records.len() && tagged > 0 {
        return Ok(records);
    }
    assign_splits(&records, config.heldout_fraction, config.seed)
        .map_err(|e| RunError::Config(e.to_string()))
}

fn split_refs(
    records: &[QueryRecord],
    include_heldout_in_eval: bool,
) -> (Vec<&QueryRecord>, Vec<&QueryRecord>) {
    let heldout: Vec<&QueryRecord> = records
        .iter()
        .filter(|r| r.split == Some(Split::Heldout))
        .collect();
    let eval: Vec<&QueryRecord> = records
        .iter()
        .filter(|r| r.split == Some(Split::Eval) || include_heldout_in_eval)
        .collect();
    (heldout, eval)
}

fn write_thresholds(
    output_dir: &Path,
    fits: &BTreeMap<String, ThresholdFit>,
) -> Result<PathBuf, RunError> {
    let path = output_dir.join("thresholds.json");
    let mut json = serde_json::to_string_pretty(fits)
        .map_err(|e| RunError::Other(format!("serializing thresholds: {e}")))?;
    json.push('\n');
    std::fs::write(&path, json)
        .map_err(|e| RunError::Other(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

/// Re-derives the report from the ledger and writes report.{json,csv,md}
/// plus thresholds.json into the output directory.
fn finish_run(
    config: &RunConfig,
    ledger: &mut Ledger,
    fits: &BTreeMap<String, ThresholdFit>,
    backend_calls: u64,
) -> Result<RunSummary, RunError> {
    ledger.sync()?;
    let lines = read_ledger(ledger.path())?;
    let (reports, warnings) = aggregate_report(&lines)?;
    let mut report_paths = Vec::new();
    for format in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
        let path = config
            .output_dir
            .join(format!("report.{}", format.extension()));
        emit_report(&reports, &warnings, format, &path)
            .map_err(|e| RunError::Other(e.to_string()))?;
        report_paths.push(path);
    }
    report_paths.push(write_thresholds(&config.output_dir, fits)?);
    Ok(RunSummary {
        reports,
        warnings,
        backend_calls,
        report_paths,
        fits: fits.clone(),
    })
}

/// Full evaluation: every configured method on the configured modality.
pub async fn run(config: &RunConfig, resume: bool) -> Result<RunSummary, RunError> {
    config.validate()?;
    let methods = config.method_specs()?;
    let records = load_records(config)?;
    validate_run(config, &methods, config.modality, &records)?;
    let records = with_splits(config, records)?;
    let (heldout, eval) = split_refs(&records, config.include_heldout_in_eval);

    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| RunError::Other(format!("creating output dir: {e}")))?;
    let (mut ledger, resume_state) = if resume {
        Ledger::resume(&config.output_dir)?
    } else {
        (Ledger::create(&config.output_dir)?, ResumeState::default())
    };

    let gateways = GatewaySet::build(config)?;
    let judge = build_judge(config, &gateways)?;
    let image_cache = ImageCache::new(config.cache_dir.join("images"));

    let mut fits = BTreeMap::new();
    for method in &methods {
        let stats = evaluate_method(
            config,
            &gateways,
            &judge,
            &image_cache,
            method,
            config.modality,
            &heldout,
            &eval,
            &mut ledger,
            &resume_state,
        )
        .await?;
        if let Some(fit) = stats.fit {
            fits.insert(
                format!("{}@{}", method.name(), config.modality.as_str()),
                fit,
            );
        }
        if stats.hard + stats.soft > 0 {
            log::info!(
                "method {}: {} hard / {} soft flags",
                method.name(),
                stats.hard,
                stats.soft
            );
        }
    }
    finish_run(config, &mut ledger, &fits, gateways.backend_calls())
}

/// Resolves a method by name, preferring the config's entry (with its knob
/// overrides) over catalog defaults.
fn resolve_method(config: &RunConfig, name: &str) -> Result<MethodSpec, RunError> {
    let specs = config.method_specs()?;
    if let Some(spec) = specs.into_iter().find(|s| s.name() == name) {
        return Ok(spec);
    }
    MethodSpec::from_name(name).map_err(|e| RunError::Config(e.to_string()))
}

/// Fits the binarization threshold for one score-kind method on the held-out
/// split and writes thresholds.json.
pub async fn fit(config: &RunConfig, method_name: &str) -> Result<ThresholdFit, RunError> {
    config.validate()?;
    let method = resolve_method(config, method_name)?;
    if !method.is_score_kind() {
        return Err(RunError::Config(format!(
            "method {method_name:?} produces a binary verdict directly; \
             only score-kind methods take a fitted threshold"
        )));
    }
    let records = load_records(config)?;
    let methods = [method.clone()];
    validate_run(config, &methods, config.modality, &records)?;
    let records = with_splits(config, records)?;
    let (heldout, _) = split_refs(&records, false);

    let gateways = GatewaySet::build(config)?;
    let judge = build_judge(config, &gateways)?;
    let image_cache = ImageCache::new(config.cache_dir.join("images"));
    let ctx = GroupContext::new(
        config,
        &gateways,
        &judge,
        &image_cache,
        &method,
        config.modality,
    );
    let (fit, excluded) = fit_on_heldout(&ctx, &heldout).await?;
    if excluded > 0 {
        log::warn!(
            "{excluded} of {} held-out records failed and were excluded from the fit",
            heldout.len()
        );
    }
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| RunError::Other(format!("creating output dir: {e}")))?;
    let key = format!("{}@{}", method.name(), config.modality.as_str());
    write_thresholds(&config.output_dir, &BTreeMap::from([(key, fit.clone())]))?;
    Ok(fit)
}

/// Evaluates one method under all three modalities on the records that carry
/// both an image and a parallel text question, and emits one grouped report.
pub async fn compare_modalities(
    config: &RunConfig,
    method_name: &str,
) -> Result<RunSummary, RunError> {
    config.validate()?;
    let method = resolve_method(config, method_name)?;
    let all_records = load_records(config)?;
    let total = all_records.len();
    let records: Vec<QueryRecord> = all_records
        .into_iter()
        .filter(|r| r.image.is_some() && r.qa_question.is_some())
        .collect();
    if records.is_empty() {
        return Err(RunError::Config(
            "no records carry both an image and a parallel text question; nothing to compare"
                .into(),
        ));
    }
    let skipped = total - records.len();

    const MODALITIES: [Modality; 3] = [Modality::Vqa, Modality::Qa, Modality::ImageOnly];
    let methods = [method.clone()];
    for modality in MODALITIES {
        validate_run(config, &methods, modality, &records)?;
    }
    let records = with_splits(config, records)?;
    let (heldout, eval) = split_refs(&records, config.include_heldout_in_eval);

    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| RunError::Other(format!("creating output dir: {e}")))?;
    let mut ledger = Ledger::create(&config.output_dir)?;
    if skipped > 0 {
        let message = format!(
            "{skipped} of {total} records skipped: modality comparison needs both an \
             image and a parallel text question"
        );
        log::warn!("{message}");
        ledger.append(&LedgerLine::Warning { message })?;
    }
    let resume_state = ResumeState::default();

    let gateways = GatewaySet::build(config)?;
    let judge = build_judge(config, &gateways)?;
    let image_cache = ImageCache::new(config.cache_dir.join("images"));

    let mut fits = BTreeMap::new();
    for modality in MODALITIES {
        let stats = evaluate_method(
            config,
            &gateways,
            &judge,
            &image_cache,
            &method,
            modality,
            &heldout,
            &eval,
            &mut ledger,
            &resume_state,
        )
        .await?;
        if let Some(fit) = stats.fit {
            fits.insert(format!("{}@{}", method.name(), modality.as_str()), fit);
        }
    }
    finish_run(config, &mut ledger, &fits, gateways.backend_calls())
}

/// Rebuilds a report from `<dir>/ledger.jsonl` without re-running anything.
pub fn report_from_ledger(dir: &Path, format: ReportFormat) -> Result<String, RunError> {
    let path = dir.join("ledger.jsonl");
    if !path.exists() {
        return Err(RunError::Config(format!(
            "no ledger found at {}",
            path.display()
        )));
    }
    let lines = read_ledger(&path)?;
    let (reports, warnings) = aggregate_report(&lines)?;
    render_report(&reports, &warnings, format).map_err(|e| RunError::Other(e.to_string()))
}
