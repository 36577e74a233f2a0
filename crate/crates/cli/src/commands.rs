use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use framewise::config::{load_config, FrameRate, PipelineConfig};
use framewise::corpus::{generate_run_id, validate_run_id, CorpusError, RunStore, MANIFEST_FILE};
use framewise::eval::{default_stopwords, load_embeddings, preprocess, score_batch, SimilarityResult};
use framewise::gate::{Detector, ExecDetector, HttpDetector, MockDetector};
use framewise::ingest::{load_image_sequence, sample_video, Decoder};
use framewise::pipeline::{run_query, AnalyzeInput, Analyzer, PipelineError};
use framewise::report::{markdown_table, render_report, ReportFormat};
use framewise::summarize::SummarizeError;
use framewise::vlm::{ProviderSpec, VlmClient};

use crate::{AnalyzeArgs, EvaluateArgs, QueryArgs, ReportArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// Process exit status: 2 for usage errors, 3 for unknown runs, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::NotFound(_) => 3,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::NotFound(_) | CorpusError::InvalidRunId(_) => CliError::NotFound(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Corpus(c) => c.into(),
            PipelineError::Summarize(SummarizeError::EmptyQuery) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

fn io_failed(what: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Failed(format!("{}: {e}", what.display()))
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::Failed(format!("cannot write output: {e}")))
}

/// Builds a provider client, failing before any work when a remote provider
/// has no API key in the environment.
pub(crate) fn client(spec: &str) -> Result<VlmClient, CliError> {
    let spec: ProviderSpec = spec.parse().map_err(CliError::Usage)?;
    let provider = spec.build().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(VlmClient::new(provider))
}

fn detector(spec: &str, args: &[String], scratch: PathBuf) -> Result<Box<dyn Detector>, CliError> {
    let (kind, arg) = spec.split_once(':').filter(|(_, a)| !a.is_empty()).ok_or_else(|| {
        CliError::Usage(format!(
            "detector `{spec}` must look like mock:<file>, exec:<program> or http:<url>"
        ))
    })?;
    Ok(match kind {
        "mock" => Box::new(MockDetector::from_file(Path::new(arg)).map_err(|e| CliError::Usage(e.to_string()))?),
        "exec" => Box::new(ExecDetector::new(arg, args.to_vec(), scratch)),
        "http" => Box::new(HttpDetector::new(arg).map_err(|e| CliError::Usage(e.to_string()))?),
        other => return Err(CliError::Usage(format!("unknown detector kind `{other}`"))),
    })
}

/// Parses a snake_case enum value the same way the config file does.
fn config_enum<T: serde::de::DeserializeOwned>(flag: &str, value: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| CliError::Usage(format!("invalid value `{value}` for --{flag}")))
}

fn effective_config(args: &AnalyzeArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        None => PipelineConfig::default(),
    };
    if let Some(r) = &args.frame_rate {
        cfg.frame_rate = r
            .parse::<FrameRate>()
            .map_err(|e| CliError::Usage(format!("--frame-rate: {e}")))?;
    }
    if let Some(n) = args.parallel {
        cfg.max_parallel_calls = n;
    }
    if let Some(m) = &args.submission_mode {
        cfg.submission_mode = config_enum("submission-mode", m)?;
    }
    if let Some(m) = &args.prompting_mode {
        cfg.prompting_mode = config_enum("prompting-mode", m)?;
    }
    if let Some(q) = &args.query {
        cfg.query = Some(q.clone());
    }
    cfg.validate()
        .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

pub fn analyze(data_root: &Path, args: AnalyzeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = effective_config(&args)?;
    match (&args.video, &args.frames) {
        (Some(v), _) if !v.is_file() => return Err(CliError::Usage(format!("video {} does not exist", v.display()))),
        (None, Some(d)) if !d.is_dir() => {
            return Err(CliError::Usage(format!(
                "frame directory {} does not exist",
                d.display()
            )))
        }
        (None, None) => return Err(CliError::Usage("one of --video or --frames is required".into())),
        _ => {}
    }
    let store = RunStore::new(data_root);
    let run_id = args.run_id.clone().unwrap_or_else(generate_run_id);
    validate_run_id(&run_id).map_err(|e| CliError::Usage(e.to_string()))?;
    if store.exists(&run_id) {
        return Err(CliError::Failed(format!(
            "run `{run_id}` already exists; runs are never overwritten"
        )));
    }
    let vision = client(&args.providers.vision_provider)?;
    let text = client(&args.providers.text_provider)?;
    let work = data_root.join("work").join(&run_id);
    let detector = detector(&args.detector, &args.detector_args, work.join("detect"))?;

    let input = match (&args.video, &args.frames) {
        (Some(video), _) => {
            let decoder = Decoder::from_env();
            let info = decoder
                .probe(video)
                .map_err(|e| CliError::Failed(format!("sample failed: {e}")))?;
            let samples = sample_video(&decoder, video, cfg.frame_rate, &work.join("frames"))
                .map_err(|e| CliError::Failed(format!("sample failed: {e}")))?;
            AnalyzeInput {
                source: video.display().to_string(),
                samples,
                duration_s: Some(info.duration_s),
            }
        }
        (None, Some(dir)) => AnalyzeInput {
            source: dir.display().to_string(),
            samples: load_image_sequence(dir, cfg.frame_rate)
                .map_err(|e| CliError::Failed(format!("sample failed: {e}")))?,
            duration_s: None,
        },
        (None, None) => unreachable!("checked above"),
    };

    let run = Analyzer {
        config: &cfg,
        detector: detector.as_ref(),
        vision: &vision,
        text: &text,
        store: &store,
    }
    .analyze(input, &run_id)
    .map_err(|e| {
        CliError::Failed(format!(
            "{e} (partial run kept in {})",
            store.run_dir(&run_id).display()
        ))
    })?;

    let dir = store.run_dir(&run.run_id);
    let report = dir.join(ReportFormat::Markdown.file_name());
    let mut text = format!(
        "run_id: {}\nframes: {} sampled, {} described\n",
        run.run_id, run.frame_count, run.gated_count
    );
    if report.is_file() {
        text.push_str(&format!("report: {}\n", report.display()));
    } else {
        text.push_str(&format!(
            "report: none (nothing to report); manifest: {}\n",
            dir.join(MANIFEST_FILE).display()
        ));
    }
    write_out(out, &text)
}

pub fn query(data_root: &Path, args: QueryArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let store = RunStore::new(data_root);
    if !store.exists(&args.run_id) {
        return Err(CliError::NotFound(format!("run `{}` not found", args.run_id)));
    }
    let text = client(&args.text_provider)?;
    let rec = run_query(&store, &args.run_id, &args.query, &text)?;
    if let Some(w) = &rec.warning {
        eprintln!("warning: {w}");
    }
    write_out(out, &format!("{}\n", markdown_table(&rec.incidents)))
}

#[derive(Debug, Deserialize)]
struct PairRow {
    generated: String,
    truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub generated: String,
    pub truth: String,
    pub result: SimilarityResult,
}

/// What `evaluate` persists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub created_at: String,
    pub source: String,
    pub embeddings: String,
    pub threshold: f64,
    pub pairs: Vec<PairScore>,
    pub mean_percentage: f64,
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("pairs file {} does not exist", path.display())));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    rdr.deserialize::<PairRow>()
        .map(|r| {
            r.map(|p| (p.generated, p.truth))
                .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn evaluate(data_root: &Path, args: EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let store = RunStore::new(data_root);
    let (pairs, source) = match (&args.pairs, &args.run, &args.truth) {
        (Some(p), _, _) => (read_pairs(p)?, format!("pairs:{}", p.display())),
        (None, Some(run_id), Some(truth)) => {
            let run = store.load(run_id)?;
            let summary = run
                .summary
                .ok_or_else(|| CliError::Failed(format!("run `{run_id}` has no summary to evaluate")))?;
            let truth = std::fs::read_to_string(truth).map_err(io_failed(truth))?;
            (vec![(summary, truth.trim().to_string())], format!("run:{run_id}"))
        }
        _ => return Err(CliError::Usage("give --pairs, or --run with --truth".into())),
    };
    if !args.embeddings.is_file() {
        return Err(CliError::Usage(format!(
            "embeddings {} do not exist",
            args.embeddings.display()
        )));
    }

    let stop = default_stopwords();
    let vocab: HashSet<String> = pairs
        .iter()
        .flat_map(|(g, t)| preprocess(g, stop).into_iter().chain(preprocess(t, stop)))
        .collect();
    let store_vectors = load_embeddings(&args.embeddings, Some(&vocab)).map_err(|e| CliError::Failed(e.to_string()))?;
    let scores =
        score_batch(&pairs, &store_vectors, stop, args.threshold).map_err(|e| CliError::Failed(e.to_string()))?;

    let record = EvaluationRecord {
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        source,
        embeddings: args.embeddings.display().to_string(),
        threshold: args.threshold,
        pairs: pairs
            .into_iter()
            .zip(scores.results)
            .map(|((generated, truth), result)| PairScore {
                generated,
                truth,
                result,
            })
            .collect(),
        mean_percentage: scores.mean_percentage,
    };
    let saved = match &args.run {
        Some(run_id) => {
            store.append_evaluation(run_id, &record)?;
            store.run_dir(run_id).join(framewise::corpus::EVALUATIONS_FILE)
        }
        None => {
            let dir = data_root.join("evaluations");
            std::fs::create_dir_all(&dir).map_err(io_failed(&dir))?;
            let path = dir.join(format!("{}.json", generate_run_id()));
            let body = serde_json::to_vec_pretty(&record).map_err(|e| CliError::Failed(e.to_string()))?;
            std::fs::write(&path, body).map_err(io_failed(&path))?;
            path
        }
    };

    let mut text = String::new();
    for (i, p) in record.pairs.iter().enumerate() {
        text.push_str(&format!(
            "pair {}: {}/{} matched, {:.2}%\n",
            i + 1,
            p.result.matched,
            p.result.ground_truth_count,
            p.result.percentage
        ));
    }
    text.push_str(&format!(
        "mean: {:.2}%\nsaved: {}\n",
        record.mean_percentage,
        saved.display()
    ));
    write_out(out, &text)
}

pub fn report(data_root: &Path, args: ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let format: ReportFormat = args.format.parse().map_err(CliError::Usage)?;
    let run = RunStore::new(data_root).load(&args.run_id)?;
    let bytes = render_report(&run, format).map_err(|e| CliError::Failed(e.to_string()))?;
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::Failed(format!("cannot write output: {e}")))
}

/// Used by the serve module, which holds the text client behind an `Arc`.
pub(crate) fn shared_client(spec: &str) -> Result<Arc<VlmClient>, CliError> {
    client(spec).map(Arc::new)
}
