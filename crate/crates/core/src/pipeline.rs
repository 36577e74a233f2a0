//! The analysis loop: detect and gate sampled frames, describe the survivors,
//! persist the descriptions, summarise, and write the reports.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::path::PathBuf;

use thiserror::Error;

use crate::config::{render_prompt, PipelineConfig, PromptingMode, SubmissionMode, QUERY_PLACEHOLDER};
use crate::corpus::{AnalysisRun, CorpusError, FrameDescription, RunStatus, RunStore, RunWriter};
use crate::eval::Stage;
use crate::gate::{apply_gate, crop, Detector, GateDecision};
use crate::ingest::FrameSample;
use crate::media::ImagePayload;
use crate::par;
use crate::report::{render_report, ReportError, ReportFormat};
use crate::summarize::{query_incidents, summarize_run, QueryRecord, SummarizeError};
use crate::vlm::{build_collage, ProviderRequest, ProviderResponse, VlmClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineStage {
    Config,
    Detect,
    Gate,
    Describe,
    Persist,
    Summarize,
    Query,
    Report,
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineStage::Config => "config",
            PipelineStage::Detect => "detect",
            PipelineStage::Gate => "gate",
            PipelineStage::Describe => "describe",
            PipelineStage::Persist => "persist",
            PipelineStage::Summarize => "summarize",
            PipelineStage::Query => "query",
            PipelineStage::Report => "report",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} failed{}: {message}", frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    Stage {
        stage: PipelineStage,
        frame: Option<u64>,
        message: String,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Summarize(#[from] SummarizeError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl PipelineError {
    fn at(stage: PipelineStage, frame: Option<u64>, message: impl fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            frame,
            message: message.to_string(),
        }
    }
}

/// What to analyse.
#[derive(Debug, Clone)]
pub struct AnalyzeInput {
    /// Human-readable origin (video path or frame directory).
    pub source: String,
    pub samples: Vec<FrameSample>,
    /// Clip length when known; otherwise derived from the samples.
    pub duration_s: Option<f64>,
}

/// One vision call: a frame, or a chunk of frames in sequence/collage mode.
/// The response is stored under `anchor`.
struct Unit {
    anchor: u64,
    timestamp_s: f64,
    request: ProviderRequest,
}

pub struct Analyzer<'a> {
    pub config: &'a PipelineConfig,
    pub detector: &'a dyn Detector,
    pub vision: &'a VlmClient,
    pub text: &'a VlmClient,
    pub store: &'a RunStore,
}

impl Analyzer<'_> {
    /// Runs the whole loop and returns the completed run. On failure the run
    /// is marked failed, the descriptions written so far are kept, and the
    /// error names the stage.
    pub fn analyze(&self, input: AnalyzeInput, run_id: &str) -> Result<AnalysisRun, PipelineError> {
        let cfg = self.config;
        cfg.validate()
            .map_err(|e| PipelineError::at(PipelineStage::Config, None, e))?;
        let describe_prompt = describe_prompt(cfg)?;

        let mut run = AnalysisRun::new(run_id, cfg.clone());
        run.source = input.source;
        run.frame_count = input.samples.len() as u64;
        run.duration_s = input.duration_s.unwrap_or_else(|| {
            input
                .samples
                .last()
                .map(|s| s.timestamp_s + 1.0 / cfg.frame_rate.as_f64())
                .unwrap_or(0.0)
        });
        run.vision_provider = self.vision.provider_id().to_string();
        run.text_provider = self.text.provider_id().to_string();
        let mut writer = self.store.create(&run)?;

        match self.run_stages(&mut run, &mut writer, &input.samples, &describe_prompt) {
            Ok(()) => {
                run.status = RunStatus::Complete;
                self.store.write_manifest(&run)?;
                write_reports(self.store, &run)?;
                Ok(run)
            }
            Err(e) => {
                tracing::error!(run = %run.run_id, error = %e, "analysis failed");
                run.status = RunStatus::Failed;
                run.error = Some(e.to_string());
                if let Ok(kept) = writer.read_all() {
                    run.descriptions = kept;
                }
                self.store.write_manifest(&run)?;
                Err(e)
            }
        }
    }

    fn run_stages(
        &self,
        run: &mut AnalysisRun,
        writer: &mut RunWriter,
        samples: &[FrameSample],
        describe_prompt: &str,
    ) -> Result<(), PipelineError> {
        let cfg = self.config;

        let decisions = par::map(samples, |s| {
            self.detector
                .detect(s)
                .map(|d| apply_gate(&d, cfg, s.frame_number))
                .map_err(|e| PipelineError::at(PipelineStage::Detect, Some(s.frame_number), e))
        })
        .into_iter()
        .collect::<Result<Vec<GateDecision>, _>>()?;

        for s in samples {
            writer
                .save_frame(s)
                .map_err(|e| PipelineError::at(PipelineStage::Persist, Some(s.frame_number), e))?;
        }

        let passed: Vec<(&FrameSample, &GateDecision)> =
            samples.iter().zip(&decisions).filter(|(_, d)| d.passed).collect();
        run.gated_count = passed.len() as u64;
        tracing::info!(sampled = samples.len(), passed = passed.len(), "gate applied");

        let units = build_units(cfg, &passed, describe_prompt)?;
        run.descriptions = self.describe_all(run, writer, &units)?;

        let paragraph = run.paragraph();
        if paragraph.is_empty() {
            tracing::info!("no frames described; skipping summary");
            return Ok(());
        }
        let summary = summarize_run(self.text, &paragraph, cfg)
            .map_err(|e| PipelineError::at(PipelineStage::Summarize, None, e))?;
        record(run, Stage::Text, &summary)?;
        run.summary = if summary.blocked {
            tracing::warn!("summary blocked by the text provider");
            None
        } else {
            Some(summary.text)
        };

        if let (Some(q), PromptingMode::Indirect) = (&cfg.query, cfg.prompting_mode) {
            let rec = query_incidents(self.text, &run.descriptions, q, cfg)
                .map_err(|e| PipelineError::at(PipelineStage::Query, None, e))?;
            run.stats
                .record(Stage::Text, rec.latency_s)
                .map_err(|e| PipelineError::at(PipelineStage::Query, None, e))?;
            self.store.append_query(&run.run_id, &rec)?;
            run.queries.push(rec);
        }
        Ok(())
    }

    /// Describes every unit on at most `max_parallel_calls` workers. Results
    /// pass through a reorder buffer so the log is appended in frame order.
    fn describe_all(
        &self,
        run: &mut AnalysisRun,
        writer: &mut RunWriter,
        units: &[Unit],
    ) -> Result<Vec<FrameDescription>, PipelineError> {
        let mut pending: BTreeMap<usize, ProviderResponse> = BTreeMap::new();
        let mut next = 0usize;
        let mut written = Vec::with_capacity(units.len());
        let mut failure: Option<PipelineError> = None;

        par::for_each_bounded(
            units,
            self.config.max_parallel_calls,
            |_, unit| self.vision.describe(&unit.request),
            |i, result| {
                if failure.is_some() {
                    return ControlFlow::Break(());
                }
                match result {
                    Ok(resp) => {
                        pending.insert(i, resp);
                    }
                    Err(e) => {
                        failure = Some(PipelineError::at(PipelineStage::Describe, Some(units[i].anchor), e));
                        return ControlFlow::Break(());
                    }
                }
                while let Some(resp) = pending.remove(&next) {
                    let unit = &units[next];
                    let d = FrameDescription {
                        frame_number: unit.anchor,
                        timestamp_s: unit.timestamp_s,
                        text: resp.text.clone(),
                        latency_s: resp.latency_s,
                        blocked: resp.blocked,
                    };
                    if let Err(e) = record(run, Stage::Vision, &resp).and_then(|_| {
                        writer
                            .append_description(&d)
                            .map_err(|e| PipelineError::at(PipelineStage::Persist, Some(d.frame_number), e))
                    }) {
                        failure = Some(e);
                        return ControlFlow::Break(());
                    }
                    written.push(d);
                    next += 1;
                }
                ControlFlow::Continue(())
            },
        );
        match failure {
            Some(e) => Err(e),
            None => Ok(written),
        }
    }
}

fn record(run: &mut AnalysisRun, stage: Stage, resp: &ProviderResponse) -> Result<(), PipelineError> {
    run.stats.record(stage, resp.latency_s).map_err(|e| {
        let s = if stage == Stage::Vision {
            PipelineStage::Describe
        } else {
            PipelineStage::Summarize
        };
        PipelineError::at(s, None, e)
    })
}

fn describe_prompt(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let mut bindings = BTreeMap::new();
    if cfg.prompting_mode == PromptingMode::Direct {
        let q = cfg
            .query
            .as_deref()
            .filter(|q| !q.trim().is_empty())
            .ok_or_else(|| PipelineError::at(PipelineStage::Config, None, "direct prompting needs a `query`"))?;
        bindings.insert(QUERY_PLACEHOLDER.to_string(), q.to_string());
    }
    render_prompt(&cfg.describe_prompt, &bindings).map_err(|e| PipelineError::at(PipelineStage::Config, None, e))
}

fn build_units(
    cfg: &PipelineConfig,
    passed: &[(&FrameSample, &GateDecision)],
    prompt: &str,
) -> Result<Vec<Unit>, PipelineError> {
    let request = |images: Vec<ImagePayload>, frames: Vec<u64>| ProviderRequest {
        images,
        prompt: prompt.to_string(),
        params: cfg.vision_params.clone(),
        frame_numbers: frames,
    };
    let mut units = Vec::new();
    match cfg.submission_mode {
        SubmissionMode::PerFrame => {
            for (frame, decision) in passed {
                let image = match (cfg.crop_to_detection, decision.best()) {
                    (true, Some(det)) => crop(frame, det, cfg.crop_margin)
                        .map_err(|e| PipelineError::at(PipelineStage::Gate, Some(frame.frame_number), e))?,
                    _ => frame.image.clone(),
                };
                units.push(Unit {
                    anchor: frame.frame_number,
                    timestamp_s: frame.timestamp_s,
                    request: request(vec![image], vec![frame.frame_number]),
                });
            }
        }
        SubmissionMode::Sequence | SubmissionMode::Collage => {
            for chunk in passed.chunks(cfg.frames_per_call.max(1)) {
                let frames: Vec<FrameSample> = chunk.iter().map(|(f, _)| (*f).clone()).collect();
                let numbers: Vec<u64> = frames.iter().map(|f| f.frame_number).collect();
                let images = if cfg.submission_mode == SubmissionMode::Collage {
                    let c = build_collage(&frames, cfg.collage_columns)
                        .map_err(|e| PipelineError::at(PipelineStage::Describe, Some(numbers[0]), e))?;
                    vec![c.image]
                } else {
                    frames.iter().map(|f| f.image.clone()).collect()
                };
                units.push(Unit {
                    anchor: numbers[0],
                    timestamp_s: frames[0].timestamp_s,
                    request: request(images, numbers),
                });
            }
        }
    }
    Ok(units)
}

/// Writes report.json, report.md and incidents.csv into the run directory.
/// Runs with nothing to report get none.
pub fn write_reports(store: &RunStore, run: &AnalysisRun) -> Result<Vec<PathBuf>, PipelineError> {
    let mut paths = Vec::new();
    for format in ReportFormat::ALL {
        match render_report(run, format) {
            Ok(bytes) => paths.push(store.write_artifact(&run.run_id, format.file_name(), &bytes)?),
            Err(ReportError::Incomplete(_)) => return Ok(Vec::new()),
            Err(e) => return Err(PipelineError::at(PipelineStage::Report, None, e)),
        }
    }
    Ok(paths)
}

/// Asks `query` of a stored run, appends the record and refreshes the
/// reports.
pub fn run_query(store: &RunStore, run_id: &str, query: &str, text: &VlmClient) -> Result<QueryRecord, PipelineError> {
    let mut run = store.load(run_id)?;
    let rec = query_incidents(text, &run.descriptions, query, &run.config_snapshot)?;
    store.append_query(run_id, &rec)?;
    run.queries.push(rec.clone());
    write_reports(store, &run)?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FrameRate;
    use crate::gate::MockDetector;
    use crate::vlm::{FailureKind, MockFailure, MockProvider, MockRule, ProviderFixture, RetryPolicy};
    use image::{DynamicImage, Rgb, RgbImage};
    use std::sync::Arc;

    fn samples(n: u64) -> Vec<FrameSample> {
        let rate = FrameRate::per_second(1).unwrap();
        (0..n)
            .map(|i| {
                let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(32, 24, Rgb([i as u8 * 8, 40, 90])));
                FrameSample {
                    frame_number: i,
                    timestamp_s: rate.timestamp(i),
                    image: ImagePayload::encode(&img, "image/png").unwrap(),
                    path: None,
                }
            })
            .collect()
    }

    fn input(n: u64) -> AnalyzeInput {
        AnalyzeInput {
            source: "synthetic".into(),
            samples: samples(n),
            duration_s: None,
        }
    }

    fn vision_fixture() -> ProviderFixture {
        ProviderFixture {
            default: "a road".into(),
            ..ProviderFixture::default()
        }
    }

    struct Setup {
        _dir: tempfile::TempDir,
        store: RunStore,
        vision_mock: Arc<MockProvider>,
        vision: VlmClient,
        text: VlmClient,
    }

    fn setup(vision: ProviderFixture) -> Setup {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::new(dir.path());
        let vision_mock = Arc::new(MockProvider::new(vision));
        let text_mock = Arc::new(MockProvider::new(ProviderFixture {
            default: "summary".into(),
            ..ProviderFixture::default()
        }));
        Setup {
            _dir: dir,
            store,
            vision: VlmClient::new(vision_mock.clone()).with_retry(RetryPolicy::immediate(3)),
            vision_mock,
            text: VlmClient::new(text_mock),
        }
    }

    #[test]
    fn calls_equal_gated_frames() {
        for k in [0u64, 7, 29] {
            let s = setup(vision_fixture());
            let cfg = PipelineConfig::default();
            let det = MockDetector::marking(0..k, "person");
            let a = Analyzer {
                config: &cfg,
                detector: &det,
                vision: &s.vision,
                text: &s.text,
                store: &s.store,
            };
            let run = a.analyze(input(29), "run-k").unwrap();
            assert_eq!(s.vision_mock.call_count(), k as usize);
            assert_eq!(run.gated_count, k);
            assert_eq!(run.descriptions.len(), k as usize);
            assert_eq!(run.summary.is_some(), k > 0);
            assert_eq!(run.status, RunStatus::Complete);
        }
    }

    #[test]
    fn log_is_in_frame_order_and_reloads() {
        let s = setup(vision_fixture());
        let cfg = PipelineConfig {
            max_parallel_calls: 8,
            ..PipelineConfig::default()
        };
        let det = MockDetector::marking([3, 1, 20, 7, 9], "person");
        let a = Analyzer {
            config: &cfg,
            detector: &det,
            vision: &s.vision,
            text: &s.text,
            store: &s.store,
        };
        a.analyze(input(29), "run-order").unwrap();
        let loaded = s.store.load("run-order").unwrap();
        let frames: Vec<_> = loaded.descriptions.iter().map(|d| d.frame_number).collect();
        assert_eq!(frames, vec![1, 3, 7, 9, 20]);
        assert_eq!(loaded.summary.as_deref(), Some("summary"));
        assert_eq!(loaded.stats.vision.count, 5);
        assert_eq!(loaded.stats.text.count, 1);
        assert!(s.store.run_dir("run-order").join("report.md").is_file());
    }

    #[test]
    fn rerun_with_same_id_is_refused() {
        let s = setup(vision_fixture());
        let cfg = PipelineConfig::default();
        let det = MockDetector::marking([1], "person");
        let a = Analyzer {
            config: &cfg,
            detector: &det,
            vision: &s.vision,
            text: &s.text,
            store: &s.store,
        };
        a.analyze(input(3), "run-once").unwrap();
        assert!(matches!(
            a.analyze(input(3), "run-once"),
            Err(PipelineError::Corpus(CorpusError::AlreadyExists(_)))
        ));
    }

    #[test]
    fn failure_names_stage_and_keeps_prefix() {
        let s = setup(ProviderFixture {
            default: "ok".into(),
            failures: vec![MockFailure {
                frame: Some(5),
                prompt_contains: None,
                times: 10,
                kind: FailureKind::Fatal,
            }],
            ..ProviderFixture::default()
        });
        let cfg = PipelineConfig {
            max_parallel_calls: 1,
            ..PipelineConfig::default()
        };
        let det = MockDetector::marking([1, 2, 5, 8], "person");
        let a = Analyzer {
            config: &cfg,
            detector: &det,
            vision: &s.vision,
            text: &s.text,
            store: &s.store,
        };
        let err = a.analyze(input(10), "run-fail").unwrap_err();
        assert!(err.to_string().starts_with("describe failed at frame 5"), "{err}");
        let run = s.store.load("run-fail").unwrap();
        assert_eq!(run.status, RunStatus::Failed);
        assert_eq!(
            run.descriptions.iter().map(|d| d.frame_number).collect::<Vec<_>>(),
            vec![1, 2]
        );
    }

    #[test]
    fn sequence_mode_chunks() {
        let s = setup(vision_fixture());
        let cfg = PipelineConfig {
            submission_mode: SubmissionMode::Sequence,
            frames_per_call: 3,
            ..PipelineConfig::default()
        };
        let det = MockDetector::marking([1, 2, 3, 4, 5, 6, 7], "person");
        let a = Analyzer {
            config: &cfg,
            detector: &det,
            vision: &s.vision,
            text: &s.text,
            store: &s.store,
        };
        let run = a.analyze(input(10), "run-seq").unwrap();
        assert_eq!(s.vision_mock.call_count(), 3);
        let reqs = s.vision_mock.requests();
        let mut frames: Vec<_> = reqs.iter().map(|r| r.frame_numbers.clone()).collect();
        frames.sort();
        assert_eq!(frames, vec![vec![1, 2, 3], vec![4, 5, 6], vec![7]]);
        assert_eq!(
            run.descriptions.iter().map(|d| d.frame_number).collect::<Vec<_>>(),
            vec![1, 4, 7]
        );
    }

    #[test]
    fn collage_mode_sends_one_image_per_chunk() {
        let s = setup(vision_fixture());
        let cfg = PipelineConfig {
            submission_mode: SubmissionMode::Collage,
            frames_per_call: 4,
            ..PipelineConfig::default()
        };
        let det = MockDetector::marking(0..6, "person");
        let a = Analyzer {
            config: &cfg,
            detector: &det,
            vision: &s.vision,
            text: &s.text,
            store: &s.store,
        };
        a.analyze(input(6), "run-collage").unwrap();
        let reqs = s.vision_mock.requests();
        assert_eq!(reqs.len(), 2);
        assert!(reqs.iter().all(|r| r.image_count == 1));
    }

    #[test]
    fn direct_mode_embeds_query() {
        let s = setup(vision_fixture());
        let cfg = PipelineConfig {
            prompting_mode: PromptingMode::Direct,
            describe_prompt: "Is there an {query} here?".into(),
            query: Some("accident".into()),
            ..PipelineConfig::default()
        };
        let det = MockDetector::marking([0], "person");
        let a = Analyzer {
            config: &cfg,
            detector: &det,
            vision: &s.vision,
            text: &s.text,
            store: &s.store,
        };
        a.analyze(input(2), "run-direct").unwrap();
        assert_eq!(s.vision_mock.requests()[0].prompt, "Is there an accident here?");
    }

    #[test]
    fn query_appends_and_rewrites_reports() {
        let s = setup(vision_fixture());
        let cfg = PipelineConfig::default();
        let det = MockDetector::marking([2, 4], "person");
        let a = Analyzer {
            config: &cfg,
            detector: &det,
            vision: &s.vision,
            text: &s.text,
            store: &s.store,
        };
        a.analyze(input(6), "run-q").unwrap();
        let text = VlmClient::new(Arc::new(MockProvider::new(ProviderFixture {
            rules: vec![MockRule {
                text: "FRAME 4: something happens".into(),
                ..MockRule::default()
            }],
            ..ProviderFixture::default()
        })));
        let rec = run_query(&s.store, "run-q", "incidents", &text).unwrap();
        assert_eq!(rec.incidents.len(), 1);
        assert_eq!(s.store.load("run-q").unwrap().incidents().len(), 1);
        let csv = std::fs::read_to_string(s.store.run_dir("run-q").join("incidents.csv")).unwrap();
        assert_eq!(csv, "Timestamp,Frame Number,Information\n00:04,4,something happens\n");
    }
}
