//! Durable per-run record of frame descriptions.
//!
//! Each run lives in its own directory under `<data root>/runs/<run id>/`:
//!
//! ```text
//! manifest.json        run metadata, config snapshot, summary, timing stats
//! descriptions.jsonl   one FrameDescription per line, append-only
//! queries.jsonl        one QueryRecord per incident query, append-only
//! frames/NNNNNN.<ext>  sampled stills
//! report.md / report.json / incidents.csv
//! evaluations.jsonl    similarity scores recorded against this run
//! ```

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::eval::TimingStats;
use crate::ingest::FrameSample;
use crate::summarize::{IncidentRecord, QueryRecord};

pub const SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DESCRIPTIONS_FILE: &str = "descriptions.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const EVALUATIONS_FILE: &str = "evaluations.jsonl";
pub const FRAMES_DIR: &str = "frames";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("frame {0} already has a description")]
    Duplicate(u64),
    #[error("run `{0}` not found")]
    NotFound(String),
    #[error("run `{0}` already exists")]
    AlreadyExists(String),
    #[error("invalid run id `{0}` (use letters, digits, '.', '_' or '-')")]
    InvalidRunId(String),
    #[error("corrupt record at {path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("invalid description for frame {frame}: {reason}")]
    InvalidRecord { frame: u64, reason: String },
    #[error("storage error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Vision output for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDescription {
    pub frame_number: u64,
    pub timestamp_s: f64,
    pub text: String,
    pub latency_s: f64,
    pub blocked: bool,
}

impl FrameDescription {
    pub fn new(frame_number: u64, timestamp_s: f64, text: impl Into<String>) -> Self {
        Self {
            frame_number,
            timestamp_s,
            text: text.into(),
            latency_s: 0.0,
            blocked: false,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |reason: &str| CorpusError::InvalidRecord {
            frame: self.frame_number,
            reason: reason.to_string(),
        };
        if self.blocked && !self.text.is_empty() {
            return Err(bad("blocked descriptions carry no text"));
        }
        if !(self.timestamp_s.is_finite() && self.timestamp_s >= 0.0) {
            return Err(bad("timestamp must be non-negative"));
        }
        if !(self.latency_s.is_finite() && self.latency_s >= 0.0) {
            return Err(bad("latency must be non-negative"));
        }
        Ok(())
    }
}

/// Renders seconds of video time as zero-padded `mm:ss`, flooring fractions.
pub fn format_mmss(seconds: f64) -> String {
    let total = if seconds.is_finite() && seconds > 0.0 {
        seconds.floor() as u64
    } else {
        0
    };
    format!("{:02}:{:02}", total / 60, total % 60)
}

/// One line per non-blocked description: `Frame {n} ({mm:ss}): {text}`.
pub fn build_paragraph(descriptions: &[FrameDescription]) -> String {
    descriptions
        .iter()
        .filter(|d| !d.blocked)
        .map(|d| format!("Frame {} ({}): {}", d.frame_number, format_mmss(d.timestamp_s), d.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    InProgress,
    Complete,
    Failed,
}

/// Everything known about a run. `manifest.json` holds all of it except the
/// descriptions and queries, which have their own append-only logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRun {
    pub schema_version: u32,
    pub run_id: String,
    pub created_at: String,
    pub source: String,
    pub status: RunStatus,
    pub frame_count: u64,
    pub gated_count: u64,
    pub duration_s: f64,
    pub vision_provider: String,
    pub text_provider: String,
    pub config_snapshot: PipelineConfig,
    pub summary: Option<String>,
    pub stats: TimingStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub descriptions: Vec<FrameDescription>,
    #[serde(skip)]
    pub queries: Vec<QueryRecord>,
}

impl AnalysisRun {
    pub fn new(run_id: impl Into<String>, config: PipelineConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: run_id.into(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            source: String::new(),
            status: RunStatus::InProgress,
            frame_count: 0,
            gated_count: 0,
            duration_s: 0.0,
            vision_provider: String::new(),
            text_provider: String::new(),
            config_snapshot: config,
            summary: None,
            stats: TimingStats::default(),
            error: None,
            descriptions: Vec::new(),
            queries: Vec::new(),
        }
    }

    /// Incident table of the most recent query.
    pub fn incidents(&self) -> &[IncidentRecord] {
        self.queries.last().map(|q| q.incidents.as_slice()).unwrap_or(&[])
    }

    pub fn description(&self, frame_number: u64) -> Option<&FrameDescription> {
        self.descriptions
            .binary_search_by_key(&frame_number, |d| d.frame_number)
            .ok()
            .map(|i| &self.descriptions[i])
    }

    pub fn paragraph(&self) -> String {
        build_paragraph(&self.descriptions)
    }
}

/// Listing entry for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunListing {
    pub run_id: String,
    pub created_at: String,
    pub status: RunStatus,
    pub source: String,
    pub frame_count: u64,
    pub gated_count: u64,
    pub duration_s: f64,
    pub has_summary: bool,
}

/// Result of reading a log that may end in a damaged record.
#[derive(Debug)]
pub struct LogRead<T> {
    pub records: Vec<T>,
    pub corrupt: Option<CorpusError>,
}

/// Reads a JSON-lines log. Stops at the first undecodable line, returning the
/// records before it together with the error.
pub fn read_log<T: serde::de::DeserializeOwned>(path: &Path) -> Result<LogRead<T>, CorpusError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(LogRead {
                records: Vec::new(),
                corrupt: None,
            })
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                return Ok(LogRead {
                    records,
                    corrupt: Some(CorpusError::Corrupt {
                        path: path.to_path_buf(),
                        line: line_no,
                        reason: e.to_string(),
                    }),
                })
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                return Ok(LogRead {
                    records,
                    corrupt: Some(CorpusError::Corrupt {
                        path: path.to_path_buf(),
                        line: line_no,
                        reason: e.to_string(),
                    }),
                })
            }
        }
    }
    Ok(LogRead { records, corrupt: None })
}

fn read_log_strict<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let read = read_log(path)?;
    match read.corrupt {
        Some(e) => Err(e),
        None => Ok(read.records),
    }
}

/// Reads a descriptions log sorted by frame number.
pub fn read_descriptions(path: &Path) -> Result<Vec<FrameDescription>, CorpusError> {
    let mut all: Vec<FrameDescription> = read_log_strict(path)?;
    all.sort_by_key(|d| d.frame_number);
    Ok(all)
}

fn append_line<T: Serialize>(path: &Path, record: &T) -> Result<(), CorpusError> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut line = serde_json::to_string(record).expect("records serialise");
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn jsonl_bytes<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend(serde_json::to_vec(r).expect("records serialise"));
        out.push(b'\n');
    }
    out
}

fn manifest_bytes(run: &AnalysisRun) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(run).expect("manifest serialises");
    bytes.push(b'\n');
    bytes
}

pub fn validate_run_id(id: &str) -> Result<(), CorpusError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(CorpusError::InvalidRunId(id.to_string()))
    }
}

/// Fresh run id from the current UTC time plus a random suffix.
pub fn generate_run_id() -> String {
    use rand::Rng;
    let suffix: u32 = rand::rng().random_range(0..0x10000);
    format!("run-{}-{suffix:04x}", chrono::Utc::now().format("%Y%m%d-%H%M%S"))
}

/// Run directories under one data root.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.runs_dir().join(run_id)
    }

    pub fn exists(&self, run_id: &str) -> bool {
        validate_run_id(run_id).is_ok() && self.run_dir(run_id).join(MANIFEST_FILE).is_file()
    }

    fn existing_dir(&self, run_id: &str) -> Result<PathBuf, CorpusError> {
        validate_run_id(run_id).map_err(|_| CorpusError::NotFound(run_id.to_string()))?;
        let dir = self.run_dir(run_id);
        if dir.join(MANIFEST_FILE).is_file() {
            Ok(dir)
        } else {
            Err(CorpusError::NotFound(run_id.to_string()))
        }
    }

    /// Creates the run directory and an in-progress manifest. Refuses to
    /// touch an existing run.
    pub fn create(&self, run: &AnalysisRun) -> Result<RunWriter, CorpusError> {
        validate_run_id(&run.run_id)?;
        let runs = self.runs_dir();
        std::fs::create_dir_all(&runs).map_err(io_err(&runs))?;
        let dir = self.run_dir(&run.run_id);
        match std::fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CorpusError::AlreadyExists(run.run_id.clone()))
            }
            Err(e) => return Err(io_err(&dir)(e)),
        }
        let frames = dir.join(FRAMES_DIR);
        std::fs::create_dir_all(&frames).map_err(io_err(&frames))?;
        write_atomic(&dir.join(MANIFEST_FILE), &manifest_bytes(run))?;
        RunWriter::open(dir)
    }

    /// Rewrites the manifest (status, summary, stats) of an existing run.
    pub fn write_manifest(&self, run: &AnalysisRun) -> Result<(), CorpusError> {
        let dir = self.existing_dir(&run.run_id)?;
        write_atomic(&dir.join(MANIFEST_FILE), &manifest_bytes(run))
    }

    /// Writes a complete run: manifest plus both logs. Re-saving a loaded run
    /// reproduces the same bytes.
    pub fn save(&self, run: &AnalysisRun) -> Result<(), CorpusError> {
        validate_run_id(&run.run_id)?;
        let dir = self.run_dir(&run.run_id);
        std::fs::create_dir_all(dir.join(FRAMES_DIR)).map_err(io_err(&dir))?;
        let mut descriptions = run.descriptions.clone();
        descriptions.sort_by_key(|d| d.frame_number);
        let mut seen = BTreeSet::new();
        for d in &descriptions {
            d.validate()?;
            if !seen.insert(d.frame_number) {
                return Err(CorpusError::Duplicate(d.frame_number));
            }
        }
        write_atomic(&dir.join(DESCRIPTIONS_FILE), &jsonl_bytes(&descriptions))?;
        write_atomic(&dir.join(QUERIES_FILE), &jsonl_bytes(&run.queries))?;
        write_atomic(&dir.join(MANIFEST_FILE), &manifest_bytes(run))
    }

    pub fn load(&self, run_id: &str) -> Result<AnalysisRun, CorpusError> {
        let dir = self.existing_dir(run_id)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let mut run: AnalysisRun = serde_json::from_str(&text).map_err(|e| CorpusError::Corrupt {
            path: manifest_path.clone(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        run.descriptions = read_descriptions(&dir.join(DESCRIPTIONS_FILE))?;
        run.queries = read_log_strict(&dir.join(QUERIES_FILE))?;
        Ok(run)
    }

    /// Descriptions that survive a damaged log, plus the damage report.
    pub fn recover_descriptions(&self, run_id: &str) -> Result<LogRead<FrameDescription>, CorpusError> {
        let dir = self.existing_dir(run_id)?;
        let mut read = read_log::<FrameDescription>(&dir.join(DESCRIPTIONS_FILE))?;
        read.records.sort_by_key(|d| d.frame_number);
        Ok(read)
    }

    pub fn list(&self) -> Result<Vec<RunListing>, CorpusError> {
        let runs = self.runs_dir();
        let entries = match std::fs::read_dir(&runs) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&runs)(e)),
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(io_err(&runs))?;
            let id = entry.file_name().to_string_lossy().into_owned();
            if !self.exists(&id) {
                continue;
            }
            let path = entry.path().join(MANIFEST_FILE);
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let Ok(run) = serde_json::from_str::<AnalysisRun>(&text) else {
                tracing::warn!(run = %id, "skipping run with unreadable manifest");
                continue;
            };
            out.push(RunListing {
                run_id: run.run_id,
                created_at: run.created_at,
                status: run.status,
                source: run.source,
                frame_count: run.frame_count,
                gated_count: run.gated_count,
                duration_s: run.duration_s,
                has_summary: run.summary.is_some(),
            });
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.run_id.cmp(&b.run_id)));
        Ok(out)
    }

    pub fn append_query(&self, run_id: &str, record: &QueryRecord) -> Result<(), CorpusError> {
        let dir = self.existing_dir(run_id)?;
        append_line(&dir.join(QUERIES_FILE), record)
    }

    pub fn append_evaluation<T: Serialize>(&self, run_id: &str, record: &T) -> Result<(), CorpusError> {
        let dir = self.existing_dir(run_id)?;
        append_line(&dir.join(EVALUATIONS_FILE), record)
    }

    /// Writes a report or other derived artifact into the run directory.
    pub fn write_artifact(&self, run_id: &str, name: &str, bytes: &[u8]) -> Result<PathBuf, CorpusError> {
        let dir = self.existing_dir(run_id)?;
        let path = dir.join(name);
        write_atomic(&path, bytes)?;
        Ok(path)
    }

    /// Path of the stored still for `frame_number`, if any.
    pub fn frame_path(&self, run_id: &str, frame_number: u64) -> Result<Option<PathBuf>, CorpusError> {
        let frames = self.existing_dir(run_id)?.join(FRAMES_DIR);
        let stem = format!("{frame_number:06}");
        for ext in ["png", "jpg", "bmp", "webp"] {
            let p = frames.join(format!("{stem}.{ext}"));
            if p.is_file() {
                return Ok(Some(p));
            }
        }
        Ok(None)
    }
}

/// Single writer for one run's descriptions log.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    seen: BTreeSet<u64>,
}

impl RunWriter {
    fn open(dir: PathBuf) -> Result<Self, CorpusError> {
        let existing = read_descriptions(&dir.join(DESCRIPTIONS_FILE))?;
        Ok(Self {
            seen: existing.iter().map(|d| d.frame_number).collect(),
            dir,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends and syncs one description. Frame numbers must be new.
    pub fn append_description(&mut self, d: &FrameDescription) -> Result<(), CorpusError> {
        d.validate()?;
        if self.seen.contains(&d.frame_number) {
            return Err(CorpusError::Duplicate(d.frame_number));
        }
        append_line(&self.dir.join(DESCRIPTIONS_FILE), d)?;
        self.seen.insert(d.frame_number);
        Ok(())
    }

    pub fn read_all(&self) -> Result<Vec<FrameDescription>, CorpusError> {
        read_descriptions(&self.dir.join(DESCRIPTIONS_FILE))
    }

    /// Stores the sampled still so reports and the HTTP service can show it.
    pub fn save_frame(&self, frame: &FrameSample) -> Result<PathBuf, CorpusError> {
        let path = self
            .dir
            .join(FRAMES_DIR)
            .join(format!("{:06}.{}", frame.frame_number, frame.image.extension()));
        std::fs::write(&path, &frame.image.data).map_err(io_err(&path))?;
        Ok(path)
    }
}
