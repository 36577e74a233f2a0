//! Frame sampling.
//!
//! Two sources produce the same ordered list of [`FrameSample`]s:
//!
//! * a video file, decoded by an external `ffmpeg` process that writes stills
//!   into a working directory at the requested rate;
//! * a directory of still images named by zero-padded integer stems.
//!
//! Sample `i` always sits at `t = i / frame_rate`, starting at `t = 0`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::config::FrameRate;
use crate::media::{is_raster_path, ImagePayload};

/// Environment variable that overrides the decoder executable.
pub const FFMPEG_ENV: &str = "FRAMEWISE_FFMPEG";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("source {0} does not exist")]
    MissingSource(PathBuf),
    #[error("decoder `{program}` could not be started: {source}")]
    DecoderUnavailable {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Undecodable { path: PathBuf, reason: String },
    #[error("requested {requested} fps exceeds the native rate of {native} fps")]
    RateAboveNative { requested: f64, native: f64 },
    #[error("no image files in {0}")]
    EmptyDirectory(PathBuf),
    #[error("file name `{0}` is not a numeric frame index")]
    NonNumericName(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSample {
    /// 0-based position in the sampled sequence.
    pub frame_number: u64,
    pub timestamp_s: f64,
    pub image: ImagePayload,
    /// Where the still lives on disk, when it came from a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// Native properties reported by the decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoInfo {
    pub duration_s: f64,
    pub native_fps: f64,
}

impl VideoInfo {
    /// Inclusive bounds on the sample count at `rate`.
    pub fn sample_bounds(&self, rate: FrameRate) -> (usize, usize) {
        let lo = (self.duration_s * rate.as_f64() + 1e-9).floor() as usize;
        (lo, lo + 1)
    }
}

/// Wrapper around the external `ffmpeg` executable.
#[derive(Debug, Clone)]
pub struct Decoder {
    program: PathBuf,
}

impl Default for Decoder {
    fn default() -> Self {
        Self::from_env()
    }
}

impl Decoder {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
        }
    }

    /// Uses `$FRAMEWISE_FFMPEG` when set, else `ffmpeg` from `PATH`.
    pub fn from_env() -> Self {
        match std::env::var_os(FFMPEG_ENV) {
            Some(p) if !p.is_empty() => Self::new(p),
            _ => Self::new("ffmpeg"),
        }
    }

    pub fn program(&self) -> &Path {
        &self.program
    }

    /// True when the executable can be started.
    pub fn is_available(&self) -> bool {
        Command::new(&self.program)
            .arg("-version")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    }

    pub fn probe(&self, source: &Path) -> Result<VideoInfo, IngestError> {
        if !source.exists() {
            return Err(IngestError::MissingSource(source.to_path_buf()));
        }
        // Without an output file ffmpeg exits non-zero but still prints the
        // stream summary to stderr.
        let output = Command::new(&self.program)
            .args(["-hide_banner", "-nostdin", "-i"])
            .arg(source)
            .output()
            .map_err(|e| self.unavailable(e))?;
        let stderr = String::from_utf8_lossy(&output.stderr);
        parse_probe(&stderr).map_err(|reason| IngestError::Undecodable {
            path: source.to_path_buf(),
            reason,
        })
    }

    /// Arguments passed to ffmpeg to write stills at `rate` into `out_dir`.
    pub fn extract_args(source: &Path, rate: FrameRate, out_dir: &Path) -> Vec<String> {
        vec![
            "-hide_banner".into(),
            "-loglevel".into(),
            "error".into(),
            "-nostdin".into(),
            "-y".into(),
            "-i".into(),
            source.display().to_string(),
            "-vf".into(),
            format!("fps={}/{}", rate.num(), rate.den()),
            "-start_number".into(),
            "0".into(),
            out_dir.join("%06d.png").display().to_string(),
        ]
    }

    fn unavailable(&self, source: std::io::Error) -> IngestError {
        IngestError::DecoderUnavailable {
            program: self.program.display().to_string(),
            source,
        }
    }
}

fn parse_probe(stderr: &str) -> Result<VideoInfo, String> {
    static DURATION: OnceLock<Regex> = OnceLock::new();
    static STREAM: OnceLock<Regex> = OnceLock::new();
    static FPS: OnceLock<Regex> = OnceLock::new();
    static TBR: OnceLock<Regex> = OnceLock::new();
    let duration_re = DURATION.get_or_init(|| Regex::new(r"Duration:\s*(\d+):(\d{2}):(\d{2}(?:\.\d+)?)").unwrap());
    let stream_re = STREAM.get_or_init(|| Regex::new(r"(?m)^\s*Stream #.*Video:.*$").unwrap());
    let fps_re = FPS.get_or_init(|| Regex::new(r"([\d.]+)(k?) fps").unwrap());
    let tbr_re = TBR.get_or_init(|| Regex::new(r"([\d.]+)(k?) tbr").unwrap());

    let caps = duration_re
        .captures(stderr)
        .ok_or_else(|| first_error_line(stderr).unwrap_or_else(|| "no duration reported".into()))?;
    let h: f64 = caps[1].parse().map_err(|_| "bad duration")?;
    let m: f64 = caps[2].parse().map_err(|_| "bad duration")?;
    let s: f64 = caps[3].parse().map_err(|_| "bad duration")?;
    let duration_s = h * 3600.0 + m * 60.0 + s;

    let stream = stream_re
        .find(stderr)
        .ok_or_else(|| "no video stream".to_string())?
        .as_str();
    let rate = fps_re
        .captures(stream)
        .or_else(|| tbr_re.captures(stream))
        .ok_or_else(|| "video stream reports no frame rate".to_string())?;
    let mut native_fps: f64 = rate[1].parse().map_err(|_| "bad frame rate")?;
    if &rate[2] == "k" {
        native_fps *= 1000.0;
    }
    if native_fps <= 0.0 {
        return Err("video stream reports no frame rate".into());
    }
    Ok(VideoInfo { duration_s, native_fps })
}

fn first_error_line(stderr: &str) -> Option<String> {
    stderr
        .lines()
        .map(str::trim)
        .rfind(|l| !l.is_empty())
        .map(str::to_string)
}

/// Samples `source` at `frame_rate`, writing stills into `work_dir`.
///
/// The result holds between `floor(d * r)` and `floor(d * r) + 1` samples for
/// a clip of duration `d`. Rates above the native frame rate are rejected
/// rather than padded with duplicate frames.
pub fn sample_video(
    decoder: &Decoder,
    source: &Path,
    frame_rate: FrameRate,
    work_dir: &Path,
) -> Result<Vec<FrameSample>, IngestError> {
    let info = decoder.probe(source)?;
    let requested = frame_rate.as_f64();
    if requested > info.native_fps * (1.0 + 1e-6) {
        return Err(IngestError::RateAboveNative {
            requested,
            native: info.native_fps,
        });
    }
    std::fs::create_dir_all(work_dir).map_err(io_err(work_dir))?;
    let args = Decoder::extract_args(source, frame_rate, work_dir);
    debug!(program = %decoder.program.display(), ?args, "extracting frames");
    let output = Command::new(&decoder.program)
        .args(&args)
        .output()
        .map_err(|e| decoder.unavailable(e))?;
    if !output.status.success() {
        return Err(IngestError::Undecodable {
            path: source.to_path_buf(),
            reason: first_error_line(&String::from_utf8_lossy(&output.stderr))
                .unwrap_or_else(|| format!("decoder exited with {}", output.status)),
        });
    }

    let mut samples = load_image_sequence(work_dir, frame_rate)?;
    let (lo, hi) = info.sample_bounds(frame_rate);
    if samples.len() > hi {
        debug!(
            emitted = samples.len(),
            kept = hi,
            "dropping trailing frames past the clip end"
        );
        samples.truncate(hi);
    } else if samples.len() < lo {
        warn!(
            emitted = samples.len(),
            expected = lo,
            "decoder emitted fewer frames than the duration implies"
        );
    }
    Ok(samples)
}

/// Loads a directory of stills whose stems are frame indices.
///
/// Files are sorted by numeric stem and renumbered densely from 0; gaps are
/// logged. Hidden files and non-image files are ignored.
pub fn load_image_sequence(dir: &Path, frame_rate: FrameRate) -> Result<Vec<FrameSample>, IngestError> {
    if !dir.is_dir() {
        return Err(IngestError::MissingSource(dir.to_path_buf()));
    }
    let mut indexed = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || !path.is_file() || !is_raster_path(&path) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let index: u64 = stem.parse().map_err(|_| IngestError::NonNumericName(name.clone()))?;
        indexed.push((index, path));
    }
    if indexed.is_empty() {
        return Err(IngestError::EmptyDirectory(dir.to_path_buf()));
    }
    indexed.sort();

    let mut samples = Vec::with_capacity(indexed.len());
    let mut previous: Option<u64> = None;
    for (i, (index, path)) in indexed.into_iter().enumerate() {
        if let Some(p) = previous {
            if index == p {
                return Err(IngestError::NonNumericName(format!(
                    "{} (duplicate index {index})",
                    path.display()
                )));
            }
            if index != p + 1 {
                warn!(after = p, next = index, "gap in image sequence; renumbering densely");
            }
        }
        previous = Some(index);
        let frame_number = i as u64;
        samples.push(FrameSample {
            frame_number,
            timestamp_s: frame_rate.timestamp(frame_number),
            image: ImagePayload::read(&path).map_err(io_err(&path))?,
            path: Some(path),
        });
    }
    Ok(samples)
}
