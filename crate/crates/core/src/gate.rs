//! Object-detection gate.
//!
//! A frame only reaches the vision provider when the detector reports at least
//! one target label at or above the configured confidence. Detector backends
//! sit behind [`Detector`]: a fixture-driven mock, an external executable, and
//! a remote HTTP endpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::ingest::FrameSample;
use crate::media::ImagePayload;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("detector backend unavailable: {0}")]
    Unavailable(String),
    #[error("detector returned malformed output: {0}")]
    Malformed(String),
    #[error("failed to read detection fixture {path}: {reason}")]
    Fixture { path: PathBuf, reason: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum CropError {
    #[error("bounding box has zero area")]
    Degenerate,
    #[error("bounding box {0:?} lies outside the {1}x{2} image")]
    OutOfBounds(BBox, u32, u32),
    #[error("image could not be decoded or encoded: {0}")]
    Image(String),
}

/// Axis-aligned box in pixel coordinates, serialised as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x_min, y_min, x_max, y_max]: [f64; 4]) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width as f64 && self.y_max <= height as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: BBox,
}

impl Detection {
    fn check(&self) -> Result<(), DetectError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(DetectError::Malformed(format!(
                "confidence {} for `{}` outside [0, 1]",
                self.confidence, self.label
            )));
        }
        if self.bbox.is_degenerate() {
            return Err(DetectError::Malformed(format!("degenerate box {:?}", self.bbox)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub frame_number: u64,
    pub passed: bool,
    /// Detections that matched a target label at or above the threshold.
    pub detections: Vec<Detection>,
}

impl GateDecision {
    /// The retained detection with the highest confidence.
    pub fn best(&self) -> Option<&Detection> {
        self.detections
            .iter()
            .max_by(|a, b| a.confidence.total_cmp(&b.confidence))
    }
}

/// Source of raw, unfiltered detections. Implementations must tolerate
/// concurrent calls.
pub trait Detector: Send + Sync {
    fn detect(&self, frame: &FrameSample) -> Result<Vec<Detection>, DetectError>;
}

/// Keeps detections whose label is a target and whose confidence is at least
/// `gate_confidence` (inclusive).
pub fn apply_gate(detections: &[Detection], cfg: &PipelineConfig, frame_number: u64) -> GateDecision {
    let kept: Vec<Detection> = detections
        .iter()
        .filter(|d| cfg.target_labels.contains(&d.label) && d.confidence >= cfg.gate_confidence)
        .cloned()
        .collect();
    GateDecision {
        frame_number,
        passed: !kept.is_empty(),
        detections: kept,
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` that [`crop`] extracts.
pub fn crop_rect(bbox: &BBox, margin_frac: f64, width: u32, height: u32) -> Result<(u32, u32, u32, u32), CropError> {
    if bbox.is_degenerate() {
        return Err(CropError::Degenerate);
    }
    if !bbox.within(width, height) {
        return Err(CropError::OutOfBounds(*bbox, width, height));
    }
    let mx = bbox.width() * margin_frac;
    let my = bbox.height() * margin_frac;
    let x0 = (bbox.x_min - mx).max(0.0).floor() as u32;
    let y0 = (bbox.y_min - my).max(0.0).floor() as u32;
    let x1 = ((bbox.x_max + mx).min(width as f64).ceil() as u32).min(width);
    let y1 = ((bbox.y_max + my).min(height as f64).ceil() as u32).min(height);
    if x1 <= x0 || y1 <= y0 {
        return Err(CropError::Degenerate);
    }
    Ok((x0, y0, x1, y1))
}

/// Cuts the detection out of the frame, widened by `margin_frac` of the box
/// size on each side and clamped to the image. The crop is re-encoded in the
/// frame's own format.
pub fn crop(frame: &FrameSample, det: &Detection, margin_frac: f64) -> Result<ImagePayload, CropError> {
    let img = frame.image.decode().map_err(|e| CropError::Image(e.to_string()))?;
    let (x0, y0, x1, y1) = crop_rect(&det.bbox, margin_frac, img.width(), img.height())?;
    let sub = img.crop_imm(x0, y0, x1 - x0, y1 - y0);
    ImagePayload::encode(&sub, &frame.image.media_type).map_err(|e| CropError::Image(e.to_string()))
}

/// Fixture document for [`MockDetector`].
///
/// ```json
/// { "default": [], "frames": { "5": [ { "label": "person", "confidence": 0.9, "bbox": [0, 0, 10, 10] } ] } }
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFixture {
    #[serde(default)]
    pub default: Vec<Detection>,
    #[serde(default)]
    pub frames: BTreeMap<u64, Vec<Detection>>,
}

/// Deterministic detector driven by a frame-number → detections fixture.
#[derive(Debug, Clone, Default)]
pub struct MockDetector {
    fixture: DetectionFixture,
}

impl MockDetector {
    pub fn new(fixture: DetectionFixture) -> Self {
        Self { fixture }
    }

    pub fn from_file(path: &Path) -> Result<Self, DetectError> {
        let fixture_err = |reason: String| DetectError::Fixture {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| fixture_err(e.to_string()))?;
        let fixture: DetectionFixture = serde_json::from_str(&text).map_err(|e| fixture_err(e.to_string()))?;
        for d in fixture.default.iter().chain(fixture.frames.values().flatten()) {
            d.check().map_err(|e| fixture_err(e.to_string()))?;
        }
        Ok(Self::new(fixture))
    }

    /// Marks each listed frame with one full-confidence detection of `label`.
    pub fn marking(frames: impl IntoIterator<Item = u64>, label: &str) -> Self {
        let det = Detection {
            label: label.to_string(),
            confidence: 1.0,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
        };
        Self::new(DetectionFixture {
            default: Vec::new(),
            frames: frames.into_iter().map(|f| (f, vec![det.clone()])).collect(),
        })
    }
}

impl Detector for MockDetector {
    fn detect(&self, frame: &FrameSample) -> Result<Vec<Detection>, DetectError> {
        Ok(self
            .fixture
            .frames
            .get(&frame.frame_number)
            .unwrap_or(&self.fixture.default)
            .clone())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DetectionListWire {
    Bare(Vec<Detection>),
    Wrapped { detections: Vec<Detection> },
}

fn parse_detections(body: &[u8]) -> Result<Vec<Detection>, DetectError> {
    let wire: DetectionListWire = serde_json::from_slice(body).map_err(|e| DetectError::Malformed(e.to_string()))?;
    let list = match wire {
        DetectionListWire::Bare(l) | DetectionListWire::Wrapped { detections: l } => l,
    };
    for d in &list {
        d.check()?;
    }
    Ok(list)
}

/// Runs an external detector once per frame: `program [args..] <image path>`.
/// The program prints a JSON detection list (bare array, or an object with a
/// `detections` array) on stdout and exits 0.
#[derive(Debug, Clone)]
pub struct ExecDetector {
    program: PathBuf,
    args: Vec<String>,
    scratch: PathBuf,
}

impl ExecDetector {
    /// `scratch` holds temporary image files for frames that have no path.
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, scratch: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args,
            scratch: scratch.into(),
        }
    }
}

impl Detector for ExecDetector {
    fn detect(&self, frame: &FrameSample) -> Result<Vec<Detection>, DetectError> {
        let owned;
        let image_path = match &frame.path {
            Some(p) => p.as_path(),
            None => {
                std::fs::create_dir_all(&self.scratch).map_err(|e| DetectError::Unavailable(e.to_string()))?;
                owned = self
                    .scratch
                    .join(format!("detect-{:06}.{}", frame.frame_number, frame.image.extension()));
                std::fs::write(&owned, &frame.image.data).map_err(|e| DetectError::Unavailable(e.to_string()))?;
                owned.as_path()
            }
        };
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(image_path)
            .output()
            .map_err(|e| DetectError::Unavailable(format!("{}: {e}", self.program.display())))?;
        if !output.status.success() {
            return Err(DetectError::Unavailable(format!(
                "{} exited with {}: {}",
                self.program.display(),
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        parse_detections(&output.stdout)
    }
}

/// Posts `{"frame_number", "image": {"media_type", "data"}}` to a detection
/// endpoint and reads back a JSON detection list.
#[derive(Debug, Clone)]
pub struct HttpDetector {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpDetector {
    pub fn new(url: impl Into<String>) -> Result<Self, DetectError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| DetectError::Unavailable(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            client,
        })
    }
}

impl Detector for HttpDetector {
    fn detect(&self, frame: &FrameSample) -> Result<Vec<Detection>, DetectError> {
        let body = serde_json::json!({
            "frame_number": frame.frame_number,
            "image": { "media_type": frame.image.media_type, "data": frame.image.base64() },
        });
        let resp = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| DetectError::Unavailable(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| DetectError::Unavailable(e.to_string()))?;
        if !status.is_success() {
            return Err(DetectError::Unavailable(format!(
                "HTTP {status}: {}",
                String::from_utf8_lossy(&bytes).trim()
            )));
        }
        parse_detections(&bytes)
    }
}
