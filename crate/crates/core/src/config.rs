//! Pipeline configuration and prompt templates.
//!
//! Configuration is a TOML document. Every field is optional; an empty file
//! yields [`PipelineConfig::default`]. Values are validated after parsing and
//! the validated config is snapshotted into every run, so it is immutable once
//! loaded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DESCRIBE_PROMPT: &str = "Describe the image.";
pub const DEFAULT_SUMMARIZE_PROMPT: &str =
    "These are image descriptions of a video. Understand, remove redundant information and give a summary.";
pub const DEFAULT_QUERY_PROMPT: &str =
    "These are frame-wise descriptions of a video. Understand and describe the frames containing {query}.";

/// Placeholder that carries the user query in direct prompting mode.
pub const QUERY_PLACEHOLDER: &str = "query";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config document: {0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("no binding for placeholder `{{{0}}}`")]
    MissingBinding(String),
    #[error("unterminated placeholder starting at byte {0}")]
    Unterminated(usize),
}

/// A strictly positive frame rate kept as a reduced fraction `num / den`
/// frames per second of video time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FrameRateRepr", into = "FrameRateRepr")]
pub struct FrameRate {
    num: u32,
    den: u32,
}

impl FrameRate {
    pub fn new(num: u32, den: u32) -> Result<Self, String> {
        if num == 0 {
            return Err("frame rate must be positive".into());
        }
        if den == 0 {
            return Err("frame rate denominator must be non-zero".into());
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn per_second(fps: u32) -> Result<Self, String> {
        Self::new(fps, 1)
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Video time of the `index`-th sample: `index / rate`.
    pub fn timestamp(&self, index: u64) -> f64 {
        (index as f64 * self.den as f64) / self.num as f64
    }

    fn from_decimal(value: f64) -> Result<Self, String> {
        if !value.is_finite() || value <= 0.0 {
            return Err(format!("frame rate must be positive, got {value}"));
        }
        // Millihertz resolution is plenty for sampling rates.
        let scaled = (value * 1000.0).round();
        if scaled < 1.0 || scaled > u32::MAX as f64 {
            return Err(format!("frame rate {value} is out of range"));
        }
        Self::new(scaled as u32, 1000)
    }
}

impl Default for FrameRate {
    fn default() -> Self {
        Self { num: 1, den: 1 }
    }
}

impl fmt::Display for FrameRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for FrameRate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n: u32 = n.trim().parse().map_err(|_| format!("bad numerator in `{s}`"))?;
            let d: u32 = d.trim().parse().map_err(|_| format!("bad denominator in `{s}`"))?;
            return Self::new(n, d);
        }
        if let Ok(n) = s.parse::<u32>() {
            return Self::new(n, 1);
        }
        let v: f64 = s.parse().map_err(|_| format!("unrecognised frame rate `{s}`"))?;
        Self::from_decimal(v)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FrameRateRepr {
    Int(i64),
    Float(f64),
    Text(String),
}

impl TryFrom<FrameRateRepr> for FrameRate {
    type Error = String;

    fn try_from(value: FrameRateRepr) -> Result<Self, Self::Error> {
        match value {
            FrameRateRepr::Int(n) => {
                let n = u32::try_from(n).map_err(|_| format!("frame rate must be positive, got {n}"))?;
                Self::new(n, 1)
            }
            FrameRateRepr::Float(v) => Self::from_decimal(v),
            FrameRateRepr::Text(s) => s.parse(),
        }
    }
}

impl From<FrameRate> for FrameRateRepr {
    fn from(rate: FrameRate) -> Self {
        if rate.den == 1 {
            FrameRateRepr::Int(rate.num as i64)
        } else {
            FrameRateRepr::Text(rate.to_string())
        }
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionMode {
    /// One provider call per gated frame.
    #[default]
    PerFrame,
    /// Several consecutive gated frames sent as an ordered image list.
    Sequence,
    /// Several consecutive gated frames tiled into one labelled image.
    Collage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptingMode {
    /// The query is embedded in the per-frame vision prompt.
    Direct,
    /// Frames are described neutrally; the query is asked of the text corpus.
    #[default]
    Indirect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarmCategory {
    Harassment,
    HateSpeech,
    SexualContent,
    DangerousContent,
}

impl HarmCategory {
    pub const ALL: [HarmCategory; 4] = [
        HarmCategory::Harassment,
        HarmCategory::HateSpeech,
        HarmCategory::SexualContent,
        HarmCategory::DangerousContent,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockThreshold {
    BlockNone,
    BlockFew,
    #[default]
    BlockSome,
    BlockMost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub temperature: f64,
    pub safety: BTreeMap<HarmCategory, BlockThreshold>,
    pub max_output_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            // Minimum temperature curbs speculative descriptions.
            temperature: 0.0,
            safety: HarmCategory::ALL
                .iter()
                .map(|c| (*c, BlockThreshold::default()))
                .collect(),
            max_output_tokens: 1024,
        }
    }
}

impl GenerationParams {
    fn validate(&self, field: &'static str) -> Result<(), ConfigError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ConfigError::Invalid {
                field,
                reason: format!("temperature must be >= 0, got {}", self.temperature),
            });
        }
        if let Some(missing) = HarmCategory::ALL.iter().find(|c| !self.safety.contains_key(c)) {
            return Err(ConfigError::Invalid {
                field,
                reason: format!("safety map is missing harm category {missing:?}"),
            });
        }
        if self.max_output_tokens == 0 {
            return Err(ConfigError::Invalid {
                field,
                reason: "max_output_tokens must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub frame_rate: FrameRate,
    pub target_labels: BTreeSet<String>,
    pub gate_confidence: f64,
    pub submission_mode: SubmissionMode,
    pub prompting_mode: PromptingMode,
    pub crop_to_detection: bool,
    /// Fractional margin added on each side of a detection crop.
    pub crop_margin: f64,
    /// Gated frames per call in sequence and collage modes.
    pub frames_per_call: usize,
    pub collage_columns: u32,
    pub vision_params: GenerationParams,
    pub text_params: GenerationParams,
    pub describe_prompt: String,
    pub summarize_prompt: String,
    pub query_prompt: Option<String>,
    /// Query bound into `describe_prompt` when prompting directly.
    pub query: Option<String>,
    pub max_parallel_calls: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frame_rate: FrameRate::default(),
            target_labels: BTreeSet::from(["person".to_string()]),
            gate_confidence: 0.25,
            submission_mode: SubmissionMode::PerFrame,
            prompting_mode: PromptingMode::Indirect,
            crop_to_detection: false,
            crop_margin: 0.1,
            frames_per_call: 4,
            collage_columns: 2,
            vision_params: GenerationParams::default(),
            text_params: GenerationParams::default(),
            describe_prompt: DEFAULT_DESCRIBE_PROMPT.to_string(),
            summarize_prompt: DEFAULT_SUMMARIZE_PROMPT.to_string(),
            query_prompt: Some(DEFAULT_QUERY_PROMPT.to_string()),
            query: None,
            max_parallel_calls: 4,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }

    /// Checks every invariant, naming the first offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.gate_confidence) {
            return Err(ConfigError::Invalid {
                field: "gate_confidence",
                reason: format!("must lie in [0, 1], got {}", self.gate_confidence),
            });
        }
        if self.target_labels.is_empty() || self.target_labels.iter().any(|l| l.trim().is_empty()) {
            return Err(ConfigError::Invalid {
                field: "target_labels",
                reason: "at least one non-empty label is required".into(),
            });
        }
        if self.crop_to_detection && self.submission_mode != SubmissionMode::PerFrame {
            return Err(ConfigError::Invalid {
                field: "crop_to_detection",
                reason: "detection crops require submission_mode = per_frame".into(),
            });
        }
        if !(self.crop_margin.is_finite() && self.crop_margin >= 0.0) {
            return Err(ConfigError::Invalid {
                field: "crop_margin",
                reason: "must be a non-negative number".into(),
            });
        }
        if self.frames_per_call == 0 {
            return Err(ConfigError::Invalid {
                field: "frames_per_call",
                reason: "must be positive".into(),
            });
        }
        if self.collage_columns == 0 {
            return Err(ConfigError::Invalid {
                field: "collage_columns",
                reason: "must be positive".into(),
            });
        }
        if self.max_parallel_calls == 0 {
            return Err(ConfigError::Invalid {
                field: "max_parallel_calls",
                reason: "must be positive".into(),
            });
        }
        self.vision_params.validate("vision_params")?;
        self.text_params.validate("text_params")?;

        for (field, template) in [
            ("describe_prompt", Some(&self.describe_prompt)),
            ("summarize_prompt", Some(&self.summarize_prompt)),
            ("query_prompt", self.query_prompt.as_ref()),
        ] {
            if let Some(t) = template {
                if t.trim().is_empty() {
                    return Err(ConfigError::Invalid {
                        field,
                        reason: "prompt template must not be empty".into(),
                    });
                }
                placeholders(t).map_err(|e| ConfigError::Invalid {
                    field,
                    reason: e.to_string(),
                })?;
            }
        }

        let describe_has_query = placeholders(&self.describe_prompt)
            .map(|p| p.iter().any(|p| p == QUERY_PLACEHOLDER))
            .unwrap_or(false);
        match self.prompting_mode {
            PromptingMode::Direct if !describe_has_query => Err(ConfigError::Invalid {
                field: "describe_prompt",
                reason: "direct prompting needs a `{query}` placeholder in describe_prompt".into(),
            }),
            PromptingMode::Indirect if describe_has_query => Err(ConfigError::Invalid {
                field: "describe_prompt",
                reason: "indirect prompting keeps the query out of describe_prompt; put it in query_prompt".into(),
            }),
            _ => Ok(()),
        }
    }
}

/// Reads and validates a config file. Unset fields take their defaults.
pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    PipelineConfig::from_toml_str(&text)
}

/// Lists placeholder names (`{name}`) in order of appearance. `{{` and `}}`
/// are literal braces.
pub fn placeholders(template: &str) -> Result<Vec<String>, TemplateError> {
    let mut names = Vec::new();
    scan(template, |segment| {
        if let Segment::Placeholder(name) = segment {
            names.push(name.to_string());
        }
        Ok(())
    })?;
    Ok(names)
}

/// Substitutes every `{name}` in `template` with its binding verbatim.
pub fn render_prompt(template: &str, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    scan(template, |segment| {
        match segment {
            Segment::Text(t) => out.push_str(t),
            Segment::Placeholder(name) => match bindings.get(name) {
                Some(v) => out.push_str(v),
                None => return Err(TemplateError::MissingBinding(name.to_string())),
            },
        }
        Ok(())
    })?;
    Ok(out)
}

enum Segment<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

fn scan<'a>(
    template: &'a str,
    mut visit: impl FnMut(Segment<'a>) -> Result<(), TemplateError>,
) -> Result<(), TemplateError> {
    let bytes = template.as_bytes();
    let mut i = 0;
    let mut text_start = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                visit(Segment::Text(&template[text_start..i + 1]))?;
                i += 2;
                text_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                visit(Segment::Text(&template[text_start..i + 1]))?;
                i += 2;
                text_start = i;
            }
            b'{' => {
                let close = template[i + 1..]
                    .find('}')
                    .map(|off| i + 1 + off)
                    .ok_or(TemplateError::Unterminated(i))?;
                let name = &template[i + 1..close];
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    // Not an identifier: keep the brace as literal text.
                    i += 1;
                    continue;
                }
                visit(Segment::Text(&template[text_start..i]))?;
                visit(Segment::Placeholder(name))?;
                i = close + 1;
                text_start = i;
            }
            _ => i += 1,
        }
    }
    visit(Segment::Text(&template[text_start..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn frame_rate_one_per_second() {
        let f = write_tmp("frame_rate = 1\n");
        let cfg = load_config(f.path()).unwrap();
        assert_eq!(cfg.frame_rate, FrameRate::per_second(1).unwrap());
        assert_eq!(cfg.frame_rate.as_f64(), 1.0);
    }

    #[test]
    fn zero_frame_rate_rejected() {
        let f = write_tmp("frame_rate = 0\n");
        let err = load_config(f.path()).unwrap_err();
        assert!(err.to_string().contains("frame rate must be positive"), "{err}");
    }

    #[test]
    fn empty_file_gives_defaults() {
        let f = write_tmp("");
        let cfg = load_config(f.path()).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.frame_rate.as_f64(), 1.0);
        assert_eq!(cfg.prompting_mode, PromptingMode::Indirect);
        assert_eq!(cfg.describe_prompt, "Describe the image.");
        assert!(!cfg.crop_to_detection);
        assert_eq!(cfg.vision_params.temperature, 0.0);
    }

    #[test]
    fn frame_rate_forms() {
        assert_eq!("30000/1001".parse::<FrameRate>().unwrap().num(), 30000);
        assert_eq!("0.5".parse::<FrameRate>().unwrap(), FrameRate::new(1, 2).unwrap());
        assert_eq!("4/2".parse::<FrameRate>().unwrap(), FrameRate::new(2, 1).unwrap());
        let cfg = PipelineConfig::from_toml_str("frame_rate = \"1/2\"").unwrap();
        assert_eq!(cfg.frame_rate.timestamp(3), 6.0);
        let cfg = PipelineConfig::from_toml_str("frame_rate = 2.5").unwrap();
        assert_eq!(cfg.frame_rate, FrameRate::new(5, 2).unwrap());
        assert!(PipelineConfig::from_toml_str("frame_rate = -1").is_err());
    }

    #[test]
    fn malformed_document_is_parse_error() {
        let err = PipelineConfig::from_toml_str("frame_rate = = 1").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        let err = PipelineConfig::from_toml_str("no_such_field = 1").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn validation_names_field() {
        let cases = [
            ("gate_confidence = 1.5", "gate_confidence"),
            (
                "crop_to_detection = true\nsubmission_mode = \"collage\"",
                "crop_to_detection",
            ),
            ("max_parallel_calls = 0", "max_parallel_calls"),
            ("[vision_params]\ntemperature = -0.1", "vision_params"),
            ("[text_params.safety]\nharassment = \"block_none\"", "text_params"),
            ("prompting_mode = \"direct\"", "describe_prompt"),
            ("describe_prompt = \"Is there {query}?\"", "describe_prompt"),
        ];
        for (doc, field) in cases {
            match PipelineConfig::from_toml_str(doc) {
                Err(ConfigError::Invalid { field: f, .. }) => assert_eq!(f, field, "{doc}"),
                other => panic!("{doc}: expected invalid {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn direct_mode_with_query_placeholder() {
        let cfg = PipelineConfig::from_toml_str(
            "prompting_mode = \"direct\"\ndescribe_prompt = \"Describe if there is {query} happening in the image.\"\nquery = \"an accident\"",
        )
        .unwrap();
        assert_eq!(cfg.prompting_mode, PromptingMode::Direct);
    }

    #[test]
    fn full_safety_map_parses() {
        let doc = r#"
[vision_params]
temperature = 0.4
max_output_tokens = 256
[vision_params.safety]
harassment = "block_none"
hate_speech = "block_few"
sexual_content = "block_some"
dangerous_content = "block_most"
"#;
        let cfg = PipelineConfig::from_toml_str(doc).unwrap();
        assert_eq!(
            cfg.vision_params.safety[&HarmCategory::DangerousContent],
            BlockThreshold::BlockMost
        );
        assert_eq!(cfg.vision_params.max_output_tokens, 256);
    }

    #[test]
    fn render_examples() {
        assert_eq!(
            render_prompt("Describe the image.", &bind(&[])).unwrap(),
            "Describe the image."
        );
        assert_eq!(
            render_prompt("{q}", &bind(&[("q", "describe the frames containing accidents")])).unwrap(),
            "describe the frames containing accidents"
        );
        assert_eq!(
            render_prompt("{a}{b}", &bind(&[("a", "")])).unwrap_err(),
            TemplateError::MissingBinding("b".into())
        );
    }

    #[test]
    fn render_leaves_other_text_alone() {
        let t = "JSON like {\"k\": 1} and {{literal}} and {x}!";
        assert_eq!(
            render_prompt(t, &bind(&[("x", "{y}")])).unwrap(),
            "JSON like {\"k\": 1} and {literal} and {y}!"
        );
        assert_eq!(placeholders(t).unwrap(), vec!["x".to_string()]);
        assert!(matches!(
            render_prompt("open {x", &bind(&[])),
            Err(TemplateError::Unterminated(5))
        ));
    }

    #[test]
    fn load_is_idempotent() {
        let f = write_tmp("frame_rate = \"2/3\"\ntarget_labels = [\"car\", \"person\"]\n");
        assert_eq!(load_config(f.path()).unwrap(), load_config(f.path()).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_threshold() -> impl Strategy<Value = BlockThreshold> {
            prop_oneof![
                Just(BlockThreshold::BlockNone),
                Just(BlockThreshold::BlockFew),
                Just(BlockThreshold::BlockSome),
                Just(BlockThreshold::BlockMost),
            ]
        }

        fn arb_params() -> impl Strategy<Value = GenerationParams> {
            (0.0f64..2.0, prop::collection::vec(arb_threshold(), 4), 1u32..8192).prop_map(|(t, th, m)| {
                GenerationParams {
                    temperature: t,
                    safety: HarmCategory::ALL.iter().copied().zip(th).collect(),
                    max_output_tokens: m,
                }
            })
        }

        fn arb_config() -> impl Strategy<Value = PipelineConfig> {
            (
                (1u32..240, 1u32..1001),
                prop::collection::btree_set("[a-z]{1,8}", 1..4),
                0.0f64..=1.0,
                prop_oneof![
                    Just(SubmissionMode::PerFrame),
                    Just(SubmissionMode::Sequence),
                    Just(SubmissionMode::Collage)
                ],
                any::<bool>(),
                arb_params(),
                arb_params(),
                "[A-Za-z][A-Za-z .,]{0,39}",
                1usize..16,
            )
                .prop_map(
                    |((n, d), labels, conf, mode, crop, vp, tp, prompt, par)| PipelineConfig {
                        frame_rate: FrameRate::new(n, d).unwrap(),
                        target_labels: labels,
                        gate_confidence: conf,
                        submission_mode: mode,
                        crop_to_detection: crop && mode == SubmissionMode::PerFrame,
                        vision_params: vp,
                        text_params: tp,
                        describe_prompt: prompt,
                        max_parallel_calls: par,
                        ..PipelineConfig::default()
                    },
                )
        }

        proptest! {
            #[test]
            fn serialise_then_reload_is_identity(cfg in arb_config()) {
                let text = cfg.to_toml_string();
                let back = PipelineConfig::from_toml_str(&text).unwrap();
                prop_assert_eq!(back, cfg);
            }
        }
    }
}
