//! Whole-video summaries and incident queries over the description corpus.
//!
//! Incident queries instruct the text provider to answer in a fixed line
//! grammar, `FRAME <n>: <information>`, one line per relevant frame. Lines in
//! that shape that reference a described frame become [`IncidentRecord`]s;
//! everything else is kept verbatim in the query's raw output.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    render_prompt, PipelineConfig, PromptingMode, TemplateError, DEFAULT_QUERY_PROMPT, QUERY_PLACEHOLDER,
};
use crate::corpus::{build_paragraph, format_mmss, FrameDescription};
use crate::ingest::FrameSample;
use crate::vlm::{ProviderError, ProviderRequest, ProviderResponse, VlmClient};

/// Appended to every incident query so the answer can be parsed.
pub const INCIDENT_INSTRUCTION: &str = "Answer with one line per relevant frame, exactly in the form \"FRAME <n>: <information>\", where <n> is the frame number given in the descriptions. If no frame is relevant, say so in one sentence.";

const PARAGRAPH_PLACEHOLDER: &str = "paragraph";

#[derive(Debug, Error)]
pub enum SummarizeError {
    #[error("the description corpus is empty")]
    EmptyCorpus,
    #[error("the query is empty")]
    EmptyQuery,
    #[error("direct prompting is not enabled (prompting_mode = indirect)")]
    NotDirectMode,
    #[error("prompt template: {0}")]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// One row of an incident table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidentRecord {
    /// `mm:ss` of the referenced frame.
    pub timestamp: String,
    pub frame_number: u64,
    pub information: String,
}

/// A query asked of a run, with its parsed and raw answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: String,
    pub created_at: String,
    pub incidents: Vec<IncidentRecord>,
    pub raw_text: String,
    /// Non-empty answer lines that did not become records.
    pub unparsed_lines: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub provider_id: String,
    pub latency_s: f64,
}

/// Renders `template` with the paragraph bound to `{paragraph}`; when the
/// template has no such placeholder the paragraph follows after a blank line.
fn compose(
    template: &str,
    mut bindings: BTreeMap<String, String>,
    extra: Option<&str>,
    paragraph: &str,
) -> Result<String, TemplateError> {
    let uses_paragraph = crate::config::placeholders(template)?
        .iter()
        .any(|p| p == PARAGRAPH_PLACEHOLDER);
    bindings.insert(PARAGRAPH_PLACEHOLDER.to_string(), paragraph.to_string());
    let mut prompt = render_prompt(template, &bindings)?;
    if let Some(extra) = extra {
        prompt.push('\n');
        prompt.push_str(extra);
    }
    if !uses_paragraph {
        prompt.push_str("\n\n");
        prompt.push_str(paragraph);
    }
    Ok(prompt)
}

/// Asks the text provider to summarise the paragraph. The response text is
/// the summary, verbatim.
pub fn summarize_run(
    client: &VlmClient,
    paragraph: &str,
    cfg: &PipelineConfig,
) -> Result<ProviderResponse, SummarizeError> {
    if paragraph.trim().is_empty() {
        return Err(SummarizeError::EmptyCorpus);
    }
    let prompt = compose(&cfg.summarize_prompt, BTreeMap::new(), None, paragraph)?;
    Ok(client.generate_text(&prompt, &cfg.text_params)?)
}

/// Builds the text prompt for an incident query.
pub fn query_prompt(paragraph: &str, query: &str, cfg: &PipelineConfig) -> Result<String, SummarizeError> {
    let template = cfg.query_prompt.as_deref().unwrap_or(DEFAULT_QUERY_PROMPT);
    let bindings = BTreeMap::from([(QUERY_PLACEHOLDER.to_string(), query.to_string())]);
    Ok(compose(template, bindings, Some(INCIDENT_INSTRUCTION), paragraph)?)
}

fn incident_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:[-*•]\s+)?(?:\*\*)?FRAME\s+(\d+)\s*(?:\*\*)?\s*:\s*(?:\*\*)?\s*(.+?)\s*$").unwrap()
    })
}

/// Splits provider text into records for known frames and leftover lines.
pub fn parse_incidents(text: &str, descriptions: &[FrameDescription]) -> (Vec<IncidentRecord>, Vec<String>) {
    let mut records = Vec::new();
    let mut leftover = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = incident_line().captures(line).and_then(|c| {
            let frame: u64 = c[1].parse().ok()?;
            let idx = descriptions.binary_search_by_key(&frame, |d| d.frame_number).ok()?;
            Some(IncidentRecord {
                timestamp: format_mmss(descriptions[idx].timestamp_s),
                frame_number: frame,
                information: c[2].to_string(),
            })
        });
        match parsed {
            Some(r) => records.push(r),
            None => leftover.push(line.to_string()),
        }
    }
    (records, leftover)
}

/// Inverse of [`parse_incidents`] on well-formed input.
pub fn render_incident_block(records: &[IncidentRecord]) -> String {
    records
        .iter()
        .map(|r| format!("FRAME {}: {}", r.frame_number, r.information))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks `query` of the description corpus and parses the incident table.
/// `descriptions` must be sorted by frame number.
pub fn query_incidents(
    client: &VlmClient,
    descriptions: &[FrameDescription],
    query: &str,
    cfg: &PipelineConfig,
) -> Result<QueryRecord, SummarizeError> {
    if query.trim().is_empty() {
        return Err(SummarizeError::EmptyQuery);
    }
    let paragraph = build_paragraph(descriptions);
    if paragraph.is_empty() {
        return Err(SummarizeError::EmptyCorpus);
    }
    let prompt = query_prompt(&paragraph, query, cfg)?;
    let resp = client.generate_text(&prompt, &cfg.text_params)?;
    let (incidents, unparsed_lines) = parse_incidents(&resp.text, descriptions);
    let warning = if resp.blocked {
        Some("the text provider blocked this query".to_string())
    } else if incidents.is_empty() && !resp.text.trim().is_empty() {
        Some("no incident lines could be parsed from the provider output".to_string())
    } else {
        None
    };
    Ok(QueryRecord {
        query: query.to_string(),
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        incidents,
        raw_text: resp.text,
        unparsed_lines,
        warning,
        provider_id: resp.provider_id,
        latency_s: resp.latency_s,
    })
}

/// Per-frame vision call with the query embedded in the describe prompt.
pub fn direct_describe_query(
    client: &VlmClient,
    frame: &FrameSample,
    query: &str,
    cfg: &PipelineConfig,
) -> Result<ProviderResponse, SummarizeError> {
    if cfg.prompting_mode != PromptingMode::Direct {
        return Err(SummarizeError::NotDirectMode);
    }
    if query.trim().is_empty() {
        return Err(SummarizeError::EmptyQuery);
    }
    let bindings = BTreeMap::from([(QUERY_PLACEHOLDER.to_string(), query.to_string())]);
    let prompt = render_prompt(&cfg.describe_prompt, &bindings)?;
    let request = ProviderRequest {
        images: vec![frame.image.clone()],
        prompt,
        params: cfg.vision_params.clone(),
        frame_numbers: vec![frame.frame_number],
    };
    Ok(client.describe(&request)?)
}
