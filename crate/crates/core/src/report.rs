//! Run reports. Every rendering is produced from one [`RunReport`] value, so
//! the JSON, CSV and Markdown forms cannot disagree.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::corpus::{format_mmss, AnalysisRun, FrameDescription, RunStatus};
use crate::eval::{StageStats, TimingStats};
use crate::summarize::{IncidentRecord, QueryRecord};

pub const INCIDENT_COLUMNS: [&str; 3] = ["Timestamp", "Frame Number", "Information"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("run {0} has neither a summary nor incidents to report")]
    Incomplete(String),
    #[error("rendering failed: {0}")]
    Render(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    StructuredJson,
    CsvTable,
    Markdown,
}

impl ReportFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            ReportFormat::StructuredJson => "application/json",
            ReportFormat::CsvTable => "text/csv; charset=utf-8",
            ReportFormat::Markdown => "text/markdown; charset=utf-8",
        }
    }

    /// Name of the artifact written into the run directory.
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::StructuredJson => "report.json",
            ReportFormat::CsvTable => "incidents.csv",
            ReportFormat::Markdown => "report.md",
        }
    }

    pub const ALL: [ReportFormat; 3] = [
        ReportFormat::StructuredJson,
        ReportFormat::CsvTable,
        ReportFormat::Markdown,
    ];
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" | "structured_json" => Ok(ReportFormat::StructuredJson),
            "csv" | "csv_table" => Ok(ReportFormat::CsvTable),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(format!(
                "unknown report format {other:?} (expected json, csv or markdown)"
            )),
        }
    }
}

/// Provider output of one query, kept verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawOutput {
    pub query: String,
    pub text: String,
    pub unparsed_lines: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub source: String,
    pub status: RunStatus,
    pub summary: Option<String>,
    /// The query behind `incidents`, if any.
    pub query: Option<String>,
    pub incidents: Vec<IncidentRecord>,
    pub descriptions: Vec<FrameDescription>,
    pub stats: TimingStats,
    pub config: PipelineConfig,
    pub raw_outputs: Vec<RawOutput>,
}

impl RunReport {
    pub fn from_run(run: &AnalysisRun) -> Self {
        let last: Option<&QueryRecord> = run.queries.last();
        Self {
            run_id: run.run_id.clone(),
            source: run.source.clone(),
            status: run.status,
            summary: run.summary.clone(),
            query: last.map(|q| q.query.clone()),
            incidents: run.incidents().to_vec(),
            descriptions: run.descriptions.clone(),
            stats: run.stats.clone(),
            config: run.config_snapshot.clone(),
            raw_outputs: run
                .queries
                .iter()
                .map(|q| RawOutput {
                    query: q.query.clone(),
                    text: q.raw_text.clone(),
                    unparsed_lines: q.unparsed_lines.clone(),
                    warning: q.warning.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serialises");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> serde_json::Result<Self> {
        serde_json::from_slice(bytes)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| ReportError::Render(e.to_string());
        w.write_record(INCIDENT_COLUMNS).map_err(err)?;
        for r in &self.incidents {
            w.write_record([
                r.timestamp.as_str(),
                &r.frame_number.to_string(),
                r.information.as_str(),
            ])
            .map_err(err)?;
        }
        w.into_inner().map_err(|e| ReportError::Render(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Run {}\n", self.run_id);
        if !self.source.is_empty() {
            let _ = writeln!(md, "Source: `{}`\n", self.source);
        }

        md.push_str("## Summary\n\n");
        match &self.summary {
            Some(s) => {
                md.push_str(s.trim_end());
                md.push_str("\n\n");
            }
            None => md.push_str("_No summary._\n\n"),
        }

        md.push_str("## Incidents\n\n");
        if let Some(q) = &self.query {
            let _ = writeln!(md, "Query: {}\n", single_line(q));
        }
        md.push_str(&markdown_table(&self.incidents));
        md.push('\n');

        md.push_str("## Frame descriptions\n\n");
        if self.descriptions.is_empty() {
            md.push_str("_None._\n");
        }
        for d in &self.descriptions {
            if d.blocked {
                let _ = writeln!(
                    md,
                    "- Frame {} ({}): _blocked by the provider_",
                    d.frame_number,
                    format_mmss(d.timestamp_s)
                );
            } else {
                let _ = writeln!(
                    md,
                    "- Frame {} ({}): {}",
                    d.frame_number,
                    format_mmss(d.timestamp_s),
                    single_line(&d.text)
                );
            }
        }
        md.push('\n');

        md.push_str("## Timing\n\n");
        stats_line(&mut md, "vision", &self.stats.vision);
        stats_line(&mut md, "text", &self.stats.text);

        let leftovers: Vec<_> = self
            .raw_outputs
            .iter()
            .filter(|r| !r.unparsed_lines.is_empty() || r.warning.is_some())
            .collect();
        if !leftovers.is_empty() {
            md.push_str("\n## Unparsed provider output\n");
            for r in leftovers {
                let _ = writeln!(md, "\nQuery: {}\n", single_line(&r.query));
                if let Some(w) = &r.warning {
                    let _ = writeln!(md, "Warning: {w}\n");
                }
                md.push_str("```text\n");
                for line in &r.unparsed_lines {
                    md.push_str(&line.replace("```", "'''"));
                    md.push('\n');
                }
                md.push_str("```\n");
            }
        }
        md
    }
}

fn stats_line(md: &mut String, name: &str, s: &StageStats) {
    if s.count == 0 {
        let _ = writeln!(md, "- {name}: no calls");
    } else {
        let _ = writeln!(
            md,
            "- {name}: {} calls, total {:.3} s, mean {:.3} s, min {:.3} s, max {:.3} s",
            s.count, s.total_s, s.mean_s, s.min_s, s.max_s
        );
    }
}

fn single_line(s: &str) -> String {
    s.split(['\r', '\n'])
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn cell(s: &str) -> String {
    single_line(s).replace('|', "\\|")
}

/// The three-column incident table.
pub fn markdown_table(rows: &[IncidentRecord]) -> String {
    let mut t = format!("| {} |\n|---|---|---|\n", INCIDENT_COLUMNS.join(" | "));
    for r in rows {
        let _ = writeln!(
            t,
            "| {} | {} | {} |",
            cell(&r.timestamp),
            r.frame_number,
            cell(&r.information)
        );
    }
    t
}

/// Renders `run` in `format`. Fails when there is nothing to report.
pub fn render_report(run: &AnalysisRun, format: ReportFormat) -> Result<Vec<u8>, ReportError> {
    if run.summary.is_none() && run.incidents().is_empty() {
        return Err(ReportError::Incomplete(run.run_id.clone()));
    }
    let report = RunReport::from_run(run);
    match format {
        ReportFormat::StructuredJson => Ok(report.to_json()),
        ReportFormat::CsvTable => report.to_csv(),
        ReportFormat::Markdown => Ok(report.to_markdown().into_bytes()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE1: [(u64, &str); 7] = [
        (2, "Shows the general traffic conditions during the day"),
        (
            10,
            "Shows the traffic situation on the road, with various types of vehicles",
        ),
        (15, "Shows a motorcycle accident"),
        (18, "Shows a motorcycle rider who has lost control of his bike"),
        (
            20,
            "Shows a motorcycle rider who has been knocked off his bike by a car.",
        ),
        (
            23,
            "Shows a motorcycle rider who has been injured in a collision with a car.",
        ),
        (
            27,
            "Shows a road with blue and white lines, surrounded by trees and buildings.",
        ),
    ];

    fn table1_run() -> AnalysisRun {
        let mut run = AnalysisRun::new("run-table1", PipelineConfig::default());
        run.status = RunStatus::Complete;
        run.summary = Some("The video shows a busy road.".into());
        run.descriptions = TABLE1
            .iter()
            .map(|&(f, t)| FrameDescription::new(f, f as f64, t))
            .collect();
        run.queries.push(QueryRecord {
            query: "key incidents".into(),
            created_at: "2026-01-01T00:00:00Z".into(),
            incidents: TABLE1
                .iter()
                .map(|&(f, t)| IncidentRecord {
                    timestamp: format_mmss(f as f64),
                    frame_number: f,
                    information: t.into(),
                })
                .collect(),
            raw_text: String::new(),
            unparsed_lines: vec![],
            warning: None,
            provider_id: "mock".into(),
            latency_s: 0.0,
        });
        run
    }

    /// Rows of the first pipe table in `md`, split into trimmed cells.
    fn table_rows(md: &str) -> Vec<Vec<String>> {
        md.lines()
            .skip_while(|l| !l.starts_with('|'))
            .take_while(|l| l.starts_with('|'))
            .map(|l| l.trim_matches('|').split(" | ").map(|c| c.trim().to_string()).collect())
            .collect()
    }

    #[test]
    fn markdown_table_shape() {
        let md = String::from_utf8(render_report(&table1_run(), ReportFormat::Markdown).unwrap()).unwrap();
        let rows = table_rows(&md);
        assert_eq!(rows[0], INCIDENT_COLUMNS.map(String::from).to_vec());
        assert_eq!(rows.len(), 2 + 7);
        assert_eq!(
            rows[2],
            vec!["00:02", "2", "Shows the general traffic conditions during the day"]
        );
    }

    #[test]
    fn summary_only_has_empty_table() {
        let mut run = table1_run();
        run.queries.clear();
        let md = String::from_utf8(render_report(&run, ReportFormat::Markdown).unwrap()).unwrap();
        assert!(md.contains("The video shows a busy road."));
        assert_eq!(table_rows(&md).len(), 2);
        let csv = render_report(&run, ReportFormat::CsvTable).unwrap();
        assert_eq!(csv, b"Timestamp,Frame Number,Information\n");
    }

    #[test]
    fn incomplete_run_rejected() {
        let run = AnalysisRun::new("run-x", PipelineConfig::default());
        assert!(matches!(
            render_report(&run, ReportFormat::Markdown),
            Err(ReportError::Incomplete(_))
        ));
    }

    #[test]
    fn deterministic_and_round_trips() {
        let run = table1_run();
        for f in ReportFormat::ALL {
            assert_eq!(render_report(&run, f).unwrap(), render_report(&run, f).unwrap());
        }
        let json = render_report(&run, ReportFormat::StructuredJson).unwrap();
        assert_eq!(RunReport::from_json(&json).unwrap(), RunReport::from_run(&run));
    }

    #[test]
    fn csv_rows_and_quoting() {
        let mut run = table1_run();
        run.queries[0].incidents[0].information = "cars, \"buses\"".into();
        let csv = String::from_utf8(render_report(&run, ReportFormat::CsvTable).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 8);
        assert_eq!(csv.lines().nth(1).unwrap(), "00:02,2,\"cars, \"\"buses\"\"\"");
    }

    #[test]
    fn cells_are_escaped() {
        let t = markdown_table(&[IncidentRecord {
            timestamp: "00:01".into(),
            frame_number: 1,
            information: "a | b\nc".into(),
        }]);
        assert!(t.ends_with("| 00:01 | 1 | a \\| b c |\n"));
    }

    #[test]
    fn unparsed_output_is_shown() {
        let mut run = table1_run();
        run.queries[0].unparsed_lines = vec!["FRAME two: nope".into()];
        let md = String::from_utf8(render_report(&run, ReportFormat::Markdown).unwrap()).unwrap();
        assert!(md.contains("## Unparsed provider output"));
        assert!(md.contains("FRAME two: nope"));
    }

    #[test]
    fn format_names() {
        assert_eq!("md".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
        assert_eq!("csv_table".parse::<ReportFormat>().unwrap(), ReportFormat::CsvTable);
        assert!("pdf".parse::<ReportFormat>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn csv_has_one_row_per_incident(infos in prop::collection::vec(".{0,40}", 0..20)) {
                let mut run = table1_run();
                run.queries[0].incidents = infos
                    .iter()
                    .enumerate()
                    .map(|(i, s)| IncidentRecord { timestamp: format_mmss(i as f64), frame_number: i as u64, information: s.clone() })
                    .collect();
                let bytes = render_report(&run, ReportFormat::CsvTable).unwrap();
                let mut rdr = csv::Reader::from_reader(bytes.as_slice());
                let rows: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>().unwrap();
                prop_assert_eq!(rows.len(), infos.len());
                for (row, info) in rows.iter().zip(&infos) {
                    prop_assert_eq!(&row[2], info.as_str());
                }
                let json = render_report(&run, ReportFormat::StructuredJson).unwrap();
                prop_assert_eq!(RunReport::from_json(&json).unwrap(), RunReport::from_run(&run));
            }
        }
    }
}
