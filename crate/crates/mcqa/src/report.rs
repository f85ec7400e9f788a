//! Report emission: a comparison table for humans, tab-separated records for
//! spreadsheets, and JSON that round-trips to an equal report.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::runner::{EvalReport, Protocol, Shots};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TableText,
    Delimited,
    Structured,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" | "table_text" => Ok(ReportFormat::TableText),
            "tsv" | "delimited" => Ok(ReportFormat::Delimited),
            "json" | "structured" => Ok(ReportFormat::Structured),
            other => Err(format!("unknown format {other:?} (table|tsv|json)")),
        }
    }
}

/// Orders comparison columns: ascending fixed shot counts, then max-shot;
/// CP before MCP within a shot setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct ColumnKey {
    shots_rank: (u8, usize),
    protocol_rank: u8,
}

impl ColumnKey {
    fn new(shots: Shots, protocol: Protocol) -> Self {
        ColumnKey {
            shots_rank: match shots {
                Shots::Fixed(k) => (0, k),
                Shots::Max => (1, 0),
            },
            protocol_rank: match protocol {
                Protocol::Cp => 0,
                Protocol::Mcp => 1,
            },
        }
    }

    fn label(&self) -> String {
        let shots = match self.shots_rank {
            (0, k) => format!("{k}-shot"),
            _ => "max-shot".to_string(),
        };
        let protocol = if self.protocol_rank == 0 { "CP" } else { "MCP" };
        format!("{shots} {protocol}")
    }
}

fn pad(text: &str, width: usize) -> String {
    format!("{text:<width$}")
}

/// Renders one body row per dataset, in dataset name order, with accuracy
/// cells per (shots, protocol) column. Cells absent from the supplied
/// reports render as `---`.
pub fn render_comparison(reports: &[&EvalReport]) -> String {
    let mut columns: BTreeSet<ColumnKey> = BTreeSet::new();
    // dataset -> (N, K, column -> accuracy)
    let mut rows: BTreeMap<String, (usize, usize, BTreeMap<ColumnKey, f64>)> = BTreeMap::new();
    for report in reports {
        let key = ColumnKey::new(report.config.shots, report.config.protocol);
        columns.insert(key);
        let row = rows
            .entry(report.dataset_name.clone())
            .or_insert((report.option_count, 0, BTreeMap::new()));
        row.0 = row.0.max(report.option_count);
        row.1 = row.1.max(report.exemplar_count);
        row.2.insert(key, report.metrics.accuracy);
    }

    let mut header = vec!["Dataset".to_string(), "N".to_string(), "K".to_string()];
    header.extend(columns.iter().map(|c| c.label()));
    let mut body: Vec<Vec<String>> = Vec::new();
    for (dataset, (n, k, cells)) in &rows {
        let mut row = vec![dataset.clone(), n.to_string(), k.to_string()];
        for column in &columns {
            row.push(match cells.get(column) {
                Some(accuracy) => format!("{:.1}", accuracy * 100.0),
                None => "---".to_string(),
            });
        }
        body.push(row);
    }

    let widths: Vec<usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| {
            body.iter()
                .map(|row| row[i].len())
                .chain(std::iter::once(h.len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let render_row = |row: &[String]| -> String {
        row.iter()
            .zip(&widths)
            .map(|(cell, width)| pad(cell, *width))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    out.push_str(&render_row(&header));
    out.push('\n');
    for row in &body {
        out.push_str(&render_row(row));
        out.push('\n');
    }
    out
}

/// Per-strategy sub-table for normalization sweeps.
fn render_strategy_breakdown(report: &EvalReport) -> String {
    let mut out = String::from("strategy  accuracy\n");
    for (strategy, accuracy) in &report.metrics.per_strategy_accuracy {
        let marker = if Some(strategy) == report.metrics.best_strategy.as_ref() {
            " (best)"
        } else {
            ""
        };
        out.push_str(&format!("{strategy:<8}  {:.1}{marker}\n", accuracy * 100.0));
    }
    out
}

fn render_tag_breakdown(report: &EvalReport) -> String {
    let mut out = String::from("tag  answered  accuracy\n");
    for (tag, metrics) in &report.metrics.per_tag {
        out.push_str(&format!(
            "{tag}  {}  {:.1}\n",
            metrics.answered,
            metrics.accuracy * 100.0
        ));
    }
    out
}

fn render_table_text(report: &EvalReport) -> String {
    let mut out = render_comparison(&[report]);
    out.push('\n');
    out.push_str(&format!(
        "answered {}  skipped {}  backend calls {}  floored symbols {}{}\n",
        report.metrics.answered,
        report.metrics.skipped,
        report.metrics.call_count,
        report.metrics.floored_symbols,
        if report.partial { "  [PARTIAL]" } else { "" },
    ));
    if report.metrics.per_strategy_accuracy.len() > 1 {
        out.push('\n');
        out.push_str(&render_strategy_breakdown(report));
    }
    if !report.metrics.per_tag.is_empty() {
        out.push('\n');
        out.push_str(&render_tag_breakdown(report));
    }
    out
}

fn render_delimited(report: &EvalReport) -> String {
    let mut out = String::from("id\ttag\tn\tk\tstrategy\tchosen\tgold\tcorrect\tcalls\tfloored\tskipped\n");
    for record in &report.records {
        let tag = record.tag.as_deref().unwrap_or("-");
        if let Some(reason) = &record.skipped {
            out.push_str(&format!(
                "{}\t{tag}\t{}\t{}\t-\t-\t{}\t-\t{}\t{}\t{}\n",
                record.id,
                record.n_options,
                record.exemplar_count,
                record.gold_index,
                record.calls,
                record.floored,
                reason.replace(['\t', '\n'], " "),
            ));
            continue;
        }
        for (strategy, chosen) in &record.chosen {
            out.push_str(&format!(
                "{}\t{tag}\t{}\t{}\t{strategy}\t{chosen}\t{}\t{}\t{}\t{}\t-\n",
                record.id,
                record.n_options,
                record.exemplar_count,
                record.gold_index,
                record.correct[strategy],
                record.calls,
                record.floored,
            ));
        }
    }
    out
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::TableText => render_table_text(report),
        ReportFormat::Delimited => render_delimited(report),
        ReportFormat::Structured => {
            let mut json =
                serde_json::to_string_pretty(report).expect("report serializes");
            json.push('\n');
            json
        }
    }
}

/// Inverse of the structured emission.
pub fn parse_report(text: &str) -> Result<EvalReport, serde_json::Error> {
    serde_json::from_str(text)
}

pub fn write_report(
    report: &EvalReport,
    format: ReportFormat,
    path: &Path,
) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(emit_report(report, format).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mocks::MockModel;
    use crate::dataset::{Dataset, PassageKind, Question, Split};
    use crate::runner::{evaluate_dataset, BackendConfig, EvalConfig};

    fn demo_report(name: &str, questions: usize) -> EvalReport {
        let dataset = Dataset::new(
            name,
            Split::Test,
            (0..questions)
                .map(|i| Question {
                    id: format!("q{i}"),
                    passage: None,
                    passage_kind: PassageKind::None,
                    stem: format!("stem {i} of {name}"),
                    options: vec!["left".into(), format!("right {i}")],
                    gold_index: i % 2,
                })
                .collect(),
            vec![],
        )
        .unwrap();
        let backend = MockModel::oracle_for(&dataset);
        let config = EvalConfig {
            backend: BackendConfig {
                kind: "mock:oracle".into(),
                ..BackendConfig::default()
            },
            ..EvalConfig::default()
        };
        evaluate_dataset(&dataset, &config, &backend).unwrap()
    }

    #[test]
    fn structured_round_trip_is_identity() {
        let report = demo_report("roundtrip", 5);
        let emitted = emit_report(&report, ReportFormat::Structured);
        let parsed = parse_report(&emitted).unwrap();
        assert_eq!(parsed, report);
        // Emission is stable too.
        assert_eq!(emit_report(&parsed, ReportFormat::Structured), emitted);
    }

    #[test]
    fn empty_partial_report_renders_header_only_table() {
        let mut report = demo_report("empty", 1);
        report.records.clear();
        report.metrics = crate::runner::compute_metrics(&[]);
        report.partial = true;
        let table = render_comparison(&[&report]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2, "header plus the single dataset row");
        assert!(lines[0].starts_with("Dataset"));
        let delimited = emit_report(&report, ReportFormat::Delimited);
        assert_eq!(delimited.lines().count(), 1, "header only");
    }

    #[test]
    fn two_dataset_rows_sort_by_name() {
        let zebra = demo_report("zebra", 3);
        let alpha = demo_report("alpha", 3);
        let table = render_comparison(&[&zebra, &alpha]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("alpha"));
        assert!(lines[2].starts_with("zebra"));
        // Golden shape for the two-dataset comparison.
        assert_eq!(lines[0], "Dataset  N  K  0-shot MCP");
        assert_eq!(lines[1], "alpha    2  0  100.0");
    }

    #[test]
    fn delimited_has_one_row_per_record_strategy() {
        let report = demo_report("tsv", 4);
        let tsv = emit_report(&report, ReportFormat::Delimited);
        assert_eq!(tsv.lines().count(), 1 + 4);
        assert!(tsv.lines().skip(1).all(|l| l.contains("\tmcp\t")));
    }

    #[test]
    fn format_parsing() {
        assert_eq!("table".parse::<ReportFormat>().unwrap(), ReportFormat::TableText);
        assert_eq!("json".parse::<ReportFormat>().unwrap(), ReportFormat::Structured);
        assert_eq!("tsv".parse::<ReportFormat>().unwrap(), ReportFormat::Delimited);
        assert!("yaml".parse::<ReportFormat>().is_err());
    }
}
