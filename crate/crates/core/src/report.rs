//! Report emission: canonical JSON, CSV, and grouped markdown tables.
//!
//! Reports map `(model, dataset, method, modality)` to confusion metrics.
//! Emission order is deterministic (sorted by that key) so a repeated run
//! over identical inputs produces byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::MetricsReport;

/// Input modality a report row was evaluated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vqa,
    Qa,
    ImageOnly,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Vqa => "vqa",
            Modality::Qa => "qa",
            Modality::ImageOnly => "image_only",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<Self> {
        match s {
            "vqa" => Some(Modality::Vqa),
            "qa" => Some(Modality::Qa),
            "image_only" => Some(Modality::ImageOnly),
            _ => None,
        }
    }
}

/// Grouping key for one report row.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReportKey {
    pub model: String,
    pub dataset: String,
    pub method: String,
    pub modality: Modality,
}

/// One aggregated row: metrics plus how many records were excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub metrics: MetricsReport,
    /// Records excluded from `total` because of hard failures (transport
    /// errors, unrecoverable parses); reported separately, never counted.
    pub flagged: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            "md" | "markdown" => Some(ReportFormat::Markdown),
            _ => None,
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("cannot emit an empty report")]
    Empty,
    #[error("failed to write report {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize)]
struct JsonRow<'a> {
    model: &'a str,
    dataset: &'a str,
    method: &'a str,
    modality: &'a str,
    total: u64,
    tp: u64,
    fp: u64,
    tn: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    flagged: u64,
    unc_r: f64,
    acc: f64,
    align: f64,
    conser: f64,
    overco: f64,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    reports: Vec<JsonRow<'a>>,
    warnings: &'a [String],
}

/// Renders the report in the requested format.
pub fn render_report(
    reports: &BTreeMap<ReportKey, ReportEntry>,
    warnings: &[String],
    format: ReportFormat,
) -> Result<String, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::Empty);
    }
    let text = match format {
        ReportFormat::Json => {
            let rows: Vec<JsonRow> = reports
                .iter()
                .map(|(key, entry)| JsonRow {
                    model: &key.model,
                    dataset: &key.dataset,
                    method: &key.method,
                    modality: key.modality.as_str(),
                    total: entry.metrics.total,
                    tp: entry.metrics.tp,
                    fp: entry.metrics.fp,
                    tn: entry.metrics.tn,
                    fn_: entry.metrics.fn_,
                    flagged: entry.flagged,
                    unc_r: entry.metrics.unc_r,
                    acc: entry.metrics.acc,
                    align: entry.metrics.align,
                    conser: entry.metrics.conser,
                    overco: entry.metrics.overco,
                })
                .collect();
            let mut text = serde_json::to_string_pretty(&JsonReport { reports: rows, warnings })
                .expect("report serialization cannot fail");
            text.push('\n');
            text
        }
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer
                .write_record([
                    "model", "dataset", "method", "modality", "total", "tp", "fp", "tn", "fn",
                    "unc_r", "acc", "align", "conser", "overco",
                ])
                .expect("in-memory csv write cannot fail");
            for (key, entry) in reports {
                let m = &entry.metrics;
                writer
                    .write_record([
                        key.model.as_str(),
                        key.dataset.as_str(),
                        key.method.as_str(),
                        key.modality.as_str(),
                        &m.total.to_string(),
                        &m.tp.to_string(),
                        &m.fp.to_string(),
                        &m.tn.to_string(),
                        &m.fn_.to_string(),
                        &format!("{:.4}", m.unc_r),
                        &format!("{:.4}", m.acc),
                        &format!("{:.4}", m.align),
                        &format!("{:.4}", m.conser),
                        &format!("{:.4}", m.overco),
                    ])
                    .expect("in-memory csv write cannot fail");
            }
            String::from_utf8(writer.into_inner().expect("csv flush cannot fail"))
                .expect("csv output is utf-8")
        }
        ReportFormat::Markdown => {
            let mut text = String::new();
            let mut current_group: Option<(String, String)> = None;
            for (key, entry) in reports {
                let group = (key.model.clone(), key.dataset.clone());
                if current_group.as_ref() != Some(&group) {
                    if current_group.is_some() {
                        text.push('\n');
                    }
                    writeln!(text, "## {} — {}\n", key.model, key.dataset).unwrap();
                    writeln!(text, "| method | modality | total | Unc-R | Acc | Align | Conser | Overco |").unwrap();
                    writeln!(text, "|---|---|---|---|---|---|---|---|").unwrap();
                    current_group = Some(group);
                }
                let m = &entry.metrics;
                writeln!(
                    text,
                    "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    key.method,
                    key.modality.as_str(),
                    m.total,
                    m.unc_r,
                    m.acc,
                    m.align,
                    m.conser,
                    m.overco
                )
                .unwrap();
            }
            let flagged: Vec<String> = reports
                .iter()
                .filter(|(_, e)| e.flagged > 0)
                .map(|(k, e)| format!("{}/{}/{}/{}: {} flagged", k.model, k.dataset, k.method, k.modality.as_str(), e.flagged))
                .collect();
            if !flagged.is_empty() {
                writeln!(text, "\nFlagged records (excluded from totals): {}", flagged.join("; ")).unwrap();
            }
            for warning in warnings {
                writeln!(text, "\n> warning: {warning}").unwrap();
            }
            text
        }
    };
    Ok(text)
}

/// Renders and writes the report to `path`, returning the rendered text.
pub fn emit_report(
    reports: &BTreeMap<ReportKey, ReportEntry>,
    warnings: &[String],
    format: ReportFormat,
    path: &Path,
) -> Result<String, ReportError> {
    let text = render_report(reports, warnings, format)?;
    std::fs::write(path, &text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_reports() -> BTreeMap<ReportKey, ReportEntry> {
        let mut map = BTreeMap::new();
        map.insert(
            ReportKey {
                model: "m1".into(),
                dataset: "d1".into(),
                method: "vanilla".into(),
                modality: Modality::Vqa,
            },
            ReportEntry {
                metrics: MetricsReport::from_counts(8, 1, 1, 0).unwrap(),
                flagged: 0,
            },
        );
        map.insert(
            ReportKey {
                model: "m1".into(),
                dataset: "d1".into(),
                method: "random".into(),
                modality: Modality::Vqa,
            },
            ReportEntry {
                metrics: MetricsReport::from_counts(5, 2, 2, 1).unwrap(),
                flagged: 2,
            },
        );
        map
    }

    #[test]
    fn csv_has_ten_numeric_columns_per_row() {
        let text = render_report(&sample_reports(), &[], ReportFormat::Csv).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(
            header,
            "model,dataset,method,modality,total,tp,fp,tn,fn,unc_r,acc,align,conser,overco"
        );
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 14);
            // The last ten columns are numeric.
            for field in &fields[4..] {
                field.parse::<f64>().unwrap();
            }
        }
    }

    #[test]
    fn markdown_rows_sort_by_method_name() {
        let text = render_report(&sample_reports(), &[], ReportFormat::Markdown).unwrap();
        let random_pos = text.find("| random |").unwrap();
        let vanilla_pos = text.find("| vanilla |").unwrap();
        assert!(random_pos < vanilla_pos, "rows must sort by method name");
        assert!(text.contains("2 flagged"));
    }

    #[test]
    fn json_round_trips_to_full_precision() {
        let reports = sample_reports();
        let text = render_report(&reports, &[], ReportFormat::Json).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let rows = value["reports"].as_array().unwrap();
        assert_eq!(rows.len(), 2);
        // Sorted by key: method "random" < "vanilla".
        assert_eq!(rows[0]["method"], "random");
        let entry = &reports[&ReportKey {
            model: "m1".into(),
            dataset: "d1".into(),
            method: "random".into(),
            modality: Modality::Vqa,
        }];
        assert_eq!(rows[0]["align"].as_f64().unwrap(), entry.metrics.align);
        assert_eq!(rows[0]["fn"].as_u64().unwrap(), entry.metrics.fn_);
        assert_eq!(rows[0]["flagged"].as_u64().unwrap(), 2);
    }

    #[test]
    fn rendering_is_deterministic() {
        for format in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
            let a = render_report(&sample_reports(), &["w".into()], format).unwrap();
            let b = render_report(&sample_reports(), &["w".into()], format).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(matches!(
            render_report(&BTreeMap::new(), &[], ReportFormat::Json),
            Err(ReportError::Empty)
        ));
    }
}
