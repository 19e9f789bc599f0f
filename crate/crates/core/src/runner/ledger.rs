//! Append-only JSON Lines run ledger.
//!
//! Every elicited signal, graded outcome, flagged record, threshold fit, and
//! warning is one self-describing line, fsynced in batches so a crashed run
//! loses at most the current batch. Resume reads the ledger back and skips
//! (method, modality, record) triples that already reached an outcome or a
//! hard flag.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::ThresholdFit;
use crate::elicit::SignalKind;
use crate::metrics::Cell;
use crate::report::Modality;

use super::RunError;

/// Lines are fsynced whenever this many have accumulated since the last sync.
const SYNC_BATCH: usize = 32;

/// How bad a flagged record is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagSeverity {
    /// The record still produced an outcome (e.g. unparsed confidence mapped
    /// to unconfident, or some consistency samples were dropped).
    Soft,
    /// The record is excluded from the evaluated total.
    Hard,
}

/// One ledger line. The `kind` tag makes each line self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerLine {
    /// Raw confidence signal before thresholding/grading.
    Signal {
        method: String,
        modality: Modality,
        record_id: String,
        answer_text: String,
        signal_kind: SignalKind,
        #[serde(skip_serializing_if = "Option::is_none")]
        binary_value: Option<bool>,
        #[serde(skip_serializing_if = "Option::is_none")]
        score_value: Option<f64>,
    },
    /// Graded confusion-cell outcome for one record.
    Outcome {
        model: String,
        dataset: String,
        method: String,
        modality: Modality,
        record_id: String,
        answer_text: String,
        correct: bool,
        confident: bool,
        cell: Cell,
    },
    /// Record-level anomaly; hard flags exclude the record from totals.
    Flagged {
        model: String,
        dataset: String,
        method: String,
        modality: Modality,
        record_id: String,
        severity: FlagSeverity,
        reason: String,
    },
    /// A threshold fitted on the held-out split.
    Fit {
        method: String,
        modality: Modality,
        fit: ThresholdFit,
    },
    /// Run-level warning that also lands in the report.
    Warning { message: String },
}

/// Buffered, fsync-batched writer for `ledger.jsonl`.
pub struct Ledger {
    writer: BufWriter<File>,
    path: PathBuf,
    pending: usize,
}

impl Ledger {
    /// Creates (truncating) the ledger at `dir/ledger.jsonl`.
    pub fn create(dir: &Path) -> Result<Self, RunError> {
        std::fs::create_dir_all(dir).map_err(|e| RunError::ledger_io(dir, e))?;
        let path = dir.join("ledger.jsonl");
        let file = File::create(&path).map_err(|e| RunError::ledger_io(&path, e))?;
        Ok(Self {
            writer: BufWriter::new(file),
            path,
            pending: 0,
        })
    }

    /// Opens the ledger for appending, returning the resume state recovered
    /// from the lines already present. A torn trailing line (crash mid-write)
    /// is dropped; corruption anywhere else is an error.
    pub fn resume(dir: &Path) -> Result<(Self, ResumeState), RunError> {
        let path = dir.join("ledger.jsonl");
        let (state, tail) = if path.exists() {
            let scan = scan_for_resume(&path)?;
            (
                ResumeState::from_lines(scan.lines),
                Some((scan.valid_len, scan.needs_newline)),
            )
        } else {
            std::fs::create_dir_all(dir).map_err(|e| RunError::ledger_io(dir, e))?;
            (ResumeState::default(), None)
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| RunError::ledger_io(&path, e))?;
        let mut needs_newline = false;
        if let Some((valid_len, missing_newline)) = tail {
            let current = file
                .metadata()
                .map_err(|e| RunError::ledger_io(&path, e))?
                .len();
            if current > valid_len {
                file.set_len(valid_len)
                    .map_err(|e| RunError::ledger_io(&path, e))?;
            }
            needs_newline = missing_newline;
        }
        let mut ledger = Self {
            writer: BufWriter::new(file),
            path,
            pending: 0,
        };
        if needs_newline {
            // The last valid line lacks its terminator; add it so the next
            // append starts a fresh line.
            ledger
                .writer
                .write_all(b"\n")
                .map_err(|e| RunError::ledger_io(&ledger.path, e))?;
            ledger.pending += 1;
        }
        Ok((ledger, state))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one line and fsyncs when the batch fills.
    pub fn append(&mut self, line: &LedgerLine) -> Result<(), RunError> {
        let json = serde_json::to_string(line)
            .map_err(|e| RunError::Other(format!("ledger line serialization: {e}")))?;
        writeln!(self.writer, "{json}").map_err(|e| RunError::ledger_io(&self.path, e))?;
        self.pending += 1;
        if self.pending >= SYNC_BATCH {
            self.sync()?;
        }
        Ok(())
    }

    /// Flushes buffered lines to the OS and fsyncs the file.
    pub fn sync(&mut self) -> Result<(), RunError> {
        self.writer
            .flush()
            .map_err(|e| RunError::ledger_io(&self.path, e))?;
        self.writer
            .get_ref()
            .sync_all()
            .map_err(|e| RunError::ledger_io(&self.path, e))?;
        self.pending = 0;
        Ok(())
    }
}

/// Result of scanning an existing ledger for resumption.
struct LedgerScan {
    lines: Vec<LedgerLine>,
    /// Byte length of the valid prefix; anything beyond is a torn tail.
    valid_len: u64,
    /// The last valid line is missing its trailing newline.
    needs_newline: bool,
}

fn scan_for_resume(path: &Path) -> Result<LedgerScan, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::ledger_io(path, e))?;
    let mut lines = Vec::new();
    let mut offset = 0usize;
    let mut valid_len = 0usize;
    let mut needs_newline = false;
    for raw in text.split_inclusive('\n') {
        let start = offset;
        offset += raw.len();
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            valid_len = offset;
            continue;
        }
        match serde_json::from_str::<LedgerLine>(trimmed) {
            Ok(line) => {
                lines.push(line);
                valid_len = offset;
                needs_newline = !raw.ends_with('\n');
            }
            Err(err) => {
                // A complete line (newline-terminated, or followed by more
                // content) that fails to parse is corruption, not a torn
                // write.
                if raw.ends_with('\n') || offset < text.len() {
                    return Err(RunError::Other(format!(
                        "malformed ledger line at byte {start} in {}: {err}",
                        path.display()
                    )));
                }
                log::warn!(
                    "dropping torn trailing ledger line at byte {start} in {}",
                    path.display()
                );
                break;
            }
        }
    }
    Ok(LedgerScan {
        lines,
        valid_len: valid_len as u64,
        needs_newline,
    })
}

/// Reads every line of a ledger file, failing on any malformed line.
pub fn read_ledger(path: &Path) -> Result<Vec<LedgerLine>, RunError> {
    let file = File::open(path).map_err(|e| RunError::ledger_io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| RunError::ledger_io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LedgerLine = serde_json::from_str(&line).map_err(|e| {
            RunError::Other(format!(
                "malformed ledger line {} in {}: {e}",
                i + 1,
                path.display()
            ))
        })?;
        lines.push(parsed);
    }
    Ok(lines)
}

/// What a resumed run already knows: completed triples, their outcomes and
/// flags (for aggregation), and previously fitted thresholds.
#[derive(Debug, Default)]
pub struct ResumeState {
    completed: HashSet<(String, Modality, String)>,
    pub outcomes: Vec<LedgerLine>,
    pub hard_flags: Vec<LedgerLine>,
    pub fits: BTreeMap<(String, Modality), ThresholdFit>,
}

impl ResumeState {
    fn from_lines(lines: Vec<LedgerLine>) -> Self {
        let mut state = ResumeState::default();
        for line in lines {
            match &line {
                LedgerLine::Outcome {
                    method,
                    modality,
                    record_id,
                    ..
                } => {
                    state
                        .completed
                        .insert((method.clone(), *modality, record_id.clone()));
                    state.outcomes.push(line);
                }
                LedgerLine::Flagged {
                    method,
                    modality,
                    record_id,
                    severity: FlagSeverity::Hard,
                    ..
                } => {
                    state
                        .completed
                        .insert((method.clone(), *modality, record_id.clone()));
                    state.hard_flags.push(line);
                }
                LedgerLine::Fit {
                    method,
                    modality,
                    fit,
                } => {
                    state.fits.insert((method.clone(), *modality), fit.clone());
                }
                _ => {}
            }
        }
        state
    }

    pub fn is_completed(&self, method: &str, modality: Modality, record_id: &str) -> bool {
        self.completed
            .contains(&(method.to_string(), modality, record_id.to_string()))
    }

    pub fn fit_for(&self, method: &str, modality: Modality) -> Option<&ThresholdFit> {
        self.fits.get(&(method.to_string(), modality))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::Direction;

    fn outcome(method: &str, record_id: &str) -> LedgerLine {
        LedgerLine::Outcome {
            model: "m".into(),
            dataset: "d".into(),
            method: method.into(),
            modality: Modality::Vqa,
            record_id: record_id.into(),
            answer_text: "a".into(),
            correct: true,
            confident: true,
            cell: Cell::TP,
        }
    }

    #[test]
    fn ledger_lines_round_trip_through_json() {
        let lines = vec![
            LedgerLine::Signal {
                method: "vanilla".into(),
                modality: Modality::Vqa,
                record_id: "r1".into(),
                answer_text: "Paris".into(),
                signal_kind: SignalKind::Binary,
                binary_value: Some(true),
                score_value: None,
            },
            outcome("vanilla", "r1"),
            LedgerLine::Flagged {
                model: "m".into(),
                dataset: "d".into(),
                method: "vanilla".into(),
                modality: Modality::Vqa,
                record_id: "r2".into(),
                severity: FlagSeverity::Hard,
                reason: "transport failure".into(),
            },
            LedgerLine::Fit {
                method: "ppl-thr".into(),
                modality: Modality::Vqa,
                fit: ThresholdFit {
                    threshold: f64::INFINITY,
                    direction: Direction::ConfidentIfScoreAtMost,
                    heldout_alignment: 0.75,
                    n_heldout: 4,
                },
            },
            LedgerLine::Warning {
                message: "something noteworthy".into(),
            },
        ];
        for line in &lines {
            let json = serde_json::to_string(line).unwrap();
            let back: LedgerLine = serde_json::from_str(&json).unwrap();
            assert_eq!(
                serde_json::to_string(&back).unwrap(),
                json,
                "round trip changed {json}"
            );
        }
        // The tag and fields are snake_case and self-describing.
        let json = serde_json::to_string(&lines[0]).unwrap();
        assert!(json.contains("\"kind\":\"signal\""), "{json}");
        assert!(json.contains("\"signal_kind\":\"binary\""), "{json}");
    }

    #[test]
    fn create_write_resume_skips_completed_triples() {
        let dir = tempfile::tempdir().unwrap();
        let mut ledger = Ledger::create(dir.path()).unwrap();
        ledger.append(&outcome("vanilla", "r1")).unwrap();
        ledger
            .append(&LedgerLine::Flagged {
                model: "m".into(),
                dataset: "d".into(),
                method: "vanilla".into(),
                modality: Modality::Vqa,
                record_id: "r2".into(),
                severity: FlagSeverity::Hard,
                reason: "boom".into(),
            })
            .unwrap();
        ledger
            .append(&LedgerLine::Flagged {
                model: "m".into(),
                dataset: "d".into(),
                method: "vanilla".into(),
                modality: Modality::Vqa,
                record_id: "r3".into(),
                severity: FlagSeverity::Soft,
                reason: "partial".into(),
            })
            .unwrap();
        ledger
            .append(&LedgerLine::Fit {
                method: "random".into(),
                modality: Modality::Vqa,
                fit: ThresholdFit {
                    threshold: 5.5,
                    direction: Direction::ConfidentIfScoreAtLeast,
                    heldout_alignment: 0.9,
                    n_heldout: 10,
                },
            })
            .unwrap();
        ledger.sync().unwrap();
        drop(ledger);

        let (mut ledger, state) = Ledger::resume(dir.path()).unwrap();
        assert!(state.is_completed("vanilla", Modality::Vqa, "r1"));
        assert!(state.is_completed("vanilla", Modality::Vqa, "r2"));
        // Soft flags do not complete a record on their own.
        assert!(!state.is_completed("vanilla", Modality::Vqa, "r3"));
        assert!(!state.is_completed("vanilla", Modality::Qa, "r1"));
        assert!(!state.is_completed("cot", Modality::Vqa, "r1"));
        let fit = state.fit_for("random", Modality::Vqa).unwrap();
        assert_eq!(fit.threshold, 5.5);
        assert_eq!(state.outcomes.len(), 1);
        assert_eq!(state.hard_flags.len(), 1);

        // Appending after resume keeps earlier lines intact.
        ledger.append(&outcome("vanilla", "r3")).unwrap();
        ledger.sync().unwrap();
        drop(ledger);
        let lines = read_ledger(&dir.path().join("ledger.jsonl")).unwrap();
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn resume_on_missing_ledger_starts_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (ledger, state) = Ledger::resume(dir.path()).unwrap();
        assert!(!state.is_completed("vanilla", Modality::Vqa, "r1"));
        assert!(state.outcomes.is_empty());
        drop(ledger);
        assert!(dir.path().join("ledger.jsonl").exists());
    }

    #[test]
    fn resume_truncates_a_torn_trailing_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let valid = serde_json::to_string(&outcome("vanilla", "r1")).unwrap();
        // Simulate a crash mid-write: a valid line, then a partial line with
        // no trailing newline.
        std::fs::write(&path, format!("{valid}\n{{\"kind\":\"outco")).unwrap();

        let (mut ledger, state) = Ledger::resume(dir.path()).unwrap();
        assert!(state.is_completed("vanilla", Modality::Vqa, "r1"));
        ledger.append(&outcome("vanilla", "r2")).unwrap();
        ledger.sync().unwrap();
        drop(ledger);

        let lines = read_ledger(&path).unwrap();
        assert_eq!(lines.len(), 2, "torn tail dropped, new line appended cleanly");
    }

    #[test]
    fn resume_repairs_a_missing_final_newline() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let valid = serde_json::to_string(&outcome("vanilla", "r1")).unwrap();
        std::fs::write(&path, &valid).unwrap(); // no trailing newline

        let (mut ledger, state) = Ledger::resume(dir.path()).unwrap();
        assert!(state.is_completed("vanilla", Modality::Vqa, "r1"));
        ledger.append(&outcome("vanilla", "r2")).unwrap();
        ledger.sync().unwrap();
        drop(ledger);

        let lines = read_ledger(&path).unwrap();
        assert_eq!(lines.len(), 2);
    }

    #[test]
    fn resume_rejects_interior_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let valid = serde_json::to_string(&outcome("vanilla", "r1")).unwrap();
        std::fs::write(&path, format!("garbage\n{valid}\n")).unwrap();
        let err = match Ledger::resume(dir.path()) {
            Ok(_) => panic!("interior corruption must not resume"),
            Err(err) => err,
        };
        assert!(err.to_string().contains("malformed"), "{err}");
    }

    #[test]
    fn malformed_ledger_lines_are_reported_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        std::fs::write(&path, "{\"kind\":\"warning\",\"message\":\"ok\"}\nnot json\n").unwrap();
        let err = read_ledger(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
