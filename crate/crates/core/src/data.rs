//! Dataset records, split assignment, and the method catalog.
//!
//! Datasets are JSON Lines files, one record per line (see [`QueryRecord`]
//! for the schema). Records either carry an explicit `split` tag or get one
//! from [`assign_splits`], a seeded shuffle that reserves a held-out slice
//! for threshold fitting.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::ThresholdFit;

/// Which half of the partition a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Eval,
    Heldout,
}

/// One evaluation item: a question, optional image, and gold answers.
///
/// `qa_question` is an optional text-only phrasing of the same question so a
/// single file can drive the QA / VQA / image-only modality comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub dataset: String,
    pub question: String,
    /// Image path; relative paths are resolved against the dataset file's
    /// directory at load time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_question: Option<String>,
    /// Accepted gold answers; aliases like "0"/"zero" are separate entries.
    pub gold: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("failed to read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("dataset line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("dataset line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("heldout fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("need at least 2 records to assign splits, got {0}")]
    TooFewRecords(usize),
}

/// Loads a JSON Lines dataset, preserving file order.
///
/// Blank lines are ignored. Malformed lines, duplicate ids, and records that
/// violate the schema invariants (empty id/question, no gold answers) are
/// reported with their 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Vec<QueryRecord>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: QueryRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if record.id.is_empty() {
            return Err(DataError::Invalid {
                line: line_no,
                message: "id must be non-empty".into(),
            });
        }
        if record.question.is_empty() {
            return Err(DataError::Invalid {
                line: line_no,
                message: "question must be non-empty".into(),
            });
        }
        if record.gold.is_empty() {
            return Err(DataError::Invalid {
                line: line_no,
                message: "gold must list at least one accepted answer".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(DataError::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        if let Some(image) = &record.image {
            if image.is_relative() {
                record.image = Some(base.join(image));
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records back out as JSON Lines (the inverse of [`load_dataset`],
/// modulo image-path resolution).
pub fn write_dataset(path: &Path, records: &[QueryRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record).expect("record serialization cannot fail");
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Tags every record as eval or heldout via a seeded shuffle.
///
/// The held-out count is `round(fraction * total)`; membership is stable for
/// a fixed seed and the returned list preserves input order. Any pre-existing
/// `split` tags are overwritten.
pub fn assign_splits(
    records: &[QueryRecord],
    heldout_fraction: f64,
    seed: u64,
) -> Result<Vec<QueryRecord>, DataError> {
    if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
        return Err(DataError::BadFraction(heldout_fraction));
    }
    if records.len() < 2 {
        return Err(DataError::TooFewRecords(records.len()));
    }
    let n_heldout = (heldout_fraction * records.len() as f64).round() as usize;
    let mut indices: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let heldout: HashSet<usize> = indices.into_iter().take(n_heldout).collect();
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut r = r.clone();
            r.split = Some(if heldout.contains(&i) {
                Split::Heldout
            } else {
                Split::Eval
            });
            r
        })
        .collect())
}

/// The four confidence families the harness implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    VerbalizedSingle,
    VerbalizedDouble,
    Probabilistic,
    Consistency,
}

/// Method variants; which variants are legal depends on the family
/// (`cot`/`punish` exist in both verbalized families).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Cot,
    ImgCot,
    Punish,
    Explain,
    SelfJud,
    Challenge,
    ProbThr,
    PplThr,
    Random,
    NoisedImg,
    Rephr,
    RephNois,
    CrossModel,
}

/// One confidence-elicitation method plus its sampling knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSpec {
    pub family: Family,
    pub variant: Variant,
    /// Number of temperature samples for consistency methods (reference
    /// answer excluded).
    pub n_samples: usize,
    pub sample_temperature: f64,
    /// Noise-schedule increment for the noised-image variants.
    pub sigma_step: f64,
    /// Fitted binarization threshold, populated after calibration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<ThresholdFit>,
}

/// All sixteen (family, variant) combinations, in catalog order.
pub const METHOD_NAMES: [&str; 16] = [
    "vanilla",
    "cot",
    "img-cot",
    "punish",
    "explain",
    "self-jud",
    "cot-double",
    "challenge",
    "punish-double",
    "prob-thr",
    "random",
    "noised-img",
    "rephr",
    "reph-nois",
    "cross-model",
    "ppl-thr",
];

#[derive(Debug, thiserror::Error)]
#[error("unknown method {0:?}; expected one of: vanilla, cot, img-cot, punish, explain, self-jud, cot-double, challenge, punish-double, prob-thr, random, noised-img, rephr, reph-nois, cross-model, ppl-thr")]
pub struct UnknownMethod(pub String);

impl MethodSpec {
    /// Builds the spec for a canonical method name with default knobs
    /// (10 samples at temperature 1.0, sigma step 0.05).
    pub fn from_name(name: &str) -> Result<Self, UnknownMethod> {
        let (family, variant) = match name {
            "vanilla" => (Family::VerbalizedSingle, Variant::Vanilla),
            "cot" => (Family::VerbalizedSingle, Variant::Cot),
            "img-cot" => (Family::VerbalizedSingle, Variant::ImgCot),
            "punish" => (Family::VerbalizedSingle, Variant::Punish),
            "explain" => (Family::VerbalizedSingle, Variant::Explain),
            "self-jud" => (Family::VerbalizedDouble, Variant::SelfJud),
            "cot-double" => (Family::VerbalizedDouble, Variant::Cot),
            "challenge" => (Family::VerbalizedDouble, Variant::Challenge),
            "punish-double" => (Family::VerbalizedDouble, Variant::Punish),
            "prob-thr" => (Family::VerbalizedDouble, Variant::ProbThr),
            "random" => (Family::Consistency, Variant::Random),
            "noised-img" => (Family::Consistency, Variant::NoisedImg),
            "rephr" => (Family::Consistency, Variant::Rephr),
            "reph-nois" => (Family::Consistency, Variant::RephNois),
            "cross-model" => (Family::Consistency, Variant::CrossModel),
            "ppl-thr" => (Family::Probabilistic, Variant::PplThr),
            other => return Err(UnknownMethod(other.to_string())),
        };
        Ok(MethodSpec {
            family,
            variant,
            n_samples: 10,
            sample_temperature: 1.0,
            sigma_step: 0.05,
            threshold: None,
        })
    }

    /// Canonical name, the inverse of [`MethodSpec::from_name`].
    pub fn name(&self) -> &'static str {
        match (self.family, self.variant) {
            (Family::VerbalizedSingle, Variant::Vanilla) => "vanilla",
            (Family::VerbalizedSingle, Variant::Cot) => "cot",
            (Family::VerbalizedSingle, Variant::ImgCot) => "img-cot",
            (Family::VerbalizedSingle, Variant::Punish) => "punish",
            (Family::VerbalizedSingle, Variant::Explain) => "explain",
            (Family::VerbalizedDouble, Variant::SelfJud) => "self-jud",
            (Family::VerbalizedDouble, Variant::Cot) => "cot-double",
            (Family::VerbalizedDouble, Variant::Challenge) => "challenge",
            (Family::VerbalizedDouble, Variant::Punish) => "punish-double",
            (Family::VerbalizedDouble, Variant::ProbThr) => "prob-thr",
            (Family::Consistency, Variant::Random) => "random",
            (Family::Consistency, Variant::NoisedImg) => "noised-img",
            (Family::Consistency, Variant::Rephr) => "rephr",
            (Family::Consistency, Variant::RephNois) => "reph-nois",
            (Family::Consistency, Variant::CrossModel) => "cross-model",
            (Family::Probabilistic, Variant::PplThr) => "ppl-thr",
            _ => unreachable!("variant/family combination validated at construction"),
        }
    }

    /// Whether the signal this method produces is a real-valued score that
    /// needs a fitted threshold (as opposed to a direct binary verdict).
    pub fn is_score_kind(&self) -> bool {
        matches!(self.family, Family::Probabilistic | Family::Consistency)
            || self.variant == Variant::ProbThr
    }

    /// Checks that the (family, variant) pair is one of the sixteen legal
    /// combinations and that the sampling knobs are in range.
    pub fn validate(&self) -> Result<(), UnknownMethod> {
        let legal = matches!(
            (self.family, self.variant),
            (
                Family::VerbalizedSingle,
                Variant::Vanilla | Variant::Cot | Variant::ImgCot | Variant::Punish | Variant::Explain
            ) | (
                Family::VerbalizedDouble,
                Variant::SelfJud | Variant::Cot | Variant::Challenge | Variant::Punish | Variant::ProbThr
            ) | (
                Family::Consistency,
                Variant::Random | Variant::NoisedImg | Variant::Rephr | Variant::RephNois | Variant::CrossModel
            ) | (Family::Probabilistic, Variant::PplThr)
        );
        if !legal || self.n_samples < 1 || self.sigma_step < 0.0 {
            return Err(UnknownMethod(format!(
                "{:?}/{:?} (n_samples {}, sigma_step {})",
                self.family, self.variant, self.n_samples, self.sigma_step
            )));
        }
        Ok(())
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
