//! Run configuration: the TOML schema, defaults, and validation.
//!
//! Relative paths in a config file (dataset, cache and output directories,
//! `mock://` script paths) resolve against the config file's directory so a
//! config is runnable from anywhere.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::{MethodSpec, QueryRecord};
use crate::gateway::EndpointSpec;
use crate::judging::JudgeStrategy;
use crate::report::Modality;

use super::RunError;

fn default_true() -> bool {
    true
}

fn default_timeout_secs() -> f64 {
    30.0
}

fn default_max_retries() -> u32 {
    2
}

fn default_heldout_fraction() -> f64 {
    0.2
}

fn default_concurrency() -> usize {
    8
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_answer_max_tokens() -> u32 {
    256
}

fn default_modality() -> Modality {
    Modality::Vqa
}

/// What an endpoint is for. A run needs exactly one subject; rephraser and
/// judge are optional helpers; `other` endpoints (exactly two) feed the
/// cross-model pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointRole {
    Subject,
    Rephraser,
    Judge,
    Other,
}

/// One `[[endpoints]]` table.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub role: EndpointRole,
    pub name: String,
    pub base_url: String,
    pub model_id: String,
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_true")]
    pub supports_images: bool,
    #[serde(default)]
    pub supports_logprobs: bool,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

impl EndpointConfig {
    pub fn to_spec(&self) -> EndpointSpec {
        EndpointSpec {
            name: self.name.clone(),
            base_url: self.base_url.clone(),
            model_id: self.model_id.clone(),
            api_key_env: self.api_key_env.clone(),
            supports_images: self.supports_images,
            supports_logprobs: self.supports_logprobs,
            timeout: Duration::from_secs_f64(self.timeout_secs),
            max_retries: self.max_retries,
        }
    }
}

/// A method in the config: either a bare catalog name or a table with knob
/// overrides.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MethodEntry {
    Name(String),
    Detailed {
        name: String,
        n_samples: Option<usize>,
        sample_temperature: Option<f64>,
        sigma_step: Option<f64>,
    },
}

impl MethodEntry {
    pub fn to_spec(&self) -> Result<MethodSpec, RunError> {
        let (name, n_samples, sample_temperature, sigma_step) = match self {
            MethodEntry::Name(name) => (name.as_str(), None, None, None),
            MethodEntry::Detailed {
                name,
                n_samples,
                sample_temperature,
                sigma_step,
            } => (name.as_str(), *n_samples, *sample_temperature, *sigma_step),
        };
        let mut spec =
            MethodSpec::from_name(name).map_err(|e| RunError::Config(e.to_string()))?;
        if let Some(n) = n_samples {
            spec.n_samples = n;
        }
        if let Some(t) = sample_temperature {
            spec.sample_temperature = t;
        }
        if let Some(s) = sigma_step {
            spec.sigma_step = s;
        }
        spec.validate().map_err(|e| RunError::Config(e.to_string()))?;
        Ok(spec)
    }
}

/// `[judge]` table.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeConfig {
    #[serde(default)]
    pub strategy: JudgeStrategy,
}

/// What to do with a verbalized reply missing both keywords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparsedPolicy {
    /// Treat as unconfident and soft-flag the record (default).
    #[default]
    Unconfident,
    /// Hard-flag the record (excluded from totals).
    Error,
}

/// The full run configuration, mirroring the TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// JSON Lines dataset path.
    pub dataset: PathBuf,
    #[serde(default = "default_modality")]
    pub modality: Modality,
    /// Methods to run; empty means the whole sixteen-method catalog.
    #[serde(default)]
    pub methods: Vec<MethodEntry>,
    pub endpoints: Vec<EndpointConfig>,
    #[serde(default)]
    pub judge: JudgeConfig,
    #[serde(default = "default_heldout_fraction")]
    pub heldout_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Maximum in-flight backend requests across all endpoints.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub unparsed_confidence: UnparsedPolicy,
    /// Leakage guard: score thresholds are always fitted on the held-out
    /// split; setting this evaluates those same records too.
    #[serde(default)]
    pub include_heldout_in_eval: bool,
    /// Shifts the noise schedule (which starts at sigma 0 by default).
    #[serde(default)]
    pub sigma_offset: f64,
    #[serde(default = "default_answer_max_tokens")]
    pub answer_max_tokens: u32,
}

impl RunConfig {
    /// Parses a TOML config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            RunError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| {
            RunError::Config(format!("cannot parse config {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    /// Makes dataset/cache/output paths and `mock://` script paths absolute
    /// relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &PathBuf| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.clone()
            }
        };
        self.dataset = resolve(&self.dataset);
        self.cache_dir = resolve(&self.cache_dir);
        self.output_dir = resolve(&self.output_dir);
        for endpoint in &mut self.endpoints {
            if let Some(script) = endpoint.base_url.strip_prefix("mock://") {
                let script_path = PathBuf::from(script);
                if script_path.is_relative() {
                    endpoint.base_url =
                        format!("mock://{}", base.join(script_path).display());
                }
            }
        }
    }

    /// Basic field validation (before endpoints are constructed or the
    /// dataset is loaded).
    pub fn validate(&self) -> Result<(), RunError> {
        if self.concurrency < 1 {
            return Err(RunError::Config("concurrency must be at least 1".into()));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(RunError::Config(format!(
                "heldout_fraction must lie strictly between 0 and 1, got {}",
                self.heldout_fraction
            )));
        }
        if !self.sigma_offset.is_finite() || self.sigma_offset < 0.0 {
            return Err(RunError::Config(format!(
                "sigma_offset must be finite and ≥ 0, got {}",
                self.sigma_offset
            )));
        }
        if self.answer_max_tokens == 0 {
            return Err(RunError::Config("answer_max_tokens must be > 0".into()));
        }
        let subjects = self.endpoints_with_role(EndpointRole::Subject).count();
        if subjects != 1 {
            return Err(RunError::Config(format!(
                "config must declare exactly one subject endpoint, found {subjects}"
            )));
        }
        for role in [EndpointRole::Rephraser, EndpointRole::Judge] {
            let n = self.endpoints_with_role(role).count();
            if n > 1 {
                return Err(RunError::Config(format!(
                    "at most one {role:?} endpoint is allowed, found {n}"
                )));
            }
        }
        let mut names = std::collections::HashSet::new();
        for endpoint in &self.endpoints {
            if endpoint.name.is_empty() {
                return Err(RunError::Config("endpoint name must be non-empty".into()));
            }
            if !names.insert(&endpoint.name) {
                return Err(RunError::Config(format!(
                    "duplicate endpoint name {:?}",
                    endpoint.name
                )));
            }
        }
        Ok(())
    }

    pub fn endpoints_with_role(
        &self,
        role: EndpointRole,
    ) -> impl Iterator<Item = &EndpointConfig> {
        self.endpoints.iter().filter(move |e| e.role == role)
    }

    /// The method list this run covers: the config's list, or the whole
    /// catalog when none is given.
    pub fn method_specs(&self) -> Result<Vec<MethodSpec>, RunError> {
        if self.methods.is_empty() {
            return crate::data::METHOD_NAMES
                .iter()
                .map(|name| {
                    MethodSpec::from_name(name).map_err(|e| RunError::Config(e.to_string()))
                })
                .collect();
        }
        let mut seen = std::collections::HashSet::new();
        let mut specs = Vec::with_capacity(self.methods.len());
        for entry in &self.methods {
            let spec = entry.to_spec()?;
            if !seen.insert(spec.name()) {
                return Err(RunError::Config(format!(
                    "method {:?} listed more than once",
                    spec.name()
                )));
            }
            specs.push(spec);
        }
        Ok(specs)
    }
}

/// Cross-checks methods, modality, endpoints, and the dataset.
pub fn validate_run(
    config: &RunConfig,
    methods: &[MethodSpec],
    modality: Modality,
    records: &[QueryRecord],
) -> Result<(), RunError> {
    use crate::data::Variant;

    if records.is_empty() {
        return Err(RunError::Config(format!(
            "dataset {} has no records",
            config.dataset.display()
        )));
    }
    // Split tags are all-or-none: mixing explicit and missing tags would
    // silently change the heldout set across runs.
    let tagged = records.iter().filter(|r| r.split.is_some()).count();
    if tagged != 0 && tagged != records.len() {
        return Err(RunError::Config(format!(
            "dataset mixes explicit and missing split tags ({tagged} of {} tagged); \
             tag all records or none",
            records.len()
        )));
    }

    let subject = config
        .endpoints_with_role(EndpointRole::Subject)
        .next()
        .expect("validated: exactly one subject");
    let needs_image = matches!(modality, Modality::Vqa | Modality::ImageOnly);
    if needs_image {
        if !subject.supports_images {
            return Err(RunError::Config(format!(
                "modality {} needs images but subject endpoint {:?} does not support them",
                modality.as_str(),
                subject.name
            )));
        }
        if let Some(missing) = records.iter().find(|r| r.image.is_none()) {
            return Err(RunError::Config(format!(
                "modality {} requires an image on every record; record {:?} has none",
                modality.as_str(),
                missing.id
            )));
        }
    }

    let n_others = config.endpoints_with_role(EndpointRole::Other).count();
    let has_rephraser = config
        .endpoints_with_role(EndpointRole::Rephraser)
        .next()
        .is_some();
    let has_judge_endpoint = config
        .endpoints_with_role(EndpointRole::Judge)
        .next()
        .is_some();

    if config.judge.strategy == JudgeStrategy::Llm && !has_judge_endpoint {
        return Err(RunError::Config(
            "judge.strategy = \"llm\" requires an endpoint with role \"judge\"".into(),
        ));
    }

    for method in methods {
        let name = method.name();
        let ok_modality = match method.variant {
            Variant::NoisedImg => matches!(modality, Modality::Vqa | Modality::ImageOnly),
            Variant::Rephr => matches!(modality, Modality::Vqa | Modality::Qa),
            Variant::RephNois => matches!(modality, Modality::Vqa),
            _ => true,
        };
        if !ok_modality {
            return Err(RunError::Config(format!(
                "method {name:?} is incompatible with modality {:?}",
                modality.as_str()
            )));
        }
        match method.variant {
            Variant::Rephr | Variant::RephNois if !has_rephraser => {
                return Err(RunError::Config(format!(
                    "method {name:?} requires an endpoint with role \"rephraser\""
                )));
            }
            Variant::CrossModel if n_others != 2 => {
                return Err(RunError::Config(format!(
                    "method \"cross-model\" requires exactly 2 endpoints with role \"other\", found {n_others}"
                )));
            }
            Variant::PplThr if !subject.supports_logprobs => {
                return Err(RunError::Config(format!(
                    "method \"ppl-thr\" requires subject endpoint {:?} to support log-probabilities",
                    subject.name
                )));
            }
            _ => {}
        }
        if method.variant == Variant::CrossModel && needs_image {
            for other in config.endpoints_with_role(EndpointRole::Other) {
                if !other.supports_images {
                    return Err(RunError::Config(format!(
                        "cross-model endpoint {:?} does not support images but modality is {}",
                        other.name,
                        modality.as_str()
                    )));
                }
            }
        }
    }
    Ok(())
}
