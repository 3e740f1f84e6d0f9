//! Layered run configuration: command-line flags override config-file
//! values, which override built-in defaults. Every resolved field records
//! where its value came from, and the semantic part of the resolution (all
//! parameters, no filesystem paths) is hashed to stamp artifacts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::errors::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Flag,
    File,
    Env,
    Default,
    /// Read off the input data rather than configured (embedding width,
    /// article count).
    Data,
}

/// Field-by-field record of where resolved values came from.
#[derive(Debug, Default, Serialize)]
pub struct Provenance(pub BTreeMap<String, Source>);

impl Provenance {
    pub fn pick<T>(&mut self, name: &str, flag: Option<T>, file: Option<T>, default: T) -> T {
        let (value, source) = match (flag, file) {
            (Some(v), _) => (v, Source::Flag),
            (None, Some(v)) => (v, Source::File),
            (None, None) => (default, Source::Default),
        };
        self.0.insert(name.to_string(), source);
        value
    }

    /// For fields that stay optional after resolution.
    pub fn pick_opt<T>(&mut self, name: &str, flag: Option<T>, file: Option<T>) -> Option<T> {
        let (value, source) = match (flag, file) {
            (Some(v), _) => (Some(v), Source::Flag),
            (None, Some(v)) => (Some(v), Source::File),
            (None, None) => (None, Source::Default),
        };
        self.0.insert(name.to_string(), source);
        value
    }

    pub fn required<T>(
        &mut self,
        name: &str,
        flag: Option<T>,
        file: Option<T>,
    ) -> Result<T, CliError> {
        match self.pick_opt(name, flag, file) {
            Some(v) => Ok(v),
            None => Err(CliError::Config(format!(
                "missing required value `{name}`: pass --{} or set {name} in the config file",
                name.rsplit('.').next().unwrap_or(name).replace('_', "-")
            ))),
        }
    }

    pub fn data(&mut self, name: &str) {
        self.0.insert(name.to_string(), Source::Data);
    }
}

/// Config file shape. Every field is optional; unknown keys are rejected so
/// typos surface as config errors instead of silently applying defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub ingest: IngestSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub influence: InfluenceSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub label: LabelSection,
    #[serde(default)]
    pub correlate: CorrelateSection,
    #[serde(default)]
    pub classify: ClassifySection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub k: Option<usize>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub d1: Option<usize>,
    pub seed: Option<u64>,
    pub claim_rate: Option<f64>,
    pub positive_rate: Option<f64>,
    pub cite_per_test: Option<usize>,
    pub applied_bias: Option<f64>,
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    pub input: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub encode_dim: Option<usize>,
    pub strict_test_citations: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub corpus: Option<PathBuf>,
    pub cited_by: Option<String>,
    pub patterns: Option<PathBuf>,
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub corpus: Option<PathBuf>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub head: Option<String>,
    pub d2: Option<usize>,
    pub linear: Option<bool>,
    pub learning_rate: Option<f64>,
    pub l2_strength: Option<f64>,
    pub dropout_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub grad_tol: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceSection {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub method: Option<String>,
    pub damping: Option<f64>,
    pub cg_tol: Option<f64>,
    pub cg_max_iter: Option<usize>,
    pub lissa_depth: Option<usize>,
    pub lissa_samples: Option<usize>,
    pub lissa_scale: Option<f64>,
    pub lissa_batch: Option<usize>,
    pub seed: Option<u64>,
    pub exact_cap: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSection {
    pub corpus: Option<PathBuf>,
    pub scope: Option<String>,
    pub granularity: Option<String>,
    pub claim_rule: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelateSection {
    pub corpus: Option<PathBuf>,
    pub influence: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub orientation: Option<String>,
    pub filter: Option<String>,
    pub correct_mode: Option<String>,
    pub claim_rule: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    pub corpus: Option<PathBuf>,
    pub influence: Option<PathBuf>,
    pub kind: Option<String>,
    pub scope: Option<String>,
    pub claim_rule: Option<String>,
    pub orientation: Option<String>,
    pub tiebreak: Option<f64>,
}

pub fn load_file_config(path: Option<&PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let file = File::open(p).map_err(|e| {
                CliError::Config(format!("config file {}: {e}", p.display()))
            })?;
            serde_json::from_reader(BufReader::new(file)).map_err(|e| {
                CliError::Config(format!("config file {}: {e}", p.display()))
            })
        }
    }
}

/// String-typed file values (enums come from JSON as strings) parsed
/// against the same vocabulary the flags use.
pub fn parse_enum_field<T: clap::ValueEnum>(
    field: &str,
    value: Option<String>,
) -> Result<Option<T>, CliError> {
    match value {
        None => Ok(None),
        Some(s) => T::from_str(&s, false).map(Some).map_err(|_| {
            let valid: Vec<String> = T::value_variants()
                .iter()
                .filter_map(|v| v.to_possible_value())
                .map(|p| p.get_name().to_string())
                .collect();
            CliError::Config(format!(
                "config file: invalid value {s:?} for `{field}` (valid: {})",
                valid.join(", ")
            ))
        }),
    }
}

/// Hash of the semantic run parameters. Paths are excluded so moving an
/// output tree does not change the stamps; the command name is included so
/// identical parameter bundles of different stages hash apart.
pub fn config_hash(command: &str, semantic: &serde_json::Value) -> String {
    let canonical =
        serde_json::to_string(&serde_json::json!({ "command": command, "params": semantic }))
            .expect("config serialization");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        write!(hex, "{byte:02x}").unwrap();
    }
    hex
}

/// The fully-resolved configuration echo every command writes before doing
/// any work.
#[derive(Debug, Serialize)]
pub struct RunConfigEcho {
    pub command: String,
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub resolved: serde_json::Value,
    pub sources: Provenance,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn config_hash_depends_on_command_and_params_only() {
        let params = json!({"k": 2, "seed": 5});
        let base = config_hash("synth", &params);
        assert_eq!(base, config_hash("synth", &json!({"k": 2, "seed": 5})));
        assert_ne!(base, config_hash("train", &params));
        assert_ne!(base, config_hash("synth", &json!({"k": 3, "seed": 5})));
        assert_eq!(base.len(), 64);
        assert!(base.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn provenance_prefers_flag_then_file_then_default() {
        let mut prov = Provenance::default();
        assert_eq!(prov.pick("a", Some(1), Some(2), 3), 1);
        assert_eq!(prov.pick("b", None, Some(2), 3), 2);
        assert_eq!(prov.pick("c", None::<i32>, None, 3), 3);
        assert_eq!(prov.0["a"], Source::Flag);
        assert_eq!(prov.0["b"], Source::File);
        assert_eq!(prov.0["c"], Source::Default);
    }
}
