//! Experiment configuration: canonical JSON with defaults for every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tbg_core::codec::{canonical_json, sha256_hex};
use tbg_core::ingest::{PromptConfig, DEFAULT_FRACTIONS};
use tbg_core::protocol::ProtocolOptions;
use tbg_core::{SynthSpec, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Interaction log; defaults to `<output>/interactions.tsv`.
    pub data: Option<PathBuf>,
    /// Text embedding matrix; defaults to `<output>/text.tbge`.
    pub embeddings: Option<PathBuf>,
    /// Checkpoint directory; defaults to `<output>/checkpoints`.
    pub checkpoints: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domains {
    pub sources: Vec<String>,
    pub target: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Hashing,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub url: Option<String>,
    pub hashing_dim: usize,
    pub batch_size: usize,
    pub max_retries: u32,
    pub timeout_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Hashing,
            url: None,
            hashing_dim: 64,
            batch_size: 32,
            max_retries: 4,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: Paths,
    /// Source and target domain names; defaults to the synthetic names.
    pub domains: Option<Domains>,
    pub fractions: [f64; 3],
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub prompts: PromptConfig,
    pub provider: ProviderConfig,
    pub protocols: ProtocolOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            domains: None,
            fractions: DEFAULT_FRACTIONS,
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            prompts: PromptConfig::default(),
            provider: ProviderConfig::default(),
            protocols: ProtocolOptions::default(),
        }
    }
}

/// Paths after defaults are applied.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub data: PathBuf,
    pub embeddings: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("MISSING_CONFIG", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::new("CONFIG", format!("{}: {e}", path.display())))
    }

    pub fn hash(&self) -> Result<String, CliError> {
        Ok(sha256_hex(canonical_json(self)?.as_bytes()))
    }

    pub fn domains(&self) -> Domains {
        self.domains.clone().unwrap_or_else(|| {
            let names = self.synth.domain_names();
            if names.len() > 1 {
                Domains { sources: names[..names.len() - 1].to_vec(), target: names.last().cloned() }
            } else {
                Domains { sources: names, target: None }
            }
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    /// Resolve paths and create the output and checkpoint directories.
    pub fn resolve(&self, out_override: Option<&Path>) -> Result<Resolved, CliError> {
        let output = out_override
            .map(Path::to_path_buf)
            .or_else(|| self.paths.output.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let r = Resolved {
            data: self.paths.data.clone().unwrap_or_else(|| output.join("interactions.tsv")),
            embeddings: self.paths.embeddings.clone().unwrap_or_else(|| output.join("text.tbge")),
            checkpoints: self.paths.checkpoints.clone().unwrap_or_else(|| output.join("checkpoints")),
            output,
        };
        for dir in [&r.output, &r.checkpoints] {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::new("UNRESOLVABLE_PATH", format!("{}: {e}", dir.display())))?;
        }
        for file in [&r.data, &r.embeddings] {
            if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
                if !parent.is_dir() {
                    return Err(CliError::new("UNRESOLVABLE_PATH", format!("{} does not exist", parent.display())));
                }
            }
        }
        Ok(r)
    }
}
