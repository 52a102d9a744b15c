//! The versioned run configuration.

use std::path::{Path, PathBuf};

use rethead_core::ablate::MaskKind;
use rethead_core::model::{ModelConfig, PositionalScheme};
use rethead_core::seed::derive_seed;
use rethead_core::tasks::{CorpusSpec, InstructionSpec, NiahSpec, TaskVocab};
use rethead_core::train::{DpoConfig, OptimConfig, PretrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

/// How rejected responses are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    Retmask,
    NonRetrievalMask,
    RandomMask,
    SmallerModel,
    JudgedPair,
}

impl Sampler {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampler::Retmask => "retmask",
            Sampler::NonRetrievalMask => "non-retrieval-mask",
            Sampler::RandomMask => "random-mask",
            Sampler::SmallerModel => "smaller-model",
            Sampler::JudgedPair => "judged-pair",
        }
    }

    /// Mask written by the ablation stage. Samplers that do not mask use
    /// the retrieval set, which then only groups heads in the report.
    pub fn mask_kind(self) -> MaskKind {
        match self {
            Sampler::NonRetrievalMask => MaskKind::NonRetrieval,
            Sampler::RandomMask => MaskKind::Random,
            _ => MaskKind::Retrieval,
        }
    }

    pub fn masks(self) -> bool {
        matches!(
            self,
            Sampler::Retmask | Sampler::NonRetrievalMask | Sampler::RandomMask
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Dpo,
    Sft,
}

impl Objective {
    pub fn stage(self) -> &'static str {
        match self {
            Objective::Dpo => "dpo",
            Objective::Sft => "sft",
        }
    }
}

/// Model shape; the initialisation seed comes from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub positional: PositionalScheme,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self {
            vocab_size: c.vocab_size,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            d_mlp: c.d_mlp,
            max_seq_len: c.max_seq_len,
            positional: c.positional,
        }
    }
}

impl ModelSection {
    pub fn build(&self, rng_seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_mlp: self.d_mlp,
            max_seq_len: self.max_seq_len,
            positional: self.positional,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub n_keys: usize,
    pub n_values: usize,
    pub corpus: CorpusSpec,
    pub n_train: usize,
    pub n_heldout: usize,
    pub niah: NiahSpec,
    pub n_detect: usize,
    pub n_eval: usize,
    pub instructions: InstructionSpec,
    pub n_instructions: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            n_keys: 16,
            n_values: 32,
            corpus: CorpusSpec::default(),
            n_train: 64_000,
            n_heldout: 200,
            niah: NiahSpec {
                n_passages: 6,
                passage_len: 8,
                value_len: 3,
            },
            n_detect: 200,
            n_eval: 200,
            instructions: InstructionSpec::default(),
            n_instructions: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectSection {
    /// Fixed threshold; when absent it is chosen so that about
    /// `head_fraction` of all heads are selected.
    pub tau: Option<f64>,
    pub head_fraction: f64,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            tau: None,
            head_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Control-mask size; defaults to the retrieval set size.
    pub size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub rejected_sampler: Sampler,
    pub temperature: f64,
    pub smaller_model: ModelSection,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            rejected_sampler: Sampler::Retmask,
            temperature: 0.8,
            smaller_model: ModelSection {
                n_layers: 1,
                d_model: 16,
                d_mlp: 64,
                ..ModelSection::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub taus: Vec<f64>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            taus: rethead_core::detect::TAU_PRESETS.to_vec(),
        }
    }
}

fn toy_dpo() -> DpoConfig {
    DpoConfig {
        beta: 0.1,
        reference: None,
        optim: OptimConfig {
            peak_lr: 1e-4,
            min_lr: 1e-5,
            batch_size: 16,
            ..OptimConfig::default()
        },
    }
}

fn toy_sft() -> OptimConfig {
    OptimConfig {
        peak_lr: 1e-4,
        min_lr: 1e-5,
        batch_size: 16,
        ..OptimConfig::default()
    }
}

/// Everything a run depends on. Optimiser seeds inside the sections are
/// replaced by seeds derived from `seed` and the stage name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub tasks: TaskSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default = "toy_dpo")]
    pub dpo: DpoConfig,
    #[serde(default = "toy_sft")]
    pub sft: OptimConfig,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_objective() -> Objective {
    Objective::Dpo
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: None,
            objective: Objective::Dpo,
            model: ModelSection::default(),
            tasks: TaskSection::default(),
            pretrain: PretrainConfig::default(),
            detect: DetectSection::default(),
            ablate: AblateSection::default(),
            synth: SynthSection::default(),
            dpo: toy_dpo(),
            sft: toy_sft(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let raw: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        match raw.get("version") {
            None => return Err(CliError::Config("missing `version`".into())),
            Some(toml::Value::Integer(v)) if *v == CONFIG_VERSION as i64 => {}
            Some(other) => {
                return Err(CliError::Version {
                    expected: CONFIG_VERSION,
                    found: other.to_string(),
                })
            }
        }
        let cfg: RunConfig = raw
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |e: rethead_core::Error| CliError::Config(e.to_string());
        self.model.build(0).validate().map_err(bad)?;
        self.synth.smaller_model.build(0).validate().map_err(bad)?;
        self.vocab()?;
        self.pretrain.optim.validate().map_err(bad)?;
        self.dpo.validate().map_err(bad)?;
        self.sft.validate().map_err(bad)?;
        if let Some(t) = self.detect.tau {
            if !(t > 0.0 && t <= 1.0) {
                return Err(CliError::Config(format!("detect.tau {t} outside (0, 1]")));
            }
        }
        if !(self.detect.head_fraction > 0.0 && self.detect.head_fraction <= 1.0) {
            return Err(CliError::Config(
                "detect.head_fraction outside (0, 1]".into(),
            ));
        }
        if !(self.synth.temperature > 0.0 && self.synth.temperature.is_finite()) {
            return Err(CliError::Config(
                "synth.temperature must be positive".into(),
            ));
        }
        if self.synth.smaller_model.vocab_size != self.model.vocab_size {
            return Err(CliError::Config(
                "synth.smaller_model must share the vocabulary".into(),
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> CliResult<TaskVocab> {
        TaskVocab::for_model(
            self.model.vocab_size,
            self.tasks.n_keys,
            self.tasks.n_values,
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }

    /// Seed of one named stage or sub-stage.
    pub fn stage_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, name)
    }
}
