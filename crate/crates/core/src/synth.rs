//! Contrastive preference pairs: the chosen side from the full model, the
//! rejected side from a degraded sampler.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{decode, DecodeConfig, DecodeMode, Generation, HeadMask, ModelParams, Token};
use crate::seed::item_seed;
use crate::tasks::{score_answer, InstructionInstance, EOS};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Which generator produced one side of a tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerMeta {
    /// "full" for the unmodified target, otherwise the rejected-sampler tag.
    pub strategy: String,
    /// Content hash of the checkpoint that generated this side.
    pub model_hash: String,
    /// Heads deactivated while generating.
    pub mask: HeadMask,
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceTuple {
    pub schema_version: u32,
    pub instruction_tokens: Vec<Token>,
    pub chosen_tokens: Vec<Token>,
    pub rejected_tokens: Vec<Token>,
    pub chosen_meta: SamplerMeta,
    pub rejected_meta: SamplerMeta,
    pub seed: u64,
}

/// Source of rejected responses.
#[derive(Debug, Clone, Copy)]
pub enum RejectedSampler<'a> {
    /// The target with heads deactivated; `tag` names the mask strategy.
    Masked { tag: &'a str, mask: &'a HeadMask },
    /// A separate checkpoint with strictly fewer parameters.
    SmallerModel { params: &'a ModelParams<f32> },
    /// Two samples from the target; the exact-match oracle picks the loser.
    JudgedPair,
}

impl RejectedSampler<'_> {
    pub fn tag(&self) -> &str {
        match self {
            RejectedSampler::Masked { tag, .. } => tag,
            RejectedSampler::SmallerModel { .. } => "smaller-model",
            RejectedSampler::JudgedPair => "judged-pair",
        }
    }
}

/// Why a generation was discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    /// Stopped before emitting anything.
    ImmediateStop,
    /// No stop token within the decode budget.
    NoStop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Chosen,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub instruction: usize,
    pub side: Side,
    pub reason: FailureReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub sampler: String,
    pub requested: usize,
    pub kept: usize,
    pub dropped: usize,
    pub dropped_by_reason: BTreeMap<String, usize>,
    /// Oracle accuracy of kept chosen responses.
    pub chosen_accuracy: f64,
    /// Oracle accuracy of kept rejected responses.
    pub rejected_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub tuples: Vec<PreferenceTuple>,
    /// Reference answers of the kept tuples, aligned with `tuples`.
    pub references: Vec<Vec<Token>>,
    pub dropped: Vec<Dropped>,
    pub stats: SynthStats,
}

fn failure(gen: &Generation) -> Option<FailureReason> {
    if !gen.stopped {
        Some(FailureReason::NoStop)
    } else if gen.content().is_empty() {
        Some(FailureReason::ImmediateStop)
    } else {
        None
    }
}

fn meta(strategy: &str, hash: &str, mask: &HeadMask, decode: &DecodeConfig) -> SamplerMeta {
    SamplerMeta {
        strategy: strategy.to_string(),
        model_hash: hash.to_string(),
        mask: mask.clone(),
        decode: decode.clone(),
    }
}

/// One tuple per instruction, chosen from the full target and rejected from
/// `sampler`. Each instruction decodes with a seed derived from `seed` and
/// its index; both sides share it.
pub fn synthesize_pairs(
    target: &ModelParams<f32>,
    sampler: RejectedSampler<'_>,
    instructions: &[InstructionInstance],
    decode_cfg: &DecodeConfig,
    seed: u64,
) -> Result<SynthOutput> {
    if instructions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    decode_cfg.validate()?;
    let target_hash = target.content_hash();
    let none = HeadMask::empty();
    let smaller_hash = match sampler {
        RejectedSampler::Masked { mask, .. } => {
            mask.validate(target.config())
                .map_err(|e| Error::IncompatibleSampler(e.to_string()))?;
            None
        }
        RejectedSampler::SmallerModel { params } => {
            if params.config().vocab_size != target.config().vocab_size {
                return Err(Error::IncompatibleSampler("vocabulary sizes differ".into()));
            }
            if params.len() >= target.len() {
                return Err(Error::IncompatibleSampler(format!(
                    "smaller model has {} parameters, target has {}",
                    params.len(),
                    target.len()
                )));
            }
            Some(params.content_hash())
        }
        RejectedSampler::JudgedPair => {
            if decode_cfg.mode == DecodeMode::Greedy {
                return Err(Error::IncompatibleSampler(
                    "judged pairs need sampling, not greedy decoding".into(),
                ));
            }
            None
        }
    };

    let mut tuples = Vec::new();
    let mut references = Vec::new();
    let mut dropped = Vec::new();
    let (mut chosen_ok, mut rejected_ok) = (0usize, 0usize);
    for (i, inst) in instructions.iter().enumerate() {
        let s = item_seed(seed, i as u64);
        let cfg = DecodeConfig {
            seed: s,
            ..decode_cfg.clone()
        };
        let x = &inst.instruction;
        let first = decode(target, x, &cfg, &none)?;
        let (chosen, rejected, chosen_meta, rejected_meta) = match sampler {
            RejectedSampler::Masked { tag, mask } => {
                let r = decode(target, x, &cfg, mask)?;
                let cm = meta("full", &target_hash, &none, &cfg);
                let rm = meta(tag, &target_hash, mask, &cfg);
                (first, r, cm, rm)
            }
            RejectedSampler::SmallerModel { params } => {
                let r = decode(params, x, &cfg, &none)?;
                let cm = meta("full", &target_hash, &none, &cfg);
                let hash = smaller_hash.as_deref().expect("hash computed above");
                let rm = meta("smaller-model", hash, &none, &cfg);
                (first, r, cm, rm)
            }
            RejectedSampler::JudgedPair => {
                let cfg_b = DecodeConfig {
                    seed: item_seed(s, 1),
                    ..cfg.clone()
                };
                let second = decode(target, x, &cfg_b, &none)?;
                let a_ok = score_answer(&inst.reference, &first.tokens, Some(EOS)).is_correct();
                let b_ok = score_answer(&inst.reference, &second.tokens, Some(EOS)).is_correct();
                // the incorrect side loses; on a tie the longer output, then the second sample
                let second_loses = match (a_ok, b_ok) {
                    (true, false) => true,
                    (false, true) => false,
                    _ => first.tokens.len() <= second.tokens.len(),
                };
                if second_loses {
                    let cm = meta("full", &target_hash, &none, &cfg);
                    let rm = meta("judged-pair", &target_hash, &none, &cfg_b);
                    (first, second, cm, rm)
                } else {
                    let cm = meta("full", &target_hash, &none, &cfg_b);
                    let rm = meta("judged-pair", &target_hash, &none, &cfg);
                    (second, first, cm, rm)
                }
            }
        };
        if let Some(reason) = failure(&chosen) {
            dropped.push(Dropped {
                instruction: inst.id,
                side: Side::Chosen,
                reason,
            });
            continue;
        }
        if let Some(reason) = failure(&rejected) {
            dropped.push(Dropped {
                instruction: inst.id,
                side: Side::Rejected,
                reason,
            });
            continue;
        }
        chosen_ok += score_answer(&inst.reference, &chosen.tokens, Some(EOS)).is_correct() as usize;
        rejected_ok +=
            score_answer(&inst.reference, &rejected.tokens, Some(EOS)).is_correct() as usize;
        tuples.push(PreferenceTuple {
            schema_version: SCHEMA_VERSION,
            instruction_tokens: x.clone(),
            chosen_tokens: chosen.tokens,
            rejected_tokens: rejected.tokens,
            chosen_meta,
            rejected_meta,
            seed: s,
        });
        references.push(inst.reference.clone());
    }
    if tuples.is_empty() {
        return Err(Error::AllGenerationsFailed(instructions.len()));
    }
    let mut by_reason = BTreeMap::new();
    for d in &dropped {
        let key = serde_json::to_value(d.reason)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        *by_reason.entry(key).or_insert(0) += 1;
    }
    let kept = tuples.len();
    let stats = SynthStats {
        sampler: sampler.tag().to_string(),
        requested: instructions.len(),
        kept,
        dropped: dropped.len(),
        dropped_by_reason: by_reason,
        chosen_accuracy: chosen_ok as f64 / kept as f64,
        rejected_accuracy: rejected_ok as f64 / kept as f64,
    };
    Ok(SynthOutput {
        tuples,
        references,
        dropped,
        stats,
    })
}

const HEADER_PREFIX: &str = "# preference tuples, schema_version=";

/// Writes a header comment line followed by one tuple per line.
pub fn export_pairs(tuples: &[PreferenceTuple], path: &Path) -> Result<()> {
    let mut out = format!("{HEADER_PREFIX}{SCHEMA_VERSION}\n").into_bytes();
    out.extend(crate::jsonl::to_jsonl(tuples)?);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn import_pairs(path: &Path) -> Result<Vec<PreferenceTuple>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut tuples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |message: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let found = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| malformed("missing schema_version".into()))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(Error::SchemaMismatch {
                expected: SCHEMA_VERSION,
                found: found as u32,
            });
        }
        tuples.push(serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?);
    }
    Ok(tuples)
}
