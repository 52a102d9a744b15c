//! Ablated models and the control masks they are compared against.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::RetrievalScoreTable;
use crate::model::{apply_head_mask, HeadId, HeadMask, ModelParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Retrieval,
    NonRetrieval,
    Random,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Retrieval => "retrieval",
            MaskKind::NonRetrieval => "non-retrieval",
            MaskKind::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskStrategy {
    pub kind: MaskKind,
    /// Defaults to the size of the selected retrieval set.
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl MaskStrategy {
    pub fn new(kind: MaskKind, seed: u64) -> Self {
        Self {
            kind,
            size: None,
            seed,
        }
    }
}

/// Builds the mask for `strategy` from the table's selected set.
pub fn build_mask(table: &RetrievalScoreTable, strategy: &MaskStrategy) -> Result<HeadMask> {
    let selected = &table.selected;
    let size = strategy.size.unwrap_or(selected.len());
    let all: Vec<HeadId> = table.heads().map(|(id, _)| id).collect();
    match strategy.kind {
        MaskKind::Retrieval => {
            if size != selected.len() {
                return Err(Error::InvalidArgument(format!(
                    "retrieval mask has {} heads, {size} requested",
                    selected.len()
                )));
            }
            Ok(selected.clone())
        }
        MaskKind::NonRetrieval => {
            let pool: Vec<HeadId> = all.into_iter().filter(|h| !selected.contains(*h)).collect();
            sample(&pool, size, strategy.seed)
        }
        MaskKind::Random => sample(&all, size, strategy.seed),
    }
}

fn sample(pool: &[HeadId], size: usize, seed: u64) -> Result<HeadMask> {
    if size > pool.len() {
        return Err(Error::MaskTooLarge {
            size,
            pool: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), size)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// Mask file contents: the heads plus how they were chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRecord {
    pub strategy: MaskKind,
    pub seed: u64,
    pub base_hash: String,
    pub heads: HeadMask,
}

impl MaskRecord {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fs::write(path, json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Zeroes the masked heads' output blocks and records provenance.
pub fn ablated_model(
    params: &ModelParams<f32>,
    mask: &HeadMask,
    strategy: MaskKind,
    seed: u64,
) -> Result<(ModelParams<f32>, MaskRecord)> {
    let ablated = apply_head_mask(params, mask)?;
    Ok((
        ablated,
        MaskRecord {
            strategy,
            seed,
            base_hash: params.content_hash(),
            heads: mask.clone(),
        },
    ))
}

/// Rebuilds an ablated model from its base and record, checking the base
/// hash.
pub fn reconstruct(base: &ModelParams<f32>, record: &MaskRecord) -> Result<ModelParams<f32>> {
    let found = base.content_hash();
    if found != record.base_hash {
        return Err(Error::TopologyMismatch(format!(
            "mask was built for base {}, got {found}",
            record.base_hash
        )));
    }
    apply_head_mask(base, &record.heads)
}
