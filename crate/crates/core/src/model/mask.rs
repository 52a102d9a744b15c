use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, Real};
use crate::{Error, Result};

/// One attention head, addressed by layer and index within the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer < config.n_layers && self.head < config.n_heads {
            Ok(())
        } else {
            Err(Error::InvalidHead(*self))
        }
    }

    /// Row-major index `layer * n_heads + head`.
    pub fn flat(&self, n_heads: usize) -> usize {
        self.layer * n_heads + self.head
    }

    /// Every head of a config in (layer, head) order.
    pub fn all(config: &ModelConfig) -> impl Iterator<Item = HeadId> + '_ {
        (0..config.n_layers).flat_map(move |l| (0..config.n_heads).map(move |h| HeadId::new(l, h)))
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Set of heads whose output is removed from the residual stream.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeadMask(BTreeSet<HeadId>);

impl HeadMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn all(config: &ModelConfig) -> Self {
        Self(HeadId::all(config).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, head: HeadId) -> bool {
        self.0.contains(&head)
    }

    pub fn insert(&mut self, head: HeadId) -> bool {
        self.0.insert(head)
    }

    pub fn iter(&self) -> impl Iterator<Item = &HeadId> {
        self.0.iter()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.0.iter().try_for_each(|h| h.validate(config))
    }

    pub fn is_disjoint(&self, other: &HeadMask) -> bool {
        self.0.is_disjoint(&other.0)
    }

    /// Per-layer boolean gates, `true` meaning the head is masked.
    pub(crate) fn gates(&self, config: &ModelConfig) -> Vec<Vec<bool>> {
        let mut g = vec![vec![false; config.n_heads]; config.n_layers];
        for h in &self.0 {
            g[h.layer][h.head] = true;
        }
        g
    }
}

impl FromIterator<HeadId> for HeadMask {
    fn from_iter<I: IntoIterator<Item = HeadId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a HeadMask {
    type Item = &'a HeadId;
    type IntoIter = std::collections::btree_set::Iter<'a, HeadId>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Returns a copy of `params` with every masked head's `W_o` column block
/// set to zero. The input is left untouched.
pub fn apply_head_mask<T: Real>(
    params: &ModelParams<T>,
    mask: &HeadMask,
) -> Result<ModelParams<T>> {
    mask.validate(params.config())?;
    let mut out = params.clone();
    for &head in mask {
        out.head_block_mut(head)?.fill(T::zero());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams<f32> {
        ModelParams::init(ModelConfig::default()).unwrap()
    }

    #[test]
    fn empty_mask_is_identity() {
        let p = params();
        let q = apply_head_mask(&p, &HeadMask::empty()).unwrap();
        assert_eq!(p.to_le_bytes(), q.to_le_bytes());
    }

    #[test]
    fn single_head_zeroes_exactly_its_block() {
        let p = params();
        let cfg = p.config().clone();
        let head = HeadId::new(1, 2);
        let q = apply_head_mask(&p, &[head].into_iter().collect()).unwrap();
        let block = p.layout().head_block(&cfg, head);
        assert_eq!(block.len(), cfg.d_head() * cfg.d_model);
        let mut changed = 0;
        for (i, (a, b)) in p.as_slice().iter().zip(q.as_slice()).enumerate() {
            if block.contains(&i) {
                assert_eq!(*b, 0.0);
                changed += 1;
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(changed, cfg.d_head() * cfg.d_model);
    }

    #[test]
    fn idempotent() {
        let p = params();
        let m: HeadMask = [HeadId::new(0, 1), HeadId::new(1, 3)].into_iter().collect();
        let once = apply_head_mask(&p, &m).unwrap();
        let twice = apply_head_mask(&once, &m).unwrap();
        assert_eq!(once.to_le_bytes(), twice.to_le_bytes());
    }

    #[test]
    fn rejects_invalid_head() {
        let p = params();
        let m: HeadMask = [HeadId::new(2, 0)].into_iter().collect();
        assert!(matches!(
            apply_head_mask(&p, &m),
            Err(Error::InvalidHead(_))
        ));
        let m: HeadMask = [HeadId::new(0, 4)].into_iter().collect();
        assert!(matches!(
            apply_head_mask(&p, &m),
            Err(Error::InvalidHead(_))
        ));
    }
}
