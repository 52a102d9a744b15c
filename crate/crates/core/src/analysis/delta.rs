use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detect::RetrievalScoreTable;
use crate::model::{HeadId, HeadMask};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDelta {
    pub head: HeadId,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
    pub masked: bool,
}

/// Per-head retrieval-score change, split by mask membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub heads: Vec<HeadDelta>,
    /// `None` when the group is empty.
    pub masked_mean_delta: Option<f64>,
    pub complement_mean_delta: Option<f64>,
    pub mean_before: f64,
    pub mean_after: f64,
    pub test_set_hash: String,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn delta_report(
    before: &RetrievalScoreTable,
    after: &RetrievalScoreTable,
    mask: &HeadMask,
) -> Result<DeltaReport> {
    if before.n_layers != after.n_layers || before.n_heads != after.n_heads {
        return Err(Error::TopologyMismatch(format!(
            "before has {}x{} heads, after has {}x{}",
            before.n_layers, before.n_heads, after.n_layers, after.n_heads
        )));
    }
    if before.test_set_hash != after.test_set_hash {
        return Err(Error::InvalidArgument(
            "before and after scores come from different detection test sets".into(),
        ));
    }
    if let Some(bad) = mask
        .iter()
        .find(|h| h.layer >= before.n_layers || h.head >= before.n_heads)
    {
        return Err(Error::InvalidHead(*bad));
    }
    let heads: Vec<HeadDelta> = before
        .heads()
        .map(|(id, b)| {
            let a = after.score(id);
            HeadDelta {
                head: id,
                before: b,
                after: a,
                delta: a - b,
                masked: mask.contains(id),
            }
        })
        .collect();
    Ok(DeltaReport {
        masked_mean_delta: mean(heads.iter().filter(|h| h.masked).map(|h| h.delta)),
        complement_mean_delta: mean(heads.iter().filter(|h| !h.masked).map(|h| h.delta)),
        mean_before: mean(heads.iter().map(|h| h.before)).unwrap_or(0.0),
        mean_after: mean(heads.iter().map(|h| h.after)).unwrap_or(0.0),
        test_set_hash: before.test_set_hash.clone(),
        heads,
    })
}

impl DeltaReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,before,after,delta,masked\n");
        for h in &self.heads {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                h.head.layer, h.head.head, h.before, h.after, h.delta, h.masked
            );
        }
        out
    }
}
