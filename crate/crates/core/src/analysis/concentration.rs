use serde::{Deserialize, Serialize};

use crate::detect::RetrievalScoreTable;
use crate::model::HeadId;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKMass {
    pub k: usize,
    /// Fraction of total score held by the `k` highest-scoring heads.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauCount {
    pub tau: f64,
    pub heads: usize,
}

/// How concentrated retrieval score is across heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSummary {
    /// Heads by descending score; ties keep (layer, head) order.
    pub sorted: Vec<(HeadId, f64)>,
    pub top_k: Vec<TopKMass>,
    pub gini: f64,
    pub above_tau: Vec<TauCount>,
    pub warnings: Vec<String>,
}

/// Gini coefficient of non-negative values; 0 when all are zero.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sum_i sum_j |x_i - x_j| = 2 * sum_i (2i - n + 1) x_(i) over ascending order
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (2.0 * i as f64 - n as f64 + 1.0) * x)
        .sum();
    (weighted / (n as f64 * total)).clamp(0.0, 1.0)
}

pub fn concentration(
    table: &RetrievalScoreTable,
    ks: &[usize],
    taus: &[f64],
) -> Result<ConcentrationSummary> {
    if table.scores.is_empty() {
        return Err(Error::InvalidArgument("empty score table".into()));
    }
    let n = table.scores.len();
    let mut sorted: Vec<(HeadId, f64)> = table.heads().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: f64 = table.scores.iter().sum();
    let mut warnings = Vec::new();
    let top_k = ks
        .iter()
        .map(|&k| {
            let used = k.min(n);
            if used != k {
                warnings.push(format!("top-{k} clamped to {n} heads"));
            }
            let top: f64 = sorted[..used].iter().map(|&(_, s)| s).sum();
            TopKMass {
                k: used,
                mass: if total > 0.0 {
                    (top / total).clamp(0.0, 1.0)
                } else {
                    0.0
                },
            }
        })
        .collect();
    let above_tau = taus
        .iter()
        .map(|&tau| TauCount {
            tau,
            heads: table.scores.iter().filter(|&&s| s >= tau).count(),
        })
        .collect();
    Ok(ConcentrationSummary {
        sorted,
        top_k,
        gini: gini(&table.scores),
        above_tau,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadMask;

    fn table(scores: &[f64]) -> RetrievalScoreTable {
        RetrievalScoreTable {
            n_layers: 1,
            n_heads: scores.len(),
            scores: scores.to_vec(),
            test_size: 1,
            test_set_hash: String::new(),
            checkpoint_hash: String::new(),
            seed: 0,
            tau: None,
            selected: HeadMask::empty(),
        }
    }

    #[test]
    fn point_mass() {
        let s = concentration(&table(&[0.0, 0.9, 0.0, 0.0]), &[1], &[]).unwrap();
        assert_eq!(s.top_k[0].mass, 1.0);
        assert!((s.gini - 0.75).abs() < 1e-12);
        assert_eq!(s.sorted[0].0, HeadId::new(0, 1));
    }

    #[test]
    fn uniform() {
        let s = concentration(&table(&[0.2; 5]), &[1, 2, 5], &[]).unwrap();
        for t in &s.top_k {
            assert!((t.mass - t.k as f64 / 5.0).abs() < 1e-12);
        }
        assert!(s.gini.abs() < 1e-12);
    }

    #[test]
    fn arithmetic() {
        let s = concentration(&table(&[0.1, 0.4, 0.2, 0.3]), &[2], &[0.1, 0.25]).unwrap();
        assert!((s.top_k[0].mass - 0.7).abs() < 1e-12);
        assert_eq!(s.above_tau[0].heads, 4);
        assert_eq!(s.above_tau[1].heads, 2);
    }

    #[test]
    fn oversized_k_is_clamped_with_warning() {
        let s = concentration(&table(&[0.1, 0.2]), &[5], &[]).unwrap();
        assert_eq!(s.top_k[0].k, 2);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn ties_break_by_head_order() {
        let s = concentration(&table(&[0.5, 0.5, 0.5]), &[1], &[]).unwrap();
        let order: Vec<usize> = s.sorted.iter().map(|(h, _)| h.head).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }
}
