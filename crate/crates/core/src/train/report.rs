use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Mean implicit-reward margin of the batch, preference training only.
    pub margin: Option<f64>,
    /// Wall-clock time of the step; written only on request.
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub accuracy: f64,
}

/// Per-step log plus a summary of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// "pretrain", "sft" or "dpo".
    pub objective: String,
    /// Free-form provenance such as the rejected-sampler strategy.
    pub tag: Option<String>,
    pub total_steps: usize,
    pub stopped_early: bool,
    pub initial_margin: Option<f64>,
    pub final_margin: Option<f64>,
    pub evals: Vec<EvalRecord>,
    pub final_hash: String,
    #[serde(skip)]
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn new(objective: &str) -> Self {
        Self {
            objective: objective.to_string(),
            ..Self::default()
        }
    }

    pub fn all_finite(&self) -> bool {
        self.steps.iter().all(|s| {
            s.loss.is_finite()
                && s.lr.is_finite()
                && s.grad_norm.is_finite()
                && s.margin.is_none_or(f64::is_finite)
        })
    }

    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut out = String::from("step,loss,lr,grad_norm,margin");
        if with_timing {
            out.push_str(",wall_ms");
        }
        out.push('\n');
        for s in &self.steps {
            let margin = s.margin.map(|m| format!("{m:e}")).unwrap_or_default();
            let _ = write!(
                out,
                "{},{:e},{:e},{:e},{}",
                s.step, s.loss, s.lr, s.grad_norm, margin
            );
            if with_timing {
                let _ = write!(out, ",{:.3}", s.wall_ms);
            }
            out.push('\n');
        }
        out
    }

    /// Writes `train.csv` and `train.json` into `dir`.
    pub fn write(&self, dir: &Path, with_timing: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("train.csv"), self.to_csv(with_timing))?;
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fs::write(dir.join("train.json"), json)?;
        Ok(())
    }
}
