//! Optimisation: language-model pretraining, supervised fine-tuning on
//! chosen responses, and preference optimisation against a frozen reference.

mod dpo;
mod optim;
mod pretrain;
mod report;
mod schedule;
mod sft;

pub use dpo::{
    dpo_batch_loss_and_grads, dpo_loss, dpo_train, mean_margin, reference_logprobs, DpoConfig,
    PairLogprobs,
};
pub use optim::{clip_grad_norm, grad_norm, AdamW};
pub use pretrain::{kv_recall_accuracy, pretrain, PretrainConfig};
pub use report::{EvalRecord, StepRecord, TrainReport};
pub use schedule::{schedule_lr, warmup_end};
pub use sft::sft_train;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::seed::item_seed;
use crate::{Error, LastGood, Result};

/// Optimiser and schedule settings shared by every training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimConfig {
    /// Large-model preference-tuning values with the batch scaled to 64.
    fn default() -> Self {
        Self {
            peak_lr: 5e-7,
            min_lr: 5e-8,
            warmup_fraction: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: default_eps(),
            batch_size: 64,
            epochs: 1,
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return bad("learning rates must satisfy 0 <= min_lr <= peak_lr");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight_decay must be non-negative and eps positive");
        }
        if matches!(self.max_grad_norm, Some(n) if n <= 0.0) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }

    pub fn total_steps(&self, n_items: usize) -> usize {
        n_items.div_ceil(self.batch_size) * self.epochs
    }
}

pub(crate) struct StepOutput {
    pub loss: f64,
    pub grads: ModelParams<f32>,
    pub margin: Option<f64>,
}

pub(crate) enum Control {
    Continue,
    Stop,
}

/// Shuffled mini-batch loop with divergence detection.
///
/// `step_fn` computes loss and gradients for a batch of item indices;
/// `after_step` sees the updated parameters and may stop early.
pub(crate) fn run_loop(
    params: &mut ModelParams<f32>,
    n_items: usize,
    cfg: &OptimConfig,
    report: &mut TrainReport,
    mut step_fn: impl FnMut(&ModelParams<f32>, &[usize]) -> Result<StepOutput>,
    mut after_step: impl FnMut(usize, &ModelParams<f32>) -> Result<Control>,
) -> Result<()> {
    cfg.validate()?;
    let total = cfg.total_steps(n_items);
    report.total_steps = total;
    let mut opt = AdamW::new(params.layout(), cfg);
    let mut step = 0;
    let mut order: Vec<usize> = (0..n_items).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(item_seed(
            cfg.seed,
            epoch as u64,
        )));
        for batch in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let diverged = |detail: String, last: &ModelParams<f32>| Error::Diverged {
                step,
                detail,
                last_good: Box::new(LastGood(last.clone())),
            };
            let mut out = match step_fn(params, batch) {
                Ok(o) => o,
                Err(Error::NonFiniteLoss(d)) => return Err(diverged(d, params)),
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() {
                return Err(diverged(format!("loss {}", out.loss), params));
            }
            let norm = match cfg.max_grad_norm {
                Some(max) => clip_grad_norm(&mut out.grads, max),
                None => grad_norm(&out.grads),
            };
            if !norm.is_finite() {
                return Err(diverged(format!("gradient norm {norm}"), params));
            }
            let lr = schedule_lr(step + 1, total, cfg);
            let before = params.clone();
            opt.step(params, &out.grads, lr);
            if !params.all_finite() {
                *params = before.clone();
                return Err(diverged(
                    "non-finite parameters after update".into(),
                    &before,
                ));
            }
            report.steps.push(StepRecord {
                step,
                loss: out.loss,
                lr,
                grad_norm: norm,
                margin: out.margin,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
            if let Control::Stop = after_step(step, params)? {
                report.stopped_early = step < total;
                return Ok(());
            }
        }
    }
    Ok(())
}
