use serde::{Deserialize, Serialize};

use crate::model::{
    decode, loss_and_grads, DecodeConfig, Example, HeadMask, ModelParams, Objective,
};
use crate::tasks::{score_answer, KvSequence, EOS};
use crate::{Error, Result};

use super::{run_loop, Control, EvalRecord, OptimConfig, StepOutput, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    /// Held-out accuracy is measured every this many steps.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Smallest accuracy gain that counts as improvement.
    pub min_delta: f64,
    /// Training stops as soon as held-out accuracy reaches this.
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
}

fn default_target() -> f64 {
    0.99
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                peak_lr: 3e-3,
                min_lr: 3e-4,
                warmup_fraction: 0.05,
                weight_decay: 0.1,
                beta1: 0.9,
                beta2: 0.95,
                eps: 1e-8,
                batch_size: 16,
                epochs: 1,
                max_grad_norm: Some(1.0),
                seed: 0,
            },
            eval_every: 250,
            patience: 12,
            min_delta: 0.002,
            target_accuracy: default_target(),
        }
    }
}

/// Fraction of queried sequences whose first query is answered exactly by
/// greedy decoding.
pub fn kv_recall_accuracy(params: &ModelParams<f32>, heldout: &[KvSequence]) -> Result<f64> {
    let mut correct = 0;
    let mut total = 0;
    for (prompt, answer) in heldout.iter().filter_map(KvSequence::first_query_prompt) {
        total += 1;
        let cfg = DecodeConfig::greedy(answer.len() + 1, Some(EOS));
        let gen = decode(params, prompt, &cfg, &HeadMask::empty())?;
        if gen.stopped && score_answer(answer, &gen.tokens, Some(EOS)).is_correct() {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyTestSet);
    }
    Ok(correct as f64 / total as f64)
}

/// Next-token training on answer segments, stopping once held-out recall
/// accuracy stops improving. Returns the best evaluated parameters.
pub fn pretrain(
    params: &ModelParams<f32>,
    corpus: &[KvSequence],
    heldout: &[KvSequence],
    cfg: &PretrainConfig,
) -> Result<(ModelParams<f32>, TrainReport)> {
    if cfg.eval_every == 0 {
        return Err(Error::InvalidArgument("eval_every must be positive".into()));
    }
    if !(cfg.target_accuracy > 0.0 && cfg.target_accuracy <= 1.0) {
        return Err(Error::InvalidArgument(
            "target_accuracy must be in (0, 1]".into(),
        ));
    }
    let examples: Vec<Example> = corpus.iter().map(KvSequence::example).collect();
    let mut report = TrainReport::new("pretrain");
    let mut current = params.clone();
    let mut best = (kv_recall_accuracy(params, heldout)?, params.clone());
    report.evals.push(EvalRecord {
        step: 0,
        accuracy: best.0,
    });
    let mut stale = 0;
    let total = cfg.optim.total_steps(examples.len());
    let evals = std::cell::RefCell::new(std::mem::take(&mut report.evals));
    run_loop(
        &mut current,
        examples.len(),
        &cfg.optim,
        &mut report,
        |p, idx| {
            let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
            let out = loss_and_grads(p, &batch, Objective::NextToken)?;
            Ok(StepOutput {
                loss: out.loss,
                grads: out.grads,
                margin: None,
            })
        },
        |step, p| {
            if step % cfg.eval_every != 0 && step != total {
                return Ok(Control::Continue);
            }
            let acc = kv_recall_accuracy(p, heldout)?;
            evals.borrow_mut().push(EvalRecord {
                step,
                accuracy: acc,
            });
            if acc > best.0 + cfg.min_delta || (acc > best.0 && acc == 1.0) {
                best = (acc, p.clone());
                stale = 0;
            } else {
                stale += 1;
            }
            if best.0 >= cfg.target_accuracy || stale >= cfg.patience {
                Ok(Control::Stop)
            } else {
                Ok(Control::Continue)
            }
        },
    )?;
    report.evals = evals.into_inner();
    let params = best.1;
    report.final_hash = params.content_hash();
    Ok((params, report))
}
