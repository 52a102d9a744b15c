use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::model::{
    backprop_targets, sequence_logprob, target_logprob, target_tape, Example, HeadMask,
    ModelParams, Real,
};
use crate::synth::PreferenceTuple;
use crate::{Error, Result};

use super::{run_loop, Control, OptimConfig, StepOutput, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    /// Reference checkpoint; the target's starting point when absent.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    pub optim: OptimConfig,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            reference: None,
            optim: OptimConfig::default(),
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        self.optim.validate()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln sigmoid(beta * ((w_pol - w_ref) - (l_pol - l_ref)))`.
pub fn dpo_loss(
    logp_w_policy: f64,
    logp_l_policy: f64,
    logp_w_ref: f64,
    logp_l_ref: f64,
    beta: f64,
) -> Result<f64> {
    if ![logp_w_policy, logp_l_policy, logp_w_ref, logp_l_ref]
        .iter()
        .all(|x| x.is_finite())
    {
        return Err(Error::NonFiniteInput("log-probabilities"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let z = beta * ((logp_w_policy - logp_w_ref) - (logp_l_policy - logp_l_ref));
    Ok(softplus(-z))
}

/// Reference log-probabilities of one tuple's chosen and rejected sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogprobs {
    pub chosen: f64,
    pub rejected: f64,
}

fn pair_examples(t: &PreferenceTuple) -> (Example, Example) {
    (
        Example::prompt_response(&t.instruction_tokens, &t.chosen_tokens),
        Example::prompt_response(&t.instruction_tokens, &t.rejected_tokens),
    )
}

fn pair_logprobs<T: Real>(params: &ModelParams<T>, t: &PreferenceTuple) -> Result<PairLogprobs> {
    let none = HeadMask::empty();
    Ok(PairLogprobs {
        chosen: sequence_logprob(params, &t.instruction_tokens, &t.chosen_tokens, &none)?,
        rejected: sequence_logprob(params, &t.instruction_tokens, &t.rejected_tokens, &none)?,
    })
}

/// Frozen-reference log-probabilities, computed once per dataset.
pub fn reference_logprobs(
    reference: &ModelParams<f32>,
    tuples: &[PreferenceTuple],
) -> Result<Vec<PairLogprobs>> {
    tuples.iter().map(|t| pair_logprobs(reference, t)).collect()
}

/// Mean implicit-reward margin `beta * (delta_chosen - delta_rejected)`.
pub fn mean_margin(
    policy: &ModelParams<f32>,
    tuples: &[PreferenceTuple],
    reference: &[PairLogprobs],
    beta: f64,
) -> Result<f64> {
    if tuples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sum = 0.0;
    for (t, r) in tuples.iter().zip(reference) {
        let p = pair_logprobs(policy, t)?;
        sum += beta * ((p.chosen - r.chosen) - (p.rejected - r.rejected));
    }
    Ok(sum / tuples.len() as f64)
}

/// Mean preference loss of a batch with exact gradients; also returns the
/// mean implicit-reward margin.
pub fn dpo_batch_loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    batch: &[&PreferenceTuple],
    reference: &[PairLogprobs],
    beta: f64,
) -> Result<(f64, ModelParams<T>, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let none = HeadMask::empty();
    let scale = 1.0 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut margin = 0.0;
    for (t, r) in batch.iter().zip(reference) {
        let (ex_w, ex_l) = pair_examples(t);
        let tape_w = target_tape(params, &ex_w, &none)?;
        let tape_l = target_tape(params, &ex_l, &none)?;
        let lw = tape_w.as_ref().map_or(0.0, |tp| target_logprob(tp, &ex_w));
        let ll = tape_l.as_ref().map_or(0.0, |tp| target_logprob(tp, &ex_l));
        let z = beta * ((lw - r.chosen) - (ll - r.rejected));
        if !z.is_finite() {
            return Err(Error::NonFiniteLoss(format!("preference logit {z}")));
        }
        loss += scale * softplus(-z);
        margin += scale * z;
        // d/dz softplus(-z) = -sigmoid(-z); the nll backward carries a minus sign
        let g = beta * sigmoid(-z) * scale;
        if let Some(tp) = &tape_w {
            backprop_targets(params, tp, &ex_w, |_| g, &mut grads);
        }
        if let Some(tp) = &tape_l {
            backprop_targets(params, tp, &ex_l, |_| -g, &mut grads);
        }
    }
    Ok((loss, grads, margin))
}

/// Preference optimisation of `target` against the frozen `reference`.
pub fn dpo_train(
    target: &ModelParams<f32>,
    reference: &ModelParams<f32>,
    tuples: &[PreferenceTuple],
    cfg: &DpoConfig,
) -> Result<(ModelParams<f32>, TrainReport)> {
    cfg.validate()?;
    if tuples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if target.layout() != reference.layout() {
        return Err(Error::TopologyMismatch(
            "reference and target differ in shape".into(),
        ));
    }
    let ref_lp = reference_logprobs(reference, tuples)?;
    let mut report = TrainReport::new("dpo");
    report.initial_margin = Some(mean_margin(target, tuples, &ref_lp, cfg.beta)?);
    let mut params = target.clone();
    run_loop(
        &mut params,
        tuples.len(),
        &cfg.optim,
        &mut report,
        |p, idx| {
            let batch: Vec<&PreferenceTuple> = idx.iter().map(|&i| &tuples[i]).collect();
            let refs: Vec<PairLogprobs> = idx.iter().map(|&i| ref_lp[i]).collect();
            let (loss, grads, margin) = dpo_batch_loss_and_grads(p, &batch, &refs, cfg.beta)?;
            Ok(StepOutput {
                loss,
                grads,
                margin: Some(margin),
            })
        },
        |_, _| Ok(Control::Continue),
    )?;
    report.final_margin = Some(mean_margin(&params, tuples, &ref_lp, cfg.beta)?);
    report.final_hash = params.content_hash();
    Ok((params, report))
}
