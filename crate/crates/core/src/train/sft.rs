use crate::model::{loss_and_grads, Example, ModelParams, Objective};
use crate::synth::PreferenceTuple;
use crate::{Error, Result};

use super::{run_loop, Control, OptimConfig, StepOutput, TrainReport};

/// Cross-entropy on the chosen response given the instruction.
pub fn sft_train(
    target: &ModelParams<f32>,
    tuples: &[PreferenceTuple],
    cfg: &OptimConfig,
) -> Result<(ModelParams<f32>, TrainReport)> {
    if tuples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let examples: Vec<Example> = tuples
        .iter()
        .map(|t| Example::prompt_response(&t.instruction_tokens, &t.chosen_tokens))
        .collect();
    let mut report = TrainReport::new("sft");
    let mut params = target.clone();
    run_loop(
        &mut params,
        examples.len(),
        cfg,
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
        |_, _| Ok(Control::Continue),
    )?;
    report.final_hash = params.content_hash();
    Ok((params, report))
}
