use super::{backward, forward, forward_tape, kernels, HeadMask, ModelParams, Real, Tape, Token};
use crate::{Error, Result};

/// A token sequence plus the positions whose token is a prediction target.
///
/// `target_mask[i]` means token `i` is predicted from positions `0..i`;
/// `target_mask[0]` is ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<Token>,
    pub target_mask: Vec<bool>,
}

impl Example {
    /// Every token after the first is a target.
    pub fn all_targets(tokens: Vec<Token>) -> Self {
        let mut target_mask = vec![true; tokens.len()];
        if let Some(first) = target_mask.first_mut() {
            *first = false;
        }
        Self {
            tokens,
            target_mask,
        }
    }

    /// Only the response tokens are targets.
    pub fn prompt_response(prompt: &[Token], response: &[Token]) -> Self {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(response);
        let mut target_mask = vec![false; prompt.len()];
        target_mask.extend(std::iter::repeat_n(true, response.len()));
        Self {
            tokens,
            target_mask,
        }
    }

    pub fn n_targets(&self) -> usize {
        self.target_mask.iter().skip(1).filter(|&&m| m).count()
    }
}

/// What `loss_and_grads` minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Mean next-token cross-entropy over all targets in the batch.
    NextToken,
    /// Negative summed log-probability of the targets.
    SequenceLogProb,
}

/// A weight on the negative log-likelihood of one target position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenWeight {
    pub position: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct LossAndGrads<T> {
    pub loss: f64,
    pub grads: ModelParams<T>,
    pub n_targets: usize,
}

/// Forward + backward for `sum_i weight_i * (-log p(tokens[i+1] | tokens[..=i]))`.
/// Gradients are accumulated into `grads`; returns the weighted loss.
pub(crate) fn weighted_nll<T: Real>(
    params: &ModelParams<T>,
    example: &Example,
    weight: impl Fn(usize) -> f64,
    mask: &HeadMask,
    grads: &mut ModelParams<T>,
) -> Result<f64> {
    let Some(tape) = target_tape(params, example, mask)? else {
        return Ok(0.0);
    };
    Ok(backprop_targets(params, &tape, example, weight, grads))
}

/// Forward tape over `tokens[..n-1]`, or `None` when nothing is predicted.
pub(crate) fn target_tape<T: Real>(
    params: &ModelParams<T>,
    example: &Example,
    mask: &HeadMask,
) -> Result<Option<Tape<T>>> {
    let n = example.tokens.len();
    if example.n_targets() == 0 || n < 2 {
        return Ok(None);
    }
    forward_tape(params, &example.tokens[..n - 1], mask).map(Some)
}

/// Summed log-probability of the targets under a tape from [`target_tape`].
pub(crate) fn target_logprob<T: Real>(tape: &Tape<T>, example: &Example) -> f64 {
    (0..example.tokens.len() - 1)
        .filter(|&pos| example.target_mask[pos + 1])
        .map(|pos| {
            kernels::log_softmax_at(
                tape.output.logits_row(pos),
                example.tokens[pos + 1] as usize,
            )
            .as_f64()
        })
        .sum()
}

/// Backward of the weighted target NLL; returns the weighted loss.
pub(crate) fn backprop_targets<T: Real>(
    params: &ModelParams<T>,
    tape: &Tape<T>,
    example: &Example,
    weight: impl Fn(usize) -> f64,
    grads: &mut ModelParams<T>,
) -> f64 {
    let rows = example.tokens.len() - 1;
    let vocab = params.config().vocab_size;
    let mut dlogits = vec![T::zero(); rows * vocab];
    let mut loss = 0.0;
    for pos in 0..rows {
        if !example.target_mask[pos + 1] {
            continue;
        }
        let w = weight(pos);
        let target = example.tokens[pos + 1] as usize;
        let logits = tape.output.logits_row(pos);
        let lp = kernels::log_softmax_at(logits, target).as_f64();
        loss += w * -lp;
        let row = &mut dlogits[pos * vocab..(pos + 1) * vocab];
        row.copy_from_slice(logits);
        kernels::softmax_in_place(row);
        row[target] -= T::one();
        let wt = T::of(w);
        for v in row.iter_mut() {
            *v *= wt;
        }
    }
    backward(params, tape, &dlogits, grads);
    loss
}

/// Loss and exact gradients for a batch.
pub fn loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    batch: &[Example],
    objective: Objective,
) -> Result<LossAndGrads<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for ex in batch {
        super::check_tokens(params.config(), &ex.tokens)?;
        if ex.target_mask.len() != ex.tokens.len() {
            return Err(Error::InvalidArgument(
                "target mask length differs from token count".into(),
            ));
        }
    }
    let n_targets: usize = batch.iter().map(Example::n_targets).sum();
    let mut grads = params.zeros_like();
    let scale = match objective {
        Objective::NextToken if n_targets > 0 => 1.0 / n_targets as f64,
        Objective::NextToken => 0.0,
        Objective::SequenceLogProb => 1.0,
    };
    let mut loss = 0.0;
    for ex in batch {
        loss += weighted_nll(params, ex, |_| scale, &HeadMask::empty(), &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("batch loss {loss}")));
    }
    Ok(LossAndGrads {
        loss,
        grads,
        n_targets,
    })
}

/// Log-probability of each response token given the prompt and the
/// preceding response tokens.
pub fn token_logprobs<T: Real>(
    params: &ModelParams<T>,
    prompt: &[Token],
    response: &[Token],
    mask: &HeadMask,
) -> Result<Vec<f64>> {
    let total = prompt.len() + response.len();
    let max = params.config().max_seq_len;
    if total > max {
        return Err(Error::ContextOverflow {
            prompt: prompt.len(),
            new: response.len(),
            max,
        });
    }
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must not be empty".into()));
    }
    if response.is_empty() {
        return Ok(Vec::new());
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(&response[..response.len() - 1]);
    let out = forward(params, &tokens, mask)?;
    let p = prompt.len();
    response
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            super::check_tokens(params.config(), &[t])?;
            Ok(kernels::log_softmax_at(out.logits_row(p - 1 + i), t as usize).as_f64())
        })
        .collect::<Result<Vec<_>>>()
}

/// `sum_t log softmax(logits_t)[response_t]` over response tokens only.
pub fn sequence_logprob<T: Real>(
    params: &ModelParams<T>,
    prompt: &[Token],
    response: &[Token],
    mask: &HeadMask,
) -> Result<f64> {
    Ok(token_logprobs(params, prompt, response, mask)?.iter().sum())
}
