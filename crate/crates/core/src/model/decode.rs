use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward_incremental, KvCache};
use super::{check_tokens, forward, kernels, HeadMask, ModelParams, Real, Token};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub stop_token: Option<Token>,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize, stop_token: Option<Token>) -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            max_new_tokens,
            stop_token,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == DecodeMode::Sample
            && !(self.temperature > 0.0 && self.temperature.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "sampling temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument(
                "max_new_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Whether decode reuses keys/values across steps or recomputes the whole
/// sequence at every step. Both produce identical tokens and traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    KvCache,
    Recompute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention<T = f32> {
    /// Distribution over positions `0..=query_position`.
    pub weights: Vec<T>,
    /// Lowest-index argmax of `weights`.
    pub argmax: usize,
}

/// Attention of every head at one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep<T = f32> {
    /// The token emitted at this step.
    pub token: Token,
    /// Position of the query row whose output produced `token`.
    pub query_position: usize,
    /// `[layer * n_heads + head]`.
    pub heads: Vec<HeadAttention<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace<T = f32> {
    pub n_layers: usize,
    pub n_heads: usize,
    pub steps: Vec<TraceStep<T>>,
}

impl<T> AttentionTrace<T> {
    pub fn head(&self, step: usize, layer: usize, head: usize) -> &HeadAttention<T> {
        &self.steps[step].heads[layer * self.n_heads + head]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T = f32> {
    /// Emitted tokens, including the stop token if one was produced.
    pub tokens: Vec<Token>,
    pub trace: AttentionTrace<T>,
    pub stopped: bool,
}

impl<T> Generation<T> {
    /// Emitted tokens without the trailing stop token.
    pub fn content(&self) -> &[Token] {
        if self.stopped {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

pub fn decode<T: Real>(
    params: &ModelParams<T>,
    prompt: &[Token],
    cfg: &DecodeConfig,
    mask: &HeadMask,
) -> Result<Generation<T>> {
    decode_with(params, prompt, cfg, mask, CachePolicy::KvCache)
}

pub fn decode_with<T: Real>(
    params: &ModelParams<T>,
    prompt: &[Token],
    cfg: &DecodeConfig,
    mask: &HeadMask,
    policy: CachePolicy,
) -> Result<Generation<T>> {
    cfg.validate()?;
    let mc = params.config();
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must not be empty".into()));
    }
    if prompt.len() + cfg.max_new_tokens > mc.max_seq_len {
        return Err(Error::ContextOverflow {
            prompt: prompt.len(),
            new: cfg.max_new_tokens,
            max: mc.max_seq_len,
        });
    }
    check_tokens(mc, prompt)?;
    mask.validate(mc)?;
    let gates = mask.gates(mc);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = KvCache::new(mc.n_layers);
    let mut seq = prompt.to_vec();
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    let mut stopped = false;

    let mut out = match policy {
        CachePolicy::KvCache => forward_incremental(params, prompt, &mut cache, &gates)?,
        CachePolicy::Recompute => forward(params, &seq, mask)?,
    };
    loop {
        let last = out.rows() - 1;
        let pos = seq.len() - 1;
        let token = pick(out.logits_row(last), cfg, &mut rng);
        let heads = (0..mc.n_layers)
            .flat_map(|l| (0..mc.n_heads).map(move |h| (l, h)))
            .map(|(l, h)| {
                let weights = out.attention.row(l, h, pos).to_vec();
                let argmax = kernels::argmax(&weights);
                HeadAttention { weights, argmax }
            })
            .collect();
        steps.push(TraceStep {
            token,
            query_position: pos,
            heads,
        });
        tokens.push(token);
        if Some(token) == cfg.stop_token {
            stopped = true;
            break;
        }
        if tokens.len() == cfg.max_new_tokens {
            break;
        }
        seq.push(token);
        out = match policy {
            CachePolicy::KvCache => forward_incremental(params, &[token], &mut cache, &gates)?,
            CachePolicy::Recompute => forward(params, &seq, mask)?,
        };
    }
    Ok(Generation {
        tokens,
        trace: AttentionTrace {
            n_layers: mc.n_layers,
            n_heads: mc.n_heads,
            steps,
        },
        stopped,
    })
}

fn pick<T: Real>(logits: &[T], cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> Token {
    match cfg.mode {
        DecodeMode::Greedy => kernels::argmax(logits) as Token,
        DecodeMode::Sample => {
            let inv_t = 1.0 / cfg.temperature;
            let scaled: Vec<f64> = logits.iter().map(|&x| x.as_f64() * inv_t).collect();
            let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scaled.iter().map(|x| (x - m).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i as Token;
                }
                u -= w;
            }
            // rounding left u past the last bucket
            weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as Token
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> ModelParams<f32> {
        ModelParams::init(ModelConfig::default()).unwrap()
    }

    #[test]
    fn greedy_picks_strict_max() {
        let mut p = params();
        // make token 5 dominate through the unembedding bias direction
        let r = p.layout().unembed.clone();
        let vocab = p.config().vocab_size;
        let ln_bias = p.layout().ln_f_bias.clone();
        p.as_mut_slice()[ln_bias].fill(1.0);
        let u = &mut p.as_mut_slice()[r];
        for k in 0..u.len() / vocab {
            u[k * vocab + 5] = 1.0;
        }
        let g = decode(
            &p,
            &[1, 2, 3],
            &DecodeConfig::greedy(1, None),
            &HeadMask::empty(),
        )
        .unwrap();
        assert_eq!(g.tokens, vec![5]);
    }

    #[test]
    fn cached_and_recomputed_agree() {
        let p = params();
        for cfg in [
            DecodeConfig::greedy(10, None),
            DecodeConfig {
                mode: DecodeMode::Sample,
                temperature: 0.8,
                max_new_tokens: 10,
                stop_token: Some(3),
                seed: 11,
            },
        ] {
            let a = decode_with(
                &p,
                &[1, 2, 3, 4],
                &cfg,
                &HeadMask::empty(),
                CachePolicy::KvCache,
            )
            .unwrap();
            let b = decode_with(
                &p,
                &[1, 2, 3, 4],
                &cfg,
                &HeadMask::empty(),
                CachePolicy::Recompute,
            )
            .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn trace_shape() {
        let p = params();
        let g = decode(
            &p,
            &[1, 2, 3, 4],
            &DecodeConfig::greedy(5, None),
            &HeadMask::empty(),
        )
        .unwrap();
        assert_eq!(g.trace.steps.len(), g.tokens.len());
        for (t, step) in g.trace.steps.iter().enumerate() {
            for h in &step.heads {
                assert_eq!(h.weights.len(), 4 + t);
                assert!(h.argmax < 4 + t);
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = params();
        let cfg = DecodeConfig {
            mode: DecodeMode::Sample,
            temperature: 1.0,
            max_new_tokens: 20,
            stop_token: None,
            seed: 5,
        };
        let a = decode(&p, &[1], &cfg, &HeadMask::empty()).unwrap();
        let b = decode(&p, &[1], &cfg, &HeadMask::empty()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overflow_and_bad_temperature() {
        let p = params();
        assert!(matches!(
            decode(
                &p,
                &[1; 60],
                &DecodeConfig::greedy(5, None),
                &HeadMask::empty()
            ),
            Err(Error::ContextOverflow { .. })
        ));
        let cfg = DecodeConfig {
            mode: DecodeMode::Sample,
            temperature: 0.0,
            max_new_tokens: 2,
            stop_token: None,
            seed: 0,
        };
        assert!(decode(&p, &[1], &cfg, &HeadMask::empty()).is_err());
    }
}
