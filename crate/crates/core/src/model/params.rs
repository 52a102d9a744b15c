use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HeadId, ModelConfig, PositionalScheme, Real};
use crate::{Error, Result};

/// Parameter tensor classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    TokEmb,
    PosEmb,
    Ln1Gain,
    Ln1Bias,
    Wq,
    Wk,
    Wv,
    Wo,
    Ln2Gain,
    Ln2Bias,
    MlpWIn,
    MlpBIn,
    MlpWOut,
    MlpBOut,
    LnFGain,
    LnFBias,
    Unembed,
}

impl TensorKind {
    /// Whether decoupled weight decay applies to this class.
    pub fn decays(self) -> bool {
        matches!(
            self,
            TensorKind::TokEmb
                | TensorKind::PosEmb
                | TensorKind::Wq
                | TensorKind::Wk
                | TensorKind::Wv
                | TensorKind::Wo
                | TensorKind::MlpWIn
                | TensorKind::MlpWOut
                | TensorKind::Unembed
        )
    }
}

/// Name, shape and location of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub kind: TensorKind,
    pub layer: Option<usize>,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerLayout {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub w_q: Range<usize>,
    pub w_k: Range<usize>,
    pub w_v: Range<usize>,
    pub w_o: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub mlp_w_in: Range<usize>,
    pub mlp_b_in: Range<usize>,
    pub mlp_w_out: Range<usize>,
    pub mlp_b_out: Range<usize>,
}

/// Offsets of every tensor for a given config.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub(crate) tok_emb: Range<usize>,
    pub(crate) pos_emb: Option<Range<usize>>,
    pub(crate) layers: Vec<LayerLayout>,
    pub(crate) ln_f_gain: Range<usize>,
    pub(crate) ln_f_bias: Range<usize>,
    pub(crate) unembed: Range<usize>,
    specs: Vec<TensorSpec>,
    total: usize,
}

struct Builder {
    specs: Vec<TensorSpec>,
    cursor: usize,
}

impl Builder {
    fn push(
        &mut self,
        name: String,
        kind: TensorKind,
        layer: Option<usize>,
        shape: Vec<usize>,
    ) -> Range<usize> {
        let len: usize = shape.iter().product();
        let range = self.cursor..self.cursor + len;
        self.cursor += len;
        self.specs.push(TensorSpec {
            name,
            kind,
            layer,
            shape,
            range: range.clone(),
        });
        range
    }
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let (nh, dh) = (config.n_heads, config.d_head());
        let mut b = Builder {
            specs: Vec::new(),
            cursor: 0,
        };
        let tok_emb = b.push(
            "tok_emb".into(),
            TensorKind::TokEmb,
            None,
            vec![config.vocab_size, d],
        );
        let pos_emb = match config.positional {
            PositionalScheme::LearnedAbsolute => Some(b.push(
                "pos_emb".into(),
                TensorKind::PosEmb,
                None,
                vec![config.max_seq_len, d],
            )),
            PositionalScheme::Rotary => None,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let ll = Some(l);
            layers.push(LayerLayout {
                ln1_gain: b.push(p("ln1.gain"), TensorKind::Ln1Gain, ll, vec![d]),
                ln1_bias: b.push(p("ln1.bias"), TensorKind::Ln1Bias, ll, vec![d]),
                w_q: b.push(p("attn.w_q"), TensorKind::Wq, ll, vec![d, nh, dh]),
                w_k: b.push(p("attn.w_k"), TensorKind::Wk, ll, vec![d, nh, dh]),
                w_v: b.push(p("attn.w_v"), TensorKind::Wv, ll, vec![d, nh, dh]),
                w_o: b.push(p("attn.w_o"), TensorKind::Wo, ll, vec![nh, dh, d]),
                ln2_gain: b.push(p("ln2.gain"), TensorKind::Ln2Gain, ll, vec![d]),
                ln2_bias: b.push(p("ln2.bias"), TensorKind::Ln2Bias, ll, vec![d]),
                mlp_w_in: b.push(p("mlp.w_in"), TensorKind::MlpWIn, ll, vec![d, config.d_mlp]),
                mlp_b_in: b.push(p("mlp.b_in"), TensorKind::MlpBIn, ll, vec![config.d_mlp]),
                mlp_w_out: b.push(
                    p("mlp.w_out"),
                    TensorKind::MlpWOut,
                    ll,
                    vec![config.d_mlp, d],
                ),
                mlp_b_out: b.push(p("mlp.b_out"), TensorKind::MlpBOut, ll, vec![d]),
            });
        }
        let ln_f_gain = b.push("ln_f.gain".into(), TensorKind::LnFGain, None, vec![d]);
        let ln_f_bias = b.push("ln_f.bias".into(), TensorKind::LnFBias, None, vec![d]);
        let unembed = b.push(
            "unembed".into(),
            TensorKind::Unembed,
            None,
            vec![d, config.vocab_size],
        );
        ParamLayout {
            tok_emb,
            pos_emb,
            layers,
            ln_f_gain,
            ln_f_bias,
            unembed,
            total: b.cursor,
            specs: b.specs,
        }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Range of the `W_o` column block belonging to `head`.
    pub fn head_block(&self, config: &ModelConfig, head: HeadId) -> Range<usize> {
        let dh = config.d_head();
        let w_o = &self.layers[head.layer].w_o;
        let start = w_o.start + head.head * dh * config.d_model;
        start..start + dh * config.d_model
    }
}

/// All weights of one model in a flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    config: ModelConfig,
    layout: ParamLayout,
    data: Vec<T>,
}

impl PartialEq for ParamLayout {
    fn eq(&self, other: &Self) -> bool {
        self.specs == other.specs
    }
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let data = vec![T::zero(); layout.total()];
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    /// Random initialisation seeded by `config.rng_seed`.
    ///
    /// Projections draw from N(0, 1/fan_in); residual outputs are further
    /// scaled by 1/sqrt(2 n_layers). The unembedding starts small so the
    /// initial next-token distribution is close to uniform.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.config.rng_seed);
        let residual_scale = 1.0 / (2.0 * params.config.n_layers as f64).sqrt();
        let specs = params.layout.specs.clone();
        for spec in &specs {
            let std = match spec.kind {
                TensorKind::TokEmb | TensorKind::PosEmb => Some(1.0),
                TensorKind::Wq | TensorKind::Wk | TensorKind::Wv | TensorKind::MlpWIn => {
                    Some(1.0 / (spec.shape[0] as f64).sqrt())
                }
                TensorKind::Wo => Some(residual_scale / (params.config.d_model as f64).sqrt()),
                TensorKind::MlpWOut => Some(residual_scale / (spec.shape[0] as f64).sqrt()),
                TensorKind::Unembed => Some(0.02),
                TensorKind::Ln1Gain | TensorKind::Ln2Gain | TensorKind::LnFGain => {
                    params.data[spec.range.clone()].fill(T::one());
                    None
                }
                _ => None,
            };
            if let Some(std) = std {
                let normal = Normal::new(0.0, std).expect("finite std");
                for x in &mut params.data[spec.range.clone()] {
                    *x = T::of(normal.sample(&mut rng));
                }
            }
        }
        Ok(params)
    }

    pub(crate) fn from_parts(config: ModelConfig, data: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if data.len() != layout.total() {
            return Err(Error::InvalidConfig(format!(
                "parameter buffer has {} entries, layout needs {}",
                data.len(),
                layout.total()
            )));
        }
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range.clone()])
    }

    /// The stored `W_o` block for `head` (`d_head * d_model` entries).
    pub fn head_block(&self, head: HeadId) -> Result<&[T]> {
        head.validate(&self.config)?;
        Ok(&self.data[self.layout.head_block(&self.config, head)])
    }

    pub(crate) fn head_block_mut(&mut self, head: HeadId) -> Result<&mut [T]> {
        head.validate(&self.config)?;
        let r = self.layout.head_block(&self.config, head);
        Ok(&mut self.data[r])
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Same-shaped buffer of zeros, used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }
}

impl ModelParams<f32> {
    /// Little-endian bytes of the parameter buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    /// SHA-256 over config and parameter bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let cfg = ModelConfig::default();
        let layout = ParamLayout::new(&cfg);
        let mut cursor = 0;
        for s in layout.specs() {
            assert_eq!(s.range.start, cursor, "{}", s.name);
            assert_eq!(s.range.len(), s.shape.iter().product::<usize>());
            cursor = s.range.end;
        }
        assert_eq!(cursor, layout.total());
    }

    #[test]
    fn head_blocks_tile_w_o() {
        let cfg = ModelConfig::default();
        let layout = ParamLayout::new(&cfg);
        let w_o = layout.layers[1].w_o.clone();
        let mut covered = Vec::new();
        for h in 0..cfg.n_heads {
            covered.extend(layout.head_block(&cfg, HeadId::new(1, h)));
        }
        assert_eq!(covered, w_o.collect::<Vec<_>>());
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::<f32>::init(ModelConfig::default()).unwrap();
        let b = ModelParams::<f32>::init(ModelConfig::default()).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        let c = ModelParams::<f32>::init(ModelConfig {
            rng_seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }
}
