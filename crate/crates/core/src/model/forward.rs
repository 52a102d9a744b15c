use super::kernels::{self, RopeTable};
use super::params::LayerLayout;
use super::{check_tokens, HeadMask, ModelParams, PositionalScheme, Real, Token};
use crate::{Error, Result};

/// Keys (already rotated) and values of every processed position.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(n_layers: usize) -> Self {
        Self {
            k: vec![Vec::new(); n_layers],
            v: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Attention distributions for a contiguous block of query rows.
///
/// Row `pos` (absolute position) of each head holds `pos + 1` weights over
/// positions `0..=pos`.
#[derive(Debug, Clone)]
pub struct AttentionMaps<T> {
    n_heads: usize,
    start: usize,
    rows: usize,
    // [layer * n_heads + head] -> concatenated rows
    data: Vec<Vec<T>>,
}

impl<T: Real> AttentionMaps<T> {
    fn new(n_layers: usize, n_heads: usize, start: usize, rows: usize) -> Self {
        let total = rows * (start + 1) + rows * rows.saturating_sub(1) / 2;
        Self {
            n_heads,
            start,
            rows,
            data: (0..n_layers * n_heads)
                .map(|_| Vec::with_capacity(total))
                .collect(),
        }
    }

    /// First absolute position covered.
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Attention of `(layer, head)` at absolute query position `pos`.
    pub fn row(&self, layer: usize, head: usize, pos: usize) -> &[T] {
        assert!(
            pos >= self.start && pos < self.start + self.rows,
            "position {pos} not recorded"
        );
        let i = pos - self.start;
        let offset = i * (self.start + 1) + i * i.saturating_sub(1) / 2;
        &self.data[layer * self.n_heads + head][offset..offset + pos + 1]
    }
}

/// Logits and attention maps for the rows processed by one call.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub vocab_size: usize,
    /// Flat `[rows, vocab]`.
    pub logits: Vec<T>,
    pub attention: AttentionMaps<T>,
}

impl<T: Real> ForwardOutput<T> {
    pub fn rows(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    /// Logits of the `i`-th processed row.
    pub fn logits_row(&self, i: usize) -> &[T] {
        &self.logits[i * self.vocab_size..(i + 1) * self.vocab_size]
    }
}

/// Saved activations of one layer for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerTape<T> {
    pub ln1_xhat: Vec<T>,
    pub ln1_rstd: Vec<T>,
    pub h1: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub att: Vec<T>,
    pub ln2_xhat: Vec<T>,
    pub ln2_rstd: Vec<T>,
    pub h2: Vec<T>,
    pub pre: Vec<T>,
    pub act: Vec<T>,
}

/// Everything the backward pass needs from one full-sequence forward.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub(crate) tokens: Vec<Token>,
    pub(crate) gates: Vec<Vec<bool>>,
    pub(crate) layers: Vec<LayerTape<T>>,
    pub(crate) lnf_xhat: Vec<T>,
    pub(crate) lnf_rstd: Vec<T>,
    pub(crate) hf: Vec<T>,
    pub output: ForwardOutput<T>,
}

/// Full forward pass over `tokens`, with heads in `mask` gated off.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    tokens: &[Token],
    mask: &HeadMask,
) -> Result<ForwardOutput<T>> {
    check_tokens(params.config(), tokens)?;
    mask.validate(params.config())?;
    let gates = mask.gates(params.config());
    let mut cache = KvCache::new(params.config().n_layers);
    Ok(run_rows(params, tokens, &mut cache, &gates, None))
}

/// Forward pass that also records the activations needed by
/// [`super::backward`].
pub fn forward_tape<T: Real>(
    params: &ModelParams<T>,
    tokens: &[Token],
    mask: &HeadMask,
) -> Result<Tape<T>> {
    check_tokens(params.config(), tokens)?;
    mask.validate(params.config())?;
    if tokens.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let gates = mask.gates(params.config());
    let mut cache = KvCache::new(params.config().n_layers);
    let mut tape = TapeParts::default();
    let output = run_rows(params, tokens, &mut cache, &gates, Some(&mut tape));
    Ok(Tape {
        tokens: tokens.to_vec(),
        gates,
        layers: tape.layers,
        lnf_xhat: tape.lnf_xhat,
        lnf_rstd: tape.lnf_rstd,
        hf: tape.hf,
        output,
    })
}

/// Processes `tokens` as the next positions after those already in `cache`.
pub(crate) fn forward_incremental<T: Real>(
    params: &ModelParams<T>,
    tokens: &[Token],
    cache: &mut KvCache<T>,
    gates: &[Vec<bool>],
) -> Result<ForwardOutput<T>> {
    let cfg = params.config();
    if cache.len + tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: cache.len + tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    check_tokens(cfg, tokens)?;
    Ok(run_rows(params, tokens, cache, gates, None))
}

#[derive(Default)]
pub(crate) struct TapeParts<T> {
    layers: Vec<LayerTape<T>>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    hf: Vec<T>,
}

fn run_rows<T: Real>(
    params: &ModelParams<T>,
    tokens: &[Token],
    cache: &mut KvCache<T>,
    gates: &[Vec<bool>],
    mut tape: Option<&mut TapeParts<T>>,
) -> ForwardOutput<T> {
    let cfg = params.config();
    let layout = params.layout();
    let w = params.as_slice();
    let (d, nh, dh, vocab) = (cfg.d_model, cfg.n_heads, cfg.d_head(), cfg.vocab_size);
    let n = tokens.len();
    let start = cache.len;
    let rope = match cfg.positional {
        PositionalScheme::Rotary => Some(RopeTable::<T>::new(dh, start + n)),
        PositionalScheme::LearnedAbsolute => None,
    };
    let scale = T::one() / T::of(dh as f64).sqrt();

    let mut x = vec![T::zero(); n * d];
    let tok_emb = &w[layout.tok_emb.clone()];
    for (r, &tok) in tokens.iter().enumerate() {
        let row = &mut x[r * d..(r + 1) * d];
        row.copy_from_slice(&tok_emb[tok as usize * d..(tok as usize + 1) * d]);
        if let Some(pe) = &layout.pos_emb {
            let pos = start + r;
            let pe = &w[pe.start + pos * d..pe.start + (pos + 1) * d];
            for (a, &b) in row.iter_mut().zip(pe) {
                *a += b;
            }
        }
    }

    let mut maps = AttentionMaps::new(cfg.n_layers, nh, start, n);
    let mut scores = vec![T::zero(); start + n];

    for (l, ll) in layout.layers.iter().enumerate() {
        let LayerLayout {
            ln1_gain,
            ln1_bias,
            w_q,
            w_k,
            w_v,
            w_o,
            ln2_gain,
            ln2_bias,
            mlp_w_in,
            mlp_b_in,
            mlp_w_out,
            mlp_b_out,
        } = ll;
        let mut lt = LayerTape {
            ln1_xhat: vec![T::zero(); n * d],
            ln1_rstd: vec![T::zero(); n],
            h1: vec![T::zero(); n * d],
            q: vec![T::zero(); n * d],
            k: vec![T::zero(); n * d],
            v: vec![T::zero(); n * d],
            att: vec![T::zero(); n * d],
            ln2_xhat: vec![T::zero(); n * d],
            ln2_rstd: vec![T::zero(); n],
            h2: vec![T::zero(); n * d],
            pre: vec![T::zero(); n * cfg.d_mlp],
            act: vec![T::zero(); n * cfg.d_mlp],
        };

        // projections
        for r in 0..n {
            let rs = r * d..(r + 1) * d;
            lt.ln1_rstd[r] = kernels::layer_norm(
                &x[rs.clone()],
                &w[ln1_gain.clone()],
                &w[ln1_bias.clone()],
                &mut lt.ln1_xhat[rs.clone()],
                &mut lt.h1[rs.clone()],
            );
            let h1 = &lt.h1[rs.clone()];
            kernels::matvec_acc(h1, &w[w_q.clone()], &mut lt.q[rs.clone()]);
            kernels::matvec_acc(h1, &w[w_k.clone()], &mut lt.k[rs.clone()]);
            kernels::matvec_acc(h1, &w[w_v.clone()], &mut lt.v[rs.clone()]);
            if let Some(rope) = &rope {
                for h in 0..nh {
                    let hs = r * d + h * dh..r * d + (h + 1) * dh;
                    rope.apply(&mut lt.q[hs.clone()], start + r);
                    rope.apply(&mut lt.k[hs], start + r);
                }
            }
        }
        cache.k[l].extend_from_slice(&lt.k);
        cache.v[l].extend_from_slice(&lt.v);
        let (kc, vc) = (&cache.k[l], &cache.v[l]);

        // attention
        for r in 0..n {
            let pos = start + r;
            for h in 0..nh {
                let q = &lt.q[r * d + h * dh..r * d + (h + 1) * dh];
                let sc = &mut scores[..pos + 1];
                for (s, slot) in sc.iter_mut().enumerate() {
                    *slot = kernels::dot(q, &kc[s * d + h * dh..s * d + (h + 1) * dh]) * scale;
                }
                kernels::softmax_in_place(sc);
                let out = &mut lt.att[r * d + h * dh..r * d + (h + 1) * dh];
                for (s, &p) in sc.iter().enumerate() {
                    kernels::axpy(p, &vc[s * d + h * dh..s * d + (h + 1) * dh], out);
                }
                maps.data[l * nh + h].extend_from_slice(sc);
            }
            for (h, &masked) in gates[l].iter().enumerate() {
                if masked {
                    lt.att[r * d + h * dh..r * d + (h + 1) * dh].fill(T::zero());
                }
            }
        }

        // output projection + MLP
        let mut o = vec![T::zero(); d];
        let mut m = vec![T::zero(); d];
        for r in 0..n {
            let rs = r * d..(r + 1) * d;
            let fs = r * cfg.d_mlp..(r + 1) * cfg.d_mlp;
            o.fill(T::zero());
            kernels::matvec_acc(&lt.att[rs.clone()], &w[w_o.clone()], &mut o);
            for (a, &b) in x[rs.clone()].iter_mut().zip(&o) {
                *a += b;
            }
            lt.ln2_rstd[r] = kernels::layer_norm(
                &x[rs.clone()],
                &w[ln2_gain.clone()],
                &w[ln2_bias.clone()],
                &mut lt.ln2_xhat[rs.clone()],
                &mut lt.h2[rs.clone()],
            );
            let pre = &mut lt.pre[fs.clone()];
            pre.copy_from_slice(&w[mlp_b_in.clone()]);
            kernels::matvec_acc(&lt.h2[rs.clone()], &w[mlp_w_in.clone()], pre);
            for (a, &p) in lt.act[fs.clone()].iter_mut().zip(pre.iter()) {
                *a = kernels::gelu(p);
            }
            m.copy_from_slice(&w[mlp_b_out.clone()]);
            kernels::matvec_acc(&lt.act[fs], &w[mlp_w_out.clone()], &mut m);
            for (a, &b) in x[rs].iter_mut().zip(&m) {
                *a += b;
            }
        }
        if let Some(t) = tape.as_deref_mut() {
            t.layers.push(lt);
        }
    }
    cache.len += n;

    let mut logits = vec![T::zero(); n * vocab];
    let mut lnf_xhat = vec![T::zero(); n * d];
    let mut lnf_rstd = vec![T::zero(); n];
    let mut hf = vec![T::zero(); n * d];
    for r in 0..n {
        let rs = r * d..(r + 1) * d;
        lnf_rstd[r] = kernels::layer_norm(
            &x[rs.clone()],
            &w[layout.ln_f_gain.clone()],
            &w[layout.ln_f_bias.clone()],
            &mut lnf_xhat[rs.clone()],
            &mut hf[rs.clone()],
        );
        kernels::matvec_acc(
            &hf[rs],
            &w[layout.unembed.clone()],
            &mut logits[r * vocab..(r + 1) * vocab],
        );
    }
    if let Some(t) = tape {
        t.lnf_xhat = lnf_xhat;
        t.lnf_rstd = lnf_rstd;
        t.hf = hf;
    }
    ForwardOutput {
        vocab_size: vocab,
        logits,
        attention: maps,
    }
}
