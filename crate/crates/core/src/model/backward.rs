use std::ops::Range;

pub use super::forward::Tape;
use super::kernels::{self, RopeTable};
use super::{ModelParams, PositionalScheme, Real};

fn pair_mut<T>(s: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (lo, hi) = s.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

/// Accumulates into `grads` the gradient of `sum(dlogits * logits)` for the
/// sequence recorded in `tape`. `dlogits` is flat `[rows, vocab]`.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    tape: &Tape<T>,
    dlogits: &[T],
    grads: &mut ModelParams<T>,
) {
    let cfg = params.config();
    let layout = params.layout();
    let w = params.as_slice();
    let g = grads.as_mut_slice();
    let (d, nh, dh, vocab, dm) = (
        cfg.d_model,
        cfg.n_heads,
        cfg.d_head(),
        cfg.vocab_size,
        cfg.d_mlp,
    );
    let n = tape.tokens.len();
    assert_eq!(dlogits.len(), n * vocab);
    let scale = T::one() / T::of(dh as f64).sqrt();
    let rope = match cfg.positional {
        PositionalScheme::Rotary => Some(RopeTable::<T>::new(dh, n)),
        PositionalScheme::LearnedAbsolute => None,
    };

    let mut dx = vec![T::zero(); n * d];
    let mut tmp_d = vec![T::zero(); d];
    for r in 0..n {
        let dl = &dlogits[r * vocab..(r + 1) * vocab];
        if dl.iter().all(|&v| v == T::zero()) {
            continue;
        }
        let rs = r * d..(r + 1) * d;
        kernels::outer_acc(&tape.hf[rs.clone()], dl, &mut g[layout.unembed.clone()]);
        tmp_d.fill(T::zero());
        kernels::matvec_t_acc(&w[layout.unembed.clone()], dl, &mut tmp_d);
        let (dgain, dbias) = pair_mut(g, layout.ln_f_gain.clone(), layout.ln_f_bias.clone());
        kernels::layer_norm_backward(
            &tmp_d,
            &tape.lnf_xhat[rs.clone()],
            tape.lnf_rstd[r],
            &w[layout.ln_f_gain.clone()],
            &mut dx[rs],
            dgain,
            dbias,
        );
    }

    let mut dact = vec![T::zero(); dm];
    let mut dpre = vec![T::zero(); dm];
    for l in (0..cfg.n_layers).rev() {
        let ll = &layout.layers[l];
        let lt = &tape.layers[l];

        // MLP block
        for r in 0..n {
            let rs = r * d..(r + 1) * d;
            let fs = r * dm..(r + 1) * dm;
            let dout = dx[rs.clone()].to_vec();
            kernels::outer_acc(&lt.act[fs.clone()], &dout, &mut g[ll.mlp_w_out.clone()]);
            for (a, &b) in g[ll.mlp_b_out.clone()].iter_mut().zip(&dout) {
                *a += b;
            }
            dact.fill(T::zero());
            kernels::matvec_t_acc(&w[ll.mlp_w_out.clone()], &dout, &mut dact);
            for ((dp, &da), &p) in dpre.iter_mut().zip(&dact).zip(&lt.pre[fs]) {
                *dp = da * kernels::gelu_grad(p);
            }
            kernels::outer_acc(&lt.h2[rs.clone()], &dpre, &mut g[ll.mlp_w_in.clone()]);
            for (a, &b) in g[ll.mlp_b_in.clone()].iter_mut().zip(&dpre) {
                *a += b;
            }
            tmp_d.fill(T::zero());
            kernels::matvec_t_acc(&w[ll.mlp_w_in.clone()], &dpre, &mut tmp_d);
            let (dgain, dbias) = pair_mut(g, ll.ln2_gain.clone(), ll.ln2_bias.clone());
            kernels::layer_norm_backward(
                &tmp_d,
                &lt.ln2_xhat[rs.clone()],
                lt.ln2_rstd[r],
                &w[ll.ln2_gain.clone()],
                &mut dx[rs],
                dgain,
                dbias,
            );
        }

        // output projection
        let mut datt = vec![T::zero(); n * d];
        for r in 0..n {
            let rs = r * d..(r + 1) * d;
            kernels::outer_acc(&lt.att[rs.clone()], &dx[rs.clone()], &mut g[ll.w_o.clone()]);
            kernels::matvec_t_acc(&w[ll.w_o.clone()], &dx[rs.clone()], &mut datt[rs]);
            for (h, &masked) in tape.gates[l].iter().enumerate() {
                if masked {
                    datt[r * d + h * dh..r * d + (h + 1) * dh].fill(T::zero());
                }
            }
        }

        // attention
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        for r in 0..n {
            for h in 0..nh {
                let hr = |i: usize| i * d + h * dh..i * d + (h + 1) * dh;
                let dout = &datt[hr(r)];
                if dout.iter().all(|&v| v == T::zero()) {
                    continue;
                }
                let p = tape.output.attention.row(l, h, r);
                let mut weighted = T::zero();
                for s in 0..=r {
                    dp[s] = kernels::dot(dout, &lt.v[hr(s)]);
                    kernels::axpy(p[s], dout, &mut dv[hr(s)]);
                    weighted += p[s] * dp[s];
                }
                for s in 0..=r {
                    let ds = p[s] * (dp[s] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    kernels::axpy(ds, &lt.k[hr(s)], &mut dq[hr(r)]);
                    kernels::axpy(ds, &lt.q[hr(r)], &mut dk[hr(s)]);
                }
            }
        }
        if let Some(rope) = &rope {
            for r in 0..n {
                for h in 0..nh {
                    let hs = r * d + h * dh..r * d + (h + 1) * dh;
                    rope.apply_inverse(&mut dq[hs.clone()], r);
                    rope.apply_inverse(&mut dk[hs], r);
                }
            }
        }
        for r in 0..n {
            let rs = r * d..(r + 1) * d;
            let h1 = &lt.h1[rs.clone()];
            kernels::outer_acc(h1, &dq[rs.clone()], &mut g[ll.w_q.clone()]);
            kernels::outer_acc(h1, &dk[rs.clone()], &mut g[ll.w_k.clone()]);
            kernels::outer_acc(h1, &dv[rs.clone()], &mut g[ll.w_v.clone()]);
            tmp_d.fill(T::zero());
            kernels::matvec_t_acc(&w[ll.w_q.clone()], &dq[rs.clone()], &mut tmp_d);
            kernels::matvec_t_acc(&w[ll.w_k.clone()], &dk[rs.clone()], &mut tmp_d);
            kernels::matvec_t_acc(&w[ll.w_v.clone()], &dv[rs.clone()], &mut tmp_d);
            let (dgain, dbias) = pair_mut(g, ll.ln1_gain.clone(), ll.ln1_bias.clone());
            kernels::layer_norm_backward(
                &tmp_d,
                &lt.ln1_xhat[rs.clone()],
                lt.ln1_rstd[r],
                &w[ll.ln1_gain.clone()],
                &mut dx[rs],
                dgain,
                dbias,
            );
        }
    }

    for (r, &tok) in tape.tokens.iter().enumerate() {
        let src = &dx[r * d..(r + 1) * d];
        let t = layout.tok_emb.start + tok as usize * d;
        for (a, &b) in g[t..t + d].iter_mut().zip(src) {
            *a += b;
        }
        if let Some(pe) = &layout.pos_emb {
            let p = pe.start + r * d;
            for (a, &b) in g[p..p + d].iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}
