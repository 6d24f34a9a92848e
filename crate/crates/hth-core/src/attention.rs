//! Quadratic token mixing: multi-head self-attention for the hybrid blocks
//! and the benchmark baseline, and cross-attention for text conditioning.
//! Queries and keys are RMS-normalized per head with a learnable per-head
//! scale before the score product.

use crate::error::{HthError, Result};
use crate::hydra::trunc_normal;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// Projection weights for one attention layer. KV width matches the model
/// width; `heads` must divide `model_dim`.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub model_dim: usize,
    pub heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// 1 × heads learnable scales applied after QK RMS-normalization.
    pub q_scale: Tensor,
    pub k_scale: Tensor,
}

impl AttnParams {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn init(rng: &mut impl rand::Rng, model_dim: usize, heads: usize) -> Result<Self> {
        if model_dim % heads != 0 {
            return Err(HthError::invalid(format!(
                "model_dim {model_dim} must divide by heads {heads}"
            )));
        }
        Ok(AttnParams {
            model_dim,
            heads,
            wq: trunc_normal(rng, &[model_dim, model_dim], 0.02),
            wk: trunc_normal(rng, &[model_dim, model_dim], 0.02),
            wv: trunc_normal(rng, &[model_dim, model_dim], 0.02),
            wo: Tensor::zeros(&[model_dim, model_dim]),
            q_scale: Tensor::full(&[1, heads], 1.0),
            k_scale: Tensor::full(&[1, heads], 1.0),
        })
    }

    pub fn register(&self, tape: &mut Tape) -> AttnVars {
        AttnVars {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
            q_scale: tape.leaf(self.q_scale.clone()),
            k_scale: tape.leaf(self.k_scale.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub q_scale: Var,
    pub k_scale: Var,
}

/// Full (non-causal) attention on tape. With `ctx == x` this is
/// self-attention; otherwise queries come from `x` and keys/values from
/// `ctx`, and the output keeps the length of `x`.
pub fn attend_tape(
    tape: &mut Tape,
    n_heads: usize,
    v: &AttnVars,
    x: Var,
    ctx: Var,
) -> Result<Var> {
    if tape.value(ctx)?.rows() == 0 {
        return Err(HthError::invalid("attention context must be non-empty"));
    }
    let hd = tape.value(v.wq)?.cols() / n_heads;
    let q_all = tape.matmul(x, v.wq)?;
    let k_all = tape.matmul(ctx, v.wk)?;
    let v_all = tape.matmul(ctx, v.wv)?;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let q = tape.slice_cols(q_all, lo, hi)?;
        let k = tape.slice_cols(k_all, lo, hi)?;
        let vv = tape.slice_cols(v_all, lo, hi)?;

        let qn = tape.rmsnorm_rows(q)?;
        let qs = tape.slice_cols(v.q_scale, h, h + 1)?;
        let q = tape.mul_scalar_var(qn, qs)?;
        let kn = tape.rmsnorm_rows(k)?;
        let ks = tape.slice_cols(v.k_scale, h, h + 1)?;
        let k = tape.mul_scalar_var(kn, ks)?;

        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(attn, vv)?);
    }
    let cat = if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.matmul(cat, v.wo)
}

/// Self-attention over plain tensors (fresh tape, values only).
pub fn self_attention(p: &AttnParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = p.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = attend_tape(&mut tape, p.heads, &v, xv, xv)?;
    Ok(tape.value(y)?.clone())
}

/// Cross-attention over plain tensors: queries from `x`, keys/values from `ctx`.
pub fn cross_attention(p: &AttnParams, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = p.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let cv = tape.leaf(ctx.clone());
    let y = attend_tape(&mut tape, p.heads, &v, xv, cv)?;
    Ok(tape.value(y)?.clone())
}

/// Naive reference implementation, kept deliberately independent of the tape
/// path: explicit per-head loops over the full score matrix.
pub fn reference_attention(p: &AttnParams, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
    let hd = p.head_dim();
    let (tq, tk) = (x.rows(), ctx.rows());
    let q_all = tensor::matmul(x, &p.wq)?;
    let k_all = tensor::matmul(ctx, &p.wk)?;
    let v_all = tensor::matmul(ctx, &p.wv)?;
    let mut cat = Tensor::zeros(&[tq, p.model_dim]);
    for h in 0..p.heads {
        let norm_row = |src: &Tensor, i: usize, gain: f64| -> Vec<f64> {
            let mut row: Vec<f64> = (0..hd).map(|j| src.at2(i, h * hd + j)).collect();
            let ms = row.iter().map(|v| v * v).sum::<f64>() / hd as f64;
            let inv = gain / (ms + tensor::NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            row
        };
        for i in 0..tq {
            let q = norm_row(&q_all, i, p.q_scale.data()[h]);
            let mut scores = Vec::with_capacity(tk);
            for j in 0..tk {
                let k = norm_row(&k_all, j, p.k_scale.data()[h]);
                let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                scores.push(dot / (hd as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= sum);
            for d in 0..hd {
                let mut acc = 0.0;
                for j in 0..tk {
                    acc += weights[j] * v_all.at2(j, h * hd + d);
                }
                cat.set2(i, h * hd + d, acc);
            }
        }
    }
    tensor::matmul(&cat, &p.wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_rel_diff, randn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttnParams {
        let mut p = AttnParams::init(rng, d, heads).unwrap();
        p.wo = randn(&[d, d], rng);
        p
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = params(&mut rng, 8, 2);
        let x = randn(&[1, 8], &mut rng);
        let y = self_attention(&p, &x).unwrap();
        // softmax over one position is 1, so output is wo applied to the value
        let v = tensor::matmul(&x, &p.wv).unwrap();
        let expected = tensor::matmul(&v, &p.wo).unwrap();
        assert!(max_rel_diff(&y, &expected) < 1e-12);
    }

    #[test]
    fn identical_tokens_get_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let p = params(&mut rng, 8, 2);
        let row = randn(&[1, 8], &mut rng);
        let x = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]).unwrap();
        let y = self_attention(&p, &x).unwrap();
        for j in 0..8 {
            assert!((y.at2(0, j) - y.at2(1, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_reference_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let p = params(&mut rng, 8, 2);
            let x = randn(&[5, 8], &mut rng);
            let y = self_attention(&p, &x).unwrap();
            let oracle = reference_attention(&p, &x, &x).unwrap();
            assert!(max_rel_diff(&y, &oracle) < 1e-12);
        }
    }

    #[test]
    fn cross_attention_single_context_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = params(&mut rng, 8, 2);
        let x = randn(&[4, 8], &mut rng);
        let ctx = randn(&[1, 8], &mut rng);
        let y = cross_attention(&p, &x, &ctx).unwrap();
        let v = tensor::matmul(&ctx, &p.wv).unwrap();
        let expected_row = tensor::matmul(&v, &p.wo).unwrap();
        for i in 0..4 {
            for j in 0..8 {
                assert!((y.at2(i, j) - expected_row.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_context_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let p = params(&mut rng, 8, 2);
        let x = randn(&[3, 8], &mut rng);
        let ctx = randn(&[2, 8], &mut rng);
        let doubled = Tensor::from_rows(&[
            ctx.data()[0..8].to_vec(),
            ctx.data()[8..16].to_vec(),
            ctx.data()[0..8].to_vec(),
            ctx.data()[8..16].to_vec(),
        ])
        .unwrap();
        let y1 = cross_attention(&p, &x, &ctx).unwrap();
        let y2 = cross_attention(&p, &x, &doubled).unwrap();
        assert!(max_rel_diff(&y1, &y2) < 1e-12);
    }

    #[test]
    fn cross_attention_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let p = params(&mut rng, 8, 2);
        let x = randn(&[5, 8], &mut rng);
        let ctx = randn(&[3, 8], &mut rng);
        let y = cross_attention(&p, &x, &ctx).unwrap();
        let oracle = reference_attention(&p, &x, &ctx).unwrap();
        assert!(max_rel_diff(&y, &oracle) < 1e-12);
    }

    #[test]
    fn empty_context_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let p = params(&mut rng, 8, 2);
        let x = randn(&[3, 8], &mut rng);
        let ctx = Tensor::zeros(&[0, 8]);
        assert!(cross_attention(&p, &x, &ctx).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let p = params(&mut rng, 8, 2);
        let x = randn(&[6, 8], &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = Tensor::from_rows(
            &perm
                .iter()
                .map(|&i| x.data()[i * 8..(i + 1) * 8].to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let y = self_attention(&p, &x).unwrap();
        let yp = self_attention(&p, &xp).unwrap();
        for (new_pos, &old_pos) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((yp.at2(new_pos, j) - y.at2(old_pos, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        use crate::tape::finite_diff_check;
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let p = params(&mut rng, 4, 2);
        let probe = randn(&[3, 4], &mut rng);
        let inits = vec![
            p.wq.clone(),
            p.wk.clone(),
            p.wv.clone(),
            p.wo.clone(),
            p.q_scale.clone(),
            p.k_scale.clone(),
            randn(&[3, 4], &mut rng),
        ];
        let n_heads = p.heads;
        let worst = finite_diff_check(
            &move |tape, vars| {
                let v = AttnVars {
                    wq: vars[0],
                    wk: vars[1],
                    wv: vars[2],
                    wo: vars[3],
                    q_scale: vars[4],
                    k_scale: vars[5],
                };
                let y = attend_tape(tape, n_heads, &v, vars[6], vars[6])?;
                let w = tape.mul_const(y, &probe)?;
                tape.sum_all(w)
            },
            &inits,
            1e-4,
        )
        .unwrap();
        assert!(worst < 1e-3, "worst {worst:.2e}");
    }
}
