//! 32-bit benchmark kernels for the token mixers.
//!
//! These are the timed paths of the scaling benchmark: allocation-light,
//! unit-stride inner loops, no tape, and no full T×T materialization for
//! attention (scores are produced in query blocks). They trade the crate's
//! 64-bit verification precision for speed; tests pin them against the
//! 64-bit reference paths at small T.

use crate::attention::AttnParams;
use crate::hydra::{MixerParams, SsmCombine};
use crate::parallel;

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// out(m×n) += a(m×k) · b(k×n), all row-major.
fn gemm(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn to_f32(t: &crate::tensor::Tensor) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

/// Mixer weights converted to f32 for the benchmark path.
pub struct F32Mixer {
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state_dim: usize,
    pub conv_window: usize,
    pub chunk: usize,
    in_proj: Vec<f32>,
    dt_bias: Vec<f32>,
    /// negative transition scalar per head
    a: Vec<f32>,
    d_diag: Vec<f32>,
    conv_w: Vec<f32>,
    out_proj: Vec<f32>,
}

impl From<&MixerParams> for F32Mixer {
    fn from(p: &MixerParams) -> Self {
        F32Mixer {
            model_dim: p.model_dim,
            heads: p.heads,
            head_dim: p.head_dim,
            state_dim: p.state_dim,
            conv_window: p.conv_window,
            chunk: p.chunk,
            in_proj: to_f32(&p.in_proj),
            dt_bias: to_f32(&p.dt_bias),
            a: p.a_log.data().iter().map(|&v| -(v.exp()) as f32).collect(),
            d_diag: to_f32(&p.d_diag),
            conv_w: to_f32(&p.conv_w),
            out_proj: to_f32(&p.out_proj),
        }
    }
}

/// Chunked semiseparable scan, f32: `abar` length t, `bbar`/`c` t×n, `x` t×p.
fn scan_f32(
    abar: &[f32],
    bbar: &[f32],
    c: &[f32],
    x: &[f32],
    t: usize,
    n: usize,
    p: usize,
    chunk: usize,
    y: &mut [f32],
) {
    let q = chunk.clamp(1, t.max(1));
    let mut h = vec![0.0f32; n * p];
    let mut block = vec![0.0f32; q * q];
    let mut din = vec![0.0f32; q];
    let mut e = vec![0.0f32; q];
    let mut lo = 0;
    while lo < t {
        let hi = (lo + q).min(t);
        let len = hi - lo;
        for i in 0..len {
            let mut decay = 1.0f32;
            for j in (0..=i).rev() {
                if j < i {
                    decay *= abar[lo + j + 1];
                }
                let mut dot = 0.0f32;
                let crow = &c[(lo + i) * n..(lo + i + 1) * n];
                let brow = &bbar[(lo + j) * n..(lo + j + 1) * n];
                for (cv, bv) in crow.iter().zip(brow) {
                    dot += cv * bv;
                }
                block[i * len + j] = decay * dot;
            }
        }
        let mut acc = 1.0f32;
        for i in 0..len {
            acc *= abar[lo + i];
            din[i] = acc;
        }
        let total = acc;
        for i in 0..len {
            let yrow = &mut y[(lo + i) * p..(lo + i + 1) * p];
            yrow.fill(0.0);
            for j in 0..=i {
                let w = block[i * len + j];
                if w == 0.0 {
                    continue;
                }
                let xrow = &x[(lo + j) * p..(lo + j + 1) * p];
                for (o, &xv) in yrow.iter_mut().zip(xrow) {
                    *o += w * xv;
                }
            }
            let crow = &c[(lo + i) * n..(lo + i + 1) * n];
            for (ni, &cv) in crow.iter().enumerate() {
                let w = din[i] * cv;
                if w == 0.0 {
                    continue;
                }
                let hrow = &h[ni * p..(ni + 1) * p];
                for (o, &hv) in yrow.iter_mut().zip(hrow) {
                    *o += w * hv;
                }
            }
        }
        let mut acc = 1.0f32;
        for s in (0..len).rev() {
            e[s] = acc;
            acc *= abar[lo + s];
        }
        for v in h.iter_mut() {
            *v *= total;
        }
        for s in 0..len {
            let brow = &bbar[(lo + s) * n..(lo + s + 1) * n];
            let xrow = &x[(lo + s) * p..(lo + s + 1) * p];
            for (ni, &bv) in brow.iter().enumerate() {
                let w = e[s] * bv;
                if w == 0.0 {
                    continue;
                }
                let hrow = &mut h[ni * p..(ni + 1) * p];
                for (o, &xv) in hrow.iter_mut().zip(xrow) {
                    *o += w * xv;
                }
            }
        }
        lo = hi;
    }
}

/// Full mixer forward, f32. `x` is t×model_dim row-major; returns
/// t×model_dim.
pub fn mixer_forward(p: &F32Mixer, kind: SsmCombine, x: &[f32], t: usize) -> Vec<f32> {
    let d = p.model_dim;
    let (heads, hd, n) = (p.heads, p.head_dim, p.state_dim);
    let inner = heads * hd;
    let conv_dim = inner + heads + 2 * n;
    let total = conv_dim + inner;
    assert_eq!(x.len(), t * d, "mixer_forward input shape");

    let mut xz = vec![0.0f32; t * total];
    gemm(x, t, d, &p.in_proj, total, &mut xz);

    // depthwise conv over the first conv_dim columns, zero pad; causal
    // mixers pad entirely on the left
    let k = p.conv_window;
    let pad = if kind == SsmCombine::Causal { k - 1 } else { k / 2 };
    let mut conv = vec![0.0f32; t * conv_dim];
    for ti in 0..t {
        for kk in 0..k {
            let src = ti as isize + kk as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            let wrow = &p.conv_w[kk * conv_dim..(kk + 1) * conv_dim];
            let xrow = &xz[src * total..src * total + conv_dim];
            let orow = &mut conv[ti * conv_dim..(ti + 1) * conv_dim];
            for ((o, &w), &xv) in orow.iter_mut().zip(wrow).zip(xrow) {
                *o += w * xv;
            }
        }
    }

    let mut mixed = vec![0.0f32; t * inner];
    let mut abar = vec![0.0f32; t];
    let mut bbar = vec![0.0f32; t * n];
    let mut cbuf = vec![0.0f32; t * n];
    let mut xh = vec![0.0f32; t * hd];
    let mut y_fwd = vec![0.0f32; t * hd];
    let mut y_bwd = vec![0.0f32; t * hd];
    let mut rev_a = vec![0.0f32; t];
    let mut rev_b = vec![0.0f32; t * n];
    let mut rev_c = vec![0.0f32; t * n];
    let mut rev_x = vec![0.0f32; t * hd];

    for h in 0..heads {
        let a = p.a[h];
        for ti in 0..t {
            let row = &conv[ti * conv_dim..(ti + 1) * conv_dim];
            let dt = softplus(row[inner + h] + p.dt_bias[h]);
            let da = dt * a;
            let ab = da.exp();
            abar[ti] = ab;
            let coeff = (ab - 1.0) / a;
            for ni in 0..n {
                bbar[ti * n + ni] = coeff * row[inner + heads + ni];
                cbuf[ti * n + ni] = row[inner + heads + n + ni];
            }
            xh[ti * hd..(ti + 1) * hd].copy_from_slice(&row[h * hd..(h + 1) * hd]);
        }
        scan_f32(&abar, &bbar, &cbuf, &xh, t, n, hd, p.chunk, &mut y_fwd);

        let dh = p.d_diag[h];
        let out_head = |mixed: &mut [f32], ti: usize, vals: &[f32]| {
            let row = &mut mixed[ti * inner + h * hd..ti * inner + (h + 1) * hd];
            row.copy_from_slice(vals);
        };
        match kind {
            SsmCombine::Causal => {
                for ti in 0..t {
                    let mut row = y_fwd[ti * hd..(ti + 1) * hd].to_vec();
                    for (j, v) in row.iter_mut().enumerate() {
                        *v += dh * xh[ti * hd + j];
                    }
                    out_head(&mut mixed, ti, &row);
                }
            }
            SsmCombine::Quasiseparable | SsmCombine::BidiAdd => {
                for ti in 0..t {
                    rev_a[ti] = abar[t - 1 - ti];
                    rev_b[ti * n..(ti + 1) * n]
                        .copy_from_slice(&bbar[(t - 1 - ti) * n..(t - ti) * n]);
                    rev_c[ti * n..(ti + 1) * n]
                        .copy_from_slice(&cbuf[(t - 1 - ti) * n..(t - ti) * n]);
                    rev_x[ti * hd..(ti + 1) * hd]
                        .copy_from_slice(&xh[(t - 1 - ti) * hd..(t - ti) * hd]);
                }
                scan_f32(&rev_a, &rev_b, &rev_c, &rev_x, t, n, hd, p.chunk, &mut y_bwd);
                let shifted = kind == SsmCombine::Quasiseparable;
                for ti in 0..t {
                    let mut row = vec![0.0f32; hd];
                    if shifted {
                        // shift(fwd): row ti reads fwd[ti-1]
                        if ti >= 1 {
                            row.copy_from_slice(&y_fwd[(ti - 1) * hd..ti * hd]);
                        }
                        // flip(shift(bwd)): row ti reads bwd[t-2-ti]
                        if ti + 1 < t {
                            let src = t - 2 - ti;
                            for (j, v) in row.iter_mut().enumerate() {
                                *v += y_bwd[src * hd + j];
                            }
                        }
                    } else {
                        row.copy_from_slice(&y_fwd[ti * hd..(ti + 1) * hd]);
                        let src = t - 1 - ti;
                        for (j, v) in row.iter_mut().enumerate() {
                            *v += y_bwd[src * hd + j];
                        }
                    }
                    for (j, v) in row.iter_mut().enumerate() {
                        *v += dh * xh[ti * hd + j];
                    }
                    out_head(&mut mixed, ti, &row);
                }
            }
        }
    }

    // SiLU gate then out-projection
    for ti in 0..t {
        let gate = &xz[ti * total + conv_dim..(ti + 1) * total];
        let row = &mut mixed[ti * inner..(ti + 1) * inner];
        for (v, &g) in row.iter_mut().zip(gate) {
            *v *= silu(g);
        }
    }
    let mut out = vec![0.0f32; t * d];
    gemm(&mixed, t, inner, &p.out_proj, d, &mut out);
    out
}

/// Attention weights converted to f32.
pub struct F32Attn {
    pub model_dim: usize,
    pub heads: usize,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    q_scale: Vec<f32>,
    k_scale: Vec<f32>,
}

impl From<&AttnParams> for F32Attn {
    fn from(p: &AttnParams) -> Self {
        F32Attn {
            model_dim: p.model_dim,
            heads: p.heads,
            wq: to_f32(&p.wq),
            wk: to_f32(&p.wk),
            wv: to_f32(&p.wv),
            wo: to_f32(&p.wo),
            q_scale: to_f32(&p.q_scale),
            k_scale: to_f32(&p.k_scale),
        }
    }
}

const QUERY_BLOCK: usize = 64;

/// Full self-attention forward, f32, scores computed per query block so the
/// T×T matrix is never materialized.
pub fn attention_forward(p: &F32Attn, x: &[f32], t: usize) -> Vec<f32> {
    let d = p.model_dim;
    let heads = p.heads;
    let hd = d / heads;
    assert_eq!(x.len(), t * d, "attention_forward input shape");

    let mut q = vec![0.0f32; t * d];
    let mut k = vec![0.0f32; t * d];
    let mut v = vec![0.0f32; t * d];
    gemm(x, t, d, &p.wq, d, &mut q);
    gemm(x, t, d, &p.wk, d, &mut k);
    gemm(x, t, d, &p.wv, d, &mut v);

    // per-head RMS norm and gain on q, k
    let eps = crate::tensor::NORM_EPS as f32;
    for h in 0..heads {
        for (buf, gain) in [(&mut q, p.q_scale[h]), (&mut k, p.k_scale[h])] {
            for ti in 0..t {
                let row = &mut buf[ti * d + h * hd..ti * d + (h + 1) * hd];
                let ms = row.iter().map(|v| v * v).sum::<f32>() / hd as f32;
                let inv = gain / (ms + eps).sqrt();
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }

    let scale = 1.0 / (hd as f32).sqrt();
    let mut cat = vec![0.0f32; t * d];
    let mut scores = vec![0.0f32; QUERY_BLOCK * t];
    for h in 0..heads {
        let off = h * hd;
        let mut qlo = 0;
        while qlo < t {
            let qhi = (qlo + QUERY_BLOCK).min(t);
            let qb = qhi - qlo;
            let sc = &mut scores[..qb * t];
            sc.fill(0.0);
            for qi in 0..qb {
                let qrow = &q[(qlo + qi) * d + off..(qlo + qi) * d + off + hd];
                let srow = &mut sc[qi * t..(qi + 1) * t];
                for (ki, s) in srow.iter_mut().enumerate() {
                    let krow = &k[ki * d + off..ki * d + off + hd];
                    let mut dot = 0.0f32;
                    for (a, b) in qrow.iter().zip(krow) {
                        dot += a * b;
                    }
                    *s = dot * scale;
                }
            }
            for qi in 0..qb {
                let srow = &mut sc[qi * t..(qi + 1) * t];
                let max = srow.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for s in srow.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = 1.0 / sum;
                let orow = &mut cat[(qlo + qi) * d + off..(qlo + qi) * d + off + hd];
                for (ki, &w) in srow.iter().enumerate() {
                    let wv = w * inv;
                    if wv == 0.0 {
                        continue;
                    }
                    let vrow = &v[ki * d + off..ki * d + off + hd];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += wv * vv;
                    }
                }
            }
            qlo = qhi;
        }
    }
    let mut out = vec![0.0f32; t * d];
    gemm(&cat, t, d, &p.wo, d, &mut out);
    out
}

/// Batched mixer forward over independent sequences; parallel across the
/// batch when the feature and pool allow it.
pub fn batch_mixer_forward(
    p: &F32Mixer,
    kind: SsmCombine,
    xs: &[Vec<f32>],
    t: usize,
) -> Vec<Vec<f32>> {
    parallel::par_map_indexed(xs.len(), |i| mixer_forward(p, kind, &xs[i], t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{self, AttnParams};
    use crate::hydra::{self, MixerParams};
    use crate::tensor::{randn, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &[f32], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
        a.iter()
            .zip(b)
            .map(|(x, y)| ((*x as f64) - y).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn mixer_kernel_matches_reference_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let mut p = MixerParams::init(&mut rng, 8, 2, 4, 7, 16).unwrap();
        p.out_proj = randn(&[p.inner_dim(), p.model_dim], &mut rng);
        let f32p = F32Mixer::from(&p);
        for t in [1usize, 5, 33] {
            let x = randn(&[t, 8], &mut rng);
            for kind in [
                hydra::SsmCombine::Quasiseparable,
                hydra::SsmCombine::Causal,
                hydra::SsmCombine::BidiAdd,
            ] {
                let oracle = hydra::apply_kind(&p, &x, kind).unwrap();
                let xf: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
                let y = mixer_forward(&f32p, kind, &xf, t);
                assert!(
                    rel_err(&y, oracle.data()) < 1e-3,
                    "mixer {kind:?} T={t}: {}",
                    rel_err(&y, oracle.data())
                );
            }
        }
    }

    #[test]
    fn attention_kernel_matches_reference_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let mut p = AttnParams::init(&mut rng, 8, 2).unwrap();
        p.wo = randn(&[8, 8], &mut rng);
        let f32p = F32Attn::from(&p);
        for t in [1usize, 7, 130] {
            let x = randn(&[t, 8], &mut rng);
            let oracle = attention::self_attention(&p, &x).unwrap();
            let xf: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
            let y = attention_forward(&f32p, &xf, t);
            assert!(
                rel_err(&y, oracle.data()) < 1e-3,
                "attention T={t}: {}",
                rel_err(&y, oracle.data())
            );
        }
    }

    #[test]
    fn batch_forward_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let mut p = MixerParams::init(&mut rng, 8, 2, 4, 7, 16).unwrap();
        p.out_proj = randn(&[p.inner_dim(), p.model_dim], &mut rng);
        let f32p = F32Mixer::from(&p);
        let xs: Vec<Vec<f32>> = (0..3)
            .map(|_| {
                randn(&[6, 8], &mut rng)
                    .data()
                    .iter()
                    .map(|&v| v as f32)
                    .collect()
            })
            .collect();
        let batch = batch_mixer_forward(&f32p, hydra::SsmCombine::Quasiseparable, &xs, 6);
        for (x, y) in xs.iter().zip(&batch) {
            let single = mixer_forward(&f32p, hydra::SsmCombine::Quasiseparable, x, 6);
            assert_eq!(&single, y);
        }
    }

    #[test]
    fn zero_weight_tensor_conversion() {
        let z = Tensor::zeros(&[2, 3]);
        assert!(to_f32(&z).iter().all(|&v| v == 0.0));
    }
}
