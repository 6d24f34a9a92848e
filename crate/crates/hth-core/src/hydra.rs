//! Bidirectional quasiseparable token mixer, plus the single-direction and
//! addition-combined baselines used by the mixer comparison.
//!
//! The value path applies two shared-parameter semiseparable passes, one on
//! the sequence and one on its reversal, each shifted right by one position
//! so the diagonal is contributed solely by the learnable per-head scalar D:
//!
//! ```text
//!   qs(x) = shift(ss(x)) + flip(shift(ss(flip(x)))) + D x
//! ```
//!
//! Both passes read the same per-position step parameters; the reverse pass
//! flips them along with the sequence.

use crate::error::{HthError, Result};
use crate::ssd::{self, DiscretizedParams};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// Exact order reversal of sequence rows; involutive.
pub fn flip(x: &Tensor) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        for j in 0..cols {
            out.set2(i, j, x.at2(rows - 1 - i, j));
        }
    }
    out
}

/// Shift rows right by one position in time: the first row becomes zero and
/// the last input row is discarded.
pub fn shift(x: &Tensor) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[rows, cols]);
    for i in 1..rows {
        for j in 0..cols {
            out.set2(i, j, x.at2(i - 1, j));
        }
    }
    out
}

/// Learnable parameters of one mixer layer.
///
/// Input projection columns are laid out `[value | dt | B | C | gate]`; the
/// first four groups pass through the depthwise convolution, the gate path
/// does not. No biases anywhere except the per-head dt bias, so a zero input
/// maps to a zero output exactly.
#[derive(Debug, Clone)]
pub struct MixerParams {
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state_dim: usize,
    pub conv_window: usize,
    pub chunk: usize,
    /// model_dim × (value + dt + B + C + gate) columns
    pub in_proj: Tensor,
    /// 1 × heads
    pub dt_bias: Tensor,
    /// 1 × heads; the transition scalar per head is −exp(a_log)
    pub a_log: Tensor,
    /// 1 × heads, the learnable diagonal
    pub d_diag: Tensor,
    /// conv_window × (2·model_dim + heads + 2·state)
    pub conv_w: Tensor,
    /// 2·model_dim × model_dim
    pub out_proj: Tensor,
}

/// Inner value path is twice the model width.
pub const EXPANSION: usize = 2;

/// Dimension metadata of a mixer layer, independent of its weights.
#[derive(Debug, Clone, Copy)]
pub struct MixerShape {
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state_dim: usize,
    pub conv_window: usize,
    pub chunk: usize,
}

impl MixerShape {
    pub fn new(model_dim: usize, heads: usize, state_dim: usize, conv_window: usize, chunk: usize) -> Result<Self> {
        if (EXPANSION * model_dim) % heads != 0 {
            return Err(HthError::invalid(format!(
                "expansion*model_dim ({}) must divide by heads ({heads})",
                EXPANSION * model_dim
            )));
        }
        Ok(MixerShape {
            model_dim,
            heads,
            head_dim: EXPANSION * model_dim / heads,
            state_dim,
            conv_window,
            chunk,
        })
    }

    /// Inner (value-path) width.
    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Width of the convolved stream: value + dt + B + C columns.
    pub fn conv_dim(&self) -> usize {
        self.inner_dim() + self.heads + 2 * self.state_dim
    }
}

impl MixerParams {
    pub fn shape(&self) -> MixerShape {
        MixerShape {
            model_dim: self.model_dim,
            heads: self.heads,
            head_dim: self.head_dim,
            state_dim: self.state_dim,
            conv_window: self.conv_window,
            chunk: self.chunk,
        }
    }

    /// Inner (value-path) width.
    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Width of the convolved stream: value + dt + B + C columns.
    pub fn conv_dim(&self) -> usize {
        self.inner_dim() + self.heads + 2 * self.state_dim
    }

    pub fn init(
        rng: &mut impl rand::Rng,
        model_dim: usize,
        heads: usize,
        state_dim: usize,
        conv_window: usize,
        chunk: usize,
    ) -> Result<Self> {
        if (EXPANSION * model_dim) % heads != 0 {
            return Err(HthError::invalid(format!(
                "expansion*model_dim ({}) must divide by heads ({heads})",
                EXPANSION * model_dim
            )));
        }
        let head_dim = EXPANSION * model_dim / heads;
        let inner = heads * head_dim;
        let conv_dim = inner + heads + 2 * state_dim;
        let in_proj = trunc_normal(rng, &[model_dim, conv_dim + inner], 0.02);
        // dt_bias chosen so softplus lands in a moderate step range
        let dt_bias = Tensor::new(
            vec![1, heads],
            (0..heads)
                .map(|_| inv_softplus(rng.gen_range(0.01..0.2)))
                .collect(),
        )?;
        let a_log = Tensor::new(
            vec![1, heads],
            (0..heads).map(|_| rng.gen_range(1.0f64..4.0).ln()).collect(),
        )?;
        let d_diag = Tensor::full(&[1, heads], 1.0);
        // near-identity filter: unit center tap plus small noise
        let mut conv_w = trunc_normal(rng, &[conv_window, conv_dim], 0.02);
        let center = conv_window / 2;
        for cidx in 0..conv_dim {
            let v = conv_w.at2(center, cidx) + 1.0;
            conv_w.set2(center, cidx, v);
        }
        let out_proj = Tensor::zeros(&[inner, model_dim]);
        Ok(MixerParams {
            model_dim,
            heads,
            head_dim,
            state_dim,
            conv_window,
            chunk,
            in_proj,
            dt_bias,
            a_log,
            d_diag,
            conv_w,
            out_proj,
        })
    }

    pub fn register(&self, tape: &mut Tape) -> MixerVars {
        MixerVars {
            in_proj: tape.leaf(self.in_proj.clone()),
            dt_bias: tape.leaf(self.dt_bias.clone()),
            a_log: tape.leaf(self.a_log.clone()),
            d_diag: tape.leaf(self.d_diag.clone()),
            conv_w: tape.leaf(self.conv_w.clone()),
            out_proj: tape.leaf(self.out_proj.clone()),
        }
    }
}

pub(crate) fn trunc_normal(rng: &mut impl rand::Rng, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v.clamp(-2.0, 2.0) * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("trunc_normal")
}

pub(crate) fn inv_softplus(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Tape handles for one mixer layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct MixerVars {
    pub in_proj: Var,
    pub dt_bias: Var,
    pub a_log: Var,
    pub d_diag: Var,
    pub conv_w: Var,
    pub out_proj: Var,
}

/// Which combination of directional passes the mixer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsmCombine {
    /// shift(fwd) + flip(shift(bwd)) + Dx
    Quasiseparable,
    /// fwd + Dx
    Causal,
    /// fwd + flip(bwd) + Dx, no shift masking
    BidiAdd,
}

/// The per-head value path on tape: directional scans over already
/// discretized parameters, combined per `kind`.
pub fn value_path_tape(
    tape: &mut Tape,
    kind: SsmCombine,
    a_bar: Var,
    b_bar: Var,
    c: Var,
    x: Var,
    d_scalar: Var,
    chunk: usize,
) -> Result<Var> {
    let dx = tape.mul_scalar_var(x, d_scalar)?;
    let fwd = ssd::chunked_scan_tape(tape, a_bar, b_bar, c, x, chunk)?;
    match kind {
        SsmCombine::Causal => tape.add(fwd, dx),
        SsmCombine::Quasiseparable | SsmCombine::BidiAdd => {
            let a_r = tape.flip_rows(a_bar)?;
            let b_r = tape.flip_rows(b_bar)?;
            let c_r = tape.flip_rows(c)?;
            let x_r = tape.flip_rows(x)?;
            let bwd = ssd::chunked_scan_tape(tape, a_r, b_r, c_r, x_r, chunk)?;
            let (f_term, b_term) = if kind == SsmCombine::Quasiseparable {
                let sf = tape.shift_rows_down(fwd)?;
                let sb = tape.shift_rows_down(bwd)?;
                (sf, tape.flip_rows(sb)?)
            } else {
                (fwd, tape.flip_rows(bwd)?)
            };
            let both = tape.add(f_term, b_term)?;
            tape.add(both, dx)
        }
    }
}

/// Full mixer forward on tape: in-projection, depthwise conv, per-head
/// step-parameter generation, directional scans, SiLU gate, out-projection.
/// Step parameters are computed once from the conv output; the reverse pass
/// reads them flipped inside [`value_path_tape`].
pub fn mix_tape(
    tape: &mut Tape,
    p: &MixerShape,
    v: &MixerVars,
    kind: SsmCombine,
    x: Var,
) -> Result<Var> {
    let (hd, heads, n) = (p.head_dim, p.heads, p.state_dim);
    let inner = p.inner_dim();
    let conv_dim = p.conv_dim();

    let xz = tape.matmul(x, v.in_proj)?;
    let conv_in = tape.slice_cols(xz, 0, conv_dim)?;
    let gate = tape.slice_cols(xz, conv_dim, conv_dim + inner)?;
    // the bidirectional combinations use a centered filter; the causal
    // baseline must not see future positions anywhere in its pipeline
    let conv_out = tape.conv_depthwise(conv_in, v.conv_w, kind == SsmCombine::Causal)?;

    let value = tape.slice_cols(conv_out, 0, inner)?;
    let dt_raw = tape.slice_cols(conv_out, inner, inner + heads)?;
    let b_shared = tape.slice_cols(conv_out, inner + heads, inner + heads + n)?;
    let c_shared = tape.slice_cols(conv_out, inner + heads + n, inner + heads + 2 * n)?;

    let dt_biased = tape.add_broadcast_row(dt_raw, v.dt_bias)?;
    let dt = tape.softplus(dt_biased)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let delta = tape.slice_cols(dt, h, h + 1)?;
        let a_log_h = tape.slice_cols(v.a_log, h, h + 1)?;
        let a_pos = tape.exp(a_log_h)?;
        let a_neg = tape.scale(a_pos, -1.0)?;

        // a_bar = exp(delta * a); b_bar = ((a_bar - 1)/a) * B
        let da = tape.mul_scalar_var(delta, a_neg)?;
        let a_bar = tape.exp(da)?;
        let minus_one = Tensor::full(tape.value(a_bar)?.shape(), -1.0);
        let am1 = tape.add_const(a_bar, &minus_one)?;
        let a_inv = tape.recip(a_neg)?;
        let coeff = tape.mul_scalar_var(am1, a_inv)?;
        let b_bar = tape.mul_broadcast_col(b_shared, coeff)?;

        let x_h = tape.slice_cols(value, h * hd, (h + 1) * hd)?;
        let d_h = tape.slice_cols(v.d_diag, h, h + 1)?;
        let y_h = value_path_tape(tape, kind, a_bar, b_bar, c_shared, x_h, d_h, p.chunk)?;
        head_outputs.push(y_h);
    }
    let y = if heads == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)?
    };
    let g = tape.silu(gate)?;
    let gated = tape.mul(y, g)?;
    tape.matmul(gated, v.out_proj)
}

/// Apply the quasiseparable mixer to a T×model_dim token sequence
/// (fresh tape, values only).
pub fn hydra_apply(p: &MixerParams, x: &Tensor) -> Result<Tensor> {
    apply_kind(p, x, SsmCombine::Quasiseparable)
}

pub fn apply_kind(p: &MixerParams, x: &Tensor, kind: SsmCombine) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = p.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = mix_tape(&mut tape, &p.shape(), &v, kind, xv)?;
    Ok(tape.value(y)?.clone())
}

/// Dense verification-only materialization of the bidirectional value path.
#[derive(Debug, Clone)]
pub struct QuasiseparableMatrix {
    pub entries: Tensor,
}

impl QuasiseparableMatrix {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        tensor::matmul(&self.entries, x)
    }
}

/// Largest T the dense materialization accepts.
pub const QS_MATERIALIZE_BOUND: usize = 64;

/// Dense T×T matrix of the value path for one head: shift-mask of the forward
/// semiseparable matrix, flip-shift-mask of the backward one, plus `d` on the
/// diagonal.
pub fn materialize_qs(
    d_params: &DiscretizedParams,
    c: &Tensor,
    d_scalar: f64,
) -> Result<QuasiseparableMatrix> {
    let t = d_params.a_bar.len();
    if t > QS_MATERIALIZE_BOUND {
        return Err(HthError::invalid(format!(
            "materialize_qs: T={t} exceeds bound {QS_MATERIALIZE_BOUND}"
        )));
    }
    let fwd = ssd::materialize_matrix(d_params, c)?.entries;

    let rev = DiscretizedParams {
        a_bar: d_params.a_bar.iter().rev().cloned().collect(),
        b_bar: flip(&d_params.b_bar),
    };
    let bwd = ssd::materialize_matrix(&rev, &flip(c))?.entries;

    let mut qs = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            // shift(M x) == (S M) x: row i of S·M is row i-1 of M, row 0 zero
            let f = if i >= 1 { fwd.at2(i - 1, j) } else { 0.0 };
            // flip(shift(M_rev flip(x))) == (F S M_rev F) x
            let fi = t - 1 - i;
            let b = if fi >= 1 {
                bwd.at2(fi - 1, t - 1 - j)
            } else {
                0.0
            };
            let diag = if i == j { d_scalar } else { 0.0 };
            qs.set2(i, j, f + b + diag);
        }
    }
    qs.check_finite("materialize_qs")?;
    Ok(QuasiseparableMatrix { entries: qs })
}

/// Pure value path (recurrence-based scans), the oracle counterpart of
/// [`value_path_tape`].
pub fn value_path_pure(
    kind: SsmCombine,
    d_params: &DiscretizedParams,
    c: &Tensor,
    x: &Tensor,
    d_scalar: f64,
    chunk: usize,
) -> Result<Tensor> {
    let dx = tensor::scale(x, d_scalar)?;
    let fwd = ssd::chunked_scan(d_params, c, x, chunk)?;
    match kind {
        SsmCombine::Causal => tensor::add(&fwd, &dx),
        SsmCombine::Quasiseparable | SsmCombine::BidiAdd => {
            let rev = DiscretizedParams {
                a_bar: d_params.a_bar.iter().rev().cloned().collect(),
                b_bar: flip(&d_params.b_bar),
            };
            let bwd = ssd::chunked_scan(&rev, &flip(c), &flip(x), chunk)?;
            let (f_term, b_term) = if kind == SsmCombine::Quasiseparable {
                (shift(&fwd), flip(&shift(&bwd)))
            } else {
                (fwd, flip(&bwd))
            };
            tensor::add(&tensor::add(&f_term, &b_term)?, &dx)
        }
    }
}
