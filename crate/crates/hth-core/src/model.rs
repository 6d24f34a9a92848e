//! Denoiser assembly: patch embedding, sinusoidal positions, one-shot
//! timestep conditioning, the hybrid block stack driven by a mixer schedule,
//! and the output head back to latent space.
//!
//! Blocks are pre-norm residual: cross-attention to the text token, then the
//! token mixer under the block's scan plan, then a feed-forward layer. The
//! diffusion timestep is embedded once and added to the tokens before block 0;
//! block forwards take no timestep argument.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttnVars;
use crate::config::{MixerSet, ModelConfig};
use crate::error::{HthError, Result};
use crate::hydra::{self, MixerShape, MixerVars, SsmCombine};
use crate::scan::{self, MixerKind, MixerSchedule, ScanPattern, ScanPlan};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(pub usize);

/// Flat named parameter storage; the single source of truth for weights.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> PId {
        self.names.push(name.into());
        self.tensors.push(t);
        PId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: PId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: PId, t: Tensor) {
        debug_assert_eq!(self.tensors[id.0].shape(), t.shape());
        self.tensors[id.0] = t;
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<PId> {
        self.names.iter().position(|n| n == name).map(PId)
    }

    /// Put every parameter on a tape; `Var`s line up with `PId` indices.
    pub fn register_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Batched latent tensor with explicit (batch, T, H, W, channels) semantics.
/// Flattened 1D sequences are only ever produced through a [`ScanPlan`].
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    /// One rank-4 tensor [T, H, W, C] per batch element.
    pub samples: Vec<Tensor>,
}

impl LatentGrid {
    pub fn from_samples(samples: Vec<Tensor>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| HthError::invalid("empty latent batch"))?;
        let s = first.shape().to_vec();
        if s.len() != 4 {
            return Err(HthError::shape("LatentGrid", "[T,H,W,C]", format!("{s:?}")));
        }
        for t in &samples {
            if t.shape() != s {
                return Err(HthError::shape("LatentGrid", format!("{s:?}"), format!("{:?}", t.shape())));
            }
            t.check_finite("LatentGrid")?;
        }
        Ok(LatentGrid {
            t: s[0],
            h: s[1],
            w: s[2],
            channels: s[3],
            samples,
        })
    }

    pub fn batch(&self) -> usize {
        self.samples.len()
    }
}

/// Flat-index permutation folding p×p spatial neighborhoods into token
/// features: [T, H, W, C] -> [T·(H/p)·(W/p), p²·C].
pub fn patch_perm(
    grid: (usize, usize, usize),
    channels: usize,
    p: usize,
) -> Result<(Arc<Vec<usize>>, Arc<Vec<usize>>)> {
    let (t, h, w) = grid;
    if h % p != 0 || w % p != 0 {
        return Err(HthError::invalid(format!(
            "grid {h}x{w} not divisible by patch {p}"
        )));
    }
    let (hp, wp) = (h / p, w / p);
    let feat = p * p * channels;
    let n = t * hp * wp;
    let mut perm = Vec::with_capacity(n * feat);
    for ti in 0..t {
        for hi in 0..hp {
            for wi in 0..wp {
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..channels {
                            let src = ((ti * h + hi * p + dy) * w + (wi * p + dx)) * channels + c;
                            perm.push(src);
                        }
                    }
                }
            }
        }
    }
    let mut inv = vec![0usize; perm.len()];
    for (i, &pp) in perm.iter().enumerate() {
        inv[pp] = i;
    }
    Ok((Arc::new(perm), Arc::new(inv)))
}

/// Pure patchify: [T, H, W, C] -> [T·(H/p)·(W/p), p²·C].
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(HthError::shape("patchify", "[T,H,W,C]", format!("{s:?}")));
    }
    let (perm, _) = patch_perm((s[0], s[1], s[2]), s[3], p)?;
    let data: Vec<f64> = perm.iter().map(|&i| x.data()[i]).collect();
    let n = s[0] * (s[1] / p) * (s[2] / p);
    Tensor::new(vec![n, p * p * s[3]], data)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, grid: (usize, usize, usize), channels: usize, p: usize) -> Result<Tensor> {
    let (_, inv) = patch_perm(grid, channels, p)?;
    if tokens.len() != inv.len() {
        return Err(HthError::shape("unpatchify", inv.len(), tokens.len()));
    }
    let data: Vec<f64> = inv.iter().map(|&i| tokens.data()[i]).collect();
    Tensor::new(vec![grid.0, grid.1, grid.2, channels], data)
}

/// Non-learnable absolute sinusoidal embedding over flat positions,
/// sin/cos interleaved; position 0 maps to [0, 1, 0, 1, ...].
pub fn sinusoidal_pe(n_tokens: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(HthError::invalid("positional dim must be even"));
    }
    let mut pe = Tensor::zeros(&[n_tokens, dim]);
    for pos in 0..n_tokens {
        for i in 0..dim / 2 {
            let omega = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            let arg = pos as f64 * omega;
            pe.set2(pos, 2 * i, arg.sin());
            pe.set2(pos, 2 * i + 1, arg.cos());
        }
    }
    Ok(pe)
}

/// Sinusoidal featurization of a diffusion time in [0, 1]; the learnable
/// embedding on top lives in the model.
pub fn timestep_features(t: f64, dim: usize) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(HthError::invalid(format!("timestep {t} outside [0, 1]")));
    }
    if dim % 2 != 0 {
        return Err(HthError::invalid("timestep dim must be even"));
    }
    let mut f = Tensor::zeros(&[1, dim]);
    let scaled = t * 1000.0;
    for i in 0..dim / 2 {
        let omega = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        f.set2(0, 2 * i, (scaled * omega).sin());
        f.set2(0, 2 * i + 1, (scaled * omega).cos());
    }
    Ok(f)
}

/// Conditioning input: a toy prompt class or the learned null embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    Class(usize),
    Null,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: PId,
    wk: PId,
    wv: PId,
    wo: PId,
    q_scale: PId,
    k_scale: PId,
}

impl AttnIds {
    fn vars(&self, vars: &[Var]) -> AttnVars {
        AttnVars {
            wq: vars[self.wq.0],
            wk: vars[self.wk.0],
            wv: vars[self.wv.0],
            wo: vars[self.wo.0],
            q_scale: vars[self.q_scale.0],
            k_scale: vars[self.k_scale.0],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct MixerIds {
    shape: MixerShape,
    kind: SsmCombine,
    in_proj: PId,
    dt_bias: PId,
    a_log: PId,
    d_diag: PId,
    conv_w: PId,
    out_proj: PId,
}

impl MixerIds {
    fn vars(&self, vars: &[Var]) -> MixerVars {
        MixerVars {
            in_proj: vars[self.in_proj.0],
            dt_bias: vars[self.dt_bias.0],
            a_log: vars[self.a_log.0],
            d_diag: vars[self.d_diag.0],
            conv_w: vars[self.conv_w.0],
            out_proj: vars[self.out_proj.0],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum TokenMixer {
    Ssm(MixerIds),
    Attn { heads: usize, ids: AttnIds },
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: (PId, PId),
    cross: AttnIds,
    norm2: (PId, PId),
    mixer: TokenMixer,
    norm3: (PId, PId),
    ffn_w1: PId,
    ffn_b1: PId,
    ffn_w2: PId,
    ffn_b2: PId,
}

/// The full denoiser.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub schedule: MixerSchedule,
    patch_w: PId,
    patch_b: PId,
    time_w1: PId,
    time_b1: PId,
    time_w2: PId,
    time_b2: PId,
    text_table: PId,
    text_proj: PId,
    blocks: Vec<Block>,
    final_norm: (PId, PId),
    head_w: PId,
    head_b: PId,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let d = cfg.model_dim;
        let feat = cfg.patch * cfg.patch * cfg.latent_channels;

        let tn = |rng: &mut ChaCha8Rng, shape: &[usize]| hydra::trunc_normal(rng, shape, 0.02);

        let patch_w = store.add("patch_embed.w", tn(&mut rng, &[feat, d]));
        let patch_b = store.add("patch_embed.b", Tensor::zeros(&[1, d]));
        let time_w1 = store.add("time.w1", tn(&mut rng, &[d, d]));
        let time_b1 = store.add("time.b1", Tensor::zeros(&[1, d]));
        let time_w2 = store.add("time.w2", tn(&mut rng, &[d, d]));
        let time_b2 = store.add("time.b2", Tensor::zeros(&[1, d]));
        // class rows plus one trailing null-embedding row
        let text_table = store.add(
            "text.table",
            tn(&mut rng, &[cfg.n_classes + 1, cfg.text_embed_dim]),
        );
        let text_proj = store.add("text.proj", tn(&mut rng, &[cfg.text_embed_dim, d]));

        let schedule = match cfg.mixer_set {
            MixerSet::Hybrid => scan::build_schedule(cfg.n_blocks, cfg.stage)?,
            MixerSet::Uniform(kind) => scan::uniform_schedule(kind, cfg.n_blocks, cfg.stage),
        };

        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for (bi, spec) in schedule.blocks.iter().enumerate() {
            let pre = format!("block{bi}");
            let norm =
                |store: &mut ParamStore, tag: &str| -> (PId, PId) {
                    (
                        store.add(format!("{pre}.{tag}.g"), Tensor::full(&[1, d], 1.0)),
                        store.add(format!("{pre}.{tag}.b"), Tensor::zeros(&[1, d])),
                    )
                };
            let attn_ids = |store: &mut ParamStore, rng: &mut ChaCha8Rng, tag: &str| AttnIds {
                wq: store.add(format!("{pre}.{tag}.wq"), hydra::trunc_normal(rng, &[d, d], 0.02)),
                wk: store.add(format!("{pre}.{tag}.wk"), hydra::trunc_normal(rng, &[d, d], 0.02)),
                wv: store.add(format!("{pre}.{tag}.wv"), hydra::trunc_normal(rng, &[d, d], 0.02)),
                wo: store.add(format!("{pre}.{tag}.wo"), Tensor::zeros(&[d, d])),
                q_scale: store.add(format!("{pre}.{tag}.q_scale"), Tensor::full(&[1, cfg.attn_heads], 1.0)),
                k_scale: store.add(format!("{pre}.{tag}.k_scale"), Tensor::full(&[1, cfg.attn_heads], 1.0)),
            };

            let norm1 = norm(&mut store, "norm1");
            let cross = attn_ids(&mut store, &mut rng, "cross");
            let norm2 = norm(&mut store, "norm2");
            let mixer = match spec.mixer {
                MixerKind::SelfAttention => TokenMixer::Attn {
                    heads: cfg.attn_heads,
                    ids: attn_ids(&mut store, &mut rng, "attn"),
                },
                kind => {
                    let combine = match kind {
                        MixerKind::Hydra => SsmCombine::Quasiseparable,
                        MixerKind::CausalSsm => SsmCombine::Causal,
                        MixerKind::BidiAddSsm => SsmCombine::BidiAdd,
                        MixerKind::SelfAttention => unreachable!(),
                    };
                    let p = hydra::MixerParams::init(
                        &mut rng,
                        d,
                        cfg.mixer_heads,
                        cfg.state_dim,
                        cfg.conv_window,
                        cfg.chunk,
                    )?;
                    TokenMixer::Ssm(MixerIds {
                        shape: p.shape(),
                        kind: combine,
                        in_proj: store.add(format!("{pre}.mixer.in_proj"), p.in_proj),
                        dt_bias: store.add(format!("{pre}.mixer.dt_bias"), p.dt_bias),
                        a_log: store.add(format!("{pre}.mixer.a_log"), p.a_log),
                        d_diag: store.add(format!("{pre}.mixer.d_diag"), p.d_diag),
                        conv_w: store.add(format!("{pre}.mixer.conv_w"), p.conv_w),
                        out_proj: store.add(format!("{pre}.mixer.out_proj"), p.out_proj),
                    })
                }
            };
            let norm3 = norm(&mut store, "norm3");
            let ffn_w1 = store.add(format!("{pre}.ffn.w1"), tn(&mut rng, &[d, 2 * d]));
            let ffn_b1 = store.add(format!("{pre}.ffn.b1"), Tensor::zeros(&[1, 2 * d]));
            let ffn_w2 = store.add(format!("{pre}.ffn.w2"), Tensor::zeros(&[2 * d, d]));
            let ffn_b2 = store.add(format!("{pre}.ffn.b2"), Tensor::zeros(&[1, d]));
            blocks.push(Block {
                norm1,
                cross,
                norm2,
                mixer,
                norm3,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
            });
        }

        let final_norm = (
            store.add("final_norm.g", Tensor::full(&[1, d], 1.0)),
            store.add("final_norm.b", Tensor::zeros(&[1, d])),
        );
        let head_w = store.add("head.w", Tensor::zeros(&[d, feat]));
        let head_b = store.add("head.b", Tensor::zeros(&[1, feat]));

        Ok(Model {
            cfg,
            store,
            schedule,
            patch_w,
            patch_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            text_table,
            text_proj,
            blocks,
            final_norm,
            head_w,
            head_b,
        })
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.store.register_all(tape)
    }

    fn norm_affine(tape: &mut Tape, x: Var, gb: (Var, Var)) -> Result<Var> {
        let n = tape.layernorm_rows(x)?;
        let n = tape.mul_broadcast_row(n, gb.0)?;
        tape.add_broadcast_row(n, gb.1)
    }

    fn context_embedding(&self, tape: &mut Tape, vars: &[Var], cond: Cond) -> Result<Var> {
        let k = self.cfg.n_classes;
        let row = match cond {
            Cond::Class(c) => {
                if c >= k {
                    return Err(HthError::invalid(format!("class {c} out of range {k}")));
                }
                c
            }
            Cond::Null => k,
        };
        let mut onehot = Tensor::zeros(&[1, k + 1]);
        onehot.data_mut()[row] = 1.0;
        let oh = tape.leaf(onehot);
        let emb = tape.matmul(oh, vars[self.text_table.0])?;
        tape.matmul(emb, vars[self.text_proj.0])
    }

    /// One pre-norm residual block. Note: no timestep argument by design;
    /// conditioning on t happens once before block 0.
    fn block_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        block: &Block,
        x: Var,
        ctx: Var,
        plan: &ScanPlan,
    ) -> Result<Var> {
        // cross-attention to the text token
        let h = Self::norm_affine(tape, x, (vars[block.norm1.0 .0], vars[block.norm1.1 .0]))?;
        let ca = crate::attention::attend_tape(
            tape,
            self.cfg.attn_heads,
            &block.cross.vars(vars),
            h,
            ctx,
        )?;
        let x = tape.add(x, ca)?;

        // token mixing
        let h = Self::norm_affine(tape, x, (vars[block.norm2.0 .0], vars[block.norm2.1 .0]))?;
        let mixed = match &block.mixer {
            TokenMixer::Attn { heads, ids } => {
                crate::attention::attend_tape(tape, *heads, &ids.vars(vars), h, h)?
            }
            TokenMixer::Ssm(ids) => {
                let seq = tape.permute_rows(h, plan.perm.clone(), plan.inv_perm.clone())?;
                let y = hydra::mix_tape(tape, &ids.shape, &ids.vars(vars), ids.kind, seq)?;
                tape.permute_rows(y, plan.inv_perm.clone(), plan.perm.clone())?
            }
        };
        let x = tape.add(x, mixed)?;

        // feed-forward, expansion 2x, both layers nonlinear
        let h = Self::norm_affine(tape, x, (vars[block.norm3.0 .0], vars[block.norm3.1 .0]))?;
        let f = tape.matmul(h, vars[block.ffn_w1.0])?;
        let f = tape.add_broadcast_row(f, vars[block.ffn_b1.0])?;
        let f = tape.silu(f)?;
        let f = tape.matmul(f, vars[block.ffn_w2.0])?;
        let f = tape.add_broadcast_row(f, vars[block.ffn_b2.0])?;
        let f = tape.silu(f)?;
        tape.add(x, f)
    }

    /// Full denoiser forward on a tape. `latents` is a [T, H, W, C] sample;
    /// the output is the predicted velocity with the same shape.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        latents: &Tensor,
        t: f64,
        cond: Cond,
    ) -> Result<Var> {
        let s = latents.shape().to_vec();
        if s.len() != 4 || s[3] != self.cfg.latent_channels {
            return Err(HthError::shape(
                "forward_tape",
                format!("[T,H,W,{}]", self.cfg.latent_channels),
                format!("{s:?}"),
            ));
        }
        let grid = (s[0], s[1], s[2]);
        let p = self.cfg.patch;
        let token_grid = (grid.0, grid.1 / p, grid.2 / p);
        let n_tokens = token_grid.0 * token_grid.1 * token_grid.2;
        let d = self.cfg.model_dim;
        let feat = p * p * self.cfg.latent_channels;

        // plans for every pattern this schedule touches, on this grid
        let mut plans: HashMap<ScanPattern, ScanPlan> = HashMap::new();
        for b in 0..self.blocks.len() {
            let pat = self.schedule.pattern_for(b);
            plans
                .entry(pat)
                .or_insert(scan::build_plan(pat, token_grid)?);
        }

        let (perm, inv) = patch_perm(grid, self.cfg.latent_channels, p)?;
        let xin = tape.leaf(latents.clone());
        let tokens = tape.permute_flat(xin, perm.clone(), inv.clone(), vec![n_tokens, feat])?;
        let x = tape.matmul(tokens, vars[self.patch_w.0])?;
        let x = tape.add_broadcast_row(x, vars[self.patch_b.0])?;

        let pe = sinusoidal_pe(n_tokens, d)?;
        let x = tape.add_const(x, &pe)?;

        // timestep embedding, added exactly once
        let tf = timestep_features(t, d)?;
        let tf = tape.leaf(tf);
        let te = tape.matmul(tf, vars[self.time_w1.0])?;
        let te = tape.add_broadcast_row(te, vars[self.time_b1.0])?;
        let te = tape.silu(te)?;
        let te = tape.matmul(te, vars[self.time_w2.0])?;
        let te = tape.add_broadcast_row(te, vars[self.time_b2.0])?;
        let mut x = tape.add_broadcast_row(x, te)?;

        let ctx = self.context_embedding(tape, vars, cond)?;

        for (bi, block) in self.blocks.iter().enumerate() {
            let plan = &plans[&self.schedule.pattern_for(bi)];
            x = self.block_forward(tape, vars, block, x, ctx, plan)?;
        }

        let x = Self::norm_affine(tape, x, (vars[self.final_norm.0 .0], vars[self.final_norm.1 .0]))?;
        let x = tape.matmul(x, vars[self.head_w.0])?;
        let x = tape.add_broadcast_row(x, vars[self.head_b.0])?;
        tape.permute_flat(x, inv, perm, s)
    }

    /// Predict the velocity for noised latents (fresh tape, values only).
    pub fn denoise(&self, latents: &Tensor, t: f64, cond: Cond) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let y = self.forward_tape(&mut tape, &vars, latents, t, cond)?;
        Ok(tape.value(y)?.clone())
    }
}
