//! Scan-order planning over (T, H, W) token grids: bijective permutations
//! from grid positions to 1D sequence order, plus the per-block mixer
//! schedule for the two training stages.
//!
//! Canonical flat layout is row-major (t, h, w). Directionality lives inside
//! the token mixer, so a plan is a single forward ordering; no reverse plans
//! exist.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{HthError, Result};
use crate::tensor::Tensor;

/// Scan orderings. `H`/`V` are per-frame horizontal/vertical rasters.
/// `HT`/`VT` are the same rasters applied frame-by-frame (spatial-major,
/// tagged separately so stage-2 configs stay auditable). `TH`/`TV` are
/// temporal-major: all frames at one spatial position before moving on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanPattern {
    H,
    V,
    TH,
    TV,
    HT,
    VT,
}

impl ScanPattern {
    pub const ALL: [ScanPattern; 6] = [
        ScanPattern::H,
        ScanPattern::V,
        ScanPattern::TH,
        ScanPattern::TV,
        ScanPattern::HT,
        ScanPattern::VT,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScanPattern::H => "H",
            ScanPattern::V => "V",
            ScanPattern::TH => "TH",
            ScanPattern::TV => "TV",
            ScanPattern::HT => "HT",
            ScanPattern::VT => "VT",
        }
    }

    /// Temporal-major patterns scan along T fastest.
    pub fn is_temporal_major(&self) -> bool {
        matches!(self, ScanPattern::TH | ScanPattern::TV)
    }
}

impl fmt::Display for ScanPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScanPattern {
    type Err = HthError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H" => Ok(ScanPattern::H),
            "V" => Ok(ScanPattern::V),
            "TH" => Ok(ScanPattern::TH),
            "TV" => Ok(ScanPattern::TV),
            "HT" => Ok(ScanPattern::HT),
            "VT" => Ok(ScanPattern::VT),
            other => Err(HthError::invalid(format!("unknown scan pattern {other:?}"))),
        }
    }
}

/// A bijective ordering of a (T, H, W) grid with its exact inverse.
#[derive(Debug, Clone)]
pub struct ScanPlan {
    pub pattern: ScanPattern,
    pub grid: (usize, usize, usize),
    /// scan position -> canonical flat index
    pub perm: Arc<Vec<usize>>,
    /// canonical flat index -> scan position
    pub inv_perm: Arc<Vec<usize>>,
}

impl ScanPlan {
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// Build the ordering for `pattern` over `grid = (T, H, W)`.
pub fn build_plan(pattern: ScanPattern, grid: (usize, usize, usize)) -> Result<ScanPlan> {
    let (t, h, w) = grid;
    if t == 0 || h == 0 || w == 0 {
        return Err(HthError::invalid(format!("zero-sized grid {grid:?}")));
    }
    let flat = |ti: usize, hi: usize, wi: usize| (ti * h + hi) * w + wi;
    let mut perm = Vec::with_capacity(t * h * w);
    match pattern {
        // per-frame horizontal raster: w fastest, then h, then t
        ScanPattern::H | ScanPattern::HT => {
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        perm.push(flat(ti, hi, wi));
                    }
                }
            }
        }
        // per-frame vertical raster: h fastest, then w, then t
        ScanPattern::V | ScanPattern::VT => {
            for ti in 0..t {
                for wi in 0..w {
                    for hi in 0..h {
                        perm.push(flat(ti, hi, wi));
                    }
                }
            }
        }
        // temporal-major: t fastest, then w, then h
        ScanPattern::TH => {
            for hi in 0..h {
                for wi in 0..w {
                    for ti in 0..t {
                        perm.push(flat(ti, hi, wi));
                    }
                }
            }
        }
        // temporal-major: t fastest, then h, then w
        ScanPattern::TV => {
            for wi in 0..w {
                for hi in 0..h {
                    for ti in 0..t {
                        perm.push(flat(ti, hi, wi));
                    }
                }
            }
        }
    }
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Ok(ScanPlan {
        pattern,
        grid,
        perm: Arc::new(perm),
        inv_perm: Arc::new(inv),
    })
}

/// Reorder canonical-layout token rows into scan order.
pub fn gather(plan: &ScanPlan, tokens: &Tensor) -> Result<Tensor> {
    let (t, h, w) = plan.grid;
    if tokens.rows() != t * h * w {
        return Err(HthError::shape("gather", t * h * w, tokens.rows()));
    }
    let cols = tokens.cols();
    let mut data = Vec::with_capacity(tokens.len());
    for &p in plan.perm.iter() {
        data.extend_from_slice(&tokens.data()[p * cols..(p + 1) * cols]);
    }
    Tensor::new(vec![tokens.rows(), cols], data)
}

/// Exact inverse of [`gather`].
pub fn scatter(plan: &ScanPlan, seq: &Tensor) -> Result<Tensor> {
    let (t, h, w) = plan.grid;
    if seq.rows() != t * h * w {
        return Err(HthError::shape("scatter", t * h * w, seq.rows()));
    }
    let cols = seq.cols();
    let mut data = Vec::with_capacity(seq.len());
    for &p in plan.inv_perm.iter() {
        data.extend_from_slice(&seq.data()[p * cols..(p + 1) * cols]);
    }
    Tensor::new(vec![seq.rows(), cols], data)
}

/// Token mixer kinds used across the block stack and the mixer comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerKind {
    Hydra,
    SelfAttention,
    /// Single-direction semiseparable mixer (comparison baseline).
    CausalSsm,
    /// Addition-combined bidirectional mixer without shift masking
    /// (comparison baseline).
    BidiAddSsm,
}

impl MixerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MixerKind::Hydra => "hydra",
            MixerKind::SelfAttention => "attention",
            MixerKind::CausalSsm => "causal-ssm",
            MixerKind::BidiAddSsm => "bidi-add-ssm",
        }
    }
}

impl FromStr for MixerKind {
    type Err = HthError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hydra" => Ok(MixerKind::Hydra),
            "attention" => Ok(MixerKind::SelfAttention),
            "causal-ssm" => Ok(MixerKind::CausalSsm),
            "bidi-add-ssm" => Ok(MixerKind::BidiAddSsm),
            other => Err(HthError::invalid(format!("unknown mixer {other:?}"))),
        }
    }
}

/// One block's mixer kind plus its scan pattern in each training stage.
#[derive(Debug, Clone, Copy)]
pub struct BlockSpec {
    pub mixer: MixerKind,
    pub stage1: ScanPattern,
    pub stage2: ScanPattern,
}

/// Per-block schedule. Each consecutive set of 11 blocks holds 10 mixer
/// blocks followed by one self-attention block.
#[derive(Debug, Clone)]
pub struct MixerSchedule {
    pub blocks: Vec<BlockSpec>,
    pub stage: u8,
}

impl MixerSchedule {
    pub fn pattern_for(&self, block: usize) -> ScanPattern {
        match self.stage {
            1 => self.blocks[block].stage1,
            _ => self.blocks[block].stage2,
        }
    }
}

pub const SET_SIZE: usize = 11;

/// In-set positions (among the 10 mixer blocks of each 11-set) whose stage-2
/// pattern switches to temporal-major — 4 of 10 blocks.
pub const TEMPORAL_MAJOR_POSITIONS: [usize; 4] = [2, 3, 6, 7];

/// Build the hybrid schedule: per 11-set, blocks 0-9 are Hydra alternating
/// H/V in stage 1, block 10 is self-attention. Stage 2 retags the spatial
/// scans as frame-by-frame (HT/VT) and flips positions {2,3,6,7} of each set
/// to temporal-major (TH/TV).
pub fn build_schedule(n_blocks: usize, stage: u8) -> Result<MixerSchedule> {
    if n_blocks == 0 || n_blocks % SET_SIZE != 0 {
        return Err(HthError::invalid(format!(
            "n_blocks must be a positive multiple of {SET_SIZE}, got {n_blocks}"
        )));
    }
    if stage != 1 && stage != 2 {
        return Err(HthError::invalid(format!("stage must be 1 or 2, got {stage}")));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let pos = b % SET_SIZE;
        if pos == SET_SIZE - 1 {
            blocks.push(BlockSpec {
                mixer: MixerKind::SelfAttention,
                stage1: ScanPattern::H,
                stage2: ScanPattern::H,
            });
            continue;
        }
        let horizontal = pos % 2 == 0;
        let stage1 = if horizontal { ScanPattern::H } else { ScanPattern::V };
        let stage2 = if TEMPORAL_MAJOR_POSITIONS.contains(&pos) {
            if horizontal { ScanPattern::TH } else { ScanPattern::TV }
        } else if horizontal {
            ScanPattern::HT
        } else {
            ScanPattern::VT
        };
        blocks.push(BlockSpec {
            mixer: MixerKind::Hydra,
            stage1,
            stage2,
        });
    }
    Ok(MixerSchedule { blocks, stage })
}

/// Uniform schedule: every block uses the same mixer; SSM-style mixers
/// alternate H/V across blocks (mixer-comparison harness).
pub fn uniform_schedule(mixer: MixerKind, n_blocks: usize, stage: u8) -> MixerSchedule {
    let blocks = (0..n_blocks)
        .map(|b| {
            let horizontal = b % 2 == 0;
            let stage1 = if horizontal { ScanPattern::H } else { ScanPattern::V };
            let stage2 = if horizontal { ScanPattern::HT } else { ScanPattern::VT };
            BlockSpec {
                mixer,
                stage1,
                stage2,
            }
        })
        .collect();
    MixerSchedule { blocks, stage }
}
