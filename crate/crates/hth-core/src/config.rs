//! Model/run configuration and its key=value text format.
//!
//! The config file is plain `key = value` lines; `#` starts a comment.
//! Unknown keys are rejected so typos fail loudly. See the repository README
//! for the full key table.

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffusion::DiffusionConfig;
use crate::error::{HthError, Result};
use crate::scan::{MixerKind, SET_SIZE};

/// Architecture and run settings for the denoiser.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    /// Heads of the quasiseparable mixer.
    pub mixer_heads: usize,
    /// Heads of self- and cross-attention.
    pub attn_heads: usize,
    /// SSM state size N.
    pub state_dim: usize,
    pub conv_window: usize,
    /// Scan chunk length Q.
    pub chunk: usize,
    /// Spatial patch edge; H and W must divide by it.
    pub patch: usize,
    /// Latent grid (T, H, W) in tokens before patching.
    pub grid: (usize, usize, usize),
    pub latent_channels: usize,
    pub text_embed_dim: usize,
    /// Toy prompt vocabulary size (class labels).
    pub n_classes: usize,
    /// 1 = spatial-only scans, 2 = video schedule with temporal-major scans.
    pub stage: u8,
    /// Hybrid stack or a uniform stack of one mixer kind.
    pub mixer_set: MixerSet,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerSet {
    Hybrid,
    Uniform(MixerKind),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub log_every: usize,
    /// Number of fixed synthetic samples in the training set.
    pub dataset_size: usize,
    /// Held-out samples for evaluation.
    pub holdout_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            steps: 2000,
            batch_size: 8,
            log_every: 100,
            dataset_size: 8,
            holdout_size: 8,
        }
    }
}

impl Default for ModelConfig {
    /// Desk-scale defaults: 11 blocks, width 64, 2 mixer heads of dim 64,
    /// state 16, conv window 7, 2×2 patches on an 8×8 single-frame grid.
    fn default() -> Self {
        ModelConfig {
            n_blocks: SET_SIZE,
            model_dim: 64,
            mixer_heads: 2,
            attn_heads: 2,
            state_dim: 16,
            conv_window: 7,
            chunk: 64,
            patch: 2,
            grid: (1, 8, 8),
            latent_channels: 12,
            text_embed_dim: 32,
            n_classes: 8,
            stage: 1,
            mixer_set: MixerSet::Hybrid,
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Full-scale reference configuration (33 blocks, width 3072, state 256,
    /// 32 attention heads). Used for shape and schedule checks only; never
    /// instantiate its weights.
    pub fn paper_scale() -> Self {
        ModelConfig {
            n_blocks: 33,
            model_dim: 3072,
            mixer_heads: 96,
            attn_heads: 32,
            state_dim: 256,
            conv_window: 7,
            chunk: 64,
            patch: 2,
            grid: (1, 32, 32),
            latent_channels: 12,
            text_embed_dim: 4096,
            n_classes: 8,
            stage: 1,
            mixer_set: MixerSet::Hybrid,
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % 2 != 0 {
            return Err(HthError::Config("model_dim must be even and non-zero".into()));
        }
        if self.mixer_set == MixerSet::Hybrid && self.n_blocks % SET_SIZE != 0 {
            return Err(HthError::Config(format!(
                "hybrid n_blocks must be a multiple of {SET_SIZE}, got {}",
                self.n_blocks
            )));
        }
        if self.n_blocks == 0 {
            return Err(HthError::Config("n_blocks must be positive".into()));
        }
        let (t, h, w) = self.grid;
        if t == 0 || h == 0 || w == 0 {
            return Err(HthError::Config(format!("grid {:?} has a zero dim", self.grid)));
        }
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(HthError::Config(format!(
                "grid H/W {h}x{w} must divide by patch {}",
                self.patch
            )));
        }
        if self.model_dim % self.attn_heads != 0 {
            return Err(HthError::Config("attn_heads must divide model_dim".into()));
        }
        if (2 * self.model_dim) % self.mixer_heads != 0 {
            return Err(HthError::Config("mixer_heads must divide 2*model_dim".into()));
        }
        if self.stage != 1 && self.stage != 2 {
            return Err(HthError::Config("stage must be 1 or 2".into()));
        }
        self.diffusion.validate()
    }

    /// Token grid after patching: (T, H/p, W/p).
    pub fn token_grid(&self) -> (usize, usize, usize) {
        (self.grid.0, self.grid.1 / self.patch, self.grid.2 / self.patch)
    }

    pub fn tokens_per_sample(&self) -> usize {
        let (t, h, w) = self.token_grid();
        t * h * w
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_cfg(&text)
    }

    pub fn from_str_cfg(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HthError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let parse_usize = |v: &str, k: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| HthError::Config(format!("{k}: invalid integer {v:?}")))
        };
        let parse_f64 = |v: &str, k: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| HthError::Config(format!("{k}: invalid number {v:?}")))
        };
        for (k, v) in &map {
            match k.as_str() {
                "n_blocks" => cfg.n_blocks = parse_usize(v, k)?,
                "model_dim" => cfg.model_dim = parse_usize(v, k)?,
                "mixer_heads" => cfg.mixer_heads = parse_usize(v, k)?,
                "attn_heads" => cfg.attn_heads = parse_usize(v, k)?,
                "state_dim" => cfg.state_dim = parse_usize(v, k)?,
                "conv_window" => cfg.conv_window = parse_usize(v, k)?,
                "chunk" => cfg.chunk = parse_usize(v, k)?,
                "patch" => cfg.patch = parse_usize(v, k)?,
                "grid_t" => cfg.grid.0 = parse_usize(v, k)?,
                "grid_h" => cfg.grid.1 = parse_usize(v, k)?,
                "grid_w" => cfg.grid.2 = parse_usize(v, k)?,
                "latent_channels" => cfg.latent_channels = parse_usize(v, k)?,
                "text_embed_dim" => cfg.text_embed_dim = parse_usize(v, k)?,
                "n_classes" => cfg.n_classes = parse_usize(v, k)?,
                "stage" => cfg.stage = parse_usize(v, k)? as u8,
                "mixer" => {
                    cfg.mixer_set = if v == "hybrid" {
                        MixerSet::Hybrid
                    } else {
                        MixerSet::Uniform(v.parse()?)
                    }
                }
                "sample_steps" => cfg.diffusion.sample_steps = parse_usize(v, k)?,
                "guidance" => cfg.diffusion.guidance = parse_f64(v, k)?,
                "cond_drop_prob" => cfg.diffusion.cond_drop_prob = parse_f64(v, k)?,
                "lr" => cfg.train.lr = parse_f64(v, k)?,
                "train_steps" => cfg.train.steps = parse_usize(v, k)?,
                "batch_size" => cfg.train.batch_size = parse_usize(v, k)?,
                "log_every" => cfg.train.log_every = parse_usize(v, k)?,
                "dataset_size" => cfg.train.dataset_size = parse_usize(v, k)?,
                "holdout_size" => cfg.train.holdout_size = parse_usize(v, k)?,
                other => {
                    return Err(HthError::Config(format!("unknown config key {other:?}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize back to the key=value format (round-trips through
    /// [`ModelConfig::from_str_cfg`]).
    pub fn to_cfg_string(&self) -> String {
        let mixer = match self.mixer_set {
            MixerSet::Hybrid => "hybrid".to_string(),
            MixerSet::Uniform(k) => k.as_str().to_string(),
        };
        format!(
            "n_blocks = {}\nmodel_dim = {}\nmixer_heads = {}\nattn_heads = {}\n\
             state_dim = {}\nconv_window = {}\nchunk = {}\npatch = {}\n\
             grid_t = {}\ngrid_h = {}\ngrid_w = {}\nlatent_channels = {}\n\
             text_embed_dim = {}\nn_classes = {}\nstage = {}\nmixer = {}\n\
             sample_steps = {}\nguidance = {}\ncond_drop_prob = {}\n\
             lr = {}\ntrain_steps = {}\nbatch_size = {}\nlog_every = {}\n\
             dataset_size = {}\nholdout_size = {}\n",
            self.n_blocks,
            self.model_dim,
            self.mixer_heads,
            self.attn_heads,
            self.state_dim,
            self.conv_window,
            self.chunk,
            self.patch,
            self.grid.0,
            self.grid.1,
            self.grid.2,
            self.latent_channels,
            self.text_embed_dim,
            self.n_classes,
            self.stage,
            mixer,
            self.diffusion.sample_steps,
            self.diffusion.guidance,
            self.diffusion.cond_drop_prob,
            self.train.lr,
            self.train.steps,
            self.train.batch_size,
            self.train.log_every,
            self.train.dataset_size,
            self.train.holdout_size,
        )
    }

    /// A deliberately tiny configuration for fast tests.
    pub fn tiny() -> Self {
        let mut cfg = ModelConfig::default();
        cfg.model_dim = 16;
        cfg.state_dim = 4;
        cfg.grid = (1, 4, 4);
        cfg.latent_channels = 3;
        cfg.text_embed_dim = 8;
        cfg.chunk = 16;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
    }

    #[test]
    fn paper_scale_shape_facts() {
        let cfg = ModelConfig::paper_scale();
        assert_eq!(cfg.n_blocks, 33);
        assert_eq!(cfg.model_dim, 3072);
        assert_eq!(cfg.state_dim, 256);
        assert_eq!(cfg.attn_heads, 32);
        // mixer head dim stays 64 under 2x expansion
        assert_eq!(2 * cfg.model_dim / cfg.mixer_heads, 64);
    }

    #[test]
    fn round_trip_through_text() {
        let mut cfg = ModelConfig::default();
        cfg.stage = 2;
        cfg.grid = (4, 8, 8);
        cfg.diffusion.guidance = 2.5;
        let text = cfg.to_cfg_string();
        let back = ModelConfig::from_str_cfg(&text).unwrap();
        assert_eq!(back.stage, 2);
        assert_eq!(back.grid, (4, 8, 8));
        assert_eq!(back.diffusion.guidance, 2.5);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ModelConfig::from_str_cfg("nonsense = 3").is_err());
        assert!(ModelConfig::from_str_cfg("model_dim = abc").is_err());
        assert!(ModelConfig::from_str_cfg("model_dim = 63").is_err());
        // hybrid stacks must be multiples of the set size
        assert!(ModelConfig::from_str_cfg("n_blocks = 12").is_err());
        // uniform stacks may be any size
        let cfg = ModelConfig::from_str_cfg("n_blocks = 4\nmixer = attention").unwrap();
        assert_eq!(cfg.mixer_set, MixerSet::Uniform(MixerKind::SelfAttention));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = ModelConfig::from_str_cfg("# hello\n\nstage = 2 # video\n").unwrap();
        assert_eq!(cfg.stage, 2);
    }
}
