//! Wall-time scaling measurement of the token mixers, reused by the `bench`
//! subcommand and the acceptance suite. Timing runs pinned to a single
//! thread; warmup runs are excluded from the statistics.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttnParams;
use crate::error::{HthError, Result};
use crate::hydra::{MixerParams, SsmCombine};
use crate::kernels::{self, F32Attn, F32Mixer};
use crate::parallel;
use crate::scan::MixerKind;
use crate::tensor::randn;

/// One timing row of the scaling sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mixer: MixerKind,
    pub tokens: usize,
    pub ms_mean: f64,
    pub ms_std: f64,
    pub reps: usize,
}

impl BenchRecord {
    pub fn csv_header() -> &'static str {
        "mixer,tokens,ms_mean,ms_std,reps"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.mixer.as_str(),
            self.tokens,
            self.ms_mean,
            self.ms_std,
            self.reps
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<BenchRecord> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 5 {
            return Err(HthError::invalid(format!("bad CSV row {line:?}")));
        }
        Ok(BenchRecord {
            mixer: parts[0].parse()?,
            tokens: parts[1]
                .parse()
                .map_err(|_| HthError::invalid("bad tokens field"))?,
            ms_mean: parts[2]
                .parse()
                .map_err(|_| HthError::invalid("bad ms_mean field"))?,
            ms_std: parts[3]
                .parse()
                .map_err(|_| HthError::invalid("bad ms_std field"))?,
            reps: parts[4]
                .parse()
                .map_err(|_| HthError::invalid("bad reps field"))?,
        })
    }
}

/// Benchmark model width: small and fixed so the token count is the only
/// variable in the sweep.
pub const BENCH_MODEL_DIM: usize = 16;
pub const BENCH_STATE_DIM: usize = 16;
pub const BENCH_HEADS: usize = 2;

/// Minimum repetitions a record may carry.
pub const MIN_REPS: usize = 5;

/// Default sweep ranges: sub-quadratic mixers out to 2^16 tokens, the
/// quadratic baseline out to 2^14.
pub fn default_tokens(kind: MixerKind) -> Vec<usize> {
    let max_pow = match kind {
        MixerKind::SelfAttention => 14,
        _ => 16,
    };
    (10..=max_pow).map(|p| 1usize << p).collect()
}

fn time_ms(f: &mut dyn FnMut()) -> f64 {
    let start = Instant::now();
    f();
    start.elapsed().as_secs_f64() * 1e3
}

/// Time one mixer at one token count; `reps` is clamped up to [`MIN_REPS`].
/// Runs inside a single-thread pool for timing stability.
pub fn bench_mixer(kind: MixerKind, tokens: usize, reps: usize, seed: u64) -> Result<BenchRecord> {
    let reps = reps.max(MIN_REPS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = BENCH_MODEL_DIM;
    let x: Vec<f32> = randn(&[tokens, d], &mut rng)
        .data()
        .iter()
        .map(|&v| v as f32)
        .collect();

    enum Kernel {
        Ssm(F32Mixer, SsmCombine),
        Attn(F32Attn),
    }
    let kernel = match kind {
        MixerKind::SelfAttention => {
            let mut p = AttnParams::init(&mut rng, d, BENCH_HEADS)?;
            p.wo = randn(&[d, d], &mut rng);
            Kernel::Attn(F32Attn::from(&p))
        }
        other => {
            let combine = match other {
                MixerKind::Hydra => SsmCombine::Quasiseparable,
                MixerKind::CausalSsm => SsmCombine::Causal,
                MixerKind::BidiAddSsm => SsmCombine::BidiAdd,
                MixerKind::SelfAttention => unreachable!(),
            };
            let mut p = MixerParams::init(&mut rng, d, BENCH_HEADS, BENCH_STATE_DIM, 7, 64)?;
            p.out_proj = randn(&[p.inner_dim(), p.model_dim], &mut rng);
            Kernel::Ssm(F32Mixer::from(&p), combine)
        }
    };

    let samples = parallel::run_with_threads(1, move || {
        let mut run: Box<dyn FnMut()> = match &kernel {
            Kernel::Ssm(p, combine) => {
                let (p, combine) = (p, *combine);
                Box::new(move || {
                    std::hint::black_box(kernels::mixer_forward(p, combine, &x, tokens));
                })
            }
            Kernel::Attn(p) => Box::new(move || {
                std::hint::black_box(kernels::attention_forward(p, &x, tokens));
            }),
        };
        // warmup, excluded from statistics
        run();
        (0..reps).map(|_| time_ms(&mut run)).collect::<Vec<f64>>()
    });

    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / reps as f64;
    Ok(BenchRecord {
        mixer: kind,
        tokens,
        ms_mean: mean,
        ms_std: var.sqrt(),
        reps,
    })
}

/// Sweep one mixer over the given token counts (ascending).
pub fn sweep(kind: MixerKind, tokens: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    if tokens.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HthError::invalid("token counts must be sorted ascending"));
    }
    tokens
        .iter()
        .map(|&t| bench_mixer(kind, t, reps, seed))
        .collect()
}

/// Least-squares slope of ln(time) against ln(tokens).
pub fn fit_loglog_slope(records: &[BenchRecord]) -> f64 {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.ms_mean > 0.0)
        .map(|r| ((r.tokens as f64).ln(), r.ms_mean.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Describe where the sub-quadratic mixer overtakes the quadratic baseline,
/// comparing at shared token counts.
pub fn crossover_report(hydra: &[BenchRecord], attn: &[BenchRecord]) -> String {
    let shared: Vec<(usize, f64, f64)> = hydra
        .iter()
        .filter_map(|h| {
            attn.iter()
                .find(|a| a.tokens == h.tokens)
                .map(|a| (h.tokens, h.ms_mean, a.ms_mean))
        })
        .collect();
    if shared.is_empty() {
        return "no shared token counts measured".to_string();
    }
    let first_win = shared.iter().find(|(_, h, a)| h < a);
    match first_win {
        Some((t, _, _)) if *t == shared[0].0 => format!(
            "hydra faster across the whole measured range (crossover at or below {} tokens)",
            t
        ),
        Some((t, _, _)) => format!("crossover at {} tokens: hydra faster from there on", t),
        None => "no crossover in the measured range: attention faster throughout".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trips_through_csv() {
        let r = BenchRecord {
            mixer: MixerKind::Hydra,
            tokens: 2048,
            ms_mean: 12.5,
            ms_std: 0.75,
            reps: 5,
        };
        let row = r.to_csv_row();
        let back = BenchRecord::parse_csv_row(&row).unwrap();
        assert_eq!(r, back);
        assert!(BenchRecord::parse_csv_row("not,a,row").is_err());
    }

    #[test]
    fn slope_of_synthetic_quadratic_is_two() {
        let records: Vec<BenchRecord> = [1024usize, 2048, 4096]
            .iter()
            .map(|&t| BenchRecord {
                mixer: MixerKind::SelfAttention,
                tokens: t,
                ms_mean: (t as f64 / 1024.0).powi(2),
                ms_std: 0.0,
                reps: 5,
            })
            .collect();
        assert!((fit_loglog_slope(&records) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn bench_records_respect_minimum_reps() {
        let r = bench_mixer(MixerKind::Hydra, 64, 1, 3).unwrap();
        assert_eq!(r.reps, MIN_REPS);
        assert!(r.ms_mean >= 0.0);
    }

    #[test]
    fn sweep_requires_sorted_counts() {
        assert!(sweep(MixerKind::Hydra, &[128, 64], 5, 0).is_err());
    }
}
