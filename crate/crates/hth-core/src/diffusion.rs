//! Rectified-flow style training objective and deterministic sampling.
//!
//! Time runs data → noise over t in [0, 1]: `x_t = (1-t) x0 + t eps`, the
//! regression target is the constant velocity `eps - x0`, and sampling
//! integrates the learned field backwards from t = 1 with fixed Euler steps.
//! Classifier-free guidance extrapolates between the unconditional and
//! conditional predictions.

use crate::error::{HthError, Result};
use crate::model::{Cond, Model};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone)]
pub struct DiffusionConfig {
    pub sample_steps: usize,
    pub guidance: f64,
    /// Probability of replacing the condition with the learned null
    /// embedding during training.
    pub cond_drop_prob: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            sample_steps: 32,
            guidance: 1.0,
            cond_drop_prob: 0.1,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_steps < 1 {
            return Err(HthError::invalid("sample_steps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(HthError::invalid("cond_drop_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Linear interpolation noising: `x_t = (1-t) x0 + t eps`.
pub fn noise_latents(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(HthError::invalid(format!("t = {t} outside [0, 1]")));
    }
    let a = tensor::scale(x0, 1.0 - t)?;
    let b = tensor::scale(eps, t)?;
    tensor::add(&a, &b)
}

/// Velocity regression target `eps - x0`.
pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    tensor::sub(eps, x0)
}

/// Guided velocity: `v_u + s (v_c - v_u)`. The endpoints s = 0 and s = 1
/// return the respective prediction exactly, with no arithmetic applied.
pub fn guided_velocity(v_uncond: &Tensor, v_cond: &Tensor, s: f64) -> Result<Tensor> {
    if s == 0.0 {
        return Ok(v_uncond.clone());
    }
    if s == 1.0 {
        return Ok(v_cond.clone());
    }
    let diff = tensor::sub(v_cond, v_uncond)?;
    tensor::add(v_uncond, &tensor::scale(&diff, s)?)
}

/// Deterministic Euler integration from t = 1 to t = 0 against an arbitrary
/// velocity field `field(x, t, conditioned)`. With guidance scale 1 only the
/// conditional branch is evaluated; with 0 only the unconditional branch.
pub fn sample_with<F>(init: &Tensor, steps: usize, guidance: f64, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64, bool) -> Result<Tensor>,
{
    if steps < 1 {
        return Err(HthError::invalid("steps must be >= 1"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = init.clone();
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = if guidance == 1.0 {
            field(&x, t, true)?
        } else if guidance == 0.0 {
            field(&x, t, false)?
        } else {
            let v_c = field(&x, t, true)?;
            let v_u = field(&x, t, false)?;
            guided_velocity(&v_u, &v_c, guidance)?
        };
        x = tensor::sub(&x, &tensor::scale(&v, dt)?)?;
    }
    Ok(x)
}

/// Sample latents from a trained model starting at `init` (a unit-Gaussian
/// draw shaped like the latent grid).
pub fn sample(
    model: &Model,
    init: &Tensor,
    cond: Cond,
    steps: usize,
    guidance: f64,
) -> Result<Tensor> {
    sample_with(init, steps, guidance, |x, t, conditioned| {
        let c = if conditioned { cond } else { Cond::Null };
        model.denoise(x, t, c)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_rel_diff, randn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x0 = randn(&[2, 3], &mut rng);
        let eps = randn(&[2, 3], &mut rng);
        assert_eq!(noise_latents(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(noise_latents(&x0, &eps, 1.0).unwrap(), eps);
        assert!(noise_latents(&x0, &eps, 1.5).is_err());
    }

    #[test]
    fn noise_midpoint() {
        let x0 = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let eps = Tensor::zeros(&[1, 1]);
        let xt = noise_latents(&x0, &eps, 0.5).unwrap();
        assert_eq!(xt.data(), &[1.0]);
    }

    #[test]
    fn guidance_endpoints_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let vu = randn(&[2, 2], &mut rng);
        let vc = randn(&[2, 2], &mut rng);
        assert_eq!(guided_velocity(&vu, &vc, 0.0).unwrap(), vu);
        assert_eq!(guided_velocity(&vu, &vc, 1.0).unwrap(), vc);
    }

    #[test]
    fn guidance_is_affine_in_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let vu = randn(&[3, 4], &mut rng);
        let vc = randn(&[3, 4], &mut rng);
        let v0 = guided_velocity(&vu, &vc, 0.0).unwrap();
        let v1 = guided_velocity(&vu, &vc, 1.0).unwrap();
        let v2 = guided_velocity(&vu, &vc, 2.0).unwrap();
        let lhs = v2;
        let rhs = tensor::sub(&tensor::scale(&v1, 2.0).unwrap(), &v0).unwrap();
        assert!(max_rel_diff(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn constant_field_recovers_data_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let x0 = randn(&[4, 3], &mut rng);
        let eps = randn(&[4, 3], &mut rng);
        let v = velocity_target(&x0, &eps).unwrap();
        for steps in [1usize, 2, 7, 32] {
            let out = sample_with(&eps, steps, 1.0, |_, _, _| Ok(v.clone())).unwrap();
            assert!(
                max_rel_diff(&out, &x0) < 1e-12,
                "steps {steps}: {}",
                max_rel_diff(&out, &x0)
            );
        }
    }

    #[test]
    fn config_validation() {
        let mut c = DiffusionConfig::default();
        assert!(c.validate().is_ok());
        c.sample_steps = 0;
        assert!(c.validate().is_err());
        c.sample_steps = 8;
        c.cond_drop_prob = 1.2;
        assert!(c.validate().is_err());
    }
}
