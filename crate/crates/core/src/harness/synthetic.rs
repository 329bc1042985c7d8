//! Synthetic matrix-factorisation data with a known generating prior.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::GaussianBelief;
use crate::mf_model::MfInstance;
use crate::seed::derive_seed;

/// Smallest noise variance handed to policies, so noise-free data still
/// yields a well-posed model.
pub const NOISE_VAR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub latent_dim: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_repeats: usize,
    pub noise_std: f64,
    /// Variance of each item-prior mean coordinate.
    pub prior_mean_var: f64,
    /// Multiplier on the half-normal per-dimension item-prior std.
    pub item_std_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            latent_dim: 5,
            n_users: 100,
            n_items: 50,
            n_repeats: 30,
            noise_std: 0.5,
            prior_mean_var: 0.1,
            item_std_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.n_users == 0 || self.n_items == 0 || self.n_repeats == 0 {
            return Err(Error::InvalidConfig(
                "latent_dim, n_users, n_items and n_repeats must be positive".into(),
            ));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("prior_mean_var", self.prior_mean_var),
            ("item_std_scale", self.item_std_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticRepeat {
    /// The generating prior with the generating user factors.
    pub instance: MfInstance,
    /// `K × n_items` item vectors drawn from the prior.
    pub item_vectors: DMatrix<f64>,
    /// `n_users × n_items` noisy ground-truth ratings.
    pub ratings: DMatrix<f64>,
}

impl SyntheticRepeat {
    pub fn item_ratings(&self, item: usize) -> Vec<f64> {
        self.ratings.column(item).iter().copied().collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// One repeat per `cfg.n_repeats`, each from its own derived stream.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SyntheticRepeat>> {
    cfg.validate()?;
    (0..cfg.n_repeats).map(|r| generate_repeat(cfg, r)).collect()
}

pub fn generate_repeat(cfg: &SyntheticConfig, repeat: usize) -> Result<SyntheticRepeat> {
    cfg.validate()?;
    let k = cfg.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5757, repeat as u64]));
    let mean_std = cfg.prior_mean_var.sqrt();
    let nu = DVector::from_fn(k, |_, _| mean_std * normal(&mut rng));
    let psi = DVector::from_fn(k, |_, _| cfg.item_std_scale * normal(&mut rng).abs());
    let q = DMatrix::from_fn(k, cfg.n_items, |i, _| nu[i] + psi[i] * normal(&mut rng));
    let p = DMatrix::from_fn(cfg.n_users, k, |_, _| normal(&mut rng));
    let noise = DMatrix::from_fn(cfg.n_users, cfg.n_items, |_, _| cfg.noise_std * normal(&mut rng));
    let ratings = &p * &q + noise;
    let cov = DMatrix::from_diagonal(&psi.map(|s| s * s));
    let belief = GaussianBelief::new(nu, cov)?;
    let noise_var = (cfg.noise_std * cfg.noise_std).max(NOISE_VAR_FLOOR);
    Ok(SyntheticRepeat {
        instance: MfInstance::new(p, belief, noise_var)?,
        item_vectors: q,
        ratings,
    })
}
