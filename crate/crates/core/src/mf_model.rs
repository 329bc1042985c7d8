//! Matrix-factorisation model: `R = P q + ξ` with fixed user factors `P`,
//! a Gaussian belief over the item vector `q`, and i.i.d. rating noise.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{robust_cholesky, GaussianBelief, IndexSet};

#[derive(Debug, Clone)]
pub struct MfInstance {
    user_factors: DMatrix<f64>,
    item_belief: GaussianBelief,
    noise_var: f64,
}

impl MfInstance {
    pub fn new(user_factors: DMatrix<f64>, item_belief: GaussianBelief, noise_var: f64) -> Result<Self> {
        let k = item_belief.dim();
        if k == 0 {
            return Err(Error::InvalidConfig("latent dimension must be at least 1".into()));
        }
        if user_factors.ncols() != k {
            return Err(Error::DimensionMismatch {
                what: "user factors",
                expected: k,
                found: user_factors.ncols(),
            });
        }
        if noise_var.is_nan() || noise_var <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        Ok(Self {
            user_factors,
            item_belief,
            noise_var,
        })
    }

    pub fn user_factors(&self) -> &DMatrix<f64> {
        &self.user_factors
    }

    pub fn item_belief(&self) -> &GaussianBelief {
        &self.item_belief
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn n_users(&self) -> usize {
        self.user_factors.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.item_belief.dim()
    }

    /// Row `u` of `P` as a column vector.
    pub fn user(&self, u: usize) -> DVector<f64> {
        self.user_factors.row(u).transpose()
    }

    fn rows(&self, users: &IndexSet) -> Result<DMatrix<f64>> {
        users.check_within(self.n_users())?;
        Ok(self.user_factors.select_rows(users.as_slice()))
    }

    /// Item-vector covariance after observing `observed`, in information
    /// form: with `Ψ = L Lᵀ`, `Ψ' = L (I + Lᵀ P_uᵀ P_u L / σ₀²)⁻¹ Lᵀ`.
    pub fn posterior_item_cov(&self, observed: &IndexSet) -> Result<DMatrix<f64>> {
        let pu = self.rows(observed)?;
        let l = robust_cholesky(self.item_belief.cov())?.l();
        let k = self.latent_dim();
        let whitened = &pu * &l;
        let info = DMatrix::identity(k, k) + whitened.transpose() * &whitened / self.noise_var;
        let inv = robust_cholesky(&info)?.inverse();
        let mut cov = &l * inv * l.transpose();
        for i in 0..k {
            for j in (i + 1)..k {
                let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = avg;
                cov[(j, i)] = avg;
            }
        }
        Ok(cov)
    }

    /// `Ψ − Ψ'`: the reduction in item-vector covariance from observing
    /// `observed`. `p_vᵀ (Ψ − Ψ') p_w` is the selection-conditional covariance
    /// between users `v` and `w`.
    pub fn latent_selection_gain(&self, observed: &IndexSet) -> Result<DMatrix<f64>> {
        Ok(self.item_belief.cov() - self.posterior_item_cov(observed)?)
    }
}

/// Joint rating belief `N(Pν, PΨPᵀ + σ₀² I)` over all users.
pub fn induced_rating_belief(instance: &MfInstance) -> GaussianBelief {
    let p = &instance.user_factors;
    let mean = p * instance.item_belief.mean();
    let mut cov = p * instance.item_belief.cov() * p.transpose();
    let n = cov.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
        cov[(i, i)] += instance.noise_var;
    }
    GaussianBelief::from_parts_unchecked(mean, cov, (0..n).collect())
}

/// Bayes update of the item-vector belief after observing `ratings` from
/// `observed` users.
pub fn bayes_update(instance: &MfInstance, observed: &IndexSet, ratings: &DVector<f64>) -> Result<MfInstance> {
    if observed.len() != ratings.len() {
        return Err(Error::DimensionMismatch {
            what: "ratings",
            expected: observed.len(),
            found: ratings.len(),
        });
    }
    if observed.is_empty() {
        return Ok(instance.clone());
    }
    let pu = instance.rows(observed)?;
    let nu = instance.item_belief.mean();
    let cov = instance.posterior_item_cov(observed)?;
    let innovation = ratings - &pu * nu;
    let mean = nu + &cov * pu.transpose() * innovation / instance.noise_var;
    let labels = instance.item_belief.labels().to_vec();
    Ok(MfInstance {
        user_factors: instance.user_factors.clone(),
        item_belief: GaussianBelief::from_parts_unchecked(mean, cov, labels),
        noise_var: instance.noise_var,
    })
}

/// Predictive rating belief over the users not in `observed` (ascending),
/// routed through the item-vector posterior.
pub fn posterior_predictive(
    instance: &MfInstance,
    observed: &IndexSet,
    ratings: &DVector<f64>,
) -> Result<GaussianBelief> {
    let updated = bayes_update(instance, observed, ratings)?;
    let rest = observed.complement(instance.n_users());
    let sub = MfInstance {
        user_factors: instance.user_factors.select_rows(rest.as_slice()),
        item_belief: updated.item_belief,
        noise_var: instance.noise_var,
    };
    let b = induced_rating_belief(&sub);
    Ok(GaussianBelief::from_parts_unchecked(
        b.mean().clone(),
        b.cov().clone(),
        rest.into_vec(),
    ))
}
