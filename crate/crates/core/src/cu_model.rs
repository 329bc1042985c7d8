//! Correlated-user model: one joint Gaussian over every user's rating of the
//! target item.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::{condition, correlation_form, GaussianBelief, IndexSet};

/// Prior over all users' ratings plus the users still available.
#[derive(Debug, Clone)]
pub struct CuInstance {
    prior: GaussianBelief,
    pool: IndexSet,
}

impl CuInstance {
    pub fn new(prior: GaussianBelief, pool: IndexSet) -> Result<Self> {
        pool.check_within(prior.dim())?;
        Ok(Self { prior, pool })
    }

    /// Every coordinate of the prior is available.
    pub fn full(prior: GaussianBelief) -> Self {
        let pool = IndexSet::full(prior.dim());
        Self { prior, pool }
    }

    pub fn prior(&self) -> &GaussianBelief {
        &self.prior
    }

    pub fn pool(&self) -> &IndexSet {
        &self.pool
    }

    /// Fails with `IndexOutOfPool` unless `selection ⊆ pool`.
    pub fn check_in_pool(&self, selection: &IndexSet) -> Result<()> {
        match selection.iter().find(|&i| !self.pool.contains(i)) {
            Some(i) => Err(Error::IndexOutOfPool(i)),
            None => Ok(()),
        }
    }

    /// Same prior with `used` removed from the pool. Removing a user that is
    /// not available is an attempt to recommend twice.
    pub fn without(&self, used: &IndexSet) -> Result<Self> {
        if let Some(i) = used.iter().find(|&i| !self.pool.contains(i)) {
            return Err(Error::RepeatedUser(i));
        }
        let pool = IndexSet::new(self.pool.iter().filter(|&i| !used.contains(i)).collect())?;
        Ok(Self {
            prior: self.prior.clone(),
            pool,
        })
    }
}

/// The three-user worked example: `θ = (3.2, 2.5, 3.5)` with users 1 and 3
/// strongly correlated.
pub fn toy_instance() -> CuInstance {
    CuInstance::full(
        GaussianBelief::new(
            dvector![3.2, 2.5, 3.5],
            dmatrix![1.6, 0.25, 1.6; 0.25, 3.2, 0.20; 1.6, 0.20, 3.5],
        )
        .expect("toy covariance is positive definite"),
    )
}

/// Random `d`-user instance: means uniform on `[2, 4]`, covariance
/// `A Aᵀ / d + 0.1 I` with standard-normal `A`.
pub fn random_instance(d: usize, seed: u64) -> CuInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = DVector::from_fn(d, |_, _| rng.random_range(2.0..4.0));
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut cov = &a * a.transpose() / d.max(1) as f64;
    for i in 0..d {
        for j in (i + 1)..d {
            cov[(j, i)] = cov[(i, j)];
        }
        cov[(i, i)] += 0.1;
    }
    CuInstance::full(GaussianBelief::new(mean, cov).expect("random covariance is positive definite"))
}

/// `1ᵀθ_selection`.
pub fn expected_reward(instance: &CuInstance, selection: &IndexSet) -> Result<f64> {
    instance.check_in_pool(selection)?;
    Ok(selection.iter().map(|i| instance.prior.mean()[i]).sum())
}

/// Posterior belief computed through the correlation decomposition:
/// `θ_\u + diag(φ_\u) C_{\u,u} C_uu⁻¹ diag(φ_u)⁻¹ (r_u − θ_u)`.
///
/// The covariance is the usual Schur complement. The mean is algebraically
/// identical to [`condition`], only the route differs.
pub fn update_correlation_form(
    instance: &CuInstance,
    observed: &IndexSet,
    ratings: &DVector<f64>,
) -> Result<GaussianBelief> {
    let prior = &instance.prior;
    if observed.len() != ratings.len() {
        return Err(Error::DimensionMismatch {
            what: "ratings",
            expected: observed.len(),
            found: ratings.len(),
        });
    }
    observed.check_within(prior.dim())?;
    let posterior = condition(prior, observed, ratings)?;
    if observed.is_empty() {
        return Ok(posterior);
    }
    let dec = correlation_form(prior)?;
    let rest = observed.complement(prior.dim());
    let (u, r) = (observed.as_slice(), rest.as_slice());
    let c_uu = dec.corr.select_rows(u).select_columns(u);
    let c_ru = dec.corr.select_rows(r).select_columns(u);
    let scaled: DVector<f64> = DVector::from_iterator(
        u.len(),
        u.iter()
            .zip(ratings.iter())
            .map(|(&i, &x)| (x - prior.mean()[i]) / dec.std[i]),
    );
    let chol = crate::gaussian::robust_cholesky(&c_uu)?;
    let weights = c_ru * chol.solve(&scaled);
    let mean = DVector::from_iterator(
        r.len(),
        r.iter()
            .enumerate()
            .map(|(k, &v)| prior.mean()[v] + dec.std[v] * weights[k]),
    );
    Ok(GaussianBelief::from_parts_unchecked(
        mean,
        posterior.cov().clone(),
        posterior.labels().to_vec(),
    ))
}

/// User-based collaborative filtering update: `θ_\u + C_{\u,u} (r_u − θ_u)`.
///
/// Returns the updated mean for every coordinate not in `observed`, in
/// ascending position order.
pub fn update_user_based_cf(
    mean: &DVector<f64>,
    corr: &DMatrix<f64>,
    observed: &IndexSet,
    ratings: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = mean.len();
    if corr.nrows() != d || corr.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "correlation matrix",
            expected: d,
            found: corr.nrows(),
        });
    }
    if observed.len() != ratings.len() {
        return Err(Error::DimensionMismatch {
            what: "ratings",
            expected: observed.len(),
            found: ratings.len(),
        });
    }
    observed.check_within(d)?;
    let rest = observed.complement(d);
    let deviation: Vec<f64> = observed
        .iter()
        .zip(ratings.iter())
        .map(|(i, &x)| x - mean[i])
        .collect();
    Ok(DVector::from_iterator(
        rest.len(),
        rest.iter().map(|v| {
            mean[v]
                + observed
                    .iter()
                    .zip(&deviation)
                    .map(|(u, dev)| corr[(v, u)] * dev)
                    .sum::<f64>()
        }),
    ))
}
