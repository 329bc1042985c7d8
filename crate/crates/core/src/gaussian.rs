//! Multivariate-Gaussian belief algebra.
//!
//! A [`GaussianBelief`] holds a mean vector and a PSD covariance over a set of
//! labelled coordinates (users' ratings of one item, or the dimensions of a
//! latent item vector). The operations here are the building blocks used by
//! every model: conditioning on observed coordinates, the correlation
//! decomposition `cov = diag(std) · corr · diag(std)`, and the covariance of
//! the conditional mean induced by merely *choosing* which coordinates to
//! observe.
//!
//! All inverses go through a Cholesky factorisation. Empirical covariances are
//! often rank deficient, so [`robust_cholesky`] retries with a growing diagonal
//! jitter before giving up.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check on construction.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Initial jitter, as a fraction of the mean diagonal entry.
pub const JITTER_SCALE: f64 = 1e-8;
/// Number of jittered retries after the plain factorisation fails.
pub const JITTER_RETRIES: usize = 3;

/// Numerical knobs for the belief algebra. `Default` uses the module constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub symmetry: f64,
    pub jitter_scale: f64,
    pub jitter_retries: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            symmetry: SYMMETRY_TOL,
            jitter_scale: JITTER_SCALE,
            jitter_retries: JITTER_RETRIES,
        }
    }
}

/// Ordered list of distinct coordinate positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    /// Builds an index set, rejecting duplicates.
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let mut seen = indices.clone();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidIndexSet(format!("duplicate index {}", w[0])));
        }
        Ok(Self(indices))
    }

    /// `0..d`.
    pub fn full(d: usize) -> Self {
        Self((0..d).collect())
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.contains(&index)
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    /// Fails unless every index is below `d`.
    pub fn check_within(&self, d: usize) -> Result<()> {
        match self.0.iter().find(|&&i| i >= d) {
            Some(&i) => Err(Error::InvalidIndexSet(format!(
                "index {i} out of range for dimension {d}"
            ))),
            None => Ok(()),
        }
    }

    /// Positions in `0..d` not in this set, ascending.
    pub fn complement(&self, d: usize) -> IndexSet {
        let mut mask = vec![false; d];
        for i in self.iter() {
            if i < d {
                mask[i] = true;
            }
        }
        IndexSet((0..d).filter(|&i| !mask[i]).collect())
    }

    /// Same indices, ascending.
    pub fn sorted(&self) -> IndexSet {
        let mut v = self.0.clone();
        v.sort_unstable();
        IndexSet(v)
    }

    /// True when the two sets share no index.
    pub fn is_disjoint(&self, other: &IndexSet) -> bool {
        self.iter().all(|i| !other.contains(i))
    }
}

impl std::fmt::Display for IndexSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", parts.join(" "))
    }
}

/// Gaussian belief `N(mean, cov)` over labelled coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    labels: Vec<usize>,
}

impl GaussianBelief {
    /// Validated constructor with labels `0..d`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let labels = (0..mean.len()).collect();
        Self::with_labels(mean, cov, labels)
    }

    pub fn with_labels(mean: DVector<f64>, cov: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        Self::with_tolerances(mean, cov, labels, &Tolerances::default())
    }

    /// Checks dimensions, label uniqueness, symmetry and PSD-ness (Cholesky with jitter).
    pub fn with_tolerances(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        labels: Vec<usize>,
        tol: &Tolerances,
    ) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                what: "covariance",
                expected: d,
                found: cov.nrows().max(cov.ncols()),
            });
        }
        if labels.len() != d {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: d,
                found: labels.len(),
            });
        }
        IndexSet::new(labels.clone())?;
        let asym = max_relative_asymmetry(&cov);
        if asym > tol.symmetry {
            return Err(Error::NotSymmetric(asym));
        }
        if d > 0 && robust_cholesky_with(&cov, tol).is_err() {
            return Err(Error::NotPsd);
        }
        Ok(Self { mean, cov, labels })
    }

    /// Skips validation; used for blocks of a belief that is already valid.
    pub(crate) fn from_parts_unchecked(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        labels: Vec<usize>,
    ) -> Self {
        Self { mean, cov, labels }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }

    /// Marginal over the given coordinates (in the given order).
    pub fn marginal(&self, coords: &IndexSet) -> Result<GaussianBelief> {
        coords.check_within(self.dim())?;
        let idx = coords.as_slice();
        Ok(Self {
            mean: self.mean.select_rows(idx),
            cov: self.cov.select_rows(idx).select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

fn max_relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.iter().fold(0.0_f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE);
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs() / scale);
        }
    }
    worst
}

/// Cholesky factorisation with the default jitter schedule.
pub fn robust_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    robust_cholesky_with(m, &Tolerances::default())
}

/// Plain Cholesky; on failure adds `eps = jitter_scale · trace/d` to the
/// diagonal and retries, multiplying `eps` by ten each time.
pub fn robust_cholesky_with(m: &DMatrix<f64>, tol: &Tolerances) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let d = m.nrows().max(1) as f64;
    let mean_diag = m.trace() / d;
    // an all-zero block still needs a strictly positive nudge
    let mut eps = tol.jitter_scale * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    for _ in 0..tol.jitter_retries {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += eps;
        }
        if let Some(c) = Cholesky::new(jittered) {
            return Ok(c);
        }
        eps *= 10.0;
    }
    Err(Error::SingularBlock)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Conditioning map in whitened coordinates.
///
/// With `L Lᵀ = Φ_uu` and `r_u = θ_u + L z`, the conditional mean of the
/// remaining coordinates is `base + gain · z`, and `z ~ N(0, I)` under the
/// prior. `gain · gainᵀ` is the selection-conditional covariance.
#[derive(Debug, Clone)]
pub struct WhitenedUpdate {
    /// Observed positions.
    pub observed: IndexSet,
    /// Unobserved positions, ascending.
    pub rest: IndexSet,
    /// Prior mean of the unobserved coordinates.
    pub base: DVector<f64>,
    /// `Φ_{\u,u} L⁻ᵀ`, shape `|rest| × |observed|`.
    pub gain: DMatrix<f64>,
    /// Lower Cholesky factor of `Φ_uu` (possibly jittered).
    pub chol_lower: DMatrix<f64>,
    /// Prior mean of the observed coordinates.
    pub observed_mean: DVector<f64>,
}

impl WhitenedUpdate {
    pub fn new(belief: &GaussianBelief, observed: &IndexSet) -> Result<Self> {
        let d = belief.dim();
        observed.check_within(d)?;
        let rest = observed.complement(d);
        let obs = observed.as_slice();
        let phi_uu = belief.cov.select_rows(obs).select_columns(obs);
        let phi_ru = belief.cov.select_rows(rest.as_slice()).select_columns(obs);
        let chol = robust_cholesky(&phi_uu)?;
        let l = chol.l();
        // gainᵀ = L⁻¹ Φ_{u,\u}
        let gain_t = l
            .solve_lower_triangular(&phi_ru.transpose())
            .ok_or(Error::SingularBlock)?;
        Ok(Self {
            observed: observed.clone(),
            base: belief.mean.select_rows(rest.as_slice()),
            rest,
            gain: gain_t.transpose(),
            chol_lower: l,
            observed_mean: belief.mean.select_rows(obs),
        })
    }

    /// Whitened innovation `z = L⁻¹ (r_u − θ_u)`.
    pub fn whiten(&self, values: &DVector<f64>) -> Result<DVector<f64>> {
        if values.len() != self.observed.len() {
            return Err(Error::DimensionMismatch {
                what: "observed values",
                expected: self.observed.len(),
                found: values.len(),
            });
        }
        self.chol_lower
            .solve_lower_triangular(&(values - &self.observed_mean))
            .ok_or(Error::SingularBlock)
    }

    /// Conditional mean of the unobserved coordinates for whitened innovation `z`.
    pub fn mean_for(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.base + &self.gain * z
    }

    /// `Φ_{\u,u} Φ_uu⁻¹ Φ_{u,\u}`.
    pub fn selection_cov(&self) -> DMatrix<f64> {
        let mut m = &self.gain * self.gain.transpose();
        symmetrize(&mut m);
        m
    }
}

/// Conditions `belief` on `observed = values`; the result covers the
/// complementary coordinates in ascending position order.
pub fn condition(
    belief: &GaussianBelief,
    observed: &IndexSet,
    values: &DVector<f64>,
) -> Result<GaussianBelief> {
    if observed.len() != values.len() {
        return Err(Error::DimensionMismatch {
            what: "observed values",
            expected: observed.len(),
            found: values.len(),
        });
    }
    observed.check_within(belief.dim())?;
    if observed.is_empty() {
        return Ok(belief.clone());
    }
    let update = WhitenedUpdate::new(belief, observed)?;
    let z = update.whiten(values)?;
    let mean = update.mean_for(&z);
    let rest = update.rest.as_slice();
    let mut cov = belief.cov.select_rows(rest).select_columns(rest) - update.selection_cov();
    symmetrize(&mut cov);
    let labels = rest.iter().map(|&i| belief.labels[i]).collect();
    Ok(GaussianBelief::from_parts_unchecked(mean, cov, labels))
}

/// Covariance of the unselected coordinates' conditional mean, before the
/// selected coordinates are observed: `Φ_{\u,u} Φ_uu⁻¹ Φ_{u,\u}`.
pub fn selection_conditional_cov(
    belief: &GaussianBelief,
    selected: &IndexSet,
) -> Result<DMatrix<f64>> {
    if selected.is_empty() || selected.len() >= belief.dim() {
        return Err(Error::InvalidIndexSet(format!(
            "selection of size {} must be a nonempty strict subset of {} coordinates",
            selected.len(),
            belief.dim()
        )));
    }
    Ok(WhitenedUpdate::new(belief, selected)?.selection_cov())
}

/// `cov = diag(std) · corr · diag(std)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationDecomposition {
    pub std: DVector<f64>,
    pub corr: DMatrix<f64>,
}

impl CorrelationDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.std);
        &d * &self.corr * &d
    }
}

pub fn correlation_form(belief: &GaussianBelief) -> Result<CorrelationDecomposition> {
    let var = belief.variances();
    if let Some((index, &variance)) = var.iter().enumerate().find(|(_, &v)| v.is_nan() || v <= 0.0) {
        return Err(Error::ZeroVariance { index, variance });
    }
    let std = var.map(f64::sqrt);
    let d = belief.dim();
    let mut corr = DMatrix::from_fn(d, d, |i, j| belief.cov[(i, j)] / (std[i] * std[j]));
    for i in 0..d {
        corr[(i, i)] = 1.0;
    }
    Ok(CorrelationDecomposition { std, corr })
}
