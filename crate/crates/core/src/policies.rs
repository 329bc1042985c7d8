//! Stage-1 selection policies and the shared greedy stage-2 step.
//!
//! The GEE family scores a stage-1 set `u` as its immediate expected reward
//! plus an optimistic stage-2 return: for every still-available user `v`,
//! `θ_v + λ · bonus_v(u)`, where the bonus is the standard deviation of `v`'s
//! conditional mean induced by observing `u`. Because each `v` is scored on its
//! own, the inner maximisation over stage-2 sets is just the sum of the `n`
//! largest per-user scores.
//!
//! Variants differ only in how the bonus is computed:
//!
//! | variant     | bonus for `v` given `u`                                          |
//! |-------------|------------------------------------------------------------------|
//! | `cu_gee`    | `sqrt([Φ_vu Φ_uu⁻¹ Φ_uv]_vv)`                                    |
//! | `cu_gee_i`  | `sqrt(Σ_α ρ²_{u_α v})` (λ plays the role of λ')                  |
//! | `mf_gee`    | `sqrt([P_v Ψ P_uᵀ (P_u Ψ P_uᵀ + σ₀² I)⁻¹ P_u Ψ P_vᵀ]_vv)`         |
//! | `mf_gee_i`  | `sqrt(Σ_α (p_vᵀ D p_α)² / (p_αᵀ D p_α + σ₀²))`, `D = diag(Ψ)`    |
//! | `mf_gee_ii` | as `mf_gee_i` with `D = ψ² I`, `ψ² = tr(Ψ)/K`                    |

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cu_model::CuInstance;
use crate::error::{Error, Result};
use crate::exact::{binomial, combinations, stage2_value};
use crate::gaussian::{correlation_form, robust_cholesky, GaussianBelief, IndexSet, WhitenedUpdate};
use crate::mf_model::{induced_rating_belief, MfInstance};
use crate::ranking::{top_n, top_n_sum};

/// Default number of sampled stage-1 subsets.
pub const DEFAULT_SAMPLES: usize = 2000;

/// Trade-off grid swept by the experiments.
/// Relative tolerance under which two GEE scores count as equal.
pub const TIE_TOL: f64 = 1e-12;

pub const LAMBDA_GRID: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Greedy,
    Al,
    Ucb,
    CuGee,
    CuGeeI,
    MfGee,
    MfGeeI,
    MfGeeII,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 8] = [
        PolicyKind::Greedy,
        PolicyKind::Al,
        PolicyKind::Ucb,
        PolicyKind::CuGee,
        PolicyKind::CuGeeI,
        PolicyKind::MfGee,
        PolicyKind::MfGeeI,
        PolicyKind::MfGeeII,
    ];

    pub const GEE: [PolicyKind; 5] = [
        PolicyKind::CuGee,
        PolicyKind::CuGeeI,
        PolicyKind::MfGee,
        PolicyKind::MfGeeI,
        PolicyKind::MfGeeII,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Greedy => "greedy",
            PolicyKind::Al => "al",
            PolicyKind::Ucb => "ucb",
            PolicyKind::CuGee => "cu_gee",
            PolicyKind::CuGeeI => "cu_gee_i",
            PolicyKind::MfGee => "mf_gee",
            PolicyKind::MfGeeI => "mf_gee_i",
            PolicyKind::MfGeeII => "mf_gee_ii",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy '{s}'")))
    }

    pub fn is_gee(self) -> bool {
        Self::GEE.contains(&self)
    }

    /// Whether λ changes the policy's behaviour.
    pub fn uses_lambda(self) -> bool {
        self == PolicyKind::Ucb || self.is_gee()
    }

    fn needs_mf(self) -> bool {
        matches!(self, PolicyKind::MfGee | PolicyKind::MfGeeI | PolicyKind::MfGeeII)
    }

    /// Stable numeric id used when deriving per-policy seeds.
    pub fn stable_id(self) -> u64 {
        match self {
            PolicyKind::Greedy => 1,
            PolicyKind::Al => 2,
            PolicyKind::Ucb => 3,
            PolicyKind::CuGee => 4,
            PolicyKind::CuGeeI => 5,
            PolicyKind::MfGee => 6,
            PolicyKind::MfGeeI => 7,
            PolicyKind::MfGeeII => 8,
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    pub lambda: f64,
    pub samples_t: usize,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(policy: PolicyKind, lambda: f64) -> Self {
        Self {
            policy,
            lambda,
            samples_t: DEFAULT_SAMPLES,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.samples_t == 0 {
            return Err(Error::InvalidConfig("samples_t must be at least 1".into()));
        }
        Ok(())
    }
}

/// A stage-1 choice and the policy objective it achieved.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage1: IndexSet,
    pub score: f64,
}

/// The belief a policy acts on: a correlated-user prior, or a factor model
/// with its pool of available users.
#[derive(Debug, Clone)]
pub enum Instance {
    Cu(CuInstance),
    Mf { model: MfInstance, pool: IndexSet },
}

impl Instance {
    pub fn mf(model: MfInstance, pool: IndexSet) -> Result<Self> {
        pool.check_within(model.n_users())?;
        Ok(Instance::Mf { model, pool })
    }

    pub fn pool(&self) -> &IndexSet {
        match self {
            Instance::Cu(c) => c.pool(),
            Instance::Mf { pool, .. } => pool,
        }
    }

    pub fn n_users(&self) -> usize {
        match self {
            Instance::Cu(c) => c.prior().dim(),
            Instance::Mf { model, .. } => model.n_users(),
        }
    }

    /// Joint prior over every user's rating.
    pub fn rating_belief(&self) -> GaussianBelief {
        match self {
            Instance::Cu(c) => c.prior().clone(),
            Instance::Mf { model, .. } => induced_rating_belief(model),
        }
    }

    pub fn prior_means(&self) -> Vec<f64> {
        match self {
            Instance::Cu(c) => c.prior().mean().iter().copied().collect(),
            Instance::Mf { model, .. } => {
                (model.user_factors() * model.item_belief().mean()).iter().copied().collect()
            }
        }
    }

    pub fn prior_variances(&self) -> Vec<f64> {
        match self {
            Instance::Cu(c) => c.prior().variances().iter().copied().collect(),
            Instance::Mf { model, .. } => {
                let psi = model.item_belief().cov();
                (0..model.n_users())
                    .map(|u| {
                        let p = model.user(u);
                        (p.transpose() * psi * &p)[0] + model.noise_var()
                    })
                    .collect()
            }
        }
    }
}

fn check_stage_budget(pool: usize, m: usize, n: usize) -> Result<()> {
    if m + n > pool {
        return Err(Error::BudgetExceedsPool {
            requested: m + n,
            available: pool,
        });
    }
    Ok(())
}

/// `sqrt` of the diagonal of `Φ_{v,u} Φ_uu⁻¹ Φ_{u,v}` for each candidate `v`.
pub fn gee_bonus_cu(prior: &GaussianBelief, u: &IndexSet, v_candidates: &IndexSet) -> Result<Vec<f64>> {
    if u.is_empty() {
        return Err(Error::InvalidIndexSet("stage-1 set must be nonempty".into()));
    }
    if !u.is_disjoint(v_candidates) {
        return Err(Error::InvalidIndexSet("candidates overlap the stage-1 set".into()));
    }
    v_candidates.check_within(prior.dim())?;
    let upd = WhitenedUpdate::new(prior, u)?;
    let mut row_of = vec![usize::MAX; prior.dim()];
    for (row, v) in upd.rest.iter().enumerate() {
        row_of[v] = row;
    }
    Ok(v_candidates
        .iter()
        .map(|v| upd.gain.row(row_of[v]).norm())
        .collect())
}

enum BonusModel {
    Cu(GaussianBelief),
    CuIndependent(DMatrix<f64>),
    /// Rows are `Lᵀ p_v` with `L Lᵀ = Ψ`.
    Mf { whitened: DMatrix<f64>, noise_var: f64 },
    MfDiagonal { factors: DMatrix<f64>, psi2: DVector<f64>, noise_var: f64 },
}

/// Precomputed GEE scoring state for one instance and variant.
pub struct GeeScorer {
    pool: Vec<usize>,
    in_pool: Vec<bool>,
    means: Vec<f64>,
    model: BonusModel,
}

impl GeeScorer {
    pub fn new(instance: &Instance, policy: PolicyKind) -> Result<Self> {
        if !policy.is_gee() {
            return Err(Error::InvalidConfig(format!("{policy} is not a GEE variant")));
        }
        let model = match (policy, instance) {
            (PolicyKind::CuGee, _) => BonusModel::Cu(instance.rating_belief()),
            (PolicyKind::CuGeeI, _) => {
                BonusModel::CuIndependent(correlation_form(&instance.rating_belief())?.corr)
            }
            (PolicyKind::MfGee, Instance::Mf { model, .. }) => {
                let l = robust_cholesky(model.item_belief().cov())?.l();
                BonusModel::Mf {
                    whitened: model.user_factors() * l,
                    noise_var: model.noise_var(),
                }
            }
            (PolicyKind::MfGeeI | PolicyKind::MfGeeII, Instance::Mf { model, .. }) => {
                let diag = model.item_belief().cov().diagonal();
                let psi2 = if policy == PolicyKind::MfGeeII {
                    DVector::from_element(diag.len(), diag.mean())
                } else {
                    diag
                };
                BonusModel::MfDiagonal {
                    factors: model.user_factors().clone(),
                    psi2,
                    noise_var: model.noise_var(),
                }
            }
            (p, Instance::Cu(_)) if p.needs_mf() => {
                return Err(Error::VariantMismatch {
                    policy: p.name(),
                    needs: "matrix-factorisation",
                })
            }
            _ => unreachable!("all GEE variants handled"),
        };
        let pool = instance.pool().as_slice().to_vec();
        let mut in_pool = vec![false; instance.n_users()];
        for &v in &pool {
            in_pool[v] = true;
        }
        Ok(Self {
            pool,
            in_pool,
            means: instance.prior_means(),
            model,
        })
    }

    /// Bonus for every pool user not in `u`, in pool order, with those users.
    pub fn bonuses(&self, u: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut is_u = vec![false; self.in_pool.len()];
        for &a in u {
            if !self.in_pool.get(a).copied().unwrap_or(false) {
                return Err(Error::IndexOutOfPool(a));
            }
            is_u[a] = true;
        }
        let candidates: Vec<usize> = self.pool.iter().copied().filter(|&v| !is_u[v]).collect();
        let bonus = match &self.model {
            BonusModel::Cu(belief) => gee_bonus_cu(belief, &IndexSet::new(u.to_vec())?, &IndexSet::new(candidates.clone())?)?,
            BonusModel::CuIndependent(corr) => candidates
                .iter()
                .map(|&v| u.iter().map(|&a| corr[(a, v)].powi(2)).sum::<f64>().sqrt())
                .collect(),
            BonusModel::Mf { whitened, noise_var } => {
                let k = whitened.ncols();
                let wu = whitened.select_rows(u);
                let info = DMatrix::identity(k, k) + wu.transpose() * &wu / *noise_var;
                let chol = robust_cholesky(&info)?;
                // I − B⁻¹
                let reduction = DMatrix::identity(k, k) - chol.inverse();
                candidates
                    .iter()
                    .map(|&v| {
                        let w = whitened.row(v);
                        let q = (w * &reduction * w.transpose())[0];
                        q.max(0.0).sqrt()
                    })
                    .collect()
            }
            BonusModel::MfDiagonal {
                factors,
                psi2,
                noise_var,
            } => {
                let scaled_u: Vec<(DVector<f64>, f64)> = u
                    .iter()
                    .map(|&a| {
                        let p = factors.row(a).transpose();
                        let dp = p.component_mul(psi2);
                        let denom = p.dot(&dp) + noise_var;
                        (dp, denom)
                    })
                    .collect();
                candidates
                    .iter()
                    .map(|&v| {
                        let pv = factors.row(v);
                        scaled_u
                            .iter()
                            .map(|(dp, denom)| (pv * dp)[0].powi(2) / denom)
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect()
            }
        };
        Ok((candidates, bonus))
    }

    /// GEE objective of `u` for each λ in `lambdas`.
    pub fn scores(&self, u: &[usize], n: usize, lambdas: &[f64]) -> Result<Vec<f64>> {
        check_stage_budget(self.pool.len(), u.len(), n)?;
        let (candidates, bonus) = self.bonuses(u)?;
        let exploit: f64 = u.iter().map(|&a| self.means[a]).sum();
        let mut buf = vec![0.0; candidates.len()];
        Ok(lambdas
            .iter()
            .map(|&lambda| {
                for (slot, (&v, &b)) in buf.iter_mut().zip(candidates.iter().zip(&bonus)) {
                    *slot = self.means[v] + lambda * b;
                }
                exploit + top_n_sum(&mut buf, n)
            })
            .collect())
    }
}

/// GEE objective of stage-1 set `u` under `cfg.policy`.
pub fn gee_score(instance: &Instance, u: &IndexSet, n: usize, cfg: &PolicyConfig) -> Result<f64> {
    cfg.validate()?;
    let scorer = GeeScorer::new(instance, cfg.policy)?;
    Ok(scorer.scores(u.as_slice(), n, &[cfg.lambda])?[0])
}

/// Runs the sampling search once and returns the best stage-1 set for each λ.
///
/// When the pool admits at most `samples_t` subsets of size `m`, every subset
/// is scored instead. Otherwise `samples_t` uniform `m`-subsets are drawn
/// (independently, so repeats are possible). Scores within a relative
/// `TIE_TOL` tie; ties go to the larger `Σ θ_u`, then to the first set seen.
pub fn gee_select_multi(
    instance: &Instance,
    m: usize,
    n: usize,
    policy: PolicyKind,
    lambdas: &[f64],
    samples_t: usize,
    seed: u64,
) -> Result<Vec<StagePlan>> {
    if samples_t == 0 {
        return Err(Error::InvalidConfig("samples_t must be at least 1".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| l.is_nan() || **l < 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {l}")));
    }
    let pool = instance.pool().as_slice();
    check_stage_budget(pool.len(), m, n)?;
    if m == 0 {
        return Err(Error::InvalidConfig("stage-1 budget m must be at least 1".into()));
    }
    let scorer = GeeScorer::new(instance, policy)?;
    // (plan, exploit term) per λ
    let mut best: Vec<Option<(StagePlan, f64)>> = vec![None; lambdas.len()];
    let mut consider = |subset: Vec<usize>| -> Result<()> {
        let scores = scorer.scores(&subset, n, lambdas)?;
        let exploit: f64 = subset.iter().map(|&a| scorer.means[a]).sum();
        for (slot, score) in best.iter_mut().zip(scores) {
            let better = match slot {
                None => true,
                Some((b, b_exploit)) => {
                    let tol = TIE_TOL * score.abs().max(b.score.abs()).max(1.0);
                    score > b.score + tol
                        || ((score - b.score).abs() <= tol && exploit > *b_exploit + TIE_TOL * exploit.abs().max(1.0))
                }
            };
            if better {
                *slot = Some((
                    StagePlan {
                        stage1: IndexSet::new(subset.clone())?,
                        score,
                    },
                    exploit,
                ));
            }
        }
        Ok(())
    };
    if binomial(pool.len(), m) <= samples_t as u128 {
        for subset in combinations(pool, m) {
            consider(subset)?;
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples_t {
            let mut subset: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), m)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            subset.sort_unstable();
            consider(subset)?;
        }
    }
    Ok(best
        .into_iter()
        .map(|b| b.expect("at least one subset scored").0)
        .collect())
}

pub fn gee_select(instance: &Instance, m: usize, n: usize, cfg: &PolicyConfig) -> Result<StagePlan> {
    cfg.validate()?;
    let mut plans = gee_select_multi(instance, m, n, cfg.policy, &[cfg.lambda], cfg.samples_t, cfg.seed)?;
    Ok(plans.remove(0))
}

fn top_m_plan(instance: &Instance, m: usize, key: &[f64]) -> Result<StagePlan> {
    let pool = instance.pool().as_slice();
    check_stage_budget(pool.len(), m, 0)?;
    let chosen = top_n(key, pool, m);
    let score = chosen.iter().map(|&i| key[i]).sum();
    Ok(StagePlan {
        stage1: IndexSet::new(chosen)?,
        score,
    })
}

/// Top-`m` prior means.
pub fn greedy_select(instance: &Instance, m: usize) -> Result<StagePlan> {
    top_m_plan(instance, m, &instance.prior_means())
}

/// Top-`m` prior variances.
pub fn al_select(instance: &Instance, m: usize) -> Result<StagePlan> {
    top_m_plan(instance, m, &instance.prior_variances())
}

/// Top-`m` of `mean + λ · std`.
pub fn ucb_select(instance: &Instance, m: usize, lambda: f64) -> Result<StagePlan> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    let key: Vec<f64> = instance
        .prior_means()
        .iter()
        .zip(instance.prior_variances())
        .map(|(mu, var)| mu + lambda * var.max(0.0).sqrt())
        .collect();
    top_m_plan(instance, m, &key)
}

/// Stage-1 selection for any policy.
pub fn select_stage1(instance: &Instance, m: usize, n: usize, cfg: &PolicyConfig) -> Result<StagePlan> {
    cfg.validate()?;
    check_stage_budget(instance.pool().len(), m, n)?;
    match cfg.policy {
        PolicyKind::Greedy => greedy_select(instance, m),
        PolicyKind::Al => al_select(instance, m),
        PolicyKind::Ucb => ucb_select(instance, m, cfg.lambda),
        _ => gee_select(instance, m, n, cfg),
    }
}

/// Greedy stage-2 choice; `pool` holds positions in `posterior`.
pub fn stage2_select(posterior: &GaussianBelief, pool: &IndexSet, n: usize) -> Result<IndexSet> {
    Ok(stage2_value(posterior, pool, n)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn toy() -> Instance {
        Instance::Cu(CuInstance::full(
            GaussianBelief::new(
                dvector![3.2, 2.5, 3.5],
                dmatrix![1.6, 0.25, 1.6; 0.25, 3.2, 0.20; 1.6, 0.20, 3.5],
            )
            .unwrap(),
        ))
    }

    fn set(v: &[usize]) -> IndexSet {
        IndexSet::new(v.to_vec()).unwrap()
    }

    #[test]
    fn toy_bonuses_by_hand() {
        let prior = toy().rating_belief();
        let b = gee_bonus_cu(&prior, &set(&[0]), &set(&[1, 2])).unwrap();
        assert!((b[0] - 0.25 / 1.6_f64.sqrt()).abs() < 1e-12);
        assert!((b[1] - 1.6 / 1.6_f64.sqrt()).abs() < 1e-12);
        assert!(gee_bonus_cu(&prior, &set(&[0]), &set(&[0, 1])).is_err());
    }

    #[test]
    fn diagonal_prior_has_zero_bonus() {
        let prior = GaussianBelief::new(dvector![1.0, 2.0, 3.0], DMatrix::from_diagonal(&dvector![1.0, 2.0, 3.0]))
            .unwrap();
        let b = gee_bonus_cu(&prior, &set(&[1]), &set(&[0, 2])).unwrap();
        assert_eq!(b, vec![0.0, 0.0]);
    }

    #[test]
    fn toy_cu_gee_scores() {
        let cfg = PolicyConfig::new(PolicyKind::CuGee, 1.0);
        let expected = [7.965, 6.112, 7.555];
        for (u, e) in expected.iter().enumerate() {
            let s = gee_score(&toy(), &set(&[u]), 1, &cfg).unwrap();
            assert!((s - e).abs() < 1e-3, "u={u}: {s}");
        }
        let plan = gee_select(&toy(), 1, 1, &PolicyConfig { samples_t: 3, ..cfg }).unwrap();
        assert_eq!(plan.stage1, set(&[0]));
    }

    #[test]
    fn unit_variance_single_selection_bonus_is_abs_correlation() {
        let prior = GaussianBelief::new(
            dvector![0.0, 0.0, 0.0],
            dmatrix![1.0, -0.6, 0.3; -0.6, 1.0, 0.1; 0.3, 0.1, 1.0],
        )
        .unwrap();
        let b = gee_bonus_cu(&prior, &set(&[0]), &set(&[1, 2])).unwrap();
        assert!((b[0] - 0.6).abs() < 1e-12);
        assert!((b[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn baselines_on_toy() {
        assert_eq!(greedy_select(&toy(), 1).unwrap().stage1, set(&[2]));
        assert_eq!(al_select(&toy(), 1).unwrap().stage1, set(&[2]));
        assert_eq!(ucb_select(&toy(), 2, 0.0).unwrap().stage1, greedy_select(&toy(), 2).unwrap().stage1);
        assert!(matches!(greedy_select(&toy(), 4), Err(Error::BudgetExceedsPool { .. })));
    }

    #[test]
    fn mf_variants_need_mf_instance() {
        let cfg = PolicyConfig::new(PolicyKind::MfGee, 1.0);
        assert!(matches!(
            gee_score(&toy(), &set(&[0]), 1, &cfg),
            Err(Error::VariantMismatch { .. })
        ));
    }

    #[test]
    fn parse_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(PolicyKind::parse(p.name()).unwrap(), p);
        }
        assert!(PolicyKind::parse("thompson").is_err());
    }

    #[test]
    fn invalid_config() {
        let mut cfg = PolicyConfig::new(PolicyKind::CuGee, -1.0);
        assert!(gee_select(&toy(), 1, 1, &cfg).is_err());
        cfg.lambda = 1.0;
        cfg.samples_t = 0;
        assert!(gee_select(&toy(), 1, 1, &cfg).is_err());
    }
}
