//! One two-stage recommendation episode against known ground truth.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{condition, correlation_form, IndexSet};
use crate::mf_model::bayes_update;
use crate::policies::{select_stage1, Instance, PolicyConfig, PolicyKind};
use crate::ranking::top_n;

/// Ratings at or above this count as a hit.
pub const HIT_THRESHOLD: f64 = 4.0;

/// Budgets for the two stages; `N = m + n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationPlan {
    pub m: usize,
    pub n: usize,
}

impl AllocationPlan {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n }
    }

    pub fn total(&self) -> usize {
        self.m + self.n
    }
}

/// How the belief is updated between stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    /// Exact Gaussian conditioning (or the Bayes update of the item vector).
    FullConditioning,
    /// `θ_v + Σ_α ρ_{vα} (r_α − θ_α)`.
    UserBasedCf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub policy: PolicyKind,
    pub m: usize,
    pub n: usize,
    pub lambda: f64,
    pub seed: u64,
    pub stage1_reward: f64,
    pub stage2_reward: f64,
    pub total_reward: f64,
    pub hit_count: usize,
    pub stage1: IndexSet,
    pub stage2: IndexSet,
}

/// Per-instance state reused across many trials.
pub struct TrialContext<'a> {
    instance: &'a Instance,
    rule: UpdateRule,
    means: Vec<f64>,
    corr: Option<DMatrix<f64>>,
}

impl<'a> TrialContext<'a> {
    pub fn new(instance: &'a Instance, rule: UpdateRule) -> Result<Self> {
        let corr = match rule {
            UpdateRule::UserBasedCf => Some(correlation_form(&instance.rating_belief())?.corr),
            UpdateRule::FullConditioning => None,
        };
        Ok(Self {
            instance,
            rule,
            means: instance.prior_means(),
            corr,
        })
    }

    pub fn instance(&self) -> &Instance {
        self.instance
    }

    /// Posterior mean for every user coordinate after observing `ratings`
    /// from `stage1`. Entries for `stage1` keep their prior value.
    pub fn posterior_means(&self, stage1: &IndexSet, ratings: &DVector<f64>) -> Result<Vec<f64>> {
        let mut out = self.means.clone();
        match (self.rule, self.instance) {
            (UpdateRule::UserBasedCf, _) => {
                let corr = self.corr.as_ref().expect("correlations computed for CF rule");
                let dev: Vec<(usize, f64)> = stage1
                    .iter()
                    .zip(ratings.iter())
                    .map(|(a, &r)| (a, r - self.means[a]))
                    .collect();
                for v in self.instance.pool().iter().filter(|&v| !stage1.contains(v)) {
                    out[v] = self.means[v] + dev.iter().map(|&(a, d)| corr[(v, a)] * d).sum::<f64>();
                }
            }
            (UpdateRule::FullConditioning, Instance::Mf { model, .. }) => {
                let updated = bayes_update(model, stage1, ratings)?;
                let post = model.user_factors() * updated.item_belief().mean();
                out.copy_from_slice(post.as_slice());
            }
            (UpdateRule::FullConditioning, Instance::Cu(cu)) => {
                let post = condition(cu.prior(), stage1, ratings)?;
                for (k, &label_pos) in stage1.complement(cu.prior().dim()).as_slice().iter().enumerate() {
                    out[label_pos] = post.mean()[k];
                }
            }
        }
        Ok(out)
    }

    /// Plays out stage 2 after a fixed stage-1 choice. `ground_truth[v]` is
    /// user `v`'s revealed rating; it is read only for selected users.
    pub fn complete(
        &self,
        stage1: &IndexSet,
        n: usize,
        ground_truth: &[f64],
        cfg: &PolicyConfig,
    ) -> Result<TrialResult> {
        let pool = self.instance.pool();
        if ground_truth.len() != self.instance.n_users() {
            return Err(Error::DimensionMismatch {
                what: "ground truth",
                expected: self.instance.n_users(),
                found: ground_truth.len(),
            });
        }
        if let Some(a) = stage1.iter().find(|&a| !pool.contains(a)) {
            return Err(Error::IndexOutOfPool(a));
        }
        if stage1.len() + n > pool.len() {
            return Err(Error::BudgetExceedsPool {
                requested: stage1.len() + n,
                available: pool.len(),
            });
        }
        let observed = DVector::from_iterator(stage1.len(), stage1.iter().map(|a| ground_truth[a]));
        let post = self.posterior_means(stage1, &observed)?;
        let remaining: Vec<usize> = pool.iter().filter(|&v| !stage1.contains(v)).collect();
        let stage2 = IndexSet::new(top_n(&post, &remaining, n))?;
        if !stage1.is_disjoint(&stage2) {
            let dup = stage2.iter().find(|&v| stage1.contains(v)).unwrap_or_default();
            return Err(Error::RepeatedUser(dup));
        }
        let stage1_reward: f64 = observed.iter().sum();
        let stage2_reward: f64 = stage2.iter().map(|v| ground_truth[v]).sum();
        let hit_count = stage1
            .iter()
            .chain(stage2.iter())
            .filter(|&v| ground_truth[v] >= HIT_THRESHOLD)
            .count();
        Ok(TrialResult {
            policy: cfg.policy,
            m: stage1.len(),
            n,
            lambda: cfg.lambda,
            seed: cfg.seed,
            stage1_reward,
            stage2_reward,
            total_reward: stage1_reward + stage2_reward,
            hit_count,
            stage1: stage1.clone(),
            stage2,
        })
    }
}

/// Full episode: stage-1 selection, feedback, belief update, greedy stage 2.
pub fn run_trial(
    instance: &Instance,
    plan: AllocationPlan,
    cfg: &PolicyConfig,
    ground_truth: &[f64],
    rule: UpdateRule,
) -> Result<TrialResult> {
    if plan.m == 0 {
        return Err(Error::InvalidConfig("stage-1 budget m must be at least 1".into()));
    }
    let stage1 = select_stage1(instance, plan.m, plan.n, cfg)?.stage1;
    TrialContext::new(instance, rule)?.complete(&stage1, plan.n, ground_truth, cfg)
}
