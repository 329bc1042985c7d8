//! Exact two-stage value iteration for small instances.
//!
//! Stage 2 is greedy once the belief is updated, so the value of a stage-1
//! choice `u` is `1ᵀθ_u + E_{r_u}[ sum of the n largest posterior means ]`.
//! The outer expectation is estimated by Monte Carlo with common random
//! numbers across candidates, by Gauss–Hermite quadrature when `m = 1`, or in
//! closed form for the three-user, one-plus-one case.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cu_model::CuInstance;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianBelief, IndexSet, WhitenedUpdate};
use crate::quadrature::GaussHermite;
use crate::ranking::{top_n, top_n_sum};

/// Largest number of stage-1 subsets `exact_policy` will enumerate.
pub const MAX_ENUMERATED_SUBSETS: u128 = 1_000_000;

/// Nodes in the `m = 1` quadrature rule.
pub const QUADRATURE_NODES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrationMode {
    MonteCarlo,
    /// 64-point Gauss–Hermite; only valid for a single stage-1 user.
    GaussHermite,
    /// Closed form; only valid for three users with `m = n = 1`.
    Analytic3User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactConfig {
    pub mc_samples: usize,
    pub seed: u64,
    pub integration_mode: IntegrationMode,
}

impl Default for ExactConfig {
    fn default() -> Self {
        Self {
            mc_samples: 100_000,
            seed: 0,
            integration_mode: IntegrationMode::MonteCarlo,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateValue {
    pub subset: IndexSet,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueReport {
    pub per_candidate: Vec<CandidateValue>,
    pub best_subset: IndexSet,
    pub best_value: f64,
}

impl ValueReport {
    fn from_candidates(per_candidate: Vec<CandidateValue>) -> Self {
        // first maximum wins, candidates arrive in lexicographic order
        let best = per_candidate
            .iter()
            .fold(None::<&CandidateValue>, |acc, c| match acc {
                Some(b) if b.value >= c.value => Some(b),
                _ => Some(c),
            })
            .expect("at least one candidate");
        Self {
            best_subset: best.subset.clone(),
            best_value: best.value,
            per_candidate,
        }
    }

    pub fn get(&self, subset: &IndexSet) -> Option<&CandidateValue> {
        self.per_candidate.iter().find(|c| &c.subset == subset)
    }
}

/// Greedy stage-2 value: the `n` largest posterior means over `pool`
/// (positions in `posterior`), and the subset achieving it.
pub fn stage2_value(posterior: &GaussianBelief, pool: &IndexSet, n: usize) -> Result<(f64, IndexSet)> {
    pool.check_within(posterior.dim())?;
    if n > pool.len() {
        return Err(Error::BudgetExceedsPool {
            requested: n,
            available: pool.len(),
        });
    }
    let means = posterior.mean().as_slice();
    let chosen = top_n(means, pool.as_slice(), n);
    let value = chosen.iter().map(|&i| means[i]).sum();
    Ok((value, IndexSet::new(chosen)?))
}

fn check_budget(instance: &CuInstance, m: usize, n: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidConfig("stage-1 budget m must be at least 1".into()));
    }
    let available = instance.pool().len();
    if m + n > available {
        return Err(Error::BudgetExceedsPool {
            requested: m + n,
            available,
        });
    }
    Ok(())
}

/// Precomputed pieces for evaluating one stage-1 choice.
struct Stage1Plan {
    exploit: f64,
    base: Vec<f64>,
    // row-major |candidates| × m
    gain: Vec<f64>,
    m: usize,
}

impl Stage1Plan {
    fn new(instance: &CuInstance, stage1: &IndexSet) -> Result<Self> {
        let prior = instance.prior();
        let upd = WhitenedUpdate::new(prior, stage1)?;
        let rest = upd.rest.as_slice();
        let mut base = Vec::new();
        let mut gain = Vec::new();
        for (row, &v) in rest.iter().enumerate() {
            if instance.pool().contains(v) {
                base.push(upd.base[row]);
                gain.extend(upd.gain.row(row).iter().copied());
            }
        }
        let exploit = stage1.iter().map(|i| prior.mean()[i]).sum();
        Ok(Self {
            exploit,
            base,
            gain,
            m: stage1.len(),
        })
    }

    fn stage2(&self, z: &[f64], n: usize, scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        scratch.extend(self.base.iter().enumerate().map(|(k, &b)| {
            let row = &self.gain[k * self.m..(k + 1) * self.m];
            b + row.iter().zip(z).map(|(g, x)| g * x).sum::<f64>()
        }));
        top_n_sum(scratch, n)
    }
}

/// Estimated two-stage value of choosing `stage1` first, with its standard
/// error. Deterministic given `cfg.seed`; every stage-1 choice sees the same
/// stream of standard normals.
pub fn two_stage_value(
    instance: &CuInstance,
    stage1: &IndexSet,
    n: usize,
    cfg: &ExactConfig,
) -> Result<(f64, f64)> {
    check_budget(instance, stage1.len(), n)?;
    instance.check_in_pool(stage1)?;
    match cfg.integration_mode {
        IntegrationMode::MonteCarlo => monte_carlo_value(instance, stage1, n, cfg),
        IntegrationMode::GaussHermite => quadrature_value(instance, stage1, n),
        IntegrationMode::Analytic3User => {
            if n != 1 {
                return Err(Error::InvalidConfig("closed form requires n = 1".into()));
            }
            let report = analytic_three_user(instance)?;
            let c = report
                .get(stage1)
                .ok_or_else(|| Error::InvalidConfig("closed form requires m = 1".into()))?;
            Ok((c.value, 0.0))
        }
    }
}

fn monte_carlo_value(instance: &CuInstance, stage1: &IndexSet, n: usize, cfg: &ExactConfig) -> Result<(f64, f64)> {
    if cfg.mc_samples == 0 {
        return Err(Error::InvalidConfig("mc_samples must be at least 1".into()));
    }
    let plan = Stage1Plan::new(instance, stage1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = vec![0.0; plan.m];
    let mut scratch = Vec::with_capacity(plan.base.len());
    // Welford
    let (mut mean, mut m2) = (0.0_f64, 0.0_f64);
    for s in 0..cfg.mc_samples {
        for x in z.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
        }
        let v = plan.stage2(&z, n, &mut scratch);
        let delta = v - mean;
        mean += delta / (s + 1) as f64;
        m2 += delta * (v - mean);
    }
    let samples = cfg.mc_samples as f64;
    let std_error = if cfg.mc_samples > 1 {
        (m2 / (samples - 1.0) / samples).sqrt()
    } else {
        0.0
    };
    Ok((plan.exploit + mean, std_error))
}

fn quadrature_value(instance: &CuInstance, stage1: &IndexSet, n: usize) -> Result<(f64, f64)> {
    if stage1.len() != 1 {
        return Err(Error::InvalidConfig(
            "Gauss-Hermite mode needs exactly one stage-1 user".into(),
        ));
    }
    let plan = Stage1Plan::new(instance, stage1)?;
    let rule = GaussHermite::new(QUADRATURE_NODES);
    let mut scratch = Vec::with_capacity(plan.base.len());
    let v = rule.expect(|z| plan.stage2(&[z], n, &mut scratch));
    Ok((plan.exploit + v, 0.0))
}

/// Number of `k`-subsets of `n` items, saturating.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// All `k`-subsets of `items`, lexicographic in position.
pub fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    if k > n {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        // rightmost position that can still advance
        let Some(i) = (0..k).rev().find(|&i| idx[i] < i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in (i + 1)..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Evaluates every stage-1 subset of size `m` and reports the best.
pub fn exact_policy(instance: &CuInstance, m: usize, n: usize, cfg: &ExactConfig) -> Result<ValueReport> {
    check_budget(instance, m, n)?;
    if cfg.integration_mode == IntegrationMode::Analytic3User {
        if m != 1 || n != 1 {
            return Err(Error::InvalidConfig("closed form requires m = n = 1".into()));
        }
        return analytic_three_user(instance);
    }
    let count = binomial(instance.pool().len(), m);
    if count > MAX_ENUMERATED_SUBSETS {
        return Err(Error::CombinatorialBlowup {
            subsets: count,
            limit: MAX_ENUMERATED_SUBSETS,
        });
    }
    let subsets = combinations(instance.pool().as_slice(), m);
    let per_candidate = subsets
        .into_par_iter()
        .map(|s| {
            let subset = IndexSet::new(s)?;
            let (value, std_error) = two_stage_value(instance, &subset, n, cfg)?;
            Ok(CandidateValue {
                subset,
                value,
                std_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValueReport::from_candidates(per_candidate))
}

/// One stage-1 choice in the three-user closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreeUserChoice {
    /// Stage-1 user (pool position).
    pub user: usize,
    /// Stage-2 pick when the standardised feedback is above the threshold.
    pub high: usize,
    /// Stage-2 pick below the threshold.
    pub low: usize,
    /// Switching point on the standardised scale `z = (r − θ_u)/√Φ_uu`.
    pub threshold_z: f64,
    /// Switching point on the rating scale.
    pub threshold_rating: f64,
    pub value: f64,
}

/// Closed-form values, thresholds and stage-2 switching rule for each of the
/// three possible stage-1 users.
pub fn three_user_choices(instance: &CuInstance) -> Result<[ThreeUserChoice; 3]> {
    let pool = instance.pool().as_slice();
    if pool.len() != 3 {
        return Err(Error::InvalidConfig(format!(
            "closed form needs exactly 3 users, pool has {}",
            pool.len()
        )));
    }
    let prior = instance.prior();
    let theta = prior.mean();
    let phi = prior.cov();
    let (a, b, c) = (pool[0], pool[1], pool[2]);
    let covs = [phi[(a, b)], phi[(a, c)], phi[(b, c)]];
    let scale = covs.iter().fold(0.0_f64, |s, x| s.max(x.abs())).max(f64::MIN_POSITIVE);
    let distinct = |x: f64, y: f64| (x - y).abs() > 1e-12 * scale;
    if !(distinct(covs[0], covs[1]) && distinct(covs[0], covs[2]) && distinct(covs[1], covs[2])) {
        return Err(Error::DegenerateCovariances);
    }
    let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
    let mut out = [ThreeUserChoice {
        user: 0,
        high: 0,
        low: 0,
        threshold_z: 0.0,
        threshold_rating: 0.0,
        value: 0.0,
    }; 3];
    for (slot, &u) in pool.iter().enumerate() {
        let var_u = phi[(u, u)];
        if var_u.is_nan() || var_u <= 0.0 {
            return Err(Error::ZeroVariance {
                index: u,
                variance: var_u,
            });
        }
        let sd_u = var_u.sqrt();
        let others: Vec<usize> = pool.iter().copied().filter(|&v| v != u).collect();
        let (high, low) = if phi[(others[0], u)] > phi[(others[1], u)] {
            (others[0], others[1])
        } else {
            (others[1], others[0])
        };
        let (cov_high, cov_low) = (phi[(high, u)], phi[(low, u)]);
        let d = (theta[low] - theta[high]) / (cov_high - cov_low) * sd_u;
        let value = theta[u]
            + 0.5 * (theta[low] + theta[high])
            + 0.5 * (theta[low] - theta[high]) * libm::erf(d / std::f64::consts::SQRT_2)
            - (cov_low - cov_high) / sd_u / sqrt_2pi * (-0.5 * d * d).exp();
        out[slot] = ThreeUserChoice {
            user: u,
            high,
            low,
            threshold_z: d,
            threshold_rating: theta[u] + d * sd_u,
            value,
        };
    }
    Ok(out)
}

/// Closed-form `ValueReport` for three users with `m = n = 1`.
pub fn analytic_three_user(instance: &CuInstance) -> Result<ValueReport> {
    let choices = three_user_choices(instance)?;
    let per_candidate = choices
        .iter()
        .map(|c| {
            Ok(CandidateValue {
                subset: IndexSet::new(vec![c.user])?,
                value: c.value,
                std_error: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValueReport::from_candidates(per_candidate))
}

/// Stage-2 pick implied by the posterior after observing `rating` from the
/// single stage-1 user `user` (n = 1).
pub fn stage2_choice_after(instance: &CuInstance, user: usize, rating: f64) -> Result<usize> {
    let observed = IndexSet::new(vec![user])?;
    let posterior = crate::gaussian::condition(instance.prior(), &observed, &DVector::from_element(1, rating))?;
    let labels = posterior.labels();
    let pool: Vec<usize> = (0..posterior.dim())
        .filter(|&k| instance.pool().contains(labels[k]) && labels[k] != user)
        .collect();
    let (_, chosen) = stage2_value(&posterior, &IndexSet::new(pool)?, 1)?;
    Ok(labels[chosen.as_slice()[0]])
}
