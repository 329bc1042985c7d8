//! Sweeps over total budget `N`, stage-1 share `m`, policies and λ, averaged
//! over evaluation items.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::IndexSet;
use crate::policies::{gee_select_multi, select_stage1, Instance, PolicyConfig, PolicyKind, DEFAULT_SAMPLES, LAMBDA_GRID};
use crate::seed::derive_seed;

use super::movielens::{split_cold_items, train_cu_prior, RatingsTable};
use super::synthetic::{generate_repeat, SyntheticConfig};
use super::trial::{TrialContext, UpdateRule};

pub const CSV_HEADER: &str =
    "scenario,policy,N,m,lambda,seed,mean_total_reward,mean_hit_count,stderr_total_reward,n_trials";

/// One prior shared by several evaluation items. `ground_truth[j][v]` is
/// item `j`'s rating by user `v`.
#[derive(Debug, Clone)]
pub struct EvalUnit {
    pub id: u64,
    pub instance: Instance,
    pub ground_truth: Vec<Vec<f64>>,
    pub rule: UpdateRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub n_list: Vec<usize>,
    /// Stage-1 budgets to try; `None` means every `m` in `1..N`.
    pub m_list: Option<Vec<usize>>,
    pub policies: Vec<PolicyKind>,
    pub lambdas: Vec<f64>,
    pub samples_t: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(scenario: impl Into<String>, n_list: Vec<usize>, policies: Vec<PolicyKind>) -> Self {
        Self {
            scenario: scenario.into(),
            n_list,
            m_list: None,
            policies,
            lambdas: LAMBDA_GRID.to_vec(),
            samples_t: DEFAULT_SAMPLES,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(Error::InvalidConfig("N list must be nonempty and positive".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::InvalidConfig("at least one policy is required".into()));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidConfig("λ grid must be nonempty, finite and non-negative".into()));
        }
        if self.samples_t == 0 {
            return Err(Error::InvalidConfig("samples_t must be at least 1".into()));
        }
        if let Some(ms) = &self.m_list {
            if ms.is_empty() || ms.contains(&0) {
                return Err(Error::InvalidConfig("m list must be nonempty and positive".into()));
            }
        }
        Ok(())
    }

    fn m_values(&self, n_total: usize) -> Vec<usize> {
        match &self.m_list {
            Some(ms) => {
                let mut v: Vec<usize> = ms.iter().copied().filter(|&m| m < n_total).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
            None => (1..n_total).collect(),
        }
    }

    fn lambdas_for(&self, policy: PolicyKind) -> Vec<f64> {
        if policy.uses_lambda() {
            let mut l = self.lambdas.clone();
            l.sort_by(f64::total_cmp);
            l.dedup();
            l
        } else {
            vec![0.0]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scenario: String,
    pub policy: PolicyKind,
    pub n_total: usize,
    pub m: usize,
    pub lambda: f64,
    pub seed: u64,
    pub mean_total_reward: f64,
    pub mean_hit_count: f64,
    pub stderr_total_reward: f64,
    pub n_trials: usize,
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.scenario,
            self.policy,
            self.n_total,
            self.m,
            self.lambda,
            self.seed,
            self.mean_total_reward,
            self.mean_hit_count,
            self.stderr_total_reward,
            self.n_trials
        )
    }
}

/// `(policy id, N, m, λ bits)`; λ ≥ 0 so the bit pattern sorts numerically.
type CellKey = (u64, usize, usize, u64);

fn cell_key(policy: PolicyKind, n_total: usize, m: usize, lambda: f64) -> CellKey {
    (policy.stable_id(), n_total, m, lambda.to_bits())
}

/// Seed for a unit's stage-1 search in one grid cell; independent of the
/// order policies are listed in.
pub fn cell_seed(base: u64, unit: u64, n_total: usize, m: usize, policy: PolicyKind) -> u64 {
    derive_seed(base, &[unit, n_total as u64, m as u64, policy.stable_id()])
}

type UnitOutcome = Vec<(CellKey, PolicyKind, Vec<(f64, usize)>)>;

fn run_unit(unit: &EvalUnit, cfg: &ExperimentConfig) -> Result<UnitOutcome> {
    let ctx = TrialContext::new(&unit.instance, unit.rule)?;
    let pool = unit.instance.pool().len();
    let mut out = Vec::new();
    let mut policies = cfg.policies.clone();
    policies.sort_by_key(|p| p.stable_id());
    policies.dedup();
    for &n_total in &cfg.n_list {
        if n_total > pool {
            continue;
        }
        for m in cfg.m_values(n_total) {
            let n = n_total - m;
            for &policy in &policies {
                let lambdas = cfg.lambdas_for(policy);
                let seed = cell_seed(cfg.seed, unit.id, n_total, m, policy);
                let plans: Vec<(f64, IndexSet)> = if policy.is_gee() {
                    gee_select_multi(&unit.instance, m, n, policy, &lambdas, cfg.samples_t, seed)?
                        .into_iter()
                        .zip(&lambdas)
                        .map(|(p, &l)| (l, p.stage1))
                        .collect()
                } else {
                    lambdas
                        .iter()
                        .map(|&l| {
                            let pc = PolicyConfig {
                                policy,
                                lambda: l,
                                samples_t: cfg.samples_t,
                                seed,
                            };
                            Ok((l, select_stage1(&unit.instance, m, n, &pc)?.stage1))
                        })
                        .collect::<Result<_>>()?
                };
                for (lambda, stage1) in plans {
                    let pc = PolicyConfig {
                        policy,
                        lambda,
                        samples_t: cfg.samples_t,
                        seed,
                    };
                    let outcomes = unit
                        .ground_truth
                        .iter()
                        .map(|truth| {
                            let t = ctx.complete(&stage1, n, truth, &pc)?;
                            Ok((t.total_reward, t.hit_count))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    out.push((cell_key(policy, n_total, m, lambda), policy, outcomes));
                }
            }
        }
    }
    Ok(out)
}

/// Runs every cell on every unit and averages over all (unit, item) trials.
/// Rows are ordered by policy, `N`, `m`, λ; sums run in unit then item order.
pub fn run_experiment(units: &[EvalUnit], cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let per_unit: Vec<UnitOutcome> = units.par_iter().map(|u| run_unit(u, cfg)).collect::<Result<_>>()?;
    let mut cells: BTreeMap<CellKey, (PolicyKind, Vec<(f64, usize)>)> = BTreeMap::new();
    for outcome in per_unit {
        for (key, policy, vals) in outcome {
            cells.entry(key).or_insert_with(|| (policy, Vec::new())).1.extend(vals);
        }
    }
    Ok(cells
        .into_iter()
        .filter(|(_, (_, v))| !v.is_empty())
        .map(|((_, n_total, m, lbits), (policy, vals))| {
            let count = vals.len() as f64;
            let mean = vals.iter().map(|v| v.0).sum::<f64>() / count;
            let hits = vals.iter().map(|v| v.1 as f64).sum::<f64>() / count;
            let stderr = if vals.len() > 1 {
                let ss = vals.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>();
                (ss / (count - 1.0)).sqrt() / count.sqrt()
            } else {
                0.0
            };
            ResultRow {
                scenario: cfg.scenario.clone(),
                policy,
                n_total,
                m,
                lambda: f64::from_bits(lbits),
                seed: cfg.seed,
                mean_total_reward: mean,
                mean_hit_count: hits,
                stderr_total_reward: stderr,
                n_trials: vals.len(),
            }
        })
        .collect())
}

pub fn write_csv<W: Write>(rows: &[ResultRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Best row per `(policy, N)` by mean total reward, maximised over `m` and
/// λ. The first row in table order wins ties.
pub fn best_rows(rows: &[ResultRow]) -> Vec<ResultRow> {
    let mut best: BTreeMap<(u64, usize), ResultRow> = BTreeMap::new();
    for r in rows {
        let key = (r.policy.stable_id(), r.n_total);
        match best.get(&key) {
            Some(b) if b.mean_total_reward >= r.mean_total_reward => {}
            _ => {
                best.insert(key, r.clone());
            }
        }
    }
    best.into_values().collect()
}

/// Reward-vs-`m` curve for one policy and `N`. For each `m` the λ is fixed
/// to the one achieving the best single cell at that `N`.
pub fn curve(rows: &[ResultRow], policy: PolicyKind, n_total: usize) -> Vec<ResultRow> {
    let relevant: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| r.policy == policy && r.n_total == n_total)
        .collect();
    let Some(top) = relevant
        .iter()
        .copied()
        .reduce(|a, b| if b.mean_total_reward > a.mean_total_reward { b } else { a })
    else {
        return Vec::new();
    };
    let lambda = top.lambda;
    relevant
        .into_iter()
        .filter(|r| r.lambda.to_bits() == lambda.to_bits())
        .cloned()
        .collect()
}

/// `scenario,policy,N,m,m_over_N,lambda,mean_total_reward,stderr_total_reward`
/// for every policy and `N` in `rows`.
pub fn write_curves<W: Write>(rows: &[ResultRow], mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "scenario,policy,N,m,m_over_N,lambda,mean_total_reward,stderr_total_reward"
    )?;
    let mut keys: Vec<(PolicyKind, usize)> = rows.iter().map(|r| (r.policy, r.n_total)).collect();
    keys.sort_by_key(|k| (k.0.stable_id(), k.1));
    keys.dedup();
    for (policy, n_total) in keys {
        for r in curve(rows, policy, n_total) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.scenario,
                r.policy,
                r.n_total,
                r.m,
                r.m as f64 / r.n_total as f64,
                r.lambda,
                r.mean_total_reward,
                r.stderr_total_reward
            )?;
        }
    }
    Ok(())
}

/// One unit per repeat; every item of that repeat is a trial. Users are the
/// full pool and updates use exact conditioning.
pub fn synthetic_units(cfg: &SyntheticConfig) -> Result<Vec<EvalUnit>> {
    cfg.validate()?;
    (0..cfg.n_repeats)
        .into_par_iter()
        .map(|r| {
            let rep = generate_repeat(cfg, r)?;
            let ground_truth = (0..cfg.n_items).map(|j| rep.item_ratings(j)).collect();
            let pool = IndexSet::full(rep.instance.n_users());
            Ok(EvalUnit {
                id: r as u64,
                instance: Instance::mf(rep.instance, pool)?,
                ground_truth,
                rule: UpdateRule::FullConditioning,
            })
        })
        .collect()
}

/// Which users a cold item may be recommended to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolConvention {
    /// Only users who rated the item.
    Raters,
    /// Every user with a training history; a user who did not rate the item
    /// yields a rating of 0.
    AllUsers,
}

impl PoolConvention {
    pub fn name(self) -> &'static str {
        match self {
            PoolConvention::Raters => "raters",
            PoolConvention::AllUsers => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raters" => Ok(PoolConvention::Raters),
            "all" => Ok(PoolConvention::AllUsers),
            other => Err(Error::InvalidConfig(format!(
                "unknown pool convention {other:?}; expected raters or all"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovieLensConfig {
    pub n_test: usize,
    pub min_ratings: usize,
    pub pool: PoolConvention,
    pub seed: u64,
}

impl Default for MovieLensConfig {
    fn default() -> Self {
        Self {
            n_test: 200,
            min_ratings: 50,
            pool: PoolConvention::AllUsers,
            seed: 0,
        }
    }
}

/// Cold-item units. The prior is trained on the remaining items and updates
/// use the user-based CF rule. Under `Raters` each test item is its own unit
/// whose pool is that item's raters; under `AllUsers` one unit holds every
/// test item over the shared user pool.
pub fn movielens_units(table: &RatingsTable, cfg: &MovieLensConfig) -> Result<Vec<EvalUnit>> {
    let (train, test) = split_cold_items(table, cfg.n_test, cfg.min_ratings, cfg.seed)?;
    let by_item = table.by_item();
    let trained_users: std::collections::BTreeSet<u32> = train.users().into_iter().collect();
    let users: Vec<u32> = match cfg.pool {
        PoolConvention::AllUsers => trained_users.iter().copied().collect(),
        PoolConvention::Raters => {
            let mut u: Vec<u32> = test
                .iter()
                .flat_map(|i| by_item[i].iter().map(|p| p.0))
                .filter(|u| trained_users.contains(u))
                .collect();
            u.sort_unstable();
            u.dedup();
            u
        }
    };
    let prior = train_cu_prior(&train, &users)?;
    let index = prior.index();
    if cfg.pool == PoolConvention::AllUsers {
        let all: Vec<usize> = (0..users.len()).collect();
        let belief = prior.belief(&all)?;
        let ground_truth = test
            .iter()
            .map(|item| {
                let mut truth = vec![0.0; users.len()];
                for &(u, r) in &by_item[item] {
                    if let Some(&pos) = index.get(&u) {
                        truth[pos] = r;
                    }
                }
                truth
            })
            .collect();
        return Ok(vec![EvalUnit {
            id: 0,
            instance: Instance::Cu(crate::cu_model::CuInstance::full(belief)),
            ground_truth,
            rule: UpdateRule::UserBasedCf,
        }]);
    }
    test.par_iter()
        .map(|&item| {
            let raters: Vec<(usize, f64)> = by_item[&item]
                .iter()
                .filter_map(|&(u, r)| index.get(&u).map(|&pos| (pos, r)))
                .collect();
            let positions: Vec<usize> = raters.iter().map(|p| p.0).collect();
            let belief = prior.belief(&positions)?;
            let truth: Vec<f64> = raters.iter().map(|p| p.1).collect();
            Ok(EvalUnit {
                id: item as u64,
                instance: Instance::Cu(crate::cu_model::CuInstance::full(belief)),
                ground_truth: vec![truth],
                rule: UpdateRule::UserBasedCf,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::trial::{run_trial, AllocationPlan};

    fn small_units() -> Vec<EvalUnit> {
        let cfg = SyntheticConfig {
            n_users: 15,
            n_items: 6,
            n_repeats: 3,
            seed: 5,
            ..SyntheticConfig::default()
        };
        synthetic_units(&cfg).unwrap()
    }

    #[test]
    fn single_cell_matches_direct_trials() {
        let units = small_units();
        let mut cfg = ExperimentConfig::new("t", vec![5], vec![PolicyKind::Ucb]);
        cfg.m_list = Some(vec![2]);
        cfg.lambdas = vec![1.0];
        let rows = run_experiment(&units, &cfg).unwrap();
        assert_eq!(rows.len(), 1);
        let pc = PolicyConfig::new(PolicyKind::Ucb, 1.0);
        let mut total = 0.0;
        let mut count = 0;
        for u in &units {
            for truth in &u.ground_truth {
                total += run_trial(&u.instance, AllocationPlan::new(2, 3), &pc, truth, u.rule)
                    .unwrap()
                    .total_reward;
                count += 1;
            }
        }
        assert_eq!(rows[0].n_trials, count);
        assert!((rows[0].mean_total_reward - total / count as f64).abs() < 1e-9);
    }

    #[test]
    fn policy_order_does_not_matter() {
        let units = small_units();
        let mut a = ExperimentConfig::new("t", vec![4], vec![PolicyKind::Greedy, PolicyKind::MfGee, PolicyKind::Al]);
        a.samples_t = 20;
        a.lambdas = vec![0.5, 0.0];
        let mut b = a.clone();
        b.policies = vec![PolicyKind::Al, PolicyKind::MfGee, PolicyKind::Greedy];
        b.lambdas = vec![0.0, 0.5];
        assert_eq!(run_experiment(&units, &a).unwrap(), run_experiment(&units, &b).unwrap());
    }

    #[test]
    fn row_grid_and_csv() {
        let units = small_units();
        let mut cfg = ExperimentConfig::new("synthetic", vec![3, 4], vec![PolicyKind::Greedy, PolicyKind::Ucb]);
        cfg.lambdas = vec![0.0, 1.0];
        let rows = run_experiment(&units, &cfg).unwrap();
        // greedy: 2 + 3 m values; ucb: twice that
        assert_eq!(rows.len(), 5 + 10);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(text.lines().count(), 16);
        let best = best_rows(&rows);
        assert_eq!(best.len(), 4);
        assert_eq!(curve(&rows, PolicyKind::Ucb, 4).len(), 3);
    }

    #[test]
    fn full_budget_rows_agree_across_policies() {
        let units = small_units();
        let mut cfg = ExperimentConfig::new("t", vec![15], PolicyKind::ALL.to_vec());
        cfg.m_list = Some(vec![3]);
        cfg.samples_t = 5;
        let rows = run_experiment(&units, &cfg).unwrap();
        let first = rows[0].mean_total_reward;
        assert!(rows.iter().all(|r| (r.mean_total_reward - first).abs() < 1e-9));
    }
}
