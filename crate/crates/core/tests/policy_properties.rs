mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use twostage::cu_model::CuInstance;
use twostage::exact::binomial;
use twostage::gaussian::condition;
use twostage::mf_model::{induced_rating_belief, MfInstance};
use twostage::policies::{gee_select_multi, greedy_select, GeeScorer, Instance, PolicyKind};
use twostage::{GaussianBelief, IndexSet};

use common::*;

fn set(v: &[usize]) -> IndexSet {
    IndexSet::new(v.to_vec()).unwrap()
}

fn mf_instance(users: usize, k: usize, seed: u64) -> Instance {
    Instance::mf(mf(users, k, seed), IndexSet::full(users)).unwrap()
}

fn sorted(s: &IndexSet) -> Vec<usize> {
    let mut v = s.as_slice().to_vec();
    v.sort_unstable();
    v
}

fn exhaustive(instance: &Instance, m: usize) -> usize {
    binomial(instance.pool().len(), m) as usize
}

fn variants_for(instance: &Instance) -> &'static [PolicyKind] {
    match instance {
        Instance::Cu(_) => &[PolicyKind::CuGee, PolicyKind::CuGeeI],
        Instance::Mf { .. } => &PolicyKind::GEE,
    }
}

/// Best `n`-subset of `candidates` by brute force, with its score summed in
/// descending order.
fn brute_inner(values: &[f64], n: usize) -> (Vec<usize>, f64) {
    let idx: Vec<usize> = (0..values.len()).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for s in subsets(&idx, n) {
        let mut vals: Vec<f64> = s.iter().map(|&i| values[i]).collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = vals.iter().sum();
        if best.as_ref().is_none_or(|(_, b)| total > *b) {
            best = Some((s, total));
        }
    }
    best.unwrap()
}

fn check_inner_decomposition(instance: &Instance, seed: u64) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let pool = instance.pool().len();
    let n = r.random_range(1..=3.min(pool - 1));
    let m = r.random_range(1..=pool - n);
    let u = subset(pool, m, &mut r);
    let means = instance.prior_means();
    let exploit: f64 = u.iter().map(|&a| means[a]).sum();
    for &policy in variants_for(instance) {
        let scorer = GeeScorer::new(instance, policy).unwrap();
        let (cands, bonus) = scorer.bonuses(&u).unwrap();
        prop_assert_eq!(&cands, &complement(pool, &u));
        for lambda in [0.0, 0.5, 2.0] {
            let values: Vec<f64> = cands.iter().zip(&bonus).map(|(&v, b)| means[v] + lambda * b).collect();
            let (chosen, brute) = brute_inner(&values, n);
            let fast = scorer.scores(&u, n, &[lambda]).unwrap()[0];
            let scale: f64 = exploit.abs() + values.iter().map(|x| x.abs()).sum::<f64>();
            prop_assert!(
                (fast - (exploit + brute)).abs() <= 8.0 * f64::EPSILON * scale,
                "{policy} λ={lambda}: {fast} vs {}", exploit + brute
            );
            let mut top: Vec<usize> = (0..values.len()).collect();
            top.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            top.truncate(n);
            top.sort_unstable();
            prop_assert_eq!(chosen, top);
        }
    }
    Ok(())
}

fn check_lambda_zero_is_greedy(instance: &Instance, seed: u64) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let pool = instance.pool().len();
    let n = r.random_range(1..pool);
    let m = r.random_range(1..=pool - n);
    let greedy = sorted(&greedy_select(instance, m).unwrap().stage1);
    for &policy in variants_for(instance) {
        let plan = gee_select_multi(instance, m, n, policy, &[0.0], exhaustive(instance, m), seed).unwrap();
        prop_assert_eq!(sorted(&plan[0].stage1), greedy.clone(), "{} m={} n={}", policy, m, n);
    }
    Ok(())
}

/// Builds a correlated prior with equal variances `phi²` and identity
/// correlation among the first `m` users.
fn orthogonal_selection_prior(d: usize, m: usize, phi: f64, seed: u64) -> GaussianBelief {
    let mut r = rng(seed);
    let k = d + 2;
    let mut b = DMatrix::from_fn(d, k, |i, j| {
        if i < m {
            if i == j { 1.0 } else { 0.0 }
        } else {
            normal(&mut r)
        }
    });
    for i in m..d {
        let norm = b.row(i).norm();
        b.row_mut(i).scale_mut(1.0 / norm);
    }
    let cov = &b * b.transpose() * (phi * phi);
    let mean = DVector::from_fn(d, |_, _| r.random_range(1.0..5.0));
    GaussianBelief::new(mean, (&cov + cov.transpose()) * 0.5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lambda_zero_gee_is_greedy_cu(seed in any::<u64>(), d in 3usize..9) {
        check_lambda_zero_is_greedy(&Instance::Cu(cu(d, seed)), seed ^ 11)?;
    }

    #[test]
    fn lambda_zero_gee_is_greedy_mf(seed in any::<u64>(), users in 3usize..9, k in 1usize..5) {
        check_lambda_zero_is_greedy(&mf_instance(users, k, seed), seed ^ 12)?;
    }

    #[test]
    fn inner_max_is_top_n_cu(seed in any::<u64>(), d in 2usize..9) {
        check_inner_decomposition(&Instance::Cu(cu(d, seed)), seed ^ 13)?;
    }

    #[test]
    fn inner_max_is_top_n_mf(seed in any::<u64>(), users in 2usize..9, k in 1usize..5) {
        check_inner_decomposition(&mf_instance(users, k, seed), seed ^ 14)?;
    }

    #[test]
    fn cu_gee_matches_independent_variant_with_scaled_lambda(
        seed in any::<u64>(), d in 3usize..9, phi in 0.3f64..3.0, lambda in 0.0f64..4.0,
    ) {
        let mut r = rng(seed ^ 15);
        let m = r.random_range(1..d);
        let n = r.random_range(1..=d - m);
        let u: Vec<usize> = (0..m).collect();
        let inst = Instance::Cu(CuInstance::full(orthogonal_selection_prior(d, m, phi, seed)));
        let full = GeeScorer::new(&inst, PolicyKind::CuGee).unwrap();
        let indep = GeeScorer::new(&inst, PolicyKind::CuGeeI).unwrap();
        let a = full.scores(&u, n, &[lambda]).unwrap()[0];
        let b = indep.scores(&u, n, &[lambda * phi]).unwrap()[0];
        prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn mf_gee_ii_matches_mf_gee_i_for_constant_psi(seed in any::<u64>(), users in 3usize..9, k in 1usize..5, psi in 0.1f64..2.0) {
        let base = mf(users, k, seed);
        let mut cov = DMatrix::from_diagonal_element(k, k, psi * psi);
        // off-diagonal entries are ignored by both variants
        if k > 1 {
            cov[(0, 1)] = 0.1 * psi * psi;
            cov[(1, 0)] = 0.1 * psi * psi;
        }
        let belief = GaussianBelief::new(base.item_belief().mean().clone(), cov).unwrap();
        let model = MfInstance::new(base.user_factors().clone(), belief, base.noise_var()).unwrap();
        let inst = Instance::mf(model, IndexSet::full(users)).unwrap();
        let mut r = rng(seed ^ 16);
        let m = r.random_range(1..users);
        let n = r.random_range(1..=users - m);
        let t = exhaustive(&inst, m);
        for lambda in [0.25, 1.0, 4.0] {
            let i = gee_select_multi(&inst, m, n, PolicyKind::MfGeeI, &[lambda], t, 0).unwrap();
            let ii = gee_select_multi(&inst, m, n, PolicyKind::MfGeeII, &[lambda], t, 0).unwrap();
            prop_assert_eq!(sorted(&i[0].stage1), sorted(&ii[0].stage1));
            prop_assert!((i[0].score - ii[0].score).abs() < 1e-8);
        }
    }

    #[test]
    fn mf_gee_i_matches_mf_gee_for_psi_orthogonal_users(seed in any::<u64>(), k in 2usize..6, extra in 1usize..5) {
        let mut r = rng(seed);
        let users = k + extra;
        let m = r.random_range(1..=k);
        let psi: DVector<f64> = DVector::from_fn(k, |_, _| r.random_range(0.2..2.0));
        // stage-1 rows p_a = Ψ^{-1/2} q_a with orthonormal q_a, so P_u Ψ P_uᵀ is diagonal
        let q = DMatrix::from_fn(k, k, |_, _| normal(&mut r)).qr().q();
        let p = DMatrix::from_fn(users, k, |i, j| {
            if i < m {
                q[(j, i)] / psi[j].sqrt() * (1.0 + i as f64)
            } else {
                normal(&mut r)
            }
        });
        let nu = DVector::from_fn(k, |_, _| normal(&mut r));
        let belief = GaussianBelief::new(nu, DMatrix::from_diagonal(&psi)).unwrap();
        let model = MfInstance::new(p, belief, r.random_range(0.1..1.0)).unwrap();
        let inst = Instance::mf(model, IndexSet::full(users)).unwrap();
        let u: Vec<usize> = (0..m).collect();
        let full = GeeScorer::new(&inst, PolicyKind::MfGee).unwrap();
        let diag = GeeScorer::new(&inst, PolicyKind::MfGeeI).unwrap();
        let (ca, ba) = full.bonuses(&u).unwrap();
        let (cb, bb) = diag.bonuses(&u).unwrap();
        prop_assert_eq!(ca, cb);
        for (x, y) in ba.iter().zip(&bb) {
            prop_assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn mf_gee_matches_cu_gee_on_induced_belief(seed in any::<u64>(), users in 2usize..9, k in 1usize..5) {
        let model = mf(users, k, seed);
        let cu_inst = Instance::Cu(CuInstance::full(induced_rating_belief(&model)));
        let mf_inst = Instance::mf(model, IndexSet::full(users)).unwrap();
        let mut r = rng(seed ^ 17);
        let m = r.random_range(1..users);
        let u = subset(users, m, &mut r);
        let (ca, ba) = GeeScorer::new(&mf_inst, PolicyKind::MfGee).unwrap().bonuses(&u).unwrap();
        let (cb, bb) = GeeScorer::new(&cu_inst, PolicyKind::CuGee).unwrap().bonuses(&u).unwrap();
        prop_assert_eq!(ca, cb);
        for (x, y) in ba.iter().zip(&bb) {
            prop_assert!((x - y).abs() < 1e-6 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn longer_search_never_scores_lower(seed in any::<u64>(), t in 1usize..200) {
        // the first t draws are a prefix of the first 2t draws
        let inst = Instance::Cu(cu(14, seed));
        let (m, n) = (4, 3);
        prop_assume!(binomial(14, m) > 2 * t as u128);
        let lambdas = [0.0, 0.5, 2.0];
        let short = gee_select_multi(&inst, m, n, PolicyKind::CuGee, &lambdas, t, seed).unwrap();
        let long = gee_select_multi(&inst, m, n, PolicyKind::CuGee, &lambdas, 2 * t, seed).unwrap();
        for (s, l) in short.iter().zip(&long) {
            prop_assert!(l.score >= s.score - 1e-12 * s.score.abs().max(1.0));
        }
    }

    #[test]
    fn selection_stays_in_pool(seed in any::<u64>(), d in 4usize..12) {
        let mut r = rng(seed);
        let pool_size = r.random_range(3..=d);
        let pool = set(&subset(d, pool_size, &mut r));
        let inst = Instance::Cu(CuInstance::new(common::belief(d, seed), pool.clone()).unwrap());
        let m = r.random_range(1..pool_size);
        let plan = gee_select_multi(&inst, m, pool_size - m, PolicyKind::CuGee, &[1.0], 50, seed).unwrap();
        prop_assert_eq!(plan[0].stage1.len(), m);
        prop_assert!(plan[0].stage1.iter().all(|i| pool.contains(i)));
    }
}

#[test]
fn mean_search_score_grows_with_samples() {
    let budgets = [5usize, 20, 80, 320];
    let mut totals = [0.0; 4];
    for seed in 0..40u64 {
        let inst = Instance::Cu(cu(16, 1000 + seed));
        for (slot, &t) in totals.iter_mut().zip(&budgets) {
            *slot += gee_select_multi(&inst, 4, 3, PolicyKind::CuGee, &[1.0], t, seed ^ 0xfeed).unwrap()[0].score;
        }
    }
    for w in totals.windows(2) {
        assert!(w[1] >= w[0], "{totals:?}");
    }
}

/// Fraction of simulated stage-1 observations for which every candidate's
/// updated mean lies in `θ_v ± λ · bonus_v`.
fn coverage(instance: &Instance, policy: PolicyKind, u: &[usize], lambda: f64, draws: usize, seed: u64) -> Vec<f64> {
    let prior = instance.rating_belief();
    let scorer = GeeScorer::new(instance, policy).unwrap();
    let (cands, bonus) = scorer.bonuses(u).unwrap();
    let means = prior.mean();
    let block = prior.cov().select_rows(u).select_columns(u);
    let l = block.cholesky().unwrap().l();
    let theta_u = DVector::from_fn(u.len(), |i, _| means[u[i]]);
    let observed = set(u);
    let mut r = rng(seed);
    let mut hits = vec![0usize; cands.len()];
    for _ in 0..draws {
        let z = DVector::from_fn(u.len(), |_, _| normal(&mut r));
        let post = condition(&prior, &observed, &(&theta_u + &l * z)).unwrap();
        let labels = post.labels();
        for (k, (&v, &b)) in cands.iter().zip(&bonus).enumerate() {
            let row = labels.iter().position(|&x| x == v).unwrap();
            if (post.mean()[row] - means[v]).abs() <= lambda * b {
                hits[k] += 1;
            }
        }
    }
    hits.iter().map(|&h| h as f64 / draws as f64).collect()
}

#[test]
fn optimistic_interval_covers_single_stage2_user() {
    for lambda in [1.0, 2.0] {
        let bound = 1.0 - 2.0 * (-lambda * lambda / 2.0f64).exp() - 0.02;
        // the two-sided Gaussian probability the interval attains
        let exact = libm::erf(lambda / std::f64::consts::SQRT_2);
        let cases: [(Instance, PolicyKind, Vec<usize>); 3] = [
            (Instance::Cu(cu(5, 21)), PolicyKind::CuGee, vec![0]),
            (Instance::Cu(cu(6, 22)), PolicyKind::CuGee, vec![1, 4]),
            (mf_instance(6, 3, 23), PolicyKind::MfGee, vec![2, 5]),
        ];
        for (inst, policy, u) in &cases {
            for freq in coverage(inst, *policy, u, lambda, 20_000, 7) {
                assert!(freq >= bound, "λ={lambda}: {freq} < {bound}");
                assert!((freq - exact).abs() < 0.015, "λ={lambda}: {freq} vs {exact}");
            }
        }
    }
}
