mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use twostage::cu_model::{expected_reward, update_correlation_form, update_user_based_cf, CuInstance};
use twostage::gaussian::{condition, correlation_form, selection_conditional_cov};
use twostage::mf_model::{induced_rating_belief, posterior_predictive};
use twostage::{GaussianBelief, IndexSet};

use common::*;

fn set(v: &[usize]) -> IndexSet {
    IndexSet::new(v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conditioning_matches_dense_inverse(seed in any::<u64>(), d in 2usize..8, m_frac in 0.0f64..1.0) {
        let b = belief(d, seed);
        let m = 1 + ((d - 1) as f64 * m_frac) as usize % (d - 1);
        let mut r = rng(seed ^ 1);
        let u = subset(d, m, &mut r);
        let obs = DVector::from_fn(m, |_, _| r.random_range(1.0..5.0));
        let post = condition(&b, &set(&u), &obs).unwrap();
        let (mean, cov) = dense_condition(b.mean(), b.cov(), &u, &obs);
        prop_assert!((post.mean() - mean).abs().max() < 1e-8);
        prop_assert!((post.cov() - cov).abs().max() < 1e-8);
        let rest = complement(d, &u);
        prop_assert_eq!(post.labels(), rest.as_slice());
    }

    #[test]
    fn law_of_total_expectation(seed in any::<u64>(), d in 2usize..8) {
        // the update is affine in r_u, so antithetic draws average to the prior
        let b = belief(d, seed);
        let mut r = rng(seed ^ 2);
        let m = r.random_range(1..d);
        let u = subset(d, m, &mut r);
        let l = b.cov().select_rows(&u).select_columns(&u).cholesky().unwrap().l();
        let theta_u = DVector::from_fn(m, |i, _| b.mean()[u[i]]);
        let z = DVector::from_fn(m, |_, _| normal(&mut r));
        let plus = condition(&b, &set(&u), &(&theta_u + &l * &z)).unwrap();
        let minus = condition(&b, &set(&u), &(&theta_u - &l * &z)).unwrap();
        let at_mean = condition(&b, &set(&u), &theta_u).unwrap();
        let rest = complement(d, &u);
        let prior_rest = DVector::from_fn(rest.len(), |i, _| b.mean()[rest[i]]);
        prop_assert!(((plus.mean() + minus.mean()) * 0.5 - &prior_rest).abs().max() < 1e-10);
        prop_assert!((at_mean.mean() - &prior_rest).abs().max() < 1e-10);
    }

    #[test]
    fn variance_reduction_identity(seed in any::<u64>(), d in 2usize..8) {
        let b = belief(d, seed);
        let mut r = rng(seed ^ 3);
        let m = r.random_range(1..d);
        let u = subset(d, m, &mut r);
        let rest = complement(d, &u);
        let post = condition(&b, &set(&u), &DVector::zeros(m)).unwrap();
        let sel = selection_conditional_cov(&b, &set(&u)).unwrap();
        let block = b.cov().select_rows(&rest).select_columns(&rest);
        prop_assert!((post.cov() + &sel - block).abs().max() < 1e-9);
        let eig = nalgebra::SymmetricEigen::new(sel.clone()).eigenvalues;
        prop_assert!(eig.min() > -1e-9);
        prop_assert!((&sel - sel.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn correlation_round_trip(seed in any::<u64>(), d in 1usize..8) {
        let b = belief(d, seed);
        let c = correlation_form(&b).unwrap();
        let scale = b.cov().abs().max();
        prop_assert!((c.reconstruct() - b.cov()).abs().max() <= 1e-8 * scale);
        for i in 0..d {
            prop_assert!((c.corr[(i, i)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_form_update_equals_conditioning(seed in any::<u64>(), d in 2usize..8) {
        let inst = cu(d, seed);
        let mut r = rng(seed ^ 4);
        let m = r.random_range(1..d);
        let u = subset(d, m, &mut r);
        let obs = DVector::from_fn(m, |_, _| r.random_range(1.0..5.0));
        let a = update_correlation_form(&inst, &set(&u), &obs).unwrap();
        let (mean, _) = dense_condition(inst.prior().mean(), inst.prior().cov(), &u, &obs);
        prop_assert!((a.mean() - mean).abs().max() < 1e-8);
    }

    #[test]
    fn cf_update_equals_conditioning_under_orthogonal_selection(seed in any::<u64>(), d in 3usize..8, phi in 0.3f64..3.0) {
        // rows of B are unit vectors; selected rows are coordinate axes, so
        // C = B Bᵀ has unit diagonal and an identity selected block
        let mut r = rng(seed);
        let m = r.random_range(1..d);
        let u: Vec<usize> = (0..m).collect();
        let k = d + 2;
        let b = DMatrix::from_fn(d, k, |i, j| if i < m { if i == j { 1.0 } else { 0.0 } } else { normal(&mut r) });
        let mut b = b;
        for i in m..d {
            let n = b.row(i).norm();
            for j in 0..k {
                b[(i, j)] /= n;
            }
        }
        let corr = &b * b.transpose();
        let cov = &corr * (phi * phi);
        let mean = DVector::from_fn(d, |_, _| r.random_range(1.0..5.0));
        let prior = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
        let obs = DVector::from_fn(m, |_, _| r.random_range(1.0..5.0));
        let cf = update_user_based_cf(&mean, &corr, &set(&u), &obs).unwrap();
        let full = update_correlation_form(&CuInstance::full(prior), &set(&u), &obs).unwrap();
        prop_assert!((cf - full.mean()).abs().max() < 1e-8);
    }

    #[test]
    fn reward_is_additive(seed in any::<u64>(), d in 2usize..10) {
        let inst = cu(d, seed);
        let mut r = rng(seed ^ 5);
        let k = r.random_range(1..=d);
        let all = subset(d, k, &mut r);
        let split = r.random_range(0..=k);
        let (a, b) = all.split_at(split);
        let whole = expected_reward(&inst, &set(&all)).unwrap();
        let parts = expected_reward(&inst, &set(a)).unwrap() + expected_reward(&inst, &set(b)).unwrap();
        prop_assert!((whole - parts).abs() < 1e-12);
        let direct: f64 = all.iter().map(|&i| inst.prior().mean()[i]).sum();
        prop_assert!((whole - direct).abs() < 1e-12);
    }

    #[test]
    fn mf_posterior_equals_joint_conditioning(seed in any::<u64>(), users in 2usize..9, k in 1usize..5) {
        let inst = mf(users, k, seed);
        let mut r = rng(seed ^ 6);
        let m = r.random_range(1..users);
        let u = subset(users, m, &mut r);
        let obs = DVector::from_fn(m, |_, _| 2.0 * normal(&mut r));
        let via_item = posterior_predictive(&inst, &set(&u), &obs).unwrap();
        let joint = induced_rating_belief(&inst);
        let (mean, cov) = dense_condition(joint.mean(), joint.cov(), &u, &obs);
        prop_assert!((via_item.mean() - mean).abs().max() < 1e-6);
        prop_assert!((via_item.cov() - cov).abs().max() < 1e-6);
    }
}

#[test]
fn uncorrelated_block_is_untouched() {
    let mean = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
    let mut cov = DMatrix::identity(4, 4);
    cov[(2, 3)] = 0.5;
    cov[(3, 2)] = 0.5;
    let b = GaussianBelief::new(mean, cov).unwrap();
    let post = condition(&b, &set(&[0]), &DVector::from_vec(vec![10.0])).unwrap();
    assert_eq!(post.mean().as_slice(), &[2.0, 3.0, 4.0]);
    let expected = b.cov().select_rows(&[1, 2, 3]).select_columns(&[1, 2, 3]);
    assert!((post.cov() - expected).abs().max() < 1e-15);
}

