#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use twostage::cu_model::CuInstance;
use twostage::mf_model::MfInstance;
use twostage::GaussianBelief;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

pub fn spd(d: usize, ridge: f64, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(r));
    let m = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * ridge;
    (&m + m.transpose()) * 0.5
}

pub fn belief(d: usize, seed: u64) -> GaussianBelief {
    let mut r = rng(seed);
    let mean = DVector::from_fn(d, |_, _| r.random_range(1.0..5.0));
    GaussianBelief::new(mean, spd(d, 0.1, &mut r)).unwrap()
}

pub fn cu(d: usize, seed: u64) -> CuInstance {
    CuInstance::full(belief(d, seed))
}

pub fn mf(users: usize, k: usize, seed: u64) -> MfInstance {
    let mut r = rng(seed);
    let p = DMatrix::from_fn(users, k, |_, _| normal(&mut r));
    let nu = DVector::from_fn(k, |_, _| 0.5 * normal(&mut r));
    let psi = spd(k, 0.05, &mut r);
    let noise = r.random_range(0.1..1.0);
    MfInstance::new(p, GaussianBelief::new(nu, psi).unwrap(), noise).unwrap()
}

/// Random `m`-subset of `0..d`, ascending.
pub fn subset(d: usize, m: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = rand::seq::index::sample(r, d, m).into_vec();
    v.sort_unstable();
    v
}

pub fn complement(d: usize, u: &[usize]) -> Vec<usize> {
    (0..d).filter(|i| !u.contains(i)).collect()
}

/// Conditional Gaussian by explicit dense inverse.
pub fn dense_condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    u: &[usize],
    r_u: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let rest = complement(mean.len(), u);
    let phi_uu = cov.select_rows(u).select_columns(u);
    let phi_ru = cov.select_rows(&rest).select_columns(u);
    let phi_rr = cov.select_rows(&rest).select_columns(&rest);
    let inv = phi_uu.try_inverse().expect("invertible block");
    let theta_u = DVector::from_fn(u.len(), |i, _| mean[u[i]]);
    let theta_r = DVector::from_fn(rest.len(), |i, _| mean[rest[i]]);
    let m = theta_r + &phi_ru * &inv * (r_u - theta_u);
    let c = phi_rr - &phi_ru * &inv * phi_ru.transpose();
    (m, c)
}

/// All `k`-subsets of `items`.
pub fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if items.len() < k {
        return vec![];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        for mut rest in subsets(&items[i + 1..], k - 1) {
            rest.insert(0, x);
            out.push(rest);
        }
    }
    out
}
