//! Top-k selection shared by every policy. Ties go to the lowest index.

use std::cmp::Ordering;

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The `n` candidates with the largest `scores[c]`, best first.
pub fn top_n(scores: &[f64], candidates: &[usize], n: usize) -> Vec<usize> {
    let mut idx = candidates.to_vec();
    let n = n.min(idx.len());
    if n == 0 {
        return Vec::new();
    }
    let cmp = by_score_then_index(scores);
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, &cmp);
        idx.truncate(n);
    }
    idx.sort_unstable_by(&cmp);
    idx
}

/// Sum of the `n` largest values in `values`; reorders `values` in place.
pub fn top_n_sum(values: &mut [f64], n: usize) -> f64 {
    let n = n.min(values.len());
    if n == 0 {
        return 0.0;
    }
    if n < values.len() {
        values.select_nth_unstable_by(n - 1, |a, b| b.total_cmp(a));
    }
    values[..n].iter().sum()
}
