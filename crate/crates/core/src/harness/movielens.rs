//! MovieLens `u.data` ingestion, cold-item split, and correlated-user prior
//! training.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{robust_cholesky, GaussianBelief};

/// Pseudo-count `c` in the shrinkage factor `n_co / (n_co + c)`.
pub const SHRINKAGE: f64 = 10.0;
/// Per-user rating std never falls below this.
pub const STD_FLOOR: f64 = 0.1;
/// Eigenvalue floor used when repairing an indefinite correlation matrix.
pub const EIGEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rating {
    pub user: u32,
    pub item: u32,
    pub rating: u8,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingsTable {
    ratings: Vec<Rating>,
}

impl RatingsTable {
    /// Rejects duplicate `(user, item)` pairs and ratings outside `1..=5`.
    pub fn new(ratings: Vec<Rating>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ratings.len());
        for (i, r) in ratings.iter().enumerate() {
            if !(1..=5).contains(&r.rating) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("rating {} outside 1..=5", r.rating),
                });
            }
            if !seen.insert((r.user, r.item)) {
                return Err(Error::DuplicatePair {
                    line: i + 1,
                    user: r.user,
                    item: r.item,
                });
            }
        }
        Ok(Self { ratings })
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    /// Distinct user ids, ascending.
    pub fn users(&self) -> Vec<u32> {
        self.ratings.iter().map(|r| r.user).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Distinct item ids, ascending.
    pub fn items(&self) -> Vec<u32> {
        self.ratings.iter().map(|r| r.item).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// `(user, rating)` pairs per item, users ascending.
    pub fn by_item(&self) -> BTreeMap<u32, Vec<(u32, f64)>> {
        let mut out: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
        for r in &self.ratings {
            out.entry(r.item).or_default().push((r.user, r.rating as f64));
        }
        for v in out.values_mut() {
            v.sort_by_key(|p| p.0);
        }
        out
    }

    /// `(item, rating)` pairs per user, items ascending.
    pub fn by_user(&self) -> BTreeMap<u32, Vec<(u32, f64)>> {
        let mut out: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
        for r in &self.ratings {
            out.entry(r.user).or_default().push((r.item, r.rating as f64));
        }
        for v in out.values_mut() {
            v.sort_by_key(|p| p.0);
        }
        out
    }

    /// Keeps the ratings for which `keep` holds.
    pub fn filter<F: Fn(&Rating) -> bool>(&self, keep: F) -> Self {
        Self {
            ratings: self.ratings.iter().copied().filter(|r| keep(r)).collect(),
        }
    }
}

/// Parses tab-separated `user item rating timestamp` lines. Blank lines are
/// skipped; line numbers in errors are one-based.
pub fn parse_movielens<R: BufRead>(reader: R) -> Result<RatingsTable> {
    let mut ratings = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let field = |k: usize, name: &str| -> Result<u64> {
            fields[k].parse::<u64>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("{name} {:?}: {e}", fields[k]),
            })
        };
        let user = field(0, "user id")?;
        let item = field(1, "item id")?;
        let rating = field(2, "rating")?;
        let timestamp = field(3, "timestamp")?;
        let user = u32::try_from(user).map_err(|_| Error::Parse {
            line: lineno,
            message: "user id out of range".into(),
        })?;
        let item = u32::try_from(item).map_err(|_| Error::Parse {
            line: lineno,
            message: "item id out of range".into(),
        })?;
        if !(1..=5).contains(&rating) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("rating {rating} outside 1..=5"),
            });
        }
        if !seen.insert((user, item)) {
            return Err(Error::DuplicatePair { line: lineno, user, item });
        }
        ratings.push(Rating {
            user,
            item,
            rating: rating as u8,
            timestamp,
        });
    }
    Ok(RatingsTable { ratings })
}

pub fn load_movielens(path: impl AsRef<Path>) -> Result<RatingsTable> {
    let file = std::fs::File::open(path)?;
    parse_movielens(std::io::BufReader::new(file))
}

/// Picks `n_test` items with at least `min_ratings` ratings uniformly at
/// random and removes them from training. Test ids are returned ascending.
pub fn split_cold_items(
    table: &RatingsTable,
    n_test: usize,
    min_ratings: usize,
    seed: u64,
) -> Result<(RatingsTable, Vec<u32>)> {
    let eligible: Vec<u32> = table
        .by_item()
        .into_iter()
        .filter(|(_, v)| v.len() >= min_ratings)
        .map(|(item, _)| item)
        .collect();
    if eligible.len() < n_test || n_test == 0 {
        return Err(Error::InsufficientItems {
            found: eligible.len(),
            needed: n_test.max(1),
            min_ratings,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test: Vec<u32> = rand::seq::index::sample(&mut rng, eligible.len(), n_test)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    test.sort_unstable();
    let test_set: HashSet<u32> = test.iter().copied().collect();
    let train = table.filter(|r| !test_set.contains(&r.item));
    Ok((train, test))
}

/// Correlated-user prior in mean / std / correlation form. Row `i`
/// corresponds to `users[i]`.
#[derive(Debug, Clone)]
pub struct CuPrior {
    pub users: Vec<u32>,
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
    pub corr: DMatrix<f64>,
}

impl CuPrior {
    /// Position of each user id.
    pub fn index(&self) -> BTreeMap<u32, usize> {
        self.users.iter().enumerate().map(|(i, &u)| (u, i)).collect()
    }

    /// Joint rating belief over the users at `positions`, labelled by position.
    pub fn belief(&self, positions: &[usize]) -> Result<GaussianBelief> {
        let d = positions.len();
        let mean = DVector::from_fn(d, |i, _| self.mean[positions[i]]);
        let cov = DMatrix::from_fn(d, d, |i, j| {
            let (a, b) = (positions[i], positions[j]);
            self.std[a] * self.corr[(a, b)] * self.std[b]
        });
        GaussianBelief::with_labels(mean, cov, positions.to_vec())
    }
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Pearson correlation over co-rated items, shrunk by `n_co / (n_co + c)`.
/// Fewer than two co-ratings, or a constant side, gives 0.
pub fn shrunk_pearson(a: &[(u32, f64)], b: &[(u32, f64)], shrinkage: f64) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                xs.push(a[i].1);
                ys.push(b[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    rho * nf / (nf + shrinkage)
}

/// Returns `corr` if it factorises, else the nearest-by-eigenvalue-clipping
/// PSD matrix rescaled to a unit diagonal.
pub fn clamp_correlation_psd(corr: DMatrix<f64>) -> DMatrix<f64> {
    if robust_cholesky(&corr).is_ok() {
        return corr;
    }
    let eig = SymmetricEigen::new(corr);
    let vals = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let d = rebuilt.nrows();
    let scale: Vec<f64> = (0..d).map(|i| rebuilt[(i, i)].sqrt()).collect();
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else {
            let v = rebuilt[(i, j)] / (scale[i] * scale[j]);
            let w = rebuilt[(j, i)] / (scale[i] * scale[j]);
            0.5 * (v + w)
        }
    })
}

/// Per-user mean and std (floored) plus a shrunk Pearson correlation matrix
/// over `users`, in the given order.
pub fn train_cu_prior(train: &RatingsTable, users: &[u32]) -> Result<CuPrior> {
    train_cu_prior_with(train, users, SHRINKAGE)
}

pub fn train_cu_prior_with(train: &RatingsTable, users: &[u32], shrinkage: f64) -> Result<CuPrior> {
    let by_user = train.by_user();
    let histories: Vec<&Vec<(u32, f64)>> = users
        .iter()
        .map(|u| by_user.get(u).filter(|h| !h.is_empty()).ok_or(Error::EmptyUserHistory(*u)))
        .collect::<Result<_>>()?;
    let d = users.len();
    let mut mean = DVector::zeros(d);
    let mut std = DVector::zeros(d);
    for (i, h) in histories.iter().enumerate() {
        let vals: Vec<f64> = h.iter().map(|p| p.1).collect();
        mean[i] = vals.iter().sum::<f64>() / vals.len() as f64;
        std[i] = sample_std(&vals).max(STD_FLOOR);
    }
    let mut corr = DMatrix::identity(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let r = shrunk_pearson(histories[i], histories[j], shrinkage);
            corr[(i, j)] = r;
            corr[(j, i)] = r;
        }
    }
    Ok(CuPrior {
        users: users.to_vec(),
        mean,
        std,
        corr: clamp_correlation_psd(corr),
    })
}
