use thiserror::Error;

/// Errors produced by the belief algebra, solvers, policies and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("covariance block is singular even after jitter")]
    SingularBlock,

    #[error("covariance matrix is not positive semi-definite")]
    NotPsd,

    #[error("covariance matrix is not symmetric (max relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("coordinate {index} has non-positive variance {variance}")]
    ZeroVariance { index: usize, variance: f64 },

    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),

    #[error("index {0} is not in the available pool")]
    IndexOutOfPool(usize),

    #[error("budget of {requested} exceeds the {available} available users")]
    BudgetExceedsPool { requested: usize, available: usize },

    #[error("user {0} would be selected twice")]
    RepeatedUser(usize),

    #[error("enumeration would visit {subsets} subsets (limit {limit})")]
    CombinatorialBlowup { subsets: u128, limit: u128 },

    #[error("two pairwise covariances are equal; the closed form needs a strict ordering")]
    DegenerateCovariances,

    #[error("policy {policy} needs a {needs} instance")]
    VariantMismatch {
        policy: &'static str,
        needs: &'static str,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate rating for user {user}, item {item}")]
    DuplicatePair { line: usize, user: u32, item: u32 },

    #[error("only {found} items have at least {min_ratings} ratings, {needed} needed")]
    InsufficientItems {
        found: usize,
        needed: usize,
        min_ratings: usize,
    },

    #[error("user {0} has no training ratings")]
    EmptyUserHistory(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
