//! Quantile metrics for A/B tests with member-clustered observations.
//!
//! Page views from one member are correlated, so the classical i.i.d.
//! asymptotic variance of a sample quantile badly underestimates the real
//! sampling variability. This crate implements a cluster-aware asymptotic
//! estimator built from per-member counts, a member-level bootstrap used as
//! ground truth, and a partitioned batch pipeline whose per-partition
//! aggregates (histograms and moment sums) merge exactly.
//!
//! Module map:
//!
//! - [`types`]: shared domain values (records, keys, histograms, moment sums).
//! - [`estimators`]: quantiles, density, the clustered and naive variance
//!   estimators and the two-sample comparison.
//! - [`bootstrap`]: seeded member-level bootstrap.
//! - [`pipeline`]: normalization, exposure bitmaps, partitioned aggregation.
//! - [`ingest`]: CSV parsing, run configuration and report rows.
//! - [`evalharness`]: synthetic clustered data and the evaluation protocol.

pub mod bootstrap;
pub mod cli;
pub mod estimators;
pub mod evalharness;
pub mod ingest;
pub mod pipeline;
pub mod rng;
pub mod types;

pub use bootstrap::{bootstrap_stddev, bootstrap_stddevs, BootstrapResult};
pub use estimators::{
    compare, density_estimate, empirical_quantile, estimate, estimate_by_method, member_aggregates,
    sigma2_pj, variance_naive_iid, variance_proposed, DensityEstimate, Interval, IntervalMode,
    StatsError,
};
pub use types::{
    ComparisonResult, Dataset, DimensionKey, ExposureRecord, MemberAggregate, Method, MetricRecord,
    MomentSums, QuantileEstimate, SparseHistogram, VariantKey,
};

/// Default half-width of the density interval, in milliseconds.
pub const DEFAULT_HALFWIDTH_MS: f64 = 50.0;

/// Default number of bootstrap replicates.
pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 1000;
