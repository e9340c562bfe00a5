//! Member-level bootstrap of the sample-quantile standard deviation.
//!
//! Each replicate draws `n0` active members with replacement, pools their
//! views and takes the type-1 quantile. Whole members are resampled so the
//! within-member dependence is kept. Replicate `k` draws from ChaCha stream
//! `k` of the seed, so the result is identical however replicates are
//! scheduled across threads.

use rand::Rng;
use rayon::prelude::*;

use crate::estimators::{quantile_rank, Result, StatsError};
use crate::rng::stream_rng;
use crate::types::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub q: f64,
    /// Sample standard deviation (denominator `B - 1`) of the replicates.
    pub stddev_ms: f64,
    pub mean_quantile_ms: f64,
    pub replicate_quantiles: Vec<u32>,
    pub replicates: usize,
    pub seed: u64,
}

/// Bootstrap standard deviation of the `q` sample quantile.
pub fn bootstrap_stddev(
    dataset: &Dataset,
    q: f64,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    let mut out = bootstrap_stddevs(dataset, &[q], replicates, seed)?;
    Ok(out.pop().expect("one quantile requested"))
}

/// Bootstraps several quantiles from the same replicates.
///
/// The result for each `q` equals what [`bootstrap_stddev`] returns for that
/// `q` alone with the same seed.
pub fn bootstrap_stddevs(
    dataset: &Dataset,
    qs: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<Vec<BootstrapResult>> {
    let active = dataset.active_members() as u64;
    if active < 2 {
        return Err(StatsError::InsufficientMembers {
            got: active,
            needed: 2,
        });
    }
    run(dataset, qs, replicates, seed)
}

/// Views re-coded as indices into the sorted distinct values, stored flat.
struct Compressed {
    distinct: Vec<u32>,
    offsets: Vec<usize>,
    codes: Vec<u32>,
}

impl Compressed {
    fn new(dataset: &Dataset) -> Self {
        let hist = dataset.histogram();
        let distinct: Vec<u32> = hist.iter().map(|(v, _)| v).collect();
        let mut offsets = vec![0];
        let mut codes = Vec::with_capacity(hist.total() as usize);
        for views in dataset.active() {
            for &x in views {
                let code = distinct.binary_search(&x).expect("value is in histogram");
                codes.push(code as u32);
            }
            offsets.push(codes.len());
        }
        Self {
            distinct,
            offsets,
            codes,
        }
    }

    fn members(&self) -> usize {
        self.offsets.len() - 1
    }

    fn views(&self, member: usize) -> &[u32] {
        &self.codes[self.offsets[member]..self.offsets[member + 1]]
    }
}

pub(crate) fn run(
    dataset: &Dataset,
    qs: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<Vec<BootstrapResult>> {
    for &q in qs {
        if !(q > 0.0 && q < 1.0) {
            return Err(StatsError::InvalidQuantile(q));
        }
    }
    if replicates < 2 {
        return Err(StatsError::InvalidArgument(format!(
            "need at least 2 replicates, got {replicates}"
        )));
    }
    let data = Compressed::new(dataset);
    let n = data.members();
    if n == 0 {
        return Err(StatsError::EmptyData);
    }

    // One row of quantiles (one per q) per replicate.
    let rows: Vec<Vec<u32>> = (0..replicates)
        .into_par_iter()
        .map_init(
            || vec![0u32; data.distinct.len()],
            |counts, k| {
                let mut rng = stream_rng(seed, k as u64);
                counts.fill(0);
                let mut total: u64 = 0;
                for _ in 0..n {
                    let views = data.views(rng.random_range(0..n));
                    total += views.len() as u64;
                    for &c in views {
                        counts[c as usize] += 1;
                    }
                }
                pooled_quantiles(counts, total, qs, &data.distinct)
            },
        )
        .collect();

    Ok(qs
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let reps: Vec<u32> = rows.iter().map(|r| r[i]).collect();
            let (mean, sd) = mean_sd(&reps);
            BootstrapResult {
                q,
                stddev_ms: sd,
                mean_quantile_ms: mean,
                replicate_quantiles: reps,
                replicates,
                seed,
            }
        })
        .collect())
}

fn pooled_quantiles(counts: &[u32], total: u64, qs: &[f64], distinct: &[u32]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..qs.len()).collect();
    order.sort_by(|&a, &b| qs[a].total_cmp(&qs[b]));
    let mut out = vec![0; qs.len()];
    let mut cum: u64 = 0;
    let mut idx = 0;
    for &qi in &order {
        let rank = quantile_rank(qs[qi], total);
        while cum + (counts[idx] as u64) < rank {
            cum += counts[idx] as u64;
            idx += 1;
        }
        out[qi] = distinct[idx];
    }
    out
}

fn mean_sd(xs: &[u32]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::empirical_quantile;
    use crate::types::SparseHistogram;

    #[test]
    fn one_member_has_zero_spread() {
        let ds = Dataset::new(vec![vec![10, 20, 30, 40]]);
        let r = run(&ds, &[0.5], 50, 1).unwrap().pop().unwrap();
        assert!(r.replicate_quantiles.iter().all(|&x| x == 20));
        assert_eq!(r.stddev_ms, 0.0);
        assert!(matches!(
            bootstrap_stddev(&ds, 0.5, 50, 1),
            Err(StatsError::InsufficientMembers { got: 1, .. })
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let ds = Dataset::new((0..50).map(|i| vec![i * 3 + 1, i * 5 + 2]).collect());
        let a = bootstrap_stddev(&ds, 0.9, 200, 11).unwrap();
        let b = bootstrap_stddev(&ds, 0.9, 200, 11).unwrap();
        assert_eq!(a.replicate_quantiles, b.replicate_quantiles);
        let c = bootstrap_stddev(&ds, 0.9, 200, 12).unwrap();
        assert_ne!(a.replicate_quantiles, c.replicate_quantiles);
    }

    #[test]
    fn multi_quantile_matches_single() {
        let ds = Dataset::new((0..40).map(|i| vec![i * 7 % 13, i, 100 - i]).collect());
        let both = bootstrap_stddevs(&ds, &[0.9, 0.5], 100, 3).unwrap();
        assert_eq!(both[0], bootstrap_stddev(&ds, 0.9, 100, 3).unwrap());
        assert_eq!(both[1], bootstrap_stddev(&ds, 0.5, 100, 3).unwrap());
    }

    #[test]
    fn pooled_quantile_matches_histogram_quantile() {
        let distinct = vec![3, 8, 9, 20];
        let counts = vec![2, 0, 5, 1];
        let hist = SparseHistogram::from_counts(
            distinct.iter().zip(&counts).map(|(&v, &c)| (v, c as u64)),
        );
        for q in [0.01, 0.25, 0.5, 0.875, 0.9, 0.99] {
            let got = pooled_quantiles(&counts, 8, &[q], &distinct)[0];
            assert_eq!(got, empirical_quantile(&hist, q).unwrap(), "q={q}");
        }
    }

    #[test]
    fn replicates_stay_within_observed_range() {
        let ds = Dataset::new((0..30).map(|i| vec![100 + i, 500 - i * 2]).collect());
        let r = bootstrap_stddev(&ds, 0.5, 300, 5).unwrap();
        assert!(r
            .replicate_quantiles
            .iter()
            .all(|&x| (100..=500).contains(&x)));
    }

    #[test]
    fn rejects_bad_arguments() {
        let ds = Dataset::new(vec![vec![1], vec![2]]);
        assert!(bootstrap_stddev(&ds, 0.5, 1, 0).is_err());
        assert!(bootstrap_stddev(&ds, 1.5, 10, 0).is_err());
    }
}
