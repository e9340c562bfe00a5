//! Domain types shared by every module.
//!
//! Load times are integer milliseconds and all aggregate sums are exact
//! integers, so merging partition results is order independent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One page view.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MetricRecord {
    pub member_id: u64,
    /// Days since 1970-01-01.
    pub day: i32,
    pub geo: String,
    pub platform: String,
    pub page_key: String,
    pub load_time_ms: u32,
}

/// One experiment-membership event.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExposureRecord {
    pub member_id: u64,
    pub experiment_id: String,
    pub segment_id: String,
    pub variant: String,
    pub day: i32,
}

/// Dense index of an (experiment, segment, variant) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariantKey(pub u32);

/// Dense index of a (geo, platform, page key) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DimensionKey(pub u32);

/// Exact histogram of integer load times.
///
/// Stored as `(value, count)` pairs sorted by value with no zero counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SparseHistogram {
    bins: Vec<(u32, u64)>,
    total: u64,
}

impl SparseHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a histogram from raw observations.
    pub fn from_values(values: &[u32]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        Self::from_sorted(&sorted)
    }

    /// Builds a histogram from observations that are already sorted ascending.
    pub fn from_sorted(sorted: &[u32]) -> Self {
        debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
        let mut bins: Vec<(u32, u64)> = Vec::new();
        for &v in sorted {
            match bins.last_mut() {
                Some((last, c)) if *last == v => *c += 1,
                _ => bins.push((v, 1)),
            }
        }
        Self {
            bins,
            total: sorted.len() as u64,
        }
    }

    /// Builds a histogram from arbitrary `(value, count)` pairs; duplicates
    /// are summed and zero counts dropped.
    pub fn from_counts<I: IntoIterator<Item = (u32, u64)>>(counts: I) -> Self {
        let mut pairs: Vec<(u32, u64)> = counts.into_iter().filter(|&(_, c)| c > 0).collect();
        pairs.sort_unstable_by_key(|&(v, _)| v);
        let mut bins: Vec<(u32, u64)> = Vec::with_capacity(pairs.len());
        let mut total = 0;
        for (v, c) in pairs {
            total += c;
            match bins.last_mut() {
                Some((last, acc)) if *last == v => *acc += c,
                _ => bins.push((v, c)),
            }
        }
        Self { bins, total }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Number of distinct values.
    pub fn distinct(&self) -> usize {
        self.bins.len()
    }

    pub fn min(&self) -> Option<u32> {
        self.bins.first().map(|&(v, _)| v)
    }

    pub fn max(&self) -> Option<u32> {
        self.bins.last().map(|&(v, _)| v)
    }

    /// `(value, count)` pairs in ascending value order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.bins.iter().copied()
    }

    /// Count of observations equal to `value`.
    pub fn count(&self, value: u32) -> u64 {
        match self.bins.binary_search_by_key(&value, |&(v, _)| v) {
            Ok(i) => self.bins[i].1,
            Err(_) => 0,
        }
    }

    /// Count of observations `<= value`.
    pub fn count_le(&self, value: u32) -> u64 {
        let end = self.bins.partition_point(|&(v, _)| v <= value);
        self.bins[..end].iter().map(|&(_, c)| c).sum()
    }

    /// Count of observations in the closed range `[lo, hi]`.
    pub fn count_between(&self, lo: u32, hi: u32) -> u64 {
        if lo > hi {
            return 0;
        }
        let start = self.bins.partition_point(|&(v, _)| v < lo);
        let end = self.bins.partition_point(|&(v, _)| v <= hi);
        self.bins[start..end].iter().map(|&(_, c)| c).sum()
    }

    /// Adds every count of `other` into a new histogram.
    pub fn merge(&self, other: &Self) -> Self {
        let mut bins = Vec::with_capacity(self.bins.len() + other.bins.len());
        let (mut i, mut j) = (0, 0);
        while i < self.bins.len() && j < other.bins.len() {
            let (a, ca) = self.bins[i];
            let (b, cb) = other.bins[j];
            match a.cmp(&b) {
                std::cmp::Ordering::Less => {
                    bins.push((a, ca));
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    bins.push((b, cb));
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    bins.push((a, ca + cb));
                    i += 1;
                    j += 1;
                }
            }
        }
        bins.extend_from_slice(&self.bins[i..]);
        bins.extend_from_slice(&other.bins[j..]);
        Self {
            bins,
            total: self.total + other.total,
        }
    }

    /// Multiplies every value by `factor`.
    pub fn scaled(&self, factor: u32) -> Self {
        Self::from_counts(self.bins.iter().map(|&(v, c)| (v * factor, c)))
    }
}

/// Per-member counts against one threshold and one density interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemberAggregate {
    pub member_id: u64,
    /// Page views.
    pub views: u64,
    /// Views with load time `<=` the threshold.
    pub at_or_below: u64,
    /// Views inside the density interval.
    pub in_interval: u64,
}

/// Mergeable sums over active members feeding the clustered variance.
///
/// Fields are exact integers; merge is elementwise addition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct MomentSums {
    pub n0: u64,
    pub sum_j: u128,
    pub sum_p: u128,
    pub sum_jj: u128,
    pub sum_pp: u128,
    pub sum_jp: u128,
    pub sum_w: u128,
}

impl MomentSums {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn add_member(&mut self, agg: &MemberAggregate) {
        let j = agg.at_or_below as u128;
        let p = agg.views as u128;
        self.n0 += 1;
        self.sum_j += j;
        self.sum_p += p;
        self.sum_jj += j * j;
        self.sum_pp += p * p;
        self.sum_jp += j * p;
        self.sum_w += agg.in_interval as u128;
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            n0: self.n0 + other.n0,
            sum_j: self.sum_j + other.sum_j,
            sum_p: self.sum_p + other.sum_p,
            sum_jj: self.sum_jj + other.sum_jj,
            sum_pp: self.sum_pp + other.sum_pp,
            sum_jp: self.sum_jp + other.sum_jp,
            sum_w: self.sum_w + other.sum_w,
        }
    }
}

impl<'a> FromIterator<&'a MemberAggregate> for MomentSums {
    fn from_iter<I: IntoIterator<Item = &'a MemberAggregate>>(iter: I) -> Self {
        let mut m = MomentSums::zero();
        for agg in iter {
            m.add_member(agg);
        }
        m
    }
}

/// Variance estimation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ProposedFixed,
    ProposedDynamic,
    NaiveIid,
    Bootstrap,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::ProposedFixed,
        Method::ProposedDynamic,
        Method::NaiveIid,
        Method::Bootstrap,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::ProposedFixed => "proposed_fixed",
            Method::ProposedDynamic => "proposed_dynamic",
            Method::NaiveIid => "naive_iid",
            Method::Bootstrap => "bootstrap",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method '{s}'"))
    }
}

/// A sample quantile with its estimated standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileEstimate {
    pub q: f64,
    pub quantile_ms: u32,
    pub stddev_ms: f64,
    pub method: Method,
    /// Estimated density at the quantile, per millisecond.
    pub density: f64,
    pub interval_halfwidth_ms: f64,
    /// Active members.
    pub n0: u64,
    pub total_views: u64,
}

/// Two-sample normal test on a quantile difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonResult {
    pub delta_ms: f64,
    pub stderr_ms: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Page-view load times grouped by member.
///
/// Members with no views may be present; estimators only look at active
/// members.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    members: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn new(members: Vec<Vec<u32>>) -> Self {
        Self { members }
    }

    pub fn members(&self) -> &[Vec<u32>] {
        &self.members
    }

    pub fn into_members(self) -> Vec<Vec<u32>> {
        self.members
    }

    pub fn push_member(&mut self, views: Vec<u32>) {
        self.members.push(views);
    }

    /// Members with at least one view.
    pub fn active(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.members
            .iter()
            .filter(|v| !v.is_empty())
            .map(Vec::as_slice)
    }

    pub fn active_members(&self) -> usize {
        self.active().count()
    }

    pub fn total_views(&self) -> u64 {
        self.members.iter().map(|v| v.len() as u64).sum()
    }

    /// Histogram of every view in the dataset.
    pub fn histogram(&self) -> SparseHistogram {
        let mut all: Vec<u32> = Vec::with_capacity(self.total_views() as usize);
        for v in &self.members {
            all.extend_from_slice(v);
        }
        all.sort_unstable();
        SparseHistogram::from_sorted(&all)
    }
}

impl From<Vec<Vec<u32>>> for Dataset {
    fn from(members: Vec<Vec<u32>>) -> Self {
        Self::new(members)
    }
}
