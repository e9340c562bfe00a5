//! Quantile and quantile-variance estimators.
//!
//! The clustered estimator linearizes the per-view empirical CDF
//! `F_n(x) = sum_i J_i / sum_i P_i` as a ratio of two member-level means,
//! where `P_i` is member i's view count and `J_i` the number of those views at
//! or below `x`. The delta method gives
//!
//! ```text
//! sigma^2 = (mu_J / mu_P)^2 * ( S_JJ / mu_J^2 + S_PP / mu_P^2 - 2 S_JP / (mu_J mu_P) )
//! var(Q)  = sigma^2 / (n * f(Q)^2)
//! ```
//!
//! Everything is computed over active members only (`n0` members with at
//! least one view); zero-view members cancel out of `sigma^2 / n`.
//!
//! The density `f(Q)` is the share of views inside `[Q - d, Q + d]` divided by
//! the interval width. `d` is either fixed (50 ms by default) or set to twice
//! the standard deviation from a first fixed-width pass.

use statrs::function::erf::erfc;
use thiserror::Error;

use crate::types::{
    ComparisonResult, Dataset, MemberAggregate, Method, MomentSums, QuantileEstimate,
    SparseHistogram,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no observations")]
    EmptyData,
    #[error("need at least {needed} active members, got {got}")]
    InsufficientMembers { got: u64, needed: u64 },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("zero standard error with non-zero delta {delta_ms} ms")]
    DegenerateVariance { delta_ms: f64 },
    #[error("quantile fraction must be in (0, 1), got {0}")]
    InvalidQuantile(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = StatsError> = std::result::Result<T, E>;

/// How the density interval half-width is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalMode {
    /// One pass with the given half-width.
    Fixed,
    /// First pass with the fixed half-width, second pass with twice the
    /// first-pass standard deviation.
    Dynamic,
}

impl IntervalMode {
    pub fn method(self) -> Method {
        match self {
            IntervalMode::Fixed => Method::ProposedFixed,
            IntervalMode::Dynamic => Method::ProposedDynamic,
        }
    }
}

/// Closed interval `[center - halfwidth, center + halfwidth]` over integer
/// milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub center: u32,
    pub halfwidth: f64,
    lo: u32,
    hi: u32,
    empty: bool,
}

impl Interval {
    pub fn around(center: u32, halfwidth: f64) -> Self {
        let lo_f = center as f64 - halfwidth;
        let hi_f = center as f64 + halfwidth;
        let lo = lo_f.ceil().max(0.0);
        let hi = hi_f.floor().min(u32::MAX as f64);
        Self {
            center,
            halfwidth,
            lo: lo as u32,
            hi: hi as u32,
            empty: hi < lo,
        }
    }

    #[inline]
    pub fn contains(&self, x: u32) -> bool {
        !self.empty && x >= self.lo && x <= self.hi
    }

    /// Smallest and largest integers inside, if any.
    pub fn integer_bounds(&self) -> Option<(u32, u32)> {
        (!self.empty).then_some((self.lo, self.hi))
    }
}

/// Density estimate around a sample quantile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityEstimate {
    pub density: f64,
    pub halfwidth_ms: f64,
    pub views_in_interval: u64,
    pub total_views: u64,
}

impl DensityEstimate {
    pub fn from_counts(views_in_interval: u64, total_views: u64, halfwidth_ms: f64) -> Self {
        let density = views_in_interval as f64 / (total_views as f64 * 2.0 * halfwidth_ms);
        Self {
            density,
            halfwidth_ms,
            views_in_interval,
            total_views,
        }
    }
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(StatsError::InvalidQuantile(q))
    }
}

/// 1-based rank of the type-1 sample quantile among `total` sorted values:
/// `ceil(q * total)`, clamped to `[1, total]`.
///
/// The product is nudged down by a tiny tolerance so that `q * total` values
/// that are integers in exact arithmetic (0.1 * 30) are not pushed up a rank
/// by binary rounding.
pub fn quantile_rank(q: f64, total: u64) -> u64 {
    let raw = (q * total as f64 - 1e-7).ceil();
    (raw.max(1.0) as u64).min(total)
}

/// Smallest value whose cumulative share of the histogram is at least `q`.
pub fn empirical_quantile(hist: &SparseHistogram, q: f64) -> Result<u32> {
    check_q(q)?;
    if hist.is_empty() {
        return Err(StatsError::EmptyData);
    }
    let rank = quantile_rank(q, hist.total());
    let mut cum = 0;
    for (v, c) in hist.iter() {
        cum += c;
        if cum >= rank {
            return Ok(v);
        }
    }
    unreachable!("rank is bounded by total")
}

/// Counts one member's views against `threshold` and `interval`.
pub fn member_aggregates(
    member_id: u64,
    views: &[u32],
    threshold: u32,
    interval: &Interval,
) -> Result<MemberAggregate> {
    if views.is_empty() {
        return Err(StatsError::InvalidArgument(format!(
            "member {member_id} has no views"
        )));
    }
    let mut at_or_below = 0;
    let mut in_interval = 0;
    for &x in views {
        at_or_below += (x <= threshold) as u64;
        in_interval += interval.contains(x) as u64;
    }
    Ok(MemberAggregate {
        member_id,
        views: views.len() as u64,
        at_or_below,
        in_interval,
    })
}

/// Moment sums of every active member of `dataset`.
pub fn dataset_moments(dataset: &Dataset, threshold: u32, interval: &Interval) -> MomentSums {
    let mut sums = MomentSums::zero();
    for (i, views) in dataset.members().iter().enumerate() {
        if views.is_empty() {
            continue;
        }
        let agg = member_aggregates(i as u64, views, threshold, interval)
            .expect("active member has views");
        sums.add_member(&agg);
    }
    sums
}

/// Variance of the ratio linearization, `sigma0^2`, from active-member sums.
///
/// Uses unbiased (n0 - 1) (co)variances. The numerator
/// `C_JJ S_P^2 - 2 C_JP S_J S_P + C_PP S_J^2` with `C_xy = n0 S_xy - S_x S_y`
/// is evaluated in exact integer arithmetic when it fits in `i128`; it equals
/// `n0 S_P^2 sum_i (J_i - r P_i)^2` and so is never negative.
pub fn sigma2_pj(m: &MomentSums) -> Result<f64> {
    if m.n0 < 2 {
        return Err(StatsError::InsufficientMembers {
            got: m.n0,
            needed: 2,
        });
    }
    if m.sum_p == 0 {
        return Err(StatsError::DegenerateData("no page views".into()));
    }
    if m.sum_j == 0 {
        return Err(StatsError::DegenerateData(
            "no views at or below the threshold".into(),
        ));
    }
    match sigma2_exact(m) {
        Some(v) => Ok(v),
        None => sigma2_float(m),
    }
}

fn sigma2_exact(m: &MomentSums) -> Option<f64> {
    let n = i128::from(m.n0);
    let sj = i128::try_from(m.sum_j).ok()?;
    let sp = i128::try_from(m.sum_p).ok()?;
    let sjj = i128::try_from(m.sum_jj).ok()?;
    let spp = i128::try_from(m.sum_pp).ok()?;
    let sjp = i128::try_from(m.sum_jp).ok()?;

    let c_jj = n.checked_mul(sjj)?.checked_sub(sj.checked_mul(sj)?)?;
    let c_pp = n.checked_mul(spp)?.checked_sub(sp.checked_mul(sp)?)?;
    let c_jp = n.checked_mul(sjp)?.checked_sub(sj.checked_mul(sp)?)?;

    let a = c_jj.checked_mul(sp.checked_mul(sp)?)?;
    let b = c_jp.checked_mul(sj)?.checked_mul(sp)?.checked_mul(2)?;
    let c = c_pp.checked_mul(sj.checked_mul(sj)?)?;
    let numerator = a.checked_sub(b)?.checked_add(c)?;
    debug_assert!(numerator >= 0);

    let spf = sp as f64;
    let sp2 = spf * spf;
    Some(numerator as f64 * (m.n0 as f64) / ((m.n0 - 1) as f64 * (sp2 * sp2)))
}

/// Floating-point route, used when the exact numerator would overflow.
fn sigma2_float(m: &MomentSums) -> Result<f64> {
    let n = m.n0 as f64;
    let (sj, sp) = (m.sum_j as f64, m.sum_p as f64);
    let v_jj = (m.sum_jj as f64 - sj * sj / n) / (n - 1.0);
    let v_pp = (m.sum_pp as f64 - sp * sp / n) / (n - 1.0);
    let v_jp = (m.sum_jp as f64 - sj * sp / n) / (n - 1.0);
    let mu_p = sp / n;
    let r = sj / sp;
    let s2 = (v_jj - 2.0 * r * v_jp + r * r * v_pp) / (mu_p * mu_p);
    let scale = (v_jj + 2.0 * r * v_jp.abs() + r * r * v_pp) / (mu_p * mu_p);
    if s2 >= 0.0 {
        Ok(s2)
    } else if s2 >= -1e-9 * scale {
        Ok(0.0)
    } else {
        Err(StatsError::DegenerateData(format!(
            "negative ratio variance {s2:e}"
        )))
    }
}

/// Share of views within `[center - halfwidth, center + halfwidth]`, per ms.
pub fn density_estimate(
    hist: &SparseHistogram,
    center: u32,
    halfwidth: f64,
) -> Result<DensityEstimate> {
    if hist.is_empty() {
        return Err(StatsError::EmptyData);
    }
    if !(halfwidth > 0.0 && halfwidth.is_finite()) {
        return Err(StatsError::InvalidArgument(format!(
            "halfwidth must be positive, got {halfwidth}"
        )));
    }
    let interval = Interval::around(center, halfwidth);
    let inside = match interval.integer_bounds() {
        Some((lo, hi)) => hist.count_between(lo, hi),
        None => 0,
    };
    Ok(DensityEstimate::from_counts(
        inside,
        hist.total(),
        halfwidth,
    ))
}

/// Clustered standard deviation of the sample quantile:
/// `sqrt(sigma0^2 / (n0 f^2))`.
pub fn variance_proposed(aggregates: &MomentSums, density: &DensityEstimate) -> Result<f64> {
    if density.density.is_nan() || density.density <= 0.0 {
        return Err(StatsError::DegenerateData(
            "no views inside the density interval".into(),
        ));
    }
    let s2 = sigma2_pj(aggregates)?;
    let f = density.density;
    Ok((s2 / (aggregates.n0 as f64 * f * f)).sqrt())
}

/// Turns moment sums collected around `quantile_ms` into an estimate.
///
/// This is the single finalization step shared by the in-memory estimator
/// and the partitioned pipeline, so both produce identical bits.
pub fn finalize_proposed(
    q: f64,
    quantile_ms: u32,
    moments: &MomentSums,
    halfwidth: f64,
    method: Method,
) -> Result<QuantileEstimate> {
    let total_views = u64::try_from(moments.sum_p)
        .map_err(|_| StatsError::DegenerateData("view count overflow".into()))?;
    let in_interval = u64::try_from(moments.sum_w)
        .map_err(|_| StatsError::DegenerateData("view count overflow".into()))?;
    let density = DensityEstimate::from_counts(in_interval, total_views, halfwidth);
    let stddev_ms = variance_proposed(moments, &density)?;
    Ok(QuantileEstimate {
        q,
        quantile_ms,
        stddev_ms,
        method,
        density: density.density,
        interval_halfwidth_ms: halfwidth,
        n0: moments.n0,
        total_views,
    })
}

/// Second-pass half-width: twice the first-pass standard deviation, never
/// below the 1 ms data resolution.
pub fn dynamic_halfwidth(first_pass_stddev: f64) -> f64 {
    (2.0 * first_pass_stddev).max(1.0)
}

/// Sample quantile and clustered standard deviation of `dataset`.
///
/// `fixed_halfwidth` is the interval half-width in fixed mode and of the
/// first pass in dynamic mode.
pub fn estimate(
    dataset: &Dataset,
    q: f64,
    mode: IntervalMode,
    fixed_halfwidth: f64,
) -> Result<QuantileEstimate> {
    check_q(q)?;
    if !(fixed_halfwidth > 0.0 && fixed_halfwidth.is_finite()) {
        return Err(StatsError::InvalidArgument(format!(
            "halfwidth must be positive, got {fixed_halfwidth}"
        )));
    }
    let n0 = dataset.active_members() as u64;
    if n0 < 2 {
        return Err(StatsError::InsufficientMembers { got: n0, needed: 2 });
    }
    let hist = dataset.histogram();
    let quantile = empirical_quantile(&hist, q)?;

    let first = dataset_moments(
        dataset,
        quantile,
        &Interval::around(quantile, fixed_halfwidth),
    );
    let fixed = finalize_proposed(q, quantile, &first, fixed_halfwidth, Method::ProposedFixed)?;
    match mode {
        IntervalMode::Fixed => Ok(fixed),
        IntervalMode::Dynamic => {
            let halfwidth = dynamic_halfwidth(fixed.stddev_ms);
            let second = dataset_moments(dataset, quantile, &Interval::around(quantile, halfwidth));
            finalize_proposed(q, quantile, &second, halfwidth, Method::ProposedDynamic)
        }
    }
}

/// Classical i.i.d. asymptotic standard deviation, ignoring clustering.
///
/// Evaluated as the clustered estimator with every view treated as its own
/// member, which is `sqrt(p(1 - p) N / (N - 1) / (N f^2))` with
/// `p = F_n(Q)`. On data with one view per member the two estimators agree
/// exactly.
pub fn variance_naive_iid(
    hist: &SparseHistogram,
    q: f64,
    halfwidth: f64,
) -> Result<QuantileEstimate> {
    check_q(q)?;
    if hist.total() < 2 {
        return Err(StatsError::EmptyData);
    }
    let quantile = empirical_quantile(hist, q)?;
    let density = density_estimate(hist, quantile, halfwidth)?;
    let n = hist.total() as u128;
    let below = hist.count_le(quantile) as u128;
    let moments = MomentSums {
        n0: hist.total(),
        sum_j: below,
        sum_p: n,
        sum_jj: below,
        sum_pp: n,
        sum_jp: below,
        sum_w: density.views_in_interval as u128,
    };
    finalize_proposed(q, quantile, &moments, halfwidth, Method::NaiveIid)
}

/// Estimate of the `q` quantile with the standard deviation from `method`.
///
/// `replicates` and `seed` are only used by [`Method::Bootstrap`], whose
/// quantile is the full-sample quantile.
pub fn estimate_by_method(
    dataset: &Dataset,
    q: f64,
    method: Method,
    fixed_halfwidth: f64,
    replicates: usize,
    seed: u64,
) -> Result<QuantileEstimate> {
    match method {
        Method::ProposedFixed => estimate(dataset, q, IntervalMode::Fixed, fixed_halfwidth),
        Method::ProposedDynamic => estimate(dataset, q, IntervalMode::Dynamic, fixed_halfwidth),
        Method::NaiveIid => variance_naive_iid(&dataset.histogram(), q, fixed_halfwidth),
        Method::Bootstrap => {
            let hist = dataset.histogram();
            let quantile = empirical_quantile(&hist, q)?;
            let boot = crate::bootstrap::bootstrap_stddev(dataset, q, replicates, seed)?;
            Ok(QuantileEstimate {
                q,
                quantile_ms: quantile,
                stddev_ms: boot.stddev_ms,
                method,
                density: f64::NAN,
                interval_halfwidth_ms: f64::NAN,
                n0: dataset.active_members() as u64,
                total_views: hist.total(),
            })
        }
    }
}

/// Normal-approximation test of `treatment - control`.
pub fn compare(
    control: &QuantileEstimate,
    treatment: &QuantileEstimate,
) -> Result<ComparisonResult> {
    if control.q != treatment.q {
        return Err(StatsError::InvalidArgument(format!(
            "quantiles differ: {} vs {}",
            control.q, treatment.q
        )));
    }
    if control.method != treatment.method {
        return Err(StatsError::InvalidArgument(format!(
            "methods differ: {} vs {}",
            control.method, treatment.method
        )));
    }
    let delta_ms = treatment.quantile_ms as f64 - control.quantile_ms as f64;
    let stderr_ms = (treatment.stddev_ms.powi(2) + control.stddev_ms.powi(2)).sqrt();
    if stderr_ms == 0.0 {
        if delta_ms == 0.0 {
            return Ok(ComparisonResult {
                delta_ms,
                stderr_ms,
                z: 0.0,
                p_value: 1.0,
            });
        }
        return Err(StatsError::DegenerateVariance { delta_ms });
    }
    let z = delta_ms / stderr_ms;
    Ok(ComparisonResult {
        delta_ms,
        stderr_ms,
        z,
        p_value: two_sided_p(z),
    })
}

/// `2 (1 - Phi(|z|))`.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs())
    }

    fn moments_of(pairs: &[(u64, u64)]) -> MomentSums {
        let aggs: Vec<MemberAggregate> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(j, p))| MemberAggregate {
                member_id: i as u64,
                views: p,
                at_or_below: j,
                in_interval: 0,
            })
            .collect();
        aggs.iter().collect()
    }

    #[test]
    fn quantile_single_observation() {
        let h = SparseHistogram::from_values(&[5]);
        assert_eq!(empirical_quantile(&h, 0.5).unwrap(), 5);
    }

    #[test]
    fn quantile_type1_on_one_to_ten() {
        let h = SparseHistogram::from_values(&(1..=10).collect::<Vec<_>>());
        assert_eq!(empirical_quantile(&h, 0.9).unwrap(), 9);
        assert_eq!(empirical_quantile(&h, 0.5).unwrap(), 5);
        assert_eq!(empirical_quantile(&h, 0.91).unwrap(), 10);
        assert_eq!(empirical_quantile(&h, 0.01).unwrap(), 1);
    }

    #[test]
    fn quantile_rank_snaps_exact_products() {
        assert_eq!(quantile_rank(0.1, 30), 3);
        assert_eq!(quantile_rank(0.9, 10), 9);
        assert_eq!(quantile_rank(0.3, 10), 3);
        assert_eq!(quantile_rank(0.001, 10), 1);
    }

    #[test]
    fn quantile_errors() {
        assert_eq!(
            empirical_quantile(&SparseHistogram::new(), 0.5),
            Err(StatsError::EmptyData)
        );
        let h = SparseHistogram::from_values(&[1]);
        assert!(matches!(
            empirical_quantile(&h, 0.0),
            Err(StatsError::InvalidQuantile(_))
        ));
        assert!(matches!(
            empirical_quantile(&h, 1.0),
            Err(StatsError::InvalidQuantile(_))
        ));
    }

    #[test]
    fn member_aggregate_counts() {
        let agg =
            member_aggregates(0, &[100, 200, 300], 200, &Interval::around(200, 50.0)).unwrap();
        // [150, 250]
        assert_eq!((agg.views, agg.at_or_below, agg.in_interval), (3, 2, 1));

        let agg = member_aggregates(0, &[50], 49, &Interval::around(50, 50.0)).unwrap();
        assert_eq!((agg.views, agg.at_or_below, agg.in_interval), (1, 0, 1));

        assert!(member_aggregates(0, &[], 10, &Interval::around(10, 1.0)).is_err());
    }

    #[test]
    fn interval_is_closed_and_handles_fractions() {
        let i = Interval::around(50, 10.5);
        assert_eq!(i.integer_bounds(), Some((40, 60)));
        assert!(i.contains(40) && i.contains(60) && !i.contains(61));
        let i = Interval::around(50, 10.0);
        assert!(i.contains(40) && i.contains(60));
        let i = Interval::around(3, 50.0);
        assert_eq!(i.integer_bounds(), Some((0, 53)));
        let i = Interval::around(3, 0.25);
        assert_eq!(i.integer_bounds(), Some((3, 3)));
    }

    #[test]
    fn sigma2_iid_indicator_case() {
        // P = 1, J in {0, 1}: reduces to the sample variance of J.
        let pairs: Vec<(u64, u64)> = (0..10).map(|i| ((i < 9) as u64, 1)).collect();
        let s2 = sigma2_pj(&moments_of(&pairs)).unwrap();
        let p: f64 = 0.9;
        assert!(approx(s2, p * (1.0 - p) * 10.0 / 9.0, 1e-12));
    }

    #[test]
    fn sigma2_proportional_is_zero() {
        let pairs = [(2, 4), (1, 2), (3, 6), (5, 10)];
        assert_eq!(sigma2_pj(&moments_of(&pairs)).unwrap(), 0.0);
    }

    #[test]
    fn sigma2_matches_direct_pair_formula() {
        let pairs = [(1u64, 2u64), (3, 4), (0, 1)];
        let n = pairs.len() as f64;
        let js: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let ps: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let mj = js.iter().sum::<f64>() / n;
        let mp = ps.iter().sum::<f64>() / n;
        let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - ma) * (y - mb))
                .sum::<f64>()
                / (n - 1.0)
        };
        let (vjj, vpp, vjp) = (
            cov(&js, mj, &js, mj),
            cov(&ps, mp, &ps, mp),
            cov(&js, mj, &ps, mp),
        );
        let expected =
            (mj / mp).powi(2) * (vjj / (mj * mj) + vpp / (mp * mp) - 2.0 * vjp / (mj * mp));
        let got = sigma2_pj(&moments_of(&pairs)).unwrap();
        assert!(approx(got, expected, 1e-12), "{got} vs {expected}");
    }

    #[test]
    fn sigma2_float_route_agrees_with_exact() {
        let pairs = [(1u64, 2u64), (3, 4), (0, 1), (7, 9), (2, 2)];
        let m = moments_of(&pairs);
        let exact = sigma2_exact(&m).unwrap();
        let float = sigma2_float(&m).unwrap();
        assert!(approx(exact, float, 1e-12));
    }

    #[test]
    fn sigma2_errors() {
        assert!(matches!(
            sigma2_pj(&moments_of(&[(1, 1)])),
            Err(StatsError::InsufficientMembers { got: 1, .. })
        ));
        assert!(matches!(
            sigma2_pj(&moments_of(&[(0, 1), (0, 3)])),
            Err(StatsError::DegenerateData(_))
        ));
    }

    #[test]
    fn density_on_uniform_counts() {
        let h = SparseHistogram::from_values(&(1..=100).collect::<Vec<_>>());
        let d = density_estimate(&h, 50, 10.5).unwrap();
        assert_eq!(d.views_in_interval, 21);
        assert!(approx(d.density, 0.01, 1e-12));
    }

    #[test]
    fn density_single_value() {
        let h = SparseHistogram::from_values(&[50, 50, 50, 50]);
        let d = density_estimate(&h, 50, 50.0).unwrap();
        assert_eq!(d.views_in_interval, 4);
        assert!(approx(d.density, 0.01, 1e-12));
    }

    #[test]
    fn density_rejects_bad_input() {
        let h = SparseHistogram::from_values(&[1, 2]);
        assert!(density_estimate(&h, 1, 0.0).is_err());
        assert!(density_estimate(&h, 1, f64::NAN).is_err());
        assert_eq!(
            density_estimate(&SparseHistogram::new(), 1, 1.0),
            Err(StatsError::EmptyData)
        );
    }

    #[test]
    fn identical_members_give_zero_stddev() {
        let ds = Dataset::new(vec![vec![100, 200, 300]; 5]);
        let est = estimate(&ds, 0.5, IntervalMode::Fixed, 50.0).unwrap();
        assert_eq!(est.quantile_ms, 200);
        assert_eq!(est.stddev_ms, 0.0);
        let dynamic = estimate(&ds, 0.5, IntervalMode::Dynamic, 50.0).unwrap();
        assert_eq!(dynamic.interval_halfwidth_ms, 1.0);
        assert_eq!(dynamic.stddev_ms, 0.0);
    }

    #[test]
    fn estimate_requires_two_active_members() {
        let ds = Dataset::new(vec![vec![1, 2, 3], vec![]]);
        assert!(matches!(
            estimate(&ds, 0.5, IntervalMode::Fixed, 50.0),
            Err(StatsError::InsufficientMembers { got: 1, .. })
        ));
    }

    #[test]
    fn single_view_members_match_naive() {
        let values: Vec<u32> = (0..200).map(|i| 1000 + (i * 37 % 101) * 7).collect();
        let ds = Dataset::new(values.iter().map(|&v| vec![v]).collect());
        let prop = estimate(&ds, 0.9, IntervalMode::Fixed, 50.0).unwrap();
        let naive = variance_naive_iid(&ds.histogram(), 0.9, 50.0).unwrap();
        assert_eq!(prop.quantile_ms, naive.quantile_ms);
        assert!(approx(prop.stddev_ms, naive.stddev_ms, 1e-12));
    }

    fn est(q: u32, sd: f64) -> QuantileEstimate {
        QuantileEstimate {
            q: 0.5,
            quantile_ms: q,
            stddev_ms: sd,
            method: Method::ProposedDynamic,
            density: 0.01,
            interval_halfwidth_ms: 10.0,
            n0: 100,
            total_views: 1000,
        }
    }

    #[test]
    fn compare_identical_is_p_one() {
        let r = compare(&est(100, 3.0), &est(100, 3.0)).unwrap();
        assert_eq!(r.delta_ms, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn compare_at_1_96_is_five_percent() {
        let sd = 10.0 / 1.96 / 2f64.sqrt();
        let r = compare(&est(100, sd), &est(110, sd)).unwrap();
        assert!(approx(r.stderr_ms, 10.0 / 1.96, 1e-12));
        assert!((r.z - 1.96).abs() < 1e-12);
        assert!((r.p_value - 0.05).abs() < 1e-3, "{}", r.p_value);
    }

    #[test]
    fn compare_degenerate_cases() {
        let r = compare(&est(100, 0.0), &est(100, 0.0)).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(matches!(
            compare(&est(100, 0.0), &est(101, 0.0)),
            Err(StatsError::DegenerateVariance { .. })
        ));
        let mut other = est(100, 1.0);
        other.method = Method::NaiveIid;
        assert!(compare(&est(100, 1.0), &other).is_err());
        other = est(100, 1.0);
        other.q = 0.9;
        assert!(compare(&est(100, 1.0), &other).is_err());
    }
}
