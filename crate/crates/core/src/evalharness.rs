//! Synthetic clustered data and the estimator evaluation protocol.
//!
//! Data model: member `i` has `P_i` views, `P_i - 1 ~ Geometric(1 / mean)`,
//! a member effect `a_i ~ N(0, tau^2)` and view load times
//! `round(exp(m + a_i + e_ij))` with `e_ij ~ N(0, sigma_w^2)`. The log-scale
//! intraclass correlation is `tau^2 / (tau^2 + sigma_w^2)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::bootstrap::bootstrap_stddevs;
use crate::estimators::{compare, estimate_by_method, StatsError};
use crate::ingest::{format_day, parse_day, EXPOSURES_HEADER, METRICS_HEADER};
use crate::rng::{derive_seed, stream_rng};
use crate::types::{Dataset, ExposureRecord, Method, MetricRecord};

/// Relative difference from the bootstrap above which an estimate counts as
/// an error.
pub const ERROR_THRESHOLD: f64 = 0.05;

/// Default log-scale location, `ln(6000 ms)`.
///
/// Load times are whole milliseconds, so the quantile's standard deviation
/// should span many of them or the integer interval counts dominate the
/// density error.
pub const DEFAULT_LOG_LOCATION: f64 = 8.699_514_748_210_191;

/// Default total log-scale variance `tau^2 + sigma_w^2`.
pub const DEFAULT_LOG_VARIANCE: f64 = 0.42;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorSpec {
    pub n_members: usize,
    /// Mean of the zero-truncated geometric view count.
    pub mean_views: f64,
    pub log_location: f64,
    pub member_effect_sd: f64,
    pub within_member_sd: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Settings with the given log-scale ICC and the default location and total
    /// log variance.
    pub fn with_icc(n_members: usize, mean_views: f64, icc: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&icc), "icc must be in [0, 1]");
        Self {
            n_members,
            mean_views,
            log_location: DEFAULT_LOG_LOCATION,
            member_effect_sd: (icc * DEFAULT_LOG_VARIANCE).sqrt(),
            within_member_sd: ((1.0 - icc) * DEFAULT_LOG_VARIANCE).sqrt(),
            seed,
        }
    }

    pub fn icc(&self) -> f64 {
        let (t, w) = (self.member_effect_sd.powi(2), self.within_member_sd.powi(2));
        if t + w == 0.0 {
            0.0
        } else {
            t / (t + w)
        }
    }
}

fn normal(sd: f64) -> Option<Normal<f64>> {
    (sd > 0.0).then(|| Normal::new(0.0, sd).expect("finite positive sd"))
}

/// Samples one member: view count and load times.
struct MemberSampler {
    views: Option<Geometric>,
    effect: Option<Normal<f64>>,
    noise: Option<Normal<f64>>,
    location: f64,
}

impl MemberSampler {
    fn new(spec: &GeneratorSpec) -> Self {
        assert!(spec.member_effect_sd >= 0.0 && spec.within_member_sd >= 0.0);
        assert!(spec.mean_views >= 1.0, "mean view count must be at least 1");
        Self {
            views: (spec.mean_views > 1.0)
                .then(|| Geometric::new(1.0 / spec.mean_views).expect("p in (0, 1)")),
            effect: normal(spec.member_effect_sd),
            noise: normal(spec.within_member_sd),
            location: spec.log_location,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R, shift: f64) -> Vec<u32> {
        let count = 1 + self.views.as_ref().map_or(0, |g| g.sample(rng));
        let effect = self.effect.as_ref().map_or(0.0, |d| d.sample(rng));
        (0..count)
            .map(|_| {
                let e = self.noise.as_ref().map_or(0.0, |d| d.sample(rng));
                load_time(self.location + shift + effect + e)
            })
            .collect()
    }
}

fn load_time(log_ms: f64) -> u32 {
    log_ms.exp().round().clamp(0.0, u32::MAX as f64) as u32
}

/// Generates one dataset; deterministic in `spec.seed`.
pub fn generate(spec: &GeneratorSpec) -> Dataset {
    let sampler = MemberSampler::new(spec);
    let mut rng = stream_rng(spec.seed, 0);
    Dataset::new(
        (0..spec.n_members)
            .map(|_| sampler.sample(&mut rng, 0.0))
            .collect(),
    )
}

/// One-way ANOVA intraclass correlation of log load times.
pub fn log_scale_icc(dataset: &Dataset) -> f64 {
    let groups: Vec<Vec<f64>> = dataset
        .active()
        .map(|v| v.iter().map(|&x| (x.max(1) as f64).ln()).collect())
        .collect();
    let k = groups.len() as f64;
    let n: f64 = groups.iter().map(|g| g.len() as f64).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    let mut sum_sq_sizes = 0.0;
    for g in &groups {
        let ni = g.len() as f64;
        let mean = g.iter().sum::<f64>() / ni;
        ssb += ni * (mean - grand).powi(2);
        ssw += g.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        sum_sq_sizes += ni * ni;
    }
    let msb = ssb / (k - 1.0);
    let msw = ssw / (n - k);
    let n_adj = (n - sum_sq_sizes / n) / (k - 1.0);
    (msb - msw) / (msb + (n_adj - 1.0) * msw)
}

/// Shape of the CSV files written by [`write_experiment_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentLayout {
    pub experiment_id: String,
    pub segment_id: String,
    /// First entry is the control.
    pub variants: Vec<String>,
    /// Log-scale shift applied to every non-control variant.
    pub treatment_shift: f64,
    pub geos: Vec<String>,
    pub platforms: Vec<String>,
    pub page_keys: Vec<String>,
    pub start: NaiveDate,
    pub days: u32,
}

impl Default for ExperimentLayout {
    fn default() -> Self {
        Self {
            experiment_id: "exp1".into(),
            segment_id: "all".into(),
            variants: vec!["control".into(), "treatment".into()],
            treatment_shift: 0.0,
            geos: vec!["us".into()],
            platforms: vec!["desktop".into()],
            page_keys: vec!["feed".into()],
            start: NaiveDate::from_ymd_opt(2023, 4, 1).expect("valid date"),
            days: 7,
        }
    }
}

/// Summary of the files written by [`write_experiment_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WrittenCounts {
    pub metrics: u64,
    pub exposures: u64,
}

/// Generates a synthetic experiment as parsed records.
///
/// Each member is assigned a variant, a geo and a platform, and is exposed on
/// a random day in the first half of the range. Its views fall on random days
/// of the whole range, so views before the exposure day exist and must be
/// dropped by the join. Member ids run from 1.
pub fn experiment_records(
    spec: &GeneratorSpec,
    layout: &ExperimentLayout,
) -> (Vec<MetricRecord>, Vec<ExposureRecord>) {
    assert!(!layout.variants.is_empty() && layout.days >= 1);
    assert!(
        !layout.geos.is_empty() && !layout.platforms.is_empty() && !layout.page_keys.is_empty()
    );
    let sampler = MemberSampler::new(spec);
    let mut rng = stream_rng(spec.seed, 0);
    let start = parse_day(&layout.start.to_string()).expect("valid date");
    let exposure_window = layout.days.div_ceil(2);
    let mut metrics = Vec::new();
    let mut exposures = Vec::with_capacity(spec.n_members);
    for i in 0..spec.n_members {
        let member_id = i as u64 + 1;
        let variant = rng.random_range(0..layout.variants.len());
        let geo = &layout.geos[rng.random_range(0..layout.geos.len())];
        let platform = &layout.platforms[rng.random_range(0..layout.platforms.len())];
        let shift = if variant == 0 {
            0.0
        } else {
            layout.treatment_shift
        };
        exposures.push(ExposureRecord {
            member_id,
            experiment_id: layout.experiment_id.clone(),
            segment_id: layout.segment_id.clone(),
            variant: layout.variants[variant].clone(),
            day: start + rng.random_range(0..exposure_window) as i32,
        });
        for x in sampler.sample(&mut rng, shift) {
            let day = start + rng.random_range(0..layout.days) as i32;
            let page = &layout.page_keys[rng.random_range(0..layout.page_keys.len())];
            metrics.push(MetricRecord {
                member_id,
                day,
                geo: geo.clone(),
                platform: platform.clone(),
                page_key: page.clone(),
                load_time_ms: x,
            });
        }
    }
    (metrics, exposures)
}

/// Writes [`experiment_records`] in the CSV formats read by [`crate::ingest`].
pub fn write_experiment_csv(
    spec: &GeneratorSpec,
    layout: &ExperimentLayout,
    metrics_path: &Path,
    exposures_path: &Path,
) -> std::io::Result<WrittenCounts> {
    let (metric_rows, exposure_rows) = experiment_records(spec, layout);
    let mut metrics = BufWriter::new(File::create(metrics_path)?);
    let mut exposures = BufWriter::new(File::create(exposures_path)?);
    writeln!(metrics, "{}", METRICS_HEADER.join(","))?;
    writeln!(exposures, "{}", EXPOSURES_HEADER.join(","))?;
    for e in &exposure_rows {
        writeln!(
            exposures,
            "{},{},{},{},{}",
            e.member_id,
            e.experiment_id,
            e.segment_id,
            e.variant,
            format_day(e.day)
        )?;
    }
    for m in &metric_rows {
        writeln!(
            metrics,
            "{},{},{},{},{},{}",
            m.member_id,
            m.geo,
            m.platform,
            m.page_key,
            m.load_time_ms,
            format_day(m.day)
        )?;
    }
    metrics.flush()?;
    exposures.flush()?;
    Ok(WrittenCounts {
        metrics: metric_rows.len() as u64,
        exposures: exposure_rows.len() as u64,
    })
}

/// One (ICC, mean views) setting of the evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridCell {
    pub icc: f64,
    pub mean_views: f64,
}

/// The ICC x mean-views grid used for the default evaluation.
pub fn default_grid() -> Vec<GridCell> {
    let mut grid = Vec::new();
    for icc in [0.2, 0.4, 0.6] {
        for mean_views in [3.0, 10.0] {
            grid.push(GridCell { icc, mean_views });
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_datasets: usize,
    pub grid: Vec<GridCell>,
    pub n_members: usize,
    pub log_location: f64,
    pub quantiles: Vec<f64>,
    pub replicates: usize,
    pub fixed_halfwidth: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_datasets: 50,
            grid: default_grid(),
            n_members: 30_000,
            log_location: DEFAULT_LOG_LOCATION,
            quantiles: vec![0.5, 0.9],
            replicates: crate::DEFAULT_BOOTSTRAP_REPLICATES,
            fixed_halfwidth: crate::DEFAULT_HALFWIDTH_MS,
            seed: 7,
        }
    }
}

/// One estimate compared against the bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub dataset: usize,
    pub icc: f64,
    pub mean_views: f64,
    pub q: f64,
    pub method: Method,
    pub stddev_ms: Option<f64>,
    pub bootstrap_stddev_ms: f64,
    pub relative_difference: Option<f64>,
    pub is_error: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MethodTotals {
    pub method: Method,
    pub cases: usize,
    pub errors: usize,
    /// Cases where the estimator itself failed (also counted as errors).
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub totals: Vec<MethodTotals>,
}

impl EvalReport {
    pub fn totals_for(&self, method: Method) -> Option<&MethodTotals> {
        self.totals.iter().find(|t| t.method == method)
    }

    /// Per-(ICC, mean views, q) error counts followed by the grand total.
    pub fn table(&self) -> String {
        use std::fmt::Write as _;
        let methods = [
            Method::ProposedFixed,
            Method::ProposedDynamic,
            Method::NaiveIid,
        ];
        let mut keys: Vec<(f64, f64, f64)> = Vec::new();
        for r in &self.rows {
            let k = (r.icc, r.mean_views, r.q);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:>6} {:>5} {:>9} {:>12} {:>14} {:>12}",
            "ICC", "views", "q", "datasets", "err fixed", "err dynamic", "err naive"
        );
        for (icc, views, q) in keys {
            let rows: Vec<&EvalRow> = self
                .rows
                .iter()
                .filter(|r| r.icc == icc && r.mean_views == views && r.q == q)
                .collect();
            let count = |m: Method| rows.iter().filter(|r| r.method == m && r.is_error).count();
            let datasets = rows
                .iter()
                .filter(|r| r.method == Method::ProposedFixed)
                .count();
            let _ = writeln!(
                out,
                "{:>5} {:>6} {:>5} {:>9} {:>12} {:>14} {:>12}",
                icc,
                views,
                q,
                datasets,
                count(methods[0]),
                count(methods[1]),
                count(methods[2])
            );
        }
        let total = |m: Method| self.totals_for(m).map_or(0, |t| t.errors);
        let cases = self
            .totals_for(Method::ProposedFixed)
            .map_or(0, |t| t.cases);
        let _ = writeln!(
            out,
            "{:>5} {:>6} {:>5} {:>9} {:>12} {:>14} {:>12}",
            "Total",
            "",
            "",
            cases,
            total(methods[0]),
            total(methods[1]),
            total(methods[2])
        );
        out
    }
}

fn dataset_spec(config: &EvalConfig, id: usize) -> (GridCell, GeneratorSpec) {
    let cell = config.grid[id % config.grid.len()];
    let spec = GeneratorSpec {
        log_location: config.log_location,
        ..GeneratorSpec::with_icc(
            config.n_members,
            cell.mean_views,
            cell.icc,
            derive_seed(config.seed, id as u64),
        )
    };
    (cell, spec)
}

/// Compares the fixed, dynamic and naive estimators against the bootstrap.
pub fn evaluate(config: &EvalConfig) -> Result<EvalReport, StatsError> {
    if config.n_datasets == 0 || config.grid.is_empty() || config.quantiles.is_empty() {
        return Err(StatsError::InvalidArgument(
            "evaluation needs datasets, grid cells and quantiles".into(),
        ));
    }
    let per_dataset: Vec<Vec<EvalRow>> = (0..config.n_datasets)
        .into_par_iter()
        .map(|id| evaluate_one(config, id))
        .collect::<Result<_, _>>()?;
    let rows: Vec<EvalRow> = per_dataset.into_iter().flatten().collect();
    let totals = [
        Method::ProposedFixed,
        Method::ProposedDynamic,
        Method::NaiveIid,
    ]
    .into_iter()
    .map(|method| {
        let mine = rows.iter().filter(|r| r.method == method);
        MethodTotals {
            method,
            cases: mine.clone().count(),
            errors: mine.clone().filter(|r| r.is_error).count(),
            failures: mine.filter(|r| r.failure.is_some()).count(),
        }
    })
    .collect();
    Ok(EvalReport { rows, totals })
}

fn evaluate_one(config: &EvalConfig, id: usize) -> Result<Vec<EvalRow>, StatsError> {
    let (cell, spec) = dataset_spec(config, id);
    let data = generate(&spec);
    let boot = bootstrap_stddevs(
        &data,
        &config.quantiles,
        config.replicates,
        derive_seed(spec.seed, 1),
    )?;
    let mut rows = Vec::new();
    for (q, b) in config.quantiles.iter().zip(&boot) {
        for method in [
            Method::ProposedFixed,
            Method::ProposedDynamic,
            Method::NaiveIid,
        ] {
            let est = estimate_by_method(&data, *q, method, config.fixed_halfwidth, 0, 0);
            let (stddev, rel, failure) = match est {
                Ok(e) => (
                    Some(e.stddev_ms),
                    Some(e.stddev_ms / b.stddev_ms - 1.0),
                    None,
                ),
                Err(err) => (None, None, Some(err.to_string())),
            };
            rows.push(EvalRow {
                dataset: id,
                icc: cell.icc,
                mean_views: cell.mean_views,
                q: *q,
                method,
                stddev_ms: stddev,
                bootstrap_stddev_ms: b.stddev_ms,
                relative_difference: rel,
                is_error: rel.is_none_or(|r| r.abs() > ERROR_THRESHOLD),
                failure,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AaConfig {
    pub spec: GeneratorSpec,
    pub replications: usize,
    pub alpha: f64,
    pub method: Method,
    pub q: f64,
    pub fixed_halfwidth: f64,
    /// Bootstrap replicates, used only by [`Method::Bootstrap`].
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AaResult {
    pub method: Method,
    pub replications: usize,
    pub rejections: usize,
    /// Replications where an estimator failed; they count as non-rejections.
    pub failures: usize,
    pub rejection_rate: f64,
}

/// Measures the false-positive rate of a method on A/A splits.
///
/// Every replication generates a fresh dataset and assigns each member to
/// one of two arms with a fair coin, so the randomization unit is the member.
pub fn aa_simulation(config: &AaConfig) -> Result<AaResult, StatsError> {
    if config.replications < 100 {
        return Err(StatsError::InvalidArgument(format!(
            "need at least 100 replications, got {}",
            config.replications
        )));
    }
    let outcomes: Vec<Option<bool>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(config.seed, rep as u64);
            let spec = GeneratorSpec {
                seed: rep_seed,
                ..config.spec
            };
            let data = generate(&spec);
            let mut rng = stream_rng(rep_seed, 1);
            let mut arms = (Dataset::default(), Dataset::default());
            for views in data.into_members() {
                if rng.random_bool(0.5) {
                    arms.1.push_member(views);
                } else {
                    arms.0.push_member(views);
                }
            }
            let run = |d: &Dataset, stream: u64| {
                estimate_by_method(
                    d,
                    config.q,
                    config.method,
                    config.fixed_halfwidth,
                    config.replicates,
                    derive_seed(rep_seed, stream),
                )
            };
            let (a, b) = (run(&arms.0, 2).ok()?, run(&arms.1, 3).ok()?);
            compare(&a, &b).ok().map(|c| c.p_value < config.alpha)
        })
        .collect();
    let rejections = outcomes.iter().filter(|o| **o == Some(true)).count();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    Ok(AaResult {
        method: config.method,
        replications: config.replications,
        rejections,
        failures,
        rejection_rate: rejections as f64 / config.replications as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = GeneratorSpec::with_icc(200, 5.0, 0.5, 3);
        assert_eq!(generate(&spec), generate(&spec));
        let other = GeneratorSpec { seed: 4, ..spec };
        assert_ne!(generate(&spec), generate(&other));
    }

    #[test]
    fn view_counts_follow_the_mean() {
        let spec = GeneratorSpec::with_icc(20_000, 4.0, 0.3, 1);
        let d = generate(&spec);
        assert!(d.members().iter().all(|v| !v.is_empty()));
        let mean = d.total_views() as f64 / d.members().len() as f64;
        assert!((mean - 4.0).abs() < 0.1, "mean views {mean}");
        let single = GeneratorSpec::with_icc(100, 1.0, 0.3, 1);
        assert!(generate(&single).members().iter().all(|v| v.len() == 1));
    }

    #[test]
    fn icc_spec_maps_to_sds() {
        let spec = GeneratorSpec::with_icc(1, 1.0, 0.6, 0);
        assert!((spec.icc() - 0.6).abs() < 1e-12);
        let total = spec.member_effect_sd.powi(2) + spec.within_member_sd.powi(2);
        assert!((total - DEFAULT_LOG_VARIANCE).abs() < 1e-12);
    }

    #[test]
    fn zero_member_effect_is_iid() {
        let spec = GeneratorSpec {
            member_effect_sd: 0.0,
            ..GeneratorSpec::with_icc(3000, 5.0, 0.0, 9)
        };
        let icc = log_scale_icc(&generate(&spec));
        assert!(icc.abs() < 0.03, "icc {icc}");
    }

    #[test]
    fn anova_icc_recovers_generator_icc() {
        let spec = GeneratorSpec {
            n_members: 5000,
            mean_views: 10.0,
            log_location: DEFAULT_LOG_LOCATION,
            member_effect_sd: 0.5,
            within_member_sd: 0.41,
            seed: 21,
        };
        let icc = log_scale_icc(&generate(&spec));
        assert!((icc - 0.6).abs() < 0.05, "icc {icc}");
    }

    #[test]
    fn aa_requires_enough_replications() {
        let config = AaConfig {
            spec: GeneratorSpec::with_icc(10, 2.0, 0.2, 0),
            replications: 10,
            alpha: 0.05,
            method: Method::ProposedDynamic,
            q: 0.5,
            fixed_halfwidth: 50.0,
            replicates: 0,
            seed: 0,
        };
        assert!(aa_simulation(&config).is_err());
    }
}
