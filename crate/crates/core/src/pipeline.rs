//! Partitioned batch computation of per-cell quantiles and variances.
//!
//! Phases:
//!
//! 1. Normalize string columns into dense integer keys, build one
//!    cumulative exposure bitmap per (variant, day) and hash-partition the
//!    metrics by member.
//! 2. Join every partition against the bitmaps and build one histogram per
//!    (variant, dimension) cell; merged histograms give the quantiles.
//! 3. Per partition, count `J_i`, `P_i`, `W_i` for every member around each
//!    cell's quantile with the fixed half-width and reduce to moment sums.
//! 4. For the dynamic interval, repeat phase 3 with half-width `2 s_1`.
//!
//! All cross-partition combination goes through exact integer merges, so the
//! report does not depend on the partition count or processing order.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use rayon::prelude::*;
use roaring::RoaringTreemap;
use thiserror::Error;

use crate::bootstrap::bootstrap_stddevs;
use crate::estimators::{
    compare, dynamic_halfwidth, empirical_quantile, finalize_proposed, member_aggregates,
    variance_naive_iid, Interval, StatsError,
};
use crate::ingest::ReportRow;
use crate::rng::derive_seed;
use crate::types::{
    Dataset, DimensionKey, ExposureRecord, Method, MetricRecord, MomentSums, QuantileEstimate,
    SparseHistogram, VariantKey,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty day range {start}..={end}")]
    EmptyDayRange { start: i32, end: i32 },
    #[error("no threshold for populated cell {cell}")]
    MissingThreshold { cell: String },
    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: StatsError,
    },
}

/// Bijection between values and dense indices in first-seen order.
#[derive(Debug, Clone)]
pub struct Dictionary<T> {
    index: HashMap<T, u32>,
    values: Vec<T>,
}

impl<T> Default for Dictionary<T> {
    fn default() -> Self {
        Self {
            index: HashMap::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Hash + Eq + Clone> Dictionary<T> {
    pub fn intern(&mut self, value: &T) -> u32 {
        if let Some(&i) = self.index.get(value) {
            return i;
        }
        let i = self.values.len() as u32;
        self.values.push(value.clone());
        self.index.insert(value.clone(), i);
        i
    }

    pub fn get(&self, value: &T) -> Option<u32> {
        self.index.get(value).copied()
    }

    pub fn decode(&self, index: u32) -> Option<&T> {
        self.values.get(index as usize)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// (geo, platform, page key).
pub type DimensionTriple = (String, String, String);
/// (experiment, segment, variant).
pub type VariantTriple = (String, String, String);

#[derive(Debug, Clone, Default)]
pub struct Dictionaries {
    pub dimensions: Dictionary<DimensionTriple>,
    pub variants: Dictionary<VariantTriple>,
}

impl Dictionaries {
    pub fn dimension(&self, key: DimensionKey) -> &DimensionTriple {
        self.dimensions
            .decode(key.0)
            .expect("key from this dictionary")
    }

    pub fn variant(&self, key: VariantKey) -> &VariantTriple {
        self.variants
            .decode(key.0)
            .expect("key from this dictionary")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizedMetric {
    pub member_id: u64,
    pub day: i32,
    pub dimension: DimensionKey,
    pub load_time_ms: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizedExposure {
    pub member_id: u64,
    pub variant: VariantKey,
    pub day: i32,
}

/// Replaces string columns with dictionary indices.
pub fn normalize(
    metrics: &[MetricRecord],
    exposures: &[ExposureRecord],
) -> (Vec<NormalizedMetric>, Vec<NormalizedExposure>, Dictionaries) {
    let mut dicts = Dictionaries::default();
    let metrics = metrics
        .iter()
        .map(|m| NormalizedMetric {
            member_id: m.member_id,
            day: m.day,
            dimension: DimensionKey(dicts.dimensions.intern(&(
                m.geo.clone(),
                m.platform.clone(),
                m.page_key.clone(),
            ))),
            load_time_ms: m.load_time_ms,
        })
        .collect();
    let exposures = exposures
        .iter()
        .map(|e| NormalizedExposure {
            member_id: e.member_id,
            variant: VariantKey(dicts.variants.intern(&(
                e.experiment_id.clone(),
                e.segment_id.clone(),
                e.variant.clone(),
            ))),
            day: e.day,
        })
        .collect();
    (metrics, exposures, dicts)
}

/// Inclusive range of day indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayRange {
    pub start: i32,
    pub end: i32,
}

impl DayRange {
    pub fn new(start: i32, end: i32) -> Result<Self, PipelineError> {
        if start > end {
            return Err(PipelineError::EmptyDayRange { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, day: i32) -> bool {
        day >= self.start && day <= self.end
    }

    pub fn len(&self) -> usize {
        (self.end - self.start) as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Members exposed to each variant on or before each day of the range.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureBitmaps {
    range: DayRange,
    // Indexed by variant key, then by day offset from `range.start`.
    by_variant: Vec<Vec<RoaringTreemap>>,
}

impl ExposureBitmaps {
    pub fn range(&self) -> DayRange {
        self.range
    }

    pub fn variant_count(&self) -> usize {
        self.by_variant.len()
    }

    pub fn get(&self, variant: VariantKey, day: i32) -> Option<&RoaringTreemap> {
        if !self.range.contains(day) {
            return None;
        }
        self.by_variant
            .get(variant.0 as usize)
            .map(|days| &days[(day - self.range.start) as usize])
    }

    pub fn contains(&self, variant: VariantKey, member_id: u64, day: i32) -> bool {
        self.get(variant, day)
            .is_some_and(|b| b.contains(member_id))
    }

    /// Variants whose bitmap for `day` holds `member_id`, in key order.
    pub fn variants_for(&self, member_id: u64, day: i32) -> impl Iterator<Item = VariantKey> + '_ {
        let offset = self
            .range
            .contains(day)
            .then(|| (day - self.range.start) as usize);
        self.by_variant
            .iter()
            .enumerate()
            .filter(move |(_, days)| offset.is_some_and(|o| days[o].contains(member_id)))
            .map(|(v, _)| VariantKey(v as u32))
    }
}

/// Builds cumulative per-day exposure bitmaps for `variant_count` variants.
pub fn build_bitmaps(
    exposures: &[NormalizedExposure],
    variant_count: usize,
    range: DayRange,
) -> ExposureBitmaps {
    let days = range.len();
    let mut first_seen: Vec<Vec<Vec<u64>>> = vec![vec![Vec::new(); days]; variant_count];
    for e in exposures {
        if range.contains(e.day) {
            first_seen[e.variant.0 as usize][(e.day - range.start) as usize].push(e.member_id);
        }
    }
    let by_variant = first_seen
        .into_iter()
        .map(|per_day| {
            let mut acc = RoaringTreemap::new();
            per_day
                .into_iter()
                .map(|mut members| {
                    members.sort_unstable();
                    acc.extend(members);
                    acc.clone()
                })
                .collect()
        })
        .collect();
    ExposureBitmaps { range, by_variant }
}

/// Partition index of a member.
pub fn partition_of(member_id: u64, partitions: usize) -> usize {
    (derive_seed(0, member_id) % partitions as u64) as usize
}

/// Splits metrics so that each member's records land in exactly one
/// partition.
pub fn partition_metrics(
    metrics: &[NormalizedMetric],
    partitions: usize,
) -> Vec<Vec<NormalizedMetric>> {
    assert!(partitions >= 1);
    let mut out = vec![Vec::new(); partitions];
    for m in metrics {
        out[partition_of(m.member_id, partitions)].push(*m);
    }
    out
}

/// An analysis cell: one variant restricted to one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub variant: VariantKey,
    pub dimension: DimensionKey,
}

/// Values that combine across partitions.
pub trait Mergeable {
    fn merge(&self, other: &Self) -> Self;
}

impl Mergeable for SparseHistogram {
    fn merge(&self, other: &Self) -> Self {
        SparseHistogram::merge(self, other)
    }
}

impl Mergeable for MomentSums {
    fn merge(&self, other: &Self) -> Self {
        MomentSums::merge(self, other)
    }
}

/// Per-cell aggregates of one partition, or of several merged partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellAggregates<K: Ord, V> {
    pub cells: BTreeMap<K, V>,
}

impl<K: Ord, V> Default for CellAggregates<K, V> {
    fn default() -> Self {
        Self {
            cells: BTreeMap::new(),
        }
    }
}

impl<K: Ord + Copy, V: Mergeable + Clone> CellAggregates<K, V> {
    pub fn merge(&self, other: &Self) -> Self {
        let mut cells = self.cells.clone();
        for (k, v) in &other.cells {
            cells
                .entry(*k)
                .and_modify(|mine| *mine = mine.merge(v))
                .or_insert_with(|| v.clone());
        }
        Self { cells }
    }
}

pub type HistogramCells = CellAggregates<CellKey, SparseHistogram>;
/// Moment sums keyed by cell and quantile index.
pub type MomentCells = CellAggregates<(CellKey, usize), MomentSums>;

/// Joins one partition with the exposure bitmaps and histograms every cell.
pub fn join_and_histogram(
    partition: &[NormalizedMetric],
    bitmaps: &ExposureBitmaps,
) -> HistogramCells {
    let mut values: BTreeMap<CellKey, Vec<u32>> = BTreeMap::new();
    for m in partition {
        for variant in bitmaps.variants_for(m.member_id, m.day) {
            values
                .entry(CellKey {
                    variant,
                    dimension: m.dimension,
                })
                .or_default()
                .push(m.load_time_ms);
        }
    }
    CellAggregates {
        cells: values
            .into_iter()
            .map(|(k, v)| (k, SparseHistogram::from_values(&v)))
            .collect(),
    }
}

/// Quantile and density half-width a member is counted against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub quantile_ms: u32,
    pub halfwidth_ms: f64,
}

/// One member's joined views, per cell.
type MemberCells = (u64, Vec<(CellKey, Vec<u32>)>);

/// Joined views of one partition grouped by member, then by cell.
fn member_cell_views(
    partition: &[NormalizedMetric],
    bitmaps: &ExposureBitmaps,
) -> Vec<MemberCells> {
    let mut order: Vec<&NormalizedMetric> = partition.iter().collect();
    order.sort_by_key(|m| m.member_id);
    let mut out = Vec::new();
    for group in order.chunk_by(|a, b| a.member_id == b.member_id) {
        let mut cells: BTreeMap<CellKey, Vec<u32>> = BTreeMap::new();
        for m in group {
            for variant in bitmaps.variants_for(m.member_id, m.day) {
                cells
                    .entry(CellKey {
                        variant,
                        dimension: m.dimension,
                    })
                    .or_default()
                    .push(m.load_time_ms);
            }
        }
        if !cells.is_empty() {
            out.push((group[0].member_id, cells.into_iter().collect()));
        }
    }
    out
}

/// Moment sums of one partition against per-(cell, quantile) thresholds.
///
/// `describe` names a cell in errors.
pub fn moments_pass(
    partition: &[NormalizedMetric],
    bitmaps: &ExposureBitmaps,
    thresholds: &BTreeMap<(CellKey, usize), Threshold>,
    quantile_count: usize,
    describe: &dyn Fn(CellKey) -> String,
) -> Result<MomentCells, PipelineError> {
    let mut cells: BTreeMap<(CellKey, usize), MomentSums> = BTreeMap::new();
    for (member_id, member_cells) in member_cell_views(partition, bitmaps) {
        for (cell, views) in member_cells {
            for qi in 0..quantile_count {
                let t =
                    thresholds
                        .get(&(cell, qi))
                        .ok_or_else(|| PipelineError::MissingThreshold {
                            cell: describe(cell),
                        })?;
                let interval = Interval::around(t.quantile_ms, t.halfwidth_ms);
                let agg = member_aggregates(member_id, &views, t.quantile_ms, &interval)
                    .expect("grouped members have views");
                cells.entry((cell, qi)).or_default().add_member(&agg);
            }
        }
    }
    Ok(CellAggregates { cells })
}

/// Per-cell member datasets of one partition, members in id order.
fn cell_datasets(
    partition: &[NormalizedMetric],
    bitmaps: &ExposureBitmaps,
) -> BTreeMap<CellKey, Vec<(u64, Vec<u32>)>> {
    let mut out: BTreeMap<CellKey, Vec<(u64, Vec<u32>)>> = BTreeMap::new();
    for (member_id, cells) in member_cell_views(partition, bitmaps) {
        for (cell, views) in cells {
            out.entry(cell).or_default().push((member_id, views));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub quantiles: Vec<f64>,
    pub method: Method,
    pub fixed_halfwidth_ms: f64,
    pub bootstrap_replicates: usize,
    pub seed: u64,
    pub partitions: usize,
    /// Analysis range; defaults to the span of all input days.
    pub day_range: Option<DayRange>,
    /// Variant name compared against within each experiment and segment.
    pub control_variant: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            quantiles: vec![0.5, 0.9],
            method: Method::ProposedDynamic,
            fixed_halfwidth_ms: crate::DEFAULT_HALFWIDTH_MS,
            bootstrap_replicates: crate::DEFAULT_BOOTSTRAP_REPLICATES,
            seed: 42,
            partitions: rayon::current_num_threads(),
            day_range: None,
            control_variant: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.quantiles.is_empty() {
            return Err(PipelineError::InvalidConfig(
                "no quantiles requested".into(),
            ));
        }
        if let Some(q) = self.quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return Err(PipelineError::InvalidConfig(format!(
                "quantile {q} not in (0, 1)"
            )));
        }
        if self.partitions == 0 {
            return Err(PipelineError::InvalidConfig(
                "partitions must be at least 1".into(),
            ));
        }
        if !(self.fixed_halfwidth_ms > 0.0 && self.fixed_halfwidth_ms.is_finite()) {
            return Err(PipelineError::InvalidConfig(format!(
                "half-width must be positive, got {}",
                self.fixed_halfwidth_ms
            )));
        }
        if self.method == Method::Bootstrap && self.bootstrap_replicates < 2 {
            return Err(PipelineError::InvalidConfig(
                "bootstrap needs at least 2 replicates".into(),
            ));
        }
        if let Some(r) = self.day_range {
            DayRange::new(r.start, r.end)?;
        }
        Ok(())
    }
}

fn merge_all<K: Ord + Copy + Send, V: Mergeable + Clone + Send>(
    parts: Vec<CellAggregates<K, V>>,
) -> CellAggregates<K, V> {
    parts
        .into_iter()
        .fold(CellAggregates::default(), |acc, p| acc.merge(&p))
}

fn default_range(metrics: &[MetricRecord], exposures: &[ExposureRecord]) -> Option<DayRange> {
    let days = metrics
        .iter()
        .map(|m| m.day)
        .chain(exposures.iter().map(|e| e.day));
    let (lo, hi) = days.fold(None, |acc: Option<(i32, i32)>, d| match acc {
        None => Some((d, d)),
        Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
    })?;
    Some(DayRange { start: lo, end: hi })
}

/// Runs every phase and returns sorted report rows.
pub fn run_pipeline(
    metrics: &[MetricRecord],
    exposures: &[ExposureRecord],
    config: &PipelineConfig,
) -> Result<Vec<ReportRow>, PipelineError> {
    config.validate()?;
    let Some(range) = config
        .day_range
        .or_else(|| default_range(metrics, exposures))
    else {
        return Ok(Vec::new());
    };
    let (metrics, exposures, dicts) = normalize(metrics, exposures);
    let bitmaps = build_bitmaps(&exposures, dicts.variants.len(), range);
    let partitions = partition_metrics(&metrics, config.partitions);
    drop(metrics);

    let describe = |cell: CellKey| {
        let (e, s, v) = dicts.variant(cell.variant);
        let (g, p, k) = dicts.dimension(cell.dimension);
        format!("{e}/{s}/{v} geo={g} platform={p} page={k}")
    };
    let cell_error = |cell: CellKey, q: f64, source: StatsError| PipelineError::Cell {
        cell: format!("{} q={q}", describe(cell)),
        source,
    };

    // Phase 2: histograms and quantiles.
    let histograms = merge_all(
        partitions
            .par_iter()
            .map(|p| join_and_histogram(p, &bitmaps))
            .collect(),
    );
    let mut quantiles: BTreeMap<(CellKey, usize), u32> = BTreeMap::new();
    for (cell, hist) in &histograms.cells {
        for (qi, &q) in config.quantiles.iter().enumerate() {
            let value = empirical_quantile(hist, q).map_err(|e| cell_error(*cell, q, e))?;
            quantiles.insert((*cell, qi), value);
        }
    }

    let estimates: BTreeMap<(CellKey, usize), QuantileEstimate> = match config.method {
        Method::NaiveIid => {
            let mut out = BTreeMap::new();
            for (cell, hist) in &histograms.cells {
                for (qi, &q) in config.quantiles.iter().enumerate() {
                    let est = variance_naive_iid(hist, q, config.fixed_halfwidth_ms)
                        .map_err(|e| cell_error(*cell, q, e))?;
                    out.insert((*cell, qi), est);
                }
            }
            out
        }
        Method::ProposedFixed | Method::ProposedDynamic => {
            // Phase 3.
            let fixed = variance_phase(
                &partitions,
                &bitmaps,
                &quantiles,
                config,
                |_| config.fixed_halfwidth_ms,
                Method::ProposedFixed,
                &describe,
                &cell_error,
            )?;
            if config.method == Method::ProposedFixed {
                fixed
            } else {
                // Phase 4.
                variance_phase(
                    &partitions,
                    &bitmaps,
                    &quantiles,
                    config,
                    |key| dynamic_halfwidth(fixed[key].stddev_ms),
                    Method::ProposedDynamic,
                    &describe,
                    &cell_error,
                )?
            }
        }
        Method::Bootstrap => {
            let mut per_cell: BTreeMap<CellKey, Vec<(u64, Vec<u32>)>> = BTreeMap::new();
            for part in partitions.iter().map(|p| cell_datasets(p, &bitmaps)) {
                for (cell, members) in part {
                    per_cell.entry(cell).or_default().extend(members);
                }
            }
            let mut out = BTreeMap::new();
            for (cell, mut members) in per_cell {
                members.sort_by_key(|(id, _)| *id);
                let data = Dataset::new(members.into_iter().map(|(_, v)| v).collect());
                let boots = bootstrap_stddevs(
                    &data,
                    &config.quantiles,
                    config.bootstrap_replicates,
                    config.seed,
                )
                .map_err(|e| cell_error(cell, config.quantiles[0], e))?;
                for (qi, b) in boots.into_iter().enumerate() {
                    out.insert(
                        (cell, qi),
                        QuantileEstimate {
                            q: b.q,
                            quantile_ms: quantiles[&(cell, qi)],
                            stddev_ms: b.stddev_ms,
                            method: Method::Bootstrap,
                            density: f64::NAN,
                            interval_halfwidth_ms: f64::NAN,
                            n0: data.active_members() as u64,
                            total_views: histograms.cells[&cell].total(),
                        },
                    );
                }
            }
            out
        }
    };

    build_report(&estimates, &dicts, config)
}

#[allow(clippy::too_many_arguments)]
fn variance_phase(
    partitions: &[Vec<NormalizedMetric>],
    bitmaps: &ExposureBitmaps,
    quantiles: &BTreeMap<(CellKey, usize), u32>,
    config: &PipelineConfig,
    halfwidth: impl Fn(&(CellKey, usize)) -> f64,
    method: Method,
    describe: &(dyn Fn(CellKey) -> String + Sync),
    cell_error: &dyn Fn(CellKey, f64, StatsError) -> PipelineError,
) -> Result<BTreeMap<(CellKey, usize), QuantileEstimate>, PipelineError> {
    let thresholds: BTreeMap<(CellKey, usize), Threshold> = quantiles
        .iter()
        .map(|(key, &quantile_ms)| {
            (
                *key,
                Threshold {
                    quantile_ms,
                    halfwidth_ms: halfwidth(key),
                },
            )
        })
        .collect();
    let parts = partitions
        .par_iter()
        .map(|p| moments_pass(p, bitmaps, &thresholds, config.quantiles.len(), describe))
        .collect::<Result<Vec<_>, _>>()?;
    let moments = merge_all(parts);
    let mut out = BTreeMap::new();
    for (key, t) in &thresholds {
        let q = config.quantiles[key.1];
        let m = moments.cells.get(key).copied().unwrap_or_default();
        let est = finalize_proposed(q, t.quantile_ms, &m, t.halfwidth_ms, method)
            .map_err(|e| cell_error(key.0, q, e))?;
        out.insert(*key, est);
    }
    Ok(out)
}

fn build_report(
    estimates: &BTreeMap<(CellKey, usize), QuantileEstimate>,
    dicts: &Dictionaries,
    config: &PipelineConfig,
) -> Result<Vec<ReportRow>, PipelineError> {
    let mut rows: Vec<(ReportRow, QuantileEstimate)> = estimates
        .iter()
        .map(|((cell, _), est)| {
            let (experiment_id, segment_id, variant) = dicts.variant(cell.variant).clone();
            let (geo, platform, page_key) = dicts.dimension(cell.dimension).clone();
            let row = ReportRow {
                experiment_id,
                segment_id,
                variant,
                geo,
                platform,
                page_key,
                q: est.q,
                quantile_ms: est.quantile_ms,
                stddev_ms: est.stddev_ms,
                n0: est.n0,
                total_views: est.total_views,
                method: est.method,
                delta_ms: None,
                stderr_ms: None,
                z: None,
                p_value: None,
            };
            (row, *est)
        })
        .collect();
    rows.sort_by(|a, b| {
        a.0.sort_key()
            .partial_cmp(&b.0.sort_key())
            .expect("finite q")
    });

    if let Some(control) = &config.control_variant {
        let controls: HashMap<_, QuantileEstimate> = rows
            .iter()
            .filter(|(r, _)| &r.variant == control)
            .map(|(r, e)| (r.comparison_key(), *e))
            .collect();
        for (row, est) in rows.iter_mut() {
            if &row.variant == control {
                continue;
            }
            if let Some(c) = controls.get(&row.comparison_key()) {
                let cmp = compare(c, est).map_err(|source| PipelineError::Cell {
                    cell: format!(
                        "{}/{}/{} geo={} platform={} page={} q={}",
                        row.experiment_id,
                        row.segment_id,
                        row.variant,
                        row.geo,
                        row.platform,
                        row.page_key,
                        row.q
                    ),
                    source,
                })?;
                row.delta_ms = Some(cmp.delta_ms);
                row.stderr_ms = Some(cmp.stderr_ms);
                row.z = Some(cmp.z);
                row.p_value = Some(cmp.p_value);
            }
        }
    }
    Ok(rows.into_iter().map(|(r, _)| r).collect())
}
