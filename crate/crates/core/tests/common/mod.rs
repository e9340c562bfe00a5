#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use quantstat::evalharness::{experiment_records, ExperimentLayout, GeneratorSpec};
use quantstat::pipeline::DayRange;
use quantstat::{Dataset, ExposureRecord, MetricRecord};

pub type VariantName = (String, String, String);
pub type DimensionName = (String, String, String);
pub type Cell = (VariantName, DimensionName);

/// A small multi-cell experiment: two variants, several geos, platforms and
/// pages, seven days.
pub fn small_experiment(
    members: usize,
    icc: f64,
    seed: u64,
) -> (Vec<MetricRecord>, Vec<ExposureRecord>) {
    let spec = GeneratorSpec::with_icc(members, 4.0, icc, seed);
    let layout = ExperimentLayout {
        geos: vec!["us".into(), "in".into()],
        platforms: vec!["ios".into(), "web".into()],
        page_keys: vec!["feed".into(), "jobs".into()],
        treatment_shift: 0.05,
        ..ExperimentLayout::default()
    };
    experiment_records(&spec, &layout)
}

/// Reference join: a view belongs to a variant iff the member has an exposure
/// to it on or before the view's day, with both days inside `range`.
///
/// Returns per-cell member views keyed by member id.
pub fn reference_join(
    metrics: &[MetricRecord],
    exposures: &[ExposureRecord],
    range: DayRange,
) -> BTreeMap<Cell, BTreeMap<u64, Vec<u32>>> {
    let mut by_member: HashMap<u64, Vec<&ExposureRecord>> = HashMap::new();
    for e in exposures {
        by_member.entry(e.member_id).or_default().push(e);
    }
    let mut out: BTreeMap<Cell, BTreeMap<u64, Vec<u32>>> = BTreeMap::new();
    for m in metrics {
        let mut variants: Vec<VariantName> = Vec::new();
        for e in by_member.get(&m.member_id).into_iter().flatten() {
            let inside = |d: i32| d >= range.start && d <= range.end;
            if inside(e.day) && inside(m.day) && e.day <= m.day {
                let v = (
                    e.experiment_id.clone(),
                    e.segment_id.clone(),
                    e.variant.clone(),
                );
                if !variants.contains(&v) {
                    variants.push(v);
                }
            }
        }
        for v in variants {
            let dim = (m.geo.clone(), m.platform.clone(), m.page_key.clone());
            out.entry((v, dim))
                .or_default()
                .entry(m.member_id)
                .or_default()
                .push(m.load_time_ms);
        }
    }
    out
}

/// Members in id order, as the pipeline hands them to the bootstrap.
pub fn to_dataset(members: &BTreeMap<u64, Vec<u32>>) -> Dataset {
    Dataset::new(members.values().cloned().collect())
}

pub fn span(metrics: &[MetricRecord], exposures: &[ExposureRecord]) -> DayRange {
    let days = metrics
        .iter()
        .map(|m| m.day)
        .chain(exposures.iter().map(|e| e.day));
    let lo = days.clone().min().unwrap();
    let hi = days.max().unwrap();
    DayRange::new(lo, hi).unwrap()
}

/// Deterministic Fisher-Yates shuffle.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    use rand::seq::SliceRandom;
    let mut out = items.to_vec();
    out.shuffle(&mut quantstat::rng::stream_rng(seed, 99));
    out
}
