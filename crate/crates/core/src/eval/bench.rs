//! Wall-clock and operation-count comparison of the search paths.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::ViewMatrix;
use crate::error::{Error, Result};
use crate::index::Index;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchPath {
    SumMax,
    Routed,
    SingleView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub path: SearchPath,
    /// Median over timed repetitions of the mean seconds per query.
    pub median_seconds_per_query: f64,
    pub rep_seconds_per_query: Vec<f64>,
    /// Totals for one pass over the queries.
    pub vectors_scanned: usize,
    pub probes: usize,
}

/// Timings reported for the published full-scale setting, for context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub setting: String,
    pub sum_max_seconds: f64,
    pub routed_seconds: f64,
    pub speedup: f64,
}

impl Default for ReferenceRow {
    fn default() -> Self {
        ReferenceRow {
            setting: "100k documents, full-size encoder".into(),
            sum_max_seconds: 112.04,
            routed_seconds: 14.48,
            speedup: 112.04 / 14.48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_docs: usize,
    pub n_vectors: usize,
    pub n_queries: usize,
    pub mean_query_views: f64,
    pub top_k: usize,
    pub nprobe: usize,
    pub reps: usize,
    pub paths: Vec<PathReport>,
    /// sum-max median time over routed median time.
    pub wall_clock_speedup: f64,
    pub vectors_scanned_ratio: f64,
    pub probes_ratio: f64,
    pub reference: ReferenceRow,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every path over all queries `reps + 1` times, discarding the first
/// (warm-up) pass. `selected[i]` is the routed view of query `i`.
pub fn bench(
    index: &Index,
    queries: &[ViewMatrix],
    selected: &[usize],
    top_k: usize,
    nprobe: usize,
    reps: usize,
) -> Result<BenchReport> {
    if queries.is_empty() || reps == 0 {
        return Err(Error::Config(
            "bench needs at least one query and one repetition".into(),
        ));
    }
    if selected.len() != queries.len() {
        return Err(Error::shape("bench", &[queries.len()], &[selected.len()]));
    }
    let mut paths = Vec::new();
    for path in [
        SearchPath::SumMax,
        SearchPath::Routed,
        SearchPath::SingleView,
    ] {
        let mut times = Vec::with_capacity(reps);
        let mut scanned = 0;
        let mut probes = 0;
        for rep in 0..=reps {
            let (mut s, mut p) = (0, 0);
            let start = Instant::now();
            for (q, &sel) in queries.iter().zip(selected) {
                let r = match path {
                    SearchPath::SumMax => index.search_sum_max(q, top_k, nprobe)?,
                    SearchPath::Routed => index.search_view(q, sel, top_k, nprobe)?,
                    SearchPath::SingleView => index.search_single_view(q, top_k, nprobe)?,
                };
                s += r.vectors_scanned;
                p += r.probes_done;
                std::hint::black_box(&r);
            }
            let per_query = start.elapsed().as_secs_f64() / queries.len() as f64;
            if rep > 0 {
                times.push(per_query);
            }
            scanned = s;
            probes = p;
        }
        paths.push(PathReport {
            path,
            median_seconds_per_query: median(&times),
            rep_seconds_per_query: times,
            vectors_scanned: scanned,
            probes,
        });
    }
    let ratio = |a: f64, b: f64| if b == 0.0 { f64::INFINITY } else { a / b };
    let (sm, ro) = (&paths[0], &paths[1]);
    Ok(BenchReport {
        n_docs: index.n_docs(),
        n_vectors: index.n_vectors(),
        n_queries: queries.len(),
        mean_query_views: queries.iter().map(|q| q.n_valid() as f64).sum::<f64>()
            / queries.len() as f64,
        top_k,
        nprobe,
        reps,
        wall_clock_speedup: ratio(sm.median_seconds_per_query, ro.median_seconds_per_query),
        vectors_scanned_ratio: ratio(sm.vectors_scanned as f64, ro.vectors_scanned as f64),
        probes_ratio: ratio(sm.probes as f64, ro.probes as f64),
        paths,
        reference: ReferenceRow::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
