//! Redundancy of token views: cosine similarity matrices and
//! threshold-stopped agglomerative clustering.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::ViewMatrix;
use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm};

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub owner_id: String,
    /// Original view index of each row.
    pub views: Vec<usize>,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }
}

/// Cosine similarities among the valid, non-zero views of `v`.
pub fn similarity_matrix(v: &ViewMatrix) -> Result<SimilarityMatrix> {
    let mut rows = Vec::new();
    let mut views = Vec::new();
    for (i, r) in v.valid_rows() {
        let n = l2_norm(r);
        if n == 0.0 {
            log::warn!("{}: view {i} has zero norm and is left out", v.owner_id);
            continue;
        }
        rows.push(r.iter().map(|x| x / n).collect::<Vec<_>>());
        views.push(i);
    }
    if rows.is_empty() {
        return Err(Error::Contract(format!("{}: no usable views", v.owner_id)));
    }
    let n = rows.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = dot(&rows[i], &rows[j]).clamp(-1.0, 1.0);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        owner_id: v.owner_id.clone(),
        views,
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Average,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub owner_id: String,
    pub threshold: f64,
    /// Cluster label per row of the similarity matrix, numbered by first
    /// appearance.
    pub assignments: Vec<usize>,
    pub n_clusters: usize,
}

/// Repeatedly merges the most similar pair of clusters while their linkage
/// similarity is at least `threshold`.
pub fn agglomerative_cluster(
    sim: &SimilarityMatrix,
    threshold: f64,
    linkage: Linkage,
) -> Result<ClusterReport> {
    if !(threshold > -1.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside (-1, 1]"
        )));
    }
    let n = sim.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // Linkage similarity between live clusters, kept as a dense matrix.
    let mut link: Vec<f64> = sim.values.clone();
    let mut alive = vec![true; n];
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..n {
            if !alive[a] {
                continue;
            }
            for b in a + 1..n {
                if !alive[b] {
                    continue;
                }
                let s = link[a * n + b];
                if s >= threshold && best.is_none_or(|(_, _, bs)| s > bs) {
                    best = Some((a, b, s));
                }
            }
        }
        let Some((a, b, _)) = best else { break };
        let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
        for c in 0..n {
            if !alive[c] || c == a || c == b {
                continue;
            }
            let (sa, sb) = (link[a * n + c], link[b * n + c]);
            let merged = match linkage {
                Linkage::Average => (na * sa + nb * sb) / (na + nb),
                Linkage::Complete => sa.min(sb),
            };
            link[a * n + c] = merged;
            link[c * n + a] = merged;
        }
        let moved = std::mem::take(&mut clusters[b]);
        clusters[a].extend(moved);
        alive[b] = false;
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for i in 0..n {
        if label[i] != usize::MAX {
            continue;
        }
        let owner = (0..n)
            .find(|&c| alive[c] && clusters[c].contains(&i))
            .expect("assigned");
        for &m in &clusters[owner] {
            label[m] = next;
        }
        next += 1;
    }
    Ok(ClusterReport {
        owner_id: sim.owner_id.clone(),
        threshold,
        assignments: label,
        n_clusters: next,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyStats {
    pub count: usize,
    pub mean_clusters: f64,
    pub median_clusters: f64,
    /// `histogram[k]` matrices had `k` clusters.
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RedundancyRow {
    pub owner_id: String,
    pub n_clusters: usize,
    pub views: usize,
}

pub fn cluster_matrix(v: &ViewMatrix, threshold: f64, linkage: Linkage) -> Result<ClusterReport> {
    agglomerative_cluster(&similarity_matrix(v)?, threshold, linkage)
}

pub fn redundancy_report(
    matrices: &[ViewMatrix],
    threshold: f64,
    linkage: Linkage,
) -> Result<(Vec<RedundancyRow>, RedundancyStats)> {
    let rows = matrices
        .par_iter()
        .map(|m| {
            let r = cluster_matrix(m, threshold, linkage)?;
            Ok(RedundancyRow {
                owner_id: m.owner_id.clone(),
                n_clusters: r.n_clusters,
                views: r.assignments.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = stats_of(&rows);
    Ok((rows, stats))
}

pub fn stats_of(rows: &[RedundancyRow]) -> RedundancyStats {
    let mut counts: Vec<usize> = rows.iter().map(|r| r.n_clusters).collect();
    counts.sort_unstable();
    let n = counts.len();
    let median = match n {
        0 => 0.0,
        _ if n % 2 == 1 => counts[n / 2] as f64,
        _ => 0.5 * (counts[n / 2 - 1] + counts[n / 2]) as f64,
    };
    let mut histogram = vec![0; counts.last().map_or(0, |&m| m + 1)];
    for &c in &counts {
        histogram[c] += 1;
    }
    RedundancyStats {
        count: n,
        mean_clusters: if n == 0 {
            0.0
        } else {
            counts.iter().sum::<usize>() as f64 / n as f64
        },
        median_clusters: median,
        histogram,
    }
}

pub fn write_report_csv<W: Write>(w: &mut W, rows: &[RedundancyRow]) -> Result<()> {
    writeln!(w, "owner_id,n_clusters,views")?;
    for r in rows {
        if r.owner_id.contains([',', '"', '\n']) {
            writeln!(
                w,
                "\"{}\",{},{}",
                r.owner_id.replace('"', "\"\""),
                r.n_clusters,
                r.views
            )?;
        } else {
            writeln!(w, "{},{},{}", r.owner_id, r.n_clusters, r.views)?;
        }
    }
    Ok(())
}

pub fn read_report_csv<R: BufRead>(r: R) -> Result<Vec<RedundancyRow>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let fail = |m: &str| Error::Format(format!("report line {}: {m}", i + 1));
        let (id, rest) = if let Some(stripped) = line.strip_prefix('"') {
            let end = stripped
                .rfind("\",")
                .ok_or_else(|| fail("unterminated quote"))?;
            (stripped[..end].replace("\"\"", "\""), &stripped[end + 2..])
        } else {
            let (id, rest) = line.split_once(',').ok_or_else(|| fail("missing fields"))?;
            (id.to_string(), rest)
        };
        let (k, v) = rest.split_once(',').ok_or_else(|| fail("missing fields"))?;
        out.push(RedundancyRow {
            owner_id: id,
            n_clusters: k.parse().map_err(|_| fail("bad n_clusters"))?,
            views: v.parse().map_err(|_| fail("bad views"))?,
        });
    }
    Ok(out)
}
