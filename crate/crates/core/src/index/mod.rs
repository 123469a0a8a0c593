//! Multi-view vector index with exact (flat) and inverted-file search.
//!
//! Every `(doc_id, view_id)` vector is stored as `f32`; scores are inner
//! products accumulated in `f64` in coordinate order. Search results are
//! deduplicated per document by keeping the best view, and ranked by score
//! descending with ties broken by ascending `doc_id`.
//!
//! A flat index is a single posting list. An IVF index holds `K` centroids
//! and one posting list per centroid; each vector lives in the list of its
//! nearest centroid (squared L2). A search probes the `nprobe` lists whose
//! centroids are closest to the query.

mod io;
pub mod kmeans;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::encoder::ViewMatrix;
use crate::error::{Error, Result};
use crate::rng::seeded;

pub use io::{load_index, read_index, save_index, write_index, INDEX_MAGIC, INDEX_VERSION};

#[derive(Clone, Debug, PartialEq)]
pub struct IndexedView {
    pub doc_id: String,
    pub view_id: u32,
    pub vector: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Flat,
    Ivf,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct PostingList {
    /// Document ordinal of each entry.
    docs: Vec<u32>,
    views: Vec<u32>,
    vectors: Vec<f32>,
}

impl PostingList {
    fn len(&self) -> usize {
        self.docs.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
    /// Document view that produced the score; `None` for aggregated scores.
    pub view_id: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
    /// Posting lists scanned.
    pub probes_done: usize,
    /// Inner products computed against indexed vectors.
    pub vectors_scanned: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Index {
    kind: IndexKind,
    dims: usize,
    /// `K × dims`, empty for a flat index.
    centroids: Vec<f32>,
    lists: Vec<PostingList>,
    doc_ids: Vec<String>,
}

#[inline]
fn score_f32(q: &[f64], v: &[f32]) -> f64 {
    let mut s = 0.0;
    for (a, &b) in q.iter().zip(v) {
        s += a * f64::from(b);
    }
    s
}

/// Higher score first, then lexicographically smaller id.
fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

/// Per-document accumulator reused across scans.
struct Board {
    best: Vec<f64>,
    view: Vec<u32>,
    touched: Vec<u32>,
}

impl Board {
    fn new(n: usize) -> Self {
        Board {
            best: vec![f64::NEG_INFINITY; n],
            view: vec![0; n],
            touched: Vec::new(),
        }
    }

    #[inline]
    fn offer(&mut self, doc: u32, score: f64, view: u32) {
        let d = doc as usize;
        let b = &mut self.best[d];
        if *b == f64::NEG_INFINITY {
            self.touched.push(doc);
            *b = score;
            self.view[d] = view;
        } else if score > *b {
            *b = score;
            self.view[d] = view;
        }
    }

    fn clear(&mut self) {
        for &d in &self.touched {
            self.best[d as usize] = f64::NEG_INFINITY;
        }
        self.touched.clear();
    }
}

impl Index {
    pub fn build(views: &[IndexedView], kind: IndexKind, k: usize, seed: u64) -> Result<Index> {
        let Some(first) = views.first() else {
            return Err(Error::Index("cannot build an index from no vectors".into()));
        };
        let dims = first.vector.len();
        if dims == 0 {
            return Err(Error::Index(
                "vectors must have at least one dimension".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(views.len());
        for v in views {
            if v.vector.len() != dims {
                return Err(Error::shape("index build", &[dims], &[v.vector.len()]));
            }
            if !v.vector.iter().all(|x| x.is_finite()) {
                return Err(Error::Index(format!(
                    "non-finite vector for ({}, {})",
                    v.doc_id, v.view_id
                )));
            }
            if !seen.insert((v.doc_id.as_str(), v.view_id)) {
                return Err(Error::Index(format!(
                    "duplicate vector ({}, {})",
                    v.doc_id, v.view_id
                )));
            }
        }

        let (centroids, assign) = match kind {
            IndexKind::Flat => (Vec::new(), vec![0usize; views.len()]),
            IndexKind::Ivf => {
                if k == 0 || k > views.len() {
                    return Err(Error::Config(format!(
                        "IVF needs 1 <= K <= {} vectors, got K = {k}",
                        views.len()
                    )));
                }
                let pts: Vec<f64> = views
                    .iter()
                    .flat_map(|v| v.vector.iter().map(|&x| f64::from(x as f32)))
                    .collect();
                let mut rng = seeded(seed);
                let c = kmeans::train(&pts, dims, k, &mut rng);
                let c32: Vec<f32> = c.iter().map(|&x| x as f32).collect();
                let c64: Vec<f64> = c32.iter().map(|&x| f64::from(x)).collect();
                let assign = pts
                    .chunks_exact(dims)
                    .map(|x| kmeans::nearest(x, &c64, dims))
                    .collect();
                (c32, assign)
            }
        };
        let n_lists = match kind {
            IndexKind::Flat => 1,
            IndexKind::Ivf => k,
        };
        let mut raw: Vec<Vec<(&str, u32, &[f64])>> = vec![Vec::new(); n_lists];
        for (v, &c) in views.iter().zip(&assign) {
            raw[c].push((&v.doc_id, v.view_id, &v.vector));
        }
        let entries = raw.into_iter().map(|list| {
            list.into_iter()
                .map(|(d, view, vec)| {
                    (d.to_string(), view, vec.iter().map(|&x| x as f32).collect())
                })
                .collect()
        });
        Ok(Index::assemble(kind, dims, centroids, entries.collect()))
    }

    /// Builds lists from `(doc_id, view_id, vector)` entries, numbering
    /// documents by first appearance.
    fn assemble(
        kind: IndexKind,
        dims: usize,
        centroids: Vec<f32>,
        entries: Vec<Vec<(String, u32, Vec<f32>)>>,
    ) -> Index {
        let mut ordinals: HashMap<String, u32> = HashMap::new();
        let mut doc_ids = Vec::new();
        let lists = entries
            .into_iter()
            .map(|list| {
                let mut pl = PostingList::default();
                for (doc, view, vec) in list {
                    let ord = *ordinals.entry(doc.clone()).or_insert_with(|| {
                        doc_ids.push(doc);
                        (doc_ids.len() - 1) as u32
                    });
                    pl.docs.push(ord);
                    pl.views.push(view);
                    pl.vectors.extend_from_slice(&vec);
                }
                pl
            })
            .collect();
        Index {
            kind,
            dims,
            centroids,
            lists,
            doc_ids,
        }
    }

    /// Indexes every valid view of every matrix.
    pub fn build_from_matrices(
        docs: &[ViewMatrix],
        kind: IndexKind,
        k: usize,
        seed: u64,
    ) -> Result<Index> {
        let views: Vec<IndexedView> = docs
            .iter()
            .flat_map(|d| {
                d.valid_rows().map(|(i, r)| IndexedView {
                    doc_id: d.owner_id.clone(),
                    view_id: i as u32,
                    vector: r.to_vec(),
                })
            })
            .collect();
        Index::build(&views, kind, k, seed)
    }

    pub fn kind(&self) -> IndexKind {
        self.kind
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn n_lists(&self) -> usize {
        self.lists.len()
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn n_vectors(&self) -> usize {
        self.lists.iter().map(PostingList::len).sum()
    }

    /// Sizes of the posting lists.
    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(PostingList::len).collect()
    }

    /// `(doc_id, view_id)` members of posting list `list`.
    pub fn list_members(&self, list: usize) -> Vec<(&str, u32)> {
        let pl = &self.lists[list];
        pl.docs
            .iter()
            .zip(&pl.views)
            .map(|(&d, &v)| (self.doc_ids[d as usize].as_str(), v))
            .collect()
    }

    /// Every stored vector, widened back to `f64`, in list order.
    pub fn stored_views(&self) -> Vec<IndexedView> {
        let mut out = Vec::with_capacity(self.n_vectors());
        for pl in &self.lists {
            for (k, (&d, &v)) in pl.docs.iter().zip(&pl.views).enumerate() {
                out.push(IndexedView {
                    doc_id: self.doc_ids[d as usize].clone(),
                    view_id: v,
                    vector: pl.vectors[k * self.dims..(k + 1) * self.dims]
                        .iter()
                        .map(|&x| f64::from(x))
                        .collect(),
                });
            }
        }
        out
    }

    fn check_query(&self, q: &[f64], top_k: usize) -> Result<()> {
        if q.len() != self.dims {
            return Err(Error::shape("search", &[self.dims], &[q.len()]));
        }
        if top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.n_vectors() == 0 {
            return Err(Error::Index("search on an empty index".into()));
        }
        Ok(())
    }

    /// Lists to scan for `q`.
    fn probe(&self, q: &[f64], nprobe: usize) -> Result<Vec<usize>> {
        match self.kind {
            IndexKind::Flat => Ok(vec![0]),
            IndexKind::Ivf => {
                let k = self.lists.len();
                if nprobe == 0 || nprobe > k {
                    return Err(Error::Config(format!(
                        "nprobe must be in 1..={k}, got {nprobe}"
                    )));
                }
                // Nearest centroid in L2 = largest <q,c> - |c|^2 / 2.
                let mut keyed: Vec<(f64, usize)> = self
                    .centroids
                    .chunks_exact(self.dims)
                    .enumerate()
                    .map(|(c, row)| {
                        let n2: f64 = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
                        (score_f32(q, row) - 0.5 * n2, c)
                    })
                    .collect();
                keyed.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0)
                        .unwrap_or(Ordering::Equal)
                        .then(a.1.cmp(&b.1))
                });
                Ok(keyed.into_iter().take(nprobe).map(|(_, c)| c).collect())
            }
        }
    }

    /// Scans the probed lists for one query vector into `board`.
    fn scan(
        &self,
        q: &[f64],
        nprobe: usize,
        only_view: Option<u32>,
        board: &mut Board,
        stats: &mut SearchResult,
    ) -> Result<()> {
        let d = self.dims;
        for list in self.probe(q, nprobe)? {
            let pl = &self.lists[list];
            stats.probes_done += 1;
            for (k, (&doc, &view)) in pl.docs.iter().zip(&pl.views).enumerate() {
                if only_view.is_some_and(|v| v != view) {
                    continue;
                }
                let s = score_f32(q, &pl.vectors[k * d..(k + 1) * d]);
                stats.vectors_scanned += 1;
                board.offer(doc, s, view);
            }
        }
        Ok(())
    }

    fn top_hits(
        &self,
        docs: &[u32],
        score: impl Fn(u32) -> (f64, Option<u32>),
        top_k: usize,
    ) -> Vec<Hit> {
        let mut ranked: Vec<(u32, f64)> = docs.iter().map(|&d| (d, score(d).0)).collect();
        let cmp = |a: &(u32, f64), b: &(u32, f64)| {
            rank_order(
                (&self.doc_ids[a.0 as usize], a.1),
                (&self.doc_ids[b.0 as usize], b.1),
            )
        };
        if ranked.len() > top_k {
            ranked.select_nth_unstable_by(top_k - 1, cmp);
            ranked.truncate(top_k);
        }
        ranked.sort_by(cmp);
        ranked
            .into_iter()
            .map(|(d, s)| Hit {
                doc_id: self.doc_ids[d as usize].clone(),
                score: s,
                view_id: score(d).1,
            })
            .collect()
    }

    /// Top documents for one query vector, each scored by its best view.
    pub fn search(&self, q: &[f64], top_k: usize, nprobe: usize) -> Result<SearchResult> {
        self.search_filtered(q, top_k, nprobe, None)
    }

    /// As [`Index::search`], scoring only document views numbered
    /// `only_view` when given.
    pub fn search_filtered(
        &self,
        q: &[f64],
        top_k: usize,
        nprobe: usize,
        only_view: Option<u32>,
    ) -> Result<SearchResult> {
        self.check_query(q, top_k)?;
        let mut board = Board::new(self.n_docs());
        let mut out = SearchResult::default();
        self.scan(q, nprobe, only_view, &mut board, &mut out)?;
        out.hits = self.top_hits(
            &board.touched,
            |d| (board.best[d as usize], Some(board.view[d as usize])),
            top_k,
        );
        Ok(out)
    }

    /// Searches with query view `view` alone.
    pub fn search_view(
        &self,
        q: &ViewMatrix,
        view: usize,
        top_k: usize,
        nprobe: usize,
    ) -> Result<SearchResult> {
        if view >= q.views() || !q.is_valid(view) {
            return Err(Error::Routing(format!(
                "view {view} is not a valid query view"
            )));
        }
        self.search(q.row(view), top_k, nprobe)
    }

    pub fn search_routed(
        &self,
        q: &ViewMatrix,
        r: &crate::router::RoutingOutput,
        top_k: usize,
        nprobe: usize,
    ) -> Result<SearchResult> {
        self.search_view(q, r.selected, top_k, nprobe)
    }

    /// CLS-to-CLS search: the query CLS view against document view 0 only.
    pub fn search_single_view(
        &self,
        q: &ViewMatrix,
        top_k: usize,
        nprobe: usize,
    ) -> Result<SearchResult> {
        self.search_filtered(q.cls_view(), top_k, nprobe, Some(0))
    }

    /// One scan per valid query view; a document's score is the sum of its
    /// per-view maxima. On an IVF index a document missed by some view's
    /// probes is credited with the lowest score that view scanned.
    pub fn search_sum_max(
        &self,
        q: &ViewMatrix,
        top_k: usize,
        nprobe: usize,
    ) -> Result<SearchResult> {
        self.multi_view(q, top_k, nprobe, Aggregate::Sum)
    }

    /// One scan per valid query view; a document's score is its best
    /// single view pair.
    pub fn search_max_max(
        &self,
        q: &ViewMatrix,
        top_k: usize,
        nprobe: usize,
    ) -> Result<SearchResult> {
        self.multi_view(q, top_k, nprobe, Aggregate::Max)
    }

    fn multi_view(
        &self,
        q: &ViewMatrix,
        top_k: usize,
        nprobe: usize,
        agg: Aggregate,
    ) -> Result<SearchResult> {
        if q.n_valid() == 0 {
            return Err(Error::Contract("query has no valid views".into()));
        }
        self.check_query(q.row(0), top_k)?;
        let n = self.n_docs();
        let mut board = Board::new(n);
        let mut out = SearchResult::default();
        let mut total = vec![0.0; n];
        let mut hits_per_doc = vec![0u32; n];
        let mut union: Vec<u32> = Vec::new();
        let mut floors = Vec::new();
        for (_, row) in q.valid_rows() {
            self.scan(row, nprobe, None, &mut board, &mut out)?;
            let mut floor = f64::INFINITY;
            for &d in &board.touched {
                let s = board.best[d as usize];
                floor = floor.min(s);
                let di = d as usize;
                if hits_per_doc[di] == 0 {
                    union.push(d);
                    total[di] = match agg {
                        Aggregate::Sum => 0.0,
                        Aggregate::Max => f64::NEG_INFINITY,
                    };
                }
                hits_per_doc[di] += 1;
                match agg {
                    Aggregate::Sum => total[di] += s,
                    Aggregate::Max => total[di] = total[di].max(s),
                }
            }
            floors.push((floor, board.touched.clone()));
            board.clear();
        }
        if agg == Aggregate::Sum {
            let views = floors.len() as u32;
            if union.iter().any(|&d| hits_per_doc[d as usize] < views) {
                // Impute missing per-view maxima.
                let mut seen = vec![false; n];
                for (floor, touched) in &floors {
                    for &d in touched {
                        seen[d as usize] = true;
                    }
                    for &d in &union {
                        if !seen[d as usize] {
                            total[d as usize] += floor;
                        }
                    }
                    for &d in touched {
                        seen[d as usize] = false;
                    }
                }
            }
        }
        out.hits = self.top_hits(&union, |d| (total[d as usize], None), top_k);
        Ok(out)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Aggregate {
    Sum,
    Max,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(doc: &str, view: u32, v: Vec<f64>) -> IndexedView {
        IndexedView {
            doc_id: doc.into(),
            view_id: view,
            vector: v,
        }
    }

    #[test]
    fn exact_match_ranks_first() {
        let views = vec![
            iv("a", 0, vec![1.0, 0.0, 0.0]),
            iv("b", 0, vec![0.0, 1.0, 0.0]),
            iv("b", 1, vec![0.0, 0.0, 1.0]),
        ];
        let idx = Index::build(&views, IndexKind::Flat, 0, 0).unwrap();
        let r = idx.search(&[0.0, 0.0, 1.0], 2, 1).unwrap();
        assert_eq!(r.hits[0].doc_id, "b");
        assert_eq!(r.hits[0].score, 1.0);
        assert_eq!(r.hits[0].view_id, Some(1));
        assert_eq!(r.hits.len(), 2);
        assert_eq!(r.vectors_scanned, 3);
    }

    #[test]
    fn single_vector_single_list() {
        let idx = Index::build(&[iv("a", 0, vec![0.5, 0.5])], IndexKind::Ivf, 1, 3).unwrap();
        assert_eq!(idx.list_sizes(), vec![1]);
    }

    #[test]
    fn build_errors() {
        let dup = vec![iv("a", 0, vec![1.0]), iv("a", 0, vec![2.0])];
        assert!(matches!(
            Index::build(&dup, IndexKind::Flat, 0, 0),
            Err(Error::Index(_))
        ));
        let two = vec![iv("a", 0, vec![1.0]), iv("a", 1, vec![2.0])];
        assert!(matches!(
            Index::build(&two, IndexKind::Ivf, 3, 0),
            Err(Error::Config(_))
        ));
        assert!(Index::build(&[], IndexKind::Flat, 0, 0).is_err());
    }

    #[test]
    fn ties_break_by_doc_id() {
        let views = vec![
            iv("z", 0, vec![1.0]),
            iv("m", 0, vec![1.0]),
            iv("a", 0, vec![1.0]),
        ];
        let idx = Index::build(&views, IndexKind::Flat, 0, 0).unwrap();
        let r = idx.search(&[1.0], 2, 1).unwrap();
        let ids: Vec<_> = r.hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "m"]);
    }

    #[test]
    fn nprobe_bounds() {
        let views: Vec<_> = (0..4)
            .map(|i| iv(&format!("d{i}"), 0, vec![i as f64, 1.0]))
            .collect();
        let idx = Index::build(&views, IndexKind::Ivf, 2, 0).unwrap();
        assert!(idx.search(&[1.0, 0.0], 1, 0).is_err());
        assert!(idx.search(&[1.0, 0.0], 1, 3).is_err());
        assert!(idx.search(&[1.0, 0.0], 1, 2).is_ok());
    }
}
