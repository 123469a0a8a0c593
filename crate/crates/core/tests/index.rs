use std::collections::HashSet;

use proptest::prelude::*;
use rand::Rng;
use viewroute_core::encoder::ViewMatrix;
use viewroute_core::error::Error;
use viewroute_core::index::{load_index, save_index, Index, IndexKind, IndexedView};
use viewroute_core::rng::{normal_vec, seeded, SeededRng};

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn corpus(rng: &mut SeededRng, docs: usize, max_views: usize, dims: usize) -> Vec<ViewMatrix> {
    (0..docs)
        .map(|i| {
            let n = rng.random_range(1..=max_views);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| unit(normal_vec(rng, dims, 1.0))).collect();
            ViewMatrix::from_rows(format!("doc{i:04}"), &rows).unwrap()
        })
        .collect()
}

/// Scan of every stored view with the same `f32` storage and `f64`
/// coordinate-order accumulation, best view per document, full sort.
fn oracle(docs: &[ViewMatrix], q: &[f64], top_k: usize) -> Vec<(String, f64)> {
    let mut best: Vec<(String, f64)> = docs
        .iter()
        .map(|d| {
            let mut b = f64::NEG_INFINITY;
            for (_, r) in d.valid_rows() {
                let mut s = 0.0;
                for k in 0..q.len() {
                    s += q[k] * (r[k] as f32) as f64;
                }
                b = b.max(s);
            }
            (d.owner_id.clone(), b)
        })
        .collect();
    best.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    best.truncate(top_k);
    best
}

fn pairs(r: &viewroute_core::index::SearchResult) -> Vec<(String, f64)> {
    r.hits.iter().map(|h| (h.doc_id.clone(), h.score)).collect()
}

#[test]
fn flat_search_equals_full_scan() {
    let mut rng = seeded(1);
    let docs = corpus(&mut rng, 300, 6, 12);
    let flat = Index::build_from_matrices(&docs, IndexKind::Flat, 0, 0).unwrap();
    for _ in 0..50 {
        let q = normal_vec(&mut rng, 12, 1.0);
        let got = flat.search(&q, 10, 1).unwrap();
        assert_eq!(pairs(&got), oracle(&docs, &q, 10));
        assert_eq!(got.vectors_scanned, flat.n_vectors());
    }
}

#[test]
fn ties_break_by_doc_id() {
    let v = |d: &str, view: u32, x: Vec<f64>| IndexedView {
        doc_id: d.into(),
        view_id: view,
        vector: x,
    };
    let idx = Index::build(
        &[
            v("b", 0, vec![1.0, 0.0]),
            v("a", 0, vec![1.0, 0.0]),
            v("c", 0, vec![0.0, 1.0]),
            v("a", 1, vec![0.5, 0.5]),
        ],
        IndexKind::Flat,
        0,
        0,
    )
    .unwrap();
    let r = idx.search(&[1.0, 0.0], 3, 1).unwrap();
    let ids: Vec<&str> = r.hits.iter().map(|h| h.doc_id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert_eq!(r.hits[0].view_id, Some(0));
}

fn recall(ivf: &Index, flat: &Index, qs: &[Vec<f64>], nprobe: usize) -> f64 {
    let mut found = 0;
    for q in qs {
        let truth: HashSet<String> = flat
            .search(q, 10, 1)
            .unwrap()
            .hits
            .into_iter()
            .map(|h| h.doc_id)
            .collect();
        found += ivf
            .search(q, 10, nprobe)
            .unwrap()
            .hits
            .iter()
            .filter(|h| truth.contains(&h.doc_id))
            .count();
    }
    found as f64 / (10 * qs.len()) as f64
}

#[test]
fn ivf_recall_grows_with_nprobe() {
    let mut rng = seeded(4);
    let docs = corpus(&mut rng, 800, 4, 16);
    let flat = Index::build_from_matrices(&docs, IndexKind::Flat, 0, 0).unwrap();
    let ivf = Index::build_from_matrices(&docs, IndexKind::Ivf, 16, 9).unwrap();
    assert_eq!(ivf.list_sizes().iter().sum::<usize>(), flat.n_vectors());
    // Queries near stored views, as in retrieval.
    let qs: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            let base = docs[i * 7].row(0);
            let noise = normal_vec(&mut rng, 16, 0.1);
            base.iter().zip(&noise).map(|(a, b)| a + b).collect()
        })
        .collect();
    let curve: Vec<f64> = (1..=16).map(|p| recall(&ivf, &flat, &qs, p)).collect();
    assert!(curve.windows(2).all(|w| w[0] <= w[1]), "{curve:?}");
    assert_eq!(curve[15], 1.0);
    for q in &qs {
        assert_eq!(
            pairs(&ivf.search(q, 10, 16).unwrap()),
            pairs(&flat.search(q, 10, 1).unwrap())
        );
    }
}

#[test]
fn multi_view_scans_once_per_query_view() {
    let mut rng = seeded(6);
    let docs = corpus(&mut rng, 200, 5, 8);
    let q = ViewMatrix::from_rows(
        "q",
        &(0..30)
            .map(|_| normal_vec(&mut rng, 8, 1.0))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    for (kind, k, nprobe) in [(IndexKind::Flat, 0, 1), (IndexKind::Ivf, 8, 3)] {
        let idx = Index::build_from_matrices(&docs, kind, k, 1).unwrap();
        let sm = idx.search_sum_max(&q, 10, nprobe).unwrap();
        let one = idx.search_view(&q, 4, 10, nprobe).unwrap();
        assert_eq!(sm.probes_done, 30 * one.probes_done);
        if kind == IndexKind::Flat {
            assert_eq!(sm.vectors_scanned, 30 * one.vectors_scanned);
            // Exhaustive sum-max equals the per-document scorer on the stored values.
            let stored: Vec<ViewMatrix> = docs
                .iter()
                .map(|d| {
                    let rows: Vec<Vec<f64>> = d
                        .valid_rows()
                        .map(|(_, r)| r.iter().map(|&x| (x as f32) as f64).collect())
                        .collect();
                    ViewMatrix::from_rows(d.owner_id.clone(), &rows).unwrap()
                })
                .collect();
            for h in &sm.hits {
                let d = stored.iter().find(|d| d.owner_id == h.doc_id).unwrap();
                let want = viewroute_core::scoring::score_sum_max(&q, d).unwrap().value;
                assert!((h.score - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn build_and_search_errors() {
    let mut rng = seeded(3);
    let docs = corpus(&mut rng, 5, 2, 4);
    assert!(matches!(
        Index::build_from_matrices(&docs, IndexKind::Ivf, 100, 0),
        Err(Error::Config(_))
    ));
    let ivf = Index::build_from_matrices(&docs, IndexKind::Ivf, 3, 0).unwrap();
    for p in [0, 4] {
        assert!(matches!(
            ivf.search(&[1.0, 0.0, 0.0, 0.0], 3, p),
            Err(Error::Config(_))
        ));
    }
    let dup = docs[0].clone();
    assert!(matches!(
        Index::build_from_matrices(&[docs[0].clone(), dup], IndexKind::Flat, 0, 0),
        Err(Error::Index(_))
    ));
}

#[test]
fn saved_index_answers_identically() {
    let mut rng = seeded(12);
    let docs = corpus(&mut rng, 150, 4, 8);
    let dir = tempfile::tempdir().unwrap();
    for (kind, k) in [(IndexKind::Flat, 0), (IndexKind::Ivf, 6)] {
        let idx = Index::build_from_matrices(&docs, kind, k, 5).unwrap();
        let p = dir.path().join("i.flix");
        save_index(&p, &idx).unwrap();
        let back = load_index(&p, Some(kind)).unwrap();
        assert_eq!(back, idx);
        let q = normal_vec(&mut rng, 8, 1.0);
        let n = if kind == IndexKind::Flat { 1 } else { 2 };
        assert_eq!(
            pairs(&back.search(&q, 5, n).unwrap()),
            pairs(&idx.search(&q, 5, n).unwrap())
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn ivf_build_is_seed_deterministic_and_exhaustive(seed in 0u64..1000, k in 1usize..8) {
        let mut rng = seeded(seed);
        let docs = corpus(&mut rng, 40, 3, 5);
        let a = Index::build_from_matrices(&docs, IndexKind::Ivf, k, seed).unwrap();
        let b = Index::build_from_matrices(&docs, IndexKind::Ivf, k, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let q: Vec<f64> = normal_vec(&mut rng, 5, 1.0);
        let flat = Index::build_from_matrices(&docs, IndexKind::Flat, 0, 0).unwrap();
        prop_assert_eq!(pairs(&a.search(&q, 40, k).unwrap()), pairs(&flat.search(&q, 40, 1).unwrap()));
    }
}
