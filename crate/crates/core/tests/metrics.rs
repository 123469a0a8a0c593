use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;
use viewroute_core::data::load_qrels;
use viewroute_core::eval::metrics::{evaluate, ndcg, reciprocal_rank, Metric, Ranking};
use viewroute_core::eval::{load_run, save_run};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

// Per query, with gain 2^g - 1 and discount log2(rank + 1):
//   q1  D03 (g1) at rank 3                   RR 1/3   nDCG (1/2) / 1
//   q2  D01 (g2) rank 1, D05 (g1) rank 5     RR 1     nDCG (3 + 1/log2 6) / (3 + 1/log2 3)
//   q3  D11 (g1) never retrieved             RR 0     nDCG 0
//   q4  D10 (g3) at rank 10                  RR 1/10  nDCG (7/log2 11) / 7
//   q5  D02, D04, D06 (g1); D02 and D04 tie at 8.0 and D02 sorts first, so
//       ranks 2, 3, 4                        RR 1/2   nDCG (1/log2 3 + 1/2 + 1/log2 5) / (1 + 1/log2 3 + 1/2)
const PER_QUERY_NDCG: [f64; 5] = [
    0.5,
    0.9327783893101107,
    0.0,
    0.2890648263178879,
    0.7328286204777911,
];
const MRR10: f64 = (1.0 / 3.0 + 1.0 + 0.0 + 0.1 + 0.5) / 5.0;
const NDCG10: f64 = 0.49093436722115796;

#[test]
fn fixture_metrics_match_hand_computation() {
    let run = load_run(&fixture("fixture.run")).unwrap();
    let qrels = load_qrels(&fixture("fixture.qrels")).unwrap();
    assert_eq!(run.len(), 5);
    let e = evaluate(&run, &qrels, &[Metric::Mrr(10), Metric::Ndcg(10)]);
    assert_eq!(e.evaluated, 5);
    assert_eq!(e.get("mrr@10").unwrap(), MRR10);
    assert!((e.get("ndcg@10").unwrap() - NDCG10).abs() < 1e-9);
    for (i, (q, r)) in run.iter().enumerate() {
        assert!(
            (ndcg(r, &qrels[q], 10) - PER_QUERY_NDCG[i]).abs() < 1e-9,
            "{q}"
        );
    }
    assert_eq!(reciprocal_rank(&run["q5"], &qrels["q5"], 10), 0.5);
    assert_eq!(reciprocal_rank(&run["q4"], &qrels["q4"], 9), 0.0);
}

#[test]
fn run_file_round_trip() {
    let run = load_run(&fixture("fixture.run")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.trec");
    save_run(&p, &run, "copy").unwrap();
    assert_eq!(load_run(&p).unwrap(), run);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn ndcg_is_bounded_and_one_when_ideal(grades in proptest::collection::vec(0u32..4, 1..15)) {
        let rels: BTreeMap<String, u32> = grades.iter().enumerate().map(|(i, &g)| (format!("d{i:02}"), g)).collect();
        prop_assume!(grades.iter().any(|&g| g > 0));
        let listed: Ranking = grades.iter().enumerate().map(|(i, _)| (format!("d{i:02}"), -(i as f64))).collect();
        let v = ndcg(&listed, &rels, 10);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        let mut ideal: Vec<(String, f64)> = rels.iter().map(|(d, &g)| (d.clone(), g as f64)).collect();
        ideal.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        prop_assert!((ndcg(&ideal, &rels, 10) - 1.0).abs() < 1e-12);
    }
}
