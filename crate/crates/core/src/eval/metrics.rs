use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Qrels;

/// Ranked `(doc_id, score)` pairs of one query.
pub type Ranking = Vec<(String, f64)>;
/// query id → ranking.
pub type Run = BTreeMap<String, Ranking>;

/// Score descending, then doc id ascending.
pub fn sort_ranking(r: &mut Ranking) {
    r.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
}

fn sorted(r: &Ranking) -> Ranking {
    let mut r = r.clone();
    sort_ranking(&mut r);
    r
}

pub fn reciprocal_rank(r: &Ranking, rels: &BTreeMap<String, u32>, k: usize) -> f64 {
    sorted(r)
        .iter()
        .take(k)
        .position(|(d, _)| rels.get(d).is_some_and(|&g| g > 0))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

pub fn ndcg(r: &Ranking, rels: &BTreeMap<String, u32>, k: usize) -> f64 {
    let dcg: f64 = sorted(r)
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, (d, _))| gain(rels.get(d).copied().unwrap_or(0)) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<u32> = rels.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn recall(r: &Ranking, rels: &BTreeMap<String, u32>, k: usize) -> f64 {
    let total = rels.values().filter(|&&g| g > 0).count();
    if total == 0 {
        return 0.0;
    }
    let found = sorted(r)
        .iter()
        .take(k)
        .filter(|(d, _)| rels.get(d).is_some_and(|&g| g > 0))
        .count();
    found as f64 / total as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Mrr(usize),
    Ndcg(usize),
    Recall(usize),
}

impl Metric {
    /// Parses `mrr@10`, `ndcg@10`, `recall@100`.
    pub fn parse(s: &str) -> Option<Metric> {
        let (name, k) = s.trim().split_once('@')?;
        let k: usize = k.parse().ok().filter(|&k| k >= 1)?;
        match name.to_ascii_lowercase().as_str() {
            "mrr" => Some(Metric::Mrr(k)),
            "ndcg" => Some(Metric::Ndcg(k)),
            "recall" => Some(Metric::Recall(k)),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Metric::Mrr(k) => format!("mrr@{k}"),
            Metric::Ndcg(k) => format!("ndcg@{k}"),
            Metric::Recall(k) => format!("recall@{k}"),
        }
    }

    pub fn of(&self, r: &Ranking, rels: &BTreeMap<String, u32>) -> f64 {
        match *self {
            Metric::Mrr(k) => reciprocal_rank(r, rels, k),
            Metric::Ndcg(k) => ndcg(r, rels, k),
            Metric::Recall(k) => recall(r, rels, k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub values: Vec<(String, f64)>,
    pub evaluated: usize,
    /// Run queries without qrels or without any positive judgment.
    pub skipped: usize,
}

impl Evaluation {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, v)| *v)
    }
}

/// Means over the run's queries that have at least one positive judgment.
pub fn evaluate(run: &Run, qrels: &Qrels, metrics: &[Metric]) -> Evaluation {
    let mut sums = vec![0.0; metrics.len()];
    let mut evaluated = 0;
    let mut skipped = 0;
    for (q, ranking) in run {
        let Some(rels) = qrels.get(q).filter(|r| r.values().any(|&g| g > 0)) else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        for (s, m) in sums.iter_mut().zip(metrics) {
            *s += m.of(ranking, rels);
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} run queries have no positive judgments and were skipped");
    }
    let values = metrics
        .iter()
        .zip(sums)
        .map(|(m, s)| {
            (
                m.label(),
                if evaluated == 0 {
                    0.0
                } else {
                    s / evaluated as f64
                },
            )
        })
        .collect();
    Evaluation {
        values,
        evaluated,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rels(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
        pairs.iter().map(|(d, g)| (d.to_string(), *g)).collect()
    }

    fn ranking(ids: &[&str]) -> Ranking {
        ids.iter()
            .enumerate()
            .map(|(i, d)| (d.to_string(), 100.0 - i as f64))
            .collect()
    }

    #[test]
    fn rank_cases() {
        let r = rels(&[("b", 1)]);
        assert_eq!(reciprocal_rank(&ranking(&["b", "a"]), &r, 10), 1.0);
        assert_eq!(reciprocal_rank(&ranking(&["a", "b"]), &r, 10), 0.5);
        let long: Vec<String> = (0..10)
            .map(|i| format!("x{i}"))
            .chain(["b".into()])
            .collect();
        let long: Vec<&str> = long.iter().map(String::as_str).collect();
        assert_eq!(reciprocal_rank(&ranking(&long), &r, 10), 0.0);
    }

    #[test]
    fn ndcg_cases() {
        let r = rels(&[("b", 1)]);
        let v = ndcg(&ranking(&["a", "b"]), &r, 10);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg(&ranking(&["b", "a"]), &r, 10), 1.0);
        assert_eq!(ndcg(&ranking(&["a"]), &r, 10), 0.0);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let r = rels(&[("a", 1)]);
        let run = vec![("b".to_string(), 1.0), ("a".to_string(), 1.0)];
        assert_eq!(reciprocal_rank(&run, &r, 10), 1.0);
    }

    #[test]
    fn metric_labels_parse() {
        assert_eq!(Metric::parse("mrr@10"), Some(Metric::Mrr(10)));
        assert_eq!(Metric::parse("NDCG@5"), Some(Metric::Ndcg(5)));
        assert_eq!(Metric::parse("map@10"), None);
        assert_eq!(Metric::parse("mrr@0"), None);
    }
}
