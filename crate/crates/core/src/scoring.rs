//! Query–document scorers over view matrices. All use the plain inner
//! product; normalization is the encoder's business. Padding views are
//! skipped on both sides.

use serde::{Deserialize, Serialize};

use crate::encoder::ViewMatrix;
use crate::error::{Error, Result};
use crate::router::RoutingOutput;
use crate::tensor::dot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// CLS against CLS.
    SingleView,
    /// Sum over query views of the best document view.
    SumMax,
    /// Best pair of views.
    MaxMax,
    /// One router-selected query view against every document view.
    Routed,
    /// Routed scoring with the selection fixed to the query CLS view.
    StaticCls,
}

impl ScorerKind {
    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::SingleView => "single_view",
            ScorerKind::SumMax => "sum_max",
            ScorerKind::MaxMax => "max_max",
            ScorerKind::Routed => "routed",
            ScorerKind::StaticCls => "static_cls",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub scorer: ScorerKind,
    pub selected_view: Option<usize>,
}

fn check(q: &ViewMatrix, d: &ViewMatrix) -> Result<()> {
    if q.dims() != d.dims() {
        return Err(Error::shape(
            "score",
            &[q.views(), q.dims()],
            &[d.views(), d.dims()],
        ));
    }
    if q.n_valid() == 0 || d.n_valid() == 0 {
        return Err(Error::Contract(
            "scoring needs at least one valid view per side".into(),
        ));
    }
    Ok(())
}

/// Best inner product of `v` with any valid view of `d`.
pub fn best_match(v: &[f64], d: &ViewMatrix) -> f64 {
    d.valid_rows()
        .map(|(_, r)| dot(v, r))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `best_match` for every query view; `None` at padding.
pub fn per_view_max(q: &ViewMatrix, d: &ViewMatrix) -> Result<Vec<Option<f64>>> {
    check(q, d)?;
    Ok((0..q.views())
        .map(|i| q.is_valid(i).then(|| best_match(q.row(i), d)))
        .collect())
}

pub fn score_single_view(q: &ViewMatrix, d: &ViewMatrix) -> Result<Score> {
    if q.dims() != d.dims() {
        return Err(Error::shape("score", &[q.dims()], &[d.dims()]));
    }
    if q.views() == 0 || d.views() == 0 {
        return Err(Error::Contract("CLS view missing".into()));
    }
    Ok(Score {
        value: dot(q.cls_view(), d.cls_view()),
        scorer: ScorerKind::SingleView,
        selected_view: None,
    })
}

pub fn score_sum_max(q: &ViewMatrix, d: &ViewMatrix) -> Result<Score> {
    check(q, d)?;
    let value = q.valid_rows().map(|(_, r)| best_match(r, d)).sum();
    Ok(Score {
        value,
        scorer: ScorerKind::SumMax,
        selected_view: None,
    })
}

pub fn score_max_max(q: &ViewMatrix, d: &ViewMatrix) -> Result<Score> {
    check(q, d)?;
    let value = q
        .valid_rows()
        .map(|(_, r)| best_match(r, d))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Score {
        value,
        scorer: ScorerKind::MaxMax,
        selected_view: None,
    })
}

/// Scores with query view `view` alone.
pub fn score_view(q: &ViewMatrix, d: &ViewMatrix, view: usize) -> Result<Score> {
    check(q, d)?;
    if view >= q.views() || !q.is_valid(view) {
        return Err(Error::Routing(format!(
            "selected view {view} is not a valid query view"
        )));
    }
    Ok(Score {
        value: best_match(q.row(view), d),
        scorer: ScorerKind::Routed,
        selected_view: Some(view),
    })
}

pub fn score_routed(q: &ViewMatrix, d: &ViewMatrix, r: &RoutingOutput) -> Result<Score> {
    score_view(q, d, r.selected)
}

pub fn score_static_cls(q: &ViewMatrix, d: &ViewMatrix) -> Result<Score> {
    let mut s = score_view(q, d, 0)?;
    s.scorer = ScorerKind::StaticCls;
    Ok(s)
}
