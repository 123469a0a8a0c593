//! Index-backed retrieval with any scorer.

use rayon::prelude::*;

use crate::encoder::ViewMatrix;
use crate::error::Result;
use crate::eval::metrics::Run;
use crate::index::{Index, SearchResult};
use crate::model::Model;
use crate::scoring::ScorerKind;

/// Searches one encoded query; returns the result and the routed view.
pub fn search_one(
    model: &Model,
    index: &Index,
    q: &ViewMatrix,
    scorer: ScorerKind,
    top_k: usize,
    nprobe: usize,
) -> Result<(SearchResult, Option<usize>)> {
    Ok(match scorer {
        ScorerKind::Routed => {
            let sel = model.route(q)?.selected;
            (index.search_view(q, sel, top_k, nprobe)?, Some(sel))
        }
        ScorerKind::StaticCls => (index.search_view(q, 0, top_k, nprobe)?, Some(0)),
        ScorerKind::SingleView => (index.search_single_view(q, top_k, nprobe)?, None),
        ScorerKind::SumMax => (index.search_sum_max(q, top_k, nprobe)?, None),
        ScorerKind::MaxMax => (index.search_max_max(q, top_k, nprobe)?, None),
    })
}

pub fn retrieve(
    model: &Model,
    index: &Index,
    queries: &[ViewMatrix],
    scorer: ScorerKind,
    top_k: usize,
    nprobe: usize,
) -> Result<Run> {
    let results: Vec<_> = queries
        .par_iter()
        .map(|q| {
            let (r, _) = search_one(model, index, q, scorer, top_k, nprobe)?;
            Ok((
                q.owner_id.clone(),
                r.hits.into_iter().map(|h| (h.doc_id, h.score)).collect(),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().collect())
}
