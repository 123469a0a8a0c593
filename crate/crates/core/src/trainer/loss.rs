//! Contrastive loss of one micro-batch, built on a fresh graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Input;
use crate::encoder::{Encoder, Tower};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::rng::SeededRng;
use crate::router::{route_graph, RouteMode};
use crate::scoring::ScorerKind;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Negatives {
    /// Each query sees its own positive and negative.
    Triplet,
    /// Each query sees every document of the batch.
    InBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCe,
    Margin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub scorer: ScorerKind,
    pub negatives: Negatives,
    pub loss: LossKind,
    pub margin: f64,
    /// Multiplies scores before the softmax.
    pub score_scale: f64,
    pub epsilon: f64,
}

/// One training example: a query and indices into the document table.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub query: &'a Input,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Debug)]
pub struct BatchLoss {
    pub loss: Var,
    /// Routed view position per query (`None` for unrouted scorers).
    pub selected: Vec<Option<usize>>,
}

/// Document block: stacked padded rows and the padding mask.
struct Block {
    rows: Var,
    pad: Vec<bool>,
    count: usize,
    width: usize,
}

fn stack(g: &mut Graph, docs: &[Var], width: usize, dims: usize, cls_only: bool) -> Result<Block> {
    let mut parts = Vec::with_capacity(docs.len() * 2);
    let mut pad = Vec::with_capacity(docs.len() * width);
    for &d in docs {
        let n = g.shape(d)[0];
        parts.push(d);
        if n < width {
            parts.push(g.constant(Tensor::zeros(&[width - n, dims])));
        }
        pad.extend((0..width).map(|i| i >= n || (cls_only && i > 0)));
    }
    Ok(Block {
        rows: g.concat_rows(&parts)?,
        pad,
        count: docs.len(),
        width,
    })
}

/// Scores of query rows `q` (`n × dims`) against every document of `b`,
/// reduced per document by max over document views; returns `n × count`.
fn view_max(g: &mut Graph, q: Var, b: &Block) -> Result<Var> {
    let n = g.shape(q)[0];
    let dt = g.transpose(b.rows)?;
    let s = g.matmul(q, dt)?;
    let pad: Vec<bool> = (0..n).flat_map(|_| b.pad.iter().copied()).collect();
    let s = g.mask_fill(s, &pad, f64::NEG_INFINITY)?;
    let s = g.reshape(s, &[n * b.count, b.width])?;
    let (m, _) = g.max_axis(s, 1)?;
    g.reshape(m, &[n, b.count])
}

/// Scores of one encoded query against a block; returns `1 × count`.
#[allow(clippy::too_many_arguments)]
fn score_row(
    g: &mut Graph,
    p: &Bound,
    q: Var,
    b: &Block,
    cfg: &LossConfig,
    tau: f64,
    rng: &mut SeededRng,
    selected: &mut Option<usize>,
) -> Result<Var> {
    let row = match cfg.scorer {
        ScorerKind::Routed => {
            let n = g.shape(q)[0];
            let r = route_graph(
                g,
                p,
                q,
                &vec![false; n],
                cfg.epsilon,
                tau,
                RouteMode::Train,
                rng,
            )?;
            *selected = Some(r.selected);
            let w = g.reshape(r.onehot, &[1, n])?;
            let s = g.matmul(w, q)?;
            view_max(g, s, b)?
        }
        ScorerKind::StaticCls | ScorerKind::SingleView => {
            let s = g.gather_rows(q, &[0])?;
            view_max(g, s, b)?
        }
        ScorerKind::SumMax => {
            let m = view_max(g, q, b)?;
            let s = g.sum_axis(m, 0)?;
            let c = b.count;
            g.reshape(s, &[1, c])?
        }
        ScorerKind::MaxMax => {
            let m = view_max(g, q, b)?;
            let (s, _) = g.max_axis(m, 0)?;
            let c = b.count;
            g.reshape(s, &[1, c])?
        }
    };
    Ok(g.scale(row, cfg.score_scale))
}

/// Builds the loss of `batch` against the document table `docs`. Gumbel
/// draws for routed queries come from `rng` in batch order.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    g: &mut Graph,
    p: &Bound,
    encoder: &Encoder,
    docs: &[Input],
    batch: &[Example<'_>],
    cfg: &LossConfig,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if cfg.loss == LossKind::Margin && cfg.negatives == Negatives::InBatch {
        return Err(Error::Config(
            "the margin loss needs triplet negatives".into(),
        ));
    }
    let dims = encoder.config().dims;
    // Encode each distinct document once, in first-use order.
    let mut local: Vec<usize> = Vec::new();
    let slot = |d: usize, local: &mut Vec<usize>| match local.iter().position(|&x| x == d) {
        Some(i) => i,
        None => {
            local.push(d);
            local.len() - 1
        }
    };
    let pairs: Vec<(usize, usize)> = batch
        .iter()
        .map(|e| (slot(e.pos, &mut local), slot(e.neg, &mut local)))
        .collect();
    let mut enc = Vec::with_capacity(local.len());
    for &d in &local {
        let input = docs
            .get(d)
            .ok_or_else(|| Error::Contract(format!("document index {d} out of range")))?;
        enc.push(encoder.forward(g, p, input.as_encoder_input(), Tower::Document)?);
    }
    let width = enc.iter().map(|&v| g.shape(v)[0]).max().expect("non-empty");
    let cls_only = cfg.scorer == ScorerKind::SingleView;
    let all = match cfg.negatives {
        Negatives::InBatch => Some(stack(g, &enc, width, dims, cls_only)?),
        Negatives::Triplet => None,
    };

    let mut rows = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut selected = Vec::with_capacity(batch.len());
    for (e, &(pi, ni)) in batch.iter().zip(&pairs) {
        let q = encoder.forward(g, p, e.query.as_encoder_input(), Tower::Query)?;
        let own;
        let (block, target) = match &all {
            Some(b) => (b, pi),
            None => {
                own = stack(g, &[enc[pi], enc[ni]], width, dims, cls_only)?;
                (&own, 0)
            }
        };
        let mut sel = None;
        rows.push(score_row(g, p, q, block, cfg, tau, rng, &mut sel)?);
        targets.push(target);
        selected.push(sel);
    }
    let s = g.concat_rows(&rows)?;
    let loss = match cfg.loss {
        LossKind::SoftmaxCe => {
            let lp = g.log_softmax(s, 1)?;
            let picked = g.pick(lp, &targets)?;
            let m = g.mean(picked);
            g.scale(m, -1.0)
        }
        LossKind::Margin => {
            // max(0, margin - s_pos + s_neg)
            let dir = g.constant(Tensor::matrix(2, 1, vec![-1.0, 1.0])?);
            let diff = g.matmul(s, dir)?;
            let shift = g.constant(Tensor::filled(&[batch.len(), 1], cfg.margin));
            let h = g.add(diff, shift)?;
            let h = g.relu(h);
            g.mean(h)
        }
    };
    Ok(BatchLoss { loss, selected })
}
