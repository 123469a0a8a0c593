//! End-to-end training of encoder and router on query/document triplets.

pub mod loss;
pub mod optim;

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{Input, Qrels};
use crate::encoder::Tower;
use crate::error::{Error, Result};
use crate::eval::metrics::{evaluate, Metric};
use crate::eval::SynthData;
use crate::index::{Index, IndexKind};
use crate::model::Model;
use crate::params::ParamStore;
use crate::retrieval::retrieve;
use crate::rng::substream;
use crate::scoring::ScorerKind;

pub use loss::{batch_loss, BatchLoss, Example, LossConfig, LossKind, Negatives};
pub use optim::{lr_schedule, AdamW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub scorer: ScorerKind,
    pub negatives: Negatives,
    pub loss: LossKind,
    pub margin: f64,
    pub score_scale: f64,
    /// Router parameters stay fixed for this many initial steps.
    pub router_freeze_steps: usize,
    /// Dev evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub log_every: usize,
    /// Distillation from a lexical teacher; not available.
    pub distill: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            weight_decay: 0.01,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 32,
            seed: 0,
            scorer: ScorerKind::Routed,
            negatives: Negatives::Triplet,
            loss: LossKind::SoftmaxCe,
            margin: 1.0,
            score_scale: 1.0,
            router_freeze_steps: 0,
            eval_every: 250,
            log_every: 10,
            distill: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.distill {
            return Err(Error::Unsupported(
                "distillation from a lexical teacher is not implemented".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return bad("train.lr must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("train.weight_decay must be non-negative");
        }
        if self.total_steps < self.warmup_steps {
            return bad("train.total_steps must be at least train.warmup_steps");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.score_scale > 0.0) {
            return bad("train.score_scale must be positive");
        }
        if self.loss == LossKind::Margin && self.negatives == Negatives::InBatch {
            return bad("the margin loss needs triplet negatives");
        }
        if self.log_every == 0 {
            return bad("train.log_every must be positive");
        }
        Ok(())
    }
}

/// In-memory training set. Triplets index into `docs` and `queries`.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub doc_ids: Vec<String>,
    pub docs: Vec<Input>,
    pub queries: Vec<Input>,
    /// `(query, positive doc, negative doc)` indices.
    pub triplets: Vec<(usize, usize, usize)>,
    pub dev: Option<DevSet>,
}

impl TrainData {
    /// Raw token vectors of a synthetic corpus, with its dev split.
    pub fn from_synth(d: &SynthData) -> TrainData {
        let ordinal: HashMap<&str, usize> = d
            .docs
            .iter()
            .enumerate()
            .map(|(i, x)| (x.id.as_str(), i))
            .collect();
        let query: HashMap<&str, usize> = d
            .train_queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id.as_str(), i))
            .collect();
        TrainData {
            doc_ids: d.docs.iter().map(|x| x.id.clone()).collect(),
            docs: d
                .docs
                .iter()
                .map(|x| Input::Vectors(x.views.clone()))
                .collect(),
            queries: d
                .train_queries
                .iter()
                .map(|q| Input::Vectors(q.tokens.clone()))
                .collect(),
            triplets: d
                .triplets
                .iter()
                .map(|t| {
                    (
                        query[t.query_id.as_str()],
                        ordinal[t.pos_id.as_str()],
                        ordinal[t.neg_id.as_str()],
                    )
                })
                .collect(),
            dev: Some(DevSet {
                queries: d
                    .dev_queries
                    .iter()
                    .map(|q| (q.id.clone(), Input::Vectors(q.tokens.clone())))
                    .collect(),
                qrels: d.dev_qrels.clone(),
            }),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DevSet {
    pub queries: Vec<(String, Input)>,
    pub qrels: Qrels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    /// Selection counts by query view position since the previous entry.
    pub selected_hist: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_mrr10: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best dev MRR@10, or the final ones without a dev
    /// set.
    pub best: ParamStore,
    pub best_step: usize,
    pub best_dev_mrr10: Option<f64>,
    pub final_params: ParamStore,
    pub losses: Vec<f64>,
    pub dev_curve: Vec<(usize, f64)>,
}

/// Dev MRR@10 with a flat index over all documents.
pub fn dev_mrr10(model: &Model, data: &TrainData, dev: &DevSet, scorer: ScorerKind) -> Result<f64> {
    let items: Vec<(String, Input)> = data
        .doc_ids
        .iter()
        .cloned()
        .zip(data.docs.iter().cloned())
        .collect();
    let docs = model.encode_all(&items, Tower::Document)?;
    let index = Index::build_from_matrices(&docs, IndexKind::Flat, 0, 0)?;
    let queries = model.encode_all(&dev.queries, Tower::Query)?;
    let run = retrieve(model, &index, &queries, scorer, 10, 1)?;
    let e = evaluate(&run, &dev.qrels, &[Metric::Mrr(10)]);
    Ok(e.values[0].1)
}

fn is_router_param(name: &str) -> bool {
    name.starts_with("router.")
}

/// Trains `model` in place, writing one JSON line per logged step to `log`.
pub fn train(
    model: &mut Model,
    data: &TrainData,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.triplets.is_empty() && cfg.total_steps > 0 {
        return Err(Error::Config("no training triplets".into()));
    }
    let loss_cfg = LossConfig {
        scorer: cfg.scorer,
        negatives: cfg.negatives,
        loss: cfg.loss,
        margin: cfg.margin,
        score_scale: cfg.score_scale,
        epsilon: model.config.router.epsilon,
    };
    let mut order: Vec<usize> = (0..data.triplets.len()).collect();
    let mut shuffle_rng = substream(cfg.seed, "batches");
    let mut gumbel_rng = substream(cfg.seed, "gumbel");
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0;
    let mut epoch = 0;
    let mut opt = AdamW::new(cfg.weight_decay);
    let hist_len = model.config.encoder.max_query_len + 1;
    let mut hist = vec![0usize; hist_len];
    let mut losses = Vec::with_capacity(cfg.total_steps);
    let mut dev_curve = Vec::new();
    let mut best = model.params.clone();
    let mut best_step = 0;
    let mut best_mrr: Option<f64> = None;

    let mut consider =
        |model: &Model, step: usize, dev_curve: &mut Vec<(usize, f64)>| -> Result<Option<f64>> {
            let Some(dev) = &data.dev else {
                return Ok(None);
            };
            let m = dev_mrr10(model, data, dev, cfg.scorer)?;
            dev_curve.push((step, m));
            if best_mrr.is_none_or(|b| m > b) {
                best_mrr = Some(m);
                best = model.params.clone();
                best_step = step;
            }
            Ok(Some(m))
        };

    for step in 0..cfg.total_steps {
        let lr = lr_schedule(step, cfg.lr, cfg.warmup_steps, cfg.total_steps);
        let tau = model
            .config
            .router
            .tau_at(step as f64 / cfg.total_steps as f64);
        let mut examples = Vec::with_capacity(cfg.batch_size);
        while examples.len() < cfg.batch_size {
            if cursor == order.len() {
                cursor = 0;
                epoch += 1;
                order.shuffle(&mut shuffle_rng);
            }
            let (q, p, n) = data.triplets[order[cursor]];
            cursor += 1;
            examples.push(Example {
                query: &data.queries[q],
                pos: p,
                neg: n,
            });
        }

        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, true);
        let out = batch_loss(
            &mut g,
            &bound,
            &model.encoder,
            &data.docs,
            &examples,
            &loss_cfg,
            tau,
            &mut gumbel_rng,
        )?;
        let loss = g.scalar_value(out.loss);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {loss} (lr {lr:.3e}, tau {tau:.3})"),
            });
        }
        g.backward(out.loss)?;
        opt.begin_step();
        let frozen = step < cfg.router_freeze_steps;
        for (name, var) in bound.iter() {
            if frozen && is_router_param(name) {
                continue;
            }
            let grad = match g.grad(var) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; g.value(var).numel()],
            };
            if let Some(bad) = grad.iter().find(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    reason: format!("gradient of {name} contains {bad}"),
                });
            }
            opt.update(name, model.params.get_mut(name)?, &grad, lr)?;
        }
        drop(g);
        losses.push(loss);
        for s in out.selected.into_iter().flatten() {
            if s < hist.len() {
                hist[s] += 1;
            }
        }

        let done = step + 1;
        let eval_now = cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.total_steps;
        let dev = if eval_now {
            consider(model, done, &mut dev_curve)?
        } else {
            None
        };
        if done % cfg.log_every == 0 || dev.is_some() {
            let entry = StepLog {
                step: done,
                epoch,
                loss,
                lr,
                tau,
                selected_hist: std::mem::replace(&mut hist, vec![0; hist_len]),
                dev_mrr10: dev,
            };
            serde_json::to_writer(&mut *log, &entry)?;
            log.write_all(b"\n")?;
        }
    }
    let final_dev = consider(model, cfg.total_steps, &mut dev_curve)?;
    if let Some(m) = final_dev {
        let entry = StepLog {
            step: cfg.total_steps,
            epoch,
            loss: losses.last().copied().unwrap_or(f64::NAN),
            lr: 0.0,
            tau: model.config.router.tau_at(1.0),
            selected_hist: hist,
            dev_mrr10: Some(m),
        };
        serde_json::to_writer(&mut *log, &entry)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    let final_params = model.params.clone();
    let best = if data.dev.is_some() {
        best
    } else {
        final_params.clone()
    };
    Ok(TrainOutcome {
        best,
        best_step: if data.dev.is_some() {
            best_step
        } else {
            cfg.total_steps
        },
        best_dev_mrr10: best_mrr,
        final_params,
        losses,
        dev_curve,
    })
}
