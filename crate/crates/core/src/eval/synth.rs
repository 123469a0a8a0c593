//! Synthetic multi-intent retrieval task.
//!
//! The raw space splits into a content subspace and a small syntax
//! subspace. Each intent owns an orthonormal prototype in content space and
//! a handful of topic directions; a document belongs to one (intent, topic)
//! and its views scatter around `prototype + topic_weight * topic`.
//!
//! A query is a bag of token vectors. One token is a noisy copy of a view of
//! the target document plus a marker direction from the syntax subspace.
//! Ambiguous queries also carry noisy copies of views from documents of two
//! other intents. The rest are stopword tokens living in the syntax
//! subspace. Since documents have no syntax component, the marked token
//! alone ranks the target first (this is checked by brute force while
//! generating), whereas the token mean mixes in the distractors.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Qrels, Record, Triplet};
use crate::encoder::ViewMatrix;
use crate::error::{Error, Result};
use crate::rng::{normal_vec, seeded, substream, SeededRng};
use crate::tensor::{dot, l2_norm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub views_per_doc: usize,
    pub n_intents: usize,
    pub dims: usize,
    pub ambiguity_rate: f64,
    pub seed: u64,
    pub topics_per_intent: usize,
    pub n_train_queries: usize,
    pub n_dev_queries: usize,
    /// Tokens per query.
    pub query_tokens: usize,
    pub distractors: usize,
    pub topic_weight: f64,
    pub view_noise: f64,
    pub query_noise: f64,
    pub marker_weight: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 10_000,
            views_per_doc: 8,
            n_intents: 6,
            dims: 64,
            ambiguity_rate: 0.8,
            seed: 7,
            topics_per_intent: 8,
            n_train_queries: 4000,
            n_dev_queries: 500,
            query_tokens: 8,
            distractors: 2,
            topic_weight: 0.5,
            view_noise: 1.0,
            query_noise: 0.3,
            marker_weight: 1.0,
        }
    }
}

impl SynthConfig {
    /// Width of the syntax subspace (marker plus stopword directions).
    pub fn syntax_dims(&self) -> usize {
        (self.dims / 8).max(2)
    }

    pub fn content_dims(&self) -> usize {
        self.dims.saturating_sub(self.syntax_dims())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_docs == 0 || self.views_per_doc == 0 || self.n_intents == 0 {
            return bad("synth: docs, views and intents must be positive".into());
        }
        if self.dims < 8 {
            return bad(format!("synth: dims must be at least 8, got {}", self.dims));
        }
        if self.n_intents > self.content_dims() {
            return bad(format!(
                "synth: {} intents exceed the {} content dimensions of a {}-dim space",
                self.n_intents,
                self.content_dims(),
                self.dims
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return bad("synth: ambiguity_rate must lie in [0, 1]".into());
        }
        if self.ambiguity_rate > 0.0 && self.n_intents <= self.distractors {
            return bad("synth: ambiguous queries need more intents than distractors".into());
        }
        if self.query_tokens < 1 + self.distractors {
            return bad("synth: query_tokens must fit the relevant token and distractors".into());
        }
        if self.topics_per_intent == 0 {
            return bad("synth: topics_per_intent must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDoc {
    pub id: String,
    pub intent: usize,
    pub topic: usize,
    /// `views_per_doc × dims`, unit rows.
    pub views: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthQuery {
    pub id: String,
    pub target: String,
    pub intent: usize,
    pub ambiguous: bool,
    /// Token position of the marked token.
    pub relevant_token: usize,
    /// Documents the distractor tokens were copied from.
    pub distractor_docs: Vec<String>,
    /// `query_tokens × dims`.
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub config: SynthConfig,
    pub docs: Vec<SynthDoc>,
    pub train_queries: Vec<SynthQuery>,
    pub dev_queries: Vec<SynthQuery>,
    pub triplets: Vec<Triplet>,
    pub train_qrels: Qrels,
    pub dev_qrels: Qrels,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = l2_norm(&v);
    for x in &mut v {
        *x /= n;
    }
    v
}

fn gram_schmidt(rng: &mut SeededRng, n: usize, width: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v = normal_vec(rng, width, 1.0);
        for b in &out {
            let p = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        if l2_norm(&v) > 1e-6 {
            out.push(unit(v));
        }
    }
    out
}

struct Space {
    dims: usize,
    content: usize,
    prototypes: Vec<Vec<f64>>,
    topics: Vec<Vec<Vec<f64>>>,
}

impl Space {
    /// Embeds a content vector into the full space.
    fn lift(&self, c: &[f64]) -> Vec<f64> {
        let mut v = c.to_vec();
        v.resize(self.dims, 0.0);
        v
    }

    fn marker(&self) -> usize {
        self.content
    }

    fn stopword(&self, rng: &mut SeededRng) -> Vec<f64> {
        let mut v = vec![0.0; self.dims];
        v[rng.random_range(self.content + 1..self.dims)] = 1.0;
        v
    }
}

fn noisy_copy(rng: &mut SeededRng, view: &[f64], content: usize, sigma: f64) -> Vec<f64> {
    let noise = normal_vec(rng, content, sigma / (content as f64).sqrt());
    let mut v = view.to_vec();
    for (x, n) in v.iter_mut().zip(noise) {
        *x += n;
    }
    let n = l2_norm(&v[..content]);
    for x in &mut v[..content] {
        *x /= n;
    }
    v
}

/// Best inner product of `v` with any view of `d`.
fn best(v: &[f64], d: &Tensor) -> f64 {
    (0..d.rows())
        .map(|j| dot(v, d.row(j)))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn synth_corpus(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let c = config;
    let content = c.content_dims();
    let mut rng = seeded(c.seed);
    let prototypes = gram_schmidt(&mut rng, c.n_intents, content);
    let topics: Vec<Vec<Vec<f64>>> = (0..c.n_intents)
        .map(|_| {
            (0..c.topics_per_intent)
                .map(|_| unit(normal_vec(&mut rng, content, 1.0)))
                .collect()
        })
        .collect();
    let space = Space {
        dims: c.dims,
        content,
        prototypes,
        topics,
    };

    let mut docs = Vec::with_capacity(c.n_docs);
    let width = (c.n_docs.max(2) - 1).to_string().len();
    for i in 0..c.n_docs {
        let intent = i % c.n_intents;
        let topic = rng.random_range(0..c.topics_per_intent);
        let center: Vec<f64> = space.prototypes[intent]
            .iter()
            .zip(&space.topics[intent][topic])
            .map(|(p, t)| p + c.topic_weight * t)
            .collect();
        let mut data = Vec::with_capacity(c.views_per_doc * c.dims);
        for _ in 0..c.views_per_doc {
            let noise = normal_vec(&mut rng, content, c.view_noise / (content as f64).sqrt());
            let v: Vec<f64> = center.iter().zip(noise).map(|(a, b)| a + b).collect();
            data.extend(space.lift(&unit(v)));
        }
        docs.push(SynthDoc {
            id: format!("d{i:0width$}"),
            intent,
            topic,
            views: Tensor::matrix(c.views_per_doc, c.dims, data)?,
        });
    }

    let mut by_intent: Vec<Vec<usize>> = vec![Vec::new(); c.n_intents];
    for (i, d) in docs.iter().enumerate() {
        by_intent[d.intent].push(i);
    }

    let total = c.n_train_queries + c.n_dev_queries;
    let queries: Vec<SynthQuery> = (0..total)
        .into_par_iter()
        .map(|qi| make_query(c, &space, &docs, &by_intent, qi))
        .collect::<Result<_>>()?;
    let (train_queries, dev_queries) = {
        let mut q = queries;
        let dev = q.split_off(c.n_train_queries);
        (q, dev)
    };

    let mut trng = substream(c.seed, "triplets");
    let mut triplets = Vec::with_capacity(train_queries.len());
    for q in &train_queries {
        let neg = loop {
            let cand = if !q.distractor_docs.is_empty() && trng.random_bool(0.5) {
                q.distractor_docs
                    .choose(&mut trng)
                    .expect("non-empty")
                    .clone()
            } else {
                docs[trng.random_range(0..docs.len())].id.clone()
            };
            if cand != q.target {
                break cand;
            }
        };
        triplets.push(Triplet {
            query_id: q.id.clone(),
            pos_id: q.target.clone(),
            neg_id: neg,
        });
    }
    let qrels = |qs: &[SynthQuery]| -> Qrels {
        qs.iter()
            .map(|q| (q.id.clone(), BTreeMap::from([(q.target.clone(), 1)])))
            .collect()
    };
    Ok(SynthData {
        config: c.clone(),
        train_qrels: qrels(&train_queries),
        dev_qrels: qrels(&dev_queries),
        docs,
        train_queries,
        dev_queries,
        triplets,
    })
}

fn make_query(
    c: &SynthConfig,
    space: &Space,
    docs: &[SynthDoc],
    by_intent: &[Vec<usize>],
    qi: usize,
) -> Result<SynthQuery> {
    let mut rng = substream(c.seed, &format!("query{qi}"));
    let split = if qi < c.n_train_queries {
        "train"
    } else {
        "dev"
    };
    let width = (c.n_train_queries + c.n_dev_queries)
        .max(2)
        .to_string()
        .len();
    for _attempt in 0..1000 {
        let t = rng.random_range(0..docs.len());
        let target = &docs[t];
        let view = rng.random_range(0..c.views_per_doc);
        let mut relevant = noisy_copy(
            &mut rng,
            target.views.row(view),
            space.content,
            c.query_noise,
        );
        // Rejection: the marked token must rank its target first.
        let s_target = best(&relevant, &target.views);
        let beaten = docs
            .iter()
            .enumerate()
            .any(|(j, d)| j != t && best(&relevant, &d.views) >= s_target);
        if beaten {
            continue;
        }
        relevant[space.marker()] = c.marker_weight;

        let ambiguous = rng.random_bool(c.ambiguity_rate);
        let mut tokens = vec![relevant];
        let mut distractor_docs = Vec::new();
        if ambiguous {
            let mut others: Vec<usize> = (0..c.n_intents).filter(|&i| i != target.intent).collect();
            others.shuffle(&mut rng);
            for &intent in others.iter().take(c.distractors) {
                let &d = by_intent[intent].choose(&mut rng).expect("intent has docs");
                let v = rng.random_range(0..c.views_per_doc);
                tokens.push(noisy_copy(
                    &mut rng,
                    docs[d].views.row(v),
                    space.content,
                    c.query_noise,
                ));
                distractor_docs.push(docs[d].id.clone());
            }
        }
        while tokens.len() < c.query_tokens {
            tokens.push(space.stopword(&mut rng));
        }
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        order.shuffle(&mut rng);
        let relevant_token = order.iter().position(|&o| o == 0).expect("present");
        let data: Vec<f64> = order
            .iter()
            .flat_map(|&o| tokens[o].iter().copied())
            .collect();
        return Ok(SynthQuery {
            id: format!("{split}-q{qi:0width$}"),
            target: target.id.clone(),
            intent: target.intent,
            ambiguous,
            relevant_token,
            distractor_docs,
            tokens: Tensor::matrix(tokens.len(), c.dims, data)?,
        });
    }
    Err(Error::Config(format!(
        "synth: could not draw an unambiguous relevant token for query {qi}; raise view_noise or lower query_noise"
    )))
}

impl SynthData {
    pub fn doc_records(&self) -> Vec<Record> {
        self.docs
            .iter()
            .map(|d| Record {
                id: d.id.clone(),
                text: format!("intent{} topic{}_{} {}", d.intent, d.intent, d.topic, d.id),
            })
            .collect()
    }

    pub fn query_records(queries: &[SynthQuery]) -> Vec<Record> {
        queries
            .iter()
            .map(|q| Record {
                id: q.id.clone(),
                text: format!("intent{} {}", q.intent, q.target),
            })
            .collect()
    }

    /// Raw token vectors as dumpable matrices.
    pub fn doc_vectors(&self) -> Result<Vec<ViewMatrix>> {
        self.docs
            .iter()
            .map(|d| ViewMatrix::dense(d.id.clone(), d.views.clone()))
            .collect()
    }

    pub fn query_vectors(queries: &[SynthQuery]) -> Result<Vec<ViewMatrix>> {
        queries
            .iter()
            .map(|q| ViewMatrix::dense(q.id.clone(), q.tokens.clone()))
            .collect()
    }
}
