//! Query and document towers producing per-token view matrices.
//!
//! Two backbones are available. The transformer backbone embeds token ids,
//! runs a post-norm encoder stack, and projects every position through the
//! shared projection `ws`. The projection backbone takes precomputed token
//! vectors, prepends their mean as the CLS input, and applies `ws` alone.
//! Either way the output has one row per position with the CLS view at row 0,
//! optionally L2-normalized.

mod dump;
mod tokenizer;
mod transformer;
mod views;

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::{normal_tensor, SeededRng};
use crate::tensor::Tensor;

pub use dump::{ingest_embeddings, read_manifest, write_dump, ManifestEntry};
pub use tokenizer::{HashTokenizer, CLS_ID, PAD_ID};
pub use views::ViewMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tower {
    Query,
    Document,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Transformer,
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionInit {
    Random,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub layers: usize,
    /// Transformer width.
    pub hidden: usize,
    /// Output width after the shared projection.
    pub dims: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Width of precomputed input vectors (projection backbone).
    pub input_dims: usize,
    pub ffn_mult: usize,
    pub tied_towers: bool,
    pub max_query_len: usize,
    pub max_doc_len: usize,
    pub activation: Activation,
    pub normalize_rows: bool,
    pub projection_init: ProjectionInit,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backbone: Backbone::Transformer,
            layers: 2,
            hidden: 64,
            dims: 64,
            heads: 4,
            vocab_size: 1024,
            input_dims: 64,
            ffn_mult: 4,
            tied_towers: false,
            max_query_len: 30,
            max_doc_len: 200,
            activation: Activation::Gelu,
            normalize_rows: true,
            projection_init: ProjectionInit::Random,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims == 0 {
            return bad("encoder.dims must be positive".into());
        }
        if self.max_query_len == 0 || self.max_doc_len == 0 {
            return bad("encoder max lengths must be positive".into());
        }
        match self.backbone {
            Backbone::Transformer => {
                if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
                    return bad(format!(
                        "encoder.hidden ({}) must be a positive multiple of encoder.heads ({})",
                        self.hidden, self.heads
                    ));
                }
                if self.vocab_size <= 2 {
                    return bad("encoder.vocab_size must exceed the 2 reserved ids".into());
                }
                if self.ffn_mult == 0 {
                    return bad("encoder.ffn_mult must be positive".into());
                }
            }
            Backbone::Projection => {
                if self.input_dims == 0 {
                    return bad("encoder.input_dims must be positive".into());
                }
                if self.projection_init == ProjectionInit::Identity && self.input_dims != self.dims
                {
                    return bad("identity projection init needs input_dims == dims".into());
                }
            }
        }
        Ok(())
    }

    pub fn max_len(&self, tower: Tower) -> usize {
        match tower {
            Tower::Query => self.max_query_len,
            Tower::Document => self.max_doc_len,
        }
    }

    /// Parameter-name prefix of a tower.
    pub fn prefix(&self, tower: Tower) -> &'static str {
        match (self.tied_towers, tower) {
            (true, _) => "encoder.shared",
            (false, Tower::Query) => "encoder.query",
            (false, Tower::Document) => "encoder.doc",
        }
    }

    fn towers(&self) -> &'static [Tower] {
        if self.tied_towers {
            &[Tower::Query]
        } else {
            &[Tower::Query, Tower::Document]
        }
    }
}

/// Raw input to a tower.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    Tokens(&'a [u32]),
    /// One precomputed vector per token, `tokens × input_dims`.
    Vectors(&'a Tensor),
}

#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    truncations: AtomicUsize,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Encoder {
            config: self.config.clone(),
            truncations: AtomicUsize::new(self.truncations()),
        }
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Encoder {
            config,
            truncations: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// How many inputs were cut to the tower's maximum length so far.
    pub fn truncations(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }

    pub fn init_params(&self, rng: &mut SeededRng) -> ParamStore {
        let c = &self.config;
        let mut p = ParamStore::new();
        for &tower in c.towers() {
            let pre = c.prefix(tower);
            match c.backbone {
                Backbone::Transformer => transformer::init(c, pre, rng, &mut p),
                Backbone::Projection => {
                    let ws = match c.projection_init {
                        ProjectionInit::Identity => Tensor::eye(c.dims),
                        ProjectionInit::Random => normal_tensor(
                            rng,
                            &[c.input_dims, c.dims],
                            1.0 / (c.input_dims as f64).sqrt(),
                        ),
                    };
                    p.insert(format!("{pre}.ws"), ws);
                }
            }
        }
        p
    }

    fn truncate<'a>(&self, input: EncoderInput<'a>, tower: Tower) -> Result<EncoderInput<'a>> {
        let max = self.config.max_len(tower);
        let len = match input {
            EncoderInput::Tokens(t) => t.len(),
            EncoderInput::Vectors(v) => {
                if v.rank() != 2 {
                    return Err(Error::Contract(format!(
                        "input vectors must be a matrix, got {:?}",
                        v.shape()
                    )));
                }
                v.rows()
            }
        };
        if len <= max {
            return Ok(input);
        }
        self.truncations.fetch_add(1, Ordering::Relaxed);
        log::warn!("{tower:?} input of {len} tokens truncated to {max}");
        match input {
            EncoderInput::Tokens(t) => Ok(EncoderInput::Tokens(&t[..max])),
            // Vectors are re-sliced by the caller below.
            EncoderInput::Vectors(_) => Ok(input),
        }
    }

    /// Graph forward pass; returns the `(len + 1) × dims` output rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Bound,
        input: EncoderInput<'_>,
        tower: Tower,
    ) -> Result<Var> {
        let c = &self.config;
        let pre = c.prefix(tower);
        let input = self.truncate(input, tower)?;
        let hidden = match (c.backbone, input) {
            (Backbone::Transformer, EncoderInput::Tokens(tokens)) => {
                transformer::forward(c, g, params, pre, tokens)?
            }
            (Backbone::Projection, EncoderInput::Vectors(v)) => {
                let x = projection_input(v, c.input_dims, c.max_len(tower))?;
                g.constant(x)
            }
            (b, _) => {
                return Err(Error::Contract(format!(
                    "{b:?} backbone cannot encode this input kind"
                )))
            }
        };
        let ws = params.get(&format!("{pre}.ws"))?;
        let out = g.matmul(hidden, ws)?;
        if c.normalize_rows {
            g.normalize_rows(out)
        } else {
            Ok(out)
        }
    }

    pub fn encode(
        &self,
        params: &ParamStore,
        owner_id: &str,
        input: EncoderInput<'_>,
        tower: Tower,
    ) -> Result<ViewMatrix> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let out = self.forward(&mut g, &bound, input, tower)?;
        ViewMatrix::dense(owner_id, g.value(out).clone())
    }

    /// Encodes independent inputs on the rayon pool; output order follows
    /// input order.
    pub fn encode_many(
        &self,
        params: &ParamStore,
        items: &[(String, EncoderInput<'_>)],
        tower: Tower,
    ) -> Result<Vec<ViewMatrix>> {
        items
            .par_iter()
            .map(|(id, input)| self.encode(params, id, *input, tower))
            .collect()
    }
}

/// `[mean(rows); rows]`, truncated to `max` token rows.
fn projection_input(v: &Tensor, input_dims: usize, max: usize) -> Result<Tensor> {
    if v.cols() != input_dims {
        return Err(Error::shape(
            "projection input",
            v.shape(),
            &[v.rows(), input_dims],
        ));
    }
    let n = v.rows().min(max);
    if n == 0 {
        return Err(Error::Contract(
            "projection backbone needs at least one input vector".into(),
        ));
    }
    let mut data = vec![0.0; input_dims];
    for i in 0..n {
        for (m, x) in data.iter_mut().zip(v.row(i)) {
            *m += x / n as f64;
        }
    }
    data.extend_from_slice(&v.data()[..n * input_dims]);
    Tensor::matrix(n + 1, input_dims, data)
}
