//! Post-norm transformer stack over token ids.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::{normal_tensor, SeededRng};
use crate::tensor::Tensor;

use super::{Activation, EncoderConfig, CLS_ID};

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

pub(super) fn init(c: &EncoderConfig, pre: &str, rng: &mut SeededRng, p: &mut ParamStore) {
    let h = c.hidden;
    let f = h * c.ffn_mult;
    let positions = c.max_query_len.max(c.max_doc_len) + 1;
    p.insert(
        format!("{pre}.tok_emb"),
        normal_tensor(rng, &[c.vocab_size, h], INIT_STD),
    );
    p.insert(
        format!("{pre}.pos_emb"),
        normal_tensor(rng, &[positions, h], INIT_STD),
    );
    for l in 0..c.layers {
        let lp = format!("{pre}.layer{l}");
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("{lp}.{w}"), normal_tensor(rng, &[h, h], INIT_STD));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            p.insert(format!("{lp}.{b}"), Tensor::zeros(&[h]));
        }
        p.insert(format!("{lp}.w1"), normal_tensor(rng, &[h, f], INIT_STD));
        p.insert(format!("{lp}.b1"), Tensor::zeros(&[f]));
        p.insert(format!("{lp}.w2"), normal_tensor(rng, &[f, h], INIT_STD));
        p.insert(format!("{lp}.b2"), Tensor::zeros(&[h]));
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{lp}.{ln}.g"), Tensor::filled(&[h], 1.0));
            p.insert(format!("{lp}.{ln}.b"), Tensor::zeros(&[h]));
        }
    }
    p.insert(
        format!("{pre}.ws"),
        normal_tensor(rng, &[h, c.dims], 1.0 / (h as f64).sqrt()),
    );
}

fn affine(g: &mut Graph, p: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let xw = g.matmul(x, p.get(w)?)?;
    g.add_row(xw, p.get(b)?)
}

/// Hidden states `(len + 1) × hidden` for `[CLS] tokens`.
pub(super) fn forward(
    c: &EncoderConfig,
    g: &mut Graph,
    p: &Bound,
    pre: &str,
    tokens: &[u32],
) -> Result<Var> {
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(CLS_ID as usize);
    for &t in tokens {
        if t as usize >= c.vocab_size {
            return Err(Error::Contract(format!(
                "token id {t} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        ids.push(t as usize);
    }
    let n = ids.len();
    let positions: Vec<usize> = (0..n).collect();
    let tok = g.gather_rows(p.get(&format!("{pre}.tok_emb"))?, &ids)?;
    let pos = g.gather_rows(p.get(&format!("{pre}.pos_emb"))?, &positions)?;
    let mut x = g.add(tok, pos)?;

    let dh = c.hidden / c.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for l in 0..c.layers {
        let lp = format!("{pre}.layer{l}");
        let q = affine(g, p, x, &format!("{lp}.wq"), &format!("{lp}.bq"))?;
        let k = affine(g, p, x, &format!("{lp}.wk"), &format!("{lp}.bk"))?;
        let v = affine(g, p, x, &format!("{lp}.wv"), &format!("{lp}.bv"))?;
        let mut heads = Vec::with_capacity(c.heads);
        for hd in 0..c.heads {
            let (s, e) = (hd * dh, (hd + 1) * dh);
            let qh = g.slice_cols(q, s, e)?;
            let kh = g.slice_cols(k, s, e)?;
            let vh = g.slice_cols(v, s, e)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, inv_sqrt);
            let attn = g.softmax(scores, 1)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let o = affine(g, p, cat, &format!("{lp}.wo"), &format!("{lp}.bo"))?;
        let res = g.add(x, o)?;
        x = g.layer_norm(
            res,
            p.get(&format!("{lp}.ln1.g"))?,
            p.get(&format!("{lp}.ln1.b"))?,
            LN_EPS,
        )?;
        let hmid = affine(g, p, x, &format!("{lp}.w1"), &format!("{lp}.b1"))?;
        let hmid = match c.activation {
            Activation::Gelu => g.gelu(hmid),
            Activation::Tanh => g.tanh(hmid),
        };
        let f = affine(g, p, hmid, &format!("{lp}.w2"), &format!("{lp}.b2"))?;
        let res = g.add(x, f)?;
        x = g.layer_norm(
            res,
            p.get(&format!("{lp}.ln2.g"))?,
            p.get(&format!("{lp}.ln2.b"))?,
            LN_EPS,
        )?;
    }
    debug_assert_eq!(g.shape(x), &[n, c.hidden]);
    Ok(x)
}
