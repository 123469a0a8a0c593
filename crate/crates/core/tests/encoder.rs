use viewroute_core::encoder::*;
use viewroute_core::params::ParamStore;
use viewroute_core::rng::{normal_tensor, seeded};
use viewroute_core::Tensor;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn add_bias(a: &mut Mat, b: &[f64]) {
    for r in a.iter_mut() {
        for (x, y) in r.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn layer_norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let s = (var + 1e-12).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, x)| (x - mu) / s * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Post-norm encoder written directly from its definition.
fn reference(c: &EncoderConfig, p: &ParamStore, pre: &str, tokens: &[u32]) -> Mat {
    let get = |n: &str| mat(p.get(&format!("{pre}.{n}")).unwrap());
    let vecp = |n: &str| p.get(&format!("{pre}.{n}")).unwrap().data().to_vec();
    let tok = get("tok_emb");
    let pos = get("pos_emb");
    let ids: Vec<usize> = std::iter::once(CLS_ID)
        .chain(tokens.iter().copied())
        .map(|t| t as usize)
        .collect();
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(i, &t)| tok[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    let n = x.len();
    let dh = c.hidden / c.heads;
    for l in 0..c.layers {
        let lp = format!("layer{l}");
        let proj = |x: &Mat, w: &str, b: &str| {
            let mut y = matmul(x, &get(&format!("{lp}.{w}")));
            add_bias(&mut y, &vecp(&format!("{lp}.{b}")));
            y
        };
        let (q, k, v) = (
            proj(&x, "wq", "bq"),
            proj(&x, "wk", "bk"),
            proj(&x, "wv", "bv"),
        );
        let mut cat = vec![vec![0.0; c.hidden]; n];
        for h in 0..c.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        cols.clone().map(|t| q[i][t] * k[j][t]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in cols.clone() {
                    cat[i][t] = (0..n).map(|j| e[j] / z * v[j][t]).sum();
                }
            }
        }
        let o = proj(&cat, "wo", "bo");
        let r: Mat = x
            .iter()
            .zip(&o)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect();
        x = layer_norm(
            &r,
            &vecp(&format!("{lp}.ln1.g")),
            &vecp(&format!("{lp}.ln1.b")),
        );
        let mut hmid = proj(&x, "w1", "b1");
        hmid.iter_mut()
            .for_each(|r| r.iter_mut().for_each(|v| *v = gelu(*v)));
        let f = proj(&hmid, "w2", "b2");
        let r: Mat = x
            .iter()
            .zip(&f)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect();
        x = layer_norm(
            &r,
            &vecp(&format!("{lp}.ln2.g")),
            &vecp(&format!("{lp}.ln2.b")),
        );
    }
    let out = matmul(&x, &get("ws"));
    out.into_iter()
        .map(|r| {
            let n = (r.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
            r.into_iter().map(|v| v / n).collect()
        })
        .collect()
}

fn small() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        hidden: 32,
        dims: 16,
        heads: 4,
        vocab_size: 100,
        max_query_len: 6,
        max_doc_len: 12,
        ..EncoderConfig::default()
    }
}

#[test]
fn transformer_matches_reference_forward() {
    let c = small();
    let enc = Encoder::new(c.clone()).unwrap();
    let mut p = enc.init_params(&mut seeded(4));
    // Non-trivial norms and biases so every parameter matters.
    let names: Vec<String> = p.names().map(str::to_string).collect();
    let mut rng = seeded(5);
    for n in names
        .iter()
        .filter(|n| n.contains(".b") || n.contains(".g"))
    {
        let shape = p.get(n).unwrap().shape().to_vec();
        let noise = normal_tensor(&mut rng, &shape, 0.1);
        for (x, e) in p
            .get_mut(n)
            .unwrap()
            .data_mut()
            .iter_mut()
            .zip(noise.data())
        {
            *x += e;
        }
    }
    let tokens = [5u32, 17, 99, 3, 42, 8, 61, 20];
    for (tower, pre) in [
        (Tower::Query, "encoder.query"),
        (Tower::Document, "encoder.doc"),
    ] {
        let got = enc
            .encode(&p, "x", EncoderInput::Tokens(&tokens[..6]), tower)
            .unwrap();
        let want = reference(&c, &p, pre, &tokens[..6]);
        assert_eq!(got.views(), 7);
        for i in 0..7 {
            for j in 0..16 {
                assert!((got.row(i)[j] - want[i][j]).abs() < 1e-10);
            }
        }
        assert!(got.max_norm_error() < 1e-12);
    }
}

#[test]
fn truncation_and_tied_towers() {
    let c = EncoderConfig {
        tied_towers: true,
        ..small()
    };
    let enc = Encoder::new(c).unwrap();
    let p = enc.init_params(&mut seeded(1));
    let long: Vec<u32> = (2..30).collect();
    let q = enc
        .encode(&p, "q", EncoderInput::Tokens(&long), Tower::Query)
        .unwrap();
    assert_eq!(q.views(), 7);
    assert_eq!(enc.truncations(), 1);
    let d = enc
        .encode(&p, "d", EncoderInput::Tokens(&long[..6]), Tower::Document)
        .unwrap();
    assert_eq!(q.rows(), d.rows());
    assert!(enc
        .encode(&p, "bad", EncoderInput::Tokens(&[100]), Tower::Query)
        .is_err());
}

#[test]
fn projection_backbone_prepends_mean_view() {
    let c = EncoderConfig {
        backbone: Backbone::Projection,
        input_dims: 3,
        dims: 3,
        projection_init: ProjectionInit::Identity,
        normalize_rows: false,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(c).unwrap();
    let p = enc.init_params(&mut seeded(0));
    let x = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![3.0, 4.0, 0.0]]).unwrap();
    let v = enc
        .encode(&p, "v", EncoderInput::Vectors(&x), Tower::Document)
        .unwrap();
    assert_eq!(v.row(0), &[2.0, 2.0, 1.0]);
    assert_eq!(v.row(2), &[3.0, 4.0, 0.0]);
    let empty = Tensor::zeros(&[0, 3]);
    assert!(enc
        .encode(&p, "e", EncoderInput::Vectors(&empty), Tower::Document)
        .is_err());
}
