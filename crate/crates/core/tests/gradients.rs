use proptest::prelude::*;
use rand::Rng;
use viewroute_core::data::Input;
use viewroute_core::encoder::{Encoder, EncoderConfig};
use viewroute_core::params::ParamStore;
use viewroute_core::rng::{normal_vec, seeded};
use viewroute_core::router;
use viewroute_core::scoring::ScorerKind;
use viewroute_core::trainer::{batch_loss, Example, LossConfig, LossKind, Negatives};
use viewroute_core::{Graph, Tensor};

const H: f64 = 1e-5;

struct Setup {
    encoder: Encoder,
    params: ParamStore,
    docs: Vec<Input>,
    queries: Vec<Input>,
    cfg: LossConfig,
}

fn setup(seed: u64, negatives: Negatives) -> Setup {
    let ec = EncoderConfig {
        layers: 2,
        hidden: 64,
        dims: 64,
        heads: 4,
        vocab_size: 40,
        max_query_len: 8,
        max_doc_len: 8,
        ..EncoderConfig::default()
    };
    let encoder = Encoder::new(ec).unwrap();
    let mut rng = seeded(seed);
    let mut params = encoder.init_params(&mut rng);
    params.extend(router::init_params(64, 16, &mut rng));
    let mut seq = |lo: usize, hi: usize| {
        let n = rng.random_range(lo..=hi);
        Input::Tokens((0..n).map(|_| rng.random_range(2..40)).collect())
    };
    let docs = (0..4).map(|_| seq(3, 7)).collect();
    let queries = (0..2).map(|_| seq(2, 6)).collect();
    Setup {
        encoder,
        params,
        docs,
        queries,
        cfg: LossConfig {
            scorer: ScorerKind::Routed,
            negatives,
            loss: LossKind::SoftmaxCe,
            margin: 1.0,
            score_scale: 1.0,
            epsilon: 0.05,
        },
    }
}

/// Loss of the batch; with `pins` the detached routing probabilities are
/// held at the given values, which makes the straight-through loss a smooth
/// function of the parameters.
fn loss(
    s: &Setup,
    params: &ParamStore,
    gumbel_seed: u64,
    pins: Option<Vec<Tensor>>,
) -> (
    Graph,
    f64,
    Vec<(String, viewroute_core::Var)>,
    viewroute_core::Var,
) {
    let mut g = match pins {
        Some(p) => Graph::with_detach_pins(p),
        None => Graph::new(),
    };
    let b = params.bind(&mut g, true);
    let batch = [
        Example {
            query: &s.queries[0],
            pos: 0,
            neg: 1,
        },
        Example {
            query: &s.queries[1],
            pos: 2,
            neg: 3,
        },
    ];
    let out = batch_loss(
        &mut g,
        &b,
        &s.encoder,
        &s.docs,
        &batch,
        &s.cfg,
        0.7,
        &mut seeded(gumbel_seed),
    )
    .unwrap();
    let v = g.scalar_value(out.loss);
    let vars = b.iter().map(|(n, v)| (n.to_string(), v)).collect();
    (g, v, vars, out.loss)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over two coordinates of every parameter:
/// the largest analytic gradient and a random one.
fn check_seed(seed: u64, negatives: Negatives) -> f64 {
    let s = setup(seed, negatives);
    let (mut g, _, vars, l) = loss(&s, &s.params, seed, None);
    g.backward(l).unwrap();
    let pins = g.detached_values().to_vec();
    let mut rng = seeded(seed ^ 0xfeed);
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    for (name, var) in &vars {
        let grad = g
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; g.value(*var).numel()]);
        let biggest = (0..grad.len())
            .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
            .unwrap();
        let picks = [biggest, rng.random_range(0..grad.len())];
        for &k in &picks {
            let at = |delta: f64| {
                let mut p = s.params.clone();
                p.get_mut(name).unwrap().data_mut()[k] += delta;
                loss(&s, &p, seed, Some(pins.clone())).1
            };
            num.push((at(H) - at(-H)) / (2.0 * H));
            ana.push(grad[k]);
        }
    }
    let diff: f64 = num
        .iter()
        .zip(&ana)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(&num).max(norm(&ana))
}

#[test]
fn routed_loss_gradients_match_finite_differences() {
    for seed in 0..4 {
        let err = check_seed(seed, Negatives::Triplet);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
    let err = check_seed(9, Negatives::InBatch);
    assert!(err < 1e-4, "in-batch: relative error {err:e}");
}

#[test]
fn pinned_rebuild_reproduces_the_loss() {
    let s = setup(3, Negatives::Triplet);
    let (g, v, _, _) = loss(&s, &s.params, 3, None);
    let (_, w, _, _) = loss(&s, &s.params, 3, Some(g.detached_values().to_vec()));
    assert_eq!(v.to_bits(), w.to_bits());
}

/// `sum(C ⊙ softmax(gelu(layer_norm(x) W)))` and its gradient in `x`.
fn chain(x: &[f64], w: &[f64], c: &[f64]) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let xv = g.param(Tensor::matrix(3, 4, x.to_vec()).unwrap());
    let wv = g.constant(Tensor::matrix(4, 3, w.to_vec()).unwrap());
    let gam = g.constant(Tensor::filled(&[4], 1.3));
    let bet = g.constant(Tensor::filled(&[4], -0.2));
    let n = g.layer_norm(xv, gam, bet, 1e-12).unwrap();
    let m = g.matmul(n, wv).unwrap();
    let t = g.gelu(m);
    let sm = g.softmax(t, 1).unwrap();
    let cv = g.constant(Tensor::matrix(3, 3, c.to_vec()).unwrap());
    let p = g.mul(sm, cv).unwrap();
    let out = g.sum(p);
    g.backward(out).unwrap();
    (g.scalar_value(out), g.grad(xv).unwrap().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn op_chain_gradient(seed in 0u64..10_000) {
        let mut r = seeded(seed);
        let x = normal_vec(&mut r, 12, 1.0);
        let w = normal_vec(&mut r, 12, 1.0);
        let c = normal_vec(&mut r, 9, 1.0);
        let (_, grad) = chain(&x, &w, &c);
        for k in 0..12 {
            let mut xp = x.clone();
            xp[k] += H;
            let mut xm = x.clone();
            xm[k] -= H;
            let fd = (chain(&xp, &w, &c).0 - chain(&xm, &w, &c).0) / (2.0 * H);
            prop_assert!((fd - grad[k]).abs() <= 1e-7 + 1e-5 * fd.abs(), "coord {}: {} vs {}", k, fd, grad[k]);
        }
    }
}
