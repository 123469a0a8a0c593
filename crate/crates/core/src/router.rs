//! View router: self-attention over a query's views, a dense head giving one
//! logit per view, softmax, masking, and Gumbel-Softmax selection with a
//! straight-through one-hot.
//!
//! Graph construction works on the compact matrix of routable rows; the
//! value-level outputs are scattered back to full view positions with
//! padding reported as `-inf` (attention, logits) or `0` (probabilities).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::ViewMatrix;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::{normal_tensor, SeededRng};
use crate::tensor::Tensor;

pub const WQ: &str = "router.Wq";
pub const WK: &str = "router.Wk";
pub const DENSE_W: &str = "router.dense.w";
pub const DENSE_B: &str = "router.dense.b";

const U_MIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    /// Width of the query/key transformations.
    pub d_k: usize,
    pub epsilon: f64,
    /// Starting Gumbel-Softmax temperature.
    pub tau: f64,
    /// Temperature reached at the end of training when annealing.
    pub tau_final: f64,
    pub anneal_tau: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            d_k: 32,
            epsilon: 0.05,
            tau: 1.0,
            tau_final: 0.1,
            anneal_tau: true,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self, dims: usize) -> Result<()> {
        if self.d_k == 0 {
            return Err(Error::Config("router.d_k must be positive".into()));
        }
        if self.d_k > dims {
            return Err(Error::Config(format!(
                "router.d_k ({}) exceeds the embedding width ({dims})",
                self.d_k
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("router.epsilon must be non-negative".into()));
        }
        check_tau(self.tau)?;
        check_tau(self.tau_final)
    }

    /// Temperature at `progress` in [0, 1] of training.
    pub fn tau_at(&self, progress: f64) -> f64 {
        if !self.anneal_tau {
            return self.tau;
        }
        let p = progress.clamp(0.0, 1.0);
        self.tau + (self.tau_final - self.tau) * p
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

pub fn init_params(dims: usize, d_k: usize, rng: &mut SeededRng) -> ParamStore {
    let mut p = ParamStore::new();
    let s = 1.0 / (dims as f64).sqrt();
    p.insert(WQ, normal_tensor(rng, &[dims, d_k], s));
    p.insert(WK, normal_tensor(rng, &[dims, d_k], s));
    p.insert(
        DENSE_W,
        normal_tensor(rng, &[d_k, 1], 1.0 / (d_k as f64).sqrt()),
    );
    p.insert(DENSE_B, Tensor::zeros(&[1]));
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteMode {
    /// Gumbel noise plus straight-through selection.
    Train,
    /// No noise; the selection is the argmax of the masked probabilities.
    Eval,
}

/// Graph handles of one routing pass over compact (routable) rows.
#[derive(Clone, Debug)]
pub struct RoutedGraph {
    pub attn: Var,
    pub logits: Var,
    pub alpha: Var,
    pub alpha_hat: Var,
    /// Straight-through one-hot in train mode, constant one-hot in eval mode.
    pub onehot: Var,
    /// Index into the compact rows.
    pub selected: usize,
}

/// `u ↦ -ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel_noise(u: f64) -> f64 {
    let u = u.clamp(U_MIN, 1.0 - U_MIN);
    -(-u.ln()).ln()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Attention matrix and per-view logits for the rows `x` (n × dims).
pub fn logits_graph(g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
    let wq = p.get(WQ)?;
    let wk = p.get(WK)?;
    let dk = g.shape(wq)[1];
    if dk == 0 {
        return Err(Error::Config("router.d_k must be positive".into()));
    }
    let qv = g.matmul(x, wq)?;
    let kv = g.matmul(x, wk)?;
    let kt = g.transpose(kv)?;
    let a = g.matmul(qv, kt)?;
    let a = g.scale(a, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax(a, 1)?;
    let attended = g.matmul(weights, kv)?;
    let l = g.matmul(attended, p.get(DENSE_W)?)?;
    let l = g.add_row(l, p.get(DENSE_B)?)?;
    let n = g.shape(l)[0];
    let l = g.reshape(l, &[n])?;
    Ok((a, l))
}

/// `α_i(1 − m_i) + ε`, renormalized. `suppressed[i]` is `m_i = 1`.
pub fn mask_graph(g: &mut Graph, alpha: Var, suppressed: &[bool], epsilon: f64) -> Result<Var> {
    let n = g.shape(alpha)[0];
    if suppressed.len() != n {
        return Err(Error::shape("apply_mask", &[n], &[suppressed.len()]));
    }
    if suppressed.iter().all(|&m| m) {
        return Err(Error::Routing(
            "no routable view: every view is masked".into(),
        ));
    }
    if !suppressed.iter().any(|&m| m) && epsilon == 0.0 {
        return Ok(alpha);
    }
    let keep = g.constant(Tensor::vector(
        suppressed
            .iter()
            .map(|&m| if m { 0.0 } else { 1.0 })
            .collect(),
    ));
    let kept = g.mul(alpha, keep)?;
    let floor = g.constant(Tensor::filled(&[n], epsilon));
    let floored = g.add(kept, floor)?;
    g.normalize_sum(floored)
}

/// Full routing pass over compact rows `x`. `suppressed` has one flag per
/// row; Gumbel draws consume one uniform per row from `rng` in train mode.
pub fn route_graph(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    suppressed: &[bool],
    epsilon: f64,
    tau: f64,
    mode: RouteMode,
    rng: &mut SeededRng,
) -> Result<RoutedGraph> {
    check_tau(tau)?;
    let (attn, logits) = logits_graph(g, p, x)?;
    let alpha = g.softmax(logits, 0)?;
    let alpha = mask_graph(g, alpha, suppressed, epsilon)?;
    let n = suppressed.len();
    let la = g.log(alpha);
    let perturbed = match mode {
        RouteMode::Train => {
            let noise: Vec<f64> = (0..n).map(|_| gumbel_noise(rng.random::<f64>())).collect();
            let noise = g.constant(Tensor::vector(noise));
            g.add(la, noise)?
        }
        RouteMode::Eval => la,
    };
    let z = g.scale(perturbed, 1.0 / tau);
    let alpha_hat = g.softmax(z, 0)?;
    let (selected, onehot) = match mode {
        RouteMode::Train => {
            let frozen = g.detach(alpha_hat)?;
            let selected = argmax(g.value(frozen).data());
            let hard = g.constant(one_hot(n, selected));
            let soft = g.sub(alpha_hat, frozen)?;
            (selected, g.add(hard, soft)?)
        }
        RouteMode::Eval => {
            let a = g.value(alpha).data();
            let selected = (0..n)
                .filter(|&i| !suppressed[i])
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if a[b] >= a[i] => Some(b),
                    _ => Some(i),
                })
                .expect("a routable view exists");
            (selected, g.constant(one_hot(n, selected)))
        }
    };
    Ok(RoutedGraph {
        attn,
        logits,
        alpha,
        alpha_hat,
        onehot,
        selected,
    })
}

fn one_hot(n: usize, i: usize) -> Tensor {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    Tensor::vector(v)
}

/// Value-level routing result over the full view positions.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingOutput {
    pub attn: Tensor,
    pub logits: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    pub onehot: Vec<f64>,
    pub selected: usize,
    pub tau: f64,
}

/// Which views of `v` the router may pick: valid views not flagged in
/// `mask` (`true` = suppressed). `None` masks padding only.
fn routable(v: &ViewMatrix, mask: Option<&[bool]>) -> Result<Vec<bool>> {
    if let Some(m) = mask {
        if m.len() != v.views() {
            return Err(Error::shape("route mask", &[v.views()], &[m.len()]));
        }
    }
    Ok((0..v.views())
        .map(|i| v.is_valid(i) && !mask.is_some_and(|m| m[i]))
        .collect())
}

/// Routes one view matrix. Masked (but valid) views still take part in
/// attention and receive the ε floor; padding is dropped entirely.
pub fn route(
    v: &ViewMatrix,
    params: &ParamStore,
    tau: f64,
    epsilon: f64,
    mask: Option<&[bool]>,
    rng: &mut SeededRng,
    mode: RouteMode,
) -> Result<RoutingOutput> {
    let open = routable(v, mask)?;
    let valid: Vec<usize> = v.valid_rows().map(|(i, _)| i).collect();
    if valid.is_empty() {
        return Err(Error::Routing(
            "no routable view: matrix has no valid views".into(),
        ));
    }
    let suppressed: Vec<bool> = valid.iter().map(|&i| !open[i]).collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let all = g.constant(v.rows().clone());
    let x = g.gather_rows(all, &valid)?;
    let r = route_graph(&mut g, &bound, x, &suppressed, epsilon, tau, mode, rng)?;

    let n = v.views();
    let scatter = |vals: &[f64], fill: f64| {
        let mut out = vec![fill; n];
        for (k, &i) in valid.iter().enumerate() {
            out[i] = vals[k];
        }
        out
    };
    let a = g.value(r.attn);
    let mut attn = vec![f64::NEG_INFINITY; n * n];
    for (ki, &i) in valid.iter().enumerate() {
        for (kj, &j) in valid.iter().enumerate() {
            attn[i * n + j] = a.get(ki, kj);
        }
    }
    Ok(RoutingOutput {
        attn: Tensor::matrix(n, n, attn)?,
        logits: scatter(g.value(r.logits).data(), f64::NEG_INFINITY),
        alpha: scatter(g.value(r.alpha).data(), 0.0),
        alpha_hat: scatter(g.value(r.alpha_hat).data(), 0.0),
        onehot: scatter(g.value(r.onehot).data(), 0.0),
        selected: valid[r.selected],
        tau,
    })
}

/// Pairwise attention scores over full view positions, `-inf` at padding.
pub fn attention_scores(v: &ViewMatrix, params: &ParamStore) -> Result<Tensor> {
    let mut rng = crate::rng::seeded(0);
    Ok(route(v, params, 1.0, 0.0, None, &mut rng, RouteMode::Eval)?.attn)
}

/// Per-view logits over full view positions, `-inf` at padding.
pub fn view_logits(v: &ViewMatrix, params: &ParamStore) -> Result<Vec<f64>> {
    let mut rng = crate::rng::seeded(0);
    Ok(route(v, params, 1.0, 0.0, None, &mut rng, RouteMode::Eval)?.logits)
}

/// Value-level masking of a probability vector.
pub fn apply_mask(alpha: &[f64], suppressed: &[bool], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return Err(Error::Config("epsilon must be non-negative".into()));
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(alpha.to_vec()));
    let m = mask_graph(&mut g, a, suppressed, epsilon)?;
    Ok(g.value(m).data().to_vec())
}

/// Tempered Gumbel-Softmax over logits. `rng = None` is the noiseless
/// evaluation mode. Returns `(alpha_hat, onehot, selected)`.
pub fn gumbel_softmax(
    logits: &[f64],
    tau: f64,
    rng: Option<&mut SeededRng>,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    check_tau(tau)?;
    if !logits.iter().any(|l| l.is_finite()) {
        return Err(Error::Routing("no finite logit".into()));
    }
    let mut g = Graph::new();
    let l = g.constant(Tensor::vector(logits.to_vec()));
    let la = g.log_softmax(l, 0)?;
    let z = match rng {
        Some(rng) => {
            let noise: Vec<f64> = logits
                .iter()
                .map(|_| gumbel_noise(rng.random::<f64>()))
                .collect();
            let noise = g.constant(Tensor::vector(noise));
            g.add(la, noise)?
        }
        None => la,
    };
    let z = g.scale(z, 1.0 / tau);
    let ah = g.softmax(z, 0)?;
    let alpha_hat = g.value(ah).data().to_vec();
    let selected = argmax(&alpha_hat);
    Ok((
        alpha_hat,
        one_hot(logits.len(), selected).into_data(),
        selected,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn matrix(rows: &[Vec<f64>]) -> ViewMatrix {
        ViewMatrix::from_rows("q", rows).unwrap()
    }

    #[test]
    fn gumbel_of_half() {
        assert!((gumbel_noise(0.5) - 0.366_512_920_581_664_3).abs() < 1e-12);
        assert!(gumbel_noise(0.0).is_finite());
        assert!(gumbel_noise(1.0).is_finite());
    }

    #[test]
    fn deterministic_selection_is_argmax() {
        let (_, onehot, sel) = gumbel_softmax(&[1.0, 3.0, 2.0], 0.7, None).unwrap();
        assert_eq!(sel, 1);
        assert_eq!(onehot, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn temperature_extremes() {
        let (cold, _, _) = gumbel_softmax(&[0.0, 5.0], 0.01, None).unwrap();
        assert!(cold[0] < 1e-9 && (cold[1] - 1.0).abs() < 1e-9);
        let (hot, _, _) = gumbel_softmax(&[0.0, 5.0], 100.0, None).unwrap();
        // softmax([0,5]) = [e0, e1]; at τ = 100 the ratio is (e1/e0)^(1/100) = e^0.05
        let expect1 = 1.0 / (1.0 + (-0.05f64).exp());
        assert!((hot[1] - expect1).abs() < 1e-12);
        assert!(gumbel_softmax(&[0.0], 0.0, None).is_err());
    }

    #[test]
    fn mask_examples() {
        let out = apply_mask(&[0.5, 0.5], &[true, false], 0.05).unwrap();
        assert!((out[0] - 0.05 / 0.6).abs() < 1e-12);
        assert!((out[1] - 0.55 / 0.6).abs() < 1e-12);
        assert_eq!(
            apply_mask(&[0.2, 0.8], &[false, false], 0.0).unwrap(),
            vec![0.2, 0.8]
        );
        assert!(matches!(
            apply_mask(&[0.5, 0.5], &[true, true], 0.05),
            Err(Error::Routing(_))
        ));
    }

    #[test]
    fn identity_attention_on_orthonormal_views() {
        let mut p = init_params(3, 3, &mut seeded(1));
        p.insert(WQ, Tensor::eye(3));
        p.insert(WK, Tensor::eye(3));
        let v = matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let a = attention_scores(&v, &p).unwrap();
        let s = 1.0 / 3f64.sqrt();
        assert_eq!(a.data(), &[s, 0.0, 0.0, s]);
    }

    #[test]
    fn single_view_always_selected() {
        let p = init_params(4, 2, &mut seeded(2));
        let v = matrix(&[vec![0.5, 0.5, 0.5, 0.5]]);
        let mut rng = seeded(3);
        for mode in [RouteMode::Train, RouteMode::Eval] {
            let r = route(&v, &p, 1.0, 0.05, None, &mut rng, mode).unwrap();
            assert_eq!(r.selected, 0);
            assert_eq!(r.alpha, vec![1.0]);
        }
    }

    #[test]
    fn padding_never_routed() {
        let p = init_params(2, 2, &mut seeded(4));
        let rows = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 9.0], vec![0.6, 0.8]]).unwrap();
        let v = ViewMatrix::new("q", rows, vec![true, false, true]).unwrap();
        let mut rng = seeded(5);
        for _ in 0..50 {
            let r = route(&v, &p, 1.0, 0.05, None, &mut rng, RouteMode::Train).unwrap();
            assert_ne!(r.selected, 1);
            assert_eq!(r.alpha[1], 0.0);
            assert_eq!(r.logits[1], f64::NEG_INFINITY);
            assert!(r.attn.get(1, 0).is_infinite() && r.attn.get(0, 1).is_infinite());
            assert!((r.alpha_hat.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn train_forward_is_exact_onehot() {
        let p = init_params(3, 2, &mut seeded(6));
        let v = matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let r = route(&v, &p, 0.5, 0.05, None, &mut seeded(7), RouteMode::Train).unwrap();
        assert_eq!(r.onehot.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(r.onehot.iter().filter(|&&x| x == 0.0).count(), 2);
        assert_eq!(r.onehot[r.selected], 1.0);
    }

    #[test]
    fn tau_anneals_linearly() {
        let c = RouterConfig::default();
        assert_eq!(c.tau_at(0.0), 1.0);
        assert!((c.tau_at(0.5) - 0.55).abs() < 1e-12);
        assert!((c.tau_at(1.0) - 0.1).abs() < 1e-12);
        let fixed = RouterConfig {
            anneal_tau: false,
            ..RouterConfig::default()
        };
        assert_eq!(fixed.tau_at(0.7), 1.0);
    }
}
