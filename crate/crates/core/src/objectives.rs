//! Training objectives: the bidirectional in-batch retrieval loss and the
//! leave-one-out mutual-information upper bound between unattended context
//! features and the attended response feature.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const CRITIC_WEIGHT: &str = "critic.weight";
pub const CRITIC_CONTEXT_MAP: &str = "critic.context_map";
pub const CRITIC_RESPONSE_MAP: &str = "critic.response_map";
/// The two maps start as this multiple of the identity.
pub const CRITIC_MAP_INIT: f64 = 0.01;
/// Prefix of the second critic used by the symmetric regulariser.
pub const SYMMETRIC_PREFIX: &str = "critic_sym";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ret_y: f64,
    pub l_ret_x: f64,
    pub l_ret: f64,
    pub l_reg: f64,
    pub total: f64,
    pub gamma: f64,
    pub beta: f64,
}

fn check_square(op: &'static str, t: &Tensor) -> Result<usize> {
    if t.rows() != t.cols() {
        return Err(Error::shape(op, format!("expected a square matrix, got {:?}", t.shape())));
    }
    if t.rows() < 2 {
        return Err(Error::InvalidArgument(format!("{op}: need at least 2 samples, got {}", t.rows())));
    }
    Ok(t.rows())
}

/// `(l_ret_y, l_ret_x, l_ret)` as graph nodes.
pub fn retrieval_loss_var(g: &mut Graph, scores: Var, gamma: f64) -> Result<(Var, Var, Var)> {
    if gamma <= 0.0 || gamma.is_nan() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {gamma}")));
    }
    check_square("retrieval_loss", g.value(scores))?;
    let scaled = g.scale(scores, 1.0 / gamma);
    let by_row = g.log_softmax(scaled, Axis::Row);
    let by_col = g.log_softmax(scaled, Axis::Column);
    let dy = g.diag(by_row);
    let dx = g.diag(by_col);
    let sy = g.sum(dy);
    let sx = g.sum(dx);
    let ly = g.scale(sy, -1.0);
    let lx = g.scale(sx, -1.0);
    let total = g.add(ly, lx);
    Ok((ly, lx, total))
}

/// `(l_ret_y, l_ret_x, l_ret)` for an `N × N` score matrix whose diagonal
/// holds the matched pairs.
pub fn retrieval_loss(scores: &Tensor, gamma: f64) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let (y, x, t) = retrieval_loss_var(&mut g, s, gamma)?;
    Ok((g.scalar(y), g.scalar(x), g.scalar(t)))
}

fn pname(prefix: &str, name: &str) -> String {
    match prefix {
        "critic" => name.to_string(),
        _ => name.replacen("critic", prefix, 1),
    }
}

/// Critic parameters: `W` starts at zero and the two maps at a small
/// multiple of the identity (at zero they would sit on a saddle point).
/// There is no bias; a constant offset cancels in the leave-one-out ratio.
pub fn init_critic(dim: usize, symmetric: bool) -> ParameterStore {
    let mut s = ParameterStore::new();
    let prefixes: &[&str] = if symmetric { &["critic", SYMMETRIC_PREFIX] } else { &["critic"] };
    let mut eye = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        eye.data_mut()[i * dim + i] = CRITIC_MAP_INIT;
    }
    for p in prefixes {
        s.insert_zeros(&pname(p, CRITIC_WEIGHT), &[dim, dim]);
        s.insert(pname(p, CRITIC_CONTEXT_MAP), eye.clone());
        s.insert(pname(p, CRITIC_RESPONSE_MAP), eye.clone());
    }
    s
}

fn critic_param<'a>(store: &'a ParameterStore, name: &str) -> Result<&'a Tensor> {
    store.value(name).ok_or_else(|| Error::UnknownParameter(name.into()))
}

/// `critic(h̄, y) = h̄ᵀ W y − ½‖h̄ A − y B‖²`, treating `h̄` and `y` as row
/// vectors. The distance term is what lets the critic express a density
/// ratio with a context-only quadratic part, and unlike a separate
/// context-only term it never cancels out of the bound.
pub fn critic_logit(hbar: &[f64], hy: &[f64], store: &ParameterStore) -> Result<f64> {
    let w = critic_param(store, CRITIC_WEIGHT)?;
    let a = critic_param(store, CRITIC_CONTEXT_MAP)?;
    let b = critic_param(store, CRITIC_RESPONSE_MAP)?;
    let d = w.rows();
    if hbar.len() != d || hy.len() != d {
        return Err(Error::shape("critic_logit", format!("inputs {} and {} for a {d}-dim critic", hbar.len(), hy.len())));
    }
    let mut out = 0.0;
    for i in 0..d {
        for j in 0..d {
            out += hbar[i] * w.get(i, j) * hy[j];
        }
    }
    for k in 0..a.cols() {
        let diff: f64 = (0..d).map(|i| hbar[i] * a.get(i, k) - hy[i] * b.get(i, k)).sum();
        out -= 0.5 * diff * diff;
    }
    Ok(out)
}

/// `L[n][n'] = critic(h̄_{n'}, y_n)` for `K × d` inputs, so the diagonal
/// holds the matched pairs.
pub fn critic_logits_var(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    hbar: Var,
    hy: Var,
) -> Result<Var> {
    let w = g.param(store, &pname(prefix, CRITIC_WEIGHT))?;
    let a = g.param(store, &pname(prefix, CRITIC_CONTEXT_MAP))?;
    let b = g.param(store, &pname(prefix, CRITIC_RESPONSE_MAP))?;
    let hw = g.matmul(hbar, w);
    let bilinear = g.matmul_bt(hy, hw);
    // −½‖u − v‖² = u·v − ½‖u‖² − ½‖v‖²
    let u = g.matmul(hbar, a);
    let v = g.matmul(hy, b);
    let uv = g.matmul_bt(v, u);
    let uu = g.mul(u, u);
    let uu = g.sum_axis(uu, Axis::Row);
    let uu = g.transpose(uu);
    let uu = g.scale(uu, -0.5);
    let vv = g.mul(v, v);
    let vv = g.sum_axis(vv, Axis::Row);
    let vv = g.scale(vv, -0.5);
    let vv = g.transpose(vv);
    let logits = g.add(bilinear, uv);
    let logits = g.add_broadcast(logits, uu);
    // the response-only term is constant along each row; add it column-wise
    let logits = g.transpose(logits);
    let logits = g.add_broadcast(logits, vv);
    Ok(g.transpose(logits))
}

pub struct MiTerms {
    /// The bound evaluated on the batch.
    pub value: Var,
    /// Node to differentiate; equals `value` without a running average.
    pub surrogate: Var,
    /// `log mean_n [(1/(K−1)) Σ_{n'≠n} exp L_nn']` on this batch.
    pub log_denominator: f64,
}

fn off_diagonal(k: usize) -> Vec<bool> {
    (0..k * k).map(|i| i / k != i % k).collect()
}

/// The bound over a `K × K` logit matrix. With `ema`, the batch denominator
/// is blended into the running average, and the surrogate's gradient uses
/// that average in place of each row's own denominator.
pub fn mi_bound_var(g: &mut Graph, logits: Var, ema: Option<&mut CriticState>) -> Result<MiTerms> {
    let k = check_square("mi_upper_bound", g.value(logits))?;
    let log_km1 = ((k - 1) as f64).ln();
    let diag = g.diag(logits);
    let lse = g.logsumexp(logits, Axis::Row, Some(off_diagonal(k)));
    let log_den = g.add_scalar(lse, -log_km1);
    let gap = g.sub(diag, log_den);
    let value = g.mean(gap);

    let per_row = g.value(log_den).data().to_vec();
    let m = per_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_denominator = m + (per_row.iter().map(|v| (v - m).exp()).sum::<f64>() / k as f64).ln();

    let surrogate = match ema {
        None => value,
        Some(state) => {
            let log_ema = state.update(log_denominator);
            // d/dL of exp(log_den − log_ema) matches d/dL of log_den when the
            // running average equals the row's own denominator
            let shifted = g.add_scalar(log_den, -log_ema);
            let ratio = g.exp(shifted);
            let gap = g.sub(diag, ratio);
            g.mean(gap)
        }
    };
    Ok(MiTerms {
        value,
        surrogate,
        log_denominator,
    })
}

/// `(1/K) Σ_n [L_nn − log((1/(K−1)) Σ_{n'≠n} exp L_nn')]`.
pub fn mi_upper_bound(logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let t = mi_bound_var(&mut g, l, None)?;
    Ok(g.scalar(t.value))
}

/// Running average of the bound's denominator, kept in the log domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticState {
    pub decay: f64,
    log_average: Option<f64>,
}

impl CriticState {
    pub fn new(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("ema decay {decay} outside (0, 1)")));
        }
        Ok(Self { decay, log_average: None })
    }

    /// Blends a batch statistic into the average and returns the new value.
    pub fn update(&mut self, log_batch: f64) -> f64 {
        let next = match self.log_average {
            None => log_batch,
            Some(prev) => {
                let a = self.decay.ln() + prev;
                let b = (1.0 - self.decay).ln() + log_batch;
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            }
        };
        self.log_average = Some(next);
        next
    }

    pub fn log_average(&self) -> Option<f64> {
        self.log_average
    }

    /// The average itself; positive once initialised.
    pub fn average(&self) -> Option<f64> {
        self.log_average.map(f64::exp)
    }
}

/// Per-batch graph nodes the objective consumes.
#[derive(Clone, Copy, Debug)]
pub struct BatchFeatures {
    /// `N × N` pair scores.
    pub scores: Var,
    /// Unattended context features of the matched pairs, `N × d`.
    pub hbar_x: Option<Var>,
    /// Attended response features of the matched pairs, `N × d`.
    pub attended_y: Option<Var>,
    pub hbar_y: Option<Var>,
    pub attended_x: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSettings {
    pub gamma: f64,
    pub beta: f64,
    pub regularize: bool,
    pub symmetric: bool,
}

pub struct ObjectiveVars {
    /// Node whose gradient the encoders descend.
    pub descend: Var,
    pub l_ret_y: Var,
    pub l_ret_x: Var,
    pub l_ret: Var,
    pub l_reg: Option<Var>,
    /// Batch denominator statistics, one per active regulariser.
    pub log_denominators: Vec<f64>,
}

/// Regularizer terms: the bound over `(h̄x, attended y)` and optionally the
/// mirrored `(h̄y, attended x)`.
pub fn regularizer_var(
    g: &mut Graph,
    feats: &BatchFeatures,
    critic: &ParameterStore,
    symmetric: bool,
    mut ema: Option<&mut [CriticState]>,
) -> Result<Vec<MiTerms>> {
    let mut pairs = vec![("critic", feats.hbar_x, feats.attended_y)];
    if symmetric {
        pairs.push((SYMMETRIC_PREFIX, feats.hbar_y, feats.attended_x));
    }
    let mut out = Vec::new();
    for (i, (prefix, hbar, other)) in pairs.into_iter().enumerate() {
        let (Some(hbar), Some(other)) = (hbar, other) else {
            return Err(Error::InvalidArgument("regularizer needs unattended and attended features".into()));
        };
        let logits = critic_logits_var(g, critic, prefix, hbar, other)?;
        let state = ema.as_deref_mut().and_then(|s| s.get_mut(i));
        out.push(mi_bound_var(g, logits, state)?);
    }
    Ok(out)
}

/// `l_ret + β·l_reg`. Without running averages every bound is
/// differentiated exactly; with them, one state per regulariser is updated.
pub fn total_objective_var(
    g: &mut Graph,
    feats: &BatchFeatures,
    settings: &ObjectiveSettings,
    critic: &ParameterStore,
    ema: Option<&mut [CriticState]>,
) -> Result<ObjectiveVars> {
    let (l_ret_y, l_ret_x, l_ret) = retrieval_loss_var(g, feats.scores, settings.gamma)?;
    if !settings.regularize {
        return Ok(ObjectiveVars {
            descend: l_ret,
            l_ret_y,
            l_ret_x,
            l_ret,
            l_reg: None,
            log_denominators: Vec::new(),
        });
    }
    let terms = regularizer_var(g, feats, critic, settings.symmetric, ema)?;
    let values: Vec<Var> = terms.iter().map(|t| t.value).collect();
    let surrogates: Vec<Var> = terms.iter().map(|t| t.surrogate).collect();
    let sum = |g: &mut Graph, vs: Vec<Var>| vs.into_iter().reduce(|a, b| g.add(a, b)).unwrap();
    let l_reg = sum(g, values);
    let sur = sum(g, surrogates);
    let weighted = g.scale(sur, settings.beta);
    let descend = g.add(l_ret, weighted);
    Ok(ObjectiveVars {
        descend,
        l_ret_y,
        l_ret_x,
        l_ret,
        l_reg: Some(l_reg),
        log_denominators: terms.iter().map(|t| t.log_denominator).collect(),
    })
}

impl ObjectiveVars {
    pub fn breakdown(&self, g: &Graph, settings: &ObjectiveSettings) -> LossBreakdown {
        let l_ret = g.scalar(self.l_ret);
        let l_reg = self.l_reg.map_or(0.0, |v| g.scalar(v));
        LossBreakdown {
            l_ret_y: g.scalar(self.l_ret_y),
            l_ret_x: g.scalar(self.l_ret_x),
            l_ret,
            l_reg,
            total: l_ret + settings.beta * l_reg,
            gamma: settings.gamma,
            beta: settings.beta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use proptest::prelude::*;

    fn m(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn uniform_scores() {
        for gamma in [0.1, 1.0, 7.0] {
            let (_, _, l) = retrieval_loss(&Tensor::filled(&[2, 2], 0.3), gamma).unwrap();
            assert!((l - 4.0 * 2f64.ln()).abs() < 1e-12);
        }
        let (_, _, l) = retrieval_loss(&Tensor::filled(&[5, 5], -1.0), 1.0).unwrap();
        assert!((l - 10.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_scores() {
        let (y, x, l) = retrieval_loss(&m(2, 2, vec![1.0, 0.0, 0.0, 1.0]), 1.0).unwrap();
        let expected = 4.0 * (1.0 + (-1f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        assert_eq!(l, y + x);
    }

    #[test]
    fn saturated_diagonal() {
        let (_, _, l) = retrieval_loss(&m(2, 2, vec![1e3, 0.0, 0.0, 1e3]), 1.0).unwrap();
        assert!(l < 1e-6 && l >= 0.0);
    }

    #[test]
    fn bad_temperature_and_shapes() {
        let s = Tensor::filled(&[2, 2], 0.0);
        assert!(retrieval_loss(&s, 0.0).is_err());
        assert!(retrieval_loss(&s, -1.0).is_err());
        assert!(retrieval_loss(&Tensor::filled(&[2, 3], 0.0), 1.0).is_err());
        assert!(retrieval_loss(&Tensor::filled(&[1, 1], 0.0), 1.0).is_err());
    }

    fn critic_with(w: Tensor) -> ParameterStore {
        let d = w.rows();
        let mut s = init_critic(d, false);
        *s.value_mut(CRITIC_WEIGHT).unwrap() = w;
        *s.value_mut(CRITIC_CONTEXT_MAP).unwrap() = Tensor::zeros(&[d, d]);
        *s.value_mut(CRITIC_RESPONSE_MAP).unwrap() = Tensor::zeros(&[d, d]);
        s
    }

    #[test]
    fn critic_examples() {
        let zero = critic_with(Tensor::zeros(&[3, 3]));
        assert_eq!(critic_logit(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &zero).unwrap(), 0.0);
        // initial maps: −½·c²·‖h̄ − y‖²
        let init = init_critic(3, false);
        let v = critic_logit(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &init).unwrap();
        assert!((v + 0.5 * CRITIC_MAP_INIT * CRITIC_MAP_INIT * 27.0).abs() < 1e-15);
        let eye = critic_with(m(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        assert_eq!(critic_logit(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &eye).unwrap(), 32.0);
        let w = m(2, 2, vec![0.5, -1.0, 2.0, 0.25]);
        let c = critic_with(w.clone());
        let (h, y) = ([0.3, -1.2], [2.0, 0.4]);
        let mut want = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                want += h[i] * w.get(i, j) * y[j];
            }
        }
        assert!((critic_logit(&h, &y, &c).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn logits_matrix_layout() {
        let mut c = critic_with(m(2, 2, vec![0.5, -1.0, 2.0, 0.25]));
        *c.value_mut(CRITIC_CONTEXT_MAP).unwrap() = m(2, 2, vec![0.2, 0.0, 0.3, -0.1]);
        *c.value_mut(CRITIC_RESPONSE_MAP).unwrap() = m(2, 2, vec![-0.4, 0.6, 0.1, 0.9]);
        let hbar = m(3, 2, vec![1.0, 0.0, 0.5, -0.5, -1.0, 2.0]);
        let hy = m(3, 2, vec![0.2, 0.1, -0.3, 0.8, 1.0, 1.0]);
        let mut g = Graph::new();
        let hb = g.constant(hbar.clone());
        let y = g.constant(hy.clone());
        let l = critic_logits_var(&mut g, &c, "critic", hb, y).unwrap();
        for n in 0..3 {
            for np in 0..3 {
                let want = critic_logit(hbar.row(np), hy.row(n), &c).unwrap();
                assert!((g.value(l).get(n, np) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mi_examples() {
        assert_eq!(mi_upper_bound(&Tensor::filled(&[4, 4], 1.7)).unwrap(), 0.0);
        let v = mi_upper_bound(&m(2, 2, vec![2.0, 0.0, 0.0, 2.0])).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
        assert!(mi_upper_bound(&Tensor::filled(&[1, 1], 0.0)).is_err());
    }

    #[test]
    fn ema_state() {
        assert!(CriticState::new(1.0).is_err());
        let mut s = CriticState::new(0.9).unwrap();
        assert_eq!(s.average(), None);
        s.update(2f64.ln());
        assert!((s.average().unwrap() - 2.0).abs() < 1e-15);
        s.update(4f64.ln());
        assert!((s.average().unwrap() - (0.9 * 2.0 + 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn ema_surrogate_gradient_matches_exact_when_rows_agree() {
        // every row has the same off-diagonal denominator, so the running
        // average equals each row's own and the gradients coincide
        let logits = m(3, 3, vec![1.0, 0.2, 0.5, 0.2, 2.0, 0.5, 0.5, 0.2, -1.0]);
        let grad = |ema: bool| {
            let mut g = Graph::new();
            let l = g.variable(logits.clone());
            let mut state = CriticState::new(0.99).unwrap();
            let t = mi_bound_var(&mut g, l, ema.then_some(&mut state)).unwrap();
            g.backward(t.surrogate).get(l).unwrap().clone()
        };
        let (a, b) = (grad(false), grad(true));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn total_objective_compositions() {
        let scores = m(2, 2, vec![0.9, 0.1, -0.2, 0.4]);
        let hbar = m(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]);
        let ay = m(2, 3, vec![1.0, 0.0, -1.0, 0.3, 0.3, 0.3]);
        let run = |beta: f64, critic: &ParameterStore| {
            let mut g = Graph::new();
            let feats = BatchFeatures {
                scores: g.constant(scores.clone()),
                hbar_x: Some(g.constant(hbar.clone())),
                attended_y: Some(g.constant(ay.clone())),
                hbar_y: None,
                attended_x: None,
            };
            let settings = ObjectiveSettings {
                gamma: 1.0,
                beta,
                regularize: true,
                symmetric: false,
            };
            let vars = total_objective_var(&mut g, &feats, &settings, critic, None).unwrap();
            vars.breakdown(&g, &settings)
        };
        let mut critic = critic_with(Tensor::zeros(&[3, 3]));
        let zero = run(1.0, &critic);
        assert_eq!(zero.l_reg, 0.0);
        assert_eq!(zero.total, zero.l_ret);
        critic.value_mut(CRITIC_WEIGHT).unwrap().data_mut()[0] = 3.0;
        let off = run(0.0, &critic);
        assert_ne!(off.l_reg, 0.0);
        assert_eq!(off.total, off.l_ret);
        assert_eq!(off.l_ret, off.l_ret_x + off.l_ret_y);
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let hbar = m(3, 2, vec![1.0, 0.3, 0.5, -0.5, -1.0, 0.8]);
        let hy = m(3, 2, vec![0.2, 0.1, -0.3, 0.8, 1.0, 0.4]);
        let mut c = critic_with(m(2, 2, vec![0.5, -1.0, 0.7, 0.25]));
        *c.value_mut(CRITIC_CONTEXT_MAP).unwrap() = m(2, 2, vec![0.2, -0.1, 0.3, 0.15]);
        *c.value_mut(CRITIC_RESPONSE_MAP).unwrap() = m(2, 2, vec![0.6, 0.05, -0.2, 0.4]);
        let obj = |g: &mut Graph, st: &ParameterStore| {
            let hb = g.constant(hbar.clone());
            let y = g.constant(hy.clone());
            let l = critic_logits_var(g, st, "critic", hb, y)?;
            Ok(mi_bound_var(g, l, None)?.value)
        };
        assert!(finite_difference_check(&obj, &c, 1e-5).unwrap() < 1e-6);
    }

    proptest! {
        #[test]
        fn loss_is_shift_invariant_and_nonnegative(
            data in prop::collection::vec(-3.0f64..3.0, 9),
            c in -5.0f64..5.0,
        ) {
            let s = m(3, 3, data);
            let (_, _, a) = retrieval_loss(&s, 0.7).unwrap();
            let (_, _, b) = retrieval_loss(&s.map(|v| v + c), 0.7).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn losses_are_permutation_equivariant(
            data in prop::collection::vec(-3.0f64..3.0, 16),
            i in 0usize..4,
            j in 0usize..4,
        ) {
            let s = m(4, 4, data);
            let swap = |t: &Tensor| {
                let p = |k: usize| if k == i { j } else if k == j { i } else { k };
                Tensor::matrix(4, 4, (0..16).map(|x| t.get(p(x / 4), p(x % 4))).collect()).unwrap()
            };
            let (_, _, a) = retrieval_loss(&s, 1.0).unwrap();
            let (_, _, b) = retrieval_loss(&swap(&s), 1.0).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            let ma = mi_upper_bound(&s).unwrap();
            let mb = mi_upper_bound(&swap(&s)).unwrap();
            prop_assert!((ma - mb).abs() < 1e-10);
        }
    }
}
