//! Word-level cross attention between a context and a response.
//!
//! `S_ij = cos(hx_i, hy_j)`; each context word takes the max of its row
//! softmax, each response word the max of its column softmax, and an outer
//! softmax turns those into the attention weights `a_x`, `a_y`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Var};
use crate::encoder::{select_rows, EncodedSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norm floor used when normalising feature rows for cosine similarity.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Max over the softmax-normalised similarities.
    #[default]
    Max,
    /// Mean of the raw similarities.
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::Config(format!("unknown pooling '{s}' (expected max or mean)"))),
        }
    }
}

/// Similarity matrix and attention weights over padded positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPair {
    pub s: Tensor,
    pub a_x: Vec<f64>,
    pub a_y: Vec<f64>,
}

/// Real-token features of one sequence and their unit-normalised rows.
#[derive(Clone, Copy, Debug)]
pub struct SequenceVars {
    pub h: Var,
    pub unit: Var,
}

impl SequenceVars {
    pub fn new(g: &mut Graph, h: Var) -> Self {
        let unit = g.normalize_rows(h, NORM_FLOOR);
        Self { h, unit }
    }
}

/// Attention outputs for one context/response pair inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct PairVars {
    pub s: Var,
    /// `n_x × 1`
    pub a_x: Var,
    /// `1 × n_y`
    pub a_y: Var,
    /// `1 × d`
    pub attended_x: Var,
    /// `1 × d`
    pub attended_y: Var,
}

/// Attention weights from a real-token similarity block `S` (`n_x × n_y`).
pub fn weights_var(g: &mut Graph, s: Var, pooling: Pooling) -> (Var, Var) {
    let (pool_x, pool_y) = match pooling {
        Pooling::Max => {
            let by_row = g.softmax(s, Axis::Row);
            let by_col = g.softmax(s, Axis::Column);
            (g.max(by_row, Axis::Row), g.max(by_col, Axis::Column))
        }
        Pooling::Mean => {
            let (n_x, n_y) = (g.value(s).rows(), g.value(s).cols());
            let rx = g.sum_axis(s, Axis::Row);
            let ry = g.sum_axis(s, Axis::Column);
            (g.scale(rx, 1.0 / n_y as f64), g.scale(ry, 1.0 / n_x as f64))
        }
    };
    (g.softmax(pool_x, Axis::Column), g.softmax(pool_y, Axis::Row))
}

pub fn attend(g: &mut Graph, x: SequenceVars, y: SequenceVars, pooling: Pooling) -> PairVars {
    let s = g.matmul_bt(x.unit, y.unit);
    let (a_x, a_y) = weights_var(g, s, pooling);
    let ax_t = g.transpose(a_x);
    let attended_x = g.matmul(ax_t, x.h);
    let attended_y = g.matmul(a_y, y.h);
    PairVars {
        s,
        a_x,
        a_y,
        attended_x,
        attended_y,
    }
}

/// `(1 − a)ᵀ h = Σ_i h_i − aᵀh`, unnormalised.
pub fn unattended_var(g: &mut Graph, h: Var, attended: Var) -> Var {
    let total = g.sum_axis(h, Axis::Column);
    g.sub(total, attended)
}

/// Dot product of the attended features, `1 × 1`.
pub fn pair_score_var(g: &mut Graph, p: &PairVars) -> Var {
    g.matmul_bt(p.attended_x, p.attended_y)
}

// ---- tensor-level API ----

fn real_mask_check(op: &'static str, seq: &EncodedSequence) -> Result<()> {
    if seq.real_len() == 0 {
        return Err(Error::InvalidArgument(format!("{op}: sequence has no real tokens")));
    }
    Ok(())
}

/// Cosine similarities over padded positions; masked rows and columns hold
/// `−∞` so that a downstream softmax gives them zero weight.
pub fn similarity_matrix(hx: &EncodedSequence, hy: &EncodedSequence) -> Result<Tensor> {
    real_mask_check("similarity_matrix", hx)?;
    real_mask_check("similarity_matrix", hy)?;
    let mut g = Graph::new();
    let x = g.constant(hx.real_features());
    let y = g.constant(hy.real_features());
    let x = SequenceVars::new(&mut g, x);
    let y = SequenceVars::new(&mut g, y);
    let s = g.matmul_bt(x.unit, y.unit);
    Ok(scatter_block(g.value(s), &hx.mask, &hy.mask, f64::NEG_INFINITY))
}

fn scatter_block(block: &Tensor, mx: &[bool], my: &[bool], fill: f64) -> Tensor {
    let mut out = Tensor::filled(&[mx.len(), my.len()], fill);
    let rows: Vec<usize> = (0..mx.len()).filter(|&i| mx[i]).collect();
    let cols: Vec<usize> = (0..my.len()).filter(|&j| my[j]).collect();
    let c = my.len();
    for (bi, &i) in rows.iter().enumerate() {
        for (bj, &j) in cols.iter().enumerate() {
            out.data_mut()[i * c + j] = block.get(bi, bj);
        }
    }
    out
}

fn scatter_weights(w: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut it = w.iter();
    mask.iter().map(|&m| if m { *it.next().unwrap() } else { 0.0 }).collect()
}

/// Attention weights from a padded similarity matrix. Masked positions get
/// exactly zero weight.
pub fn attention_weights(
    s: &Tensor,
    mask_x: &[bool],
    mask_y: &[bool],
    pooling: Pooling,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if s.rows() != mask_x.len() || s.cols() != mask_y.len() {
        return Err(Error::shape(
            "attention_weights",
            format!("S is {:?}, masks {} and {}", s.shape(), mask_x.len(), mask_y.len()),
        ));
    }
    let rows = select_rows(s, mask_x);
    let block = select_rows(&rows.transpose(), mask_y).transpose();
    if block.is_empty() {
        return Err(Error::InvalidArgument("attention_weights: no real positions".into()));
    }
    let mut g = Graph::new();
    let sv = g.constant(block);
    let (ax, ay) = weights_var(&mut g, sv, pooling);
    Ok((
        scatter_weights(g.value(ax).data(), mask_x),
        scatter_weights(g.value(ay).data(), mask_y),
    ))
}

/// Full attention for one pair: similarity matrix plus both weight vectors.
pub fn attention_pair(hx: &EncodedSequence, hy: &EncodedSequence, pooling: Pooling) -> Result<AttentionPair> {
    let s = similarity_matrix(hx, hy)?;
    let (a_x, a_y) = attention_weights(&s, &hx.mask, &hy.mask, pooling)?;
    Ok(AttentionPair { s, a_x, a_y })
}

fn weighted_rows(op: &'static str, w: &[f64], h: &EncodedSequence, complement: bool) -> Result<Vec<f64>> {
    if w.len() != h.mask.len() {
        return Err(Error::shape(op, format!("{} weights for {} rows", w.len(), h.mask.len())));
    }
    let d = h.features.cols();
    let mut out = vec![0.0; d];
    for (i, (&a, _)) in w.iter().zip(&h.mask).enumerate().filter(|(_, (_, m))| **m) {
        let a = if complement { 1.0 - a } else { a };
        for (o, v) in out.iter_mut().zip(h.features.row(i)) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// `aᵀh` over real rows.
pub fn attended_feature(a: &[f64], h: &EncodedSequence) -> Result<Vec<f64>> {
    weighted_rows("attended_feature", a, h, false)
}

/// `(1 − a)ᵀh` over real rows, without renormalising `1 − a`.
pub fn unattended_feature(a: &[f64], h: &EncodedSequence) -> Result<Vec<f64>> {
    weighted_rows("unattended_feature", a, h, true)
}

/// Graph inputs for one encoded sequence: real rows and their unit rows.
fn sequence_vars(g: &mut Graph, seq: &EncodedSequence) -> SequenceVars {
    let h = g.constant(seq.real_features());
    SequenceVars::new(g, h)
}

pub fn score_pair(hx: &EncodedSequence, hy: &EncodedSequence, pooling: Pooling) -> Result<f64> {
    Ok(score_batch(std::slice::from_ref(hx), std::slice::from_ref(hy), pooling)?.data()[0])
}

/// `N × M` matrix of pair scores. Each sequence is normalised once and
/// every entry follows exactly the same arithmetic as `score_pair`.
pub fn score_batch(
    contexts: &[EncodedSequence],
    responses: &[EncodedSequence],
    pooling: Pooling,
) -> Result<Tensor> {
    if contexts.is_empty() || responses.is_empty() {
        return Err(Error::InvalidArgument("score_batch: empty batch".into()));
    }
    for s in contexts.iter().chain(responses) {
        real_mask_check("score_batch", s)?;
    }
    let mut g = Graph::new();
    let xs: Vec<SequenceVars> = contexts.iter().map(|c| sequence_vars(&mut g, c)).collect();
    let ys: Vec<SequenceVars> = responses.iter().map(|r| sequence_vars(&mut g, r)).collect();
    let mut data = Vec::with_capacity(xs.len() * ys.len());
    for &x in &xs {
        for &y in &ys {
            let p = attend(&mut g, x, y, pooling);
            let s = pair_score_var(&mut g, &p);
            data.push(g.scalar(s));
        }
    }
    Tensor::matrix(xs.len(), ys.len(), data)
}
