//! Token encoders: shared word embedding, a learned projection to the model
//! width, sinusoidal positions, a stack of transformer layers, and the
//! residual word-embedding combine `α·h + (1 − α)·F(e)`.
//!
//! Inside the graph, sequences are packed: only real tokens become rows, so
//! padding can never be attended to or leak into a real position. The
//! tensor-level functions take and return padded `max_len`-row tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Var};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const EMBEDDING: &str = "embedding";
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub word_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Weight on the transformer output in the residual combine.
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            model_dim: 128,
            heads: 4,
            word_dim: 100,
            ffn_dim: 512,
            max_len: 32,
            alpha: 0.5,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len == 0 || self.word_dim == 0 || self.ffn_dim == 0 {
            return bad("max_len, word_dim and ffn_dim must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Context,
    Response,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Context => "context",
            Side::Response => "response",
        }
    }
}

/// Per-token features of one sequence, padded to `max_len` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub features: Tensor,
    pub mask: Vec<bool>,
    pub raw_embeddings: Tensor,
}

impl EncodedSequence {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// The unmasked feature rows, in order.
    pub fn real_features(&self) -> Tensor {
        select_rows(&self.features, &self.mask)
    }
}

pub(crate) fn select_rows(t: &Tensor, mask: &[bool]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        data.extend_from_slice(t.row(i));
        rows += 1;
    }
    Tensor::matrix(rows, c, data).unwrap()
}

/// Scatters `rows` back to the unmasked positions of a zero `mask.len()`-row tensor.
pub(crate) fn scatter_rows(rows: &Tensor, mask: &[bool]) -> Tensor {
    let c = rows.cols();
    let mut out = Tensor::zeros(&[mask.len(), c]);
    let mut r = 0;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(rows.row(r));
        r += 1;
    }
    out
}

fn pname(side: Side, rest: &str) -> String {
    format!("{}.{rest}", side.prefix())
}

/// Embedding table plus both encoders, each with its residual map `F`.
pub fn init_params(cfg: &EncoderConfig, vocab_size: usize, rng: &mut impl Rng) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.insert_glorot(EMBEDDING, vocab_size, cfg.word_dim, rng);
    for side in [Side::Context, Side::Response] {
        let (d, dw, f) = (cfg.model_dim, cfg.word_dim, cfg.ffn_dim);
        s.insert_glorot(&pname(side, "input.weight"), dw, d, rng);
        s.insert_zeros(&pname(side, "input.bias"), &[1, d]);
        for l in 0..cfg.layers {
            for proj in ["q", "k", "v", "o"] {
                s.insert_glorot(&pname(side, &format!("layers.{l}.attn.{proj}.weight")), d, d, rng);
                // a key bias shifts every logit of a query row equally, so
                // the softmax ignores it; it would be a dead parameter
                if proj != "k" {
                    s.insert_zeros(&pname(side, &format!("layers.{l}.attn.{proj}.bias")), &[1, d]);
                }
            }
            for ln in ["ln1", "ln2"] {
                s.insert_filled(&pname(side, &format!("layers.{l}.{ln}.gamma")), &[1, d], 1.0);
                s.insert_zeros(&pname(side, &format!("layers.{l}.{ln}.beta")), &[1, d]);
            }
            s.insert_glorot(&pname(side, &format!("layers.{l}.ffn.in.weight")), d, f, rng);
            s.insert_zeros(&pname(side, &format!("layers.{l}.ffn.in.bias")), &[1, f]);
            s.insert_glorot(&pname(side, &format!("layers.{l}.ffn.out.weight")), f, d, rng);
            s.insert_zeros(&pname(side, &format!("layers.{l}.ffn.out.bias")), &[1, d]);
        }
        s.insert_glorot(&pname(side, "residual.weight"), dw, d, rng);
        s.insert_zeros(&pname(side, "residual.bias"), &[1, d]);
    }
    s
}

/// Names of the residual-map parameters, which only the `+WE` variants train.
pub fn residual_param_names() -> Vec<String> {
    [Side::Context, Side::Response]
        .iter()
        .flat_map(|&s| [pname(s, "residual.weight"), pname(s, "residual.bias")])
        .collect()
}

/// Sinusoidal position codes for positions `0..len`, `len × dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, dim, data).unwrap()
}

/// Inverted dropout driven by a caller-owned generator.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

fn dropout<R: Rng>(g: &mut Graph, x: Var, d: &mut Option<Dropout<'_, R>>) -> Var {
    let Some(d) = d else { return x };
    if d.rate <= 0.0 {
        return x;
    }
    let t = g.value(x);
    let keep = 1.0 - d.rate;
    let mask: Vec<f64> = (0..t.len())
        .map(|_| if d.rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = g.constant(Tensor::matrix(t.rows(), t.cols(), mask).unwrap());
    g.mul(x, mask)
}

fn linear(g: &mut Graph, store: &ParameterStore, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w);
    Ok(g.add_broadcast(y, b))
}

/// Looks up the real tokens of every sequence, packed into one
/// `Σ len × word_dim` matrix.
pub fn embed_packed(g: &mut Graph, store: &ParameterStore, seqs: &[TokenSequence]) -> Result<Var> {
    let table = g.param(store, EMBEDDING)?;
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.real_ids().iter().copied()).collect();
    g.gather(table, ids)
}

/// Runs the transformer stack over packed rows. `lengths` gives the row count
/// of each sequence; self-attention never crosses a sequence boundary.
pub fn encode_packed<R: Rng>(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    side: Side,
    embeddings: Var,
    lengths: &[usize],
    mut drop: Option<Dropout<'_, R>>,
) -> Result<Var> {
    let d = cfg.model_dim;
    let pos: Vec<f64> = lengths
        .iter()
        .flat_map(|&n| positional_encoding(n, d).into_data())
        .collect();
    let total: usize = lengths.iter().sum();
    let pos = g.constant(Tensor::matrix(total, d, pos).unwrap());
    let x = linear(g, store, embeddings, &pname(side, "input"))?;
    let mut x = g.add(x, pos);
    x = dropout(g, x, &mut drop);

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.layers {
        let p = |rest: &str| pname(side, &format!("layers.{l}.{rest}"));
        let q = linear(g, store, x, &p("attn.q"))?;
        let kw = g.param(store, &p("attn.k.weight"))?;
        let k = g.matmul(x, kw);
        let v = linear(g, store, x, &p("attn.v"))?;
        let mut seq_outputs = Vec::with_capacity(lengths.len());
        let mut off = 0;
        for &n in lengths {
            let rows = (off, off + n);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let cols = (h * dh, (h + 1) * dh);
                let qh = g.slice(q, rows, cols);
                let kh = g.slice(k, rows, cols);
                let vh = g.slice(v, rows, cols);
                let logits = g.matmul_bt(qh, kh);
                let logits = g.scale(logits, scale);
                let weights = g.softmax(logits, Axis::Row);
                heads.push(g.matmul(weights, vh));
            }
            seq_outputs.push(if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(heads)
            });
            off += n;
        }
        let attn = if seq_outputs.len() == 1 {
            seq_outputs[0]
        } else {
            g.concat_rows(seq_outputs)
        };
        let attn = linear(g, store, attn, &p("attn.o"))?;
        let attn = dropout(g, attn, &mut drop);
        let res = g.add(x, attn);
        let gamma = g.param(store, &p("ln1.gamma"))?;
        let beta = g.param(store, &p("ln1.beta"))?;
        x = g.layer_norm(res, gamma, beta, LN_EPS);

        let hidden = linear(g, store, x, &p("ffn.in"))?;
        let hidden = g.relu(hidden);
        let ff = linear(g, store, hidden, &p("ffn.out"))?;
        let ff = dropout(g, ff, &mut drop);
        let res = g.add(x, ff);
        let gamma = g.param(store, &p("ln2.gamma"))?;
        let beta = g.param(store, &p("ln2.beta"))?;
        x = g.layer_norm(res, gamma, beta, LN_EPS);
    }
    Ok(x)
}

/// `α·h + (1 − α)·F(e)` with `F` a single fully connected layer.
pub fn residual_combine_var(
    g: &mut Graph,
    store: &ParameterStore,
    side: Side,
    h: Var,
    embeddings: Var,
    alpha: f64,
) -> Result<Var> {
    let r = linear(g, store, embeddings, &pname(side, "residual"))?;
    let h = g.scale(h, alpha);
    let r = g.scale(r, 1.0 - alpha);
    Ok(g.add(h, r))
}

/// Mean of the rows of `h` as a `1 × d` row.
pub fn mean_pool_var(g: &mut Graph, h: Var) -> Var {
    let n = g.value(h).rows();
    let s = g.sum_axis(h, Axis::Column);
    g.scale(s, 1.0 / n as f64)
}

/// Full encoder for a list of sequences: embed, transform and optionally
/// combine with the residual word embedding. Returns one `len × d` node per
/// sequence plus the packed raw embeddings.
pub fn encode_sequences<R: Rng>(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    side: Side,
    seqs: &[TokenSequence],
    residual: bool,
    drop: Option<Dropout<'_, R>>,
) -> Result<(Vec<Var>, Var)> {
    let lengths: Vec<usize> = seqs.iter().map(TokenSequence::len).collect();
    let e = embed_packed(g, store, seqs)?;
    let mut h = encode_packed(g, store, cfg, side, e, &lengths, drop)?;
    if residual {
        h = residual_combine_var(g, store, side, h, e, cfg.alpha)?;
    }
    let mut out = Vec::with_capacity(seqs.len());
    let mut off = 0;
    for &n in &lengths {
        out.push(g.slice_rows(h, off, off + n));
        off += n;
    }
    Ok((out, e))
}

// ---- tensor-level API ----

/// Row `i` is the embedding of `seq.ids()[i]`, padding rows included.
pub fn embed(seq: &TokenSequence, table: &Tensor) -> Result<Tensor> {
    let (v, c) = (table.rows(), table.cols());
    let mut data = Vec::with_capacity(seq.max_len() * c);
    for &id in seq.ids() {
        if id >= v {
            return Err(Error::IdOutOfRange { id, size: v });
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::matrix(seq.max_len(), c, data)
}

/// Transformer features for a padded embedding matrix. Masked rows of the
/// output are zero.
pub fn encode(
    embeddings: &Tensor,
    mask: &[bool],
    store: &ParameterStore,
    cfg: &EncoderConfig,
    side: Side,
) -> Result<Tensor> {
    if embeddings.cols() != cfg.word_dim || embeddings.rows() != mask.len() {
        return Err(Error::shape(
            "encode",
            format!(
                "embeddings {:?} vs word_dim {} and mask of {}",
                embeddings.shape(),
                cfg.word_dim,
                mask.len()
            ),
        ));
    }
    let real = select_rows(embeddings, mask);
    let n = real.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("encode: every position is masked".into()));
    }
    let mut g = Graph::new();
    let e = g.constant(real);
    let h = encode_packed::<rand_chacha::ChaCha8Rng>(&mut g, store, cfg, side, e, &[n], None)?;
    Ok(scatter_rows(g.value(h), mask))
}

/// `α·h + (1 − α)·F(e)` over full padded tensors.
pub fn residual_combine(
    h: &Tensor,
    e: &Tensor,
    alpha: f64,
    store: &ParameterStore,
    side: Side,
) -> Result<Tensor> {
    if h.rows() != e.rows() {
        return Err(Error::shape("residual_combine", "h and e row counts differ"));
    }
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let ev = g.constant(e.clone());
    let out = residual_combine_var(&mut g, store, side, hv, ev, alpha)?;
    Ok(g.value(out).clone())
}

/// Mean of the unmasked rows.
pub fn mean_pool(h: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let real = select_rows(h, mask);
    if real.rows() == 0 {
        return Err(Error::InvalidArgument("mean_pool: every position is masked".into()));
    }
    let mut g = Graph::new();
    let v = g.constant(real);
    let out = mean_pool_var(&mut g, v);
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            word_dim: 6,
            ffn_dim: 12,
            max_len: 5,
            alpha: 0.5,
            dropout: 0.0,
        }
    }

    fn store(cfg: &EncoderConfig, vocab: usize, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = init_params(cfg, vocab, &mut rng);
        // perturb biases and norms away from their trivial init so the
        // reference comparison exercises every parameter
        let names: Vec<String> = s.names().map(String::from).collect();
        for n in names {
            if n.ends_with("bias") || n.ends_with("beta") || n.ends_with("gamma") {
                for v in s.value_mut(&n).unwrap().data_mut() {
                    *v += rng.gen_range(-0.2..0.2);
                }
            }
        }
        s
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let mut c = EncoderConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
        c = EncoderConfig::default();
        c.alpha = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embed_lookup() {
        let table = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![9.0, 9.0],
            vec![5.0, 5.0],
            vec![1.0, 2.0],
        ])
        .unwrap();
        let seq = TokenSequence::new(vec![3], 2).unwrap();
        let e = embed(&seq, &table).unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 0.0, 0.0]);
        let unk = TokenSequence::new(vec![crate::corpus::UNK], 1).unwrap();
        assert_eq!(embed(&unk, &table).unwrap().data(), &[9.0, 9.0]);
        let bad = TokenSequence::new(vec![7], 1).unwrap();
        assert!(embed(&bad, &table).is_err());
    }

    #[test]
    fn default_output_shape() {
        let cfg = EncoderConfig {
            layers: 1,
            ..EncoderConfig::default()
        };
        let s = store(&cfg, 10, 1);
        let seq = TokenSequence::new(vec![3, 4, 5], cfg.max_len).unwrap();
        let e = embed(&seq, s.value(EMBEDDING).unwrap()).unwrap();
        let h = encode(&e, seq.mask(), &s, &cfg, Side::Context).unwrap();
        assert_eq!(h.shape(), &[cfg.max_len, 128]);
    }

    #[test]
    fn padding_rows_do_not_leak() {
        let cfg = tiny();
        let s = store(&cfg, 10, 2);
        let seq = TokenSequence::new(vec![4, 7], cfg.max_len).unwrap();
        let e = embed(&seq, s.value(EMBEDDING).unwrap()).unwrap();
        let h1 = encode(&e, seq.mask(), &s, &cfg, Side::Context).unwrap();
        let mut e2 = e.clone();
        for v in &mut e2.data_mut()[2 * cfg.word_dim..] {
            *v = 42.0;
        }
        let h2 = encode(&e2, seq.mask(), &s, &cfg, Side::Context).unwrap();
        assert_eq!(h1, h2);
        assert!(h1.row(3).iter().all(|v| *v == 0.0));
    }

    /// Straight-line forward pass written independently of the graph code.
    fn reference_forward(e: &[Vec<f64>], s: &ParameterStore, cfg: &EncoderConfig) -> Vec<Vec<f64>> {
        let p = |n: &str| s.value(&format!("context.{n}")).unwrap();
        let lin = |x: &[Vec<f64>], name: &str| -> Vec<Vec<f64>> {
            let w = p(&format!("{name}.weight"));
            let b = p(&format!("{name}.bias"));
            x.iter()
                .map(|row| {
                    (0..w.cols())
                        .map(|j| b.data()[j] + (0..w.rows()).map(|i| row[i] * w.get(i, j)).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let norm = |x: &[Vec<f64>], name: &str| -> Vec<Vec<f64>> {
            let gm = p(&format!("{name}.gamma"));
            let bt = p(&format!("{name}.beta"));
            x.iter()
                .map(|row| {
                    let n = row.len() as f64;
                    let mu = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| gm.data()[j] * (v - mu) / (var + 1e-5).sqrt() + bt.data()[j])
                        .collect()
                })
                .collect()
        };
        let d = cfg.model_dim;
        let dh = d / cfg.heads;
        let mut x = lin(e, "input");
        for (pos, row) in x.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                let angle = pos as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
                *v += if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        for l in 0..cfg.layers {
            let q = lin(&x, &format!("layers.{l}.attn.q"));
            let kw = p(&format!("layers.{l}.attn.k.weight"));
            let k: Vec<Vec<f64>> = x
                .iter()
                .map(|row| (0..d).map(|j| (0..d).map(|i| row[i] * kw.get(i, j)).sum()).collect())
                .collect();
            let v = lin(&x, &format!("layers.{l}.attn.v"));
            let n = x.len();
            let mut concat = vec![vec![0.0; d]; n];
            for h in 0..cfg.heads {
                for i in 0..n {
                    let logits: Vec<f64> = (0..n)
                        .map(|j| (0..dh).map(|t| q[i][h * dh + t] * k[j][h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|a| (a - m).exp()).sum();
                    for j in 0..n {
                        let w = (logits[j] - m).exp() / z;
                        for t in 0..dh {
                            concat[i][h * dh + t] += w * v[j][h * dh + t];
                        }
                    }
                }
            }
            let o = lin(&concat, &format!("layers.{l}.attn.o"));
            let sum: Vec<Vec<f64>> = x.iter().zip(&o).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
            x = norm(&sum, &format!("layers.{l}.ln1"));
            let hidden: Vec<Vec<f64>> = lin(&x, &format!("layers.{l}.ffn.in"))
                .into_iter()
                .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
                .collect();
            let f = lin(&hidden, &format!("layers.{l}.ffn.out"));
            let sum: Vec<Vec<f64>> = x.iter().zip(&f).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
            x = norm(&sum, &format!("layers.{l}.ln2"));
        }
        x
    }

    #[test]
    fn matches_reference_forward_on_two_tokens() {
        let cfg = tiny();
        let s = store(&cfg, 10, 3);
        let seq = TokenSequence::new(vec![5, 8], cfg.max_len).unwrap();
        let e = embed(&seq, s.value(EMBEDDING).unwrap()).unwrap();
        let h = encode(&e, seq.mask(), &s, &cfg, Side::Context).unwrap();
        let rows: Vec<Vec<f64>> = (0..2).map(|i| e.row(i).to_vec()).collect();
        let expected = reference_forward(&rows, &s, &cfg);
        for i in 0..2 {
            for j in 0..cfg.model_dim {
                assert!((h.get(i, j) - expected[i][j]).abs() < 1e-12, "row {i} col {j}");
            }
        }
    }

    #[test]
    fn residual_combine_mix_identities() {
        let cfg = tiny();
        let mut s = store(&cfg, 10, 4);
        let h = Tensor::matrix(2, 8, (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let e = Tensor::matrix(2, 6, (0..12).map(|i| 1.0 - i as f64 * 0.05).collect()).unwrap();
        assert_eq!(residual_combine(&h, &e, 1.0, &s, Side::Context).unwrap(), h);

        let f_only = residual_combine(&h, &e, 0.0, &s, Side::Context).unwrap();
        let h_other = h.map(|v| v * -3.0 + 1.0);
        assert_eq!(residual_combine(&h_other, &e, 0.0, &s, Side::Context).unwrap(), f_only);

        // F(e) = P e with a known projection and zero bias
        let p = Tensor::matrix(6, 8, (0..48).map(|i| ((i % 5) as f64 - 2.0) * 0.1).collect()).unwrap();
        *s.value_mut("context.residual.weight").unwrap() = p.clone();
        s.value_mut("context.residual.bias").unwrap().data_mut().fill(0.0);
        let half = residual_combine(&h, &e, 0.5, &s, Side::Context).unwrap();
        for i in 0..2 {
            for j in 0..8 {
                let pe: f64 = (0..6).map(|k| e.get(i, k) * p.get(k, j)).sum();
                assert!((half.get(i, j) - 0.5 * (h.get(i, j) + pe)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_combine_is_linear_in_h() {
        let cfg = tiny();
        let s = store(&cfg, 10, 5);
        let e = Tensor::matrix(2, 6, (0..12).map(|i| i as f64 * 0.07).collect()).unwrap();
        let h1 = Tensor::matrix(2, 8, (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        let h2 = Tensor::matrix(2, 8, (0..16).map(|i| (i as f64).cos()).collect()).unwrap();
        let mut hsum = h1.clone();
        hsum.add_assign(&h2);
        let alpha = 0.3;
        let c_sum = residual_combine(&hsum, &e, alpha, &s, Side::Context).unwrap();
        let c1 = residual_combine(&h1, &e, alpha, &s, Side::Context).unwrap();
        let c2 = residual_combine(&h2, &e, alpha, &s, Side::Context).unwrap();
        let f = residual_combine(&Tensor::zeros(&[2, 8]), &e, alpha, &s, Side::Context).unwrap();
        // combine(h1 + h2) = combine(h1) + combine(h2) − (1 − α)F(e)
        for k in 0..16 {
            let lhs = c_sum.data()[k];
            let rhs = c1.data()[k] + c2.data()[k] - f.data()[k];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_contracts() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![100.0, 100.0]]).unwrap();
        assert_eq!(mean_pool(&h, &[true, false, false]).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(mean_pool(&h, &[true, true, false]).unwrap().data(), &[2.0, 4.0]);
        let mut h2 = h.clone();
        h2.data_mut()[4] = -7.0;
        assert_eq!(
            mean_pool(&h, &[true, true, false]).unwrap(),
            mean_pool(&h2, &[true, true, false]).unwrap()
        );
        assert!(mean_pool(&h, &[false, false, false]).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = tiny();
        let s = store(&cfg, 9, 6);
        let seqs = vec![
            TokenSequence::new(vec![3, 4, 5], cfg.max_len).unwrap(),
            TokenSequence::new(vec![6, 7], cfg.max_len).unwrap(),
        ];
        let obj = |g: &mut Graph, st: &ParameterStore| {
            let (hs, _) = encode_sequences::<ChaCha8Rng>(g, st, &cfg, Side::Context, &seqs, true, None)?;
            let all = g.concat_rows(hs);
            let w = g.constant(Tensor::matrix(5, 8, (0..40).map(|i| (i as f64 * 1.3).sin() * 0.2 + 0.05).collect()).unwrap());
            let p = g.mul(all, w);
            let p = g.sum(p);
            Ok(g.exp(p))
        };
        let r = crate::gradcheck::gradient_check_report(&obj, &s, 1e-5, 0).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
