//! The dual encoder and its variants, plus persistence of a trained model.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, attend, pair_score_var, unattended_var, AttentionPair, Pooling, SequenceVars, NORM_FLOOR};
use crate::autodiff::{Graph, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{CandidateList, TokenSequence, Vocabulary};
use crate::encoder::{self, scatter_rows, Dropout, EncodedSequence, EncoderConfig, Side, EMBEDDING};
use crate::error::{Error, Result};
use crate::objectives::{init_critic, BatchFeatures};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "DE")]
    De,
    #[serde(rename = "ADE")]
    Ade,
    #[serde(rename = "ADE+WE")]
    AdeWe,
    #[serde(rename = "ADE+REG")]
    AdeReg,
    #[serde(rename = "ADE+WE+REG")]
    AdeWeReg,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::De, Variant::Ade, Variant::AdeWe, Variant::AdeReg, Variant::AdeWeReg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::De => "DE",
            Variant::Ade => "ADE",
            Variant::AdeWe => "ADE+WE",
            Variant::AdeReg => "ADE+REG",
            Variant::AdeWeReg => "ADE+WE+REG",
        }
    }

    pub fn attention(self) -> bool {
        self != Variant::De
    }

    pub fn residual(self) -> bool {
        matches!(self, Variant::AdeWe | Variant::AdeWeReg)
    }

    pub fn regularize(self) -> bool {
        matches!(self, Variant::AdeReg | Variant::AdeWeReg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant '{s}'; valid variants: {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub variant: Variant,
    pub pooling: Pooling,
    /// Also regularise the unattended response feature.
    pub symmetric_reg: bool,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, variant: Variant) -> Self {
        Self {
            encoder,
            variant,
            pooling: Pooling::Max,
            symmetric_reg: false,
        }
    }
}

/// Encoder parameters (shared embedding and both towers) and critic
/// parameters, kept in separate stores so each player of the min-max game
/// owns its optimizer state.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: ParameterStore,
    pub critic: ParameterStore,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = encoder::init_params(&config.encoder, vocab_size, &mut rng);
        let critic = init_critic(config.encoder.model_dim, config.symmetric_reg);
        Ok(Self { config, encoder, critic })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.value(EMBEDDING).map_or(0, Tensor::rows)
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Encoder and critic parameters in one store.
    pub fn to_store(&self) -> ParameterStore {
        let mut s = self.encoder.clone();
        s.merge(&self.critic).expect("encoder and critic names are disjoint");
        s
    }

    pub fn from_store(config: ModelConfig, store: &ParameterStore) -> Result<Self> {
        config.encoder.validate()?;
        let mut template = Model::new(config.clone(), store.value(EMBEDDING).map_or(1, Tensor::rows), 0)?;
        for stores in [&mut template.encoder, &mut template.critic] {
            let names: Vec<String> = stores.names().map(String::from).collect();
            for name in names {
                let value = store
                    .value(&name)
                    .ok_or_else(|| Error::Checkpoint { offset: 0, message: format!("missing tensor '{name}'") })?;
                let slot = stores.value_mut(&name).unwrap();
                if slot.shape() != value.shape() {
                    return Err(Error::Checkpoint {
                        offset: 0,
                        message: format!("tensor '{name}' has shape {:?}, expected {:?}", value.shape(), slot.shape()),
                    });
                }
                *slot = value.clone();
            }
        }
        Ok(template)
    }

    /// Rounds every parameter to `f32` so a checkpoint round-trip is lossless.
    pub fn to_f32_precision(&self) -> Model {
        Model {
            config: self.config.clone(),
            encoder: self.encoder.to_f32_precision(),
            critic: self.critic.to_f32_precision(),
        }
    }

    /// Features of one sequence, padded to its `max_len`.
    pub fn encode(&self, side: Side, seq: &TokenSequence) -> Result<EncodedSequence> {
        let mut g = Graph::new();
        let (hs, e) = encoder::encode_sequences::<ChaCha8Rng>(
            &mut g,
            &self.encoder,
            &self.config.encoder,
            side,
            std::slice::from_ref(seq),
            self.config.variant.residual(),
            None,
        )?;
        Ok(EncodedSequence {
            features: scatter_rows(g.value(hs[0]), seq.mask()),
            mask: seq.mask().to_vec(),
            raw_embeddings: scatter_rows(g.value(e), seq.mask()),
        })
    }

    /// Score of one encoded pair under this model's variant.
    pub fn score_encoded(&self, x: &EncodedSequence, y: &EncodedSequence) -> Result<f64> {
        if self.config.variant.attention() {
            attention::score_pair(x, y, self.config.pooling)
        } else {
            let mut g = Graph::new();
            let hx = g.constant(x.real_features());
            let hy = g.constant(y.real_features());
            let s = pooled_cosine(&mut g, &[hx], &[hy]);
            Ok(g.scalar(s))
        }
    }

    pub fn score(&self, context: &TokenSequence, response: &TokenSequence) -> Result<f64> {
        let x = self.encode(Side::Context, context)?;
        let y = self.encode(Side::Response, response)?;
        self.score_encoded(&x, &y)
    }

    /// `N × M` scores, every context against every response.
    pub fn score_matrix(&self, contexts: &[TokenSequence], responses: &[TokenSequence]) -> Result<Tensor> {
        let xs = contexts.iter().map(|c| self.encode(Side::Context, c)).collect::<Result<Vec<_>>>()?;
        let ys = responses.iter().map(|r| self.encode(Side::Response, r)).collect::<Result<Vec<_>>>()?;
        if self.config.variant.attention() {
            return attention::score_batch(&xs, &ys, self.config.pooling);
        }
        let mut data = Vec::with_capacity(xs.len() * ys.len());
        for x in &xs {
            for y in &ys {
                data.push(self.score_encoded(x, y)?);
            }
        }
        Tensor::matrix(xs.len(), ys.len(), data)
    }

    /// Attention weights for a pair. The DE baseline has no attention and
    /// reports the uniform weights of its mean pooling.
    pub fn attention(&self, context: &TokenSequence, response: &TokenSequence) -> Result<AttentionPair> {
        let x = self.encode(Side::Context, context)?;
        let y = self.encode(Side::Response, response)?;
        if self.config.variant.attention() {
            return attention::attention_pair(&x, &y, self.config.pooling);
        }
        let s = attention::similarity_matrix(&x, &y)?;
        let uniform = |mask: &[bool]| {
            let n = mask.iter().filter(|m| **m).count() as f64;
            mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect()
        };
        Ok(AttentionPair { s, a_x: uniform(&x.mask), a_y: uniform(&y.mask) })
    }
}

/// Cosine between mean-pooled features, `N × M` over the given sequences.
fn pooled_cosine(g: &mut Graph, xs: &[Var], ys: &[Var]) -> Var {
    let pool = |g: &mut Graph, hs: &[Var]| {
        let rows: Vec<Var> = hs.iter().map(|&h| encoder::mean_pool_var(g, h)).collect();
        let m = if rows.len() == 1 { rows[0] } else { g.concat_rows(rows) };
        g.normalize_rows(m, NORM_FLOOR)
    };
    let px = pool(g, xs);
    let py = pool(g, ys);
    g.matmul_bt(px, py)
}

/// Builds the in-batch score matrix and the regulariser inputs for a batch
/// of matched pairs.
pub fn batch_features(
    g: &mut Graph,
    store: &ParameterStore,
    config: &ModelConfig,
    contexts: &[TokenSequence],
    responses: &[TokenSequence],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchFeatures> {
    let n = contexts.len();
    if n != responses.len() || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "batch has {n} contexts and {} responses",
            responses.len()
        )));
    }
    let variant = config.variant;
    let rate = config.encoder.dropout;
    let (hx, _) = encoder::encode_sequences(
        g,
        store,
        &config.encoder,
        Side::Context,
        contexts,
        variant.residual(),
        dropout_rng.as_deref_mut().map(|rng| Dropout { rate, rng }),
    )?;
    let (hy, _) = encoder::encode_sequences(
        g,
        store,
        &config.encoder,
        Side::Response,
        responses,
        variant.residual(),
        dropout_rng.map(|rng| Dropout { rate, rng }),
    )?;

    if !variant.attention() {
        let scores = pooled_cosine(g, &hx, &hy);
        return Ok(BatchFeatures {
            scores,
            hbar_x: None,
            attended_y: None,
            hbar_y: None,
            attended_x: None,
        });
    }

    let xs: Vec<SequenceVars> = hx.iter().map(|&h| SequenceVars::new(g, h)).collect();
    let ys: Vec<SequenceVars> = hy.iter().map(|&h| SequenceVars::new(g, h)).collect();
    let mut scores = Vec::with_capacity(n * n);
    let (mut hbar_x, mut att_y, mut hbar_y, mut att_x) = (vec![], vec![], vec![], vec![]);
    for (i, &x) in xs.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            let p = attend(g, x, y, config.pooling);
            scores.push(pair_score_var(g, &p));
            if i == j {
                hbar_x.push(unattended_var(g, x.h, p.attended_x));
                att_y.push(p.attended_y);
                hbar_y.push(unattended_var(g, y.h, p.attended_y));
                att_x.push(p.attended_x);
            }
        }
    }
    let scores = g.stack(scores, n, n);
    let rows = |g: &mut Graph, v: Vec<Var>| if v.len() == 1 { v[0] } else { g.concat_rows(v) };
    Ok(BatchFeatures {
        scores,
        hbar_x: Some(rows(g, hbar_x)),
        attended_y: Some(rows(g, att_y)),
        hbar_y: Some(rows(g, hbar_y)),
        attended_x: Some(rows(g, att_x)),
    })
}

/// Everything needed besides the tensors to reuse a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub min_count: usize,
    pub candidates: Option<CandidateList>,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the tensors to `path` and the config and vocabulary beside it.
pub fn save_model(
    path: impl AsRef<Path>,
    model: &Model,
    vocab: &Vocabulary,
    candidates: Option<&CandidateList>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(&model.to_store(), path)?;
    let meta = ModelMeta {
        config: model.config.clone(),
        vocab: vocab.tokens().to_vec(),
        min_count: vocab.min_count(),
        candidates: candidates.cloned(),
    };
    let mp = meta_path(path);
    fs::write(&mp, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&mp, e))
}

pub struct LoadedModel {
    pub model: Model,
    pub vocab: Vocabulary,
    pub candidates: Option<CandidateList>,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let path = path.as_ref();
    let store = load_checkpoint(path)?;
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: ModelMeta = serde_json::from_str(&text)?;
    let vocab = Vocabulary::from_tokens(meta.vocab, meta.min_count)?;
    let rows = store.value(EMBEDDING).map_or(0, Tensor::rows);
    if rows != vocab.len() {
        return Err(Error::VocabMismatch {
            checkpoint: rows,
            vocabulary: vocab.len(),
        });
    }
    let model = Model::from_store(meta.config, &store)?;
    Ok(LoadedModel {
        model,
        vocab,
        candidates: meta.candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{total_objective_var, ObjectiveSettings};

    pub(crate) fn toy_config(variant: Variant) -> ModelConfig {
        ModelConfig::new(
            EncoderConfig {
                layers: 1,
                model_dim: 8,
                heads: 2,
                word_dim: 6,
                ffn_dim: 16,
                max_len: 6,
                alpha: 0.5,
                dropout: 0.0,
            },
            variant,
        )
    }

    fn seqs(ids: &[&[usize]]) -> Vec<TokenSequence> {
        ids.iter().map(|s| TokenSequence::new(s.to_vec(), 6).unwrap()).collect()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        let err = "ADE+XYZ".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("DE, ADE, ADE+WE, ADE+REG, ADE+WE+REG"), "{err}");
    }

    #[test]
    fn graph_scores_match_tensor_scores() {
        for v in Variant::ALL {
            let m = Model::new(toy_config(v), 12, 7).unwrap();
            let c = seqs(&[&[3, 4, 5], &[6, 7]]);
            let r = seqs(&[&[8, 9], &[10, 11, 3, 4]]);
            let mut g = Graph::new();
            let f = batch_features(&mut g, &m.encoder, &m.config, &c, &r, None).unwrap();
            let direct = m.score_matrix(&c, &r).unwrap();
            for (a, b) in g.value(f.scores).data().iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-12, "{v}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn de_scores_are_cosines() {
        let m = Model::new(toy_config(Variant::De), 12, 1).unwrap();
        let c = seqs(&[&[3, 4]]);
        let s = m.score_matrix(&c, &c).unwrap().data()[0];
        assert!(s.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn store_round_trip() {
        let m = Model::new(toy_config(Variant::AdeWeReg), 12, 3).unwrap();
        let back = Model::from_store(m.config.clone(), &m.to_store()).unwrap();
        assert_eq!(back.encoder.iter().count(), m.encoder.iter().count());
        for (name, t) in m.encoder.iter().chain(m.critic.iter()) {
            let other = back.encoder.value(name).or_else(|| back.critic.value(name)).unwrap();
            assert_eq!(t, other);
        }
    }

    #[test]
    fn vocab_mismatch_names_both_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::new(toy_config(Variant::Ade), 12, 3).unwrap();
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<unk>", "<sep>", "a", "b"].iter().map(|s| s.to_string()).collect(),
            1,
        )
        .unwrap();
        save_model(&path, &m, &vocab, None).unwrap();
        let err = load_model(&path).err().unwrap().to_string();
        assert!(err.contains("12") && err.contains('5'), "{err}");
    }

    #[test]
    fn objective_runs_for_every_variant() {
        for v in Variant::ALL {
            let m = Model::new(toy_config(v), 12, 5).unwrap();
            let c = seqs(&[&[3, 4, 5], &[6, 7]]);
            let r = seqs(&[&[8, 9], &[10, 11, 3]]);
            let mut g = Graph::checked();
            let f = batch_features(&mut g, &m.encoder, &m.config, &c, &r, None).unwrap();
            let settings = ObjectiveSettings {
                gamma: 1.0,
                beta: 1.0,
                regularize: v.regularize(),
                symmetric: false,
            };
            let vars = total_objective_var(&mut g, &f, &settings, &m.critic, None).unwrap();
            let b = vars.breakdown(&g, &settings);
            assert!(b.total.is_finite());
            if !v.regularize() {
                assert_eq!(b.l_reg, 0.0);
                assert_eq!(b.total, b.l_ret);
            }
        }
    }
}
