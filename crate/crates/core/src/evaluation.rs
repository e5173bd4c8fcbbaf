//! Candidate ranking, Recall@k, the frequency prior and the TF-IDF baseline.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::Mutex;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_context, encode_text, tokenize, CandidateList, Dialogue, Pair, Vocabulary};
use crate::encoder::{EncodedSequence, Side};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// 1-based rank of the ground truth.
    pub rank: usize,
    /// Candidate indices, best first.
    pub order: Vec<usize>,
    /// Scores aligned with `order`, non-increasing.
    pub scores: Vec<f64>,
}

/// Sorts candidates by score (plus `log f` when a prior is given), highest
/// first, breaking ties by candidate index.
pub fn rank_scores(scores: &[f64], prior: Option<&[f64]>, ground_truth: usize) -> Result<RankingResult> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no candidates to rank".into()));
    }
    if ground_truth >= scores.len() {
        return Err(Error::IdOutOfRange { id: ground_truth, size: scores.len() });
    }
    let adjusted: Vec<f64> = match prior {
        None => scores.to_vec(),
        Some(f) => {
            if f.len() != scores.len() {
                return Err(Error::shape("rank_scores", format!("{} priors for {} candidates", f.len(), scores.len())));
            }
            scores.iter().zip(f).map(|(s, f)| s + f.ln()).collect()
        }
    };
    if adjusted.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("rank_scores"));
    }
    let mut order: Vec<usize> = (0..adjusted.len()).collect();
    order.sort_by(|&a, &b| adjusted[b].partial_cmp(&adjusted[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let rank = order.iter().position(|&i| i == ground_truth).unwrap() + 1;
    let scores = order.iter().map(|&i| adjusted[i]).collect();
    Ok(RankingResult { rank, order, scores })
}

/// Scores a context against candidate response texts.
pub trait Scorer {
    fn name(&self) -> String;
    fn score(&self, context: &[String], candidates: &[String]) -> Result<Vec<f64>>;
}

pub fn rank_candidates(
    scorer: &dyn Scorer,
    context: &[String],
    candidates: &CandidateList,
    use_prior: bool,
    ground_truth: usize,
) -> Result<RankingResult> {
    let scores = scorer.score(context, &candidates.texts)?;
    rank_scores(&scores, use_prior.then_some(candidates.freq.as_slice()), ground_truth)
}

/// Fraction of instances whose ground truth ranks within the top `k`.
pub fn recall_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if results.is_empty() {
        return Err(Error::InvalidArgument("no ranking results".into()));
    }
    Ok(results.iter().filter(|r| r.rank <= k).count() as f64 / results.len() as f64)
}

/// A trained model behind the `Scorer` interface. Candidate encodings are
/// cached, since the same list is scored against every context.
pub struct ModelScorer<'a> {
    model: &'a Model,
    vocab: &'a Vocabulary,
    cache: Mutex<HashMap<String, EncodedSequence>>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocabulary) -> Self {
        Self { model, vocab, cache: Mutex::new(HashMap::new()) }
    }
}

impl Scorer for ModelScorer<'_> {
    fn name(&self) -> String {
        self.model.variant().to_string()
    }

    fn score(&self, context: &[String], candidates: &[String]) -> Result<Vec<f64>> {
        let max_len = self.model.config.encoder.max_len;
        let x = self.model.encode(Side::Context, &encode_context(context, self.vocab, max_len)?)?;
        let mut cache = self.cache.lock().unwrap();
        candidates
            .iter()
            .map(|c| {
                if !cache.contains_key(c) {
                    let y = self.model.encode(Side::Response, &encode_text(c, self.vocab, max_len)?)?;
                    cache.insert(c.clone(), y);
                }
                self.model.score_encoded(&x, &cache[c])
            })
            .collect()
    }
}

/// Document frequencies for TF-IDF weighting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TfIdf {
    pub documents: usize,
    pub df: HashMap<String, usize>,
}

impl TfIdf {
    pub fn fit<'a>(documents: impl IntoIterator<Item = &'a str>) -> Self {
        let mut s = TfIdf::default();
        for d in documents {
            s.documents += 1;
            for t in tokenize(d).into_iter().collect::<HashSet<_>>() {
                *s.df.entry(t).or_default() += 1;
            }
        }
        s
    }

    /// `ln((1 + D) / (1 + df)) + 1`
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0);
        ((1 + self.documents) as f64 / (1 + df) as f64).ln() + 1.0
    }

    /// Raw counts times IDF.
    pub fn vector(&self, text: &str) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in tokenize(text) {
            *tf.entry(t).or_default() += 1.0;
        }
        for (t, v) in tf.iter_mut() {
            *v *= self.idf(t);
        }
        tf
    }

    /// Cosine of the two TF-IDF vectors; 0 when either is empty.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        let (va, vb) = (self.vector(a), self.vector(b));
        let dot: f64 = va.iter().filter_map(|(t, x)| vb.get(t).map(|y| x * y)).sum();
        let na = va.values().map(|v| v * v).sum::<f64>().sqrt();
        let nb = vb.values().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na * nb)).min(1.0)
        }
    }
}

pub fn tfidf_score(context: &str, candidate: &str, stats: &TfIdf) -> f64 {
    stats.similarity(context, candidate)
}

impl Scorer for TfIdf {
    fn name(&self) -> String {
        "TF-IDF".into()
    }

    fn score(&self, context: &[String], candidates: &[String]) -> Result<Vec<f64>> {
        let ctx = context.join(" ");
        Ok(candidates.iter().map(|c| self.similarity(&ctx, c)).collect())
    }
}

/// Uniform random scores from a seeded stream.
pub struct RandomScorer {
    rng: Mutex<ChaCha8Rng>,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        Self { rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)) }
    }
}

impl Scorer for RandomScorer {
    fn name(&self) -> String {
        "random".into()
    }

    fn score(&self, _: &[String], candidates: &[String]) -> Result<Vec<f64>> {
        let mut rng = self.rng.lock().unwrap();
        Ok(candidates.iter().map(|_| rng.gen::<f64>()).collect())
    }
}

/// Knows the true response of every context: 1 for it, 0 otherwise.
pub struct OracleScorer {
    answers: HashMap<Vec<String>, String>,
}

impl OracleScorer {
    pub fn new(dialogues: &[Dialogue]) -> Self {
        Self {
            answers: dialogues.iter().map(|d| (d.context().to_vec(), d.response().to_string())).collect(),
        }
    }
}

impl Scorer for OracleScorer {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn score(&self, context: &[String], candidates: &[String]) -> Result<Vec<f64>> {
        let answer = self.answers.get(context);
        Ok(candidates.iter().map(|c| if Some(c) == answer { 1.0 } else { 0.0 }).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    /// Rank against one shared list; only dialogues whose response is on it
    /// are evaluated.
    FixedList(CandidateList),
    /// The ground truth plus `count` distinct responses drawn from the rest
    /// of the dataset, in a seeded random order.
    Distractors { count: usize, seed: u64 },
}

impl Protocol {
    pub fn distractor19(seed: u64) -> Self {
        Protocol::Distractors { count: 19, seed }
    }

    pub fn name(&self) -> String {
        match self {
            Protocol::FixedList(_) => "fixed".into(),
            Protocol::Distractors { count, .. } => format!("distractor{count}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall_at: BTreeMap<String, f64>,
    pub instances: usize,
    pub protocol: String,
}

impl Metrics {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k.to_string()).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }

    /// Plain-text table, one row per k in ascending order.
    pub fn table(&self) -> String {
        let mut ks: Vec<(usize, f64)> = self.recall_at.iter().map(|(k, v)| (k.parse().unwrap_or(0), *v)).collect();
        ks.sort_by_key(|(k, _)| *k);
        let mut out = format!("protocol   {}\ninstances  {}\n", self.protocol, self.instances);
        for (k, v) in ks {
            writeln!(out, "R@{k:<8} {:.4}", v).unwrap();
        }
        out
    }
}

/// Per-instance rankings under a protocol.
pub fn rank_dataset(
    dialogues: &[Dialogue],
    scorer: &dyn Scorer,
    protocol: &Protocol,
    use_prior: bool,
) -> Result<Vec<RankingResult>> {
    let mut results = Vec::new();
    match protocol {
        Protocol::FixedList(list) => {
            for d in dialogues {
                if let Some(gt) = list.position(d.response()) {
                    results.push(rank_candidates(scorer, d.context(), list, use_prior, gt)?);
                }
            }
        }
        Protocol::Distractors { count, seed } => {
            if use_prior {
                return Err(Error::InvalidArgument("the frequency prior needs the fixed-list protocol".into()));
            }
            let mut pool: Vec<&str> = Vec::new();
            let mut seen = HashSet::new();
            for d in dialogues {
                if seen.insert(d.response()) {
                    pool.push(d.response());
                }
            }
            for (i, d) in dialogues.iter().enumerate() {
                let others: Vec<&str> = pool.iter().copied().filter(|r| *r != d.response()).collect();
                if others.len() < *count {
                    return Err(Error::NotEnoughCandidates { requested: *count, available: others.len() });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
                let mut texts: Vec<String> = index::sample(&mut rng, others.len(), *count)
                    .into_iter()
                    .map(|j| others[j].to_string())
                    .collect();
                texts.push(d.response().to_string());
                texts.shuffle(&mut rng);
                let gt = texts.iter().position(|t| t == d.response()).unwrap();
                let scores = scorer.score(d.context(), &texts)?;
                results.push(rank_scores(&scores, None, gt)?);
            }
        }
    }
    if results.is_empty() {
        return Err(Error::NotEnoughData { requested: 1, available: 0 });
    }
    Ok(results)
}

pub fn evaluate(
    dialogues: &[Dialogue],
    scorer: &dyn Scorer,
    protocol: &Protocol,
    ks: &[usize],
    use_prior: bool,
) -> Result<Metrics> {
    let results = rank_dataset(dialogues, scorer, protocol, use_prior)?;
    let mut recall_at = BTreeMap::new();
    for &k in ks {
        recall_at.insert(k.to_string(), recall_at_k(&results, k)?);
    }
    Ok(Metrics {
        recall_at,
        instances: results.len(),
        protocol: protocol.name(),
    })
}

/// Recall@1 of each context against the responses of its own chunk of
/// `chunk` pairs.
pub fn in_batch_recall_at_1(model: &Model, pairs: &[Pair], chunk: usize) -> Result<f64> {
    let mut hits = 0;
    for part in pairs.chunks(chunk.max(1)) {
        let contexts: Vec<_> = part.iter().map(|p| p.context.clone()).collect();
        let responses: Vec<_> = part.iter().map(|p| p.response.clone()).collect();
        let s = model.score_matrix(&contexts, &responses)?;
        for i in 0..part.len() {
            if rank_scores(s.row(i), None, i)?.rank == 1 {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / pairs.len().max(1) as f64)
}
