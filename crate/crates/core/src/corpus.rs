//! Dialogue ingestion: tokenization, vocabulary, padded id sequences,
//! mini-batch sampling and frequency-ranked candidate lists.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default maximum number of context messages kept per dialogue.
pub const MAX_CONTEXT_MESSAGES: usize = 5;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<sep>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    context: Vec<String>,
    response: String,
}

impl Dialogue {
    pub fn new(context: Vec<String>, response: impl Into<String>) -> Result<Self> {
        let response = response.into();
        if context.is_empty() {
            return Err(Error::InvalidDialogue("context is empty".into()));
        }
        if context.len() > MAX_CONTEXT_MESSAGES {
            return Err(Error::InvalidDialogue(format!(
                "context has {} messages, at most {MAX_CONTEXT_MESSAGES} allowed",
                context.len()
            )));
        }
        if let Some(i) = context.iter().position(|m| m.trim().is_empty()) {
            return Err(Error::InvalidDialogue(format!("context message {i} is empty")));
        }
        if response.trim().is_empty() {
            return Err(Error::InvalidDialogue("response is empty".into()));
        }
        Ok(Self { context, response })
    }

    pub fn context(&self) -> &[String] {
        &self.context
    }

    pub fn response(&self) -> &str {
        &self.response
    }

    /// Context messages joined by a space, for bag-of-words scorers.
    pub fn context_text(&self) -> String {
        self.context.join(" ")
    }
}

/// Lowercases, splits on whitespace and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list (reserved entries
    /// first), as stored alongside a checkpoint.
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::InvalidArgument(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::InvalidArgument("duplicate vocabulary entry".into()));
        }
        Ok(Self {
            tokens,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

/// Every token seen at least `min_count` times, ordered by descending
/// frequency with ties broken lexicographically, after the reserved ids.
pub fn build_vocabulary(dialogues: &[Dialogue], min_count: usize) -> Result<Vocabulary> {
    if dialogues.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if min_count == 0 {
        return Err(Error::InvalidArgument("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in dialogues {
        for text in d.context.iter().chain(std::iter::once(&d.response)) {
            for t in tokenize(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens, min_count)
}

/// Fixed-length id sequence; the mask is a run of `true` (real tokens)
/// followed by `false` (padding).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    mask: Vec<bool>,
}

impl TokenSequence {
    /// Pads `ids` to `max_len`. Fails if `ids` is empty, longer than
    /// `max_len`, or contains `PAD`.
    pub fn new(ids: Vec<usize>, max_len: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("token sequence needs at least one token".into()));
        }
        if ids.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "{} tokens exceed max_len {max_len}",
                ids.len()
            )));
        }
        if ids.contains(&PAD) {
            return Err(Error::InvalidArgument("PAD inside real tokens".into()));
        }
        let n = ids.len();
        let mut ids = ids;
        ids.resize(max_len, PAD);
        let mask = (0..max_len).map(|i| i < n).collect();
        Ok(Self { ids, mask })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of real tokens.
    pub fn len(&self) -> usize {
        self.mask.iter().take_while(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn real_ids(&self) -> &[usize] {
        &self.ids[..self.len()]
    }
}

fn ids_of(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    tokenize(text).iter().map(|t| vocab.id(t)).collect()
}

/// Encodes a single text, keeping its first `max_len` tokens. Text with no
/// tokens becomes a lone `UNK`.
pub fn encode_text(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let mut ids = ids_of(text, vocab);
    ids.truncate(max_len);
    if ids.is_empty() {
        ids.push(UNK);
    }
    TokenSequence::new(ids, max_len)
}

/// Context messages joined with `SEP`, keeping the last `max_len` tokens.
pub fn encode_context(messages: &[String], vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let mut ids = Vec::new();
    for (i, m) in messages.iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(ids_of(m, vocab));
    }
    if ids.len() > max_len {
        ids.drain(..ids.len() - max_len);
    }
    if ids.is_empty() {
        ids.push(UNK);
    }
    TokenSequence::new(ids, max_len)
}

pub fn encode_dialogue(
    d: &Dialogue,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(TokenSequence, TokenSequence)> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    Ok((
        encode_context(&d.context, vocab, max_len)?,
        encode_text(&d.response, vocab, max_len)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub context: TokenSequence,
    pub response: TokenSequence,
}

pub fn encode_all(dialogues: &[Dialogue], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Pair>> {
    dialogues
        .iter()
        .map(|d| {
            let (context, response) = encode_dialogue(d, vocab, max_len)?;
            Ok(Pair { context, response })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub contexts: Vec<TokenSequence>,
    pub responses: Vec<TokenSequence>,
    /// Dataset index of each pair.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_indices(pairs: &[Pair], indices: Vec<usize>) -> Self {
        Self {
            contexts: indices.iter().map(|&i| pairs[i].context.clone()).collect(),
            responses: indices.iter().map(|&i| pairs[i].response.clone()).collect(),
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

/// `n` distinct pairs drawn uniformly without replacement.
pub fn sample_batch(pairs: &[Pair], n: usize, seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_batch_with(pairs, n, &mut rng)
}

pub fn sample_batch_with(pairs: &[Pair], n: usize, rng: &mut impl Rng) -> Result<Batch> {
    check_batch_size(pairs.len(), n)?;
    let indices = rand::seq::index::sample(rng, pairs.len(), n).into_vec();
    Ok(Batch::from_indices(pairs, indices))
}

/// Like [`sample_batch_with`], but prefers pairs whose responses are not
/// already in the batch so that no in-batch negative is a copy of the
/// positive. Falls back to duplicates only when the dataset has fewer than
/// `n` distinct responses.
pub fn sample_batch_distinct_responses(pairs: &[Pair], n: usize, rng: &mut impl Rng) -> Result<Batch> {
    check_batch_size(pairs.len(), n)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut seen = HashSet::new();
    let mut chosen = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    for i in order {
        if chosen.len() == n {
            break;
        }
        if seen.insert(pairs[i].response.real_ids()) {
            chosen.push(i);
        } else {
            skipped.push(i);
        }
    }
    chosen.extend(skipped.into_iter().take(n - chosen.len()));
    Ok(Batch::from_indices(pairs, chosen))
}

fn check_batch_size(available: usize, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument("batch size must be at least 2".into()));
    }
    if n > available {
        return Err(Error::NotEnoughData {
            requested: n,
            available,
        });
    }
    Ok(())
}

/// The most frequent responses with normalized usage frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub texts: Vec<String>,
    pub freq: Vec<f64>,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn position(&self, text: &str) -> Option<usize> {
        self.texts.iter().position(|t| t == text.trim())
    }

    pub fn encode(&self, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
        self.texts.iter().map(|t| encode_text(t, vocab, max_len)).collect()
    }
}

/// The `top_l` most frequent response strings (ties lexicographic), with
/// frequencies renormalized over the kept set.
pub fn build_candidate_list(dialogues: &[Dialogue], top_l: usize) -> Result<CandidateList> {
    if top_l < 2 {
        return Err(Error::InvalidArgument("candidate list needs at least 2 entries".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for d in dialogues {
        *counts.entry(d.response.trim()).or_default() += 1;
    }
    if counts.len() < top_l {
        return Err(Error::NotEnoughCandidates {
            requested: top_l,
            available: counts.len(),
        });
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(top_l);
    let total: usize = ranked.iter().map(|(_, c)| c).sum();
    Ok(CandidateList {
        texts: ranked.iter().map(|(t, _)| t.to_string()).collect(),
        freq: ranked.iter().map(|(_, c)| *c as f64 / total as f64).collect(),
    })
}

#[derive(Deserialize)]
struct JsonDialogue {
    context: Vec<String>,
    response: String,
}

/// Reads one `{"context": [...], "response": "..."}` object per line. Blank
/// lines are skipped; contexts longer than [`MAX_CONTEXT_MESSAGES`] keep
/// their most recent messages.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: JsonDialogue = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mut context = raw.context;
        if context.len() > MAX_CONTEXT_MESSAGES {
            context.drain(..context.len() - MAX_CONTEXT_MESSAGES);
        }
        out.push(Dialogue::new(context, raw.response).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for d in dialogues {
        s.push_str(&serde_json::to_string(d)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
