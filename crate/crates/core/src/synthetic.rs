//! Seeded synthetic dialogue corpora with known structure.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Dialogue;

fn dialogue(context: Vec<String>, response: Vec<String>) -> Dialogue {
    Dialogue::new(vec![context.join(" ")], response.join(" ")).expect("synthetic text is non-empty")
}

/// `n` pairs of random words with pairwise distinct responses; a model can
/// only rank them by memorising each pair.
pub fn memorization_corpus(n: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let ctx: Vec<String> = vocab.choose_multiple(&mut rng, 4).cloned().collect();
        let resp: Vec<String> = vocab.choose_multiple(&mut rng, 3).cloned().collect();
        if seen.insert(resp.clone()) {
            out.push(dialogue(ctx, resp));
        }
    }
    out
}

pub struct PlantedCorpus {
    pub dialogues: Vec<Dialogue>,
    /// The keywords; every pair shares exactly one of them.
    pub signal: Vec<String>,
}

/// Each pair shares one keyword from a small signal set, placed at a random
/// position among `noise_per_side` random noise tokens on each side.
pub fn planted_signal_corpus(n: usize, signal_words: usize, noise_per_side: usize, noise_vocab: usize, seed: u64) -> PlantedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal: Vec<String> = (0..signal_words).map(|i| format!("key{i}")).collect();
    let noise: Vec<String> = (0..noise_vocab).map(|i| format!("n{i}")).collect();
    let side = |rng: &mut ChaCha8Rng, key: &str| {
        let mut words: Vec<String> = (0..noise_per_side).map(|_| noise.choose(rng).unwrap().clone()).collect();
        let at = rng.gen_range(0..=words.len());
        words.insert(at, key.to_string());
        words
    };
    let dialogues = (0..n)
        .map(|_| {
            let key = signal.choose(&mut rng).unwrap().clone();
            let c = side(&mut rng, &key);
            let r = side(&mut rng, &key);
            dialogue(c, r)
        })
        .collect();
    PlantedCorpus { dialogues, signal }
}

/// Topic-structured pairs: context words `c{t}_k` predict response words
/// `r{t}_k` of the same topic, which no lexical overlap reveals. A fraction
/// `shared` of pairs also repeats one literal word on both sides, which
/// gives an overlap-based ranker partial signal.
pub fn topic_corpus(n: usize, topics: usize, shared: f64, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words_per_topic = 6;
    let noise: Vec<String> = (0..60).map(|i| format!("z{i}")).collect();
    (0..n)
        .map(|i| {
            let t = i % topics;
            let mut c: Vec<String> = (0..3).map(|_| format!("c{t}_{}", rng.gen_range(0..words_per_topic))).collect();
            let mut r: Vec<String> = (0..3).map(|_| format!("r{t}_{}", rng.gen_range(0..words_per_topic))).collect();
            c.extend((0..2).map(|_| noise.choose(&mut rng).unwrap().clone()));
            r.extend((0..2).map(|_| noise.choose(&mut rng).unwrap().clone()));
            if rng.gen_bool(shared) {
                let w = format!("s{t}_{}", rng.gen_range(0..words_per_topic));
                c.push(w.clone());
                r.push(w);
            }
            // a serial number keeps responses distinct
            r.push(format!("u{i}"));
            c.shuffle(&mut rng);
            r.shuffle(&mut rng);
            dialogue(c, r)
        })
        .collect()
}
