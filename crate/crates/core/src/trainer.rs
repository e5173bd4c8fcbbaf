//! Alternating min-max optimisation: the critic ascends the mutual
//! information bound on frozen features, then the encoders take one Adam
//! step down the retrieval loss plus the weighted bound.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::TrainConfig;
use crate::corpus::{build_candidate_list, build_vocabulary, encode_all, sample_batch_distinct_responses, Batch, Dialogue, Pair, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::in_batch_recall_at_1;
use crate::model::{batch_features, save_model, Model};
use crate::objectives::{regularizer_var, total_objective_var, BatchFeatures, CriticState, LossBreakdown, ObjectiveSettings};
use crate::params::AdamConfig;
use crate::tensor::Tensor;

/// Dialogues with their vocabulary and token encodings.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dialogues: Vec<Dialogue>,
    pub vocab: Vocabulary,
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn from_dialogues(dialogues: Vec<Dialogue>, min_count: usize, max_len: usize) -> Result<Self> {
        let vocab = build_vocabulary(&dialogues, min_count)?;
        Self::with_vocab(dialogues, vocab, max_len)
    }

    pub fn with_vocab(dialogues: Vec<Dialogue>, vocab: Vocabulary, max_len: usize) -> Result<Self> {
        let pairs = encode_all(&dialogues, &vocab, max_len)?;
        Ok(Self { dialogues, vocab, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub recall_at_1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub history: Vec<LossBreakdown>,
    pub validation: Vec<ValidationPoint>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
    pub train_pairs: usize,
    pub validation_pairs: usize,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    ema: Vec<CriticState>,
    batch_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    encoder_adam: AdamConfig,
    critic_adam: AdamConfig,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config(), vocab_size, cfg.seed)?;
        Self::from_model(cfg, model)
    }

    /// Continues training an existing model under `cfg`'s optimiser settings.
    pub fn from_model(cfg: &TrainConfig, model: Model) -> Result<Self> {
        cfg.validate()?;
        let regs = if model.config.symmetric_reg { 2 } else { 1 };
        Ok(Self {
            ema: (0..regs).map(|_| CriticState::new(cfg.ema_decay)).collect::<Result<_>>()?,
            batch_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
            encoder_adam: AdamConfig::with_lr(cfg.lr),
            critic_adam: AdamConfig::with_lr(cfg.critic_lr.unwrap_or(cfg.lr)),
            cfg: cfg.clone(),
            model,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn critic_states(&self) -> &[CriticState] {
        &self.ema
    }

    pub fn settings(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            gamma: self.cfg.gamma,
            beta: self.cfg.beta,
            regularize: self.model.config.variant.regularize(),
            symmetric: self.model.config.symmetric_reg,
        }
    }

    /// Draws a batch with pairwise distinct responses.
    pub fn sample_batch(&mut self, pairs: &[Pair]) -> Result<Batch> {
        sample_batch_distinct_responses(pairs, self.cfg.batch_size, &mut self.batch_rng)
    }

    /// `critic_steps` ascent steps on the bound with the encoders frozen.
    /// Does nothing for variants without the regulariser.
    pub fn critic_phase(&mut self, batch: &Batch) -> Result<()> {
        let settings = self.settings();
        if !settings.regularize {
            return Ok(());
        }
        let mut g = Graph::checked();
        let f = batch_features(&mut g, &self.model.encoder, &self.model.config, &batch.contexts, &batch.responses, None)?;
        g.check()?;
        let grab = |v: Option<_>| v.map(|v| g.value(v).clone());
        let frozen = [grab(f.hbar_x), grab(f.attended_y), grab(f.hbar_y), grab(f.attended_x)];
        for _ in 0..self.cfg.critic_steps {
            let mut cg = Graph::checked();
            let mut c = |t: &Option<Tensor>| t.clone().map(|t| cg.constant(t));
            let (hbar_x, attended_y, hbar_y, attended_x) = (c(&frozen[0]), c(&frozen[1]), c(&frozen[2]), c(&frozen[3]));
            // the regulariser never reads the scores
            let feats = BatchFeatures {
                scores: cg.constant(Tensor::zeros(&[1, 1])),
                hbar_x,
                attended_y,
                hbar_y,
                attended_x,
            };
            let terms = regularizer_var(&mut cg, &feats, &self.model.critic, settings.symmetric, None)?;
            let values: Vec<_> = terms.iter().map(|t| t.value).collect();
            let objective = values.into_iter().reduce(|a, b| cg.add(a, b)).unwrap();
            cg.check()?;
            let grads = cg.backward(objective);
            self.model.critic.accumulate(&cg, &grads);
            self.model.critic.clip_grad_norm(self.cfg.clip_norm);
            self.model.critic.negate_grads();
            self.model.critic.adam_step(&self.critic_adam);
        }
        Ok(())
    }

    /// One descent step for both encoders against the total objective.
    pub fn encoder_phase(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let settings = self.settings();
        let mut g = Graph::checked();
        let dropout = (self.model.config.encoder.dropout > 0.0).then_some(&mut self.dropout_rng);
        let f = batch_features(&mut g, &self.model.encoder, &self.model.config, &batch.contexts, &batch.responses, dropout)?;
        let vars = total_objective_var(&mut g, &f, &settings, &self.model.critic, Some(&mut self.ema))?;
        g.check()?;
        let breakdown = vars.breakdown(&g, &settings);
        let grads = g.backward(vars.descend);
        self.model.encoder.accumulate(&g, &grads);
        self.model.encoder.clip_grad_norm(self.cfg.clip_norm);
        self.model.encoder.adam_step(&self.encoder_adam);
        Ok(breakdown)
    }

    /// Critic phase then encoder phase; returns the encoder-phase losses.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        if batch.len() < 2 {
            return Err(Error::InvalidArgument(format!("batch of {} pairs; need at least 2", batch.len())));
        }
        self.critic_phase(batch)?;
        self.encoder_phase(batch)
    }
}

/// Seeded train/validation split of pair indices.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * validation_fraction).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
}

/// Full seeded run: split, train for `steps`, validate and checkpoint every
/// `eval_every` steps and at the end.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (train_idx, val_idx) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
    if train_idx.len() < cfg.batch_size {
        return Err(Error::NotEnoughData {
            requested: cfg.batch_size,
            available: train_idx.len(),
        });
    }
    let train_pairs: Vec<Pair> = train_idx.iter().map(|&i| data.pairs[i].clone()).collect();
    let val_pairs: Vec<Pair> = val_idx.iter().map(|&i| data.pairs[i].clone()).collect();
    let candidates = match &cfg.checkpoint {
        Some(_) => {
            let train_dialogues: Vec<Dialogue> = train_idx.iter().map(|&i| data.dialogues[i].clone()).collect();
            Some(build_candidate_list(&train_dialogues, cfg.candidates)?)
        }
        None => None,
    };

    let mut trainer = Trainer::new(cfg, data.vocab.len())?;
    let mut report = TrainReport {
        variant: cfg.variant.to_string(),
        history: Vec::with_capacity(cfg.steps),
        validation: Vec::new(),
        wall_clock_secs: 0.0,
        checkpoint: cfg.checkpoint.clone(),
        train_pairs: train_pairs.len(),
        validation_pairs: val_pairs.len(),
    };
    for step in 1..=cfg.steps {
        let batch = trainer.sample_batch(&train_pairs)?;
        let losses = trainer.train_step(&batch)?;
        log::debug!("step {step}: l_ret {:.4} l_reg {:.4} total {:.4}", losses.l_ret, losses.l_reg, losses.total);
        report.history.push(losses);
        let last = step == cfg.steps;
        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || last) {
            if val_pairs.len() >= 2 {
                let r = in_batch_recall_at_1(trainer.model(), &val_pairs, cfg.batch_size)?;
                log::info!("step {step}: validation recall@1 {r:.4}");
                report.validation.push(ValidationPoint { step, recall_at_1: r });
            }
        }
        if let Some(path) = &cfg.checkpoint {
            if last || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
                save_model(path, trainer.model(), &data.vocab, candidates.as_ref())?;
                log::info!("step {step}: checkpoint written to {}", path.display());
            }
        }
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model: trainer.into_model(),
        report,
    })
}
