use ade::corpus::{load_jsonl, write_jsonl};
use ade::evaluation::{evaluate, ModelScorer, OracleScorer, Protocol};
use ade::model::load_model;
use ade::synthetic::{memorization_corpus, topic_corpus};
use ade::{train, Dataset, TrainConfig, Variant};

fn toy(variant: Variant, steps: usize) -> TrainConfig {
    TrainConfig {
        variant,
        batch_size: 8,
        lr: 1e-3,
        steps,
        validation_fraction: 0.25,
        eval_every: 5,
        layers: 1,
        model_dim: 16,
        heads: 2,
        word_dim: 8,
        ffn_dim: 32,
        max_len: 8,
        candidates: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn config_file_to_checkpoint_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("data.jsonl");
    write_jsonl(&data_path, &topic_corpus(60, 5, 0.3, 1)).unwrap();
    let mut cfg = toy(Variant::AdeWeReg, 10);
    cfg.data = Some("data.jsonl".into());
    cfg.checkpoint = Some("ckpt/model.bin".into());
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, cfg.to_text()).unwrap();

    let cfg = TrainConfig::from_file(&cfg_path).unwrap();
    assert_eq!(cfg.data.as_deref(), Some(data_path.as_path()));
    let data = Dataset::from_dialogues(load_jsonl(cfg.data.as_ref().unwrap()).unwrap(), cfg.min_count, cfg.max_len).unwrap();
    let outcome = train(&cfg, &data).unwrap();
    assert_eq!(outcome.report.history.len(), 10);
    assert_eq!(outcome.report.validation.iter().map(|v| v.step).collect::<Vec<_>>(), vec![5, 10]);
    assert_eq!(outcome.report.train_pairs + outcome.report.validation_pairs, 60);
    assert!(outcome.report.history.iter().all(|l| l.total.is_finite()));

    let loaded = load_model(cfg.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(loaded.model.config, outcome.model.config);
    let list = loaded.candidates.clone().unwrap();
    assert_eq!(list.len(), 20);
    let fixed = Protocol::FixedList(list);
    let m = evaluate(&data.dialogues, &ModelScorer::new(&loaded.model, &loaded.vocab), &fixed, &[1, 20], false).unwrap();
    assert_eq!(m.recall(20), Some(1.0));
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let data = Dataset::from_dialogues(memorization_corpus(24, 0), 1, 8).unwrap();
    let a = train(&toy(Variant::AdeReg, 6), &data).unwrap();
    let b = train(&toy(Variant::AdeReg, 6), &data).unwrap();
    let totals = |r: &ade::TrainReport| r.history.iter().map(|l| l.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(totals(&a.report), totals(&b.report));
    let other = train(&TrainConfig { seed: 9, ..toy(Variant::AdeReg, 6) }, &data).unwrap();
    assert_ne!(totals(&a.report), totals(&other.report));
}

#[test]
fn oracle_and_distractor_protocol() {
    let dialogues = topic_corpus(40, 4, 0.3, 2);
    let m = evaluate(&dialogues, &OracleScorer::new(&dialogues), &Protocol::distractor19(0), &[1], false).unwrap();
    assert_eq!(m.recall(1), Some(1.0));
    assert_eq!(m.instances, 40);
    assert!(evaluate(&dialogues[..10], &OracleScorer::new(&dialogues), &Protocol::distractor19(0), &[1], false).is_err());
}
