use ctxcomplete_core::beam::BeamParams;
use ctxcomplete_core::checkpoint::{CheckpointError, InstanceCheckpoint, LmCheckpoint, RawCheckpoint};
use ctxcomplete_core::data::{
    gen_synthetic, instance_examples, lm_examples, split_records, synthetic_feature_dim, SyntheticConfig,
};
use ctxcomplete_core::factorcell::ModelConfig;
use ctxcomplete_core::instance::{InstanceConfig, InstanceTrainConfig, InstanceTrainer};
use ctxcomplete_core::model::ContextSource;
use ctxcomplete_core::params::ParamSet;
use ctxcomplete_core::tensor::seeded_rng;
use ctxcomplete_core::train::{ContextMode, LmTrainer, TrainConfig};
use ctxcomplete_core::vocab::Vocab;

fn small_corpus() -> (Vocab, ctxcomplete_core::data::SyntheticDataset) {
    let ds = gen_synthetic(
        &SyntheticConfig {
            n_scenes: 120,
            ..Default::default()
        },
        &mut seeded_rng(3),
    );
    let vocab = Vocab::from_corpus(ds.queries.iter().map(|q| q.query.as_str()));
    (vocab, ds)
}

fn small_model(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        hidden_dim: 16,
        rank: 4,
        context_dim: 6,
        feature_dim: synthetic_feature_dim(),
        vocab_size: vocab.len(),
        max_len: 50,
    }
}

#[test]
fn lm_resume_through_checkpoint_file_is_exact() {
    let (vocab, ds) = small_corpus();
    let ex = lm_examples(&ds.queries, &vocab);
    let mut cfg = TrainConfig::desk(11);
    cfg.iterations = 40;
    cfg.log_every = 10;
    cfg.context_mode = ContextMode::Noise;

    let mut full = LmTrainer::new(small_model(&vocab), cfg.clone(), ex.len()).unwrap();
    full.run(&ex).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut half = LmTrainer::new(small_model(&vocab), cfg, ex.len()).unwrap();
    half.run_until(&ex, 17).unwrap();
    LmCheckpoint::from_trainer(&half, vocab.clone(), ds.catalog.names().to_vec(), ds.images())
        .save(&path)
        .unwrap();
    drop(half);

    let loaded = LmCheckpoint::load(&path).unwrap();
    assert_eq!(loaded.gallery, ds.images());
    assert_eq!(loaded.vocab, vocab);
    let mut resumed = loaded.into_trainer(ex.len()).unwrap();
    resumed.run(&ex).unwrap();
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.adam, full.adam);
    assert_eq!(resumed.curve, full.curve);
}

#[test]
fn instance_resume_through_checkpoint_file_is_exact() {
    let (vocab, ds) = small_corpus();
    let ex = instance_examples(&ds.queries, &vocab, &ds.catalog).unwrap();
    let cfg = InstanceConfig {
        hidden_dim: 12,
        ..InstanceConfig::desk(vocab.len(), ds.catalog.len())
    };
    let mut tc = InstanceTrainConfig::desk(5);
    tc.iterations = 30;
    tc.log_every = 10;

    let mut full = InstanceTrainer::new(cfg.clone(), tc.clone(), ex.len()).unwrap();
    full.run(&ex).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inst.ckpt");
    let mut half = InstanceTrainer::new(cfg, tc, ex.len()).unwrap();
    half.run_until(&ex, 13).unwrap();
    InstanceCheckpoint::from_trainer(&half, vocab, ds.catalog.clone())
        .save(&path)
        .unwrap();
    let mut resumed = InstanceCheckpoint::load(&path).unwrap().into_trainer(ex.len()).unwrap();
    resumed.run(&ex).unwrap();
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.curve, full.curve);
}

#[test]
fn wrong_kind_is_rejected() {
    let (vocab, ds) = small_corpus();
    let ex = instance_examples(&ds.queries, &vocab, &ds.catalog).unwrap();
    let cfg = InstanceConfig::desk(vocab.len(), ds.catalog.len());
    let trainer = InstanceTrainer::new(cfg, InstanceTrainConfig::desk(1), ex.len()).unwrap();
    let raw = InstanceCheckpoint::from_trainer(&trainer, vocab, ds.catalog.clone()).to_raw();
    assert!(matches!(
        LmCheckpoint::from_raw(&raw),
        Err(CheckpointError::WrongKind { .. })
    ));
    let back = RawCheckpoint::from_bytes(&raw.to_bytes()).unwrap();
    let ckpt = InstanceCheckpoint::from_raw(&back).unwrap();
    assert_eq!(ckpt.params.num_params(), trainer.params.num_params());
}

#[test]
fn short_training_learns_and_serves_completions() {
    let (vocab, ds) = small_corpus();
    let splits = split_records(ds.queries.clone(), 3);
    let ex = lm_examples(&splits.train, &vocab);
    let mut cfg = TrainConfig::desk(2);
    cfg.iterations = 150;
    cfg.log_every = 50;
    let mut trainer = LmTrainer::new(small_model(&vocab), cfg, ex.len()).unwrap();
    trainer.run(&ex).unwrap();
    let first = trainer.curve.first().unwrap();
    let last = trainer.curve.last().unwrap();
    assert!(last < 0.7 * first, "{first} -> {last}");

    let ckpt = LmCheckpoint::from_trainer(&trainer, vocab, Vec::new(), ds.images());
    let lm = ckpt.language_model();
    let source = ContextSource::Features(ds.scenes[0].features.clone());
    let out = lm.complete("th", &source, &BeamParams::new(5, 3, 50)).unwrap();
    assert_eq!(out.len(), 3);
    for c in &out {
        assert!(c.text.starts_with("th"));
        assert_eq!(lm.score(&c.text, "th", &source).unwrap(), c.logprob);
    }
}
