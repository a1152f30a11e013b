use mpe_core::catalog::{group_by_frequency, ingest};
use mpe_core::packfmt::pack;
use mpe_core::synth::generate;
use mpe_core::trainer::{evaluate, evaluate_source, run_phase, EmbeddingMode};
use mpe_core::{
    Checkpoint, Dataset, Error, FeatureCatalog, Phase, Schema, SampledPrecision, Split, SynthSpec, TrainConfig,
};

fn data() -> (FeatureCatalog, Dataset) {
    let spec = SynthSpec {
        num_fields: 3,
        features_per_field: 200,
        zipf_exponent: 1.1,
        informative_fraction: 0.2,
        logit_scale: 1.0,
        noise_std: 0.0,
        num_samples: 4000,
        seed: 3,
        importance_correlation: 1.0,
        target_positive_rate: Some(0.25),
    };
    let mut tsv = Vec::new();
    generate(&spec).unwrap().write_tsv(&mut tsv).unwrap();
    ingest(tsv.as_slice(), &Schema::anonymous(3).unwrap(), 0, 4).unwrap()
}

fn cfg(phase: Phase) -> TrainConfig {
    TrainConfig {
        phase,
        epochs: 2,
        batch_size: 128,
        group_size: 16,
        hidden_sizes: vec![8],
        lambda: 1e-4,
        gamma_learning_rate: Some(5e-3),
        quant_learning_rate: Some(1e-4),
        ..TrainConfig::default()
    }
}

#[test]
fn phases_replay_bit_for_bit() {
    let (cat, ds) = data();
    for phase in [Phase::Baseline, Phase::Search, Phase::Qat] {
        let a = run_phase(&cfg(phase), &ds, &cat, None, None).unwrap();
        let b = run_phase(&cfg(phase), &ds, &cat, None, None).unwrap();
        assert_eq!(a.step_losses, b.step_losses, "{phase}");
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes(), "{phase}");
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn checkpoint_round_trip() {
    let (cat, ds) = data();
    let res = run_phase(&cfg(Phase::Search), &ds, &cat, None, None).unwrap();
    let bytes = res.checkpoint.to_bytes();
    let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, res.checkpoint);
    assert!(back.initial.is_some());
    assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn quantized_phases_need_a_search_checkpoint() {
    let (cat, ds) = data();
    for phase in [Phase::Retrain, Phase::RetrainLth, Phase::NoRetrainEval] {
        let err = run_phase(&cfg(phase), &ds, &cat, None, None).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite(_)), "{phase}: {err}");
    }
    let base = run_phase(&cfg(Phase::Baseline), &ds, &cat, None, None).unwrap();
    let err = run_phase(&cfg(Phase::Retrain), &ds, &cat, Some(&base.checkpoint), None).unwrap_err();
    assert!(matches!(err, Error::MissingPrerequisite(_)), "{err}");
}

#[test]
fn foreign_catalog_is_refused() {
    let (cat, ds) = data();
    let search = run_phase(&cfg(Phase::Search), &ds, &cat, None, None).unwrap();
    let mut tsv = Vec::new();
    generate(&SynthSpec {
        num_fields: 3,
        features_per_field: 50,
        zipf_exponent: 1.0,
        informative_fraction: 0.1,
        logit_scale: 1.0,
        noise_std: 0.0,
        num_samples: 500,
        seed: 9,
        importance_correlation: 1.0,
        target_positive_rate: None,
    })
    .unwrap()
    .write_tsv(&mut tsv)
    .unwrap();
    let (other_cat, other_ds) = ingest(tsv.as_slice(), &Schema::anonymous(3).unwrap(), 0, 4).unwrap();
    let err = run_phase(&cfg(Phase::Retrain), &other_ds, &other_cat, Some(&search.checkpoint), None).unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. }), "{err}");
}

#[test]
fn single_candidate_search_is_fixed_width_training() {
    let (cat, ds) = data();
    let search = TrainConfig {
        candidate_bits: vec![6],
        lambda: 0.0,
        ..cfg(Phase::Search)
    };
    let qat = TrainConfig {
        candidate_bits: vec![6],
        qat_bits: 6,
        ..cfg(Phase::Qat)
    };
    let a = run_phase(&search, &ds, &cat, None, None).unwrap();
    let b = run_phase(&qat, &ds, &cat, None, None).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.checkpoint.model.embeddings, b.checkpoint.model.embeddings);
}

#[test]
fn ablation_phases_follow_the_search() {
    let (cat, ds) = data();
    let search = run_phase(&cfg(Phase::Search), &ds, &cat, None, None).unwrap();
    let sampled = search.sampled.clone().unwrap();
    let no_retrain = run_phase(&cfg(Phase::NoRetrainEval), &ds, &cat, Some(&search.checkpoint), None).unwrap();
    assert_eq!(no_retrain.sampled.as_ref().unwrap(), &sampled);
    assert_eq!(no_retrain.checkpoint.model.embeddings, search.checkpoint.model.embeddings);
    assert!(no_retrain.step_losses.is_empty());

    for phase in [Phase::Retrain, Phase::RetrainLth] {
        let r = run_phase(&cfg(phase), &ds, &cat, Some(&search.checkpoint), Some(sampled.clone())).unwrap();
        assert_eq!(r.sampled.as_ref().unwrap(), &sampled);
        assert_eq!(r.step_losses.len(), 2 * ds.split(Split::Train).len().div_ceil(128));
        assert!(r.test.auc > 0.5, "{phase} {}", r.test.auc);
    }
}

#[test]
fn packed_table_scores_like_the_checkpoint() {
    let (cat, ds) = data();
    let search = run_phase(&cfg(Phase::Search), &ds, &cat, None, None).unwrap();
    let res = run_phase(&cfg(Phase::Retrain), &ds, &cat, Some(&search.checkpoint), None).unwrap();
    let model = &res.checkpoint.model;
    let groups = group_by_frequency(&cat, res.checkpoint.group_size).unwrap();
    let bits = res.checkpoint.sampled.clone().unwrap();
    let sampled = SampledPrecision::from_bits(&groups, bits).unwrap();
    let table = pack(&model.embeddings, model.dim, &sampled, &model.quant, &groups).unwrap();
    let test = ds.split(Split::Test);
    let mode = EmbeddingMode::Quantized {
        groups: &groups,
        sampled: &sampled,
    };
    let from_ckpt = evaluate(model, &test, &mode).unwrap();
    let from_pack = evaluate_source(&table, &model.mlp, &test).unwrap();
    assert_eq!(from_ckpt, from_pack);
    assert_eq!(from_ckpt, res.test);
}
