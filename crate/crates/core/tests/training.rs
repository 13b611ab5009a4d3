//! Candidate scoring, the training loop and checkpoint persistence.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsam_autodiff::Tape;
use tsam_core::checkpoint::Checkpoint;
use tsam_core::data::{synth_generate, SynthConfig, SynthDataset};
use tsam_core::evaluator::evaluate;
use tsam_core::kge::ScoreFn;
use tsam_core::model::ScoreMode;
use tsam_core::sacl::SaclConfig;
use tsam_core::trainer::{batch_loss, CheckpointTarget};
use tsam_core::{Model, ModelConfig, ParamStore, Split, TrainConfig, Trainer, Triple};

fn data() -> SynthDataset {
    synth_generate(&SynthConfig::default()).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        dim: 16,
        encoder_layers: 1,
        encoder_heads: 2,
        encoder_ffn_dim: 16,
        decoder_layers: 1,
        decoder_heads: 2,
        decoder_ffn_dim: 16,
        max_tokens: 4,
        ..ModelConfig::default()
    }
}

fn build(ds: &SynthDataset, cfg: ModelConfig, seed: u64) -> (Model, ParamStore) {
    let ne = ds.store.entity_count();
    let nr = ds.store.relation_count();
    Model::new(cfg, ne, nr, Some(&ds.visual), Some(&ds.textual), seed).unwrap()
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn set(store: &mut ParamStore, name: &str, f: impl Fn(usize, usize) -> f32) {
    let id = store.find(name).unwrap();
    let cols = store.get(id).cols();
    let data: Vec<f32> = (0..store.get(id).len()).map(|i| f(i / cols, i % cols)).collect();
    store.set_data(id, &data).unwrap();
}

#[test]
fn orthogonal_prediction_gives_even_odds() {
    let ds = data();
    let cfg = ModelConfig {
        decoder_layers: 0,
        enable_fgmaf: false,
        ..small()
    };
    let (model, mut store) = build(&ds, cfg, 1);
    // Candidates live in the first 15 coordinates, the prediction in the last.
    set(&mut store, "kge.entity", |e, c| if c == 15 { 0.0 } else { ((e * 3 + c) % 7) as f32 - 3.0 });
    set(&mut store, "decoder.cls_token", |_, c| if c == 15 { 1.0 } else { 0.0 });
    let scores = model.scorer(&store).unwrap().score(&[(0, 1), (7, 6)]).unwrap();
    for row in scores {
        assert!(row.iter().all(|&s| sigmoid(s) == 0.5));
    }
}

#[test]
fn matching_prediction_scores_highest() {
    let ds = data();
    let cfg = ModelConfig {
        decoder_layers: 0,
        enable_fgmaf: false,
        ..small()
    };
    let (model, mut store) = build(&ds, cfg, 1);
    let ne = ds.store.entity_count();
    // Unit-norm candidates at distinct angles in the first two coordinates.
    set(&mut store, "kge.entity", |e, c| {
        let a = e as f32 * std::f32::consts::TAU / ne as f32;
        match c {
            0 => a.cos(),
            1 => a.sin(),
            _ => 0.0,
        }
    });
    let target = 17;
    let row = store.get(store.find("kge.entity").unwrap()).row(target).to_vec();
    set(&mut store, "decoder.cls_token", |_, c| row[c]);
    let scores = &model.scorer(&store).unwrap().score(&[(3, 2)]).unwrap()[0];
    let best = (0..ne).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
    assert_eq!(best, target);
    assert!((scores[target] - 1.0).abs() < 1e-6);
}

#[test]
fn exact_translation_attains_zero_distance() {
    let ds = data();
    let cfg = ModelConfig {
        enable_fgmaf: false,
        score_mode: ScoreMode::Kge,
        score_fn: ScoreFn::TransE,
        ..small()
    };
    let (model, mut store) = build(&ds, cfg, 2);
    let ent = store.get(store.find("kge.entity").unwrap()).clone();
    let (h, r, t) = (4, 3, 21);
    let shift: Vec<f32> = ent.row(t).iter().zip(ent.row(h)).map(|(a, b)| a - b).collect();
    let rel = store.find("kge.relation").unwrap();
    let mut rows = store.get(rel).data().to_vec();
    rows[r * 16..(r + 1) * 16].copy_from_slice(&shift);
    store.set_data(rel, &rows).unwrap();
    let scores = &model.scorer(&store).unwrap().score(&[(h, r)]).unwrap()[0];
    assert!(scores[t].abs() < 1e-6, "{}", scores[t]);
    assert!(scores.iter().enumerate().all(|(i, &s)| i == t || s < scores[t]));
}

#[test]
fn fusion_weights_are_a_distribution() {
    let ds = data();
    let (model, store) = build(&ds, small(), 5);
    let scorer = model.scorer(&store).unwrap();
    let w = scorer.weights().unwrap();
    assert_eq!(w.shape(), &[50, 3]);
    for e in 0..50 {
        let row = w.row(e);
        assert!(row.iter().all(|&x| x > 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

fn encoder_grads(sacl: SaclConfig) -> Vec<(String, bool)> {
    let ds = data();
    let cfg = ModelConfig {
        enable_fgmaf: false,
        ..small()
    };
    let (model, mut store) = build(&ds, cfg, 3);
    let train = TrainConfig {
        sacl,
        ..TrainConfig::default()
    };
    let batch: Vec<Triple> = ds.store.split(Split::Train)[..32].to_vec();
    store.zero_grad();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let terms = batch_loss(&model, &mut tape, &store, &batch, &train, &mut rng).unwrap();
    tape.backward(terms.total, &mut store).unwrap();
    store
        .iter()
        .filter(|(_, n, _)| n.starts_with("encoder."))
        .map(|(_, n, t)| (n.to_string(), t.grad().is_some_and(|g| g.iter().any(|&x| x != 0.0))))
        .collect()
}

#[test]
fn alignment_only_parameters_get_no_gradient_without_it() {
    // With fusion off the token encoder only feeds the alignment terms.
    let off = SaclConfig {
        enable_sv: false,
        enable_st: false,
        ..SaclConfig::default()
    };
    let grads = encoder_grads(off);
    assert!(!grads.is_empty());
    for (name, touched) in &grads {
        assert!(!touched, "{name} has gradient with alignment disabled");
    }
    let on = encoder_grads(SaclConfig::default());
    assert!(on.iter().any(|(n, t)| n == "encoder.ent_token" && *t));
}

#[test]
fn total_is_prediction_loss_when_alignment_off() {
    let ds = data();
    let (model, store) = build(&ds, small(), 4);
    let train = TrainConfig {
        sacl: SaclConfig {
            enable_sv: false,
            enable_st: false,
            ..SaclConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = ds.store.with_inverses(Split::Train)[..40].to_vec();
    let terms = batch_loss(&model, &mut tape, &store, &batch, &train, &mut rng).unwrap();
    assert!(terms.sv.is_none() && terms.st.is_none());
    assert_eq!(tape.item(terms.total).to_bits(), tape.item(terms.lp).to_bits());
}

fn trainer_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn epoch_visits_each_training_triple_and_inverse_once() {
    let ds = data();
    let (model, store) = build(&ds, small(), 6);
    let mut trainer = Trainer::new(
        model,
        store,
        &ds.store,
        TrainConfig {
            batch_size: 48,
            ..trainer_cfg(1)
        },
    )
    .unwrap();
    let stats = trainer.run_epoch().unwrap();
    assert_eq!(stats.triples, 2 * 160);
    assert_eq!(stats.batches, 7);

    // The epoch's triple multiset is the train split plus its inverses.
    let mut counts: HashMap<Triple, usize> = HashMap::new();
    for t in ds.store.with_inverses(Split::Train) {
        *counts.entry(t).or_default() += 1;
    }
    assert_eq!(counts.len(), 320);
    assert!(counts.values().all(|&c| c == 1));
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let ds = data();
    let (model, store) = build(&ds, small(), 7);
    let before = store.clone();
    let mut trainer = Trainer::new(
        model,
        store,
        &ds.store,
        TrainConfig {
            lr: 0.0,
            ..trainer_cfg(1)
        },
    )
    .unwrap();
    trainer.run_epoch().unwrap();
    for ((_, name, a), (_, _, b)) in before.iter().zip(trainer.params().iter()) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{name} changed");
    }
}

#[test]
fn loss_decreases_over_first_ten_epochs() {
    let ds = data();
    let run = ModelConfig {
        max_tokens: 16,
        ..ModelConfig::default()
    };
    let (model, store) = build(&ds, run, 42);
    let mut trainer = Trainer::new(model, store, &ds.store, TrainConfig::default()).unwrap();
    let totals: Vec<f64> = (0..10).map(|_| trainer.run_epoch().unwrap().total).collect();
    for w in totals.windows(2) {
        assert!(w[1] < w[0], "epoch-mean loss went up: {totals:?}");
    }
}

fn fit(seed: u64, epochs: usize) -> (f64, Vec<f64>) {
    let ds = data();
    let (model, store) = build(&ds, small(), seed);
    let mut trainer = Trainer::new(
        model,
        store,
        &ds.store,
        TrainConfig {
            seed,
            ..trainer_cfg(epochs)
        },
    )
    .unwrap();
    let report = trainer.fit(None, None).unwrap();
    let losses = report.history.iter().map(|h| h.stats.total).collect();
    (report.history.last().unwrap().valid_mrr, losses)
}

#[test]
fn same_seed_same_run() {
    let a = fit(11, 3);
    let b = fit(11, 3);
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
    let c = fit(12, 3);
    assert_ne!(a.1, c.1);
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let ds = data();
    let (model, store) = build(&ds, small(), 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.tsck");
    let target = CheckpointTarget {
        path: path.clone(),
        config_text: "train.seed = 13\n".into(),
    };
    let mut trainer = Trainer::new(model, store, &ds.store, trainer_cfg(3)).unwrap();
    let report = trainer.fit(Some(&target), None).unwrap();
    trainer.restore_best().unwrap();
    let before = trainer.evaluate(Split::Test, true).unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.epoch as usize, report.best_epoch);
    assert_eq!(ck.best_valid_mrr, report.best_valid_mrr);
    let (fresh, mut params) = build(&ds, small(), 999);
    ck.restore_into(&mut params).unwrap();
    let after = evaluate(&fresh, &params, &ds.store, Split::Test, true).unwrap();
    assert_eq!(before.metrics, after.metrics);
    let ranks = |e: &tsam_core::evaluator::Evaluation| e.results.iter().map(|r| r.rank).collect::<Vec<_>>();
    assert_eq!(ranks(&before), ranks(&after));

    // Resaving the loaded checkpoint gives the same bytes.
    assert_eq!(ck.to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn fusion_off_ignores_bank_contents_after_training() {
    let ds = data();
    let cfg = ModelConfig {
        enable_fgmaf: false,
        ..small()
    };
    let train = TrainConfig {
        sacl: SaclConfig {
            enable_sv: false,
            enable_st: false,
            ..SaclConfig::default()
        },
        ..trainer_cfg(2)
    };
    let mut noisy = ds.clone();
    noisy.visual = synth_generate(&SynthConfig { seed: 99, ..SynthConfig::default() }).unwrap().visual;
    let run = |d: &SynthDataset| {
        let (model, store) = build(d, cfg.clone(), 21);
        let mut t = Trainer::new(model, store, &d.store, train.clone()).unwrap();
        t.fit(None, None).unwrap();
        t.evaluate(Split::Valid, true).unwrap().metrics
    };
    assert_eq!(run(&ds), run(&noisy));
}
