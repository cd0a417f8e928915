mod common;

use common::{desk_config, fixture};
use dtm_core::data::TrackSet;
use dtm_core::heads::{Architecture, HeadKind};
use dtm_core::trainer::{
    compute_losses, evaluate, evaluate_models, loss_and_grads, sample_for, train, Checkpoint, LossWeights, Sample, TrainConfig, Trainer,
};
use dtm_core::Error;
use proptest::prelude::*;

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (records, bundles) = fixture(6, 3, 8, 1);
    let cfg = desk_config(3, 4);
    let (a, ha) = train(&records[..12], &records[12..], &bundles, &cfg).unwrap();
    let (b, hb) = train(&records[..12], &records[12..], &bundles, &cfg).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(ha, hb);
    let (c, _) = train(&records[..12], &records[12..], &bundles, &TrainConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (records, bundles) = fixture(5, 3, 6, 2);
    let cfg = desk_config(5, 4);
    let (full, full_hist) = train(&records, &[], &bundles, &cfg).unwrap();

    let mut t = Trainer::new(cfg, &records, &[], &bundles).unwrap();
    let mut hist = Vec::new();
    for _ in 0..3 {
        hist.push(t.run_epoch().unwrap());
    }
    let saved = Checkpoint::from_json(&t.checkpoint().to_json()).unwrap();
    let mut t = Trainer::resume(saved, &records, &[], &bundles).unwrap();
    hist.extend(t.run().unwrap().epochs);
    assert_eq!(t.checkpoint().to_json(), full.to_json());
    assert_eq!(hist, full_hist.epochs);
}

#[test]
fn step_count_is_epochs_times_batches() {
    let (records, bundles) = fixture(5, 2, 4, 3);
    let cfg = TrainConfig { batch_size: 4, ..desk_config(3, 4) };
    let (ck, hist) = train(&records, &[], &bundles, &cfg).unwrap();
    // 10 samples in batches of 4: 4 + 4 + 2.
    assert_eq!(ck.step, 3 * 3);
    assert_eq!(ck.adam.t, 9);
    assert!(hist.epochs.iter().all(|e| e.steps == 3));
    let t = Trainer::new(cfg, &records, &[], &bundles).unwrap();
    assert_eq!(t.schedule().total_steps, 9);
}

#[test]
fn validation_records_never_train() {
    let (records, bundles) = fixture(6, 3, 6, 4);
    let (train_set, val_set) = records.split_at(12);
    let cfg = desk_config(2, 4);
    let (a, ha) = train(train_set, val_set, &bundles, &cfg).unwrap();
    let mut shifted = val_set.to_vec();
    for r in &mut shifted {
        r.dtm += 100.0;
    }
    let (b, hb) = train(train_set, &shifted, &bundles, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(ha.epochs[1].val, hb.epochs[1].val);
}

#[test]
fn missing_bundle_fails_before_training() {
    let (records, mut bundles) = fixture(4, 2, 4, 5);
    let gone = records[5].mut_variant_id();
    bundles.remove(&gone);
    let err = Trainer::new(desk_config(1, 4), &records, &[], &bundles).err().unwrap();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains(&gone), "{err}");
}

#[test]
fn zero_epochs_is_config_error() {
    let (records, bundles) = fixture(2, 2, 4, 6);
    let err = Trainer::new(desk_config(0, 4), &records, &[], &bundles).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn checkpoint_file_round_trip_preserves_predictions() {
    let (records, bundles) = fixture(4, 3, 6, 7);
    let (ck, _) = train(&records, &[], &bundles, &desk_config(2, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let (m1, m2) = (ck.model().unwrap(), back.model().unwrap());
    for r in &records {
        let s = sample_for(r, &bundles).unwrap();
        let (p1, p2) = (m1.predict(s.wt, s.mt).unwrap(), m2.predict(s.wt, s.mt).unwrap());
        assert_eq!(p1.ensemble.to_bits(), p2.ensemble.to_bits());
    }

    let mut tampered = ck.clone();
    tampered.config.epochs += 1;
    assert!(Checkpoint::from_json(&tampered.to_json()).is_err());
}

#[test]
fn evaluation_lists_missing_bundles_and_outputs_all_heads() {
    let (records, mut bundles) = fixture(4, 3, 6, 8);
    let (ck, _) = train(&records, &[], &bundles, &desk_config(1, 4)).unwrap();
    let model = ck.model().unwrap();
    bundles.remove(&records[0].mut_variant_id());
    let ev = evaluate(&model, &records, &bundles).unwrap();
    assert_eq!(ev.skipped.len(), 1);
    assert!(ev.skipped[0].contains(&records[0].protein_id));
    assert_eq!(ev.predictions.len(), records.len() - 1);
    assert_eq!(ev.metrics.n, records.len() - 1);
    for p in &ev.predictions {
        assert_eq!(p.heads.len(), 2);
        assert_eq!(p.y_ens, (p.heads[0] + p.heads[1]) / 2.0);
    }
    assert!(ev.report().contains("skipped=1"));
    assert!(ev.predictions_csv().starts_with("protein_id,mutation,label,y1,y2,y_ens\n"));

    // Averaging a model with itself changes nothing.
    let twice = evaluate_models(&[&model, &model], &records, &bundles).unwrap();
    assert_eq!(twice.metrics, ev.metrics);
}

#[test]
fn constant_predictor_surfaces_pearson_error() {
    let (records, bundles) = fixture(3, 3, 4, 9);
    let cfg = TrainConfig {
        architecture: Architecture::Single(HeadKind::MutConcat),
        ..desk_config(1, 4)
    };
    let (mut ck, _) = train(&records, &[], &bundles, &cfg).unwrap();
    for p in ck.params.iter_mut() {
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let err = evaluate(&ck.model().unwrap(), &records, &bundles).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn batch_losses_are_means_of_sample_losses() {
    let (records, bundles) = fixture(3, 3, 6, 10);
    let (ck, _) = train(&records, &[], &bundles, &desk_config(1, 4)).unwrap();
    let model = ck.model().unwrap();
    let samples: Vec<Sample<'_>> = records.iter().map(|r| sample_for(r, &bundles).unwrap()).collect();
    let (batch, _, _) = loss_and_grads(&model, &samples, LossWeights::default()).unwrap();
    let mut sum = [0.0; 4];
    for s in &samples {
        let p = model.predict(s.wt, s.mt).unwrap();
        let l = compute_losses(p.heads[0], p.heads[1], p.ensemble, s.label).unwrap();
        for (acc, v) in sum.iter_mut().zip([l.l_head1, l.l_head2, l.l_ensemble, l.l_total]) {
            *acc += v;
        }
    }
    let n = samples.len() as f64;
    let got = [batch.l_head1, batch.l_head2, batch.l_ensemble, batch.l_total];
    for (g, s) in got.iter().zip(sum) {
        assert!((g - s / n).abs() < 1e-12, "{g} vs {}", s / n);
    }
    assert!((batch.l_total - (batch.l_head1 + batch.l_head2 + batch.l_ensemble)).abs() < 1e-12);
}

#[test]
fn single_head_trains_on_its_own_mse() {
    let (records, bundles) = fixture(3, 3, 6, 11);
    let cfg = TrainConfig {
        architecture: Architecture::Single(HeadKind::AvgPoolLinComb),
        tracks: TrackSet::Seq,
        ..desk_config(2, 4)
    };
    let (_, hist) = train(&records, &[], &bundles, &cfg).unwrap();
    let e = &hist.epochs[0].train;
    assert_eq!((e.l_head2, e.l_ensemble), (0.0, 0.0));
    assert_eq!(e.l_total, e.l_head1);
}

proptest! {
    #[test]
    fn loss_composition_sums_exactly(y1 in -50.0f64..50.0, y2 in -50.0f64..50.0, label in -20.0f64..20.0) {
        let l = compute_losses(y1, y2, (y1 + y2) / 2.0, label).unwrap();
        prop_assert!(l.l_head1 >= 0.0 && l.l_head2 >= 0.0 && l.l_ensemble >= 0.0);
        prop_assert!((l.l_total - (l.l_head1 + l.l_head2 + l.l_ensemble)).abs() <= 1e-12 * l.l_total.max(1.0));
        prop_assert!(l.l_ensemble <= 0.5 * l.l_head1.max(l.l_head2) + 1e-12);
    }
}
