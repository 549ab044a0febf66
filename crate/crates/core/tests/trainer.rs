use approx::assert_abs_diff_eq;
use dir_learn_core::autograd::{BatchNormMode, Tape};
use dir_learn_core::config::{TrainConfig, Variant};
use dir_learn_core::data::{Batch, MultiDomainDataset};
use dir_learn_core::losses::LossName;
use dir_learn_core::model::{Component, ModelBundle};
use dir_learn_core::params::ParamId;
use dir_learn_core::trainer::{phase1_step, phase2_step, run_ablation, run_epoch, train, AblationTable, TrainState};
use dir_learn_core::{Error, Tensor};

fn smoke(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        ..TrainConfig::profile("synthetic-smoke").unwrap()
    }
}

fn data(cfg: &TrainConfig) -> (MultiDomainDataset, MultiDomainDataset) {
    let d = cfg.data.build(None).unwrap();
    (d.train, d.test)
}

fn fixed_batch(ds: &MultiDomainDataset, n: usize) -> Batch {
    let idx: Vec<usize> = (0..n).map(|i| i * ds.len() / n).collect();
    ds.batch(&idx).unwrap()
}

fn snapshot(bundle: &ModelBundle, ids: &[ParamId]) -> Vec<Vec<u64>> {
    ids.iter()
        .map(|&id| bundle.store.get(id).data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

fn buffers(bundle: &ModelBundle) -> Vec<ParamId> {
    let trainable: Vec<ParamId> = bundle.store.trainable_ids().collect();
    bundle.store.ids().filter(|id| !trainable.contains(id)).collect()
}

#[test]
fn partition_discipline_is_bitwise() {
    for v in Variant::ALL {
        let cfg = smoke(v);
        let (train_set, _) = data(&cfg);
        let batch = fixed_batch(&train_set, 32);
        let mut state = TrainState::new(&cfg).unwrap();
        let enc = state.bundle.encoder_side_params();
        let cls = state.bundle.classifier_side_params();
        let bufs = buffers(&state.bundle);

        let (cls0, enc0) = (snapshot(&state.bundle, &cls), snapshot(&state.bundle, &enc));
        phase1_step(&mut state, &cfg, &batch, 1e-3).unwrap();
        assert_eq!(snapshot(&state.bundle, &cls), cls0, "{v:?}: phase 1 moved C_S/C_V");
        if v != Variant::Baseline {
            assert_ne!(snapshot(&state.bundle, &enc), enc0, "{v:?}: phase 1 left the encoders alone");
        }

        let (enc1, bufs1) = (snapshot(&state.bundle, &enc), snapshot(&state.bundle, &bufs));
        phase2_step(&mut state, &cfg, &batch, 1e-3).unwrap();
        assert_eq!(snapshot(&state.bundle, &enc), enc1, "{v:?}: phase 2 moved encoder-side parameters");
        assert_eq!(snapshot(&state.bundle, &bufs), bufs1, "{v:?}: phase 2 moved running statistics");
        assert_ne!(snapshot(&state.bundle, &cls), cls0, "{v:?}: phase 2 left the classifiers alone");
    }
}

#[test]
fn zero_lambdas_reduce_phase_one_to_plain_cross_entropy() {
    let cfg = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
        ..smoke(Variant::Dir)
    };
    let (train_set, _) = data(&cfg);
    let batch = fixed_batch(&train_set, 32);
    let mut state = TrainState::new(&cfg).unwrap();
    let cls = state.bundle.classifier_side_params();
    let before = snapshot(&state.bundle, &cls);
    let r = phase1_step(&mut state, &cfg, &batch, 1e-2).unwrap();
    assert_eq!(snapshot(&state.bundle, &cls), before);
    let value = |n: LossName| r.terms.iter().find(|t| t.name == n).unwrap().value;
    assert_abs_diff_eq!(r.total, value(LossName::IdS) + value(LossName::DomV), epsilon = 1e-12);
}

#[test]
fn phase_one_descends_on_a_fixed_batch() {
    for v in [Variant::Baseline, Variant::Mddan, Variant::Dir] {
        let cfg = smoke(v);
        let (train_set, _) = data(&cfg);
        let batch = fixed_batch(&train_set, 32);
        let mut state = TrainState::new(&cfg).unwrap();
        let totals: Vec<f64> = (0..10).map(|_| phase1_step(&mut state, &cfg, &batch, 1e-3).unwrap().total).collect();
        assert!(totals[9] < totals[0], "{v:?}: {totals:?}");
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Batch-mean cross-entropy against `(1 - eps) * onehot + eps / C`, by hand.
fn ce(logits: &Tensor, targets: &[usize], eps: f64) -> f64 {
    let c = logits.shape()[1];
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let lp = log_softmax(logits.row(i));
            -(1.0 - eps) * lp[y] - eps / c as f64 * lp.iter().sum::<f64>()
        })
        .sum();
    total / targets.len() as f64
}

#[test]
fn phase_two_is_the_sum_of_four_cross_entropies() {
    let cfg = smoke(Variant::Mddan);
    let (train_set, _) = data(&cfg);
    let batch = fixed_batch(&train_set, 32);
    let mut state = TrainState::new(&cfg).unwrap();
    phase1_step(&mut state, &cfg, &batch, 1e-3).unwrap();

    let b = &state.bundle;
    let mut tape = Tape::no_grad();
    let x = tape.input(batch.pixels.clone());
    let s = b.encode(&mut tape, &b.f_s, x, BatchNormMode::TrainFrozenStats).unwrap();
    let v = b.encode(&mut tape, &b.f_v, x, BatchNormMode::TrainFrozenStats).unwrap();
    let logits = |tape: &mut Tape, head, z| {
        let l = b.classify(tape, head, z).unwrap();
        tape.value(l).clone()
    };
    let id_s = ce(&logits(&mut tape, &b.c_s, s), &batch.ids, cfg.label_smoothing);
    let dom_s = ce(&logits(&mut tape, &b.c_v, s), &batch.domains, 0.0);
    let dom_v = ce(&logits(&mut tape, &b.c_v, v), &batch.domains, 0.0);
    let id_v = ce(&logits(&mut tape, &b.c_s, v), &batch.ids, 0.0);

    let r = phase2_step(&mut state, &cfg, &batch, 1e-3).unwrap();
    let names: Vec<LossName> = r.terms.iter().map(|t| t.name).collect();
    assert_eq!(names, vec![LossName::IdS, LossName::DomS, LossName::DomV, LossName::IdV]);
    assert_abs_diff_eq!(r.total, id_s + dom_s + dom_v + id_v, epsilon = 1e-12);
}

#[test]
fn phase_two_adversary_learns_domains_from_frozen_identity_factors() {
    let cfg = smoke(Variant::Mddan);
    let (train_set, _) = data(&cfg);
    let batch = fixed_batch(&train_set, 48);
    let mut state = TrainState::new(&cfg).unwrap();
    let dom_s = |r: &dir_learn_core::trainer::PhaseReport| r.terms.iter().find(|t| t.name == LossName::DomS).unwrap().value;
    let first = dom_s(&phase2_step(&mut state, &cfg, &batch, 1e-2).unwrap());
    let mut last = first;
    for _ in 0..60 {
        last = dom_s(&phase2_step(&mut state, &cfg, &batch, 1e-2).unwrap());
    }
    assert!(last < first - 0.1, "dom_s {first} -> {last}");
}

#[test]
fn logged_totals_match_weighted_terms_every_step() {
    for v in Variant::ALL {
        let cfg = smoke(v);
        let (train_set, test_set) = data(&cfg);
        let mut state = TrainState::new(&cfg).unwrap();
        let (m, steps) = run_epoch(&mut state, &cfg, &train_set, Some(&test_set)).unwrap();
        assert_eq!(steps.len(), train_set.len() / cfg.batch_size);
        assert_eq!(m.steps, steps.len());
        for st in &steps {
            for rep in [&st.phase1, &st.phase2] {
                let sum: f64 = rep.terms.iter().map(|t| t.weight * t.value).sum();
                assert!((rep.total - sum).abs() <= 1e-10, "{v:?}: {} vs {sum}", rep.total);
            }
        }
        assert!(m.test_accuracy.is_some());
    }
}

#[test]
fn variant_terms() {
    let names = |v: Variant| {
        let cfg = smoke(v);
        let (train_set, _) = data(&cfg);
        let mut state = TrainState::new(&cfg).unwrap();
        let r = phase1_step(&mut state, &cfg, &fixed_batch(&train_set, 32), 1e-3).unwrap();
        r.terms.iter().map(|t| t.name).collect::<Vec<_>>()
    };
    use LossName::*;
    assert_eq!(names(Variant::Baseline), vec![IdS]);
    assert_eq!(names(Variant::DualDann), vec![IdS, IndisDom, DomV, IndisId]);
    assert_eq!(names(Variant::Mddan), vec![IdS, IndisDom, DomV, IndisId]);
    assert_eq!(names(Variant::Dir), vec![IdS, IndisDom, DomV, IndisId, Invar, InvarV]);

    let cfg = smoke(Variant::Baseline);
    let mut state = TrainState::new(&cfg).unwrap();
    let (train_set, _) = data(&cfg);
    let fv = state.bundle.component_params(Component::FV);
    let before = snapshot(&state.bundle, &fv);
    phase1_step(&mut state, &cfg, &fixed_batch(&train_set, 32), 1e-3).unwrap();
    assert_eq!(snapshot(&state.bundle, &fv), before, "baseline trains f_V");
}

#[test]
fn poisoned_state_is_reported() {
    let cfg = smoke(Variant::Mddan);
    let (train_set, _) = data(&cfg);
    let batch = fixed_batch(&train_set, 8);
    let mut state = TrainState::new(&cfg).unwrap();
    let w = state.bundle.c_s.weight;
    state.bundle.store.get_mut(w).data_mut()[0] = f64::NAN;
    match phase1_step(&mut state, &cfg, &batch, 1e-3) {
        Err(Error::PoisonedState { term }) => assert_eq!(term, "id_s"),
        other => panic!("expected poisoned state, got {other:?}"),
    }

    let mut state = TrainState::new(&cfg).unwrap();
    let mut bad = batch.clone();
    bad.pixels.data_mut()[0] = f64::NAN;
    let all: Vec<ParamId> = state.bundle.store.ids().collect();
    let before = snapshot(&state.bundle, &all);
    assert!(matches!(phase1_step(&mut state, &cfg, &bad, 1e-3), Err(Error::PoisonedState { .. })));
    assert_eq!(snapshot(&state.bundle, &all), before);
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        epochs: 2,
        seed: 11,
        ..smoke(Variant::Dir)
    };
    let (train_set, test_set) = data(&cfg);
    let a = train(&cfg, &train_set, Some(&test_set)).unwrap();
    let b = train(&cfg, &train_set, Some(&test_set)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(serde_json::to_string(&a.log).unwrap(), serde_json::to_string(&b.log).unwrap());
    assert!(matches!(
        train(&cfg, &train_set.subset(&[]), None),
        Err(Error::DegenerateBatch { .. })
    ));
}

#[test]
fn mddan_pushes_domain_posterior_entropy_up() {
    let cfg = TrainConfig {
        variant: Variant::Mddan,
        ..TrainConfig::profile("synthetic-sweep").unwrap()
    };
    let (train_set, _) = data(&cfg);
    let state = train(&cfg, &train_set, None).unwrap();
    let h: Vec<f64> = state.log.iter().map(|m| m.entropy_d_given_s).collect();
    let first = h[..10].iter().sum::<f64>() / 10.0;
    let last = h[h.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(last >= first, "H(D|S) trend {first} -> {last}");
}

#[test]
fn ablation_table_structure_and_arithmetic() {
    let t = AblationTable::from_accuracies(
        vec![0, 1],
        vec![
            (Variant::Baseline, vec![0.40, 0.50]),
            (Variant::DualDann, vec![0.50, 0.52]),
            (Variant::Mddan, vec![0.55, 0.61]),
            (Variant::Dir, vec![0.60, 0.64]),
        ],
    );
    assert_eq!(t.rows.len(), 4);
    let base = t.row(Variant::Baseline).unwrap();
    assert_eq!(base.mean, (0.40 + 0.50) / 2.0);
    assert_eq!(base.improvement, 0.0);
    let dir = t.row(Variant::Dir).unwrap();
    assert_eq!(dir.improvement, dir.mean - base.mean);
    assert_abs_diff_eq!(dir.std, ((0.02f64.powi(2) * 2.0) / 1.0).sqrt(), epsilon = 1e-15);
    let text = t.to_text();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().next().unwrap().contains("improvement"));

    let cfg = TrainConfig { epochs: 1, ..smoke(Variant::Dir) };
    let (train_set, test_set) = data(&cfg);
    let mut calls = Vec::new();
    let table = run_ablation(&cfg, &train_set, &test_set, &[3], |v, s, a| calls.push((v, s, a))).unwrap();
    let variants: Vec<Variant> = table.rows.iter().map(|r| r.variant).collect();
    assert_eq!(variants, Variant::ALL.to_vec());
    assert_eq!(calls.len(), 4);
    assert!(table.rows.iter().all(|r| (0.0..=1.0).contains(&r.mean)));
    assert!(matches!(run_ablation(&cfg, &train_set, &test_set, &[], |_, _, _| {}), Err(Error::Config { .. })));
}
