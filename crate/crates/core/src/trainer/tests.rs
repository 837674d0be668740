use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::autodiff::Tensor;
use crate::synthgen::{generate_dataset, sample_ufda_subset, Domain, GenConfig, Split};

fn step_once(w: &mut Tensor, g: f64, opt: &mut OptState) {
    let grads = BTreeMap::from([("w".to_owned(), Tensor::full(w.shape(), g))]);
    sgd_step(vec![("w".to_owned(), w)], &grads, opt, None).unwrap();
}

#[test]
fn sgd_plain_step() {
    let mut w = Tensor::scalar(1.0);
    let mut opt = OptState::new(0.1, 0.0, 0.0);
    step_once(&mut w, 0.1, &mut opt);
    assert!((w.item() - 0.99).abs() < 1e-15);
    assert_eq!(opt.iteration, 1);
}

#[test]
fn sgd_zero_gradient_keeps_parameters() {
    let mut w = Tensor::vector(vec![0.3, -2.0, 5.0]);
    let before = w.clone();
    let mut opt = OptState::new(0.1, 0.9, 0.0);
    for _ in 0..3 {
        step_once(&mut w, 0.0, &mut opt);
    }
    assert_eq!(w, before);
}

#[test]
fn sgd_momentum_recurrence() {
    let (lr, g) = (0.05, 0.4);
    let mut w = Tensor::scalar(2.0);
    let mut opt = OptState::new(lr, 0.9, 0.0);
    step_once(&mut w, g, &mut opt);
    let after_first = w.item();
    step_once(&mut w, g, &mut opt);
    let second = after_first - w.item();
    assert!((second - lr * (0.9 * g + g)).abs() < 1e-15);
}

#[test]
fn sgd_weight_decay_enters_velocity() {
    let mut w = Tensor::scalar(2.0);
    let mut opt = OptState::new(0.1, 0.9, 0.5);
    step_once(&mut w, 0.0, &mut opt);
    assert!((w.item() - (2.0 - 0.1 * 1.0)).abs() < 1e-15);
}

#[test]
fn sgd_rejects_non_finite_gradient_by_name() {
    let mut a = Tensor::scalar(1.0);
    let mut b = Tensor::scalar(1.0);
    let grads = BTreeMap::from([
        ("a".to_owned(), Tensor::scalar(0.5)),
        ("b".to_owned(), Tensor::scalar(f64::NAN)),
    ]);
    let mut opt = OptState::new(0.1, 0.9, 0.0);
    let err = sgd_step(
        vec![("a".into(), &mut a), ("b".into(), &mut b)],
        &grads,
        &mut opt,
        None,
    )
    .unwrap_err();
    assert!(
        matches!(&err, crate::Error::NonFiniteGradient(n) if n == "b"),
        "{err}"
    );
    assert_eq!(a.item(), 1.0, "no parameter moves on error");
    assert_eq!(opt.iteration, 0);
}

#[test]
fn adapt_rate_after_300_is_a_tenth() {
    let s = TrainSchedule::default();
    let base = s.adapt.lr;
    assert_eq!(s.adapt.lr_at(299), base);
    assert_eq!(s.adapt.lr_at(300), base * 0.1);
    assert_eq!(s.adapt.lr_at(599), base * 0.1);
    assert_eq!(s.pretrain.lr_at(1999), 0.01);
    assert_eq!(s.pretrain.lr_at(2000), 0.01 * 0.1);
    assert_eq!(s.pretrain.lr_at(2500), 0.01 * 0.1 * 0.1);

    let mut opt = OptState::for_phase(&s.adapt, &s);
    let mut w = Tensor::scalar(0.0);
    for _ in 0..300 {
        let grads = BTreeMap::new();
        sgd_step(vec![("w".into(), &mut w)], &grads, &mut opt, Some(&s.adapt)).unwrap();
    }
    assert_eq!(opt.lr, base * 0.1);
}

#[test]
fn schedule_validation_lists_fields() {
    let mut s = TrainSchedule::default();
    s.adapt.decay_at = vec![600];
    s.pretrain_batch = 0;
    let msg = s.validate().unwrap_err().to_string();
    assert!(msg.contains("schedule.adapt.decay_at"), "{msg}");
    assert!(msg.contains("schedule.pretrain_batch"), "{msg}");
    s = TrainSchedule::default();
    s.pretrain.iterations = 0;
    s.validate().unwrap();
}

#[test]
fn plateau_examples() {
    assert!(plateau_stop(&[2.0; 100], 50, 0.01));
    assert!(!plateau_stop(&[2.0; 99], 50, 0.01));
    let mut h = vec![1.0; 50];
    h.extend([0.9; 50]);
    assert!(!plateau_stop(&h, 50, 0.01));
    let mut h = vec![1.0; 50];
    h.extend([0.995; 50]);
    assert!(plateau_stop(&h, 50, 0.01));
}

proptest! {
    #[test]
    fn plateau_ignores_older_history(prefix in prop::collection::vec(-10.0f64..10.0, 0..40), level in 0.1f64..5.0) {
        let mut h = prefix;
        h.extend(std::iter::repeat_n(level, 100));
        prop_assert!(plateau_stop(&h, 50, 0.01));
    }

    #[test]
    fn plateau_needs_two_windows(len in 0usize..100) {
        prop_assert!(!plateau_stop(&vec![1.0; len], 50, 0.01));
    }
}

#[test]
fn variants_parse_and_reject_unknown() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert_eq!("m+wc".parse::<Variant>().unwrap(), Variant::MWC);
    let err = "MW".parse::<Variant>().unwrap_err();
    assert!(matches!(err, crate::Error::UnknownVariant(_)));
    assert!(Variant::MWC.uses_marginal() && !Variant::WC.uses_marginal());
    assert_eq!(Variant::C.conditional(), ConditionalMode::Uniform);
    assert_eq!(Variant::M.conditional(), ConditionalMode::Off);
}

fn small_config() -> GenConfig {
    GenConfig {
        seed: 11,
        ..GenConfig::default()
    }
}

fn small_sets() -> (crate::synthgen::Dataset, crate::synthgen::Dataset) {
    let cfg = small_config();
    let s = generate_dataset(&cfg, Domain::Source, Split::Train, 40, 1).unwrap();
    let t = generate_dataset(&cfg, Domain::Target, Split::Train, 30, 2).unwrap();
    (s, t)
}

#[test]
fn batches_are_deterministic_and_sized() {
    let (s, t) = small_sets();
    let a: Vec<_> = make_batches(&s, &t, BatchSpec::default(), 5)
        .unwrap()
        .take(12)
        .collect();
    let b: Vec<_> = make_batches(&s, &t, BatchSpec::default(), 5)
        .unwrap()
        .take(12)
        .collect();
    assert_eq!(a, b);
    assert!(a
        .iter()
        .all(|m| m.source.len() == 16 && m.target.len() == 16));
    let c: Vec<_> = make_batches(&s, &t, BatchSpec::default(), 6)
        .unwrap()
        .take(12)
        .collect();
    assert_ne!(a, c);
}

#[test]
fn epochs_cover_every_index_once() {
    let mut stream = EpochStream::new(7, 3, "t", "x").unwrap();
    for epoch in 0..4 {
        let mut seen = stream.take(7);
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>(), "epoch {epoch}");
    }
    assert_eq!(stream.epoch(), 3);
}

#[test]
fn small_subsets_are_cycled() {
    let (s, t) = small_sets();
    let sub = sample_ufda_subset(&t, 1, 4).unwrap();
    let n = sub.len();
    let batch = make_batches(&s, &sub, BatchSpec::default(), 1)
        .unwrap()
        .next()
        .unwrap();
    assert_eq!(batch.target.len(), 16);
    for i in 0..n {
        assert!(batch.target.iter().filter(|&&j| j == i).count() >= 16 / n);
    }
}

#[test]
fn empty_target_is_an_error() {
    let (s, t) = small_sets();
    let empty =
        crate::synthgen::Dataset::new(t.config.clone(), Domain::Target, Split::Train, Vec::new());
    assert!(matches!(
        make_batches(&s, &empty, BatchSpec::default(), 0),
        Err(crate::Error::EmptyDataset(_))
    ));
}

fn short_schedule(pre: usize, adapt: usize) -> TrainSchedule {
    let mut s = TrainSchedule::default();
    s.pretrain.iterations = pre;
    s.pretrain.decay_at = vec![pre / 2];
    s.pretrain_batch = 8;
    s.adapt.iterations = adapt;
    s.adapt.decay_at = vec![adapt / 2];
    s.source_batch = 4;
    s.target_batch = 4;
    s
}

#[test]
fn zero_iterations_give_seeded_initialization() {
    let (s, _) = small_sets();
    let sched = short_schedule(0, 0);
    let a = pretrain(&sched, &s, 9, "cfg").unwrap();
    let init = crate::detector::DetectorParams::init(
        &mut crate::seed::rng_for(9, "init/detector", 0),
        16,
        3,
    );
    assert_eq!(a.checkpoint.detector, init);
    assert!(a.log.is_empty());
}

#[test]
fn pretraining_is_deterministic() {
    let (s, _) = small_sets();
    let sched = short_schedule(6, 0);
    let a = pretrain(&sched, &s, 9, "cfg").unwrap();
    let b = pretrain(&sched, &s, 9, "cfg").unwrap();
    assert_eq!(a.checkpoint.digest(), b.checkpoint.digest());
    let c = pretrain(&sched, &s, 10, "cfg").unwrap();
    assert_ne!(a.checkpoint.digest(), c.checkpoint.digest());
    assert_eq!(a.log.len(), 6);
    assert_eq!(a.log[3].lr, 0.01 * 0.1);
}

#[test]
fn divergence_aborts() {
    let (s, _) = small_sets();
    let mut sched = short_schedule(40, 0);
    sched.pretrain.lr = 1e6;
    sched.pretrain.decay_at.clear();
    let err = pretrain(&sched, &s, 1, "cfg").unwrap_err();
    assert!(
        matches!(
            err,
            crate::Error::Diverged { .. }
                | crate::Error::NonFiniteGradient(_)
                | crate::Error::NonFinite { .. }
        ),
        "{err}"
    );
}

#[test]
fn adaptation_requires_pretrained_phase() {
    let (s, t) = small_sets();
    let sched = short_schedule(2, 2);
    let pre = pretrain(&sched, &s, 1, "cfg").unwrap().checkpoint;
    let adapted = joint_adapt(&pre, &s, &t, Variant::M, &sched, 1)
        .unwrap()
        .checkpoint;
    assert!(matches!(
        joint_adapt(&adapted, &s, &t, Variant::M, &sched, 1),
        Err(crate::Error::Phase { .. })
    ));
}

#[test]
fn zero_reversal_matches_source_fine_tuning() {
    let (s, t) = small_sets();
    let mut sched = short_schedule(4, 6);
    sched.lambda = 0.0;
    let pre = pretrain(&sched, &s, 2, "cfg").unwrap().checkpoint;
    let reference = joint_adapt_with(
        &pre,
        &s,
        &t,
        Variant::MWC,
        &sched,
        3,
        AdaptOptions {
            source_only: true,
            plateau: false,
        },
    )
    .unwrap();
    for v in Variant::ALL {
        let run = joint_adapt_with(
            &pre,
            &s,
            &t,
            v,
            &sched,
            3,
            AdaptOptions {
                source_only: false,
                plateau: false,
            },
        )
        .unwrap();
        assert_eq!(
            run.checkpoint.detector, reference.checkpoint.detector,
            "variant {v}"
        );
        assert_ne!(run.checkpoint.detector, pre.detector);
    }
}

#[test]
fn adaptation_never_reads_target_labels() {
    let (s, t) = small_sets();
    let sched = short_schedule(2, 5);
    let pre = pretrain(&sched, &s, 4, "cfg").unwrap().checkpoint;
    let sub = sample_ufda_subset(&t, 2, 1).unwrap();
    let before = t.label_reads();
    for v in Variant::ALL {
        let r = joint_adapt(&pre, &s, &sub, v, &sched, 4).unwrap();
        assert_eq!(r.label_reads, 0);
        let r = joint_adapt(&pre, &s, &t, v, &sched, 4).unwrap();
        assert_eq!(r.label_reads, 0);
    }
    assert_eq!(t.label_reads(), before);
}

#[test]
fn adaptation_is_deterministic_and_logs_weights() {
    let (s, t) = small_sets();
    let sched = short_schedule(2, 5);
    let pre = pretrain(&sched, &s, 4, "cfg").unwrap().checkpoint;
    let a = joint_adapt(&pre, &s, &t, Variant::MWC, &sched, 8).unwrap();
    let b = joint_adapt(&pre, &s, &t, Variant::MWC, &sched, 8).unwrap();
    assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
    assert_eq!(a.log, b.log);
    assert_eq!(a.weight_trajectory.len(), 5);
    assert!(a.log.iter().all(|r| r.l_m > 0.0 && r.weights.len() == 3));
    let csv = String::from_utf8(loss_curve_csv(&a.log, 3).unwrap()).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "iteration,L_det,L_m,C,s_1,s_2,s_3,lr"
    );
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn plateau_stops_early() {
    let (s, t) = small_sets();
    let mut sched = short_schedule(2, 60);
    sched.adapt.lr = 1e-12;
    sched.plateau.window = 5;
    sched.plateau.min_iteration = 0;
    sched.plateau.rel_tol = 0.5;
    let pre = pretrain(&sched, &s, 4, "cfg").unwrap().checkpoint;
    let r = joint_adapt(&pre, &s, &t, Variant::M, &sched, 1).unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.iterations_run, 10);
}

#[test]
fn checkpoint_round_trips_byte_for_byte() {
    let (s, t) = small_sets();
    let sched = short_schedule(3, 3);
    let pre = pretrain(&sched, &s, 4, "abc").unwrap().checkpoint;
    let adapted = joint_adapt(&pre, &s, &t, Variant::MWC, &sched, 4)
        .unwrap()
        .checkpoint;
    for ck in [&pre, &adapted] {
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(&back, ck);
        assert_eq!(back.encode(), bytes);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    adapted.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().encode(), adapted.encode());
}

#[test]
fn checkpoint_decode_rejects_damage() {
    let (s, _) = small_sets();
    let ck = pretrain(&short_schedule(0, 0), &s, 4, "abc")
        .unwrap()
        .checkpoint;
    let bytes = ck.encode();
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::decode(&bad).is_err());
    let mut long = bytes;
    long.push(0);
    assert!(Checkpoint::decode(&long).is_err());
}

#[test]
fn stripping_keeps_detector() {
    let (s, t) = small_sets();
    let sched = short_schedule(2, 2);
    let pre = pretrain(&sched, &s, 4, "abc").unwrap().checkpoint;
    let adapted = joint_adapt(&pre, &s, &t, Variant::WC, &sched, 4)
        .unwrap()
        .checkpoint;
    let stripped = adapted.strip_adaptation();
    assert!(stripped.adaptation.is_none());
    assert_eq!(stripped.detector, adapted.detector);
    assert!(stripped.encode().len() < adapted.encode().len());
}
