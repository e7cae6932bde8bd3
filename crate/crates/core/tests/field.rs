mod common;

use tracklabel::association::import_tracks;
use tracklabel::consensus::{propagate, run_consensus};
use tracklabel::eval::{consensus_accuracy, short_query_union};
use tracklabel::field::{long_only_baseline, train, PositiveMode, Selection, TrainConfig};
use tracklabel::synth::{generate_noisy, generate_scene, NoiseConfig, SynthConfig};
use tracklabel::Error;

use common::{disk, single_gaussian_problem, tiny_problem};

#[test]
fn zero_steps_leave_the_field_unchanged() {
    let (field, set) = tiny_problem(1);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (out, curve) = train(&field, &set, &cfg).unwrap();
    assert_eq!(out, field);
    assert!(curve.is_empty());
}

#[test]
fn single_gaussian_seg_loss_decreases() {
    let (field, set) = single_gaussian_problem(32, 3);
    let cfg = TrainConfig {
        lambda: 0.0,
        epochs: 200,
        ..TrainConfig::default()
    };
    let (_, curve) = train(&field, &set, &cfg).unwrap();
    assert_eq!(curve.len(), 200);
    for w in curve[..50].windows(2) {
        assert!(w[1].seg < w[0].seg, "step {}: {} -> {}", w[1].iter, w[0].seg, w[1].seg);
    }
    assert!(curve[199].seg < curve[0].seg);
}

#[test]
fn training_is_bit_reproducible() {
    let (field, set) = tiny_problem(7);
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let (a, ca) = train(&field, &set, &cfg).unwrap();
    let (b, cb) = train(&field, &set, &cfg).unwrap();
    assert_eq!(a, b);
    let bits = |c: &[tracklabel::field::LossPoint]| -> Vec<u64> { c.iter().map(|p| p.total.to_bits()).collect() };
    assert_eq!(bits(&ca), bits(&cb));
}

#[test]
fn rendered_selection_also_trains() {
    let (field, set) = tiny_problem(2);
    let cfg = TrainConfig {
        epochs: 2,
        selection: Selection::Rendered,
        ..TrainConfig::default()
    };
    let (_, curve) = train(&field, &set, &cfg).unwrap();
    assert_eq!(curve.len(), 8);
}

#[test]
fn long_only_needs_referrals() {
    let (field, mut set) = tiny_problem(4);
    set.tracks[1].referrals.clear();
    assert!(matches!(
        long_only_baseline(&field, &set, &TrainConfig::default()),
        Err(Error::EmptyPositives)
    ));
    // hybrid still has the category
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    train(&field, &set, &cfg).unwrap();
}

#[test]
fn long_only_differs_only_by_positives() {
    let (field, set) = tiny_problem(5);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let explicit = TrainConfig {
        positives: PositiveMode::ReferralsOnly,
        ..cfg.clone()
    };
    let (a, ca) = long_only_baseline(&field, &set, &cfg).unwrap();
    let (b, cb) = train(&field, &set, &explicit).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let (h, _) = train(&field, &set, &cfg).unwrap();
    assert_ne!(h, a);
}

#[test]
fn short_query_union_fixtures() {
    let cfg = SynthConfig {
        n_views: 3,
        n_objects: 1,
        seed: 8,
        ..SynthConfig::default()
    };
    let (_, mut gt) = generate_scene(&cfg).unwrap();
    let cat = gt.objects[0].identity.clone();
    let own = gt.objects[0].masks[0].clone().unwrap();
    assert_eq!(short_query_union(&gt, &cat, 0).unwrap(), own);
    assert!(short_query_union(&gt, "zebra", 0).is_err());

    // a second instance of the same category
    let mut twin = gt.objects[0].clone();
    twin.id = 1;
    let (h, w) = (gt.h, gt.w);
    let far = disk(h, w, 4.0, 4.0, 3.0);
    twin.masks = vec![Some(far.clone()); 3];
    gt.objects.push(twin.clone());
    let disjoint = own.intersection_area(&far).unwrap() == 0;
    let union = short_query_union(&gt, &cat, 0).unwrap();
    if disjoint {
        assert_eq!(union.area(), own.area() + far.area());
    }
    // overlapping copy
    gt.objects[1].masks = vec![Some(own.clone()); 3];
    assert!(short_query_union(&gt, &cat, 0).unwrap().area() < 2 * own.area());
}

#[test]
fn accuracy_baselines() {
    // zero noise
    let cfg = SynthConfig {
        n_views: 6,
        n_objects: 4,
        seed: 2,
        ..SynthConfig::default()
    };
    let (ds, gt) = generate_noisy(&cfg).unwrap();
    let tracks = import_tracks(&ds).unwrap();
    let (clustering, records) = run_consensus(&ds, &tracks, 0.85).unwrap();
    let acc = consensus_accuracy(&propagate(&ds, &records), &clustering, &gt).unwrap();
    assert_eq!((acc.per_view_acc, acc.tscm_acc), (1.0, 1.0));

    // wrong-label rate 1 - 1/G makes every label uniform over the G groups
    let groups = cfg.vocabulary.len() as f64;
    let noisy = SynthConfig {
        n_views: 40,
        n_objects: 8,
        noise: NoiseConfig {
            wrong_label_rate: 1.0 - 1.0 / groups,
            ..NoiseConfig::default()
        },
        ..cfg.clone()
    };
    let (ds, gt) = generate_noisy(&noisy).unwrap();
    let tracks = import_tracks(&ds).unwrap();
    let (clustering, records) = run_consensus(&ds, &tracks, 0.85).unwrap();
    let acc = consensus_accuracy(&propagate(&ds, &records), &clustering, &gt).unwrap();
    assert!((acc.per_view_acc - 1.0 / groups).abs() < 0.05, "{}", acc.per_view_acc);

    // majority-correct trajectories recover fully
    let mild = SynthConfig {
        n_views: 15,
        n_objects: 4,
        noise: NoiseConfig {
            wrong_label_rate: 0.1,
            synonym_rate: 0.3,
            ..NoiseConfig::default()
        },
        ..cfg
    };
    let (ds, gt) = generate_noisy(&mild).unwrap();
    let tracks = import_tracks(&ds).unwrap();
    let (clustering, records) = run_consensus(&ds, &tracks, 0.85).unwrap();
    let acc = consensus_accuracy(&propagate(&ds, &records), &clustering, &gt).unwrap();
    assert!(acc.per_view_acc < 1.0);
    assert_eq!(acc.tscm_acc, 1.0);
}
