use lca_core::experiment::median;
use lca_core::gaussian::{ClassGaussian, GaussianBank};
use lca_core::lca::{align_classifiers, lca_value, HeadSelector, LcaConfig};
use lca_core::nn::SgdConfig;
use lca_core::pipeline::ProgressiveClassifier;
use lca_core::RngStream;
use ndarray::{Array1, Array2};

fn bank(classes: u32, dim: usize, seed: u64) -> GaussianBank<f64> {
    let mut rng = RngStream::new(seed, 1);
    let mut bank = GaussianBank::new(dim);
    for c in 0..classes {
        let mean = Array1::from_shape_fn(dim, |_| 1.5 * rng.normal());
        let a = Array2::from_shape_fn((dim, dim), |_| rng.normal());
        let mut cov = a.dot(&a.t()) / dim as f64;
        for i in 0..dim {
            cov[[i, i]] += 0.3;
        }
        bank.insert(ClassGaussian::from_moments(c, mean, cov, 50).unwrap())
            .unwrap();
    }
    bank
}

/// Two heads over classes `0..split` and `split..classes`.
fn classifier(classes: u32, split: u32, dim: usize, seed: u64) -> ProgressiveClassifier<f64> {
    let mut rng = RngStream::new(seed, 2);
    let mut clf = ProgressiveClassifier::new();
    for ids in [(0..split).collect::<Vec<_>>(), (split..classes).collect()] {
        let mut head =
            ProgressiveClassifier::<f64>::init_head(dim, &[], ids.len(), &mut rng).unwrap();
        for v in head.params.values_mut() {
            *v = 0.3 * rng.normal();
        }
        clf.push_head(head, &ids).unwrap();
    }
    clf
}

fn small_cfg(lambda: f64) -> LcaConfig {
    LcaConfig {
        lambda,
        samples_per_class: 64,
        epochs: 5,
        batch_size: 32,
        ..LcaConfig::default()
    }
}

fn head_bits(clf: &ProgressiveClassifier<f64>, i: usize) -> Vec<u64> {
    clf.heads()[i]
        .params
        .values()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

#[test]
fn zero_epochs_is_a_no_op() {
    let b = bank(5, 4, 1);
    let mut clf = classifier(5, 2, 4, 1);
    let before = clf.clone();
    let cfg = LcaConfig {
        epochs: 0,
        ..small_cfg(0.1)
    };
    let log = align_classifiers(
        &mut clf,
        &b,
        &cfg,
        SgdConfig::default(),
        &mut RngStream::new(0, 0),
    )
    .unwrap();
    assert!(log.is_empty());
    assert_eq!(clf, before);
}

#[test]
fn unselected_heads_stay_bit_exact() {
    let b = bank(6, 5, 2);
    let mut clf = classifier(6, 3, 5, 2);
    let before = clf.clone();
    let cfg = LcaConfig {
        heads: HeadSelector::Explicit(vec![1]),
        ..small_cfg(0.1)
    };
    align_classifiers(
        &mut clf,
        &b,
        &cfg,
        SgdConfig::default(),
        &mut RngStream::new(0, 0),
    )
    .unwrap();
    assert_eq!(head_bits(&clf, 0), head_bits(&before, 0));
    assert_ne!(head_bits(&clf, 1), head_bits(&before, 1));

    let mut recent = before.clone();
    let cfg = LcaConfig {
        heads: HeadSelector::Recent(1),
        ..small_cfg(0.1)
    };
    align_classifiers(
        &mut recent,
        &b,
        &cfg,
        SgdConfig::default(),
        &mut RngStream::new(0, 0),
    )
    .unwrap();
    assert_eq!(head_bits(&recent, 0), head_bits(&before, 0));
    assert_eq!(head_bits(&recent, 1), head_bits(&clf, 1));
}

#[test]
fn bank_and_classifier_must_cover_the_same_classes() {
    let b = bank(4, 3, 3);
    let mut clf = classifier(6, 3, 3, 3);
    let e = align_classifiers(
        &mut clf,
        &b,
        &small_cfg(0.1),
        SgdConfig::default(),
        &mut RngStream::new(0, 0),
    )
    .unwrap_err();
    assert_eq!(e.kind(), "state");
}

#[test]
fn alignment_is_deterministic_per_stream() {
    let b = bank(5, 4, 4);
    let run = |stream| {
        let mut clf = classifier(5, 2, 4, 4);
        align_classifiers(
            &mut clf,
            &b,
            &small_cfg(1.0),
            SgdConfig::default(),
            &mut RngStream::new(9, stream),
        )
        .unwrap();
        clf
    };
    assert_eq!(run(0), run(0));
    assert_ne!(run(0), run(1));
}

#[test]
fn alignment_lowers_the_replay_loss() {
    let b = bank(6, 6, 5);
    let mut clf = classifier(6, 3, 6, 5);
    let (x, y) = b
        .sample_alignment_set(200, &mut RngStream::new(5, 77))
        .unwrap();
    let before = lca_value(&clf, x.view(), &y, 0.1).unwrap().total;
    align_classifiers(
        &mut clf,
        &b,
        &small_cfg(0.1),
        SgdConfig::default(),
        &mut RngStream::new(5, 0),
    )
    .unwrap();
    let after = lca_value(&clf, x.view(), &y, 0.1).unwrap().total;
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn dispersion_penalty_reduces_dispersion() {
    let mut ratios = Vec::new();
    for seed in 0..5u64 {
        let b = bank(8, 6, 100 + seed);
        let (x, y) = b
            .sample_alignment_set(400, &mut RngStream::new(seed, 99))
            .unwrap();
        let mut disp = Vec::new();
        for lambda in [0.0, 1.0] {
            let mut clf = classifier(8, 4, 6, 100 + seed);
            align_classifiers(
                &mut clf,
                &b,
                &small_cfg(lambda),
                SgdConfig::default(),
                &mut RngStream::new(seed, 0),
            )
            .unwrap();
            disp.push(
                lca_value(&clf, x.view(), &y, 0.0)
                    .unwrap()
                    .dispersion_term(),
            );
        }
        ratios.push(disp[1] - disp[0]);
    }
    assert!(
        median(&ratios) <= 0.0,
        "dispersion(λ=1) - dispersion(λ=0) per seed: {ratios:?}"
    );
}
