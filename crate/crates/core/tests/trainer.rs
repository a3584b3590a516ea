use std::collections::BTreeMap;

use iterlabel::geometry::{iou, BBox, BoxDelta};
use iterlabel::rng;
use iterlabel::trainer::{
    augment, finite_difference_gradient, generate_anchors, loss_gradient, match_and_sample, total_loss, train_epochs,
    AnchorRole, AnchorSample, AugmentConfig, FeatureProvider, ImageMeta, LinearLogistic, TrainConfig, TrainImage,
};
use proptest::prelude::*;
use rand::Rng;

/// Bias plus a noisy indicator of overlapping any true object of the image,
/// labeled or not.
struct Indicator {
    truths: BTreeMap<String, Vec<BBox>>,
}

impl FeatureProvider for Indicator {
    fn feature_dim(&self) -> usize {
        2
    }

    fn features(&self, image_id: &str, meta: &ImageMeta, anchors: &[BBox]) -> Vec<Vec<f64>> {
        let truths = &self.truths[image_id];
        let mut noise = rng::stream(7, &["noise", image_id]);
        anchors
            .iter()
            .map(|a| {
                let src = meta.to_source(a);
                let hit = truths.iter().any(|t| iou(&src, t) >= 0.5);
                vec![1.0, f64::from(u8::from(hit)) + noise.random_range(-0.1..0.1)]
            })
            .collect()
    }
}

fn square(x: f64, y: f64, side: f64) -> BBox {
    BBox::from_xywh(x, y, side, side).unwrap()
}

/// Four images of 320x320, each with four true objects; `labeled` of them
/// are given to the trainer.
fn toy(labeled: usize) -> (Vec<TrainImage>, Indicator) {
    let mut images = Vec::new();
    let mut truths = BTreeMap::new();
    for i in 0..4 {
        let shift = 8.0 * i as f64;
        let objs = vec![
            square(24.0 + shift, 24.0, 96.0),
            square(184.0, 24.0 + shift, 96.0),
            square(24.0, 184.0 + shift, 96.0),
            square(184.0 + shift, 184.0, 96.0),
        ];
        let id = format!("toy-{i}");
        images.push(TrainImage {
            image_id: id.clone(),
            extent: (320.0, 320.0),
            objects: objs[..labeled].to_vec(),
            background: vec![],
        });
        truths.insert(id, objs);
    }
    (images, Indicator { truths })
}

fn small_batch() -> TrainConfig {
    TrainConfig {
        minibatch_size: 64,
        ..TrainConfig::default()
    }
}

#[test]
fn fully_labeled_toy_separates() {
    let (images, provider) = toy(4);
    let mut model = LinearLogistic::zeros(2);
    let out = train_epochs(&mut model, &images, &provider, &small_batch(), 200, 11).unwrap();
    let p = out.final_positive_mean_p.unwrap();
    assert!(p > 0.9, "positive mean p {p}");
    // epochs resample negatives, so the trend is checked on 40-epoch means
    let avg: Vec<f64> = out
        .trace
        .chunks(40)
        .map(|w| w.iter().map(|l| l.total).sum::<f64>() / w.len() as f64)
        .collect();
    assert!(avg.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{avg:?}");
}

/// Scores objects at about 0.95 and empty anchors at about 0.05, like a
/// model already trained on fully labeled images.
fn confident_model() -> LinearLogistic {
    let mut theta = vec![0.0; LinearLogistic::param_count(2)];
    theta[0] = -3.0;
    theta[1] = 6.0;
    LinearLogistic::from_params(2, theta).unwrap()
}

#[test]
fn ignore_rule_helps_when_half_the_objects_are_unlabeled() {
    let (images, provider) = toy(2);
    let run = |rule: bool| {
        // large enough to take every negative candidate
        let cfg = TrainConfig {
            ignore_rule: rule,
            minibatch_size: 8192,
            ..TrainConfig::default()
        };
        let mut model = confident_model();
        let out = train_epochs(&mut model, &images, &provider, &cfg, 100, 5).unwrap();
        (out.final_positive_mean_p.unwrap(), out)
    };
    let (with_rule, out_on) = run(true);
    let (without, out_off) = run(false);
    assert!(without < with_rule, "rule off {without} vs on {with_rule}");
    assert!(with_rule > 0.9);
    assert!(out_on.ignored_anchors > 0);
    assert_eq!(out_on.ignored_contribution, 0.0);
    assert_eq!(out_off.ignored_anchors, 0);
}

#[test]
fn training_is_deterministic() {
    let (images, provider) = toy(3);
    let run = || {
        let mut model = LinearLogistic::zeros(2);
        let out = train_epochs(&mut model, &images, &provider, &small_batch(), 20, 9).unwrap();
        (model, out.trace)
    };
    assert_eq!(run(), run());
}

#[test]
fn invalid_learning_rate_is_refused() {
    let (images, provider) = toy(2);
    let cfg = TrainConfig {
        learning_rate: -1.0,
        ..small_batch()
    };
    assert!(train_epochs(&mut LinearLogistic::zeros(2), &images, &provider, &cfg, 5, 1).is_err());
}

fn role() -> impl Strategy<Value = AnchorRole> {
    prop_oneof![
        Just(AnchorRole::PositiveI),
        Just(AnchorRole::LabeledBackgroundJ),
        Just(AnchorRole::NegativeK),
        Just(AnchorRole::Ignored),
        Just(AnchorRole::Unused),
    ]
}

prop_compose! {
    fn batch()(
        theta in prop::collection::vec(-2.0f64..2.0, 20),
        rows in prop::collection::vec((prop::array::uniform4(-1.0f64..1.0), role(), prop::array::uniform4(-1.5f64..1.5)), 1..12),
        lambda in 0.0f64..3.0,
    ) -> (LinearLogistic, Vec<Vec<f64>>, Vec<AnchorSample>, TrainConfig) {
        let model = LinearLogistic::from_params(4, theta).unwrap();
        let mut features = Vec::new();
        let mut samples = Vec::new();
        for (a, (x, r, t)) in rows.into_iter().enumerate() {
            features.push(x.to_vec());
            let mut s = AnchorSample::new(a, r, 0.5);
            if r == AnchorRole::PositiveI {
                s.t_star = Some(BoxDelta::from_array(t));
            }
            samples.push(s);
        }
        // keep at least one loss-bearing sample
        samples[0].role = AnchorRole::NegativeK;
        let cfg = TrainConfig { minibatch_size: 16, lambda, ..TrainConfig::default() };
        (model, features, samples, cfg)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ignored_samples_never_touch_loss_or_gradient((model, features, samples, cfg) in batch()) {
        let full = loss_gradient(&model, &features, &samples, &cfg).unwrap();
        let bearing: Vec<AnchorSample> = samples
            .iter()
            .filter(|s| !matches!(s.role, AnchorRole::Ignored | AnchorRole::Unused))
            .cloned()
            .collect();
        let reduced = loss_gradient(&model, &features, &bearing, &cfg).unwrap();
        prop_assert_eq!(&full.grad, &reduced.grad);
        prop_assert_eq!(full.loss, reduced.loss);
        for (s, c) in samples.iter().zip(&full.contributions) {
            if matches!(s.role, AnchorRole::Ignored | AnchorRole::Unused) {
                prop_assert_eq!(*c, 0.0);
            }
        }
    }

    #[test]
    fn total_is_the_sum_of_its_terms((model, features, samples, cfg) in batch()) {
        let l = loss_gradient(&model, &features, &samples, &cfg).unwrap().loss;
        prop_assert!(l.cls_i >= 0.0 && l.cls_j >= 0.0 && l.cls_k >= 0.0 && l.reg >= 0.0);
        prop_assert!((l.total - (l.cls_i + l.cls_j + l.cls_k + l.reg)).abs() <= 1e-12);
        let direct = total_loss(&samples.iter().map(|s| {
            let mut s = s.clone();
            let x = &features[s.anchor];
            let dot = |o: usize| (0..4).map(|k| model_param(&model, o + k) * x[k]).sum::<f64>();
            s.p = 1.0 / (1.0 + (-dot(0)).exp());
            s.t = Some(BoxDelta::from_array([dot(4), dot(8), dot(12), dot(16)]));
            s
        }).collect::<Vec<_>>(), &cfg).unwrap();
        prop_assert!((direct.total - l.total).abs() <= 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences((model, features, samples, cfg) in batch()) {
        let analytic = loss_gradient(&model, &features, &samples, &cfg).unwrap().grad;
        let numeric = finite_difference_gradient(&model, &features, &samples, &cfg, 1e-5).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "analytic {} numeric {}", a, n);
        }
    }

    #[test]
    fn background_boxes_fill_the_batch_before_negatives(
        n_bg in 0usize..6,
        minibatch in 4usize..40,
        seed in any::<u64>(),
    ) {
        let extent = (320.0, 320.0);
        let cfg = TrainConfig { minibatch_size: minibatch, ..TrainConfig::default() };
        let anchors = generate_anchors(extent, &cfg.anchors);
        let objects = [anchors[0]];
        let background: Vec<BBox> = anchors.iter().rev().step_by(37).take(n_bg).copied().collect();
        let scores = vec![0.1; anchors.len()];
        let samples = match_and_sample(&anchors, &objects, &background, &scores, &cfg, seed).unwrap();
        let count = |r: AnchorRole| samples.iter().filter(|s| s.role == r).count();
        // anchor 0 is the object's own best anchor, hence positive
        let candidates = anchors
            .iter()
            .enumerate()
            .filter(|(i, a)| *i != 0
                && background.iter().any(|b| iou(a, b) >= cfg.match_iou_pos)
                && objects.iter().all(|o| iou(a, o) < cfg.match_iou_pos))
            .count();
        let room = minibatch - count(AnchorRole::PositiveI);
        prop_assert_eq!(count(AnchorRole::LabeledBackgroundJ), candidates.min(room));
        if count(AnchorRole::NegativeK) > 0 {
            prop_assert_eq!(count(AnchorRole::LabeledBackgroundJ), candidates);
        }
        prop_assert!(count(AnchorRole::PositiveI) + count(AnchorRole::LabeledBackgroundJ) + count(AnchorRole::NegativeK) <= minibatch);
    }

    #[test]
    fn augmentation_keeps_boxes_valid_and_inside(
        seed in any::<u64>(),
        boxes in prop::collection::vec((0.0f64..300.0, 0.0f64..200.0, 1.0f64..120.0, 1.0f64..120.0), 0..8),
    ) {
        let boxes: Vec<BBox> = boxes
            .into_iter()
            .filter_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).ok()?.clip_to(320.0, 240.0).ok())
            .collect();
        let (meta, out) = augment(&ImageMeta::new(320.0, 240.0), &boxes, &AugmentConfig::default(), seed);
        for (i, b) in out {
            prop_assert!(i < boxes.len());
            prop_assert!(b.x_min() >= 0.0 && b.y_min() >= 0.0);
            prop_assert!(b.x_max() <= meta.width + 1e-9 && b.y_max() <= meta.height + 1e-9);
            prop_assert!(b.width() > 0.0 && b.height() > 0.0);
        }
    }
}

fn model_param(model: &LinearLogistic, i: usize) -> f64 {
    use iterlabel::trainer::ScoringModel;
    model.params()[i]
}
