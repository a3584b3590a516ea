use std::collections::BTreeMap;
use std::sync::Arc;

use iterlabel::detector::{filter_new, Detection, Detector, HiddenWorld, ModelState, SimDetector, SimDetectorConfig, WorldConfig};
use iterlabel::geometry::BBox;
use iterlabel::labelstore::{Annotation, AnnotationState, ClassLabel, Split, TrainingSummary};
use proptest::prelude::*;

fn world(images: usize) -> Arc<HiddenWorld> {
    let cfg = WorldConfig {
        image_count: images,
        seed_images: 2,
        ..WorldConfig::default()
    };
    Arc::new(HiddenWorld::generate(&cfg, 17).unwrap())
}

fn state(tag: &str, fraction: f64, background: u64, world: &HiddenWorld) -> ModelState {
    let totals = world.class_totals(&[Split::Seed, Split::Pool, Split::Validation]);
    let labeled_per_class: BTreeMap<String, u64> = totals
        .iter()
        .map(|(c, n)| (c.clone(), (fraction * *n as f64).round() as u64))
        .collect();
    ModelState {
        tag: tag.into(),
        summary: TrainingSummary {
            labeled_per_class,
            background_labels: background,
            final_loss: None,
        },
    }
}

#[test]
fn false_positive_rate_matches_the_decay_formula() {
    let w = world(200);
    let cfg = SimDetectorConfig {
        p_min: 0.0,
        p_max: 0.0,
        ..SimDetectorConfig::default()
    };
    let det = SimDetector::new(w.clone(), cfg, 3).unwrap();
    let expected = 1.5 * (-2.0f64).exp();
    assert!((det.false_positive_rate(100) - expected).abs() < 1e-12);
    assert!((expected - 0.203).abs() < 1e-3);

    let mut total = 0usize;
    let mut images = 0usize;
    for round in 0..50 {
        let s = state(&format!("round-{round}"), 0.0, 100, &w);
        for id in w.images.keys() {
            // with emission off every detection is a false positive
            total += det.detect(id, &s).unwrap().len();
            images += 1;
        }
    }
    assert_eq!(images, 10_000);
    let observed = total as f64 / images as f64;
    let rel = (observed - expected).abs() / expected;
    assert!(rel < 0.05, "observed {observed}, expected {expected}");
}

#[test]
fn recall_tracks_the_labeled_fraction() {
    let w = world(60);
    let det = SimDetector::new(w.clone(), SimDetectorConfig::default(), 4).unwrap();
    let objects = w.object_count() as f64;
    let recall = |fraction: f64| {
        let mut hits = 0usize;
        for round in 0..5 {
            let s = state(&format!("r{round}"), fraction, 10_000, &w);
            for id in w.images.keys() {
                hits += det.detect(id, &s).unwrap().len();
            }
        }
        hits as f64 / (5.0 * objects)
    };
    let low = recall(0.0);
    let high = recall(1.0);
    assert!((low - 0.35).abs() < 0.03, "recall at f=0: {low}");
    assert!((high - 0.95).abs() < 0.03, "recall at f=1: {high}");
}

#[test]
fn detection_is_reproducible_and_unknown_images_fail() {
    let w = world(10);
    let det = SimDetector::new(w.clone(), SimDetectorConfig::default(), 5).unwrap();
    let s = state("loop-1", 0.4, 7, &w);
    for id in w.images.keys() {
        assert_eq!(det.detect(id, &s).unwrap(), det.detect(id, &s).unwrap());
    }
    let other = SimDetector::new(w.clone(), SimDetectorConfig::default(), 5).unwrap();
    let id = w.images.keys().next().unwrap();
    assert_eq!(det.detect(id, &s).unwrap(), other.detect(id, &s).unwrap());
    assert!(det.detect("no-such-image", &s).is_err());
}

#[test]
fn emission_and_false_positive_rates_are_monotone() {
    let w = world(10);
    let det = SimDetector::new(w.clone(), SimDetectorConfig::default(), 1).unwrap();
    let fractions: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    for class in &w.classes {
        let probs: Vec<f64> = fractions
            .iter()
            .map(|f| det.emission_probability(&state("s", *f, 0, &w).summary, class))
            .collect();
        assert!(probs.windows(2).all(|p| p[1] >= p[0]), "{class}: {probs:?}");
        assert!((probs[0] - 0.35).abs() < 1e-12 && (probs[20] - 0.95).abs() < 1e-12);
    }
    let rates: Vec<f64> = (0..500).step_by(10).map(|b| det.false_positive_rate(b)).collect();
    assert!(rates.windows(2).all(|r| r[1] <= r[0]));
    assert_eq!(rates[0], 1.5);
}

#[test]
fn more_labels_never_remove_a_detection() {
    // each object keeps its own random stream, so an object emitted at a
    // lower labeled fraction is emitted, identically, at a higher one
    let w = world(20);
    let cfg = SimDetectorConfig {
        fp_rate0: 0.0,
        ..SimDetectorConfig::default()
    };
    let det = SimDetector::new(w.clone(), cfg, 8).unwrap();
    let mut grew = false;
    for id in w.images.keys() {
        let lo = det.detect(id, &state("t", 0.2, 0, &w)).unwrap();
        let hi = det.detect(id, &state("t", 0.8, 0, &w)).unwrap();
        assert!(lo.iter().all(|d| hi.contains(d)));
        grew |= hi.len() > lo.len();
    }
    assert!(grew);
}

#[test]
fn zero_decay_makes_background_labels_irrelevant() {
    let w = world(20);
    let cfg = SimDetectorConfig {
        fp_decay_beta: 0.0,
        ..SimDetectorConfig::default()
    };
    let det = SimDetector::new(w.clone(), cfg, 2).unwrap();
    for id in w.images.keys() {
        let none = det.detect(id, &state("t", 0.5, 0, &w)).unwrap();
        let many = det.detect(id, &state("t", 0.5, 500, &w)).unwrap();
        assert_eq!(none, many);
    }
}

#[test]
fn invalid_config_is_refused() {
    let bad = SimDetectorConfig {
        p_min: 0.9,
        p_max: 0.5,
        ..SimDetectorConfig::default()
    };
    assert!(SimDetector::new(world(3), bad, 0).is_err());
}

fn detection() -> impl Strategy<Value = Detection> {
    (0.0f64..200.0, 0.0f64..200.0, 5.0f64..60.0, 5.0f64..60.0, 0usize..2, 0.0f64..1.0).prop_map(|(x, y, w, h, c, s)| {
        Detection {
            bbox: BBox::from_xywh(x, y, w, h).unwrap(),
            class_label: ClassLabel::object(["Rockfish", "Sponge"][c]),
            score: s,
        }
    })
}

proptest! {
    #[test]
    fn filter_new_is_idempotent(
        dets in prop::collection::vec(detection(), 0..20),
        existing in prop::collection::vec((detection(), any::<bool>()), 0..6),
        dedup in 0.1f64..0.9,
    ) {
        let anns: Vec<Annotation> = existing
            .iter()
            .enumerate()
            .map(|(i, (d, rejected))| {
                let state = if *rejected { AnnotationState::Rejected } else { AnnotationState::Approved };
                Annotation::new(format!("a{i}"), "img", d.class_label.clone(), d.bbox, state, None)
            })
            .collect();
        let refs: Vec<&Annotation> = anns.iter().collect();
        let once = filter_new(&dets, &refs, dedup);
        let twice = filter_new(&once, &refs, dedup);
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.len() <= dets.len());
        prop_assert!(once.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
