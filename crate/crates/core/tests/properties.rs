mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovdet::checkpoint::{Checkpoint, Stage};
use ovdet::config::ExperimentConfig;
use ovdet::detector::{classify_region, nms, ClassCatalog, ClassSet, Detection};
use ovdet::diffcore::{kl_divergence, softmax, Tensor};
use ovdet::evaluation::{evaluate, iou, Setup, SetupDetections};
use ovdet::matching::{grounding_loss, Axis};
use ovdet::model::{InitConfig, Model, ModelDims};
use ovdet::optim::{LrSchedule, Sgd};
use ovdet::regions::Bbox;
use ovdet::synthworld::ClassInfo;

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = rand_distr::Normal::new(0.0, std).unwrap();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample(normal)).collect(),
    )
}

fn bbox() -> impl Strategy<Value = Bbox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
        .prop_map(|(x, y, w, h)| Bbox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_matches_oracle_and_is_bounded(seed in any::<u64>()) {
        let inst = common::random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let run = SetupDetections { setup: Setup::Generalized, class_set: ClassSet::All, detections: inst.detections.clone() };
        let report = evaluate(&[run], &inst.ground_truths, &inst.classes).unwrap();
        let g = report.generalized.unwrap();
        for c in &g.classes {
            prop_assert_eq!(&c.per_threshold, &common::oracle_class_curve(&inst.detections, &inst.ground_truths, c.class_id));
            prop_assert!(c.per_threshold.iter().all(|v| (0.0..=1.0).contains(v)));
            // stricter thresholds never help
            prop_assert!(c.per_threshold.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
        prop_assert!((0.0..=1.0).contains(&g.summary.ap));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_output_has_no_suppressible_pair(boxes in prop::collection::vec((bbox(), 0usize..2, 0.0..1.0f64), 0..12)) {
        let dets: Vec<Detection> = boxes
            .iter()
            .map(|(b, c, s)| Detection { image_id: 0, bbox: *b, class_id: *c, confidence: *s })
            .collect();
        let kept = nms(&dets, 0.5);
        prop_assert!(kept.iter().all(|k| dets.contains(k)));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class_id == b.class_id {
                    prop_assert!(iou(&a.bbox, &b.bbox).unwrap() <= 0.5);
                }
            }
        }
        // the most confident detection always survives
        if let Some(top) = dets.iter().max_by(|a, b| a.confidence.total_cmp(&b.confidence)) {
            prop_assert!(kept.iter().any(|k| k.confidence == top.confidence));
        }
    }

    #[test]
    fn restricting_the_class_set_preserves_order(seed in any::<u64>(), k in 2usize..6, novel in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = k + novel;
        let classes: Vec<ClassInfo> = (0..total)
            .map(|id| ClassInfo { id, name: format!("c{id}"), tokens: vec![id + 2], novel: id >= k })
            .collect();
        let catalog = ClassCatalog::new(classes, gaussian(total, 6, 1.0, &mut rng)).unwrap();
        let r = gaussian(1, 6, 1.0, &mut rng);
        let all = classify_region(r.row(0), &catalog, ClassSet::All).unwrap();
        let sub = classify_region(r.row(0), &catalog, ClassSet::Novel).unwrap();
        let novel_probs: Vec<f64> = all.class_ids.iter().zip(&all.probs).filter(|(id, _)| **id >= k).map(|(_, p)| *p).collect();
        for i in 0..novel {
            for j in 0..novel {
                prop_assert_eq!(novel_probs[i] < novel_probs[j], sub.probs[i] < sub.probs[j]);
            }
        }
        let total_p: f64 = all.probs.iter().sum::<f64>() + all.background;
        prop_assert!((total_p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grounding_loss_is_shift_invariant_and_at_least_zero(seed in any::<u64>(), b in 1usize..6, shift in -5.0..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gaussian(b, b, 2.0, &mut rng);
        let shifted = Tensor::matrix(b, b, m.data().iter().map(|v| v + shift).collect());
        for axis in [Axis::ImageToCaptions, Axis::CaptionToImages] {
            let l = grounding_loss(&m, axis).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - grounding_loss(&shifted, axis).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_self(xs in prop::collection::vec(-4.0..4.0f64, 1..8), ys in prop::collection::vec(-4.0..4.0f64, 1..8)) {
        let n = xs.len().min(ys.len());
        let p = softmax(&xs[..n]).unwrap();
        let q = softmax(&ys[..n]).unwrap();
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn schedule_divides_by_factor_per_passed_step(base in 0.001..1.0f64, a in 0usize..50, gap in 1usize..50, step in 0usize..150) {
        let s = LrSchedule { base, decay_steps: vec![a, a + gap], decay_factor: 10.0 };
        let passed = [a, a + gap].iter().filter(|&&d| step >= d).count() as i32;
        prop_assert_eq!(s.rate(step), base / 10f64.powi(passed));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bytewise(seed in any::<u64>(), d in 1usize..4) {
        let dims = ModelDims {
            feature_dim: 3,
            embed_dim: 2 * d,
            vocab_size: 7,
            fusion_layers: 1,
            heads: 2,
            ffn_hidden: 3,
            max_caption_len: 4,
        };
        let mut model = Model::init(dims, &InitConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        model.params.round_to_f32();
        let ck = Checkpoint::new(Stage::Stt, 3, &ExperimentConfig::desk(), &model, &Sgd::new(0.9, None));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
