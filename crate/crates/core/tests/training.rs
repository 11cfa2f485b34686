use boxprompt_core::autograd::Tensor;
use boxprompt_core::config::{ModelConfig, TrainConfig};
use boxprompt_core::geometry::{AnnotationFrame, BBox, ProposalSet};
use boxprompt_core::pipeline::loss::{total_loss, AreaTargets, HeadTargets, LossBundle, Predictions, Targets};
use boxprompt_core::pipeline::rpn::RpnTargets;
use boxprompt_core::pipeline::train::{fit, loss_and_gradients, sample_training_prompts, train_step, Sgd};
use boxprompt_core::pipeline::{Model, PromptBatch, Provenance};
use boxprompt_core::synthlab::{generate_scene, GeneratorProfile, Scene};
use proptest::prelude::*;

fn scene(seed: u64) -> Scene {
    generate_scene(&GeneratorProfile::coco_like(), 64, seed).unwrap()
}

fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        ..Default::default()
    }
}

#[test]
fn same_seed_gives_bit_identical_losses() {
    let scenes: Vec<Scene> = (0..3).map(scene).collect();
    let run = || {
        let mut m = Model::init(ModelConfig::default(), 5).unwrap();
        let h = fit(&mut m, &scenes, &short(4), 9, |_, _| {}).unwrap();
        (h, m.params().clone())
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    let bits = |h: &[LossBundle]| -> Vec<u64> {
        h.iter()
            .flat_map(|b| [b.l_parea, b.l_box, b.l_class, b.l_mask, b.l_total])
            .map(f64::to_bits)
            .collect()
    };
    assert_eq!(bits(&h1), bits(&h2));
    for (name, t) in p1.iter() {
        let u = p2.get(name).unwrap();
        assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
    }
}

#[test]
fn a_step_moves_every_trained_module() {
    let s = scene(1);
    let mut m = Model::init(ModelConfig::default(), 0).unwrap();
    let before = m.params().clone();
    let cfg = short(1);
    let bundle = train_step(&mut m, &s, &mut Sgd::new(&cfg), &cfg, 0).unwrap();
    assert!(bundle.l_total > 0.0);
    for prefix in ["backbone", "rpn", "lpm", "gpm", "fuse", "head"] {
        let moved = before
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .any(|(n, t)| t.data() != m.params().get(n).unwrap().data());
        assert!(moved, "no `{prefix}` parameter changed");
    }
}

#[test]
fn prompt_modules_receive_gradient_on_generic_scenes() {
    let model = Model::init(ModelConfig::default(), 0).unwrap();
    for seed in [2, 3] {
        let (_, grads) = loss_and_gradients(&model, &scene(seed), &TrainConfig::default(), seed).unwrap();
        for (name, g) in grads.iter() {
            if !(name.starts_with("lpm.") || name.starts_with("gpm.")) {
                continue;
            }
            assert!(g.data().iter().any(|v| *v != 0.0), "zero gradient for `{name}`");
        }
        let g = grads.get("lpm.spectral").unwrap();
        assert!(g.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn loss_total_is_the_component_sum() {
    let model = Model::init(ModelConfig::default(), 3).unwrap();
    for seed in 0..3 {
        let (b, _) = loss_and_gradients(&model, &scene(seed), &TrainConfig::default(), seed).unwrap();
        assert_eq!(b.l_total, b.l_parea + b.l_box + b.l_class + b.l_mask);
    }
}

fn frame() -> AnnotationFrame {
    AnnotationFrame::of_size(64, 64)
}

fn proposals() -> ProposalSet {
    ProposalSet::new(vec![BBox::new(1.0, 1.0, 9.0, 9.0), BBox::new(20.0, 5.0, 30.0, 25.0)], vec![0.9, 0.4]).unwrap()
}

fn gt() -> Vec<BBox> {
    vec![
        BBox::new(3.0, 3.0, 13.0, 11.0),
        BBox::new(30.0, 30.0, 50.0, 44.0),
        BBox::new(5.0, 40.0, 12.0, 60.0),
    ]
}

#[test]
fn all_ground_truth_without_jitter() {
    let b = sample_training_prompts(&proposals(), &gt(), 1.0, 0.0, 7, &frame()).unwrap();
    assert_eq!(&b.boxes[..2], proposals().boxes());
    assert_eq!(&b.boxes[2..], &gt()[..]);
    assert_eq!(b.provenance[..2], [Provenance::Proposal; 2]);
    assert_eq!(b.provenance[2..], [Provenance::GtJittered; 3]);
}

#[test]
fn no_ground_truth_means_proposals_only() {
    let b = sample_training_prompts(&proposals(), &gt(), 0.0, 0.05, 7, &frame()).unwrap();
    assert_eq!(b.boxes, proposals().boxes());
    assert!(b.provenance.iter().all(|p| *p == Provenance::Proposal));
}

#[test]
fn prompt_sampling_is_seeded() {
    let a = sample_training_prompts(&proposals(), &gt(), 0.5, 0.05, 11, &frame()).unwrap();
    let b = sample_training_prompts(&proposals(), &gt(), 0.5, 0.05, 11, &frame()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2 + 2);
    assert!(sample_training_prompts(&proposals(), &gt(), 1.5, 0.05, 11, &frame()).is_err());
}

#[test]
fn inference_contracts() {
    let cfg = ModelConfig::default();
    let model = Model::init(cfg.clone(), 0).unwrap();
    let s = scene(4);
    let feats = model.encode(&s.image).unwrap();
    assert_eq!(model.backbone_invocations(), 1);
    assert!(model.decode_instances(&feats, &PromptBatch::default()).unwrap().is_empty());
    assert!(model.promptable_segment(&feats, &[]).unwrap().is_empty());
    let boxes: Vec<BBox> = s.instances.iter().map(|i| i.bbox).collect();
    let first = model.promptable_segment(&feats, &boxes).unwrap();
    assert_eq!(first.len(), boxes.len());
    for r in &first {
        assert_eq!((r.mask.width(), r.mask.height()), (cfg.mask_side, cfg.mask_side));
        assert!((0.0..=1.0).contains(&r.score));
        assert_eq!(r.provenance, Provenance::Manual);
    }
    for _ in 0..5 {
        assert_eq!(model.promptable_segment(&feats, &boxes).unwrap(), first);
    }
    assert_eq!(model.backbone_invocations(), 1);
}

/// Targets and predictions that agree exactly, with logits saturated far enough that
/// every log term rounds to zero.
fn perfect_case() -> (Predictions, Targets) {
    const BIG: f64 = 1000.0;
    let objectness = vec![1.0, 0.0, 0.0, 1.0];
    let mut rpn = Tensor::zeros(&[4, 5]);
    for r in 0..4 {
        rpn.data_mut()[r * 5] = if objectness[r] > 0.0 { BIG } else { -BIG };
    }
    let anchors = vec![BBox::new(10.0, 10.0, 20.0, 24.0), BBox::new(30.0, 5.0, 44.0, 15.0)];
    let gt_areas = anchors.iter().map(|a| a.width() * a.height()).collect();
    let classes = vec![0, 1, 3];
    let masks = Tensor::from_fn(&[3 * 4, 3], |i| (i % 3 == 0) as u8 as f64);
    let pred = Predictions {
        rpn,
        class_logits: Some(Tensor::from_fn(&[3, 4], |i| if classes[i / 4] == i % 4 { BIG } else { 0.0 })),
        box_deltas: Some(Tensor::from_fn(&[3, 4], |i| 0.1 * i as f64)),
        mask_logits: Some(masks.map(|v| if v > 0.0 { BIG } else { -BIG })),
    };
    let targets = Targets {
        rpn: RpnTargets {
            objectness: Tensor::new(&[4, 1], objectness),
            objectness_weights: Tensor::full(&[4, 1], 0.25),
            deltas: Tensor::zeros(&[4, 4]),
            delta_weights: Tensor::from_fn(&[4, 4], |i| [1.0, 0.0, 0.0, 1.0][i / 4]),
            num_positive: 2,
        },
        area: Some(AreaTargets {
            rows: vec![1, 2],
            anchors,
            gt_areas,
            frame: frame(),
            eps: 1e-7,
        }),
        head: Some(HeadTargets {
            classes,
            deltas: Tensor::from_fn(&[3, 4], |i| 0.1 * i as f64),
            delta_weights: Tensor::full(&[3, 4], 1.0),
            masks,
            mask_weights: Tensor::full(&[12, 3], 1.0),
            num_positive: 2,
        }),
    };
    (pred, targets)
}

#[test]
fn perfect_predictions_cost_nothing() {
    let (pred, targets) = perfect_case();
    let b = total_loss(&pred, &targets);
    assert_eq!(b, LossBundle::default());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_predictions_give_a_finite_nonnegative_bundle(
        shift in prop::collection::vec(-3.0f64..3.0, 4 * 5 + 12 + 12 + 36),
    ) {
        let (mut pred, targets) = perfect_case();
        let mut it = shift.into_iter();
        let mut perturb = |t: &mut Tensor, scale: f64| {
            for v in t.data_mut() {
                *v = (*v).clamp(-5.0, 5.0) + scale * it.next().unwrap();
            }
        };
        perturb(&mut pred.rpn, 0.1);
        perturb(pred.class_logits.as_mut().unwrap(), 1.0);
        perturb(pred.box_deltas.as_mut().unwrap(), 1.0);
        perturb(pred.mask_logits.as_mut().unwrap(), 1.0);
        let b = total_loss(&pred, &targets);
        for v in [b.l_parea, b.l_box, b.l_class, b.l_mask, b.l_total] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
        prop_assert_eq!(b.l_total, b.l_parea + b.l_box + b.l_class + b.l_mask);
    }
}
