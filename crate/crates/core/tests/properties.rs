//! Property tests for invariants that hold for any input, not just fixtures.

use fusioner::autograd::{Mat, Tape};
use fusioner::data::manifest::{DatasetManifest, LabelEncoding, ManifestEntry};
use fusioner::data::mosaic::plan_mosaic4;
use fusioner::decoder::mask_logits;
use fusioner::encoders::registry::{build_text, TextEncoderConfig};
use fusioner::encoders::PromptTemplateSet;
use fusioner::eval::{fb_iou, IouCounters};
use fusioner::fusion::{fuse, init_params, FusionConfig, FusionMode, ProjectorKind};
use fusioner::params::ParamSet;
use fusioner::training::{lr_at, TrainConfig};
use ndarray::{Array3, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Mat::from_shape_vec((rows, cols), v).unwrap())
}

fn logits(vis: &Mat, txt: &Mat) -> Mat {
    let mut tape = Tape::new();
    let v = tape.constant(vis.clone());
    let t = tape.constant(txt.clone());
    let l = mask_logits(&mut tape, v, t, 0.07).unwrap();
    tape.value(l).clone()
}

fn masks(h: usize, w: usize, c: usize) -> impl Strategy<Value = Array3<bool>> {
    proptest::collection::vec(any::<bool>(), h * w * c).prop_map(move |v| Array3::from_shape_vec((h, w, c), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn positive_rescaling_leaves_logits_unchanged(
        vis in matrix(6, 5),
        txt in matrix(3, 5),
        a in 1e-3f64..1e3,
        b in 1e-3f64..1e3,
    ) {
        let base = logits(&vis, &txt);
        let scaled = logits(&(&vis * a), &(&txt * b));
        for (x, y) in base.iter().zip(scaled.iter()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn changing_one_text_row_only_changes_its_channel(
        vis in matrix(6, 4),
        txt in matrix(3, 4),
        replacement in matrix(1, 4),
        row in 0usize..3,
    ) {
        let before = logits(&vis, &txt);
        let mut changed = txt.clone();
        changed.row_mut(row).assign(&replacement.row(0));
        let after = logits(&vis, &changed);
        for c in (0..3).filter(|&c| c != row) {
            prop_assert_eq!(before.column(c), after.column(c));
        }
    }

    #[test]
    fn fused_shapes_match_projected_inputs(
        h in 1usize..5,
        w in 1usize..5,
        n_text in 1usize..6,
        heads in 1usize..4,
        head_dim in 1usize..4,
        layers in 0usize..3,
        d_i in 1usize..10,
        d_w in 1usize..10,
        late in any::<bool>(),
    ) {
        let width = heads * head_dim;
        let cfg = FusionConfig {
            mode: if late { FusionMode::Late } else { FusionMode::Early },
            layers,
            heads,
            width,
            ffn_multiplier: 2,
            mlp_layers: layers,
            projector: ProjectorKind::Mlp,
        };
        let mut set = ParamSet::new();
        init_params(&cfg, d_i, d_w, &mut ChaCha8Rng::seed_from_u64(1), &mut set);
        let mut tape = Tape::new();
        let bound = set.bind_frozen(&mut tape);
        let v = tape.constant(Mat::from_elem((h * w, d_i), 0.3));
        let t = tape.constant(Mat::from_elem((n_text, d_w), -0.2));
        let (fv, ft) = fuse(&mut tape, &bound, &cfg, v, t).unwrap();
        prop_assert_eq!(tape.shape(fv), (h * w, width));
        prop_assert_eq!(tape.shape(ft), (n_text, width));
    }

    #[test]
    fn accumulated_iou_equals_concatenated_brute_force(
        preds in proptest::collection::vec(masks(3, 4, 2), 1..5),
        seed in any::<u64>(),
    ) {
        let cats = vec!["a".to_string(), "b".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<Array3<bool>> = preds
            .iter()
            .map(|p| p.mapv(|_| rand::Rng::random_bool(&mut rng, 0.4)))
            .collect();
        let mut counters = IouCounters::new();
        for (p, g) in preds.iter().zip(&gts) {
            let mut one = IouCounters::new();
            one.accumulate(p.view(), g.view(), &cats).unwrap();
            counters.merge(&one);
        }
        let pv: Vec<_> = preds.iter().map(|p| p.view()).collect();
        let gv: Vec<_> = gts.iter().map(|g| g.view()).collect();
        let all_p = ndarray::concatenate(Axis(0), &pv).unwrap();
        let all_g = ndarray::concatenate(Axis(0), &gv).unwrap();
        let iou = counters.per_class_iou();
        for (c, name) in cats.iter().enumerate() {
            let p = all_p.index_axis(Axis(2), c);
            let g = all_g.index_axis(Axis(2), c);
            let inter = p.iter().zip(g.iter()).filter(|(a, b)| **a && **b).count();
            let union = p.iter().zip(g.iter()).filter(|(a, b)| **a || **b).count();
            match iou.get(name) {
                Some(v) => prop_assert_eq!(*v, inter as f64 / union as f64),
                None => prop_assert_eq!(union, 0),
            }
        }
    }

    #[test]
    fn miou_ignores_class_order(values in proptest::collection::vec(0.0f64..1.0, 1..12), seed in any::<u64>()) {
        let mut shuffled = values.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let a = fusioner::eval::miou(&values).unwrap();
        let b = fusioner::eval::miou(&shuffled).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn fb_iou_only_sees_the_foreground_union(pred in masks(4, 4, 3), gt in masks(4, 4, 3), seed in any::<u64>()) {
        // Move every foreground pixel to a random channel; the union is kept.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut relabel = |m: &Array3<bool>| {
            let mut out = Array3::from_elem(m.dim(), false);
            for y in 0..4 {
                for x in 0..4 {
                    if (0..3).any(|c| m[[y, x, c]]) {
                        out[[y, x, rand::Rng::random_range(&mut rng, 0..3)]] = true;
                    }
                }
            }
            out
        };
        let (p2, g2) = (relabel(&pred), relabel(&gt));
        prop_assert_eq!(fb_iou(pred.view(), gt.view()).unwrap(), fb_iou(p2.view(), g2.view()).unwrap());
    }

    #[test]
    fn schedule_is_continuous_and_then_non_increasing(
        warmup in 0usize..6,
        extra in 1usize..8,
        spe in 1usize..5,
        base in 1e-5f64..1e-1,
    ) {
        let cfg = TrainConfig { base_lr: base, warmup_epochs: warmup, total_epochs: warmup + extra, ..Default::default() };
        let w = warmup * spe;
        let total = (warmup + extra) * spe;
        prop_assert!((lr_at(w, spe, &cfg) - base).abs() <= 1e-15 * base.max(1.0));
        for s in w..total {
            prop_assert!(lr_at(s + 1, spe, &cfg) <= lr_at(s, spe, &cfg) + 1e-18);
        }
        prop_assert!(lr_at(total, spe, &cfg).abs() < 1e-15);
    }

    #[test]
    fn prompt_ensemble_ignores_template_order(seed in any::<u64>(), category in "[a-z]{1,8}") {
        let enc = build_text(&TextEncoderConfig { embed_dim: 6, seed: 3, ..Default::default() }).unwrap();
        let mut templates = PromptTemplateSet::default_set().templates().to_vec();
        let a = enc.ensemble_prompts(&category, &PromptTemplateSet::new(templates.clone()).unwrap()).unwrap();
        rand::seq::SliceRandom::shuffle(templates.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let b = enc.ensemble_prompts(&category, &PromptTemplateSet::new(templates).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mosaic_plans_are_valid_and_maximal(counts in proptest::collection::vec(1usize..6, 4..9), seed in any::<u64>()) {
        let mut entries = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                entries.push(ManifestEntry {
                    image: format!("c{c}_{i}.png").into(),
                    mask: format!("c{c}_{i}_mask.png").into(),
                    categories: vec![format!("cat{c}")],
                });
            }
        }
        let m = DatasetManifest::new(".".into(), entries, LabelEncoding::Positional).unwrap();
        let total: usize = counts.iter().sum();
        // Largest m with Σ min(count, m) ≥ 4m, found by scanning.
        let capacity = (0..=total / 4).rev().find(|&k| counts.iter().map(|&c| c.min(k)).sum::<usize>() >= 4 * k).unwrap();
        match plan_mosaic4(&m, seed, 8) {
            Ok(spec) => {
                prop_assert_eq!(spec.composite_count, capacity);
                let mut used = std::collections::HashSet::new();
                for tiles in &spec.composites {
                    let cats: std::collections::HashSet<_> = tiles.iter().map(|t| &t.category).collect();
                    prop_assert_eq!(cats.len(), 4);
                    for t in tiles {
                        prop_assert!(used.insert(t.image.clone()));
                    }
                }
            }
            Err(_) => prop_assert_eq!(capacity, 0),
        }
    }
}
