mod common;

use common::*;
use esppct::attention::{attention_stack_forward, knn_neighbors, vector_attention_forward};
use esppct::config::PipelineConfig;
use esppct::cost::{count_flops, count_params, dense_attention_flops, reduction_ratio, InputShape};
use esppct::focus::{focus_stage, top_k_points, Ablation, FocusConfig};
use esppct::heads::{head_forward, keynet_states, HeadConfig, HeadKind, HeadParams};
use esppct::ngsa::{group_points, localization_decision, ngsa_scores, select_region, Decision, GroupingConfig, NgsaScores};
use esppct::numerics::{checkpoint, softmax};
use esppct::pipeline::EspPct;
use esppct::pointcloud::{
    apply_occlusion, parse_sequence, render_sequence, synth_generate, Frame, OcclusionModel, Point, SynthConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sequence_text_round_trip(seed in any::<u64>(), frames in 1usize..6, max_points in 0usize..12) {
        let mut r = rng(seed);
        let mut seq = random_sequence(frames, max_points, &mut r);
        seq.meta.insert("scene".into(), format!("s{}", r.gen::<u16>()));
        let back = parse_sequence(&render_sequence(&seq).unwrap()).unwrap();
        prop_assert!(back.bit_eq(&seq));
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shift(v in prop::collection::vec(-30.0f64..30.0, 1..20), c in -50.0f64..50.0) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_matches_full_sort(seed in any::<u64>(), n in 1usize..30, k in 1usize..12) {
        let frame = random_frame(n, &mut rng(seed));
        let nbrs = knn_neighbors(&frame, k).unwrap();
        prop_assert_eq!(nbrs.lists().to_vec(), brute_knn(&frame, k));
    }

    #[test]
    fn attention_weights_normalize(seed in any::<u64>(), n in 1usize..24, k in 1usize..8, d in 1usize..6) {
        let mut r = rng(seed);
        let frame = random_frame(n, &mut r);
        let layer = random_layer(5, d, 2, &mut r);
        let nbrs = knn_neighbors(&frame, k).unwrap();
        let out = vector_attention_forward(&layer, &frame, &nbrs).unwrap();
        for i in 0..n {
            for c in 0..d {
                let s: f64 = (0..nbrs.k()).map(|r| out.weight(i, r)[c]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
        let mass: f64 = out.point_scores.iter().sum();
        prop_assert!((mass - n as f64).abs() < 1e-9);
    }

    #[test]
    fn attention_is_local(seed in any::<u64>(), n in 3usize..20) {
        let mut r = rng(seed);
        let mut frame = random_frame(n, &mut r);
        let layer = random_layer(5, 4, 2, &mut r);
        let nbrs = knn_neighbors(&frame, 3).unwrap();
        let before = vector_attention_forward(&layer, &frame, &nbrs).unwrap();
        // perturb the features (not positions) of a point outside N(0)
        let Some(victim) = (0..n).find(|j| !nbrs.list(0).contains(j)) else { return Ok(()) };
        frame.points[victim].velocity += 0.5;
        frame.points[victim].intensity *= 0.5;
        let after = vector_attention_forward(&layer, &frame, &nbrs).unwrap();
        prop_assert_eq!(before.features.row(0), after.features.row(0));
    }

    #[test]
    fn grouping_partitions_points(seed in any::<u64>(), n in 1usize..60, cell in 0.05f64..1.0) {
        let frame = random_frame(n, &mut rng(seed));
        let cfg = GroupingConfig { cell_size: cell, ..Default::default() };
        let g = group_points(&frame, &cfg).unwrap();
        let mut seen = vec![0usize; n];
        for (gi, grp) in g.groups.iter().enumerate() {
            prop_assert!(!grp.members.is_empty());
            for &m in &grp.members {
                seen[m] += 1;
                prop_assert_eq!(g.group_of[m], gi);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert!(g.groups.windows(2).all(|w| w[0].cell < w[1].cell));
    }

    #[test]
    fn grouping_is_translation_consistent(seed in any::<u64>(), n in 1usize..40, shift in prop::array::uniform3(-4i32..4)) {
        let frame = random_frame(n, &mut rng(seed));
        let cfg = GroupingConfig { cell_size: 0.25, ..Default::default() };
        // shifts by whole multiples of the cell keep every coordinate exact
        let t = shift.map(|s| s as f64 * 0.25);
        let moved = Frame::new(0, frame.points.iter().map(|p| Point { x: p.x + t[0], y: p.y + t[1], z: p.z + t[2], ..*p }).collect());
        let cfg2 = GroupingConfig { grid_origin: t, ..cfg.clone() };
        let a = group_points(&frame, &cfg).unwrap();
        let b = group_points(&moved, &cfg2).unwrap();
        prop_assert_eq!(a.member_lists(), b.member_lists());
    }

    #[test]
    fn ngsa_scales_with_w(seed in any::<u64>(), n in 2usize..30, e in -4i32..4, c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let frame = random_frame(n, &mut r);
        let layer = random_layer(5, 4, 1, &mut r);
        let att = attention_stack_forward(std::slice::from_ref(&layer), &frame, 4).unwrap();
        let g = group_points(&frame, &GroupingConfig { cell_size: 0.5, ..Default::default() }).unwrap();
        let w: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let base = ngsa_scores(&att, &g, &w).unwrap();
        // a power of two scales every product and sum exactly
        let p = 2f64.powi(e);
        let pw: Vec<f64> = w.iter().map(|x| x * p).collect();
        let scaled = ngsa_scores(&att, &g, &pw).unwrap();
        for (a, b) in base.global_scores.iter().zip(&scaled.global_scores) {
            prop_assert_eq!(a * p, *b);
        }
        let cw: Vec<f64> = w.iter().map(|x| x * c).collect();
        let any_c = ngsa_scores(&att, &g, &cw).unwrap();
        let mut sorted = base.global_scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        // only meaningful when the winner is separated beyond rounding
        if sorted.len() == 1 || sorted[0] - sorted[1] > 1e-9 * sorted[0].abs().max(1.0) {
            prop_assert_eq!(select_region(&base).unwrap(), select_region(&any_c).unwrap());
        }
    }

    #[test]
    fn refine_set_is_an_up_set(scores in prop::collection::vec(-3.0f64..3.0, 1..20), e1 in 0.0f64..=1.0, e2 in 0.0f64..=1.0) {
        let s = NgsaScores { sum_scores: scores.clone(), global_scores: scores, w: vec![] };
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        if localization_decision(&s, lo).unwrap().decision == Decision::Refine {
            prop_assert_eq!(localization_decision(&s, hi).unwrap().decision, Decision::Refine);
        }
    }

    #[test]
    fn top_k_dominance(seed in any::<u64>(), n in 0usize..40, k in 0usize..50) {
        let scores = tied_scores(n, &mut rng(seed));
        let sel = top_k_points(&scores, k);
        prop_assert_eq!(&sel, &top_k_oracle(&scores, k));
        prop_assert_eq!(sel.len(), k.min(n));
        let min_in = sel.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for j in (0..n).filter(|j| !sel.contains(j)) {
            prop_assert!(scores[j] <= min_in);
        }
        let bigger = top_k_points(&scores, k + 1);
        prop_assert!(bigger.len() >= sel.len());
    }

    #[test]
    fn focus_selection_is_monotone_and_no_top_k_contains_default(seed in any::<u64>(), n in 1usize..40, k in 1usize..20) {
        let mut r = rng(seed);
        let frame = random_frame(n, &mut r);
        let layer = random_layer(5, 4, 1, &mut r);
        let att = attention_stack_forward(std::slice::from_ref(&layer), &frame, 4).unwrap();
        let g = group_points(&frame, &GroupingConfig { cell_size: 0.5, ..Default::default() }).unwrap();
        let w: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let s = ngsa_scores(&att, &g, &w).unwrap();
        let eta = r.gen_range(0.0..1.0);
        let run = |cfg: &FocusConfig| focus_stage(&frame, &att, &s, &g, cfg).unwrap();
        let base = FocusConfig { top_k: k, eta, ..Default::default() };
        let small = run(&base);
        let large = run(&FocusConfig { top_k: k + 3, ..base.clone() });
        prop_assert!(small.selected_indices.len() <= large.selected_indices.len());
        prop_assert_eq!(small.representation.len(), k * 4);
        prop_assert!(small.selected_indices.windows(2).all(|p| p[0] < p[1]));
        let all = run(&FocusConfig { ablation: Ablation { no_top_k: true, ..Default::default() }, max_points: 40, ..base.clone() });
        prop_assert!(small.selected_indices.iter().all(|i| all.selected_indices.contains(i)));
        prop_assert_eq!(run(&base), small);
    }

    #[test]
    fn flops_are_monotone(n in 1u64..200, k in 1usize..60, d in 1usize..40, layers in 1usize..4) {
        let mut cfg = PipelineConfig::default();
        cfg.focus.top_k = k;
        cfg.attention.d_attention = d;
        cfg.attention.layers = layers;
        let base = count_flops(&cfg, InputShape::new(4, n)).unwrap();
        let more_n = count_flops(&cfg, InputShape::new(4, n + 1)).unwrap();
        let mut c = cfg.clone();
        c.focus.top_k += 1;
        let more_k = count_flops(&c, InputShape::new(4, n)).unwrap();
        let mut c = cfg.clone();
        c.attention.d_attention += 1;
        let more_d = count_flops(&c, InputShape::new(4, n)).unwrap();
        let mut c = cfg.clone();
        c.attention.layers += 1;
        let deeper = count_flops(&c, InputShape::new(4, n)).unwrap();
        for other in [&more_n, &more_k, &more_d, &deeper] {
            for ((_, a), (_, b)) in base.components().iter().zip(other.components()) {
                prop_assert!(*a <= b);
            }
        }
        prop_assert_eq!(reduction_ratio(&base, &base).unwrap().total, 0.0);
    }

    #[test]
    fn quadratic_term_quadruples(n in 64u64..2000, d in 1u64..64) {
        let r = dense_attention_flops(2 * n, d).quadratic as f64 / dense_attention_flops(n, d).quadratic as f64;
        prop_assert!((3.5..=4.0).contains(&r), "ratio {}", r);
    }

    #[test]
    fn occlusion_is_seeded(seed in any::<u64>(), which in 0usize..4) {
        let cfg = SynthConfig { classes: 2, sequences_per_class: 1, frames_per_sequence: 2, points_per_frame: 20, semantic_cluster_points: 14, noise_points: 6, seed, ..Default::default() };
        let ds = synth_generate(&cfg).unwrap();
        let m = &OcclusionModel::ladder()[which];
        let a = apply_occlusion(&ds.sequences[0], m, seed ^ 1).unwrap();
        let b = apply_occlusion(&ds.sequences[0], m, seed ^ 1).unwrap();
        prop_assert!(a.bit_eq(&b));
        prop_assert!(synth_generate(&cfg).unwrap().sequences[1].bit_eq(&ds.sequences[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permutation_equivariance(seed in any::<u64>(), n in 2usize..20, k in 1usize..8) {
        let mut r = rng(seed);
        let frame = random_frame(n, &mut r);
        prop_assume!(distances_distinct(&frame));
        let layer = random_layer(5, 4, 2, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let permuted = Frame::new(0, perm.iter().map(|&i| frame.points[i]).collect());
        let a = attention_stack_forward(std::slice::from_ref(&layer), &frame, k).unwrap();
        let b = attention_stack_forward(std::slice::from_ref(&layer), &permuted, k).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in a.features.row(old).iter().zip(b.features.row(new)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((a.point_scores[old] - b.point_scores[new]).abs() < 1e-9);
        }
    }

    #[test]
    fn head_shapes_and_determinism(seed in any::<u64>(), frames in 1usize..6, width in 1usize..10, keynet in any::<bool>()) {
        let mut r = rng(seed);
        let kind = if keynet { HeadKind::KeyNet } else { HeadKind::AppNet };
        let cfg = HeadConfig { kind, hidden: Some(5) };
        let p = HeadParams::random(&cfg, width, &mut r);
        let reps: Vec<Vec<f64>> = (0..frames).map(|_| (0..width).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let z = head_forward(&p, &reps).unwrap();
        prop_assert_eq!(z.len(), kind.classes());
        prop_assert_eq!(head_forward(&p, &reps).unwrap(), z);
        if let HeadParams::KeyNet(kp) = &p {
            let mut tied = kp.clone();
            tied.backward = tied.forward.clone();
            let (f, b) = keynet_states(&tied, &reps).unwrap();
            let rev: Vec<Vec<f64>> = reps.iter().rev().cloned().collect();
            let (rf, rb) = keynet_states(&tied, &rev).unwrap();
            prop_assert_eq!(f, rb);
            prop_assert_eq!(b, rf);
        }
    }

    #[test]
    fn param_count_matches_checkpoint(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut cfg = PipelineConfig::default();
        cfg.attention.layers = r.gen_range(1..4);
        cfg.attention.d_attention = r.gen_range(1..12);
        cfg.attention.k_nn = r.gen_range(1..8);
        cfg.attention.mlp_depth = r.gen_range(1..4);
        cfg.focus.top_k = r.gen_range(1..40);
        cfg.head.kind = if r.gen_bool(0.5) { HeadKind::KeyNet } else { HeadKind::AppNet };
        cfg.head.hidden = Some(r.gen_range(1..12));
        if r.gen_bool(0.3) {
            cfg.focus.ablation.no_top_k = true;
            cfg.focus.max_points = r.gen_range(1..60);
        }
        let model = EspPct::new(cfg.clone(), seed).unwrap();
        let bytes = checkpoint::encode(model.store(), None).unwrap();
        let (store, _) = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(store.scalar_count() as u64, count_params(&cfg).unwrap().total);
    }
}

#[test]
fn occlusion_retention_is_ordered() {
    let frame = Frame::new(0, (0..10_000).map(|i| Point::new(i as f64 * 1e-4, 0.0, 1.0, 0.0, 0.5)).collect());
    let seq = esppct::pointcloud::Sequence {
        frames: vec![frame],
        ..Default::default()
    };
    let kept: Vec<f64> = OcclusionModel::ladder()
        .iter()
        .map(|m| {
            let no_clutter = OcclusionModel { clutter_points: 0, ..m.clone() };
            apply_occlusion(&seq, &no_clutter, 11).unwrap().frames[0].len() as f64
        })
        .collect();
    for w in kept.windows(2) {
        assert!(w[1] <= w[0] * 1.02, "{kept:?}");
    }
}
