//! Property tests for the protocol invariants.

mod common;

use proptest::prelude::*;

use ufps_core::federation::{aggregate, proportional_weights, ua_weights};
use ufps_core::labels::{ClassSet, LabelMap, Provenance};
use ufps_core::metrics;
use ufps_core::model::{self, ModelLayout, ParamVector};
use ufps_core::pseudolabel::{gmt_refine, merge_pseudo, overwrite_ground_truth};
use ufps_core::report::{read_metrics_csv, write_metrics_csv, MetricRow};
use ufps_core::susam::{extra_mask, merge_global_mask, topk_count, topk_mask, GradientMask};
use ufps_core::uncertainty::{
    bank_stats, schedule_weight, SchedulerConfig, SchedulerKind, UncertaintyBank,
};

fn small_layout() -> ModelLayout {
    ModelLayout::new(2, 2, 3)
}

fn param_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, small_layout().param_count())
}

fn labels(classes: Vec<u8>, w: usize) -> LabelMap {
    let h = classes.len() / w;
    LabelMap::uniform(w, h, classes, Provenance::Pseudo).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn proportional_weights_sum_to_one(counts in prop::collection::vec(1usize..1000, 1..8)) {
        let w = proportional_weights(&counts).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn ua_weights_form_a_distribution(
        mu in prop::collection::vec(0.0..2.0f64, 1..6),
        var_scale in 0.0..0.1f64,
    ) {
        let n = mu.len();
        let var: Vec<f64> = mu.iter().map(|m| m * var_scale).collect();
        let a = vec![1.0 / n as f64; n];
        let w = ua_weights(&mu, &var, &a, 0.05, 0.001).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&x| x >= 0.0 && x <= 1.0));
        // Lower uncertainty never receives a smaller weight under equal sizes.
        for i in 0..n {
            for j in 0..n {
                if mu[i] < mu[j] && var[i] <= var[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn aggregation_of_identical_models_is_identity(v in param_values(), k in 1usize..5) {
        let layout = small_layout();
        let p = ParamVector::from_values(layout, v.clone()).unwrap();
        let refs: Vec<&ParamVector> = (0..k).map(|_| &p).collect();
        let w = vec![1.0 / k as f64; k];
        let out = aggregate(&refs, &w, None).unwrap();
        for (a, b) in out.values().iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_is_permutation_invariant(vs in prop::collection::vec(param_values(), 1..=5), seed in any::<u64>()) {
        let layout = small_layout();
        let ps: Vec<ParamVector> =
            vs.iter().map(|v| ParamVector::from_values(layout, v.clone()).unwrap()).collect();
        let counts: Vec<usize> = (0..ps.len()).map(|i| 3 + (seed as usize >> i) % 7).collect();
        let w = proportional_weights(&counts).unwrap();
        let refs: Vec<&ParamVector> = ps.iter().collect();
        let base = aggregate(&refs, &w, None).unwrap();
        let rev_refs: Vec<&ParamVector> = ps.iter().rev().collect();
        let rev_w: Vec<f64> = w.iter().rev().copied().collect();
        let rev = aggregate(&rev_refs, &rev_w, None).unwrap();
        for (a, b) in base.values().iter().zip(rev.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_keeps_the_most_recent_values(values in prop::collection::vec(0.0..5.0f64, 1..60), cap in 1usize..20) {
        let mut bank = UncertaintyBank::new(cap);
        values.iter().for_each(|&v| bank.push(v));
        let kept: Vec<f64> = bank.entries().collect();
        let start = values.len().saturating_sub(cap);
        prop_assert_eq!(kept, values[start..].to_vec());
        prop_assert_eq!(bank.inserted(), values.len() as u64);
    }

    #[test]
    fn bank_stats_are_ordered(values in prop::collection::vec(0.0..5.0f64, 1..40), t in 0.01..0.99f64) {
        let mut bank = UncertaintyBank::new(values.len());
        values.iter().for_each(|&v| bank.push(v));
        let s = bank_stats(&bank, t).unwrap();
        prop_assert!(s.min <= s.quantile && s.quantile <= s.max);
        prop_assert!(s.min <= s.mean + 1e-12 && s.mean <= s.max + 1e-12);
        prop_assert!(s.variance >= 0.0);
    }

    #[test]
    fn ts_and_bd_weights_decrease_with_uncertainty(
        values in prop::collection::vec(0.0..1.0f64, 3..30),
        r in 0usize..100,
        a in 0.0..1.0f64,
        b in 0.0..1.0f64,
    ) {
        let mut bank = UncertaintyBank::new(values.len());
        values.iter().for_each(|&v| bank.push(v));
        let s = bank_stats(&bank, 0.9).unwrap();
        prop_assume!(!s.is_degenerate());
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let bd = SchedulerConfig { kind: SchedulerKind::BD, ..SchedulerConfig::default() };
        prop_assert!(schedule_weight(lo, &s, r, 100, &bd) >= schedule_weight(hi, &s, r, 100, &bd) - 1e-12);
        // TS is monotone within each side of the tail quantile.
        let ts = SchedulerConfig { kind: SchedulerKind::TS, ..SchedulerConfig::default() };
        if (lo > s.quantile) == (hi > s.quantile) {
            prop_assert!(schedule_weight(lo, &s, r, 100, &ts) >= schedule_weight(hi, &s, r, 100, &ts) - 1e-12);
        }
    }

    #[test]
    fn ts_weight_of_tail_samples_grows_over_training(values in prop::collection::vec(0.0..1.0f64, 3..30), r in 0usize..99) {
        let mut bank = UncertaintyBank::new(values.len());
        values.iter().for_each(|&v| bank.push(v));
        let s = bank_stats(&bank, 0.5).unwrap();
        prop_assume!(!s.is_degenerate());
        let ts = SchedulerConfig { kind: SchedulerKind::TS, tail_quantile: 0.5, ..SchedulerConfig::default() };
        let u = s.max;
        prop_assume!(u > s.quantile);
        prop_assert!(schedule_weight(u, &s, r + 1, 100, &ts) > schedule_weight(u, &s, r, 100, &ts));
    }

    #[test]
    fn topk_selects_the_largest_magnitudes(g in prop::collection::vec(-10.0..10.0f64, 1..80), f in 0.0..1.0f64) {
        let m = topk_mask(&g, f);
        prop_assert_eq!(m.popcount(), topk_count(g.len(), f));
        let min_in = m.indices().map(|i| g[i].abs()).fold(f64::INFINITY, f64::min);
        let max_out = (0..g.len()).filter(|&i| !m.get(i)).map(|i| g[i].abs()).fold(0.0, f64::max);
        if m.popcount() > 0 && m.popcount() < g.len() {
            prop_assert!(min_in >= max_out);
        }
    }

    #[test]
    fn global_mask_is_symmetric_disagreement(masks in prop::collection::vec(prop::collection::vec(any::<bool>(), 30), 1..6)) {
        let lib: Vec<GradientMask> = masks.iter().map(|m| GradientMask::from_bits(m.clone())).collect();
        let g = merge_global_mask(&lib).unwrap();
        prop_assert_eq!(g.bits().to_vec(), common::global_mask(&masks));
        if masks.len() == 1 {
            prop_assert_eq!(g.popcount(), 0);
        }
        let mut rev = lib.clone();
        rev.reverse();
        prop_assert_eq!(merge_global_mask(&rev).unwrap(), g);
    }

    #[test]
    fn extra_mask_stays_inside_the_global_complement(
        local in prop::collection::vec(any::<bool>(), 40),
        global in prop::collection::vec(any::<bool>(), 40),
        f in 0.0..0.5f64,
        seed in any::<u64>(),
    ) {
        let l = GradientMask::from_bits(local.clone());
        let g = GradientMask::from_bits(global.clone());
        let e = extra_mask(&l, &g, 40, f, seed).unwrap();
        prop_assert_eq!(e.popcount(), common::extra_mask_size(&local, &global, f));
        prop_assert!(e.indices().all(|i| !local[i] && global[i]));
        prop_assert_eq!(extra_mask(&l, &g, 40, f, seed).unwrap(), e);
    }

    #[test]
    fn dice_and_jaccard_are_linked(pred in prop::collection::vec(0u8..3, 36), gt in prop::collection::vec(0u8..3, 36), c in 0u8..3) {
        let (p, g) = (labels(pred, 6), labels(gt, 6));
        let cm = metrics::confusion(&p, &g, c);
        let (d, j) = (metrics::dice(&cm), metrics::jaccard(&cm));
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((0.0..=1.0).contains(&metrics::sensitivity(&cm)));
        prop_assert!((0.0..=1.0).contains(&metrics::specificity(&cm)));
        prop_assert!(metrics::rve(&cm) >= 0.0);
    }

    #[test]
    fn perfect_prediction_scores_perfectly(gt in prop::collection::vec(0u8..4, 49), c in 1u8..4) {
        let g = labels(gt, 7);
        let m = metrics::class_metrics(g.classes(), g.classes(), 7, 7, c);
        prop_assert_eq!(m.dice, 1.0);
        prop_assert_eq!(m.hd, 0.0);
        prop_assert_eq!(m.rve, 0.0);
    }

    #[test]
    fn hausdorff_is_a_symmetric_distance(
        a in prop::collection::vec((0usize..10, 0usize..10), 0..12),
        b in prop::collection::vec((0usize..10, 0usize..10), 0..12),
    ) {
        let diag = metrics::grid_diagonal(10, 10);
        let ab = metrics::hausdorff(&a, &b, diag);
        prop_assert_eq!(ab, metrics::hausdorff(&b, &a, diag));
        prop_assert!((ab - common::hausdorff(&a, &b, diag)).abs() < 1e-12);
        prop_assert!(ab >= 0.0 && ab <= diag + 1e-12);
        prop_assert_eq!(metrics::hausdorff(&a, &a, diag), 0.0);
    }

    #[test]
    fn pseudo_merge_respects_ordering(maps in prop::collection::vec(prop::collection::vec(0u8..5, 16), 1..4)) {
        let lm: Vec<LabelMap> = maps.iter().map(|m| labels(m.clone(), 4)).collect();
        let merged = merge_pseudo(&lm, &[1, 2, 3, 4]);
        for i in 0..16 {
            let claimed: Vec<u8> = maps.iter().map(|m| m[i]).filter(|&c| c != 0).collect();
            let want = claimed.iter().copied().max().unwrap_or(0);
            prop_assert_eq!(merged.class_at(i), want);
        }
    }

    #[test]
    fn ground_truth_overwrite_keeps_annotated_classes_exact(
        pseudo in prop::collection::vec(0u8..5, 25),
        gt in prop::collection::vec(0u8..5, 25),
        mask in 1u32..15,
    ) {
        let annotated: ClassSet = (1..5u8).filter(|c| mask & (1 << (c - 1)) != 0).collect();
        let out = overwrite_ground_truth(&labels(pseudo.clone(), 5), &labels(gt.clone(), 5), annotated);
        for i in 0..25 {
            if annotated.contains(gt[i]) {
                prop_assert_eq!(out.class_at(i), gt[i]);
                prop_assert_eq!(out.provenance_at(i), Provenance::GroundTruth);
            } else if annotated.contains(pseudo[i]) {
                prop_assert_eq!(out.class_at(i), 0);
            } else {
                prop_assert_eq!(out.class_at(i), pseudo[i]);
            }
        }
    }

    #[test]
    fn gmt_output_never_adds_foreground(
        global in prop::collection::vec(0u8..5, 25),
        teacher in prop::collection::vec(0u8..5, 25),
        t in 0.0..1.0f64,
    ) {
        let out = gmt_refine(&labels(global.clone(), 5), &labels(teacher, 5), t);
        for i in 0..25 {
            let c = out.class_at(i);
            prop_assert!(c == 0 || c == global[i]);
        }
    }

    #[test]
    fn softmax_outputs_are_distributions(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let layout = ModelLayout::new(4, 3, 5);
        let p = ParamVector::init(layout, seed);
        let grid = common::random_grid(&mut rng, 5, 3);
        let q = model::forward(&p, &grid).unwrap();
        for px in 0..15 {
            let s: f64 = q.pixel(px).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_csv_round_trips(rows in prop::collection::vec(
        (0usize..500, 0usize..4, 1u8..5, 0.0..1.0f64, 0.0..90.0f64, 0.0..1.0f64, 0.0..3.0f64),
        0..20,
    )) {
        let rows: Vec<MetricRow> = rows
            .into_iter()
            .map(|(round, client, class, dice, hd, jc, rve)| MetricRow {
                run: "run=1".into(),
                round,
                client,
                class,
                dice,
                hd,
                jc,
                sen: dice,
                spe: 1.0 - jc,
                rve,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &rows).unwrap();
        prop_assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }
}
