use filterprune::analysis::{
    block_refinement, bound_factor, budget_chart_svg, budget_report, delta_eps, lemma1_check,
    refinement_ratio,
};
use filterprune::graph::{ArchGraph, ResNetShape};
use filterprune::objective::{pruning_ratios, CountBasis};
use filterprune::pruner::{BinaryMask, FeatureMaps, ScoreVector};
use filterprune::surgery::random_inputs;
use filterprune::zoo::build_resnet_shape;
use filterprune::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn maps(c: usize, hw: usize, data: Vec<f64>) -> FeatureMaps {
    FeatureMaps::new(c, 1, hw, data).unwrap()
}

/// Ratios recomputed elementwise with explicit channel lookups.
fn oracle_ratios(s: &[f64], x: &[f64], f: &[f64], hw: usize) -> (f64, f64) {
    let (mut nx, mut nf, mut sx, mut sf) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..s.len() {
        for p in 0..hw {
            let i = c * hw + p;
            nx += x[i].powi(2);
            nf += f[i].powi(2);
            sx += (s[c] * x[i]).powi(2);
            sf += (s[c] * f[i]).powi(2);
        }
    }
    (nf / nx, sf / sx)
}

#[test]
fn squared_bound_holds_on_ten_thousand_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = 0;
    for i in 0..10_000 {
        let c = rng.random_range(1..=6);
        let hw = rng.random_range(1..=9);
        let s: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..=1.05)).collect();
        let x: Vec<f64> = (0..c * hw).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f: Vec<f64> = (0..c * hw).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sv = ScoreVector::from_values("b", s.clone());
        let r = lemma1_check(
            &format!("b{i}"),
            &sv,
            &maps(c, hw, x.clone()),
            &maps(c, hw, f.clone()),
        )
        .unwrap();
        let (ou, os) = oracle_ratios(&s, &x, &f, hw);
        assert!((r.ratio_unscaled - ou).abs() <= 1e-12 * ou);
        assert!((r.ratio_scaled - os).abs() <= 1e-12 * os);
        let k = bound_factor(r.delta, r.eps);
        assert!((r.upper_bound - ou * k * k).abs() <= 1e-12 * r.upper_bound);
        violations += r.violation as usize;
    }
    assert_eq!(violations, 0);
}

#[test]
fn unsquared_interval_has_a_counterexample() {
    let s = ScoreVector::from_values("b", vec![0.5, 1.0]);
    let r = lemma1_check(
        "b",
        &s,
        &maps(2, 1, vec![1.0, 0.0]),
        &maps(2, 1, vec![0.0, 1.0]),
    )
    .unwrap();
    assert_eq!((r.ratio_unscaled, r.ratio_scaled), (1.0, 4.0));
    assert_eq!(r.bound_factor, 2.0);
    assert!(r.unsquared_violation);
    assert!(!r.violation);
    assert_eq!(r.upper_bound, 4.0);
}

#[test]
fn unit_scores_collapse_the_bounds() {
    let s = ScoreVector::from_values("b", vec![1.0; 3]);
    let r = lemma1_check(
        "b",
        &s,
        &maps(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 1.0]),
        &maps(3, 2, vec![0.5; 6]),
    )
    .unwrap();
    assert_eq!((r.delta, r.eps), (1.0, 0.0));
    assert_eq!(r.lower_bound, r.ratio_unscaled);
    assert_eq!(r.upper_bound, r.ratio_unscaled);
    assert_eq!(r.ratio_scaled, r.ratio_unscaled);
    assert!(!r.violation && !r.unsquared_violation);
}

#[test]
fn realized_eps_is_excess_above_one() {
    let s = ScoreVector::from_values("b", vec![0.25, 1.03, 0.9]);
    let (d, e) = delta_eps(&s).unwrap();
    assert_eq!(d, 0.25);
    assert!((e - 0.03).abs() < 1e-15);
    assert_eq!(
        delta_eps(&ScoreVector::from_values("b", vec![0.5, 0.7]))
            .unwrap()
            .1,
        0.0
    );
}

#[test]
fn degenerate_inputs_are_reported() {
    let dead = ScoreVector::from_values("b", vec![0.0, 1.0]);
    let x = maps(2, 1, vec![1.0, 1.0]);
    assert!(matches!(
        lemma1_check("b", &dead, &x, &x),
        Err(Error::Degenerate(_))
    ));
    let s = ScoreVector::from_values("b", vec![0.5, 1.0]);
    let zero = maps(2, 1, vec![0.0, 0.0]);
    assert!(matches!(
        refinement_ratio(&s, &zero, &x),
        Err(Error::Degenerate(_))
    ));
    assert!(matches!(
        lemma1_check("b", &ScoreVector::from_values("b", vec![1.0]), &x, &x),
        Err(Error::Config(_))
    ));
}

#[test]
fn block_records_cover_every_block() {
    let shape = ResNetShape {
        depth: 14,
        num_classes: 3,
        base_width: 4,
        image_size: 8,
        in_channels: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, g) = build_resnet_shape(&shape, &mut rng).unwrap();
    let scores: Vec<ScoreVector> = g
        .prunable_specs()
        .iter()
        .map(|sp| {
            ScoreVector::from_values(
                "l",
                (0..sp.filters)
                    .map(|_| rng.random_range(0.2..1.01))
                    .collect(),
            )
        })
        .collect();
    let recs = block_refinement(&m, &scores, &random_inputs(&m, 4, 3)).unwrap();
    assert_eq!(recs.len(), g.blocks.len());
    assert!(recs.iter().all(|r| !r.violation && r.ratio_unscaled > 0.0));
}

fn masks_from(g: &ArchGraph, bits: &[bool]) -> Vec<BinaryMask> {
    let mut it = bits.iter().cycle();
    g.prunable_specs()
        .iter()
        .map(|s| BinaryMask {
            bits: (0..s.filters).map(|_| *it.next().unwrap()).collect(),
        })
        .collect()
}

#[test]
fn dense_report_is_full() {
    let g = ArchGraph::resnet(&ResNetShape::cifar(20, 10)).unwrap();
    let rep = budget_report(&g, &g.all_ones_masks()).unwrap();
    assert!(rep
        .layers
        .iter()
        .all(|l| l.fraction == 1.0 && l.remaining == l.filters));
    assert_eq!(rep.remaining_filters, rep.total_filters);
    assert_eq!(rep.first_sparser_blocks, 0);
    assert_eq!(rep.ratios.param_ratio, 0.0);
    let svg = budget_chart_svg(&rep);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn hand_set_masks_give_popcounts() {
    let shape = ResNetShape {
        depth: 8,
        num_classes: 2,
        base_width: 4,
        image_size: 8,
        in_channels: 3,
    };
    let g = ArchGraph::resnet(&shape).unwrap();
    let mut masks = g.all_ones_masks();
    masks[1] = BinaryMask::from_bits(&[1, 0, 0, 0]);
    masks[2] = BinaryMask::from_bits(&[1, 1, 0, 1]);
    masks[3] = BinaryMask::zeros(8);
    let rep = budget_report(&g, &masks).unwrap();
    let counts: Vec<usize> = rep.layers.iter().map(|l| l.remaining).collect();
    assert_eq!(
        counts,
        masks.iter().map(BinaryMask::popcount).collect::<Vec<_>>()
    );
    assert!(rep.blocks[0].first_sparser && !rep.blocks[0].eliminated);
    assert!(rep.blocks[1].eliminated);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniform_scaling_cancels(
        s in prop::collection::vec(0.1f64..1.05, 1..6),
        k in 0.01f64..50.0,
        seed in any::<u64>(),
    ) {
        let c = s.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..c * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..c * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (x, f) = (maps(c, 4, x), maps(c, 4, f));
        let base = refinement_ratio(&ScoreVector::from_values("b", s.clone()), &x, &f).unwrap().1;
        let scaled = refinement_ratio(&ScoreVector::from_values("b", s.iter().map(|v| v * k).collect()), &x, &f).unwrap().1;
        prop_assert!((base - scaled).abs() <= 1e-12 * base);
        let uniform = refinement_ratio(&ScoreVector::from_values("b", vec![k; c]), &x, &f).unwrap();
        prop_assert!((uniform.0 - uniform.1).abs() <= 1e-12 * uniform.0);
    }

    #[test]
    fn report_reconciles_with_counts(bits in prop::collection::vec(any::<bool>(), 1..120)) {
        let g = ArchGraph::resnet(&ResNetShape::cifar(20, 10)).unwrap();
        let masks = masks_from(&g, &bits);
        let rep = budget_report(&g, &masks).unwrap();
        let pop: usize = masks.iter().map(BinaryMask::popcount).sum();
        prop_assert_eq!(rep.layers.iter().map(|l| l.remaining).sum::<usize>(), pop);
        prop_assert_eq!(rep.remaining_filters, pop);
        prop_assert_eq!(rep.total_filters, g.total_prunable_filters());
        prop_assert_eq!(&rep.ratios, &pruning_ratios(&g, &masks, CountBasis::ConvOnly).unwrap());
        prop_assert_eq!(&rep.ratios_with_bn_fc, &pruning_ratios(&g, &masks, CountBasis::WithBnFc).unwrap());
        let sparser = rep.blocks.iter().filter(|b| b.first_sparser).count();
        prop_assert_eq!(sparser, rep.first_sparser_blocks);
    }
}
