use filterprune::graph::{ArchGraph, ResNetShape};
use filterprune::nn::Tensor;
use filterprune::objective::{pruning_ratios, CountBasis};
use filterprune::pruner::BinaryMask;
use filterprune::surgery::{certify_equivalence, extract, plan_surgery, random_inputs};
use filterprune::verify::randomize_bn;
use filterprune::zoo::{build_resnet, build_resnet_shape, ResNet, Residual, Shortcut};
use filterprune::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trained_looking(depth: usize, seed: u64) -> (ResNet, ArchGraph, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut m, g) = build_resnet(depth, 10, &mut rng).unwrap();
    randomize_bn(&mut m, &mut rng);
    (m, g, rng)
}

fn random_masks(g: &ArchGraph, rng: &mut ChaCha8Rng, keep: f64) -> Vec<BinaryMask> {
    g.prunable_specs()
        .iter()
        .map(|s| BinaryMask {
            bits: (0..s.filters).map(|_| rng.random_bool(keep)).collect(),
        })
        .collect()
}

/// Conv weights of the compact model, counted array by array.
fn enumerate_conv_weights(m: &ResNet) -> u64 {
    m.named_tensors()
        .iter()
        .filter(|(n, _, _)| n.ends_with(".conv.weight"))
        .map(|(_, _, d)| d.len() as u64)
        .sum()
}

fn enumerate_all_params(m: &ResNet) -> u64 {
    m.named_tensors()
        .iter()
        .filter(|(n, _, _)| !n.contains("running"))
        .map(|(_, _, d)| d.len() as u64)
        .sum()
}

#[test]
fn random_masks_extract_equivalently() {
    let (m, g, mut rng) = trained_looking(20, 3);
    let mut eliminated = 0;
    for cfg in 0..8 {
        let keep = rng.random_range(0.2..0.95);
        let mut masks = random_masks(&g, &mut rng, keep);
        if cfg % 3 == 0 {
            // Kill the first conv of some block to force elimination.
            let b = rng.random_range(0..g.blocks.len());
            masks[1 + 2 * b] = BinaryMask::zeros(masks[1 + 2 * b].len());
        }
        let plan = plan_surgery(&g, &masks).unwrap();
        eliminated += plan.eliminated.len();
        let c = extract(&m, &g, &plan).unwrap();
        let rep = certify_equivalence(&m, &masks, &c, 100, 1e-5, cfg).unwrap();
        assert!(rep.max_deviation <= 1e-5);
        assert_eq!(
            enumerate_conv_weights(&c),
            pruning_ratios(&g, &masks, CountBasis::ConvOnly)
                .unwrap()
                .kept_params
        );
        assert_eq!(
            enumerate_all_params(&c),
            pruning_ratios(&g, &masks, CountBasis::WithBnFc)
                .unwrap()
                .kept_params
        );
        assert_eq!(
            c.count_params(CountBasis::WithBnFc),
            enumerate_all_params(&c)
        );
    }
    assert!(eliminated >= 3);
}

#[test]
fn all_ones_extraction_is_identity_and_idempotent() {
    let (m, g, _) = trained_looking(20, 4);
    let ones = g.all_ones_masks();
    let plan = plan_surgery(&g, &ones).unwrap();
    assert!(plan.eliminated.is_empty());
    assert!(plan.keep.iter().zip(&ones).all(|(k, m)| k.len() == m.len()));
    let once = extract(&m, &g, &plan).unwrap();
    assert_eq!(once, m);
    let twice = extract(&once, &g, &plan).unwrap();
    assert_eq!(twice, once);
    let rep = certify_equivalence(&m, &ones, &once, 10, 0.0, 0).unwrap();
    assert_eq!(rep.max_deviation, 0.0);
}

#[test]
fn corrupted_weight_fails_certification() {
    let (m, g, mut rng) = trained_looking(20, 5);
    let masks = random_masks(&g, &mut rng, 0.7);
    let plan = plan_surgery(&g, &masks).unwrap();
    let mut c = extract(&m, &g, &plan).unwrap();
    c.stem.conv.weight[0] += 0.5;
    match certify_equivalence(&m, &masks, &c, 20, 1e-5, 1) {
        Err(Error::Certification {
            max_deviation,
            tol,
            worst_trial,
        }) => {
            assert!(max_deviation > tol);
            assert!(worst_trial < 20);
        }
        other => panic!("expected certification failure, got {other:?}"),
    }
}

#[test]
fn extraction_requires_the_unpruned_model() {
    let (m, g, mut rng) = trained_looking(20, 6);
    let masks = random_masks(&g, &mut rng, 0.5);
    let plan = plan_surgery(&g, &masks).unwrap();
    let c = extract(&m, &g, &plan).unwrap();
    assert!(matches!(extract(&c, &g, &plan), Err(Error::Config(_))));
}

#[test]
fn eliminated_block_reduces_to_gated_shortcut() {
    // With a zero batch-norm offset and mean the eliminated branch contributes nothing,
    // so the block computes relu(g(shortcut(x))).
    let shape = ResNetShape {
        depth: 8,
        num_classes: 4,
        base_width: 4,
        image_size: 8,
        in_channels: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut m, g) = build_resnet_shape(&shape, &mut rng).unwrap();
    randomize_bn(&mut m, &mut rng);
    if let Residual::Active { conv2, .. } = &mut m.blocks[0].residual {
        conv2.bn.beta.iter_mut().for_each(|b| *b = 0.0);
        conv2.bn.running_mean.iter_mut().for_each(|m| *m = 0.0);
    }
    let mut masks = g.all_ones_masks();
    masks[1] = BinaryMask::zeros(4);
    masks[2] = BinaryMask::from_bits(&[1, 0, 1, 1]);
    let plan = plan_surgery(&g, &masks).unwrap();
    assert_eq!(plan.eliminated, vec![0]);
    let c = extract(&m, &g, &plan).unwrap();
    assert!(c.blocks[0].is_eliminated());
    let Shortcut::Identity { map } = &c.blocks[0].shortcut else {
        panic!("identity shortcut expected")
    };
    assert_eq!(map, &vec![Some(0), Some(2), Some(3)]);
    let x = random_inputs(&m, 5, 9);
    let branches = c.block_branches_eval(&x, None).unwrap();
    let (sc, fx) = &branches[0];
    assert!(fx.data.iter().all(|v| v.abs() < 1e-6));
    // The stem is unpruned here, so the shortcut must be channels {0, 2, 3} of its output.
    let mut stem_out = c.stem.bn.forward_eval(&c.stem.conv.forward(&x));
    stem_out.relu_inplace();
    let mut manual = Tensor::zeros(5, 3, 8, 8);
    for i in 0..5 {
        for (j, &src) in [0usize, 2, 3].iter().enumerate() {
            let off = (i * 3 + j) * 64;
            manual.data[off..off + 64].copy_from_slice(stem_out.plane(i, src));
        }
    }
    let expected = sc.clone();
    assert!(expected.max_abs_diff(&manual) < 1e-6);
}

#[test]
fn fully_pruned_network_still_certifies() {
    let (m, g, _) = trained_looking(20, 8);
    let masks: Vec<BinaryMask> = g
        .prunable_specs()
        .iter()
        .map(|s| BinaryMask::zeros(s.filters))
        .collect();
    let plan = plan_surgery(&g, &masks).unwrap();
    assert_eq!(plan.eliminated.len(), g.blocks.len());
    let c = extract(&m, &g, &plan).unwrap();
    certify_equivalence(&m, &masks, &c, 10, 1e-5, 3).unwrap();
    assert_eq!(c.count_params(CountBasis::ConvOnly), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn small_resnets_extract_equivalently(seed in any::<u64>(), keep in 0.0f64..1.0) {
        let shape = ResNetShape { depth: 8, num_classes: 3, base_width: 3, image_size: 8, in_channels: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut m, g) = build_resnet_shape(&shape, &mut rng).unwrap();
        randomize_bn(&mut m, &mut rng);
        let masks = random_masks(&g, &mut rng, keep);
        let plan = plan_surgery(&g, &masks).unwrap();
        let c = extract(&m, &g, &plan).unwrap();
        let rep = certify_equivalence(&m, &masks, &c, 20, 1e-5, seed).unwrap();
        prop_assert!(rep.max_deviation <= 1e-5);
        prop_assert_eq!(c.count_params(CountBasis::WithBnFc), pruning_ratios(&g, &masks, CountBasis::WithBnFc).unwrap().kept_params);
    }
}
