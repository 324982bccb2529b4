mod common;

use apsense_core::abm::*;
use apsense_core::nn::{relu, sigmoid, Conv2d, FeatureTensor};
use common::{abm_gradient_max_error, naive_conv};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(variant: AbmVariant) -> AbmConfig {
    AbmConfig {
        variant,
        compression_ratio: 4,
    }
}

#[test]
fn gradients_match_finite_differences() {
    for variant in [AbmVariant::B, AbmVariant::C, AbmVariant::D] {
        for seed in 0..3 {
            let err = abm_gradient_max_error(variant, seed);
            assert!(err < 1e-4, "variant {} seed {seed}: {err}", variant.as_str());
        }
    }
}

#[test]
fn variant_a_identity_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = AbmWeights::init(8, &cfg(AbmVariant::A), &mut rng).unwrap();
    let x = FeatureTensor::random(8, 5, 3, &mut rng);
    let out = abm_forward(&x, &cfg(AbmVariant::A), &w).unwrap();
    assert_eq!(out.data, x.data);
}

#[test]
fn zero_branches_double_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = AbmWeights::zeros(8, &cfg(AbmVariant::C)).unwrap();
    let x = FeatureTensor::random(8, 4, 6, &mut rng);
    let out = abm_forward(&x, &cfg(AbmVariant::C), &w).unwrap();
    for (o, i) in out.data.iter().zip(&x.data) {
        assert!((o - 2.0 * i).abs() < 1e-10);
    }
}

#[test]
fn vrecfield_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = AbmWeights::init(8, &cfg(AbmVariant::C), &mut rng).unwrap();
    let ca = FeatureTensor::random(8, 6, 5, &mut rng);
    let b = &w.spatial.branches[0];
    // Batch norms are identity here, so F' is the plain sum of the three convs.
    let mut fprime = naive_conv(&ca, &b.conv1);
    fprime.add_assign(&naive_conv(&ca, &b.conv3));
    fprime.add_assign(&naive_conv(&ca, &b.conv5));
    let r = naive_conv(&fprime, &b.tail3).map(relu);
    let expect = naive_conv(&r, &b.tail7).map(sigmoid);
    let got = v_recfield(&ca, b).unwrap();
    assert_eq!(got.shape(), (6, 5, 2));
    for (g, e) in got.data.iter().zip(&expect.data) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn point_attention_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = AbmWeights::init(8, &cfg(AbmVariant::C), &mut rng).unwrap();
    let x = FeatureTensor::random(8, 3, 4, &mut rng);
    let hidden = naive_conv(&x, &w.point.conv_a).map(relu);
    let map = naive_conv(&hidden, &w.point.conv_b).map(sigmoid);
    let (got_map, pa) = point_attention(&x, &w.point).unwrap();
    for i in 0..x.data.len() {
        assert!((got_map.data[i] - map.data[i]).abs() < 1e-12);
        assert!((pa.data[i] - map.data[i] * x.data[i]).abs() < 1e-12);
    }
}

#[test]
fn channel_attention_matches_pooled_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = AbmWeights::init(8, &cfg(AbmVariant::C), &mut rng).unwrap();
    let x = FeatureTensor::random(8, 3, 3, &mut rng);
    let mlp = |v: &[f64]| {
        let h: Vec<f64> = w.channel.fc1.forward(v).into_iter().map(relu).collect();
        w.channel.fc2.forward(&h)
    };
    let maxp: Vec<f64> = (0..8).map(|c| x.plane(c).iter().copied().fold(f64::MIN, f64::max)).collect();
    let avgp: Vec<f64> = (0..8).map(|c| x.plane(c).iter().sum::<f64>() / 9.0).collect();
    let pooled: Vec<f64> = maxp.iter().zip(&avgp).map(|(a, b)| a + b).collect();
    let m = mlp(&pooled);
    let (map, ca) = channel_attention(&x, &w.channel).unwrap();
    for c in 0..8 {
        let expect = sigmoid(m[c]);
        assert!((map[c] - expect).abs() < 1e-12);
        for (a, b) in ca.plane(c).iter().zip(x.plane(c)) {
            assert!((a - expect * b).abs() < 1e-12);
        }
    }
}

#[test]
fn spatial_map_is_broadcast_over_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = AbmWeights::init(8, &cfg(AbmVariant::C), &mut rng).unwrap();
    let x = FeatureTensor::random(8, 4, 4, &mut rng);
    let (_, ca) = channel_attention(&x, &w.channel).unwrap();
    let v1 = v_recfield(&ca, &w.spatial.branches[0]).unwrap();
    let v2 = v_recfield(&ca, &w.spatial.branches[1]).unwrap();
    let map = naive_conv(&v1.concat_channels(&v2), &w.spatial.fuse).map(sigmoid);
    let (got_map, sa) = spatial_attention(&ca, &x, &w.spatial).unwrap();
    assert_eq!(got_map.shape(), (4, 4, 1));
    for c in 0..8 {
        for i in 0..16 {
            assert!((got_map.data[i] - map.data[i]).abs() < 1e-12);
            assert!((sa.plane(c)[i] - map.data[i] * x.plane(c)[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn variant_d_adds_channel_term_to_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = AbmWeights::init(8, &cfg(AbmVariant::D), &mut rng).unwrap();
    let x = FeatureTensor::random(8, 4, 4, &mut rng);
    let c = abm_forward(&x, &cfg(AbmVariant::C), &w).unwrap();
    let d = abm_forward(&x, &cfg(AbmVariant::D), &w).unwrap();
    let b = abm_forward(&x, &cfg(AbmVariant::B), &w).unwrap();
    let (_, ca) = channel_attention(&x, &w.channel).unwrap();
    for i in 0..x.data.len() {
        assert!((d.data[i] - c.data[i] - ca.data[i]).abs() < 1e-12);
        assert!((c.data[i] - b.data[i] - x.data[i]).abs() < 1e-12);
    }
}

#[test]
fn mismatched_channels_are_rejected() {
    let w = AbmWeights::zeros(8, &cfg(AbmVariant::C)).unwrap();
    let x = FeatureTensor::zeros(16, 2, 2);
    assert!(abm_forward(&x, &cfg(AbmVariant::C), &w).is_err());
    assert!(AbmWeights::zeros(6, &cfg(AbmVariant::C)).is_err());
    let bad = Conv2d::zeros(3, 1, 3);
    assert!(bad.forward(&FeatureTensor::zeros(2, 2, 2)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn output_shape_and_finiteness(h in 1usize..7, w in 1usize..7, seed in any::<u64>(), v in 0usize..4) {
        let variant = [AbmVariant::A, AbmVariant::B, AbmVariant::C, AbmVariant::D][v];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = AbmWeights::init(8, &cfg(variant), &mut rng).unwrap();
        let x = FeatureTensor::random(8, h, w, &mut rng);
        let out = abm_forward(&x, &cfg(variant), &weights).unwrap();
        prop_assert_eq!(out.shape(), x.shape());
        prop_assert!(out.is_finite());
        let att = attention_outputs(&x, &weights).unwrap();
        prop_assert!(att.ca_map.iter().all(|m| *m > 0.0 && *m < 1.0));
        prop_assert!(att.sa_map.data.iter().chain(&att.pa_map.data).all(|m| *m >= 0.0 && *m <= 1.0));
    }
}
