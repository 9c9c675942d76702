use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

use rkf_core::eval::{compute_mma, MatchSet};
use rkf_core::geometry::{
    rotate_image, rotate_kernel, sample_homography, AugmentConfig, KernelInterp, RotationAngle,
};
use rkf_core::io::{decode_checkpoint, decode_manifest, decode_pgm, encode_checkpoint, encode_manifest, encode_pgm, ManifestEntry};
use rkf_core::mofa::MofaTeacher;
use rkf_core::net::{joint_loss, sample_correspondence_features, Keypoint, Model, ModelConfig, Variant};
use rkf_core::rkf::{check_equivariance, RkfLayer};
use rkf_core::synth::quantize;
use rkf_core::tensor::{conv2d, depth_to_space, l2_normalize_channels, space_to_depth, ConvKernel, Padding, Shape, Tensor};

fn noise(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn kernel(c_out: usize, c_in: usize, k: usize, seed: u64) -> ConvKernel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    ConvKernel::new(noise(Shape::new(c_out, c_in, k, k), seed), (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap()
}

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        trunk: vec![4],
        head: 4,
        desc_dim: 8,
        r: 4,
        kernel: 3,
        variant,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quarter_turns_compose(q1 in 0usize..4, q2 in 0usize..4, n in 2usize..12, seed in any::<u64>()) {
        let x = noise(Shape::new(1, 2, n, n), seed);
        let (a, _) = rotate_image(&x, RotationAngle::quarter_turns_of(q1));
        let (ab, _) = rotate_image(&a, RotationAngle::quarter_turns_of(q2));
        let composed = RotationAngle::quarter_turns_of(q1).compose(&RotationAngle::quarter_turns_of(q2));
        let (direct, mask) = rotate_image(&x, composed);
        prop_assert!(mask.all());
        prop_assert_eq!(ab, direct);
    }

    #[test]
    fn rotation_then_inverse_is_identity(n in 1usize..9, order in 1usize..9, seed in any::<u64>()) {
        let angle = RotationAngle::from_index(n, order).unwrap();
        let back = angle.compose(&angle.inverse());
        prop_assert!((back.theta().rem_euclid(std::f64::consts::TAU)).abs() < 1e-12);
        let k = kernel(2, 2, 3, seed);
        let once = rotate_kernel(&k, RotationAngle::quarter_turns_of(1), KernelInterp::Exact90).unwrap();
        let mut four = k.clone();
        for _ in 0..4 {
            four = rotate_kernel(&four, RotationAngle::quarter_turns_of(1), KernelInterp::Exact90).unwrap();
        }
        prop_assert_eq!(&four, &k);
        let bilinear = rotate_kernel(&k, RotationAngle::quarter_turns_of(1), KernelInterp::Bilinear).unwrap();
        prop_assert!(bilinear.weights().max_abs_diff(once.weights()).unwrap() < 1e-12);
    }

    #[test]
    fn reparameterization_is_exact(k in prop::sample::select(vec![3usize, 5]), n_rot in 1usize..9, seed in any::<u64>()) {
        let layer = RkfLayer::new(kernel(3, 2, k, seed), n_rot).unwrap();
        let x = noise(Shape::new(1, 2, 9, 9), seed.wrapping_add(1));
        let branched = layer.forward(&x).unwrap();
        let fused = conv2d(&x, &layer.reparameterize().unwrap(), Padding::SameZero).unwrap();
        prop_assert!(branched.max_abs_diff(&fused).unwrap() < 1e-10);
    }

    #[test]
    fn rkf_layer_is_quarter_turn_equivariant(k in prop::sample::select(vec![3usize, 5]), q in 1usize..4, size in 5usize..14, seed in any::<u64>()) {
        let layer = RkfLayer::new(kernel(2, 2, k, seed), 4).unwrap();
        let x = noise(Shape::new(1, 2, size, size), seed.wrapping_add(7));
        let dev = check_equivariance(|t| layer.forward(t), &x, RotationAngle::quarter_turns_of(q), 0).unwrap();
        prop_assert!(dev < 1e-10, "deviation {dev}");
    }

    #[test]
    fn normalized_descriptors_have_unit_norm(c in 1usize..9, seed in any::<u64>()) {
        let y = l2_normalize_channels(&noise(Shape::new(2, c, 3, 4), seed), 1e-8);
        for n in 0..2 {
            for i in 0..12 {
                let norm: f64 = (0..c).map(|ch| y.plane(n, ch)[i].powi(2)).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn space_depth_round_trip(r in 1usize..5, bh in 1usize..4, bw in 1usize..4, seed in any::<u64>()) {
        let x = noise(Shape::new(2, 1, r * bh, r * bw), seed);
        let d = space_to_depth(&x, r).unwrap();
        prop_assert_eq!(d.shape(), Shape::new(2, r * r, bh, bw));
        prop_assert_eq!(depth_to_space(&d, r).unwrap(), x);
    }

    #[test]
    fn homography_inverse_round_trips(seed in any::<u64>(), x in 0.0f64..64.0, y in 0.0f64..64.0) {
        let h = sample_homography(&AugmentConfig::default(), seed, 64, 64).unwrap();
        let there = h.apply((x, y)).unwrap();
        let back = h.inverse().apply(there).unwrap();
        prop_assert!((back.0 - x).abs() < 1e-8 && (back.1 - y).abs() < 1e-8);
        let id = h.inverse().after(&h).unwrap();
        let p = id.apply((x, y)).unwrap();
        prop_assert!((p.0 - x).abs() < 1e-8 && (p.1 - y).abs() < 1e-8);
    }

    #[test]
    fn pgm_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let raw = noise(Shape::new(1, 1, h, w), seed).map(|v| (v + 1.0) / 2.0);
        let decoded: Tensor<f64> = decode_pgm(&encode_pgm(&raw)).unwrap();
        prop_assert!(decoded.max_abs_diff(&raw).unwrap() <= 0.5 / 65535.0 + 1e-15);
        let quantized = raw.map(quantize);
        let again: Tensor<f64> = decode_pgm(&encode_pgm(&quantized)).unwrap();
        prop_assert_eq!(again, quantized);
    }

    #[test]
    fn checkpoint_round_trip(variant in prop::sample::select(vec![0usize, 1, 2]), seed in any::<u64>(), note in "[a-z=0-9 ]{0,40}") {
        let variant = [Variant::Base, Variant::Rkf { n_rotations: 4 }, Variant::Rkf { n_rotations: 8 }][variant];
        let model = Model::<f32>::init(small_config(variant), seed).unwrap();
        let (back, prov) = decode_checkpoint(&encode_checkpoint(&model, &note)).unwrap();
        prop_assert_eq!(back, model);
        prop_assert_eq!(prov, note);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected(seed in any::<u64>(), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let model = Model::<f32>::init(small_config(Variant::Base), seed).unwrap();
        let mut bytes = encode_checkpoint(&model, "seed=1");
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn manifest_round_trip(seeds in prop::collection::vec(any::<u64>(), 0..6)) {
        let entries: Vec<ManifestEntry> = seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| ManifestEntry {
                a: PathBuf::from(format!("pairs/{i}_a.pgm")),
                b: PathBuf::from(format!("pairs/{i}_b.pgm")),
                h: sample_homography(&AugmentConfig::default(), s, 64, 64).unwrap(),
                seed: s,
            })
            .collect();
        let text = encode_manifest(&entries, &["generated".to_string()]);
        prop_assert_eq!(decode_manifest(&text).unwrap(), entries);
    }

    #[test]
    fn mma_is_monotone_in_threshold(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = sample_homography(&AugmentConfig::default(), seed, 64, 64).unwrap();
        let kp = |rng: &mut ChaCha8Rng| Keypoint { x: rng.gen_range(0.0..64.0), y: rng.gen_range(0.0..64.0), score: 1.0 };
        let a: Vec<Keypoint> = (0..n).map(|_| kp(&mut rng)).collect();
        let b: Vec<Keypoint> = (0..n).map(|_| kp(&mut rng)).collect();
        let matches = MatchSet { matches: (0..n).map(|i| (i, rng.gen_range(0..n), 0.0)).collect() };
        let thresholds: Vec<f64> = (1..=40).map(|t| t as f64 * 0.5).collect();
        let curve = compute_mma(&matches, &a, &b, &h, &thresholds).unwrap();
        prop_assert!(curve.accuracy.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(curve.accuracy.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn joint_loss_weights_sum_to_one(seed in any::<u64>(), m in 2usize..12) {
        let model = Model::<f64>::init(small_config(Variant::Base), seed).unwrap();
        let a = noise(Shape::new(1, 1, 16, 16), seed).map(|v| v.abs());
        let b = noise(Shape::new(1, 1, 16, 16), seed.wrapping_add(3)).map(|v| v.abs());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<_> = (0..m)
            .map(|_| ((rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0)), (rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0))))
            .collect();
        let oa = model.forward_train(&a).unwrap().0;
        let ob = model.forward_train(&b).unwrap().0;
        let jl = joint_loss(&sample_correspondence_features(&oa, &ob, &coords).unwrap(), 1.0, 4.0).unwrap();
        prop_assert!((jl.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(jl.weights.iter().all(|&w| w > 0.0));
        prop_assert!(jl.value >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mofa_commutes_with_quarter_turns(q in 1usize..4, seed in any::<u64>(), rkf in any::<bool>()) {
        let variant = if rkf { Variant::Rkf { n_rotations: 4 } } else { Variant::Base };
        let teacher = MofaTeacher::new(Model::<f32>::init(small_config(variant), seed).unwrap(), 4).unwrap();
        let x = noise(Shape::new(1, 1, 16, 16), seed).map(|v| v.abs()).cast::<f32>();
        let angle = RotationAngle::quarter_turns_of(q);
        let of_rotated = teacher.forward(&rotate_image(&x, angle).0).unwrap();
        let plain = teacher.forward(&x).unwrap();
        let (desc, _) = rotate_image(&plain.desc, angle);
        let (score, _) = rotate_image(&plain.score, angle);
        prop_assert!(of_rotated.desc.max_abs_diff(&desc).unwrap() < 1e-5);
        prop_assert!(of_rotated.score.max_abs_diff(&score).unwrap() < 1e-5);
    }
}
