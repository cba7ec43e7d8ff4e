//! Property tests for the algebraic invariants the solvers rely on.

use deqmd::bregman::{bregman_divergence, inverse_mirror_map, mirror_map, Potential};
use deqmd::forward::{sample_poisson, ConvolutionOperator, NoiseConfig};
use deqmd::image::{Image, Kernel, Seed};
use deqmd::metrics::psnr;
use deqmd::regularizers::{Cotangent, RedArch, Regularizer};
use proptest::prelude::*;

fn positive_image(n: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(1e-4f64..1.0, n * n)
        .prop_map(move |v| Image::from_vec(n, n, 1, v).unwrap())
}

fn any_image(n: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(-2.0f64..2.0, n * n)
        .prop_map(move |v| Image::from_vec(n, n, 1, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clamp_positive_is_idempotent(x in any_image(5), eps in 1e-9f64..1e-2) {
        let once = x.clamp_positive(eps).unwrap();
        let twice = once.clamp_positive(eps).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn mirror_maps_invert_on_positive_images(x in positive_image(5)) {
        let back = inverse_mirror_map(
            Potential::Burg,
            &mirror_map(Potential::Burg, &x).unwrap(),
        ).unwrap();
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }

    #[test]
    fn bregman_divergence_is_nonnegative_and_definite(
        x1 in positive_image(4),
        x2 in positive_image(4),
    ) {
        let d = bregman_divergence(Potential::Burg, &x1, &x2).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(bregman_divergence(Potential::Burg, &x1, &x1).unwrap(), 0.0);
    }

    #[test]
    fn convolution_adjoint_identity_holds(
        x in positive_image(6),
        y in positive_image(6),
        kseed in 0u64..1000,
    ) {
        let mut rng = Seed(kseed).rng();
        use rand::Rng;
        let w = ndarray::Array2::from_shape_fn((3, 3), |_| rng.random::<f64>());
        let k = Kernel::new(w, (1, 1)).unwrap();
        let op = ConvolutionOperator::new(k, (6, 6, 1)).unwrap();
        let lhs = op.apply(&x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&op.adjoint(&y).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn poisson_replay_is_bit_exact(seed in 0u64..10_000, scale in 1.0f64..200.0) {
        let mean = Image::constant(6, 6, 1, 0.5).unwrap();
        let cfg = NoiseConfig::new(scale).unwrap();
        let a = sample_poisson(&mean, cfg, Seed(seed)).unwrap();
        let b = sample_poisson(&mean, cfg, Seed(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn psnr_is_symmetric_under_joint_permutation(
        x in positive_image(4),
        y in positive_image(4),
    ) {
        let base = psnr(&x, &y).unwrap();
        let xr: Vec<f64> = x.as_slice().iter().rev().copied().collect();
        let yr: Vec<f64> = y.as_slice().iter().rev().copied().collect();
        let p = psnr(
            &Image::from_vec(4, 4, 1, xr).unwrap(),
            &Image::from_vec(4, 4, 1, yr).unwrap(),
        ).unwrap();
        prop_assert!((base - p).abs() < 1e-12);
    }
}

proptest! {
    // heavier cases: fewer samples
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn parameter_vjp_is_additive_in_the_cotangent(
        x in positive_image(5),
        c1 in -2.0f64..2.0,
        c2 in -2.0f64..2.0,
    ) {
        let arch = RedArch { width: 3, depth: 2, beta: 10.0 };
        let reg = Regularizer::red(arch.clone(), arch.init_params(Seed(7))).unwrap();
        let va = reg.vjp_params(&x, &Cotangent::Value(c1)).unwrap();
        let vb = reg.vjp_params(&x, &Cotangent::Value(c2)).unwrap();
        let vsum = reg.vjp_params(&x, &Cotangent::Value(c1 + c2)).unwrap();
        for ((a, b), s) in va.data().iter().zip(vb.data()).zip(vsum.data()) {
            prop_assert!((a + b - s).abs() <= 1e-10 * s.abs().max(1e-12));
        }
    }
}
