//! Randomised invariants across modules.

use ndarray::Array2;
use proptest::prelude::*;

use oatk::denoiser::{denoise, infer_noise, DenoiserArch, DenoiserModel};
use oatk::dsp::{bandpass, BandpassSpec};
use oatk::metrics::{contrast_resolution, snr, ChannelMask, RoiLabel, RoiMask};
use oatk::operator::DenseOperator;
use oatk::recon::{laplacian, reconstruct, LambdaScale, ReconConfig};
use oatk::unmix::{depth_profiles, nmf_factorize_matrix, NmfConfig};
use oatk::{seeded_rng, ArrayGeometry, ForwardOperator, GridSpec, ImageGrid, RngSeed, Sinogram};

fn normal(shape: (usize, usize), seed: u64, label: &str) -> Array2<f64> {
    let mut r = seeded_rng(RngSeed(seed), label);
    Array2::from_shape_simple_fn(shape, || r.normal())
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(a: &Array2<f64>) -> f64 {
    dot(a, a).sqrt()
}

fn sino(a: Array2<f64>) -> Sinogram {
    Sinogram::new(a, 40e6).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn forward_is_linear_and_matches_its_adjoint(
        n_d in 3usize..12, n in 6usize..20, n_t in 32usize..96, seed in any::<u64>(), a in -3.0f64..3.0,
    ) {
        let geom = ArrayGeometry { n_transducers: n_d, ..ArrayGeometry::desk_64() };
        let op = ForwardOperator::new(geom, GridSpec::square(n, 5e-3), n_t, 1600 - n_t as i64 / 2).unwrap();
        let x = normal((n, n), seed, "x");
        let z = normal((n, n), seed, "z");
        let y = normal((n_d, n_t), seed, "y");
        let mx = op.forward_array(&x);
        let lhs = dot(&mx, &y);
        let rhs = dot(&x, &op.adjoint_array(&y));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (norm(&mx) * norm(&y)).max(1e-300));
        let combo = op.forward_array(&(&x * a + &z));
        let parts = &mx * a + &op.forward_array(&z);
        prop_assert!(norm(&(&combo - &parts)) <= 1e-12 * norm(&parts).max(1.0));
    }

    #[test]
    fn bandpass_is_linear(seed in any::<u64>(), a in -5.0f64..5.0, b in -5.0f64..5.0, n_t in 64usize..300) {
        let spec = BandpassSpec::default();
        let x = normal((3, n_t), seed, "x");
        let y = normal((3, n_t), seed, "y");
        let lhs = bandpass(&sino(&x * a + &y * b), &spec).unwrap();
        let fx = bandpass(&sino(x), &spec).unwrap();
        let fy = bandpass(&sino(y), &spec).unwrap();
        let rhs = fx.data() * a + fy.data() * b;
        prop_assert!(norm(&(lhs.data() - &rhs)) <= 1e-12 * norm(&rhs).max(1.0));
    }

    #[test]
    fn snr_ignores_joint_scaling(seed in any::<u64>(), k in 1e-3f64..1e3) {
        let s = normal((4, 20), seed, "s");
        let n = normal((4, 20), seed, "n") * 0.3;
        let h = normal((4, 20), seed, "h") * 0.1;
        let m = ChannelMask::all(4);
        let a = snr(&sino(s.clone()), &sino(n.clone()), &sino(h.clone()), &m).unwrap();
        let b = snr(&sino(s * k), &sino(n * k), &sino(h * k), &m).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn cr_is_bounded_and_zero_for_equal_means(
        pixels in proptest::collection::vec(0.0f64..10.0, 36),
        split in proptest::collection::vec(0u8..3, 36),
        level in 0.1f64..5.0,
    ) {
        // (0, 0) is always vessel and (5, 5) always background
        let label = |r: usize, c: usize| match (r, c) {
            (0, 0) => 1,
            (5, 5) => 2,
            _ => split[r * 6 + c],
        };
        let v = Array2::from_shape_fn((6, 6), |(r, c)| label(r, c) == 1);
        let b = Array2::from_shape_fn((6, 6), |(r, c)| label(r, c) == 2);
        let vm = RoiMask::new(v, RoiLabel::Vessel).unwrap();
        let bm = RoiMask::new(b, RoiLabel::Background).unwrap();
        let img = ImageGrid::new(Array2::from_shape_vec((6, 6), pixels).unwrap(), 1e-3).unwrap();
        if let Some(cr) = contrast_resolution(&img, &vm, &bm).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&cr));
        }
        let flat = ImageGrid::new(Array2::from_elem((6, 6), level), 1e-3).unwrap();
        prop_assert_eq!(contrast_resolution(&flat, &vm, &bm).unwrap(), Some(0.0));
    }

    #[test]
    fn laplacian_is_self_adjoint(h in 2usize..12, w in 2usize..12, seed in any::<u64>()) {
        let x = normal((h, w), seed, "x");
        let y = normal((h, w), seed, "y");
        let (a, b) = (dot(&laplacian(&x), &y), dot(&x, &laplacian(&y)));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
    }

    #[test]
    fn reconstruction_is_monotone_and_nonnegative(seed in any::<u64>(), l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
        let op = DenseOperator { matrix: normal((40, 25), seed, "m"), domain: (5, 5), range: (4, 10) };
        let s = sino(normal((4, 10), seed, "s"));
        let cfg = ReconConfig {
            lambda_tikhonov: l1,
            lambda_laplacian: l2,
            lambda_scale: LambdaScale::Absolute,
            max_iters: 200,
            rel_tol: 1e-10,
            grid: GridSpec::square(5, 1e-3),
            ..Default::default()
        };
        let out = reconstruct(&s, &op, &cfg).unwrap();
        prop_assert!(out.image.is_nonnegative());
        let mut prev = out.trace.initial_objective;
        for r in &out.trace.iterations {
            prop_assert!(r.objective <= prev + 1e-10);
            prev = r.objective;
        }
    }

    #[test]
    fn nmf_keeps_factors_nonnegative_and_objective_monotone(
        seed in any::<u64>(), k in 1usize..4, l in 0.0f64..2.0,
    ) {
        let mut r = seeded_rng(RngSeed(seed), "s");
        let s = Array2::from_shape_simple_fn((30, 8), || r.uniform() * 4.0);
        let cfg = NmfConfig { k, lambda_l1: l, lambda_fro: l, max_iters: 80, n_restarts: 1, ..Default::default() };
        let out = nmf_factorize_matrix(&s, &cfg).unwrap();
        prop_assert!(out.w.iter().chain(out.h.iter()).all(|&v| v >= 0.0));
        prop_assert!(out.trace.windows(2).all(|p| p[1] <= p[0] + 1e-10));
        let resid: f64 = (&s - &out.w.dot(&out.h)).iter().map(|v| v * v).sum();
        let total: f64 = s.iter().map(|v| v * v).sum();
        prop_assert!((resid / total - out.relative_error).abs() <= 1e-12);
    }

    #[test]
    fn depth_contributions_sum_to_one(
        seed in any::<u64>(), rows in 5usize..80, halfwidth in 0usize..4,
    ) {
        let mut r = seeded_rng(RngSeed(seed), "w");
        let w = Array2::from_shape_simple_fn((rows, 3), || r.uniform() + 1e-3);
        let depths: Vec<f64> = (0..rows).map(|_| r.uniform() * 2e-3).collect();
        let res = oatk::unmix::NmfResult {
            w,
            h: Array2::zeros((3, 1)),
            trace: vec![],
            objective: 0.0,
            relative_error: 0.0,
            restart: 0,
        };
        let p = depth_profiles(&res, &[0, 2], &depths, 1e-4, halfwidth as f64 * 1e-4).unwrap();
        for b in 0..p.depth_m.len() {
            match (p.values[0][b], p.values[1][b]) {
                (Some(a), Some(c)) => prop_assert!((a + c - 1.0).abs() <= 1e-12),
                (None, None) => {}
                _ => prop_assert!(false, "bin {} half defined", b),
            }
        }
    }

    #[test]
    fn denoising_is_residual_and_deterministic(seed in any::<u64>(), amp in 0.1f64..500.0) {
        let mut rng = seeded_rng(RngSeed(seed), "model");
        let mut m = DenoiserModel::init(DenoiserArch { levels: 1, base_channels: 2 }, 0.01, &mut rng).unwrap();
        for v in m.tensor_mut("head.weight").unwrap() {
            *v = rng.normal() as f32;
        }
        let s = sino(normal((8, 16), seed, "s") * amp);
        let n = infer_noise(&m, &s).unwrap();
        let d = denoise(&m, &s).unwrap();
        prop_assert_eq!(d.shape(), s.shape());
        for ((a, b), c) in d.data().iter().zip(n.data()).zip(s.data()) {
            // one rounding of the subtraction
            prop_assert!((a + b - c).abs() <= f64::EPSILON * c.abs().max(b.abs()));
        }
        prop_assert_eq!(infer_noise(&m, &s).unwrap(), n);
    }

    #[test]
    fn seeded_streams_repeat(seed in any::<u64>(), label in "[a-z/0-9]{1,12}") {
        let mut a = seeded_rng(RngSeed(seed), &label);
        let mut b = seeded_rng(RngSeed(seed), &label);
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
