//! Property tests for the structural invariants that hold on every input,
//! not just the hand-picked cases.

use proptest::prelude::*;

use sharplab::dataset::{decompose, Dataset};
use sharplab::dd::DoubleDouble;
use sharplab::linalg::{spectral_norm, thin_svd, DenseMatrix};
use sharplab::optimize::sample_mask;
use sharplab::quantities::v1_star_sq;
use sharplab::rng::SplitMix64;

fn finite_entry() -> impl Strategy<Value = f64> {
    prop_oneof![-4.0..4.0f64, -0.1..0.1f64]
}

fn matrix(max_dim: usize) -> impl Strategy<Value = DenseMatrix<f64>> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
        proptest::collection::vec(finite_entry(), r * c)
            .prop_map(move |data| DenseMatrix::new(r, c, data).unwrap())
    })
}

proptest! {
    #[test]
    fn spectral_norm_transpose_symmetric(a in matrix(7)) {
        let s = spectral_norm(&a).unwrap();
        let st = spectral_norm(&a.transpose()).unwrap();
        prop_assert!((s - st).abs() <= 1e-10 * s.max(1e-12));
    }

    #[test]
    fn svd_reconstructs_and_is_orthonormal(a in matrix(8)) {
        let svd = thin_svd(&a, 1e-12).unwrap();
        let err = svd.reconstruct().sub(&a).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-10 * a.frobenius_norm().max(1e-12));
        for basis in [&svd.left_vectors, &svd.right_vectors] {
            let gram = basis.transpose().matmul(basis).unwrap();
            for i in 0..svd.rank {
                for j in 0..svd.rank {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((gram.get(i, j) - want).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn difficulty_scales_quadratically(
        seed in 0u64..1000,
        c in 0.5f64..4.0,
    ) {
        let ds = sharplab::dataset::synth_gaussian(4, 3, sharplab::dataset::LabelMode::Gaussian, seed).unwrap();
        let sd = decompose(&ds).unwrap();
        let q = sharplab::dataset::difficulty(&sd).unwrap();
        // labels scale: Q -> c^2 Q
        let scaled = Dataset::new(ds.x().clone(), ds.y().iter().map(|&v| c * v).collect()).unwrap();
        let q2 = sharplab::dataset::difficulty(&decompose(&scaled).unwrap()).unwrap();
        prop_assert!((q2 - c * c * q).abs() <= 1e-12 * (c * c * q).abs());
        // features scale: Q -> Q / c^2
        let scaled = Dataset::new(ds.x().scale(c), ds.y().to_vec()).unwrap();
        let q3 = sharplab::dataset::difficulty(&decompose(&scaled).unwrap()).unwrap();
        prop_assert!((q3 - q / (c * c)).abs() <= 1e-11 * q.abs());
    }

    #[test]
    fn v1_root_solves_quadratic(c in -50.0f64..50.0, q in 1e-6f64..1e4) {
        let v_sq = v1_star_sq(c, q);
        prop_assert!(v_sq > 0.0);
        let resid = v_sq * v_sq + c * v_sq - q;
        let scale = (v_sq * v_sq).max(q).max(c.abs() * v_sq);
        prop_assert!(resid.abs() <= 1e-12 * scale.max(1e-12));
    }

    #[test]
    fn sampled_masks_are_valid(seed in any::<u64>(), n in 1usize..12, pick in 0usize..11) {
        let b = 1 + pick % n;
        let mut rng = SplitMix64::new(seed);
        let mask = sample_mask(n, b, &mut rng).unwrap();
        prop_assert_eq!(mask.len(), b);
        let idx = mask.indices();
        for w in idx.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        prop_assert!(*idx.last().unwrap() < n);
    }

    #[test]
    fn double_double_tracks_f64(a in -100.0f64..100.0, b in 0.1f64..50.0) {
        let dd = DoubleDouble::from_f64;
        let value = (dd(a) * dd(b) + dd(a) / dd(b) - dd(b)).to_f64();
        let plain = a * b + a / b - b;
        prop_assert!((value - plain).abs() <= 8.0 * f64::EPSILON * plain.abs().max(1.0));
        let s = dd(b).sqrt();
        prop_assert!((s * s - dd(b)).abs().to_f64() <= 1e-29 * b.max(1.0));
    }

    #[test]
    fn bounds_reports_are_ordered(seed in 0u64..2000, c in -10.0f64..10.0, depth in 2usize..6) {
        let ds = sharplab::dataset::synth_gaussian(4, 3, sharplab::dataset::LabelMode::Gaussian, seed).unwrap();
        let sd = decompose(&ds).unwrap();
        let two = sharplab::quantities::minimizer_bounds_2layer(&sd, c, 4).unwrap();
        prop_assert!(two.lower <= two.upper + 1e-12 * two.upper.abs().max(1.0));
        let deep = sharplab::quantities::minimizer_bounds_deep(&sd, depth, 4).unwrap();
        prop_assert!(deep.lower <= deep.upper + 1e-12 * deep.upper.abs().max(1.0));
        let ab = sharplab::quantities::init_sharpness_bounds(&sd, 0.1 + c.abs(), 0.2, 4).unwrap();
        prop_assert!(ab.lower <= ab.upper + 1e-12 * ab.upper.abs().max(1.0));
        let conv = sharplab::quantities::convergence_sharpness_bounds(&sd, 0.1 + c.abs(), 0.2, 4).unwrap();
        prop_assert!(conv.lower <= conv.upper + 1e-12 * conv.upper.abs().max(1.0));
    }
}
