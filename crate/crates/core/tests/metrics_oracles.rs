//! Metric correctness against independent brute-force oracles, metric
//! properties on randomized sets, and gradient checks of the
//! differentiable versions.

use pwm_core::autodiff::{finite_difference_check, Tape};
use pwm_core::metrics::{
    chamfer_distance, chamfer_on_tape, hausdorff_distance, hybrid_loss, hybrid_loss_on_tape,
    soft_hausdorff, soft_hausdorff_on_tape, tracked_mse, tracked_mse_on_tape, LossConfig, PointSet,
};
use pwm_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// --- test-side oracles, written as plain loops ---------------------------

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn chamfer_oracle(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let mut fwd = 0.0;
    for &p in a {
        let mut best = f64::INFINITY;
        for &q in b {
            let d = dist(p, q);
            if d < best {
                best = d;
            }
        }
        fwd += best;
    }
    let mut bwd = 0.0;
    for &q in b {
        let mut best = f64::INFINITY;
        for &p in a {
            let d = dist(p, q);
            if d < best {
                best = d;
            }
        }
        bwd += best;
    }
    fwd / a.len() as f64 + bwd / b.len() as f64
}

fn hausdorff_oracle(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        let mut worst: f64 = 0.0;
        for &p in from {
            let mut best = f64::INFINITY;
            for &q in to {
                let d = dist(p, q);
                if d < best {
                    best = d;
                }
            }
            worst = worst.max(best);
        }
        worst
    };
    directed(a, b).max(directed(b, a))
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-scale..scale),
                rng.gen_range(-scale..scale),
                rng.gen_range(-scale..scale),
            ]
        })
        .collect()
}

#[test]
fn chamfer_matches_brute_force_oracle() {
    // the fixed example from the definition
    let a = PointSet::new(vec![[0.0; 3], [2.0, 0.0, 0.0]]).unwrap();
    let b = PointSet::new(vec![[1.0, 0.0, 0.0]]).unwrap();
    let expect = chamfer_oracle(a.points(), b.points());
    assert!((chamfer_distance(&a, &b) - expect).abs() < 1e-12);
    assert!((expect - 2.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..200 {
        let n = rng.gen_range(1..=32);
        let m = rng.gen_range(1..=32);
        let pa = random_points(&mut rng, n, 0.5);
        let pb = random_points(&mut rng, m, 0.5);
        let a = PointSet::new(pa.clone()).unwrap();
        let b = PointSet::new(pb.clone()).unwrap();
        assert!((chamfer_distance(&a, &b) - chamfer_oracle(&pa, &pb)).abs() < 1e-12);
    }
}

#[test]
fn hausdorff_matches_max_min_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..200 {
        let pa = random_points(&mut rng, 8, 0.5);
        let pb = random_points(&mut rng, 6, 0.5);
        let a = PointSet::new(pa.clone()).unwrap();
        let b = PointSet::new(pb.clone()).unwrap();
        assert!((hausdorff_distance(&a, &b) - hausdorff_oracle(&pa, &pb)).abs() < 1e-12);
    }
}

#[test]
fn soft_hausdorff_converges_monotonically_to_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..20 {
        let pa = random_points(&mut rng, 10, 0.5);
        let pb = random_points(&mut rng, 10, 0.5);
        let a = PointSet::new(pa.clone()).unwrap();
        let b = PointSet::new(pb.clone()).unwrap();
        let exact = hausdorff_distance(&a, &b);
        let mut prev = f64::INFINITY;
        for j in 3..=10 {
            let beta = (1u64 << j) as f64;
            let err = (soft_hausdorff(&a, &b, beta, 1.0 / beta).unwrap() - exact).abs();
            assert!(
                err <= prev + 1e-12,
                "error grew from {} to {} at beta {}",
                prev,
                err,
                beta
            );
            prev = err;
        }
        assert!(prev < 1e-3, "final rung error {}", prev);
    }
}

#[test]
fn soft_hausdorff_residue_bound_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..50 {
        let n = rng.gen_range(1..=12);
        let m = rng.gen_range(1..=12);
        let a = PointSet::new(random_points(&mut rng, n, 0.5)).unwrap();
        let b = PointSet::new(random_points(&mut rng, m, 0.5)).unwrap();
        let exact = hausdorff_distance(&a, &b);
        for &(beta, tau) in &[(16.0, 0.0625), (128.0, 0.0078125), (1024.0, 0.0009765625)] {
            let soft = soft_hausdorff(&a, &b, beta, tau).unwrap();
            let count = (n + m) as f64;
            let bound = tau * count.ln() + count.ln() / beta;
            assert!(soft >= 0.0);
            assert!(
                (soft - exact).abs() <= bound + 1e-12,
                "|{} - {}| above residue bound {}",
                soft,
                exact,
                bound
            );
        }
    }
}

#[test]
fn hybrid_midpoint_is_mean_of_components() {
    let pred = PointSet::new(vec![
        [0.0, 0.0, 0.0],
        [0.2, 0.1, 0.0],
        [0.4, 0.0, 0.1],
        [0.1, 0.3, 0.2],
        [0.5, 0.5, 0.0],
    ])
    .unwrap();
    let gt = PointSet::new(vec![
        [0.05, 0.0, 0.0],
        [0.25, 0.15, 0.0],
        [0.35, 0.05, 0.1],
        [0.15, 0.25, 0.25],
        [0.45, 0.55, 0.05],
    ])
    .unwrap();
    let cfg = LossConfig {
        alpha: 0.5,
        ..Default::default()
    };
    // components computed independently
    let cd = chamfer_oracle(pred.points(), gt.points());
    let sh = soft_hausdorff(&pred, &gt, cfg.beta_max, cfg.tau_min).unwrap();
    let expect = 0.5 * cd + 0.5 * sh;
    assert!((hybrid_loss(&pred, &gt, &cfg).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn tracked_mse_matches_per_pair_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let pa = random_points(&mut rng, 20, 0.5);
    let pb = random_points(&mut rng, 20, 0.5);
    let mut acc = 0.0;
    for (p, q) in pa.iter().zip(pb.iter()) {
        acc += (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
    }
    let expect = acc / 20.0;
    let a = PointSet::new(pa).unwrap();
    let b = PointSet::new(pb).unwrap();
    assert!((tracked_mse(&a, &b).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let cfg = LossConfig::default();
    for trial in 0..12 {
        let n = rng.gen_range(2..=8);
        let m = rng.gen_range(2..=8);
        let pred = random_points(&mut rng, n, 0.4);
        let gt = PointSet::new(random_points(&mut rng, m, 0.4)).unwrap();
        let gt_same = PointSet::new(random_points(&mut rng, n, 0.4)).unwrap();
        let pred_tensor = Tensor::from_rows(&pred);

        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[pwm_core::autodiff::ValueId]) -> Result<pwm_core::autodiff::ValueId, pwm_core::autodiff::AutodiffError>>)> = vec![
            ("chamfer", {
                let gt = gt.clone();
                Box::new(move |tape, ids| Ok(chamfer_on_tape(tape, ids[0], &gt).unwrap()))
            }),
            ("soft_hausdorff", {
                let gt = gt.clone();
                Box::new(move |tape, ids| {
                    Ok(soft_hausdorff_on_tape(tape, ids[0], &gt, 50.0, 0.02).unwrap())
                })
            }),
            ("hybrid", {
                let gt = gt.clone();
                Box::new(move |tape, ids| Ok(hybrid_loss_on_tape(tape, ids[0], &gt, &cfg).unwrap()))
            }),
            ("tracked_mse", {
                let gt = gt_same.clone();
                Box::new(move |tape, ids| Ok(tracked_mse_on_tape(tape, ids[0], &gt).unwrap()))
            }),
        ];
        for (name, build) in cases {
            let err = finite_difference_check(&build, &[pred_tensor.clone()], 1e-5).unwrap();
            assert!(err < 1e-4, "trial {}: {} fd error {}", trial, name, err);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_identity_and_nonnegativity(
        pts in proptest::collection::vec(
            (-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5), 1..16
        )
    ) {
        let pts: Vec<[f64; 3]> = pts.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        let a = PointSet::new(pts).unwrap();
        prop_assert_eq!(chamfer_distance(&a, &a), 0.0);
        prop_assert_eq!(hausdorff_distance(&a, &a), 0.0);
        prop_assert_eq!(tracked_mse(&a, &a).unwrap(), 0.0);
        let count = (2 * a.len()) as f64;
        let cfg = LossConfig::default();
        let residue = soft_hausdorff(&a, &a, cfg.beta_max, cfg.tau_min).unwrap();
        prop_assert!(residue >= 0.0);
        prop_assert!(residue <= cfg.tau_min * count.ln() + count.ln() / cfg.beta_max);
    }

    #[test]
    fn metric_symmetry_and_permutation_invariance(
        pa in proptest::collection::vec((-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5), 1..12),
        pb in proptest::collection::vec((-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5), 1..12),
        seed in 0u64..1000,
    ) {
        let pa: Vec<[f64; 3]> = pa.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        let pb: Vec<[f64; 3]> = pb.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        let a = PointSet::new(pa.clone()).unwrap();
        let b = PointSet::new(pb.clone()).unwrap();

        prop_assert!((chamfer_distance(&a, &b) - chamfer_distance(&b, &a)).abs() < 1e-12);
        prop_assert!((hausdorff_distance(&a, &b) - hausdorff_distance(&b, &a)).abs() < 1e-12);
        prop_assert!(
            (soft_hausdorff(&a, &b, 32.0, 0.03125).unwrap()
                - soft_hausdorff(&b, &a, 32.0, 0.03125).unwrap()).abs() < 1e-12
        );

        // shuffle one side; values must not move
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = pa.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        let a2 = PointSet::new(shuffled).unwrap();
        prop_assert!((chamfer_distance(&a2, &b) - chamfer_distance(&a, &b)).abs() < 1e-12);
        prop_assert!((hausdorff_distance(&a2, &b) - hausdorff_distance(&a, &b)).abs() < 1e-12);
        prop_assert!(
            (soft_hausdorff(&a2, &b, 32.0, 0.03125).unwrap()
                - soft_hausdorff(&a, &b, 32.0, 0.03125).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn hausdorff_triangle_inequality(
        pa in proptest::collection::vec((-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5), 1..10),
        pb in proptest::collection::vec((-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5), 1..10),
        pc in proptest::collection::vec((-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5), 1..10),
    ) {
        let a = PointSet::new(pa.into_iter().map(|(x, y, z)| [x, y, z]).collect()).unwrap();
        let b = PointSet::new(pb.into_iter().map(|(x, y, z)| [x, y, z]).collect()).unwrap();
        let c = PointSet::new(pc.into_iter().map(|(x, y, z)| [x, y, z]).collect()).unwrap();
        prop_assert!(
            hausdorff_distance(&a, &c)
                <= hausdorff_distance(&a, &b) + hausdorff_distance(&b, &c) + 1e-12
        );
    }
}
