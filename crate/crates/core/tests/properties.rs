use proptest::prelude::*;

use twoscale_ocp::metrics_io::{export_values, l1_error_values, load_reference, EvalGrid, ReferenceField};
use twoscale_ocp::netcore::blob::{decode_blob, encode_blob};
use twoscale_ocp::problems::RectDomain;
use twoscale_ocp::sampling::{
    beta_half, rar_select, sample_boundary, sample_interior, BoundaryDist, InteriorMode, RarConfig,
};
use twoscale_ocp::training::{adam_step, AdamState, ContinuationConfig, LrSchedule};

fn domain() -> impl Strategy<Value = RectDomain> {
    (-2.0..2.0f64, -2.0..2.0f64, 0.1..3.0f64, 0.1..3.0f64)
        .prop_map(|(a, b, w, h)| RectDomain::new([a, b], [a + w, b + h]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn l1_symmetric_nonnegative_and_zero_iff_equal(
        a in prop::collection::vec(-10.0..10.0f64, 16),
        b in prop::collection::vec(-10.0..10.0f64, 16),
    ) {
        let grid = EvalGrid::new(RectDomain::unit_square(), 4, 4).unwrap();
        let ab = l1_error_values(&a, &b, &grid).unwrap();
        let ba = l1_error_values(&b, &a, &grid).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(l1_error_values(&a, &a, &grid).unwrap(), 0.0);
        prop_assert_eq!(ab == 0.0, a == b);
    }

    #[test]
    fn bilinear_functions_are_reproduced(
        c in prop::array::uniform4(-5.0..5.0f64),
        steps1 in prop::collection::vec(0.05..1.0f64, 2..6),
        steps2 in prop::collection::vec(0.05..1.0f64, 2..6),
        s in 0.0..1.0f64,
        t in 0.0..1.0f64,
    ) {
        let axis = |steps: &[f64]| {
            let mut v = vec![0.0];
            for h in steps {
                v.push(v.last().unwrap() + h);
            }
            v
        };
        let (x1, x2) = (axis(&steps1), axis(&steps2));
        let f = |x: [f64; 2]| c[0] + c[1] * x[0] + c[2] * x[1] + c[3] * x[0] * x[1];
        let mut values = Vec::new();
        for &b in &x2 {
            for &a in &x1 {
                values.push(f([a, b]));
            }
        }
        let r = ReferenceField::new(x1.clone(), x2.clone(), values).unwrap();
        let x = [s * x1.last().unwrap(), t * x2.last().unwrap()];
        let scale = c.iter().map(|v| v.abs()).sum::<f64>() * 25.0;
        prop_assert!((r.value(x) - f(x)).abs() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn export_load_round_trip(
        d in domain(),
        n1 in 2usize..6,
        n2 in 2usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = EvalGrid::new(d, n1, n2).unwrap();
        let values: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1e3..1e3)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        export_values(&values, &grid, &path).unwrap();
        let r = load_reference(&path).unwrap();
        prop_assert_eq!(r.values(), &values[..]);
        for (node, v) in grid.nodes().into_iter().zip(&values) {
            prop_assert_eq!(r.value(node), *v);
        }
    }

    #[test]
    fn blob_round_trip(data in prop::collection::vec(any::<f64>(), 0..50)) {
        let bytes = encode_blob(&[("kind", "test".into())], &data);
        let (header, back) = decode_blob(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(header, vec![("kind".to_string(), "test".to_string())]);
        prop_assert_eq!(back.len(), data.len());
        for (x, y) in back.iter().zip(&data) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn continuation_follows_division_rule(
        eps0 in 1e-3..1.0f64,
        ell in 1.5..20.0f64,
        ratio in 1e-4..1.0f64,
    ) {
        let target = eps0 * ratio;
        let c = ContinuationConfig { eps0, ell, eps_target: target, epochs_per_stage: 1 };
        let levels = c.stages().unwrap();
        prop_assert_eq!(levels[0], eps0);
        prop_assert_eq!(*levels.last().unwrap(), target);
        for w in levels.windows(2) {
            prop_assert_eq!(w[1], (w[0] / ell).max(target));
            prop_assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn adam_second_moment_stays_nonnegative(
        grads in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 6), 1..20),
        lr in 1e-5..1e-1f64,
    ) {
        let mut adam = AdamState::new(6);
        let (mut a, mut b) = (vec![0.5; 4], vec![-0.5; 2]);
        for g in &grads {
            adam_step(&mut adam, &mut [&mut a, &mut b], &[&g[..4], &g[4..]], lr).unwrap();
            prop_assert!(adam.v.iter().all(|v| *v >= 0.0));
            prop_assert!(a.iter().chain(&b).all(|p| p.is_finite()));
        }
        prop_assert_eq!(adam.t, grads.len() as u64);
    }

    #[test]
    fn learning_rate_is_monotone_and_floored(t in 0u64..1_000_000) {
        let s = LrSchedule::default();
        prop_assert!(s.at(t) >= s.floor);
        prop_assert!(s.at(t + 1) <= s.at(t));
    }

    #[test]
    fn samplers_stay_in_domain(
        d in domain(),
        n1 in 1usize..12,
        n2 in 1usize..12,
        per_side in 0usize..20,
        seed in any::<u64>(),
        beta in any::<bool>(),
    ) {
        for mode in [InteriorMode::Grid, InteriorMode::UniformRandom] {
            let pts = sample_interior(&d, mode, n1, n2, seed);
            prop_assert_eq!(pts.len(), n1 * n2);
            prop_assert!(pts.iter().all(|&x| d.contains_open(x)));
        }
        let dist = if beta { BoundaryDist::BetaHalf } else { BoundaryDist::Uniform };
        let bd = sample_boundary(&d, per_side, dist, seed);
        prop_assert_eq!(bd.len(), 4 * per_side);
        for b in &bd {
            let on_edge = (b.x[0] - d.lower[0]).abs() <= 1e-14
                || (b.x[0] - d.upper[0]).abs() <= 1e-14
                || (b.x[1] - d.lower[1]).abs() <= 1e-14
                || (b.x[1] - d.upper[1]).abs() <= 1e-14;
            prop_assert!(on_edge && d.contains_closed(b.x), "{:?}", b);
        }
        prop_assert_eq!(sample_boundary(&d, per_side, dist, seed), bd);
    }

    #[test]
    fn beta_half_maps_unit_interval(u in 0.0..=1.0f64) {
        let t = beta_half(u);
        prop_assert!((0.0..=1.0).contains(&t));
    }

    #[test]
    fn rar_picks_top_k_from_pool(pool in 1usize..200, k in 1usize..50, seed in any::<u64>()) {
        prop_assume!(k <= pool);
        let d = RectDomain::unit_square();
        let cfg = RarConfig { pool_size: pool, top_k: k, period: 1 };
        let candidates = sample_interior(&d, InteriorMode::UniformRandom, pool, 1, seed);
        let picked = rar_select(|p| Ok(p.iter().map(|x| x[0] + x[1]).collect()), &d, &cfg, seed).unwrap();
        prop_assert_eq!(picked.len(), k);
        prop_assert!(picked.iter().all(|x| candidates.contains(x)));
        let weakest = picked.iter().map(|x| x[0] + x[1]).fold(f64::INFINITY, f64::min);
        let above = candidates.iter().filter(|x| x[0] + x[1] > weakest).count();
        prop_assert!(above < k);
    }
}

#[test]
fn rar_clusters_near_large_residual_corner() {
    let d = RectDomain::unit_square();
    // The quarter disc of radius 0.1 holds about 78 of 10000 uniform points.
    let cfg = RarConfig { top_k: 50, ..RarConfig::default() };
    let picked = rar_select(
        |p| Ok(p.iter().map(|x| 1.0 / (1e-6 + ((1.0 - x[0]).powi(2) + (1.0 - x[1]).powi(2)).sqrt())).collect()),
        &d,
        &cfg,
        9,
    )
    .unwrap();
    assert_eq!(picked.len(), cfg.top_k);
    assert!(picked.iter().all(|x| ((1.0 - x[0]).powi(2) + (1.0 - x[1]).powi(2)).sqrt() < 0.1));
}
