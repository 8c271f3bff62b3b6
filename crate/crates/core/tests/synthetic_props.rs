use f4d::geometry::Point3;
use f4d::synthetic::{
    ground_truth_flow, sample_occupancy_queries, sample_surface_sequence, DeformingShape,
    ShapeFamily, TemporalMode,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn family() -> impl Strategy<Value = ShapeFamily> {
    prop::sample::select(ShapeFamily::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_composes(f in family(), seed in 0u64..1000, t0 in 0.0f64..1.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let shape = DeformingShape::default_of(f, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<_> = shape.sample_surface_at(t0, 40, &mut rng).into_iter().map(|(p, _)| p).collect();
        let direct = ground_truth_flow(&shape, &pts, t0, t2).unwrap();
        let mid: Vec<_> = ground_truth_flow(&shape, &pts, t0, t1).unwrap().iter().map(|s| s.point_t_next).collect();
        let chained = ground_truth_flow(&shape, &mid, t1, t2).unwrap();
        for (a, b) in direct.iter().zip(&chained) {
            prop_assert!((a.point_t_next - b.point_t_next).norm() < 1e-9);
        }
    }

    #[test]
    fn identical_seeds_give_identical_sequences(f in family(), seed in 0u64..1000, uneven in any::<bool>()) {
        let shape = DeformingShape::default_of(f, 6).unwrap();
        let mode = if uneven { TemporalMode::Uneven } else { TemporalMode::Even };
        let a = sample_surface_sequence(&shape, 50, mode, 0.01, seed).unwrap();
        let b = sample_surface_sequence(&shape, 50, mode, 0.01, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn jittered_surface_labels() {
    let band = 0.02;
    for f in ShapeFamily::ALL {
        let shape = DeformingShape::default_of(f, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut agree = 0;
        let samples = shape.sample_surface_at(0.4, 2000, &mut rng);
        for (p, n) in &samples {
            let inner = shape.inside(&(p - n * band / 10.0), 0.4);
            let outer = shape.inside(&(p + n * band / 10.0), 0.4);
            agree += (inner && !outer) as usize;
        }
        let convex = matches!(
            f,
            ShapeFamily::TranslatingSphere | ShapeFamily::BreathingSphere
        );
        if convex {
            assert_eq!(agree, samples.len(), "{f:?}");
        } else {
            assert!(
                agree as f64 >= 0.99 * samples.len() as f64,
                "{f:?}: {agree}"
            );
        }
    }
}

#[test]
fn fig7_point_counts() {
    let shape = DeformingShape::default_of(ShapeFamily::ArticulatedDumbbell, 8).unwrap();
    for n in [50, 100, 300, 500, 1000] {
        for mode in [TemporalMode::Even, TemporalMode::Uneven] {
            let seq = sample_surface_sequence(&shape, n, mode, 0.0, 5).unwrap();
            assert!(seq.frames.iter().all(|f| f.points.len() == n));
            let ids = seq.correspondence_ids.as_ref().unwrap();
            assert_eq!(ids.len(), n);
        }
    }
}

#[test]
fn occupancy_fraction_matches_sphere_volume() {
    // breathing sphere reaches radius 0.3 at t = 1
    let shape = DeformingShape::default_of(ShapeFamily::BreathingSphere, 8).unwrap();
    assert!((shape.sdf(&Point3::new(0.3, 0.0, 0.0), 1.0)).abs() < 1e-12);
    let q = sample_occupancy_queries(&shape, 1.0, 10_000, 0, 0.02, 3).unwrap();
    let frac = q.iter().filter(|s| s.label).count() as f64 / q.len() as f64;
    let expected = 4.0 / 3.0 * std::f64::consts::PI * 0.3f64.powi(3);
    assert!((frac - expected).abs() <= 0.01, "{frac} vs {expected}");
    assert!(q.iter().all(|s| s.label == shape.inside(&s.point, 1.0)));
}

#[test]
fn trivial_query_labels() {
    let sphere = DeformingShape::default_of(ShapeFamily::BreathingSphere, 8).unwrap();
    assert!(sphere.inside(&Point3::origin(), 1.0));
    for f in ShapeFamily::ALL {
        let shape = DeformingShape::default_of(f, 8).unwrap();
        for k in 0..8 {
            assert!(!shape.inside(&Point3::new(0.5, 0.5, 0.5), k as f64 / 7.0));
        }
    }
}

#[test]
fn translation_flow_is_constant_and_identity_at_same_time() {
    let shape = DeformingShape::default_of(ShapeFamily::TranslatingSphere, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<_> = shape
        .sample_surface_at(0.2, 50, &mut rng)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let flow = ground_truth_flow(&shape, &pts, 0.2, 0.9).unwrap();
    let d0 = flow[0].displacement();
    assert!(flow.iter().all(|f| (f.displacement() - d0).norm() < 1e-12));
    let same = ground_truth_flow(&shape, &pts, 0.5 - 0.3, 0.2).unwrap();
    assert!(same.iter().all(|f| f.displacement().norm() < 1e-12));
}
