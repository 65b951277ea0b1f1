use proptest::prelude::*;

use uncap_core::geometry::{OrientedBox, Vec2};
use uncap_core::metrics::{
    driving_score, infraction_penalty, information_gain, min_distance_margin, route_completion, InfractionKind, PenaltyTable,
};

#[test]
fn driving_score_reference_rows() {
    assert!((driving_score(0.892, 0.90) - 0.8028).abs() < 1e-9);
    assert!((driving_score(0.872, 0.90) - 0.7848).abs() < 1e-9);
    assert!((driving_score(0.883, 0.78) - 0.695).abs() <= 0.01);
}

#[test]
fn information_gain_reference_values() {
    assert!((information_gain(&[(0.25, 0.71)]).unwrap().unwrap() - 1.0438).abs() < 1e-4);
    assert!((information_gain(&[(0.43, 0.44)]).unwrap().unwrap() - 0.0230).abs() < 1e-4);
    assert_eq!(information_gain(&[]).unwrap(), None);
}

#[test]
fn shipped_penalties_match_defaults() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/penalties.json");
    assert_eq!(PenaltyTable::load(&path).unwrap(), PenaltyTable::default());
    let t = PenaltyTable::default();
    let two = [t.event(1, InfractionKind::CollisionVehicle, None), t.event(2, InfractionKind::RedLight, None)];
    assert!((infraction_penalty(&two) - 0.42).abs() < 1e-12);
}

#[test]
fn half_route_completion() {
    let route = [Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)];
    let traj: Vec<Vec2> = (0..=50).map(|x| Vec2::new(x as f64, 0.3)).collect();
    assert!((route_completion(&traj, &route).unwrap() - 0.5).abs() <= 0.01);
}

fn kind() -> impl Strategy<Value = InfractionKind> {
    prop::sample::select(InfractionKind::ALL.to_vec())
}

proptest! {
    #[test]
    fn penalty_ignores_event_order(kinds in prop::collection::vec(kind(), 0..8), rot in 0usize..8) {
        let t = PenaltyTable::default();
        let events: Vec<_> = kinds.iter().enumerate().map(|(i, k)| t.event(i as u64, *k, None)).collect();
        let mut shuffled = events.clone();
        shuffled.reverse();
        if !shuffled.is_empty() {
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
        }
        let expected: f64 = kinds.iter().map(|k| t.coefficient(*k)).product();
        prop_assert!((infraction_penalty(&events) - expected).abs() < 1e-12);
        prop_assert!((infraction_penalty(&shuffled) - infraction_penalty(&events)).abs() < 1e-12);
    }

    #[test]
    fn ds_is_product(rc in 0.0f64..=1.0, ip in 0.0f64..=1.0) {
        let ds = driving_score(rc, ip);
        prop_assert!((ds - rc * ip).abs() <= 1e-9);
        prop_assert!(ds <= rc && ds <= ip);
    }

    #[test]
    fn gain_is_scale_free(pairs in prop::collection::vec((0.05f64..0.5, 0.05f64..0.5), 1..6), scale in 0.1f64..2.0) {
        let scaled: Vec<(f64, f64)> = pairs.iter().map(|(a, b)| (a * scale, b * scale)).collect();
        let a = information_gain(&pairs).unwrap().unwrap();
        let b = information_gain(&scaled).unwrap().unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn parallel_lanes_keep_constant_margin(xs in prop::collection::vec(-100.0f64..100.0, 1..20), gap in 2.5f64..10.0) {
        let boxes = |y: f64| -> Vec<OrientedBox> {
            xs.iter()
                .map(|x| OrientedBox { center: Vec2::new(*x, y), heading: 0.0, length: 4.5, width: 2.0 })
                .collect()
        };
        let m = min_distance_margin(&boxes(0.0), &boxes(gap)).unwrap().unwrap();
        prop_assert!((m - (gap - 2.0)).abs() < 1e-9);
    }
}
