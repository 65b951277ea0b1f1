use std::path::PathBuf;
use std::sync::Mutex;

use proptest::prelude::*;

use uncap_core::fusion::describe::{format_semantic_message, DescribeConfig, ObjectView};
use uncap_core::geometry::Vec2;
use uncap_core::planning::llm::parse_completion;
use uncap_core::planning::prompts::{build_perception_prompt, prompt_for};
use uncap_core::planning::{
    decision_uncertainty, filter_peer_messages, Intention, MockPlanner, PlanAction, PlanDecision, PlanQuery, Planner, PlannerError,
};
use uncap_core::scenario::{CavState, VehicleId};

fn golden(name: &str, rendered: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, rendered).expect("write golden");
    }
    let stored = std::fs::read_to_string(&path).expect("golden file present");
    assert_eq!(rendered, stored, "render differs from {}", path.display());
}

fn ego_facing_east(speed: f64) -> CavState {
    CavState {
        id: VehicleId(1996),
        position: Vec2::new(0.0, 6.0),
        velocity: Vec2::new(speed, 0.0),
        heading: 0.0,
        goal_position: Vec2::new(200.0, 0.0),
        route: vec![Vec2::new(0.0, 6.0), Vec2::new(200.0, 0.0)],
    }
}

fn view(id: u32, p: f64, at: Vec2, speed: f64, lane: u32) -> ObjectView {
    ObjectView {
        id: VehicleId(id),
        p,
        u: 1.0 - p,
        location: at,
        heading: 0.0,
        speed,
        lane: Some(lane),
    }
}

fn merge_description() -> String {
    let objects = [view(2014, 1.0, Vec2::new(-4.0, 1.0), 12.0, 1), view(2042, 0.71, Vec2::new(-18.0, 0.0), 12.0, 1)];
    format_semantic_message(&objects, &ego_facing_east(10.0), Some(2), &DescribeConfig::default()).text
}

#[test]
fn merge_prompt_matches_golden() {
    golden("merge_prompt.txt", &prompt_for(Intention::Merge, &merge_description()));
}

#[test]
fn perception_prompt_matches_golden() {
    let p = build_perception_prompt(VehicleId(1996), Intention::Merge);
    assert!(p.contains("Vehicle 1996, called the Ego CAV. It currently"));
    golden("perception_prompt_1996.txt", &p);
}

#[test]
fn mock_reads_the_merge_description() {
    let planner = MockPlanner::default();
    let d = planner.plan(&PlanQuery::new(merge_description(), Intention::Merge)).unwrap();
    assert_eq!(d.action, PlanAction::NoMerge);
    let empty = planner.plan(&PlanQuery::new("Ego Vehicle: Facing E, Speed: 10.0", Intention::Merge)).unwrap();
    assert_eq!(empty.action, PlanAction::NoMerge);
    assert_eq!(empty.probability, Some(0.95));
}

#[test]
fn recorded_completion_replays_identically() {
    let raw = include_str!("fixtures/completion_no_merge.json");
    let a = parse_completion(raw).unwrap();
    let b = parse_completion(raw).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.action, PlanAction::NoMerge);
    let p = a.probability.unwrap();
    assert!((p - (-0.0123f64 - 0.0456).exp()).abs() < 1e-12);
    assert!((a.u_d.unwrap() - 0.0579).abs() < 1e-9);
}

#[test]
fn decision_uncertainty_from_probability() {
    assert!((decision_uncertainty(0.992902).unwrap() - 0.0071233).abs() < 1e-6);
    assert_eq!(decision_uncertainty(1.0).unwrap(), 0.0);
}

/// Answers from a table keyed by the set of peers in the query.
struct Scripted {
    answers: Vec<(Vec<u32>, PlanAction, f64)>,
    seen: Mutex<Vec<Vec<u32>>>,
}

impl Planner for Scripted {
    fn name(&self) -> &str {
        "scripted"
    }

    fn plan(&self, query: &PlanQuery) -> Result<PlanDecision, PlannerError> {
        let peers: Vec<u32> = if query.fused_message.is_empty() {
            Vec::new()
        } else {
            query.fused_message.split(',').map(|s| s.parse().unwrap()).collect()
        };
        self.seen.lock().unwrap().push(peers.clone());
        let (_, action, p) = self
            .answers
            .iter()
            .find(|(k, _, _)| *k == peers)
            .cloned()
            .unwrap_or((Vec::new(), PlanAction::NoMerge, 0.43));
        PlanDecision::new(action, "scripted", Some(p))
    }
}

fn build(peers: &[VehicleId]) -> PlanQuery {
    let mut q = PlanQuery::new("Ego Vehicle: Facing E, Speed: 10.0", Intention::Merge);
    q.fused_message = peers.iter().map(|p| p.0.to_string()).collect::<Vec<_>>().join(",");
    q
}

#[test]
fn helpful_peer_raises_plan_probability() {
    let planner = Scripted {
        answers: vec![
            (vec![], PlanAction::NoMerge, 0.43),
            (vec![2014], PlanAction::NoMerge, 0.78),
            (vec![2005], PlanAction::NoMerge, 0.40),
            (vec![2014, 2005], PlanAction::NoMerge, 0.80),
        ],
        seen: Mutex::new(Vec::new()),
    };
    let out = filter_peer_messages(build, &[VehicleId(2014), VehicleId(2005)], &planner).unwrap();
    assert_eq!(out.included, vec![VehicleId(2014)]);
    let r = &out.records[0];
    assert!((r.value.unwrap() - (0.78f64 / 0.43).ln()).abs() < 1e-12);
    assert!(!out.records[1].included);
    assert_eq!(out.decision.probability, Some(0.78));
    assert_eq!(planner.seen.lock().unwrap().last().unwrap(), &vec![2014]);
}

fn action_strategy() -> impl Strategy<Value = PlanAction> {
    prop_oneof![Just(PlanAction::Merge), Just(PlanAction::NoMerge)]
}

proptest! {
    #[test]
    fn u_d_strictly_decreasing(a in 1e-9f64..1.0, b in 1e-9f64..1.0) {
        prop_assume!(a < b);
        prop_assert!(decision_uncertainty(a).unwrap() > decision_uncertainty(b).unwrap());
        prop_assert!((decision_uncertainty(a).unwrap() + a.ln()).abs() < 1e-9);
    }

    #[test]
    fn included_peers_have_non_negative_pmi(
        base_p in 0.05f64..1.0,
        base_action in action_strategy(),
        peers in prop::collection::vec((action_strategy(), 0.05f64..1.0), 0..5),
    ) {
        let ids: Vec<VehicleId> = (0..peers.len() as u32).map(|i| VehicleId(10 + i)).collect();
        let mut answers = vec![(vec![], base_action, base_p)];
        for (i, (a, p)) in peers.iter().enumerate() {
            answers.push((vec![10 + i as u32], *a, *p));
        }
        let planner = Scripted { answers, seen: Mutex::new(Vec::new()) };
        let out = filter_peer_messages(build, &ids, &planner).unwrap();
        for r in &out.records {
            prop_assert_eq!(r.included, r.value.is_some_and(|v| v > 0.0));
            if r.included {
                prop_assert!(r.value.unwrap() >= 0.0);
            }
        }
        if out.included.is_empty() {
            prop_assert_eq!(&out.decision, &out.base);
        } else if out.included.len() == 1 {
            // A single included peer is re-queried with the same peer set.
            let p_without = out.p_without_final.unwrap();
            prop_assert!(out.decision.probability.unwrap() >= p_without);
        }
    }

    #[test]
    fn mock_is_total_over_valid_messages(
        objs in prop::collection::vec((-60.0f64..60.0, -20.0f64..20.0, 0.0f64..20.0, 0.0f64..1.0, -3.2f64..3.2, 1u32..3), 0..6),
        ego_speed in 0.0f64..20.0,
        merge in any::<bool>(),
    ) {
        let views: Vec<ObjectView> = objs
            .iter()
            .enumerate()
            .map(|(i, (x, y, v, p, h, lane))| ObjectView { heading: *h, ..view(100 + i as u32, *p, Vec2::new(*x, *y), *v, *lane) })
            .collect();
        let text = format_semantic_message(&views, &ego_facing_east(ego_speed), Some(2), &DescribeConfig::default()).text;
        let intention = if merge { Intention::Merge } else { Intention::Proceed };
        let d = MockPlanner::default().plan(&PlanQuery::new(text, intention)).unwrap();
        let allowed: &[PlanAction] = if merge {
            &[PlanAction::Merge, PlanAction::NoMerge]
        } else {
            &[PlanAction::Proceed, PlanAction::Stop]
        };
        prop_assert!(allowed.contains(&d.action));
        prop_assert!(d.probability.is_some_and(|p| p > 0.0 && p <= 1.0));
    }
}
