//! Deterministic rule-based planner reading the semantic scene text.

use serde::{Deserialize, Serialize};

use crate::fusion::describe::{parse_semantic_message, DescribedVehicle, SpeedTag};

use super::{Intention, PlanAction, PlanDecision, PlanQuery, Planner, PlannerError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub close_m: f64,
    /// Extra clearance in meters per m/s above `slope_origin_mps`.
    pub clearance_slope_s: f64,
    pub slope_origin_mps: f64,
    /// Speeds assumed for the "fast" / "slow" tags, which carry no number.
    pub fast_nominal_mps: f64,
    pub slow_nominal_mps: f64,
    pub crossing_range_m: f64,
    pub p_single: f64,
    pub p_conflict: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            close_m: 10.0,
            clearance_slope_s: 0.5,
            slope_origin_mps: 5.0,
            fast_nominal_mps: 15.0,
            slow_nominal_mps: 2.5,
            crossing_range_m: 50.0,
            p_single: 0.95,
            p_conflict: 0.80,
        }
    }
}

impl MockConfig {
    pub fn required_clearance(&self, speed_mps: f64) -> f64 {
        (self.close_m + self.clearance_slope_s * (speed_mps - self.slope_origin_mps)).max(self.close_m)
    }

    fn nominal(&self, tag: SpeedTag) -> f64 {
        match tag {
            SpeedTag::Fast => self.fast_nominal_mps,
            SpeedTag::Slow => self.slow_nominal_mps,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockPlanner {
    pub config: MockConfig,
}

impl MockPlanner {
    pub fn new(config: MockConfig) -> Self {
        MockPlanner { config }
    }

    fn decide(&self, votes: &[(PlanAction, &'static str)], conservative: PlanAction) -> (PlanAction, f64, String) {
        let first = votes[0].0;
        if votes.iter().all(|(a, _)| *a == first) {
            (first, self.config.p_single, votes[0].1.to_string())
        } else {
            let why = votes.iter().find(|(a, _)| *a == conservative).map(|v| v.1).unwrap_or("rules conflict");
            (conservative, self.config.p_conflict, format!("rules conflict; {why}"))
        }
    }

    pub fn merge_rules(&self, vehicles: &[DescribedVehicle]) -> (PlanAction, f64, String) {
        let c = &self.config;
        if vehicles.is_empty() {
            return (PlanAction::NoMerge, c.p_single, "no other vehicles are described".into());
        }
        let right: Vec<&DescribedVehicle> = vehicles.iter().filter(|v| v.adjacent_lane && v.on_right()).collect();
        if right.iter().any(|v| v.distance < c.close_m) {
            return (PlanAction::NoMerge, c.p_single, "a right-lane vehicle is closer than 10".into());
        }
        if right.is_empty() {
            return (PlanAction::Merge, c.p_single, "the right lane is open".into());
        }
        let votes: Vec<(PlanAction, &'static str)> = right
            .iter()
            .map(|v| {
                let required = c.required_clearance(c.nominal(v.speed));
                if v.behind() {
                    if v.distance > required {
                        (PlanAction::Merge, "right-lane vehicle behind with enough clearance")
                    } else {
                        (PlanAction::NoMerge, "right-lane vehicle behind is too close for its speed")
                    }
                } else if v.oncoming() || v.distance <= required {
                    (PlanAction::NoMerge, "a vehicle approaches in the right lane")
                } else {
                    (PlanAction::Merge, "right-lane vehicle ahead is far enough")
                }
            })
            .collect();
        self.decide(&votes, PlanAction::NoMerge)
    }

    pub fn intersection_rules(&self, vehicles: &[DescribedVehicle]) -> (PlanAction, f64, String) {
        let c = &self.config;
        let crossing: Vec<&DescribedVehicle> = vehicles
            .iter()
            .filter(|v| v.bearing_deg().is_some_and(|b| !(112.5..=247.5).contains(&b) && approaching_path(&v.facing, b)))
            .collect();
        if crossing.is_empty() {
            return (PlanAction::Proceed, c.p_single, "no crossing traffic is described".into());
        }
        let votes: Vec<(PlanAction, &'static str)> = crossing
            .iter()
            .map(|v| {
                let required = c.required_clearance(c.nominal(v.speed)).max(if v.speed == SpeedTag::Fast {
                    c.crossing_range_m
                } else {
                    c.close_m
                });
                if v.distance < required {
                    (PlanAction::Stop, "crossing vehicle will reach the intersection first")
                } else {
                    (PlanAction::Proceed, "crossing vehicle is far away")
                }
            })
            .collect();
        self.decide(&votes, PlanAction::Stop)
    }
}

/// Crossing traffic still heading toward the ego's path: moving right from
/// the left side or left from the right side (dead ahead counts either way).
fn approaching_path(facing: &str, bearing: f64) -> bool {
    match facing {
        "E" => bearing == 0.0 || bearing > 180.0,
        "W" => bearing < 180.0,
        _ => false,
    }
}

impl Planner for MockPlanner {
    fn name(&self) -> &str {
        "mock"
    }

    fn plan(&self, query: &PlanQuery) -> Result<PlanDecision, PlannerError> {
        query.validate()?;
        let scene = parse_semantic_message(&query.description()).map_err(|e| PlannerError::Format {
            reason: e.to_string(),
            raw: query.description(),
        })?;
        let (action, p, reason) = match query.intention {
            Intention::Merge => self.merge_rules(&scene.vehicles),
            Intention::Proceed | Intention::Turn => self.intersection_rules(&scene.vehicles),
            Intention::StopContext => return Err(PlannerError::Unsupported("stop-context queries".into())),
        };
        PlanDecision::new(action, reason, Some(p))
    }
}
