//! Episode scoring: route completion, infraction penalty, driving score,
//! bandwidth, information gain and the near-miss distance margin.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_onto_polyline, polyline_length, OrientedBox, Vec2};
use crate::numfmt::g6;
use crate::scenario::VehicleId;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("route is degenerate (zero length)")]
    DegenerateRoute,
    #[error("probability {0} must be in (0, 1]")]
    BadProbability(f64),
    #[error("trajectories are not time-aligned ({0} vs {1} samples)")]
    Misaligned(usize, usize),
    #[error("penalty table: {0}")]
    PenaltyTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    CollisionVehicle,
    CollisionStatic,
    RedLight,
    StopSign,
    LaneInvasion,
}

impl InfractionKind {
    pub const ALL: [InfractionKind; 5] = [
        InfractionKind::CollisionVehicle,
        InfractionKind::CollisionStatic,
        InfractionKind::RedLight,
        InfractionKind::StopSign,
        InfractionKind::LaneInvasion,
    ];

    pub fn is_collision(self) -> bool {
        matches!(self, InfractionKind::CollisionVehicle | InfractionKind::CollisionStatic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyTable(pub BTreeMap<InfractionKind, f64>);

impl Default for PenaltyTable {
    fn default() -> Self {
        PenaltyTable(BTreeMap::from([
            (InfractionKind::CollisionVehicle, 0.60),
            (InfractionKind::CollisionStatic, 0.65),
            (InfractionKind::RedLight, 0.70),
            (InfractionKind::StopSign, 0.80),
            (InfractionKind::LaneInvasion, 0.90),
        ]))
    }
}

impl PenaltyTable {
    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        let t: PenaltyTable = serde_json::from_str(text).map_err(|e| MetricsError::PenaltyTable(e.to_string()))?;
        for kind in InfractionKind::ALL {
            match t.0.get(&kind) {
                Some(c) if *c > 0.0 && *c <= 1.0 => {}
                Some(c) => return Err(MetricsError::PenaltyTable(format!("{kind:?} coefficient {c} outside (0, 1]"))),
                None => return Err(MetricsError::PenaltyTable(format!("missing {kind:?}"))),
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path).map_err(|e| MetricsError::PenaltyTable(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn coefficient(&self, kind: InfractionKind) -> f64 {
        self.0.get(&kind).copied().unwrap_or(1.0)
    }

    pub fn event(&self, tick: u64, kind: InfractionKind, other: Option<VehicleId>) -> InfractionEvent {
        InfractionEvent {
            tick,
            kind,
            penalty_coefficient: self.coefficient(kind),
            other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub tick: u64,
    pub kind: InfractionKind,
    pub penalty_coefficient: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other: Option<VehicleId>,
}

/// Route progress of `trajectory` (already cut at any terminal failure) as a
/// fraction of the route length.
pub fn route_completion(trajectory: &[Vec2], route: &[Vec2]) -> Result<f64, MetricsError> {
    let total = polyline_length(route);
    if total <= 0.0 {
        return Err(MetricsError::DegenerateRoute);
    }
    let arcs: Vec<f64> = trajectory
        .iter()
        .filter_map(|p| project_onto_polyline(route, *p).map(|(s, _)| s))
        .collect();
    let Some(&start) = arcs.first() else {
        return Ok(0.0);
    };
    let reached = arcs.iter().copied().fold(start, f64::max);
    Ok(((reached - start) / total).clamp(0.0, 1.0))
}

/// Product of coefficients, 1.0 when there are no events.
pub fn infraction_penalty(events: &[InfractionEvent]) -> f64 {
    events.iter().map(|e| e.penalty_coefficient).product::<f64>().max(0.0)
}

pub fn driving_score(rc: f64, ip: f64) -> f64 {
    rc * ip
}

/// Mean of `ln(p_with / p_without)` in nats; `None` for no pairs.
pub fn information_gain(pairs: &[(f64, f64)]) -> Result<Option<f64>, MetricsError> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for &(without, with) in pairs {
        for p in [without, with] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(MetricsError::BadProbability(p));
            }
        }
        sum += (with / without).ln();
    }
    Ok(Some(sum / pairs.len() as f64))
}

/// Minimum clearance over time-aligned footprints of two vehicles.
pub fn min_distance_margin(a: &[OrientedBox], b: &[OrientedBox]) -> Result<Option<f64>, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Misaligned(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x.clearance(y)).reduce(f64::min))
}

/// Root-mean-square jerk of a speed series sampled every `dt` seconds.
pub fn jerk_rms(speeds: &[f64], dt: f64) -> f64 {
    if speeds.len() < 3 || dt <= 0.0 {
        return 0.0;
    }
    let acc: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let jerks: Vec<f64> = acc.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    (jerks.iter().map(|j| j * j).sum::<f64>() / jerks.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub ds: f64,
    pub rc: f64,
    pub ip: f64,
    pub tb_kb: f64,
    pub ig_perception: Option<f64>,
    pub ig_decision: Option<f64>,
    pub min_distance_margin_m: Option<f64>,
}

impl EpisodeMetrics {
    pub const CSV_HEADER: &'static str = "ds,rc,ip,tb_kb,ig_perception,ig_decision,min_distance_margin_m";

    pub fn csv_row(&self) -> String {
        [
            g6(self.ds),
            g6(self.rc),
            g6(self.ip),
            g6(self.tb_kb),
            opt(self.ig_perception),
            opt(self.ig_decision),
            opt(self.min_distance_margin_m),
        ]
        .join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    /// JSON with every float at six significant digits.
    pub fn to_json(&self) -> String {
        let num = |x: f64| serde_json::Value::from(crate::numfmt::round6(x));
        let onum = |x: Option<f64>| x.map(num).unwrap_or(serde_json::Value::Null);
        let v = serde_json::json!({
            "ds": num(self.ds),
            "rc": num(self.rc),
            "ip": num(self.ip),
            "tb_kb": num(self.tb_kb),
            "ig_perception": onum(self.ig_perception),
            "ig_decision": onum(self.ig_decision),
            "min_distance_margin_m": onum(self.min_distance_margin_m),
        });
        serde_json::to_string_pretty(&v).expect("metrics serialize") + "\n"
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(g6).unwrap_or_default()
}

/// Mean over values that are present; `None` when none are.
pub fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
