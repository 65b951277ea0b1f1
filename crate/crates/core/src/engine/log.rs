//! Episode log: JSONL with a header line, one line per tick and a footer.
//! Every float is rounded to six significant digits before it is stored, and
//! metrics are always computed from these stored values, so replaying a log
//! reproduces the original report exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusedObject, Pmi};
use crate::geometry::{OrientedBox, Vec2};
use crate::metrics::{
    driving_score, infraction_penalty, information_gain, mean_present, min_distance_margin, route_completion, EpisodeMetrics,
    InfractionEvent, MetricsError,
};
use crate::numfmt::round6;
use crate::planning::{Intention, PlanAction, PlanPmiRecord};
use crate::protocol::Tier;
use crate::scenario::{CavState, Scenario, VehicleId};

pub const SCHEMA: &str = "uncap-episode-log";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("log is truncated: {0}")]
    Truncated(String),
    #[error("unsupported log schema {0}")]
    Schema(String),
    #[error("log was produced for scenario {log} ({log_fp}), not {scenario} ({scenario_fp})")]
    ScenarioMismatch {
        log: String,
        log_fp: String,
        scenario: String,
        scenario_fp: String,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub fn r6(x: f64) -> f64 {
    round6(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub schema_version: u32,
    pub scenario: String,
    pub fingerprint: String,
    pub mode: String,
    pub seed: u64,
    pub planner: String,
    pub ego: VehicleId,
    pub tick_rate_hz: f64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentStatus {
    Active,
    Crashed,
    Arrived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub id: VehicleId,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub status: AgentStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: VehicleId,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRecord {
    pub sender: VehicleId,
    pub receiver: VehicleId,
    pub tier: Tier,
    pub bytes: u64,
    pub latency_s: f64,
    pub delivered_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub cav: VehicleId,
    pub selected: Vec<VehicleId>,
}

/// `(object, p_calibrated, u_p)` per own detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionRecord {
    pub cav: VehicleId,
    pub detections: Vec<(VehicleId, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedEntry {
    pub id: VehicleId,
    pub best: VehicleId,
    pub p: f64,
    pub pmi: Pmi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRecord {
    pub cav: VehicleId,
    pub objects: Vec<FusedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub cav: VehicleId,
    pub intention: Intention,
    pub peers_available: Vec<VehicleId>,
    pub base_query: String,
    pub final_query: String,
    pub base_action: PlanAction,
    pub base_probability: Option<f64>,
    pub action: PlanAction,
    pub probability: Option<f64>,
    pub u_d: Option<f64>,
    pub reason: String,
    pub included: Vec<VehicleId>,
    pub pmi: Vec<PlanPmiRecord>,
    pub decision_pmi: Option<f64>,
    pub joint_deviation: bool,
    /// `(p_ego, p_fused)` for objects the ego and a peer both observe.
    pub perception_pairs: Vec<(f64, f64)>,
    pub apply_tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchanges: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfractionRecord {
    pub cav: VehicleId,
    #[serde(flatten)]
    pub event: InfractionEvent,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub states: Vec<StateRecord>,
    pub objects: Vec<ObjectRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub envelopes: Vec<EnvelopeRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selections: Vec<SelectionRecord>,
    pub perception: Vec<PerceptionRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fused: Vec<FusedRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plans: Vec<PlanRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub infractions: Vec<InfractionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFooter {
    pub ticks: u64,
    pub envelopes: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(LogHeader),
    Tick(TickRecord),
    End(LogFooter),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub ticks: Vec<TickRecord>,
    pub footer: LogFooter,
}

impl EpisodeLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |l: Line| {
            out.push_str(&serde_json::to_string(&l).expect("log line serializes"));
            out.push('\n');
        };
        push(Line::Header(self.header.clone()));
        for t in &self.ticks {
            push(Line::Tick(t.clone()));
        }
        push(Line::End(self.footer.clone()));
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        let mut header = None;
        let mut ticks = Vec::new();
        let mut footer = None;
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| LogError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if footer.is_some() {
                return Err(LogError::Parse {
                    line: i + 1,
                    message: "content after end marker".into(),
                });
            }
            match line {
                Line::Header(h) if header.is_none() && ticks.is_empty() => header = Some(h),
                Line::Header(_) => {
                    return Err(LogError::Parse {
                        line: i + 1,
                        message: "unexpected header".into(),
                    })
                }
                Line::Tick(_) if header.is_none() => return Err(LogError::Truncated("missing header".into())),
                Line::Tick(t) => ticks.push(t),
                Line::End(f) => footer = Some(f),
            }
        }
        let header = header.ok_or_else(|| LogError::Truncated("missing header".into()))?;
        if header.schema != SCHEMA || header.schema_version != SCHEMA_VERSION {
            return Err(LogError::Schema(format!("{} v{}", header.schema, header.schema_version)));
        }
        let footer = footer.ok_or_else(|| LogError::Truncated("missing end marker".into()))?;
        if footer.ticks != ticks.len() as u64 {
            return Err(LogError::Truncated(format!("footer says {} ticks, found {}", footer.ticks, ticks.len())));
        }
        if ticks.iter().enumerate().any(|(i, t)| t.tick != i as u64) {
            return Err(LogError::Truncated("tick sequence has gaps".into()));
        }
        Ok(EpisodeLog { header, ticks, footer })
    }
}

fn entity_box(log_tick: &TickRecord, scenario: &Scenario, id: VehicleId) -> Option<OrientedBox> {
    let extent = scenario
        .cav(id)
        .map(|c| c.extent)
        .or_else(|| scenario.objects.iter().find(|o| o.id == id).map(|o| o.extent))?;
    let (center, heading) = log_tick
        .states
        .iter()
        .find(|s| s.id == id)
        .map(|s| (Vec2(s.x, s.y), s.heading))
        .or_else(|| log_tick.objects.iter().find(|o| o.id == id).map(|o| (Vec2(o.x, o.y), o.heading)))?;
    Some(OrientedBox {
        center,
        heading,
        length: extent[0],
        width: extent[1],
    })
}

/// Metrics of the designated ego, computed from stored log values only.
pub fn metrics_from_log(log: &EpisodeLog, scenario: &Scenario) -> Result<EpisodeMetrics, LogError> {
    if log.header.fingerprint != scenario.fingerprint() {
        return Err(LogError::ScenarioMismatch {
            log: log.header.scenario.clone(),
            log_fp: log.header.fingerprint.clone(),
            scenario: scenario.name.clone(),
            scenario_fp: scenario.fingerprint(),
        });
    }
    let ego = log.header.ego;
    let route = &scenario
        .cav(ego)
        .ok_or_else(|| LogError::Parse {
            line: 1,
            message: format!("ego {ego} is not a CAV of the scenario"),
        })?
        .initial
        .route;

    let mut trajectory = Vec::new();
    let mut events = Vec::new();
    let mut tb_bytes = 0u64;
    let mut perception_pairs = Vec::new();
    let mut decision_pmis = Vec::new();
    let mut terminal = false;
    for t in &log.ticks {
        tb_bytes += t.envelopes.iter().map(|e| e.bytes).sum::<u64>();
        if !terminal {
            if let Some(s) = t.states.iter().find(|s| s.id == ego) {
                trajectory.push(Vec2(s.x, s.y));
            }
        }
        for inf in t.infractions.iter().filter(|i| i.cav == ego) {
            if inf.event.kind.is_collision() {
                terminal = true;
            }
            events.push(inf.event.clone());
        }
        for p in t.plans.iter().filter(|p| p.cav == ego && !p.peers_available.is_empty()) {
            perception_pairs.extend(p.perception_pairs.iter().copied());
            decision_pmis.push(p.decision_pmi.filter(|v| v.is_finite()));
        }
    }
    let rc = route_completion(&trajectory, route)?;
    let ip = infraction_penalty(&events);
    let ig_perception = information_gain(&perception_pairs)?;
    let ig_decision = mean_present(decision_pmis);

    let min_distance_margin_m = match scenario.conflict_pair {
        Some((a, b)) => {
            let boxes: Vec<(OrientedBox, OrientedBox)> = log
                .ticks
                .iter()
                .filter_map(|t| Some((entity_box(t, scenario, a)?, entity_box(t, scenario, b)?)))
                .collect();
            let (xs, ys): (Vec<_>, Vec<_>) = boxes.into_iter().unzip();
            min_distance_margin(&xs, &ys)?
        }
        None => None,
    };
    Ok(EpisodeMetrics {
        ds: driving_score(rc, ip),
        rc,
        ip,
        tb_kb: tb_bytes as f64 / 1024.0,
        ig_perception,
        ig_decision,
        min_distance_margin_m,
    })
}

/// Recomputes metrics from a persisted log without re-running anything.
pub fn replay(log_text: &str, scenario: &Scenario) -> Result<EpisodeMetrics, LogError> {
    let log = EpisodeLog::from_jsonl(log_text)?;
    metrics_from_log(&log, scenario)
}

/// Scene as seen by `cav` at `tick`: its fused objects (own detections in
/// modes without fusion) and the logged CAV states. Positions come from the
/// logged ground truth, extents from the scenario.
pub fn snapshot(log: &EpisodeLog, scenario: &Scenario, cav: VehicleId, tick: u64) -> Result<(Vec<FusedObject>, Vec<CavState>), LogError> {
    let t = log
        .ticks
        .iter()
        .find(|t| t.tick == tick)
        .ok_or_else(|| LogError::Truncated(format!("no record for tick {tick}")))?;
    let states: Vec<CavState> = t
        .states
        .iter()
        .map(|s| {
            let position = Vec2(s.x, s.y);
            CavState {
                id: s.id,
                position,
                velocity: Vec2::from_heading(s.heading) * s.speed,
                heading: s.heading,
                goal_position: position,
                route: vec![position],
            }
        })
        .collect();
    let entries: Vec<(VehicleId, VehicleId, f64, Pmi)> = match t.fused.iter().find(|f| f.cav == cav) {
        Some(f) => f.objects.iter().map(|o| (o.id, o.best, o.p, o.pmi)).collect(),
        None => t
            .perception
            .iter()
            .find(|p| p.cav == cav)
            .ok_or_else(|| LogError::Parse {
                line: 0,
                message: format!("{cav} has no perception record at tick {tick}"),
            })?
            .detections
            .iter()
            .map(|&(id, p, _)| (id, cav, p, Pmi(0.0)))
            .collect(),
    };
    let fused = entries
        .into_iter()
        .filter_map(|(id, best, p, pmi)| {
            let b = entity_box(t, scenario, id)?;
            let speed = t.states.iter().find(|s| s.id == id).map(|s| s.speed).unwrap_or(0.0);
            let class_label = scenario.objects.iter().find(|o| o.id == id).map(|o| o.class_label).unwrap_or(0);
            Some(FusedObject {
                object_id: id,
                contributing_observers: vec![best],
                p_fused: p,
                u_fused: 1.0 - p,
                best_observer: best,
                class_label,
                location: b.center,
                extent: [b.length, b.width, 1.5],
                speed,
                heading: b.heading,
                p_ego: None,
                peer_observed: best != cav,
                pmi,
            })
        })
        .collect();
    Ok((fused, states))
}
