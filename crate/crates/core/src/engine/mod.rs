//! Deterministic tick loop.
//!
//! Per tick, in this order:
//! 1. positions at `t` are recorded; collisions, lane invasions and arrivals are detected;
//! 2. messages whose delivery tick has come are moved to receiver inboxes (ascending sender id);
//! 3. every CAV broadcasts a BARE packet to every other CAV;
//! 4. every CAV picks its partners (SPARE in the uncap modes, everyone otherwise);
//! 5. every CAV perceives and calibrates; selected partners send semantic messages;
//! 6. every CAV fuses its own view with delivered peer messages;
//! 7. decisions whose planner latency has elapsed take effect, then new queries are issued;
//! 8. controls are computed and kinematics advance every active CAV to `t + 1`.

pub mod log;
pub mod suite;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{fit_calibrator_with_mode, CalibratedDetection, CalibrationError, CdfMode, NonconformityModel};
use crate::fusion::describe::{describe_vehicle, format_semantic_message, render_vehicle_line, DescribeConfig, ObjectView};
use crate::fusion::{fuse, select_for_fusion, FusedObject, FusionConfig, FusionOutcome, Pmi, SemanticMessage};
use crate::geometry::{point_at_arc, polyline_length, project_onto_polyline, wrap_angle, OrientedBox, Vec2};
use crate::metrics::{EpisodeMetrics, InfractionKind, PenaltyTable};
use crate::planning::{
    filter_peer_messages, plan_pmi, ImageAttachment, Intention, PeerFilterOutcome, PlanDecision, PlanPmiRecord, PlanQuery, Planner,
    PlannerError,
};
use crate::protocol::{
    make_bare_packet, spare_select, transmit, BandwidthLedger, BarePacket, ChannelParams, MessageEnvelope, SpareConfig, Tier,
};
use crate::scenario::{
    mix_seed, step_kinematics, synthesize_detections, synthesize_labelled_set, CavSpec, CavState, Control, KinematicsParams,
    ObjectTruth, Scenario, SensorModel, VehicleId,
};

use self::log::{
    metrics_from_log, r6, AgentStatus, EnvelopeRecord, EpisodeLog, FusedEntry, FusedRecord, InfractionRecord, LogError, LogFooter,
    LogHeader, ObjectRecord, PerceptionRecord, PlanRecord, SelectionRecord, StateRecord, TickRecord, SCHEMA, SCHEMA_VERSION,
};

pub use suite::{run_suite, SuiteEpisode, SuiteOptions, SuiteReport, SuiteRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NoComm,
    BroadcastAll,
    FuseNoSpare,
    #[default]
    Uncap,
    UncapImages,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::NoComm, Mode::BroadcastAll, Mode::FuseNoSpare, Mode::Uncap, Mode::UncapImages];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::NoComm => "no_comm",
            Mode::BroadcastAll => "broadcast_all",
            Mode::FuseNoSpare => "fuse_no_spare",
            Mode::Uncap => "uncap",
            Mode::UncapImages => "uncap_images",
        }
    }

    pub fn communicates(self) -> bool {
        self != Mode::NoComm
    }

    pub fn uses_spare(self) -> bool {
        matches!(self, Mode::Uncap | Mode::UncapImages)
    }

    pub fn shares_images(self) -> bool {
        self == Mode::UncapImages
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
            format!("unknown mode `{s}`; valid modes: {}", valid.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub samples: usize,
    pub seed: u64,
    pub cdf_mode: CdfMode,
    /// Persisted calibrator to load instead of fitting.
    pub path: Option<PathBuf>,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            samples: 1000,
            seed: 7,
            cdf_mode: CdfMode::Empirical,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub mode: Mode,
    pub seed: u64,
    pub spare: SpareConfig,
    pub channel: ChannelParams,
    pub sensor: SensorModel,
    pub kinematics: KinematicsParams,
    pub fusion: FusionConfig,
    pub describe: DescribeConfig,
    pub penalties: PenaltyTable,
    pub calibration: CalibrationSettings,
    pub planner_latency_s: f64,
    pub requery_s: f64,
    /// Peer messages older than this are ignored.
    pub staleness_s: f64,
    pub image_bytes: u64,
    pub lane_invasion_m: f64,
    pub lane_match_m: f64,
    /// Deceleration used to plan stops at decision gates and behind leaders, m/s².
    pub gate_decel: f64,
    /// Bumper gap kept to a detected vehicle ahead on the route.
    pub follow_gap_m: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mode: Mode::Uncap,
            seed: 1,
            spare: SpareConfig::default(),
            channel: ChannelParams::default(),
            sensor: SensorModel::default(),
            kinematics: KinematicsParams::default(),
            fusion: FusionConfig::default(),
            describe: DescribeConfig::default(),
            penalties: PenaltyTable::default(),
            calibration: CalibrationSettings::default(),
            planner_latency_s: 1.33,
            requery_s: 1.0,
            staleness_s: 1.0,
            image_bytes: 150_000,
            lane_invasion_m: 3.0,
            lane_match_m: 2.5,
            gate_decel: 5.0,
            follow_gap_m: 2.0,
        }
    }
}

impl SimConfig {
    pub fn with_mode(&self, mode: Mode) -> Self {
        SimConfig { mode, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SimConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |what: &str| Err(EngineError::Config(what.to_string()));
        if !(self.planner_latency_s >= 0.0) {
            return bad("planner_latency_s must be ≥ 0");
        }
        if !(self.requery_s > 0.0) {
            return bad("requery_s must be > 0");
        }
        if !(self.staleness_s >= 0.0) {
            return bad("staleness_s must be ≥ 0");
        }
        if !(self.gate_decel > 0.0) {
            return bad("gate_decel must be > 0");
        }
        if !(self.follow_gap_m >= 0.0) {
            return bad("follow_gap_m must be ≥ 0");
        }
        if !(self.spare.distance_threshold_m > 0.0) {
            return bad("spare distance threshold must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),
    #[error("calibrator file {path}: {message}")]
    CalibratorFile { path: String, message: String },
    #[error(transparent)]
    Log(#[from] LogError),
}

/// Loads the configured calibrator, or fits one on synthetic labelled data.
pub fn build_calibrator(config: &SimConfig, num_classes: usize) -> Result<NonconformityModel, EngineError> {
    let c = &config.calibration;
    if let Some(path) = &c.path {
        let err = |message: String| EngineError::CalibratorFile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        return NonconformityModel::from_json(&text).map_err(|e| err(e.to_string()));
    }
    let set = synthesize_labelled_set(&config.sensor, num_classes, c.samples, c.seed);
    Ok(fit_calibrator_with_mode(&set, c.cdf_mode)?)
}

const ARRIVAL_TOL_M: f64 = 1.0;

struct InFlight {
    apply_tick: u64,
    decision: PlanDecision,
}

struct Agent<'s> {
    spec: &'s CavSpec,
    state: CavState,
    status: AgentStatus,
    route_len: f64,
    gates: Vec<f64>,
    intention_idx: usize,
    hold: bool,
    next_query_tick: u64,
    in_flight: Option<InFlight>,
    invading: bool,
}

impl<'s> Agent<'s> {
    fn new(spec: &'s CavSpec) -> Self {
        let route = &spec.initial.route;
        let gates = spec
            .intentions
            .iter()
            .map(|i| project_onto_polyline(route, i.at).map(|(s, _)| s).unwrap_or(0.0))
            .collect();
        Agent {
            spec,
            state: spec.initial.clone(),
            status: AgentStatus::Active,
            route_len: polyline_length(route),
            gates,
            intention_idx: 0,
            hold: false,
            next_query_tick: 0,
            in_flight: None,
            invading: false,
        }
    }

    fn id(&self) -> VehicleId {
        self.state.id
    }

    fn progress(&self) -> (f64, f64) {
        project_onto_polyline(&self.state.route, self.state.position).unwrap_or((0.0, 0.0))
    }

    fn footprint(&self) -> OrientedBox {
        OrientedBox {
            center: self.state.position,
            heading: self.state.heading,
            length: self.spec.extent[0],
            width: self.spec.extent[1],
        }
    }

    fn truth(&self) -> ObjectTruth {
        ObjectTruth {
            object_id: self.id(),
            class_label: 0,
            location: self.state.position,
            extent: self.spec.extent,
            speed: self.state.speed(),
            heading: self.state.heading,
        }
    }

    fn stop_point(&self, gate: f64) -> f64 {
        gate - (self.spec.extent[0] / 2.0 + 1.0)
    }

    /// Skips intentions whose gate is already behind the vehicle.
    fn drop_passed_gates(&mut self, s: f64) {
        while self.intention_idx < self.gates.len() && s > self.gates[self.intention_idx] {
            self.intention_idx += 1;
            self.hold = false;
        }
    }

    fn wants_query(&self, tick: u64, s: f64) -> Option<Intention> {
        let idx = self.intention_idx;
        let intent = self.spec.intentions.get(idx)?;
        let gate = self.gates[idx];
        let within = gate - s <= intent.trigger_m && s <= gate;
        (self.status == AgentStatus::Active && within && self.in_flight.is_none() && tick >= self.next_query_tick)
            .then(|| Intention::from_kind(intent.kind))
    }

    /// Nearest own detection on the route ahead: (bumper gap, its speed along the route).
    fn leader(&self, s: f64, seen: &[CalibratedDetection]) -> Option<(f64, f64)> {
        seen.iter()
            .filter_map(|d| {
                let det = &d.detection;
                let (s_o, lateral) = project_onto_polyline(&self.state.route, det.location)?;
                let corridor = (self.spec.extent[1] + det.extent[1]) / 2.0 + 0.5;
                if !(s_o > s && s_o - s < 60.0 && lateral < corridor) {
                    return None;
                }
                let gap = s_o - s - (self.spec.extent[0] + det.extent[0].max(det.extent[1])) / 2.0;
                let along = (det.speed * (det.heading - self.state.heading).cos()).max(0.0);
                Some((gap, along))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    fn control(&self, s: f64, dt: f64, seen: &[CalibratedDetection], config: &SimConfig) -> Control {
        let v = self.state.speed();
        let decel = config.gate_decel;
        // (distance, speed to have reached there)
        let mut targets = vec![(self.route_len - s, 0.0)];
        if let Some((gap, v_lead)) = self.leader(s, seen) {
            targets.push((gap - config.follow_gap_m, v_lead));
        }
        if let Some(&gate) = self.gates.get(self.intention_idx) {
            // Unresolved gate: never pass it without a go decision.
            targets.push((self.stop_point(gate) - s, 0.0));
        }
        let mut v_des = self.spec.cruise_speed;
        let mut accel = f64::INFINITY;
        for (d, vt) in targets {
            v_des = v_des.min((vt * vt + 2.0 * decel * d.max(0.0)).sqrt());
            if v > vt {
                let need = if d > 0.05 { (v * v - vt * vt) / (2.0 * d) } else { f64::INFINITY };
                if need >= 0.5 * decel {
                    accel = accel.min(-need);
                }
            }
        }
        let k = &config.kinematics;
        let accel = accel.min(2.0 * (v_des - v)).clamp(-k.b_max, k.a_max);
        let (throttle, brake) = if accel >= 0.0 { (accel / k.a_max, 0.0) } else { (0.0, -accel / k.b_max) };

        let look = point_at_arc(&self.state.route, s + (0.8 * v).max(4.0)).unwrap_or(self.state.position);
        let err = wrap_angle((look - self.state.position).angle() - self.state.heading);
        let steer = if v > 0.1 && dt > 0.0 { err / (0.4 * k.k_steer * v) } else { 0.0 };
        Control { throttle, brake, steer }
    }
}

enum Payload {
    Bare(String),
    Semantic(String),
}

struct Pending {
    available_tick: u64,
    sender: VehicleId,
    receiver: VehicleId,
    payload: Payload,
}

fn naive_union(own: &[CalibratedDetection], peers: &[(VehicleId, Vec<CalibratedDetection>)]) -> FusionOutcome {
    let mut objects: BTreeMap<VehicleId, FusedObject> = own
        .iter()
        .filter_map(|d| fuse(Some(d), &[]).map(|f| (d.detection.object_id, f)))
        .collect();
    for (_, dets) in peers {
        for d in dets {
            match objects.get_mut(&d.detection.object_id) {
                Some(existing) => existing.peer_observed = true,
                None => {
                    if let Some(f) = fuse(None, &[d]) {
                        objects.insert(d.detection.object_id, f);
                    }
                }
            }
        }
    }
    FusionOutcome {
        objects: objects.into_values().collect(),
    }
}

fn fuse_for(mode: Mode, own: &[CalibratedDetection], peers: &[(VehicleId, Vec<CalibratedDetection>)], cfg: &FusionConfig) -> FusionOutcome {
    match mode {
        Mode::BroadcastAll => naive_union(own, peers),
        _ => select_for_fusion(own, peers, cfg),
    }
}

struct QueryContext<'a> {
    scenario: &'a Scenario,
    config: &'a SimConfig,
    ego: &'a CavState,
    own: &'a [CalibratedDetection],
    peers: &'a [(VehicleId, Vec<CalibratedDetection>)],
    images: &'a BTreeMap<VehicleId, u64>,
    intention: Intention,
}

impl QueryContext<'_> {
    fn lane(&self, p: Vec2) -> Option<u32> {
        self.scenario.lane_of(p, self.config.lane_match_m)
    }

    fn build(&self, subset: &[VehicleId]) -> PlanQuery {
        let peers: Vec<(VehicleId, Vec<CalibratedDetection>)> =
            self.peers.iter().filter(|(id, _)| subset.contains(id)).cloned().collect();
        let outcome = fuse_for(self.config.mode, self.own, &peers, &self.config.fusion);
        let ego_lane = self.lane(self.ego.position);
        let view = |o: &FusedObject| ObjectView::from_fused(o, self.lane(o.location));
        let own_views: Vec<ObjectView> = outcome.objects.iter().filter(|o| o.p_ego.is_some()).map(view).collect();
        let text = format_semantic_message(&own_views, self.ego, ego_lane, &self.config.describe).text;
        let fused_lines: Vec<String> = outcome
            .objects
            .iter()
            .filter(|o| o.p_ego.is_none() && o.object_id != self.ego.id)
            .map(|o| render_vehicle_line(&describe_vehicle(self.ego, ego_lane, &view(o), &self.config.describe)))
            .collect();
        PlanQuery {
            ego_semantic_description: text,
            fused_message: fused_lines.join("\n\n"),
            intention: self.intention,
            images: subset
                .iter()
                .filter_map(|id| self.images.get(id).map(|b| ImageAttachment { sender: *id, bytes: *b }))
                .collect(),
        }
    }
}

/// Ego-only query, then one query with every peer; no PMI gating.
fn plan_without_filter<F>(build: F, peers: &[VehicleId], planner: &dyn Planner) -> Result<PeerFilterOutcome, PlannerError>
where
    F: Fn(&[VehicleId]) -> PlanQuery,
{
    let base = planner.plan(&build(&[]))?;
    if peers.is_empty() {
        return Ok(PeerFilterOutcome {
            base: base.clone(),
            p_without_final: base.probability,
            decision_pmi: base.probability.map(|_| 0.0),
            decision: base,
            included: Vec::new(),
            records: Vec::new(),
            joint_deviation: false,
            fallback: None,
        });
    }
    let decision = match planner.plan(&build(peers)) {
        Ok(d) => d,
        Err(e) => {
            return Ok(PeerFilterOutcome {
                base: base.clone(),
                p_without_final: base.probability,
                decision_pmi: base.probability.map(|_| 0.0),
                decision: base,
                included: Vec::new(),
                records: Vec::new(),
                joint_deviation: false,
                fallback: Some(e.to_string()),
            })
        }
    };
    let p_without_final = base.probability.map(|p| if base.action == decision.action { p } else { 1.0 - p });
    let decision_pmi = match (decision.probability, p_without_final) {
        (Some(pw), Some(pwo)) if pwo > 0.0 => plan_pmi(pwo, pw).ok(),
        (Some(_), Some(_)) => Some(f64::INFINITY),
        _ => None,
    };
    Ok(PeerFilterOutcome {
        joint_deviation: decision_pmi.is_some_and(|v| v < 0.0),
        base,
        decision,
        included: peers.to_vec(),
        records: Vec::new(),
        p_without_final,
        decision_pmi,
        fallback: None,
    })
}

fn round_pmi_record(r: &PlanPmiRecord) -> PlanPmiRecord {
    PlanPmiRecord {
        p_with: r.p_with.map(r6),
        p_without: r.p_without.map(r6),
        value: r.value.map(r6),
        ..r.clone()
    }
}

fn receiver_view(p: &BarePacket) -> CavState {
    CavState {
        id: p.sender_id,
        position: p.position,
        velocity: p.velocity,
        heading: p.heading,
        goal_position: p.position,
        route: vec![p.position],
    }
}

/// Runs one episode and scores the scenario's designated ego from its log.
pub fn run_episode(
    scenario: &Scenario,
    config: &SimConfig,
    planner: &dyn Planner,
    calibrator: &NonconformityModel,
) -> Result<(EpisodeLog, EpisodeMetrics), EngineError> {
    config.validate()?;
    let mode = config.mode;
    let dt = scenario.dt();
    let hz = scenario.tick_rate_hz;
    let to_ticks = |s: f64| (s * hz).ceil().max(0.0) as u64;
    let planner_delay = to_ticks(config.planner_latency_s);
    let requery_ticks = to_ticks(config.requery_s).max(1);
    let stale_ticks = to_ticks(config.staleness_s);
    let images = mode.shares_images();

    let mut agents: Vec<Agent> = scenario.cavs.iter().map(Agent::new).collect();
    agents.sort_by_key(|a| a.id());
    let ids: Vec<VehicleId> = agents.iter().map(|a| a.id()).collect();
    let static_objects: BTreeSet<VehicleId> = scenario.objects.iter().filter(|o| o.is_static()).map(|o| o.id).collect();

    let mut queue: Vec<Pending> = Vec::new();
    let mut bare_inbox: BTreeMap<VehicleId, BTreeMap<VehicleId, BarePacket>> = BTreeMap::new();
    let mut sem_inbox: BTreeMap<VehicleId, BTreeMap<VehicleId, SemanticMessage>> = BTreeMap::new();
    let mut image_inbox: BTreeMap<VehicleId, BTreeMap<VehicleId, u64>> = BTreeMap::new();
    let mut ledger = BandwidthLedger::default();
    let mut collided: BTreeSet<(VehicleId, VehicleId)> = BTreeSet::new();
    let mut ticks = Vec::with_capacity(scenario.duration_ticks as usize);

    for t in 0..scenario.duration_ticks {
        let mut rec = TickRecord {
            tick: t,
            ..Default::default()
        };
        let object_truths = scenario.object_truths(t);

        // 1. world state and infractions at t
        for i in 0..agents.len() {
            if agents[i].status != AgentStatus::Active {
                continue;
            }
            let fp = agents[i].footprint();
            for j in 0..agents.len() {
                let (a, b) = (agents[i].id(), agents[j].id());
                if i == j || collided.contains(&(a.min(b), a.max(b))) || !fp.overlaps(&agents[j].footprint()) {
                    continue;
                }
                collided.insert((a.min(b), a.max(b)));
                for (who, other) in [(i, b), (j, a)] {
                    let ev = config.penalties.event(t, InfractionKind::CollisionVehicle, Some(other));
                    rec.infractions.push(InfractionRecord { cav: agents[who].id(), event: ev });
                    agents[who].status = AgentStatus::Crashed;
                }
            }
            for o in &object_truths {
                let key = (agents[i].id(), o.object_id);
                let ob = OrientedBox {
                    center: o.location,
                    heading: o.heading,
                    length: o.extent[0],
                    width: o.extent[1],
                };
                if collided.contains(&key) || !fp.overlaps(&ob) {
                    continue;
                }
                collided.insert(key);
                let kind = if static_objects.contains(&o.object_id) {
                    InfractionKind::CollisionStatic
                } else {
                    InfractionKind::CollisionVehicle
                };
                rec.infractions.push(InfractionRecord {
                    cav: agents[i].id(),
                    event: config.penalties.event(t, kind, Some(o.object_id)),
                });
                agents[i].status = AgentStatus::Crashed;
            }
        }
        for a in agents.iter_mut() {
            if a.status == AgentStatus::Crashed {
                a.state.velocity = Vec2::ZERO;
                a.in_flight = None;
                continue;
            }
            if a.status != AgentStatus::Active {
                continue;
            }
            let (s, lateral) = a.progress();
            if lateral > config.lane_invasion_m {
                if !a.invading {
                    a.invading = true;
                    rec.infractions.push(InfractionRecord {
                        cav: a.id(),
                        event: config.penalties.event(t, InfractionKind::LaneInvasion, None),
                    });
                }
            } else {
                a.invading = false;
            }
            if s >= a.route_len - ARRIVAL_TOL_M {
                a.status = AgentStatus::Arrived;
                a.state.velocity = Vec2::ZERO;
                a.in_flight = None;
            }
        }
        rec.states = agents
            .iter()
            .map(|a| StateRecord {
                id: a.id(),
                x: r6(a.state.position.0),
                y: r6(a.state.position.1),
                heading: r6(a.state.heading),
                speed: r6(a.state.speed()),
                status: a.status,
            })
            .collect();
        rec.objects = object_truths
            .iter()
            .map(|o| ObjectRecord {
                id: o.object_id,
                x: r6(o.location.0),
                y: r6(o.location.1),
                heading: r6(o.heading),
            })
            .collect();

        // 2. deliveries
        if mode.communicates() {
            let (due, rest): (Vec<Pending>, Vec<Pending>) = queue.into_iter().partition(|p| p.available_tick <= t);
            queue = rest;
            let mut due = due;
            due.sort_by_key(|p| (p.available_tick, p.sender, p.receiver));
            for p in due {
                match p.payload {
                    Payload::Bare(wire) => {
                        if let Ok(pkt) = BarePacket::from_wire(&wire) {
                            bare_inbox.entry(p.receiver).or_default().insert(p.sender, pkt);
                        }
                    }
                    Payload::Semantic(wire) => {
                        if let Ok(msg) = SemanticMessage::from_wire(&wire) {
                            let slot = sem_inbox.entry(p.receiver).or_default();
                            if slot.get(&p.sender).is_none_or(|m| m.tick <= msg.tick) {
                                if images {
                                    image_inbox.entry(p.receiver).or_default().insert(p.sender, config.image_bytes);
                                }
                                slot.insert(p.sender, msg);
                            }
                        }
                    }
                }
            }
        }

        let mut send = |env: MessageEnvelope, payload: Option<Payload>, queue: &mut Vec<Pending>, rec: &mut TickRecord| -> u64 {
            let d = transmit(&env, &config.channel, hz);
            ledger.record(&env);
            let receiver = env.receiver_ids[0];
            rec.envelopes.push(EnvelopeRecord {
                sender: env.sender_id,
                receiver,
                tier: env.tier,
                bytes: env.payload_bytes,
                latency_s: r6(d.latency_s),
                delivered_tick: d.delivered_tick,
            });
            if let Some(payload) = payload {
                queue.push(Pending {
                    available_tick: d.delivered_tick,
                    sender: env.sender_id,
                    receiver,
                    payload,
                });
            }
            d.delivered_tick
        };

        // 3. BARE
        if mode.communicates() {
            for a in &agents {
                let wire = make_bare_packet(&a.state).to_wire();
                for &r in ids.iter().filter(|r| **r != a.id()) {
                    let env = MessageEnvelope::new(a.id(), vec![r], Tier::Bare, &wire, t, images).expect("non-empty BARE packet");
                    send(env, Some(Payload::Bare(wire.clone())), &mut queue, &mut rec);
                }
            }
        }

        // 4. partner selection
        let mut selected: BTreeMap<VehicleId, Vec<VehicleId>> = BTreeMap::new();
        if mode.communicates() {
            for a in &agents {
                let known: Vec<BarePacket> = bare_inbox.get(&a.id()).map(|m| m.values().cloned().collect()).unwrap_or_default();
                let sel: Vec<VehicleId> = if mode.uses_spare() {
                    spare_select(&a.state, &known, &config.spare).into_iter().collect()
                } else {
                    known.iter().map(|p| p.sender_id).collect()
                };
                rec.selections.push(SelectionRecord {
                    cav: a.id(),
                    selected: sel.clone(),
                });
                selected.insert(a.id(), sel);
            }
        }

        // 5. perception, calibration, semantic messages
        let mut own: BTreeMap<VehicleId, Vec<CalibratedDetection>> = BTreeMap::new();
        for a in &agents {
            let mut truths: Vec<ObjectTruth> = agents.iter().filter(|b| b.id() != a.id()).map(|b| b.truth()).collect();
            truths.extend(object_truths.iter().cloned());
            let raw = match scenario.supplied_detections(a.id(), t) {
                Some(d) => d.to_vec(),
                None => synthesize_detections(&truths, &a.state, &config.sensor, scenario.num_classes, mix_seed(&[config.seed, t])),
            };
            let cal: Vec<CalibratedDetection> = raw
                .into_iter()
                .filter_map(|d| CalibratedDetection::new(calibrator, d).ok())
                .collect();
            rec.perception.push(PerceptionRecord {
                cav: a.id(),
                detections: cal
                    .iter()
                    .map(|c| (c.detection.object_id, r6(c.p_calibrated), r6(c.u_p)))
                    .collect(),
            });
            own.insert(a.id(), cal);
        }
        if mode.communicates() {
            for (&receiver, senders) in &selected {
                for &sender in senders {
                    let Some(rx) = bare_inbox.get(&sender).and_then(|m| m.get(&receiver)) else {
                        continue;
                    };
                    let rx_state = receiver_view(rx);
                    let dets: Vec<CalibratedDetection> = own[&sender]
                        .iter()
                        .filter(|d| d.detection.object_id != receiver)
                        .cloned()
                        .collect();
                    let views: Vec<ObjectView> = dets
                        .iter()
                        .map(|d| ObjectView::from_calibrated(d, scenario.lane_of(d.detection.location, config.lane_match_m)))
                        .collect();
                    let text = format_semantic_message(
                        &views,
                        &rx_state,
                        scenario.lane_of(rx.position, config.lane_match_m),
                        &config.describe,
                    )
                    .text;
                    let wire = SemanticMessage::new(sender, receiver, t, text, &dets).to_wire();
                    let env = MessageEnvelope::new(sender, vec![receiver], Tier::Semantic, &wire, t, images).expect("non-empty message");
                    if images {
                        let sem_tick = send(env, None, &mut queue, &mut rec);
                        let img = MessageEnvelope::with_size(sender, vec![receiver], Tier::Image, config.image_bytes, t, true)
                            .map_err(|e| EngineError::Config(e.to_string()))?;
                        let img_tick = send(img, None, &mut queue, &mut rec);
                        // The bundle is usable once both parts have arrived.
                        queue.push(Pending {
                            available_tick: sem_tick.max(img_tick),
                            sender,
                            receiver,
                            payload: Payload::Semantic(wire),
                        });
                    } else {
                        send(env, Some(Payload::Semantic(wire)), &mut queue, &mut rec);
                    }
                }
            }
        }

        // 6. fusion
        let mut peer_sets: BTreeMap<VehicleId, Vec<(VehicleId, Vec<CalibratedDetection>)>> = BTreeMap::new();
        let mut fused_all: BTreeMap<VehicleId, FusionOutcome> = BTreeMap::new();
        for a in &agents {
            let peers: Vec<(VehicleId, Vec<CalibratedDetection>)> = sem_inbox
                .get(&a.id())
                .map(|m| {
                    m.iter()
                        .filter(|(_, msg)| msg.tick + stale_ticks >= t)
                        .filter_map(|(s, msg)| {
                            let dets: Vec<CalibratedDetection> = msg
                                .detections()
                                .ok()?
                                .into_iter()
                                .filter(|d| d.detection.object_id != a.id())
                                .collect();
                            Some((*s, dets))
                        })
                        .collect()
                })
                .unwrap_or_default();
            let outcome = fuse_for(mode, &own[&a.id()], &peers, &config.fusion);
            if mode.communicates() {
                rec.fused.push(FusedRecord {
                    cav: a.id(),
                    objects: outcome
                        .objects
                        .iter()
                        .map(|o| FusedEntry {
                            id: o.object_id,
                            best: o.best_observer,
                            p: r6(o.p_fused),
                            pmi: if o.pmi.is_unseen() { o.pmi } else { Pmi(r6(o.pmi.0)) },
                        })
                        .collect(),
                });
            }
            fused_all.insert(a.id(), outcome);
            peer_sets.insert(a.id(), peers);
        }

        // 7. decisions landing now, then new queries
        for a in agents.iter_mut() {
            let (s, _) = a.progress();
            a.drop_passed_gates(s);
            let Some(f) = a.in_flight.take_if(|f| f.apply_tick <= t) else {
                continue;
            };
            if a.intention_idx >= a.gates.len() {
                continue;
            }
            if f.decision.action.is_go() {
                a.intention_idx += 1;
                a.hold = false;
                a.next_query_tick = t;
            } else {
                a.hold = true;
                a.next_query_tick = t + requery_ticks;
            }
        }
        for a in agents.iter_mut() {
            let (s, _) = a.progress();
            let Some(intention) = a.wants_query(t, s) else {
                continue;
            };
            let no_images = BTreeMap::new();
            let ctx = QueryContext {
                scenario,
                config,
                ego: &a.state,
                own: &own[&a.id()],
                peers: &peer_sets[&a.id()],
                images: image_inbox.get(&a.id()).unwrap_or(&no_images),
                intention,
            };
            let peers_available: Vec<VehicleId> = ctx.peers.iter().map(|(id, _)| *id).collect();
            let build = |subset: &[VehicleId]| ctx.build(subset);
            let outcome = match mode {
                Mode::NoComm => filter_peer_messages(build, &[], planner),
                Mode::BroadcastAll => plan_without_filter(build, &peers_available, planner),
                _ => filter_peer_messages(build, &peers_available, planner),
            };
            let exchanges = planner.take_exchanges();
            match outcome {
                Ok(out) => {
                    let apply_tick = t + planner_delay;
                    rec.plans.push(PlanRecord {
                        cav: a.id(),
                        intention,
                        peers_available: peers_available.clone(),
                        base_query: ctx.build(&[]).description(),
                        final_query: ctx.build(&out.included).description(),
                        base_action: out.base.action,
                        base_probability: out.base.probability.map(r6),
                        action: out.decision.action,
                        probability: out.decision.probability.map(r6),
                        u_d: out.decision.u_d.map(r6),
                        reason: out.decision.reason.clone(),
                        included: out.included.clone(),
                        pmi: out.records.iter().map(round_pmi_record).collect(),
                        decision_pmi: out.decision_pmi.map(r6),
                        joint_deviation: out.joint_deviation,
                        perception_pairs: fused_all[&a.id()]
                            .confidence_pairs()
                            .into_iter()
                            .map(|(x, y)| (r6(x), r6(y)))
                            .collect(),
                        apply_tick,
                        fallback: out.fallback.clone(),
                        error: None,
                        exchanges,
                    });
                    a.in_flight = Some(InFlight {
                        apply_tick,
                        decision: out.decision,
                    });
                }
                Err(e) => {
                    tracing::warn!(cav = %a.id(), tick = t, error = %e, "planner failed; retrying later");
                    a.next_query_tick = t + requery_ticks;
                }
            }
        }
        // Zero planner latency: decisions issued this tick apply immediately.
        if planner_delay == 0 {
            for a in agents.iter_mut() {
                if let Some(f) = a.in_flight.take_if(|f| f.apply_tick <= t) {
                    if f.decision.action.is_go() {
                        a.intention_idx += 1;
                        a.hold = false;
                    } else {
                        a.hold = true;
                        a.next_query_tick = t + requery_ticks;
                    }
                }
            }
        }

        // 8. control and kinematics
        for a in agents.iter_mut().filter(|a| a.status == AgentStatus::Active) {
            let (s, _) = a.progress();
            let u = a.control(s, dt, &own[&a.id()], config);
            let mut next = step_kinematics(&a.state, u, dt, &config.kinematics);
            next.goal_position = a.state.goal_position;
            a.state = next;
        }
        ticks.push(rec);
    }

    let header = LogHeader {
        schema: SCHEMA.into(),
        schema_version: SCHEMA_VERSION,
        scenario: scenario.name.clone(),
        fingerprint: scenario.fingerprint(),
        mode: mode.as_str().into(),
        seed: config.seed,
        planner: planner.name().into(),
        ego: scenario.ego,
        tick_rate_hz: scenario.tick_rate_hz,
        config: serde_json::to_value(config).expect("config serializes"),
    };
    let footer = LogFooter {
        ticks: ticks.len() as u64,
        envelopes: ledger.envelopes,
        total_bytes: ledger.total_bytes,
    };
    let log = EpisodeLog { header, ticks, footer };
    let metrics = metrics_from_log(&log, scenario)?;
    Ok((log, metrics))
}
