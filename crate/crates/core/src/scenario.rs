//! World model: scenario files, ground-truth objects, point-mass kinematics
//! and the synthetic detector used in place of a camera pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_onto_polyline, wrap_angle, OrientedBox, Vec2};

/// Identifier shared by CAVs and regular vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const DEFAULT_NUM_CLASSES: usize = 4;
pub const DEFAULT_EXTENT: [f64; 3] = [4.5, 2.0, 1.5];
const HEADING_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("scenario must contain ≥ 1 CAV")]
    NoCavs,
    #[error("detection references unknown object_id {0}")]
    UnknownObject(VehicleId),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Kinematic state of a connected vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavState {
    pub id: VehicleId,
    pub position: Vec2,
    pub velocity: Vec2,
    pub heading: f64,
    pub goal_position: Vec2,
    pub route: Vec<Vec2>,
}

impl CavState {
    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }

    pub fn validate(&self, field: &str) -> Result<(), ScenarioError> {
        if !self.position.is_finite() || !self.velocity.is_finite() || !self.heading.is_finite() {
            return Err(invalid(field, "non-finite kinematic value"));
        }
        if self.speed() > 1e-6 {
            let diff = wrap_angle(self.velocity.angle() - self.heading).abs();
            if diff > HEADING_TOL {
                return Err(invalid(
                    format!("{field}.heading"),
                    format!("heading {} disagrees with velocity direction by {diff:e} rad", self.heading),
                ));
            }
        }
        let last = self
            .route
            .last()
            .ok_or_else(|| invalid(format!("{field}.route"), "route must be non-empty"))?;
        if last.distance(self.goal_position) > 1e-6 {
            return Err(invalid(
                format!("{field}.goal"),
                "goal must equal the final route waypoint",
            ));
        }
        Ok(())
    }
}

/// Ground truth for one object at one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub object_id: VehicleId,
    pub class_label: usize,
    pub location: Vec2,
    pub extent: [f64; 3],
    pub speed: f64,
    pub heading: f64,
}

/// An observed object with its class-wise confidence vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub observer_id: VehicleId,
    pub object_id: VehicleId,
    pub location: Vec2,
    pub extent: [f64; 3],
    pub speed: f64,
    #[serde(default)]
    pub heading: f64,
    pub confidence_vector: Vec<f64>,
}

impl Detection {
    pub fn validate(&self, num_classes: usize, field: &str) -> Result<(), ScenarioError> {
        let v = &self.confidence_vector;
        if v.len() < 2 {
            return Err(invalid(format!("{field}.confidence_vector"), "needs at least 2 classes"));
        }
        if v.len() != num_classes {
            return Err(invalid(
                format!("{field}.confidence_vector"),
                format!("expected {num_classes} entries, found {}", v.len()),
            ));
        }
        if v.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid(format!("{field}.confidence_vector"), "entries must lie in [0, 1]"));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(
                format!("{field}.confidence_vector"),
                format!("entries sum to {sum}, expected 1"),
            ));
        }
        if self.extent.iter().any(|e| *e <= 0.0) {
            return Err(invalid(format!("{field}.extent"), "extent components must be > 0"));
        }
        Ok(())
    }

    /// Index of the most confident class.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.confidence_vector)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: u32,
    pub polyline: Vec<Vec2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentionKind {
    MergePoint,
    IntersectionEntry,
}

/// A decision point along a CAV's route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionPoint {
    pub kind: IntentionKind,
    /// Location of the conflict zone entry (merge gore, stop line).
    pub at: Vec2,
    /// Distance before `at` (along the route) where the planner is queried.
    #[serde(default = "default_trigger")]
    pub trigger_m: f64,
}

fn default_trigger() -> f64 {
    40.0
}

/// Scenario-level description of one CAV.
#[derive(Debug, Clone, PartialEq)]
pub struct CavSpec {
    pub initial: CavState,
    pub extent: [f64; 3],
    pub cruise_speed: f64,
    pub intentions: Vec<IntentionPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub tick: u64,
    pub location: Vec2,
    #[serde(default)]
    pub speed: f64,
    #[serde(default)]
    pub heading: f64,
}

/// Scripted (non-reactive) trajectory of a regular vehicle or static object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub id: VehicleId,
    #[serde(rename = "class")]
    pub class_label: usize,
    pub extent: [f64; 3],
    pub per_tick: Vec<TrackSample>,
}

impl ObjectTrack {
    /// Linear interpolation between keyframes; held constant outside them.
    pub fn at(&self, tick: u64) -> ObjectTruth {
        let samples = &self.per_tick;
        let idx = samples.partition_point(|s| s.tick <= tick);
        let (location, speed, heading) = if idx == 0 {
            let s = &samples[0];
            (s.location, s.speed, s.heading)
        } else if idx == samples.len() {
            let s = &samples[idx - 1];
            (s.location, s.speed, s.heading)
        } else {
            let (a, b) = (&samples[idx - 1], &samples[idx]);
            let t = (tick - a.tick) as f64 / (b.tick - a.tick) as f64;
            (
                a.location + (b.location - a.location) * t,
                a.speed + (b.speed - a.speed) * t,
                wrap_angle(a.heading + wrap_angle(b.heading - a.heading) * t),
            )
        };
        ObjectTruth {
            object_id: self.id,
            class_label: self.class_label,
            location,
            extent: self.extent,
            speed,
            heading,
        }
    }

    /// True when the object never moves.
    pub fn is_static(&self) -> bool {
        let first = self.per_tick[0].location;
        self.per_tick
            .iter()
            .all(|s| s.speed == 0.0 && s.location.distance(first) < 1e-9)
    }
}

/// Validated, immutable scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub tick_rate_hz: f64,
    pub duration_ticks: u64,
    pub num_classes: usize,
    pub lanes: Vec<Lane>,
    pub cavs: Vec<CavSpec>,
    pub objects: Vec<ObjectTrack>,
    pub detections: BTreeMap<VehicleId, BTreeMap<u64, Vec<Detection>>>,
    pub ego: VehicleId,
    pub conflict_pair: Option<(VehicleId, VehicleId)>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CavFile {
    id: VehicleId,
    position: Vec2,
    velocity: Vec2,
    heading: f64,
    goal: Vec2,
    route: Vec<Vec2>,
    #[serde(default)]
    extent: Option<[f64; 3]>,
    #[serde(default)]
    cruise_speed: Option<f64>,
    #[serde(default)]
    intentions: Vec<IntentionPoint>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ScenarioFile {
    #[serde(default)]
    name: Option<String>,
    tick_rate_hz: f64,
    duration_ticks: u64,
    #[serde(default)]
    num_classes: Option<usize>,
    #[serde(default)]
    lanes: Vec<Lane>,
    cavs: Vec<CavFile>,
    #[serde(default)]
    objects: Vec<ObjectTrack>,
    #[serde(default)]
    detections: Option<BTreeMap<VehicleId, BTreeMap<u64, Vec<Detection>>>>,
    #[serde(default)]
    ego: Option<VehicleId>,
    #[serde(default)]
    conflict_pair: Option<(VehicleId, VehicleId)>,
}

/// Reads and validates a scenario JSON document.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".to_owned());
    parse_scenario(&text, &default_name)
}

pub fn parse_scenario(text: &str, default_name: &str) -> Result<Scenario, ScenarioError> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    build(file, default_name)
}

fn build(file: ScenarioFile, default_name: &str) -> Result<Scenario, ScenarioError> {
    if !(file.tick_rate_hz > 0.0) || !file.tick_rate_hz.is_finite() {
        return Err(invalid("tick_rate_hz", "must be > 0"));
    }
    if file.cavs.is_empty() {
        return Err(ScenarioError::NoCavs);
    }
    let num_classes = file.num_classes.unwrap_or(DEFAULT_NUM_CLASSES);
    if num_classes < 2 {
        return Err(invalid("num_classes", "need at least 2 classes"));
    }

    let mut ids = BTreeSet::new();
    let mut cavs = Vec::with_capacity(file.cavs.len());
    for (i, c) in file.cavs.into_iter().enumerate() {
        let field = format!("cavs[{i}]");
        if !ids.insert(c.id) {
            return Err(invalid(format!("{field}.id"), format!("duplicate id {}", c.id)));
        }
        let initial = CavState {
            id: c.id,
            position: c.position,
            velocity: c.velocity,
            heading: c.heading,
            goal_position: c.goal,
            route: c.route,
        };
        initial.validate(&field)?;
        let extent = c.extent.unwrap_or(DEFAULT_EXTENT);
        if extent.iter().any(|e| *e <= 0.0) {
            return Err(invalid(format!("{field}.extent"), "extent components must be > 0"));
        }
        let cruise_speed = c.cruise_speed.unwrap_or_else(|| initial.speed());
        cavs.push(CavSpec {
            initial,
            extent,
            cruise_speed,
            intentions: c.intentions,
        });
    }

    for (i, o) in file.objects.iter().enumerate() {
        let field = format!("objects[{i}]");
        if !ids.insert(o.id) {
            return Err(invalid(format!("{field}.id"), format!("duplicate id {}", o.id)));
        }
        if o.class_label >= num_classes {
            return Err(invalid(format!("{field}.class"), format!("class {} ≥ L = {num_classes}", o.class_label)));
        }
        if o.extent.iter().any(|e| *e <= 0.0) {
            return Err(invalid(format!("{field}.extent"), "extent components must be > 0"));
        }
        if o.per_tick.is_empty() {
            return Err(invalid(format!("{field}.per_tick"), "needs at least one sample"));
        }
        if o.per_tick.windows(2).any(|w| w[0].tick >= w[1].tick) {
            return Err(invalid(format!("{field}.per_tick"), "ticks must be strictly increasing"));
        }
    }

    let detections = file.detections.unwrap_or_default();
    for (cav, per_tick) in &detections {
        if !cavs.iter().any(|c| c.initial.id == *cav) {
            return Err(invalid("detections", format!("unknown observer CAV {cav}")));
        }
        for (tick, dets) in per_tick {
            for (k, d) in dets.iter().enumerate() {
                if !ids.contains(&d.object_id) {
                    return Err(ScenarioError::UnknownObject(d.object_id));
                }
                d.validate(num_classes, &format!("detections.{cav}.{tick}[{k}]"))?;
            }
        }
    }

    let ego = file.ego.unwrap_or(cavs[0].initial.id);
    if !cavs.iter().any(|c| c.initial.id == ego) {
        return Err(invalid("ego", format!("{ego} is not a CAV")));
    }
    if let Some((a, b)) = file.conflict_pair {
        for v in [a, b] {
            if !ids.contains(&v) {
                return Err(invalid("conflict_pair", format!("unknown id {v}")));
            }
        }
    }

    Ok(Scenario {
        name: file.name.unwrap_or_else(|| default_name.to_owned()),
        tick_rate_hz: file.tick_rate_hz,
        duration_ticks: file.duration_ticks,
        num_classes,
        lanes: file.lanes,
        cavs,
        objects: file.objects,
        detections,
        ego,
        conflict_pair: file.conflict_pair,
    })
}

impl Scenario {
    pub fn dt(&self) -> f64 {
        1.0 / self.tick_rate_hz
    }

    /// CAVs plus moving scripted objects; static scenery is not tracked.
    pub fn tracked_entities(&self) -> usize {
        self.cavs.len() + self.objects.iter().filter(|o| !o.is_static()).count()
    }

    pub fn cav(&self, id: VehicleId) -> Option<&CavSpec> {
        self.cavs.iter().find(|c| c.initial.id == id)
    }

    pub fn object_truths(&self, tick: u64) -> Vec<ObjectTruth> {
        self.objects.iter().map(|o| o.at(tick)).collect()
    }

    /// Lane whose centerline is nearest to `p`, if any lane is within `max_offset_m`.
    pub fn lane_of(&self, p: Vec2, max_offset_m: f64) -> Option<u32> {
        self.lanes
            .iter()
            .filter_map(|l| project_onto_polyline(&l.polyline, p).map(|(_, d)| (l.id, d)))
            .filter(|(_, d)| *d <= max_offset_m)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(id, _)| id)
    }

    /// Scenario-supplied detections for an observer at a tick, if the file provides any.
    pub fn supplied_detections(&self, observer: VehicleId, tick: u64) -> Option<&[Detection]> {
        self.detections
            .get(&observer)
            .and_then(|m| m.get(&tick))
            .map(Vec::as_slice)
    }

    /// Stable digest of the scenario contents, used to tie logs to scenarios.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let file = ScenarioFile {
            name: Some(self.name.clone()),
            tick_rate_hz: self.tick_rate_hz,
            duration_ticks: self.duration_ticks,
            num_classes: Some(self.num_classes),
            lanes: self.lanes.clone(),
            cavs: self
                .cavs
                .iter()
                .map(|c| CavFile {
                    id: c.initial.id,
                    position: c.initial.position,
                    velocity: c.initial.velocity,
                    heading: c.initial.heading,
                    goal: c.initial.goal_position,
                    route: c.initial.route.clone(),
                    extent: Some(c.extent),
                    cruise_speed: Some(c.cruise_speed),
                    intentions: c.intentions.clone(),
                })
                .collect(),
            objects: self.objects.clone(),
            detections: Some(self.detections.clone()),
            ego: Some(self.ego),
            conflict_pair: self.conflict_pair,
        };
        let bytes = serde_json::to_vec(&file).expect("scenario serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_owned()
    }
}

// ---------------------------------------------------------------------------
// Kinematics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicsParams {
    pub a_max: f64,
    pub b_max: f64,
    pub v_max: f64,
    pub k_steer: f64,
}

impl Default for KinematicsParams {
    fn default() -> Self {
        KinematicsParams {
            a_max: 3.0,
            b_max: 8.0,
            v_max: 40.0,
            k_steer: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub throttle: f64,
    pub brake: f64,
    pub steer: f64,
}

impl Control {
    pub fn clamped(self) -> Control {
        let fix = |v: f64, lo: f64, hi: f64| if v.is_finite() { v.clamp(lo, hi) } else { 0.0 };
        Control {
            throttle: fix(self.throttle, 0.0, 1.0),
            brake: fix(self.brake, 0.0, 1.0),
            steer: fix(self.steer, -1.0, 1.0),
        }
    }
}

/// Point-mass update. Controls are clamped; a non-positive `dt` leaves the state unchanged.
pub fn step_kinematics(state: &CavState, control: Control, dt: f64, params: &KinematicsParams) -> CavState {
    if !(dt > 0.0) {
        return state.clone();
    }
    let c = control.clamped();
    let speed = (state.speed() + (params.a_max * c.throttle - params.b_max * c.brake) * dt)
        .clamp(0.0, params.v_max);
    let heading = wrap_angle(state.heading + c.steer * params.k_steer * dt * speed);
    let dir = Vec2::from_heading(heading);
    let mut next = state.clone();
    next.heading = heading;
    next.velocity = dir * speed;
    next.position = state.position + dir * (speed * dt);
    next
}

// ---------------------------------------------------------------------------
// Synthetic detector
// ---------------------------------------------------------------------------

/// Synthetic camera/detector model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub range_m: f64,
    pub fov_rad: f64,
    pub noise_temp: f64,
    /// Standard deviation of the logit perturbation.
    #[serde(default = "one")]
    pub perturbation_std: f64,
    /// Temperature grows as `noise_temp * (1 + gain * distance / range)`.
    #[serde(default)]
    pub range_temp_gain: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            range_m: 80.0,
            fov_rad: std::f64::consts::TAU,
            noise_temp: 0.5,
            perturbation_std: 1.0,
            range_temp_gain: 0.0,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent RNG streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9E37_79B9_7F4A_7C15;
    for p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Softmax of `one_hot(true_class) / temp + N(0, std²)` drawn from `rng`.
pub fn synth_confidence(true_class: usize, num_classes: usize, temp: f64, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let logits: Vec<f64> = (0..num_classes)
        .map(|l| {
            let noise: f64 = StandardNormal.sample(rng);
            let hot = if l == true_class { 1.0 / temp } else { 0.0 };
            hot + std * noise
        })
        .collect();
    softmax(&logits)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn is_occluded(observer: Vec2, target: &ObjectTruth, others: &[ObjectTruth], observer_id: VehicleId) -> bool {
    others.iter().any(|o| {
        if o.object_id == target.object_id || o.object_id == observer_id {
            return false;
        }
        let fp = OrientedBox {
            center: o.location,
            heading: o.heading,
            length: o.extent[0],
            width: o.extent[1],
        }
        .bounding_box();
        !fp.contains(observer) && fp.intersects_segment(observer, target.location)
    })
}

/// Detections of every truth object that is in range, inside the field of
/// view and not hidden behind another object's footprint. Deterministic in
/// `rng_seed`; each object gets its own stream so visibility of one object
/// never shifts the noise of another.
pub fn synthesize_detections(
    truth: &[ObjectTruth],
    observer: &CavState,
    sensor: &SensorModel,
    num_classes: usize,
    rng_seed: u64,
) -> Vec<Detection> {
    let mut out: Vec<Detection> = truth
        .iter()
        .filter(|t| t.object_id != observer.id)
        .filter_map(|t| {
            let rel = t.location - observer.position;
            let dist = rel.norm();
            if dist > sensor.range_m {
                return None;
            }
            if sensor.fov_rad < std::f64::consts::TAU && dist > 1e-9 {
                let off = wrap_angle(rel.angle() - observer.heading).abs();
                if off > sensor.fov_rad / 2.0 {
                    return None;
                }
            }
            if is_occluded(observer.position, t, truth, observer.id) {
                return None;
            }
            let temp = sensor.noise_temp * (1.0 + sensor.range_temp_gain * dist / sensor.range_m);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[rng_seed, observer.id.0 as u64, t.object_id.0 as u64]));
            let confidence_vector = synth_confidence(t.class_label, num_classes, temp, sensor.perturbation_std, &mut rng);
            Some(Detection {
                observer_id: observer.id,
                object_id: t.object_id,
                location: t.location,
                extent: t.extent,
                speed: t.speed,
                heading: t.heading,
                confidence_vector,
            })
        })
        .collect();
    out.sort_by_key(|d| d.object_id);
    out
}

/// Calibration/test pairs from the synthetic detector: uniform classes,
/// unoccluded objects at uniformly drawn ranges inside the sensor range.
pub fn synthesize_labelled_set(sensor: &SensorModel, num_classes: usize, n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xCA11B]));
    (0..n)
        .map(|_| {
            let class = rng.random_range(0..num_classes);
            let dist = rng.random_range(0.0..sensor.range_m);
            let temp = sensor.noise_temp * (1.0 + sensor.range_temp_gain * dist / sensor.range_m);
            (synth_confidence(class, num_classes, temp, sensor.perturbation_std, &mut rng), class)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(speed: f64) -> CavState {
        CavState {
            id: VehicleId(100),
            position: Vec2(0.0, 0.0),
            velocity: Vec2(speed, 0.0),
            heading: 0.0,
            goal_position: Vec2(100.0, 0.0),
            route: vec![Vec2(0.0, 0.0), Vec2(100.0, 0.0)],
        }
    }

    fn truth(id: u32, x: f64, y: f64) -> ObjectTruth {
        ObjectTruth {
            object_id: VehicleId(id),
            class_label: 1,
            location: Vec2(x, y),
            extent: [4.5, 2.0, 1.5],
            speed: 0.0,
            heading: 0.0,
        }
    }

    #[test]
    fn idle_state_is_fixed_point() {
        let s = state(0.0);
        let n = step_kinematics(&s, Control::default(), 0.1, &KinematicsParams::default());
        assert_eq!(n, s);
    }

    #[test]
    fn braking_arithmetic() {
        let n = step_kinematics(
            &state(10.0),
            Control { brake: 1.0, ..Default::default() },
            0.1,
            &KinematicsParams::default(),
        );
        assert!((n.speed() - 9.2).abs() < 1e-12);
    }

    #[test]
    fn full_brake_stops_without_reversing() {
        let p = KinematicsParams::default();
        let mut s = state(16.0);
        let brake = Control { brake: 1.0, ..Default::default() };
        for _ in 0..20 {
            s = step_kinematics(&s, brake, 0.1, &p);
        }
        assert_eq!(s.speed(), 0.0);
        s = step_kinematics(&s, brake, 0.1, &p);
        assert_eq!(s.speed(), 0.0);
    }

    #[test]
    fn occluder_on_line_of_sight_hides_target() {
        let observer = state(0.0);
        let objs = vec![truth(10, 20.0, 0.0), truth(11, 40.0, 0.0), truth(12, 20.0, 15.0)];
        let dets = synthesize_detections(&objs, &observer, &SensorModel::default(), 4, 1);
        let seen: Vec<u32> = dets.iter().map(|d| d.object_id.0).collect();
        assert_eq!(seen, vec![10, 12]);
    }

    #[test]
    fn out_of_range_and_fov_are_dropped() {
        let observer = state(0.0);
        let sensor = SensorModel { range_m: 50.0, fov_rad: std::f64::consts::FRAC_PI_2, ..Default::default() };
        let objs = vec![truth(1, 30.0, 5.0), truth(2, 60.0, 0.0), truth(3, -20.0, 0.0)];
        let dets = synthesize_detections(&objs, &observer, &sensor, 4, 1);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].object_id, VehicleId(1));
    }

    #[test]
    fn vanishing_temperature_gives_one_hot() {
        let observer = state(0.0);
        let sensor = SensorModel { noise_temp: 1e-6, ..Default::default() };
        let dets = synthesize_detections(&[truth(1, 10.0, 0.0)], &observer, &sensor, 4, 3);
        assert_eq!(dets[0].confidence_vector, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let observer = state(0.0);
        let a = synthesize_detections(&[truth(1, 10.0, 0.0)], &observer, &SensorModel::default(), 4, 42);
        let b = synthesize_detections(&[truth(1, 10.0, 0.0)], &observer, &SensorModel::default(), 4, 42);
        let bits = |d: &[Detection]| d[0].confidence_vector.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = synthesize_detections(&[truth(1, 10.0, 0.0)], &observer, &SensorModel::default(), 4, 43);
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn argmax_frequency_falls_with_temperature() {
        let mut prev = 1.1;
        for temp in [0.1, 0.5, 1.0] {
            let sensor = SensorModel { noise_temp: temp, ..Default::default() };
            let set = synthesize_labelled_set(&sensor, 4, 1000, 11);
            for (v, _) in &set {
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let hits = set.iter().filter(|(v, y)| argmax(v) == *y).count() as f64 / 1000.0;
            assert!(hits <= prev, "temp {temp}: {hits} > {prev}");
            prev = hits;
        }
    }

    #[test]
    fn interpolates_tracks() {
        let track = ObjectTrack {
            id: VehicleId(5),
            class_label: 0,
            extent: [4.0, 2.0, 1.5],
            per_tick: vec![
                TrackSample { tick: 0, location: Vec2(0.0, 0.0), speed: 10.0, heading: 0.0 },
                TrackSample { tick: 10, location: Vec2(10.0, 0.0), speed: 10.0, heading: 0.0 },
            ],
        };
        assert_eq!(track.at(5).location, Vec2(5.0, 0.0));
        assert_eq!(track.at(20).location, Vec2(10.0, 0.0));
        assert!(!track.is_static());
    }
}
