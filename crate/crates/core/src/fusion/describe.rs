//! Natural-language scene description handed to the planner, plus a strict
//! parser for the same format.
//!
//! ```text
//! Ego Vehicle: Facing E, Speed: 36.250440788922994
//!
//! Vehicle 2042 (perception confidence 0.76/uncertainty 0.24): Relative direction to Ego CAV: SSE, Distance: 6.371047022893454 (close), Facing N, Speed: fast - NOTE: This vehicle is in an adjacent lane
//! ```
//!
//! Relative direction is a 16-wind bearing measured clockwise from the ego's
//! heading (N = dead ahead). An object's facing is its heading relative to
//! the ego's, on 4 winds; the ego's own facing is absolute.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibratedDetection;
use crate::geometry::{wrap_angle, Vec2};
use crate::scenario::{CavState, VehicleId};

use super::FusedObject;

pub const COMPASS16: [&str; 16] = [
    "N", "NNE", "NE", "ENE", "E", "ESE", "SE", "SSE", "S", "SSW", "SW", "WSW", "W", "WNW", "NW", "NNW",
];
pub const COMPASS4: [&str; 4] = ["N", "E", "S", "W"];

const ADJACENT_NOTE: &str = " - NOTE: This vehicle is in an adjacent lane";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescribeConfig {
    pub close_m: f64,
    pub fast_mps: f64,
}

impl Default for DescribeConfig {
    fn default() -> Self {
        DescribeConfig {
            close_m: 10.0,
            fast_mps: 5.0,
        }
    }
}

/// Minimal view of an object for description purposes.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectView {
    pub id: VehicleId,
    pub p: f64,
    pub u: f64,
    pub location: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub lane: Option<u32>,
}

impl ObjectView {
    pub fn from_fused(o: &FusedObject, lane: Option<u32>) -> Self {
        ObjectView {
            id: o.object_id,
            p: o.p_fused,
            u: o.u_fused,
            location: o.location,
            heading: o.heading,
            speed: o.speed,
            lane,
        }
    }

    pub fn from_calibrated(d: &CalibratedDetection, lane: Option<u32>) -> Self {
        ObjectView {
            id: d.detection.object_id,
            p: d.p_calibrated,
            u: d.u_p,
            location: d.detection.location,
            heading: d.detection.heading,
            speed: d.detection.speed,
            lane,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedTag {
    Fast,
    Slow,
}

impl SpeedTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SpeedTag::Fast => "fast",
            SpeedTag::Slow => "slow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoLine {
    pub facing: String,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribedVehicle {
    pub id: VehicleId,
    pub confidence: f64,
    pub uncertainty: f64,
    pub direction: String,
    pub distance: f64,
    pub close: bool,
    pub facing: String,
    pub speed: SpeedTag,
    pub adjacent_lane: bool,
}

impl DescribedVehicle {
    /// Clockwise bearing from the ego heading in degrees, from the 16-wind token.
    pub fn bearing_deg(&self) -> Option<f64> {
        COMPASS16.iter().position(|c| *c == self.direction).map(|i| i as f64 * 22.5)
    }

    /// Right-hand side of the ego, from dead ahead through dead astern.
    pub fn on_right(&self) -> bool {
        self.bearing_deg().is_some_and(|b| b <= 180.0)
    }

    pub fn ahead(&self) -> bool {
        self.bearing_deg().is_some_and(|b| !(90.0..=270.0).contains(&b))
    }

    pub fn behind(&self) -> bool {
        self.bearing_deg().is_some_and(|b| b > 90.0 && b < 270.0)
    }

    /// Heading back toward the ego (relative facing S).
    pub fn oncoming(&self) -> bool {
        self.facing == "S"
    }
}

/// Text and structured form, both shipped with a semantic message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDescription {
    pub text: String,
    pub ego: Option<EgoLine>,
    pub vehicles: Vec<DescribedVehicle>,
}

#[derive(Debug, Error, PartialEq)]
pub enum DescribeError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Python-style float repr: integral values keep a trailing `.0`.
pub fn py_float(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    if x.is_finite() && x.fract() == 0.0 {
        format!("{x:.1}")
    } else {
        format!("{x}")
    }
}

/// `round(x, 2)` printed with Python float repr ("0.0", "0.1", "0.24").
pub fn py_round2(x: f64) -> String {
    py_float((x * 100.0).round() / 100.0)
}

/// Clockwise degrees in [0, 360) from `reference` heading to direction `angle`.
fn clockwise_deg(reference: f64, angle: f64) -> f64 {
    (-wrap_angle(angle - reference)).to_degrees().rem_euclid(360.0)
}

pub fn compass16(cw_deg: f64) -> &'static str {
    COMPASS16[((cw_deg / 22.5).round() as usize) % 16]
}

pub fn compass4(cw_deg: f64) -> &'static str {
    COMPASS4[((cw_deg / 90.0).round() as usize) % 4]
}

/// Absolute facing of a world heading (East = 0 rad) on 4 winds.
pub fn absolute_facing(heading: f64) -> &'static str {
    compass4((90.0 - heading.to_degrees()).rem_euclid(360.0))
}

pub fn describe_vehicle(ego: &CavState, ego_lane: Option<u32>, obj: &ObjectView, cfg: &DescribeConfig) -> DescribedVehicle {
    let delta = obj.location - ego.position;
    let distance = delta.norm();
    let direction = if distance > 0.0 {
        compass16(clockwise_deg(ego.heading, delta.angle()))
    } else {
        "N"
    };
    DescribedVehicle {
        id: obj.id,
        confidence: obj.p,
        uncertainty: obj.u,
        direction: direction.to_string(),
        distance,
        close: distance < cfg.close_m,
        facing: compass4(clockwise_deg(ego.heading, obj.heading)).to_string(),
        speed: if obj.speed >= cfg.fast_mps { SpeedTag::Fast } else { SpeedTag::Slow },
        adjacent_lane: matches!((ego_lane, obj.lane), (Some(a), Some(b)) if a != b),
    }
}

pub fn render_vehicle_line(v: &DescribedVehicle) -> String {
    format!(
        "Vehicle {} (perception confidence {:.2}/uncertainty {}): Relative direction to Ego CAV: {}, Distance: {} ({}), Facing {}, Speed: {}{}",
        v.id.0,
        v.confidence,
        py_round2(v.uncertainty),
        v.direction,
        py_float(v.distance),
        if v.close { "close" } else { "far" },
        v.facing,
        v.speed.as_str(),
        if v.adjacent_lane { ADJACENT_NOTE } else { "" }
    )
}

pub fn render_ego_line(ego: &CavState) -> String {
    format!("Ego Vehicle: Facing {}, Speed: {}", absolute_facing(ego.heading), py_float(ego.speed()))
}

/// Describes `objects` from the ego's point of view, in the given order.
pub fn format_semantic_message(
    objects: &[ObjectView],
    ego: &CavState,
    ego_lane: Option<u32>,
    cfg: &DescribeConfig,
) -> SemanticDescription {
    let vehicles: Vec<DescribedVehicle> = objects
        .iter()
        .filter(|o| o.id != ego.id)
        .map(|o| describe_vehicle(ego, ego_lane, o, cfg))
        .collect();
    let mut blocks = vec![render_ego_line(ego)];
    blocks.extend(vehicles.iter().map(render_vehicle_line));
    SemanticDescription {
        text: blocks.join("\n\n"),
        ego: Some(EgoLine {
            facing: absolute_facing(ego.heading).to_string(),
            speed: ego.speed(),
        }),
        vehicles,
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> DescribeError {
    DescribeError::Malformed {
        line,
        reason: reason.into(),
    }
}

fn take<'a>(s: &'a str, prefix: &str, line: usize) -> Result<&'a str, DescribeError> {
    s.strip_prefix(prefix)
        .ok_or_else(|| malformed(line, format!("expected `{prefix}`")))
}

fn split_once<'a>(s: &'a str, sep: &str, line: usize) -> Result<(&'a str, &'a str), DescribeError> {
    s.split_once(sep).ok_or_else(|| malformed(line, format!("expected `{sep}`")))
}

fn num(s: &str, line: usize) -> Result<f64, DescribeError> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| malformed(line, format!("bad number `{s}`")))
}

fn parse_vehicle(body: &str, line: usize) -> Result<DescribedVehicle, DescribeError> {
    let (id, rest) = split_once(body, " (perception confidence ", line)?;
    let id: u32 = id.parse().map_err(|_| malformed(line, format!("bad id `{id}`")))?;
    let (conf, rest) = split_once(rest, "/uncertainty ", line)?;
    let (unc, rest) = split_once(rest, "): Relative direction to Ego CAV: ", line)?;
    let (direction, rest) = split_once(rest, ", Distance: ", line)?;
    if !COMPASS16.contains(&direction) {
        return Err(malformed(line, format!("bad direction `{direction}`")));
    }
    let (dist, rest) = split_once(rest, " (", line)?;
    let (tag, rest) = split_once(rest, "), Facing ", line)?;
    let close = match tag {
        "close" => true,
        "far" => false,
        other => return Err(malformed(line, format!("bad distance tag `{other}`"))),
    };
    let (facing, rest) = split_once(rest, ", Speed: ", line)?;
    if !COMPASS4.contains(&facing) {
        return Err(malformed(line, format!("bad facing `{facing}`")));
    }
    let (speed, adjacent_lane) = match rest.strip_suffix(ADJACENT_NOTE) {
        Some(s) => (s, true),
        None => (rest, false),
    };
    let speed = match speed {
        "fast" => SpeedTag::Fast,
        "slow" => SpeedTag::Slow,
        other => return Err(malformed(line, format!("bad speed tag `{other}`"))),
    };
    Ok(DescribedVehicle {
        id: VehicleId(id),
        confidence: num(conf, line)?,
        uncertainty: num(unc, line)?,
        direction: direction.to_string(),
        distance: num(dist, line)?,
        close,
        facing: facing.to_string(),
        speed,
        adjacent_lane,
    })
}

/// Strict inverse of [`format_semantic_message`]; blank lines are ignored.
pub fn parse_semantic_message(text: &str) -> Result<SemanticDescription, DescribeError> {
    let mut ego = None;
    let mut vehicles = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        if let Some(rest) = l.strip_prefix("Ego Vehicle: ") {
            let rest = take(rest, "Facing ", line)?;
            let (facing, speed) = split_once(rest, ", Speed: ", line)?;
            ego = Some(EgoLine {
                facing: facing.to_string(),
                speed: num(speed, line)?,
            });
        } else if let Some(rest) = l.strip_prefix("Vehicle ") {
            vehicles.push(parse_vehicle(rest, line)?);
        } else {
            return Err(malformed(line, "unrecognized line"));
        }
    }
    Ok(SemanticDescription {
        text: text.to_string(),
        ego,
        vehicles,
    })
}
