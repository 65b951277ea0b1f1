//! V2V messaging: BARE state broadcast, SPARE partner selection, message
//! envelopes with exact byte accounting, and the channel latency model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::Vec2;
use crate::scenario::{CavState, VehicleId};

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("malformed BARE packet: {0}")]
    MalformedPacket(String),
    #[error("envelope payload must be non-empty")]
    EmptyPayload,
    #[error("image tier used while image sharing is disabled")]
    ImagesDisabled,
    #[error("invalid SPARE distance threshold {0}; must be > 0")]
    BadThreshold(f64),
}

/// Rounds to 2 decimals, folding -0.0 into 0.0.
fn q2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0 + 0.0
}

fn fmt2(x: f64) -> String {
    format!("{:.2}", q2(x))
}

/// Minimal state broadcast: who, where, which way, how fast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarePacket {
    pub sender_id: VehicleId,
    pub position: Vec2,
    pub heading: f64,
    pub velocity: Vec2,
}

impl BarePacket {
    /// The packet as it survives the 2-decimal wire encoding.
    pub fn quantized(&self) -> BarePacket {
        BarePacket {
            sender_id: self.sender_id,
            position: Vec2(q2(self.position.0), q2(self.position.1)),
            heading: q2(self.heading),
            velocity: Vec2(q2(self.velocity.0), q2(self.velocity.1)),
        }
    }

    /// `{"2014": {"position": [-222.67, 240.10], "heading": 0.54, "velocity": [vx, vy]}}`
    pub fn to_wire(&self) -> String {
        format!(
            "{{\"{}\": {{\"position\": [{}, {}], \"heading\": {}, \"velocity\": [{}, {}]}}}}",
            self.sender_id,
            fmt2(self.position.0),
            fmt2(self.position.1),
            fmt2(self.heading),
            fmt2(self.velocity.0),
            fmt2(self.velocity.1),
        )
    }

    pub fn from_wire(text: &str) -> Result<BarePacket, ProtocolError> {
        let bad = |m: &str| ProtocolError::MalformedPacket(m.to_owned());
        let v: Value = serde_json::from_str(text).map_err(|e| ProtocolError::MalformedPacket(e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| bad("top level must be an object"))?;
        if obj.len() != 1 {
            return Err(bad("expected exactly one sender key"));
        }
        let (key, body) = obj.iter().next().expect("one entry");
        let sender: u32 = key.parse().map_err(|_| bad("sender key must be a vehicle id"))?;
        let num = |v: &Value| v.as_f64().ok_or_else(|| bad("expected number"));
        let pair = |name: &str| -> Result<Vec2, ProtocolError> {
            match body.get(name).and_then(Value::as_array) {
                Some(a) if a.len() == 2 => Ok(Vec2(num(&a[0])?, num(&a[1])?)),
                _ => Err(ProtocolError::MalformedPacket(format!("`{name}` must be a 2-array"))),
            }
        };
        Ok(BarePacket {
            sender_id: VehicleId(sender),
            position: pair("position")?,
            heading: num(body.get("heading").ok_or_else(|| bad("missing heading"))?)?,
            velocity: pair("velocity")?,
        })
    }
}

pub fn make_bare_packet(state: &CavState) -> BarePacket {
    BarePacket {
        sender_id: state.id,
        position: state.position,
        heading: state.heading,
        velocity: state.velocity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpareConfig {
    pub distance_threshold_m: f64,
    /// Treat peers with zero velocity as heading-compatible.
    #[serde(default)]
    pub select_stationary: bool,
}

impl Default for SpareConfig {
    fn default() -> Self {
        SpareConfig {
            distance_threshold_m: 50.0,
            select_stationary: false,
        }
    }
}

impl SpareConfig {
    pub fn new(distance_threshold_m: f64) -> Result<Self, ProtocolError> {
        if !(distance_threshold_m > 0.0) {
            return Err(ProtocolError::BadThreshold(distance_threshold_m));
        }
        Ok(SpareConfig {
            distance_threshold_m,
            select_stationary: false,
        })
    }
}

/// Partners worth talking to: within `d` of the ego and moving toward the
/// ego's goal, i.e. `‖p_ego − p‖ ≤ d` and `(p_goal − p)·ṗ > 0`.
pub fn spare_select(ego: &CavState, packets: &[BarePacket], config: &SpareConfig) -> BTreeSet<VehicleId> {
    packets
        .iter()
        .filter(|p| p.sender_id != ego.id)
        .filter(|p| ego.position.distance(p.position) <= config.distance_threshold_m)
        .filter(|p| {
            let toward_goal = (ego.goal_position - p.position).dot(p.velocity);
            toward_goal > 0.0 || (config.select_stationary && p.velocity == Vec2::ZERO)
        })
        .map(|p| p.sender_id)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Bare,
    Semantic,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageEnvelope {
    pub sender_id: VehicleId,
    /// Empty means broadcast.
    pub receiver_ids: Vec<VehicleId>,
    pub tier: Tier,
    pub payload_bytes: u64,
    pub tick_sent: u64,
}

impl MessageEnvelope {
    pub fn new(
        sender_id: VehicleId,
        receiver_ids: Vec<VehicleId>,
        tier: Tier,
        payload: &str,
        tick_sent: u64,
        images_enabled: bool,
    ) -> Result<Self, ProtocolError> {
        Self::with_size(sender_id, receiver_ids, tier, payload.len() as u64, tick_sent, images_enabled)
    }

    pub fn with_size(
        sender_id: VehicleId,
        receiver_ids: Vec<VehicleId>,
        tier: Tier,
        payload_bytes: u64,
        tick_sent: u64,
        images_enabled: bool,
    ) -> Result<Self, ProtocolError> {
        if payload_bytes == 0 {
            return Err(ProtocolError::EmptyPayload);
        }
        if tier == Tier::Image && !images_enabled {
            return Err(ProtocolError::ImagesDisabled);
        }
        Ok(MessageEnvelope {
            sender_id,
            receiver_ids,
            tier,
            payload_bytes,
            tick_sent,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub broadcast_rate_bps: f64,
    pub groupcast_rate_bps: f64,
    pub overhead_s: f64,
    /// Experimental; 0 disables loss.
    #[serde(default)]
    pub drop_probability: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            broadcast_rate_bps: 1_050_000.0,
            groupcast_rate_bps: 1_520_000.0,
            overhead_s: 0.010,
            drop_probability: 0.0,
        }
    }
}

impl ChannelParams {
    pub fn rate_for(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Bare => self.broadcast_rate_bps,
            Tier::Semantic | Tier::Image => self.groupcast_rate_bps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub latency_s: f64,
    pub delivered_tick: u64,
}

/// Serialization time at the tier's rate plus fixed overhead.
pub fn transmit(env: &MessageEnvelope, chan: &ChannelParams, tick_rate_hz: f64) -> DeliveryRecord {
    let latency_s = env.payload_bytes as f64 * 8.0 / chan.rate_for(env.tier) + chan.overhead_s;
    let delay_ticks = (latency_s * tick_rate_hz).ceil().max(0.0) as u64;
    DeliveryRecord {
        latency_s,
        delivered_tick: env.tick_sent + delay_ticks,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierBytes {
    pub bare: u64,
    pub semantic: u64,
    pub image: u64,
}

impl TierBytes {
    pub fn total(&self) -> u64 {
        self.bare + self.semantic + self.image
    }

    fn add(&mut self, tier: Tier, bytes: u64) {
        match tier {
            Tier::Bare => self.bare += bytes,
            Tier::Semantic => self.semantic += bytes,
            Tier::Image => self.image += bytes,
        }
    }
}

/// Per-tick, per-tier byte counts for one episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthLedger {
    pub per_tick: BTreeMap<u64, TierBytes>,
    pub total_bytes: u64,
    pub envelopes: u64,
}

impl BandwidthLedger {
    pub fn record(&mut self, env: &MessageEnvelope) {
        self.per_tick.entry(env.tick_sent).or_default().add(env.tier, env.payload_bytes);
        self.total_bytes += env.payload_bytes;
        self.envelopes += 1;
    }

    pub fn total_kb(&self) -> f64 {
        self.total_bytes as f64 / 1024.0
    }

    /// Running total after each recorded tick.
    pub fn cumulative(&self) -> Vec<(u64, u64)> {
        let mut acc = 0;
        self.per_tick
            .iter()
            .map(|(t, b)| {
                acc += b.total();
                (*t, acc)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cav(id: u32, pos: Vec2, vel: Vec2, goal: Vec2) -> CavState {
        CavState {
            id: VehicleId(id),
            position: pos,
            velocity: vel,
            heading: vel.angle(),
            goal_position: goal,
            route: vec![pos, goal],
        }
    }

    fn packet(id: u32, pos: Vec2, vel: Vec2) -> BarePacket {
        BarePacket { sender_id: VehicleId(id), position: pos, heading: vel.angle(), velocity: vel }
    }

    #[test]
    fn bare_wire_layout() {
        let p = BarePacket {
            sender_id: VehicleId(2014),
            position: Vec2(-222.67, 240.10),
            heading: 0.54,
            velocity: Vec2(0.0, 0.0),
        };
        let wire = p.to_wire();
        assert!(wire.starts_with("{\"2014\": {\"position\": [-222.67, 240.10], \"heading\": 0.54"));
        assert_eq!(BarePacket::from_wire(&wire).unwrap(), p.quantized());
    }

    #[test]
    fn zero_state_packet() {
        let p = make_bare_packet(&cav(7, Vec2::ZERO, Vec2::ZERO, Vec2(1.0, 0.0)));
        assert_eq!(
            p.to_wire(),
            "{\"7\": {\"position\": [0.00, 0.00], \"heading\": 0.00, \"velocity\": [0.00, 0.00]}}"
        );
        assert_eq!(fmt2(-0.001), "0.00");
    }

    #[test]
    fn malformed_packets_rejected() {
        assert!(BarePacket::from_wire("[]").is_err());
        assert!(BarePacket::from_wire("{\"x\": {}}").is_err());
        assert!(BarePacket::from_wire("{\"1\": {\"position\": [1], \"heading\": 0, \"velocity\": [0, 0]}}").is_err());
    }

    #[test]
    fn spare_examples() {
        let ego = cav(1, Vec2::ZERO, Vec2(1.0, 0.0), Vec2(100.0, 0.0));
        let cfg = SpareConfig::default();
        let near = packet(2, Vec2(20.0, 0.0), Vec2(1.0, 0.0));
        assert_eq!(spare_select(&ego, &[near], &cfg), BTreeSet::from([VehicleId(2)]));
        let far = packet(2, Vec2(60.0, 0.0), Vec2(1.0, 0.0));
        assert!(spare_select(&ego, &[far], &cfg).is_empty());
        let away = packet(2, Vec2(20.0, 0.0), Vec2(-1.0, 0.0));
        assert!(spare_select(&ego, &[away], &cfg).is_empty());
    }

    #[test]
    fn spare_boundary_and_stationary() {
        let ego = cav(1, Vec2::ZERO, Vec2(1.0, 0.0), Vec2(100.0, 0.0));
        let at_d = packet(2, Vec2(50.0, 0.0), Vec2(1.0, 0.0));
        assert_eq!(spare_select(&ego, &[at_d], &SpareConfig::default()).len(), 1);
        let parked = packet(3, Vec2(10.0, 0.0), Vec2::ZERO);
        assert!(spare_select(&ego, &[parked], &SpareConfig::default()).is_empty());
        let cfg = SpareConfig { select_stationary: true, ..Default::default() };
        assert_eq!(spare_select(&ego, &[parked], &cfg).len(), 1);
        assert!(SpareConfig::new(0.0).is_err());
    }

    #[test]
    fn text_message_latency() {
        let env = MessageEnvelope::with_size(VehicleId(1), vec![VehicleId(2)], Tier::Semantic, 33_792, 5, false).unwrap();
        let d = transmit(&env, &ChannelParams::default(), 10.0);
        assert!((d.latency_s - 0.187_852_631_578_947_37).abs() < 1e-12);
        assert_eq!(d.delivered_tick, 7);
    }

    #[test]
    fn latency_vanishes_with_infinite_rate() {
        let chan = ChannelParams {
            broadcast_rate_bps: f64::INFINITY,
            groupcast_rate_bps: f64::INFINITY,
            overhead_s: 0.0,
            drop_probability: 0.0,
        };
        let env = MessageEnvelope::with_size(VehicleId(1), vec![], Tier::Bare, 80, 3, false).unwrap();
        let d = transmit(&env, &chan, 10.0);
        assert_eq!(d.latency_s, 0.0);
        assert_eq!(d.delivered_tick, 3);
    }

    #[test]
    fn image_payload_is_three_orders_slower() {
        let text = MessageEnvelope::with_size(VehicleId(1), vec![], Tier::Semantic, 33 * 1024, 0, false).unwrap();
        let image = MessageEnvelope::with_size(VehicleId(1), vec![], Tier::Image, 33_600 * 1024, 0, true).unwrap();
        let chan = ChannelParams::default();
        let (t, i) = (transmit(&text, &chan, 10.0).latency_s, transmit(&image, &chan, 10.0).latency_s);
        assert!((i - 181.09).abs() < 0.01, "{i}");
        assert!((i / t - 1000.0).abs() < 50.0, "{}", i / t);
    }

    #[test]
    fn envelope_guards() {
        assert_eq!(
            MessageEnvelope::new(VehicleId(1), vec![], Tier::Semantic, "", 0, false),
            Err(ProtocolError::EmptyPayload)
        );
        assert_eq!(
            MessageEnvelope::new(VehicleId(1), vec![], Tier::Image, "x", 0, false),
            Err(ProtocolError::ImagesDisabled)
        );
    }

    #[test]
    fn ledger_totals() {
        let mut ledger = BandwidthLedger::default();
        let env = MessageEnvelope::with_size(VehicleId(1), vec![], Tier::Bare, 100, 0, false).unwrap();
        ledger.record(&env);
        assert_eq!(ledger.total_bytes, 100);
        let env2 = MessageEnvelope::with_size(VehicleId(1), vec![], Tier::Semantic, 50, 2, false).unwrap();
        ledger.record(&env2);
        assert_eq!(ledger.cumulative(), vec![(0, 100), (2, 150)]);
        assert_eq!(ledger.per_tick[&2].semantic, 50);
    }
}
