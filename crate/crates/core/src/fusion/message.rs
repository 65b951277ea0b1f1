//! Peer-to-peer shared observations: the semantic text plus a structured
//! per-object payload, serialized together as one JSON document.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibratedDetection;
use crate::geometry::Vec2;
use crate::protocol::ProtocolError;
use crate::scenario::{Detection, VehicleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedObject {
    /// Roll, pitch, yaw in radians.
    pub angle: [f64; 3],
    pub extent: [f64; 3],
    pub location: [f64; 3],
    pub speed: f64,
    /// Raw top-1 detector confidence.
    pub confidence: f64,
    pub class: usize,
    pub confidence_vector: Vec<f64>,
    pub c_star: f64,
    pub p_calibrated: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMessage {
    pub sender: VehicleId,
    pub receiver: VehicleId,
    pub tick: u64,
    pub text: String,
    pub objects: BTreeMap<String, SharedObject>,
}

impl SemanticMessage {
    pub fn new(sender: VehicleId, receiver: VehicleId, tick: u64, text: String, dets: &[CalibratedDetection]) -> Self {
        let objects = dets
            .iter()
            .map(|c| {
                let d = &c.detection;
                (
                    d.object_id.0.to_string(),
                    SharedObject {
                        angle: [0.0, 0.0, d.heading],
                        extent: d.extent,
                        location: [d.location.0, d.location.1, 0.0],
                        speed: d.speed,
                        confidence: c.raw_confidence(),
                        class: c.predicted_class,
                        confidence_vector: d.confidence_vector.clone(),
                        c_star: c.c_star,
                        p_calibrated: c.p_calibrated,
                        uncertainty: c.u_p,
                    },
                )
            })
            .collect();
        SemanticMessage {
            sender,
            receiver,
            tick,
            text,
            objects,
        }
    }

    pub fn to_wire(&self) -> String {
        serde_json::to_string(self).expect("semantic message serializes")
    }

    pub fn from_wire(text: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(text).map_err(|e| ProtocolError::MalformedPacket(e.to_string()))
    }

    /// Detections as the receiver sees them, observer = sender.
    pub fn detections(&self) -> Result<Vec<CalibratedDetection>, ProtocolError> {
        self.objects
            .iter()
            .map(|(key, o)| {
                let id: u32 = key
                    .parse()
                    .map_err(|_| ProtocolError::MalformedPacket(format!("object key `{key}` is not an id")))?;
                Ok(CalibratedDetection {
                    detection: Detection {
                        observer_id: self.sender,
                        object_id: VehicleId(id),
                        location: Vec2(o.location[0], o.location[1]),
                        extent: o.extent,
                        speed: o.speed,
                        heading: o.angle[2],
                        confidence_vector: o.confidence_vector.clone(),
                    },
                    predicted_class: o.class,
                    c_star: o.c_star,
                    p_calibrated: o.p_calibrated,
                    u_p: o.uncertainty,
                })
            })
            .collect()
    }
}
