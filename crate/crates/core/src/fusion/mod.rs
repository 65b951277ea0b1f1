//! Object-level cross-vehicle fusion.
//!
//! Detections of the same object from several observers are fused with the
//! min-uncertainty rule (adopt the least uncertain view). A peer's view is
//! only admitted when it lowers the ego's uncertainty, i.e. when its
//! perception PMI `ln(p_fused / p_ego)` is strictly positive. Objects the ego
//! cannot see at all carry an explicit `+inf` PMI.

pub mod bev;
pub mod describe;
pub mod message;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::calibration::CalibratedDetection;
use crate::geometry::Vec2;
use crate::scenario::VehicleId;

pub use bev::{bev_svg, render_bev};
pub use describe::{format_semantic_message, parse_semantic_message, DescribeConfig, DescribedVehicle, SemanticDescription};
pub use message::SemanticMessage;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("PMI undefined: both ego and fused confidence are zero")]
    ZeroOverZero,
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
}

/// Pointwise mutual information in nats; `+inf` marks an object only peers see.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Pmi(pub f64);

impl Pmi {
    pub const UNSEEN: Pmi = Pmi(f64::INFINITY);

    pub fn is_unseen(self) -> bool {
        self.0 == f64::INFINITY
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Pmi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_unseen() {
            f.write_str("+inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Pmi {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.is_unseen() {
            s.serialize_str("+inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Pmi {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Pmi(v)),
            Raw::Text(t) if t == "+inf" => Ok(Pmi::UNSEEN),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad PMI `{t}`"))),
        }
    }
}

/// `ln(p_fused / p_ego)`; a zero ego confidence with positive fused
/// confidence is the unseen sentinel.
pub fn perception_pmi(p_ego: f64, p_fused: f64) -> Result<Pmi, FusionError> {
    for p in [p_ego, p_fused] {
        if !(0.0..=1.0).contains(&p) {
            return Err(FusionError::OutOfRange(p));
        }
    }
    match (p_ego == 0.0, p_fused == 0.0) {
        (true, true) => Err(FusionError::ZeroOverZero),
        (true, false) => Ok(Pmi::UNSEEN),
        _ => Ok(Pmi((p_fused / p_ego).ln())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedObject {
    pub object_id: VehicleId,
    pub contributing_observers: Vec<VehicleId>,
    pub p_fused: f64,
    pub u_fused: f64,
    pub best_observer: VehicleId,
    pub class_label: usize,
    pub location: Vec2,
    pub extent: [f64; 3],
    pub speed: f64,
    pub heading: f64,
    /// Ego's own calibrated confidence, when the ego observes the object.
    pub p_ego: Option<f64>,
    /// At least one peer also reported this object.
    pub peer_observed: bool,
    pub pmi: Pmi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionPmi {
    pub object_id: VehicleId,
    pub value: Pmi,
}

/// Fuses contributors with the max-confidence rule. Ties go to the ego, then
/// to the lowest observer id. `None` when there is nothing to fuse.
pub fn fuse(ego: Option<&CalibratedDetection>, peers: &[&CalibratedDetection]) -> Option<FusedObject> {
    let mut ranked: Vec<(bool, &CalibratedDetection)> = ego.map(|e| (true, e)).into_iter().collect();
    let mut sorted_peers = peers.to_vec();
    sorted_peers.sort_by_key(|d| d.detection.observer_id);
    ranked.extend(sorted_peers.into_iter().map(|d| (false, d)));

    let (_, best) = ranked.iter().copied().reduce(|acc, cur| {
        if cur.1.p_calibrated > acc.1.p_calibrated {
            cur
        } else {
            acc
        }
    })?;

    let mut contributing_observers: Vec<VehicleId> = ranked.iter().map(|(_, d)| d.detection.observer_id).collect();
    contributing_observers.sort();
    contributing_observers.dedup();

    let p_ego = ego.map(|e| e.p_calibrated);
    let pmi = match p_ego {
        Some(pe) => perception_pmi(pe, best.p_calibrated).unwrap_or(Pmi(0.0)),
        None => Pmi::UNSEEN,
    };
    let d = &best.detection;
    Some(FusedObject {
        object_id: d.object_id,
        contributing_observers,
        p_fused: best.p_calibrated,
        u_fused: best.u_p,
        best_observer: d.observer_id,
        class_label: best.predicted_class,
        location: d.location,
        extent: d.extent,
        speed: d.speed,
        heading: d.heading,
        p_ego,
        peer_observed: !peers.is_empty(),
        pmi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Ground-truth object ids (simulator mode).
    #[default]
    ById,
    /// Greedy nearest-center matching within a gate.
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: MatchMode,
    pub gate_m: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: MatchMode::ById,
            gate_m: 2.0,
        }
    }
}

/// Index pairs `(ego_idx, peer_idx)`; every detection is used at most once.
pub fn match_objects(
    ego_dets: &[CalibratedDetection],
    peer_dets: &[CalibratedDetection],
    mode: MatchMode,
    gate_m: f64,
) -> Vec<(usize, usize)> {
    match mode {
        MatchMode::ById => ego_dets
            .iter()
            .enumerate()
            .filter_map(|(i, e)| {
                peer_dets
                    .iter()
                    .position(|p| p.detection.object_id == e.detection.object_id)
                    .map(|j| (i, j))
            })
            .collect(),
        MatchMode::Geometric => {
            let ego_pts: Vec<Vec2> = ego_dets.iter().map(|d| d.detection.location).collect();
            let peer_pts: Vec<Vec2> = peer_dets.iter().map(|d| d.detection.location).collect();
            greedy_match(&ego_pts, &peer_pts, gate_m)
        }
    }
}

fn greedy_match(a: &[Vec2], b: &[Vec2], gate_m: f64) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = a
        .iter()
        .enumerate()
        .flat_map(|(i, p)| b.iter().enumerate().map(move |(j, q)| (p.distance(*q), i, j)))
        .filter(|(d, _, _)| *d <= gate_m)
        .collect();
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionOutcome {
    pub objects: Vec<FusedObject>,
}

impl FusionOutcome {
    pub fn pmi(&self) -> Vec<PerceptionPmi> {
        self.objects
            .iter()
            .map(|o| PerceptionPmi {
                object_id: o.object_id,
                value: o.pmi,
            })
            .collect()
    }

    /// Set-level aggregate over objects the ego also sees.
    pub fn finite_pmi_sum(&self) -> f64 {
        self.objects.iter().filter(|o| !o.pmi.is_unseen()).map(|o| o.pmi.0).sum()
    }

    pub fn unseen_count(&self) -> usize {
        self.objects.iter().filter(|o| o.pmi.is_unseen()).count()
    }

    /// `(p_ego, p_fused)` for objects both the ego and a peer observe.
    pub fn confidence_pairs(&self) -> Vec<(f64, f64)> {
        self.objects
            .iter()
            .filter(|o| o.peer_observed)
            .filter_map(|o| o.p_ego.map(|pe| (pe, o.p_fused)))
            .collect()
    }
}

struct Cluster<'a> {
    anchor: Vec2,
    ego: Option<&'a CalibratedDetection>,
    peers: Vec<&'a CalibratedDetection>,
}

/// Builds the ego's fused object set. Peer views of objects the ego sees are
/// admitted only when they strictly lower uncertainty with positive PMI;
/// objects only peers see are always admitted; ego-only objects pass through.
pub fn select_for_fusion(
    ego_set: &[CalibratedDetection],
    peer_sets: &[(VehicleId, Vec<CalibratedDetection>)],
    config: &FusionConfig,
) -> FusionOutcome {
    let mut clusters: Vec<Cluster> = ego_set
        .iter()
        .map(|d| Cluster {
            anchor: d.detection.location,
            ego: Some(d),
            peers: Vec::new(),
        })
        .collect();
    let mut by_id: BTreeMap<VehicleId, usize> = ego_set
        .iter()
        .enumerate()
        .map(|(i, d)| (d.detection.object_id, i))
        .collect();

    let mut peers_sorted: Vec<&(VehicleId, Vec<CalibratedDetection>)> = peer_sets.iter().collect();
    peers_sorted.sort_by_key(|(id, _)| *id);
    for (_, dets) in peers_sorted {
        match config.mode {
            MatchMode::ById => {
                for d in dets {
                    let idx = *by_id.entry(d.detection.object_id).or_insert_with(|| {
                        clusters.push(Cluster {
                            anchor: d.detection.location,
                            ego: None,
                            peers: Vec::new(),
                        });
                        clusters.len() - 1
                    });
                    clusters[idx].peers.push(d);
                }
            }
            MatchMode::Geometric => {
                let anchors: Vec<Vec2> = clusters.iter().map(|c| c.anchor).collect();
                let pts: Vec<Vec2> = dets.iter().map(|d| d.detection.location).collect();
                let pairs = greedy_match(&anchors, &pts, config.gate_m);
                let mut matched = vec![false; dets.len()];
                for (ci, di) in pairs {
                    clusters[ci].peers.push(&dets[di]);
                    matched[di] = true;
                }
                for (di, d) in dets.iter().enumerate() {
                    if !matched[di] {
                        clusters.push(Cluster {
                            anchor: d.detection.location,
                            ego: None,
                            peers: vec![d],
                        });
                    }
                }
            }
        }
    }

    let mut objects: Vec<FusedObject> = clusters
        .iter()
        .filter_map(|c| {
            let admitted: Vec<&CalibratedDetection> = match c.ego {
                None => c.peers.clone(),
                Some(e) => c
                    .peers
                    .iter()
                    .copied()
                    .filter(|p| {
                        let gain = perception_pmi(e.p_calibrated, e.p_calibrated.max(p.p_calibrated));
                        p.u_p < e.u_p && matches!(gain, Ok(v) if v.0 > 0.0)
                    })
                    .collect(),
            };
            let mut fused = fuse(c.ego, &admitted)?;
            fused.peer_observed = !c.peers.is_empty();
            Some(fused)
        })
        .collect();
    objects.sort_by_key(|o| o.object_id);
    FusionOutcome { objects }
}


#[cfg(test)]
mod tests {
    use super::test_support::cal;
    use super::*;

    #[test]
    fn pmi_values() {
        assert!((perception_pmi(0.25, 0.71).unwrap().0 - 1.0438).abs() < 1e-4);
        assert_eq!(perception_pmi(0.4, 0.4).unwrap().0, 0.0);
        assert!((perception_pmi(0.5, 0.76).unwrap().0 - 0.4187).abs() < 1e-4);
        assert_eq!(perception_pmi(0.0, 0.3).unwrap(), Pmi::UNSEEN);
        assert_eq!(perception_pmi(0.0, 0.0), Err(FusionError::ZeroOverZero));
        let p = 0.3;
        assert_eq!(perception_pmi(p / std::f64::consts::E, p).unwrap().0, 1.0);
    }

    #[test]
    fn pmi_serde() {
        assert_eq!(serde_json::to_string(&Pmi::UNSEEN).unwrap(), "\"+inf\"");
        assert_eq!(serde_json::from_str::<Pmi>("\"+inf\"").unwrap(), Pmi::UNSEEN);
        assert_eq!(serde_json::from_str::<Pmi>("0.5").unwrap(), Pmi(0.5));
    }

    #[test]
    fn fuse_takes_better_view() {
        let ego = cal(1, 9, 0.25, Vec2::ZERO);
        let peer = cal(2, 9, 0.71, Vec2::ZERO);
        let f = fuse(Some(&ego), &[&peer]).unwrap();
        assert_eq!(f.p_fused, 0.71);
        assert_eq!(f.best_observer, VehicleId(2));
        assert_eq!(f.contributing_observers, vec![VehicleId(1), VehicleId(2)]);
        assert!((f.pmi.0 - 1.0438).abs() < 1e-4);

        let solo = fuse(Some(&cal(1, 9, 0.6, Vec2::ZERO)), &[]).unwrap();
        assert_eq!(solo.p_fused, 0.6);
        assert!(fuse(None, &[]).is_none());
    }

    #[test]
    fn fuse_tie_breaks() {
        let ego = cal(5, 9, 0.5, Vec2::ZERO);
        let a = cal(3, 9, 0.5, Vec2::ZERO);
        let b = cal(2, 9, 0.5, Vec2::ZERO);
        assert_eq!(fuse(Some(&ego), &[&a, &b]).unwrap().best_observer, VehicleId(5));
        assert_eq!(fuse(None, &[&a, &b]).unwrap().best_observer, VehicleId(2));
    }

    #[test]
    fn matching() {
        let e = vec![cal(1, 10, 0.5, Vec2(0.0, 0.0))];
        let p = vec![cal(2, 11, 0.5, Vec2(1.0, 0.0))];
        assert!(match_objects(&e, &p, MatchMode::ById, 2.0).is_empty());
        assert_eq!(match_objects(&e, &e, MatchMode::ById, 2.0), vec![(0, 0)]);
        assert_eq!(match_objects(&e, &p, MatchMode::Geometric, 2.0), vec![(0, 0)]);
        assert!(match_objects(&e, &p, MatchMode::Geometric, 0.5).is_empty());
    }

    #[test]
    fn greedy_uses_each_detection_once() {
        let e = vec![cal(1, 10, 0.5, Vec2(0.0, 0.0)), cal(1, 11, 0.5, Vec2(0.5, 0.0))];
        let p = vec![cal(2, 12, 0.5, Vec2(0.2, 0.0))];
        assert_eq!(match_objects(&e, &p, MatchMode::Geometric, 2.0), vec![(0, 0)]);
    }

    #[test]
    fn selection_rules() {
        let cfg = FusionConfig::default();
        let ego = vec![cal(1, 2042, 0.76, Vec2::ZERO), cal(1, 2027, 0.5, Vec2(5.0, 0.0))];
        let peers = vec![(
            VehicleId(2),
            vec![
                cal(2, 2042, 0.76, Vec2::ZERO),
                cal(2, 2027, 0.9, Vec2(5.0, 0.0)),
                cal(2, 2541, 0.8, Vec2(9.0, 0.0)),
            ],
        )];
        let out = select_for_fusion(&ego, &peers, &cfg);
        let by: BTreeMap<u32, &FusedObject> = out.objects.iter().map(|o| (o.object_id.0, o)).collect();
        // equal uncertainty: peer view not admitted
        assert_eq!(by[&2042].best_observer, VehicleId(1));
        assert_eq!(by[&2042].pmi, Pmi(0.0));
        assert_eq!(by[&2027].best_observer, VehicleId(2));
        assert!(by[&2027].pmi.0 > 0.0);
        assert!(by[&2541].pmi.is_unseen());
        assert_eq!(out.unseen_count(), 1);
        assert_eq!(out.confidence_pairs().len(), 2);
    }

    #[test]
    fn occluded_object_reaches_ego() {
        let ego = vec![cal(2500, 2530, 0.6, Vec2(10.0, 0.0))];
        let helper = vec![(VehicleId(2506), vec![cal(2506, 2541, 0.9, Vec2(20.0, 0.0))])];
        let out = select_for_fusion(&ego, &helper, &FusionConfig::default());
        assert!(out.objects.iter().any(|o| o.object_id == VehicleId(2541)));
    }
}
