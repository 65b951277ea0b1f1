//! High-level planning behind a [`Planner`] interface, plus decision
//! uncertainty and plan-level PMI filtering of peer messages.

pub mod llm;
pub mod mock;
pub mod prompts;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{IntentionKind, VehicleId};

pub use llm::{parse_plan_response, LlmConfig, LlmPlanner};
pub use mock::{MockConfig, MockPlanner};
pub use prompts::{build_perception_prompt, build_planning_prompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanAction {
    Merge,
    NoMerge,
    Proceed,
    Stop,
    Yield,
}

impl PlanAction {
    pub fn as_text(self) -> &'static str {
        match self {
            PlanAction::Merge => "merge",
            PlanAction::NoMerge => "no merge",
            PlanAction::Proceed => "proceed",
            PlanAction::Stop => "stop",
            PlanAction::Yield => "yield",
        }
    }

    /// Accepts "no merge", "no_merge", "No Merge", optionally bracketed.
    pub fn parse(s: &str) -> Option<PlanAction> {
        let norm = s
            .trim()
            .trim_matches(|c| c == '[' || c == ']' || c == '.' || c == '*')
            .trim()
            .to_ascii_lowercase()
            .replace(['_', '-'], " ");
        match norm.as_str() {
            "merge" => Some(PlanAction::Merge),
            "no merge" => Some(PlanAction::NoMerge),
            "proceed" => Some(PlanAction::Proceed),
            "stop" => Some(PlanAction::Stop),
            "yield" => Some(PlanAction::Yield),
            _ => None,
        }
    }

    /// The action that commits to the maneuver.
    pub fn is_go(self) -> bool {
        matches!(self, PlanAction::Merge | PlanAction::Proceed)
    }

    /// The opposite action in a binary choice.
    pub fn complement(self) -> PlanAction {
        match self {
            PlanAction::Merge => PlanAction::NoMerge,
            PlanAction::NoMerge => PlanAction::Merge,
            PlanAction::Proceed => PlanAction::Stop,
            PlanAction::Stop | PlanAction::Yield => PlanAction::Proceed,
        }
    }
}

impl fmt::Display for PlanAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_text())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intention {
    Merge,
    Turn,
    Proceed,
    StopContext,
}

impl Intention {
    pub fn from_kind(kind: IntentionKind) -> Self {
        match kind {
            IntentionKind::MergePoint => Intention::Merge,
            IntentionKind::IntersectionEntry => Intention::Proceed,
        }
    }

    /// Verb phrase completing "It currently ...".
    pub fn phrase(self) -> &'static str {
        match self {
            Intention::Merge => "intends to merge into the right lane",
            Intention::Turn => "intends to turn at the intersection",
            Intention::Proceed => "intends to proceed straight through the intersection",
            Intention::StopContext => "is stopped and waiting",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub sender: VehicleId,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanQuery {
    pub ego_semantic_description: String,
    #[serde(default)]
    pub fused_message: String,
    pub intention: Intention,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageAttachment>,
}

impl PlanQuery {
    pub fn new(ego_semantic_description: impl Into<String>, intention: Intention) -> Self {
        PlanQuery {
            ego_semantic_description: ego_semantic_description.into(),
            fused_message: String::new(),
            intention,
            images: Vec::new(),
        }
    }

    /// Description as substituted into the planning prompt.
    pub fn description(&self) -> String {
        if self.fused_message.is_empty() {
            self.ego_semantic_description.clone()
        } else {
            format!("{}\n\n{}", self.ego_semantic_description, self.fused_message)
        }
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.ego_semantic_description.trim().is_empty() {
            return Err(PlannerError::InvalidQuery("empty semantic description".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDecision {
    pub action: PlanAction,
    pub reason: String,
    /// Likelihood of `action`; absent for planners without token probabilities.
    pub probability: Option<f64>,
    pub u_d: Option<f64>,
}

impl PlanDecision {
    pub fn new(action: PlanAction, reason: impl Into<String>, probability: Option<f64>) -> Result<Self, PlannerError> {
        let u_d = probability.map(decision_uncertainty).transpose()?;
        Ok(PlanDecision {
            action,
            reason: reason.into(),
            probability,
            u_d,
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PlannerError {
    #[error("probability {0} outside (0, 1]")]
    BadProbability(f64),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unparseable planner response ({reason}): {raw}")]
    Format { reason: String, raw: String },
    #[error("planner cannot handle {0}")]
    Unsupported(String),
}

/// `u_d = −ln p`.
pub fn decision_uncertainty(probability: f64) -> Result<f64, PlannerError> {
    if !(probability > 0.0 && probability <= 1.0) {
        return Err(PlannerError::BadProbability(probability));
    }
    Ok(-probability.ln())
}

/// `ln(p_with / p_without)`.
pub fn plan_pmi(p_without: f64, p_with: f64) -> Result<f64, PlannerError> {
    for p in [p_without, p_with] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(PlannerError::BadProbability(p));
        }
    }
    Ok((p_with / p_without).ln())
}

pub trait Planner: Send + Sync {
    fn name(&self) -> &str;

    fn plan(&self, query: &PlanQuery) -> Result<PlanDecision, PlannerError>;

    /// Raw request/response records accumulated since the last call.
    fn take_exchanges(&self) -> Vec<serde_json::Value> {
        Vec::new()
    }

    /// Likelihood the planner assigns to `action` under `query`. The default
    /// treats the choice as binary: `p` for the emitted action, `1 − p` for
    /// its complement, unknown otherwise.
    fn likelihood(&self, query: &PlanQuery, action: PlanAction) -> Result<Option<f64>, PlannerError> {
        let d = self.plan(query)?;
        Ok(d.probability.and_then(|p| {
            if d.action == action {
                Some(p)
            } else if d.action.complement() == action {
                Some(1.0 - p)
            } else {
                None
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPmiRecord {
    pub peer_id: VehicleId,
    /// Plan held fixed for both likelihoods (the with-peer plan).
    pub action: PlanAction,
    pub p_with: Option<f64>,
    pub p_without: Option<f64>,
    pub value: Option<f64>,
    /// The peer changed the planner's preferred action.
    pub plan_flip: bool,
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerFilterOutcome {
    pub base: PlanDecision,
    pub decision: PlanDecision,
    pub included: Vec<VehicleId>,
    pub records: Vec<PlanPmiRecord>,
    /// Likelihood of the final action without peer information.
    pub p_without_final: Option<f64>,
    /// `ln(p_final / p_without_final)`; zero when no peer is included.
    pub decision_pmi: Option<f64>,
    /// Joint query scored below the ego-only likelihood.
    pub joint_deviation: bool,
    /// A peer query failed and the ego-only decision was used.
    pub fallback: Option<String>,
}

/// Queries the planner without peers, then once per peer holding the plan
/// fixed to the with-peer answer. Peers with positive plan PMI are included
/// jointly in the final query. With no peer included the ego-only decision is
/// returned unchanged.
pub fn filter_peer_messages<F>(build: F, peers: &[VehicleId], planner: &dyn Planner) -> Result<PeerFilterOutcome, PlannerError>
where
    F: Fn(&[VehicleId]) -> PlanQuery,
{
    let base_query = build(&[]);
    let base = planner.plan(&base_query)?;
    let ego_only = |records: Vec<PlanPmiRecord>, fallback: Option<String>| PeerFilterOutcome {
        base: base.clone(),
        decision: base.clone(),
        included: Vec::new(),
        records,
        p_without_final: base.probability,
        decision_pmi: base.probability.map(|_| 0.0),
        joint_deviation: false,
        fallback,
    };
    let score_without = |action: PlanAction| -> Option<f64> {
        base.probability.and_then(|p| {
            if base.action == action {
                Some(p)
            } else if base.action.complement() == action {
                Some(1.0 - p)
            } else {
                None
            }
        })
    };

    let mut records = Vec::with_capacity(peers.len());
    for &peer in peers {
        let with = match planner.plan(&build(&[peer])) {
            Ok(d) => d,
            Err(e) => return Ok(ego_only(records, Some(e.to_string()))),
        };
        let p_without = score_without(with.action);
        let value = match (with.probability, p_without) {
            (Some(pw), Some(pwo)) if pwo > 0.0 => plan_pmi(pwo, pw).ok(),
            (Some(_), Some(_)) => Some(f64::INFINITY),
            _ => None,
        };
        records.push(PlanPmiRecord {
            peer_id: peer,
            action: with.action,
            p_with: with.probability,
            p_without,
            value,
            plan_flip: with.action != base.action,
            included: value.is_some_and(|v| v > 0.0),
        });
    }

    let included: Vec<VehicleId> = records.iter().filter(|r| r.included).map(|r| r.peer_id).collect();
    if included.is_empty() {
        return Ok(ego_only(records, None));
    }
    let decision = match planner.plan(&build(&included)) {
        Ok(d) => d,
        Err(e) => return Ok(ego_only(records, Some(e.to_string()))),
    };
    let p_without_final = score_without(decision.action);
    let decision_pmi = match (decision.probability, p_without_final) {
        (Some(pw), Some(pwo)) if pwo > 0.0 => plan_pmi(pwo, pw).ok(),
        (Some(_), Some(_)) => Some(f64::INFINITY),
        _ => None,
    };
    Ok(PeerFilterOutcome {
        joint_deviation: decision_pmi.is_some_and(|v| v < 0.0),
        base,
        decision,
        included,
        records,
        p_without_final,
        decision_pmi,
        fallback: None,
    })
}
