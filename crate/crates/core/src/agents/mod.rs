//! The two agents: an autonomous mobile manipulator and a human driven
//! either by a scripted policy or by live operator commands.

mod human;
mod robot;

use serde::{Deserialize, Serialize};

pub use human::{Human, HumanActivity, HumanConfig, HumanState, ReceivedQuery};
pub use robot::{Manipulation, ManipulationKind, Robot, RobotConfig, RobotPhase, RobotState};

use crate::affordance::{CapabilityMap, HumanAffordanceGrid};
use crate::collaboration::{CollabMessage, ExperimentMode, Intent, Outcome, PendingQuery, TaskEvent};
use crate::ids::{AgentId, ObjectId};
use crate::perception::DetectedObjectSet;
use crate::planner::NavGrid;

/// Stand-in behaviors for study participants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanPolicy {
    /// Passive, but complies with every assistance query it can.
    Diligent,
    /// Declines every query.
    Declining,
    /// Ignores the robot and cleans the nearest objects it can reach.
    Independent,
}

impl std::str::FromStr for HumanPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diligent" => Ok(HumanPolicy::Diligent),
            "declining" => Ok(HumanPolicy::Declining),
            "independent" => Ok(HumanPolicy::Independent),
            other => Err(format!("unknown policy {other:?} (expected diligent, declining or independent)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "policy", rename_all = "snake_case")]
pub enum HumanControl {
    Scripted(HumanPolicy),
    Live,
}

/// Operator commands for a live human.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    SetIntent { object: Option<ObjectId> },
    MoveTo { position: [f64; 2] },
    Pick { object: ObjectId },
    Place { position: [f64; 3] },
    RespondToQuery { query_ref: u64, outcome: Outcome },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandResult {
    pub client_seq: u64,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
}

/// Everything the agents may read or update during a tick besides the world.
pub struct TickContext<'a> {
    pub time: f64,
    pub dt: f64,
    pub mode: ExperimentMode,
    pub nav: &'a NavGrid,
    pub cap: &'a CapabilityMap,
    pub o: &'a mut DetectedObjectSet,
    pub a_h: &'a mut HumanAffordanceGrid,
}

/// Side effects of a tick, collected by the simulation loop.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outbox {
    pub messages: Vec<CollabMessage>,
    pub events: Vec<TaskEvent>,
    pub timeouts: Vec<PendingQuery>,
    pub command_results: Vec<CommandResult>,
    pub protocol_errors: Vec<String>,
}

/// Ticks needed to cover `duration`.
pub(crate) fn ticks_for(duration: f64, dt: f64) -> u32 {
    ((duration / dt) - 1e-9).ceil().max(0.0) as u32
}

/// Message announcing a change of intent, if any.
pub(crate) fn intent_change(agent: AgentId, before: Option<ObjectId>, after: Option<&Intent>) -> Option<CollabMessage> {
    match (before, after) {
        (b, Some(i)) if b != Some(i.object) => Some(CollabMessage::IntentUpdate(i.clone())),
        (Some(_), None) => Some(CollabMessage::IntentCleared { agent }),
        _ => None,
    }
}
