//! Intents, the robot's decision procedure, and the assistance protocol
//! exchanged between the two agents.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affordance::{AffordanceMap, CapabilityMap};
use crate::geometry::Vec3;
use crate::ids::{AgentId, ObjectId};
use crate::perception::DetectedObjectSet;
use crate::planner::{replan_target, Trajectory};
use crate::world::{ObjectState, VoxelGrid, VoxelIndex};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_QUERY_TIMEOUT: f64 = 30.0;
pub const DEFAULT_ENGAGEMENT_RADIUS: f64 = 0.5;
pub const DROP_REGION_SIZE: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentMode {
    #[serde(rename = "noncomm")]
    NonComm,
    #[serde(rename = "r2h")]
    RobotToHuman,
    #[serde(rename = "shared")]
    Shared,
}

impl ExperimentMode {
    pub const ALL: [ExperimentMode; 3] = [ExperimentMode::NonComm, ExperimentMode::RobotToHuman, ExperimentMode::Shared];

    pub fn label(self) -> &'static str {
        match self {
            ExperimentMode::NonComm => "noncomm",
            ExperimentMode::RobotToHuman => "r2h",
            ExperimentMode::Shared => "shared",
        }
    }
}

impl fmt::Display for ExperimentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ExperimentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noncomm" => Ok(ExperimentMode::NonComm),
            "r2h" => Ok(ExperimentMode::RobotToHuman),
            "shared" => Ok(ExperimentMode::Shared),
            other => Err(format!("unknown mode {other:?} (expected noncomm, r2h or shared)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub agent: AgentId,
    pub object: ObjectId,
    /// Fused position of the object when the intent was set.
    pub position: Vec3,
    pub time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    MoveObjectIntoRobotArea,
    CheckReachable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    WillDo,
    Done,
    CannotReach,
    Decline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskEventKind {
    Picked,
    Placed,
    Binned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub agent: AgentId,
    pub object: ObjectId,
    pub event: TaskEventKind,
    pub position: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum CollabMessage {
    IntentUpdate(Intent),
    /// The sender no longer has an object of intent.
    IntentCleared { agent: AgentId },
    AffordanceUpdate { agent: AgentId, voxels: Vec<u32> },
    AssistQuery { query_id: u64, kind: QueryKind, object: ObjectId, drop_region: Vec<u32> },
    AssistResponse { query_ref: u64, outcome: Outcome },
    TaskEvent(TaskEvent),
}

impl CollabMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            CollabMessage::IntentUpdate(_) => "intent_update",
            CollabMessage::IntentCleared { .. } => "intent_cleared",
            CollabMessage::AffordanceUpdate { .. } => "affordance_update",
            CollabMessage::AssistQuery { .. } => "assist_query",
            CollabMessage::AssistResponse { .. } => "assist_response",
            CollabMessage::TaskEvent(_) => "task_event",
        }
    }
}

/// A message as it travels between agents and over the wire:
/// `{type, seq, sender, time, payload}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub sender: AgentId,
    pub time: f64,
    #[serde(flatten)]
    pub message: CollabMessage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    RobotToHuman,
    HumanToRobot,
}

impl Direction {
    pub fn from_sender(sender: AgentId) -> Self {
        match sender {
            AgentId::R => Direction::RobotToHuman,
            AgentId::H => Direction::HumanToRobot,
        }
    }
}

/// Whether the experiment mode lets a message from `sender` through.
pub fn mode_filter(mode: ExperimentMode, msg: &CollabMessage, sender: AgentId) -> bool {
    match mode {
        ExperimentMode::NonComm => false,
        ExperimentMode::RobotToHuman => {
            sender == AgentId::R
                && matches!(
                    msg,
                    CollabMessage::IntentUpdate(_)
                        | CollabMessage::IntentCleared { .. }
                        | CollabMessage::AffordanceUpdate { .. }
                )
        }
        ExperimentMode::Shared => true,
    }
}

/// Whether the robot may ask for help at all under `mode`.
pub fn queries_allowed(mode: ExperimentMode) -> bool {
    let probe = CollabMessage::AssistQuery {
        query_id: 0,
        kind: QueryKind::MoveObjectIntoRobotArea,
        object: ObjectId(0),
        drop_region: Vec::new(),
    };
    mode_filter(mode, &probe, AgentId::R)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum RobotDecision {
    Execute { trajectory: Trajectory },
    Replan { new_target: Option<ObjectId> },
    QueryMove { object: ObjectId },
    QueryReachable { object: ObjectId },
    Idle,
}

/// Inputs to one decision, named after the quantities they stand for.
pub struct DecisionInputs<'a, A: AffordanceMap> {
    pub tau: Option<Trajectory>,
    pub o_r: ObjectId,
    pub o_r_position: Vec3,
    pub o_h: Option<ObjectId>,
    pub a_h: &'a A,
    pub grid: &'a VoxelGrid,
    pub o: &'a DetectedObjectSet,
    /// Objects the robot will not select, in addition to o_R itself.
    pub exclude: &'a BTreeSet<ObjectId>,
    pub robot_position: Vec3,
}

/// The robot's decision procedure:
/// 1. trajectory found, target differs from the human's: execute it;
/// 2. trajectory found, same target as the human: re-plan to another object;
/// 3. no trajectory, target in the human's affordable area: ask the human to move it;
/// 4. no trajectory otherwise: ask the human whether they can reach it.
pub fn decide<A: AffordanceMap>(inputs: DecisionInputs<'_, A>) -> RobotDecision {
    match inputs.tau {
        Some(trajectory) => {
            if inputs.o_h == Some(inputs.o_r) {
                let mut exclude = inputs.exclude.clone();
                exclude.insert(inputs.o_r);
                RobotDecision::Replan { new_target: replan_target(inputs.o, &exclude, &inputs.robot_position) }
            } else {
                RobotDecision::Execute { trajectory }
            }
        }
        None => {
            let in_a_h = inputs.a_h.contains(inputs.grid, &inputs.o_r_position).unwrap_or(false);
            if in_a_h {
                RobotDecision::QueryMove { object: inputs.o_r }
            } else {
                RobotDecision::QueryReachable { object: inputs.o_r }
            }
        }
    }
}

/// Nearest object to the hand that is not binned or held by the robot,
/// within `radius`; ties go to the lower id.
pub fn estimate_human_intent(hand: &Vec3, o: &DetectedObjectSet, radius: f64, time: f64) -> Option<Intent> {
    o.iter()
        .filter(|f| matches!(f.state, ObjectState::Free | ObjectState::HeldBy(AgentId::H)))
        .map(|f| ((f.position - hand).norm(), f))
        .filter(|(d, _)| *d <= radius)
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)))
        .map(|(_, f)| Intent { agent: AgentId::H, object: f.id, position: f.position, time })
}

/// The `k` robot-reachable free voxels nearest to `p`, ties by lower index.
/// Only voxels an object can rest in count: the bottom layer, or directly
/// above an occupied voxel. Voxels known to be in `a_h` rank ahead of the
/// rest, so the human is asked to put the object somewhere it can reach.
pub fn drop_region<A: AffordanceMap>(grid: &VoxelGrid, cap: &CapabilityMap, a_h: &A, p: &Vec3, k: usize) -> Vec<u32> {
    let supported = |i: usize| {
        let idx = grid.index_of_linear(i);
        idx.z() == 0 || !grid.is_free(VoxelIndex::new(idx.x(), idx.y(), idx.z() - 1))
    };
    let mut cands: Vec<(bool, f64, usize)> = cap
        .reachable_linear()
        .filter(|&i| grid.is_free_linear(i) && supported(i))
        .map(|i| (!a_h.contains_linear(i), (grid.linear_center(i) - p).norm(), i))
        .collect();
    cands.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.into_iter().take(k).map(|(_, _, i)| i as u32).collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollabError {
    #[error("response references unknown query {0}")]
    UnknownQueryRef(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub query_id: u64,
    pub kind: QueryKind,
    pub object: ObjectId,
    pub sent_at: f64,
    /// Time after which the query counts as declined.
    pub deadline: f64,
    pub acknowledged: bool,
}

/// What the robot does after a response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FollowUp {
    /// The object was moved; plan toward its new position.
    ReplanToward(ObjectId),
    /// Keep waiting on the object.
    Wait(ObjectId),
    /// The human dealt with the object; stop considering it.
    HandedOver(ObjectId),
    /// Nobody can help; never select the object again this run.
    Block(ObjectId),
}

/// Robot-side bookkeeping of outstanding queries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssistTracker {
    next_id: u64,
    pending: BTreeMap<u64, PendingQuery>,
    timeout: f64,
}

impl AssistTracker {
    pub fn new(timeout: f64) -> Self {
        Self { next_id: 1, pending: BTreeMap::new(), timeout }
    }

    pub fn open(&mut self, kind: QueryKind, object: ObjectId, time: f64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.pending.insert(
            id,
            PendingQuery { query_id: id, kind, object, sent_at: time, deadline: time + self.timeout, acknowledged: false },
        );
        id
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingQuery> {
        self.pending.values()
    }

    pub fn is_pending(&self, id: u64) -> bool {
        self.pending.contains_key(&id)
    }

    pub fn handle_response(&mut self, query_ref: u64, outcome: Outcome, time: f64) -> Result<FollowUp, CollabError> {
        let q = self.pending.get_mut(&query_ref).ok_or(CollabError::UnknownQueryRef(query_ref))?;
        let object = q.object;
        let follow = match (q.kind, outcome) {
            (_, Outcome::WillDo) => {
                q.acknowledged = true;
                q.deadline = time + self.timeout;
                return Ok(FollowUp::Wait(object));
            }
            (QueryKind::MoveObjectIntoRobotArea, Outcome::Done) => FollowUp::ReplanToward(object),
            (QueryKind::CheckReachable, Outcome::Done) => FollowUp::HandedOver(object),
            (_, Outcome::CannotReach | Outcome::Decline) => FollowUp::Block(object),
        };
        self.pending.remove(&query_ref);
        Ok(follow)
    }

    /// Removes and returns queries whose deadline has passed.
    pub fn expire(&mut self, time: f64) -> Vec<PendingQuery> {
        let due: Vec<u64> = self.pending.values().filter(|q| time >= q.deadline).map(|q| q.query_id).collect();
        due.into_iter().filter_map(|id| self.pending.remove(&id)).collect()
    }

    /// Removes everything still open, e.g. when the run ends.
    pub fn drain(&mut self) -> Vec<PendingQuery> {
        std::mem::take(&mut self.pending).into_values().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affordance::HumanAffordanceGrid;
    use crate::geometry::Pose2;
    use crate::perception::FusedObject;
    use crate::world::{ObjectCategory, VoxelIndex};

    fn fused(id: u32, p: [f64; 3]) -> FusedObject {
        FusedObject {
            id: ObjectId(id),
            category: ObjectCategory::Food,
            state: ObjectState::Free,
            position: Vec3::from(p),
            last_seen: 0.0,
            sources: Vec::new(),
        }
    }

    fn tau() -> Trajectory {
        Trajectory {
            object: Some(ObjectId(3)),
            target: Vec3::zeros(),
            grasp_voxel: VoxelIndex::new(0, 0, 0),
            waypoints: Vec::new(),
            terminal: Pose2::new(0.0, 0.0, 0.0),
            cost: 0.0,
        }
    }

    #[test]
    fn mode_parse_round_trip() {
        for m in ExperimentMode::ALL {
            assert_eq!(m.label().parse::<ExperimentMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.label()));
        }
        assert!("both".parse::<ExperimentMode>().is_err());
    }

    #[test]
    fn branch_selection() {
        let grid = VoxelGrid::new(Vec3::zeros(), 0.1, [10, 10, 10]).unwrap();
        let mut a_h = HumanAffordanceGrid::new(&grid);
        let inside = Vec3::new(0.55, 0.55, 0.55);
        a_h.record_interaction(&inside, 0.0, &grid);
        let o = DetectedObjectSet::from_fused(vec![fused(3, [0.55, 0.55, 0.55]), fused(7, [0.2, 0.2, 0.2])]);
        let ex = BTreeSet::new();
        let run = |tau: Option<Trajectory>, o_h: Option<u32>, pos: Vec3| {
            decide(DecisionInputs {
                tau,
                o_r: ObjectId(3),
                o_r_position: pos,
                o_h: o_h.map(ObjectId),
                a_h: &a_h,
                grid: &grid,
                o: &o,
                exclude: &ex,
                robot_position: Vec3::zeros(),
            })
        };
        assert!(matches!(run(Some(tau()), Some(7), inside), RobotDecision::Execute { .. }));
        assert_eq!(run(Some(tau()), Some(3), inside), RobotDecision::Replan { new_target: Some(ObjectId(7)) });
        assert!(matches!(run(Some(tau()), None, inside), RobotDecision::Execute { .. }));
        assert_eq!(run(None, None, inside), RobotDecision::QueryMove { object: ObjectId(3) });
        assert_eq!(run(None, None, Vec3::new(0.85, 0.85, 0.85)), RobotDecision::QueryReachable { object: ObjectId(3) });
    }

    #[test]
    fn intent_estimation() {
        let o = DetectedObjectSet::from_fused(vec![fused(4, [1.2, 0.0, 0.0]), fused(2, [-1.0, 0.0, 0.0]), fused(6, [1.0, 1.0, 0.0])]);
        let hand = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(estimate_human_intent(&hand, &o, 0.5, 0.0).unwrap().object, ObjectId(4));
        assert!(estimate_human_intent(&Vec3::new(5.0, 5.0, 0.0), &o, 0.5, 0.0).is_none());
        let tie = DetectedObjectSet::from_fused(vec![fused(9, [0.1, 0.0, 0.0]), fused(5, [-0.1, 0.0, 0.0])]);
        assert_eq!(estimate_human_intent(&Vec3::zeros(), &tie, 0.5, 0.0).unwrap().object, ObjectId(5));
    }

    #[test]
    fn filter_table() {
        let intent = CollabMessage::IntentUpdate(Intent { agent: AgentId::R, object: ObjectId(1), position: Vec3::zeros(), time: 0.0 });
        let query = CollabMessage::AssistQuery { query_id: 1, kind: QueryKind::CheckReachable, object: ObjectId(1), drop_region: vec![] };
        let resp = CollabMessage::AssistResponse { query_ref: 1, outcome: Outcome::Done };
        for (m, s) in [(&intent, AgentId::R), (&query, AgentId::R), (&resp, AgentId::H), (&intent, AgentId::H)] {
            assert!(!mode_filter(ExperimentMode::NonComm, m, s));
            assert!(mode_filter(ExperimentMode::Shared, m, s));
        }
        assert!(mode_filter(ExperimentMode::RobotToHuman, &intent, AgentId::R));
        assert!(!mode_filter(ExperimentMode::RobotToHuman, &intent, AgentId::H));
        assert!(!mode_filter(ExperimentMode::RobotToHuman, &query, AgentId::R));
        assert!(!mode_filter(ExperimentMode::RobotToHuman, &resp, AgentId::H));
        assert!(queries_allowed(ExperimentMode::Shared));
        assert!(!queries_allowed(ExperimentMode::RobotToHuman));
    }

    #[test]
    fn tracker_follow_ups() {
        let mut t = AssistTracker::new(30.0);
        let a = t.open(QueryKind::MoveObjectIntoRobotArea, ObjectId(1), 0.0);
        let b = t.open(QueryKind::CheckReachable, ObjectId(2), 1.0);
        assert!(b > a);
        assert_eq!(t.handle_response(a, Outcome::WillDo, 2.0), Ok(FollowUp::Wait(ObjectId(1))));
        assert_eq!(t.handle_response(a, Outcome::Done, 3.0), Ok(FollowUp::ReplanToward(ObjectId(1))));
        assert_eq!(t.handle_response(a, Outcome::Done, 3.0), Err(CollabError::UnknownQueryRef(a)));
        assert_eq!(t.handle_response(b, Outcome::Decline, 3.0), Ok(FollowUp::Block(ObjectId(2))));
        let c = t.open(QueryKind::CheckReachable, ObjectId(5), 10.0);
        assert!(t.expire(39.9).is_empty());
        assert_eq!(t.expire(40.0)[0].query_id, c);
        assert_eq!(t.pending().count(), 0);
    }

    #[test]
    fn envelope_wire_shape() {
        let env = Envelope {
            seq: 4,
            sender: AgentId::H,
            time: 1.5,
            message: CollabMessage::AssistResponse { query_ref: 2, outcome: Outcome::WillDo },
        };
        let v: serde_json::Value = serde_json::to_value(&env).unwrap();
        assert_eq!(v["type"], "assist_response");
        assert_eq!(v["payload"]["outcome"], "will_do");
        assert_eq!(v["sender"], "H");
        let back: Envelope = serde_json::from_value(v).unwrap();
        assert_eq!(back, env);
        let bad = serde_json::json!({"type": "teleport", "seq": 1, "sender": "R", "time": 0.0, "payload": {}});
        assert!(serde_json::from_value::<Envelope>(bad).is_err());
    }
}
