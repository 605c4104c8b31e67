//! Frames exchanged with the operator interface. Each frame is one JSON text
//! message tagged by `"type"`.
//!
//! Voxel sets travel as base64 (standard alphabet, padded) bitsets: bit `i`
//! is linear voxel `i = x + nx * (y + ny * z)`, least significant bit first
//! within each byte.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{Command, CommandResult, HumanActivity, ReceivedQuery, RobotPhase};
use crate::collaboration::{Envelope, ExperimentMode};
use crate::geometry::{Pose2, Vec3};
use crate::ids::{AgentId, ObjectId};
use crate::metrics::MetricsReport;
use crate::simloop::{LogRecord, RunOutcome, Simulation};
use crate::world::{Bin, ObjectCategory, ObjectState};

pub const WIRE_VERSION: u32 = 1;
/// Messages to the human kept in each snapshot.
pub const RECENT_MESSAGES: usize = 20;

pub fn encode_bits(ones: impl Iterator<Item = usize>, len: usize) -> String {
    let mut bits: BitVec<u8, Lsb0> = BitVec::repeat(false, len);
    for i in ones {
        bits.set(i, true);
    }
    STANDARD.encode(bits.into_vec())
}

/// Linear indices of the set bits, or `None` if the text is not a bitset of `len` bits.
pub fn decode_bits(text: &str, len: usize) -> Option<Vec<usize>> {
    let bytes = STANDARD.decode(text).ok()?;
    if bytes.len() != len.div_ceil(8) {
        return None;
    }
    let bits: BitVec<u8, Lsb0> = BitVec::from_vec(bytes);
    Some(bits.iter_ones().filter(|&i| i < len).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Start,
    Pause,
    Resume,
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientFrame {
    Command { client_seq: u64, command: Command },
    Control { action: ControlAction },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not a valid client frame; the connection is closed.
    Malformed,
    /// Another operator is connected.
    Busy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Hello { version: u32, scenario: String, mode: ExperimentMode, dt: f64 },
    Snapshot(Box<Snapshot>),
    Error { code: ErrorCode, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub origin: Vec3,
    pub resolution: f64,
    pub dims: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectView {
    pub id: ObjectId,
    pub category: ObjectCategory,
    pub state: ObjectState,
    pub position: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanView {
    pub chest: Vec3,
    pub heading: f64,
    pub hand: Vec3,
    pub held: Option<ObjectId>,
    pub intent: Option<ObjectId>,
    pub activity: HumanActivity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotView {
    pub pose: Pose2,
    pub phase: RobotPhase,
    pub held: Option<ObjectId>,
    /// The robot's intent as announced to the human; empty when not shared.
    pub intent: Option<ObjectId>,
    /// Remaining base waypoints, only when the mode shares robot plans.
    pub trajectory: Option<Vec<Pose2>>,
}

/// Full operator view of the simulation, limited to what the mode lets the
/// human know.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub tick: u64,
    pub time: f64,
    pub mode: ExperimentMode,
    pub running: bool,
    pub outcome: Option<RunOutcome>,
    pub grid: GridInfo,
    pub occupancy: String,
    pub a_h: String,
    /// Robot affordances as announced to the human.
    pub a_r: Option<String>,
    /// The shared detected-object map.
    pub objects: Vec<ObjectView>,
    pub bins: Vec<Bin>,
    pub human: HumanView,
    pub robot: RobotView,
    pub pending_queries: Vec<ReceivedQuery>,
    pub command_results: Vec<CommandResult>,
    pub recent_messages: Vec<Envelope>,
    pub metrics: MetricsReport,
}

impl Snapshot {
    pub fn capture(sim: &Simulation, running: bool) -> Self {
        let grid = &sim.world().grid;
        let len = grid.len();
        let mode = sim.config().mode;
        let human = sim.human();
        let robot = sim.robot();
        let shares_plans = mode != ExperimentMode::NonComm;
        let known_ar = human.known_robot_affordance();
        let trajectory = robot
            .state
            .trajectory
            .as_ref()
            .filter(|_| shares_plans)
            .map(|t| t.waypoints.iter().skip(robot.state.next_waypoint).copied().collect());
        let recent_messages: Vec<Envelope> = sim
            .log()
            .iter()
            .rev()
            .filter_map(|r| match r {
                LogRecord::Message { envelope, .. } if envelope.sender == AgentId::R => Some(envelope.clone()),
                _ => None,
            })
            .take(RECENT_MESSAGES)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        Self {
            version: WIRE_VERSION,
            tick: sim.tick(),
            time: sim.time(),
            mode,
            running,
            outcome: sim.outcome(),
            grid: GridInfo { origin: grid.origin(), resolution: grid.resolution(), dims: grid.dims() },
            occupancy: encode_bits(grid.occupied_linear(), len),
            a_h: encode_bits(sim.human_affordance().iter_linear(), len),
            a_r: (!known_ar.is_empty()).then(|| encode_bits(known_ar.iter().map(|&v| v as usize), len)),
            objects: sim
                .detected()
                .iter()
                .map(|f| ObjectView { id: f.id, category: f.category, state: f.state, position: f.position })
                .collect(),
            bins: sim.world().bins.clone(),
            human: HumanView {
                chest: human.state.chest,
                heading: human.state.heading,
                hand: human.state.hand,
                held: human.state.held,
                intent: human.intent(),
                activity: human.state.activity.clone(),
            },
            robot: RobotView {
                pose: robot.state.pose,
                phase: robot.state.phase,
                held: robot.state.held,
                intent: human.known_robot_intent(),
                trajectory,
            },
            pending_queries: human.inbox().to_vec(),
            command_results: sim.recent_command_results().cloned().collect(),
            recent_messages,
            metrics: sim.live_metrics(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_are_lsb_first() {
        let s = encode_bits([0usize, 9].into_iter(), 16);
        assert_eq!(STANDARD.decode(&s).unwrap(), vec![0b0000_0001, 0b0000_0010]);
        assert_eq!(decode_bits(&s, 16), Some(vec![0, 9]));
        assert_eq!(decode_bits(&s, 40), None);
        assert_eq!(decode_bits("!!", 16), None);
    }

    #[test]
    fn client_frames_parse() {
        let f: ClientFrame = serde_json::from_str(
            r#"{"type":"command","client_seq":3,"command":{"command":"pick","object":4}}"#,
        )
        .unwrap();
        assert_eq!(f, ClientFrame::Command { client_seq: 3, command: Command::Pick { object: ObjectId(4) } });
        let f: ClientFrame = serde_json::from_str(r#"{"type":"control","action":"start"}"#).unwrap();
        assert_eq!(f, ClientFrame::Control { action: ControlAction::Start });
        assert!(serde_json::from_str::<ClientFrame>(r#"{"type":"control","action":"fly"}"#).is_err());
        assert!(serde_json::from_str::<ClientFrame>(r#"{"type":"control","action":"start","x":1}"#).is_err());
    }
}
