//! Fixed-timestep driver. One call to [`Simulation::step`] is one tick:
//! sense and fuse, grow A_H, deliver mode-filtered messages, robot tick,
//! human tick, metric samples, advance time.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::affordance::{CapabilityMap, HumanAffordanceGrid};
use crate::agents::{
    Command, CommandResult, Human, HumanConfig, HumanControl, HumanState, Outbox, Robot, RobotConfig, RobotPhase,
    RobotState, TickContext,
};
use crate::collaboration::{mode_filter, CollabMessage, Direction, Envelope, ExperimentMode, PendingQuery, TaskEvent};
use crate::ids::{AgentId, ObjectId};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::perception::{can_see, fuse, sense, DetectedObjectSet, SensorId, SensorPose};
use crate::planner::{NavGrid, DEFAULT_BAND_HEIGHT, DEFAULT_FOOTPRINT_RADIUS};
use crate::world::{SceneObject, Scenario};

pub const LOG_VERSION: u32 = 1;
pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_MAX_TIME: f64 = 600.0;
pub const DEFAULT_DEADLOCK_WINDOW: f64 = 60.0;

const HEADSET_STREAM: u64 = 1;
const ROBOT_CAMERA_STREAM: u64 = 2;
const RECENT_RESULTS: usize = 32;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("capability map does not match the scenario grid")]
    CapabilityMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub max_time: f64,
    pub seed: u64,
    pub mode: ExperimentMode,
    pub human: HumanControl,
    /// Seconds without any state change before a run counts as deadlocked.
    /// Not applied to a live human.
    pub deadlock_window: f64,
    pub query_timeout: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            max_time: DEFAULT_MAX_TIME,
            seed: 0,
            mode: ExperimentMode::Shared,
            human: HumanControl::Scripted(crate::agents::HumanPolicy::Diligent),
            deadlock_window: DEFAULT_DEADLOCK_WINDOW,
            query_timeout: crate::collaboration::DEFAULT_QUERY_TIMEOUT,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.dt) {
            return Err(SimError::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if !positive(self.max_time) {
            return Err(SimError::Config(format!("max time must be > 0, got {}", self.max_time)));
        }
        if !positive(self.deadlock_window) || !positive(self.query_timeout) {
            return Err(SimError::Config("deadlock window and query timeout must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    TimedOut,
    Deadlocked,
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        version: u32,
        scenario: String,
        scenario_digest: String,
        capability_digest: String,
        objects: usize,
        config: SimConfig,
    },
    /// A message that passed the mode filter.
    Message { tick: u64, direction: Direction, envelope: Envelope },
    Task { tick: u64, event: TaskEvent },
    Intent { tick: u64, agent: AgentId, target: Option<ObjectId> },
    RobotPhase { tick: u64, phase: RobotPhase },
    QueryTimeout { tick: u64, query: PendingQuery },
    Command { tick: u64, client_seq: u64, command: Command },
    CommandResult { tick: u64, result: CommandResult },
    ProtocolError { tick: u64, detail: String },
    End { tick: u64, time: f64, outcome: RunOutcome },
}

impl LogRecord {
    pub fn tick(&self) -> Option<u64> {
        match self {
            LogRecord::Header { .. } => None,
            LogRecord::Message { tick, .. }
            | LogRecord::Task { tick, .. }
            | LogRecord::Intent { tick, .. }
            | LogRecord::RobotPhase { tick, .. }
            | LogRecord::QueryTimeout { tick, .. }
            | LogRecord::Command { tick, .. }
            | LogRecord::CommandResult { tick, .. }
            | LogRecord::ProtocolError { tick, .. }
            | LogRecord::End { tick, .. } => Some(*tick),
        }
    }
}

/// Writes the log as line-delimited JSON.
pub fn write_log<W: Write>(log: &[LogRecord], mut w: W) -> std::io::Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads line-delimited JSON records. Blank lines are skipped.
pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}

pub fn log_digest(log: &[LogRecord]) -> String {
    let mut bytes = Vec::new();
    write_log(log, &mut bytes).expect("writing to memory");
    hex::encode(Sha256::digest(&bytes))
}

pub fn capability_digest(cap: &CapabilityMap) -> String {
    hex::encode(Sha256::digest(cap.to_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub scenario_digest: String,
    pub capability_digest: String,
    pub config: SimConfig,
    pub outcome: RunOutcome,
    pub ticks: u64,
    pub metrics: MetricsReport,
    pub log_digest: String,
    pub final_state_digest: String,
    #[serde(skip)]
    pub log: Vec<LogRecord>,
}

impl RunReport {
    /// Digest of the serialized report.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("report serializes")))
    }
}

#[derive(Serialize)]
struct FinalState<'a> {
    objects: &'a [SceneObject],
    robot: &'a RobotState,
    human: &'a HumanState,
    a_h: Vec<usize>,
}

/// Everything whose change counts as progress. Robot heading is left out so
/// a robot scanning in place does not look busy.
#[derive(Clone, Debug, PartialEq)]
struct ProgressKey {
    objects: Vec<SceneObject>,
    robot_xy: [f64; 2],
    robot_phase: RobotPhase,
    robot_target: Option<ObjectId>,
    robot_waiting: Option<u64>,
    robot_waypoint: usize,
    robot_manipulation: Option<u32>,
    robot_excluded: usize,
    human: HumanState,
    inbox: usize,
    pending: usize,
}

pub struct Simulation {
    config: SimConfig,
    scenario: Arc<Scenario>,
    cap: Arc<CapabilityMap>,
    cap_digest: String,
    nav: NavGrid,
    world: crate::world::World,
    robot: Robot,
    human: Human,
    a_h: HumanAffordanceGrid,
    o: DetectedObjectSet,
    rng_headset: ChaCha8Rng,
    rng_robot: ChaCha8Rng,
    queue: Vec<(AgentId, CollabMessage, f64)>,
    next_seq: u64,
    tick: u64,
    log: Vec<LogRecord>,
    metrics: MetricsAccumulator,
    last_intents: [Option<ObjectId>; 2],
    last_phase: Option<RobotPhase>,
    progress: Option<ProgressKey>,
    last_change_tick: u64,
    outcome: Option<RunOutcome>,
    recent_results: VecDeque<CommandResult>,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Simulation {
    pub fn new(scenario: Arc<Scenario>, cap: Arc<CapabilityMap>, config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let grid = &scenario.world.grid;
        if !cap.matches_grid(grid) {
            return Err(SimError::CapabilityMismatch);
        }
        let nav = NavGrid::from_grid(grid, DEFAULT_BAND_HEIGHT, DEFAULT_FOOTPRINT_RADIUS);
        let robot_config = RobotConfig { query_timeout: config.query_timeout, ..RobotConfig::default() };
        let robot = Robot::new(scenario.robot_pose, scenario.arm.dof(), HumanAffordanceGrid::new(grid), robot_config);
        let human = Human::new(scenario.human_chest, scenario.human_heading, config.human, HumanConfig::default());
        let cap_digest = capability_digest(&cap);
        let mut sim = Self {
            nav,
            world: scenario.world.clone(),
            robot,
            human,
            a_h: HumanAffordanceGrid::new(grid),
            o: DetectedObjectSet::new(),
            rng_headset: stream(config.seed, HEADSET_STREAM),
            rng_robot: stream(config.seed, ROBOT_CAMERA_STREAM),
            queue: Vec::new(),
            next_seq: 1,
            tick: 0,
            log: Vec::new(),
            metrics: MetricsAccumulator::new(),
            last_intents: [None, None],
            last_phase: None,
            progress: None,
            last_change_tick: 0,
            outcome: None,
            recent_results: VecDeque::new(),
            cap_digest,
            cap,
            config,
            scenario,
        };
        let header = LogRecord::Header {
            version: LOG_VERSION,
            scenario: sim.scenario.name.clone(),
            scenario_digest: sim.scenario.digest.clone(),
            capability_digest: sim.cap_digest.clone(),
            objects: sim.world.objects().len(),
            config: sim.config.clone(),
        };
        sim.record(header);
        Ok(sim)
    }

    /// A fresh simulation with the same inputs.
    pub fn reset(&self) -> Self {
        Self::new(self.scenario.clone(), self.cap.clone(), self.config.clone()).expect("inputs were valid")
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }
    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }
    pub fn capability(&self) -> &CapabilityMap {
        &self.cap
    }
    pub fn world(&self) -> &crate::world::World {
        &self.world
    }
    pub fn robot(&self) -> &Robot {
        &self.robot
    }
    pub fn human(&self) -> &Human {
        &self.human
    }
    pub fn human_affordance(&self) -> &HumanAffordanceGrid {
        &self.a_h
    }
    pub fn detected(&self) -> &DetectedObjectSet {
        &self.o
    }
    pub fn tick(&self) -> u64 {
        self.tick
    }
    pub fn time(&self) -> f64 {
        self.tick as f64 * self.config.dt
    }
    pub fn outcome(&self) -> Option<RunOutcome> {
        self.outcome
    }
    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }
    pub fn recent_command_results(&self) -> impl Iterator<Item = &CommandResult> {
        self.recent_results.iter()
    }

    /// Metrics so far; the outcome stays empty until the run has ended.
    pub fn live_metrics(&self) -> MetricsReport {
        self.metrics.snapshot(self.tick, self.config.dt)
    }

    fn record(&mut self, r: LogRecord) {
        self.metrics.observe(&r);
        self.log.push(r);
    }

    fn emit(&mut self, sender: AgentId, message: CollabMessage) {
        self.queue.push((sender, message, self.time()));
    }

    fn push_result(&mut self, result: CommandResult) {
        if self.recent_results.len() == RECENT_RESULTS {
            self.recent_results.pop_front();
        }
        self.recent_results.push_back(result.clone());
        self.record(LogRecord::CommandResult { tick: self.tick, result });
    }

    /// Hands an operator command to the human. Rejected outright unless the
    /// human is live.
    pub fn submit_command(&mut self, client_seq: u64, command: Command) {
        if self.outcome.is_some() {
            // the log is closed; the operator still gets an answer
            self.recent_results.push_back(CommandResult {
                client_seq,
                accepted: false,
                reason: Some("run has ended".into()),
            });
            if self.recent_results.len() > RECENT_RESULTS {
                self.recent_results.pop_front();
            }
            return;
        }
        self.record(LogRecord::Command { tick: self.tick, client_seq, command: command.clone() });
        if self.config.human != HumanControl::Live {
            self.push_result(CommandResult { client_seq, accepted: false, reason: Some("human is scripted".into()) });
        } else {
            self.human.enqueue(client_seq, command);
        }
    }

    /// Outcome if the run should stop before the next tick.
    fn termination(&self) -> Option<RunOutcome> {
        if self.world.all_binned() {
            return Some(RunOutcome::Completed);
        }
        if self.time() >= self.config.max_time - 1e-9 {
            return Some(RunOutcome::TimedOut);
        }
        let stalled = (self.tick - self.last_change_tick) as f64 * self.config.dt;
        if self.config.human != HumanControl::Live && stalled >= self.config.deadlock_window - 1e-9 {
            return Some(RunOutcome::Deadlocked);
        }
        None
    }

    /// Runs one tick, or ends the run. Returns false once the run has ended.
    pub fn step(&mut self) -> bool {
        if self.outcome.is_some() {
            return false;
        }
        if let Some(outcome) = self.termination() {
            self.finish(outcome);
            return false;
        }
        let time = self.time();
        let dt = self.config.dt;
        let tick = self.tick;

        // 1: sense and fuse
        let sensors = &self.scenario.sensors;
        let floor_z = self.world.grid.origin().z;
        let hs_model = sensors.model(SensorId::Headset);
        let rc_model = sensors.model(SensorId::RobotCamera);
        let hs_pose = SensorPose::on_human(hs_model, &self.human.state.chest, self.human.state.heading);
        let rc_pose = SensorPose::on_robot(rc_model, &self.robot.state.pose, floor_z);
        let mut detections = sense(
            SensorId::Headset,
            hs_model,
            &hs_pose,
            &self.world,
            &sensors.calibration,
            &mut self.rng_headset,
            time,
        );
        detections.extend(sense(
            SensorId::RobotCamera,
            rc_model,
            &rc_pose,
            &self.world,
            &sensors.calibration,
            &mut self.rng_robot,
            time,
        ));
        self.o.merge(fuse(detections, sensors.association_radius));

        // 2: grow A_H from the observed human pose
        let observed = can_see(rc_model, &rc_pose, &self.world, &self.human.state.chest)
            || can_see(hs_model, &hs_pose, &self.world, &self.human.state.hand);
        if observed {
            let added = self.a_h.update(&self.human.reach(), &self.world.grid, time);
            if !added.is_empty() {
                self.emit(AgentId::H, CollabMessage::AffordanceUpdate { agent: AgentId::H, voxels: added });
            }
        }
        if tick == 0 {
            let voxels: Vec<u32> = self.cap.reachable_linear().map(|v| v as u32).collect();
            self.emit(AgentId::R, CollabMessage::AffordanceUpdate { agent: AgentId::R, voxels });
        }

        // 3: deliver
        let mut robot_out = Outbox::default();
        for env in self.drain_queue() {
            match env.sender {
                AgentId::H => self.robot.receive(&env, &mut robot_out),
                AgentId::R => self.human.receive(&env),
            }
            self.record(LogRecord::Message { tick, direction: Direction::from_sender(env.sender), envelope: env });
        }

        // 4, 5: agents
        let mut human_out = Outbox::default();
        {
            let mut ctx = TickContext {
                time,
                dt,
                mode: self.config.mode,
                nav: &self.nav,
                cap: &self.cap,
                o: &mut self.o,
                a_h: &mut self.a_h,
            };
            self.robot.tick(&mut self.world, &mut ctx, &mut robot_out);
            self.human.tick(&mut self.world, &mut ctx, &mut human_out);
        }
        self.absorb(AgentId::R, robot_out);
        self.absorb(AgentId::H, human_out);

        // 6: samples
        for (slot, agent, now) in [(0, AgentId::H, self.human.intent()), (1, AgentId::R, self.robot.intent())] {
            if self.last_intents[slot] != now || tick == 0 {
                self.last_intents[slot] = now;
                self.record(LogRecord::Intent { tick, agent, target: now });
            }
        }
        let phase = self.robot.state.phase;
        if self.last_phase != Some(phase) {
            self.last_phase = Some(phase);
            self.record(LogRecord::RobotPhase { tick, phase });
        }
        let key = self.progress_key();
        if self.progress.as_ref() != Some(&key) {
            self.progress = Some(key);
            self.last_change_tick = tick + 1;
        }

        // 7
        self.tick += 1;
        true
    }

    fn progress_key(&self) -> ProgressKey {
        let r = &self.robot.state;
        ProgressKey {
            objects: self.world.objects().to_vec(),
            robot_xy: [r.pose.x, r.pose.y],
            robot_phase: r.phase,
            robot_target: self.robot.intent(),
            robot_waiting: r.waiting_on,
            robot_waypoint: r.next_waypoint,
            robot_manipulation: r.manipulation.as_ref().map(|m| m.ticks_left),
            robot_excluded: r.blocked.len() + r.handed_over.len(),
            human: self.human.state.clone(),
            inbox: self.human.inbox().len(),
            pending: self.robot.tracker().pending().count(),
        }
    }

    fn drain_queue(&mut self) -> Vec<Envelope> {
        let mode = self.config.mode;
        let mut delivered = Vec::new();
        for (sender, message, time) in std::mem::take(&mut self.queue) {
            let seq = self.next_seq;
            self.next_seq += 1;
            if mode_filter(mode, &message, sender) {
                delivered.push(Envelope { seq, sender, time, message });
            }
        }
        delivered
    }

    fn absorb(&mut self, agent: AgentId, out: Outbox) {
        let tick = self.tick;
        for m in out.messages {
            self.emit(agent, m);
        }
        for event in out.events {
            self.emit(agent, CollabMessage::TaskEvent(event.clone()));
            self.record(LogRecord::Task { tick, event });
        }
        for query in out.timeouts {
            self.human.forget_query(query.query_id);
            self.record(LogRecord::QueryTimeout { tick, query });
        }
        for result in out.command_results {
            self.push_result(result);
        }
        for detail in out.protocol_errors {
            self.record(LogRecord::ProtocolError { tick, detail });
        }
    }

    fn finish(&mut self, outcome: RunOutcome) {
        let tick = self.tick;
        for env in self.drain_queue() {
            self.record(LogRecord::Message { tick, direction: Direction::from_sender(env.sender), envelope: env });
        }
        for query in self.robot.drain_queries() {
            self.human.forget_query(query.query_id);
            self.record(LogRecord::QueryTimeout { tick, query });
        }
        self.outcome = Some(outcome);
        self.record(LogRecord::End { tick, time: self.time(), outcome });
    }

    pub fn final_state_digest(&self) -> String {
        let state = FinalState {
            objects: self.world.objects(),
            robot: &self.robot.state,
            human: &self.human.state,
            a_h: self.a_h.iter_linear().collect(),
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&state).expect("state serializes")))
    }

    /// Steps until the run ends.
    pub fn run_to_end(&mut self) -> RunOutcome {
        while self.step() {}
        self.outcome.expect("run ended")
    }

    /// Report of a finished run.
    pub fn report(&self) -> Option<RunReport> {
        let outcome = self.outcome?;
        let metrics = self.metrics.clone().finish().expect("live log is well formed");
        Some(RunReport {
            scenario: self.scenario.name.clone(),
            scenario_digest: self.scenario.digest.clone(),
            capability_digest: self.cap_digest.clone(),
            config: self.config.clone(),
            outcome,
            ticks: self.tick,
            metrics,
            log_digest: log_digest(&self.log),
            final_state_digest: self.final_state_digest(),
            log: self.log.clone(),
        })
    }
}

/// Runs a scenario to completion with a scripted human.
pub fn run(scenario: Arc<Scenario>, cap: Arc<CapabilityMap>, config: SimConfig) -> Result<RunReport, SimError> {
    let mut sim = Simulation::new(scenario, cap, config)?;
    sim.run_to_end();
    Ok(sim.report().expect("run ended"))
}
