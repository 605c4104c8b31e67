use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{intent_change, ticks_for, Outbox, TickContext};
use crate::affordance::HumanAffordanceGrid;
use crate::collaboration::{
    decide, drop_region, queries_allowed, AssistTracker, CollabMessage, DecisionInputs, Envelope, FollowUp,
    Intent, QueryKind, RobotDecision, TaskEvent, TaskEventKind, DEFAULT_QUERY_TIMEOUT, DROP_REGION_SIZE,
};
use crate::geometry::{wrap_angle, Pose2, Vec3};
use crate::ids::{AgentId, ObjectId};
use crate::planner::{plan, replan_target, Trajectory};
use crate::world::{ObjectState, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotPhase {
    Idle,
    Planning,
    Moving,
    Manipulating,
    WaitingOnHuman,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationKind {
    Pick,
    Place,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manipulation {
    pub kind: ManipulationKind,
    pub ticks_left: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub speed: f64,
    pub pick_duration: f64,
    pub place_duration: f64,
    /// Rotation rate while idle with nothing to do, rad/s.
    pub scan_rate: f64,
    /// Failed grasps on one object before it is blocked.
    pub max_retries: u32,
    pub query_timeout: f64,
    /// Height of a carried object above the floor.
    pub carry_height: f64,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            speed: 0.5,
            pick_duration: 1.5,
            place_duration: 1.5,
            scan_rate: 0.5,
            max_retries: 3,
            query_timeout: DEFAULT_QUERY_TIMEOUT,
            carry_height: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose2,
    pub arm: Vec<f64>,
    pub phase: RobotPhase,
    pub held: Option<ObjectId>,
    pub blocked: BTreeSet<ObjectId>,
    /// Objects the human took over after a reachability query.
    pub handed_over: BTreeSet<ObjectId>,
    pub target: Option<Intent>,
    pub trajectory: Option<Trajectory>,
    pub next_waypoint: usize,
    pub manipulation: Option<Manipulation>,
    pub waiting_on: Option<u64>,
    pub retries: BTreeMap<ObjectId, u32>,
}

/// The autonomous robot: executes the decision procedure and its outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Robot {
    pub state: RobotState,
    pub config: RobotConfig,
    tracker: AssistTracker,
    /// What the robot has been told about the human's affordances.
    a_h_view: HumanAffordanceGrid,
    human_intent: Option<ObjectId>,
}

impl Robot {
    pub fn new(pose: Pose2, dof: usize, a_h_view: HumanAffordanceGrid, config: RobotConfig) -> Self {
        Self {
            state: RobotState {
                pose,
                arm: vec![0.0; dof],
                phase: RobotPhase::Idle,
                held: None,
                blocked: BTreeSet::new(),
                handed_over: BTreeSet::new(),
                target: None,
                trajectory: None,
                next_waypoint: 0,
                manipulation: None,
                waiting_on: None,
                retries: BTreeMap::new(),
            },
            tracker: AssistTracker::new(config.query_timeout),
            a_h_view,
            human_intent: None,
            config,
        }
    }

    pub fn intent(&self) -> Option<ObjectId> {
        self.state.target.as_ref().map(|t| t.object)
    }

    pub fn known_human_intent(&self) -> Option<ObjectId> {
        self.human_intent
    }

    pub fn a_h_view(&self) -> &HumanAffordanceGrid {
        &self.a_h_view
    }

    pub fn tracker(&self) -> &AssistTracker {
        &self.tracker
    }

    /// Position used for nearest-object selection: base on the floor.
    fn position(&self, floor_z: f64) -> Vec3 {
        Vec3::new(self.state.pose.x, self.state.pose.y, floor_z)
    }

    /// Applies a message delivered from the human.
    pub fn receive(&mut self, env: &Envelope, out: &mut Outbox) {
        match &env.message {
            CollabMessage::IntentUpdate(i) if i.agent == AgentId::H => self.human_intent = Some(i.object),
            CollabMessage::IntentCleared { agent: AgentId::H } => self.human_intent = None,
            CollabMessage::AffordanceUpdate { agent: AgentId::H, voxels } => self.a_h_view.extend_linear(voxels),
            // a blocked object the human moved may be reachable now
            CollabMessage::TaskEvent(e) if e.agent == AgentId::H && e.event == TaskEventKind::Placed => {
                self.state.blocked.remove(&e.object);
                self.state.retries.remove(&e.object);
            }
            CollabMessage::AssistResponse { query_ref, outcome } => {
                match self.tracker.handle_response(*query_ref, *outcome, env.time) {
                    Ok(f) => self.follow_up(f),
                    Err(e) => out.protocol_errors.push(e.to_string()),
                }
            }
            _ => {}
        }
    }

    fn follow_up(&mut self, f: FollowUp) {
        match f {
            FollowUp::Wait(_) => {}
            FollowUp::ReplanToward(o) => {
                self.state.waiting_on = None;
                if self.intent() == Some(o) {
                    self.state.phase = RobotPhase::Planning;
                }
            }
            FollowUp::HandedOver(o) => {
                self.state.handed_over.insert(o);
                self.drop_target_if(o);
            }
            FollowUp::Block(o) => {
                self.state.blocked.insert(o);
                self.drop_target_if(o);
            }
        }
    }

    fn drop_target_if(&mut self, o: ObjectId) {
        if self.intent() == Some(o) {
            self.state.waiting_on = None;
            self.go_idle();
        }
    }

    fn go_idle(&mut self) {
        self.state.target = None;
        self.state.trajectory = None;
        self.state.manipulation = None;
        self.state.phase = RobotPhase::Idle;
    }

    fn set_target(&mut self, object: Option<ObjectId>, ctx: &TickContext<'_>) {
        self.state.target = object.and_then(|id| {
            ctx.o.get(id).map(|f| Intent { agent: AgentId::R, object: id, position: f.position, time: ctx.time })
        });
    }

    fn excluded(&self) -> BTreeSet<ObjectId> {
        self.state.blocked.union(&self.state.handed_over).copied().collect()
    }

    pub fn tick(&mut self, world: &mut World, ctx: &mut TickContext<'_>, out: &mut Outbox) {
        let before = self.intent();
        for q in self.tracker.expire(ctx.time) {
            out.timeouts.push(q.clone());
            self.follow_up(FollowUp::Block(q.object));
        }
        match self.state.phase {
            RobotPhase::Idle => self.tick_idle(world, ctx),
            RobotPhase::Planning => self.tick_planning(world, ctx, out),
            RobotPhase::Moving => self.tick_moving(ctx),
            RobotPhase::Manipulating => self.tick_manipulating(world, ctx, out),
            RobotPhase::WaitingOnHuman => {}
        }
        if let Some(h) = self.state.held {
            let p = Vec3::new(self.state.pose.x, self.state.pose.y, world.grid.origin().z + self.config.carry_height);
            // The robot only holds objects it picked, so carrying cannot fail.
            let _ = world.carry(h, AgentId::R, p);
        }
        if let Some(m) = intent_change(AgentId::R, before, self.state.target.as_ref()) {
            out.messages.push(m);
        }
    }

    fn tick_idle(&mut self, world: &World, ctx: &mut TickContext<'_>) {
        let mut exclude = self.excluded();
        if let Some(h) = self.human_intent {
            exclude.insert(h);
        }
        match replan_target(ctx.o, &exclude, &self.position(world.grid.origin().z)) {
            Some(id) => {
                self.set_target(Some(id), ctx);
                self.state.phase = RobotPhase::Planning;
            }
            None => {
                // Nothing known to clean: turn in place to look around.
                self.state.pose.theta = wrap_angle(self.state.pose.theta + self.config.scan_rate * ctx.dt);
            }
        }
    }

    fn tick_planning(&mut self, world: &World, ctx: &mut TickContext<'_>, out: &mut Outbox) {
        let bound = world.objects().len() + 1;
        for _ in 0..bound {
            let Some(target) = self.state.target.clone() else {
                self.go_idle();
                return;
            };
            let Some(fused) = ctx.o.get(target.object) else {
                self.go_idle();
                return;
            };
            if fused.state != ObjectState::Free {
                self.go_idle();
                return;
            }
            let position = fused.position;
            self.state.target.as_mut().expect("checked above").position = position;
            let tau = plan(&world.grid, ctx.nav, ctx.cap, self.state.pose, position, Some(target.object))
                .ok()
                .flatten();
            let exclude = self.excluded();
            let decision = decide(DecisionInputs {
                tau,
                o_r: target.object,
                o_r_position: position,
                o_h: self.human_intent,
                a_h: &self.a_h_view,
                grid: &world.grid,
                o: ctx.o,
                exclude: &exclude,
                robot_position: self.position(world.grid.origin().z),
            });
            match decision {
                RobotDecision::Execute { trajectory } => {
                    self.state.trajectory = Some(trajectory);
                    self.state.next_waypoint = 0;
                    self.state.phase = RobotPhase::Moving;
                    return;
                }
                RobotDecision::Replan { new_target } => {
                    self.set_target(new_target, ctx);
                }
                RobotDecision::QueryMove { object } => return self.ask(QueryKind::MoveObjectIntoRobotArea, object, world, ctx, out),
                RobotDecision::QueryReachable { object } => return self.ask(QueryKind::CheckReachable, object, world, ctx, out),
                RobotDecision::Idle => {
                    self.go_idle();
                    return;
                }
            }
        }
        self.go_idle();
    }

    fn ask(&mut self, kind: QueryKind, object: ObjectId, world: &World, ctx: &TickContext<'_>, out: &mut Outbox) {
        if !queries_allowed(ctx.mode) {
            // No channel to ask for help: give up on the object.
            self.state.blocked.insert(object);
            self.go_idle();
            return;
        }
        let drop = match kind {
            QueryKind::MoveObjectIntoRobotArea => {
                let p = ctx.o.get(object).map(|f| f.position).unwrap_or_default();
                drop_region(&world.grid, ctx.cap, &self.a_h_view, &p, DROP_REGION_SIZE)
            }
            QueryKind::CheckReachable => Vec::new(),
        };
        let id = self.tracker.open(kind, object, ctx.time);
        out.messages.push(CollabMessage::AssistQuery { query_id: id, kind, object, drop_region: drop });
        self.state.waiting_on = Some(id);
        self.state.phase = RobotPhase::WaitingOnHuman;
    }

    /// Advances along the trajectory; returns true on arrival at the terminal pose.
    fn advance(&mut self, dt: f64) -> bool {
        let Some(traj) = &self.state.trajectory else { return true };
        let mut budget = self.config.speed * dt;
        while self.state.next_waypoint < traj.waypoints.len() {
            let w = traj.waypoints[self.state.next_waypoint];
            let (dx, dy) = (w.x - self.state.pose.x, w.y - self.state.pose.y);
            let d = (dx * dx + dy * dy).sqrt();
            if d > 0.0 {
                self.state.pose.theta = dy.atan2(dx);
            }
            if d <= budget + 1e-12 {
                budget -= d;
                self.state.pose.x = w.x;
                self.state.pose.y = w.y;
                self.state.next_waypoint += 1;
            } else {
                self.state.pose.x += dx / d * budget;
                self.state.pose.y += dy / d * budget;
                return false;
            }
        }
        self.state.pose = traj.terminal;
        true
    }

    fn tick_moving(&mut self, ctx: &mut TickContext<'_>) {
        let carrying = self.state.held.is_some();
        if !carrying {
            let still_free = self
                .intent()
                .and_then(|id| ctx.o.get(id))
                .map(|f| f.state == ObjectState::Free)
                .unwrap_or(false);
            if !still_free {
                self.go_idle();
                return;
            }
        }
        if self.advance(ctx.dt) {
            let (kind, duration) = if carrying {
                (ManipulationKind::Place, self.config.place_duration)
            } else {
                (ManipulationKind::Pick, self.config.pick_duration)
            };
            self.state.manipulation = Some(Manipulation { kind, ticks_left: ticks_for(duration, ctx.dt) });
            self.state.phase = RobotPhase::Manipulating;
        }
    }

    fn tick_manipulating(&mut self, world: &mut World, ctx: &mut TickContext<'_>, out: &mut Outbox) {
        let Some(m) = self.state.manipulation.as_mut() else {
            self.go_idle();
            return;
        };
        if m.ticks_left > 1 {
            m.ticks_left -= 1;
            return;
        }
        match m.kind {
            ManipulationKind::Pick => self.finish_pick(world, ctx, out),
            ManipulationKind::Place => self.finish_place(world, ctx, out),
        }
    }

    fn finish_pick(&mut self, world: &mut World, ctx: &mut TickContext<'_>, out: &mut Outbox) {
        self.state.manipulation = None;
        let Some(id) = self.intent() else {
            self.go_idle();
            return;
        };
        let Some(obj) = world.object(id).cloned() else {
            self.go_idle();
            return;
        };
        if obj.state != ObjectState::Free {
            self.go_idle();
            return;
        }
        if !ctx.cap.reaches_from(&world.grid, &self.state.pose, &obj.position) {
            let n = self.state.retries.entry(id).or_insert(0);
            *n += 1;
            if *n >= self.config.max_retries {
                self.state.blocked.insert(id);
                self.go_idle();
            } else {
                self.state.trajectory = None;
                self.state.phase = RobotPhase::Planning;
            }
            return;
        }
        world.pick(id, AgentId::R).expect("object checked free");
        ctx.o.observe_contact(id, obj.category, ObjectState::HeldBy(AgentId::R), obj.position, ctx.time);
        self.state.held = Some(id);
        out.events.push(TaskEvent { agent: AgentId::R, object: id, event: TaskEventKind::Picked, position: obj.position });

        let bin = world.bin_for(obj.category).map(|b| b.position);
        let tau = bin.and_then(|b| plan(&world.grid, ctx.nav, ctx.cap, self.state.pose, b, None).ok().flatten());
        match tau {
            Some(t) => {
                self.state.trajectory = Some(t);
                self.state.next_waypoint = 0;
                self.state.phase = RobotPhase::Moving;
            }
            None => {
                // The bin is out of reach: put the object back and leave it.
                let p = obj.position;
                world.release(id, AgentId::R, p).expect("robot holds the object");
                ctx.o.observe_contact(id, obj.category, ObjectState::Free, p, ctx.time);
                out.events.push(TaskEvent { agent: AgentId::R, object: id, event: TaskEventKind::Placed, position: p });
                self.state.held = None;
                self.state.blocked.insert(id);
                self.go_idle();
            }
        }
    }

    fn finish_place(&mut self, world: &mut World, ctx: &mut TickContext<'_>, out: &mut Outbox) {
        self.state.manipulation = None;
        let Some(id) = self.state.held.take() else {
            self.go_idle();
            return;
        };
        let category = world.object(id).expect("held object exists").category;
        let at = world.bin_for(category).map(|b| b.position).expect("scenario has a bin per category");
        let state = world.release(id, AgentId::R, at).expect("robot holds the object");
        ctx.o.observe_contact(id, category, state, at, ctx.time);
        let event = if state == ObjectState::Binned { TaskEventKind::Binned } else { TaskEventKind::Placed };
        out.events.push(TaskEvent { agent: AgentId::R, object: id, event, position: at });
        self.go_idle();
    }

    /// Closes every open query, e.g. at the end of a run.
    pub fn drain_queries(&mut self) -> Vec<crate::collaboration::PendingQuery> {
        self.tracker.drain()
    }
}
