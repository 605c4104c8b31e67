use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{intent_change, ticks_for, Command, CommandResult, HumanControl, HumanPolicy, Outbox, TickContext};
use crate::affordance::ReachEllipsoid;
use crate::collaboration::{
    estimate_human_intent, CollabMessage, Envelope, Intent, Outcome, QueryKind, TaskEvent, TaskEventKind,
    DEFAULT_ENGAGEMENT_RADIUS,
};
use crate::geometry::Vec3;
use crate::ids::{AgentId, ObjectId};
use crate::world::{ObjectState, World};

/// How close to an approach point counts as standing on it, meters.
const ARRIVAL_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanConfig {
    pub walk_speed: f64,
    pub pick_duration: f64,
    pub place_duration: f64,
    /// Reach ellipsoid semi-axes (forward, lateral, vertical), meters.
    pub reach_semi_axes: [f64; 3],
    /// Horizontal distance kept to an object when stepping up to it.
    pub standoff: f64,
    /// Radius of the region added to A_H around each pick and place.
    pub interaction_radius: f64,
    pub engagement_radius: f64,
}

impl Default for HumanConfig {
    fn default() -> Self {
        Self {
            walk_speed: 1.0,
            pick_duration: 1.5,
            place_duration: 1.5,
            reach_semi_axes: [0.8, 0.8, 0.6],
            standoff: 0.3,
            interaction_radius: 0.2,
            engagement_radius: DEFAULT_ENGAGEMENT_RADIUS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "activity", rename_all = "snake_case")]
pub enum HumanActivity {
    Idle,
    Walking { goal: [f64; 2] },
    Picking { object: ObjectId, ticks_left: u32 },
    Placing { object: ObjectId, at: Vec3, ticks_left: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanState {
    pub chest: Vec3,
    pub heading: f64,
    pub hand: Vec3,
    pub speed: f64,
    pub held: Option<ObjectId>,
    pub control: HumanControl,
    pub intent: Option<Intent>,
    pub activity: HumanActivity,
}

/// An assistance query the human has received and not yet settled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceivedQuery {
    pub query_id: u64,
    pub kind: QueryKind,
    pub object: ObjectId,
    pub drop_region: Vec<u32>,
    pub received_at: f64,
}

#[derive(Clone, Debug, PartialEq)]
enum Goal {
    Drop(Vec3),
    Bin,
}

#[derive(Clone, Debug, PartialEq)]
struct Job {
    query: Option<u64>,
    object: ObjectId,
    goal: Goal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Human {
    pub state: HumanState,
    pub config: HumanConfig,
    inbox: Vec<ReceivedQuery>,
    job: Option<Job>,
    commands: VecDeque<(u64, Command)>,
    robot_intent: Option<ObjectId>,
    robot_affordance: Vec<u32>,
}

impl Human {
    pub fn new(chest: Vec3, heading: f64, control: HumanControl, config: HumanConfig) -> Self {
        let mut h = Self {
            state: HumanState {
                chest,
                heading,
                hand: chest,
                speed: 0.0,
                held: None,
                control,
                intent: None,
                activity: HumanActivity::Idle,
            },
            config,
            inbox: Vec::new(),
            job: None,
            commands: VecDeque::new(),
            robot_intent: None,
            robot_affordance: Vec::new(),
        };
        h.state.hand = h.rest_hand();
        h
    }

    pub fn intent(&self) -> Option<ObjectId> {
        self.state.intent.as_ref().map(|i| i.object)
    }

    pub fn inbox(&self) -> &[ReceivedQuery] {
        &self.inbox
    }

    /// The robot's intent as far as the human has been told.
    pub fn known_robot_intent(&self) -> Option<ObjectId> {
        self.robot_intent
    }

    /// Robot-affordable voxels the human has been shown.
    pub fn known_robot_affordance(&self) -> &[u32] {
        &self.robot_affordance
    }

    pub fn is_busy(&self) -> bool {
        matches!(self.state.activity, HumanActivity::Picking { .. } | HumanActivity::Placing { .. })
    }

    pub fn reach(&self) -> ReachEllipsoid {
        ReachEllipsoid::for_torso(self.state.chest, self.state.heading, Vec3::from(self.config.reach_semi_axes))
    }

    fn rest_hand(&self) -> Vec3 {
        let (s, c) = self.state.heading.sin_cos();
        self.state.chest + Vec3::new(0.35 * c, 0.35 * s, -0.2)
    }

    /// Whether a point at height `z` can be reached when standing at the standoff distance.
    pub fn can_reach_height(&self, z: f64) -> bool {
        let [a, _, c] = self.config.reach_semi_axes;
        (self.config.standoff / a).powi(2) + ((z - self.state.chest.z) / c).powi(2) <= 1.0
    }

    pub fn enqueue(&mut self, client_seq: u64, command: Command) {
        self.commands.push_back((client_seq, command));
    }

    pub fn pending_commands(&self) -> usize {
        self.commands.len()
    }

    /// Applies a message delivered from the robot.
    pub fn receive(&mut self, env: &Envelope) {
        match &env.message {
            CollabMessage::AssistQuery { query_id, kind, object, drop_region } => self.inbox.push(ReceivedQuery {
                query_id: *query_id,
                kind: *kind,
                object: *object,
                drop_region: drop_region.clone(),
                received_at: env.time,
            }),
            CollabMessage::IntentUpdate(i) if i.agent == AgentId::R => self.robot_intent = Some(i.object),
            CollabMessage::IntentCleared { agent: AgentId::R } => self.robot_intent = None,
            CollabMessage::AffordanceUpdate { agent: AgentId::R, voxels } => {
                self.robot_affordance.extend_from_slice(voxels);
                self.robot_affordance.sort_unstable();
                self.robot_affordance.dedup();
            }
            _ => {}
        }
    }

    /// Forgets a query the robot has stopped waiting for.
    pub fn forget_query(&mut self, query_id: u64) {
        self.inbox.retain(|q| q.query_id != query_id);
    }

    fn set_intent(&mut self, object: Option<ObjectId>, ctx: &TickContext<'_>, world: &World) {
        self.state.intent = object.and_then(|id| {
            let position = ctx.o.get(id).map(|f| f.position).or_else(|| world.object(id).map(|o| o.position))?;
            Some(Intent { agent: AgentId::H, object: id, position, time: ctx.time })
        });
    }

    pub fn tick(&mut self, world: &mut World, ctx: &mut TickContext<'_>, out: &mut Outbox) {
        let before = self.intent();
        self.tick_manipulation(world, ctx, out);
        if !self.is_busy() {
            match self.state.control {
                HumanControl::Scripted(policy) => self.tick_policy(policy, world, ctx, out),
                HumanControl::Live => self.tick_commands(world, ctx, out),
            }
        }
        self.tick_walk(ctx.dt);
        if !self.is_busy() {
            self.state.hand = self.rest_hand();
        }
        if let Some(h) = self.state.held {
            let _ = world.carry(h, AgentId::H, self.state.hand);
        }
        if self.state.control == HumanControl::Live
            && self.state.intent.is_none()
            && matches!(self.state.activity, HumanActivity::Walking { .. })
        {
            self.state.intent = estimate_human_intent(&self.state.hand, ctx.o, self.config.engagement_radius, ctx.time);
        }
        if let Some(m) = intent_change(AgentId::H, before, self.state.intent.as_ref()) {
            out.messages.push(m);
        }
    }

    fn record_interaction(&self, p: &Vec3, world: &World, ctx: &mut TickContext<'_>, out: &mut Outbox) {
        let added = ctx.a_h.record_interaction(p, self.config.interaction_radius, &world.grid);
        if !added.is_empty() {
            out.messages.push(CollabMessage::AffordanceUpdate { agent: AgentId::H, voxels: added });
        }
    }

    fn tick_manipulation(&mut self, world: &mut World, ctx: &mut TickContext<'_>, out: &mut Outbox) {
        match &mut self.state.activity {
            HumanActivity::Picking { ticks_left, .. } | HumanActivity::Placing { ticks_left, .. } if *ticks_left > 1 => {
                *ticks_left -= 1;
            }
            HumanActivity::Picking { object, .. } => {
                let id = *object;
                self.state.activity = HumanActivity::Idle;
                let ok = world
                    .object(id)
                    .map(|o| o.state == ObjectState::Free && self.reach().contains_point(&o.position))
                    .unwrap_or(false);
                if !ok || self.state.held.is_some() {
                    self.fail_job(out);
                    return;
                }
                let obj = world.object(id).cloned().expect("checked above");
                world.pick(id, AgentId::H).expect("object checked free");
                self.state.held = Some(id);
                ctx.o.observe_contact(id, obj.category, ObjectState::HeldBy(AgentId::H), obj.position, ctx.time);
                out.events.push(TaskEvent { agent: AgentId::H, object: id, event: TaskEventKind::Picked, position: obj.position });
                self.record_interaction(&obj.position, world, ctx, out);
            }
            HumanActivity::Placing { object, at, .. } => {
                let (id, at) = (*object, *at);
                self.state.activity = HumanActivity::Idle;
                let state = world.release(id, AgentId::H, at).expect("human holds the object");
                self.state.held = None;
                let category = world.object(id).expect("object exists").category;
                ctx.o.observe_contact(id, category, state, at, ctx.time);
                let event = if state == ObjectState::Binned { TaskEventKind::Binned } else { TaskEventKind::Placed };
                out.events.push(TaskEvent { agent: AgentId::H, object: id, event, position: at });
                self.record_interaction(&at, world, ctx, out);
                if let Some(job) = self.job.take() {
                    if let Some(q) = job.query {
                        self.respond(q, Outcome::Done, out);
                    }
                }
                self.state.intent = None;
            }
            _ => {}
        }
    }

    fn fail_job(&mut self, out: &mut Outbox) {
        if let Some(job) = self.job.take() {
            if let Some(q) = job.query {
                self.respond(q, Outcome::CannotReach, out);
            }
            self.state.intent = None;
        }
    }

    fn respond(&mut self, query_ref: u64, outcome: Outcome, out: &mut Outbox) {
        out.messages.push(CollabMessage::AssistResponse { query_ref, outcome });
        if outcome != Outcome::WillDo {
            self.forget_query(query_ref);
        }
    }

    /// Point from which `target` is `standoff` meters ahead, horizontally.
    fn approach_point(&self, target: &Vec3, world: &World) -> [f64; 2] {
        let dx = self.state.chest.x - target.x;
        let dy = self.state.chest.y - target.y;
        let d = (dx * dx + dy * dy).sqrt();
        let (ux, uy) = if d > 1e-9 { (dx / d, dy / d) } else { (-self.state.heading.cos(), -self.state.heading.sin()) };
        let lo = world.grid.origin();
        let hi = world.grid.extent_max();
        [
            (target.x + ux * self.config.standoff).clamp(lo.x + 1e-6, hi.x - 1e-6),
            (target.y + uy * self.config.standoff).clamp(lo.y + 1e-6, hi.y - 1e-6),
        ]
    }

    fn face(&mut self, target: &Vec3) {
        let dx = target.x - self.state.chest.x;
        let dy = target.y - self.state.chest.y;
        if dx * dx + dy * dy > 1e-18 {
            self.state.heading = dy.atan2(dx);
        }
    }

    /// Steps toward `target`. Returns `Some(true)` once it is within reach
    /// and the manipulation can start, `Some(false)` while walking, and
    /// `None` when standing at the approach point does not bring it in reach.
    fn approach(&mut self, target: &Vec3, world: &World) -> Option<bool> {
        let goal = self.approach_point(target, world);
        let heading = self.state.heading;
        self.face(target);
        if self.reach().contains_point(target) {
            self.state.activity = HumanActivity::Idle;
            return Some(true);
        }
        self.state.heading = heading;
        let dx = self.state.chest.x - goal[0];
        let dy = self.state.chest.y - goal[1];
        if (dx * dx + dy * dy).sqrt() < ARRIVAL_TOLERANCE {
            // close enough to step onto it this tick
            self.state.chest.x = goal[0];
            self.state.chest.y = goal[1];
            self.face(target);
            self.state.activity = HumanActivity::Idle;
            return self.reach().contains_point(target).then_some(true);
        }
        self.state.activity = HumanActivity::Walking { goal };
        Some(false)
    }

    fn tick_walk(&mut self, dt: f64) {
        let HumanActivity::Walking { goal } = self.state.activity else {
            self.state.speed = 0.0;
            return;
        };
        let dx = goal[0] - self.state.chest.x;
        let dy = goal[1] - self.state.chest.y;
        let d = (dx * dx + dy * dy).sqrt();
        let step = self.config.walk_speed * dt;
        if d > 0.0 {
            self.state.heading = dy.atan2(dx);
        }
        if d <= step + 1e-12 {
            self.state.chest.x = goal[0];
            self.state.chest.y = goal[1];
            self.state.activity = HumanActivity::Idle;
        } else {
            self.state.chest.x += dx / d * step;
            self.state.chest.y += dy / d * step;
        }
        self.state.speed = self.config.walk_speed;
    }

    fn start_pick(&mut self, object: ObjectId, at: Vec3, dt: f64) {
        self.state.hand = at;
        self.state.activity = HumanActivity::Picking { object, ticks_left: ticks_for(self.config.pick_duration, dt) };
    }

    fn start_place(&mut self, object: ObjectId, at: Vec3, dt: f64) {
        self.state.hand = at;
        self.state.activity = HumanActivity::Placing { object, at, ticks_left: ticks_for(self.config.place_duration, dt) };
    }

    fn tick_policy(&mut self, policy: HumanPolicy, world: &mut World, ctx: &mut TickContext<'_>, out: &mut Outbox) {
        match policy {
            HumanPolicy::Declining => {
                for q in std::mem::take(&mut self.inbox) {
                    out.messages.push(CollabMessage::AssistResponse { query_ref: q.query_id, outcome: Outcome::Decline });
                }
            }
            HumanPolicy::Diligent => {
                if self.job.is_none() && !self.inbox.is_empty() {
                    let q = self.inbox[0].clone();
                    match self.plan_job(&q, world, ctx) {
                        Some(job) => {
                            self.respond(q.query_id, Outcome::WillDo, out);
                            self.set_intent(Some(job.object), ctx, world);
                            self.job = Some(job);
                        }
                        None => self.respond(q.query_id, Outcome::CannotReach, out),
                    }
                }
            }
            HumanPolicy::Independent => {
                if self.job.is_none() {
                    if let Some(id) = self.nearest_cleanable(ctx) {
                        self.job = Some(Job { query: None, object: id, goal: Goal::Bin });
                        self.set_intent(Some(id), ctx, world);
                    }
                }
            }
        }
        self.progress_job(world, ctx, out);
    }

    fn plan_job(&self, q: &ReceivedQuery, world: &World, ctx: &TickContext<'_>) -> Option<Job> {
        let f = ctx.o.get(q.object)?;
        if f.state != ObjectState::Free || !self.can_reach_height(f.position.z) {
            return None;
        }
        let goal = match q.kind {
            QueryKind::MoveObjectIntoRobotArea => {
                let drop = q
                    .drop_region
                    .iter()
                    .map(|&v| world.grid.linear_center(v as usize))
                    .find(|c| self.can_reach_height(c.z))?;
                Goal::Drop(drop)
            }
            QueryKind::CheckReachable => {
                world.bin_for(f.category)?;
                Goal::Bin
            }
        };
        Some(Job { query: Some(q.query_id), object: q.object, goal })
    }

    fn nearest_cleanable(&self, ctx: &TickContext<'_>) -> Option<ObjectId> {
        ctx.o
            .iter()
            .filter(|f| f.state == ObjectState::Free && self.can_reach_height(f.position.z))
            .map(|f| ((f.position - self.state.chest).norm(), f.id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, id)| id)
    }

    fn progress_job(&mut self, world: &mut World, ctx: &mut TickContext<'_>, out: &mut Outbox) {
        let Some(job) = self.job.clone() else { return };
        if self.state.held != Some(job.object) {
            let Some(f) = ctx.o.get(job.object) else {
                self.fail_job(out);
                return;
            };
            if f.state != ObjectState::Free {
                self.fail_job(out);
                return;
            }
            let p = f.position;
            match self.approach(&p, world) {
                Some(true) => self.start_pick(job.object, p, ctx.dt),
                Some(false) => {}
                None => self.fail_job(out),
            }
        } else {
            let at = match job.goal {
                Goal::Drop(p) => p,
                Goal::Bin => {
                    let category = world.object(job.object).expect("held object exists").category;
                    world.bin_for(category).expect("validated scenario").position
                }
            };
            match self.approach(&at, world) {
                Some(true) => self.start_place(job.object, at, ctx.dt),
                Some(false) => {}
                // cannot get there: set it down at hand
                None => {
                    self.job = None;
                    if let Some(q) = job.query {
                        self.respond(q, Outcome::CannotReach, out);
                    }
                    let hand = self.state.hand;
                    self.start_place(job.object, hand, ctx.dt);
                }
            }
        }
    }

    fn tick_commands(&mut self, world: &mut World, ctx: &mut TickContext<'_>, out: &mut Outbox) {
        while let Some((seq, cmd)) = self.commands.front().cloned() {
            let needs_idle_hands = matches!(cmd, Command::Pick { .. } | Command::Place { .. });
            if needs_idle_hands && self.is_busy() {
                break;
            }
            self.commands.pop_front();
            let result = self.execute(cmd, world, ctx, out);
            out.command_results.push(CommandResult { client_seq: seq, accepted: result.is_ok(), reason: result.err() });
            if self.is_busy() {
                break;
            }
        }
    }

    fn execute(&mut self, cmd: Command, world: &World, ctx: &mut TickContext<'_>, out: &mut Outbox) -> Result<(), String> {
        match cmd {
            Command::SetIntent { object } => {
                if let Some(id) = object {
                    let obj = world.object(id).ok_or_else(|| format!("unknown object {id}"))?;
                    if obj.state == ObjectState::Binned {
                        return Err(format!("{id} is already binned"));
                    }
                }
                if matches!(self.state.activity, HumanActivity::Walking { .. }) {
                    self.state.activity = HumanActivity::Idle;
                }
                self.set_intent(object, ctx, world);
                Ok(())
            }
            Command::MoveTo { position } => {
                let p = Vec3::new(position[0], position[1], self.state.chest.z);
                if !world.grid.in_bounds(&p) {
                    return Err("target position is outside the room".into());
                }
                self.state.activity = HumanActivity::Walking { goal: position };
                Ok(())
            }
            Command::Pick { object } => {
                if self.state.held.is_some() {
                    return Err("hands full".into());
                }
                let obj = world.object(object).ok_or_else(|| format!("unknown object {object}"))?;
                if obj.state != ObjectState::Free {
                    return Err(format!("{object} is not free"));
                }
                if !self.reach().contains_point(&obj.position) {
                    return Err(format!("{object} is out of reach"));
                }
                let p = obj.position;
                self.set_intent(Some(object), ctx, world);
                self.start_pick(object, p, ctx.dt);
                Ok(())
            }
            Command::Place { position } => {
                let Some(id) = self.state.held else { return Err("not holding anything".into()) };
                let p = Vec3::from(position);
                let idx = world.grid.world_to_voxel(&p).map_err(|_| "place position is outside the room".to_string())?;
                if !world.grid.is_free(idx) {
                    return Err("place position is inside an obstacle".into());
                }
                if !self.reach().contains_point(&p) {
                    return Err("place position is out of reach".into());
                }
                self.start_place(id, p, ctx.dt);
                Ok(())
            }
            Command::RespondToQuery { query_ref, outcome } => {
                if !self.inbox.iter().any(|q| q.query_id == query_ref) {
                    return Err(format!("no pending query {query_ref}"));
                }
                self.respond(query_ref, outcome, out);
                Ok(())
            }
        }
    }
}
