use std::path::Path;
use std::sync::{Arc, OnceLock};

use acs_core::affordance::precompute_for_scenario;
use acs_core::agents::{Command, HumanControl, HumanPolicy, RobotPhase};
use acs_core::collaboration::{CollabMessage, ExperimentMode, Outcome};
use acs_core::ids::{AgentId, ObjectId};
use acs_core::simloop::{run, LogRecord, RunOutcome, SimConfig, Simulation};
use acs_core::world::{load_scenario, parse_scenario, Scenario};

/// A 5 m corridor: the robot starts at x=1.05, the object lies on the floor
/// at x=4.05 and its bin stands at x=0.55. The human stays out of the way.
const CORRIDOR: &str = r#"{
  "name": "corridor",
  "grid": { "origin": [0, 0, 0], "resolution": 0.1, "dims": [50, 20, 16] },
  "objects": [ { "id": 1, "category": "food", "pos": [4.05, 1.05, 0.05] } ],
  "bins": [
    { "id": 0, "accepts": "food", "pos": [0.55, 1.05, 0.45] },
    { "id": 1, "accepts": "kitchen", "pos": [0.25, 0.25, 0.45] },
    { "id": 2, "accepts": "household_tool", "pos": [0.25, 1.75, 0.45] }
  ],
  "agents": {
    "human": { "chest_pos": [4.5, 0.3, 1.3], "heading": 3.14159 },
    "robot": { "base_pose": [1.05, 1.05, 0.0] }
  }
}"#;

type Inputs = (Arc<Scenario>, Arc<acs_core::affordance::CapabilityMap>);

fn load(text: &str) -> Inputs {
    if text == CORRIDOR {
        static CACHE: OnceLock<Inputs> = OnceLock::new();
        return CACHE.get_or_init(|| precompute(text)).clone();
    }
    precompute(text)
}

fn precompute(text: &str) -> Inputs {
    let s = parse_scenario(text).unwrap();
    let cap = precompute_for_scenario(&s).unwrap();
    (Arc::new(s), Arc::new(cap))
}

fn scripted(mode: ExperimentMode) -> SimConfig {
    SimConfig { mode, human: HumanControl::Scripted(HumanPolicy::Diligent), ..SimConfig::default() }
}

#[test]
fn empty_scenario_completes_at_tick_zero() {
    let text = CORRIDOR.replace(r#"{ "id": 1, "category": "food", "pos": [4.05, 1.05, 0.05] }"#, "");
    let (s, cap) = load(&text);
    assert!(s.world.objects().is_empty());
    let r = run(s, cap, scripted(ExperimentMode::Shared)).unwrap();
    assert_eq!(r.outcome, RunOutcome::Completed);
    assert_eq!(r.ticks, 0);
    assert_eq!(r.metrics.completion_time, Some(0.0));
    assert!(matches!(r.log.last(), Some(LogRecord::End { tick: 0, .. })));
}

#[test]
fn one_tick_budget_times_out() {
    let (s, cap) = load(CORRIDOR);
    let r = run(s, cap, SimConfig { max_time: 0.1, ..scripted(ExperimentMode::Shared) }).unwrap();
    assert_eq!(r.outcome, RunOutcome::TimedOut);
    assert_eq!(r.ticks, 1);
    assert_eq!(r.metrics.completion_time, None);
}

#[test]
fn robot_alone_meets_hand_budget() {
    let (s, cap) = load(CORRIDOR);
    let r = run(s, cap, scripted(ExperimentMode::NonComm)).unwrap();
    assert_eq!(r.outcome, RunOutcome::Completed);
    // The arm reaches about 0.6 m out from the base at floor and bin height.
    // Drive out 3.0 - 0.6 m, back 3.5 - 2 * 0.6 m at 0.5 m/s, plus a 1.5 s
    // pick, a 1.5 s place and one planning tick.
    let budget = (2.4 + 2.3) / 0.5 + 1.5 + 1.5 + 0.1;
    let t = r.metrics.completion_time.unwrap();
    assert!((t - budget).abs() <= 0.1 * budget, "completed in {t} s, budget {budget} s");
    assert_eq!(r.metrics.agents[&AgentId::R].objects_binned, 1);
}

#[test]
fn robot_phases_follow_fetch_cycle() {
    let (s, cap) = load(CORRIDOR);
    let r = run(s, cap, scripted(ExperimentMode::NonComm)).unwrap();
    let phases: Vec<RobotPhase> = r
        .log
        .iter()
        .filter_map(|rec| match rec {
            LogRecord::RobotPhase { phase, .. } => Some(*phase),
            _ => None,
        })
        .collect();
    use RobotPhase::*;
    assert_eq!(phases, vec![Planning, Moving, Manipulating, Moving, Manipulating, Idle]);
}

#[test]
fn repeated_runs_are_identical() {
    let (s, cap) = load(CORRIDOR);
    let a = run(s.clone(), cap.clone(), scripted(ExperimentMode::Shared)).unwrap();
    let b = run(s, cap, scripted(ExperimentMode::Shared)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.digest(), b.digest());
}

#[test]
fn invalid_config_rejected() {
    let (s, cap) = load(CORRIDOR);
    for bad in [
        SimConfig { dt: 0.0, ..SimConfig::default() },
        SimConfig { max_time: -1.0, ..SimConfig::default() },
        SimConfig { dt: f64::NAN, ..SimConfig::default() },
    ] {
        assert!(Simulation::new(s.clone(), cap.clone(), bad).is_err());
    }
}

#[test]
fn capability_for_other_grid_rejected() {
    let (s, _) = load(CORRIDOR);
    let other = CORRIDOR.replace("[50, 20, 16]", "[60, 20, 16]");
    let (_, cap) = load(&other);
    assert!(Simulation::new(s, cap, SimConfig::default()).is_err());
}

fn live(text: &str) -> Simulation {
    let (s, cap) = load(text);
    Simulation::new(s, cap, SimConfig { human: HumanControl::Live, ..SimConfig::default() }).unwrap()
}

fn result_for(sim: &Simulation, seq: u64) -> Option<(bool, Option<String>)> {
    sim.recent_command_results().find(|r| r.client_seq == seq).map(|r| (r.accepted, r.reason.clone()))
}

#[test]
fn live_pick_out_of_reach_rejected() {
    let mut sim = live(CORRIDOR);
    sim.submit_command(1, Command::Pick { object: ObjectId(1) });
    sim.step();
    let (accepted, reason) = result_for(&sim, 1).expect("command answered within a tick");
    assert!(!accepted);
    assert!(reason.unwrap().contains("out of reach"));
    assert_eq!(sim.human().state.held, None);
}

#[test]
fn commands_after_the_end_are_rejected_unlogged() {
    let mut sim = live(CORRIDOR);
    assert_eq!(sim.run_to_end(), RunOutcome::Completed);
    sim.submit_command(7, Command::SetIntent { object: Some(ObjectId(1)) });
    assert_eq!(result_for(&sim, 7).map(|r| r.0), Some(false));
    assert!(!sim.log().iter().any(|r| matches!(r, LogRecord::Command { client_seq: 7, .. })));
}

#[test]
fn live_intent_on_binned_object_rejected_mid_run() {
    // Two objects: once the robot bins the first, the operator points at it.
    let text = CORRIDOR.replace(
        r#"{ "id": 1, "category": "food", "pos": [4.05, 1.05, 0.05] }"#,
        r#"{ "id": 1, "category": "food", "pos": [2.05, 1.05, 0.05] },
           { "id": 2, "category": "food", "pos": [4.55, 1.85, 0.05] }"#,
    );
    let mut sim = live(&text);
    while sim.world().object(ObjectId(1)).unwrap().state != acs_core::world::ObjectState::Binned {
        assert!(sim.step(), "run ended before the first object was binned");
    }
    sim.submit_command(3, Command::SetIntent { object: Some(ObjectId(1)) });
    sim.step();
    let (accepted, reason) = result_for(&sim, 3).unwrap();
    assert!(!accepted);
    assert!(reason.unwrap().contains("binned"));
    assert!(sim.log().iter().any(|r| matches!(r, LogRecord::Command { client_seq: 3, .. })));
    assert!(sim.log().iter().any(|r| matches!(r, LogRecord::CommandResult { result, .. } if result.client_seq == 3)));
}

#[test]
fn scripted_human_rejects_commands() {
    let (s, cap) = load(CORRIDOR);
    let mut sim = Simulation::new(s, cap, scripted(ExperimentMode::Shared)).unwrap();
    sim.submit_command(1, Command::MoveTo { position: [2.0, 1.0] });
    let (accepted, reason) = result_for(&sim, 1).unwrap();
    assert!(!accepted);
    assert!(reason.unwrap().contains("scripted"));
}

fn shelf() -> Inputs {
    let s = load_scenario(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/shelf_deadlock.json")).unwrap();
    let cap = precompute_for_scenario(&s).unwrap();
    (Arc::new(s), Arc::new(cap))
}

#[test]
fn declining_human_answers_within_a_tick() {
    let (s, cap) = shelf();
    let config = SimConfig { human: HumanControl::Scripted(HumanPolicy::Declining), ..SimConfig::default() };
    let r = run(s, cap, config).unwrap();
    let mut asked = std::collections::BTreeMap::new();
    let mut answered = 0;
    for rec in &r.log {
        let LogRecord::Message { tick, envelope, .. } = rec else { continue };
        match &envelope.message {
            CollabMessage::AssistQuery { query_id, .. } => {
                asked.insert(*query_id, *tick);
            }
            CollabMessage::AssistResponse { query_ref, outcome } => {
                assert_eq!(*outcome, Outcome::Decline);
                // Delivered to the human at tick t, answered during t, delivered back at t + 1.
                assert!(tick - asked[query_ref] <= 1, "answer to {query_ref} took {} ticks", tick - asked[query_ref]);
                answered += 1;
            }
            _ => {}
        }
    }
    assert!(answered > 0);
    assert_eq!(answered, asked.len());
    assert_eq!(r.metrics.queries.declined as usize, answered);
    assert_ne!(r.outcome, RunOutcome::Completed);
}
