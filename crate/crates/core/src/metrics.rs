//! Efficiency measures computed from the event log: completion time, idle
//! time and intent switches per agent, plus query bookkeeping.
//!
//! Intent switching uses a null-gap rule: a switch is a change between two
//! distinct non-null targets, even when ticks without a target lie between
//! them. Dropping a target and picking the same one up again is not a
//! switch.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collaboration::{CollabMessage, ExperimentMode, Outcome, TaskEventKind};
use crate::ids::{AgentId, ObjectId};
use crate::simloop::{LogRecord, RunOutcome, RunReport};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("malformed log: {0}")]
    MalformedLog(String),
}

/// Seconds without an object of intent.
pub fn idle_time(timeline: &[Option<ObjectId>], dt: f64) -> f64 {
    timeline.iter().filter(|t| t.is_none()).count() as f64 * dt
}

pub fn intent_switches(timeline: &[Option<ObjectId>]) -> u32 {
    let mut rule = SwitchRule::default();
    for t in timeline {
        rule.push(*t);
    }
    rule.count
}

#[derive(Clone, Debug, Default, PartialEq)]
struct SwitchRule {
    last: Option<ObjectId>,
    count: u32,
}

impl SwitchRule {
    fn push(&mut self, target: Option<ObjectId>) {
        if let Some(t) = target {
            if self.last.is_some_and(|l| l != t) {
                self.count += 1;
            }
            self.last = Some(t);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub idle_time: f64,
    pub intent_switches: u32,
    pub objects_binned: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCounts {
    pub sent: u32,
    pub accepted: u32,
    pub done: u32,
    pub declined: u32,
    pub cannot_reach: u32,
    pub timed_out: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Empty while a run is still going.
    pub outcome: Option<RunOutcome>,
    /// Set only for completed runs.
    pub completion_time: Option<f64>,
    pub duration: f64,
    pub agents: BTreeMap<AgentId, AgentMetrics>,
    pub queries: QueryCounts,
    pub protocol_errors: u32,
    /// Reserved for gaze-based workload measures merged in by other tools.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<serde_json::Value>,
    /// Reserved for questionnaire scores merged in by other tools.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub questionnaire: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct AgentTally {
    current: Option<ObjectId>,
    since: u64,
    idle_ticks: u64,
    switches: SwitchRule,
    binned: u32,
}

impl AgentTally {
    fn set(&mut self, tick: u64, target: Option<ObjectId>) {
        self.close(tick);
        self.current = target;
        self.switches.push(target);
    }

    fn close(&mut self, tick: u64) {
        if self.current.is_none() {
            self.idle_ticks += tick - self.since;
        }
        self.since = tick;
    }
}

/// Folds log records into metrics. The simulation feeds it as it logs, and
/// [`summarize`] feeds it from a stored log, so both agree exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    dt: Option<f64>,
    last_tick: u64,
    end: Option<(u64, f64, RunOutcome)>,
    agents: BTreeMap<AgentId, AgentTally>,
    queries: QueryCounts,
    protocol_errors: u32,
    error: Option<String>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        let mut agents = BTreeMap::new();
        agents.insert(AgentId::H, AgentTally::default());
        agents.insert(AgentId::R, AgentTally::default());
        Self { agents, ..Self::default() }
    }

    fn fail(&mut self, msg: String) {
        if self.error.is_none() {
            self.error = Some(msg);
        }
    }

    pub fn observe(&mut self, record: &LogRecord) {
        if self.error.is_some() {
            return;
        }
        if self.end.is_some() {
            return self.fail("record after end".into());
        }
        match (self.dt, record) {
            (None, LogRecord::Header { config, .. }) => {
                self.dt = Some(config.dt);
                return;
            }
            (None, _) => return self.fail("log does not start with a header".into()),
            (Some(_), LogRecord::Header { .. }) => return self.fail("second header".into()),
            _ => {}
        }
        let tick = record.tick().expect("non-header records carry a tick");
        if tick < self.last_tick {
            return self.fail(format!("tick {tick} after tick {}", self.last_tick));
        }
        self.last_tick = tick;
        match record {
            LogRecord::Intent { agent, target, .. } => {
                self.agents.get_mut(agent).expect("both agents").set(tick, *target);
            }
            LogRecord::Task { event, .. } => {
                if event.event == TaskEventKind::Binned {
                    self.agents.get_mut(&event.agent).expect("both agents").binned += 1;
                }
            }
            LogRecord::Message { envelope, .. } => match &envelope.message {
                CollabMessage::AssistQuery { .. } => self.queries.sent += 1,
                CollabMessage::AssistResponse { outcome, .. } => match outcome {
                    Outcome::WillDo => self.queries.accepted += 1,
                    Outcome::Done => self.queries.done += 1,
                    Outcome::Decline => self.queries.declined += 1,
                    Outcome::CannotReach => self.queries.cannot_reach += 1,
                },
                _ => {}
            },
            LogRecord::QueryTimeout { .. } => self.queries.timed_out += 1,
            LogRecord::ProtocolError { .. } => self.protocol_errors += 1,
            LogRecord::End { time, outcome, .. } => {
                for a in self.agents.values_mut() {
                    a.close(tick);
                }
                self.end = Some((tick, *time, *outcome));
            }
            _ => {}
        }
    }

    fn report(&self, tick: u64, outcome: Option<RunOutcome>, duration: f64) -> MetricsReport {
        let dt = self.dt.unwrap_or(0.0);
        let agents = self
            .agents
            .iter()
            .map(|(id, a)| {
                let mut a = a.clone();
                a.close(tick.max(a.since));
                let m = AgentMetrics {
                    idle_time: a.idle_ticks as f64 * dt,
                    intent_switches: a.switches.count,
                    objects_binned: a.binned,
                };
                (*id, m)
            })
            .collect();
        MetricsReport {
            outcome,
            completion_time: (outcome == Some(RunOutcome::Completed)).then_some(duration),
            duration,
            agents,
            queries: self.queries.clone(),
            protocol_errors: self.protocol_errors,
            workload: None,
            questionnaire: None,
        }
    }

    /// Metrics of a run still in progress, counted up to `tick`.
    pub fn snapshot(&self, tick: u64, dt: f64) -> MetricsReport {
        match self.end {
            Some((t, time, outcome)) => self.report(t, Some(outcome), time),
            None => self.report(tick, None, tick as f64 * dt),
        }
    }

    pub fn finish(self) -> Result<MetricsReport, MetricsError> {
        if let Some(e) = self.error {
            return Err(MetricsError::MalformedLog(e));
        }
        if self.dt.is_none() {
            return Err(MetricsError::MalformedLog("empty log".into()));
        }
        let Some((tick, time, outcome)) = self.end else {
            return Err(MetricsError::MalformedLog("log has no end record".into()));
        };
        Ok(self.report(tick, Some(outcome), time))
    }
}

/// Recomputes the metrics of a finished run from its log.
pub fn summarize(log: &[LogRecord]) -> Result<MetricsReport, MetricsError> {
    let mut acc = MetricsAccumulator::new();
    for r in log {
        acc.observe(r);
    }
    acc.finish()
}

pub fn run_id(report: &RunReport) -> String {
    format!("{}-{}-s{}", report.scenario, report.config.mode.label(), report.config.seed)
}

/// One row per (run, agent) of the flat export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run: String,
    pub scenario: String,
    pub mode: ExperimentMode,
    pub seed: u64,
    pub agent: AgentId,
    pub outcome: RunOutcome,
    pub completion_time: Option<f64>,
    pub duration: f64,
    pub idle_time: f64,
    pub intent_switches: u32,
    pub objects_binned: u32,
    pub queries_sent: u32,
    pub queries_done: u32,
    pub queries_declined: u32,
    pub queries_timed_out: u32,
}

pub fn csv_rows(report: &RunReport) -> Vec<CsvRow> {
    let m = &report.metrics;
    m.agents
        .iter()
        .map(|(agent, a)| CsvRow {
            run: run_id(report),
            scenario: report.scenario.clone(),
            mode: report.config.mode,
            seed: report.config.seed,
            agent: *agent,
            outcome: report.outcome,
            completion_time: m.completion_time,
            duration: m.duration,
            idle_time: a.idle_time,
            intent_switches: a.intent_switches,
            objects_binned: a.objects_binned,
            queries_sent: m.queries.sent,
            queries_done: m.queries.done,
            queries_declined: m.queries.declined,
            queries_timed_out: m.queries.timed_out,
        })
        .collect()
}

pub fn write_csv<W: Write>(reports: &[RunReport], w: W) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(w);
    for r in reports {
        for row in csv_rows(r) {
            writer.serialize(row)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Per-mode means over a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: ExperimentMode,
    pub runs: u32,
    pub completed: u32,
    pub completion_rate: f64,
    /// Mean over completed runs only.
    pub mean_completion_time: Option<f64>,
    pub mean_duration: f64,
    pub mean_idle_time: BTreeMap<AgentId, f64>,
    pub mean_intent_switches: BTreeMap<AgentId, f64>,
    pub queries_sent: u32,
    pub queries_done: u32,
}

pub fn aggregate(reports: &[RunReport]) -> Vec<ModeSummary> {
    let mut by_mode: BTreeMap<ExperimentMode, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        by_mode.entry(r.config.mode).or_default().push(r);
    }
    by_mode
        .into_iter()
        .map(|(mode, runs)| {
            let n = runs.len() as f64;
            let completed: Vec<f64> = runs.iter().filter_map(|r| r.metrics.completion_time).collect();
            let mean_by_agent = |f: &dyn Fn(&AgentMetrics) -> f64| {
                [AgentId::H, AgentId::R]
                    .into_iter()
                    .map(|a| (a, runs.iter().map(|r| f(&r.metrics.agents[&a])).sum::<f64>() / n))
                    .collect::<BTreeMap<_, _>>()
            };
            ModeSummary {
                mode,
                runs: runs.len() as u32,
                completed: completed.len() as u32,
                completion_rate: completed.len() as f64 / n,
                mean_completion_time: (!completed.is_empty())
                    .then(|| completed.iter().sum::<f64>() / completed.len() as f64),
                mean_duration: runs.iter().map(|r| r.metrics.duration).sum::<f64>() / n,
                mean_idle_time: mean_by_agent(&|a| a.idle_time),
                mean_intent_switches: mean_by_agent(&|a| a.intent_switches as f64),
                queries_sent: runs.iter().map(|r| r.metrics.queries.sent).sum(),
                queries_done: runs.iter().map(|r| r.metrics.queries.done).sum(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(i: u32) -> Option<ObjectId> {
        Some(ObjectId(i))
    }

    #[test]
    fn idle_examples() {
        let mut t = vec![o(1); 30];
        for s in &mut t[10..20] {
            *s = None;
        }
        assert!((idle_time(&t, 0.1) - 1.0).abs() < 1e-12);
        assert_eq!(idle_time(&[o(1); 5], 0.1), 0.0);
        let alt: Vec<_> = (0..10).map(|i| if i % 2 == 0 { o(1) } else { None }).collect();
        assert!((idle_time(&alt, 0.1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn switch_examples() {
        assert_eq!(intent_switches(&[o(1), o(1), o(2), o(2), o(3)]), 2);
        assert_eq!(intent_switches(&[o(1), None, o(1)]), 0);
        assert_eq!(intent_switches(&[o(1), None, o(2)]), 1);
        assert_eq!(intent_switches(&[None, None]), 0);
    }
}
