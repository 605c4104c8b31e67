//! Live bridge to one operator. The simulation runs in its own task and is
//! reached only through a bounded command queue; snapshots flow back through
//! a watch channel, so a slow client sees the latest state and never a
//! backlog. Commands are never dropped.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;
use tokio::time::{interval, MissedTickBehavior};
use tokio_tungstenite::tungstenite::Message;

use acs_core::agents::Command;
use acs_core::simloop::{LogRecord, Simulation};
use acs_core::wire::{ClientFrame, ControlAction, ErrorCode, ServerFrame, Snapshot, WIRE_VERSION};

#[derive(Clone, Debug)]
pub struct ServeOptions {
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
    pub snapshot_hz: f64,
    pub command_queue: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { speed: 1.0, snapshot_hz: 10.0, command_queue: 64 }
    }
}

enum Inbound {
    Command { client_seq: u64, command: Command },
    Control(ControlAction),
}

pub struct Server {
    stop: watch::Sender<bool>,
    sim_task: JoinHandle<Vec<LogRecord>>,
    accept_task: JoinHandle<()>,
}

fn frame_text(frame: &ServerFrame) -> String {
    serde_json::to_string(frame).expect("frames serialize")
}

fn snapshot_text(sim: &Simulation, running: bool) -> Arc<String> {
    Arc::new(frame_text(&ServerFrame::Snapshot(Box::new(Snapshot::capture(sim, running)))))
}

impl Server {
    /// Starts serving on `listener`. The simulation starts paused.
    pub fn start(listener: TcpListener, sim: Simulation, opts: ServeOptions) -> Self {
        let (stop, stop_rx) = watch::channel(false);
        let (inbound_tx, inbound_rx) = mpsc::channel(opts.command_queue);
        let (frames_tx, frames_rx) = watch::channel(snapshot_text(&sim, false));
        let hello = Arc::new(frame_text(&ServerFrame::Hello {
            version: WIRE_VERSION,
            scenario: sim.scenario().name.clone(),
            mode: sim.config().mode,
            dt: sim.config().dt,
        }));
        let sim_task = tokio::spawn(sim_loop(sim, opts, inbound_rx, frames_tx, stop_rx.clone()));
        let accept_task = tokio::spawn(accept_loop(listener, inbound_tx, frames_rx, hello, stop_rx));
        Self { stop, sim_task, accept_task }
    }

    /// Stops the server and returns the event log of the current run.
    pub async fn shutdown(self) -> Vec<LogRecord> {
        let _ = self.stop.send(true);
        self.accept_task.abort();
        self.sim_task.await.unwrap_or_default()
    }
}

async fn sim_loop(
    mut sim: Simulation,
    opts: ServeOptions,
    mut inbound: mpsc::Receiver<Inbound>,
    frames: watch::Sender<Arc<String>>,
    mut stop: watch::Receiver<bool>,
) -> Vec<LogRecord> {
    let mut running = false;
    let mut ticks = interval(Duration::from_secs_f64(sim.config().dt / opts.speed));
    ticks.set_missed_tick_behavior(MissedTickBehavior::Skip);
    let mut snapshots = interval(Duration::from_secs_f64(1.0 / opts.snapshot_hz));
    snapshots.set_missed_tick_behavior(MissedTickBehavior::Skip);
    loop {
        tokio::select! {
            _ = stop.changed() => break,
            Some(msg) = inbound.recv() => {
                match msg {
                    Inbound::Command { client_seq, command } => sim.submit_command(client_seq, command),
                    Inbound::Control(ControlAction::Start | ControlAction::Resume) => running = true,
                    Inbound::Control(ControlAction::Pause) => running = false,
                    Inbound::Control(ControlAction::Reset) => {
                        sim = sim.reset();
                        running = false;
                    }
                }
                frames.send_replace(snapshot_text(&sim, running));
            }
            _ = ticks.tick(), if running => {
                sim.step();
            }
            _ = snapshots.tick() => {
                frames.send_replace(snapshot_text(&sim, running));
            }
        }
    }
    sim.log().to_vec()
}

async fn accept_loop(
    listener: TcpListener,
    inbound: mpsc::Sender<Inbound>,
    frames: watch::Receiver<Arc<String>>,
    hello: Arc<String>,
    mut stop: watch::Receiver<bool>,
) {
    let busy = Arc::new(AtomicBool::new(false));
    loop {
        tokio::select! {
            _ = stop.changed() => break,
            accepted = listener.accept() => {
                let Ok((stream, _)) = accepted else { continue };
                tokio::spawn(connection(stream, busy.clone(), inbound.clone(), frames.clone(), hello.clone()));
            }
        }
    }
}

/// Clears the busy flag when the operator's connection ends.
struct Operator(Arc<AtomicBool>);

impl Drop for Operator {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

async fn connection(
    stream: TcpStream,
    busy: Arc<AtomicBool>,
    inbound: mpsc::Sender<Inbound>,
    mut frames: watch::Receiver<Arc<String>>,
    hello: Arc<String>,
) {
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else { return };
    let (mut tx, mut rx) = ws.split();
    let error = |code, message: String| Message::Text(frame_text(&ServerFrame::Error { code, message }));

    if busy.swap(true, Ordering::SeqCst) {
        let _ = tx.send(error(ErrorCode::Busy, "another operator is connected".into())).await;
        let _ = tx.close().await;
        return;
    }
    let _operator = Operator(busy);

    let first = frames.borrow_and_update().clone();
    if tx.send(Message::Text(hello.to_string())).await.is_err() || tx.send(Message::Text(first.to_string())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            msg = rx.next() => {
                let text = match msg {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Binary(_))) => {
                        let _ = tx.send(error(ErrorCode::Malformed, "binary frames are not supported".into())).await;
                        let _ = tx.close().await;
                        return;
                    }
                    Some(Ok(Message::Ping(_) | Message::Pong(_) | Message::Frame(_))) => continue,
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => return,
                };
                let inbound_msg = match serde_json::from_str::<ClientFrame>(&text) {
                    Ok(ClientFrame::Command { client_seq, command }) => Inbound::Command { client_seq, command },
                    Ok(ClientFrame::Control { action }) => Inbound::Control(action),
                    Err(e) => {
                        let _ = tx.send(error(ErrorCode::Malformed, e.to_string())).await;
                        let _ = tx.close().await;
                        return;
                    }
                };
                if inbound.send(inbound_msg).await.is_err() {
                    return;
                }
            }
            changed = frames.changed() => {
                if changed.is_err() {
                    return;
                }
                let text = frames.borrow_and_update().clone();
                if tx.send(Message::Text(text.to_string())).await.is_err() {
                    return;
                }
            }
        }
    }
}
