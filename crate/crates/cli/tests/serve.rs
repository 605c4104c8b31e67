use std::sync::{Arc, OnceLock};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::{TcpListener, TcpStream};
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use acs_cli::serve::{ServeOptions, Server};
use acs_core::affordance::{precompute_for_scenario, CapabilityMap};
use acs_core::agents::HumanControl;
use acs_core::simloop::{LogRecord, SimConfig, Simulation};
use acs_core::world::{load_scenario, Scenario};

type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn inputs() -> &'static (Arc<Scenario>, Arc<CapabilityMap>) {
    static INPUTS: OnceLock<(Arc<Scenario>, Arc<CapabilityMap>)> = OnceLock::new();
    INPUTS.get_or_init(|| {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/shelf_deadlock.json");
        let s = load_scenario(std::path::Path::new(path)).unwrap();
        let cap = precompute_for_scenario(&s).unwrap();
        (Arc::new(s), Arc::new(cap))
    })
}

async fn start() -> (Server, String) {
    start_at(20.0).await
}

async fn start_at(speed: f64) -> (Server, String) {
    let (s, cap) = inputs().clone();
    let config = SimConfig { human: HumanControl::Live, ..SimConfig::default() };
    let sim = Simulation::new(s, cap, config).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("ws://{}", listener.local_addr().unwrap());
    let server = Server::start(listener, sim, ServeOptions { speed, ..ServeOptions::default() });
    (server, url)
}

async fn next_frame(ws: &mut Client) -> Option<Value> {
    loop {
        match timeout(Duration::from_secs(5), ws.next()).await.expect("server went quiet") {
            Some(Ok(Message::Text(t))) => return Some(serde_json::from_str(&t).unwrap()),
            Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return None,
            Some(Ok(_)) => continue,
        }
    }
}

async fn send(ws: &mut Client, v: Value) {
    ws.send(Message::Text(v.to_string())).await.unwrap();
}

async fn connect(url: &str) -> Client {
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

/// Reads snapshots until `pred` holds, failing after `limit`.
async fn wait_for(ws: &mut Client, limit: Duration, pred: impl Fn(&Value) -> bool) -> Value {
    let deadline = tokio::time::Instant::now() + limit;
    loop {
        assert!(tokio::time::Instant::now() < deadline, "condition not reached in time");
        let f = next_frame(ws).await.expect("connection closed");
        if f["type"] == "snapshot" && pred(&f) {
            return f;
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn hello_then_paused_snapshot() {
    let (server, url) = start().await;
    let mut ws = connect(&url).await;
    let hello = next_frame(&mut ws).await.unwrap();
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["version"], 1);
    assert_eq!(hello["scenario"], "shelf_deadlock");
    assert_eq!(hello["mode"], "shared");
    let snap = next_frame(&mut ws).await.unwrap();
    assert_eq!(snap["type"], "snapshot");
    assert_eq!(snap["running"], false);
    assert_eq!(snap["tick"], 0);
    let dims = snap["grid"]["dims"].as_array().unwrap();
    let len: u64 = dims.iter().map(|d| d.as_u64().unwrap()).product();
    let occ = acs_core::wire::decode_bits(snap["occupancy"].as_str().unwrap(), len as usize);
    assert!(occ.is_some_and(|v| !v.is_empty()));
    drop(ws);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn pick_in_reach_shows_held() {
    let (server, url) = start().await;
    let mut ws = connect(&url).await;
    send(&mut ws, json!({"type": "control", "action": "start"})).await;
    send(&mut ws, json!({"type": "command", "client_seq": 1, "command": {"command": "pick", "object": 4}})).await;
    let snap = wait_for(&mut ws, Duration::from_secs(5), |s| s["human"]["held"] == 4).await;
    let results = snap["command_results"].as_array().unwrap();
    assert!(results.iter().any(|r| r["client_seq"] == 1 && r["accepted"] == true));

    send(&mut ws, json!({"type": "command", "client_seq": 2, "command": {"command": "pick", "object": 2}})).await;
    let snap = wait_for(&mut ws, Duration::from_secs(5), |s| {
        s["command_results"].as_array().unwrap().iter().any(|r| r["client_seq"] == 2)
    })
    .await;
    let r = snap["command_results"].as_array().unwrap().iter().find(|r| r["client_seq"] == 2).unwrap().clone();
    assert_eq!(r["accepted"], false);
    drop(ws);

    let log = server.shutdown().await;
    assert!(matches!(log.first(), Some(LogRecord::Header { .. })));
    let commands = log.iter().filter(|r| matches!(r, LogRecord::Command { .. })).count();
    assert_eq!(commands, 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_frame_closes_connection_only() {
    let (server, url) = start().await;
    let mut ws = connect(&url).await;
    next_frame(&mut ws).await.unwrap();
    ws.send(Message::Text("{\"type\":\"teleport\"}".into())).await.unwrap();
    let mut saw_error = false;
    while let Some(f) = next_frame(&mut ws).await {
        if f["type"] == "error" {
            assert_eq!(f["code"], "malformed");
            saw_error = true;
        }
    }
    assert!(saw_error);

    // The simulation survives and accepts a new operator.
    let mut ws = connect(&url).await;
    assert_eq!(next_frame(&mut ws).await.unwrap()["type"], "hello");
    send(&mut ws, json!({"type": "control", "action": "start"})).await;
    wait_for(&mut ws, Duration::from_secs(5), |s| s["running"] == true && s["tick"].as_u64().unwrap() > 0).await;
    drop(ws);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn second_operator_is_busy() {
    let (server, url) = start().await;
    let mut first = connect(&url).await;
    assert_eq!(next_frame(&mut first).await.unwrap()["type"], "hello");
    let mut second = connect(&url).await;
    let f = next_frame(&mut second).await.unwrap();
    assert_eq!(f["type"], "error");
    assert_eq!(f["code"], "busy");
    assert!(next_frame(&mut second).await.is_none());
    // The first connection keeps streaming.
    assert_eq!(next_frame(&mut first).await.unwrap()["type"], "snapshot");
    drop(first);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reset_returns_to_tick_zero_paused() {
    let (server, url) = start().await;
    let mut ws = connect(&url).await;
    send(&mut ws, json!({"type": "control", "action": "start"})).await;
    wait_for(&mut ws, Duration::from_secs(5), |s| s["tick"].as_u64().unwrap() >= 5).await;
    send(&mut ws, json!({"type": "control", "action": "pause"})).await;
    wait_for(&mut ws, Duration::from_secs(5), |s| s["running"] == false).await;
    send(&mut ws, json!({"type": "control", "action": "reset"})).await;
    wait_for(&mut ws, Duration::from_secs(5), |s| s["tick"] == 0 && s["running"] == false).await;
    drop(ws);
    let log = server.shutdown().await;
    assert_eq!(log.iter().filter(|r| matches!(r, LogRecord::Header { .. })).count(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn answered_query_leaves_pending_list_and_reconnect_restores_view() {
    let (server, url) = start_at(100.0).await;
    let mut ws = connect(&url).await;
    send(&mut ws, json!({"type": "control", "action": "start"})).await;
    let snap = wait_for(&mut ws, Duration::from_secs(20), |s| !s["pending_queries"].as_array().unwrap().is_empty()).await;
    let query = snap["pending_queries"][0].clone();
    assert_eq!(query["kind"], "move_object_into_robot_area");
    let id = query["query_id"].as_u64().unwrap();
    assert_eq!(snap["recent_messages"].as_array().unwrap().last().unwrap()["type"], "assist_query");

    // Reconnecting mid-run yields a complete view from the first snapshot.
    drop(ws);
    let mut ws = loop {
        let mut ws = connect(&url).await;
        if next_frame(&mut ws).await.unwrap()["type"] == "hello" {
            break ws;
        }
    };
    let first = next_frame(&mut ws).await.unwrap();
    assert!(first["tick"].as_u64().unwrap() >= snap["tick"].as_u64().unwrap());
    assert!(first["pending_queries"].as_array().unwrap().iter().any(|q| q["query_id"] == id));
    assert!(first["a_r"].is_string());

    send(&mut ws, json!({"type": "command", "client_seq": 9, "command": {"command": "respond_to_query", "query_ref": id, "outcome": "done"}})).await;
    let after = wait_for(&mut ws, Duration::from_secs(5), |s| {
        s["command_results"].as_array().unwrap().iter().any(|r| r["client_seq"] == 9)
    })
    .await;
    assert!(after["pending_queries"].as_array().unwrap().iter().all(|q| q["query_id"] != id));
    drop(ws);
    server.shutdown().await;
}
