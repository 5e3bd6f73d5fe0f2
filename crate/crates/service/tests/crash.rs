mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::Duration;

use common::{editor_then_hang, get, post, recolor, seed_scene};
use serde_json::json;

fn start(store: &Path) -> (Child, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_foldedit"))
        .args(["serve", "--addr", "127.0.0.1:0", "--store"])
        .arg(store)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected: {line}"))
        .to_string();
    (child, url)
}

#[test]
fn killed_mid_turn_recovers_last_committed_head() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let scene = seed_scene(11);
    let (remote, calls) = editor_then_hang(scene.clone(), 1);

    let (mut child, url) = start(&store);
    let r = post(
        &format!("{url}/sessions"),
        &json!({"seed": 11, "config": {"backend": "remote", "backend_url": remote, "backend_timeout_ms": 600000}}),
    );
    assert_eq!(r.status, 201);
    let id = r.json()["session_id"].as_str().unwrap().to_string();

    let (_, dsl) = recolor(&scene, 0);
    let t1 = post(&format!("{url}/sessions/{id}/turns"), &json!({"dsl": dsl})).json();
    assert_eq!(t1["status"], "committed", "{t1}");
    let h1 = t1["final_uri"].as_str().unwrap().to_string();

    let (_, dsl2) = recolor(&scene, 1);
    let turn_url = format!("{url}/sessions/{id}/turns");
    let pending = thread::spawn(move || {
        let _ = common::agent().post(&turn_url).send_json(json!({"dsl": dsl2}));
    });
    while calls.load(std::sync::atomic::Ordering::SeqCst) < 2 {
        thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    pending.join().unwrap();

    let (mut child, url) = start(&store);
    let g = get(&format!("{url}/sessions/{id}/graph")).json();
    assert_eq!(g["head_uri"], h1.as_str());
    assert_eq!(g["actions"].as_array().unwrap().len(), 1);
    assert_eq!(g["nodes"].as_object().unwrap().len(), 2);
    assert_eq!(get(&format!("{url}/images/{h1}")).status, 200);
    let show = get(&format!("{url}/sessions/{id}")).json();
    assert_eq!(show["status"], "open");
    child.kill().unwrap();
    child.wait().unwrap();
}
