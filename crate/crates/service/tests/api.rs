mod common;

use std::thread;
use std::time::{Duration, Instant};

use common::{get, get_with, post, recolor, seed_scene, server, server_with, slow_rejecting_editor};
use foldedit_core::imageio::decode_png;
use foldedit_core::scene::render;
use foldedit_service::config::EditSettings;
use serde_json::{json, Value};

fn create(s: &common::Server, body: Value) -> (String, String) {
    let r = post(&s.url("/sessions"), &body);
    assert_eq!(r.status, 201, "{}", String::from_utf8_lossy(&r.body));
    let v = r.json();
    (
        v["session_id"].as_str().unwrap().to_string(),
        v["root_uri"].as_str().unwrap().to_string(),
    )
}

#[test]
fn session_lifecycle() {
    let s = server();
    assert_eq!(get(&s.url("/health")).json()["status"], "ok");

    let scene = seed_scene(7);
    let (id, root) = create(&s, json!({"seed": 7}));
    let g = get(&s.url(&format!("/sessions/{id}/graph"))).json();
    assert_eq!(g["head_uri"], root.as_str());
    assert_eq!(g["nodes"].as_object().unwrap().len(), 1);

    let root_png = get(&s.url(&format!("/images/{root}")));
    let want = render(&scene, scene.canvas_w, scene.canvas_h).unwrap();
    assert_eq!(decode_png(&root_png.body).unwrap(), want);

    let (_, dsl) = recolor(&scene, 0);
    let out = post(
        &s.url(&format!("/sessions/{id}/turns")),
        &json!({"instruction": "recolour it", "dsl": dsl}),
    );
    assert_eq!(out.status, 200);
    let out = out.json();
    assert_eq!(out["status"], "committed", "{out}");
    let h1 = out["final_uri"].as_str().unwrap().to_string();
    assert_ne!(h1, root);
    let g = get(&s.url(&format!("/sessions/{id}/graph"))).json();
    assert_eq!(g["actions"].as_array().unwrap().len(), 1);
    assert_eq!(g["head_uri"], h1.as_str());
    assert_eq!(g["nodes"][&h1]["parent_uri"], root.as_str());

    let undo = post(&s.url(&format!("/sessions/{id}/undo")), &json!({}));
    assert_eq!(undo.status, 200);
    assert_eq!(undo.json()["head_uri"], root.as_str());

    let (_, other) = recolor(&scene, 1);
    let out = post(
        &s.url(&format!("/sessions/{id}/turns")),
        &json!({"instruction": "", "dsl": other}),
    )
    .json();
    assert_eq!(out["status"], "committed", "{out}");
    let h2 = out["final_uri"].as_str().unwrap().to_string();
    let g = get(&s.url(&format!("/sessions/{id}/graph"))).json();
    let children: Vec<&str> = g["nodes"]
        .as_object()
        .unwrap()
        .values()
        .filter(|n| n["parent_uri"] == root.as_str())
        .map(|n| n["uri"].as_str().unwrap())
        .collect();
    assert_eq!(children, [h1.as_str(), h2.as_str()]);

    // undo with an explicit target jumps across branches
    let jump = post(&s.url(&format!("/sessions/{id}/undo")), &json!({"target_uri": h1}));
    assert_eq!(jump.json()["head_uri"], h1.as_str());

    let m = get(&s.url(&format!("/sessions/{id}/metrics")));
    assert_eq!(m.status, 200);
    let m = m.json();
    let turns = m["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 1, "only the head's lineage is scored: {m}");
    assert_eq!(turns[0]["if_score"], 1.0);
    assert_eq!(turns[0]["ic_score"], 1.0);
    assert!(m["perceptual_provider"].as_str().unwrap().starts_with("NOT-LPIPS"));

    let show = get(&s.url(&format!("/sessions/{id}"))).json();
    assert_eq!(
        (show["head_uri"].as_str(), show["turns_committed"].as_u64()),
        (Some(h1.as_str()), Some(2))
    );

    let closed = post(&s.url(&format!("/sessions/{id}/close")), &json!({}));
    assert_eq!(closed.json()["status"], "closed");
    let late = post(&s.url(&format!("/sessions/{id}/turns")), &json!({"dsl": dsl}));
    assert_eq!((late.status, late.json()["error"].as_str()), (409, Some("closed")));

    let list = get(&s.url("/sessions")).json();
    assert_eq!(list["sessions"][0]["session_id"], id.as_str());
}

#[test]
fn images_are_immutable_and_revalidate() {
    let s = server();
    let (_, root) = create(&s, json!({"seed": 3}));
    let r = get(&s.url(&format!("/images/{root}")));
    assert_eq!(r.status, 200);
    assert_eq!(r.header("content-type"), Some("image/png"));
    assert_eq!(r.header("cache-control"), Some("public, max-age=31536000, immutable"));
    let etag = r.header("etag").unwrap().to_string();
    assert_eq!(etag, format!("\"{root}\""));
    let again = get_with(&s.url(&format!("/images/{root}")), ("If-None-Match", &etag));
    assert_eq!(again.status, 304);
    assert!(again.body.is_empty());
    let stale = get_with(
        &s.url(&format!("/images/{root}")),
        ("If-None-Match", "\"something-else\""),
    );
    assert_eq!(stale.status, 200);
}

#[test]
fn error_statuses() {
    let s = server();
    let (id, root) = create(&s, json!({"seed": 1}));

    let unknown = root.chars().rev().collect::<String>();
    assert_eq!(get(&s.url(&format!("/images/{unknown}"))).status, 404);
    assert_eq!(get(&s.url("/images/not-a-uri")).status, 404);

    let bad = post(&s.url("/sessions"), &json!({"seed": 1, "config": {"feather": -1.0}}));
    assert_eq!(bad.status, 422);
    assert_eq!(bad.json()["fields"][0]["field"], "feather");
    let bad = post(&s.url("/sessions"), &json!({"seed": 1, "colour": "red"}));
    assert_eq!(bad.status, 422);
    assert_eq!(bad.json()["fields"][0]["field"], "colour");
    let bad = post(
        &s.url("/sessions"),
        &json!({"seed": 1, "config": {"backend": "remote"}}),
    );
    assert_eq!(
        (bad.status, bad.json()["fields"][0]["field"].as_str()),
        (422, Some("backend_url"))
    );

    assert_eq!(get(&s.url("/sessions/s999999")).status, 404);
    assert_eq!(
        post(&s.url("/sessions/s999999/turns"), &json!({"dsl": "undo()"})).status,
        404
    );

    let empty = post(&s.url(&format!("/sessions/{id}/turns")), &json!({"instruction": "  "}));
    assert_eq!(empty.status, 422);
    assert_eq!(empty.json()["fields"][0]["field"], "instruction");

    let root_undo = post(&s.url(&format!("/sessions/{id}/undo")), &json!({}));
    assert_eq!(root_undo.status, 422);
    let nowhere = post(&s.url(&format!("/sessions/{id}/undo")), &json!({"target_uri": unknown}));
    assert_eq!(nowhere.status, 404);

    let route = get(&s.url("/nope"));
    assert_eq!((route.status, route.json()["error"].as_str()), (404, Some("not_found")));
}

#[test]
fn concurrent_turns_are_refused_while_busy() {
    let remote = slow_rejecting_editor(Duration::from_millis(1500));
    let s = server();
    let (id, root) = create(
        &s,
        json!({"seed": 5, "config": {"backend": "remote", "backend_url": remote, "retry_budget": 0}}),
    );
    let (_, dsl) = recolor(&seed_scene(5), 0);

    let url = s.url(&format!("/sessions/{id}/turns"));
    let body = json!({"dsl": dsl});
    let first = thread::spawn(move || post(&url, &body));
    thread::sleep(Duration::from_millis(400));

    let second = post(&s.url(&format!("/sessions/{id}/turns")), &json!({"dsl": "undo()"}));
    assert_eq!((second.status, second.json()["error"].as_str()), (409, Some("busy")));
    assert_eq!(get(&s.url(&format!("/sessions/{id}/metrics"))).status, 409);
    // reads that never take the writer stay available
    assert_eq!(get(&s.url(&format!("/sessions/{id}/graph"))).status, 200);

    let first = first.join().unwrap();
    assert_eq!(first.status, 200);
    let v = first.json();
    assert_eq!(v["status"], "rolled_back", "a 400 from the editor is fatal: {v}");
    assert_eq!(v["attempts"], 1);
    assert!(v["error"].as_str().unwrap().contains("400"), "{v}");
    assert_eq!(v["final_uri"], root.as_str());
    assert_eq!(get(&s.url(&format!("/sessions/{id}/metrics"))).status, 200);
}

#[test]
fn slow_turns_time_out_with_504() {
    let remote = slow_rejecting_editor(Duration::from_millis(1500));
    let s = server_with(EditSettings::default(), Duration::from_millis(300));
    let (id, _) = create(
        &s,
        json!({"seed": 5, "config": {"backend": "remote", "backend_url": remote, "retry_budget": 0}}),
    );
    let (_, dsl) = recolor(&seed_scene(5), 0);
    let t0 = Instant::now();
    let r = post(&s.url(&format!("/sessions/{id}/turns")), &json!({"dsl": dsl}));
    assert_eq!((r.status, r.json()["error"].as_str()), (504, Some("timeout")));
    assert!(t0.elapsed() < Duration::from_millis(1400));
}
