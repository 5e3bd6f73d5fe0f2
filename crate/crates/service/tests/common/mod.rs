//! Shared fixtures for the service integration tests.
#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use foldedit_core::dsl::print_command;
use foldedit_core::engine::{synth_initial_state, SessionSpec};
use foldedit_core::imageio::{png_base64, png_from_base64};
use foldedit_core::scene::{apply_transition, render, AttrValue, Color, EditCommand, SceneState};
use foldedit_service::api::{self, AppState, ServerHandle};
use foldedit_service::config::EditSettings;
use foldedit_service::registry::Registry;
use serde_json::{json, Value};

pub struct Reply {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn reply(mut r: ureq::http::Response<ureq::Body>) -> Reply {
    let headers = r
        .headers()
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_str().unwrap_or_default().to_string()))
        .collect();
    let status = r.status().as_u16();
    let body = r
        .body_mut()
        .with_config()
        .limit(u64::MAX)
        .read_to_vec()
        .unwrap_or_default();
    Reply { status, headers, body }
}

pub fn get(url: &str) -> Reply {
    reply(agent().get(url).call().expect("transport"))
}

pub fn get_with(url: &str, header: (&str, &str)) -> Reply {
    reply(agent().get(url).header(header.0, header.1).call().expect("transport"))
}

pub fn post(url: &str, body: &Value) -> Reply {
    reply(agent().post(url).send_json(body).expect("transport"))
}

pub struct Server {
    pub handle: ServerHandle,
    pub dir: tempfile::TempDir,
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.handle.url())
    }
}

pub fn server_with(settings: EditSettings, turn_timeout: Duration) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let registry = Registry::open(dir.path().join("store"), settings).unwrap();
    let handle = api::spawn(
        "127.0.0.1:0",
        AppState {
            registry: Arc::new(registry),
            turn_timeout,
        },
    )
    .unwrap();
    Server { handle, dir }
}

pub fn server() -> Server {
    server_with(EditSettings::default(), api::DEFAULT_TURN_TIMEOUT)
}

/// A remote editor that answers every request with 400 after `delay`.
pub fn slow_rejecting_editor(delay: Duration) -> String {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/edit", server.server_addr().to_ip().unwrap());
    thread::spawn(move || {
        for rq in server.incoming_requests() {
            thread::spawn(move || {
                thread::sleep(delay);
                let _ = rq.respond(tiny_http::Response::from_string("{}").with_status_code(400));
            });
        }
    });
    url
}

/// A remote editor that performs the first `n` edits correctly against
/// `scene` (rendering the post-state and cutting out the requested patch)
/// and then stops answering.
pub fn editor_then_hang(scene: SceneState, n: usize) -> (String, Arc<AtomicUsize>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/edit", server.server_addr().to_ip().unwrap());
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    thread::spawn(move || {
        let mut scene = scene;
        for mut rq in server.incoming_requests() {
            let i = counter.fetch_add(1, Ordering::SeqCst);
            let mut body = String::new();
            rq.as_reader().read_to_string(&mut body).unwrap();
            if i >= n {
                thread::spawn(move || {
                    thread::sleep(Duration::from_secs(600));
                    drop(rq);
                });
                continue;
            }
            let req: Value = serde_json::from_str(&body).unwrap();
            let cmd: EditCommand = serde_json::from_value(req["command"].clone()).unwrap();
            let patch = png_from_base64(req["patch_png_base64"].as_str().unwrap()).unwrap();
            let (x0, y0) = (
                req["origin"]["x"].as_u64().unwrap() as u32,
                req["origin"]["y"].as_u64().unwrap() as u32,
            );
            let post = apply_transition(&scene, std::slice::from_ref(&cmd)).unwrap();
            let full = render(&post, post.canvas_w, post.canvas_h).unwrap();
            let out = image::imageops::crop_imm(&full, x0, y0, patch.width(), patch.height()).to_image();
            scene = post;
            let text = json!({"patch_png_base64": png_base64(&out), "diagnostics": "mock"}).to_string();
            let _ = rq.respond(tiny_http::Response::from_string(text));
        }
    });
    (url, calls)
}

/// The scene the service synthesizes for `{"seed": seed}`.
pub fn seed_scene(seed: u64) -> SceneState {
    synth_initial_state(
        seed,
        &SessionSpec {
            seed,
            ..SessionSpec::default()
        },
    )
    .unwrap()
}

/// Recolours object `i` of `scene` to a colour it does not have.
pub fn recolor(scene: &SceneState, i: usize) -> (EditCommand, String) {
    let o = &scene.objects[i % scene.objects.len()];
    let c = *Color::ALL.iter().find(|c| **c != o.color).unwrap();
    let cmd = EditCommand::adjust(o.id.clone(), AttrValue::Color(c));
    let dsl = print_command(&cmd);
    (cmd, dsl)
}
