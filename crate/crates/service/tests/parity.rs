mod common;

use std::fs;
use std::process::Command;

use common::{get, post, server};
use foldedit_core::imageio::{decode_png, png_base64};
use serde_json::{json, Value};

#[test]
fn batch_run_and_api_produce_identical_images() {
    let d = tempfile::tempdir().unwrap();
    let (bench, out) = (d.path().join("bench"), d.path().join("out"));
    let bin = env!("CARGO_BIN_EXE_foldedit");
    for args in [
        vec![
            "genbench",
            "--seeds",
            "20..24",
            "--turns",
            "4",
            "--out",
            bench.to_str().unwrap(),
        ],
        vec![
            "run",
            "--bench",
            bench.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    ] {
        let o = Command::new(bin).args(&args).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }

    let s = server();
    let mut compared = 0;
    for entry in fs::read_dir(&bench).unwrap() {
        let dir = entry.unwrap().path();
        let name = dir.file_name().unwrap().to_str().unwrap().to_string();
        let s0 = image::open(dir.join("images/s0.png")).unwrap().to_rgb8();
        let scene: Value = serde_json::from_str(&fs::read_to_string(dir.join("states/s0.json")).unwrap()).unwrap();
        let r = post(
            &s.url("/sessions"),
            &json!({"initial_image_png_base64": png_base64(&s0), "scene": scene}),
        );
        assert_eq!(r.status, 201, "{}", String::from_utf8_lossy(&r.body));
        let id = r.json()["session_id"].as_str().unwrap().to_string();

        for t in 1..=4 {
            let dsl = fs::read_to_string(dir.join(format!("dsl/t{t}.txt"))).unwrap();
            let text = fs::read_to_string(dir.join(format!("instructions/t{t}.txt"))).unwrap();
            let o = post(
                &s.url(&format!("/sessions/{id}/turns")),
                &json!({"instruction": text, "dsl": dsl}),
            )
            .json();
            assert_eq!(o["status"], "committed", "{name} t{t}: {o}");
            let via_api = get(&s.url(&format!("/images/{}", o["final_uri"].as_str().unwrap()))).body;
            let via_cli = fs::read(out.join(&name).join(format!("images/s{t}.png"))).unwrap();
            assert_eq!(
                decode_png(&via_api).unwrap(),
                decode_png(&via_cli).unwrap(),
                "{name} t{t} pixels"
            );
            assert!(via_api == via_cli, "{name} t{t}: PNG bytes differ");
            compared += 1;
        }
    }
    assert_eq!(compared, 16);
}
