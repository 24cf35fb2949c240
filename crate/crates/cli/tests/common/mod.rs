#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const CLOCK: &str = "1700000000";

pub const COMMENTS: &str = r#"{"target_id":"alice","comment_id":"a1","body":"I worry about things. I fear for the worst. I love large parties."}
{"target_id":"alice","comment_id":"a2","body":"I have a vivid imagination. The bus was late again."}
{"target_id":"bob","comment_id":"b1","body":"I am afraid of many things. I make friends easily."}
{"target_id":"bob","comment_id":"b2","body":"I trust others. I love to daydream."}
{"target_id":"carol","comment_id":"c1","body":"I talk to a lot of different people at parties. The weather is nice today."}
{"target_id":"carol","comment_id":"c2","body":"I complete tasks successfully. I make friends easily!"}
"#;

pub fn simpa(project: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simpa"))
        .arg("--project")
        .arg(project)
        .args(args)
        .env("SIMPA_CLOCK", CLOCK)
        .output()
        .expect("spawn simpa")
}

/// Runs the binary and returns stdout, failing the test on a non-zero exit.
pub fn simpa_ok(project: &Path, args: &[&str]) -> String {
    let out = simpa(project, args);
    assert!(
        out.status.success(),
        "simpa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// A project with the fixture corpus ingested and one detection run.
pub fn detected_project(dir: &Path) -> String {
    simpa_ok(dir, &["init", "--name", "fixture"]);
    let comments = dir.join("comments.jsonl");
    std::fs::write(&comments, COMMENTS).unwrap();
    simpa_ok(dir, &["corpus", "ingest", comments.to_str().unwrap()]);
    let run: serde_json::Value = serde_json::from_str(&simpa_ok(dir, &["detect"])).unwrap();
    run["run_id"].as_str().unwrap().to_string()
}
