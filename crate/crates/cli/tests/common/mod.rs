//! Helpers for driving the `regverify` binary and a running server.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use regverify_core::eval::ErrorCategory;
use regverify_core::explain::ConformalCalibration;
use regverify_core::model::{Checkpoint, CheckpointMeta, ModelConfig, VerifierModel};
use regverify_core::pose::RegistrationLabel;
use regverify_core::review::{BankCase, CaseBank, CaseBankMeta};
use serde_json::Value;

pub const BIN: &str = env!("CARGO_BIN_EXE_regverify");

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .expect("spawn regverify")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().unwrap_or_else(|| {
        panic!(
            "no output; stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        )
    });
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"))
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small untrained checkpoint plus a calibration file next to it.
pub fn untrained_checkpoint(dir: &Path, input_size: usize) -> std::path::PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let cfg = ModelConfig {
        input_size,
        stem_out_channels: 4,
        block_channel_sequence: vec![8],
        attention_heads: 2,
        attention_dim: None,
        dropout_rate: 0.3,
        fc_hidden: None,
    };
    let ckpt = Checkpoint {
        model: VerifierModel::new(cfg, 1).unwrap(),
        meta: CheckpointMeta {
            held_out_specimen: Some("specimen-00".into()),
            ..Default::default()
        },
    };
    let path = dir.join("model.ckpt");
    ckpt.save(&path).unwrap();
    let scores: Vec<f64> = (1..=20).map(|i| i as f64 / 40.0).collect();
    ConformalCalibration::from_scores(scores, 0.1)
        .unwrap()
        .save(&dir.join("calibration.json"))
        .unwrap();
    path
}

/// A case bank with `per` cases of each category in `cats`, written where
/// `regverify serve` will pick it up.
pub fn seed_bank(state: &Path, cats: &[ErrorCategory], per: usize) {
    let mut cases = Vec::new();
    for &cat in cats {
        let (ai, truth) = match cat {
            ErrorCategory::Tp => (RegistrationLabel::Accept, RegistrationLabel::Accept),
            ErrorCategory::Tn => (RegistrationLabel::Reject, RegistrationLabel::Reject),
            ErrorCategory::Fp => (RegistrationLabel::Accept, RegistrationLabel::Reject),
            ErrorCategory::Fn => (RegistrationLabel::Reject, RegistrationLabel::Accept),
        };
        for _ in 0..per {
            let i = cases.len();
            cases.push(BankCase {
                case_id: format!("case-{i:03}"),
                source_uid: format!("specimen-00/proj-000/s-{i:03}"),
                ground_truth: truth,
                category: cat,
                ai_prediction: ai,
                ai_probability: if ai.is_accept() { 0.9 } else { 0.1 },
                prediction_set: vec![ai],
                set_certain: true,
                set_fallback: false,
            });
        }
    }
    CaseBank::in_memory(CaseBankMeta::default(), cases)
        .save(&state.join("bank"))
        .unwrap();
}

/// A `regverify serve` child process, killed on drop.
pub struct Server {
    child: Child,
    pub addr: String,
}

impl Server {
    pub fn start(args: &[&str]) -> Server {
        let mut child = Command::new(BIN)
            .arg("serve")
            .args(args)
            .args(["--port", "0", "--log-level", "warn"])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn server");
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().unwrap())
            .read_line(&mut line)
            .unwrap();
        let v: Value = serde_json::from_str(&line)
            .unwrap_or_else(|e| panic!("server did not start ({e}): {line:?}"));
        let url = v["listening"].as_str().unwrap();
        Server {
            child,
            addr: url.trim_start_matches("http://").to_string(),
        }
    }

    /// Minimal HTTP/1.1 exchange; returns status and body.
    pub fn request(&self, method: &str, path: &str, body: Option<&Value>) -> (u16, Vec<u8>) {
        let mut stream = TcpStream::connect(&self.addr).unwrap();
        stream
            .set_read_timeout(Some(Duration::from_secs(30)))
            .unwrap();
        let payload = body.map(|b| b.to_string()).unwrap_or_default();
        let req = format!(
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
            self.addr,
            payload.len()
        );
        stream.write_all(req.as_bytes()).unwrap();
        let mut raw = Vec::new();
        stream.read_to_end(&mut raw).unwrap();
        let split = raw
            .windows(4)
            .position(|w| w == b"\r\n\r\n")
            .expect("header terminator");
        let head = String::from_utf8_lossy(&raw[..split]).to_string();
        let status: u16 = head.split_whitespace().nth(1).unwrap().parse().unwrap();
        let mut body = raw[split + 4..].to_vec();
        if head
            .to_ascii_lowercase()
            .contains("transfer-encoding: chunked")
        {
            body = dechunk(&body);
        }
        (status, body)
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let (s, b) = self.request("GET", path, None);
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let (s, b) = self.request("POST", path, Some(body));
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn dechunk(mut body: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let end = body.windows(2).position(|w| w == b"\r\n").unwrap();
        let size =
            usize::from_str_radix(std::str::from_utf8(&body[..end]).unwrap().trim(), 16).unwrap();
        if size == 0 {
            return out;
        }
        out.extend_from_slice(&body[end + 2..end + 2 + size]);
        body = &body[end + 2 + size + 2..];
    }
}

pub fn survey(cond: &str) -> Value {
    let tlx = serde_json::json!({
        "mental_demand": 50, "physical_demand": 10, "temporal_demand": 40,
        "performance": 30, "effort": 45, "frustration": 20
    });
    if cond == "HUMAN_ONLY" {
        serde_json::json!({ "condition": cond, "tlx": tlx })
    } else {
        serde_json::json!({ "condition": cond, "tlx": tlx, "ai": { "usefulness": 5, "trust": 4, "understanding": 6 } })
    }
}

/// Completes a session answering with the AI's prediction (ACCEPT when no
/// AI is shown); returns every case payload.
pub fn run_session(server: &Server, id: &str) -> Vec<Value> {
    let mut seen = Vec::new();
    loop {
        let (status, next) = server.get(&format!("/v1/sessions/{id}/next"));
        assert_eq!(status, 200, "{next}");
        match next["status"].as_str().unwrap() {
            "case" => {
                let case = next["case_id"].as_str().unwrap();
                let (status, body) = if next["human_input_enabled"] == true {
                    let decision = next["ai_prediction"].as_str().unwrap_or("ACCEPT");
                    server.post(
                        &format!("/v1/sessions/{id}/decisions"),
                        &serde_json::json!({ "case_id": case, "decision": decision }),
                    )
                } else {
                    server.post(
                        &format!("/v1/sessions/{id}/acknowledge"),
                        &serde_json::json!({ "case_id": case }),
                    )
                };
                assert_eq!(status, 200, "{body}");
                seen.push(next);
            }
            "condition_complete" => {
                let cond = next["condition"].as_str().unwrap();
                let (status, body) =
                    server.post(&format!("/v1/sessions/{id}/surveys"), &survey(cond));
                assert_eq!(status, 200, "{body}");
            }
            "session_complete" => return seen,
            other => panic!("unexpected status {other}"),
        }
    }
}
