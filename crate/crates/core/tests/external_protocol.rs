use std::sync::mpsc;

use sharpening::error::ExternalError;
use sharpening::rewards::server::{serve_http, ServerMode};
use sharpening::rewards::{soak, Endpoint, ExternalReward};

const SERVER: &str = env!("CARGO_BIN_EXE_reward_test_server");

fn subprocess(mode: &str, timeout_ms: u64) -> ExternalReward {
    let command = vec![SERVER.to_string(), "--mode".into(), mode.into()];
    ExternalReward::new(Endpoint::Subprocess { command }, timeout_ms)
}

fn http(mode: ServerMode, timeout_ms: u64) -> ExternalReward {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        serve_http(mode, "127.0.0.1:0", |url| tx.send(url).unwrap()).unwrap();
    });
    let url = rx.recv().unwrap();
    ExternalReward::new(Endpoint::Http { url }, timeout_ms)
}

#[test]
fn subprocess_soak_is_clean() {
    let r = soak(&subprocess("echo", 5000), 1000, 2);
    assert_eq!((r.ok, r.id_mismatches, r.wrong_values), (1000, 0, 0), "{:?}", r.other_errors.first());
}

#[test]
fn http_soak_is_clean() {
    let r = soak(&http(ServerMode::Echo, 5000), 1000, 3);
    assert_eq!((r.ok, r.id_mismatches, r.wrong_values), (1000, 0, 0), "{:?}", r.other_errors.first());
}

#[test]
fn slow_server_times_out() {
    let r = subprocess("slow:500", 50);
    match r.call(&[1.0, 0.0], None) {
        Err(ExternalError::Timeout { timeout_ms }) => assert_eq!(timeout_ms, 50),
        other => panic!("{other:?}"),
    }
    let h = http(ServerMode::Slow(500), 50);
    assert!(matches!(h.call(&[1.0], None), Err(ExternalError::Timeout { .. })));
}

#[test]
fn malformed_replies_are_structured_errors() {
    for mode in ["non-numeric", "garbage"] {
        match subprocess(mode, 2000).call(&[1.0], None) {
            Err(ExternalError::Malformed { raw, .. }) => assert!(!raw.is_empty()),
            other => panic!("{mode}: {other:?}"),
        }
    }
    assert!(matches!(http(ServerMode::Garbage, 2000).call(&[1.0], None), Err(ExternalError::Malformed { .. })));
}

#[test]
fn foreign_ids_are_reported() {
    let r = soak(&subprocess("bad-id", 2000), 20, 2);
    assert_eq!((r.ok, r.id_mismatches), (0, 20));
    match http(ServerMode::BadId, 2000).call(&[1.0], None) {
        Err(ExternalError::IdMismatch { sent, received, .. }) => assert_eq!(received, format!("{sent}-other")),
        other => panic!("{other:?}"),
    }
}
