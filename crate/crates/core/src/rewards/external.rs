//! Client side of the JSON reward protocol.
//!
//! Each request is one JSON object
//! `{"sample": [..], "condition": k | null, "request_id": "..."}` and the
//! service answers with `{"reward": r, "request_id": "..."}` echoing the id.
//! Over a subprocess both travel as single lines on stdin/stdout; over HTTP
//! the request is POSTed to the endpoint URL.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use log::debug;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::RewardModel;
use crate::error::{ExternalError, Result};
use crate::schedules::Cond;

pub const DEFAULT_TIMEOUT_MS: u64 = 5_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transport", rename_all = "lowercase", deny_unknown_fields)]
pub enum Endpoint {
    /// A long-lived child process speaking line-delimited JSON.
    Subprocess { command: Vec<String> },
    Http { url: String },
}

enum Connection {
    Process {
        child: Child,
        stdin: ChildStdin,
        lines: Receiver<Option<String>>,
    },
    Http(reqwest::blocking::Client),
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Connection::Process { child, .. } = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn transport(message: impl Into<String>) -> ExternalError {
    ExternalError::Transport {
        message: message.into(),
    }
}

impl Connection {
    fn open(endpoint: &Endpoint, timeout: Duration) -> Result<Self, ExternalError> {
        match endpoint {
            Endpoint::Subprocess { command } => {
                let (program, args) = command.split_first().ok_or_else(|| transport("empty subprocess command"))?;
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| transport(format!("cannot spawn `{program}`: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let (tx, rx) = mpsc::channel();
                std::thread::spawn(move || {
                    for line in BufReader::new(stdout).lines() {
                        match line {
                            Ok(l) => {
                                if tx.send(Some(l)).is_err() {
                                    return;
                                }
                            }
                            Err(_) => break,
                        }
                    }
                    let _ = tx.send(None);
                });
                Ok(Connection::Process {
                    child,
                    stdin,
                    lines: rx,
                })
            }
            Endpoint::Http { .. } => reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .map(Connection::Http)
                .map_err(|e| transport(e.to_string())),
        }
    }

    fn exchange(&mut self, endpoint: &Endpoint, body: &str, timeout: Duration) -> Result<String, ExternalError> {
        let timeout_ms = timeout.as_millis() as u64;
        match (self, endpoint) {
            (Connection::Process { stdin, lines, .. }, _) => {
                writeln!(stdin, "{body}")
                    .and_then(|_| stdin.flush())
                    .map_err(|e| transport(format!("write to subprocess failed: {e}")))?;
                match lines.recv_timeout(timeout) {
                    Ok(Some(line)) => Ok(line),
                    Ok(None) | Err(RecvTimeoutError::Disconnected) => Err(transport("subprocess closed its output")),
                    Err(RecvTimeoutError::Timeout) => Err(ExternalError::Timeout { timeout_ms }),
                }
            }
            (Connection::Http(client), Endpoint::Http { url }) => {
                let resp = client
                    .post(url)
                    .header("content-type", "application/json")
                    .body(body.to_string())
                    .send()
                    .map_err(|e| {
                        if e.is_timeout() {
                            ExternalError::Timeout { timeout_ms }
                        } else {
                            transport(e.to_string())
                        }
                    })?;
                let status = resp.status();
                let text = resp.text().map_err(|e| {
                    if e.is_timeout() {
                        ExternalError::Timeout { timeout_ms }
                    } else {
                        transport(e.to_string())
                    }
                })?;
                if !status.is_success() {
                    return Err(transport(format!("HTTP {status}: {text}")));
                }
                Ok(text)
            }
            (Connection::Http(_), Endpoint::Subprocess { .. }) => Err(transport("connection does not match endpoint")),
        }
    }
}

/// Validates one response against the id that was sent.
pub fn parse_response(raw: &str, sent_id: &str) -> Result<f64, ExternalError> {
    let malformed = |reason: &str| ExternalError::Malformed {
        reason: reason.to_string(),
        raw: raw.to_string(),
    };
    let value: Value = serde_json::from_str(raw).map_err(|e| malformed(&format!("invalid JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| malformed("response is not an object"))?;
    let id = obj
        .get("request_id")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string `request_id`"))?;
    let reward = obj
        .get("reward")
        .and_then(Value::as_f64)
        .filter(|r| r.is_finite())
        .ok_or_else(|| malformed("`reward` is not a finite number"))?;
    if id != sent_id {
        return Err(ExternalError::IdMismatch {
            sent: sent_id.to_string(),
            received: id.to_string(),
            raw: raw.to_string(),
        });
    }
    Ok(reward)
}

/// Reward served by an external process or HTTP service. One request is in
/// flight at a time; parallel callers should hold separate instances.
pub struct ExternalReward {
    endpoint: Endpoint,
    timeout: Duration,
    conn: Mutex<Option<Connection>>,
    counter: AtomicU64,
}

impl ExternalReward {
    pub fn new(endpoint: Endpoint, timeout_ms: u64) -> Self {
        ExternalReward {
            endpoint,
            timeout: Duration::from_millis(timeout_ms),
            conn: Mutex::new(None),
            counter: AtomicU64::new(0),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// One request/response round trip. Transport failures are retried once
    /// on a fresh connection; timeouts and protocol violations are not.
    pub fn call(&self, sample: &[f64], condition: Cond) -> Result<f64, ExternalError> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let id = format!("{}-{n}", std::process::id());
        let body = json!({ "sample": sample, "condition": condition, "request_id": id }).to_string();
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut last = None;
        for attempt in 0..2 {
            if guard.is_none() {
                match Connection::open(&self.endpoint, self.timeout) {
                    Ok(c) => *guard = Some(c),
                    Err(e) => {
                        last = Some(e);
                        continue;
                    }
                }
            }
            let conn = guard.as_mut().expect("connection just opened");
            match conn.exchange(&self.endpoint, &body, self.timeout) {
                Ok(raw) => return parse_response(&raw, &id),
                Err(e @ ExternalError::Timeout { .. }) => {
                    // A late answer would be read as the reply to the next request.
                    *guard = None;
                    return Err(e);
                }
                Err(e) => {
                    debug!("external reward attempt {attempt} failed: {e}");
                    *guard = None;
                    last = Some(e);
                }
            }
        }
        Err(last.expect("two failed attempts"))
    }
}

impl RewardModel for ExternalReward {
    fn kind(&self) -> &'static str {
        "external"
    }

    fn score(&self, x: &[f64], c: Cond) -> Result<f64> {
        Ok(self.call(x, c)?)
    }
}

/// Outcome of a run of sequential requests against an echo server.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SoakReport {
    pub requests: usize,
    pub ok: usize,
    pub id_mismatches: usize,
    /// Replies whose reward was not the first coordinate sent.
    pub wrong_values: usize,
    pub other_errors: Vec<ExternalError>,
}

impl SoakReport {
    pub fn clean(&self) -> bool {
        self.ok == self.requests
    }
}

/// Sends `requests` distinct samples one after another to a server that
/// echoes the first coordinate as the reward, and tallies the replies.
pub fn soak(reward: &ExternalReward, requests: usize, dim: usize) -> SoakReport {
    let mut r = SoakReport {
        requests,
        ..SoakReport::default()
    };
    for i in 0..requests {
        let mut sample = vec![0.5; dim.max(1)];
        sample[0] = i as f64 * 0.25 - 7.0;
        match reward.call(&sample, Some(i % 3)) {
            Ok(v) if v == sample[0] => r.ok += 1,
            Ok(_) => r.wrong_values += 1,
            Err(ExternalError::IdMismatch { .. }) => r.id_mismatches += 1,
            Err(e) => r.other_errors.push(e),
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_validation() {
        assert_eq!(parse_response(r#"{"reward": 0.5, "request_id": "a"}"#, "a"), Ok(0.5));
        assert!(matches!(
            parse_response(r#"{"reward": "high", "request_id": "a"}"#, "a"),
            Err(ExternalError::Malformed { .. })
        ));
        assert!(matches!(parse_response("nope", "a"), Err(ExternalError::Malformed { .. })));
        match parse_response(r#"{"reward": 1, "request_id": "b"}"#, "a") {
            Err(ExternalError::IdMismatch { sent, received, raw }) => {
                assert_eq!((sent.as_str(), received.as_str()), ("a", "b"));
                assert!(raw.contains("\"b\""));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_program_is_a_transport_error() {
        let r = ExternalReward::new(
            Endpoint::Subprocess {
                command: vec!["/nonexistent/reward-server".into()],
            },
            100,
        );
        assert!(matches!(r.call(&[0.0], None), Err(ExternalError::Transport { .. })));
    }

    #[test]
    fn endpoint_json_form() {
        let e: Endpoint = serde_json::from_str(r#"{"transport": "http", "url": "http://127.0.0.1:1"}"#).unwrap();
        assert_eq!(
            e,
            Endpoint::Http {
                url: "http://127.0.0.1:1".into()
            }
        );
    }
}
