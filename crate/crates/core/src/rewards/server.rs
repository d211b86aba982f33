//! A small conformance server for the external reward protocol. It scores a
//! sample by its first coordinate and can be told to misbehave.

use std::io::{BufRead, Write};
use std::str::FromStr;
use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServerMode {
    /// `reward = sample[0]`, id echoed.
    Echo,
    /// Reward sent as a string.
    NonNumeric,
    /// Correct reward under a different id.
    BadId,
    /// Echo after sleeping this many milliseconds.
    Slow(u64),
    /// A line that is not JSON.
    Garbage,
}

impl FromStr for ServerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "echo" => Ok(ServerMode::Echo),
            "non-numeric" => Ok(ServerMode::NonNumeric),
            "bad-id" => Ok(ServerMode::BadId),
            "garbage" => Ok(ServerMode::Garbage),
            _ => s
                .strip_prefix("slow:")
                .and_then(|ms| ms.parse().ok())
                .map(ServerMode::Slow)
                .ok_or_else(|| Error::UnknownName {
                    what: "server mode",
                    name: s.to_string(),
                    known: "echo, non-numeric, bad-id, slow:<ms>, garbage".into(),
                }),
        }
    }
}

/// The response line for one request line.
pub fn respond(mode: ServerMode, request: &str) -> String {
    let parsed: Option<(f64, String)> = serde_json::from_str::<Value>(request).ok().and_then(|v| {
        let id = v.get("request_id")?.as_str()?.to_string();
        let first = v.get("sample")?.as_array()?.first().and_then(Value::as_f64).unwrap_or(0.0);
        Some((first, id))
    });
    let Some((reward, id)) = parsed else {
        return json!({ "error": "bad request" }).to_string();
    };
    match mode {
        ServerMode::Echo => json!({ "reward": reward, "request_id": id }).to_string(),
        ServerMode::Slow(ms) => {
            std::thread::sleep(Duration::from_millis(ms));
            json!({ "reward": reward, "request_id": id }).to_string()
        }
        ServerMode::NonNumeric => json!({ "reward": "high", "request_id": id }).to_string(),
        ServerMode::BadId => json!({ "reward": reward, "request_id": format!("{id}-other") }).to_string(),
        ServerMode::Garbage => "<<not json>>".to_string(),
    }
}

/// Serves line-delimited requests from stdin until it closes.
pub fn serve_stdio(mode: ServerMode) -> std::io::Result<()> {
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(out, "{}", respond(mode, &line))?;
        out.flush()?;
    }
    Ok(())
}

/// Serves HTTP POST requests on `addr`; `ready` receives the bound address.
pub fn serve_http(mode: ServerMode, addr: &str, ready: impl FnOnce(String)) -> Result<()> {
    let server = tiny_http::Server::http(addr).map_err(|e| Error::Invalid(format!("cannot bind {addr}: {e}")))?;
    let bound = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Invalid("server is not bound to an IP address".into()))?;
    ready(format!("http://{bound}"));
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    for mut req in server.incoming_requests() {
        let mut body = String::new();
        let reply = match req.as_reader().read_to_string(&mut body) {
            Ok(_) => respond(mode, &body),
            Err(_) => json!({ "error": "unreadable body" }).to_string(),
        };
        let _ = req.respond(tiny_http::Response::from_string(reply).with_header(header.clone()));
    }
    Ok(())
}
