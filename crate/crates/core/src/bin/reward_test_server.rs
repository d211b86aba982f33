//! Conformance server for the external reward protocol.
//!
//! ```text
//! reward_test_server [--mode echo|non-numeric|bad-id|slow:<ms>|garbage] [--http <addr>]
//! ```
//!
//! Without `--http` it speaks line-delimited JSON on stdin/stdout. With it,
//! the first stdout line is the base URL it listens on.

use std::io::Write;
use std::process::ExitCode;

use sharpening::rewards::server::{serve_http, serve_stdio, ServerMode};

fn main() -> ExitCode {
    let mut mode = ServerMode::Echo;
    let mut http: Option<String> = None;
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        let value = args.next();
        match (arg.as_str(), value) {
            ("--mode", Some(v)) => match v.parse() {
                Ok(m) => mode = m,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            },
            ("--http", Some(v)) => http = Some(v),
            _ => {
                eprintln!("usage: reward_test_server [--mode MODE] [--http ADDR]");
                return ExitCode::from(2);
            }
        }
    }
    let result = match http {
        Some(addr) => serve_http(mode, &addr, |url| {
            println!("{url}");
            let _ = std::io::stdout().flush();
        })
        .map_err(|e| e.to_string()),
        None => serve_stdio(mode).map_err(|e| e.to_string()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
