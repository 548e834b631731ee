//! Example worker for `modecfg tune`.
//!
//! The instance id is read as a target value; the cost of a configuration is
//! the sum over its parameters of `(ln value - target)^2`. Non-positive values
//! fail. Instance ids that do not parse as numbers use target 0.

use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use clap::Parser;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Parser)]
#[command(about = "Demonstration worker speaking the modecfg line protocol")]
struct Args {
    /// Buffer this many requests and answer them in reverse order.
    #[arg(long, hide = true, default_value_t = 1)]
    reverse: usize,
    /// Exit without answering when this instance is first requested.
    #[arg(long, hide = true)]
    crash_on: Option<String>,
    /// Marker file recording that the crash already happened.
    #[arg(long, hide = true)]
    crash_marker: Option<PathBuf>,
}

#[derive(Deserialize)]
struct Request {
    id: u64,
    instance: String,
    config: std::collections::BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct Response {
    id: u64,
    cost: Value,
}

fn cost(req: &Request) -> Value {
    let target = req.instance.parse::<f64>().unwrap_or(0.0);
    let mut total = 0.0;
    for &v in req.config.values() {
        if v <= 0.0 {
            return Value::from("fail");
        }
        total += (v.ln() - target).powi(2);
    }
    serde_json::Number::from_f64(total).map_or_else(|| Value::from("fail"), Value::Number)
}

fn main() -> io::Result<()> {
    let args = Args::parse();
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut lines = stdin.lock().lines();

    match lines.next() {
        Some(Ok(line)) if serde_json::from_str::<Value>(&line).ok() == Some(serde_json::json!({"hello": 1})) => {
            writeln!(out, "{{\"hello\":1}}")?;
            out.flush()?;
        }
        _ => std::process::exit(2),
    }

    let mut buffer: Vec<Response> = Vec::new();
    for line in lines {
        let line = line?;
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("demo worker: bad request: {e}");
                std::process::exit(2);
            }
        };
        if args.crash_on.as_deref() == Some(req.instance.as_str()) {
            let marker = args.crash_marker.as_ref();
            if marker.is_none_or(|m| !m.exists()) {
                if let Some(m) = marker {
                    std::fs::write(m, b"crashed\n")?;
                }
                std::process::exit(3);
            }
        }
        buffer.push(Response {
            id: req.id,
            cost: cost(&req),
        });
        if buffer.len() >= args.reverse {
            for resp in buffer.drain(..).rev() {
                writeln!(out, "{}", serde_json::to_string(&resp)?)?;
            }
            out.flush()?;
        }
    }
    for resp in buffer.drain(..).rev() {
        writeln!(out, "{}", serde_json::to_string(&resp)?)?;
    }
    out.flush()
}
