//! Line-delimited JSON logging to stderr.

use std::io::Write;
use std::sync::Mutex;

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde::Serialize;

#[derive(Serialize)]
struct Line<'a> {
    level: &'a str,
    target: &'a str,
    msg: String,
}

struct JsonLogger {
    level: LevelFilter,
    out: Mutex<Box<dyn Write + Send>>,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata<'_>) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record<'_>) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = Line {
            level: match record.level() {
                Level::Error => "error",
                Level::Warn => "warn",
                Level::Info => "info",
                Level::Debug => "debug",
                Level::Trace => "trace",
            },
            target: record.target(),
            msg: record.args().to_string(),
        };
        if let (Ok(json), Ok(mut out)) = (serde_json::to_string(&line), self.out.lock()) {
            let _ = writeln!(out, "{json}");
        }
    }

    fn flush(&self) {
        if let Ok(mut out) = self.out.lock() {
            let _ = out.flush();
        }
    }
}

/// Installs the logger. Only the first call in a process takes effect.
pub fn init(level: LevelFilter) {
    let logger = JsonLogger { level, out: Mutex::new(Box::new(std::io::stderr())) };
    if log::set_boxed_logger(Box::new(logger)).is_ok() {
        log::set_max_level(level);
    }
}
