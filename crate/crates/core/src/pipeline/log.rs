use chrono::{SecondsFormat, Utc};

use crate::config::Stage;

/// Destination for formatted job log bytes.
pub trait LogSink: Send {
    fn write(&mut self, bytes: &[u8]);
}

impl LogSink for Vec<u8> {
    fn write(&mut self, bytes: &[u8]) {
        self.extend_from_slice(bytes);
    }
}

/// Adapts a closure into a [`LogSink`].
pub struct FnSink<F>(pub F);

impl<F: FnMut(&[u8]) + Send> LogSink for FnSink<F> {
    fn write(&mut self, bytes: &[u8]) {
        (self.0)(bytes)
    }
}

/// Formats lines as `<RFC3339 UTC timestamp> [<stage>] <raw line>\n` and
/// tracks the byte offset so stage results can point into the log.
pub struct JobLog<'a> {
    sink: &'a mut dyn LogSink,
    offset: u64,
}

impl<'a> JobLog<'a> {
    pub fn new(sink: &'a mut dyn LogSink) -> Self {
        Self { sink, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn line(&mut self, stage: Stage, raw: &[u8]) {
        let bytes = format_line(&timestamp_now(), stage, raw);
        self.offset += bytes.len() as u64;
        self.sink.write(&bytes);
    }

    pub fn text(&mut self, stage: Stage, text: &str) {
        self.line(stage, text.as_bytes())
    }
}

pub fn timestamp_now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
}

pub fn format_line(timestamp: &str, stage: Stage, raw: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(timestamp.len() + raw.len() + 16);
    out.extend_from_slice(timestamp.as_bytes());
    out.extend_from_slice(b" [");
    out.extend_from_slice(stage.as_str().as_bytes());
    out.extend_from_slice(b"] ");
    out.extend_from_slice(raw);
    out.push(b'\n');
    out
}

/// Splits a log line into `(timestamp, stage, raw)`.
pub fn parse_line(line: &[u8]) -> Option<(&str, &str, &[u8])> {
    let sp = line.iter().position(|b| *b == b' ')?;
    let ts = std::str::from_utf8(&line[..sp]).ok()?;
    let rest = &line[sp + 1..];
    if rest.first() != Some(&b'[') {
        return None;
    }
    let close = rest.iter().position(|b| *b == b']')?;
    let stage = std::str::from_utf8(&rest[1..close]).ok()?;
    let raw = rest.get(close + 2..).unwrap_or(&[]);
    Some((ts, stage, raw))
}
