//! Shared reader for the append-only JSONL files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;

use super::StoreError;

/// Reads every complete record. A final line without its newline is a torn
/// write from a crash and is cut off; a bad line anywhere else is an error.
pub fn recover<T: DeserializeOwned>(path: &Path, what: &str) -> Result<Vec<T>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if buf.last() != Some(&b'\n') {
            tracing::warn!(path = %path.display(), "dropping torn {what} tail");
            break;
        }
        let line = &buf[..buf.len() - 1];
        if !line.iter().all(u8::is_ascii_whitespace) {
            let record = serde_json::from_slice(line)
                .map_err(|e| StoreError::Malformed(format!("{what} line {line_no}: {e}")))?;
            records.push(record);
        }
        good_len += n as u64;
    }
    if fs::metadata(path)?.len() != good_len {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(good_len)?;
        f.sync_all()?;
    }
    Ok(records)
}
