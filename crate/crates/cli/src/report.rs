//! Run reports: `key=value` lines on stdout plus JSON files in the output
//! directory, and a manifest describing how to replay the run.

use std::path::{Path, PathBuf};

use duet_core::transport::{msg, Census};
use duet_core::Result;
use serde_json::{json, Map, Value};

pub struct Report {
    pub command: String,
    fields: Map<String, Value>,
    out: Option<PathBuf>,
    /// Prepended to printed keys when two parties share one stdout.
    prefix: String,
}

impl Report {
    pub fn new(command: &str, out: Option<&Path>) -> Report {
        Report::with_prefix(command, out, "")
    }

    pub fn with_prefix(command: &str, out: Option<&Path>, prefix: &str) -> Report {
        Report {
            command: command.to_string(),
            fields: Map::new(),
            out: out.map(Path::to_path_buf),
            prefix: prefix.to_string(),
        }
    }

    /// Record a field and print it as `key=value`.
    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        let v = value.into();
        match &v {
            Value::String(s) => println!("{}{key}={s}", self.prefix),
            other => println!("{}{key}={other}", self.prefix),
        }
        self.fields.insert(key.to_string(), v);
    }

    /// Record a field without printing it (tables, per-step series).
    pub fn set_quiet(&mut self, key: &str, value: impl Into<Value>) {
        self.fields.insert(key.to_string(), value.into());
    }

    /// Totals, rounds and ciphertext frames of a census, with a per-type breakdown in the file.
    pub fn census(&mut self, prefix: &str, c: &Census) {
        self.set(&format!("{prefix}_bytes"), c.total_bytes());
        self.set(&format!("{prefix}_rounds"), c.rounds);
        self.set(&format!("{prefix}_ciphertext_frames"), ciphertext_frames(c));
        self.set_quiet(&format!("{prefix}_by_type"), census_json(c));
    }

    /// Write `report.json` and `manifest.json` if an output directory was given.
    pub fn finish(self, manifest: Value) -> Result<()> {
        if let Some(dir) = &self.out {
            std::fs::create_dir_all(dir)?;
            let report = json!({ "command": self.command, "fields": Value::Object(self.fields) });
            std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report).expect("json"))?;
            std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest).expect("json"))?;
            println!("{}report={}", self.prefix, dir.join("report.json").display());
        }
        Ok(())
    }
}

pub fn ciphertext_frames(c: &Census) -> u64 {
    c.by_type
        .iter()
        .filter(|(&k, _)| msg::is_ciphertext(k))
        .map(|(_, v)| v.frames_sent + v.frames_received)
        .sum()
}

pub fn census_json(c: &Census) -> Value {
    let mut m = Map::new();
    for (k, v) in &c.by_type {
        m.insert(
            msg::name(*k).to_string(),
            json!({
                "frames_sent": v.frames_sent,
                "bytes_sent": v.bytes_sent,
                "frames_received": v.frames_received,
                "bytes_received": v.bytes_received,
            }),
        );
    }
    Value::Object(m)
}

/// Render rows as an aligned text table.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            width[i] = width[i].max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:>w$}", w = width[i]))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(out.len() - 1));
    for r in rows {
        out.push('\n');
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_aligns() {
        let t = table(&["op", "ms"], &[vec!["encrypt".into(), "1.5".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].len(), lines[2].len());
    }
}
