//! Newline-delimited JSON metric records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::Result;

pub trait MetricsSink {
    fn record(&mut self, rec: Value) -> Result<()>;
}

impl MetricsSink for Vec<Value> {
    fn record(&mut self, rec: Value) -> Result<()> {
        self.push(rec);
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: Value) -> Result<()> {
        Ok(())
    }
}

pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlWriter { out: BufWriter::new(File::create(path)?) })
    }
}

impl MetricsSink for JsonlWriter {
    fn record(&mut self, rec: Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, &rec).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        // flush per line so a crash leaves a parseable prefix
        self.out.flush()?;
        Ok(())
    }
}

/// Parses every line of a metrics file.
pub fn read_jsonl(path: &Path) -> Result<Vec<Value>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| crate::error::Error::Format(format!("metrics line: {e}"))))
        .collect()
}
