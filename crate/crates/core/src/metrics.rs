//! Line-delimited metrics stream: one `{"step", "key", "value"}` record per line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub key: String,
    pub value: f64,
}

/// Collects records in memory and optionally mirrors them to a file.
#[derive(Debug, Default)]
pub struct MetricsSink {
    records: Vec<MetricRecord>,
    file: Option<BufWriter<File>>,
}

impl MetricsSink {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            file: Some(BufWriter::new(f)),
        })
    }

    pub fn record(&mut self, step: u64, key: impl Into<String>, value: f64) {
        let rec = MetricRecord {
            step,
            key: key.into(),
            value,
        };
        if let Some(f) = self.file.as_mut() {
            if let Ok(line) = serde_json::to_string(&rec) {
                if let Err(e) = writeln!(f, "{line}") {
                    log::warn!("metrics write failed: {e}");
                }
            }
        }
        self.records.push(rec);
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn flush(&mut self) {
        if let Some(f) = self.file.as_mut() {
            let _ = f.flush();
        }
    }

    /// Reads a stream back from disk.
    pub fn read(path: &Path) -> Result<Vec<MetricRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Serde(e.to_string())))
            .collect()
    }
}

impl Drop for MetricsSink {
    fn drop(&mut self) {
        self.flush();
    }
}
