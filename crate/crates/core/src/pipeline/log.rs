//! Line-delimited JSON training log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub epoch: usize,
    /// `train`, `val` or `test`.
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    /// Split-specific score (presence F1 during pretraining), if any.
    pub metric: Option<f64>,
}

/// Collects records in memory and optionally mirrors them to a file.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    sink: Option<(BufWriter<File>, std::path::PathBuf)>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { records: Vec::new(), sink: Some((BufWriter::new(f), path.to_path_buf())) })
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some((w, path)) = &mut self.sink {
            let line = serde_json::to_string(&record).expect("record serialises");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Records of one split in order.
    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records.iter().filter(move |r| r.split == split)
    }
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("log line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_mirror_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = TrainLog::to_file(&path).unwrap();
        log.push(LogRecord { epoch: 1, split: "train".into(), loss: 0.5, lr: 1e-4, metric: None }).unwrap();
        log.push(LogRecord { epoch: 1, split: "val".into(), loss: 0.6, lr: 1e-4, metric: Some(0.9) }).unwrap();
        let back = parse_log(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, log.records);
        assert_eq!(log.split("val").count(), 1);
        assert!(parse_log("{\"epoch\":1}").is_err());
    }
}
