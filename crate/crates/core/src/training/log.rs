//! JSON-lines training log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::prompt::Task;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: String,
    pub task: Task,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    sink: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also append every record to `path`.
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(TrainLog {
            records: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    pub fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &r)?;
            w.write_all(b"\n")?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.sink {
            w.flush()?;
        }
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Means of consecutive non-overlapping blocks of `width` values; a trailing
/// partial block is dropped.
pub fn block_means(values: &[f64], width: usize) -> Vec<f64> {
    values
        .chunks_exact(width.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        let mut log = TrainLog::to_file(&p).unwrap();
        for step in 0..3 {
            log.push(LogRecord {
                step,
                stage: "1".into(),
                task: Task::Slt,
                loss: 1.0 / (step + 1) as f64,
                lr: 1e-3,
            })
            .unwrap();
        }
        log.flush().unwrap();
        assert_eq!(read_log(&p).unwrap(), log.records);
        let line = std::fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["loss", "lr", "stage", "step", "task"]);
    }

    #[test]
    fn block_means_drop_partial_tail() {
        assert_eq!(block_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }
}
