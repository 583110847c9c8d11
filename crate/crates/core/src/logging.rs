//! Scalar logging fanned out to one or more sinks.

use std::collections::HashSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

/// Header of the CSV sink, in column order.
pub const CSV_HEADER: [&str; 4] = ["step", "epoch", "key", "value"];

/// File name of the CSV log inside a run directory.
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub key: String,
    pub value: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("sink `{sink}`: {message}")]
    Sink { sink: String, message: String },
    #[error("record `{key}` already logged at step {step}")]
    Duplicate { step: u64, key: String },
    #[error("{} sink failure(s): {}", .0.len(), .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Deferred(Vec<LogError>),
}

pub trait LoggerSink: Send {
    fn id(&self) -> &str;
    fn write(&mut self, record: &LogRecord) -> Result<(), LogError>;
    /// Persist buffered records; returns the output file, if any.
    fn flush(&mut self) -> Result<Option<PathBuf>, LogError>;
}

/// Shortest text that parses back to the same `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v:?}")
}

/// Appends rows to a CSV file with header `step,epoch,key,value`.
pub struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self, LogError> {
        let err = |e: &dyn std::fmt::Display| LogError::Sink { sink: "csv".into(), message: format!("{}: {e}", path.display()) };
        let file = File::create(path).map_err(|e| err(&e))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        writer.write_record(CSV_HEADER).map_err(|e| err(&e))?;
        Ok(CsvSink { path: path.to_path_buf(), writer })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl LoggerSink for CsvSink {
    fn id(&self) -> &str {
        "csv"
    }

    fn write(&mut self, r: &LogRecord) -> Result<(), LogError> {
        self.writer
            .write_record([r.step.to_string(), r.epoch.to_string(), r.key.clone(), format_value(r.value)])
            .map_err(|e| LogError::Sink { sink: "csv".into(), message: e.to_string() })
    }

    fn flush(&mut self) -> Result<Option<PathBuf>, LogError> {
        self.writer.flush().map_err(|e| LogError::Sink { sink: "csv".into(), message: e.to_string() })?;
        Ok(Some(self.path.clone()))
    }
}

/// Read a CSV log back.
pub fn read_csv_log(path: &Path) -> Result<Vec<LogRecord>, LogError> {
    let err = |m: String| LogError::Sink { sink: "csv".into(), message: format!("{}: {m}", path.display()) };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(err(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| err(e.to_string()))?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        out.push(LogRecord {
            step: field(0).parse().map_err(|_| err(format!("bad step `{}`", field(0))))?,
            epoch: field(1).parse().map_err(|_| err(format!("bad epoch `{}`", field(1))))?,
            key: field(2).to_string(),
            value: field(3).parse().map_err(|_| err(format!("bad value `{}`", field(3))))?,
        });
    }
    Ok(out)
}

/// Keeps records in memory; clones share the same buffer.
#[derive(Clone, Default)]
pub struct MemorySink {
    records: Arc<Mutex<Vec<LogRecord>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<LogRecord> {
        self.records.lock().expect("memory sink poisoned").clone()
    }
}

impl LoggerSink for MemorySink {
    fn id(&self) -> &str {
        "memory"
    }

    fn write(&mut self, r: &LogRecord) -> Result<(), LogError> {
        self.records.lock().expect("memory sink poisoned").push(r.clone());
        Ok(())
    }

    fn flush(&mut self) -> Result<Option<PathBuf>, LogError> {
        Ok(None)
    }
}

/// Prints records through the `log` facade, skipping keys with the given prefixes.
pub struct ConsoleSink {
    skip_prefixes: Vec<String>,
}

impl ConsoleSink {
    pub fn new(skip_prefixes: Vec<String>) -> Self {
        ConsoleSink { skip_prefixes }
    }
}

impl LoggerSink for ConsoleSink {
    fn id(&self) -> &str {
        "console"
    }

    fn write(&mut self, r: &LogRecord) -> Result<(), LogError> {
        if !self.skip_prefixes.iter().any(|p| r.key.starts_with(p.as_str())) {
            log::info!("epoch {} step {}: {} = {:.6}", r.epoch, r.step, r.key, r.value);
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<Option<PathBuf>, LogError> {
        Ok(None)
    }
}

/// Delivers every record to all sinks. A failing sink does not stop
/// delivery to the others; failures surface at [`MultiLogger::flush`].
#[derive(Default)]
pub struct MultiLogger {
    sinks: Vec<Box<dyn LoggerSink>>,
    seen: HashSet<(u64, String)>,
    failures: Vec<LogError>,
}

impl MultiLogger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_sink(&mut self, sink: Box<dyn LoggerSink>) {
        self.sinks.push(sink);
    }

    pub fn sink_ids(&self) -> Vec<String> {
        self.sinks.iter().map(|s| s.id().to_string()).collect()
    }

    pub fn log_scalar(&mut self, key: &str, value: f64, step: u64, epoch: u64) -> Result<(), LogError> {
        if !self.seen.insert((step, key.to_string())) {
            return Err(LogError::Duplicate { step, key: key.to_string() });
        }
        let record = LogRecord { step, epoch, key: key.to_string(), value };
        for sink in &mut self.sinks {
            if let Err(e) = sink.write(&record) {
                self.failures.push(e);
            }
        }
        Ok(())
    }

    /// Flush all sinks; returns the files they wrote.
    pub fn flush(&mut self) -> Result<Vec<PathBuf>, LogError> {
        let mut paths = Vec::new();
        for sink in &mut self.sinks {
            match sink.flush() {
                Ok(Some(p)) => paths.push(p),
                Ok(None) => {}
                Err(e) => self.failures.push(e),
            }
        }
        if self.failures.is_empty() {
            Ok(paths)
        } else {
            Err(LogError::Deferred(std::mem::take(&mut self.failures)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Broken;
    impl LoggerSink for Broken {
        fn id(&self) -> &str {
            "broken"
        }
        fn write(&mut self, _: &LogRecord) -> Result<(), LogError> {
            Err(LogError::Sink { sink: "broken".into(), message: "disk full".into() })
        }
        fn flush(&mut self) -> Result<Option<PathBuf>, LogError> {
            Ok(None)
        }
    }

    #[test]
    fn csv_header_rows_and_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join(METRICS_FILE);
        let mem = MemorySink::new();
        let mut log = MultiLogger::new();
        log.add_sink(Box::new(CsvSink::create(&path).unwrap()));
        log.add_sink(Box::new(mem.clone()));
        let values = [0.1, 1.0 / 3.0, 1e-300];
        for (i, v) in values.iter().enumerate() {
            log.log_scalar("train/loss", *v, i as u64, 0).unwrap();
        }
        assert_eq!(log.flush().unwrap(), vec![path.clone()]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next(), Some("step,epoch,key,value"));
        let back = read_csv_log(&path).unwrap();
        assert_eq!(back, mem.records());
        assert_eq!(back.iter().map(|r| r.value).collect::<Vec<_>>(), values);
    }

    #[test]
    fn duplicate_step_key_rejected() {
        let mut log = MultiLogger::new();
        log.log_scalar("a", 1.0, 0, 0).unwrap();
        log.log_scalar("b", 1.0, 0, 0).unwrap();
        assert!(matches!(log.log_scalar("a", 2.0, 0, 0), Err(LogError::Duplicate { .. })));
    }

    #[test]
    fn failing_sink_does_not_block_others() {
        let mem = MemorySink::new();
        let mut log = MultiLogger::new();
        log.add_sink(Box::new(Broken));
        log.add_sink(Box::new(mem.clone()));
        log.log_scalar("a", 1.0, 0, 0).unwrap();
        log.log_scalar("a", 2.0, 1, 0).unwrap();
        assert_eq!(mem.records().len(), 2);
        match log.flush() {
            Err(LogError::Deferred(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{other:?}"),
        }
        assert!(log.flush().is_ok());
    }
}
