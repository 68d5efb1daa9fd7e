//! Tab-separated training log.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{DsrError, Result};

/// Averages over one logging interval.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    /// Last iteration of the interval, 1-based.
    pub iteration: usize,
    pub learning_rate: f64,
    /// Named loss terms, weighted as they enter the objective.
    pub terms: Vec<(String, f64)>,
    pub total: f64,
    /// Cumulative counters such as sampler draws.
    pub counters: Vec<(String, u64)>,
    pub elapsed_secs: f64,
}

impl TrainLogRecord {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn counter(&self, name: &str) -> Option<u64> {
        self.counters.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn header(&self) -> String {
        let mut s = String::from("# iteration\tlr");
        for (n, _) in &self.terms {
            let _ = write!(s, "\t{n}");
        }
        s.push_str("\ttotal");
        for (n, _) in &self.counters {
            let _ = write!(s, "\t{n}");
        }
        s.push_str("\telapsed_s");
        s
    }

    fn line(&self) -> String {
        let mut s = format!("{}\t{:e}", self.iteration, self.learning_rate);
        for (_, v) in &self.terms {
            let _ = write!(s, "\t{v:.9e}");
        }
        let _ = write!(s, "\t{:.9e}", self.total);
        for (_, v) in &self.counters {
            let _ = write!(s, "\t{v}");
        }
        let _ = write!(s, "\t{:.3}", self.elapsed_secs);
        s
    }
}

/// Appends records to a file, writing the header before the first one.
pub struct TrainLog {
    path: PathBuf,
    out: BufWriter<File>,
    wrote_header: bool,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| DsrError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
            wrote_header: false,
        })
    }

    pub fn append(&mut self, r: &TrainLogRecord) -> Result<()> {
        let io = |e| DsrError::io(&self.path, e);
        if !self.wrote_header {
            writeln!(self.out, "{}", r.header()).map_err(io)?;
            self.wrote_header = true;
        }
        writeln!(self.out, "{}", r.line()).map_err(io)?;
        self.out.flush().map_err(io)
    }
}

/// Reads a log back. Elapsed time is kept; compare records with
/// [`same_losses`] to ignore it.
pub fn parse_log(text: &str) -> Result<Vec<TrainLogRecord>> {
    let mut lines = text.lines();
    let header = match lines.next() {
        Some(h) if h.starts_with("# ") => h[2..].split('\t').collect::<Vec<_>>(),
        Some(_) => return Err(DsrError::Config("training log lacks a header".into())),
        None => return Ok(Vec::new()),
    };
    let total_at = header
        .iter()
        .position(|&h| h == "total")
        .ok_or_else(|| DsrError::Config("training log header lacks `total`".into()))?;
    let bad = |n: usize| DsrError::Config(format!("training log line {n} is malformed"));
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != header.len() {
            return Err(bad(i + 2));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2));
        out.push(TrainLogRecord {
            iteration: f[0].parse().map_err(|_| bad(i + 2))?,
            learning_rate: num(f[1])?,
            terms: (2..total_at)
                .map(|j| Ok((header[j].to_string(), num(f[j])?)))
                .collect::<Result<_>>()?,
            total: num(f[total_at])?,
            counters: (total_at + 1..header.len() - 1)
                .map(|j| Ok((header[j].to_string(), f[j].parse().map_err(|_| bad(i + 2))?)))
                .collect::<Result<_>>()?,
            elapsed_secs: num(f[header.len() - 1])?,
        });
    }
    Ok(out)
}

/// Equal iterations, learning rates, loss values and counters.
pub fn same_losses(a: &[TrainLogRecord], b: &[TrainLogRecord]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.iteration == y.iteration
                && x.learning_rate == y.learning_rate
                && x.terms == y.terms
                && x.total == y.total
                && x.counters == y.counters
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(it: usize) -> TrainLogRecord {
        TrainLogRecord {
            iteration: it,
            learning_rate: 2e-4,
            terms: vec![("focal".into(), 0.125), ("image".into(), 1.5e-3)],
            total: 0.1265,
            counters: vec![("bounded_draws".into(), 42)],
            elapsed_secs: 1.25,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage2.log");
        let mut log = TrainLog::create(&path).unwrap();
        log.append(&record(50)).unwrap();
        log.append(&record(100)).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# iteration\tlr\tfocal\timage\ttotal\tbounded_draws\telapsed_s\n"));
        let parsed = parse_log(&text).unwrap();
        assert!(same_losses(&parsed, &[record(50), record(100)]));
    }
}
