use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use super::Split;
use crate::{Error, Result};

pub const LOSS_HEADER: &str = "step,split,loss,lr,tokens_seen,wallclock_s";

/// One row of the loss log. Floats are written in shortest round-trip form.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
    pub tokens_seen: u64,
    pub wallclock_s: f64,
}

impl LossRecord {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.split, self.loss, self.lr, self.tokens_seen, self.wallclock_s
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse(format!("loss log row needs 6 fields: {line:?}")));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse(format!("bad {what} {s:?}")))
        };
        let int = |s: &str, what: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse(format!("bad {what} {s:?}")))
        };
        Ok(LossRecord {
            step: int(f[0], "step")?,
            split: f[1].parse()?,
            loss: num(f[2], "loss")?,
            lr: num(f[3], "lr")?,
            tokens_seen: int(f[4], "tokens_seen")?,
            wallclock_s: num(f[5], "wallclock_s")?,
        })
    }
}

/// In-memory loss log with an optional append-only file behind it.
#[derive(Debug, Default)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
    file: Option<File>,
}

impl LossLog {
    pub fn in_memory() -> Self {
        LossLog::default()
    }

    /// Appends to `path`, writing the header if the file is new or empty.
    pub fn append_to(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            writeln!(file, "{LOSS_HEADER}")?;
        }
        Ok(LossLog {
            records: Vec::new(),
            file: Some(file),
        })
    }

    pub fn push(&mut self, rec: LossRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", rec.to_csv_line())?;
            f.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &LossRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_csv(records: &[LossRecord]) -> String {
        let mut out = String::from(LOSS_HEADER);
        out.push('\n');
        for r in records {
            let _ = writeln!(out, "{}", r.to_csv_line());
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Vec<LossRecord>> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == LOSS_HEADER => {}
            other => return Err(Error::Parse(format!("loss log header {other:?}"))),
        }
        lines.filter(|l| !l.is_empty()).map(LossRecord::parse_csv_line).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, split: Split, loss: f64) -> LossRecord {
        LossRecord {
            step,
            split,
            loss,
            lr: 1e-3 * step as f64 / 7.0,
            tokens_seen: step * 1024,
            wallclock_s: 0.125 * step as f64,
        }
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let rs = vec![
            rec(0, Split::Train, 5.545177459716797),
            rec(1, Split::Train, 0.1 + 0.2),
            rec(1, Split::Val, 1e-300),
        ];
        let text = LossLog::to_csv(&rs);
        let back = LossLog::parse_csv(&text).unwrap();
        assert_eq!(back, rs);
        assert_eq!(LossLog::to_csv(&back), text);
        assert!(text.starts_with("step,split,loss,lr,tokens_seen,wallclock_s\n0,train,"));
    }

    #[test]
    fn bad_rows_are_rejected() {
        assert!(LossLog::parse_csv("nope\n").is_err());
        assert!(LossLog::parse_csv(&format!("{LOSS_HEADER}\n1,test,1,1,1,1\n")).is_err());
        assert!(LossLog::parse_csv(&format!("{LOSS_HEADER}\n1,train,x,1,1,1\n")).is_err());
    }

    #[test]
    fn file_log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let mut log = LossLog::append_to(&path).unwrap();
        log.push(rec(0, Split::Train, 2.0)).unwrap();
        drop(log);
        let mut log = LossLog::append_to(&path).unwrap();
        log.push(rec(1, Split::Train, 1.5)).unwrap();
        let back = LossLog::parse_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].loss, 1.5);
    }
}
