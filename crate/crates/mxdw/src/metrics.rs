//! Append-only metrics stream: one self-delimiting `key=value` record per
//! line, plus CSV export for plotting.

use crate::error::{Error, Result};
use std::io::{BufRead, Write};
use std::path::Path;

/// One logged record; field order is preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub fields: Vec<(String, f64)>,
}

impl MetricsRecord {
    pub fn new(step: u64) -> Self {
        MetricsRecord { step, fields: Vec::new() }
    }

    pub fn push(&mut self, key: &str, value: f64) -> &mut Self {
        self.fields.push((key.to_string(), value));
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn to_line(&self) -> String {
        let mut s = format!("step={}", self.step);
        for (k, v) in &self.fields {
            s.push(' ');
            s.push_str(k);
            s.push('=');
            s.push_str(&format!("{v}"));
        }
        s
    }

    fn parse_line(line: &str) -> Result<MetricsRecord> {
        let mut step = None;
        let mut fields = Vec::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metrics token {part:?}")))?;
            if k == "step" {
                step = Some(v.parse().map_err(|_| Error::Format(format!("bad step {v:?}")))?);
            } else {
                let value: f64 = v.parse().map_err(|_| Error::Format(format!("bad value {v:?} for {k}")))?;
                fields.push((k.to_string(), value));
            }
        }
        Ok(MetricsRecord { step: step.ok_or_else(|| Error::Format("record missing step".into()))?, fields })
    }
}

/// Append-only writer; flushes after every record.
pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter { file: std::io::BufWriter::new(std::fs::File::create(path)?) })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", record.to_line())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Parse a metrics file line by line; no state is shared between lines.
pub fn parse_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(MetricsRecord::parse_line(&line)?);
    }
    Ok(out)
}

/// Export records as CSV: header is the union of keys in first-seen order,
/// missing values are left blank.
pub fn export_csv(records: &[MetricsRecord], w: &mut impl Write) -> Result<()> {
    let mut keys: Vec<String> = Vec::new();
    for rec in records {
        for (k, _) in &rec.fields {
            if !keys.iter().any(|x| x == k) {
                keys.push(k.clone());
            }
        }
    }
    write!(w, "step")?;
    for k in &keys {
        write!(w, ",{k}")?;
    }
    writeln!(w)?;
    for rec in records {
        write!(w, "{}", rec.step)?;
        for k in &keys {
            match rec.get(k) {
                Some(v) => write!(w, ",{v}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_through_the_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.txt");
        let mut w = MetricsWriter::create(&path).unwrap();
        let mut r1 = MetricsRecord::new(0);
        r1.push("mean_return", 0.0).push("beta", 0.2);
        let mut r2 = MetricsRecord::new(1000);
        r2.push("mean_return", 12.5).push("beta", 0.10005).push("extra", -3.25);
        w.append(&r1).unwrap();
        w.append(&r2).unwrap();
        drop(w);

        let back = parse_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], r1);
        assert_eq!(back[1], r2);
    }

    #[test]
    fn csv_export_unions_headers() {
        let mut r1 = MetricsRecord::new(0);
        r1.push("a", 1.0);
        let mut r2 = MetricsRecord::new(1);
        r2.push("a", 2.0).push("b", 3.0);
        let mut buf = Vec::new();
        export_csv(&[r1, r2], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,a,b");
        assert_eq!(lines[1], "0,1,");
        assert_eq!(lines[2], "1,2,3");
    }
}
