//! One JSON object per line: `{"step":…,"loss":…,"accuracy":…}`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Parses one metrics line. Blank lines are rejected.
pub fn parse_line(line: &str) -> Result<MetricRecord> {
    let r: MetricRecord = serde_json::from_str(line.trim())?;
    if !r.loss.is_finite() || !(0.0..=1.0).contains(&r.accuracy) {
        return Err(Error::Config(format!("invalid metrics record: {}", line.trim())));
    }
    Ok(r)
}

/// Parses a whole log, skipping blank lines.
pub fn parse_log(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(parse_line).collect()
}

pub fn write_log<W: Write>(mut w: W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let r = MetricRecord {
            step: 7,
            loss: 1.25,
            accuracy: 0.5,
        };
        assert_eq!(parse_line(&r.to_line()).unwrap(), r);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_line("").is_err());
        assert!(parse_line("{\"step\":1}").is_err());
        assert!(parse_line("{\"step\":1,\"loss\":1.0,\"accuracy\":2.0}").is_err());
    }

    #[test]
    fn log_skips_blank_lines() {
        let text = "{\"step\":0,\"loss\":2.0,\"accuracy\":0.1}\n\n{\"step\":1,\"loss\":1.0,\"accuracy\":0.2}\n";
        assert_eq!(parse_log(text).unwrap().len(), 2);
    }
}
