//! Learning-curve CSV files.

use std::path::Path;

use crate::agent::EvalPoint;
use crate::error::{Error, Result};

const HEADER: [&str; 6] = ["step", "mean_return", "returns", "policy_entropy", "mean_q", "disagreement"];

/// Evaluation rows with strictly increasing steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    rows: Vec<EvalPoint>,
}

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<EvalPoint>) -> Result<Self> {
        let mut log = Self::new();
        for p in points {
            log.push(p)?;
        }
        Ok(log)
    }

    pub fn push(&mut self, p: EvalPoint) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if p.step <= last.step {
                return Err(Error::Format(format!("metric step {} after {}", p.step, last.step)));
            }
        }
        self.rows.push(p);
        Ok(())
    }

    pub fn rows(&self) -> &[EvalPoint] {
        &self.rows
    }

    pub fn last(&self) -> Option<&EvalPoint> {
        self.rows.last()
    }

    /// Per-episode returns are `;`-separated inside one field. Floats use
    /// the shortest representation that parses back to the same value.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).map_err(csv_err)?;
        for p in &self.rows {
            let returns: Vec<String> = p.returns.iter().map(|r| r.to_string()).collect();
            w.write_record([
                p.step.to_string(),
                p.mean_return.to_string(),
                returns.join(";"),
                p.policy_entropy.to_string(),
                p.mean_q.to_string(),
                p.disagreement.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?;
        if header.iter().ne(HEADER) {
            return Err(Error::Format(format!("unexpected metric header {header:?}")));
        }
        let mut log = Self::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|e| Error::Format(format!("column {}: {e}", HEADER[i])))
            };
            let returns = if rec[2].is_empty() {
                Vec::new()
            } else {
                rec[2]
                    .split(';')
                    .map(|v| v.parse::<f64>().map_err(|e| Error::Format(format!("returns: {e}"))))
                    .collect::<Result<_>>()?
            };
            log.push(EvalPoint {
                step: rec[0].parse().map_err(|e| Error::Format(format!("step: {e}")))?,
                mean_return: num(1)?,
                returns,
                policy_entropy: num(3)?,
                mean_q: num(4)?,
                disagreement: num(5)?,
            })?;
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(step: usize, ret: f64) -> EvalPoint {
        EvalPoint {
            step,
            mean_return: ret,
            returns: vec![ret - 0.1, ret + 0.1],
            policy_entropy: 0.3,
            mean_q: f64::NAN,
            disagreement: 1.0 / 3.0,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let log = MetricLog::from_points(vec![point(0, -10.123456789), point(5, 2.0e-17)]).unwrap();
        let back = MetricLog::parse_csv(&log.to_csv().unwrap()).unwrap();
        assert_eq!(back.rows().len(), 2);
        for (a, b) in log.rows().iter().zip(back.rows()) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.mean_return.to_bits(), b.mean_return.to_bits());
            assert_eq!(a.returns, b.returns);
            assert!(b.mean_q.is_nan());
            assert_eq!(a.disagreement, b.disagreement);
        }
    }

    #[test]
    fn steps_must_increase() {
        let mut log = MetricLog::new();
        log.push(point(3, 0.0)).unwrap();
        assert!(matches!(log.push(point(3, 0.0)), Err(Error::Format(_))));
        let bad = "step,mean_return,returns,policy_entropy,mean_q,disagreement\n5,0,,0,0,0\n4,0,,0,0,0\n";
        assert!(MetricLog::parse_csv(bad).is_err());
        assert!(MetricLog::parse_csv("a,b\n1,2\n").is_err());
    }
}
