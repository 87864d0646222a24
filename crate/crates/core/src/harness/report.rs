//! Experiment reports: checks, bound rows, rate tables, fitted constants and
//! distance tables, written as `report.json` plus one CSV per table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::report::{num, BoundReport, BoundRow, Verdict};
use crate::trainer::IntervalLoss;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub verdict: Verdict,
    /// Measured quantity (worst ratio, error, slope, ...).
    #[serde(with = "num")]
    pub value: f64,
    /// Threshold the value is compared against.
    #[serde(with = "num")]
    pub bound: f64,
    #[serde(with = "num")]
    pub fitted_constant: f64,
    pub note: String,
}

impl CheckResult {
    pub fn new(suite: &str, name: &str, ok: bool, value: f64, bound: f64) -> Self {
        Self {
            suite: suite.into(),
            name: name.into(),
            verdict: Verdict::from_bool(ok),
            value,
            bound,
            fitted_constant: f64::NAN,
            note: String::new(),
        }
    }

    pub fn failed(suite: &str, name: &str, note: String) -> Self {
        let mut c = Self::new(suite, name, false, f64::NAN, f64::NAN);
        c.note = note;
        c
    }

    pub fn with_constant(mut self, c: f64) -> Self {
        self.fitted_constant = c;
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn from_bound(suite: &str, b: &BoundReport) -> Self {
        Self {
            suite: suite.into(),
            name: b.bound_name.clone(),
            verdict: b.verdict,
            value: b.worst_ratio,
            bound: 1.0,
            fitted_constant: b.fitted_constant,
            note: b.note.clone(),
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// One cell of a rate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub regime: String,
    #[serde(with = "num")]
    pub t: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(with = "num")]
    pub ise: f64,
    #[serde(with = "num")]
    pub rhs_scale: f64,
    #[serde(with = "num")]
    pub ratio: f64,
}

/// Log-log fit of a rate ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub regime: String,
    pub ns: Vec<usize>,
    /// Per-N value the slope is fitted to.
    pub values: Vec<f64>,
    #[serde(with = "num")]
    pub slope: f64,
    #[serde(with = "num")]
    pub slope_ci: f64,
    #[serde(with = "num")]
    pub intercept: f64,
    #[serde(with = "num")]
    pub r2: f64,
    #[serde(with = "num")]
    pub expected_slope: f64,
    pub monotone: bool,
    pub verdict: Verdict,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedConstant {
    pub name: String,
    #[serde(with = "num")]
    pub value: f64,
    pub note: String,
}

/// Distance between generated and reference samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub source: String,
    pub order: u8,
    pub steps: usize,
    #[serde(with = "num")]
    pub w1: f64,
    #[serde(with = "num")]
    pub w2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pass: usize,
    pub fail: usize,
    pub not_applicable: usize,
}

/// Wall-clock metadata; the only part of a report that varies between runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub total_ms: u64,
    pub threads: usize,
    pub sections: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub checks: Vec<CheckResult>,
    pub bound_rows: Vec<BoundRow>,
    pub rates: Vec<RateRow>,
    pub fits: Vec<RateFit>,
    pub constants: Vec<FittedConstant>,
    pub distances: Vec<DistanceRow>,
    pub intervals: Vec<IntervalLoss>,
    pub errors: Vec<String>,
    pub summary: Summary,
    pub runtime: Runtime,
}

impl ExperimentReport {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: config.hash(),
            config: config.clone(),
            checks: Vec::new(),
            bound_rows: Vec::new(),
            rates: Vec::new(),
            fits: Vec::new(),
            constants: Vec::new(),
            distances: Vec::new(),
            intervals: Vec::new(),
            errors: Vec::new(),
            summary: Summary::default(),
            runtime: Runtime::default(),
        }
    }

    pub fn constant(&mut self, name: &str, value: f64, note: &str) {
        self.constants.push(FittedConstant { name: name.into(), value, note: note.into() });
    }

    /// Recount the summary from checks and rate fits.
    pub fn settle(&mut self) {
        let mut s = Summary::default();
        for v in self.checks.iter().map(|c| c.verdict).chain(self.fits.iter().map(|f| f.verdict)) {
            match v {
                Verdict::Pass => s.pass += 1,
                Verdict::Fail => s.fail += 1,
                Verdict::NotApplicable => s.not_applicable += 1,
            }
        }
        if !self.errors.is_empty() {
            s.fail += self.errors.len();
        }
        self.summary = s;
    }

    /// True iff no check other than NOT-APPLICABLE ones failed.
    pub fn passed(&self) -> bool {
        self.summary.fail == 0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn rates_csv(&self) -> Result<String> {
        table(&self.rates)
    }

    pub fn checks_csv(&self) -> Result<String> {
        table(&self.checks)
    }

    pub fn constants_csv(&self) -> Result<String> {
        table(&self.constants)
    }

    pub fn distances_csv(&self) -> Result<String> {
        table(&self.distances)
    }

    pub fn intervals_csv(&self) -> Result<String> {
        table(&self.intervals)
    }

    /// Bound rows with columns check, t, x1..xd, lhs, rhs, ratio, pass; d is
    /// the largest dimension present and shorter rows leave cells empty.
    pub fn bounds_csv(&self) -> Result<String> {
        let d = self.bound_rows.iter().map(|r| r.x.len()).max().unwrap_or(1);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["check".to_string(), "t".to_string()];
        head.extend((1..=d).map(|i| format!("x{i}")));
        head.extend(["lhs", "rhs", "ratio", "pass"].map(String::from));
        w.write_record(&head).map_err(csv_err)?;
        for r in &self.bound_rows {
            let mut rec = vec![r.check.clone(), r.t.to_string()];
            rec.extend((0..d).map(|i| r.x.get(i).map(|v| v.to_string()).unwrap_or_default()));
            rec.extend([r.lhs.to_string(), r.rhs.to_string(), r.ratio.to_string(), r.pass.to_string()]);
            w.write_record(&rec).map_err(csv_err)?;
        }
        finish(w)
    }

    /// Write report.json and the CSV tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("checks.csv"), self.checks_csv()?)?;
        std::fs::write(dir.join("bounds.csv"), self.bounds_csv()?)?;
        std::fs::write(dir.join("rates.csv"), self.rates_csv()?)?;
        std::fs::write(dir.join("constants.csv"), self.constants_csv()?)?;
        std::fs::write(dir.join("distances.csv"), self.distances_csv()?)?;
        std::fs::write(dir.join("intervals.csv"), self.intervals_csv()?)?;
        Ok(())
    }
}

/// Parse a table written by one of the `*_csv` methods.
pub fn read_table<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().map(|r| r.map_err(csv_err)).collect()
}

fn table<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse { line: e.position().map(|p| p.line() as usize).unwrap_or(0), msg: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentReport {
        let mut r = ExperimentReport::new("rate", &ExperimentConfig::default());
        r.rates.push(RateRow { regime: "small-t".into(), t: 0.1 / 3.0, n: 16, ise: 1.234e-7, rhs_scale: 0.0, ratio: f64::INFINITY });
        r.rates.push(RateRow { regime: "bspline".into(), t: f64::NAN, n: 32, ise: 2.5e-3, rhs_scale: 1.0 / 1024.0, ratio: 2.56 });
        r.checks.push(CheckResult::new("gamma", "psi-1", true, 0.5, 1.0).with_constant(f64::NAN));
        r.bound_rows.push(BoundRow { check: "c".into(), t: 0.5, x: vec![0.1, -0.2], lhs: 1.0, rhs: 2.0, ratio: 0.5, pass: true });
        r.bound_rows.push(BoundRow { check: "c".into(), t: 0.5, x: vec![0.3], lhs: 1.0, rhs: 2.0, ratio: 0.5, pass: true });
        r.settle();
        r
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let r = sample();
        let text = r.to_json().unwrap();
        let back = ExperimentReport::from_json(&text).unwrap();
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.rates[0].t, r.rates[0].t);
        assert!(back.rates[1].t.is_nan());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let r = sample();
        let rows: Vec<RateRow> = read_table(&r.rates_csv().unwrap()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].t.to_bits(), r.rates[0].t.to_bits());
        assert_eq!(rows[0].ratio, f64::INFINITY);
        assert!(r.rates_csv().unwrap().starts_with("regime,t,N,ise,rhs_scale,ratio\n"));
        assert!(r.bounds_csv().unwrap().starts_with("check,t,x1,x2,lhs,rhs,ratio,pass\n"));
        let checks: Vec<CheckResult> = read_table(&r.checks_csv().unwrap()).unwrap();
        assert_eq!(checks[0].name, "psi-1");
    }
}
