//! Verdicts and bound reports shared by the verification suites.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
    #[serde(rename = "NOT-APPLICABLE")]
    NotApplicable,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::NotApplicable => "NOT-APPLICABLE",
        }
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail)
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

/// Serde adapter writing non-finite floats as the strings "NaN", "inf" and
/// "-inf" so JSON output round-trips.
pub mod num {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

/// One row of a bound check: the grid point, both sides and their ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub check: String,
    #[serde(with = "num")]
    pub t: f64,
    pub x: Vec<f64>,
    #[serde(with = "num")]
    pub lhs: f64,
    #[serde(with = "num")]
    pub rhs: f64,
    #[serde(with = "num")]
    pub ratio: f64,
    pub pass: bool,
}

/// Outcome of a bound check over a grid. `worst_ratio` is the largest
/// lhs/rhs after the fitted constant has been applied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_name: String,
    pub grid: String,
    #[serde(with = "num")]
    pub fitted_constant: f64,
    #[serde(with = "num")]
    pub worst_ratio: f64,
    pub pass: bool,
    pub verdict: Verdict,
    #[serde(with = "num")]
    pub witness_t: f64,
    pub witness_x: Vec<f64>,
    pub note: String,
    #[serde(skip)]
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn new(name: &str, grid: String) -> Self {
        Self {
            bound_name: name.to_string(),
            grid,
            fitted_constant: f64::NAN,
            worst_ratio: f64::NAN,
            pass: false,
            verdict: Verdict::Fail,
            witness_t: f64::NAN,
            witness_x: Vec::new(),
            note: String::new(),
            rows: Vec::new(),
        }
    }

    /// Set pass/verdict from the worst ratio with the standard slack.
    pub fn settle(&mut self) {
        self.pass = self.worst_ratio.is_finite() && self.worst_ratio <= 1.0 + 1e-9;
        self.verdict = Verdict::from_bool(self.pass);
    }

    pub fn not_applicable(mut self, note: &str) -> Self {
        self.verdict = Verdict::NotApplicable;
        self.pass = false;
        self.note = note.to_string();
        self
    }
}

/// Least-squares line through (x, y) with the coefficient of determination.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Half-width of a 95% confidence interval for the slope (normal approx).
    pub slope_ci: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let slope_ci = if x.len() > 2 {
        1.96 * (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    LineFit { slope, intercept, r2, slope_ci }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        let f = fit_line(&x, &y);
        assert!((f.slope + 2.0).abs() < 1e-12);
        assert!((f.intercept - 3.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_round_trip() {
        let r = BoundRow { check: "c".into(), t: f64::NAN, x: vec![0.5], lhs: 1.0, rhs: 0.0, ratio: f64::INFINITY, pass: false };
        let s = serde_json::to_string(&r).unwrap();
        let back: BoundRow = serde_json::from_str(&s).unwrap();
        assert!(back.t.is_nan());
        assert_eq!(back.ratio, f64::INFINITY);
        assert_eq!(back.lhs, 1.0);
    }

    #[test]
    fn verdict_serializes_with_dash() {
        let s = serde_json::to_string(&Verdict::NotApplicable).unwrap();
        assert_eq!(s, "\"NOT-APPLICABLE\"");
    }
}
