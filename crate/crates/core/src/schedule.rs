//! Interpolation schedules (α_t, β_t) with closed-form derivatives, the time
//! variables built from the budget N, and grid checks of the schedule
//! assumptions.
//!
//! Convention: the interpolant is x_t = α_t·x₀ + β_t·x₁ with x₀ Gaussian noise
//! and x₁ a data point. For the power law, t → 0 is data-dominant and t = 1 is
//! noise-dominant.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;
use crate::report::Verdict;

/// α_t, β_t and their first two time derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub alpha: f64,
    pub beta: f64,
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
}

impl ScheduleState {
    /// Coefficients (c₂, c₃) with a(x|y) = c₂·(x − βy)/α + c₃·y.
    pub fn accel_coefficients(&self) -> (f64, f64) {
        let c2 = self.alpha2 - self.alpha1 * self.alpha1 / self.alpha;
        let c3 = self.beta2 - self.alpha1 * self.beta1 / self.alpha;
        (c2, c3)
    }

    fn check_finite(&self, t: f64) -> Result<Self> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("alpha'", self.alpha1),
            ("beta'", self.beta1),
            ("alpha''", self.alpha2),
            ("beta''", self.beta2),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::NonFinite { name, t });
            }
        }
        Ok(*self)
    }
}

/// Parameters of the power-law family α = b₀t^κ, β = 1 − b̃₀t^κ̃.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub b0: f64,
    pub kappa: f64,
    pub b0_tilde: f64,
    pub kappa_tilde: f64,
}

/// Callback returning the full state of a custom schedule.
pub type StateFn = Arc<dyn Fn(f64) -> ScheduleState + Send + Sync>;

#[derive(Clone)]
enum Repr {
    Linear,
    Power(PowerLaw),
    Custom { name: String, f: StateFn },
    Rebased { base: Box<Schedule>, t_star: f64, alpha_star: f64, beta_star: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    PowerLaw,
    CustomCoefficients,
    Rebased,
}

#[derive(Clone)]
pub struct Schedule {
    repr: Repr,
}

impl std::fmt::Debug for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.repr {
            Repr::Linear => write!(f, "Schedule::Linear"),
            Repr::Power(p) => write!(f, "Schedule::Power({p:?})"),
            Repr::Custom { name, .. } => write!(f, "Schedule::Custom({name})"),
            Repr::Rebased { base, t_star, .. } => write!(f, "Schedule::Rebased({base:?} at {t_star})"),
        }
    }
}

fn power_term(c: f64, k: f64, t: f64) -> (f64, f64, f64) {
    let v = c * t.powf(k);
    let d1c = c * k;
    let d1 = if d1c == 0.0 { 0.0 } else { d1c * t.powf(k - 1.0) };
    let d2c = c * k * (k - 1.0);
    let d2 = if d2c == 0.0 { 0.0 } else { d2c * t.powf(k - 2.0) };
    (v, d1, d2)
}

impl Schedule {
    /// α = 1 − t, β = t.
    pub fn linear() -> Self {
        Self { repr: Repr::Linear }
    }

    pub fn power(p: PowerLaw) -> Result<Self> {
        if !(p.b0 > 0.0) || !(p.b0_tilde > 0.0) || !(p.kappa_tilde > 0.0) {
            return Err(Error::Argument(format!("power-law coefficients must be positive: {p:?}")));
        }
        if !(p.kappa >= 0.5) {
            return Err(Error::Argument(format!("kappa must be at least 1/2, got {}", p.kappa)));
        }
        Ok(Self { repr: Repr::Power(p) })
    }

    /// α = t, β = 1 − t: the power law with all exponents and scales one.
    pub fn rectified() -> Self {
        Self {
            repr: Repr::Power(PowerLaw { b0: 1.0, kappa: 1.0, b0_tilde: 1.0, kappa_tilde: 1.0 }),
        }
    }

    /// Custom schedule from a state callback. The supplied derivatives are
    /// compared against central differences (h = 1e−5) on `check_times`.
    pub fn custom(name: &str, f: StateFn, check_times: &[f64]) -> Result<Self> {
        let s = Self { repr: Repr::Custom { name: name.to_string(), f } };
        for &t in check_times {
            let err = s.derivative_error(t, 1e-5)?;
            if err > 1e-6 {
                return Err(Error::Argument(format!(
                    "custom schedule '{name}': derivative callback disagrees with finite differences at t = {t} (rel. err {err:e})"
                )));
            }
        }
        Ok(s)
    }

    pub fn kind(&self) -> ScheduleKind {
        match self.repr {
            Repr::Linear => ScheduleKind::Linear,
            Repr::Power(_) => ScheduleKind::PowerLaw,
            Repr::Custom { .. } => ScheduleKind::CustomCoefficients,
            Repr::Rebased { .. } => ScheduleKind::Rebased,
        }
    }

    pub fn power_params(&self) -> Option<PowerLaw> {
        match &self.repr {
            Repr::Power(p) => Some(*p),
            _ => None,
        }
    }

    /// Exponent κ of α near t = 0 where the schedule has one.
    pub fn kappa(&self) -> Option<f64> {
        self.power_params().map(|p| p.kappa)
    }

    /// (α_t, β_t) only. Defined on the closed range, including the rebasing
    /// time where α̃ vanishes.
    pub fn values(&self, t: f64) -> Result<(f64, f64)> {
        match &self.repr {
            Repr::Rebased { base, alpha_star, beta_star, .. } => {
                let (a, b) = base.values(t)?;
                let bt = b / beta_star;
                let rad = a * a - bt * bt * alpha_star * alpha_star;
                if rad < -1e-14 * (a * a).max(1e-300) {
                    return Err(Error::NegativeRadicand { t, value: rad });
                }
                Ok((rad.max(0.0).sqrt(), bt))
            }
            _ => {
                let s = self.raw_state(t)?;
                Ok((s.alpha, s.beta))
            }
        }
    }

    fn raw_state(&self, t: f64) -> Result<ScheduleState> {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Argument(format!("time must be finite and nonnegative, got {t}")));
        }
        Ok(match &self.repr {
            Repr::Linear => ScheduleState {
                alpha: 1.0 - t,
                beta: t,
                alpha1: -1.0,
                beta1: 1.0,
                alpha2: 0.0,
                beta2: 0.0,
            },
            Repr::Power(p) => {
                let (a, a1, a2) = power_term(p.b0, p.kappa, t);
                let (c, c1, c2) = power_term(p.b0_tilde, p.kappa_tilde, t);
                ScheduleState { alpha: a, beta: 1.0 - c, alpha1: a1, beta1: -c1, alpha2: a2, beta2: -c2 }
            }
            Repr::Custom { f, .. } => f(t),
            Repr::Rebased { base, alpha_star, beta_star, .. } => {
                let s = base.eval(t)?;
                let a2s = alpha_star * alpha_star;
                let bt = s.beta / beta_star;
                let bt1 = s.beta1 / beta_star;
                let bt2 = s.beta2 / beta_star;
                let r = s.alpha * s.alpha - bt * bt * a2s;
                if r < -1e-14 * (s.alpha * s.alpha).max(1e-300) {
                    return Err(Error::NegativeRadicand { t, value: r });
                }
                let r1 = 2.0 * s.alpha * s.alpha1 - 2.0 * bt * bt1 * a2s;
                let r2 = 2.0 * s.alpha1 * s.alpha1 + 2.0 * s.alpha * s.alpha2 - 2.0 * (bt1 * bt1 + bt * bt2) * a2s;
                let at = r.max(0.0).sqrt();
                let at1 = r1 / (2.0 * at);
                let at2 = (0.5 * r2 - at1 * at1) / at;
                ScheduleState { alpha: at, beta: bt, alpha1: at1, beta1: bt1, alpha2: at2, beta2: bt2 }
            }
        })
    }

    /// Full state at `t`; fails when any component is non-finite.
    pub fn eval(&self, t: f64) -> Result<ScheduleState> {
        self.raw_state(t)?.check_finite(t)
    }

    /// Largest relative mismatch between the closed-form derivatives and
    /// central differences of the lower-order quantities.
    pub fn derivative_error(&self, t: f64, h: f64) -> Result<f64> {
        let s = self.eval(t)?;
        let p = self.eval(t + h)?;
        let m = self.eval(t - h)?;
        let rel = |fd: f64, exact: f64| {
            let scale = exact.abs().max(fd.abs()).max(1.0);
            (fd - exact).abs() / scale
        };
        let mut worst: f64 = 0.0;
        worst = worst.max(rel((p.alpha - m.alpha) / (2.0 * h), s.alpha1));
        worst = worst.max(rel((p.beta - m.beta) / (2.0 * h), s.beta1));
        worst = worst.max(rel((p.alpha1 - m.alpha1) / (2.0 * h), s.alpha2));
        worst = worst.max(rel((p.beta1 - m.beta1) / (2.0 * h), s.beta2));
        Ok(worst)
    }

    /// Rebase at `t_star`: β̃ = β/β_{t*}, α̃ = sqrt(α² − β̃²α_{t*}²). The
    /// radicand is checked on a 512-point grid over [2·t*, 1].
    pub fn rebase(&self, t_star: f64) -> Result<Schedule> {
        if !(t_star > 0.0 && t_star < 1.0) {
            return Err(Error::Argument(format!("rebasing time must lie in (0, 1), got {t_star}")));
        }
        let st = self.eval(t_star)?;
        if !(st.beta > 0.0) {
            return Err(Error::Argument(format!("beta vanishes at the rebasing time {t_star}")));
        }
        let out = Schedule {
            repr: Repr::Rebased {
                base: Box::new(self.clone()),
                t_star,
                alpha_star: st.alpha,
                beta_star: st.beta,
            },
        };
        let lo = (2.0 * t_star).min(1.0);
        for i in 0..512 {
            let t = lo + (1.0 - lo) * i as f64 / 511.0;
            let s = self.eval(t)?;
            let bt = s.beta / st.beta;
            let rad = s.alpha * s.alpha - bt * bt * st.alpha * st.alpha;
            if rad < 0.0 {
                return Err(Error::NegativeRadicand { t, value: rad });
            }
        }
        Ok(out)
    }

    /// Rebasing time and (α_{t*}, β_{t*}) for a rebased schedule.
    pub fn rebase_anchor(&self) -> Option<(f64, f64, f64)> {
        match &self.repr {
            Repr::Rebased { t_star, alpha_star, beta_star, .. } => Some((*t_star, *alpha_star, *beta_star)),
            _ => None,
        }
    }

    /// Underlying schedule of a rebased one.
    pub fn base(&self) -> Option<&Schedule> {
        match &self.repr {
            Repr::Rebased { base, .. } => Some(base),
            _ => None,
        }
    }
}

/// Time variables derived from the budget N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub r0: f64,
    pub delta: f64,
    pub n: usize,
    pub d: usize,
    pub kappa: f64,
}

impl TimeGrid {
    pub fn new(r0: f64, delta: f64, n: usize, d: usize, kappa: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 0.1) {
            return Err(Error::Argument(format!("delta must lie in (0, 0.1), got {delta}")));
        }
        if !(r0 > 0.0) || n < 2 || d == 0 || !(kappa >= 0.5) {
            return Err(Error::Argument(format!(
                "invalid time grid parameters r0={r0} n={n} d={d} kappa={kappa}"
            )));
        }
        let g = Self { r0, delta, n, d, kappa };
        if !(g.t0() < g.t_star() && g.t_star() < 1.0) {
            return Err(Error::Argument(format!(
                "need T0 < T* < 1, got T0 = {:e}, T* = {:e}",
                g.t0(),
                g.t_star()
            )));
        }
        Ok(g)
    }

    /// T₀ = N^(−R₀).
    pub fn t0(&self) -> f64 {
        (self.n as f64).powf(-self.r0)
    }

    /// T* = N^(−(1/κ − δ)/d).
    pub fn t_star(&self) -> f64 {
        (self.n as f64).powf(-(1.0 / self.kappa - self.delta) / self.d as f64)
    }

    /// t₀ = T₀, t_j = 2·t_{j−1}, last knot clamped to 1.
    pub fn partition(&self) -> Vec<f64> {
        let mut out = vec![self.t0()];
        loop {
            let next = 2.0 * out.last().copied().unwrap_or(1.0);
            if next >= 1.0 {
                out.push(1.0);
                break;
            }
            out.push(next);
        }
        out
    }

    /// `points` log-spaced times on [T₀, 1].
    pub fn log_grid(&self, points: usize) -> Vec<f64> {
        log_space(self.t0(), 1.0, points)
    }
}

pub fn log_space(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| {
            if i + 1 == points {
                hi
            } else {
                (a + (b - a) * i as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

/// Thresholds the schedule checks are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionParams {
    /// Admissible band D₀⁻¹ ≤ α² + β² ≤ D₀.
    pub d0: f64,
    /// Derivative caps |α′| + |β′|, |α″| + |β″| ≤ N^K₀.
    pub k0: f64,
    /// Upper limit N^(−γ) of the small-time integral.
    pub gamma: f64,
    /// Points in the log-spaced check grid.
    pub grid_points: usize,
}

impl Default for AssumptionParams {
    fn default() -> Self {
        Self { d0: 2.0, k0: 4.0, gamma: 1.0, grid_points: 512 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionEntry {
    pub name: String,
    pub verdict: Verdict,
    pub value: f64,
    pub bound: f64,
    pub witness_t: Option<f64>,
    pub note: String,
}

/// Small-time integral of squared derivatives with its polylog fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegralFit {
    pub order: u8,
    pub gamma: f64,
    pub value: f64,
    pub d1: f64,
    pub b1: f64,
    /// Fitted exponent of N; zero for genuinely polylogarithmic growth.
    pub n_exponent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub d0_min: f64,
    pub d0_max: f64,
    pub d0_measured: f64,
    pub k0_first: f64,
    pub k0_second: f64,
    pub integrals: Vec<IntegralFit>,
    pub entries: Vec<AssumptionEntry>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| !e.verdict.is_fail())
    }

    pub fn entry(&self, name: &str) -> Option<&AssumptionEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// ∫_{T₀}^{N^(−γ)} of (α′² + β′²) for `order` 1 or (α″² + β″²) for order 2,
/// by adaptive quadrature in log t.
pub fn derivative_energy(s: &Schedule, t0: f64, t1: f64, order: u8) -> Result<f64> {
    if t1 <= t0 {
        return Ok(0.0);
    }
    let g = |u: f64| -> f64 {
        let t = u.exp();
        match s.eval(t) {
            Ok(st) => {
                let e = if order == 1 {
                    st.alpha1 * st.alpha1 + st.beta1 * st.beta1
                } else {
                    st.alpha2 * st.alpha2 + st.beta2 * st.beta2
                };
                e * t
            }
            Err(_) => f64::NAN,
        }
    };
    let v = quad::adaptive(&g, t0.ln(), t1.ln(), 0.0, 1e-12)?;
    if !v.is_finite() {
        return Err(Error::NonFinite { name: "derivative energy", t: t0 });
    }
    Ok(v)
}

/// Grid checks of the schedule assumptions for budget `grid.n`.
pub fn check_assumptions(s: &Schedule, grid: &TimeGrid, params: &AssumptionParams) -> AssumptionReport {
    let times = grid.log_grid(params.grid_points.max(100));
    let ln_n = (grid.n as f64).ln();
    let mut entries = Vec::new();
    let mut d0_min = f64::INFINITY;
    let mut d0_max = f64::NEG_INFINITY;
    let (mut t_min, mut t_max) = (f64::NAN, f64::NAN);
    let mut k1: f64 = f64::NEG_INFINITY;
    let mut k2: f64 = f64::NEG_INFINITY;
    let (mut t_k1, mut t_k2) = (f64::NAN, f64::NAN);
    let mut range_witness: Option<(f64, String)> = None;
    let mut eval_error: Option<(f64, String)> = None;

    for &t in &times {
        let st = match s.eval(t) {
            Ok(st) => st,
            Err(e) => {
                if eval_error.is_none() {
                    eval_error = Some((t, e.to_string()));
                }
                continue;
            }
        };
        let m = st.alpha * st.alpha + st.beta * st.beta;
        if m < d0_min {
            d0_min = m;
            t_min = t;
        }
        if m > d0_max {
            d0_max = m;
            t_max = t;
        }
        if range_witness.is_none() && !(st.alpha > 0.0 && (0.0..=1.0).contains(&st.beta)) {
            range_witness = Some((t, format!("alpha = {}, beta = {}", st.alpha, st.beta)));
        }
        let e1 = (st.alpha1.abs() + st.beta1.abs()).ln() / ln_n;
        if e1 > k1 {
            k1 = e1;
            t_k1 = t;
        }
        let e2 = (st.alpha2.abs() + st.beta2.abs()).ln() / ln_n;
        if e2 > k2 {
            k2 = e2;
            t_k2 = t;
        }
    }

    if let Some((t, msg)) = eval_error {
        entries.push(AssumptionEntry {
            name: "evaluation".into(),
            verdict: Verdict::Fail,
            value: f64::NAN,
            bound: f64::NAN,
            witness_t: Some(t),
            note: msg,
        });
    }

    entries.push(AssumptionEntry {
        name: "alpha-beta-range".into(),
        verdict: Verdict::from_bool(range_witness.is_none()),
        value: f64::NAN,
        bound: f64::NAN,
        witness_t: range_witness.as_ref().map(|w| w.0),
        note: range_witness.map(|w| w.1).unwrap_or_else(|| "alpha > 0 and beta in [0, 1]".into()),
    });

    let d0_measured = d0_max.max(1.0 / d0_min);
    let d0_ok = d0_max <= params.d0 && d0_min >= 1.0 / params.d0;
    entries.push(AssumptionEntry {
        name: "d0-band".into(),
        verdict: Verdict::from_bool(d0_ok),
        value: d0_measured,
        bound: params.d0,
        witness_t: Some(if d0_max >= 1.0 / d0_min { t_max } else { t_min }),
        note: format!("alpha^2 + beta^2 in [{d0_min:.6}, {d0_max:.6}]"),
    });

    let k1c = k1.max(0.0);
    entries.push(AssumptionEntry {
        name: "first-derivative-cap".into(),
        verdict: Verdict::from_bool(k1c <= params.k0),
        value: k1c,
        bound: params.k0,
        witness_t: Some(t_k1),
        note: "smallest K0 with |alpha'| + |beta'| <= N^K0".into(),
    });
    let k2c = if k2.is_finite() { k2.max(0.0) } else { 0.0 };
    entries.push(AssumptionEntry {
        name: "second-derivative-cap".into(),
        verdict: Verdict::from_bool(k2c <= params.k0),
        value: k2c,
        bound: params.k0,
        witness_t: Some(t_k2),
        note: "smallest K0 with |alpha''| + |beta''| <= N^K0".into(),
    });

    if let Some(p) = s.power_params() {
        let lo = grid.t0();
        let pts = log_space(lo, lo * 1e3, 64);
        let xs: Vec<f64> = pts.iter().map(|t| t.ln()).collect();
        let ys: Vec<f64> = pts
            .iter()
            .map(|&t| s.values(t).map(|v| v.0.ln()).unwrap_or(f64::NAN))
            .collect();
        let fit = crate::report::fit_line(&xs, &ys);
        let ok = (fit.slope - p.kappa).abs() <= 1e-3;
        entries.push(AssumptionEntry {
            name: "small-t-power-law".into(),
            verdict: Verdict::from_bool(ok),
            value: fit.slope,
            bound: p.kappa,
            witness_t: Some(lo),
            note: "slope of log alpha against log t on [T0, 1e3 T0]".into(),
        });
    }

    let mut integrals = Vec::new();
    let kappa_half = s.kappa().map(|k| (k - 0.5).abs() < 1e-12).unwrap_or(false);
    for order in [1u8, 2u8] {
        let fit = integral_fit(s, grid, params.gamma, order);
        let name = if order == 1 { "small-t-energy-first" } else { "small-t-energy-second" };
        match fit {
            Ok(fit) => {
                let verdict = if !kappa_half {
                    Verdict::NotApplicable
                } else {
                    Verdict::from_bool(fit.n_exponent <= 0.05)
                };
                entries.push(AssumptionEntry {
                    name: name.into(),
                    verdict,
                    value: fit.value,
                    bound: fit.d1 * ln_n.powf(fit.b1),
                    witness_t: Some(grid.t0()),
                    note: format!(
                        "D1 = {:.4e}, b1 = {:.3}, growth exponent in N = {:.3}",
                        fit.d1, fit.b1, fit.n_exponent
                    ),
                });
                integrals.push(fit);
            }
            Err(e) => entries.push(AssumptionEntry {
                name: name.into(),
                verdict: if kappa_half { Verdict::Fail } else { Verdict::NotApplicable },
                value: f64::NAN,
                bound: f64::NAN,
                witness_t: Some(grid.t0()),
                note: e.to_string(),
            }),
        }
    }

    AssumptionReport {
        d0_min,
        d0_max,
        d0_measured,
        k0_first: k1c,
        k0_second: k2c,
        integrals,
        entries,
    }
}

/// Energy integral at N and a fit of D₁·log^b₁ N over N·2^i, i ∈ −2..=2.
pub fn integral_fit(s: &Schedule, grid: &TimeGrid, gamma: f64, order: u8) -> Result<IntegralFit> {
    let mut lx = Vec::new();
    let mut lnn = Vec::new();
    let mut ly = Vec::new();
    let mut value = f64::NAN;
    for i in -2i32..=2 {
        let n = (grid.n as f64 * 2f64.powi(i)).max(2.0);
        let t0 = n.powf(-grid.r0);
        let t1 = n.powf(-gamma).min(1.0);
        let v = derivative_energy(s, t0, t1, order)?;
        if i == 0 {
            value = v;
        }
        lx.push(n.ln().ln());
        lnn.push(n.ln());
        ly.push(v.max(1e-300).ln());
    }
    if ly.iter().all(|&y| y <= (1e-300f64).ln() + 1.0) {
        return Ok(IntegralFit { order, gamma, value, d1: 0.0, b1: 0.0, n_exponent: 0.0 });
    }
    let polylog = crate::report::fit_line(&lx, &ly);
    let power = crate::report::fit_line(&lnn, &ly);
    let b1 = polylog.slope.max(0.0);
    let ln_n = (grid.n as f64).ln();
    let d1 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - b1 * x).exp())
        .fold(0.0f64, f64::max);
    let _ = ln_n;
    Ok(IntegralFit { order, gamma, value, d1, b1, n_exponent: power.slope - b1 / ln_n.max(1.0) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sqrt_power() -> Schedule {
        Schedule::power(PowerLaw { b0: 1.0, kappa: 0.5, b0_tilde: 1.0, kappa_tilde: 1.0 }).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn linear_midpoint() {
        let s = Schedule::linear().eval(0.5).unwrap();
        assert_eq!((s.alpha, s.beta, s.alpha1, s.beta1, s.alpha2, s.beta2), (0.5, 0.5, -1.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn sqrt_power_quarter() {
        let s = sqrt_power().eval(0.25).unwrap();
        assert!(close(s.alpha, 0.5, 1e-15));
        assert!(close(s.beta, 0.75, 1e-15));
        assert!(close(s.alpha1, 1.0, 1e-15));
        assert!(close(s.beta1, -1.0, 1e-15));
        assert!(close(s.alpha2, -2.0, 1e-15));
        assert_eq!(s.beta2, 0.0);
    }

    #[test]
    fn sqrt_power_at_one() {
        let s = sqrt_power().eval(1.0).unwrap();
        assert!(close(s.alpha, 1.0, 1e-15));
        assert!(close(s.alpha1, 0.5, 1e-15));
        assert!(close(s.alpha2, -0.25, 1e-15));
    }

    #[test]
    fn sqrt_power_at_zero_names_derivative() {
        match sqrt_power().eval(0.0) {
            Err(Error::NonFinite { name, .. }) => assert_eq!(name, "alpha'"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn derivative_check_base_and_rebased() {
        let s = sqrt_power();
        let r = s.rebase(0.05).unwrap();
        for t in [0.11, 0.2, 0.5, 0.9] {
            assert!(s.derivative_error(t, 1e-5).unwrap() <= 1e-6, "base t={t}");
            assert!(r.derivative_error(t, 1e-5).unwrap() <= 1e-6, "rebased t={t}");
        }
    }

    #[test]
    fn rebased_collapses_at_anchor() {
        let s = sqrt_power();
        let r = s.rebase(0.1).unwrap();
        let (a, b) = r.values(0.1).unwrap();
        assert!(a.abs() < 1e-7);
        assert!((b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rectified_rebased_endpoint() {
        let r = Schedule::rectified().rebase(0.5).unwrap();
        let (a, b) = r.values(1.0).unwrap();
        assert!((a - 1.0).abs() < 1e-15);
        assert!(b.abs() < 1e-15);
    }

    #[test]
    fn rebased_sqrt_power_hand_expansion() {
        // beta~ = (1 - t)/(1 - t*), alpha~^2 = t - beta~^2 * t*.
        let r = sqrt_power().rebase(0.25).unwrap();
        let t: f64 = 0.75;
        let bt = (1.0 - t) / 0.75;
        let at = (t - bt * bt * 0.25).sqrt();
        let (a, b) = r.values(t).unwrap();
        assert!(close(a, at, 1e-15) && close(b, bt, 1e-15));
        // d/dt alpha~^2 = 1 + 2*beta~*t*/(1 - t*)
        let st = r.eval(t).unwrap();
        let r1 = 1.0 + 2.0 * bt * 0.25 / 0.75;
        assert!(close(st.alpha1, r1 / (2.0 * at), 1e-14));
        let r2 = -2.0 * 0.25 / (0.75 * 0.75);
        let a2 = (0.5 * r2 - st.alpha1 * st.alpha1) / at;
        assert!(close(st.alpha2, a2, 1e-14));
        assert!(close(st.beta1, -1.0 / 0.75, 1e-15));
    }

    #[test]
    fn linear_rebase_is_rejected() {
        assert!(matches!(Schedule::linear().rebase(0.5), Err(Error::NegativeRadicand { .. })));
    }

    #[test]
    fn rebased_alpha_floor() {
        let s = sqrt_power();
        let ts = 0.25;
        let r = s.rebase(ts).unwrap();
        let g = TimeGrid::new(4.0, 0.05, 256, 1, 0.5).unwrap();
        let rep = check_assumptions(&s, &g, &AssumptionParams::default());
        for i in 0..200 {
            let t = 2.0 * ts + (1.0 - 2.0 * ts) * i as f64 / 199.0;
            let (a, _) = r.values(t).unwrap();
            assert!(a * a >= 1.0 / (2.0 * rep.d0_measured), "t={t}");
        }
    }

    #[test]
    fn time_grid_partition() {
        let g = TimeGrid::new(4.0, 0.05, 64, 1, 0.5).unwrap();
        assert!(g.t0() < g.t_star() && g.t_star() < 1.0);
        let p = g.partition();
        assert_eq!(*p.last().unwrap(), 1.0);
        for w in p.windows(2) {
            assert!(w[1] > w[0]);
        }
        for w in p[..p.len() - 1].windows(2) {
            assert!((w[1] - 2.0 * w[0]).abs() < 1e-18);
        }
    }

    #[test]
    fn linear_assumptions_and_zero_energy() {
        let g = TimeGrid::new(4.0, 0.05, 256, 1, 0.5).unwrap();
        let rep = check_assumptions(&Schedule::linear(), &g, &AssumptionParams::default());
        let e = rep.entry("small-t-energy-second").unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.verdict, Verdict::NotApplicable);
        // alpha^2 + beta^2 = (1-t)^2 + t^2 is extremal at the grid ends or t = 1/2.
        assert!((rep.d0_min - 0.5).abs() < 1e-3);
        assert!(rep.d0_max <= 1.0);
    }

    #[test]
    fn energy_integral_against_log_trapezoid() {
        let s = sqrt_power();
        let n: f64 = 256.0;
        let t0 = n.powf(-4.0);
        let t1 = n.powf(-1.0);
        let v = derivative_energy(&s, t0, t1, 2).unwrap();
        let oracle = quad::trapezoid(
            |u| {
                let t = u.exp();
                (t.powf(-1.5) / 4.0).powi(2) * t
            },
            t0.ln(),
            t1.ln(),
            1_000_000,
        );
        assert!((v - oracle).abs() <= 1e-6 * oracle);
    }

    #[test]
    fn invalid_beta_fails_band() {
        let f: StateFn = Arc::new(|t: f64| ScheduleState {
            alpha: 0.5 * t + 0.1,
            beta: 2.0,
            alpha1: 0.5,
            beta1: 0.0,
            alpha2: 0.0,
            beta2: 0.0,
        });
        let s = Schedule::custom("beta-two", f, &[0.3, 0.6]).unwrap();
        let g = TimeGrid::new(4.0, 0.05, 64, 1, 0.5).unwrap();
        let rep = check_assumptions(&s, &g, &AssumptionParams::default());
        let band = rep.entry("d0-band").unwrap();
        assert_eq!(band.verdict, Verdict::Fail);
        assert!(band.value > 2.0);
        assert_eq!(rep.entry("alpha-beta-range").unwrap().verdict, Verdict::Fail);
    }

    #[test]
    fn custom_rejects_wrong_derivatives() {
        let f: StateFn = Arc::new(|t: f64| ScheduleState {
            alpha: 1.0 - t,
            beta: t,
            alpha1: 1.0,
            beta1: 1.0,
            alpha2: 0.0,
            beta2: 0.0,
        });
        assert!(Schedule::custom("bad", f, &[0.5]).is_err());
    }

    #[test]
    fn power_small_t_slope() {
        let g = TimeGrid::new(4.0, 0.05, 256, 1, 0.5).unwrap();
        let rep = check_assumptions(&sqrt_power(), &g, &AssumptionParams::default());
        assert_eq!(rep.entry("small-t-power-law").unwrap().verdict, Verdict::Pass);
        assert_eq!(rep.entry("small-t-energy-first").unwrap().verdict, Verdict::Pass);
    }
}
