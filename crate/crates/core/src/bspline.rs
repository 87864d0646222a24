//! Cardinal and tensor-product B-splines, least-squares expansions on the
//! multilevel dictionary, Gaussian-convolved features and the acceleration
//! approximator f₄ built from them.
//!
//! Convention: `cardinal_bspline(ell, ·)` is the degree-ℓ spline supported on
//! [0, ℓ+1] (ℓ+1 self-convolutions of the unit indicator). A term
//! M_{k,j}(x) = Π cardinal_bspline(ℓ, 2^{k_m} x_m − j_m) overlaps the open
//! cube exactly when −2^k − ℓ ≤ j ≤ 2^k − 1.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::density::{BesovParams, Density};
use crate::error::{Error, Result};
use crate::quad;
use crate::schedule::ScheduleState;

/// Degree-ℓ cardinal B-spline, supported on [0, ℓ+1), by the Cox–de Boor
/// recursion on integer knots.
pub fn cardinal_bspline(ell: usize, x: f64) -> f64 {
    if !(x >= 0.0 && x < (ell + 1) as f64) {
        return 0.0;
    }
    let mut vals: Vec<f64> = (0..=ell)
        .map(|i| {
            let u = x - i as f64;
            if (0.0..1.0).contains(&u) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for m in 1..=ell {
        let mf = m as f64;
        for i in 0..=(ell - m) {
            let u = x - i as f64;
            vals[i] = (u * vals[i] + (mf + 1.0 - u) * vals[i + 1]) / mf;
        }
    }
    vals[0]
}

/// Π_m cardinal_bspline(ℓ, 2^{k_m} x_m − j_m).
pub fn tensor_bspline(k: &[u32], j: &[i64], ell: usize, x: &[f64]) -> f64 {
    debug_assert!(k.len() == j.len() && j.len() == x.len());
    let mut v = 1.0;
    for m in 0..x.len() {
        v *= cardinal_bspline(ell, (x[m] * (1u64 << k[m]) as f64) - j[m] as f64);
        if v == 0.0 {
            return 0.0;
        }
    }
    v
}

/// Shift range of one axis at level k: every index whose spline meets (−1, 1).
pub fn shift_range(k: u32, ell: usize) -> (i64, i64) {
    let s = 1i64 << k;
    (-s - ell as i64, s - 1)
}

/// Something that can be fitted: a density or a plain function on I^d.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn kinks(&self) -> Vec<f64> {
        Vec::new()
    }
    fn scale(&self) -> f64 {
        f64::INFINITY
    }
}

impl Target for Density {
    fn dim(&self) -> usize {
        self.d
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
    fn kinks(&self) -> Vec<f64> {
        self.breakpoints()
    }
    fn scale(&self) -> f64 {
        self.feature_scale()
    }
}

/// A closure on I^d with optional per-axis breakpoints.
pub struct FnTarget<F> {
    pub d: usize,
    pub f: F,
    pub breaks: Vec<f64>,
    pub scale: f64,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnTarget<F> {
    pub fn new(d: usize, f: F) -> Self {
        Self { d, f, breaks: Vec::new(), scale: f64::INFINITY }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Target for FnTarget<F> {
    fn dim(&self) -> usize {
        self.d
    }
    fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
    fn kinks(&self) -> Vec<f64> {
        self.breaks.clone()
    }
    fn scale(&self) -> f64 {
        self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SupportFlag {
    /// Multiplied by 1[‖x‖∞ ≤ 1].
    Full,
    /// Multiplied by 1[‖x‖∞ ≤ contraction].
    Contracted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub k: Vec<u32>,
    pub j: Vec<i64>,
    pub coef: f64,
    pub support: SupportFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    Single,
    TwoPart,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub l2_error: f64,
    /// Last complete uniform level.
    pub uniform_levels: u32,
    pub adaptive_level: u32,
    pub adaptive_terms: usize,
    pub max_coef: f64,
    pub coef_bound: f64,
    pub coef_bound_ok: bool,
}

#[derive(Debug, Clone)]
pub struct BSplineExpansion {
    pub d: usize,
    pub ell: usize,
    /// Budget N the expansion was built for.
    pub n: usize,
    /// Half-width of the contracted cube; 1 when unused.
    pub contraction: f64,
    pub terms: Vec<Term>,
    pub fit: Option<FitSummary>,
}

fn strip_indicator(x: &[f64], half: f64) -> bool {
    x.iter().all(|v| v.abs() <= half) && x.iter().all(|v| v.abs() < 1.0)
}

impl BSplineExpansion {
    pub fn new(d: usize, ell: usize, n: usize, contraction: f64, terms: Vec<Term>) -> Result<Self> {
        for t in &terms {
            if t.k.len() != d || t.j.len() != d {
                return Err(Error::DimMismatch { expected: d, got: t.k.len().min(t.j.len()) });
            }
            for m in 0..d {
                let (lo, hi) = shift_range(t.k[m], ell);
                if t.j[m] < lo || t.j[m] > hi + 1 {
                    return Err(Error::Argument(format!(
                        "shift {} outside [{lo}, {}] at level {}",
                        t.j[m],
                        hi + 1,
                        t.k[m]
                    )));
                }
            }
        }
        if !(contraction > 0.0 && contraction <= 1.0) {
            return Err(Error::Argument(format!("contraction {contraction} must lie in (0, 1]")));
        }
        Ok(Self { d, ell, n, contraction, terms, fit: None })
    }

    pub fn zero(d: usize, ell: usize) -> Self {
        Self { d, ell, n: 0, contraction: 1.0, terms: Vec::new(), fit: None }
    }

    fn half_width(&self, flag: SupportFlag) -> f64 {
        match flag {
            SupportFlag::Full => 1.0,
            SupportFlag::Contracted => self.contraction,
        }
    }

    /// f_N(x); exactly zero for ‖x‖∞ ≥ 1.
    pub fn eval(&self, x: &[f64]) -> f64 {
        if x.iter().any(|v| !(v.abs() < 1.0)) {
            return 0.0;
        }
        let mut s = 0.0;
        for t in &self.terms {
            if t.support == SupportFlag::Contracted && !strip_indicator(x, self.contraction) {
                continue;
            }
            s += t.coef * tensor_bspline(&t.k, &t.j, self.ell, x);
        }
        s
    }

    pub fn finest_level(&self) -> u32 {
        self.terms.iter().flat_map(|t| t.k.iter().copied()).max().unwrap_or(0)
    }

    /// Knots along one axis inside [−1, 1], plus the contraction edges.
    pub fn knots(&self) -> Vec<f64> {
        let m = 1i64 << self.finest_level();
        let mut out: Vec<f64> = (-m..=m).map(|i| i as f64 / m as f64).collect();
        if self.contraction < 1.0 {
            out.push(-self.contraction);
            out.push(self.contraction);
        }
        out.sort_by(f64::total_cmp);
        out
    }

    /// ∫_{I^d} f_N, exact up to rounding.
    pub fn integral(&self) -> f64 {
        let g = quad::rule(self.ell + 2);
        let mut total = 0.0;
        for t in &self.terms {
            let h = self.half_width(t.support);
            let mut prod = t.coef;
            for m in 0..self.d {
                let scale = (1u64 << t.k[m]) as f64;
                let mut s = 0.0;
                for p in 0..=self.ell as i64 {
                    let a = ((t.j[m] + p) as f64 / scale).max(-h);
                    let b = ((t.j[m] + p + 1) as f64 / scale).min(h);
                    if b > a {
                        s += g.integrate(a, b, |y| cardinal_bspline(self.ell, scale * y - t.j[m] as f64));
                    }
                }
                prod *= s;
            }
            total += prod;
        }
        total
    }

    pub fn max_abs_coef(&self) -> f64 {
        self.terms.iter().map(|t| t.coef.abs()).fold(0.0, f64::max)
    }

    /// Flat text form: a header `d ell N contraction`, then one line per
    /// term `k... j... A flag`. Floats use Rust's shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {} {:?}\n", self.d, self.ell, self.n, self.contraction);
        for t in &self.terms {
            for k in &t.k {
                let _ = write!(s, "{k} ");
            }
            for j in &t.j {
                let _ = write!(s, "{j} ");
            }
            let flag = match t.support {
                SupportFlag::Full => "full",
                SupportFlag::Contracted => "contracted",
            };
            let _ = writeln!(s, "{:?} {flag}", t.coef);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty input".into() })?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        if h.len() != 4 {
            return Err(bad(1, "header needs d ell N contraction"));
        }
        let d: usize = h[0].parse().map_err(|_| bad(1, "bad d"))?;
        let ell: usize = h[1].parse().map_err(|_| bad(1, "bad ell"))?;
        let n: usize = h[2].parse().map_err(|_| bad(1, "bad N"))?;
        let contraction: f64 = h[3].parse().map_err(|_| bad(1, "bad contraction"))?;
        let mut terms = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 2 * d + 2 {
                return Err(bad(i + 1, "wrong field count"));
            }
            let k = f[..d]
                .iter()
                .map(|v| v.parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(i + 1, "bad level"))?;
            let j = f[d..2 * d]
                .iter()
                .map(|v| v.parse::<i64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(i + 1, "bad shift"))?;
            let coef: f64 = f[2 * d].parse().map_err(|_| bad(i + 1, "bad coefficient"))?;
            let support = match f[2 * d + 1] {
                "full" => SupportFlag::Full,
                "contracted" => SupportFlag::Contracted,
                _ => return Err(bad(i + 1, "flag must be full or contracted")),
            };
            terms.push(Term { k, j, coef, support });
        }
        Self::new(d, ell, n, contraction, terms)
    }
}

/// Options for `fit_expansion`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitOptions {
    pub ell: usize,
    pub structure: Structure,
    pub ridge: f64,
    /// κ and δ for the contracted cube of the two-part form.
    pub kappa: f64,
    pub delta: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { ell: 4, structure: Structure::Single, ridge: 1e-10, kappa: 0.5, delta: 0.05 }
    }
}

/// Quadrature nodes on I^d (or a sub-box) shared by fitting and error
/// measurement.
#[derive(Debug, Clone)]
pub struct FitGrid {
    pub axes: Vec<Vec<(f64, f64)>>,
}

impl FitGrid {
    pub fn new(d: usize, lo: f64, hi: f64, finest: u32, target_breaks: &[f64], scale: f64, nodes: usize) -> Self {
        let m = 1i64 << finest;
        let mut breaks: Vec<f64> = (-m..=m).map(|i| i as f64 / m as f64).collect();
        breaks.extend_from_slice(target_breaks);
        let panels = quad::panels(lo, hi, &breaks, scale.min(1.0 / m as f64));
        let g = quad::rule(nodes);
        let axis: Vec<(f64, f64)> = panels.iter().flat_map(|&(a, b)| g.mapped(a, b).collect::<Vec<_>>()).collect();
        Self { axes: vec![axis; d] }
    }

    pub fn visit<F: FnMut(&[f64], f64)>(&self, f: F) {
        quad::tensor_visit(&self.axes, f)
    }
}

fn level_count(k: u32, ell: usize, d: usize) -> usize {
    let (lo, hi) = shift_range(k, ell);
    ((hi - lo + 1) as usize).pow(d as u32)
}

fn level_terms(k: u32, ell: usize, d: usize) -> Vec<Vec<i64>> {
    let (lo, hi) = shift_range(k, ell);
    let mut out: Vec<Vec<i64>> = vec![Vec::new()];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|p| {
                (lo..=hi).map(move |j| {
                    let mut q = p.clone();
                    q.push(j);
                    q
                })
            })
            .collect();
    }
    out
}

/// Sparse evaluation of a dictionary of isotropic-level terms.
struct Dictionary {
    d: usize,
    ell: usize,
    /// (level, shifts, support) per column.
    cols: Vec<(u32, Vec<i64>, SupportFlag)>,
    lookup: HashMap<(u32, Vec<i64>, SupportFlag), usize>,
    levels: Vec<(u32, SupportFlag)>,
    contraction: f64,
}

impl Dictionary {
    fn new(d: usize, ell: usize, contraction: f64) -> Self {
        Self { d, ell, cols: Vec::new(), lookup: HashMap::new(), levels: Vec::new(), contraction }
    }

    fn push(&mut self, k: u32, j: Vec<i64>, s: SupportFlag) {
        let key = (k, j.clone(), s);
        if self.lookup.contains_key(&key) {
            return;
        }
        if !self.levels.contains(&(k, s)) {
            self.levels.push((k, s));
        }
        self.lookup.insert(key, self.cols.len());
        self.cols.push((k, j, s));
    }

    /// Nonzero (column, value) pairs at x.
    fn row(&self, x: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let ell = self.ell as i64;
        for &(k, s) in &self.levels {
            if s == SupportFlag::Contracted && !strip_indicator(x, self.contraction) {
                continue;
            }
            let scale = (1u64 << k) as f64;
            let base: Vec<i64> = x.iter().map(|v| (v * scale).floor() as i64).collect();
            let count = (ell + 1).pow(self.d as u32);
            let mut j = vec![0i64; self.d];
            for c in 0..count {
                let mut r = c;
                for m in 0..self.d {
                    j[m] = base[m] - (r % (ell + 1) as i64);
                    r /= ell + 1;
                }
                if let Some(&col) = self.lookup.get(&(k, j.clone(), s)) {
                    let kk = vec![k; self.d];
                    let v = tensor_bspline(&kk, &j, self.ell, x);
                    if v != 0.0 {
                        out.push((col, v));
                    }
                }
            }
        }
    }

    fn terms(&self, coef: &[f64]) -> Vec<Term> {
        self.cols
            .iter()
            .zip(coef)
            .map(|((k, j, s), &c)| Term { k: vec![*k; self.d], j: j.clone(), coef: c, support: *s })
            .collect()
    }
}

fn least_squares<T: Target + ?Sized>(dict: &Dictionary, grid: &FitGrid, f: &T, resid_of: Option<&BSplineExpansion>, ridge: f64) -> Result<Vec<f64>> {
    let n = dict.cols.len();
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut row = Vec::new();
    grid.visit(|x, w| {
        dict.row(x, &mut row);
        if row.is_empty() {
            return;
        }
        let mut y = f.value(x);
        if let Some(e) = resid_of {
            y -= e.eval(x);
        }
        for &(a, va) in &row {
            rhs[a] += w * va * y;
            for &(b, vb) in &row {
                gram[(a, b)] += w * va * vb;
            }
        }
    });
    let diag_max = (0..n).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    for i in 0..n {
        gram[(i, i)] += ridge * diag_max.max(1e-300);
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("B-spline Gram matrix is not positive definite".into()))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// Budget split of the resolution ladder: complete levels 0..=K and the
/// number of leftover terms placed greedily at level K+1.
pub fn ladder(n: usize, ell: usize, d: usize) -> Result<(u32, usize)> {
    let first = level_count(0, ell, d);
    if n < first {
        return Err(Error::Config(format!(
            "budget {n} cannot cover level 0, which needs {first} terms"
        )));
    }
    let mut used = 0;
    let mut k = 0u32;
    loop {
        let c = level_count(k, ell, d);
        if used + c > n {
            return Ok((k - 1, n - used));
        }
        used += c;
        k += 1;
    }
}

/// Least-squares fit on the multilevel dictionary with budget N: complete
/// levels 0..=K, then the leftover budget spent on level-(K+1) terms with the
/// largest normalized residual correlation (ties by shift order).
pub fn fit_expansion<T: Target + ?Sized>(f: &T, n: usize, params: &BesovParams, opts: &FitOptions) -> Result<BSplineExpansion> {
    let d = f.dim();
    match opts.structure {
        Structure::Single => fit_single(f, n, params, opts, SupportFlag::Full, 1.0, None),
        Structure::TwoPart => {
            let contraction = 1.0 - (n as f64).powf(-(1.0 / opts.kappa - opts.delta) / d as f64);
            let base = fit_single(f, n, params, opts, SupportFlag::Full, 1.0, None)?;
            let inner = fit_single(f, 2 * n, params, opts, SupportFlag::Contracted, contraction, Some(&base))?;
            let mut terms = base.terms;
            terms.extend(inner.terms);
            let mut out = BSplineExpansion::new(d, opts.ell, n, contraction, terms)?;
            let grid = error_grid(&out, f);
            let err = l2_error_on(&out, f, &grid, Region::Full, opts);
            let mut summary = inner.fit.clone().unwrap_or_else(|| base.fit.clone().expect("fit summary"));
            summary.l2_error = err;
            summary.max_coef = out.max_abs_coef();
            summary.coef_bound_ok = summary.max_coef <= summary.coef_bound;
            out.fit = Some(summary);
            Ok(out)
        }
    }
}

fn coef_bound(n: usize, params: &BesovParams, d: usize) -> f64 {
    let omega = d as f64 * (1.0 / params.p_prime - 0.5).max(0.0);
    let expo_extra = (d as f64 / params.p_prime - params.s).max(0.0);
    if expo_extra == 0.0 {
        return 1.0;
    }
    let nu = (params.s - omega) / (2.0 * omega);
    let inv_nu = if nu.is_finite() { 1.0 / nu } else { 0.0 };
    (n as f64).powf((inv_nu + 1.0 / d as f64) * expo_extra)
}

fn fit_single<T: Target + ?Sized>(
    f: &T,
    n: usize,
    params: &BesovParams,
    opts: &FitOptions,
    flag: SupportFlag,
    contraction: f64,
    base: Option<&BSplineExpansion>,
) -> Result<BSplineExpansion> {
    let d = f.dim();
    let ell = opts.ell;
    let (k_top, leftover) = ladder(n, ell, d)?;
    let mut dict = Dictionary::new(d, ell, contraction);
    for k in 0..=k_top {
        for j in level_terms(k, ell, d) {
            dict.push(k, j, flag);
        }
    }
    let half = if flag == SupportFlag::Contracted { contraction } else { 1.0 };
    let nodes = (ell + 2).max(6);
    let grid = FitGrid::new(d, -half, half, k_top + 1, &f.kinks(), f.scale(), nodes);
    let coef = least_squares(&dict, &grid, f, base, opts.ridge)?;
    let mut adaptive_terms = 0;
    let coef = if leftover > 0 {
        let partial = BSplineExpansion {
            d,
            ell,
            n,
            contraction,
            terms: dict.terms(&coef),
            fit: None,
        };
        let candidates = level_terms(k_top + 1, ell, d);
        let mut cand = Dictionary::new(d, ell, contraction);
        for j in &candidates {
            cand.push(k_top + 1, j.clone(), flag);
        }
        let mut inner = vec![0.0; cand.cols.len()];
        let mut norm = vec![0.0; cand.cols.len()];
        let mut row = Vec::new();
        grid.visit(|x, w| {
            cand.row(x, &mut row);
            if row.is_empty() {
                return;
            }
            let mut r = f.value(x) - partial.eval(x);
            if let Some(b) = base {
                r -= b.eval(x);
            }
            for &(c, v) in &row {
                inner[c] += w * v * r;
                norm[c] += w * v * v;
            }
        });
        let mut order: Vec<usize> = (0..cand.cols.len()).filter(|&c| norm[c] > 0.0).collect();
        order.sort_by(|&a, &b| {
            let sa = inner[a].abs() / norm[a].sqrt();
            let sb = inner[b].abs() / norm[b].sqrt();
            sb.total_cmp(&sa).then_with(|| cand.cols[a].1.cmp(&cand.cols[b].1))
        });
        for &c in order.iter().take(leftover) {
            dict.push(k_top + 1, cand.cols[c].1.clone(), flag);
            adaptive_terms += 1;
        }
        least_squares(&dict, &grid, f, base, opts.ridge)?
    } else {
        coef
    };
    let mut out = BSplineExpansion::new(d, ell, n, contraction, dict.terms(&coef))?;
    let egrid = error_grid(&out, f);
    let mut summary = FitSummary {
        l2_error: 0.0,
        uniform_levels: k_top,
        adaptive_level: k_top + 1,
        adaptive_terms,
        max_coef: out.max_abs_coef(),
        coef_bound: coef_bound(n, params, d),
        coef_bound_ok: false,
    };
    summary.coef_bound_ok = summary.max_coef <= summary.coef_bound;
    if base.is_none() {
        summary.l2_error = l2_error_on(&out, f, &egrid, Region::Full, opts);
    }
    out.fit = Some(summary);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Full,
    /// I^d minus the contracted cube of half-width 1 − width.
    BoundaryStrip { width: f64 },
}

/// Strip width N^{−(1−κδ)} of the contracted cube I^d_N.
pub fn strip_width(n: usize, kappa: f64, delta: f64) -> f64 {
    (n as f64).powf(-(1.0 - kappa * delta))
}

fn error_grid<T: Target + ?Sized>(e: &BSplineExpansion, f: &T) -> FitGrid {
    let mut breaks = f.kinks();
    breaks.extend(e.knots());
    FitGrid::new(e.d, -1.0, 1.0, e.finest_level() + 1, &breaks, f.scale(), (e.ell + 2).max(6))
}

fn l2_error_on<T: Target + ?Sized>(e: &BSplineExpansion, f: &T, grid: &FitGrid, region: Region, _opts: &FitOptions) -> f64 {
    let mut s = 0.0;
    let inner = match region {
        Region::Full => None,
        Region::BoundaryStrip { width } => Some(1.0 - width),
    };
    grid.visit(|x, w| {
        if let Some(h) = inner {
            if x.iter().all(|v| v.abs() <= h) {
                return;
            }
        }
        let r = f.value(x) - e.eval(x);
        s += w * r * r;
    });
    s.sqrt()
}

/// ‖f − f_N‖ in L² over the cube or over the boundary strip. Uses the same
/// quadrature as `fit_expansion`, so the full-cube value reproduces the
/// recorded fit error.
pub fn l2_error<T: Target + ?Sized>(e: &BSplineExpansion, f: &T, region: Region) -> f64 {
    let grid = error_grid(e, f);
    let mut breaks = vec![];
    if let Region::BoundaryStrip { width } = region {
        breaks.push(-1.0 + width);
        breaks.push(1.0 - width);
    }
    let grid = if breaks.is_empty() {
        grid
    } else {
        let mut b = f.kinks();
        b.extend(e.knots());
        b.extend(breaks);
        FitGrid::new(e.d, -1.0, 1.0, e.finest_level() + 1, &b, f.scale(), (e.ell + 2).max(6))
    };
    l2_error_on(e, f, &grid, region, &FitOptions::default())
}

/// Gaussian-convolved integrals of an expansion at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    /// ∫ φ_α(x − βy) f_N(y) dy.
    pub f1_tilde: f64,
    /// ∫ (x − βy)/α · φ_α(x − βy) f_N(y) dy.
    pub f2: Vec<f64>,
    /// ∫ y · φ_α(x − βy) f_N(y) dy.
    pub f3: Vec<f64>,
}

/// Quadrature controls for the convolved features.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeatureQuadrature {
    /// Window half-width constant C_b and reference N in C_b·√(ln N)·α/β.
    pub c_b: f64,
    pub n_ref: f64,
    /// Apply the window only when α/β is below this.
    pub window_below: f64,
    /// Panels are capped at this many kernel widths α/β.
    pub panel_sigmas: f64,
    pub nodes: usize,
}

impl Default for FeatureQuadrature {
    fn default() -> Self {
        Self { c_b: 5.0, n_ref: 256.0, window_below: 0.05, panel_sigmas: 2.0, nodes: 12 }
    }
}

impl FeatureQuadrature {
    /// y-window centred at x/β, or the whole line when the kernel is wide.
    pub fn window(&self, x: f64, st: &ScheduleState) -> (f64, f64) {
        if st.beta <= 0.0 {
            return (f64::NEG_INFINITY, f64::INFINITY);
        }
        let ratio = st.alpha / st.beta;
        if ratio >= self.window_below {
            return (f64::NEG_INFINITY, f64::INFINITY);
        }
        let w = self.c_b * self.n_ref.ln().sqrt() * ratio;
        (x / st.beta - w, x / st.beta + w)
    }
}

/// (G0, G1, Gy) for one axis factor y ↦ cardinal_bspline(ℓ, 2^k y − j) on
/// [−h, h] against the one-dimensional kernel.
fn axis_integrals(k: u32, j: i64, ell: usize, h: f64, x: f64, st: &ScheduleState, q: &FeatureQuadrature) -> [f64; 3] {
    let (alpha, beta) = (st.alpha, st.beta);
    let (wlo, whi) = q.window(x, st);
    let scale = (1u64 << k) as f64;
    let g = quad::rule(q.nodes);
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * alpha);
    let sig_y = if beta > 0.0 { alpha / beta } else { f64::INFINITY };
    let mut out = [0.0; 3];
    for p in 0..=ell as i64 {
        let a = ((j + p) as f64 / scale).max(-h).max(wlo);
        let b = ((j + p + 1) as f64 / scale).min(h).min(whi);
        if !(b > a) {
            continue;
        }
        let pieces = if sig_y.is_finite() {
            ((b - a) / (q.panel_sigmas * sig_y)).ceil().max(1.0) as usize
        } else {
            1
        };
        let step = (b - a) / pieces as f64;
        for i in 0..pieces {
            let pa = a + step * i as f64;
            for (y, w) in g.mapped(pa, pa + step) {
                let z = (x - beta * y) / alpha;
                let kern = norm * (-0.5 * z * z).exp();
                if kern == 0.0 {
                    continue;
                }
                let v = w * kern * cardinal_bspline(ell, scale * y - j as f64);
                out[0] += v;
                out[1] += v * z;
                out[2] += v * y;
            }
        }
    }
    out
}

/// f̃, f₂ and f₃ of the expansion at x under the path state `st`. Tensor
/// terms factorize, so only one-dimensional integrals are computed; they are
/// cached per (axis, level, shift).
pub fn gauss_convolved_features(e: &BSplineExpansion, st: &ScheduleState, x: &[f64], q: &FeatureQuadrature) -> Result<Features> {
    if !(st.alpha > 0.0) {
        return Err(Error::Argument(format!("features need alpha > 0, got {}", st.alpha)));
    }
    if x.len() != e.d {
        return Err(Error::DimMismatch { expected: e.d, got: x.len() });
    }
    let d = e.d;
    let mut cache: Vec<HashMap<(u32, i64, SupportFlag), [f64; 3]>> = vec![HashMap::new(); d];
    let mut f1 = 0.0;
    let mut f2 = vec![0.0; d];
    let mut f3 = vec![0.0; d];
    let mut g = vec![[0.0; 3]; d];
    for t in &e.terms {
        let h = e.half_width(t.support);
        let mut zero = false;
        for m in 0..d {
            let key = (t.k[m], t.j[m], t.support);
            let v = *cache[m]
                .entry(key)
                .or_insert_with(|| axis_integrals(t.k[m], t.j[m], e.ell, h, x[m], st, q));
            if v[0] == 0.0 && v[1] == 0.0 && v[2] == 0.0 {
                zero = true;
                break;
            }
            g[m] = v;
        }
        if zero {
            continue;
        }
        let all: f64 = g.iter().map(|v| v[0]).product();
        f1 += t.coef * all;
        for m in 0..d {
            let others: f64 = (0..d).filter(|&i| i != m).map(|i| g[i][0]).product();
            f2[m] += t.coef * g[m][1] * others;
            f3[m] += t.coef * g[m][2] * others;
        }
    }
    for v in [&f1].into_iter().chain(f2.iter()).chain(f3.iter()) {
        if !v.is_finite() {
            return Err(Error::NonFinite { name: "feature".into(), t: f64::NAN });
        }
    }
    Ok(Features { f1_tilde: f1, f2, f3 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientMode {
    /// c₂ = α″ − α′²/α, c₃ = β″ − α′β′/α: the conditional acceleration.
    Exact,
    /// (α″, β″) as written in the construction.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndicatorMode {
    PerCoordinate,
    Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct F4Options {
    pub coefficients: CoefficientMode,
    pub indicator: IndicatorMode,
}

impl Default for F4Options {
    fn default() -> Self {
        Self { coefficients: CoefficientMode::Exact, indicator: IndicatorMode::PerCoordinate }
    }
}

pub fn f4_coefficients(st: &ScheduleState, mode: CoefficientMode) -> (f64, f64) {
    match mode {
        CoefficientMode::Exact => st.accel_coefficients(),
        CoefficientMode::Literal => (st.alpha2, st.beta2),
    }
}

/// f₄ = (c₂f₂ + c₃f₃)/f₁ with f₁ = max{f̃, clamp}, gated by
/// 1[|f₂/f₁| ≤ C₅√ln N] and 1[|f₃/f₁| ≤ C₅].
pub fn assemble_f4(features: &Features, st: &ScheduleState, clamp: f64, c5: f64, n: usize, opts: &F4Options) -> Vec<f64> {
    let (c2, c3) = f4_coefficients(st, opts.coefficients);
    assemble_f4_with(features, c2, c3, clamp, c5, n, opts.indicator)
}

pub fn assemble_f4_with(features: &Features, c2: f64, c3: f64, clamp: f64, c5: f64, n: usize, indicator: IndicatorMode) -> Vec<f64> {
    let f1 = features.f1_tilde.max(clamp);
    let e2: Vec<f64> = features.f2.iter().map(|v| v / f1).collect();
    let e3: Vec<f64> = features.f3.iter().map(|v| v / f1).collect();
    let cap2 = c5 * (n as f64).ln().sqrt();
    match indicator {
        IndicatorMode::PerCoordinate => e2
            .iter()
            .zip(&e3)
            .map(|(a, b)| if a.abs() <= cap2 && b.abs() <= c5 { c2 * a + c3 * b } else { 0.0 })
            .collect(),
        IndicatorMode::Norm => {
            let n2 = e2.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n3 = e3.iter().map(|v| v * v).sum::<f64>().sqrt();
            let keep = n2 <= cap2 && n3 <= c5;
            e2.iter().zip(&e3).map(|(a, b)| if keep { c2 * a + c3 * b } else { 0.0 }).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinal_examples() {
        assert_eq!(cardinal_bspline(0, 0.5), 1.0);
        assert!((cardinal_bspline(1, 1.0) - 1.0).abs() < 1e-15);
        assert!((cardinal_bspline(2, 1.5) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn quadratic_matches_numeric_self_convolution() {
        // Convolve the indicator with itself twice on a 10⁴-point grid.
        let n = 10_000;
        let h = 3.0 / n as f64;
        let ind: Vec<f64> = (0..n).map(|i| if (i as f64 + 0.5) * h < 1.0 { 1.0 } else { 0.0 }).collect();
        let conv = |a: &[f64], b: &[f64]| -> Vec<f64> {
            (0..n).map(|i| (0..=i).map(|k| a[k] * b[i - k]).sum::<f64>() * h).collect()
        };
        let hat = conv(&ind, &ind);
        let quad2 = conv(&hat, &ind);
        // grid value i approximates the spline at (i + 1.5)h
        let i = (1.5 / h - 1.5).round() as usize;
        let x = (i as f64 + 1.5) * h;
        assert!((quad2[i] - cardinal_bspline(2, x)).abs() < 2e-3, "{} vs {}", quad2[i], cardinal_bspline(2, x));
    }

    #[test]
    fn tensor_examples() {
        assert!((tensor_bspline(&[0, 0], &[0, 0], 1, &[1.0, 1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(tensor_bspline(&[0, 0], &[0, 0], 1, &[1.0, 5.0]), 0.0);
        let v = tensor_bspline(&[1], &[-1], 1, &[0.0]);
        assert!((v - cardinal_bspline(1, 1.0)).abs() < 1e-15 && (v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn partition_of_unity() {
        for ell in 0..=4 {
            for i in 0..200 {
                let x = -3.0 + 0.0301 * i as f64;
                let s: f64 = (-10..10).map(|j| cardinal_bspline(ell, x - j as f64)).sum();
                assert!((s - 1.0).abs() < 1e-12, "ell={ell} x={x} s={s}");
            }
        }
    }

    #[test]
    fn reproduces_dictionary_member() {
        let f = FnTarget::new(1, |x: &[f64]| 0.7 * tensor_bspline(&[2], &[-1], 3, x));
        let e = fit_expansion(&f, 40, &BesovParams::holder(2.0), &FitOptions { ell: 3, ..Default::default() }).unwrap();
        let err = e.fit.as_ref().unwrap().l2_error;
        assert!(err <= 1e-10, "{err}");
        assert!((l2_error(&e, &f, Region::Full) - err).abs() <= 1e-12);
    }

    #[test]
    fn text_round_trip() {
        let f = FnTarget::new(2, |x: &[f64]| 1.0 + 0.3 * x[0] * x[1]);
        let e = fit_expansion(&f, 40, &BesovParams::holder(2.0), &FitOptions { ell: 2, ..Default::default() }).unwrap();
        let back = BSplineExpansion::from_text(&e.to_text()).unwrap();
        assert_eq!(back.terms, e.terms);
        assert_eq!(back.to_text(), e.to_text());
        assert!(BSplineExpansion::from_text("1 2 3\n").is_err());
    }

    #[test]
    fn ladder_needs_level_zero() {
        assert!(ladder(5, 4, 1).is_err());
        assert_eq!(ladder(16, 4, 1).unwrap(), (1, 2));
    }

    #[test]
    fn zero_expansion_features() {
        let e = BSplineExpansion::zero(1, 3);
        let st = ScheduleState { alpha: 0.5, beta: 0.8, alpha1: 0.0, beta1: 0.0, alpha2: 0.0, beta2: 0.0 };
        let f = gauss_convolved_features(&e, &st, &[0.2], &FeatureQuadrature::default()).unwrap();
        assert_eq!(f, Features { f1_tilde: 0.0, f2: vec![0.0], f3: vec![0.0] });
    }

    #[test]
    fn symmetric_expansion_odd_features_vanish() {
        let f = FnTarget::new(1, |x: &[f64]| 1.0 + x[0] * x[0]);
        let e = fit_expansion(&f, 30, &BesovParams::holder(2.0), &FitOptions { ell: 2, ..Default::default() }).unwrap();
        let st = ScheduleState { alpha: 0.3, beta: 0.9, alpha1: 0.0, beta1: 0.0, alpha2: 0.0, beta2: 0.0 };
        let ft = gauss_convolved_features(&e, &st, &[0.0], &FeatureQuadrature::default()).unwrap();
        assert!(ft.f2[0].abs() < 1e-9 && ft.f3[0].abs() < 1e-9, "{ft:?}");
    }

    #[test]
    fn f4_indicator() {
        let st = ScheduleState { alpha: 0.5, beta: 0.5, alpha1: -1.0, beta1: 1.0, alpha2: 0.3, beta2: 0.2 };
        let f = Features { f1_tilde: 10.0, f2: vec![0.0], f3: vec![0.0] };
        assert_eq!(assemble_f4(&f, &st, 1e-3, 3.0, 64, &F4Options::default()), vec![0.0]);
        let f = Features { f1_tilde: 1.0, f2: vec![100.0, 0.5], f3: vec![0.1, 0.1] };
        let v = assemble_f4(&f, &st, 1e-3, 3.0, 64, &F4Options::default());
        assert_eq!(v[0], 0.0);
        assert!(v[1] != 0.0);
    }
}
