//! Bound, identity and gadget suites. Each check runs in isolation: an
//! error becomes a FAIL entry carrying the message and the suite goes on.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use super::config::{DensitySpec, ExperimentConfig, SUITES};
use super::report::{CheckResult, ExperimentReport, FittedConstant};
use crate::bspline::{
    assemble_f4_with, cardinal_bspline, f4_coefficients, fit_expansion, gauss_convolved_features, FeatureQuadrature,
    Features, FitOptions, IndicatorMode,
};
use crate::density::Density;
use crate::error::{Error, Result};
use crate::gaussian_path::{
    conditional_acceleration, conditional_velocity, continuity_residual_with, det_derivative_check, posterior_mean_lipschitz,
    psi_bound_check, tail_integral_at, verify_at_bound, verify_pt_sandwich, window_truncation_error, AccelField, BoundGrid,
    GaussianPath,
};
use crate::relunet::{
    assemble_accel_net, build_clip, build_mult, build_recip, compile_bspline_net, AccelConsts, ReluNetwork,
};
use crate::report::{fit_line, BoundRow, Verdict};
use crate::rng::{Seed, Streams};
use crate::schedule::{check_assumptions, PowerLaw, Schedule};

/// Results of one suite.
#[derive(Debug, Default)]
pub struct SuiteOutput {
    pub checks: Vec<CheckResult>,
    pub rows: Vec<BoundRow>,
    pub constants: Vec<FittedConstant>,
}

impl SuiteOutput {
    fn constant(&mut self, name: &str, value: f64, note: &str) {
        self.constants.push(FittedConstant { name: name.into(), value, note: note.into() });
    }

    /// Run `f`; an error becomes a FAIL check named `name`.
    fn capture<F: FnOnce(&mut SuiteOutput) -> Result<()>>(&mut self, suite: &str, name: &str, f: F) {
        if let Err(e) = f(self) {
            self.checks.push(CheckResult::failed(suite, name, e.to_string()));
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.verdict != Verdict::Fail)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Run the configured suites and collect everything into one report.
pub fn run_verify(cfg: &ExperimentConfig) -> ExperimentReport {
    let start = Instant::now();
    let mut rep = ExperimentReport::new("verify", cfg);
    for suite in &cfg.verify.suites {
        let t = Instant::now();
        let out = run_suite(cfg, suite);
        rep.checks.extend(out.checks);
        rep.bound_rows.extend(out.rows);
        rep.constants.extend(out.constants);
        rep.runtime.sections.push((suite.clone(), t.elapsed().as_millis() as u64));
    }
    rep.runtime.total_ms = start.elapsed().as_millis() as u64;
    rep.runtime.threads = rayon::current_num_threads();
    rep.settle();
    rep
}

pub fn run_suite(cfg: &ExperimentConfig, suite: &str) -> SuiteOutput {
    match suite {
        "schedule-assumptions" => schedule_suite(cfg),
        "path-bounds" => path_bounds_suite(cfg),
        "gamma" => gamma_suite(),
        "tails" => tails_suite(cfg),
        "pde-residuals" => pde_suite(cfg),
        "gadgets" => gadget_suite(cfg),
        "det-derivative" => det_suite(cfg),
        other => {
            let mut out = SuiteOutput::default();
            out.checks.push(CheckResult::failed(
                other,
                "suite",
                format!("unknown suite; known: {}", SUITES.join(", ")),
            ));
            out
        }
    }
}

pub fn schedule_suite(cfg: &ExperimentConfig) -> SuiteOutput {
    const S: &str = "schedule-assumptions";
    let mut out = SuiteOutput::default();
    out.capture(S, "schedule", |o| {
        let s = cfg.schedule.build()?;
        let grid = cfg.time_grid(cfg.grid.n)?;
        let r = check_assumptions(&s, &grid, &cfg.assumption_params());
        for e in &r.entries {
            o.checks.push(CheckResult {
                suite: S.into(),
                name: e.name.clone(),
                verdict: e.verdict,
                value: e.value,
                bound: e.bound,
                fitted_constant: f64::NAN,
                note: e.note.clone(),
            });
        }
        o.constant("D0-measured", r.d0_measured, "smallest D0 with the band on the grid");
        o.constant("K0-first", r.k0_first, "log_N of max |alpha'| + |beta'|");
        o.constant("K0-second", r.k0_second, "log_N of max |alpha''| + |beta''|");
        for f in &r.integrals {
            o.constant(&format!("energy-order{}-n-exponent", f.order), f.n_exponent, "fitted N-exponent of the small-time integral");
        }
        Ok(())
    });
    out
}

fn bound_grid(cfg: &ExperimentConfig) -> Result<BoundGrid> {
    Ok(BoundGrid { times: cfg.time_grid(cfg.grid.n)?.partition(), points: cfg.verify.points, reach: cfg.verify.reach })
}

fn verify_path(cfg: &ExperimentConfig, d: usize) -> Result<GaussianPath> {
    let spec = DensitySpec { d, ..cfg.verify.density.clone() };
    Ok(GaussianPath::new(cfg.schedule.build()?, spec.build()?))
}

/// p_t sandwich for every configured dimension, a_t bounds, window
/// truncation and the posterior-mean Lipschitz constant.
pub fn path_bounds_suite(cfg: &ExperimentConfig) -> SuiteOutput {
    const S: &str = "path-bounds";
    let mut out = SuiteOutput::default();
    for &d in &cfg.verify.dims {
        let name = format!("pt-sandwich-d{d}");
        out.capture(S, &name, |o| {
            let path = verify_path(cfg, d)?;
            let mut r = verify_pt_sandwich(&path, &bound_grid(cfg)?)?;
            let c1 = r.fitted_constant;
            let ok = r.verdict != Verdict::Fail && c1.is_finite() && c1 <= 1e3;
            o.checks.push(CheckResult::new(S, &name, ok, c1, 1e3).with_constant(c1).with_note("C1 certifying both envelopes"));
            o.constant(&format!("C1-d{d}"), c1, "p_t sandwich");
            for row in r.rows.iter_mut() {
                row.check = name.clone();
            }
            o.rows.append(&mut r.rows);
            Ok(())
        });
    }
    out.capture(S, "at-bound", |o| {
        let path = verify_path(cfg, 1)?;
        let grid = bound_grid(cfg)?;
        let (mut r3, mut r4) = verify_at_bound(&path, &grid, cfg.verify.eps, cfg.constants.c5)?;
        for (r, name) in [(&mut r3, "C3"), (&mut r4, "C4")] {
            let mut c = CheckResult::from_bound(S, r);
            if r.verdict != Verdict::NotApplicable {
                c.verdict = Verdict::from_bool(r.fitted_constant.is_finite() && r.verdict == Verdict::Pass);
            }
            o.checks.push(c);
            o.constant(name, r.fitted_constant, &r.bound_name);
            o.rows.append(&mut r.rows);
        }
        Ok(())
    });
    out.capture(S, "posterior-mean-lipschitz", |o| {
        let path = verify_path(cfg, 1)?;
        let r = posterior_mean_lipschitz(&path, &bound_grid(cfg)?)?;
        o.constant("C_L", r.fitted_constant, "sup of the posterior-mean Jacobian norm");
        o.checks.push(CheckResult::from_bound(S, &r));
        Ok(())
    });
    out.capture(S, "window-truncation", |o| {
        let path = verify_path(cfg, 1)?;
        let p0 = path.p0.clone();
        let n = cfg.grid.n as f64;
        let mut worst: f64 = 0.0;
        for &t in &[0.05, 0.2, 0.5] {
            for &x in &[-0.6, 0.0, 0.5] {
                let (err, tol) = window_truncation_error(&path, t, &[x], |y| p0.eval(y), cfg.constants.c_b, n)?;
                let ratio = err / tol;
                worst = worst.max(ratio);
                o.rows.push(BoundRow { check: "window-truncation".into(), t, x: vec![x], lhs: err, rhs: tol, ratio, pass: ratio <= 1.0 });
            }
        }
        o.checks.push(CheckResult::new(S, "window-truncation", worst <= 1.0, worst, 1.0));
        Ok(())
    });
    out
}

/// ψ_ℓ(z) ≤ ℓ‼ z^{ℓ−1} e^{−z²/2} for ℓ = 1..6 on z = 1, 1.5, ..., 6, with
/// equality at ℓ = 1.
pub fn gamma_suite() -> SuiteOutput {
    const S: &str = "gamma";
    let mut out = SuiteOutput::default();
    let zs: Vec<f64> = (0..=10).map(|i| 1.0 + 0.5 * i as f64).collect();
    for ell in 1..=6u32 {
        let name = format!("psi-bound-l{ell}");
        out.capture(S, &name, |o| {
            let mut worst: f64 = 0.0;
            let mut gap: f64 = 0.0;
            for &z in &zs {
                let (psi, bound) = psi_bound_check(ell, z)?;
                let ratio = psi / bound;
                worst = worst.max(ratio);
                gap = gap.max((psi - bound).abs());
                o.rows.push(BoundRow { check: name.clone(), t: f64::NAN, x: vec![z], lhs: psi, rhs: bound, ratio, pass: psi <= bound * (1.0 + 1e-12) });
            }
            o.checks.push(CheckResult::new(S, &name, worst <= 1.0 + 1e-12, worst, 1.0));
            if ell == 1 {
                o.checks.push(CheckResult::new(S, "psi-equality-l1", gap <= 1e-9, gap, 1e-9));
            }
            Ok(())
        });
    }
    out
}

/// Tail integral of p_t‖a_t‖² beyond β + C₅α√ln(1/ε): fitted constant and
/// the decay between C₅ = 2 and C₅ = 4.
pub fn tails_suite(cfg: &ExperimentConfig) -> SuiteOutput {
    const S: &str = "tails";
    let mut out = SuiteOutput::default();
    let eps = cfg.verify.eps;
    out.capture(S, "tail-integral", |o| {
        let path = verify_path(cfg, 1)?;
        let mut cells = Vec::new();
        for &t in &cfg.verify.tail_times {
            let mut vals = Vec::new();
            for c5 in [2.0, 3.0, 4.0] {
                vals.push((c5, tail_integral_at(&path, t, c5, eps)?));
            }
            cells.push((t, vals));
        }
        let c_tilde = cells
            .iter()
            .flat_map(|(_, v)| v.iter().map(|(_, ti)| ti.value / ti.rhs_unit))
            .filter(|r| r.is_finite())
            .fold(0.0, f64::max);
        for (t, vals) in &cells {
            for (c5, ti) in vals {
                let rhs = c_tilde * ti.rhs_unit;
                o.rows.push(BoundRow { check: "tail-integral".into(), t: *t, x: vec![*c5], lhs: ti.value, rhs, ratio: ti.value / rhs, pass: ti.value <= rhs * (1.0 + 1e-9) });
            }
        }
        o.checks.push(
            CheckResult::new(S, "tail-integral", c_tilde.is_finite(), c_tilde, f64::INFINITY)
                .with_constant(c_tilde)
                .with_note(format!("eps = {eps}, C5 in {{2, 3, 4}}")),
        );
        o.constant("C-tilde", c_tilde, "tail integral");
        let need = eps.powf(5.4);
        for (t, vals) in &cells {
            let a = vals[0].1.value;
            let b = vals[2].1.value;
            let name = format!("tail-decay-t{t}");
            if !(a > 0.0) {
                let mut c = CheckResult::new(S, &name, false, f64::NAN, need).with_note("tail at C5 = 2 underflows");
                c.verdict = Verdict::NotApplicable;
                o.checks.push(c);
                continue;
            }
            let ratio = b / a;
            o.checks.push(CheckResult::new(S, &name, ratio <= need, ratio, need).with_note("tail(C5=4)/tail(C5=2) against eps^5.4"));
        }
        Ok(())
    });
    out
}

fn gaussian_reference_path(cfg: &ExperimentConfig) -> Result<GaussianPath> {
    Ok(GaussianPath::new(cfg.schedule.build()?, Density::gaussian_reference(1, 0.5)?))
}

/// Continuity residuals on the Gaussian reference path and the conditional
/// acceleration identity.
pub fn pde_suite(cfg: &ExperimentConfig) -> SuiteOutput {
    const S: &str = "pde-residuals";
    let mut out = SuiteOutput::default();
    let hs = [4e-3, 2e-3, 1e-3];
    let t = 0.5;
    let xs: Vec<f64> = (0..9).map(|i| -0.8 + 0.2 * i as f64).collect();
    for order in [1u8, 2] {
        let name = format!("continuity-order{order}");
        out.capture(S, &name, |o| {
            let path = gaussian_reference_path(cfg)?;
            let mut res = Vec::new();
            let mut scale: f64 = 0.0;
            for &h in &hs {
                let mut worst: f64 = 0.0;
                for &x in &xs {
                    let r = continuity_residual_with(&path, t, &[x], h, order, AccelField::Eulerian)?;
                    worst = worst.max(r.residual);
                    scale = scale.max(r.scale);
                    o.rows.push(BoundRow { check: name.clone(), t, x: vec![x], lhs: r.residual, rhs: r.scale, ratio: r.residual / r.scale, pass: true });
                }
                res.push(worst);
            }
            let fit = fit_line(&hs.map(f64::ln), &res.iter().map(|v| v.ln()).collect::<Vec<_>>());
            let rel = res[2] / scale;
            o.checks.push(
                CheckResult::new(S, &format!("{name}-convergence"), (fit.slope - 2.0).abs() <= 0.2, fit.slope, 2.0)
                    .with_note("fitted order of the residual in h"),
            );
            o.checks.push(
                CheckResult::new(S, &format!("{name}-relative"), rel <= 1e-4, rel, 1e-4)
                    .with_note("residual at h = 1e-3 over the largest time derivative"),
            );
            if order == 2 {
                let mut worst: f64 = 0.0;
                for &x in &xs {
                    let r = continuity_residual_with(&path, t, &[x], 1e-3, 2, AccelField::Posterior)?;
                    worst = worst.max(r.residual);
                }
                o.constant("posterior-field-residual", worst, "second-order residual with the Bayes-averaged field at h = 1e-3; reported only");
            }
            Ok(())
        });
    }
    out.capture(S, "conditional-acceleration-identity", |o| {
        o.checks.push(conditional_identity_check(cfg.seed, cfg.verify.identity_probes)?);
        Ok(())
    });
    out
}

/// Closed-form conditional acceleration against central differences of the
/// conditional velocity on `probes` random (schedule, t, x, y).
pub fn conditional_identity_check(seed: u64, probes: usize) -> Result<CheckResult> {
    let streams = Streams::new(Seed(seed));
    let errs: Vec<f64> = (0..probes).into_par_iter().map(|k| identity_probe(&streams, k as u64)).collect::<Result<_>>()?;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Ok(CheckResult::new("pde-residuals", "conditional-acceleration-identity", worst <= 1e-5, worst, 1e-5)
        .with_note(format!("{probes} random (schedule, t, x, y) probes, h = 1e-4")))
}

/// Relative gap between the closed-form conditional acceleration and a
/// central difference of the conditional velocity at a random probe.
fn identity_probe(streams: &Streams, k: u64) -> Result<f64> {
    let mut r = streams.indexed("identity-probe", k);
    let s = match r.random_range(0..3) {
        0 => Schedule::linear(),
        1 => Schedule::rectified(),
        _ => Schedule::power(PowerLaw {
            b0: r.random_range(0.5..2.0),
            kappa: r.random_range(0.5..2.0),
            b0_tilde: r.random_range(0.5..1.0),
            kappa_tilde: r.random_range(0.5..2.0),
        })?,
    };
    let t: f64 = r.random_range(0.1..0.9);
    let d = r.random_range(1..=3);
    let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let h = 1e-4;
    let a = conditional_acceleration(&s.eval(t)?, &x, &y)?;
    let vp = conditional_velocity(&s.eval(t + h)?, &x, &y)?;
    let vm = conditional_velocity(&s.eval(t - h)?, &x, &y)?;
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let fd = (vp[i] - vm[i]) / (2.0 * h);
        worst = worst.max((fd - a[i]).abs() / a[i].abs().max(1.0));
    }
    Ok(worst)
}

/// d/dt det X = det X · tr(X⁻¹X′) on random polynomial matrix paths.
pub fn det_suite(cfg: &ExperimentConfig) -> SuiteOutput {
    const S: &str = "det-derivative";
    let mut out = SuiteOutput::default();
    out.capture(S, "det-derivative", |o| {
        let streams = Streams::new(Seed(cfg.seed));
        let mut worst: f64 = 0.0;
        for k in 0..30u64 {
            let mut r = streams.indexed("det-path", k);
            let n = 1 + (k as usize % 3);
            let mut m = |shift: f64| DMatrix::from_fn(n, n, |i, j| if i == j { shift } else { 0.0 } + r.random_range(-0.5..0.5));
            let (a, b, c) = (m(2.0), m(0.0), m(0.0));
            let x = |t: f64| &a + &b * t + &c * (t * t);
            let dx = |t: f64| &b + &c * (2.0 * t);
            let t = 0.3;
            let err = det_derivative_check(x, dx, t, 1e-5)?;
            worst = worst.max(err);
            o.rows.push(BoundRow { check: "det-derivative".into(), t, x: vec![n as f64], lhs: err, rhs: 1e-6, ratio: err / 1e-6, pass: err <= 1e-6 });
        }
        o.checks.push(CheckResult::new(S, "det-derivative", worst <= 1e-6, worst, 1e-6).with_note("30 random paths, h = 1e-5"));
        Ok(())
    });
    out
}

fn max_err<F: Fn(&[f64]) -> f64 + Sync>(net: &ReluNetwork, pts: &[Vec<f64>], f: F) -> Result<f64> {
    let errs: Vec<f64> = pts.par_iter().map(|x| Ok((net.eval(x)?[0] - f(x)).abs())).collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn grid_points(d: usize, lo: f64, hi: f64, m: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
    let mut pts = vec![vec![]];
    for _ in 0..d {
        pts = pts.into_iter().flat_map(|p| axis.iter().map(move |&v| [p.clone(), vec![v]].concat())).collect();
    }
    pts
}

/// Growth of `cs` (a stat divided by its stated form) from the coarsest to
/// the finest accuracy stays within a factor 2.
fn bounded_growth(cs: &[f64]) -> bool {
    let first = cs[0];
    cs.iter().all(|&c| c.is_finite() && c <= 2.0 * first)
}

/// Gadget checks followed by the acceleration-network pipeline.
pub fn gadget_suite(cfg: &ExperimentConfig) -> SuiteOutput {
    let mut out = gadget_checks(cfg);
    out.capture("gadgets", "accel-pipeline", |o| {
        let p = accel_pipeline_check(cfg)?;
        o.checks.extend(p.checks);
        o.constants.extend(p.constants);
        Ok(())
    });
    out
}

/// clip, recip, mult and B-spline networks: errors, exactness and measured
/// complexity against the stated forms.
pub fn gadget_checks(cfg: &ExperimentConfig) -> SuiteOutput {
    const S: &str = "gadgets";
    let mut out = SuiteOutput::default();
    let streams = Streams::new(Seed(cfg.seed));

    out.capture(S, "clip", |o| {
        let mut ok = true;
        let mut note = String::new();
        for d in 1..=5usize {
            let a: Vec<f64> = (0..d).map(|i| -1.0 - 0.5 * i as f64).collect();
            let b: Vec<f64> = (0..d).map(|i| 1.0 + 0.25 * i as f64).collect();
            let net = build_clip(d, &a, &b)?;
            let st = net.stats();
            let bmax = a.iter().chain(&b).fold(0.0f64, |m, v| m.max(v.abs()));
            let stats_ok = st.depth == 2 && st.max_width() == 2 * d && st.nonzeros <= 7 * d && st.max_abs == bmax;
            let mut r = streams.indexed("clip-points", d as u64);
            let mut exact = true;
            for _ in 0..500 {
                let x: Vec<f64> = (0..d).map(|_| r.random_range(-4.0..4.0)).collect();
                let want: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.clamp(a[i], b[i])).collect();
                exact &= net.eval(&x)? == want;
            }
            ok &= stats_ok && exact;
            note += &format!("d={d}: (L={}, W={}, S={}, B={}) ", st.depth, st.max_width(), st.nonzeros, st.max_abs);
        }
        o.checks.push(CheckResult::new(S, "clip-exact", ok, if ok { 0.0 } else { 1.0 }, 0.0).with_note(note.trim_end()));
        Ok(())
    });

    let recip_eps = [0.1, 0.05, 0.02];
    out.capture(S, "recip", |o| {
        let mut cl = Vec::new();
        let mut cw = Vec::new();
        let mut cs = Vec::new();
        let mut cb = Vec::new();
        let mut widths = Vec::new();
        for &eps in &recip_eps {
            let net = build_recip(eps)?;
            let pts: Vec<Vec<f64>> =
                (0..4001).map(|i| vec![eps * (1.0 / (eps * eps)).powf(i as f64 / 4000.0)]).collect();
            let err = max_err(&net, &pts, |x| 1.0 / x[0])?;
            o.checks.push(CheckResult::new(S, &format!("recip-error-eps{eps}"), err <= eps, err, eps));
            let dx = 1e-4;
            let mut pert: f64 = 0.0;
            for x in pts.iter().step_by(40) {
                let xp = (x[0] + dx).min(1.0 / eps);
                let extra = (net.eval(&[xp])?[0] - 1.0 / x[0]).abs() - (eps + (xp - x[0]) / (eps * eps));
                pert = pert.max(extra);
            }
            o.checks.push(CheckResult::new(S, &format!("recip-perturbation-eps{eps}"), pert <= 0.0, pert, 0.0).with_note("excess over eps + |x - x'|/eps^2"));
            let st = net.stats();
            let l = (1.0 / eps).ln();
            cl.push(st.depth as f64 / (l * l));
            cw.push(st.max_width() as f64 / l.powi(3));
            cs.push(st.nonzeros as f64 / l.powi(4));
            cb.push(st.max_abs * eps * eps);
            widths.push(st.max_width() as f64);
        }
        for (name, cs, form) in [
            ("recip-depth", &cl, "L / ln^2(1/eps)"),
            ("recip-width", &cw, "W / ln^3(1/eps)"),
            ("recip-sparsity", &cs, "S / ln^4(1/eps)"),
            ("recip-weight", &cb, "B * eps^2"),
        ] {
            let c = cs.iter().copied().fold(0.0, f64::max);
            o.checks.push(
                CheckResult::new(S, name, bounded_growth(cs), c, 2.0 * cs[0])
                    .with_constant(c)
                    .with_note(format!("{form} over eps = {recip_eps:?}: {cs:?}")),
            );
            o.constant(name, c, form);
        }
        let fit = fit_line(&recip_eps.map(|e| (1.0 / e).ln()), &widths.iter().map(|w| w.ln()).collect::<Vec<_>>());
        o.constant("recip-width-power", fit.slope, "fitted exponent of W in 1/eps");
        Ok(())
    });

    out.capture(S, "mult", |o| {
        let ladder = [0.1, 0.01, 0.001];
        for d in [2usize, 3] {
            for c in [1.0, 2.0] {
                let eps = 0.01;
                let net = build_mult(d, c, eps)?;
                let m = if d == 2 { 41 } else { 15 };
                let mut pts = grid_points(d, -c, c, m);
                let mut r = streams.indexed("mult-points", (10 * d) as u64 + c as u64);
                pts.extend((0..500).map(|_| (0..d).map(|_| r.random_range(-c..c)).collect::<Vec<f64>>()));
                let err = max_err(&net, &pts, |x| x.iter().product())?;
                let mag = pts.iter().map(|x| net.eval(x).map(|v| v[0].abs())).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
                let tag = format!("d{d}-C{c}");
                o.checks.push(CheckResult::new(S, &format!("mult-error-{tag}"), err <= eps, err, eps));
                let cap = c.powi(d as i32) + eps;
                o.checks.push(CheckResult::new(S, &format!("mult-magnitude-{tag}"), mag <= cap, mag, cap));
                let mut zero_ok = true;
                for k in 0..300 {
                    let mut x: Vec<f64> = (0..d).map(|_| r.random_range(-c..c)).collect();
                    x[k % d] = 0.0;
                    zero_ok &= net.eval(&x)?[0] == 0.0;
                }
                o.checks.push(CheckResult::new(S, &format!("mult-zero-absorption-{tag}"), zero_ok, if zero_ok { 0.0 } else { 1.0 }, 0.0));
                if d == 2 {
                    let mut sym = true;
                    for x in &pts {
                        sym &= net.eval(x)? == net.eval(&[x[1], x[0]])?;
                    }
                    o.checks.push(CheckResult::new(S, &format!("mult-symmetry-{tag}"), sym, if sym { 0.0 } else { 1.0 }, 0.0));
                }
                let (mut cl, mut cs, mut cb) = (Vec::new(), Vec::new(), Vec::new());
                let mut wmax = 0;
                for &e in &ladder {
                    let st = build_mult(d, c, e)?.stats();
                    let form = d as f64 * (c / e).ln();
                    cl.push(st.depth as f64 / form);
                    cs.push(st.nonzeros as f64 / form);
                    cb.push(st.max_abs / c.powi(d as i32));
                    wmax = wmax.max(st.max_width());
                }
                o.checks.push(CheckResult::new(S, &format!("mult-width-{tag}"), wmax <= 48 * d, wmax as f64, (48 * d) as f64));
                for (name, v, form) in [("depth", &cl, "L / (d ln(C/eps))"), ("sparsity", &cs, "S / (d ln(C/eps))"), ("weight", &cb, "B / C^d")] {
                    let cmax = v.iter().copied().fold(0.0, f64::max);
                    o.checks.push(
                        CheckResult::new(S, &format!("mult-{name}-{tag}"), bounded_growth(v), cmax, 2.0 * v[0])
                            .with_constant(cmax)
                            .with_note(format!("{form} over eps = {ladder:?}: {v:?}")),
                    );
                    o.constant(&format!("mult-{name}-{tag}"), cmax, form);
                }
            }
        }
        Ok(())
    });

    out.capture(S, "bspline-net", |o| {
        let eps = 0.01;
        for ell in [1usize, 2] {
            let net = compile_bspline_net(&[0], &[0], ell, eps)?;
            let top = (ell + 1) as f64;
            let pts: Vec<Vec<f64>> = (0..=3000).map(|i| vec![top * i as f64 / 3000.0]).collect();
            let err = max_err(&net, &pts, |x| cardinal_bspline(ell, x[0]))?;
            let tol = if ell == 1 { 1e-12 } else { eps };
            o.checks.push(CheckResult::new(S, &format!("bspline-net-l{ell}"), err <= tol, err, tol));
            let mut zero = true;
            for i in 0..=200 {
                let u = i as f64 / 100.0;
                zero &= net.eval(&[-1.0 - u])?[0] == 0.0 && net.eval(&[top + 1.0 + u])?[0] == 0.0;
            }
            o.checks.push(CheckResult::new(S, &format!("bspline-net-l{ell}-outside"), zero, if zero { 0.0 } else { 1.0 }, 0.0));
        }
        Ok(())
    });
    out
}

/// u₈ built from exact feature lookups against `assemble_f4`, plus the
/// depth growth of u₈ along `verify.pipeline_ns`.
pub fn accel_pipeline_check(cfg: &ExperimentConfig) -> Result<SuiteOutput> {
    const S: &str = "gadgets";
    let mut out = SuiteOutput::default();
    let s = cfg.schedule.build()?;
    let p0 = cfg.density.build()?;
    let d = p0.d;
    let eps = cfg.verify.gadget_eps;
    let k = &cfg.constants;
    let times: Vec<f64> = (0..10).map(|i| 0.1 + 0.8 * i as f64 / 9.0).collect();
    let per_axis = (100f64.powf(1.0 / d as f64)).round() as usize;
    let q = FeatureQuadrature::default();
    let mut worst: f64 = 0.0;
    let (mut compared, mut excluded) = (0usize, 0usize);
    let mut depths = Vec::new();
    for &n in &cfg.verify.pipeline_ns {
        let e = fit_expansion(&p0, n, &cfg.besov(), &FitOptions::default())?;
        let nf = n as f64;
        let clamp = nf.powf(-(2.0 * k.s + k.omega) / d as f64);
        let upper = nf.powf(k.k0 + 1.0);
        let cap2 = k.c5 * nf.ln().sqrt();
        let mut depth = 0;
        for &t in &times {
            let st = s.eval(t)?;
            let r = st.beta + 3.0 * st.alpha;
            let xs = grid_points(d, -r, r, per_axis.max(2));
            let feats: Vec<Features> = xs.par_iter().map(|x| gauss_convolved_features(&e, &st, x, &q)).collect::<Result<_>>()?;
            let (c2, c3) = f4_coefficients(&st, cfg.f4.coefficients);
            let fmax = |g: &dyn Fn(&Features) -> &Vec<f64>| {
                1.25 * feats.iter().flat_map(|f| g(f).iter().map(|v| v.abs())).fold(0.0, f64::max) + 1e-9
            };
            let consts = AccelConsts {
                clamp,
                upper,
                c5: k.c5,
                n,
                f2_max: fmax(&|f| &f.f2),
                f3_max: fmax(&|f| &f.f3),
                eps,
            };
            let inp = 1 + 2 * d;
            let u5 = ReluNetwork::select(inp, &[0]);
            let u6 = ReluNetwork::select(inp, &(1..=d).collect::<Vec<_>>());
            let u7 = ReluNetwork::select(inp, &(d + 1..=2 * d).collect::<Vec<_>>());
            let a2 = ReluNetwork::constant(inp, &[c2]);
            let b2 = ReluNetwork::constant(inp, &[c3]);
            let net = assemble_accel_net(&u5, &u6, &u7, &a2, &b2, &consts)?;
            depth = depth.max(net.net.depth());
            for f in &feats {
                let f1 = f.f1_tilde.max(clamp);
                let inside = f.f2.iter().all(|v| (v / f1).abs() <= 0.95 * cap2) && f.f3.iter().all(|v| (v / f1).abs() <= 0.95 * k.c5);
                if !inside {
                    excluded += 1;
                    continue;
                }
                let mut z = vec![f.f1_tilde];
                z.extend(&f.f2);
                z.extend(&f.f3);
                let got = net.net.eval(&z)?;
                let want = assemble_f4_with(f, c2, c3, clamp, k.c5, n, IndicatorMode::PerCoordinate);
                compared += 1;
                for (a, b) in got.iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        depths.push((n, depth));
    }
    if compared == 0 {
        return Err(Error::Argument("no grid point satisfies both indicators".into()));
    }
    out.checks.push(
        CheckResult::new(S, "accel-pipeline-agreement", worst <= 5.0 * eps, worst, 5.0 * eps)
            .with_note(format!("{compared} points compared, {excluded} excluded where an indicator is within 5% of its cap")),
    );
    let ln: Vec<f64> = depths.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let c = depths.iter().zip(&ln).map(|(&(_, l), x)| l as f64 / x.powi(4)).fold(0.0, f64::max);
    let fit = fit_line(&ln.iter().map(|v| v.ln()).collect::<Vec<_>>(), &depths.iter().map(|&(_, l)| (l as f64).ln()).collect::<Vec<_>>());
    out.checks.push(
        CheckResult::new(S, "accel-depth-polylog", fit.slope <= 4.0 && c.is_finite(), fit.slope, 4.0)
            .with_constant(c)
            .with_note(format!("depths {depths:?}; L <= c ln^4 N with c = {c:.4e}; fitted exponent of ln N is {:.3}", fit.slope)),
    );
    out.constants.push(FittedConstant { name: "accel-depth-c".into(), value: c, note: "max L / ln^4 N".into() });
    out.constants.push(FittedConstant { name: "accel-depth-exponent".into(), value: fit.slope, note: "slope of ln L against ln ln N".into() });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_suite_passes() {
        let out = gamma_suite();
        assert!(out.passed(), "{:?}", out.checks);
        assert_eq!(out.checks.len(), 7);
    }

    #[test]
    fn invalid_schedule_is_isolated() {
        let mut cfg = ExperimentConfig::default();
        cfg.schedule.kappa = 0.2;
        let out = schedule_suite(&cfg);
        assert_eq!(out.checks.len(), 1);
        assert!(out.checks[0].verdict.is_fail());
        assert!(gamma_suite().passed());
        let det = det_suite(&cfg);
        assert!(det.passed());
    }

    #[test]
    fn identity_probes_agree() {
        let s = Streams::new(Seed(1));
        for k in 0..50 {
            assert!(identity_probe(&s, k).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn grid_points_cover_box() {
        let g = grid_points(2, -1.0, 1.0, 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![-1.0, -1.0]);
        assert_eq!(g[8], vec![1.0, 1.0]);
    }
}
