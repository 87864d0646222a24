//! Acceptance criteria: one PASS/FAIL line each, nonzero exit if any fails.

use std::time::{Duration, Instant};

use hoflow::harness::config::{DensitySpec, ExperimentConfig};
use hoflow::harness::pipeline::{gradient_checks, sampler_sanity};
use hoflow::harness::rates::{bspline_regime, large_t_regime, small_t_regime, RegimeOutput};
use hoflow::harness::report::CheckResult;
use hoflow::harness::verify::{
    accel_pipeline_check, conditional_identity_check, gadget_checks, gamma_suite, path_bounds_suite, pde_suite,
    tails_suite, SuiteOutput,
};
use hoflow::report::Verdict;
use hoflow::Result;

struct Outcome {
    ok: bool,
    detail: String,
}

fn from_checks<'a>(checks: impl IntoIterator<Item = &'a CheckResult>) -> Outcome {
    let mut ok = true;
    let mut n = 0;
    let mut bad = Vec::new();
    for c in checks {
        n += 1;
        if c.verdict != Verdict::Pass {
            ok = false;
            bad.push(format!("{}={:.3e} (bound {:.3e}) {}", c.name, c.value, c.bound, c.note));
        }
    }
    let detail = if bad.is_empty() { format!("{n} checks") } else { bad.join("; ") };
    Outcome { ok: ok && n > 0, detail }
}

fn named<'a>(out: &'a SuiteOutput, pred: impl Fn(&str) -> bool + 'a) -> impl Iterator<Item = &'a CheckResult> + 'a {
    out.checks.iter().filter(move |c| pred(&c.name))
}

fn from_regime(r: Result<RegimeOutput>) -> Outcome {
    match r {
        Err(e) => Outcome { ok: false, detail: e.to_string() },
        Ok(o) => Outcome {
            ok: o.fit.verdict == Verdict::Pass && o.errors.is_empty(),
            detail: format!(
                "slope {:.3} (expected {:.3}), r2 {:.3}, monotone {}, values {:?}; {}",
                o.fit.slope, o.fit.expected_slope, o.fit.r2, o.fit.monotone, o.fit.values, o.fit.note
            ),
        },
    }
}

fn from_result(r: Result<Vec<CheckResult>>) -> Outcome {
    match r {
        Ok(c) => from_checks(&c),
        Err(e) => Outcome { ok: false, detail: e.to_string() },
    }
}

fn crit1(_: &ExperimentConfig) -> Outcome {
    from_checks(&gamma_suite().checks)
}

fn crit2(cfg: &ExperimentConfig) -> Outcome {
    from_result(conditional_identity_check(cfg.seed, 1000).map(|c| vec![c]))
}

fn crit3(cfg: &ExperimentConfig) -> Outcome {
    let out = pde_suite(&ExperimentConfig { verify: hoflow::harness::config::VerifySpec { identity_probes: 1, ..cfg.verify.clone() }, ..cfg.clone() });
    from_checks(named(&out, |n| n.starts_with("continuity-order")))
}

fn crit4(cfg: &ExperimentConfig) -> Outcome {
    let mut c = cfg.clone();
    c.verify.density = DensitySpec::uniform(1);
    c.verify.dims = vec![1, 2];
    let out = path_bounds_suite(&c);
    from_checks(named(&out, |n| n.starts_with("pt-sandwich-d")))
}

fn crit5(cfg: &ExperimentConfig) -> Outcome {
    let mut c = cfg.clone();
    c.verify.eps = 0.1;
    let bounds = path_bounds_suite(&c);
    let tails = tails_suite(&c);
    from_checks(named(&bounds, |n| n == "at-bound").chain(tails.checks.iter()))
}

fn crit6(cfg: &ExperimentConfig) -> Outcome {
    from_checks(&gadget_checks(cfg).checks)
}

fn crit7(cfg: &ExperimentConfig) -> Outcome {
    from_regime(bspline_regime(cfg))
}

fn crit8(cfg: &ExperimentConfig) -> Outcome {
    from_regime(small_t_regime(cfg))
}

fn crit9(cfg: &ExperimentConfig) -> Outcome {
    from_regime(large_t_regime(cfg))
}

fn crit10(cfg: &ExperimentConfig) -> Outcome {
    match accel_pipeline_check(cfg) {
        Ok(out) => {
            let mut o = from_checks(&out.checks);
            for k in &out.constants {
                o.detail.push_str(&format!("; {} = {:.4e}", k.name, k.value));
            }
            o
        }
        Err(e) => Outcome { ok: false, detail: e.to_string() },
    }
}

fn crit11(cfg: &ExperimentConfig) -> Outcome {
    from_result(sampler_sanity(cfg.seed, 4096, 128))
}

fn crit12(cfg: &ExperimentConfig) -> Outcome {
    from_result(gradient_checks(cfg.seed, 32))
}

type Criterion = (&'static str, u64, fn(&ExperimentConfig) -> Outcome);

fn main() {
    let cfg = ExperimentConfig::default();
    let criteria: [Criterion; 12] = [
        ("gamma-bound suite", 1, crit1),
        ("conditional acceleration identity", 5, crit2),
        ("continuity residual orders", 30, crit3),
        ("p_t sandwich, d = 1, 2", 60, crit4),
        ("a_t bound and tail decay", 60, crit5),
        ("gadget certification", 10, crit6),
        ("B-spline approximation rate", 120, crit7),
        ("second-order small-t rate", 300, crit8),
        ("large-t rate", 300, crit9),
        ("acceleration network pipeline", 60, crit10),
        ("sampler sanity", 120, crit11),
        ("gradient check", 10, crit12),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run(&cfg);
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(*budget);
        let ok = out.ok && in_time;
        if !ok {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {name}: {:.2}s (budget {budget}s{}) {}",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64(),
            if in_time { "" } else { ", exceeded" },
            out.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
