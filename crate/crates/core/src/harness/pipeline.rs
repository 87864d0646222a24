//! Train, sample and compare: order-1 and order-2 heads, ODE samples at
//! several step counts, and W₁/W₂ against fresh draws of the target.

use std::time::Instant;

use super::config::ExperimentConfig;
use super::report::{CheckResult, DistanceRow, ExperimentReport};
use crate::density::Density;
use crate::error::Result;
use crate::gaussian_path::{AccelField, GaussianPath};
use crate::rng::{Seed, Streams};
use crate::schedule::Schedule;
use crate::trainer::{
    flow_batch, gradient_check, sample_ode, train_flow, wasserstein_distance, AccelTarget, ExactFields, FlowFields, MlpModel,
    TrainedFlowModel,
};

const SUITE: &str = "pipeline";

fn training_data(cfg: &ExperimentConfig, p0: &Density, n: usize, stream: &str) -> Result<Vec<Vec<f64>>> {
    p0.sample_with(n, &mut Streams::new(Seed(cfg.seed)).stream(stream))
}

/// Trains both heads (or loads `pipeline.model`) and records the loss
/// summary and the per-interval breakdown.
pub fn run_training(cfg: &ExperimentConfig) -> (ExperimentReport, Option<TrainedFlowModel>) {
    let start = Instant::now();
    let mut rep = ExperimentReport::new("train", cfg);
    let model = match train_stage(cfg, &mut rep) {
        Ok(m) => Some(m),
        Err(e) => {
            rep.errors.push(format!("training: {e}"));
            None
        }
    };
    rep.runtime.total_ms = start.elapsed().as_millis() as u64;
    rep.runtime.threads = rayon::current_num_threads();
    rep.settle();
    (rep, model)
}

fn train_stage(cfg: &ExperimentConfig, rep: &mut ExperimentReport) -> Result<TrainedFlowModel> {
    let model = match &cfg.pipeline.model {
        Some(path) => TrainedFlowModel::from_text(&std::fs::read_to_string(path)?)?,
        None => {
            let s = cfg.schedule.build()?;
            let p0 = cfg.density.build()?;
            let data = training_data(cfg, &p0, cfg.pipeline.train_samples, "train-data")?;
            train_flow(&cfg.train, &data, &s, 2, Seed(cfg.seed))?
        }
    };
    for &(order, before, after) in &model.log.summary {
        rep.checks.push(
            CheckResult::new(SUITE, &format!("loss-decrease-order{order}"), after <= before, after, before)
                .with_note("held-out loss after training against the loss at initialization"),
        );
    }
    rep.intervals = model.log.intervals.clone();
    Ok(model)
}

/// Full pipeline: training, sampling at every configured step count with
/// both orders, distances to a reference sample. Stops after the first
/// failing stage.
pub fn run_pipeline(cfg: &ExperimentConfig) -> (ExperimentReport, Option<TrainedFlowModel>) {
    let start = Instant::now();
    let (mut rep, model) = run_training(cfg);
    rep.command = "sample".into();
    if let Some(m) = &model {
        if let Err(e) = sample_stage(cfg, m, &mut rep) {
            rep.errors.push(format!("sampling: {e}"));
        }
    }
    rep.runtime.total_ms = start.elapsed().as_millis() as u64;
    rep.settle();
    (rep, model)
}

fn sample_stage(cfg: &ExperimentConfig, model: &TrainedFlowModel, rep: &mut ExperimentReport) -> Result<()> {
    let s = cfg.schedule.build()?;
    let p0 = cfg.density.build()?;
    let n = cfg.pipeline.sample_n;
    let reference = training_data(cfg, &p0, n, "reference-data")?;
    let path = GaussianPath::new(s.clone(), p0);
    let exact = ExactFields { path: &path, accel: Some(AccelField::Posterior) };
    let mut sources: Vec<(&str, &dyn FlowFields)> = vec![("trained", model)];
    if cfg.pipeline.exact_baseline {
        sources.push(("exact", &exact));
    }
    for (name, fields) in sources {
        let mut w1s = Vec::new();
        for &steps in &cfg.pipeline.steps {
            for order in [1u8, 2] {
                let x = sample_ode(fields, &s, n, steps, order, cfg.pipeline.t_end, Seed(cfg.seed))?;
                let w1 = wasserstein_distance(&x, &reference, 1)?;
                let w2 = wasserstein_distance(&x, &reference, 2)?;
                if order == 1 {
                    w1s.push(w1);
                }
                rep.distances.push(DistanceRow { source: name.into(), order, steps, w1, w2 });
            }
        }
        if name == "exact" {
            let ok = w1s.windows(2).all(|w| w[1] <= w[0] * 1.05);
            rep.checks.push(
                CheckResult::new(SUITE, "exact-w1-nonincreasing", ok, w1s.last().copied().unwrap_or(f64::NAN), w1s[0])
                    .with_note("order-1 W1 along the step ladder, 5% Monte-Carlo slack"),
            );
        }
    }
    Ok(())
}

/// Exact-field order-1 sampling of a Gaussian target against the
/// self-distance of two target samples, and bitwise equality of order 2
/// with the analytic zero acceleration.
pub fn sampler_sanity(seed: u64, n: usize, steps: usize) -> Result<Vec<CheckResult>> {
    let sigma = 0.5;
    let s = Schedule::rectified();
    let p0 = Density::gaussian_reference(1, sigma)?;
    let streams = Streams::new(Seed(seed));
    let a = p0.sample_with(n, &mut streams.stream("target-a"))?;
    let b = p0.sample_with(n, &mut streams.stream("target-b"))?;
    let baseline = wasserstein_distance(&a, &b, 1)?;
    let path = GaussianPath::new(s.clone(), p0);
    let fields = ExactFields { path: &path, accel: None };
    let t_end = 1e-3;
    let x1 = sample_ode(&fields, &s, n, steps, 1, t_end, Seed(seed))?;
    let w1 = wasserstein_distance(&x1, &a, 1)?;
    let x2 = sample_ode(&fields, &s, n, steps, 2, t_end, Seed(seed))?;
    let same = x1.iter().zip(&x2).all(|(u, v)| u.iter().zip(v).all(|(p, q)| p.to_bits() == q.to_bits()));
    Ok(vec![
        CheckResult::new(SUITE, "sampler-w1", w1 <= 1.5 * baseline, w1, 1.5 * baseline)
            .with_note(format!("{n} samples, {steps} steps; self-distance baseline {baseline:.4e}")),
        CheckResult::new(SUITE, "sampler-zero-accel-bitwise", same, if same { 0.0 } else { 1.0 }, 0.0),
    ])
}

/// Analytic against central-difference gradients of both training losses.
pub fn gradient_checks(seed: u64, probes: usize) -> Result<Vec<CheckResult>> {
    let streams = Streams::new(Seed(seed));
    let s = Schedule::power(crate::schedule::PowerLaw { b0: 1.0, kappa: 0.5, b0_tilde: 1.0, kappa_tilde: 1.0 })?;
    let p0 = Density::lacunary(2, 0.5, 1.0, 6, crate::density::Wave::Tent)?;
    let data = p0.sample_with(256, &mut streams.stream("grad-data"))?;
    let d = 2;
    let vnet = MlpModel::new(&[d + 1, 16, 16, d], &mut streams.stream("grad-velocity"))?;
    let anet = MlpModel::new(&[2 * d + 1, 16, 16, d], &mut streams.stream("grad-accel"))?;
    let mut out = Vec::new();
    for (order, model) in [(1u8, &vnet), (2, &anet)] {
        let v = (order == 2).then_some(&vnet);
        let (x, y) = flow_batch(&s, &data, order, AccelTarget::Rectified, v, 64, (0.05, 1.0), &mut streams.indexed("grad-batch", order as u64))?;
        let err = gradient_check(model, &x, &y, probes, 1e-6, &mut streams.indexed("grad-probes", order as u64))?;
        out.push(
            CheckResult::new(SUITE, &format!("gradient-order{order}"), err <= 1e-4, err, 1e-4)
                .with_note(format!("{probes} random parameter probes, h = 1e-6")),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match() {
        let checks = gradient_checks(3, 16).unwrap();
        assert!(checks.iter().all(|c| c.passed()), "{checks:?}");
    }

    #[test]
    fn rectified_pipeline_has_zero_acceleration() {
        let mut cfg = ExperimentConfig::default();
        cfg.schedule.kind = super::super::config::ScheduleName::Rectified;
        cfg.density = super::super::config::DensitySpec::uniform(1);
        cfg.train.hidden = vec![8];
        cfg.train.steps = 50;
        cfg.train.eval_batch = 256;
        cfg.pipeline.train_samples = 256;
        cfg.pipeline.sample_n = 128;
        cfg.pipeline.steps = vec![4];
        let (rep, model) = run_pipeline(&cfg);
        assert!(rep.errors.is_empty(), "{:?}", rep.errors);
        let model = model.unwrap();
        assert_eq!(model.acceleration(0.5, &[0.3]).unwrap(), vec![0.0]);
        let s = cfg.schedule.build().unwrap();
        let a = sample_ode(&model, &s, 64, 8, 1, 1e-3, Seed(1)).unwrap();
        let b = sample_ode(&model, &s, 64, 8, 2, 1e-3, Seed(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(rep.distances.len(), 2);
    }
}
