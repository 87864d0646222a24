//! Small ReLU MLP heads for the velocity and acceleration, trained by
//! regression on conditional targets; integrated squared error against the
//! exact marginal fields; first- and second-order ODE samplers; Wasserstein
//! distances between point clouds.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::error::{Error, Result};
use crate::gaussian_path::{AccelField, GaussianPath};
use crate::quad;
use crate::relunet::{Layer, ReluNetwork};
use crate::rng::{Seed, Streams};
use crate::schedule::{Schedule, ScheduleState};

/// Fully connected ReLU network; the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub dims: Vec<usize>,
    /// Row-major (out × in) weight blocks.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpModel {
    /// He-initialized weights, zero biases.
    pub fn new(dims: &[usize], rng: &mut ChaCha20Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Argument(format!("layer dims {dims:?} need at least two positive entries")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let sd = (2.0 / w[0] as f64).sqrt();
            weights.push((0..w[0] * w[1]).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect());
            biases.push(vec![0.0; w[1]]);
        }
        Ok(Self { dims: dims.to_vec(), weights, biases })
    }

    /// Same network with a zero output layer: predicts 0 until trained.
    pub fn with_zero_output(mut self) -> Self {
        if let (Some(w), Some(b)) = (self.weights.last_mut(), self.biases.last_mut()) {
            w.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        self
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims nonempty")
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            p.extend_from_slice(w);
            p.extend_from_slice(b);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::DimMismatch { expected: self.num_params(), got: p.len() });
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.copy_from_slice(&p[k..k + n]);
            k += n;
            let n = b.len();
            b.copy_from_slice(&p[k..k + n]);
            k += n;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (nin, nout) = (self.dims[l], self.dims[l + 1]);
            let mut next = b.clone();
            for o in 0..nout {
                let row = &w[o * nin..(o + 1) * nin];
                next[o] += row.iter().zip(&cur).map(|(a, v)| a * v).sum::<f64>();
            }
            if l < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = next;
        }
        cur
    }

    /// Same function as a sparse ReLU network; zero weights are dropped so
    /// the statistics count only active connections.
    pub fn to_relu_network(&self) -> Result<ReluNetwork> {
        let mut layers = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let nin = self.dims[l];
            let rows = w
                .chunks(nin)
                .map(|row| row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect())
                .collect();
            layers.push(Layer::new(nin, rows, b.clone())?);
        }
        ReluNetwork::new(layers)
    }

    /// Mean over the batch of ‖net(x) − y‖² and its gradient in the
    /// `params()` layout.
    pub fn loss_and_grad(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::DimMismatch { expected: inputs.len(), got: targets.len() });
        }
        let nl = self.weights.len();
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let inv = 1.0 / inputs.len() as f64;
        let mut loss = 0.0;
        for (x, y) in inputs.iter().zip(targets) {
            // activations[l] is the input to layer l
            let mut acts: Vec<Vec<f64>> = vec![x.clone()];
            for l in 0..nl {
                let (nin, nout) = (self.dims[l], self.dims[l + 1]);
                let cur = &acts[l];
                let mut next = self.biases[l].clone();
                for o in 0..nout {
                    let row = &self.weights[l][o * nin..(o + 1) * nin];
                    next[o] += row.iter().zip(cur).map(|(a, v)| a * v).sum::<f64>();
                }
                if l + 1 < nl {
                    next.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                acts.push(next);
            }
            let out = &acts[nl];
            let mut delta: Vec<f64> = out.iter().zip(y).map(|(o, t)| 2.0 * (o - t) * inv).collect();
            loss += out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() * inv;
            for l in (0..nl).rev() {
                let (nin, nout) = (self.dims[l], self.dims[l + 1]);
                let a = &acts[l];
                for o in 0..nout {
                    let g = delta[o];
                    if g == 0.0 {
                        continue;
                    }
                    gb[l][o] += g;
                    let row = &mut gw[l][o * nin..(o + 1) * nin];
                    for (r, v) in row.iter_mut().zip(a) {
                        *r += g * v;
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; nin];
                    for o in 0..nout {
                        let g = delta[o];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &self.weights[l][o * nin..(o + 1) * nin];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += g * w;
                        }
                    }
                    // ReLU derivative: active where the post-activation is positive.
                    for (p, v) in prev.iter_mut().zip(a) {
                        if *v <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        let mut grad = Vec::with_capacity(self.num_params());
        for (w, b) in gw.into_iter().zip(gb) {
            grad.extend(w);
            grad.extend(b);
        }
        Ok((loss, grad))
    }

    pub fn loss(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
        let inv = 1.0 / inputs.len().max(1) as f64;
        inputs
            .iter()
            .zip(targets)
            .map(|(x, y)| self.forward(x).iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>())
            .sum::<f64>()
            * inv
    }

    pub fn to_network(&self) -> ReluNetwork {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .enumerate()
            .map(|(l, (w, b))| {
                let nin = self.dims[l];
                let rows = (0..self.dims[l + 1])
                    .map(|o| (0..nin).filter_map(|i| {
                        let v = w[o * nin + i];
                        (v != 0.0).then_some((i, v))
                    }).collect())
                    .collect();
                Layer { in_dim: nin, rows, bias: b.clone() }
            })
            .collect();
        ReluNetwork { input_dim: self.dims[0], layers }
    }

    pub fn from_network(net: &ReluNetwork) -> Self {
        let mut dims = vec![net.input_dim];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in &net.layers {
            let nin = l.in_dim;
            let mut w = vec![0.0; nin * l.out_dim()];
            for (o, r) in l.rows.iter().enumerate() {
                for &(c, v) in r {
                    w[o * nin + c] += v;
                }
            }
            dims.push(l.out_dim());
            weights.push(w);
            biases.push(l.bias.clone());
        }
        Self { dims, weights, biases }
    }
}

/// Largest relative error between analytic and central-difference partial
/// derivatives over `probes` random parameter coordinates.
/// Relative error is |g − ĝ| / max(|g|, |ĝ|, floor).
pub fn gradient_check(
    model: &MlpModel,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    probes: usize,
    h: f64,
    rng: &mut ChaCha20Rng,
) -> Result<f64> {
    let (_, grad) = model.loss_and_grad(inputs, targets)?;
    let base = model.params();
    let mut m = model.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[i] = base[i] + h;
        m.set_params(&p)?;
        let up = m.loss(inputs, targets);
        p[i] = base[i] - h;
        m.set_params(&p)?;
        let down = m.loss(inputs, targets);
        let fd = (up - down) / (2.0 * h);
        let denom = grad[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max((grad[i] - fd).abs() / denom);
    }
    Ok(worst)
}

/// Regression target of the acceleration head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccelTarget {
    /// α″x₀ + β″x₁, the second time derivative of the interpolant.
    Rectified,
    /// c₂x₀ + c₃x₁ with (c₂, c₃) = (α″ − α′²/α, β″ − α′β′/α), whose
    /// posterior mean is the Bayes-averaged acceleration.
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Gradient norm cap; 0 disables.
    pub grad_clip: f64,
    pub t0: f64,
    pub target: AccelTarget,
    pub eval_batch: usize,
    /// Interval boundaries for the loss breakdown; empty means dyadic from t0.
    pub intervals: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            steps: 2000,
            batch: 128,
            lr: 2e-3,
            momentum: 0.9,
            grad_clip: 10.0,
            t0: 1e-3,
            target: AccelTarget::Rectified,
            eval_batch: 2048,
            intervals: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalLoss {
    pub t_lo: f64,
    pub t_hi: f64,
    pub order: u8,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    /// (order, initial eval loss, final eval loss)
    pub summary: Vec<(u8, f64, f64)>,
    /// Training-batch loss every `steps/50` steps, per order.
    pub curve: Vec<(u8, usize, f64)>,
    pub intervals: Vec<IntervalLoss>,
}

#[derive(Debug, Clone)]
pub struct TrainedFlowModel {
    pub velocity_net: MlpModel,
    /// Input (x₁, x₂, t) with x₂ the frozen velocity output.
    pub accel_net: Option<MlpModel>,
    pub log: TrainingLog,
}

/// One regression batch for the given order. The velocity net must be
/// given for order 2.
pub fn flow_batch(
    schedule: &Schedule,
    data: &[Vec<f64>],
    order: u8,
    target: AccelTarget,
    velocity: Option<&MlpModel>,
    n: usize,
    t_range: (f64, f64),
    rng: &mut ChaCha20Rng,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let d = data.first().ok_or_else(|| Error::Argument("training data is empty".into()))?.len();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.random_range(t_range.0..=t_range.1);
        let st = schedule.eval(t)?;
        let x1 = data.choose(rng).expect("nonempty");
        let x0: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let xt: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| st.alpha * a + st.beta * b).collect();
        let (ca, cb) = match (order, target) {
            (1, _) => (st.alpha1, st.beta1),
            (_, AccelTarget::Rectified) => (st.alpha2, st.beta2),
            (_, AccelTarget::Conditional) => st.accel_coefficients(),
        };
        targets.push(x0.iter().zip(x1).map(|(a, b)| ca * a + cb * b).collect());
        let mut inp = xt.clone();
        if order == 2 {
            let v = velocity.ok_or_else(|| Error::Argument("order 2 needs the frozen velocity net".into()))?;
            let mut vin = xt;
            vin.push(t);
            inp.extend(v.forward(&vin));
        }
        inp.push(t);
        inputs.push(inp);
    }
    Ok((inputs, targets))
}

fn cosine_lr(lr: f64, step: usize, steps: usize) -> f64 {
    0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos())
}

fn sgd(
    model: &mut MlpModel,
    cfg: &TrainConfig,
    order: u8,
    mut batch: impl FnMut(&mut ChaCha20Rng) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    rng: &mut ChaCha20Rng,
    log: &mut TrainingLog,
) -> Result<()> {
    let mut params = model.params();
    let mut vel = vec![0.0; params.len()];
    let every = (cfg.steps / 50).max(1);
    for step in 0..cfg.steps {
        let (x, y) = batch(rng)?;
        let (loss, mut g) = model.loss_and_grad(&x, &y)?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step });
        }
        if cfg.grad_clip > 0.0 {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                g.iter_mut().for_each(|v| *v *= cfg.grad_clip / norm);
            }
        }
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        for ((p, v), gi) in params.iter_mut().zip(vel.iter_mut()).zip(&g) {
            *v = cfg.momentum * *v - lr * gi;
            *p += *v;
        }
        model.set_params(&params)?;
        if step % every == 0 {
            log.curve.push((order, step, loss));
        }
    }
    Ok(())
}

fn interval_edges(cfg: &TrainConfig) -> Vec<f64> {
    if cfg.intervals.len() >= 2 {
        return cfg.intervals.clone();
    }
    let mut e = vec![cfg.t0];
    while *e.last().expect("nonempty") < 1.0 {
        let next = (e.last().expect("nonempty") * 2.0).min(1.0);
        e.push(next);
    }
    e
}

/// Trains the velocity head (order 1) and, for order 2, an acceleration
/// head on top of the frozen velocity head. Deterministic given the seed.
pub fn train_flow(cfg: &TrainConfig, data: &[Vec<f64>], schedule: &Schedule, order: u8, seed: Seed) -> Result<TrainedFlowModel> {
    if data.is_empty() {
        return Err(Error::Argument("training data is empty".into()));
    }
    if !(order == 1 || order == 2) {
        return Err(Error::Argument(format!("order must be 1 or 2, got {order}")));
    }
    if !(cfg.t0 > 0.0 && cfg.t0 < 1.0) || cfg.batch == 0 || cfg.hidden.is_empty() {
        return Err(Error::Config("train config needs 0 < t0 < 1, batch > 0 and hidden widths".into()));
    }
    let d = data[0].len();
    let streams = Streams::new(seed);
    let mut log = TrainingLog::default();
    let range = (cfg.t0, 1.0);

    let mut dims = vec![d + 1];
    dims.extend(&cfg.hidden);
    dims.push(d);
    let mut vnet = MlpModel::new(&dims, &mut streams.stream("init-velocity"))?.with_zero_output();
    let (ex, ey) = flow_batch(schedule, data, 1, cfg.target, None, cfg.eval_batch, range, &mut streams.stream("eval-velocity"))?;
    let before = vnet.loss(&ex, &ey);
    let mut rng = streams.stream("train-velocity");
    sgd(&mut vnet, cfg, 1, |r| flow_batch(schedule, data, 1, cfg.target, None, cfg.batch, range, r), &mut rng, &mut log)?;
    log.summary.push((1, before, vnet.loss(&ex, &ey)));

    let mut anet = None;
    if order == 2 {
        let mut dims = vec![2 * d + 1];
        dims.extend(&cfg.hidden);
        dims.push(d);
        let mut a = MlpModel::new(&dims, &mut streams.stream("init-accel"))?.with_zero_output();
        let (ex, ey) =
            flow_batch(schedule, data, 2, cfg.target, Some(&vnet), cfg.eval_batch, range, &mut streams.stream("eval-accel"))?;
        let before = a.loss(&ex, &ey);
        let mut rng = streams.stream("train-accel");
        let v = vnet.clone();
        sgd(&mut a, cfg, 2, |r| flow_batch(schedule, data, 2, cfg.target, Some(&v), cfg.batch, range, r), &mut rng, &mut log)?;
        log.summary.push((2, before, a.loss(&ex, &ey)));
        anet = Some(a);
    }

    let edges = interval_edges(cfg);
    let per = (cfg.eval_batch / (edges.len() - 1).max(1)).max(64);
    for (k, w) in edges.windows(2).enumerate() {
        let mut r = streams.indexed("eval-interval", k as u64);
        let (x, y) = flow_batch(schedule, data, 1, cfg.target, None, per, (w[0], w[1]), &mut r)?;
        log.intervals.push(IntervalLoss { t_lo: w[0], t_hi: w[1], order: 1, loss: vnet.loss(&x, &y) });
        if let Some(a) = &anet {
            let (x, y) = flow_batch(schedule, data, 2, cfg.target, Some(&vnet), per, (w[0], w[1]), &mut r)?;
            log.intervals.push(IntervalLoss { t_lo: w[0], t_hi: w[1], order: 2, loss: a.loss(&x, &y) });
        }
    }
    Ok(TrainedFlowModel { velocity_net: vnet, accel_net: anet, log })
}

impl TrainedFlowModel {
    pub fn velocity(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut inp = x.to_vec();
        inp.push(t);
        self.velocity_net.forward(&inp)
    }

    pub fn acceleration(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        let a = self.accel_net.as_ref()?;
        let mut inp = x.to_vec();
        inp.extend(self.velocity(t, x));
        inp.push(t);
        Some(a.forward(&inp))
    }

    /// `velocity` and optional `accel` sections, each a network in text form.
    pub fn to_text(&self) -> String {
        let mut s = String::from("velocity\n");
        s.push_str(&self.velocity_net.to_network().to_text());
        if let Some(a) = &self.accel_net {
            s.push_str("accel\n");
            s.push_str(&a.to_network().to_text());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body = text
            .strip_prefix("velocity\n")
            .ok_or_else(|| Error::Parse { line: 1, msg: "model file must start with `velocity`".into() })?;
        let (v, a) = match body.split_once("\naccel\n") {
            Some((v, a)) => (v, Some(a)),
            None => (body, None),
        };
        let velocity_net = MlpModel::from_network(&ReluNetwork::from_text(v)?);
        let accel_net = a.map(|a| ReluNetwork::from_text(a).map(|n| MlpModel::from_network(&n))).transpose()?;
        Ok(Self { velocity_net, accel_net, log: TrainingLog::default() })
    }
}

/// Fields driving the sampler. `None` acceleration means the analytic
/// zero field: the second-order step then reduces to the first-order one.
pub trait FlowFields: Sync {
    fn dim(&self) -> usize;
    fn fields(&self, t: f64, x: &[f64], accel: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)>;
}

impl FlowFields for TrainedFlowModel {
    fn dim(&self) -> usize {
        self.velocity_net.output_dim()
    }

    fn fields(&self, t: f64, x: &[f64], accel: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let v = self.velocity(t, x);
        let a = if accel { self.acceleration(t, x) } else { None };
        Ok((v, a))
    }
}

/// Exact marginal fields of a path.
pub struct ExactFields<'a> {
    pub path: &'a GaussianPath,
    /// `None` for the analytic zero acceleration.
    pub accel: Option<AccelField>,
}

impl FlowFields for ExactFields<'_> {
    fn dim(&self) -> usize {
        self.path.d()
    }

    fn fields(&self, t: f64, x: &[f64], accel: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let st = self.path.schedule.eval(t)?;
        match (accel, self.accel) {
            (true, Some(field)) => {
                let f = self.path.fields_at(&st, x, field)?;
                Ok((f.velocity, Some(f.acceleration)))
            }
            _ => Ok((self.path.velocity_at(&st, x)?, None)),
        }
    }
}

/// Integrates dx/dt = v from t = 1 (noise, x ~ α₁·𝒩(0, I)) down to t0 in
/// `steps` uniform steps. Order 2 adds (h²/2)·a.
pub fn sample_ode<F: FlowFields + ?Sized>(
    fields: &F,
    schedule: &Schedule,
    n: usize,
    steps: usize,
    order: u8,
    t0: f64,
    seed: Seed,
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::Argument("sampler needs at least one step".into()));
    }
    if !(order == 1 || order == 2) {
        return Err(Error::Argument(format!("order must be 1 or 2, got {order}")));
    }
    let end = schedule.eval(1.0)?;
    if end.beta.abs() > 1e-12 {
        return Err(Error::Config(format!("sampling starts from pure noise and needs beta(1) = 0, got {}", end.beta)));
    }
    let d = fields.dim();
    let mut rng = Streams::new(seed).stream("ode-noise");
    let starts: Vec<Vec<f64>> =
        (0..n).map(|_| (0..d).map(|_| end.alpha * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let h = (t0 - 1.0) / steps as f64;
    starts
        .into_par_iter()
        .map(|mut x| {
            for k in 0..steps {
                let t = 1.0 + k as f64 * h;
                let (v, a) = fields.fields(t, &x, order == 2).map_err(|e| match e {
                    Error::Underflow { .. } | Error::Singular(_) => Error::Integration { step: k },
                    other => other,
                })?;
                for i in 0..d {
                    x[i] += h * v[i];
                }
                if let Some(a) = a {
                    for i in 0..d {
                        if a[i] != 0.0 {
                            x[i] += 0.5 * h * h * a[i];
                        }
                    }
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Integration { step: k });
                }
            }
            Ok(x)
        })
        .collect()
}

/// Quantity compared against the model in the integrated squared error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IseTarget {
    Velocity,
    Acceleration(AccelField),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IseOptions {
    /// Gauss–Legendre nodes per panel.
    pub nodes: usize,
    /// Panel width in units of α.
    pub panel_alpha: f64,
    /// Integration box: β·supp(p₀) widened by this many α.
    pub margin: f64,
    /// Repeat with halved panels and fail on relative change above 1e−3.
    pub checked: bool,
}

impl Default for IseOptions {
    fn default() -> Self {
        Self { nodes: 8, panel_alpha: 0.5, margin: 9.0, checked: false }
    }
}

fn ise_axes(p0: &Density, st: &ScheduleState, opts: &IseOptions, refine: f64) -> Vec<Vec<(f64, f64)>> {
    let g = quad::rule(opts.nodes);
    // p_t is smooth at scale α, so only the support edges are breaks.
    let cap = (opts.panel_alpha * st.alpha).min(p0.feature_scale() * st.beta.max(1e-12)).max(1e-12) / refine;
    p0.support_box()
        .iter()
        .map(|&(lo, hi)| {
            let a = st.beta * lo - opts.margin * st.alpha;
            let b = st.beta * hi + opts.margin * st.alpha;
            let breaks = if p0.is_compact() { vec![st.beta * lo, st.beta * hi] } else { Vec::new() };
            let panels = quad::panels(a, b, &breaks, cap);
            panels.iter().flat_map(|&(u, v)| g.mapped(u, v).collect::<Vec<_>>()).collect()
        })
        .collect()
}

/// ∫ ‖model(x) − target(x)‖² p_t(x) dx by tensor Gauss–Legendre over
/// β·supp(p₀) widened by `margin`·α. Points where p_t underflows add 0.
pub fn integrated_squared_error<M>(model: M, path: &GaussianPath, t: f64, target: IseTarget, opts: &IseOptions) -> Result<f64>
where
    M: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let st = path.schedule.eval(t)?;
    let run = |refine: f64| -> Result<f64> {
        let axes = ise_axes(&path.p0, &st, opts, refine);
        let mut nodes = Vec::new();
        quad::tensor_visit(&axes, |x, w| nodes.push((x.to_vec(), w)));
        let parts: Vec<f64> = nodes
            .par_iter()
            .map(|(x, w)| -> Result<f64> {
                let field = match target {
                    IseTarget::Velocity => AccelField::Posterior,
                    IseTarget::Acceleration(f) => f,
                };
                let f = match path.fields_at(&st, x, field) {
                    Ok(f) => f,
                    Err(Error::Underflow { .. }) => return Ok(0.0),
                    Err(e) => return Err(e),
                };
                let want = match target {
                    IseTarget::Velocity => &f.velocity,
                    IseTarget::Acceleration(_) => &f.acceleration,
                };
                let got = model(x)?;
                Ok(w * f.density * got.iter().zip(want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            })
            .collect::<Result<_>>()?;
        Ok(parts.iter().sum())
    };
    let v = run(1.0)?;
    if opts.checked {
        let v2 = run(2.0)?;
        if (v - v2).abs() > 1e-3 * v2.abs() + 1e-12 {
            return Err(Error::Precision(format!("ISE changed from {v:e} to {v2:e} under panel halving")));
        }
    }
    Ok(v)
}

/// W_p between equal-size point clouds: sorted coupling in 1-D, optimal
/// assignment in higher dimension up to 512 points, entropic transport
/// beyond that.
pub fn wasserstein_distance(a: &[Vec<f64>], b: &[Vec<f64>], p: u32) -> Result<f64> {
    if !(p == 1 || p == 2) {
        return Err(Error::Argument(format!("p must be 1 or 2, got {p}")));
    }
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimMismatch { expected: a.len(), got: b.len() });
    }
    let d = a[0].len();
    let pf = p as f64;
    if d == 1 {
        let mut x: Vec<f64> = a.iter().map(|v| v[0]).collect();
        let mut y: Vec<f64> = b.iter().map(|v| v[0]).collect();
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        let s: f64 = x.iter().zip(&y).map(|(u, v)| (u - v).abs().powf(pf)).sum();
        return Ok((s / x.len() as f64).powf(1.0 / pf));
    }
    let cost = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(s, t)| (s - t) * (s - t)).sum::<f64>().sqrt().powf(pf);
    let n = a.len();
    if n <= 512 {
        let c: Vec<f64> = a.iter().flat_map(|u| b.iter().map(move |v| cost(u, v))).collect();
        let assign = min_cost_assignment(&c, n);
        let s: f64 = assign.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum();
        return Ok((s / n as f64).powf(1.0 / pf));
    }
    Ok(sinkhorn(a, b, &cost, 500, 1e-6).powf(1.0 / pf))
}

/// Minimum-cost perfect matching on a dense n × n cost matrix by shortest
/// augmenting paths with potentials. Returns the column of each row.
pub fn min_cost_assignment(c: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row[p[j] - 1] = j - 1;
        }
    }
    row
}

/// Transport cost of the log-domain entropic plan with uniform weights;
/// regularization 1% of the mean cost.
fn sinkhorn<C: Fn(&[f64], &[f64]) -> f64 + Sync>(a: &[Vec<f64>], b: &[Vec<f64>], cost: &C, iters: usize, tol: f64) -> f64 {
    let (n, m) = (a.len(), b.len());
    let c: Vec<f64> = a.par_iter().flat_map_iter(|u| b.iter().map(move |v| cost(u, v))).collect();
    let mean = c.iter().sum::<f64>() / c.len() as f64;
    let eps = (0.01 * mean).max(1e-12);
    let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let lse = |vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.collect();
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    for _ in 0..iters {
        let nf: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| -eps * lse(&mut (0..m).map(|j| (g[j] - c[i * m + j]) / eps + lb)))
            .collect();
        f = nf;
        let ng: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|j| -eps * lse(&mut (0..n).map(|i| (f[i] - c[i * m + j]) / eps + la)))
            .collect();
        let change = ng.iter().zip(&g).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        g = ng;
        if change < tol * eps {
            break;
        }
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    let pij = ((f[i] + g[j] - c[i * m + j]) / eps + la + lb).exp();
                    pij * c[i * m + j]
                })
                .sum::<f64>()
        })
        .sum()
}

/// Standard normal draws as points, for tests and baselines.
pub fn normal_points(n: usize, d: usize, mean: f64, sd: f64, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::Density;

    fn rng(k: u64) -> ChaCha20Rng {
        Streams::new(Seed(k)).stream("test")
    }

    #[test]
    fn mlp_converts_to_relu_network() {
        let m = MlpModel::new(&[3, 8, 5, 2], &mut rng(4)).unwrap();
        let net = m.to_relu_network().unwrap();
        assert_eq!(net.depth(), 3);
        for x in [[0.1, -0.4, 0.9], [1.5, 0.0, -2.0]] {
            let a = m.forward(&x);
            let b = net.eval(&x).unwrap();
            assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() <= 1e-12));
        }
    }

    #[test]
    fn params_round_trip_and_network_equivalence() {
        let m = MlpModel::new(&[3, 8, 2], &mut rng(1)).unwrap();
        let mut m2 = m.clone();
        m2.set_params(&m.params()).unwrap();
        assert_eq!(m, m2);
        let net = m.to_network();
        let x = [0.3, -0.7, 0.1];
        let a = m.forward(&x);
        let b = net.eval(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        let back = MlpModel::from_network(&ReluNetwork::from_text(&net.to_text()).unwrap());
        assert_eq!(back.forward(&x), a);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = Schedule::rectified();
        let data = Density::uniform(1).unwrap().sample(256, Seed(3)).unwrap();
        let v = MlpModel::new(&[2, 16, 16, 1], &mut rng(2)).unwrap();
        for order in [1u8, 2] {
            let m = if order == 1 { v.clone() } else { MlpModel::new(&[3, 16, 16, 1], &mut rng(4)).unwrap() };
            let (x, y) = flow_batch(&s, &data, order, AccelTarget::Rectified, Some(&v), 32, (0.05, 1.0), &mut rng(5)).unwrap();
            let err = gradient_check(&m, &x, &y, 32, 1e-6, &mut rng(6)).unwrap();
            assert!(err <= 1e-4, "order {order}: {err}");
        }
    }

    #[test]
    fn point_mass_velocity_is_learned() {
        let s = Schedule::rectified();
        let data = vec![vec![0.0]; 16];
        let cfg = TrainConfig { hidden: vec![32, 32], steps: 2000, batch: 64, t0: 0.2, ..TrainConfig::default() };
        let m = train_flow(&cfg, &data, &s, 1, Seed(1)).unwrap();
        let (_, before, after) = m.log.summary[0];
        assert!(after <= before);
        assert!(after < 0.05 * before, "final loss {after}");
    }

    #[test]
    fn linear_schedule_acceleration_is_zero() {
        let s = Schedule::rectified();
        let data = Density::uniform(1).unwrap().sample(256, Seed(8)).unwrap();
        let cfg = TrainConfig { hidden: vec![16], steps: 400, batch: 64, t0: 0.05, ..TrainConfig::default() };
        let m = train_flow(&cfg, &data, &s, 2, Seed(2)).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..=20 {
            for j in 1..=10 {
                let a = m.acceleration(j as f64 / 10.0, &[-1.0 + 0.1 * i as f64]).unwrap();
                worst = worst.max(a[0].abs());
            }
        }
        assert!(worst <= 1e-2, "{worst} {:?}", m.log.summary);
    }

    #[test]
    fn wasserstein_examples() {
        let a: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1]).collect();
        assert_eq!(wasserstein_distance(&a, &a, 1).unwrap(), 0.0);
        let z = vec![vec![0.0]; 20];
        let o = vec![vec![1.0]; 20];
        assert_eq!(wasserstein_distance(&z, &o, 1).unwrap(), 1.0);
        let mut r = rng(9);
        let x = normal_points(10_000, 1, 0.0, 1.0, &mut r);
        let y = normal_points(10_000, 1, 1.0, 1.0, &mut r);
        assert!((wasserstein_distance(&x, &y, 1).unwrap() - 1.0).abs() <= 0.05);
        assert!(wasserstein_distance(&x[..10], &y[..11], 1).is_err());
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut r = rng(10);
        for n in 1..=6 {
            let c: Vec<f64> = (0..n * n).map(|_| r.random_range(0.0..1.0)).collect();
            let got = min_cost_assignment(&c, n);
            let cost: f64 = got.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                best = best.min(p.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum());
            });
            assert!((cost - best).abs() < 1e-12);
        }
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn two_dim_distances() {
        let mut r = rng(11);
        let x = normal_points(200, 2, 0.0, 1.0, &mut r);
        let y: Vec<Vec<f64>> = x.iter().map(|p| vec![p[0] + 0.5, p[1]]).collect();
        let w = wasserstein_distance(&x, &y, 1).unwrap();
        assert!((w - 0.5).abs() < 1e-9, "{w}");
        let xs = normal_points(600, 2, 0.0, 1.0, &mut r);
        let ys: Vec<Vec<f64>> = xs.iter().map(|p| vec![p[0] + 0.5, p[1]]).collect();
        let w2 = wasserstein_distance(&xs, &ys, 2).unwrap();
        assert!((w2 - 0.5).abs() < 0.05, "{w2}");
    }

    #[test]
    fn ise_of_exact_field_and_zero() {
        let path = GaussianPath::new(Schedule::rectified(), Density::uniform(1).unwrap());
        let t = 0.4;
        let st = path.schedule.eval(t).unwrap();
        let opts = IseOptions::default();
        let exact = integrated_squared_error(
            |x| Ok(path.fields_at(&st, x, AccelField::Posterior)?.acceleration),
            &path,
            t,
            IseTarget::Acceleration(AccelField::Posterior),
            &opts,
        )
        .unwrap();
        assert!(exact <= 1e-10);
        let zero = integrated_squared_error(|_| Ok(vec![0.0]), &path, t, IseTarget::Velocity, &opts).unwrap();
        // Independent oracle: trapezoid over a wide box.
        let direct = quad::trapezoid(
            |x| {
                let p = path.marginal_density(t, &[x]).unwrap();
                let v = path.marginal_velocity(t, &[x]).unwrap()[0];
                p * v * v
            },
            -0.6 - 9.0 * 0.4,
            0.6 + 9.0 * 0.4,
            20_000,
        );
        assert!((zero - direct).abs() <= 1e-6 * direct, "{zero} vs {direct}");
    }

    #[test]
    fn sampler_order_two_with_zero_accel_is_bitwise_order_one() {
        let path = GaussianPath::new(Schedule::rectified(), Density::gaussian_reference(1, 0.5).unwrap());
        let f1 = ExactFields { path: &path, accel: None };
        let a = sample_ode(&f1, &path.schedule, 64, 16, 1, 1e-3, Seed(4)).unwrap();
        let b = sample_ode(&f1, &path.schedule, 64, 16, 2, 1e-3, Seed(4)).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u[0].to_bits(), v[0].to_bits());
        }
        assert!(sample_ode(&f1, &path.schedule, 4, 0, 1, 1e-3, Seed(4)).is_err());
    }
}
