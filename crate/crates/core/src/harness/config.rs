//! Experiment configuration: a flat TOML file with dotted keys such as
//! `density.kind = "lacunary"` or `rate.ns = [16, 32, 64]`. Every key has a
//! default, unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bspline::F4Options;
use crate::density::{BesovParams, Density, MixtureComponent, Wave};
use crate::error::{Error, Result};
use crate::schedule::{AssumptionParams, PowerLaw, Schedule, TimeGrid};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityName {
    Uniform,
    Mixture,
    Bump,
    Lacunary,
    Gaussian,
    Bspline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySpec {
    pub kind: DensityName,
    pub d: usize,
    pub amplitude: f64,
    /// Exponent q of the bump product.
    pub power: u32,
    /// Roughness exponent of the lacunary series.
    pub smoothness: f64,
    pub depth: u32,
    pub wave: Wave,
    /// Standard deviation of the Gaussian reference.
    pub sigma: f64,
    /// Mixture components: weights, flattened means (d per component), widths.
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Expansion text file for `bspline`.
    pub expansion: Option<String>,
}

impl Default for DensitySpec {
    fn default() -> Self {
        Self {
            kind: DensityName::Lacunary,
            d: 1,
            amplitude: 0.5,
            power: 2,
            smoothness: 1.0,
            depth: 9,
            wave: Wave::Tent,
            sigma: 0.5,
            weights: vec![0.5, 0.5],
            means: vec![-0.4, 0.4],
            sigmas: vec![0.25, 0.25],
            expansion: None,
        }
    }
}

impl DensitySpec {
    pub fn uniform(d: usize) -> Self {
        Self { kind: DensityName::Uniform, d, ..Self::default() }
    }

    pub fn build(&self) -> Result<Density> {
        let d = self.d;
        match self.kind {
            DensityName::Uniform => Density::uniform(d),
            DensityName::Bump => Density::bump_product(d, self.amplitude, self.power),
            DensityName::Lacunary => Density::lacunary(d, self.amplitude, self.smoothness, self.depth, self.wave),
            DensityName::Gaussian => Density::gaussian_reference(d, self.sigma),
            DensityName::Mixture => {
                let k = self.weights.len();
                if self.sigmas.len() != k || self.means.len() != k * d {
                    return Err(Error::Config(format!(
                        "mixture needs {k} sigmas and {} means, got {} and {}",
                        k * d,
                        self.sigmas.len(),
                        self.means.len()
                    )));
                }
                let comps = (0..k)
                    .map(|i| MixtureComponent {
                        weight: self.weights[i],
                        mean: self.means[i * d..(i + 1) * d].to_vec(),
                        sigma: self.sigmas[i],
                    })
                    .collect();
                Density::mixture(d, comps)
            }
            DensityName::Bspline => {
                let path = self
                    .expansion
                    .as_ref()
                    .ok_or_else(|| Error::Config("density.expansion is required for kind = \"bspline\"".into()))?;
                let text = std::fs::read_to_string(path)?;
                Density::bspline_built(crate::bspline::BSplineExpansion::from_text(&text)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleName {
    Linear,
    Rectified,
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleName,
    pub b0: f64,
    pub kappa: f64,
    pub b0_tilde: f64,
    pub kappa_tilde: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { kind: ScheduleName::Power, b0: 1.0, kappa: 0.5, b0_tilde: 1.0, kappa_tilde: 1.0 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Schedule> {
        match self.kind {
            ScheduleName::Linear => Ok(Schedule::linear()),
            ScheduleName::Rectified => Ok(Schedule::rectified()),
            ScheduleName::Power => Schedule::power(PowerLaw {
                b0: self.b0,
                kappa: self.kappa,
                b0_tilde: self.b0_tilde,
                kappa_tilde: self.kappa_tilde,
            }),
        }
    }

    /// Exponent κ entering T_*.
    pub fn kappa(&self) -> f64 {
        match self.kind {
            ScheduleName::Power => self.kappa,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
    pub r0: f64,
    pub delta: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { n: 64, r0: 2.5, delta: 0.05 }
    }
}

/// Positive constants of the bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Constants {
    /// Declared smoothness of the main density.
    pub s: f64,
    pub omega: f64,
    pub eta: f64,
    pub c5: f64,
    pub c_b: f64,
    pub k0: f64,
    pub d0: f64,
    pub gamma: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self { s: 1.0, omega: 0.5, eta: 2.0, c5: 3.0, c_b: 5.0, k0: 4.0, d0: 2.0, gamma: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    SmallT,
    LargeT,
    Bspline,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::SmallT => "small-t",
            Regime::LargeT => "large-t",
            Regime::Bspline => "bspline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSpec {
    pub regimes: Vec<Regime>,
    pub ns: Vec<usize>,
    /// Times per ladder entry.
    pub times: usize,
    /// Upper end of the small-t window; 3T_* when absent.
    pub t_boundary: Option<f64>,
    /// Anchor of the rebased schedule.
    pub t_star: f64,
    /// Last large-t time (β vanishes at t = 1).
    pub t_end: f64,
    pub bspline_ns: Vec<usize>,
    pub bspline_s: f64,
    pub bspline_density: DensitySpec,
}

impl Default for RateSpec {
    fn default() -> Self {
        Self {
            regimes: vec![Regime::SmallT, Regime::LargeT, Regime::Bspline],
            ns: vec![16, 32, 64, 128, 256],
            times: 5,
            t_boundary: None,
            t_star: 0.1,
            t_end: 0.95,
            bspline_ns: vec![16, 32, 64, 128, 256, 512],
            bspline_s: 2.0,
            bspline_density: DensitySpec {
                kind: DensityName::Lacunary,
                smoothness: 2.0,
                depth: 10,
                wave: Wave::Cosine,
                ..DensitySpec::default()
            },
        }
    }
}

pub const SUITES: [&str; 7] =
    ["schedule-assumptions", "path-bounds", "gamma", "tails", "pde-residuals", "gadgets", "det-derivative"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySpec {
    pub suites: Vec<String>,
    /// Density of the path-bound and tail checks.
    pub density: DensitySpec,
    pub dims: Vec<usize>,
    pub points: usize,
    pub reach: f64,
    pub eps: f64,
    pub tail_times: Vec<f64>,
    /// Gadget accuracy of the acceleration network check.
    pub gadget_eps: f64,
    pub pipeline_ns: Vec<usize>,
    pub identity_probes: usize,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            suites: SUITES.iter().map(|s| s.to_string()).collect(),
            density: DensitySpec::uniform(1),
            dims: vec![1, 2],
            points: 41,
            reach: 6.0,
            eps: 0.1,
            tail_times: vec![0.1, 0.3, 0.6, 0.9],
            gadget_eps: 1e-3,
            pipeline_ns: vec![16, 64, 256],
            identity_probes: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSpec {
    pub train_samples: usize,
    /// Generated and reference sample size.
    pub sample_n: usize,
    pub steps: Vec<usize>,
    pub t_end: f64,
    /// Also sample with the exact marginal fields.
    pub exact_baseline: bool,
    /// Load a trained model instead of training.
    pub model: Option<String>,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self {
            train_samples: 4096,
            sample_n: 1024,
            steps: vec![4, 16, 64],
            t_end: 1e-3,
            exact_baseline: false,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: String,
    pub density: DensitySpec,
    pub schedule: ScheduleSpec,
    pub grid: GridSpec,
    pub constants: Constants,
    pub f4: F4Options,
    pub rate: RateSpec,
    pub verify: VerifySpec,
    pub train: TrainConfig,
    pub pipeline: PipelineSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: "out".into(),
            density: DensitySpec::default(),
            schedule: ScheduleSpec::default(),
            grid: GridSpec::default(),
            constants: Constants::default(),
            f4: F4Options::default(),
            rate: RateSpec::default(),
            verify: VerifySpec::default(),
            train: TrainConfig::default(),
            pipeline: PipelineSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Fully resolved configuration, defaults included.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.constants;
        for (name, v) in [
            ("s", c.s),
            ("omega", c.omega),
            ("eta", c.eta),
            ("c5", c.c5),
            ("c_b", c.c_b),
            ("k0", c.k0),
            ("d0", c.d0),
            ("gamma", c.gamma),
            ("grid.r0", self.grid.r0),
            ("grid.delta", self.grid.delta),
            ("rate.t_star", self.rate.t_star),
            ("rate.bspline_s", self.rate.bspline_s),
            ("verify.eps", self.verify.eps),
            ("verify.gadget_eps", self.verify.gadget_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, ns) in [("rate.ns", &self.rate.ns), ("rate.bspline_ns", &self.rate.bspline_ns), ("verify.pipeline_ns", &self.verify.pipeline_ns)]
        {
            if ns.windows(2).any(|w| w[1] <= w[0]) || ns.first().is_some_and(|&n| n < 2) {
                return Err(Error::Config(format!("{name} must be strictly increasing and at least 2: {ns:?}")));
            }
        }
        if self.grid.n < 2 {
            return Err(Error::Config(format!("grid.n must be at least 2, got {}", self.grid.n)));
        }
        if let Some(b) = self.rate.t_boundary {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("rate.t_boundary must lie in (0, 1), got {b}")));
            }
        }
        if !(self.rate.t_end > 2.0 * self.rate.t_star && self.rate.t_end < 1.0) {
            return Err(Error::Config(format!(
                "rate.t_end must lie in (2 t_star, 1), got {} with t_star {}",
                self.rate.t_end, self.rate.t_star
            )));
        }
        for s in &self.verify.suites {
            if !SUITES.contains(&s.as_str()) {
                return Err(Error::Config(format!("unknown suite {s:?}; known: {}", SUITES.join(", "))));
            }
        }
        if self.density.d == 0 || self.density.d > 3 || self.verify.dims.iter().any(|&d| d == 0 || d > 3) {
            return Err(Error::Config("dimensions must lie in 1..=3".into()));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn time_grid(&self, n: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.r0, self.grid.delta, n, self.density.d, self.schedule.kappa())
    }

    pub fn assumption_params(&self) -> AssumptionParams {
        AssumptionParams { d0: self.constants.d0, k0: self.constants.k0, gamma: self.constants.gamma, ..AssumptionParams::default() }
    }

    pub fn besov(&self) -> BesovParams {
        BesovParams::holder(self.constants.s)
    }

    /// Small-t/large-t boundary at budget n.
    pub fn t_boundary(&self, n: usize) -> Result<f64> {
        match self.rate.t_boundary {
            Some(b) => Ok(b),
            None => Ok(3.0 * self.time_grid(n)?.t_star()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn dotted_keys_and_errors() {
        let cfg = ExperimentConfig::from_text("seed = 3\ndensity.kind = \"uniform\"\nrate.ns = [8, 16, 32, 64]\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.density.kind, DensityName::Uniform);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
        assert!(ExperimentConfig::from_text("rate.ns = [16, 8]").is_err());
        assert!(ExperimentConfig::from_text("constants.c5 = -1.0").is_err());
        assert!(ExperimentConfig::from_text("density.colour = 1").is_err());
        assert!(ExperimentConfig::from_text("verify.suites = [\"nope\"]").is_err());
    }

    #[test]
    fn boundary_defaults_to_three_t_star() {
        let cfg = ExperimentConfig::default();
        let g = cfg.time_grid(64).unwrap();
        assert_eq!(cfg.t_boundary(64).unwrap(), 3.0 * g.t_star());
    }
}
