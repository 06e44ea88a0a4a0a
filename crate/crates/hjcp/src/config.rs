//! JSON run configuration.
//!
//! Every field has a default, so `{}` is a valid config describing the
//! desk-scale highway experiment. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use hjcp_core::filter::Strategy;
use hjcp_core::highway::{Highway, HighwayConfig};
use hjcp_core::learn::{Optimizer, TrainConfig};
use hjcp_core::systems::{DoubleIntegrator, Dubins};
use hjcp_core::Environment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighwayParams {
    pub dt: f64,
    pub horizon: usize,
    pub target_speed: f64,
    pub target_x: f64,
    pub k_v: f64,
    pub k_theta: f64,
    pub k_x: f64,
    pub control_resolution: [usize; 2],
    /// Ego speed floor; `null` allows reversing.
    pub min_speed: Option<f64>,
}

impl Default for HighwayParams {
    fn default() -> Self {
        let c = HighwayConfig::default();
        Self {
            dt: c.dt,
            horizon: c.horizon,
            target_speed: c.target_speed,
            target_x: c.target_x,
            k_v: c.k_v,
            k_theta: c.k_theta,
            k_x: c.k_x,
            control_resolution: c.control_resolution,
            min_speed: c.min_speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleIntegratorParams {
    pub dt: f64,
    pub band: f64,
    pub u_max: f64,
    pub control_resolution: usize,
    pub nominal_target: f64,
    pub kp: f64,
    pub kd: f64,
    pub horizon: usize,
}

impl Default for DoubleIntegratorParams {
    fn default() -> Self {
        let d = DoubleIntegrator::default();
        Self {
            dt: d.dt,
            band: d.band,
            u_max: 1.0,
            control_resolution: 3,
            nominal_target: d.nominal_target,
            kp: d.kp,
            kd: d.kd,
            horizon: d.horizon,
        }
    }
}

impl DoubleIntegratorParams {
    pub fn build(&self) -> anyhow::Result<DoubleIntegrator> {
        let mut d = DoubleIntegrator::new(self.dt, self.u_max, self.control_resolution)?;
        d.band = self.band;
        d.nominal_target = self.nominal_target;
        d.kp = self.kp;
        d.kd = self.kd;
        d.horizon = self.horizon;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DubinsParams {
    pub dt: f64,
    pub speed: f64,
    pub obstacle: [f64; 2],
    pub radius: f64,
    pub k_heading: f64,
    pub horizon: usize,
}

impl Default for DubinsParams {
    fn default() -> Self {
        let d = Dubins::default();
        Self {
            dt: d.dt,
            speed: d.speed,
            obstacle: d.obstacle,
            radius: d.radius,
            k_heading: d.k_heading,
            horizon: d.horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemConfig {
    Highway(HighwayParams),
    DoubleIntegrator(DoubleIntegratorParams),
    Dubins(DubinsParams),
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::Highway(HighwayParams::default())
    }
}

impl SystemConfig {
    pub fn build(&self) -> anyhow::Result<Box<dyn Environment>> {
        Ok(match self {
            SystemConfig::Highway(p) => {
                let cfg = HighwayConfig {
                    dt: p.dt,
                    horizon: p.horizon,
                    target_speed: p.target_speed,
                    target_x: p.target_x,
                    k_v: p.k_v,
                    k_theta: p.k_theta,
                    k_x: p.k_x,
                    control_resolution: p.control_resolution,
                    min_speed: p.min_speed,
                    ..HighwayConfig::default()
                };
                Box::new(Highway::new(cfg)?)
            }
            SystemConfig::DoubleIntegrator(p) => Box::new(p.build()?),
            SystemConfig::Dubins(p) => {
                let mut d = Dubins::new(p.dt, p.speed, p.obstacle, p.radius)?;
                d.k_heading = p.k_heading;
                d.horizon = p.horizon;
                Box::new(d)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

/// Serializable mirror of [`TrainConfig`]; defaults are the library's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub optimizer: OptimizerName,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gradient_steps: usize,
    pub tau: f64,
    pub exploration_noise: f64,
    pub episodes: usize,
    pub rounds: usize,
    pub hidden: Vec<usize>,
    pub warm_start_steps: usize,
    pub buffer_capacity: usize,
    pub log_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self::from_core(&TrainConfig::default())
    }
}

impl TrainSettings {
    pub fn from_core(c: &TrainConfig) -> Self {
        Self {
            optimizer: match c.optimizer {
                Optimizer::Sgd => OptimizerName::Sgd,
                Optimizer::Adam => OptimizerName::Adam,
            },
            gamma: c.gamma,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            gradient_steps: c.gradient_steps,
            tau: c.tau,
            exploration_noise: c.exploration_noise,
            episodes: c.episodes,
            rounds: c.rounds,
            hidden: c.hidden.clone(),
            warm_start_steps: c.warm_start_steps,
            buffer_capacity: c.buffer_capacity,
            log_every: c.log_every,
        }
    }

    /// Settings tuned for the highway task at desk scale.
    pub fn highway() -> Self {
        Self {
            gamma: 0.98,
            batch_size: 32,
            episodes: 50,
            warm_start_steps: 1_000,
            ..Self::default()
        }
    }

    pub fn to_core(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: match self.optimizer {
                OptimizerName::Sgd => Optimizer::Sgd,
                OptimizerName::Adam => Optimizer::Adam,
            },
            gamma: self.gamma,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            gradient_steps: self.gradient_steps,
            tau: self.tau,
            exploration_noise: self.exploration_noise,
            episodes: self.episodes,
            rounds: self.rounds,
            hidden: self.hidden.clone(),
            warm_start_steps: self.warm_start_steps,
            buffer_capacity: self.buffer_capacity,
            log_every: self.log_every,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Single,
    Multiple,
}

impl From<StrategyName> for Strategy {
    fn from(s: StrategyName) -> Self {
        match s {
            StrategyName::Single => Strategy::Single,
            StrategyName::Multiple => Strategy::Multiple,
        }
    }
}

/// Settings for the double-integrator oracle study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub system: DoubleIntegratorParams,
    pub nodes: [usize; 2],
    pub p_range: [f64; 2],
    pub v_range: [f64; 2],
    pub gamma: f64,
    pub tol: f64,
    pub train: TrainSettings,
    /// Calibration pool size for the coverage study (0 skips the study).
    pub pool: usize,
    pub resamples: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub alphas: Vec<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            system: DoubleIntegratorParams::default(),
            nodes: [101, 101],
            p_range: [-1.2, 1.2],
            v_range: [-2.0, 2.0],
            gamma: 0.999,
            tol: 1e-6,
            train: TrainSettings::default(),
            pool: 8_000,
            resamples: 200,
            n_cal: 200,
            n_test: 1_000,
            alphas: vec![0.05, 0.1, 0.2],
        }
    }
}

pub const DEFAULT_ALPHA_GRID: [f64; 7] = [0.02, 0.04, 0.06, 0.08, 0.1, 0.15, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub train: TrainSettings,
    /// Ensemble size.
    pub members: usize,
    /// Miscoverage level used by `eval` and `certify`.
    pub alpha: f64,
    /// Levels at which calibration quantiles are tabulated.
    pub alphas: Vec<f64>,
    /// Restrict ensemble policies to one strategy; both when absent.
    pub strategy: Option<StrategyName>,
    /// Calibration trajectories per member.
    pub n_traj: usize,
    /// Paired evaluation trials per policy.
    pub trials: usize,
    pub n_cert: Vec<usize>,
    /// Credible levels reported by `certify`.
    pub levels: Vec<f64>,
    /// Policies certified: `nominal`, `member<j>`, `ensemble-single`, `ensemble-multiple`.
    pub certify_policies: Vec<String>,
    pub pdf_points: usize,
    /// Per-step traces are written for the first this-many trials of each policy.
    pub trace_trials: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub oracle: OracleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            train: TrainSettings::highway(),
            members: 5,
            alpha: 0.06,
            alphas: DEFAULT_ALPHA_GRID.to_vec(),
            strategy: None,
            n_traj: 2_000,
            trials: 50,
            n_cert: vec![50, 100, 200],
            levels: vec![0.9, 0.95, 0.99],
            certify_policies: vec!["nominal".into(), "ensemble-multiple".into()],
            pdf_points: 200,
            trace_trials: 3,
            seed: 0,
            out: PathBuf::from("out"),
            oracle: OracleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let alpha_ok = |a: f64| a > 0.0 && a < 1.0;
        if !alpha_ok(self.alpha) || !self.alphas.iter().all(|&a| alpha_ok(a)) {
            bail!("alpha values must lie in (0, 1)");
        }
        if self.members == 0 {
            bail!("members must be at least 1");
        }
        if self.n_traj == 0 || self.trials == 0 {
            bail!("n_traj and trials must be positive");
        }
        if self.n_cert.iter().any(|&n| n == 0) {
            bail!("every n_cert entry must be positive");
        }
        if !self.levels.iter().all(|&l| (0.0..=1.0).contains(&l)) {
            bail!("credible levels must lie in [0, 1]");
        }
        for p in &self.certify_policies {
            crate::commands::PolicySpec::parse(p)?;
        }
        self.train.to_core(self.seed).validate()?;
        Ok(())
    }

    /// Quantile levels to tabulate: the grid plus the evaluation level.
    pub fn calibration_alphas(&self) -> Vec<f64> {
        let mut a = self.alphas.clone();
        if !a.contains(&self.alpha) {
            a.push(self.alpha);
        }
        a.sort_by(|x, y| x.total_cmp(y));
        a
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trips() {
        let c = RunConfig {
            system: SystemConfig::DoubleIntegrator(DoubleIntegratorParams::default()),
            strategy: Some(StrategyName::Single),
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"memberz": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"gama": 0.9}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"alpha": 1.5}"#).unwrap();
        assert!(c.validate().is_err());
        let c: RunConfig = serde_json::from_str(r#"{"certify_policies": ["everything"]}"#).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_system_params() {
        let c: RunConfig = serde_json::from_str(r#"{"system": {"kind": "highway", "k_theta": 2.0}}"#).unwrap();
        match &c.system {
            SystemConfig::Highway(p) => {
                assert_eq!(p.k_theta, 2.0);
                assert_eq!(p.k_x, HighwayParams::default().k_x);
            }
            other => panic!("{other:?}"),
        }
        let env = c.system.build().unwrap();
        assert_eq!(env.state_dim(), 10);
    }

    #[test]
    fn alpha_grid_includes_eval_level() {
        let c = RunConfig {
            alpha: 0.07,
            ..RunConfig::default()
        };
        let a = c.calibration_alphas();
        assert!(a.contains(&0.07));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
