//! Run configuration: a TOML document with a model block, a memory block,
//! an optional initial segment, and one experiment block.
//!
//! ```toml
//! seed = 7
//! scenario = "delay-ou"          # optional; fills model/memory/initial
//!
//! [experiment]
//! kind = "pullback"
//! eps = 0.25
//! window = [0.0, 1.0]
//! n_list = [2.0, 4.0, 6.0]
//! ```
//!
//! Unknown keys are rejected. Output location and the cache toggle do not
//! enter the configuration hash.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FadeError, Result};
use crate::fading_memory::{choose_window, DelayMeasure, MemoryParams, Segment};
use crate::ldp::FSpec;
use crate::model::{CoefficientModel, Nonlinearity};
use crate::rate::RateOptions;
use crate::scenarios::scenario;
use crate::simulate::Scheme;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default = "default_true")]
    pub cache: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
    pub experiment: ExperimentConfig,
}

/// Drift `−Aφ(0) + B∫φdμ1 + f(φ(0))`, diffusion `Σ0 + Σ_i (∫φ_i dμ2) Σ1_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Scalar {
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default = "zero_nonlinearity")]
        nonlinearity: Nonlinearity,
        sigma0: f64,
        #[serde(default)]
        sigma1: f64,
        mu1: DelayMeasure,
        mu2: DelayMeasure,
    },
    Matrix {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        #[serde(default = "zero_nonlinearity")]
        nonlinearity: Nonlinearity,
        sigma0: Vec<Vec<f64>>,
        sigma1: Vec<Vec<Vec<f64>>>,
        mu1: DelayMeasure,
        mu2: DelayMeasure,
    },
}

fn zero_nonlinearity() -> Nonlinearity {
    Nonlinearity::Zero
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(FadeError::Config(format!("model.{name} must be a nonempty rectangular matrix")));
    }
    Ok(DMatrix::from_row_iterator(n, m, rows.iter().flatten().copied()))
}

impl ModelConfig {
    pub fn build(&self) -> Result<CoefficientModel> {
        match self {
            ModelConfig::Scalar {
                a,
                b,
                nonlinearity,
                sigma0,
                sigma1,
                mu1,
                mu2,
            } => CoefficientModel::scalar(*a, *b, *nonlinearity, *sigma0, *sigma1, mu1.clone(), mu2.clone()),
            ModelConfig::Matrix {
                a,
                b,
                nonlinearity,
                sigma0,
                sigma1,
                mu1,
                mu2,
            } => CoefficientModel::new(
                matrix(a, "a")?,
                matrix(b, "b")?,
                *nonlinearity,
                matrix(sigma0, "sigma0")?,
                sigma1
                    .iter()
                    .enumerate()
                    .map(|(i, s)| matrix(s, &format!("sigma1[{i}]")))
                    .collect::<Result<Vec<_>>>()?,
                mu1.clone(),
                mu2.clone(),
            ),
        }
    }
}

/// A window length or `"auto"` (chosen from the delay measures).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WindowSpec {
    Length(f64),
    Auto(AutoWindow),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoWindow {
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub r: f64,
    pub h: f64,
    pub window: WindowSpec,
    pub tail_tol: f64,
    /// Norm bound used when the window is chosen automatically.
    #[serde(default = "default_bound")]
    pub bound: f64,
}

fn default_bound() -> f64 {
    10.0
}

impl MemoryConfig {
    pub fn build(&self, model: &CoefficientModel) -> Result<MemoryParams> {
        let window = match self.window {
            WindowSpec::Length(l) => l,
            WindowSpec::Auto(_) => {
                let w = choose_window(self.r, self.h, self.bound, &[model.mu1(), model.mu2()], self.tail_tol)?;
                w.max(model.mu1().deepest_atom().abs()).max(model.mu2().deepest_atom().abs())
            }
        };
        MemoryParams::aligned(self.r, self.h, window, self.tail_tol)
    }
}

/// A constant initial history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub mean: f64,
    pub var: f64,
}

/// Rate-problem target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetConfig {
    Point { y: Vec<f64> },
    /// Constant history equal to `y` over the whole window.
    ConstantSegment { y: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EventConfig {
    TerminalBall { center: Vec<f64>, radius: f64, time: f64 },
    TerminalExceed { threshold: f64, time: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_rho0")]
    pub rho0: f64,
    #[serde(default = "d_outer")]
    pub max_outer: usize,
    #[serde(default = "d_inner")]
    pub max_inner: usize,
    #[serde(default = "d_random")]
    pub n_random: usize,
}

fn d_tol() -> f64 {
    RateOptions::default().tol
}
fn d_rho0() -> f64 {
    RateOptions::default().rho0
}
fn d_outer() -> usize {
    RateOptions::default().max_outer
}
fn d_inner() -> usize {
    RateOptions::default().max_inner
}
fn d_random() -> usize {
    RateOptions::default().n_random
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            tol: d_tol(),
            rho0: d_rho0(),
            max_outer: d_outer(),
            max_inner: d_inner(),
            n_random: d_random(),
        }
    }
}

impl OptimizerConfig {
    pub fn options(&self, seed: u64) -> RateOptions {
        RateOptions {
            tol: self.tol,
            rho0: self.rho0,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            n_random: self.n_random,
            seed,
            ..RateOptions::default()
        }
    }
}

fn d_alpha() -> f64 {
    0.01
}
fn d_samples() -> usize {
    2000
}
fn d_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExperimentConfig {
    Simulate {
        eps: Option<f64>,
        #[serde(default)]
        t0: f64,
        t_end: f64,
        #[serde(default)]
        scheme: Scheme,
        #[serde(default = "d_one")]
        n_paths: usize,
    },
    CheckModel {
        eps: Option<f64>,
        #[serde(default = "d_samples")]
        n_samples: usize,
    },
    Pullback {
        eps: Option<f64>,
        window: [f64; 2],
        n_list: Vec<f64>,
        #[serde(default)]
        scheme: Scheme,
    },
    Stationarity {
        eps: Option<f64>,
        n_burn: f64,
        times: Vec<f64>,
        n_replicas: usize,
        #[serde(default = "d_alpha")]
        alpha: f64,
        reference: Option<ReferenceConfig>,
    },
    Rate {
        #[serde(default)]
        t0: f64,
        t_end: f64,
        target: TargetConfig,
        h_v: f64,
        #[serde(default)]
        optimizer: OptimizerConfig,
    },
    Quasipotential {
        target: TargetConfig,
        t_list: Vec<f64>,
        depth: f64,
        h_v: f64,
        #[serde(default)]
        optimizer: OptimizerConfig,
    },
    LdpSlope {
        event: EventConfig,
        eps_list: Vec<f64>,
        n_per_eps: usize,
        /// Control step of the rate problem that supplies the tilt.
        h_v: f64,
        #[serde(default)]
        optimizer: OptimizerConfig,
    },
    VariationalCheck {
        f: FSpec,
        t: f64,
        k: usize,
        #[serde(default)]
        n_mc: usize,
    },
}

impl ExperimentConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentConfig::Simulate { .. } => "simulate",
            ExperimentConfig::CheckModel { .. } => "check-model",
            ExperimentConfig::Pullback { .. } => "pullback",
            ExperimentConfig::Stationarity { .. } => "stationarity",
            ExperimentConfig::Rate { .. } => "rate",
            ExperimentConfig::Quasipotential { .. } => "quasipotential",
            ExperimentConfig::LdpSlope { .. } => "ldp-slope",
            ExperimentConfig::VariationalCheck { .. } => "variational-check",
        }
    }

    /// Monte Carlo experiments whose results are cached.
    pub fn is_expensive(&self) -> bool {
        matches!(
            self,
            ExperimentConfig::Stationarity { .. } | ExperimentConfig::LdpSlope { .. }
        )
    }
}

/// Everything an experiment needs, with scenario defaults filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: CoefficientModel,
    pub params: MemoryParams,
    pub initial: Segment,
    pub default_eps: f64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| FadeError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FadeError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FadeError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form without `output` and `cache`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output");
            map.remove("cache");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let sc = match &self.scenario {
            Some(name) => {
                Some(scenario(name).ok_or_else(|| FadeError::Config(format!("unknown scenario `{name}`")))?)
            }
            None => None,
        };
        let model_cfg = self
            .model
            .as_ref()
            .or(sc.as_ref().map(|s| &s.model))
            .ok_or_else(|| FadeError::Config("missing [model] block (or scenario)".into()))?;
        let memory_cfg = self
            .memory
            .as_ref()
            .or(sc.as_ref().map(|s| &s.memory))
            .ok_or_else(|| FadeError::Config("missing [memory] block (or scenario)".into()))?;
        let model = model_cfg.build()?;
        let params = memory_cfg.build(&model)?;
        let value = match (&self.initial, &sc) {
            (Some(i), _) => i.value.clone(),
            (None, Some(s)) => s.initial.value.clone(),
            (None, None) => vec![0.0; model.d()],
        };
        if value.len() != model.d() {
            return Err(FadeError::Config(format!(
                "initial.value has {} entries, model dimension is {}",
                value.len(),
                model.d()
            )));
        }
        let initial = Segment::constant(params, 0.0, &value)?;
        Ok(Resolved {
            model,
            params,
            initial,
            default_eps: sc.map_or(0.0, |s| s.eps),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3
scenario = "delay-ou"

[experiment]
kind = "pullback"
eps = 0.25
window = [0.0, 1.0]
n_list = [2.0, 4.0]
"#;

    #[test]
    fn parse_and_round_trip() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.experiment.kind(), "pullback");
        assert!(cfg.resolve().is_ok());
    }

    #[test]
    fn unknown_key_is_named() {
        let bad = SAMPLE.replace("eps = 0.25", "epsilon = 0.25");
        let err = RunConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("epsilon"), "{err}");
        let bad = format!("{SAMPLE}\n[memory]\nr = 1.0\nh = 0.01\nwindow = 1.0\ntail_tol = 1e-8\nfoo = 1\n");
        let err = RunConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("foo"), "{err}");
    }

    #[test]
    fn hash_ignores_output() {
        let a = RunConfig::from_toml(SAMPLE).unwrap();
        let mut b = a.clone();
        b.output = Some("elsewhere".into());
        b.cache = false;
        assert_eq!(a.hash(), b.hash());
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn explicit_model_and_auto_window() {
        let text = r#"
[model]
family = "scalar"
a = 2.0
b = 0.5
sigma0 = 0.2
sigma1 = 0.1
nonlinearity = { kind = "tanh", scale = 0.5 }
mu1 = { atoms = [], expo = { mass = 1.0, beta = 5.0 } }
mu2 = { atoms = [[-0.1, 1.0]] }

[memory]
r = 1.0
h = 0.01
window = "auto"
tail_tol = 1e-6

[experiment]
kind = "check-model"
eps = 0.1
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        let res = cfg.resolve().unwrap();
        assert!(res.params.window >= 0.1);
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }
}
