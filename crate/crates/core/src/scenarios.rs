//! Built-in model configurations.

use serde::Serialize;

use crate::config::{InitialConfig, MemoryConfig, ModelConfig, WindowSpec, AutoWindow};
use crate::fading_memory::DelayMeasure;
use crate::model::Nonlinearity;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub initial: InitialConfig,
    /// Default noise level.
    pub eps: f64,
}

fn memory(window: WindowSpec, tail_tol: f64) -> MemoryConfig {
    MemoryConfig {
        r: 1.0,
        h: 0.01,
        window,
        tail_tol,
        bound: 10.0,
    }
}

pub fn scenario_registry() -> Vec<Scenario> {
    vec![
        Scenario {
            name: "ou",
            description: "Ornstein–Uhlenbeck: dY = −Y dt + √ε dW, no delay",
            model: ModelConfig::Scalar {
                a: 1.0,
                b: 0.0,
                nonlinearity: Nonlinearity::Zero,
                sigma0: 1.0,
                sigma1: 0.0,
                mu1: DelayMeasure::atom(0.0),
                mu2: DelayMeasure::atom(0.0),
            },
            memory: memory(WindowSpec::Length(1.0), 1e-8),
            initial: InitialConfig { value: vec![0.0] },
            eps: 0.5,
        },
        Scenario {
            name: "delay-ou",
            description: "dY = (−2Y(t) + 0.5Y(t − 0.1)) dt + √ε dW",
            model: ModelConfig::Scalar {
                a: 2.0,
                b: 0.5,
                nonlinearity: Nonlinearity::Zero,
                sigma0: 1.0,
                sigma1: 0.0,
                mu1: DelayMeasure::atom(-0.1),
                mu2: DelayMeasure::atom(0.0),
            },
            memory: memory(WindowSpec::Length(1.0), 1e-8),
            initial: InitialConfig { value: vec![1.0] },
            eps: 0.25,
        },
        Scenario {
            name: "multiplicative",
            description: "distributed delay, tanh drift, σ(φ) = 0.2 + 0.1∫φ dμ2 with exponential kernels",
            model: ModelConfig::Scalar {
                a: 2.0,
                b: 0.5,
                nonlinearity: Nonlinearity::Tanh { scale: 0.5 },
                sigma0: 0.2,
                sigma1: 0.1,
                mu1: DelayMeasure::exponential(5.0),
                mu2: DelayMeasure::exponential(5.0),
            },
            memory: memory(WindowSpec::Auto(AutoWindow::Auto), 1e-6),
            initial: InitialConfig { value: vec![0.5] },
            eps: 0.25,
        },
    ]
}

pub fn scenario(name: &str) -> Option<Scenario> {
    scenario_registry().into_iter().find(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_models_are_stable_at_default_eps() {
        let reg = scenario_registry();
        assert!(reg.len() >= 3);
        for s in &reg {
            let m = s.model.build().unwrap();
            let p = s.memory.build(&m).unwrap();
            assert!(m.margin(p.r, s.eps).unwrap() > 0.0, "{}", s.name);
        }
    }

    #[test]
    fn ou_has_no_delay_mass() {
        let m = scenario("ou").unwrap().model.build().unwrap();
        assert!(m.mu1().atoms.iter().all(|(lag, _)| *lag == 0.0) && m.mu1().expo.is_none());
        assert!(m.mu2().atoms.iter().all(|(lag, _)| *lag == 0.0) && m.mu2().expo.is_none());
    }

    #[test]
    fn delay_ou_matches_margin_example() {
        let m = scenario("delay-ou").unwrap().model.build().unwrap();
        let expected = 3.5 - 0.5 * 0.2f64.exp();
        assert!((m.margin(1.0, 0.25).unwrap() - expected).abs() < 1e-12);
    }
}
