use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Exploration schedule for ε-greedy action selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// ε decays every epoch from ε₀.
    Dge,
    /// ε stays at 1 until an episode beats the threshold, then is fixed at
    /// ε_new.
    Tge,
    /// As [`Strategy::Tge`], then decays from ε_new.
    Tdge,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Self::Dge, Self::Tge, Self::Tdge];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dge => "dge",
            Self::Tge => "tge",
            Self::Tdge => "tdge",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dge" => Ok(Self::Dge),
            "tge" => Ok(Self::Tge),
            "tdge" => Ok(Self::Tdge),
            other => Err(invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Q-value approximator family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approximator {
    /// Two-layer dense network with a target copy and experience replay.
    Dense,
    /// Lookup table keyed by the exact environment state; meant for small N.
    Tabular,
}

/// Reward, exploration and learner settings of the chain scheduler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RLConfig {
    /// Base reward of a Free device taking part in a pair.
    pub alpha: f64,
    /// Weight of the per-device aggregation count.
    pub beta: f64,
    /// Busy-selection penalty; must be negative.
    pub rho: f64,
    pub epsilon0: f64,
    pub epsilon_new: f64,
    /// Multiplicative per-epoch ε factor.
    pub decay: f64,
    pub strategy: Strategy,
    /// Offset subtracted from the exploration threshold.
    pub phi: f64,
    pub max_epoch: usize,
    pub discount: f64,
    pub learn_rate: f64,
    pub approximator: Approximator,
    pub hidden: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Gradient updates between target-network copies.
    pub target_sync: usize,
    /// Step size of the tabular update.
    pub tabular_alpha: f64,
    /// Epoch budget of a re-learning slot.
    pub relearn_epochs: usize,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            alpha: -0.04,
            beta: 0.1,
            rho: -0.8,
            epsilon0: 1.0,
            epsilon_new: 0.3,
            decay: 0.99,
            strategy: Strategy::Tdge,
            phi: 0.0,
            max_epoch: 500,
            discount: 0.95,
            learn_rate: 1e-3,
            approximator: Approximator::Dense,
            hidden: 64,
            batch_size: 32,
            replay_capacity: 10_000,
            target_sync: 100,
            tabular_alpha: 0.5,
            relearn_epochs: 30,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.alpha,
            self.beta,
            self.rho,
            self.epsilon0,
            self.epsilon_new,
            self.decay,
            self.phi,
            self.discount,
            self.learn_rate,
            self.tabular_alpha,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(invalid("RL parameters must be finite"));
        }
        if self.rho >= 0.0 {
            return Err(invalid(format!("rho must be negative, got {}", self.rho)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(invalid(format!("decay must lie in (0, 1), got {}", self.decay)));
        }
        for (name, e) in [("epsilon0", self.epsilon0), ("epsilon_new", self.epsilon_new)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {e}")));
            }
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(invalid("discount must lie in [0, 1]"));
        }
        if self.learn_rate <= 0.0 || self.tabular_alpha <= 0.0 || self.tabular_alpha > 1.0 {
            return Err(invalid("learning rates must be positive (tabular_alpha at most 1)"));
        }
        if self.max_epoch == 0 || self.hidden == 0 || self.batch_size == 0 || self.target_sync == 0 {
            return Err(invalid("max_epoch, hidden, batch_size and target_sync must be positive"));
        }
        if self.replay_capacity < self.batch_size {
            return Err(invalid("replay_capacity must hold at least one batch"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RLConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range_values() {
        let bad = [
            RLConfig { rho: 0.0, ..Default::default() },
            RLConfig { decay: 1.0, ..Default::default() },
            RLConfig { decay: 0.0, ..Default::default() },
            RLConfig { epsilon_new: 1.5, ..Default::default() },
            RLConfig { epsilon0: -0.1, ..Default::default() },
            RLConfig { max_epoch: 0, ..Default::default() },
            RLConfig { alpha: f64::NAN, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn strategy_parses() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("greedy".parse::<Strategy>().is_err());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: RLConfig = toml::from_str("strategy = \"dge\"\nphi = 0.25").unwrap();
        assert_eq!(cfg.strategy, Strategy::Dge);
        assert_eq!(cfg.phi, 0.25);
        assert_eq!(cfg.alpha, -0.04);
    }
}
