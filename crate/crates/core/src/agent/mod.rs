//! Reinforcement-learning meta-scheduler. A Q-network reads the windowed
//! system state and picks which static policy dispatches the next window.

pub mod adam;
pub mod env;
pub mod mdp;
pub mod qnet;
pub mod replay;
pub mod reward;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use env::{state_shape, AsetEnv, RewardConfig};
pub use mdp::{argmax, value_iteration, Environment, StepResult, TabularEnv, TabularMdp};
pub use qnet::{prepare_input, NetShape, QNetwork};
pub use replay::{ReplayBuffer, Transition};
pub use train::{loss_and_gradient, select_action, td_target, write_curve_csv, CurveRow, Hyperparams, Trainer};

use crate::error::{Error, Result};
use crate::features::FeaturePartition;
use crate::policies::PolicyKind;
use crate::sim::{EpisodeConfig, PolicyProvider, Simulation};

pub const CHECKPOINT_FORMAT: &str = "aset-agent";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained network plus everything needed to serve or resume it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub partition: FeaturePartition,
    pub shape: NetShape,
    pub reward: RewardConfig,
    pub hyperparams: Hyperparams,
    pub episodes: usize,
    pub params: Vec<f64>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(trainer: &Trainer, partition: FeaturePartition, reward: RewardConfig) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            partition,
            shape: trainer.net.shape().clone(),
            reward,
            hyperparams: trainer.hp.clone(),
            episodes: trainer.episode,
            params: trainer.net.params.clone(),
            optimizer: Some(trainer.adam.clone()),
        }
    }

    pub fn network(&self) -> Result<QNetwork> {
        QNetwork::from_params(self.shape.clone(), self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not an agent checkpoint: `{}`", c.format)));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        c.network()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Serves greedy decisions from a frozen network.
#[derive(Debug, Clone)]
pub struct AgentPolicy {
    net: QNetwork,
    /// Action chosen at each tick, in order.
    pub decisions: Vec<PolicyKind>,
}

impl AgentPolicy {
    /// Fails when the network does not fit the states `config` produces.
    pub fn new(net: QNetwork, config: &EpisodeConfig) -> Result<Self> {
        let (groups, slots, features) = state_shape(config)?;
        let s = net.shape();
        if (s.channels, s.height, s.width) != (groups, slots, features) || s.actions != PolicyKind::COUNT {
            return Err(Error::Shape {
                expected: (s.width, s.channels, s.height),
                got: (features, groups, slots),
            });
        }
        Ok(AgentPolicy {
            net,
            decisions: Vec::new(),
        })
    }

    pub fn network(&self) -> &QNetwork {
        &self.net
    }
}

impl PolicyProvider for AgentPolicy {
    fn select(&mut self, sim: &Simulation) -> PolicyKind {
        let q = self.net.q_values(&sim.state()).expect("shape checked at construction");
        let policy = PolicyKind::from_index(argmax(&q)).expect("one output per policy");
        self.decisions.push(policy);
        policy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trainer() -> Trainer {
        let shape = NetShape {
            channels: 1,
            height: 1,
            width: 2,
            conv: vec![2, 2, 2],
            kernel: 4,
            hidden: 4,
            actions: 2,
        };
        let net = QNetwork::new(shape, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        Trainer::new(Hyperparams::default(), net).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let c = Checkpoint::new(&trainer(), FeaturePartition::default(), RewardConfig::default());
        let back = Checkpoint::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.shape, c.shape);
        assert_eq!(back.optimizer, c.optimizer);
        let input = [0.3, 1.7];
        assert_eq!(back.network().unwrap().forward(&input), trainer().net.forward(&input));
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let c = Checkpoint::new(&trainer(), FeaturePartition::default(), RewardConfig::default());
        assert!(matches!(Checkpoint::from_json("{not json"), Err(Error::Checkpoint(_))));
        let mut wrong = c.clone();
        wrong.version = 99;
        assert!(Checkpoint::from_json(&wrong.to_json().unwrap()).is_err());
        let mut short = c;
        short.params.pop();
        assert!(Checkpoint::from_json(&short.to_json().unwrap()).is_err());
    }
}
