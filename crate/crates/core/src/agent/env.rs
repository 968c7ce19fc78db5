use super::mdp::{Environment, StepResult};
use super::qnet::prepare_input;
use super::reward::reward;
use crate::error::{Error, Result};
use crate::policies::PolicyKind;
use crate::sim::{EpisodeConfig, Simulation};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Success ratio below which the reward is the unsuccessful share.
    pub threshold: f64,
    /// Scale of the elapsed-time penalty, s.
    pub kappa: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            threshold: 0.9,
            kappa: 5.0,
        }
    }
}

/// Simulator episodes as an RL environment: one step per policy tick, the
/// action being the static policy for the next window.
///
/// Several episode configs (for instance different arrival rates) can share
/// one environment; the seed picks the config as `seed % configs.len()`.
pub struct AsetEnv {
    configs: Vec<EpisodeConfig>,
    reward: RewardConfig,
    shape: (usize, usize, usize),
    sim: Option<Simulation>,
}

impl AsetEnv {
    pub fn new(configs: Vec<EpisodeConfig>, reward: RewardConfig) -> Result<Self> {
        let first = configs
            .first()
            .ok_or_else(|| Error::Validation(vec!["no episode configs".into()]))?;
        let shape = state_shape(first)?;
        for c in &configs[1..] {
            let other = state_shape(c)?;
            if other != shape {
                return Err(Error::Shape {
                    expected: shape,
                    got: other,
                });
            }
        }
        Ok(AsetEnv {
            configs,
            reward,
            shape,
            sim: None,
        })
    }

    pub fn configs(&self) -> &[EpisodeConfig] {
        &self.configs
    }
}

/// `(groups, slots, features)`: the network input shape an episode config produces.
pub fn state_shape(config: &EpisodeConfig) -> Result<(usize, usize, usize)> {
    let sim = Simulation::new(config)?;
    let (features, groups, slots) = sim.state().shape();
    Ok((groups, slots, features))
}

impl Environment for AsetEnv {
    fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn num_actions(&self) -> usize {
        PolicyKind::COUNT
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        let mut config = self.configs[(seed % self.configs.len() as u64) as usize].clone();
        config.seed = seed;
        let sim = Simulation::new(&config)?;
        let input = prepare_input(&sim.state());
        self.sim = Some(sim);
        Ok(input)
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        let sim = self.sim.as_mut().expect("reset before step");
        let policy = PolicyKind::from_index(action).expect("action in range");
        sim.set_policy(policy, 0.0);
        let outcome = sim.step();
        let r = reward(&outcome.window, outcome.time, self.reward.threshold, self.reward.kappa);
        Ok(StepResult {
            next: prepare_input(&sim.state()),
            reward: r,
            done: outcome.done,
            terminal: outcome.terminal,
            success: Some(outcome.window.q_success),
        })
    }
}
