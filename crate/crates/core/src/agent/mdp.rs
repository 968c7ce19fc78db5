//! Environment interface for training, plus small tabular MDPs with an exact
//! value-iteration solver used to check the learner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Network input for the next state.
    pub next: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// The episode ended for a reason other than the step limit.
    pub terminal: bool,
    /// Success ratio observed during the step, when meaningful.
    pub success: Option<f64>,
}

pub trait Environment {
    /// `(channels, height, width)` of the network input.
    fn input_shape(&self) -> (usize, usize, usize);
    fn num_actions(&self) -> usize;
    /// Starts an episode and returns the initial input.
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>>;
    fn step(&mut self, action: usize) -> Result<StepResult>;
}

/// One possible outcome of taking an action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
    /// Entering this outcome ends the episode.
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub states: usize,
    pub actions: usize,
    /// `outcomes[s][a]`.
    pub outcomes: Vec<Vec<Vec<Outcome>>>,
    pub start: usize,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.outcomes.len() != self.states {
            errors.push("one outcome table per state".to_string());
        }
        for (s, row) in self.outcomes.iter().enumerate() {
            if row.len() != self.actions {
                errors.push(format!("state {s}: expected {} actions", self.actions));
            }
            for (a, outs) in row.iter().enumerate() {
                let total: f64 = outs.iter().map(|o| o.prob).sum();
                if (total - 1.0).abs() > 1e-9 {
                    errors.push(format!("state {s} action {a}: probabilities sum to {total}"));
                }
                if outs.iter().any(|o| o.next >= self.states || o.prob < 0.0) {
                    errors.push(format!("state {s} action {a}: bad outcome"));
                }
            }
        }
        if self.start >= self.states {
            errors.push("start state out of range".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// Single state, one action per reward, self loops.
    pub fn bandit(rewards: &[f64]) -> Self {
        TabularMdp {
            states: 1,
            actions: rewards.len(),
            outcomes: vec![rewards
                .iter()
                .map(|&reward| {
                    vec![Outcome {
                        next: 0,
                        prob: 1.0,
                        reward,
                        terminal: false,
                    }]
                })
                .collect()],
            start: 0,
        }
    }

    /// Two states where the better long-run choice forgoes an immediate reward:
    /// in state 0 "stay" pays `lure` and "go" pays nothing but moves to state 1,
    /// where "stay" pays 1 and "go" returns to state 0.
    pub fn detour(lure: f64) -> Self {
        let o = |next, reward| {
            vec![Outcome {
                next,
                prob: 1.0,
                reward,
                terminal: false,
            }]
        };
        TabularMdp {
            states: 2,
            actions: 2,
            outcomes: vec![vec![o(0, lure), o(1, 0.0)], vec![o(1, 1.0), o(0, 0.0)]],
            start: 0,
        }
    }

    pub fn greedy(q: &[Vec<f64>]) -> Vec<usize> {
        q.iter().map(|row| argmax(row)).collect()
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Optimal action values by repeated Bellman backups until the largest
/// change is below `tol`.
pub fn value_iteration(mdp: &TabularMdp, gamma: f64, tol: f64, max_iter: usize) -> Result<Vec<Vec<f64>>> {
    mdp.validate()?;
    let mut v = vec![0.0; mdp.states];
    let mut q = vec![vec![0.0; mdp.actions]; mdp.states];
    for _ in 0..max_iter {
        for s in 0..mdp.states {
            for a in 0..mdp.actions {
                q[s][a] = mdp.outcomes[s][a]
                    .iter()
                    .map(|o| o.prob * (o.reward + if o.terminal { 0.0 } else { gamma * v[o.next] }))
                    .sum();
            }
        }
        let mut delta: f64 = 0.0;
        for s in 0..mdp.states {
            let best = q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta < tol {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence(max_iter))
}

/// A tabular MDP exposed through [`Environment`] with one-hot inputs of
/// shape `1 x 1 x states` and a fixed step limit.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    pub mdp: TabularMdp,
    pub max_steps: usize,
    state: usize,
    steps: usize,
    rng: ChaCha8Rng,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, max_steps: usize) -> Result<Self> {
        mdp.validate()?;
        Ok(TabularEnv {
            state: mdp.start,
            mdp,
            max_steps,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.mdp.states];
        x[s] = 1.0;
        x
    }
}

impl Environment for TabularEnv {
    fn input_shape(&self) -> (usize, usize, usize) {
        (1, 1, self.mdp.states)
    }

    fn num_actions(&self) -> usize {
        self.mdp.actions
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.mdp.start;
        self.steps = 0;
        Ok(self.one_hot(self.state))
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        let outs = &self.mdp.outcomes[self.state][action];
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut chosen = outs[outs.len() - 1];
        for o in outs {
            acc += o.prob;
            if u < acc {
                chosen = *o;
                break;
            }
        }
        self.state = chosen.next;
        self.steps += 1;
        let done = chosen.terminal || self.steps >= self.max_steps;
        Ok(StepResult {
            next: self.one_hot(self.state),
            reward: chosen.reward,
            done,
            terminal: chosen.terminal,
            success: None,
        })
    }
}
