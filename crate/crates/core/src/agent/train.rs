//! Deep Q-learning over an [`Environment`]: epsilon-greedy rollouts fill a
//! replay buffer, then a fixed number of minibatch steps regress Q towards
//! targets computed with the parameters frozen at the start of the phase.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::mdp::{argmax, Environment};
use super::qnet::QNetwork;
use super::replay::{ReplayBuffer, Transition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub learning_rate: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of the episodes over which epsilon decays linearly.
    pub epsilon_decay: f64,
    pub replay_capacity: usize,
    pub gradient_steps: usize,
    pub batch_size: usize,
    pub episodes: usize,
    pub seed_pool: usize,
    /// First environment seed of the pool; the pool is consecutive.
    pub pool_base: u64,
    /// Seeds network initialization, exploration and minibatch sampling.
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.95,
            learning_rate: 1e-4,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.6,
            replay_capacity: 10_000,
            gradient_steps: 64,
            batch_size: 32,
            episodes: 200,
            seed_pool: 16,
            pool_base: 1_000_000,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.gamma) {
            errors.push(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !unit(self.epsilon_start) || !unit(self.epsilon_end) {
            errors.push("epsilon outside [0, 1]".to_string());
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            errors.push("epsilon decay share must be in (0, 1]".to_string());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            errors.push("learning rate must be non-negative".to_string());
        }
        for (name, v) in [
            ("replay capacity", self.replay_capacity),
            ("batch size", self.batch_size),
            ("seed pool", self.seed_pool),
        ] {
            if v == 0 {
                errors.push(format!("{name} must be positive"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// Linear decay from start to end over the first `epsilon_decay` share of episodes.
    pub fn epsilon_at(&self, episode: usize) -> f64 {
        let span = (self.epsilon_decay * self.episodes as f64).max(1.0);
        let frac = (episode as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    pub fn pool_seed(&self, index: usize) -> u64 {
        self.pool_base + index as u64
    }
}

/// Epsilon-greedy choice: uniform with probability `epsilon`, otherwise the
/// first maximizing action.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    let explore: f64 = rng.random();
    if explore < epsilon {
        rng.random_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// `r + gamma * max Q(s', .)`, or `r` for terminal transitions.
pub fn td_target(reward: f64, next_q: &[f64], gamma: f64, terminal: bool) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * next_q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// One regression item: input, taken action, fixed target.
pub struct Sample<'a> {
    pub input: &'a [f64],
    pub action: usize,
    pub target: f64,
}

/// Summed squared error over the batch and its gradient. Targets are constants.
pub fn loss_and_gradient(net: &QNetwork, batch: &[Sample]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; net.num_params()];
    let mut loss = 0.0;
    let mut dq = vec![0.0; net.shape().actions];
    for s in batch {
        let (q, cache) = net.forward_cached(s.input);
        let err = s.target - q[s.action];
        loss += err * err;
        dq.iter_mut().for_each(|d| *d = 0.0);
        dq[s.action] = -2.0 * err;
        net.backward(&cache, &dq, &mut grad);
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    /// Discounted return of the rollout.
    pub ret: f64,
    /// Mean per-step success ratio, when the environment reports one.
    pub mean_success: Option<f64>,
    pub epsilon: f64,
    pub steps: usize,
    /// Mean per-sample loss over the gradient phase.
    pub loss: Option<f64>,
}

pub fn write_curve_csv<W: Write>(out: &mut W, rows: &[CurveRow]) -> std::io::Result<()> {
    writeln!(out, "episode,return,mean_success,epsilon")?;
    for r in rows {
        let success = r.mean_success.map_or(String::new(), |s| format!("{s:.6}"));
        writeln!(out, "{},{:.6},{},{:.4}", r.episode, r.ret, success, r.epsilon)?;
    }
    Ok(())
}

/// Learner state that survives across calls, so training can resume.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub hp: Hyperparams,
    pub net: QNetwork,
    pub adam: Adam,
    pub buffer: ReplayBuffer,
    /// Episodes completed so far.
    pub episode: usize,
    rng: ChaCha8Rng,
}

fn to_f32(x: &[f64]) -> Arc<[f32]> {
    x.iter().map(|&v| v as f32).collect()
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

impl Trainer {
    pub fn new(hp: Hyperparams, net: QNetwork) -> Result<Self> {
        Self::resume(hp, net, None, 0)
    }

    pub fn resume(hp: Hyperparams, net: QNetwork, adam: Option<Adam>, episode: usize) -> Result<Self> {
        hp.validate()?;
        let adam = adam.unwrap_or_else(|| Adam::new(net.num_params(), hp.learning_rate));
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        rng.set_stream(episode as u64);
        Ok(Trainer {
            buffer: ReplayBuffer::new(hp.replay_capacity),
            hp,
            net,
            adam,
            episode,
            rng,
        })
    }

    /// Runs episodes until `hp.episodes` have been completed in total.
    pub fn run<E: Environment>(&mut self, env: &mut E) -> Result<Vec<CurveRow>> {
        let mut rows = Vec::new();
        while self.episode < self.hp.episodes {
            rows.push(self.episode(env)?);
        }
        Ok(rows)
    }

    /// One rollout followed by the gradient phase.
    pub fn episode<E: Environment>(&mut self, env: &mut E) -> Result<CurveRow> {
        let epsilon = self.hp.epsilon_at(self.episode);
        let seed = self.hp.pool_seed(self.rng.random_range(0..self.hp.seed_pool));
        let mut input = env.reset(seed)?;
        let mut state = to_f32(&input);
        let mut ret = 0.0;
        let mut discount = 1.0;
        let mut successes = Vec::new();
        let mut steps = 0;
        loop {
            let q = self.net.forward(&input);
            let action = select_action(&q, epsilon, &mut self.rng);
            let step = env.step(action)?;
            let next = to_f32(&step.next);
            self.buffer.push(Transition {
                state: state.clone(),
                action,
                reward: step.reward,
                next: next.clone(),
                terminal: step.terminal,
            });
            ret += discount * step.reward;
            discount *= self.hp.gamma;
            successes.extend(step.success);
            steps += 1;
            input = step.next;
            state = next;
            if step.done {
                break;
            }
        }
        let loss = self.gradient_phase();
        let row = CurveRow {
            episode: self.episode,
            ret,
            mean_success: (!successes.is_empty()).then(|| successes.iter().sum::<f64>() / successes.len() as f64),
            epsilon,
            steps,
            loss,
        };
        self.episode += 1;
        Ok(row)
    }

    /// `G` minibatch updates; skipped while the buffer holds fewer than `B` transitions.
    fn gradient_phase(&mut self) -> Option<f64> {
        let b = self.hp.batch_size;
        if self.buffer.len() < b || self.hp.gradient_steps == 0 {
            return None;
        }
        let frozen = self.net.clone();
        // Targets depend only on the frozen parameters, so each entry is evaluated once per phase.
        let mut targets: Vec<Option<f64>> = vec![None; self.buffer.len()];
        let mut total = 0.0;
        for _ in 0..self.hp.gradient_steps {
            let picks = self.buffer.sample_indices(b, &mut self.rng);
            let inputs: Vec<Vec<f64>> = picks.iter().map(|&i| to_f64(&self.buffer.get(i).state)).collect();
            let mut samples = Vec::with_capacity(b);
            for (&i, input) in picks.iter().zip(&inputs) {
                let t = self.buffer.get(i);
                let target = *targets[i].get_or_insert_with(|| {
                    let next_q = if t.terminal { Vec::new() } else { frozen.forward(&to_f64(&t.next)) };
                    td_target(t.reward, &next_q, self.hp.gamma, t.terminal)
                });
                samples.push(Sample {
                    input,
                    action: t.action,
                    target,
                });
            }
            let (loss, grad) = loss_and_gradient(&self.net, &samples);
            self.adam.step(&mut self.net.params, &grad);
            total += loss / b as f64;
        }
        Some(total / self.hp.gradient_steps as f64)
    }
}
