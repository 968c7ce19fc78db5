use crate::sim::MetricsWindow;

/// Reward for the window that just closed.
///
/// Below the success threshold the reward is the unsuccessful share. Above
/// it, a small penalty that fades with elapsed time so that long healthy
/// episodes out-earn short ones.
pub fn reward(window: &MetricsWindow, elapsed: f64, threshold: f64, kappa: f64) -> f64 {
    if window.q_success < threshold {
        -(window.q_fail + window.q_reject)
    } else {
        -healthy_penalty(elapsed, kappa)
    }
}

pub fn healthy_penalty(elapsed: f64, kappa: f64) -> f64 {
    if elapsed <= 0.0 {
        1.0
    } else {
        (kappa / elapsed).min(1.0)
    }
}

/// `sum_t gamma^t r_t`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}
