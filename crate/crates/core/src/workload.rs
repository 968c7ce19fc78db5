//! Client streams drawn from the reference application profiles, arriving at
//! each scheduler site as a (possibly piecewise-constant rate) Poisson process.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::catalog::TaskId;
use crate::error::{Error, Result};
use crate::topology::SiteId;

/// Default per-query frame size bounds, bytes. Table-free synthetic choice.
pub const DEFAULT_FRAME_SIZE: (f64, f64) = (30_000.0, 200_000.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppProfile {
    pub name: String,
    /// Maximum end-to-end delay bounds, ms.
    pub tolerated_delay: (f64, f64),
    /// Frames per second.
    pub frame_rate: (f64, f64),
    /// Stream lifetime bounds, s.
    pub duration: (f64, f64),
    /// Minimum accuracy, mAP.
    pub required_accuracy: f64,
    /// Bytes per query.
    pub frame_size: (f64, f64),
}

impl AppProfile {
    fn new(
        name: &str,
        delay: (f64, f64),
        fps: (f64, f64),
        duration: (f64, f64),
        accuracy: f64,
    ) -> Self {
        AppProfile {
            name: name.to_string(),
            tolerated_delay: delay,
            frame_rate: fps,
            duration,
            required_accuracy: accuracy,
            frame_size: DEFAULT_FRAME_SIZE,
        }
    }

    /// Mean number of queries a stream of this app emits.
    pub fn expected_queries(&self) -> f64 {
        mid(self.frame_rate) * mid(self.duration)
    }

    pub fn is_valid(&self) -> bool {
        let ordered = |(lo, hi): (f64, f64)| lo <= hi && lo.is_finite() && hi.is_finite();
        ordered(self.tolerated_delay)
            && ordered(self.frame_rate)
            && ordered(self.duration)
            && ordered(self.frame_size)
            && self.tolerated_delay.0 > 0.0
            && self.frame_rate.0 > 0.0
            && self.duration.0 > 0.0
            && self.frame_size.0 > 0.0
    }
}

fn mid((lo, hi): (f64, f64)) -> f64 {
    0.5 * (lo + hi)
}

const MIN: f64 = 60.0;

/// The ten reference applications.
pub fn app_table() -> Vec<AppProfile> {
    vec![
        AppProfile::new("Pool", (95.0, 95.0), (5.0, 5.0), (5.0, 10.0), 10.0),
        AppProfile::new("Workout Assistant", (300.0, 300.0), (2.0, 2.0), (90.0, 90.0), 10.0),
        AppProfile::new("Ping-pong", (150.0, 150.0), (15.0, 20.0), (20.0, 40.0), 15.0),
        AppProfile::new("Face Assistant", (370.0, 370.0), (5.0, 5.0), (1.0, 5.0), 30.0),
        AppProfile::new("Lego/Draw/Sandwich", (600.0, 600.0), (10.0, 15.0), (60.0, 60.0), 25.0),
        AppProfile::new("Gaming", (20.0, 30.0), (25.0, 25.0), (10.0 * MIN, 30.0 * MIN), 35.0),
        AppProfile::new("Connected Cars", (150.0, 150.0), (10.0, 15.0), (15.0 * MIN, 30.0 * MIN), 40.0),
        AppProfile::new("Tele-Robots", (25.0, 35.0), (10.0, 10.0), (5.0 * MIN, 5.0 * MIN), 40.0),
        AppProfile::new("Remote-driving", (20.0, 30.0), (20.0, 20.0), (15.0 * MIN, 30.0 * MIN), 50.0),
        AppProfile::new("Interactive AR/VR", (30.0, 50.0), (25.0, 25.0), (30.0, 60.0), 35.0),
    ]
}

/// Relative frequency of each application among spawned clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppMix {
    pub weights: Vec<f64>,
}

impl AppMix {
    pub fn uniform(apps: usize) -> Self {
        AppMix {
            weights: vec![1.0 / apps as f64; apps],
        }
    }

    /// Weights proportional to `1 / sqrt(expected queries per stream)`.
    ///
    /// Sits between a uniform mix over clients and a uniform mix over queries;
    /// with the reference table at 60 clients/min it offers close to a
    /// thousand queries per second per site.
    pub fn balanced(apps: &[AppProfile]) -> Self {
        let raw: Vec<f64> = apps.iter().map(|a| 1.0 / a.expected_queries().sqrt()).collect();
        let total: f64 = raw.iter().sum();
        AppMix {
            weights: raw.into_iter().map(|w| w / total).collect(),
        }
    }

    pub fn single(apps: usize, index: usize) -> Self {
        let mut weights = vec![0.0; apps];
        weights[index] = 1.0;
        AppMix { weights }
    }

    pub fn validate(&self, apps: usize) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.len() != apps
            || self.weights.iter().any(|w| !(*w >= 0.0))
            || (sum - 1.0).abs() > 1e-6
        {
            return Err(Error::Validation(vec![format!(
                "app mix must have {apps} nonnegative weights summing to 1"
            )]));
        }
        Ok(())
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // Rounding can leave `u` just above the accumulated sum.
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

/// Clients per minute as a step function: `(start_s, lambda)` sorted by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub steps: Vec<(f64, f64)>,
}

impl LambdaSchedule {
    pub fn constant(lambda: f64) -> Self {
        LambdaSchedule {
            steps: vec![(0.0, lambda)],
        }
    }

    /// `lambdas[k]` applies on `[k * period, (k + 1) * period)`; the last one persists.
    pub fn stepped(lambdas: &[f64], period: f64) -> Self {
        LambdaSchedule {
            steps: lambdas
                .iter()
                .enumerate()
                .map(|(k, l)| (k as f64 * period, *l))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.steps.is_empty() || self.steps[0].0 != 0.0 {
            errors.push("lambda schedule must start at t = 0".to_string());
        }
        if self.steps.windows(2).any(|w| w[1].0 <= w[0].0) {
            errors.push("lambda schedule times must be strictly increasing".to_string());
        }
        if self.steps.iter().any(|(_, l)| !(*l > 0.0)) {
            errors.push("lambda must be positive".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn lambda_at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|(start, _)| *start <= t)
            .last()
            .map_or(self.steps[0].1, |(_, l)| *l)
    }

    fn next_change_after(&self, t: f64) -> Option<f64> {
        self.steps.iter().map(|(s, _)| *s).find(|s| *s > t)
    }
}

/// Workload knobs shared by every site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub schedule: LambdaSchedule,
    pub apps: Vec<AppProfile>,
    pub mix: AppMix,
    /// Task requested by every stream.
    pub task: TaskId,
}

impl WorkloadConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self::with_schedule(LambdaSchedule::constant(lambda))
    }

    pub fn with_schedule(schedule: LambdaSchedule) -> Self {
        let apps = app_table();
        let mix = AppMix::balanced(&apps);
        WorkloadConfig {
            schedule,
            apps,
            mix,
            task: TaskId(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.mix.validate(self.apps.len())?;
        if let Some(bad) = self.apps.iter().find(|a| !a.is_valid()) {
            return Err(Error::Validation(vec![format!("invalid app profile `{}`", bad.name)]));
        }
        Ok(())
    }

    /// Long-run queries/s at one site under a constant `lambda`.
    pub fn steady_state_qps(&self, lambda: f64) -> f64 {
        let per_client: f64 = self
            .apps
            .iter()
            .zip(&self.mix.weights)
            .map(|(a, w)| w * a.expected_queries())
            .sum();
        lambda / 60.0 * per_client
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StreamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub id: StreamId,
    pub site: SiteId,
    /// Index into the workload's app table.
    pub app: usize,
    pub task: TaskId,
    /// Queries per second.
    pub rate: f64,
    /// Bytes per query.
    pub input_size: f64,
    /// ms.
    pub tolerated_delay: f64,
    pub required_accuracy: f64,
    /// ms.
    pub access_delay: f64,
    /// s.
    pub duration: f64,
    /// s.
    pub arrival_time: f64,
}

impl Stream {
    /// Queries emitted over the stream's life: one every `1 / rate` starting at arrival.
    pub fn query_count(&self) -> usize {
        let n = (self.duration * self.rate).ceil();
        // k / rate < duration must hold for the last index.
        let n = n as usize;
        if n > 0 && (n - 1) as f64 / self.rate >= self.duration {
            n - 1
        } else {
            n
        }
    }

    pub fn emit_time(&self, k: usize) -> f64 {
        self.arrival_time + k as f64 / self.rate
    }

    pub fn end_time(&self) -> f64 {
        self.arrival_time + self.duration
    }
}

/// A single inference request of a stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub stream: StreamId,
    pub emit_time: f64,
    pub size: f64,
    /// Absolute deadline, s.
    pub deadline: f64,
}

impl Query {
    pub fn of(stream: &Stream, k: usize) -> Query {
        let emit_time = stream.emit_time(k);
        Query {
            stream: stream.id,
            emit_time,
            size: stream.input_size,
            deadline: emit_time + stream.tolerated_delay / 1000.0,
        }
    }
}

/// Spawns clients at one scheduler site.
#[derive(Debug, Clone)]
pub struct ClientGenerator<R> {
    pub site: SiteId,
    config: WorkloadConfig,
    access_delay_range: (f64, f64),
    rng: R,
}

impl<R: Rng> ClientGenerator<R> {
    pub fn new(site: SiteId, config: WorkloadConfig, access_delay_range: (f64, f64), rng: R) -> Self {
        ClientGenerator {
            site,
            config,
            access_delay_range,
            rng,
        }
    }

    pub fn config(&self) -> &WorkloadConfig {
        &self.config
    }

    /// Time of the next client arrival after `now`, s.
    ///
    /// Exact for piecewise-constant rates: a draw that crosses a rate change
    /// is discarded and redrawn from the change point (memorylessness).
    pub fn next_arrival(&mut self, now: f64) -> f64 {
        let mut t = now;
        loop {
            let per_second = self.config.schedule.lambda_at(t) / 60.0;
            let gap = Exp::new(per_second).expect("positive rate").sample(&mut self.rng);
            match self.config.schedule.next_change_after(t) {
                Some(change) if t + gap >= change => t = change,
                _ => return t + gap,
            }
        }
    }

    pub fn spawn_stream(&mut self, id: StreamId, now: f64) -> Stream {
        let app_index = self.config.mix.pick(&mut self.rng);
        let app = &self.config.apps[app_index];
        let (delay, rate, duration, size) =
            (app.tolerated_delay, app.frame_rate, app.duration, app.frame_size);
        let access = self.access_delay_range;
        Stream {
            id,
            site: self.site,
            app: app_index,
            task: self.config.task,
            rate: uniform(&mut self.rng, rate),
            input_size: uniform(&mut self.rng, size),
            tolerated_delay: uniform(&mut self.rng, delay),
            required_accuracy: app.required_accuracy,
            access_delay: uniform(&mut self.rng, access),
            duration: uniform(&mut self.rng, duration),
            arrival_time: now,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}
