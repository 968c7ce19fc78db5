//! Deterministic discrete-event episode engine.
//!
//! Clients arrive at each scheduler site, their streams are bound once by the
//! active policy, and every query travels uplink, waits in its worker's FIFO
//! queue, is served in a batch and travels back. Outcomes are counted in the
//! one-second slot of the query's emission time.
//!
//! Policy ticks split an episode into steps of `window` seconds; the caller
//! installs a policy before each step. Randomness comes from one ChaCha
//! stream per site (workload), one for network and processing noise and one
//! for randomized policies, so every policy sees the same client sequence
//! under a given seed.

mod event;
pub mod metrics;

use std::collections::VecDeque;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{Catalog, CatalogConfig};
use crate::error::{Error, Result};
use crate::features::{encode_state, FeaturePartition, Snapshot, StateTensor, WorkerGroups, BASE_FEATURES};
use crate::policies::{apply_policy, Decision, PolicyKind, SystemView};
use crate::topology::{deploy_workers, sample_network_delay, sample_truncated_normal, Topology, Worker, WorkerId};
use crate::workload::{ClientGenerator, Stream, StreamId, WorkloadConfig};

pub use event::{Event, EventKind, EventQueue};
pub use metrics::{
    app_column, metrics_rows, windowed_metrics, write_metrics_csv, MetricsRow, MetricsWindow, SlotCounts,
};

pub const DEFAULT_HORIZON: f64 = 480.0;
pub const DEFAULT_WINDOW: f64 = 25.0;
pub const DEFAULT_EARLY_STOP: f64 = 0.7;

/// Float slack on the deadline comparison, s.
const DEADLINE_SLACK: f64 = 1e-9;

const NETWORK_STREAM: u64 = 1 << 32;
const POLICY_STREAM: u64 = (1 << 32) + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub topology: Topology,
    pub catalog: CatalogConfig,
    pub workload: WorkloadConfig,
    pub partition: FeaturePartition,
    /// Episode timeout H, s.
    pub horizon: f64,
    /// Policy tick period T, s.
    pub window: f64,
    /// Metrics slot length, s.
    pub metrics_period: f64,
    /// End the episode at a tick whose window success is at or below this.
    pub early_stop: Option<f64>,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn new(topology: Topology, catalog: &Catalog, workload: WorkloadConfig, seed: u64) -> Self {
        EpisodeConfig {
            topology,
            catalog: catalog.to_config(),
            workload,
            partition: FeaturePartition::default(),
            horizon: DEFAULT_HORIZON,
            window: DEFAULT_WINDOW,
            metrics_period: 1.0,
            early_stop: Some(DEFAULT_EARLY_STOP),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let multiple = |x: f64, p: f64| (x / p - (x / p).round()).abs() < 1e-9;
        if !(self.metrics_period > 0.0) {
            errors.push("metrics period must be positive".to_string());
        } else {
            if !(self.window > 0.0) || !multiple(self.window, self.metrics_period) {
                errors.push("window must be a positive multiple of the metrics period".to_string());
            }
            if !(self.horizon > 0.0) || !multiple(self.horizon, self.metrics_period) {
                errors.push("horizon must be a positive multiple of the metrics period".to_string());
            }
        }
        if let Some(theta) = self.early_stop {
            if !(0.0..=1.0).contains(&theta) {
                errors.push("early-stop threshold must lie in [0, 1]".to_string());
            }
        }
        for result in [
            self.topology.validate(),
            self.workload.validate(),
            self.partition.validate(),
            Catalog::try_from(self.catalog.clone()).map(|_| ()),
        ] {
            if let Err(e) = result {
                errors.push(e.to_string());
            }
        }
        if self.workload.task.0 >= self.catalog.tasks.len() {
            errors.push("workload task is not in the catalog".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn slots_per_window(&self) -> usize {
        (self.window / self.metrics_period).round() as usize
    }

    pub fn total_slots(&self) -> usize {
        (self.horizon / self.metrics_period).round() as usize
    }

    /// SHA-256 of the configuration with the seed cleared.
    pub fn fingerprint(&self) -> String {
        let mut unseeded = self.clone();
        unseeded.seed = 0;
        let json = serde_json::to_vec(&unseeded).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn provenance(&self) -> String {
        format!("config_sha256={} seed={}", self.fingerprint(), self.seed)
    }
}

/// Picks the policy for the next window.
pub trait PolicyProvider {
    fn select(&mut self, sim: &Simulation) -> PolicyKind;
}

impl PolicyProvider for PolicyKind {
    fn select(&mut self, _sim: &Simulation) -> PolicyKind {
        *self
    }
}

#[derive(Debug, Clone, Default)]
pub struct WorkerRuntime {
    /// `(stream, emit_time)` in arrival order.
    pub queue: VecDeque<(usize, f64)>,
    in_service: Vec<(usize, f64)>,
    pub busy: bool,
    /// Number of streams currently bound.
    pub streams: usize,
    pub batches: u64,
}

/// A bind decision as seen at decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindRecord {
    pub time: f64,
    pub stream: usize,
    pub policy: PolicyKind,
    pub worker: Option<WorkerId>,
    /// Ledger of the chosen worker just before the bind.
    pub load_before: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub time: f64,
    pub policy: PolicyKind,
    /// Wall-clock time spent choosing, s.
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickOutcome {
    pub time: f64,
    pub window: MetricsWindow,
    pub done: bool,
    /// Early stop, as opposed to the timeout.
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub emitted: u64,
    /// Queries that rejected streams would have sent before the episode end.
    pub attributed: u64,
    pub success: u64,
    pub failed: u64,
    pub rejected: u64,
}

impl Totals {
    pub fn queries(&self) -> u64 {
        self.emitted + self.attributed
    }

    pub fn success_ratio(&self) -> f64 {
        if self.queries() == 0 {
            1.0
        } else {
            self.success as f64 / self.queries() as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub provenance: String,
    pub app_names: Vec<String>,
    pub rows: Vec<MetricsRow>,
    pub totals: Totals,
    pub ticks: Vec<TickOutcome>,
    pub trace: Vec<BindRecord>,
    pub switches: Vec<SwitchRecord>,
    pub streams: Vec<Stream>,
    pub workers: Vec<Worker>,
    pub end_time: f64,
    pub early_stopped: bool,
    /// Smallest observed emit-to-delivery time, s.
    pub fastest_response: Option<f64>,
    /// Outcome counts per application over the whole episode.
    pub app_totals: Vec<AppTotals>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppTotals {
    pub success: u64,
    pub failed: u64,
    pub rejected: u64,
}

impl EpisodeResult {
    pub fn metrics_csv(&self) -> String {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &self.provenance, &self.app_names, &self.rows).expect("write to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn switch_csv(&self) -> String {
        let mut out = format!("# {}\ntime_s,policy,decision_latency_ms\n", self.provenance);
        for s in &self.switches {
            out.push_str(&format!("{},{},{:.4}\n", s.time, s.policy, s.latency * 1000.0));
        }
        out
    }
}

pub struct Simulation {
    config: EpisodeConfig,
    catalog: Catalog,
    workers: Vec<Worker>,
    groups: WorkerGroups,
    runtimes: Vec<WorkerRuntime>,
    loads: Vec<f64>,
    generators: Vec<ClientGenerator<ChaCha8Rng>>,
    net_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    queue: EventQueue,
    now: f64,
    streams: Vec<Stream>,
    binding: Vec<Option<usize>>,
    /// Ledger contribution of each bound stream.
    stream_load: Vec<f64>,
    rejected_streams: Vec<usize>,
    slots: Vec<SlotCounts>,
    slot_policy: Vec<PolicyKind>,
    history: Vec<Snapshot>,
    group_state: Vec<f64>,
    policy: PolicyKind,
    trace: Vec<BindRecord>,
    switches: Vec<SwitchRecord>,
    ticks: Vec<TickOutcome>,
    emitted: u64,
    next_tick: f64,
    end: Option<f64>,
    early_stopped: bool,
    fastest_response: Option<f64>,
}

impl Simulation {
    pub fn new(config: &EpisodeConfig) -> Result<Simulation> {
        config.validate()?;
        let catalog = Catalog::try_from(config.catalog.clone())?;
        let workers = deploy_workers(&config.topology, &catalog);
        let groups = WorkerGroups::new(&workers);
        let apps = config.workload.apps.len();
        let features = config.partition.num_features();

        let mut generators = Vec::new();
        let mut queue = EventQueue::default();
        for site in 0..config.topology.sites.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(site as u64);
            let mut generator = ClientGenerator::new(
                crate::topology::SiteId(site),
                config.workload.clone(),
                config.topology.access_delay_range,
                rng,
            );
            queue.push(generator.next_arrival(0.0), EventKind::ClientArrival { site });
            generators.push(generator);
        }
        let stream_rng = |stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(stream);
            rng
        };

        Ok(Simulation {
            runtimes: vec![WorkerRuntime::default(); workers.len()],
            loads: vec![0.0; workers.len()],
            group_state: vec![0.0; groups.len() * features],
            groups,
            workers,
            catalog,
            generators,
            net_rng: stream_rng(NETWORK_STREAM),
            policy_rng: stream_rng(POLICY_STREAM),
            queue,
            now: 0.0,
            streams: Vec::new(),
            binding: Vec::new(),
            stream_load: Vec::new(),
            rejected_streams: Vec::new(),
            slots: vec![SlotCounts::new(apps); config.total_slots()],
            slot_policy: Vec::new(),
            history: Vec::new(),
            policy: PolicyKind::Closest,
            trace: Vec::new(),
            switches: Vec::new(),
            ticks: Vec::new(),
            emitted: 0,
            next_tick: 0.0,
            end: None,
            early_stopped: false,
            fastest_response: None,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn workers(&self) -> &[Worker] {
        &self.workers
    }

    pub fn groups(&self) -> &WorkerGroups {
        &self.groups
    }

    pub fn loads(&self) -> &[f64] {
        &self.loads
    }

    pub fn runtimes(&self) -> &[WorkerRuntime] {
        &self.runtimes
    }

    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }

    pub fn policy(&self) -> PolicyKind {
        self.policy
    }

    pub fn ticks(&self) -> &[TickOutcome] {
        &self.ticks
    }

    pub fn is_done(&self) -> bool {
        self.end.is_some()
    }

    /// Ledger recomputed from the streams currently bound.
    pub fn recompute_loads(&self) -> Vec<f64> {
        let mut loads = vec![0.0; self.workers.len()];
        for (i, s) in self.streams.iter().enumerate() {
            if let Some(w) = self.binding[i] {
                if s.end_time() > self.now {
                    loads[w] += self.stream_load[i];
                }
            }
        }
        loads
    }

    /// State over the last `window` seconds.
    pub fn state(&self) -> StateTensor {
        encode_state(
            &self.history,
            self.groups.len(),
            &self.config.partition,
            self.config.slots_per_window(),
        )
        .expect("snapshots match the partition")
    }

    /// Installs the policy used for streams arriving in the next window.
    pub fn set_policy(&mut self, policy: PolicyKind, latency: f64) {
        self.policy = policy;
        self.switches.push(SwitchRecord {
            time: self.now,
            policy,
            latency,
        });
    }

    /// Runs until the next policy tick (or the episode end) and reports the
    /// window that just closed.
    pub fn step(&mut self) -> TickOutcome {
        assert!(self.end.is_none(), "step after episode end");
        let horizon = self.config.horizon;
        self.next_tick += self.config.window;
        let target = self.next_tick.min(horizon);
        self.advance(target);

        let period = self.config.metrics_period;
        let last = (target / period).round() as usize;
        let first = last.saturating_sub(self.config.slots_per_window());
        let window = windowed_metrics(&self.slots, first, last, period);
        let mut outcome = TickOutcome {
            time: target,
            window,
            done: false,
            terminal: false,
        };
        if target >= horizon {
            outcome.done = true;
        } else if self.config.early_stop.is_some_and(|theta| outcome.window.q_success <= theta) {
            outcome.done = true;
            outcome.terminal = true;
        }
        if outcome.done {
            self.end = Some(target);
            self.early_stopped = outcome.terminal;
        }
        self.ticks.push(outcome.clone());
        outcome
    }

    /// Drains in-flight queries and assembles the final accounting.
    pub fn finish(mut self) -> EpisodeResult {
        let end = *self.end.get_or_insert(self.now);
        while let Some(ev) = self.queue.pop() {
            if ev.kind.in_flight() {
                self.now = ev.time;
                self.handle(ev.kind);
            }
        }

        // Rejected streams only count queries they would have sent before the end.
        for slot in &mut self.slots {
            slot.rejected = 0;
            slot.app_rejected.iter_mut().for_each(|x| *x = 0);
        }
        let mut attributed = 0;
        for i in std::mem::take(&mut self.rejected_streams) {
            attributed += self.attribute(i, end);
        }

        let closed = self.slot_policy.len();
        let rows = metrics_rows(&self.slots[..closed], &self.slot_policy, self.config.metrics_period);
        let mut totals = Totals {
            emitted: self.emitted,
            attributed,
            ..Default::default()
        };
        let mut app_totals = vec![AppTotals::default(); self.config.workload.apps.len()];
        for s in &self.slots {
            totals.success += s.success;
            totals.failed += s.failed;
            totals.rejected += s.rejected;
            for (a, t) in app_totals.iter_mut().enumerate() {
                t.success += s.app_success[a];
                t.failed += s.app_failed[a];
                t.rejected += s.app_rejected[a];
            }
        }
        EpisodeResult {
            provenance: self.config.provenance(),
            app_names: self.config.workload.apps.iter().map(|a| a.name.clone()).collect(),
            rows,
            totals,
            ticks: self.ticks,
            trace: self.trace,
            switches: self.switches,
            streams: self.streams,
            workers: self.workers,
            end_time: end,
            early_stopped: self.early_stopped,
            fastest_response: self.fastest_response,
            app_totals,
        }
    }

    fn advance(&mut self, target: f64) {
        while let Some(t) = self.queue.peek_time() {
            if t >= target {
                break;
            }
            self.close_slots_until(t);
            let ev = self.queue.pop().expect("peeked");
            self.now = ev.time;
            self.handle(ev.kind);
        }
        self.close_slots_until(target);
        self.now = target;
    }

    fn close_slots_until(&mut self, t: f64) {
        let period = self.config.metrics_period;
        let total = self.slots.len();
        while self.history.len() < total && (self.history.len() + 1) as f64 * period <= t {
            self.history.push(self.group_state.clone());
            let features = self.config.partition.num_features();
            for g in 0..self.groups.len() {
                self.group_state[g * features + 1] = 0.0;
            }
            self.slot_policy.push(self.policy);
        }
    }

    fn slot_of(&self, t: f64) -> usize {
        ((t / self.config.metrics_period) as usize).min(self.slots.len() - 1)
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::ClientArrival { site } => self.client_arrival(site),
            EventKind::QueryEmit { stream, k } => self.emit(stream, k),
            EventKind::QueryArrival { stream, emit } => {
                let w = self.binding[stream].expect("bound stream");
                self.runtimes[w].queue.push_back((stream, emit));
                if !self.runtimes[w].busy {
                    self.start_batch(w);
                }
            }
            EventKind::BatchComplete { worker } => self.batch_complete(worker),
            EventKind::ResponseDelivered { stream, emit } => self.delivered(stream, emit),
            EventKind::StreamEnd { stream } => self.stream_end(stream),
        }
    }

    fn client_arrival(&mut self, site: usize) {
        let id = self.streams.len();
        let generator = &mut self.generators[site];
        let stream = generator.spawn_stream(StreamId(id), self.now);
        let next = generator.next_arrival(self.now);
        self.queue.push(next, EventKind::ClientArrival { site });
        self.bind(stream);
    }

    fn bind(&mut self, stream: Stream) {
        let id = stream.id.0;
        let view = SystemView {
            catalog: &self.catalog,
            topology: &self.config.topology,
            workers: &self.workers,
            loads: &self.loads,
            site: stream.site,
            now: self.now,
        };
        let decision = apply_policy(self.policy, &stream, &view, &mut self.policy_rng);
        let mut record = BindRecord {
            time: self.now,
            stream: id,
            policy: self.policy,
            worker: None,
            load_before: 0.0,
        };
        self.binding.push(None);
        self.stream_load.push(0.0);
        match decision {
            Decision::Assigned(a) => {
                let w = a.worker.0;
                let variant = self.catalog.variant(self.workers[w].variant);
                let eta = variant.fractional_load(stream.input_size).expect("feasible size");
                let delta = eta * stream.rate;
                record.worker = Some(a.worker);
                record.load_before = self.loads[w];
                self.loads[w] += delta;
                self.runtimes[w].streams += 1;
                self.binding[id] = Some(w);
                self.stream_load[id] = delta;
                self.update_group(w, &stream, delta, 1.0);
                if stream.query_count() > 0 {
                    self.queue.push(stream.emit_time(0), EventKind::QueryEmit { stream: id, k: 0 });
                }
                self.queue.push(stream.end_time(), EventKind::StreamEnd { stream: id });
                self.streams.push(stream);
            }
            Decision::Rejected => {
                self.streams.push(stream);
                self.rejected_streams.push(id);
                self.attribute(id, self.config.horizon);
            }
        }
        self.trace.push(record);
    }

    fn update_group(&mut self, worker: usize, stream: &Stream, delta: f64, sign: f64) {
        let features = self.config.partition.num_features();
        let base = self.groups.of_worker[worker] * features;
        let cell = self.config.partition.cell(stream.tolerated_delay, stream.rate);
        self.group_state[base] += sign;
        self.group_state[base + 2] += sign * delta;
        self.group_state[base + BASE_FEATURES + cell] += sign * stream.rate;
        if self.group_state[base] == 0.0 {
            // No bound streams left: clear float residue.
            self.group_state[base + 2] = 0.0;
            for x in &mut self.group_state[base + BASE_FEATURES..base + features] {
                *x = 0.0;
            }
        }
    }

    /// Counts the would-be queries of a rejected stream emitted before `cutoff`.
    fn attribute(&mut self, stream: usize, cutoff: f64) -> u64 {
        let s = &self.streams[stream];
        let app = s.app;
        let mut count = 0;
        for k in 0..s.query_count() {
            let t = s.emit_time(k);
            if t >= cutoff {
                break;
            }
            let slot = self.slot_of(t);
            self.slots[slot].rejected += 1;
            self.slots[slot].app_rejected[app] += 1;
            count += 1;
        }
        count
    }

    fn emit(&mut self, stream: usize, k: usize) {
        self.emitted += 1;
        let s = &self.streams[stream];
        let w = self.binding[stream].expect("bound stream");
        let path = self.config.topology.path(s.site, self.workers[w].cluster);
        let uplink = s.access_delay
            + self.config.topology.transmission_delay(s.input_size)
            + sample_network_delay(path, &mut self.net_rng);
        self.queue.push(
            self.now + uplink / 1000.0,
            EventKind::QueryArrival {
                stream,
                emit: self.now,
            },
        );
        if k + 1 < s.query_count() {
            let next = s.emit_time(k + 1);
            self.queue.push(next, EventKind::QueryEmit { stream, k: k + 1 });
        }
    }

    fn start_batch(&mut self, w: usize) {
        let variant = self.catalog.variant(self.workers[w].variant);
        let rt = &mut self.runtimes[w];
        let n = variant.batch_size.min(rt.queue.len());
        rt.in_service.extend(rt.queue.drain(..n));
        let largest = rt
            .in_service
            .iter()
            .map(|(s, _)| self.streams[*s].input_size)
            .fold(0.0, f64::max);
        let delay = variant.processing_delay(largest).expect("feasible size");
        let service = sample_truncated_normal(delay, variant.delay_jitter, &mut self.net_rng);
        rt.busy = true;
        rt.batches += 1;
        self.queue.push(self.now + service / 1000.0, EventKind::BatchComplete { worker: w });
    }

    fn batch_complete(&mut self, w: usize) {
        let served = std::mem::take(&mut self.runtimes[w].in_service);
        let cluster = self.workers[w].cluster;
        for (stream, emit) in &served {
            let s = &self.streams[*stream];
            let path = self.config.topology.path(s.site, cluster);
            let downlink = sample_network_delay(path, &mut self.net_rng) + s.access_delay;
            self.queue.push(
                self.now + downlink / 1000.0,
                EventKind::ResponseDelivered {
                    stream: *stream,
                    emit: *emit,
                },
            );
        }
        let rt = &mut self.runtimes[w];
        rt.in_service = served;
        rt.in_service.clear();
        rt.busy = false;
        if !rt.queue.is_empty() {
            self.start_batch(w);
        }
    }

    fn delivered(&mut self, stream: usize, emit: f64) {
        let s = &self.streams[stream];
        let e2e = self.now - emit;
        let ok = e2e <= s.tolerated_delay / 1000.0 + DEADLINE_SLACK;
        self.fastest_response = Some(self.fastest_response.map_or(e2e, |f| f.min(e2e)));
        let app = s.app;
        let slot = self.slot_of(emit);
        let counts = &mut self.slots[slot];
        if ok {
            counts.success += 1;
            counts.app_success[app] += 1;
        } else {
            counts.failed += 1;
            counts.app_failed[app] += 1;
        }
        let w = self.binding[stream].expect("bound stream");
        let features = self.config.partition.num_features();
        self.group_state[self.groups.of_worker[w] * features + 1] += 1.0;
    }

    fn stream_end(&mut self, stream: usize) {
        let w = self.binding[stream].expect("bound stream");
        let delta = self.stream_load[stream];
        let rt = &mut self.runtimes[w];
        rt.streams -= 1;
        if rt.streams == 0 {
            self.loads[w] = 0.0;
        } else {
            self.loads[w] = (self.loads[w] - delta).max(0.0);
        }
        let s = self.streams[stream].clone();
        self.update_group(w, &s, delta, -1.0);
    }
}

/// Runs a whole episode, asking `provider` for a policy at every tick.
pub fn run_episode(config: &EpisodeConfig, provider: &mut dyn PolicyProvider) -> Result<EpisodeResult> {
    let mut sim = Simulation::new(config)?;
    loop {
        let started = Instant::now();
        let policy = provider.select(&sim);
        sim.set_policy(policy, started.elapsed().as_secs_f64());
        if sim.step().done {
            break;
        }
    }
    Ok(sim.finish())
}
