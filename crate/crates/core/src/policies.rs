//! Feasibility filter and the seven static scheduling policies.
//!
//! A worker is feasible for a stream when its variant implements the stream's
//! task, has spare load capacity for the stream's fractional load, meets the
//! pessimistic end-to-end delay bound and provides enough accuracy. Every
//! policy picks among feasible workers only, so an empty feasible set is the
//! one and only reason for a rejection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, VariantSpec};
use crate::error::{Error, Result};
use crate::topology::{pessimistic_rtt, SiteId, Topology, Worker, WorkerId};
use crate::workload::{Stream, StreamId};

/// Weight denominator used by `rp_load` for idle workers, queries/s.
pub const IDLE_LOAD_EPSILON: f64 = 1e-3;

/// Slack absorbing float residue of the incremental load ledger.
pub const LOAD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Closest,
    LoadBalancing,
    Farthest,
    Cheaper,
    RpLatency,
    RpLoad,
    LeastImpedance,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Closest,
        PolicyKind::LoadBalancing,
        PolicyKind::Farthest,
        PolicyKind::Cheaper,
        PolicyKind::RpLatency,
        PolicyKind::RpLoad,
        PolicyKind::LeastImpedance,
    ];

    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<PolicyKind> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Closest => "closest",
            PolicyKind::LoadBalancing => "load_balancing",
            PolicyKind::Farthest => "farthest",
            PolicyKind::Cheaper => "cheaper",
            PolicyKind::RpLatency => "rp_latency",
            PolicyKind::RpLoad => "rp_load",
            PolicyKind::LeastImpedance => "least_impedance",
        }
    }

    pub fn is_randomized(self) -> bool {
        matches!(self, PolicyKind::RpLatency | PolicyKind::RpLoad)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<PolicyKind> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPolicy(s.to_string()))
    }
}

/// Snapshot of the system as seen by one scheduler site at decision time.
#[derive(Debug, Clone, Copy)]
pub struct SystemView<'a> {
    pub catalog: &'a Catalog,
    pub topology: &'a Topology,
    pub workers: &'a [Worker],
    /// Current load of each worker, indexed like `workers`, max-size queries/s.
    pub loads: &'a [f64],
    pub site: SiteId,
    pub now: f64,
}

/// Binding of a stream to a worker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub stream: StreamId,
    pub worker: WorkerId,
    pub decision_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Assigned(Assignment),
    Rejected,
}

impl Decision {
    pub fn worker(&self) -> Option<WorkerId> {
        match self {
            Decision::Assigned(a) => Some(a.worker),
            Decision::Rejected => None,
        }
    }
}

/// Per-worker quantities the policies rank by.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    worker: WorkerId,
    /// `d + 2 sigma` towards the worker's cluster.
    one_way: f64,
    mean_delay: f64,
    /// `2 (d + 2 sigma) + D_v(zeta)`.
    expected_e2e: f64,
    load: f64,
    capacity: f64,
}

/// Checks the four binding constraints for one worker. Returns the expected
/// processing delay when feasible.
pub fn check_feasible(stream: &Stream, worker: &Worker, load: f64, view: &SystemView) -> Option<f64> {
    let catalog = view.catalog;
    let variant: &VariantSpec = catalog.variant(worker.variant);
    // Task compatibility.
    if catalog.variant_task(worker.variant) != stream.task {
        return None;
    }
    // Accuracy.
    if catalog.variant_accuracy(worker.variant) < stream.required_accuracy {
        return None;
    }
    // Load capacity, with the stream's load normalized to max-size queries.
    let eta = variant.fractional_load(stream.input_size).ok()?;
    if load + eta * stream.rate > variant.base_capacity + LOAD_TOLERANCE {
        return None;
    }
    // Pessimistic end-to-end delay.
    let processing = variant.processing_delay(stream.input_size).ok()?;
    let path = view.topology.path(view.site, worker.cluster);
    let total = pessimistic_rtt(path, stream.access_delay)
        + view.topology.transmission_delay(stream.input_size)
        + processing;
    if total > stream.tolerated_delay {
        return None;
    }
    Some(processing)
}

fn candidates(stream: &Stream, view: &SystemView) -> Vec<Candidate> {
    view.workers
        .iter()
        .filter_map(|w| {
            let load = view.loads[w.id.0];
            let processing = check_feasible(stream, w, load, view)?;
            let path = view.topology.path(view.site, w.cluster);
            let one_way = path.pessimistic_one_way();
            Some(Candidate {
                worker: w.id,
                one_way,
                mean_delay: path.mean_delay,
                expected_e2e: 2.0 * one_way + processing,
                load,
                capacity: view.catalog.variant(w.variant).base_capacity,
            })
        })
        .collect()
}

/// Workers satisfying every binding constraint, in id order.
pub fn feasible_set(stream: &Stream, view: &SystemView) -> Vec<WorkerId> {
    candidates(stream, view).into_iter().map(|c| c.worker).collect()
}

fn assign(stream: &Stream, view: &SystemView, c: Option<&Candidate>) -> Decision {
    match c {
        Some(c) => Decision::Assigned(Assignment {
            stream: stream.id,
            worker: c.worker,
            decision_time: view.now,
        }),
        None => Decision::Rejected,
    }
}

fn tie_break(a: &Candidate, b: &Candidate) -> Ordering {
    a.load
        .total_cmp(&b.load)
        .then(a.mean_delay.total_cmp(&b.mean_delay))
        .then(a.worker.cmp(&b.worker))
}

fn pick_min(
    stream: &Stream,
    view: &SystemView,
    key: impl Fn(&Candidate, &Candidate) -> Ordering,
) -> Decision {
    let cands = candidates(stream, view);
    assign(stream, view, cands.iter().min_by(|a, b| key(a, b)))
}

fn pick_weighted<R: Rng + ?Sized>(
    stream: &Stream,
    view: &SystemView,
    rng: &mut R,
    weight: impl Fn(&Candidate) -> f64,
) -> Decision {
    let cands = candidates(stream, view);
    if cands.is_empty() {
        return Decision::Rejected;
    }
    let weights: Vec<f64> = cands.iter().map(&weight).collect();
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (c, w) in cands.iter().zip(&weights) {
        acc += w;
        if target < acc {
            return assign(stream, view, Some(c));
        }
    }
    assign(stream, view, cands.last())
}

/// Feasible worker on the cluster with the lowest `d + 2 sigma`.
pub fn select_closest(stream: &Stream, view: &SystemView) -> Decision {
    pick_min(stream, view, |a, b| a.one_way.total_cmp(&b.one_way).then(tie_break(a, b)))
}

/// Least loaded feasible worker.
pub fn select_load_balancing(stream: &Stream, view: &SystemView) -> Decision {
    pick_min(stream, view, tie_break)
}

/// Feasible worker on the cluster with the highest `d + 2 sigma`.
pub fn select_farthest(stream: &Stream, view: &SystemView) -> Decision {
    pick_min(stream, view, |a, b| b.one_way.total_cmp(&a.one_way).then(tie_break(a, b)))
}

/// Feasible worker with the largest expected end-to-end delay, keeping the
/// fastest placements free for streams that need them.
pub fn select_cheaper(stream: &Stream, view: &SystemView) -> Decision {
    pick_min(stream, view, |a, b| {
        b.expected_e2e.total_cmp(&a.expected_e2e).then(tie_break(a, b))
    })
}

/// Random feasible worker, weight inversely proportional to expected delay.
pub fn select_rp_latency<R: Rng + ?Sized>(stream: &Stream, view: &SystemView, rng: &mut R) -> Decision {
    pick_weighted(stream, view, rng, |c| 1.0 / c.expected_e2e.max(f64::MIN_POSITIVE))
}

/// Random feasible worker, weight `capacity / load`.
pub fn select_rp_load<R: Rng + ?Sized>(stream: &Stream, view: &SystemView, rng: &mut R) -> Decision {
    pick_weighted(stream, view, rng, |c| c.capacity / c.load.max(IDLE_LOAD_EPSILON))
}

/// Feasible worker with the smallest expected end-to-end delay.
pub fn select_least_impedance(stream: &Stream, view: &SystemView) -> Decision {
    pick_min(stream, view, |a, b| {
        a.expected_e2e.total_cmp(&b.expected_e2e).then(tie_break(a, b))
    })
}

pub fn apply_policy<R: Rng + ?Sized>(
    kind: PolicyKind,
    stream: &Stream,
    view: &SystemView,
    rng: &mut R,
) -> Decision {
    match kind {
        PolicyKind::Closest => select_closest(stream, view),
        PolicyKind::LoadBalancing => select_load_balancing(stream, view),
        PolicyKind::Farthest => select_farthest(stream, view),
        PolicyKind::Cheaper => select_cheaper(stream, view),
        PolicyKind::RpLatency => select_rp_latency(stream, view, rng),
        PolicyKind::RpLoad => select_rp_load(stream, view, rng),
        PolicyKind::LeastImpedance => select_least_impedance(stream, view),
    }
}
