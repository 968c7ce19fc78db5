//! Windowed per-worker-group features fed to the agent.
//!
//! Replicas of the same variant on the same cluster are interchangeable for
//! every policy, so the state aggregates them into one group. Each group
//! contributes `3 + N_delay * N_rate` features per time slot: bound stream
//! count, responses delivered in the slot, load ledger, then the summed
//! stream rates binned by (tolerated delay, rate).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{ClusterId, Worker};
use crate::catalog::VariantId;

/// Number of scalar features preceding the binned query sums.
pub const BASE_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePartition {
    /// Lower boundaries of the tolerated-delay bins, ms; the last bin is open.
    pub delay_bins: Vec<f64>,
    /// Lower boundaries of the stream-rate bins, fps; the last bin is open.
    pub rate_bins: Vec<f64>,
}

impl Default for FeaturePartition {
    fn default() -> Self {
        FeaturePartition {
            delay_bins: vec![0.0, 50.0, 150.0, 400.0],
            rate_bins: vec![0.0, 5.0, 15.0, 25.0],
        }
    }
}

fn bin_of(bounds: &[f64], x: f64) -> usize {
    bounds.iter().rposition(|b| *b <= x).unwrap_or(0)
}

impl FeaturePartition {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: &[f64]| !b.is_empty() && b[0] == 0.0 && b.windows(2).all(|w| w[0] < w[1]);
        if ok(&self.delay_bins) && ok(&self.rate_bins) {
            Ok(())
        } else {
            Err(Error::Validation(vec![
                "feature bins must start at 0 and be strictly increasing".into(),
            ]))
        }
    }

    pub fn num_bins(&self) -> usize {
        self.delay_bins.len() * self.rate_bins.len()
    }

    pub fn num_features(&self) -> usize {
        BASE_FEATURES + self.num_bins()
    }

    /// Flat index of the (delay, rate) cell among the binned features.
    pub fn cell(&self, tolerated_delay: f64, rate: f64) -> usize {
        bin_of(&self.delay_bins, tolerated_delay) * self.rate_bins.len() + bin_of(&self.rate_bins, rate)
    }
}

/// Workers sharing a (variant, cluster) pair, in order of first appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerGroups {
    pub keys: Vec<(VariantId, ClusterId)>,
    /// Group index of each worker.
    pub of_worker: Vec<usize>,
}

impl WorkerGroups {
    pub fn new(workers: &[Worker]) -> Self {
        let mut keys: Vec<(VariantId, ClusterId)> = Vec::new();
        let of_worker = workers
            .iter()
            .map(|w| {
                let key = (w.variant, w.cluster);
                match keys.iter().position(|k| *k == key) {
                    Some(g) => g,
                    None => {
                        keys.push(key);
                        keys.len() - 1
                    }
                }
            })
            .collect();
        WorkerGroups { keys, of_worker }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Features of every group for one time slot, `[group][feature]` flattened.
pub type Snapshot = Vec<f64>;

/// Dense `features x groups x slots` tensor, slot-major innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTensor {
    pub features: usize,
    pub groups: usize,
    pub slots: usize,
    pub data: Vec<f64>,
}

impl StateTensor {
    pub fn zeros(features: usize, groups: usize, slots: usize) -> Self {
        StateTensor {
            features,
            groups,
            slots,
            data: vec![0.0; features * groups * slots],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.features, self.groups, self.slots)
    }

    pub fn index(&self, feature: usize, group: usize, slot: usize) -> usize {
        (feature * self.groups + group) * self.slots + slot
    }

    pub fn get(&self, feature: usize, group: usize, slot: usize) -> f64 {
        self.data[self.index(feature, group, slot)]
    }
}

/// Builds the state from the most recent `slots` snapshots. Older history is
/// dropped; missing slots at the start of an episode stay zero.
pub fn encode_state(
    history: &[Snapshot],
    groups: usize,
    partition: &FeaturePartition,
    slots: usize,
) -> Result<StateTensor> {
    let features = partition.num_features();
    let mut state = StateTensor::zeros(features, groups, slots);
    let recent = &history[history.len().saturating_sub(slots)..];
    let offset = slots - recent.len();
    for (k, snap) in recent.iter().enumerate() {
        if snap.len() != features * groups {
            return Err(Error::Shape {
                expected: (features, groups, slots),
                got: (snap.len() / groups.max(1), groups, slots),
            });
        }
        let slot = offset + k;
        for g in 0..groups {
            for f in 0..features {
                let i = state.index(f, g, slot);
                state.data[i] = snap[g * features + f];
            }
        }
    }
    Ok(state)
}
