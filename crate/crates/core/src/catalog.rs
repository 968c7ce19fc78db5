//! Inference tasks, models and deployable model variants.
//!
//! A [`VariantSpec`] carries the profile measured at its maximum input size.
//! Smaller inputs are served faster following an affine interpolation with a
//! fixed floor, and capacity scales inversely with delay so that
//! `capacity * delay` is constant for a variant.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of the full-size processing delay paid by an arbitrarily small input.
pub const DELAY_FLOOR: f64 = 0.2;

const DEFAULT_CATALOG: &str = include_str!("../data/catalog.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariantId(pub usize);

/// Nonnegative resource amounts: cpu cores, memory GB, accelerator memory GB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResourceVector(pub Vec<f64>);

impl ResourceVector {
    pub fn zeros(dim: usize) -> Self {
        ResourceVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.0.iter().all(|x| *x >= 0.0 && x.is_finite())
    }

    pub fn add_assign(&mut self, other: &ResourceVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    /// Component-wise `self + extra <= cap`.
    pub fn fits_with(&self, extra: &ResourceVector, cap: &ResourceVector) -> bool {
        self.0
            .iter()
            .zip(&extra.0)
            .zip(&cap.0)
            .all(|((used, add), limit)| used + add <= *limit + 1e-9)
    }

    pub fn le(&self, cap: &ResourceVector) -> bool {
        self.0.iter().zip(&cap.0).all(|(a, b)| *a <= *b + 1e-9)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskKind {
    pub id: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub id: String,
    pub task: TaskId,
    /// Mean average precision, 0-100.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub id: String,
    pub model: ModelId,
    pub batch_size: usize,
    pub resource_demand: ResourceVector,
    /// Largest accepted input, bytes.
    pub max_input_size: f64,
    /// Processing delay of a batch at `max_input_size`, ms.
    pub base_delay: f64,
    /// Throughput at `max_input_size`, queries/s.
    pub base_capacity: f64,
    /// Standard deviation of simulated processing time, ms.
    pub delay_jitter: f64,
}

impl VariantSpec {
    fn check_size(&self, input_size: f64) -> Result<()> {
        if !(input_size > 0.0 && input_size <= self.max_input_size) {
            return Err(Error::Domain(format!(
                "input size {input_size} outside (0, {}] for variant {}",
                self.max_input_size, self.id
            )));
        }
        Ok(())
    }

    /// Delay in ms to process an input of `input_size` bytes.
    pub fn processing_delay(&self, input_size: f64) -> Result<f64> {
        self.check_size(input_size)?;
        let ratio = input_size / self.max_input_size;
        Ok(self.base_delay * (DELAY_FLOOR + (1.0 - DELAY_FLOOR) * ratio))
    }

    /// Queries/s sustainable at `input_size`.
    pub fn effective_capacity(&self, input_size: f64) -> Result<f64> {
        let delay = self.processing_delay(input_size)?;
        Ok(self.base_capacity * self.base_delay / delay)
    }

    /// Share of one max-size query that a query of `input_size` represents.
    pub fn fractional_load(&self, input_size: f64) -> Result<f64> {
        self.check_size(input_size)?;
        Ok(input_size / self.max_input_size)
    }
}

/// Immutable after load; lookups by index are O(1).
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub tasks: Vec<TaskKind>,
    pub models: Vec<ModelSpec>,
    pub variants: Vec<VariantSpec>,
    models_by_task: Vec<Vec<ModelId>>,
    variants_by_model: Vec<Vec<VariantId>>,
}

impl Catalog {
    pub fn task(&self, id: TaskId) -> &TaskKind {
        &self.tasks[id.0]
    }

    pub fn model(&self, id: ModelId) -> &ModelSpec {
        &self.models[id.0]
    }

    pub fn variant(&self, id: VariantId) -> &VariantSpec {
        &self.variants[id.0]
    }

    pub fn models_for(&self, task: TaskId) -> &[ModelId] {
        &self.models_by_task[task.0]
    }

    pub fn variants_for(&self, model: ModelId) -> &[VariantId] {
        &self.variants_by_model[model.0]
    }

    /// Task served by a variant.
    pub fn variant_task(&self, id: VariantId) -> TaskId {
        self.model(self.variant(id).model).task
    }

    pub fn variant_accuracy(&self, id: VariantId) -> f64 {
        self.model(self.variant(id).model).accuracy
    }

    pub fn task_by_name(&self, name: &str) -> Option<TaskId> {
        self.tasks.iter().position(|t| t.id == name).map(TaskId)
    }

    /// Total number of models across tasks.
    pub fn num_models(&self) -> usize {
        self.models_by_task.iter().map(Vec::len).sum()
    }

    pub fn variant_ids(&self) -> impl Iterator<Item = VariantId> + '_ {
        (0..self.variants.len()).map(VariantId)
    }

    /// Resource dimension shared by every variant.
    pub fn resource_dim(&self) -> usize {
        self.variants.first().map_or(0, |v| v.resource_demand.dim())
    }

    /// The bundled synthetic catalog.
    pub fn default_catalog() -> Catalog {
        load_catalog(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }

    pub fn to_config(&self) -> CatalogConfig {
        CatalogConfig {
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskEntry {
                    id: t.id.clone(),
                    description: t.description.clone(),
                })
                .collect(),
            models: self
                .models
                .iter()
                .map(|m| ModelEntry {
                    id: m.id.clone(),
                    task: self.tasks[m.task.0].id.clone(),
                    accuracy: m.accuracy,
                })
                .collect(),
            variants: self
                .variants
                .iter()
                .map(|v| VariantEntry {
                    id: v.id.clone(),
                    model: self.models[v.model.0].id.clone(),
                    batch_size: v.batch_size,
                    resource_demand: v.resource_demand.0.clone(),
                    max_input_size: v.max_input_size,
                    base_delay_ms: v.base_delay,
                    base_capacity_qps: v.base_capacity,
                    delay_jitter_ms: v.delay_jitter,
                })
                .collect(),
        }
    }
}

impl fmt::Display for Catalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} tasks, {} models, {} variants",
            self.tasks.len(),
            self.models.len(),
            self.variants.len()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub id: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub task: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEntry {
    pub id: String,
    pub model: String,
    pub batch_size: usize,
    pub resource_demand: Vec<f64>,
    pub max_input_size: f64,
    pub base_delay_ms: f64,
    pub base_capacity_qps: f64,
    #[serde(default)]
    pub delay_jitter_ms: f64,
}

/// Serialized form of a catalog: `tasks[]`, `models[]`, `variants[]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    #[serde(default)]
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub variants: Vec<VariantEntry>,
}

/// Parses and validates a TOML catalog document.
pub fn load_catalog(document: &str) -> Result<Catalog> {
    let config: CatalogConfig = toml::from_str(document)?;
    Catalog::try_from(config)
}

impl TryFrom<CatalogConfig> for Catalog {
    type Error = Error;

    fn try_from(config: CatalogConfig) -> Result<Catalog> {
        let mut errors = Vec::new();

        let mut task_index = HashMap::new();
        for (i, t) in config.tasks.iter().enumerate() {
            if task_index.insert(t.id.as_str(), i).is_some() {
                errors.push(format!("duplicate task id `{}`", t.id));
            }
        }

        let mut model_index = HashMap::new();
        let mut models = Vec::with_capacity(config.models.len());
        for (i, m) in config.models.iter().enumerate() {
            if model_index.insert(m.id.as_str(), i).is_some() {
                errors.push(format!("duplicate model id `{}`", m.id));
            }
            if !(m.accuracy >= 0.0) {
                errors.push(format!("model `{}` has negative accuracy", m.id));
            }
            match task_index.get(m.task.as_str()) {
                Some(&t) => models.push(ModelSpec {
                    id: m.id.clone(),
                    task: TaskId(t),
                    accuracy: m.accuracy,
                }),
                None => errors.push(format!("model `{}` references unknown task `{}`", m.id, m.task)),
            }
        }

        let dim = config.variants.first().map_or(0, |v| v.resource_demand.len());
        let mut variant_ids = HashMap::new();
        let mut variants = Vec::with_capacity(config.variants.len());
        for v in &config.variants {
            if variant_ids.insert(v.id.as_str(), ()).is_some() {
                errors.push(format!("duplicate variant id `{}`", v.id));
            }
            if !(v.base_delay_ms > 0.0) {
                errors.push(format!("variant `{}` has nonpositive base delay", v.id));
            }
            if !(v.base_capacity_qps > 0.0) {
                errors.push(format!("variant `{}` has nonpositive capacity", v.id));
            }
            if v.batch_size == 0 {
                errors.push(format!("variant `{}` has zero batch size", v.id));
            }
            if !(v.max_input_size > 0.0) {
                errors.push(format!("variant `{}` has nonpositive max input size", v.id));
            }
            if !(v.delay_jitter_ms >= 0.0) {
                errors.push(format!("variant `{}` has negative jitter", v.id));
            }
            let demand = ResourceVector(v.resource_demand.clone());
            if !demand.is_nonnegative() {
                errors.push(format!("variant `{}` has a negative resource demand", v.id));
            }
            if demand.dim() != dim {
                errors.push(format!(
                    "variant `{}` has {} resource kinds, expected {dim}",
                    v.id,
                    demand.dim()
                ));
            }
            match model_index.get(v.model.as_str()) {
                Some(&m) => variants.push(VariantSpec {
                    id: v.id.clone(),
                    model: ModelId(m),
                    batch_size: v.batch_size,
                    resource_demand: demand,
                    max_input_size: v.max_input_size,
                    base_delay: v.base_delay_ms,
                    base_capacity: v.base_capacity_qps,
                    delay_jitter: v.delay_jitter_ms,
                }),
                None => errors.push(format!(
                    "variant `{}` references unknown model `{}`",
                    v.id, v.model
                )),
            }
        }

        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }

        let tasks: Vec<TaskKind> = config
            .tasks
            .into_iter()
            .map(|t| TaskKind {
                id: t.id,
                description: t.description,
            })
            .collect();
        let mut models_by_task = vec![Vec::new(); tasks.len()];
        for (i, m) in models.iter().enumerate() {
            models_by_task[m.task.0].push(ModelId(i));
        }
        let mut variants_by_model = vec![Vec::new(); models.len()];
        for (i, v) in variants.iter().enumerate() {
            variants_by_model[v.model.0].push(VariantId(i));
        }

        Ok(Catalog {
            tasks,
            models,
            variants,
            models_by_task,
            variants_by_model,
        })
    }
}
