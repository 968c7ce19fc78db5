//! Hierarchical cloud-to-edge infrastructure: clusters, scheduler sites,
//! per-site network path statistics and worker deployment.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ResourceVector, VariantId};
use crate::error::{Error, Result};

/// Replicas of each variant placed on an unlimited (cloud) cluster.
pub const DEFAULT_CLOUD_REPLICA_CAP: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WorkerId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Access,
    CentralOffice,
    IspDc,
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub id: String,
    pub layer: Layer,
    pub capacity: ResourceVector,
    #[serde(default)]
    pub unlimited: bool,
}

/// One-way delay statistics between a scheduler site and a cluster, ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub mean_delay: f64,
    pub delay_std: f64,
}

impl PathStats {
    pub fn new(mean_delay: f64, delay_std: f64) -> Self {
        PathStats {
            mean_delay,
            delay_std,
        }
    }

    /// `d + 2 sigma`: the pessimistic one-way delay used for ranking clusters.
    pub fn pessimistic_one_way(&self) -> f64 {
        self.mean_delay + 2.0 * self.delay_std
    }

    pub fn is_valid(&self) -> bool {
        self.mean_delay >= 0.0 && self.delay_std >= 0.0
    }
}

/// Draws a one-way delay from `Normal(mean, std)` truncated at zero.
pub fn sample_network_delay<R: Rng + ?Sized>(path: &PathStats, rng: &mut R) -> f64 {
    sample_truncated_normal(path.mean_delay, path.delay_std, rng)
}

pub(crate) fn sample_truncated_normal<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    if std <= 0.0 {
        return mean.max(0.0);
    }
    let normal = Normal::new(mean, std).expect("finite std");
    normal.sample(rng).max(0.0)
}

/// Round trip with a two-sigma margin: `2 (access + d + 2 sigma)`.
pub fn pessimistic_rtt(path: &PathStats, access_delay: f64) -> f64 {
    2.0 * (access_delay + path.mean_delay + 2.0 * path.delay_std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSite {
    pub id: String,
    /// Compute cluster co-located with the scheduler, if any.
    #[serde(default)]
    pub access_cluster: Option<ClusterId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub clusters: Vec<ClusterSpec>,
    pub sites: Vec<SchedulerSite>,
    /// `paths[site][cluster]`.
    pub paths: Vec<Vec<PathStats>>,
    /// Bounds for a stream's radio access delay, ms.
    pub access_delay_range: (f64, f64),
    /// Per-stream uplink, bytes/s.
    pub uplink_rate: f64,
    #[serde(default = "default_cloud_cap")]
    pub cloud_replica_cap: usize,
}

fn default_cloud_cap() -> usize {
    DEFAULT_CLOUD_REPLICA_CAP
}

impl Topology {
    pub fn path(&self, site: SiteId, cluster: ClusterId) -> &PathStats {
        &self.paths[site.0][cluster.0]
    }

    pub fn cluster(&self, id: ClusterId) -> &ClusterSpec {
        &self.clusters[id.0]
    }

    /// Transmission time of one query, ms.
    pub fn transmission_delay(&self, input_size: f64) -> f64 {
        input_size / self.uplink_rate * 1000.0
    }

    pub fn layers(&self) -> Vec<Layer> {
        let mut layers: Vec<Layer> = self.clusters.iter().map(|c| c.layer).collect();
        layers.sort();
        layers.dedup();
        layers
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let dim = self.clusters.first().map_or(0, |c| c.capacity.dim());
        for c in &self.clusters {
            if !c.capacity.is_nonnegative() {
                errors.push(format!("cluster `{}` has negative capacity", c.id));
            }
            if c.capacity.dim() != dim {
                errors.push(format!("cluster `{}` has mismatched resource dimension", c.id));
            }
            if c.unlimited && c.layer != Layer::Cloud {
                errors.push(format!("cluster `{}` is unlimited but not in the cloud layer", c.id));
            }
        }
        if self.paths.len() != self.sites.len() {
            errors.push(format!(
                "path matrix has {} rows for {} sites",
                self.paths.len(),
                self.sites.len()
            ));
        }
        for (s, row) in self.paths.iter().enumerate() {
            if row.len() != self.clusters.len() {
                errors.push(format!("path row {s} has {} entries", row.len()));
            }
            if row.iter().any(|p| !p.is_valid()) {
                errors.push(format!("path row {s} has negative delay statistics"));
            }
        }
        for (s, site) in self.sites.iter().enumerate() {
            if let (Some(own), Some(row)) = (site.access_cluster, self.paths.get(s)) {
                match row.get(own.0) {
                    Some(own_path) => {
                        if row.iter().any(|p| p.mean_delay < own_path.mean_delay) {
                            errors.push(format!(
                                "site `{}` is not closest to its co-located cluster",
                                site.id
                            ));
                        }
                    }
                    None => errors.push(format!("site `{}` references a missing cluster", site.id)),
                }
            }
        }
        let (lo, hi) = self.access_delay_range;
        if !(lo >= 0.0 && lo <= hi) {
            errors.push("access delay range must satisfy 0 <= lo <= hi".into());
        }
        if !(self.uplink_rate > 0.0) {
            errors.push("uplink rate must be positive".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}

/// Parses and validates a TOML topology document.
pub fn load_topology(document: &str) -> Result<Topology> {
    let topo: Topology = toml::from_str(document)?;
    topo.validate()?;
    Ok(topo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "dc-cloud")]
    DcCloud,
    #[serde(rename = "co-dc-cloud")]
    CoDcCloud,
    #[serde(rename = "full-edge")]
    FullEdge,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::DcCloud, Preset::CoDcCloud, Preset::FullEdge];

    pub fn name(self) -> &'static str {
        match self {
            Preset::DcCloud => "dc-cloud",
            Preset::CoDcCloud => "co-dc-cloud",
            Preset::FullEdge => "full-edge",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

/// Knobs of the synthetic presets. Latencies in ms, capacities as
/// `[cores, memory GB, accelerator GB]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PresetParams {
    pub access_cores: (u32, u32),
    pub access_memory_gb: f64,
    pub access_accel_gb: f64,
    pub access_delay: (f64, f64),
    pub access_std: f64,
    pub sites_per_central_office: usize,
    pub central_office_capacity: Vec<f64>,
    pub central_office_delay: (f64, f64),
    pub central_office_std: f64,
    pub isp_dc_capacity: Vec<f64>,
    pub isp_dc_delay: (f64, f64),
    pub isp_dc_std: f64,
    pub cloud_delay: (f64, f64),
    pub cloud_std: f64,
    pub cloud_replica_cap: usize,
    pub radio_delay: (f64, f64),
    pub uplink_rate: f64,
}

impl Default for PresetParams {
    fn default() -> Self {
        PresetParams {
            access_cores: (8, 16),
            access_memory_gb: 16.0,
            access_accel_gb: 4.0,
            access_delay: (1.0, 2.0),
            access_std: 0.25,
            sites_per_central_office: 4,
            central_office_capacity: vec![48.0, 192.0, 12.0],
            central_office_delay: (8.0, 11.0),
            central_office_std: 1.0,
            isp_dc_capacity: vec![96.0, 384.0, 24.0],
            isp_dc_delay: (11.0, 15.0),
            isp_dc_std: 1.5,
            cloud_delay: (30.0, 50.0),
            cloud_std: 4.0,
            cloud_replica_cap: DEFAULT_CLOUD_REPLICA_CAP,
            radio_delay: (0.5, 2.0),
            uplink_rate: 50.0e6,
        }
    }
}

/// Builds one of the named presets with default parameters.
pub fn build_preset(name: &str, scale: usize, seed: u64) -> Result<Topology> {
    let preset: Preset = name.parse()?;
    build_preset_with(preset, scale, seed, &PresetParams::default())
}

/// `scale` is the number of scheduler sites (antennas).
pub fn build_preset_with(
    preset: Preset,
    scale: usize,
    seed: u64,
    params: &PresetParams,
) -> Result<Topology> {
    if scale == 0 {
        return Err(Error::Validation(vec!["preset scale must be positive".into()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };

    let mut clusters = Vec::new();
    let mut sites: Vec<SchedulerSite> = (0..scale)
        .map(|i| SchedulerSite {
            id: format!("site-{i}"),
            access_cluster: None,
        })
        .collect();

    // Per-site delays to their own access point and central office.
    let own_access: Vec<f64> = (0..scale).map(|_| uniform(&mut rng, params.access_delay)).collect();
    let per_co = params.sites_per_central_office.max(1);
    let num_co = scale.div_ceil(per_co);
    let co_delay: Vec<f64> = (0..num_co)
        .map(|_| uniform(&mut rng, params.central_office_delay))
        .collect();
    let dc_delay = uniform(&mut rng, params.isp_dc_delay);
    let cloud_delay = uniform(&mut rng, params.cloud_delay);

    let mut access_of_site = vec![None; scale];
    if preset == Preset::FullEdge {
        for (i, site) in sites.iter_mut().enumerate() {
            let (lo, hi) = params.access_cores;
            let cores = rng.random_range(lo.min(hi)..=hi.max(lo)) as f64;
            let id = ClusterId(clusters.len());
            clusters.push(ClusterSpec {
                id: format!("access-{i}"),
                layer: Layer::Access,
                capacity: ResourceVector(vec![cores, params.access_memory_gb, params.access_accel_gb]),
                unlimited: false,
            });
            site.access_cluster = Some(id);
            access_of_site[i] = Some(id);
        }
    }
    let mut co_clusters = Vec::new();
    if matches!(preset, Preset::FullEdge | Preset::CoDcCloud) {
        for c in 0..num_co {
            co_clusters.push(ClusterId(clusters.len()));
            clusters.push(ClusterSpec {
                id: format!("central-office-{c}"),
                layer: Layer::CentralOffice,
                capacity: ResourceVector(params.central_office_capacity.clone()),
                unlimited: false,
            });
        }
    }
    let dc = ClusterId(clusters.len());
    clusters.push(ClusterSpec {
        id: "isp-dc".into(),
        layer: Layer::IspDc,
        capacity: ResourceVector(params.isp_dc_capacity.clone()),
        unlimited: false,
    });
    let cloud = ClusterId(clusters.len());
    let dim = params.isp_dc_capacity.len();
    clusters.push(ClusterSpec {
        id: "cloud".into(),
        layer: Layer::Cloud,
        capacity: ResourceVector::zeros(dim),
        unlimited: true,
    });

    let mut paths = vec![vec![PathStats::new(0.0, 0.0); clusters.len()]; scale];
    for s in 0..scale {
        let my_co = s / per_co;
        for (j, access) in access_of_site.iter().enumerate() {
            let Some(access) = access else { continue };
            paths[s][access.0] = if j == s {
                PathStats::new(own_access[s], params.access_std)
            } else if j / per_co == my_co {
                // Up to the shared central office and back down.
                PathStats::new(
                    co_delay[my_co] + own_access[j],
                    params.central_office_std + params.access_std,
                )
            } else {
                PathStats::new(
                    co_delay[my_co] + co_delay[j / per_co] + own_access[j],
                    2.0 * params.central_office_std + params.access_std,
                )
            };
        }
        for (c, co) in co_clusters.iter().enumerate() {
            paths[s][co.0] = if c == my_co {
                PathStats::new(co_delay[c], params.central_office_std)
            } else {
                PathStats::new(co_delay[my_co] + co_delay[c], 2.0 * params.central_office_std)
            };
        }
        paths[s][dc.0] = PathStats::new(dc_delay, params.isp_dc_std);
        paths[s][cloud.0] = PathStats::new(cloud_delay, params.cloud_std);
    }

    let topo = Topology {
        clusters,
        sites,
        paths,
        access_delay_range: params.radio_delay,
        uplink_rate: params.uplink_rate,
        cloud_replica_cap: params.cloud_replica_cap,
    };
    topo.validate()?;
    Ok(topo)
}

/// A model variant instance running on a cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Worker {
    pub id: WorkerId,
    pub variant: VariantId,
    pub cluster: ClusterId,
    pub replica_index: usize,
}

/// Greedy round-robin deployment up to resource saturation.
///
/// Each round adds one replica of every variant that still fits in the
/// cluster; the cluster is full when a round adds nothing. Unlimited clusters
/// receive `cloud_replica_cap` replicas of each variant.
pub fn deploy_workers(topology: &Topology, catalog: &Catalog) -> Vec<Worker> {
    let mut workers = Vec::new();
    for (c, cluster) in topology.clusters.iter().enumerate() {
        let cluster_id = ClusterId(c);
        let mut replicas = vec![0usize; catalog.variants.len()];
        if cluster.unlimited {
            for round in 0..topology.cloud_replica_cap {
                for v in catalog.variant_ids() {
                    workers.push(Worker {
                        id: WorkerId(workers.len()),
                        variant: v,
                        cluster: cluster_id,
                        replica_index: round,
                    });
                }
            }
            continue;
        }
        let mut used = ResourceVector::zeros(cluster.capacity.dim());
        loop {
            let mut added = false;
            for v in catalog.variant_ids() {
                let demand = &catalog.variant(v).resource_demand;
                if demand.dim() != used.dim() || !used.fits_with(demand, &cluster.capacity) {
                    continue;
                }
                // A zero-demand variant would never saturate anything.
                if demand.0.iter().all(|x| *x == 0.0) {
                    continue;
                }
                used.add_assign(demand);
                workers.push(Worker {
                    id: WorkerId(workers.len()),
                    variant: v,
                    cluster: cluster_id,
                    replica_index: replicas[v.0],
                });
                replicas[v.0] += 1;
                added = true;
            }
            if !added {
                break;
            }
        }
    }
    workers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::load_catalog;

    fn single_variant_catalog(demand: [f64; 3]) -> Catalog {
        load_catalog(&format!(
            r#"
            [[tasks]]
            id = "det"
            [[models]]
            id = "m"
            task = "det"
            accuracy = 30.0
            [[variants]]
            id = "v"
            model = "m"
            batch_size = 1
            resource_demand = [{}, {}, {}]
            max_input_size = 1000.0
            base_delay_ms = 10.0
            base_capacity_qps = 100.0
            "#,
            demand[0], demand[1], demand[2]
        ))
        .unwrap()
    }

    fn one_cluster(capacity: [f64; 3]) -> Topology {
        Topology {
            clusters: vec![ClusterSpec {
                id: "c".into(),
                layer: Layer::IspDc,
                capacity: ResourceVector(capacity.to_vec()),
                unlimited: false,
            }],
            sites: vec![SchedulerSite {
                id: "s".into(),
                access_cluster: None,
            }],
            paths: vec![vec![PathStats::new(5.0, 1.0)]],
            access_delay_range: (1.0, 2.0),
            uplink_rate: 1e6,
            cloud_replica_cap: 4,
        }
    }

    #[test]
    fn dc_cloud_has_no_edge_compute() {
        let t = build_preset("dc-cloud", 1, 7).unwrap();
        assert_eq!(t.layers(), vec![Layer::IspDc, Layer::Cloud]);
        assert!(t.sites.iter().all(|s| s.access_cluster.is_none()));
    }

    #[test]
    fn co_dc_cloud_layers() {
        let t = build_preset("co-dc-cloud", 3, 7).unwrap();
        assert_eq!(t.layers(), vec![Layer::CentralOffice, Layer::IspDc, Layer::Cloud]);
    }

    #[test]
    fn full_edge_colocates_every_site() {
        let t = build_preset("full-edge", 1, 7).unwrap();
        assert_eq!(t.layers().len(), 4);
        let t = build_preset("full-edge", 6, 3).unwrap();
        for (s, site) in t.sites.iter().enumerate() {
            let own = site.access_cluster.expect("co-located access cluster");
            assert_eq!(t.cluster(own).layer, Layer::Access);
            let own_delay = t.paths[s][own.0].mean_delay;
            assert!(t.paths[s].iter().all(|p| p.mean_delay >= own_delay));
        }
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(matches!(build_preset("mesh-42", 1, 0), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn presets_are_deterministic() {
        for p in Preset::ALL {
            let a = build_preset(p.name(), 3, 11).unwrap();
            let b = build_preset(p.name(), 3, 11).unwrap();
            assert_eq!(a, b);
        }
        assert_ne!(
            build_preset("full-edge", 3, 11).unwrap(),
            build_preset("full-edge", 3, 12).unwrap()
        );
    }

    #[test]
    fn latency_orders_of_magnitude() {
        let t = build_preset("full-edge", 2, 5).unwrap();
        for c in 0..t.clusters.len() {
            let d = t.paths[0][c].mean_delay;
            match t.clusters[c].layer {
                Layer::Cloud => assert!((30.0..=50.0).contains(&d)),
                Layer::IspDc => assert!((10.0..=15.0).contains(&d)),
                _ => {}
            }
        }
        let own = t.sites[0].access_cluster.unwrap();
        assert!((1.0..=5.0).contains(&t.paths[0][own.0].mean_delay));
    }

    #[test]
    fn degenerate_delay_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_network_delay(&PathStats::new(10.0, 0.0), &mut rng), 10.0);
            assert_eq!(sample_network_delay(&PathStats::new(0.0, 0.0), &mut rng), 0.0);
        }
    }

    #[test]
    fn sampled_delay_mean_and_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let path = PathStats::new(10.0, 2.0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let d = sample_network_delay(&path, &mut rng);
            assert!(d >= 0.0);
            sum += d;
        }
        let mean = sum / n as f64;
        assert!((mean - 10.0).abs() < 0.1, "mean {mean}");

        let wide = PathStats::new(0.5, 3.0);
        assert!((0..10_000).all(|_| sample_network_delay(&wide, &mut rng) >= 0.0));
    }

    #[test]
    fn pessimistic_rtt_examples() {
        assert_eq!(pessimistic_rtt(&PathStats::new(5.0, 1.0), 2.0), 18.0);
        assert_eq!(pessimistic_rtt(&PathStats::new(0.0, 0.0), 0.0), 0.0);
        assert_eq!(pessimistic_rtt(&PathStats::new(10.0, 0.0), 0.0), 20.0);
    }

    #[test]
    fn deploy_exact_fit_gives_one_worker() {
        let cat = single_variant_catalog([2.0, 4.0, 0.0]);
        let w = deploy_workers(&one_cluster([2.0, 4.0, 0.0]), &cat);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn deploy_floor_of_ratio() {
        let cat = single_variant_catalog([2.0, 4.0, 1.0]);
        let w = deploy_workers(&one_cluster([5.0, 10.0, 2.5]), &cat);
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].replica_index, 1);
    }

    #[test]
    fn deploy_zero_capacity() {
        let cat = single_variant_catalog([1.0, 1.0, 0.0]);
        assert!(deploy_workers(&one_cluster([0.0, 0.0, 0.0]), &cat).is_empty());
    }

    #[test]
    fn deployments_respect_capacity() {
        let cat = Catalog::default_catalog();
        for p in Preset::ALL {
            for seed in 0..5 {
                let t = build_preset(p.name(), 4, seed).unwrap();
                let workers = deploy_workers(&t, &cat);
                for (c, cluster) in t.clusters.iter().enumerate() {
                    let mut used = ResourceVector::zeros(cluster.capacity.dim());
                    let mut count = 0;
                    for w in workers.iter().filter(|w| w.cluster.0 == c) {
                        used.add_assign(&cat.variant(w.variant).resource_demand);
                        count += 1;
                    }
                    if cluster.unlimited {
                        assert_eq!(count, t.cloud_replica_cap * cat.variants.len());
                    } else {
                        assert!(used.le(&cluster.capacity), "{p} cluster {c} overcommitted");
                    }
                }
            }
        }
    }

    #[test]
    fn topology_document_round_trip() {
        let t = build_preset("co-dc-cloud", 2, 9).unwrap();
        let doc = toml::to_string(&t).unwrap();
        assert_eq!(load_topology(&doc).unwrap(), t);
    }

    #[test]
    fn invalid_topology_document() {
        let mut t = one_cluster([1.0, 1.0, 1.0]);
        t.clusters[0].unlimited = true;
        t.paths[0][0].delay_std = -1.0;
        match t.validate() {
            Err(Error::Validation(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
