//! `aset` command-line driver: static-policy comparisons, agent training and
//! greedy evaluation. Every flag can also be set from a TOML plan file passed
//! with `--config`; keys in the file win over flags.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use aset_core::agent::{
    write_curve_csv, AgentPolicy, AsetEnv, Checkpoint, Environment, Hyperparams, NetShape, QNetwork, RewardConfig,
    Trainer,
};
use aset_core::catalog::{load_catalog, Catalog};
use aset_core::policies::PolicyKind;
use aset_core::sim::{run_episode, EpisodeConfig, EpisodeResult, DEFAULT_EARLY_STOP, DEFAULT_HORIZON};
use aset_core::topology::{build_preset, load_topology, Topology};
use aset_core::workload::{LambdaSchedule, WorkloadConfig};

#[derive(Debug, Parser)]
#[command(name = "aset", version, about = "Edge inference scheduling simulator and policy-switching agent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run static scheduling policies and summarize their success ratios.
    Compare(CompareArgs),
    /// Train the policy-switching agent and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a trained agent greedily, optionally next to static policies.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Preset name (dc-cloud, co-dc-cloud, full-edge) or a topology TOML file.
    #[arg(long, default_value = "full-edge")]
    pub topology: String,
    /// Number of scheduler sites when building a preset.
    #[arg(long, default_value_t = 3)]
    pub scale: usize,
    /// Seed for the preset's sampled link delays.
    #[arg(long, default_value_t = 1)]
    pub topology_seed: u64,
    /// Model catalog TOML; the built-in catalog otherwise.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Constant client arrival rates per site, per minute. One run group each.
    #[arg(long, value_delimiter = ',', default_value = "20")]
    pub lambda: Vec<f64>,
    /// Arrival rates applied in turn for --schedule-period seconds each. Replaces --lambda.
    #[arg(long, value_delimiter = ',')]
    pub lambda_schedule: Option<Vec<f64>>,
    #[arg(long, default_value_t = 150.0)]
    pub schedule_period: f64,
    /// First episode seed; episodes use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Episodes per run group (training: number of training episodes).
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    /// Episode timeout, s.
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    pub horizon: f64,
    /// Stop an episode at a tick whose window success is at or below this. Values <= 0 disable it.
    #[arg(long)]
    pub early_stop: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// TOML plan whose keys override the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Policies to run; all seven by default.
    #[arg(long, value_delimiter = ',')]
    pub policy: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub gradient_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Seed for network initialization, exploration and minibatches.
    #[arg(long)]
    pub train_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Agent checkpoint to evaluate.
    #[arg(long)]
    pub agent: Option<PathBuf>,
    /// Static policies to run alongside the agent.
    #[arg(long, value_delimiter = ',')]
    pub policy: Vec<String>,
}

/// Everything a command needs, after merging flags and the plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub topology: String,
    pub scale: usize,
    pub topology_seed: u64,
    pub catalog: Option<PathBuf>,
    pub lambda: Vec<f64>,
    pub lambda_schedule: Option<Vec<f64>>,
    pub schedule_period: f64,
    pub seed: u64,
    pub episodes: usize,
    pub horizon: f64,
    pub early_stop: Option<f64>,
    pub out: PathBuf,
    #[serde(default)]
    pub policies: Vec<String>,
    pub agent: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub reward: RewardConfig,
}

impl Plan {
    fn from_common(c: &CommonArgs) -> Plan {
        Plan {
            topology: c.topology.clone(),
            scale: c.scale,
            topology_seed: c.topology_seed,
            catalog: c.catalog.clone(),
            lambda: c.lambda.clone(),
            lambda_schedule: c.lambda_schedule.clone(),
            schedule_period: c.schedule_period,
            seed: c.seed,
            episodes: c.episodes,
            horizon: c.horizon,
            early_stop: c.early_stop,
            out: c.out.clone(),
            policies: Vec::new(),
            agent: None,
            resume: None,
            hyperparams: Hyperparams::default(),
            reward: RewardConfig::default(),
        }
    }

    /// Applies the keys of a TOML document on top of this plan.
    pub fn overlay(self, document: &str) -> Result<Plan> {
        let mut base = toml::Value::try_from(&self).context("serializing plan")?;
        let patch: toml::Value = toml::from_str(document).context("parsing plan file")?;
        merge(&mut base, patch);
        base.try_into().context("invalid plan file")
    }

    fn with_config(self, config: &Option<PathBuf>) -> Result<Plan> {
        match config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                self.overlay(&text)
            }
            None => Ok(self),
        }
    }

    pub fn topology(&self) -> Result<Topology> {
        let path = Path::new(&self.topology);
        if self.topology.ends_with(".toml") || path.is_file() {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(load_topology(&text)?)
        } else {
            Ok(build_preset(&self.topology, self.scale, self.topology_seed)?)
        }
    }

    pub fn catalog(&self) -> Result<Catalog> {
        match &self.catalog {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(load_catalog(&text)?)
            }
            None => Ok(Catalog::default_catalog()),
        }
    }

    /// Run groups: a label and the arrival-rate schedule.
    pub fn workloads(&self) -> Vec<(String, LambdaSchedule)> {
        match &self.lambda_schedule {
            Some(rates) => vec![(
                format!("schedule-{}", join(rates, "-")),
                LambdaSchedule::stepped(rates, self.schedule_period),
            )],
            None => self
                .lambda
                .iter()
                .map(|&l| (format!("lambda-{}", fmt_num(l)), LambdaSchedule::constant(l)))
                .collect(),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.episodes as u64).map(|i| self.seed + i).collect()
    }

    pub fn policy_kinds(&self) -> Result<Vec<PolicyKind>> {
        self.policies
            .iter()
            .map(|p| p.parse::<PolicyKind>().map_err(Into::into))
            .collect()
    }

    fn episode_config(
        &self,
        topology: &Topology,
        catalog: &Catalog,
        schedule: &LambdaSchedule,
        seed: u64,
        early_stop: Option<f64>,
    ) -> Result<EpisodeConfig> {
        let mut config = EpisodeConfig::new(
            topology.clone(),
            catalog,
            WorkloadConfig::with_schedule(schedule.clone()),
            seed,
        );
        config.horizon = self.horizon;
        config.early_stop = early_stop.filter(|t| *t > 0.0);
        config.validate()?;
        Ok(config)
    }
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

fn join(xs: &[f64], sep: &str) -> String {
    xs.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(sep)
}

/// One episode's outcome in the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub policy: String,
    pub seed: u64,
    pub success: f64,
    pub failed: f64,
    pub rejected: f64,
    pub queries: u64,
    pub early_stopped: bool,
}

impl SummaryRow {
    fn new(group: &str, policy: &str, seed: u64, r: &EpisodeResult) -> Self {
        let q = r.totals.queries().max(1) as f64;
        SummaryRow {
            group: group.to_string(),
            policy: policy.to_string(),
            seed,
            success: r.totals.success_ratio(),
            failed: r.totals.failed as f64 / q,
            rejected: r.totals.rejected as f64 / q,
            queries: r.totals.queries(),
            early_stopped: r.early_stopped,
        }
    }
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "group,policy,seed,success,failed,rejected,queries,early_stopped")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{:.6},{},{}",
            r.group, r.policy, r.seed, r.success, r.failed, r.rejected, r.queries, r.early_stopped
        )?;
    }
    Ok(())
}

/// Mean success per `(group, policy)` in first-seen order.
pub fn mean_success(rows: &[SummaryRow]) -> Vec<(String, String, f64)> {
    let mut out: Vec<(String, String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(g, p, _, _)| *g == r.group && *p == r.policy) {
            Some(entry) => {
                entry.2 += r.success;
                entry.3 += 1;
            }
            None => out.push((r.group.clone(), r.policy.clone(), r.success, 1)),
        }
    }
    out.into_iter().map(|(g, p, s, n)| (g, p, s / n as f64)).collect()
}

fn print_means(rows: &[SummaryRow]) {
    for (group, policy, success) in mean_success(rows) {
        println!("{group:24} {policy:16} mean success {success:.4}");
    }
}

fn write_run(dir: &Path, name: &str, result: &EpisodeResult, switches: bool) -> Result<()> {
    fs::write(dir.join(format!("{name}.csv")), result.metrics_csv())?;
    if switches {
        fs::write(dir.join(format!("{name}_switches.csv")), result.switch_csv())?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Compare(args) => {
            let mut plan = Plan::from_common(&args.common);
            plan.policies = args.policy;
            let plan = plan.with_config(&args.common.config)?;
            compare(&plan).map(|_| ())
        }
        Command::Train(args) => {
            let mut plan = Plan::from_common(&args.common);
            plan.resume = args.resume;
            let hp = &mut plan.hyperparams;
            hp.episodes = args.common.episodes;
            if let Some(v) = args.gradient_steps {
                hp.gradient_steps = v;
            }
            if let Some(v) = args.batch_size {
                hp.batch_size = v;
            }
            if let Some(v) = args.learning_rate {
                hp.learning_rate = v;
            }
            if let Some(v) = args.gamma {
                hp.gamma = v;
            }
            if let Some(v) = args.train_seed {
                hp.seed = v;
            }
            if plan.early_stop.is_none() {
                plan.early_stop = Some(DEFAULT_EARLY_STOP);
            }
            let plan = plan.with_config(&args.common.config)?;
            train(&plan).map(|_| ())
        }
        Command::Eval(args) => {
            let mut plan = Plan::from_common(&args.common);
            plan.agent = args.agent;
            plan.policies = args.policy;
            let plan = plan.with_config(&args.common.config)?;
            eval(&plan).map(|_| ())
        }
    }
}

/// Runs every selected static policy on every run group and seed.
pub fn compare(plan: &Plan) -> Result<Vec<SummaryRow>> {
    let topology = plan.topology()?;
    let catalog = plan.catalog()?;
    let mut policies = plan.policy_kinds()?;
    if policies.is_empty() {
        policies = PolicyKind::ALL.to_vec();
    }
    fs::create_dir_all(&plan.out)?;
    let mut rows = Vec::new();
    for (group, schedule) in plan.workloads() {
        for &policy in &policies {
            for seed in plan.seeds() {
                let config = plan.episode_config(&topology, &catalog, &schedule, seed, plan.early_stop)?;
                let result = run_episode(&config, &mut policy.clone())?;
                write_run(&plan.out, &format!("{group}_{policy}_seed{seed}"), &result, false)?;
                rows.push(SummaryRow::new(&group, policy.name(), seed, &result));
            }
        }
    }
    write_summary(&plan.out.join("summary.csv"), &rows)?;
    print_means(&rows);
    Ok(rows)
}

/// Trains on a pool made of every run group; writes `agent.json` and `learning_curve.csv`.
pub fn train(plan: &Plan) -> Result<Checkpoint> {
    let topology = plan.topology()?;
    let catalog = plan.catalog()?;
    let configs = plan
        .workloads()
        .iter()
        .map(|(_, schedule)| plan.episode_config(&topology, &catalog, schedule, 0, plan.early_stop))
        .collect::<Result<Vec<_>>>()?;
    let partition = configs[0].partition.clone();
    let mut env = AsetEnv::new(configs, plan.reward)?;
    let (channels, height, width) = env.input_shape();

    let mut trainer = match &plan.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let net = ck.network()?;
            let s = net.shape();
            if (s.channels, s.height, s.width) != (channels, height, width) {
                bail!("checkpoint does not match the topology's state shape");
            }
            let mut hp = plan.hyperparams.clone();
            hp.episodes += ck.episodes;
            Trainer::resume(hp, net, ck.optimizer, ck.episodes)?
        }
        None => {
            let shape = NetShape::for_state(width, channels, height, env.num_actions());
            let net = QNetwork::new(shape, &mut ChaCha8Rng::seed_from_u64(plan.hyperparams.seed))?;
            Trainer::new(plan.hyperparams.clone(), net)?
        }
    };

    fs::create_dir_all(&plan.out)?;
    let curve_path = plan.out.join("learning_curve.csv");
    let mut rows = Vec::new();
    while trainer.episode < trainer.hp.episodes {
        let row = trainer.episode(&mut env)?;
        if row.episode % 10 == 0 || trainer.episode == trainer.hp.episodes {
            println!(
                "episode {:4} return {:8.4} success {:.4} epsilon {:.3}",
                row.episode,
                row.ret,
                row.mean_success.unwrap_or(f64::NAN),
                row.epsilon
            );
        }
        rows.push(row);
    }
    let mut text = Vec::new();
    write_curve_csv(&mut text, &rows)?;
    if plan.resume.is_some() && curve_path.is_file() {
        // Continue the existing curve without repeating its header.
        let body: String = String::from_utf8(text)?.lines().skip(1).map(|l| format!("{l}\n")).collect();
        fs::OpenOptions::new().append(true).open(&curve_path)?.write_all(body.as_bytes())?;
    } else {
        fs::write(&curve_path, text)?;
    }
    let ck = Checkpoint::new(&trainer, partition, plan.reward);
    ck.save(&plan.out.join("agent.json"))?;
    Ok(ck)
}

/// Greedy agent runs (with switch logs) plus any requested static policies.
pub fn eval(plan: &Plan) -> Result<Vec<SummaryRow>> {
    let Some(path) = &plan.agent else {
        bail!("eval needs --agent <checkpoint>");
    };
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let net = ck.network()?;
    let topology = plan.topology()?;
    let catalog = plan.catalog()?;
    let statics = plan.policy_kinds()?;
    fs::create_dir_all(&plan.out)?;
    let mut rows = Vec::new();
    for (group, schedule) in plan.workloads() {
        for seed in plan.seeds() {
            let mut config = plan.episode_config(&topology, &catalog, &schedule, seed, plan.early_stop)?;
            config.partition = ck.partition.clone();
            let mut agent = AgentPolicy::new(net.clone(), &config)?;
            let result = run_episode(&config, &mut agent)?;
            write_run(&plan.out, &format!("{group}_aset_seed{seed}"), &result, true)?;
            rows.push(SummaryRow::new(&group, "aset", seed, &result));
            for &policy in &statics {
                let result = run_episode(&config, &mut policy.clone())?;
                write_run(&plan.out, &format!("{group}_{policy}_seed{seed}"), &result, false)?;
                rows.push(SummaryRow::new(&group, policy.name(), seed, &result));
            }
        }
    }
    write_summary(&plan.out.join("summary.csv"), &rows)?;
    print_means(&rows);
    Ok(rows)
}
