//! Fleet simulation: run the per-device pipeline on every device of a
//! partitioned corpus, for each method, pruning ratio and seed, and aggregate
//! the results with data-volume weights `p_k = N_k / sum_j N_j`.
//!
//! All randomness of a device run derives from `(seed, device_id)` (plus the
//! method for batch order), so results do not depend on execution order or
//! worker count. Importance and random pruning share the partition and the
//! fresh initialization; importance training continues from the warm-up
//! parameters, the baselines start from the fresh initialization.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::cost::{self, CostReport, CostWeights, DeviceProfile, Workload};
use crate::data::{self, Dataset, DeviceDataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::model::{flops_per_sample, ModelParams, Pass};
use crate::pruner::{self, ImportanceScores, SelectionMask, WarmupConfig};
use crate::rng::{self, stream};
use crate::trainer::{self, TraceRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Importance,
    Random,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Importance => "importance",
            Method::Random => "random",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Method::Full => 1,
            Method::Importance => 2,
            Method::Random => 3,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Method::Full),
            "importance" => Ok(Method::Importance),
            "random" => Ok(Method::Random),
            other => Err(Error::invalid(
                "method",
                format!("unknown method {other:?}"),
            )),
        }
    }
}

/// Everything one device needs to run any method.
#[derive(Debug, Clone)]
pub struct DevicePlan<'a> {
    pub shard: &'a DeviceDataset,
    pub test: &'a Dataset,
    /// Fresh initialization shared by all methods.
    pub init: &'a ModelParams,
    pub warmup: WarmupConfig,
    /// Its seed is replaced per method.
    pub train: TrainConfig,
    pub profile: DeviceProfile,
    /// Seed of the run; sub-seeds derive from it and the device id.
    pub seed: u64,
}

impl DevicePlan<'_> {
    fn device_seed(&self) -> u64 {
        rng::derive(self.seed, &[self.shard.device_id as u64])
    }

    fn train_seed(&self, method: Method) -> u64 {
        rng::derive(self.seed, &[self.shard.device_id as u64, method.tag()])
    }

    /// Phase 1 on the full shard. Scores must cover every sample.
    pub fn score(&self) -> Result<ImportanceScores> {
        let scores = pruner::warmup_score(self.shard, self.init, &self.warmup)?;
        pruner::normalized_scores(&scores)?;
        Ok(scores)
    }
}

#[derive(Debug, Clone)]
pub struct DeviceResult {
    pub device_id: usize,
    pub method: Method,
    pub rho: f64,
    /// Local shard size `N_k`.
    pub shard_size: usize,
    /// Training-set size `M_k`.
    pub retained: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub cost: CostReport,
    pub trace: Vec<TraceRecord>,
    pub warmup_time: Duration,
    pub train_time: Duration,
}

/// Runs one method on one device. `rho` is ignored by [`Method::Full`].
pub fn run_device(plan: &DevicePlan<'_>, method: Method, rho: f64) -> Result<DeviceResult> {
    let scores = match method {
        Method::Importance => Some(plan.score()?),
        _ => None,
    };
    run_device_with(plan, method, rho, scores.as_ref())
}

fn run_device_with(
    plan: &DevicePlan<'_>,
    method: Method,
    rho: f64,
    scores: Option<&ImportanceScores>,
) -> Result<DeviceResult> {
    let shard = plan.shard;
    let n = shard.len();
    if n == 0 || plan.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let layout = plan.init.layout();
    let c = flops_per_sample(layout, Pass::ForwardBackward);

    let (mask, start, score_work, select_flops, warmup_time) = match method {
        Method::Full => (
            SelectionMask::all(n),
            plan.init,
            Workload::default(),
            0,
            Duration::ZERO,
        ),
        Method::Random => {
            let mask = pruner::select_random(
                n,
                rho,
                rng::derive(plan.device_seed(), &[stream::RANDOM_MASK]),
            )?;
            (mask, plan.init, Workload::default(), 0, Duration::ZERO)
        }
        Method::Importance => {
            let scores = scores
                .ok_or_else(|| Error::invalid("device run", "importance needs warm-up scores"))?;
            let alpha = pruner::normalized_scores(scores)?;
            let mask = pruner::select_top_m(&alpha, rho)?;
            let work =
                cost::scoring_cost(scores.iterations, c, plan.warmup.batch_size, &plan.profile);
            (
                mask,
                &scores.warm_params,
                work,
                cost::selection_flops(n),
                scores.wall_time,
            )
        }
    };

    let subset = pruner::apply_mask(shard, &mask)?;
    let cfg = TrainConfig {
        seed: plan.train_seed(method),
        ..plan.train
    };
    let trace = trainer::train(start, &subset, &cfg, plan.test)?;
    let train_work = cost::training_cost(trace.total_steps, c, cfg.batch_size, &plan.profile);
    let storage = mask.count() as u64 * plan.profile.per_sample_bytes as u64;
    let last = *trace.last();

    Ok(DeviceResult {
        device_id: shard.device_id,
        method,
        rho: if method == Method::Full { 1.0 } else { rho },
        shard_size: n,
        retained: mask.count(),
        train_loss: last.train_loss,
        train_acc: last.train_acc,
        test_loss: last.test_loss,
        test_acc: last.test_acc,
        cost: CostReport::new(
            train_work,
            score_work,
            select_flops,
            storage,
            trace.total_steps,
        ),
        trace: trace.records,
        warmup_time,
        train_time: trace.update_time,
    })
}

#[derive(Debug, Clone)]
pub struct FleetResult {
    /// Requested ratio; the row key even for [`Method::Full`].
    pub rho: f64,
    pub method: Method,
    pub seed: u64,
    /// Ordered by device id.
    pub devices: Vec<DeviceResult>,
    /// `p_k`, aligned with `devices`.
    pub weights: Vec<f64>,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Component-wise sum over devices.
    pub cost: CostReport,
    pub aggregate_cost: f64,
}

impl FleetResult {
    pub fn new(
        rho: f64,
        method: Method,
        seed: u64,
        mut devices: Vec<DeviceResult>,
        weights: &CostWeights,
    ) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::invalid("fleet", "no device results"));
        }
        devices.sort_by_key(|d| d.device_id);
        let total: usize = devices.iter().map(|d| d.shard_size).sum();
        let p: Vec<f64> = devices
            .iter()
            .map(|d| d.shard_size as f64 / total as f64)
            .collect();
        let weighted = |f: fn(&DeviceResult) -> f64| -> f64 {
            devices.iter().zip(&p).map(|(d, pk)| pk * f(d)).sum()
        };
        let reports: Vec<CostReport> = devices.iter().map(|d| d.cost).collect();
        let cost = reports
            .iter()
            .fold(CostReport::default(), |acc, r| CostReport {
                train_flops: acc.train_flops + r.train_flops,
                score_flops: acc.score_flops + r.score_flops,
                select_flops: acc.select_flops + r.select_flops,
                latency_s: acc.latency_s + r.latency_s,
                energy_j: acc.energy_j + r.energy_j,
                score_latency_s: acc.score_latency_s + r.score_latency_s,
                score_energy_j: acc.score_energy_j + r.score_energy_j,
                storage_bytes: acc.storage_bytes + r.storage_bytes,
                steps: acc.steps + r.steps,
            });
        Ok(Self {
            rho,
            method,
            seed,
            train_loss: weighted(|d| d.train_loss),
            train_acc: weighted(|d| d.train_acc),
            test_loss: weighted(|d| d.test_loss),
            test_acc: weighted(|d| d.test_acc),
            aggregate_cost: cost::aggregate_cost(weights, &reports),
            weights: p,
            devices,
            cost,
        })
    }

    pub fn warmup_time(&self) -> Duration {
        self.devices.iter().map(|d| d.warmup_time).sum()
    }

    pub fn train_time(&self) -> Duration {
        self.devices.iter().map(|d| d.train_time).sum()
    }
}

/// Fleet test accuracy of importance pruning minus that of random pruning.
pub fn accuracy_gap(importance: &FleetResult, random: &FleetResult) -> Result<f64> {
    if importance.method != Method::Importance || random.method != Method::Random {
        return Err(Error::Comparison(format!(
            "expected importance vs random, got {} vs {}",
            importance.method, random.method
        )));
    }
    if importance.rho != random.rho || importance.seed != random.seed {
        return Err(Error::Comparison(format!(
            "rho/seed differ: ({}, {}) vs ({}, {})",
            importance.rho, importance.seed, random.rho, random.seed
        )));
    }
    let sizes = |f: &FleetResult| -> Vec<(usize, usize)> {
        f.devices
            .iter()
            .map(|d| (d.device_id, d.shard_size))
            .collect()
    };
    if sizes(importance) != sizes(random) {
        return Err(Error::Comparison("device shards differ".into()));
    }
    Ok(importance.test_acc - random.test_acc)
}

/// Held-out IID test split and device shards for one seed.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub seed: u64,
    pub test: Dataset,
    pub shards: Vec<DeviceDataset>,
    pub inits: Vec<ModelParams>,
}

pub fn setup_seed(cfg: &ExperimentConfig, corpus: &Dataset, seed: u64) -> Result<SeedSetup> {
    let n = corpus.len();
    let k = cfg.partition.num_devices;
    let n_test = ((cfg.test_fraction * n as f64).round() as usize).max(1);
    if n_test >= n || n - n_test < k {
        return Err(Error::InfeasiblePartition {
            samples: n.saturating_sub(n_test),
            devices: k,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed, &[stream::TEST_SPLIT]));
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let test = corpus.subset(&test_idx);
    let pool = corpus.subset(&train_idx);

    let spec = PartitionSpec {
        num_devices: k,
        scheme: cfg.partition.scheme,
        seed: rng::derive(seed, &[stream::PARTITION]),
    };
    let shards = data::partition(&pool, &spec)?;
    let layout = cfg.layout_for(corpus)?;
    let inits = (0..k)
        .map(|dev| ModelParams::init(layout, rng::derive(seed, &[dev as u64])))
        .collect();
    Ok(SeedSetup {
        seed,
        test,
        shards,
        inits,
    })
}

fn plan_for<'a>(
    cfg: &ExperimentConfig,
    setup: &'a SeedSetup,
    dev: usize,
) -> Result<DevicePlan<'a>> {
    let shard = &setup.shards[dev];
    let iterations = cfg.warmup.iterations_for(shard.len());
    let warmup = WarmupConfig {
        iterations,
        batch_size: cfg.warmup.batch_size(),
        schedule: cfg.warmup.schedule(),
        seed: rng::derive(setup.seed, &[dev as u64]),
    };
    let profile = cfg
        .profile
        .for_device(dev)
        .resolve(shard.per_sample_bytes());
    profile.validate()?;
    Ok(DevicePlan {
        shard,
        test: &setup.test,
        init: &setup.inits[dev],
        warmup,
        train: cfg.train.to_config(0),
        profile,
        seed: setup.seed,
    })
}

/// A device result keyed by (rho index, method).
type GridEntry = ((usize, Method), DeviceResult);

/// All (rho, method) runs of one device; warm-up is shared across ratios and
/// the full-data run is computed once.
fn run_device_grid(
    plan: &DevicePlan<'_>,
    rhos: &[f64],
    methods: &[Method],
) -> Result<Vec<GridEntry>> {
    let scores = if methods.contains(&Method::Importance) {
        Some(plan.score()?)
    } else {
        None
    };
    let full = if methods.contains(&Method::Full) {
        Some(run_device_with(plan, Method::Full, 1.0, None)?)
    } else {
        None
    };
    let mut out = Vec::new();
    for (ri, &rho) in rhos.iter().enumerate() {
        for &method in methods {
            let result = match method {
                Method::Full => full.clone().expect("computed above"),
                _ => run_device_with(plan, method, rho, scores.as_ref())?,
            };
            out.push(((ri, method), result));
        }
    }
    Ok(out)
}

/// One [`FleetResult`] per (rho, method, seed), sorted by that key.
///
/// Device runs execute on up to `workers` threads; results are identical for
/// any worker count.
pub fn sweep_rho(
    cfg: &ExperimentConfig,
    corpus: &Dataset,
    rhos: &[f64],
    methods: &[Method],
    workers: usize,
) -> Result<Vec<FleetResult>> {
    if rhos.is_empty() {
        return Err(Error::invalid("sweep", "no pruning ratios given"));
    }
    if let Some(&rho) = rhos.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::invalid(
            "sweep",
            format!("rho {rho} is outside (0, 1]"),
        ));
    }
    if methods.is_empty() {
        return Err(Error::invalid("sweep", "no methods given"));
    }
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();

    let setups: Vec<SeedSetup> = cfg
        .seeds
        .iter()
        .map(|&s| setup_seed(cfg, corpus, s))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = setups
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.shards.len()).map(move |dev| (si, dev)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))?;
    let outputs: Vec<Result<Vec<GridEntry>>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(si, dev)| {
                let run = || -> Result<_> {
                    let plan = plan_for(cfg, &setups[si], dev)?;
                    log::debug!(
                        "seed {} device {dev}: {} samples",
                        setups[si].seed,
                        plan.shard.len()
                    );
                    run_device_grid(&plan, rhos, &methods)
                };
                run().map_err(|e| Error::Device {
                    device: dev,
                    source: Box::new(e),
                })
            })
            .collect()
    });

    let mut grouped: BTreeMap<(usize, Method, usize), Vec<DeviceResult>> = BTreeMap::new();
    for (&(si, _), out) in jobs.iter().zip(outputs) {
        for ((ri, method), result) in out? {
            grouped.entry((ri, method, si)).or_default().push(result);
        }
    }
    let mut results = grouped
        .into_iter()
        .map(|((ri, method, si), devices)| {
            FleetResult::new(rhos[ri], method, setups[si].seed, devices, &cfg.weights)
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| {
        a.rho
            .total_cmp(&b.rho)
            .then(a.method.cmp(&b.method))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(results)
}

/// The configured ratio and methods.
pub fn run_fleet(
    cfg: &ExperimentConfig,
    corpus: &Dataset,
    workers: usize,
) -> Result<Vec<FleetResult>> {
    sweep_rho(cfg, corpus, &[cfg.pruning.rho], &cfg.methods, workers)
}

pub const SWEEP_HEADER: &str = "rho,method,seed,device,fleet_train_acc,fleet_test_acc,fleet_test_loss,latency_s,energy_J,storage_bytes,score_flops,train_flops,aggregate_cost";

/// Rows of `sweep.csv`: per (rho, method, seed) one `fleet` row followed by
/// one row per device. Device rows carry that device's own metrics.
pub fn sweep_csv(results: &[FleetResult], weights: &CostWeights) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},fleet,{},{},{},{},{},{},{},{},{}",
            r.rho,
            r.method,
            r.seed,
            r.train_acc,
            r.test_acc,
            r.test_loss,
            r.cost.latency_s,
            r.cost.energy_j,
            r.cost.storage_bytes,
            r.cost.score_flops,
            r.cost.train_flops,
            r.aggregate_cost
        );
        for d in &r.devices {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.rho,
                r.method,
                r.seed,
                d.device_id,
                d.train_acc,
                d.test_acc,
                d.test_loss,
                d.cost.latency_s,
                d.cost.energy_j,
                d.cost.storage_bytes,
                d.cost.score_flops,
                d.cost.train_flops,
                cost::aggregate_cost(weights, &[d.cost])
            );
        }
    }
    out
}

/// `(rho, seed, gap)` for every (rho, seed) with both importance and random
/// results, in sweep order.
pub fn gaps(results: &[FleetResult]) -> Result<Vec<(f64, u64, f64)>> {
    let mut out = Vec::new();
    for imp in results.iter().filter(|r| r.method == Method::Importance) {
        if let Some(rand) = results
            .iter()
            .find(|r| r.method == Method::Random && r.rho == imp.rho && r.seed == imp.seed)
        {
            out.push((imp.rho, imp.seed, accuracy_gap(imp, rand)?));
        }
    }
    Ok(out)
}

pub fn gap_csv(results: &[FleetResult]) -> Result<String> {
    let mut out = String::from("rho,seed,accuracy_gap\n");
    for (rho, seed, gap) in gaps(results)? {
        let _ = writeln!(out, "{rho},{seed},{gap}");
    }
    Ok(out)
}

/// Writes `trace_<device>_<method>_<seed>.csv` for every device run.
pub fn write_traces(results: &[FleetResult], dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for r in results {
        for d in &r.devices {
            let name = format!("trace_{}_{}_{}.csv", d.device_id, r.method, r.seed);
            let path = dir.join(&name);
            std::fs::write(&path, trainer::trace_csv(&d.trace)).map_err(|e| Error::io(&path, e))?;
            written.push(name);
        }
    }
    Ok(written)
}
