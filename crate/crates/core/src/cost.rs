//! Analytic resource accounting.
//!
//! Nothing here is measured: latency is modeled FLOPs divided by device
//! throughput, energy is constant power times latency, and storage is the
//! retained sample count times the per-sample footprint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Charged for building the selection: a flat 5 FLOP-equivalents per sample.
pub const SELECT_FLOPS_PER_SAMPLE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    /// FLOPs per second.
    pub throughput: f64,
    /// Watts.
    pub power: f64,
    /// Bytes per stored sample.
    pub per_sample_bytes: u32,
}

impl DeviceProfile {
    pub fn new(throughput: f64, power: f64, per_sample_bytes: u32) -> Result<Self> {
        let p = Self {
            throughput,
            power,
            per_sample_bytes,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.throughput > 0.0 && self.throughput.is_finite()) {
            return Err(Error::invalid(
                "device profile",
                "throughput must be positive",
            ));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::invalid("device profile", "power must be positive"));
        }
        if self.per_sample_bytes == 0 {
            return Err(Error::invalid(
                "device profile",
                "per_sample_bytes must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub lambda_tau: f64,
    pub lambda_e: f64,
    pub lambda_s: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_tau: 1.0,
            lambda_e: 1.0,
            lambda_s: 0.0,
        }
    }
}

/// FLOPs, latency and energy of a run of SGD iterations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Workload {
    pub flops: u64,
    pub latency_s: f64,
    pub energy_j: f64,
}

impl Workload {
    fn of(flops: u64, profile: &DeviceProfile) -> Self {
        let latency_s = flops as f64 / profile.throughput;
        Self {
            flops,
            latency_s,
            energy_j: profile.power * latency_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CostReport {
    pub train_flops: u64,
    pub score_flops: u64,
    pub select_flops: u64,
    /// Training latency, `train_flops / throughput`.
    pub latency_s: f64,
    /// Training energy, `power * latency_s`.
    pub energy_j: f64,
    pub score_latency_s: f64,
    pub score_energy_j: f64,
    pub storage_bytes: u64,
    pub steps: usize,
}

impl CostReport {
    pub fn new(
        train: Workload,
        score: Workload,
        select_flops: u64,
        storage_bytes: u64,
        steps: usize,
    ) -> Self {
        Self {
            train_flops: train.flops,
            score_flops: score.flops,
            select_flops,
            latency_s: train.latency_s,
            energy_j: train.energy_j,
            score_latency_s: score.latency_s,
            score_energy_j: score.energy_j,
            storage_bytes,
            steps,
        }
    }

    /// Scoring plus selection plus training.
    pub fn total_flops(&self) -> u64 {
        self.score_flops + self.select_flops + self.train_flops
    }
}

/// `c * b`.
pub fn iter_flops(per_sample: u64, batch_size: usize) -> u64 {
    per_sample * batch_size as u64
}

pub fn training_cost(
    steps: usize,
    per_sample: u64,
    batch_size: usize,
    profile: &DeviceProfile,
) -> Workload {
    Workload::of(steps as u64 * iter_flops(per_sample, batch_size), profile)
}

/// Warm-up cost `T0 * c * b`.
pub fn scoring_cost(
    iterations: usize,
    per_sample: u64,
    batch_size: usize,
    profile: &DeviceProfile,
) -> Workload {
    training_cost(iterations, per_sample, batch_size, profile)
}

pub fn selection_flops(n: usize) -> u64 {
    SELECT_FLOPS_PER_SAMPLE * n as u64
}

/// `lambda_tau * sum(latency) + lambda_e * sum(energy) + lambda_s * sum(storage)`.
pub fn aggregate_cost(weights: &CostWeights, per_device: &[CostReport]) -> f64 {
    let tau: f64 = per_device.iter().map(|r| r.latency_s).sum();
    let energy: f64 = per_device.iter().map(|r| r.energy_j).sum();
    let storage: u64 = per_device.iter().map(|r| r.storage_bytes).sum();
    weights.lambda_tau * tau + weights.lambda_e * energy + weights.lambda_s * storage as f64
}

/// Training FLOPs of `pruned` relative to `full`.
pub fn cost_reduction_ratio(pruned: &CostReport, full: &CostReport) -> Result<f64> {
    if full.train_flops == 0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(pruned.train_flops as f64 / full.train_flops as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::planned_steps;

    fn profile(f: f64, p: f64) -> DeviceProfile {
        DeviceProfile::new(f, p, 162).unwrap()
    }

    fn report(train: Workload, storage: u64) -> CostReport {
        CostReport::new(train, Workload::default(), 0, storage, 0)
    }

    #[test]
    fn iteration_flops() {
        assert_eq!(iter_flops(2688, 32), 86_016);
        assert_eq!(iter_flops(2688, 1), 2688);
        assert_eq!(iter_flops(2688, 64), 2 * iter_flops(2688, 32));
    }

    #[test]
    fn training_latency_and_energy() {
        let w = training_cost(100, 1000, 32, &profile(1e6, 2.0));
        assert_eq!(w.flops, 3_200_000);
        assert_eq!(w.latency_s, 3.2);
        assert_eq!(w.energy_j, 6.4);
        assert_eq!(
            training_cost(0, 1000, 32, &profile(1e6, 2.0)),
            Workload::default()
        );
        let slow = training_cost(100, 1000, 32, &profile(5e5, 2.0));
        assert_eq!(slow.latency_s, 2.0 * w.latency_s);
        assert_eq!(slow.energy_j, 2.0 * w.energy_j);
    }

    #[test]
    fn scoring_workload() {
        let p = profile(1e6, 2.0);
        assert_eq!(scoring_cost(10, 1000, 32, &p).flops, 320_000);
        assert_eq!(scoring_cost(0, 1000, 32, &p).flops, 0);
        // One warm-up epoch against E full epochs: T0 * b / (E * N).
        let (n, b, e) = (3200, 32, 30);
        let score = scoring_cost(n / b, 1000, b, &p).flops as f64;
        let train = training_cost(e * n / b, 1000, b, &p).flops as f64;
        assert_eq!(score / train, (n as f64) / (e * n) as f64);
    }

    #[test]
    fn weighted_aggregate() {
        let p = profile(1.0, 0.5);
        let a = report(training_cost(4, 1, 1, &p), 0);
        let b = report(training_cost(6, 1, 1, &p), 0);
        let w = CostWeights {
            lambda_tau: 1.0,
            lambda_e: 1.0,
            lambda_s: 0.0,
        };
        assert_eq!(aggregate_cost(&w, &[a, b]), 15.0);
        let zero = CostWeights {
            lambda_tau: 0.0,
            lambda_e: 0.0,
            lambda_s: 0.0,
        };
        assert_eq!(aggregate_cost(&zero, &[a, b]), 0.0);
        let storage_only = CostWeights {
            lambda_tau: 0.0,
            lambda_e: 0.0,
            lambda_s: 1.0,
        };
        assert_eq!(
            aggregate_cost(&storage_only, &[report(Workload::default(), 324_000)]),
            324_000.0
        );
    }

    #[test]
    fn reduction_ratio() {
        let p = profile(1e9, 2.0);
        let c = 2688;
        let cost = |m: usize, b: usize, e: usize| {
            report(training_cost(planned_steps(e, m, b), c, b, &p), 0)
        };
        let full = cost(1000, 10, 2);
        assert_eq!(cost_reduction_ratio(&cost(500, 10, 2), &full).unwrap(), 0.5);
        assert_eq!(cost_reduction_ratio(&full, &full).unwrap(), 1.0);
        let ratio = cost_reduction_ratio(&cost(300, 64, 5), &cost(1000, 64, 5)).unwrap();
        assert_eq!(ratio, 0.3125);
        assert!(matches!(
            cost_reduction_ratio(&full, &CostReport::default()),
            Err(Error::UndefinedRatio)
        ));
    }

    #[test]
    fn selection_is_linear() {
        assert_eq!(selection_flops(0), 0);
        assert_eq!(selection_flops(2000), 10_000);
    }
}
