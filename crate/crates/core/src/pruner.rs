//! Loss-based importance scoring and subset selection.
//!
//! A device first runs a short SGD warm-up on its full shard. Every time a
//! sample appears in a mini-batch its loss at the pre-update parameters is
//! added to a running sum; the importance score is the mean of those losses.
//! Selection then keeps the `floor(rho * N)` highest-scored samples, with ties
//! going to the lower local index.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::index;

use crate::data::DeviceDataset;
use crate::error::{Error, Result};
use crate::model::{self, Gradient, ModelParams, Scratch};
use crate::rng;
use crate::trainer::{BatchStream, ScheduleSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupConfig {
    /// Warm-up iterations `T0`.
    pub iterations: usize,
    pub batch_size: usize,
    /// Its horizon is `iterations`.
    pub schedule: ScheduleSpec,
    pub seed: u64,
}

impl WarmupConfig {
    /// Iterations spanning `epochs` passes over `n` samples.
    pub fn epoch_iterations(epochs: usize, n: usize, batch_size: usize) -> usize {
        epochs * n.div_ceil(batch_size)
    }
}

#[derive(Debug, Clone)]
pub struct ImportanceScores {
    pub loss_sum: Vec<f64>,
    pub observe_count: Vec<u32>,
    /// Parameters after the last warm-up update.
    pub warm_params: ModelParams,
    pub iterations: usize,
    pub wall_time: Duration,
}

/// Runs the warm-up and accumulates per-sample losses.
///
/// Mini-batches come from epoch-wise shuffles of the full shard, so after
/// `k` whole epochs every sample has been observed exactly `k` times. Losses
/// are the ones computed by the gradient's own forward pass.
pub fn warmup_score(
    shard: &DeviceDataset,
    init: &ModelParams,
    cfg: &WarmupConfig,
) -> Result<ImportanceScores> {
    if cfg.iterations == 0 {
        return Err(Error::invalid("warm-up config", "T0 must be at least 1"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid(
            "warm-up config",
            "batch_size must be at least 1",
        ));
    }
    if shard.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size > shard.len() {
        return Err(Error::BatchTooLarge {
            batch_size: cfg.batch_size,
            shard_size: shard.len(),
        });
    }
    let schedule = cfg.schedule.with_horizon(cfg.iterations)?;

    let started = Instant::now();
    let n = shard.len();
    let mut loss_sum = vec![0.0; n];
    let mut observe_count = vec![0u32; n];
    let mut params = init.clone();
    let mut grad = Gradient::zeros(params.layout());
    let mut scratch = Scratch::new(params.layout());
    let mut batches = BatchStream::new(
        n,
        cfg.batch_size,
        rng::rng(cfg.seed, &[rng::stream::WARMUP]),
    );

    for t in 0..cfg.iterations {
        let lr = schedule.lr_at(t)?;
        let batch = batches.next_batch();
        model::batch_grad_into(
            &params,
            batch.iter().map(|&i| shard.sample(i)),
            &mut grad,
            &mut scratch,
            |pos, loss| {
                loss_sum[batch[pos]] += loss;
                observe_count[batch[pos]] += 1;
            },
        )?;
        for (w, g) in params.weights_mut().iter_mut().zip(grad.as_slice()) {
            *w -= lr * g;
        }
    }

    Ok(ImportanceScores {
        loss_sum,
        observe_count,
        warm_params: params,
        iterations: cfg.iterations,
        wall_time: started.elapsed(),
    })
}

/// Mean observed loss per sample.
pub fn normalized_scores(scores: &ImportanceScores) -> Result<Vec<f64>> {
    scores
        .loss_sum
        .iter()
        .zip(&scores.observe_count)
        .enumerate()
        .map(|(index, (&sum, &count))| {
            if count == 0 {
                Err(Error::UnobservedSample { index })
            } else {
                Ok(sum / count as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    retained: Vec<bool>,
    count: usize,
}

impl SelectionMask {
    pub fn all(n: usize) -> Self {
        Self {
            retained: vec![true; n],
            count: n,
        }
    }

    fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut retained = vec![false; n];
        let mut count = 0;
        for i in indices {
            if !retained[i] {
                retained[i] = true;
                count += 1;
            }
        }
        Self { retained, count }
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    /// Number of retained samples, `M`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn retained(&self) -> &[bool] {
        &self.retained
    }

    pub fn is_retained(&self, i: usize) -> bool {
        self.retained[i]
    }

    /// Retained indices in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.retained.len())
            .filter(|&i| self.retained[i])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruningMethod {
    Importance,
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruningConfig {
    pub rho: f64,
    pub method: PruningMethod,
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(
            "pruning ratio",
            format!("{rho} is outside (0, 1]"),
        ));
    }
    Ok(())
}

/// `floor(rho * n)`. A relative slack of 1e-12 absorbs decimal rounding, so
/// that e.g. `rho = 0.29, n = 100` keeps 29 samples rather than 28.
pub fn retained_count(rho: f64, n: usize) -> usize {
    let exact = rho * n as f64;
    ((exact + exact * 1e-12).floor() as usize).min(n)
}

fn target_count(rho: f64, n: usize) -> Result<usize> {
    check_rho(rho)?;
    let m = retained_count(rho, n);
    if m == 0 {
        return Err(Error::EmptySelection { rho, n });
    }
    Ok(m)
}

/// Keeps the `floor(rho * N)` samples ranked first by (score descending,
/// index ascending), using expected-linear-time partial selection.
pub fn select_top_m(scores: &[f64], rho: f64) -> Result<SelectionMask> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid("scores", format!("score {i} is not finite")));
    }
    let m = target_count(rho, n)?;
    if m == n {
        return Ok(SelectionMask::all(n));
    }
    let rank = |&a: &usize, &b: &usize| -> Ordering {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.select_nth_unstable_by(m - 1, rank);
    Ok(SelectionMask::from_indices(n, order[..m].iter().copied()))
}

/// Keeps `floor(rho * n)` indices drawn uniformly without replacement.
pub fn select_random(n: usize, rho: f64, seed: u64) -> Result<SelectionMask> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let m = target_count(rho, n)?;
    if m == n {
        return Ok(SelectionMask::all(n));
    }
    let mut rng = rng::rng(seed, &[rng::stream::RANDOM_MASK]);
    let picked = index::sample(&mut rng, n, m);
    Ok(SelectionMask::from_indices(n, picked))
}

/// Retained samples in their original order.
pub fn apply_mask(shard: &DeviceDataset, mask: &SelectionMask) -> Result<DeviceDataset> {
    if mask.len() != shard.len() {
        return Err(Error::MaskLength {
            mask: mask.len(),
            shard: shard.len(),
        });
    }
    Ok(DeviceDataset::new(
        shard.device_id,
        shard.subset(&mask.indices()),
    ))
}

/// Audit table `index,score,count,retained`. Unobserved samples have an
/// empty score.
pub fn scores_csv(scores: &ImportanceScores, mask: &SelectionMask) -> Result<String> {
    if mask.len() != scores.loss_sum.len() {
        return Err(Error::MaskLength {
            mask: mask.len(),
            shard: scores.loss_sum.len(),
        });
    }
    let mut out = String::from("index,score,count,retained\n");
    for (i, (&sum, &count)) in scores
        .loss_sum
        .iter()
        .zip(&scores.observe_count)
        .enumerate()
    {
        let score = if count > 0 {
            (sum / count as f64).to_string()
        } else {
            String::new()
        };
        let _ = writeln!(out, "{i},{score},{count},{}", u8::from(mask.is_retained(i)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::model::ModelLayout;

    fn shard(n: usize, c: usize) -> DeviceDataset {
        let features = (0..n * 2).map(|i| (i % 7) as f64 * 0.3 - 1.0).collect();
        let labels = (0..n).map(|i| i % c).collect();
        DeviceDataset::new(0, Dataset::new(2, c, features, labels).unwrap())
    }

    #[test]
    fn frozen_model_scores_are_uniform_loss() {
        let s = shard(40, 10);
        let init = ModelParams::zeros(ModelLayout::new(2, 4, 10).unwrap());
        let cfg = WarmupConfig {
            iterations: WarmupConfig::epoch_iterations(1, 40, 8),
            batch_size: 8,
            schedule: ScheduleSpec::constant(0.0),
            seed: 3,
        };
        let scores = warmup_score(&s, &init, &cfg).unwrap();
        assert!(scores.observe_count.iter().all(|&c| c == 1));
        let alpha = normalized_scores(&scores).unwrap();
        assert!(alpha.iter().all(|a| (a - 10f64.ln()).abs() < 1e-12));
        assert_eq!(scores.warm_params, init);
    }

    #[test]
    fn whole_epochs_give_equal_counts() {
        let s = shard(30, 3);
        let init = ModelParams::init(ModelLayout::new(2, 3, 3).unwrap(), 1);
        let cfg = WarmupConfig {
            iterations: 9,
            batch_size: 10,
            schedule: ScheduleSpec::constant(0.1),
            seed: 3,
        };
        let scores = warmup_score(&s, &init, &cfg).unwrap();
        assert!(scores.observe_count.iter().all(|&c| c == 3));
        assert_ne!(scores.warm_params, init);
    }

    #[test]
    fn warmup_errors() {
        let s = shard(5, 2);
        let init = ModelParams::zeros(ModelLayout::new(2, 0, 2).unwrap());
        let mut cfg = WarmupConfig {
            iterations: 1,
            batch_size: 6,
            schedule: ScheduleSpec::constant(0.1),
            seed: 0,
        };
        assert!(matches!(
            warmup_score(&s, &init, &cfg),
            Err(Error::BatchTooLarge {
                batch_size: 6,
                shard_size: 5
            })
        ));
        cfg.batch_size = 2;
        cfg.iterations = 0;
        assert!(warmup_score(&s, &init, &cfg).is_err());
        // One iteration of a 2-sample batch leaves samples unobserved.
        cfg.iterations = 1;
        let scores = warmup_score(&s, &init, &cfg).unwrap();
        assert!(matches!(
            normalized_scores(&scores),
            Err(Error::UnobservedSample { .. })
        ));
    }

    #[test]
    fn normalization() {
        let scores = ImportanceScores {
            loss_sum: vec![2.0, 4.0],
            observe_count: vec![1, 2],
            warm_params: ModelParams::zeros(ModelLayout::new(1, 0, 2).unwrap()),
            iterations: 1,
            wall_time: Duration::ZERO,
        };
        assert_eq!(normalized_scores(&scores).unwrap(), vec![2.0, 2.0]);
        let scores = ImportanceScores {
            observe_count: vec![1, 0],
            loss_sum: vec![2.0, 0.0],
            ..scores
        };
        assert!(matches!(
            normalized_scores(&scores),
            Err(Error::UnobservedSample { index: 1 })
        ));
    }

    #[test]
    fn top_m_examples() {
        let mask = select_top_m(&[0.9, 0.1, 0.5, 0.5, 0.2], 0.4).unwrap();
        assert_eq!(mask.count(), 2);
        assert_eq!(mask.indices(), vec![0, 2]);

        let mask = select_top_m(&[1.0; 10], 0.3).unwrap();
        assert_eq!(mask.indices(), vec![0, 1, 2]);

        let mask = select_top_m(&[0.3, 0.2, 0.1], 1.0).unwrap();
        assert_eq!(mask.count(), 3);

        assert!(matches!(
            select_top_m(&[0.3, 0.2, 0.1], 0.2),
            Err(Error::EmptySelection { .. })
        ));
        assert!(select_top_m(&[0.3, f64::NAN], 0.5).is_err());
        assert!(select_top_m(&[0.3, 0.1], 1.5).is_err());
        assert!(select_top_m(&[0.3, 0.1], 0.0).is_err());
        assert!(select_top_m(&[], 0.5).is_err());
    }

    #[test]
    fn decimal_ratios_round_as_written() {
        assert_eq!(retained_count(0.29, 100), 29);
        assert_eq!(retained_count(0.3, 10), 3);
        assert_eq!(retained_count(0.7, 10), 7);
        assert_eq!(retained_count(0.999, 10), 9);
        assert_eq!(retained_count(1.0, 17), 17);
    }

    #[test]
    fn random_selection() {
        let all = select_random(37, 1.0, 5).unwrap();
        assert_eq!(all.count(), 37);
        let a = select_random(1000, 0.5, 1).unwrap();
        let b = select_random(1000, 0.5, 2).unwrap();
        assert_eq!(a.count(), 500);
        assert_ne!(a, b);
        assert_eq!(a, select_random(1000, 0.5, 1).unwrap());
        assert!(select_random(3, 0.2, 0).is_err());
    }

    #[test]
    fn mask_application() {
        let s = shard(5, 2);
        let mask = select_top_m(&[0.9, 0.1, 0.5, 0.5, 0.2], 0.4).unwrap();
        let pruned = apply_mask(&s, &mask).unwrap();
        assert_eq!(pruned.len(), 2);
        assert_eq!(pruned.features(0), s.features(0));
        assert_eq!(pruned.features(1), s.features(2));
        assert_eq!(apply_mask(&s, &SelectionMask::all(5)).unwrap(), s);

        let top = select_top_m(&[0.1, 0.1, 0.8, 0.2, 0.3], 0.2).unwrap();
        let single = apply_mask(&s, &top).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.features(0), s.features(2));

        assert!(matches!(
            apply_mask(&s, &SelectionMask::all(4)),
            Err(Error::MaskLength { mask: 4, shard: 5 })
        ));
    }

    #[test]
    fn audit_csv() {
        let scores = ImportanceScores {
            loss_sum: vec![2.0, 0.0, 3.0],
            observe_count: vec![2, 0, 1],
            warm_params: ModelParams::zeros(ModelLayout::new(1, 0, 2).unwrap()),
            iterations: 1,
            wall_time: Duration::ZERO,
        };
        let mask = SelectionMask::from_indices(3, [2]);
        assert_eq!(
            scores_csv(&scores, &mask).unwrap(),
            "index,score,count,retained\n0,1,2,0\n1,,0,0\n2,3,1,1\n"
        );
    }
}
