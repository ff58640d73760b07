//! Mini-batch training on a (possibly pruned) shard.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, Gradient, ModelParams, Scratch};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Learning-rate curve without a horizon; the horizon is fixed once the
/// number of steps is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub eta0: f64,
    #[serde(default)]
    pub eta_min: f64,
}

impl ScheduleSpec {
    pub fn constant(eta0: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            eta0,
            eta_min: 0.0,
        }
    }

    pub fn cosine(eta0: f64, eta_min: f64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            eta0,
            eta_min,
        }
    }

    pub fn validate_at(&self, prefix: &str) -> Result<()> {
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return Err(Error::config(
                format!("{prefix}/eta0"),
                "must be finite and non-negative",
            ));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.eta0) {
            return Err(Error::config(
                format!("{prefix}/eta_min"),
                "must be in [0, eta0]",
            ));
        }
        Ok(())
    }

    pub fn with_horizon(self, horizon: usize) -> Result<Schedule> {
        Schedule::new(self.kind, self.eta0, self.eta_min, horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    eta0: f64,
    eta_min: f64,
    horizon: usize,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, eta0: f64, eta_min: f64, horizon: usize) -> Result<Self> {
        ScheduleSpec {
            kind,
            eta0,
            eta_min,
        }
        .validate_at("/schedule")
        .map_err(|e| Error::invalid("schedule", e.to_string()))?;
        if horizon == 0 {
            return Err(Error::invalid("schedule", "horizon must be at least 1"));
        }
        Ok(Self {
            kind,
            eta0,
            eta_min,
            horizon,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Learning rate at step `t` in `0..=horizon`.
    pub fn lr_at(&self, t: usize) -> Result<f64> {
        if t > self.horizon {
            return Err(Error::ScheduleOverrun {
                t,
                horizon: self.horizon,
            });
        }
        Ok(match self.kind {
            ScheduleKind::Constant => self.eta0,
            ScheduleKind::Cosine => {
                let phase = std::f64::consts::PI * t as f64 / self.horizon as f64;
                self.eta_min + 0.5 * (self.eta0 - self.eta_min) * (1.0 + phase.cos())
            }
        })
    }
}

/// In configs: `"sgd"`, `"adam"`, or `{"adam": {"beta1": ..}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    rename_all = "snake_case",
    deny_unknown_fields,
    try_from = "OptimizerRepr"
)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OptimizerRepr {
    Name(String),
    Tagged(TaggedOptimizer),
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum TaggedOptimizer {
    Sgd {},
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl TryFrom<OptimizerRepr> for Optimizer {
    type Error = String;

    fn try_from(repr: OptimizerRepr) -> std::result::Result<Self, String> {
        match repr {
            OptimizerRepr::Name(name) => match name.as_str() {
                "sgd" => Ok(Optimizer::Sgd),
                "adam" => Ok(Optimizer::adam()),
                other => Err(format!(
                    "unknown optimizer {other:?}, expected \"sgd\" or \"adam\""
                )),
            },
            OptimizerRepr::Tagged(TaggedOptimizer::Sgd {}) => Ok(Optimizer::Sgd),
            OptimizerRepr::Tagged(TaggedOptimizer::Adam { beta1, beta2, eps }) => {
                Ok(Optimizer::Adam { beta1, beta2, eps })
            }
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleSpec,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Record metrics every this many steps; 0 records only the final step.
    pub eval_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
    pub total_steps: usize,
    pub final_params: ModelParams,
    /// Time spent in the update loop, evaluation excluded.
    pub update_time: Duration,
}

impl TrainingTrace {
    pub fn last(&self) -> &TraceRecord {
        self.records
            .last()
            .expect("trace always holds the final record")
    }

    pub fn to_csv(&self) -> String {
        trace_csv(&self.records)
    }
}

/// `step,train_loss,train_acc,test_loss,test_acc`
pub fn trace_csv(records: &[TraceRecord]) -> String {
    let mut out = String::from("step,train_loss,train_acc,test_loss,test_acc\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.train_loss, r.train_acc, r.test_loss, r.test_acc
        ));
    }
    out
}

/// `E * ceil(M / b)`: a short final batch per epoch is kept.
pub fn planned_steps(epochs: usize, samples: usize, batch_size: usize) -> usize {
    epochs * samples.div_ceil(batch_size)
}

/// Endless epoch-shuffled mini-batches over `0..n`. Every epoch is a fresh
/// permutation cut into `ceil(n / b)` batches, the last possibly short.
pub(crate) struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: rng::Rng,
}

impl BatchStream {
    pub(crate) fn new(n: usize, batch_size: usize, rng: rng::Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch_size,
            rng,
        }
    }

    pub(crate) fn next_batch(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = &self.order[self.pos..end];
        self.pos = end;
        batch
    }
}

/// Mean loss and accuracy; argmax ties go to the lowest class index.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.feature_dim() != params.layout().input_dim() {
        return Err(Error::InputShape {
            expected: params.layout().input_dim(),
            actual: data.feature_dim(),
        });
    }
    let mut scratch = Scratch::new(params.layout());
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in data.samples() {
        if s.y >= params.layout().num_classes() {
            return Err(Error::Label {
                label: s.y,
                num_classes: params.layout().num_classes(),
            });
        }
        let (l, pred) = model::loss_and_prediction(params, s.x, s.y, &mut scratch);
        loss += l;
        correct += usize::from(pred == s.y);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

enum Stepper {
    Sgd,
    Adam(Adam),
}

impl Stepper {
    fn new(opt: Optimizer, len: usize) -> Self {
        match opt {
            Optimizer::Sgd => Stepper::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => Stepper::Adam(Adam {
                beta1,
                beta2,
                eps,
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            }),
        }
    }

    fn apply(&mut self, params: &mut ModelParams, grad: &Gradient, lr: f64) {
        let w = params.weights_mut();
        match self {
            Stepper::Sgd => {
                for (wi, gi) in w.iter_mut().zip(grad.as_slice()) {
                    *wi -= lr * gi;
                }
            }
            Stepper::Adam(a) => {
                a.t += 1;
                let c1 = 1.0 - a.beta1.powi(a.t);
                let c2 = 1.0 - a.beta2.powi(a.t);
                for (i, (wi, &gi)) in w.iter_mut().zip(grad.as_slice()).enumerate() {
                    a.m[i] = a.beta1 * a.m[i] + (1.0 - a.beta1) * gi;
                    a.v[i] = a.beta2 * a.v[i] + (1.0 - a.beta2) * gi * gi;
                    let m_hat = a.m[i] / c1;
                    let v_hat = a.v[i] / c2;
                    *wi -= lr * m_hat / (v_hat.sqrt() + a.eps);
                }
            }
        }
    }
}

pub(crate) fn validate_train_config(cfg: &TrainConfig) -> Result<()> {
    if cfg.epochs == 0 {
        return Err(Error::invalid("train config", "epochs must be at least 1"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid(
            "train config",
            "batch_size must be at least 1",
        ));
    }
    cfg.schedule
        .validate_at("/train/schedule")
        .map_err(|e| Error::invalid("train config", e.to_string()))?;
    if let Optimizer::Adam { beta1, beta2, eps } = cfg.optimizer {
        if !(0.0..1.0).contains(&beta1)
            || !(0.0..1.0).contains(&beta2)
            || eps.is_nan()
            || eps <= 0.0
        {
            return Err(Error::invalid(
                "train config",
                "adam needs beta1, beta2 in [0, 1) and eps > 0",
            ));
        }
    }
    Ok(())
}

/// Runs `planned_steps(E, |shard|, b)` updates from `init`, recording metrics
/// on `shard` and `eval_set`.
pub fn train(
    init: &ModelParams,
    shard: &Dataset,
    cfg: &TrainConfig,
    eval_set: &Dataset,
) -> Result<TrainingTrace> {
    validate_train_config(cfg)?;
    if shard.is_empty() || eval_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total_steps = planned_steps(cfg.epochs, shard.len(), cfg.batch_size);
    let schedule = cfg.schedule.with_horizon(total_steps)?;

    let mut params = init.clone();
    let mut grad = Gradient::zeros(params.layout());
    let mut scratch = Scratch::new(params.layout());
    let mut stepper = Stepper::new(cfg.optimizer, params.weights().len());
    let mut batches = BatchStream::new(
        shard.len(),
        cfg.batch_size,
        rng::rng(cfg.seed, &[rng::stream::TRAIN]),
    );

    let record = |params: &ModelParams, step: usize| -> Result<TraceRecord> {
        let (train_loss, train_acc) = evaluate(params, shard)?;
        let (test_loss, test_acc) = evaluate(params, eval_set)?;
        Ok(TraceRecord {
            step,
            train_loss,
            train_acc,
            test_loss,
            test_acc,
        })
    };

    let mut records = Vec::new();
    if cfg.eval_every > 0 {
        records.push(record(&params, 0)?);
    }
    let mut update_time = Duration::ZERO;
    let mut started = Instant::now();
    for t in 0..total_steps {
        let lr = schedule.lr_at(t)?;
        let batch = batches.next_batch();
        model::batch_grad_into(
            &params,
            batch.iter().map(|&i| shard.sample(i)),
            &mut grad,
            &mut scratch,
            |_, _| {},
        )?;
        stepper.apply(&mut params, &grad, lr);

        let step = t + 1;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < total_steps {
            update_time += started.elapsed();
            records.push(record(&params, step)?);
            started = Instant::now();
        }
    }
    update_time += started.elapsed();
    records.push(record(&params, total_steps)?);

    Ok(TrainingTrace {
        records,
        total_steps,
        final_params: params,
        update_time,
    })
}
