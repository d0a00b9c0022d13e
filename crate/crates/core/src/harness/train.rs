use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, AdamW, AdamWConfig, LinearSchedule};
use super::tasks::{Dataset, Targets};
use crate::adapters::Mode;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::moe::{balance_loss, router_entropy, AdapterConfig, AdapterLayer};

fn default_warmup() -> f64 {
    0.1
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_balance() -> f64 {
    0.001
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub adapter: AdapterConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Load-balance loss factor for MoE methods.
    #[serde(default = "default_balance")]
    pub balance_factor: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Validation cadence in steps; 0 means once per epoch.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(adapter: AdapterConfig, lr: f64, batch_size: usize, epochs: usize) -> Self {
        TrainConfig {
            adapter,
            lr,
            batch_size,
            epochs,
            warmup_ratio: default_warmup(),
            weight_decay: default_weight_decay(),
            balance_factor: default_balance(),
            grad_clip: None,
            eval_every: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lr) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::config(format!("warmup_ratio must be in [0, 1], got {}", self.warmup_ratio)));
        }
        if !finite_nonneg(self.weight_decay) || !finite_nonneg(self.balance_factor) {
            return Err(Error::config("weight_decay and balance_factor must be finite and >= 0"));
        }
        if self.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// One optimizer step's deterministic metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub task_loss: f64,
    pub balance_loss: f64,
    pub router_entropy: f64,
    /// Fraction of rows routed to each expert; `[1.0]` for single-adapter methods.
    pub expert_load: Vec<f64>,
    /// Latest validation loss per task.
    pub val_loss: Vec<f64>,
}

/// Wall-clock split of one step. Kept apart from [`StepMetrics`] so that the
/// metrics stream stays byte-reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub forward: Duration,
    pub backward: Duration,
    pub optimize: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.forward + self.backward + self.optimize
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsHistory {
    pub task_ids: Vec<usize>,
    pub n_experts: usize,
    pub rows: Vec<StepMetrics>,
    pub timings: Vec<PhaseTimes>,
}

impl MetricsHistory {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut header = String::from("step,lr,total_loss,task_loss,balance_loss,router_entropy");
        for e in 0..self.n_experts {
            header.push_str(&format!(",load_{e}"));
        }
        for t in &self.task_ids {
            header.push_str(&format!(",val_task_{t}"));
        }
        writeln!(out, "{header}")?;
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.lr, r.total_loss, r.task_loss, r.balance_loss, r.router_entropy
            )?;
            for v in r.expert_load.iter().chain(&r.val_loss) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn write_timings_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "step,forward_s,backward_s,optimize_s,total_s")?;
        for (step, t) in self.timings.iter().enumerate() {
            writeln!(
                out,
                "{step},{:.9},{:.9},{:.9},{:.9}",
                t.forward.as_secs_f64(),
                t.backward.as_secs_f64(),
                t.optimize.as_secs_f64(),
                t.total().as_secs_f64()
            )?;
        }
        Ok(())
    }

    pub fn final_metrics(&self) -> Option<&StepMetrics> {
        self.rows.last()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub samples: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskMetrics>,
}

impl EvalReport {
    pub fn worst_loss(&self) -> f64 {
        self.per_task.iter().map(|t| t.loss).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_loss(&self) -> f64 {
        self.per_task.iter().map(|t| t.loss).sum::<f64>() / self.per_task.len().max(1) as f64
    }
}

pub(crate) fn task_loss(tape: &mut Tape<'_>, y: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Regression(t) => tape.mse_loss(y, t),
        Targets::Classes(c) => tape.softmax_cross_entropy(y, c),
    }
}

fn row_loss(pred: &[f64], data: &Dataset, i: usize) -> (f64, bool) {
    match &data.targets {
        Targets::Regression(t) => {
            let sq: f64 = pred.iter().zip(t.row(i)).map(|(p, y)| (p - y).powi(2)).sum();
            (sq / pred.len() as f64, false)
        }
        Targets::Classes(c) => {
            let max = pred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + pred.iter().map(|p| (p - max).exp()).sum::<f64>().ln();
            let argmax = pred.iter().enumerate().fold(0, |b, (k, v)| if *v > pred[b] { k } else { b });
            (lse - pred[c[i]], argmax == c[i])
        }
    }
}

/// Per-task mean loss (and accuracy for classification). Never mutates the layer.
pub fn evaluate(layer: &AdapterLayer, data: &Dataset) -> Result<EvalReport> {
    if data.x.cols() != layer.in_dim() {
        return Err(Error::shape("evaluate", data.x.shape(), layer.base_w().shape()));
    }
    let pred = {
        let mut tape = Tape::new();
        let x = tape.constant(&data.x);
        let out = layer.forward(&mut tape, x, &mut Mode::Eval)?;
        tape.value(out.y).clone()
    };
    let mut per_task = Vec::new();
    for id in data.task_ids() {
        let rows = data.rows_of_task(id);
        let mut loss = 0.0;
        let mut hits = 0usize;
        for &i in &rows {
            let (l, hit) = row_loss(pred.row(i), data, i);
            loss += l;
            hits += hit as usize;
        }
        let n = rows.len() as f64;
        per_task.push(TaskMetrics {
            task: id,
            samples: rows.len(),
            loss: loss / n,
            accuracy: matches!(data.targets, Targets::Classes(_)).then(|| hits as f64 / n),
        });
    }
    Ok(EvalReport { per_task })
}

/// Trained layer together with its metrics.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub layer: AdapterLayer,
    pub history: MetricsHistory,
}

/// RNG streams derived from the run seed.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const DROPOUT: u64 = 2;
}

/// Builds the adapter over `base_w` and trains it with AdamW.
///
/// Everything that draws randomness (initialization, shuffling, dropout)
/// uses its own stream derived from `config.seed`, so identical configs give
/// bitwise-identical weights and metrics.
pub fn train(config: &TrainConfig, base_w: &Matrix, data: &Dataset, val: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let root = Rng::new(config.seed);
    let mut layer = AdapterLayer::build(base_w.clone(), &config.adapter, &mut root.derive(streams::INIT))?;
    let mut shuffle_rng = root.derive(streams::SHUFFLE);
    let mut dropout_rng = root.derive(streams::DROPOUT);

    let steps_per_epoch = config.steps_per_epoch(data.len());
    let total_steps = steps_per_epoch * config.epochs;
    let schedule = LinearSchedule::new(config.lr, config.warmup_ratio, total_steps);
    let eval_every = if config.eval_every == 0 { steps_per_epoch } else { config.eval_every };
    let mut opt = AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() });

    let mut history = MetricsHistory { task_ids: val.task_ids(), n_experts: layer.n_experts(), ..Default::default() };
    let mut val_loss: Vec<f64> = evaluate(&layer, val)?.per_task.iter().map(|t| t.loss).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.subset(chunk);
            let lr = schedule.lr(step);

            let t0 = Instant::now();
            let mut tape = Tape::new();
            let x = tape.constant(&batch.x);
            let out = layer.forward(&mut tape, x, &mut Mode::Train(&mut dropout_rng))?;
            let task = task_loss(&mut tape, out.y, &batch.targets)?;
            let (total, bal, entropy, load) = match &out.route {
                Some(route) if config.balance_factor > 0.0 => {
                    let b = balance_loss(&mut tape, route, config.balance_factor)?;
                    let total = tape.add(task, b)?;
                    let ent = router_entropy(tape.value(route.probs));
                    (total, tape.scalar(b), ent, route.stats.selection_fraction.clone())
                }
                Some(route) => {
                    (task, 0.0, router_entropy(tape.value(route.probs)), route.stats.selection_fraction.clone())
                }
                None => (task, 0.0, 0.0, vec![1.0]),
            };
            let total_value = tape.scalar(total);
            let task_value = tape.scalar(task);
            if !total_value.is_finite() {
                return Err(Error::Diverged { step, loss: total_value });
            }
            let t1 = Instant::now();
            let mut grads = tape.backward(total)?;
            drop(tape);
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            let t2 = Instant::now();
            opt.step(&mut layer.params_mut(), &grads, lr)?;
            let t3 = Instant::now();

            step += 1;
            if step % eval_every == 0 || step == total_steps {
                val_loss = evaluate(&layer, val)?.per_task.iter().map(|t| t.loss).collect();
            }
            history.rows.push(StepMetrics {
                step,
                lr,
                total_loss: total_value,
                task_loss: task_value,
                balance_loss: bal,
                router_entropy: entropy,
                expert_load: load,
                val_loss: val_loss.clone(),
            });
            history.timings.push(PhaseTimes { forward: t1 - t0, backward: t2 - t1, optimize: t3 - t2 });
        }
    }
    Ok(TrainOutput { layer, history })
}

/// One point of an [`lr_sweep`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lr: f64,
    pub mean_loss: f64,
    pub worst_loss: f64,
    /// Set when the run diverged; losses are then infinite.
    pub diverged: bool,
}

/// Trains `config` once per learning rate and scores each run on `val`.
/// A diverged run is recorded instead of aborting the sweep.
pub fn lr_sweep(
    config: &TrainConfig,
    lrs: &[f64],
    base_w: &Matrix,
    data: &Dataset,
    val: &Dataset,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        let cfg = TrainConfig { lr, ..config.clone() };
        let point = match train(&cfg, base_w, data, val) {
            Ok(out) => {
                let report = evaluate(&out.layer, val)?;
                SweepPoint { lr, mean_loss: report.mean_loss(), worst_loss: report.worst_loss(), diverged: false }
            }
            Err(Error::Diverged { .. }) => {
                SweepPoint { lr, mean_loss: f64::INFINITY, worst_loss: f64::INFINITY, diverged: true }
            }
            Err(e) => return Err(e),
        };
        points.push(point);
    }
    Ok(points)
}

/// Learning rate with the lowest mean validation loss among finished runs.
pub fn best_lr(points: &[SweepPoint]) -> Option<f64> {
    points.iter().filter(|p| !p.diverged).min_by(|a, b| a.mean_loss.total_cmp(&b.mean_loss)).map(|p| p.lr)
}
