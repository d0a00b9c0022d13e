use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormal_basis, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Targets are the teacher's outputs plus Gaussian noise.
    Regression,
    /// Targets are the argmax of the teacher's outputs.
    Classification,
}

/// One synthetic task drawn from a [`World`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: usize,
    pub kind: TaskKind,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Size of the held-out validation split.
    pub samples: usize,
    pub seed: u64,
}

fn default_subspace_rank() -> usize {
    4
}

fn default_center_norm() -> f64 {
    3.0
}

fn default_task_scale() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.0
}

/// Shared structure of a task family.
///
/// Every task's teacher is `y = (W₀ + C_τ·S)·x`: `W₀` is the student's frozen
/// base, `S` is a shared orthonormal input subspace and `C_τ` a task-specific
/// read-out. Task inputs are Gaussian around a task centre `μ_τ`, which gives a
/// router something to separate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub seed: u64,
    #[serde(default = "default_subspace_rank")]
    pub subspace_rank: usize,
    #[serde(default = "default_center_norm")]
    pub center_norm: f64,
    #[serde(default = "default_task_scale")]
    pub task_scale: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl WorldConfig {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        WorldConfig {
            in_dim,
            out_dim,
            seed,
            subspace_rank: default_subspace_rank(),
            center_norm: default_center_norm(),
            task_scale: default_task_scale(),
            noise: default_noise(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub base_w: Matrix,
    /// `k×n` orthonormal rows.
    pub subspace: Matrix,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        let (n, m, k) = (config.in_dim, config.out_dim, config.subspace_rank);
        if n == 0 || m == 0 || k == 0 || k > n {
            return Err(Error::config(format!("world needs 1 <= subspace_rank {k} <= in_dim {n} and out_dim >= 1")));
        }
        let mut rng = Rng::new(config.seed);
        let bound = 1.0 / (n as f64).sqrt();
        let base_w = rng.uniform_matrix(m, n, -bound, bound);
        let subspace = orthonormal_basis(&rng.normal_matrix(k, n, 1.0))?;
        Ok(World { config, base_w, subspace })
    }

    /// Task-specific teacher delta `C_τ·S` and input centre `μ_τ`.
    pub fn task_params(&self, spec: &TaskSpec) -> Result<(Matrix, Vec<f64>)> {
        if spec.in_dim != self.config.in_dim || spec.out_dim != self.config.out_dim {
            return Err(Error::config(format!(
                "task {} dims {}x{} do not match world {}x{}",
                spec.id, spec.out_dim, spec.in_dim, self.config.out_dim, self.config.in_dim
            )));
        }
        let k = self.config.subspace_rank;
        let mut rng = Rng::new(spec.seed);
        let c = rng.normal_matrix(spec.out_dim, k, self.config.task_scale / (k as f64).sqrt());
        let mut mu: Vec<f64> = (0..spec.in_dim).map(|_| rng.normal()).collect();
        let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        mu.iter_mut().for_each(|v| *v *= self.config.center_norm / norm);
        Ok((c.matmul(&self.subspace)?, mu))
    }

    pub fn teacher(&self, spec: &TaskSpec) -> Result<TaskStream> {
        let (delta, center) = self.task_params(spec)?;
        Ok(TaskStream {
            kind: spec.kind,
            teacher: self.base_w.add(&delta)?,
            center,
            noise: self.config.noise,
            rng: Rng::new(spec.seed).derive(1),
        })
    }

    /// Validation split of one task, drawn from an independent stream.
    pub fn validation(&self, spec: &TaskSpec) -> Result<Dataset> {
        let mut stream = self.teacher(spec)?;
        stream.rng = Rng::new(spec.seed).derive(2);
        let mut rows = Vec::with_capacity(spec.samples);
        for _ in 0..spec.samples {
            rows.push(stream.draw());
        }
        Dataset::from_samples(spec.kind, spec.in_dim, spec.out_dim, rows.into_iter().map(|s| (spec.id, s)))
    }
}

/// Infinite sample generator for one task.
#[derive(Clone, Debug)]
pub struct TaskStream {
    kind: TaskKind,
    teacher: Matrix,
    center: Vec<f64>,
    noise: f64,
    rng: Rng,
}

/// One `(input, target)` draw; `class` is set for classification.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub class: usize,
}

impl TaskStream {
    pub fn draw(&mut self) -> Sample {
        let x: Vec<f64> = self.center.iter().map(|c| c + self.rng.normal()).collect();
        let mut y: Vec<f64> =
            (0..self.teacher.rows()).map(|i| self.teacher.row(i).iter().zip(&x).map(|(w, v)| w * v).sum()).collect();
        let class = argmax(&y);
        if self.kind == TaskKind::Regression && self.noise > 0.0 {
            for v in &mut y {
                *v += self.noise * self.rng.normal();
            }
        }
        Sample { x, y, class }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Targets of a dataset, one entry per row.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(Matrix),
    Classes(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub x: Matrix,
    pub targets: Targets,
    /// Task id of each row.
    pub task: Vec<usize>,
}

impl Dataset {
    fn from_samples(
        kind: TaskKind,
        in_dim: usize,
        out_dim: usize,
        samples: impl Iterator<Item = (usize, Sample)>,
    ) -> Result<Self> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut classes = Vec::new();
        let mut task = Vec::new();
        for (id, s) in samples {
            xs.extend(s.x);
            ys.extend(s.y);
            classes.push(s.class);
            task.push(id);
        }
        let rows = task.len();
        let x = Matrix::from_vec(rows, in_dim, xs)?;
        let targets = match kind {
            TaskKind::Regression => Targets::Regression(Matrix::from_vec(rows, out_dim, ys)?),
            TaskKind::Classification => Targets::Classes(classes),
        };
        Ok(Dataset { kind, x, targets, task })
    }

    pub fn len(&self) -> usize {
        self.task.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            kind: self.kind,
            x: self.x.select_rows(idx),
            targets: match &self.targets {
                Targets::Regression(y) => Targets::Regression(y.select_rows(idx)),
                Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            },
            task: idx.iter().map(|&i| self.task[i]).collect(),
        }
    }

    /// Task ids present, ascending.
    pub fn task_ids(&self) -> Vec<usize> {
        let mut ids = self.task.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn rows_of_task(&self, id: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.task[i] == id).collect()
    }
}

/// Deterministic interleaving by smooth weighted round-robin.
///
/// Each draw adds every task's weight to its credit and picks the task with
/// the largest credit (lowest index on ties), which is then charged the total
/// weight. Equal weights alternate, and counts after `draws` steps are within
/// one of `draws · wᵢ / Σw`.
pub fn mix_schedule(weights: &[f64], draws: usize) -> Result<Vec<usize>> {
    if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::config("mix weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::config("mix weights must not all be zero"));
    }
    let mut credit = vec![0.0; weights.len()];
    let mut out = Vec::with_capacity(draws);
    for _ in 0..draws {
        for (c, w) in credit.iter_mut().zip(weights) {
            *c += w / total;
        }
        let pick = argmax(&credit);
        credit[pick] -= 1.0;
        out.push(pick);
    }
    Ok(out)
}

/// Interleaves `draws` training samples from `specs` in proportion to `weights`.
pub fn make_multitask(world: &World, specs: &[TaskSpec], weights: &[f64], draws: usize) -> Result<Dataset> {
    if specs.len() != weights.len() {
        return Err(Error::config(format!("{} tasks but {} mix weights", specs.len(), weights.len())));
    }
    let first = specs.first().ok_or_else(|| Error::config("at least one task is required"))?;
    if let Some(bad) = specs.iter().find(|s| s.kind != first.kind) {
        return Err(Error::config(format!("task {} kind differs from task {}", bad.id, first.id)));
    }
    let mut streams = specs.iter().map(|s| world.teacher(s)).collect::<Result<Vec<_>>>()?;
    let order = mix_schedule(weights, draws)?;
    let samples = order.into_iter().map(|t| (specs[t].id, streams[t].draw()));
    Dataset::from_samples(first.kind, world.config.in_dim, world.config.out_dim, samples)
}

/// Validation splits of every task, concatenated in task order.
pub fn make_validation(world: &World, specs: &[TaskSpec]) -> Result<Dataset> {
    let first = specs.first().ok_or_else(|| Error::config("at least one task is required"))?;
    let mut all = Vec::new();
    for s in specs {
        let mut stream = world.teacher(s)?;
        stream.rng = Rng::new(s.seed).derive(2);
        for _ in 0..s.samples {
            all.push((s.id, stream.draw()));
        }
    }
    Dataset::from_samples(first.kind, world.config.in_dim, world.config.out_dim, all.into_iter())
}

/// `n` tasks of one kind with seeds derived from `seed`.
pub fn task_family(
    kind: TaskKind,
    n: usize,
    in_dim: usize,
    out_dim: usize,
    samples: usize,
    seed: u64,
) -> Vec<TaskSpec> {
    (0..n)
        .map(|id| TaskSpec {
            id,
            kind,
            in_dim,
            out_dim,
            samples,
            seed: Rng::new(seed).derive(100 + id as u64).next_u64(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(WorldConfig::new(6, 3, 1)).unwrap()
    }

    #[test]
    fn equal_weights_alternate() {
        assert_eq!(mix_schedule(&[0.5, 0.5], 6).unwrap(), vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn counts_track_weights() {
        let order = mix_schedule(&[0.9, 0.1], 1000).unwrap();
        let ones = order.iter().filter(|t| **t == 1).count();
        assert_eq!(ones, 100);
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let w = world();
        let specs = task_family(TaskKind::Regression, 2, 6, 3, 10, 4);
        let a = make_multitask(&w, &specs, &[0.7, 0.3], 50).unwrap();
        let b = make_multitask(&w, &specs, &[0.7, 0.3], 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let w = world();
        let mut specs = task_family(TaskKind::Regression, 2, 6, 3, 10, 4);
        specs[1].in_dim = 7;
        assert!(matches!(make_multitask(&w, &specs, &[1.0, 1.0], 10), Err(Error::Config(_))));
    }

    #[test]
    fn regression_targets_follow_teacher() {
        let w = world();
        let spec = &task_family(TaskKind::Regression, 1, 6, 3, 5, 2)[0];
        let (delta, _) = w.task_params(spec).unwrap();
        let d = w.validation(spec).unwrap();
        let Targets::Regression(y) = &d.targets else { panic!() };
        let expect = d.x.matmul_t(&w.base_w.add(&delta).unwrap()).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn classification_labels_in_range() {
        let w = world();
        let specs = task_family(TaskKind::Classification, 3, 6, 3, 20, 2);
        let d = make_validation(&w, &specs).unwrap();
        let Targets::Classes(c) = &d.targets else { panic!() };
        assert!(c.iter().all(|k| *k < 3));
        assert_eq!(d.task_ids(), vec![0, 1, 2]);
    }
}
