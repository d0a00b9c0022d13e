//! Synthetic multi-task data, AdamW training, evaluation and step benchmarks.

mod bench;
mod optim;
mod tasks;
mod train;

pub use bench::{bench_step, warmup_reps, BenchConfig, BenchRow, BenchTable};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, LinearSchedule};
pub use tasks::{
    make_multitask, make_validation, mix_schedule, task_family, Dataset, Sample, Targets, TaskKind, TaskSpec,
    TaskStream, World, WorldConfig,
};
pub use train::{
    best_lr, evaluate, lr_sweep, train, EvalReport, MetricsHistory, PhaseTimes, StepMetrics, SweepPoint, TaskMetrics,
    TrainConfig, TrainOutput,
};
