use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use crate::adapters::Mode;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::moe::{balance_loss, flop_budget, AdapterConfig, AdapterLayer, Site};

fn default_reps() -> usize {
    50
}

/// Timed training steps of several methods at shared dims.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<AdapterConfig>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub batch: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub balance_factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: String,
    /// Median seconds per phase.
    pub forward: f64,
    pub backward: f64,
    pub optimize: f64,
    /// Median of per-step totals.
    pub total: f64,
    /// Analytic adapter-path multiply-adds per step.
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub reps: usize,
    pub warmup: usize,
}

impl BenchTable {
    pub fn row(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "method,forward_s,backward_s,optimize_s,total_s,flops")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{:.9},{}",
                r.method, r.forward, r.backward, r.optimize, r.total, r.flops
            )?;
        }
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Warmup repetitions discarded before timing.
pub fn warmup_reps(reps: usize) -> usize {
    (reps / 10).max(2)
}

/// Times forward, backward and optimizer phases of one step per method.
///
/// Each method runs `warmup_reps(reps)` untimed steps and then `reps` timed
/// ones on the same batch; medians are reported.
pub fn bench_step(config: &BenchConfig) -> Result<BenchTable> {
    if config.reps < 10 {
        return Err(Error::config(format!("bench needs at least 10 repetitions, got {}", config.reps)));
    }
    if config.batch == 0 || config.in_dim == 0 || config.out_dim == 0 {
        return Err(Error::config("bench dims and batch must be positive"));
    }
    let warmup = warmup_reps(config.reps);
    let root = Rng::new(config.seed);
    let mut data_rng = root.derive(1);
    let base = data_rng.uniform_matrix(config.out_dim, config.in_dim, -0.05, 0.05);
    let x = data_rng.uniform_matrix(config.batch, config.in_dim, -1.0, 1.0);
    let target = data_rng.uniform_matrix(config.batch, config.out_dim, -1.0, 1.0);
    let site = [Site::new(config.out_dim as u64, config.in_dim as u64)];

    let mut rows = Vec::new();
    for cfg in &config.methods {
        let mut layer = AdapterLayer::build(base.clone(), cfg, &mut root.derive(2))?;
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut dropout_rng = root.derive(3);
        let (mut fw, mut bw, mut op, mut tot) = (vec![], vec![], vec![], vec![]);
        for rep in 0..warmup + config.reps {
            let t0 = Instant::now();
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let out = layer.forward(&mut tape, xv, &mut Mode::Train(&mut dropout_rng))?;
            let mut loss = tape.mse_loss(out.y, &target)?;
            if let Some(route) = &out.route {
                if config.balance_factor > 0.0 {
                    let b = balance_loss(&mut tape, route, config.balance_factor)?;
                    loss = tape.add(loss, b)?;
                }
            }
            let t1 = Instant::now();
            let grads = tape.backward(loss)?;
            drop(tape);
            let t2 = Instant::now();
            opt.step(&mut layer.params_mut(), &grads, 1e-4)?;
            let t3 = Instant::now();
            if rep >= warmup {
                let secs = |d: Duration| d.as_secs_f64();
                fw.push(secs(t1 - t0));
                bw.push(secs(t2 - t1));
                op.push(secs(t3 - t2));
                tot.push(secs(t3 - t0));
            }
        }
        let flops = flop_budget(&cfg.method_spec()?, &site, config.batch as u64)?.total;
        rows.push(BenchRow {
            method: cfg.method.to_string(),
            forward: median(fw),
            backward: median(bw),
            optimize: median(op),
            total: median(tot),
            flops,
        });
    }
    Ok(BenchTable { rows, reps: config.reps, warmup })
}
