use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{task_family, BenchConfig, TaskKind, TaskSpec, TrainConfig, WorldConfig};
use crate::moe::{llama2_7b_sites, AdapterConfig, Method, Site, LLAMA2_7B_PARAMS};

/// Name of the built-in LLaMA-2 7B site list.
pub const LLAMA2_7B_PRESET: &str = "llama2-7b-linear-sites";

/// Environment variable that replaces [`RunConfig::seed`].
pub const SEED_ENV: &str = "MALK_SEED";

/// Load-balance factor given either as a number or as a named preset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BalanceFactor {
    Value(f64),
    Preset(BalancePreset),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalancePreset {
    /// 0.001
    MainText,
    /// 0.01
    Appendix,
}

impl BalanceFactor {
    pub fn value(self) -> f64 {
        match self {
            BalanceFactor::Value(v) => v,
            BalanceFactor::Preset(BalancePreset::MainText) => 0.001,
            BalanceFactor::Preset(BalancePreset::Appendix) => 0.01,
        }
    }
}

impl Default for BalanceFactor {
    fn default() -> Self {
        BalanceFactor::Preset(BalancePreset::MainText)
    }
}

fn default_warmup() -> f64 {
    0.1
}

fn default_weight_decay() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub balance_factor: BalanceFactor,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub eval_every: usize,
}

/// `count` tasks of one kind whose seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFamily {
    pub kind: TaskKind,
    pub count: usize,
    pub val_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub world: WorldConfig,
    /// Explicit task list; exclusive with `family`.
    #[serde(default)]
    pub tasks: Option<Vec<TaskSpec>>,
    #[serde(default)]
    pub family: Option<TaskFamily>,
    /// Mixing weights per task; equal when absent.
    #[serde(default)]
    pub mix: Option<Vec<f64>>,
    pub train_samples: usize,
}

impl DataSection {
    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        let w = &self.world;
        match (&self.tasks, &self.family) {
            (Some(t), None) => Ok(t.clone()),
            (None, Some(f)) => Ok(task_family(f.kind, f.count, w.in_dim, w.out_dim, f.val_samples, f.seed)),
            _ => Err(Error::config("data: give exactly one of `tasks` or `family`")),
        }
    }

    pub fn mix_weights(&self, n_tasks: usize) -> Vec<f64> {
        self.mix.clone().unwrap_or_else(|| vec![1.0; n_tasks])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    #[serde(default)]
    pub preset: Option<String>,
    /// Explicit `(out_dim, in_dim)` sites; exclusive with `preset`.
    #[serde(default)]
    pub sites: Option<Vec<Site>>,
    /// Base model size for the percentage column. Defaults to the preset's
    /// count, or the summed site sizes for explicit sites.
    #[serde(default)]
    pub base_params: Option<u64>,
    /// Extra methods reported next to the run's own adapter.
    #[serde(default)]
    pub compare: Vec<AdapterConfig>,
    /// Reference for the reduction column; MoLoRA with the adapter's
    /// `(N, r, K)` when absent.
    #[serde(default)]
    pub baseline: Option<AdapterConfig>,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            preset: Some(LLAMA2_7B_PRESET.into()),
            sites: None,
            base_params: None,
            compare: Vec::new(),
            baseline: None,
        }
    }
}

impl BudgetSection {
    pub fn resolve_sites(&self) -> Result<(Vec<Site>, u64)> {
        let (sites, default_base) = match (&self.preset, &self.sites) {
            (Some(p), None) if p == LLAMA2_7B_PRESET => (llama2_7b_sites(), LLAMA2_7B_PARAMS),
            (Some(p), None) => {
                return Err(Error::config(format!(
                    "budget.preset: unknown preset {p:?}, expected {LLAMA2_7B_PRESET:?}"
                )))
            }
            (None, Some(s)) => (s.clone(), s.iter().map(|s| s.out_dim * s.in_dim).sum()),
            _ => return Err(Error::config("budget: give exactly one of `preset` or `sites`")),
        };
        Ok((sites, self.base_params.unwrap_or(default_base)))
    }
}

fn default_bench_dim() -> usize {
    1024
}

fn default_bench_batch() -> usize {
    64
}

fn default_bench_reps() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "default_bench_dim")]
    pub in_dim: usize,
    #[serde(default = "default_bench_dim")]
    pub out_dim: usize,
    #[serde(default = "default_bench_batch")]
    pub batch: usize,
    #[serde(default = "default_bench_reps")]
    pub reps: usize,
    /// Defaults to LoRA, MoLoRA and MALoRA at the adapter's ranks.
    #[serde(default)]
    pub methods: Option<Vec<AdapterConfig>>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            in_dim: default_bench_dim(),
            out_dim: default_bench_dim(),
            batch: default_bench_batch(),
            reps: default_bench_reps(),
            methods: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Directory receiving `checkpoint.malk`, `metrics.csv` and reports.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// A complete experiment description as read from a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub training: Option<TrainingSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    /// Run seed for initialization, shuffling and dropout.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub budget: Option<BudgetSection>,
    #[serde(default)]
    pub bench: Option<BenchSection>,
}

impl RunConfig {
    /// Parses JSON text; errors name the offending key with its line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Replaces the run seed with `MALK_SEED` when it is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::config(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section that is present without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        let ctx = |section: &str, e: Error| match e {
            Error::Config(m) => Error::config(format!("{section}: {m}")),
            other => other,
        };
        self.adapter.method_spec().map_err(|e| ctx("adapter", e))?;
        if let Some(data) = &self.data {
            let specs = data.task_specs()?;
            if specs.is_empty() {
                return Err(Error::config("data: at least one task is required"));
            }
            let w = &data.world;
            if w.in_dim == 0 || w.out_dim == 0 || w.subspace_rank == 0 || w.subspace_rank > w.in_dim {
                return Err(Error::config("data.world: need in_dim, out_dim >= 1 and 1 <= subspace_rank <= in_dim"));
            }
            for s in &specs {
                if (s.in_dim, s.out_dim) != (w.in_dim, w.out_dim) {
                    return Err(Error::config(format!("data.tasks: task {} dims do not match the world", s.id)));
                }
                if s.samples == 0 {
                    return Err(Error::config(format!("data.tasks: task {} has no validation samples", s.id)));
                }
                if s.kind != specs[0].kind {
                    return Err(Error::config("data.tasks: all tasks must share one kind"));
                }
            }
            let mix = data.mix_weights(specs.len());
            if mix.len() != specs.len()
                || mix.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                || mix.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::config("data.mix: need one finite non-negative weight per task, not all zero"));
            }
            if data.train_samples == 0 {
                return Err(Error::config("data.train_samples must be at least 1"));
            }
            if self.adapter.method == Method::Malora {
                self.adapter.geometry(w.in_dim, w.out_dim).map_err(|e| ctx("adapter", e))?;
            }
        }
        if let Some(t) = &self.training {
            TrainConfig::from_sections(&self.adapter, t, self.seed).validate().map_err(|e| ctx("training", e))?;
        }
        if let Some(b) = &self.budget {
            b.resolve_sites()?;
            for c in b.compare.iter().chain(&b.baseline) {
                c.method_spec().map_err(|e| ctx("budget", e))?;
            }
        }
        if let Some(b) = &self.bench {
            if b.reps < 10 || b.batch == 0 || b.in_dim == 0 || b.out_dim == 0 {
                return Err(Error::config("bench: need reps >= 10 and positive dims and batch"));
            }
            for c in b.methods.iter().flatten() {
                c.method_spec().map_err(|e| ctx("bench", e))?;
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = self.training.as_ref().ok_or_else(|| Error::config("missing `training` section"))?;
        Ok(TrainConfig::from_sections(&self.adapter, t, self.seed))
    }

    pub fn data_section(&self) -> Result<&DataSection> {
        self.data.as_ref().ok_or_else(|| Error::config("missing `data` section"))
    }

    pub fn bench_config(&self) -> BenchConfig {
        let b = self.bench.clone().unwrap_or_default();
        let methods = b.methods.unwrap_or_else(|| default_bench_methods(&self.adapter));
        BenchConfig {
            methods,
            in_dim: b.in_dim,
            out_dim: b.out_dim,
            batch: b.batch,
            reps: b.reps,
            seed: self.seed,
            balance_factor: self.training.as_ref().map_or(BalanceFactor::default(), |t| t.balance_factor).value(),
        }
    }
}

/// LoRA, MoLoRA and MALoRA rows sharing the adapter's `(N, r, K)`. The MALoRA
/// row is the adapter itself when it is one, otherwise `λ = 0.5`.
pub fn default_bench_methods(adapter: &AdapterConfig) -> Vec<AdapterConfig> {
    let lora = AdapterConfig::new(Method::Lora, adapter.rank);
    let molora = AdapterConfig {
        n_experts: adapter.n_experts,
        top_k: adapter.top_k,
        ..AdapterConfig::new(Method::Molora, adapter.rank)
    };
    let malora = if adapter.method == Method::Malora {
        adapter.clone()
    } else {
        AdapterConfig { lambda: Some(0.5), ..AdapterConfig { method: Method::Malora, ..molora.clone() } }
    };
    vec![lora, molora, malora]
}

impl TrainConfig {
    pub fn from_sections(adapter: &AdapterConfig, t: &TrainingSection, seed: u64) -> Self {
        TrainConfig {
            adapter: adapter.clone(),
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            warmup_ratio: t.warmup_ratio,
            weight_decay: t.weight_decay,
            balance_factor: t.balance_factor.value(),
            grad_clip: t.grad_clip,
            eval_every: t.eval_every,
            seed,
        }
    }
}
