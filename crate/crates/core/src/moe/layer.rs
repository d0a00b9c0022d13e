use serde::{Deserialize, Serialize};

use super::budget::{Method, MethodSpec};
use super::geometry::{derive_geometry, MaloraGeometry};
use super::malora::{MaloraFlags, MaloraLayer};
use super::molora::{MoloraConfig, MoloraLayer};
use super::router::Route;
use crate::adapters::{LoraLayer, Mode, ParamMut, ParamRef};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

fn default_experts() -> usize {
    8
}

fn default_top_k() -> usize {
    2
}

fn default_beta() -> f64 {
    1.0
}

/// Method and geometry of one adapter site, as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub method: Method,
    /// Base rank `r` (doubled internally for the asymmetric variants).
    #[serde(rename = "r")]
    pub rank: usize,
    #[serde(default = "default_experts")]
    pub n_experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default, rename = "d")]
    pub shared_rank: Option<usize>,
    #[serde(default, rename = "r_bar")]
    pub expanded_rank: Option<usize>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Defaults to twice the effective rank.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub flags: MaloraFlags,
    /// MoLoRA only: all experts start from the same `A`.
    #[serde(default)]
    pub shared_init_a: bool,
}

impl AdapterConfig {
    pub fn new(method: Method, rank: usize) -> Self {
        AdapterConfig {
            method,
            rank,
            n_experts: default_experts(),
            top_k: default_top_k(),
            lambda: None,
            shared_rank: None,
            expanded_rank: None,
            beta: default_beta(),
            alpha: None,
            dropout: 0.0,
            flags: MaloraFlags::default(),
            shared_init_a: false,
        }
    }

    /// Resolves `(d, r̄)` from `λ` and/or explicit values and cross-checks them.
    pub fn geometry(&self, in_dim: usize, out_dim: usize) -> Result<MaloraGeometry> {
        if self.method != Method::Malora {
            return Err(Error::config(format!("{} has no MALoRA geometry", self.method)));
        }
        let (r, n_exp) = (self.rank, self.n_experts);
        let mut g = match (self.lambda, self.shared_rank, self.expanded_rank) {
            (Some(lambda), d, r_bar) => {
                let derived = derive_geometry(r, n_exp, lambda)?;
                if d.is_some_and(|d| d != derived.shared_rank) {
                    return Err(Error::config(format!(
                        "d = {} disagrees with lambda {lambda} (derived d = {})",
                        d.unwrap_or_default(),
                        derived.shared_rank
                    )));
                }
                let r_bar = match r_bar {
                    Some(rb) if rb != derived.expanded_rank && !self.flags.no_asymmetry => {
                        return Err(Error::config(format!(
                            "r_bar = {rb} disagrees with lambda {lambda} (derived r_bar = {})",
                            derived.expanded_rank
                        )));
                    }
                    Some(rb) => rb,
                    None => derived.expanded_rank,
                };
                MaloraGeometry {
                    n_experts: n_exp,
                    base_rank: r,
                    lambda,
                    shared_rank: derived.shared_rank,
                    expanded_rank: r_bar,
                    beta: self.beta,
                    top_k: self.top_k,
                    in_dim,
                    out_dim,
                }
            }
            (None, Some(d), Some(r_bar)) => {
                MaloraGeometry::explicit(r, n_exp, d, r_bar, self.beta, self.top_k, in_dim, out_dim)?
            }
            (None, Some(d), None) if self.flags.no_asymmetry => {
                MaloraGeometry::explicit(r, n_exp, d, r, self.beta, self.top_k, in_dim, out_dim)?
            }
            _ => return Err(Error::config("malora needs lambda, or both d and r_bar")),
        };
        if self.flags.no_asymmetry {
            if g.expanded_rank != r && self.expanded_rank.is_some() {
                return Err(Error::config("no_asymmetry requires r_bar == r"));
            }
            g.expanded_rank = r;
        }
        g.validate()?;
        Ok(g)
    }

    /// Rank summary for budget arithmetic.
    pub fn method_spec(&self) -> Result<MethodSpec> {
        let spec = match self.method {
            Method::Lora => MethodSpec::lora(self.rank),
            Method::Asylora => MethodSpec::asylora(self.rank),
            Method::Molora => MethodSpec::molora(self.n_experts, self.rank, self.top_k),
            Method::Moasylora => MethodSpec::moasylora(self.n_experts, self.rank, self.top_k),
            Method::Malora => {
                let g = self.geometry(0, 0)?;
                MethodSpec::malora(g.n_experts, g.base_rank, g.shared_rank, g.expanded_rank, g.top_k)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Output of [`AdapterLayer::forward`].
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub y: Var,
    /// Present for MoE methods.
    pub route: Option<Route>,
}

/// One fine-tunable linear site of any method.
#[derive(Clone, Debug)]
pub enum AdapterLayer {
    Lora(LoraLayer),
    Molora(MoloraLayer),
    Malora(MaloraLayer),
}

impl AdapterLayer {
    pub fn build(base_w: Matrix, cfg: &AdapterConfig, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", cfg.dropout)));
        }
        if cfg.method != Method::Malora && cfg.flags != MaloraFlags::default() {
            let only_renorm = MaloraFlags { renormalize: cfg.flags.renormalize, ..MaloraFlags::default() };
            if cfg.flags != only_renorm || !cfg.method.is_moe() {
                return Err(Error::config(format!("ablation flags apply to malora only, not {}", cfg.method)));
            }
        }
        Ok(match cfg.method {
            Method::Lora => AdapterLayer::Lora(LoraLayer::new(base_w, cfg.rank, cfg.alpha, cfg.dropout, rng)?),
            Method::Asylora => {
                AdapterLayer::Lora(LoraLayer::asymmetric(base_w, cfg.rank, cfg.alpha, cfg.dropout, rng)?)
            }
            Method::Molora | Method::Moasylora => {
                let asy = cfg.method == Method::Moasylora;
                let mc = MoloraConfig {
                    n_experts: cfg.n_experts,
                    rank: if asy { 2 * cfg.rank } else { cfg.rank },
                    top_k: cfg.top_k,
                    alpha: cfg.alpha,
                    a_frozen: asy,
                    shared_init_a: cfg.shared_init_a,
                    renormalize: cfg.flags.renormalize,
                    dropout: cfg.dropout,
                };
                AdapterLayer::Molora(MoloraLayer::new(base_w, &mc, rng)?)
            }
            Method::Malora => {
                let (m, n) = base_w.shape();
                let g = cfg.geometry(n, m)?;
                AdapterLayer::Malora(MaloraLayer::new(base_w, g, cfg.flags, cfg.alpha, cfg.dropout, rng)?)
            }
        })
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, mode: &mut Mode<'_>) -> Result<LayerOutput> {
        match self {
            AdapterLayer::Lora(l) => Ok(LayerOutput { y: l.forward(tape, x, mode)?, route: None }),
            AdapterLayer::Molora(l) => {
                let o = l.forward(tape, x, mode)?;
                Ok(LayerOutput { y: o.y, route: Some(o.route) })
            }
            AdapterLayer::Malora(l) => {
                let o = l.forward(tape, x, mode)?;
                Ok(LayerOutput { y: o.y, route: Some(o.route) })
            }
        }
    }

    pub fn base_w(&self) -> &Matrix {
        match self {
            AdapterLayer::Lora(l) => &l.base_w,
            AdapterLayer::Molora(l) => &l.base_w,
            AdapterLayer::Malora(l) => &l.base_w,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.base_w().cols()
    }

    pub fn out_dim(&self) -> usize {
        self.base_w().rows()
    }

    pub fn is_moe(&self) -> bool {
        !matches!(self, AdapterLayer::Lora(_))
    }

    pub fn n_experts(&self) -> usize {
        match self {
            AdapterLayer::Lora(_) => 1,
            AdapterLayer::Molora(l) => l.n_experts(),
            AdapterLayer::Malora(l) => l.n_experts(),
        }
    }

    /// Dense `ΔW` of expert `t` (the single adapter for non-MoE layers).
    pub fn expert_delta(&self, t: usize) -> Matrix {
        match self {
            AdapterLayer::Lora(l) => l.merge_delta(),
            AdapterLayer::Molora(l) => l.expert_delta(t),
            AdapterLayer::Malora(l) => l.expert_delta(t),
        }
    }

    /// Per-expert down-projections (`rank×n`), the A-side family.
    pub fn down_projections(&self) -> Vec<Matrix> {
        match self {
            AdapterLayer::Lora(l) => vec![l.a.clone()],
            AdapterLayer::Molora(l) => l.experts.iter().map(|e| e.a.clone()).collect(),
            AdapterLayer::Malora(l) => (0..l.n_experts()).map(|t| l.down_projection(t)).collect(),
        }
    }

    /// Per-expert up-projections (`m×rank`), the B-side family.
    pub fn up_projections(&self) -> Vec<Matrix> {
        match self {
            AdapterLayer::Lora(l) => vec![l.b.clone()],
            AdapterLayer::Molora(l) => l.experts.iter().map(|e| e.b.clone()).collect(),
            AdapterLayer::Malora(l) => (0..l.n_experts()).map(|t| l.up_projection(t)).collect(),
        }
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        match self {
            AdapterLayer::Lora(l) => l.params(),
            AdapterLayer::Molora(l) => l.params(),
            AdapterLayer::Malora(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        match self {
            AdapterLayer::Lora(l) => l.params_mut(),
            AdapterLayer::Molora(l) => l.params_mut(),
            AdapterLayer::Malora(l) => l.params_mut(),
        }
    }

    /// Trainable scalar count of this layer (router included).
    pub fn trainable_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}
