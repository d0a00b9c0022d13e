use serde::{Deserialize, Serialize};

use super::router::{route, Route};
use super::{gated_sum, MoeOutput};
use crate::adapters::{Mode, ParamMut, ParamRef};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoloraConfig {
    pub n_experts: usize,
    /// Per-expert rank (already doubled for MoAsyLoRA).
    pub rank: usize,
    pub top_k: usize,
    /// Defaults to `2·rank`.
    pub alpha: Option<f64>,
    /// Freeze every `A_t` (MoAsyLoRA).
    pub a_frozen: bool,
    /// Initialize every `A_t` from the same draw.
    pub shared_init_a: bool,
    pub renormalize: bool,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct LoraExpert {
    /// r×n
    pub a: Matrix,
    /// m×r, zero at init
    pub b: Matrix,
}

/// Mixture of LoRA experts behind a top-K softmax router.
#[derive(Clone, Debug)]
pub struct MoloraLayer {
    pub base_w: Matrix,
    pub experts: Vec<LoraExpert>,
    /// N×n gating weights.
    pub router_w: Matrix,
    pub alpha: f64,
    pub top_k: usize,
    pub a_frozen: bool,
    pub renormalize: bool,
    pub dropout: f64,
}

impl MoloraLayer {
    pub fn new(base_w: Matrix, cfg: &MoloraConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.n_experts == 0 || cfg.rank == 0 {
            return Err(Error::config("MoLoRA needs at least one expert of rank >= 1"));
        }
        if cfg.top_k > cfg.n_experts {
            return Err(Error::config(format!("top_k {} exceeds n_experts {}", cfg.top_k, cfg.n_experts)));
        }
        let (m, n) = base_w.shape();
        let mut experts = Vec::with_capacity(cfg.n_experts);
        let shared_a = if cfg.shared_init_a { Some(kaiming_uniform(cfg.rank, n, rng)?) } else { None };
        for _ in 0..cfg.n_experts {
            let a = match &shared_a {
                Some(a) => a.clone(),
                None => kaiming_uniform(cfg.rank, n, rng)?,
            };
            experts.push(LoraExpert { a, b: Matrix::zeros(m, cfg.rank) });
        }
        let router_w = kaiming_uniform(cfg.n_experts, n, rng)?;
        Ok(MoloraLayer {
            base_w,
            experts,
            router_w,
            alpha: cfg.alpha.unwrap_or(2.0 * cfg.rank as f64),
            top_k: cfg.top_k,
            a_frozen: cfg.a_frozen,
            renormalize: cfg.renormalize,
            dropout: cfg.dropout,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn rank(&self) -> usize {
        self.experts[0].a.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn in_dim(&self) -> usize {
        self.base_w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.base_w.rows()
    }

    /// Routes, evaluates only the selected experts on their rows, and adds
    /// the gated sum to the frozen base output.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, mode: &mut Mode<'_>) -> Result<MoeOutput> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("molora_forward", x.shape(), self.base_w.shape()));
        }
        let w = tape.param("base_w", &self.base_w, false);
        let router = tape.param("router", &self.router_w, true);
        let mut vars: Vec<(Var, Var)> = Vec::with_capacity(self.experts.len());
        for (t, e) in self.experts.iter().enumerate() {
            let a = tape.param(format!("experts.{t}.a"), &e.a, !self.a_frozen);
            let b = tape.param(format!("experts.{t}.b"), &e.b, true);
            vars.push((a, b));
        }
        let base = tape.matmul_t(x, w)?;
        let r: Route = route(tape, router, x, self.top_k, self.renormalize)?;
        let xd = mode.dropout(tape, x, self.dropout)?;
        let batch = x.rows();
        let delta = gated_sum(tape, &r, batch, |tape, t, rows| {
            let (a, b) = vars[t];
            let xt = tape.gather_rows(xd, rows)?;
            let h = tape.matmul_t(xt, a)?;
            tape.matmul_t(h, b)
        })?;
        let y = match delta {
            Some(d) => {
                let d = tape.scale(d, self.scaling())?;
                tape.add(base, d)?
            }
            None => base,
        };
        Ok(MoeOutput { y, route: r })
    }

    /// Dense `(α/r)·B_t·A_t`.
    pub fn expert_delta(&self, t: usize) -> Matrix {
        let e = &self.experts[t];
        e.b.matmul(&e.a).expect("conformable").scale(self.scaling())
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![
            ParamRef { name: "base_w".into(), value: &self.base_w, trainable: false },
            ParamRef { name: "router".into(), value: &self.router_w, trainable: true },
        ];
        for (t, e) in self.experts.iter().enumerate() {
            out.push(ParamRef { name: format!("experts.{t}.a"), value: &e.a, trainable: !self.a_frozen });
            out.push(ParamRef { name: format!("experts.{t}.b"), value: &e.b, trainable: true });
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let a_trainable = !self.a_frozen;
        let mut out = vec![
            ParamMut { name: "base_w".into(), value: &mut self.base_w, trainable: false },
            ParamMut { name: "router".into(), value: &mut self.router_w, trainable: true },
        ];
        for (t, e) in self.experts.iter_mut().enumerate() {
            out.push(ParamMut { name: format!("experts.{t}.a"), value: &mut e.a, trainable: a_trainable });
            out.push(ParamMut { name: format!("experts.{t}.b"), value: &mut e.b, trainable: true });
        }
        out
    }
}
