//! MALoRA: experts share a down-projection subspace `S_A` and keep a small
//! coefficient matrix `P_t` plus an expanded-rank up-projection `B̄_t`, so
//! that `ΔW_t = (α/r̄)·B̄_t·P_t·S_A`.
//!
//! The forward pass projects the whole batch onto `span(S_A)` once and only
//! then dispatches the `d`-dimensional codes to the selected experts.

use serde::{Deserialize, Serialize};

use super::geometry::MaloraGeometry;
use super::router::{route, Route};
use super::{gated_sum, MoeOutput};
use crate::adapters::{Mode, ParamMut, ParamRef};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, svd_thin, Matrix, Rng};

/// Structural switches and freeze flags, including the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaloraFlags {
    /// Keep the shared subspace (`S_A`, or its per-expert / mirrored analogue) fixed.
    pub freeze_s_a: bool,
    /// Keep every `P_t` fixed.
    pub freeze_p_t: bool,
    /// Mirror the structure onto the up-projection: `ΔW_t = S_B·P_t·A_t`.
    pub decompose_b_side: bool,
    /// When false, each expert gets its own rank-`d/N` down-projection.
    pub shared_subspace: bool,
    /// Symmetric ablation: no rank expansion, `r̄ = r`.
    pub no_asymmetry: bool,
    /// Renormalize the top-K gates to sum to one.
    pub renormalize: bool,
}

impl Default for MaloraFlags {
    fn default() -> Self {
        MaloraFlags {
            freeze_s_a: false,
            freeze_p_t: false,
            decompose_b_side: false,
            shared_subspace: true,
            no_asymmetry: false,
            renormalize: false,
        }
    }
}

/// How the down/up factors are arranged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    /// `B̄_t · P_t · S_A`, one `S_A` (d×n) for all experts.
    Shared,
    /// `B̄_t · P_t · S_t`, `S_t` is (d/N)×n per expert.
    PerExpert,
    /// `S_B · P_t · A_t`, one `S_B` (m×d); `A_t` (r̄×n) starts at zero.
    DecomposeB,
}

#[derive(Clone, Debug)]
pub struct MaloraLayer {
    pub base_w: Matrix,
    /// One entry for `Shared`/`DecomposeB`, N entries for `PerExpert`.
    pub subspaces: Vec<Matrix>,
    /// `P_t`: r̄×d (or r̄×d/N, or d×r̄ when mirrored).
    pub coeffs: Vec<Matrix>,
    /// `B̄_t` (m×r̄), or `A_t` (r̄×n) when mirrored. Zero at init.
    pub experts: Vec<Matrix>,
    pub router_w: Matrix,
    pub geometry: MaloraGeometry,
    pub flags: MaloraFlags,
    pub alpha: f64,
    pub dropout: f64,
}

/// SVD-crop initialization of the shared subspace and coefficients.
///
/// For each expert `t`, `K_t = kaiming_uniform(d, n)` is decomposed as
/// `U_t Σ_t V_t`; `P_t` is the first `r̄` rows of `U_t Σ_t` divided by `β`,
/// and `S_A = β·V_0`. Hence `P_0·S_A` reproduces the first `r̄` rows of `K_0`.
pub fn malora_init(geometry: &MaloraGeometry, rng: &mut Rng) -> Result<(Matrix, Vec<Matrix>)> {
    geometry.validate()?;
    let (d, n, r_bar, beta) = (geometry.shared_rank, geometry.in_dim, geometry.expanded_rank, geometry.beta);
    let mut coeffs = Vec::with_capacity(geometry.n_experts);
    let mut shared = None;
    for t in 0..geometry.n_experts {
        let k = kaiming_uniform(d, n, rng)?;
        let svd = svd_thin(&k)?;
        coeffs.push(svd.u_sigma().slice_rows(0, r_bar).scale(1.0 / beta));
        if t == 0 {
            shared = Some(svd.v.scale(beta));
        }
    }
    Ok((shared.expect("n_experts >= 1"), coeffs))
}

/// Per-expert subspaces of rank `d_e` for the unshared ablation.
fn per_expert_init(geometry: &MaloraGeometry, d_e: usize, rng: &mut Rng) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let (n, r_bar, beta) = (geometry.in_dim, geometry.expanded_rank, geometry.beta);
    let mut subspaces = Vec::new();
    let mut coeffs = Vec::new();
    for _ in 0..geometry.n_experts {
        let k = kaiming_uniform(r_bar, n, rng)?;
        let svd = svd_thin(&k)?;
        coeffs.push(svd.u_sigma().slice_cols(0, d_e).scale(1.0 / beta));
        subspaces.push(svd.v.slice_rows(0, d_e).scale(beta));
    }
    Ok((subspaces, coeffs))
}

/// Mirrored initialization: `K_t = kaiming_uniform(m, d) = U_t Σ_t V_t`,
/// `S_B = β·U_0`, `P_t = (Σ_t V_t)[:, :r̄] / β`.
fn mirrored_init(geometry: &MaloraGeometry, rng: &mut Rng) -> Result<(Matrix, Vec<Matrix>)> {
    let (d, m, r_bar, beta) = (geometry.shared_rank, geometry.out_dim, geometry.expanded_rank, geometry.beta);
    if d > m {
        return Err(Error::config(format!("decomposing B needs d {d} <= out dim {m}")));
    }
    let mut shared = None;
    let mut coeffs = Vec::new();
    for t in 0..geometry.n_experts {
        let k = kaiming_uniform(m, d, rng)?;
        let svd = svd_thin(&k)?;
        let sv = Matrix::from_fn(d, d, |i, j| svd.sigma[i] * svd.v.get(i, j));
        coeffs.push(sv.slice_cols(0, r_bar).scale(1.0 / beta));
        if t == 0 {
            shared = Some(svd.u.scale(beta));
        }
    }
    Ok((shared.expect("n_experts >= 1"), coeffs))
}

impl MaloraLayer {
    /// Builds a layer at initialization (`B̄_t = 0`). `alpha` defaults to `2r̄`.
    pub fn new(
        base_w: Matrix,
        geometry: MaloraGeometry,
        flags: MaloraFlags,
        alpha: Option<f64>,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (m, n) = base_w.shape();
        if geometry.in_dim != n || geometry.out_dim != m {
            return Err(Error::config(format!(
                "geometry dims {}x{} do not match base weight {m}x{n}",
                geometry.out_dim, geometry.in_dim
            )));
        }
        geometry.validate()?;
        if flags.decompose_b_side && !flags.shared_subspace {
            return Err(Error::config("decompose_b_side and shared_subspace=false are mutually exclusive"));
        }
        if flags.no_asymmetry && geometry.expanded_rank != geometry.base_rank {
            return Err(Error::config("no_asymmetry requires r_bar == r"));
        }
        let r_bar = geometry.expanded_rank;
        let (subspaces, coeffs, experts) = match Self::structure_of(&flags) {
            Structure::Shared => {
                let (s_a, coeffs) = malora_init(&geometry, rng)?;
                let ups = (0..geometry.n_experts).map(|_| Matrix::zeros(m, r_bar)).collect();
                (vec![s_a], coeffs, ups)
            }
            Structure::PerExpert => {
                let d_e = geometry.shared_rank / geometry.n_experts;
                if d_e == 0 || d_e > r_bar {
                    return Err(Error::config(format!(
                        "unshared subspace rank d/N = {d_e} must be in [1, r_bar = {r_bar}]"
                    )));
                }
                let (subs, coeffs) = per_expert_init(&geometry, d_e, rng)?;
                let ups = (0..geometry.n_experts).map(|_| Matrix::zeros(m, r_bar)).collect();
                (subs, coeffs, ups)
            }
            Structure::DecomposeB => {
                let (s_b, coeffs) = mirrored_init(&geometry, rng)?;
                let downs = (0..geometry.n_experts).map(|_| Matrix::zeros(r_bar, n)).collect();
                (vec![s_b], coeffs, downs)
            }
        };
        let router_w = kaiming_uniform(geometry.n_experts, n, rng)?;
        Ok(MaloraLayer {
            base_w,
            subspaces,
            coeffs,
            experts,
            router_w,
            geometry,
            flags,
            alpha: alpha.unwrap_or(2.0 * r_bar as f64),
            dropout,
        })
    }

    fn structure_of(flags: &MaloraFlags) -> Structure {
        if flags.decompose_b_side {
            Structure::DecomposeB
        } else if flags.shared_subspace {
            Structure::Shared
        } else {
            Structure::PerExpert
        }
    }

    pub fn structure(&self) -> Structure {
        Self::structure_of(&self.flags)
    }

    pub fn n_experts(&self) -> usize {
        self.geometry.n_experts
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.geometry.expanded_rank as f64
    }

    pub fn in_dim(&self) -> usize {
        self.base_w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.base_w.rows()
    }

    fn subspace_name(&self, i: usize) -> String {
        match self.structure() {
            Structure::Shared => "s_a".into(),
            Structure::PerExpert => format!("s_a.{i}"),
            Structure::DecomposeB => "s_b".into(),
        }
    }

    fn expert_name(&self, t: usize) -> String {
        match self.structure() {
            Structure::DecomposeB => format!("a.{t}"),
            _ => format!("b_bar.{t}"),
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, mode: &mut Mode<'_>) -> Result<MoeOutput> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("malora_forward", x.shape(), self.base_w.shape()));
        }
        let w = tape.param("base_w", &self.base_w, false);
        let router = tape.param("router", &self.router_w, true);
        let subs: Vec<Var> = self
            .subspaces
            .iter()
            .enumerate()
            .map(|(i, s)| tape.param(self.subspace_name(i), s, !self.flags.freeze_s_a))
            .collect();
        let coeffs: Vec<Var> = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(t, p)| tape.param(format!("p.{t}"), p, !self.flags.freeze_p_t))
            .collect();
        let experts: Vec<Var> =
            self.experts.iter().enumerate().map(|(t, e)| tape.param(self.expert_name(t), e, true)).collect();

        let base = tape.matmul_t(x, w)?;
        let r: Route = route(tape, router, x, self.geometry.top_k, self.flags.renormalize)?;
        let xd = mode.dropout(tape, x, self.dropout)?;
        let batch = x.rows();

        let delta = match self.structure() {
            Structure::Shared => {
                // One projection onto span(S_A) for the whole batch.
                let h0 = tape.matmul_t(xd, subs[0])?;
                gated_sum(tape, &r, batch, |tape, t, rows| {
                    let ht = tape.gather_rows(h0, rows)?;
                    let u = tape.matmul_t(ht, coeffs[t])?;
                    tape.matmul_t(u, experts[t])
                })?
            }
            Structure::PerExpert => gated_sum(tape, &r, batch, |tape, t, rows| {
                let xt = tape.gather_rows(xd, rows)?;
                let h = tape.matmul_t(xt, subs[t])?;
                let u = tape.matmul_t(h, coeffs[t])?;
                tape.matmul_t(u, experts[t])
            })?,
            Structure::DecomposeB => {
                // Gate in the d-dimensional code space, lift once through S_B.
                let codes = gated_sum(tape, &r, batch, |tape, t, rows| {
                    let xt = tape.gather_rows(xd, rows)?;
                    let h = tape.matmul_t(xt, experts[t])?;
                    tape.matmul_t(h, coeffs[t])
                })?;
                match codes {
                    Some(c) => Some(tape.matmul_t(c, subs[0])?),
                    None => None,
                }
            }
        };
        let y = match delta {
            Some(d) => {
                let d = tape.scale(d, self.scaling())?;
                tape.add(base, d)?
            }
            None => base,
        };
        Ok(MoeOutput { y, route: r })
    }

    /// Dense `ΔW_t` including the `α/r̄` scale.
    pub fn expert_delta(&self, t: usize) -> Matrix {
        let raw = match self.structure() {
            Structure::Shared => self.experts[t].matmul(&self.coeffs[t]).and_then(|bp| bp.matmul(&self.subspaces[0])),
            Structure::PerExpert => {
                self.experts[t].matmul(&self.coeffs[t]).and_then(|bp| bp.matmul(&self.subspaces[t]))
            }
            Structure::DecomposeB => {
                self.subspaces[0].matmul(&self.coeffs[t]).and_then(|sp| sp.matmul(&self.experts[t]))
            }
        };
        raw.expect("conformable factors").scale(self.scaling())
    }

    /// Effective down-projection of expert `t` (rows span its input subspace).
    pub fn down_projection(&self, t: usize) -> Matrix {
        match self.structure() {
            Structure::Shared => self.coeffs[t].matmul(&self.subspaces[0]),
            Structure::PerExpert => self.coeffs[t].matmul(&self.subspaces[t]),
            Structure::DecomposeB => Ok(self.experts[t].clone()),
        }
        .expect("conformable factors")
    }

    /// Effective up-projection of expert `t` (m×r̄).
    pub fn up_projection(&self, t: usize) -> Matrix {
        match self.structure() {
            Structure::DecomposeB => self.subspaces[0].matmul(&self.coeffs[t]).expect("conformable factors"),
            _ => self.experts[t].clone(),
        }
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![
            ParamRef { name: "base_w".into(), value: &self.base_w, trainable: false },
            ParamRef { name: "router".into(), value: &self.router_w, trainable: true },
        ];
        for (i, s) in self.subspaces.iter().enumerate() {
            out.push(ParamRef { name: self.subspace_name(i), value: s, trainable: !self.flags.freeze_s_a });
        }
        for (t, p) in self.coeffs.iter().enumerate() {
            out.push(ParamRef { name: format!("p.{t}"), value: p, trainable: !self.flags.freeze_p_t });
        }
        for (t, e) in self.experts.iter().enumerate() {
            out.push(ParamRef { name: self.expert_name(t), value: e, trainable: true });
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let sub_names: Vec<String> = (0..self.subspaces.len()).map(|i| self.subspace_name(i)).collect();
        let expert_names: Vec<String> = (0..self.experts.len()).map(|t| self.expert_name(t)).collect();
        let flags = self.flags;
        let mut out = vec![
            ParamMut { name: "base_w".into(), value: &mut self.base_w, trainable: false },
            ParamMut { name: "router".into(), value: &mut self.router_w, trainable: true },
        ];
        for (s, name) in self.subspaces.iter_mut().zip(sub_names) {
            out.push(ParamMut { name, value: s, trainable: !flags.freeze_s_a });
        }
        for (t, p) in self.coeffs.iter_mut().enumerate() {
            out.push(ParamMut { name: format!("p.{t}"), value: p, trainable: !flags.freeze_p_t });
        }
        for (e, name) in self.experts.iter_mut().zip(expert_names) {
            out.push(ParamMut { name, value: e, trainable: true });
        }
        out
    }
}
