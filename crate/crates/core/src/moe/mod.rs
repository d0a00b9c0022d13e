//! Mixture-of-experts adapters: routing, MoLoRA, MALoRA, rank geometry and budgets.

mod budget;
mod geometry;
mod layer;
mod malora;
mod molora;
mod router;

pub use budget::{
    flop_budget, llama2_7b_sites, param_budget, FlopBudget, Method, MethodSpec, ParamBudget, Site, LLAMA2_7B_LAYERS,
    LLAMA2_7B_PARAMS, LLAMA2_7B_SITES,
};
pub use geometry::{bound_ratio, derive_geometry, DerivedRanks, MaloraGeometry};
pub use layer::{AdapterConfig, AdapterLayer, LayerOutput};
pub use malora::{malora_init, MaloraFlags, MaloraLayer, Structure};
pub use molora::{LoraExpert, MoloraConfig, MoloraLayer};
pub use router::{balance_loss, balance_loss_value, route, router_entropy, top_k_indices, Route, RouterStats};

use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// Output of an MoE forward pass.
#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub y: Var,
    pub route: Route,
}

/// `Σ_t scatter(g_t ⊙ expert_t(rows_t))` over experts with at least one row.
///
/// Returns `None` when no expert is selected anywhere (K = 0).
pub(crate) fn gated_sum<'a>(
    tape: &mut Tape<'a>,
    route: &Route,
    batch: usize,
    mut expert: impl FnMut(&mut Tape<'a>, usize, &[usize]) -> Result<Var>,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (t, rows) in route.assignments.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let y = expert(tape, t, rows)?;
        let g_all = tape.select_col(route.gates, t)?;
        let g = tape.gather_rows(g_all, rows)?;
        let y = tape.row_scale(y, g)?;
        let y = tape.scatter_rows(y, rows, batch)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    Ok(acc)
}
