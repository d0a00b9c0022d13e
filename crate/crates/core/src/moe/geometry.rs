use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank bookkeeping for a MALoRA layer.
///
/// The shared subspace has rank `d = round(λ·r·N)` and each expert's
/// up-projection is expanded to `r̄ = r + round((1−λ)·r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaloraGeometry {
    pub n_experts: usize,
    pub base_rank: usize,
    pub lambda: f64,
    pub shared_rank: usize,
    pub expanded_rank: usize,
    pub beta: f64,
    pub top_k: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// `(d, r̄)` from `derive_geometry`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DerivedRanks {
    pub shared_rank: usize,
    pub expanded_rank: usize,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// `d = round(λrN)`, `r̄ = r + round((1−λ)r)`, rounding half up.
pub fn derive_geometry(base_rank: usize, n_experts: usize, lambda: f64) -> Result<DerivedRanks> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::config(format!("lambda must be in (0, 1], got {lambda}")));
    }
    if base_rank == 0 || n_experts == 0 {
        return Err(Error::config("rank and expert count must be positive"));
    }
    let d = round_half_up(lambda * (base_rank * n_experts) as f64);
    let r_bar = base_rank + round_half_up((1.0 - lambda) * base_rank as f64);
    if d == 0 {
        return Err(Error::config(format!("lambda {lambda} gives a zero shared rank")));
    }
    Ok(DerivedRanks { shared_rank: d, expanded_rank: r_bar })
}

/// Generalization-bound ratio `sqrt(r̄ / r)` of an expanded expert over a plain one.
pub fn bound_ratio(expanded_rank: usize, base_rank: usize) -> Result<f64> {
    if base_rank == 0 {
        return Err(Error::config("base rank must be at least 1"));
    }
    Ok((expanded_rank as f64 / base_rank as f64).sqrt())
}

impl MaloraGeometry {
    /// Geometry with `d` and `r̄` derived from `λ`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_lambda(
        base_rank: usize,
        n_experts: usize,
        lambda: f64,
        beta: f64,
        top_k: usize,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let ranks = derive_geometry(base_rank, n_experts, lambda)?;
        let g = MaloraGeometry {
            n_experts,
            base_rank,
            lambda,
            shared_rank: ranks.shared_rank,
            expanded_rank: ranks.expanded_rank,
            beta,
            top_k,
            in_dim,
            out_dim,
        };
        g.validate()?;
        Ok(g)
    }

    /// Geometry with `d` and `r̄` given directly; `λ` is back-derived as `d / (rN)`.
    #[allow(clippy::too_many_arguments)]
    pub fn explicit(
        base_rank: usize,
        n_experts: usize,
        shared_rank: usize,
        expanded_rank: usize,
        beta: f64,
        top_k: usize,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        if base_rank == 0 || n_experts == 0 {
            return Err(Error::config("rank and expert count must be positive"));
        }
        let g = MaloraGeometry {
            n_experts,
            base_rank,
            lambda: shared_rank as f64 / (base_rank * n_experts) as f64,
            shared_rank,
            expanded_rank,
            beta,
            top_k,
            in_dim,
            out_dim,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.base_rank == 0 {
            return Err(Error::config("rank and expert count must be positive"));
        }
        if self.shared_rank == 0 || self.expanded_rank == 0 {
            return Err(Error::config("shared rank d and expanded rank r_bar must be at least 1"));
        }
        if self.top_k > self.n_experts {
            return Err(Error::config(format!("top_k {} exceeds n_experts {}", self.top_k, self.n_experts)));
        }
        if self.expanded_rank > self.shared_rank {
            return Err(Error::config(format!(
                "r_bar {} exceeds shared rank d {}",
                self.expanded_rank, self.shared_rank
            )));
        }
        if self.in_dim > 0 && self.shared_rank > self.in_dim {
            return Err(Error::config(format!("shared rank d {} exceeds input dim {}", self.shared_rank, self.in_dim)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config(format!("beta must be positive and finite, got {}", self.beta)));
        }
        Ok(())
    }

    /// Same geometry with a different `β`.
    pub fn with_beta(&self, beta: f64) -> Self {
        MaloraGeometry { beta, ..*self }
    }

    pub fn bound_ratio(&self) -> f64 {
        bound_ratio(self.expanded_rank, self.base_rank).expect("validated geometry")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn main_config() {
        let r = derive_geometry(8, 8, 0.5).unwrap();
        assert_eq!(r, DerivedRanks { shared_rank: 32, expanded_rank: 12 });
    }

    #[test]
    fn lambda_one_degenerates() {
        let r = derive_geometry(8, 8, 1.0).unwrap();
        assert_eq!(r, DerivedRanks { shared_rank: 64, expanded_rank: 8 });
    }

    #[test]
    fn small_variant_back_derives_lambda() {
        let g = MaloraGeometry::explicit(8, 8, 22, 8, 1.0, 2, 4096, 4096).unwrap();
        assert!((g.lambda - 0.34375).abs() < 1e-15);
        assert!((g.lambda - 0.34).abs() < 0.01);
    }

    #[test]
    fn lambda_out_of_range() {
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(derive_geometry(8, 8, bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn rounds_half_up() {
        // λrN = 0.3125·4·2 = 2.5 → 3 ; (1−λ)r = 2.75 → 3
        let r = derive_geometry(4, 2, 0.3125).unwrap();
        assert_eq!(r, DerivedRanks { shared_rank: 3, expanded_rank: 7 });
    }

    #[test]
    fn ratios() {
        assert!((bound_ratio(12, 8).unwrap() - 1.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(bound_ratio(8, 8).unwrap(), 1.0);
        assert!((bound_ratio(16, 8).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(bound_ratio(4, 0).is_err());
    }

    #[test]
    fn invariants_enforced() {
        assert!(MaloraGeometry::explicit(8, 8, 32, 12, 1.0, 9, 64, 64).is_err());
        assert!(MaloraGeometry::explicit(8, 8, 10, 12, 1.0, 2, 64, 64).is_err());
        assert!(MaloraGeometry::explicit(8, 8, 32, 12, 0.0, 2, 64, 64).is_err());
        assert!(MaloraGeometry::explicit(8, 8, 32, 12, 1.0, 2, 16, 64).is_err());
    }
}
