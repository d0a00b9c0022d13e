use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adapter method families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lora,
    Asylora,
    Molora,
    Moasylora,
    Malora,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Lora, Method::Asylora, Method::Molora, Method::Moasylora, Method::Malora];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Asylora => "asylora",
            Method::Molora => "molora",
            Method::Moasylora => "moasylora",
            Method::Malora => "malora",
        }
    }

    pub fn is_moe(self) -> bool {
        matches!(self, Method::Molora | Method::Moasylora | Method::Malora)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One adapted linear site, `W ∈ ℝ^{m×n}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub out_dim: u64,
    pub in_dim: u64,
}

impl Site {
    pub const fn new(out_dim: u64, in_dim: u64) -> Self {
        Site { out_dim, in_dim }
    }
}

/// Per-layer adapted sites of LLaMA-2 7B: Q, K, V, Up, Down, Gate.
pub const LLAMA2_7B_SITES: [Site; 6] = [
    Site::new(4096, 4096),
    Site::new(4096, 4096),
    Site::new(4096, 4096),
    Site::new(11008, 4096),
    Site::new(4096, 11008),
    Site::new(11008, 4096),
];
pub const LLAMA2_7B_LAYERS: usize = 32;
/// Total parameter count of the LLaMA-2 7B base model.
pub const LLAMA2_7B_PARAMS: u64 = 6_738_415_616;

/// All adapted sites of the 7B model, layer by layer.
pub fn llama2_7b_sites() -> Vec<Site> {
    (0..LLAMA2_7B_LAYERS).flat_map(|_| LLAMA2_7B_SITES).collect()
}

/// Rank configuration of one method, enough to count parameters and FLOPs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    /// `r`; for the asymmetric variants this is the base rank before doubling.
    pub rank: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// `d` (MALoRA only).
    pub shared_rank: usize,
    /// `r̄` (MALoRA only).
    pub expanded_rank: usize,
}

impl MethodSpec {
    pub fn lora(rank: usize) -> Self {
        MethodSpec { method: Method::Lora, rank, n_experts: 1, top_k: 1, shared_rank: 0, expanded_rank: 0 }
    }

    pub fn asylora(rank: usize) -> Self {
        MethodSpec { method: Method::Asylora, ..Self::lora(rank) }
    }

    pub fn molora(n_experts: usize, rank: usize, top_k: usize) -> Self {
        MethodSpec { method: Method::Molora, rank, n_experts, top_k, shared_rank: 0, expanded_rank: 0 }
    }

    pub fn moasylora(n_experts: usize, rank: usize, top_k: usize) -> Self {
        MethodSpec { method: Method::Moasylora, ..Self::molora(n_experts, rank, top_k) }
    }

    pub fn malora(n_experts: usize, rank: usize, shared_rank: usize, expanded_rank: usize, top_k: usize) -> Self {
        MethodSpec { method: Method::Malora, rank, n_experts, top_k, shared_rank, expanded_rank }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("rank must be at least 1"));
        }
        if self.method.is_moe() {
            if self.n_experts == 0 {
                return Err(Error::config("MoE methods need at least one expert"));
            }
            if self.top_k > self.n_experts {
                return Err(Error::config(format!("top_k {} exceeds n_experts {}", self.top_k, self.n_experts)));
            }
        }
        if self.method == Method::Malora {
            if self.shared_rank == 0 || self.expanded_rank == 0 {
                return Err(Error::config("MALoRA needs d >= 1 and r_bar >= 1"));
            }
            if self.expanded_rank > self.shared_rank {
                return Err(Error::config(format!(
                    "r_bar {} exceeds shared rank d {}",
                    self.expanded_rank, self.shared_rank
                )));
            }
        }
        Ok(())
    }
}

/// Parameter counts summed over sites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBudget {
    /// Trainable adapter parameters including the router.
    pub trainable: u64,
    /// Adapter-owned frozen parameters (AsyLoRA down-projections).
    pub frozen: u64,
    /// Router share of `trainable`.
    pub router: u64,
}

impl ParamBudget {
    pub fn adapters(&self) -> u64 {
        self.trainable - self.router
    }

    pub fn percent_of(&self, base_params: u64) -> f64 {
        100.0 * self.trainable as f64 / base_params as f64
    }
}

/// Exact trainable/frozen counts over the given sites.
pub fn param_budget(spec: &MethodSpec, sites: &[Site]) -> Result<ParamBudget> {
    spec.validate()?;
    let r = spec.rank as u64;
    let big_n = spec.n_experts as u64;
    let mut out = ParamBudget::default();
    for s in sites {
        let (m, n) = (s.out_dim, s.in_dim);
        let (trainable, frozen, router) = match spec.method {
            Method::Lora => (r * (n + m), 0, 0),
            Method::Asylora => (m * 2 * r, 2 * r * n, 0),
            Method::Molora => (big_n * (r * n + m * r), 0, big_n * n),
            Method::Moasylora => (big_n * m * 2 * r, big_n * 2 * r * n, big_n * n),
            Method::Malora => {
                let d = spec.shared_rank as u64;
                let r_bar = spec.expanded_rank as u64;
                (d * n + big_n * (r_bar * d + m * r_bar), 0, big_n * n)
            }
        };
        out.trainable += trainable + router;
        out.frozen += frozen;
        out.router += router;
    }
    Ok(out)
}

/// Forward multiply-add counts of the adapter path (base and router excluded).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBudget {
    pub per_row: u64,
    pub total: u64,
}

pub fn flop_budget(spec: &MethodSpec, sites: &[Site], batch: u64) -> Result<FlopBudget> {
    spec.validate()?;
    let r = spec.rank as u64;
    let k = spec.top_k as u64;
    let mut per_row = 0;
    for s in sites {
        let (m, n) = (s.out_dim, s.in_dim);
        per_row += match spec.method {
            Method::Lora => r * (n + m),
            Method::Asylora => 2 * r * (n + m),
            Method::Molora => k * (r * n + m * r),
            Method::Moasylora => k * 2 * r * (n + m),
            Method::Malora => {
                let d = spec.shared_rank as u64;
                let r_bar = spec.expanded_rank as u64;
                d * n + k * (r_bar * d + m * r_bar)
            }
        };
    }
    Ok(FlopBudget { per_row, total: per_row * batch })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQUARE: [Site; 1] = [Site::new(4096, 4096)];

    #[test]
    fn square_site_counts() {
        let mo = param_budget(&MethodSpec::molora(8, 8, 2), &SQUARE).unwrap();
        assert_eq!(mo.adapters(), 524_288);
        assert_eq!(mo.router, 32_768);

        let small = param_budget(&MethodSpec::malora(8, 8, 22, 8, 2), &SQUARE).unwrap();
        assert_eq!(small.adapters(), 353_664);
        let reduction = 1.0 - small.adapters() as f64 / mo.adapters() as f64;
        assert!((reduction - 0.3254).abs() < 1e-4);

        let main = param_budget(&MethodSpec::malora(8, 8, 32, 12, 2), &SQUARE).unwrap();
        assert_eq!(main.adapters(), 527_360);
        let big = param_budget(&MethodSpec::molora(8, 16, 2), &SQUARE).unwrap();
        assert_eq!(big.adapters(), 1_048_576);
        // P_t share stays under one percent
        let coeffs = 8 * 12 * 32;
        assert!((coeffs as f64) < 0.01 * main.adapters() as f64);
    }

    #[test]
    fn asylora_matches_lora_trainable() {
        let l = param_budget(&MethodSpec::lora(64), &SQUARE).unwrap();
        let a = param_budget(&MethodSpec::asylora(64), &SQUARE).unwrap();
        assert_eq!(l.trainable, a.trainable);
        assert_eq!(a.frozen, 524_288);
    }

    #[test]
    fn empty_site_list_is_zero() {
        for m in Method::ALL {
            let spec = MethodSpec { method: m, ..MethodSpec::malora(8, 8, 32, 12, 2) };
            assert_eq!(param_budget(&spec, &[]).unwrap(), ParamBudget::default());
        }
    }

    #[test]
    fn llama_percentages() {
        let sites = llama2_7b_sites();
        let pct = |s: MethodSpec| param_budget(&s, &sites).unwrap().percent_of(LLAMA2_7B_PARAMS);
        assert!((pct(MethodSpec::lora(64)) - 2.12).abs() < 0.01);
        assert!((pct(MethodSpec::molora(8, 8, 2)) - 2.24).abs() < 0.01);
        assert!((pct(MethodSpec::malora(8, 8, 32, 12, 2)) - 2.36).abs() < 0.01);
        assert!((pct(MethodSpec::malora(8, 8, 22, 8, 2)) - 1.62).abs() < 0.01);
    }

    #[test]
    fn flops() {
        let mo = flop_budget(&MethodSpec::molora(8, 8, 2), &SQUARE, 1).unwrap();
        assert_eq!(mo.per_row, 131_072);
        let ma = flop_budget(&MethodSpec::malora(8, 8, 32, 12, 2), &SQUARE, 3).unwrap();
        assert_eq!(ma.per_row, 32 * 4096 + 2 * (12 * 32 + 4096 * 12));
        assert_eq!(ma.total, 3 * ma.per_row);
        let k0 = flop_budget(&MethodSpec::malora(8, 8, 32, 12, 0), &SQUARE, 1).unwrap();
        assert_eq!(k0.per_row, 32 * 4096);
    }

    #[test]
    fn lambda_one_gives_no_flop_benefit() {
        // λ = 1: d = rN, r̄ = r
        for (n, k) in [(4, 1), (8, 2), (16, 4)] {
            let mo = flop_budget(&MethodSpec::molora(n, 8, k), &SQUARE, 1).unwrap();
            let ma = flop_budget(&MethodSpec::malora(n, 8, 8 * n, 8, k), &SQUARE, 1).unwrap();
            assert!(ma.per_row >= mo.per_row);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("dora".parse::<Method>().is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(param_budget(&MethodSpec::lora(0), &SQUARE).is_err());
        assert!(param_budget(&MethodSpec::molora(2, 8, 3), &SQUARE).is_err());
        assert!(param_budget(&MethodSpec::malora(8, 8, 8, 12, 2), &SQUARE).is_err());
    }
}
