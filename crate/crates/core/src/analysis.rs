//! Expert-similarity and gradient-scaling diagnostics.
//!
//! - [`cca_similarity`] scores two row spaces by their mean canonical correlation.
//! - [`concat_spectrum`] stacks homologous expert matrices and reports how much
//!   of the spectrum is dominant.
//! - [`beta_grad_probe`] measures how `β` splits gradient magnitude between the
//!   coefficients `P_t` and the shared subspace `S_A`.

use std::io::Write;

use serde::Serialize;

use crate::adapters::Mode;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::linalg::{orthonormal_basis, svd_thin, Matrix, Rng};
use crate::moe::{AdapterLayer, MaloraFlags, MaloraGeometry, MaloraLayer};

/// Singular values below this fraction of the largest count as zero.
pub const SPECTRUM_RANK_TOL: f64 = 1e-9;

/// Mean canonical correlation between the row spaces of `x` and `y`.
///
/// Both inputs must have full row rank and the same column count.
pub fn cca_similarity(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.cols() != y.cols() {
        return Err(Error::shape("cca_similarity", x.shape(), y.shape()));
    }
    let qx = orthonormal_basis(x)?;
    let qy = orthonormal_basis(y)?;
    let cross = qx.matmul_t(&qy)?;
    let sigma = svd_thin(&cross)?.sigma;
    let mean = sigma.iter().sum::<f64>() / sigma.len() as f64;
    Ok(mean.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairScore {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

/// Pairwise CCA scores of one matrix family (A-side or B-side).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyReport {
    pub pairs: Vec<PairScore>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Set when the family could not be scored, e.g. all-zero up-projections.
    pub skipped: Option<String>,
}

impl FamilyReport {
    fn skipped(reason: String) -> Self {
        FamilyReport { pairs: vec![], mean: None, std: None, skipped: Some(reason) }
    }
}

/// All pairwise scores over `mats`, or a skipped report if any is rank-deficient.
pub fn pairwise_cca(mats: &[Matrix]) -> Result<FamilyReport> {
    let mut pairs = Vec::new();
    for i in 0..mats.len() {
        for j in i + 1..mats.len() {
            match cca_similarity(&mats[i], &mats[j]) {
                Ok(score) => pairs.push(PairScore { i, j, score }),
                Err(Error::RankDeficient { rank, required }) => {
                    let which = if orthonormal_basis(&mats[i]).is_err() { i } else { j };
                    return Ok(FamilyReport::skipped(format!(
                        "expert {which} is rank-deficient (rank {rank} < {required})"
                    )));
                }
                Err(e) => return Err(e),
            }
        }
    }
    if pairs.is_empty() {
        return Ok(FamilyReport::skipped("fewer than two experts".into()));
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.score).sum::<f64>() / n;
    let var = pairs.iter().map(|p| (p.score - mean).powi(2)).sum::<f64>() / n;
    Ok(FamilyReport { pairs, mean: Some(mean), std: Some(var.sqrt()), skipped: None })
}

/// A-side and B-side similarity of one MoE layer's experts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub a_side: FamilyReport,
    pub b_side: FamilyReport,
}

/// A-side uses the rows of each down-projection; B-side the columns of each up-projection.
pub fn similarity_report(layer: &AdapterLayer) -> Result<SimilarityReport> {
    if !layer.is_moe() {
        return Err(Error::UnsupportedMethod("similarity analysis needs an MoE layer".into()));
    }
    let downs = layer.down_projections();
    let ups: Vec<Matrix> = layer.up_projections().iter().map(Matrix::transpose).collect();
    Ok(SimilarityReport { a_side: pairwise_cca(&downs)?, b_side: pairwise_cca(&ups)? })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumReport {
    /// Descending singular values of the row-stacked matrices.
    pub singular_values: Vec<f64>,
    pub threshold: f64,
    /// Fraction of singular values strictly above `threshold`.
    pub fraction_above: f64,
    /// Count of singular values above `SPECTRUM_RANK_TOL · σ₁`.
    pub numerical_rank: usize,
}

/// Row-concatenates `mats` and summarizes the spectrum. The threshold
/// defaults to the mean singular value.
pub fn concat_spectrum(mats: &[Matrix], threshold: Option<f64>) -> Result<SpectrumReport> {
    let parts: Vec<&Matrix> = mats.iter().collect();
    let stacked = Matrix::concat_rows(&parts)?;
    let sigma = svd_thin(&stacked)?.sigma;
    let mean = sigma.iter().sum::<f64>() / sigma.len() as f64;
    let threshold = threshold.unwrap_or(mean);
    let above = sigma.iter().filter(|s| **s > threshold).count();
    let cutoff = SPECTRUM_RANK_TOL * sigma.first().copied().unwrap_or(0.0);
    let numerical_rank = sigma.iter().filter(|s| **s > cutoff).count();
    Ok(SpectrumReport {
        fraction_above: above as f64 / sigma.len() as f64,
        singular_values: sigma,
        threshold,
        numerical_rank,
    })
}

/// A-side and B-side spectra of one layer's experts.
pub fn layer_spectra(layer: &AdapterLayer, threshold: Option<f64>) -> Result<(SpectrumReport, SpectrumReport)> {
    if !layer.is_moe() {
        return Err(Error::UnsupportedMethod("spectrum analysis needs an MoE layer".into()));
    }
    let ups: Vec<Matrix> = layer.up_projections().iter().map(Matrix::transpose).collect();
    Ok((concat_spectrum(&layer.down_projections(), threshold)?, concat_spectrum(&ups, threshold)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BetaProbeRow {
    pub beta: f64,
    /// Frobenius norm of the gradient over all `P_t`.
    pub grad_p_norm: f64,
    pub grad_s_a_norm: f64,
}

/// Half-width of the uniform draw for the probe up-projections.
pub const PROBE_UP_SCALE: f64 = 0.01;

/// One forward/backward per `β` on a fixed batch with an MSE loss.
///
/// Every run rebuilds the layer from `seed`, so the SVD draws, router and
/// the small random up-projections are identical across `β`; only the
/// `β`/`1/β` split between `S_A` and `P_t` changes.
pub fn beta_grad_probe(
    geometry: &MaloraGeometry,
    base_w: &Matrix,
    x: &Matrix,
    target: &Matrix,
    betas: &[f64],
    seed: u64,
) -> Result<Vec<BetaProbeRow>> {
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let g = geometry.with_beta(beta);
        let mut rng = Rng::new(seed);
        let mut layer = MaloraLayer::new(base_w.clone(), g, MaloraFlags::default(), None, 0.0, &mut rng)?;
        let mut up_rng = Rng::new(seed).derive(1);
        for b in &mut layer.experts {
            *b = up_rng.uniform_matrix(b.rows(), b.cols(), -PROBE_UP_SCALE, PROBE_UP_SCALE);
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = layer.forward(&mut tape, xv, &mut Mode::Eval)?;
        let loss = tape.mse_loss(out.y, target)?;
        let grads = tape.backward(loss)?;
        let mut p_sq = 0.0;
        for t in 0..g.n_experts {
            if let Some(gp) = grads.get(&format!("p.{t}")) {
                p_sq += gp.frobenius_norm().powi(2);
            }
        }
        let s = grads.get("s_a").map_or(0.0, Matrix::frobenius_norm);
        rows.push(BetaProbeRow { beta, grad_p_norm: p_sq.sqrt(), grad_s_a_norm: s });
    }
    Ok(rows)
}

pub fn write_similarity_csv(report: &SimilarityReport, mut out: impl Write) -> Result<()> {
    writeln!(out, "family,i,j,score")?;
    for (family, rep) in [("a", &report.a_side), ("b", &report.b_side)] {
        for p in &rep.pairs {
            writeln!(out, "{family},{},{},{:.17e}", p.i, p.j, p.score)?;
        }
    }
    Ok(())
}

pub fn write_spectrum_csv(a_side: &SpectrumReport, b_side: &SpectrumReport, mut out: impl Write) -> Result<()> {
    writeln!(out, "family,index,singular_value")?;
    for (family, rep) in [("a", a_side), ("b", b_side)] {
        for (k, s) in rep.singular_values.iter().enumerate() {
            writeln!(out, "{family},{k},{s:.17e}")?;
        }
    }
    Ok(())
}

pub fn write_probe_csv(rows: &[BetaProbeRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "beta,grad_p_norm,grad_s_a_norm")?;
    for r in rows {
        writeln!(out, "{},{:.17e},{:.17e}", r.beta, r.grad_p_norm, r.grad_s_a_norm)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{AdapterConfig, Method};

    fn unit_rows(n: usize, idx: &[usize]) -> Matrix {
        Matrix::from_fn(idx.len(), n, |i, j| if j == idx[i] { 1.0 } else { 0.0 })
    }

    #[test]
    fn self_similarity_is_one() {
        let x = Rng::new(1).uniform_matrix(4, 12, -1.0, 1.0);
        assert!((cca_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn orthogonal_row_spaces_score_zero() {
        let x = unit_rows(16, &[0, 1, 2, 3]);
        let y = unit_rows(16, &[4, 5, 6, 7]);
        assert!(cca_similarity(&x, &y).unwrap().abs() < 1e-10);
    }

    #[test]
    fn rank_deficient_family_is_skipped() {
        let zeros = vec![Matrix::zeros(2, 5), Matrix::zeros(2, 5)];
        let rep = pairwise_cca(&zeros).unwrap();
        assert!(rep.skipped.is_some());
        assert!(rep.mean.is_none());
    }

    #[test]
    fn redundant_copies_concentrate_spectrum() {
        let q = unit_rows(10, &[0, 3, 7]);
        let rep = concat_spectrum(&[q.clone(), q.clone(), q.clone(), q], None).unwrap();
        for s in &rep.singular_values[..3] {
            assert!((s - 2.0).abs() < 1e-12);
        }
        assert!(rep.singular_values[3..].iter().all(|s| *s < 1e-12));
        assert_eq!(rep.numerical_rank, 3);
    }

    #[test]
    fn orthogonal_blocks_have_flat_spectrum() {
        let mats: Vec<Matrix> = (0..4).map(|b| unit_rows(8, &[2 * b, 2 * b + 1])).collect();
        let rep = concat_spectrum(&mats, None).unwrap();
        assert!(rep.singular_values.iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert_eq!(rep.fraction_above, 0.0);
    }

    #[test]
    fn fresh_malora_a_side_has_rank_d() {
        let mut cfg = AdapterConfig::new(Method::Malora, 2);
        cfg.n_experts = 4;
        cfg.shared_rank = Some(5);
        cfg.expanded_rank = Some(3);
        let mut rng = Rng::new(0);
        let layer = AdapterLayer::build(Matrix::zeros(8, 16), &cfg, &mut rng).unwrap();
        let (a, _) = layer_spectra(&layer, None).unwrap();
        assert_eq!(a.numerical_rank, 5);
    }

    #[test]
    fn probe_ratios_follow_beta() {
        let g = MaloraGeometry::explicit(2, 3, 4, 3, 1.0, 2, 8, 5).unwrap();
        let mut rng = Rng::new(9);
        let w = rng.uniform_matrix(5, 8, -1.0, 1.0);
        let x = rng.uniform_matrix(6, 8, -1.0, 1.0);
        let y = rng.uniform_matrix(6, 5, -1.0, 1.0);
        let rows = beta_grad_probe(&g, &w, &x, &y, &[1.0, 2.0, 1.0], 4).unwrap();
        assert!((rows[1].grad_p_norm / rows[0].grad_p_norm - 2.0).abs() < 1e-9);
        assert!((rows[1].grad_s_a_norm / rows[0].grad_s_a_norm - 0.5).abs() < 1e-9);
        assert_eq!(rows[0], rows[2]);
    }

    #[test]
    fn lora_layers_are_unsupported() {
        let mut rng = Rng::new(0);
        let layer = AdapterLayer::build(Matrix::zeros(3, 4), &AdapterConfig::new(Method::Lora, 2), &mut rng).unwrap();
        assert!(matches!(similarity_report(&layer), Err(Error::UnsupportedMethod(_))));
    }
}
