//! Single-expert adapters over a frozen linear layer: LoRA and AsyLoRA.
//!
//! A layer computes `y = x·Wᵀ + (α/r)·x·(B·A)ᵀ` in factored form. AsyLoRA is
//! the same structure with `A` frozen and the rank doubled, so that the
//! trainable count `m·2r` equals plain LoRA's `r·(m+n)` on square sites.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, Matrix, Rng};

/// Forward-pass mode. Dropout only draws from the RNG during training.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Mode<'_> {
    pub(crate) fn dropout(&mut self, tape: &mut Tape<'_>, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Train(rng) if rate > 0.0 => tape.dropout(x, rate, rng),
            _ => Ok(x),
        }
    }
}

/// A named view of one parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub value: &'a Matrix,
    pub trainable: bool,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub value: &'a mut Matrix,
    pub trainable: bool,
}

/// Trainable and frozen parameter counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: u64,
    pub frozen: u64,
}

#[derive(Clone, Debug)]
pub struct LoraLayer {
    /// Frozen base weight, m×n.
    pub base_w: Matrix,
    /// Down-projection, r×n.
    pub a: Matrix,
    /// Up-projection, m×r. Zero at initialization.
    pub b: Matrix,
    pub alpha: f64,
    pub a_frozen: bool,
    pub dropout: f64,
}

impl LoraLayer {
    /// Plain LoRA with `A ~ kaiming_uniform(r, n)` and `B = 0`.
    /// `alpha` defaults to `2r`.
    pub fn new(base_w: Matrix, rank: usize, alpha: Option<f64>, dropout: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        let (m, n) = base_w.shape();
        let a = kaiming_uniform(rank, n, rng)?;
        Ok(LoraLayer {
            base_w,
            a,
            b: Matrix::zeros(m, rank),
            alpha: alpha.unwrap_or(2.0 * rank as f64),
            a_frozen: false,
            dropout,
        })
    }

    /// AsyLoRA: rank doubled to `2·base_rank`, `A` frozen.
    pub fn asymmetric(
        base_w: Matrix,
        base_rank: usize,
        alpha: Option<f64>,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if base_rank == 0 {
            return Err(Error::config("AsyLoRA rank must be at least 1"));
        }
        let mut layer = LoraLayer::new(base_w, 2 * base_rank, alpha, dropout, rng)?;
        layer.a_frozen = true;
        Ok(layer)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.base_w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.base_w.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `x·Wᵀ + (α/r)·((x·Aᵀ)·Bᵀ)`; dropout applies to the adapter input only.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("lora_forward", x.shape(), self.base_w.shape()));
        }
        let w = tape.param("base_w", &self.base_w, false);
        let a = tape.param("a", &self.a, !self.a_frozen);
        let b = tape.param("b", &self.b, true);
        let base = tape.matmul_t(x, w)?;
        let xd = mode.dropout(tape, x, self.dropout)?;
        let h = tape.matmul_t(xd, a)?;
        let d = tape.matmul_t(h, b)?;
        let d = tape.scale(d, self.scaling())?;
        tape.add(base, d)
    }

    /// Dense `(α/r)·B·A`.
    pub fn merge_delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("b and a are conformable").scale(self.scaling())
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef { name: "base_w".into(), value: &self.base_w, trainable: false },
            ParamRef { name: "a".into(), value: &self.a, trainable: !self.a_frozen },
            ParamRef { name: "b".into(), value: &self.b, trainable: true },
        ]
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut { name: "base_w".into(), value: &mut self.base_w, trainable: false },
            ParamMut { name: "a".into(), value: &mut self.a, trainable: !self.a_frozen },
            ParamMut { name: "b".into(), value: &mut self.b, trainable: true },
        ]
    }
}

/// Adapter parameter counts for one m×n site.
///
/// Plain: `r·n + m·r` trainable. AsyLoRA (`asy`): `r` is the base rank; the
/// `2r×n` down matrix is frozen and only `m·2r` is trainable.
pub fn lora_param_count(m: u64, n: u64, r: u64, asy: bool) -> Result<ParamCount> {
    if r == 0 {
        return Err(Error::config("rank must be at least 1"));
    }
    Ok(if asy {
        ParamCount { trainable: m * 2 * r, frozen: 2 * r * n }
    } else {
        ParamCount { trainable: r * n + m * r, frozen: 0 }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(layer: &LoraLayer, x: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = layer.forward(&mut tape, xv, &mut Mode::Eval).unwrap();
        tape.value(y).clone()
    }

    fn random_layer(seed: u64, m: usize, n: usize, r: usize) -> LoraLayer {
        let mut rng = Rng::new(seed);
        let base = rng.uniform_matrix(m, n, -1.0, 1.0);
        let mut layer = LoraLayer::new(base, r, None, 0.0, &mut rng).unwrap();
        layer.b = rng.uniform_matrix(m, r, -0.5, 0.5);
        layer
    }

    #[test]
    fn fresh_layer_is_base() {
        let mut rng = Rng::new(0);
        let base = rng.uniform_matrix(4, 6, -1.0, 1.0);
        let layer = LoraLayer::new(base.clone(), 2, None, 0.05, &mut rng).unwrap();
        let x = rng.uniform_matrix(3, 6, -1.0, 1.0);
        assert_eq!(eval(&layer, &x), x.matmul_t(&base).unwrap());
        assert_eq!(layer.merge_delta(), Matrix::zeros(4, 6));
        assert_eq!(layer.alpha, 4.0);
        assert_eq!(layer.scaling(), 2.0);
    }

    #[test]
    fn full_rank_matches_dense() {
        let mut layer = random_layer(1, 4, 4, 4);
        layer.alpha = 4.0;
        let mut rng = Rng::new(2);
        let x = rng.uniform_matrix(5, 4, -1.0, 1.0);
        let dense = layer.base_w.add(&layer.b.matmul(&layer.a).unwrap()).unwrap();
        assert!(eval(&layer, &x).max_abs_diff(&x.matmul_t(&dense).unwrap()) < 1e-12);
    }

    #[test]
    fn alpha_is_linear() {
        let mut layer = random_layer(3, 5, 4, 2);
        let x = Rng::new(4).uniform_matrix(3, 4, -1.0, 1.0);
        let base = x.matmul_t(&layer.base_w).unwrap();
        let d1 = eval(&layer, &x).sub(&base).unwrap();
        layer.alpha *= 2.0;
        let d2 = eval(&layer, &x).sub(&base).unwrap();
        assert!(d2.max_abs_diff(&d1.scale(2.0)) < 1e-14);
    }

    #[test]
    fn rank_one_outer_product() {
        let mut rng = Rng::new(0);
        let mut layer = LoraLayer::new(Matrix::zeros(3, 3), 1, Some(1.0), 0.0, &mut rng).unwrap();
        layer.a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        layer.b = Matrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]).unwrap();
        let mut expected = Matrix::zeros(3, 3);
        expected.set(0, 0, 1.0);
        assert_eq!(layer.merge_delta(), expected);
    }

    #[test]
    fn forward_minus_base_is_merged_delta() {
        let layer = random_layer(7, 6, 5, 3);
        let x = Rng::new(8).uniform_matrix(4, 5, -1.0, 1.0);
        let diff = eval(&layer, &x).sub(&x.matmul_t(&layer.base_w).unwrap()).unwrap();
        assert!(diff.max_abs_diff(&x.matmul_t(&layer.merge_delta()).unwrap()) < 1e-12);
    }

    #[test]
    fn asylora_freezes_a() {
        let mut rng = Rng::new(0);
        let layer = LoraLayer::asymmetric(Matrix::zeros(4, 4), 2, None, 0.0, &mut rng).unwrap();
        assert_eq!(layer.rank(), 4);
        let x = rng.uniform_matrix(2, 4, -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let y = layer.forward(&mut tape, xv, &mut Mode::Eval).unwrap();
        let loss = tape.mse_loss(y, &Matrix::filled(2, 4, 1.0)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.contains_key("b"));
        assert!(!g.contains_key("a"));
        assert!(!g.contains_key("base_w"));
    }

    #[test]
    fn param_counts() {
        assert_eq!(lora_param_count(4096, 4096, 64, false).unwrap().trainable, 524_288);
        let asy = lora_param_count(4096, 4096, 64, true).unwrap();
        assert_eq!(asy, ParamCount { trainable: 524_288, frozen: 524_288 });
        assert!(lora_param_count(4, 4, 0, false).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let layer = random_layer(0, 3, 4, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(2, 5));
        assert!(matches!(layer.forward(&mut tape, x, &mut Mode::Eval), Err(Error::Shape { .. })));
    }
}
