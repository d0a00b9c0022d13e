use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

/// Handle to a node on a [`Tape`]. Cheap to copy; the shape is fixed at creation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    Hadamard(usize, usize),
    SoftmaxRows(usize),
    Relu(usize),
    MaskSelect(usize, Vec<bool>),
    ConcatRows(Vec<usize>),
    Mse(usize, Matrix),
    CrossEntropy(usize, Vec<usize>),
    /// Per-entry multiplier: 0 for dropped, 1/(1-rate) for kept.
    Dropout(usize, Vec<f64>),
    GatherRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
    /// `y[i, :] = a[i, :] · g[i, 0]`
    RowScale(usize, usize),
    SelectCol(usize, usize),
    MeanRows(usize),
    NormalizeRows(usize),
    Sum(usize),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    node: usize,
    trainable: bool,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so parents always precede
/// children. Leaves may borrow their values (`'a`) to avoid copying frozen
/// weights every step. A node requires a gradient only if some ancestor is a
/// trainable parameter; frozen parameters and constants never accumulate one.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<ParamEntry>,
}

/// Gradients keyed by parameter name, for trainable parameters reachable from the loss.
pub type Gradients = BTreeMap<String, Matrix>;

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Var { id, rows, cols }
    }

    fn push_op(&mut self, value: Matrix, op: Op, parents: &[usize]) -> Var {
        let rg = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A constant input (never differentiated).
    pub fn constant(&mut self, value: impl Into<Cow<'a, Matrix>>) -> Var {
        self.push(value.into(), Op::Leaf, false)
    }

    /// A named parameter. Frozen parameters behave like constants for backward.
    pub fn param(&mut self, name: impl Into<String>, value: impl Into<Cow<'a, Matrix>>, trainable: bool) -> Var {
        let v = self.push(value.into(), Op::Leaf, trainable);
        self.params.push(ParamEntry { name: name.into(), node: v.id, trainable });
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    pub fn param_names(&self) -> Vec<(String, bool)> {
        self.params.iter().map(|p| (p.name.clone(), p.trainable)).collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push_op(v, Op::Add(a.id, b.id), &[a.id, b.id]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(v, Op::Sub(a.id, b.id), &[a.id, b.id]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(v, Op::MatMul(a.id, b.id), &[a.id, b.id]))
    }

    /// `a · bᵀ`, the natural form for `x · Wᵀ` with row-major batches.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push_op(v, Op::MatMulT(a.id, b.id), &[a.id, b.id]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        Ok(self.push_op(v, Op::Transpose(a.id), &[a.id]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        Ok(self.push_op(v, Op::Scale(a.id, c), &[a.id]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push_op(v, Op::Hadamard(a.id, b.id), &[a.id, b.id]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows(self.value(a));
        Ok(self.push_op(v, Op::SoftmaxRows(a.id), &[a.id]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        Ok(self.push_op(v, Op::Relu(a.id), &[a.id]))
    }

    /// Keeps entries where `mask` is true and zeroes the rest. The mask is
    /// not differentiated.
    pub fn mask_select(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.len() {
            return Err(Error::shape("mask_select", a.shape(), (mask.len(), 1)));
        }
        let mut v = src.clone();
        for (x, keep) in v.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *x = 0.0;
            }
        }
        Ok(self.push_op(v, Op::MaskSelect(a.id, mask), &[a.id]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_rows of nothing".into()));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_rows(&mats)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push_op(v, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Mean squared error over all entries against a constant target.
    pub fn mse_loss(&mut self, a: Var, target: &Matrix) -> Result<Var> {
        if a.shape() != target.shape() {
            return Err(Error::shape("mse_loss", a.shape(), target.shape()));
        }
        let diff = self.value(a).sub(target)?;
        let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        Ok(self.push_op(Matrix::filled(1, 1, loss), Op::Mse(a.id, target.clone()), &[a.id]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        if targets.len() != logits.rows() {
            return Err(Error::shape("softmax_cross_entropy", logits.shape(), (targets.len(), 1)));
        }
        if let Some(t) = targets.iter().find(|t| **t >= logits.cols()) {
            return Err(Error::InvalidInput(format!("class index {t} out of range for {} classes", logits.cols())));
        }
        let x = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = x.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / targets.len() as f64;
        Ok(self.push_op(Matrix::filled(1, 1, loss), Op::CrossEntropy(logits.id, targets.to_vec()), &[logits.id]))
    }

    /// Inverted dropout with a mask drawn from `rng`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidInput(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mult: Vec<f64> = (0..a.rows() * a.cols()).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
        let src = self.value(a);
        let data: Vec<f64> = src.data().iter().zip(&mult).map(|(x, m)| x * m).collect();
        let v = Matrix::from_vec(a.rows(), a.cols(), data)?;
        Ok(self.push_op(v, Op::Dropout(a.id, mult), &[a.id]))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        if let Some(i) = idx.iter().find(|i| **i >= a.rows()) {
            return Err(Error::InvalidInput(format!("gather row {i} out of range for {} rows", a.rows())));
        }
        let v = self.value(a).select_rows(idx);
        Ok(self.push_op(v, Op::GatherRows(a.id, idx.to_vec()), &[a.id]))
    }

    /// Places row `k` of `a` at row `idx[k]` of a `total_rows`-row zero
    /// matrix, adding when indices repeat.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], total_rows: usize) -> Result<Var> {
        if idx.len() != a.rows() {
            return Err(Error::shape("scatter_rows", a.shape(), (idx.len(), a.cols())));
        }
        if let Some(i) = idx.iter().find(|i| **i >= total_rows) {
            return Err(Error::InvalidInput(format!("scatter row {i} out of range for {total_rows} rows")));
        }
        let src = self.value(a);
        let mut v = Matrix::zeros(total_rows, a.cols());
        for (k, &i) in idx.iter().enumerate() {
            for (o, x) in v.row_mut(i).iter_mut().zip(src.row(k)) {
                *o += x;
            }
        }
        Ok(self.push_op(v, Op::ScatterRows(a.id, idx.to_vec()), &[a.id]))
    }

    /// Scales each row of `a` by the matching entry of the column vector `g`.
    pub fn row_scale(&mut self, a: Var, g: Var) -> Result<Var> {
        if g.cols() != 1 || g.rows() != a.rows() {
            return Err(Error::shape("row_scale", a.shape(), g.shape()));
        }
        let src = self.value(a);
        let gv = self.value(g);
        let v = Matrix::from_fn(a.rows(), a.cols(), |i, j| src.get(i, j) * gv.get(i, 0));
        Ok(self.push_op(v, Op::RowScale(a.id, g.id), &[a.id, g.id]))
    }

    pub fn select_col(&mut self, a: Var, col: usize) -> Result<Var> {
        if col >= a.cols() {
            return Err(Error::InvalidInput(format!("column {col} out of range for {} cols", a.cols())));
        }
        let v = Matrix::from_vec(a.rows(), 1, self.value(a).col(col))?;
        Ok(self.push_op(v, Op::SelectCol(a.id, col), &[a.id]))
    }

    /// Column means: `1 × cols`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let n = a.rows() as f64;
        let v = Matrix::from_fn(1, a.cols(), |_, j| (0..a.rows()).map(|i| src.get(i, j)).sum::<f64>() / n);
        Ok(self.push_op(v, Op::MeanRows(a.id), &[a.id]))
    }

    /// Divides each row by its sum. Rows summing to zero are left at zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let s: f64 = v.row(i).iter().sum();
            if s != 0.0 {
                for x in v.row_mut(i) {
                    *x /= s;
                }
            }
        }
        Ok(self.push_op(v, Op::NormalizeRows(a.id), &[a.id]))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        Ok(self.push_op(Matrix::filled(1, 1, s), Op::Sum(a.id), &[a.id]))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of trainable parameters.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let grads = self.backward_nodes(loss)?;
        let mut out = Gradients::new();
        for p in self.params.iter().filter(|p| p.trainable) {
            if let Some(g) = &grads[p.node] {
                match out.get_mut(&p.name) {
                    Some(acc) => acc.add_assign(g)?,
                    None => {
                        out.insert(p.name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to every node that requires one.
    pub(crate) fn backward_nodes(&self, loss: Var) -> Result<Vec<Option<Matrix>>> {
        if loss.shape() != (1, 1) {
            return Err(Error::NotScalarLoss { rows: loss.rows, cols: loss.cols });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.id + 1];
        if !self.nodes[loss.id].requires_grad {
            return Ok(grads);
        }
        grads[loss.id] = Some(Matrix::filled(1, 1, 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: usize, g: Matrix) -> Result<()> {
        if !self.nodes[id].requires_grad {
            return Ok(());
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.scale(-1.0))?;
                }
            }
            Op::MatMul(a, b) => {
                // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(&self.nodes[*b].value)?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.nodes[*a].value.t_matmul(g)?)?;
                }
            }
            Op::MatMulT(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(&self.nodes[*b].value)?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t_matmul(&self.nodes[*a].value)?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::Hadamard(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.hadamard(&self.nodes[*b].value)?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.hadamard(&self.nodes[*a].value)?)?;
                }
            }
            Op::SoftmaxRows(a) => {
                // dx_i = p_i (g_i − Σ_j g_j p_j) per row
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let p = out.row(r);
                    let gr = g.row(r);
                    let inner: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = p[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let dx = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(x.data()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect(),
                )?;
                self.accumulate(grads, *a, dx)?;
            }
            Op::MaskSelect(a, mask) => {
                let mut dx = g.clone();
                for (d, keep) in dx.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.nodes[*p].value.rows();
                    if self.rg(*p) {
                        self.accumulate(grads, *p, g.slice_rows(start, start + rows))?;
                    }
                    start += rows;
                }
            }
            Op::Mse(a, target) => {
                let x = &self.nodes[*a].value;
                let k = 2.0 * g.get(0, 0) / x.len() as f64;
                self.accumulate(grads, *a, x.sub(target)?.scale(k))?;
            }
            Op::CrossEntropy(a, targets) => {
                let x = &self.nodes[*a].value;
                let mut dx = softmax_rows(x);
                let k = g.get(0, 0) / targets.len() as f64;
                for (i, &t) in targets.iter().enumerate() {
                    let row = dx.row_mut(i);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= k;
                    }
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::Dropout(a, mult) => {
                let dx = Matrix::from_vec(g.rows(), g.cols(), g.data().iter().zip(mult).map(|(x, m)| x * m).collect())?;
                self.accumulate(grads, *a, dx)?;
            }
            Op::GatherRows(a, idx) => {
                let src = &self.nodes[*a].value;
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::ScatterRows(a, idx) => self.accumulate(grads, *a, g.select_rows(idx))?,
            Op::RowScale(a, s) => {
                let av = &self.nodes[*a].value;
                let sv = &self.nodes[*s].value;
                if self.rg(*a) {
                    let dx = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * sv.get(i, 0));
                    self.accumulate(grads, *a, dx)?;
                }
                if self.rg(*s) {
                    let ds =
                        Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum());
                    self.accumulate(grads, *s, ds)?;
                }
            }
            Op::SelectCol(a, col) => {
                let src = &self.nodes[*a].value;
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    dx.set(i, *col, g.get(i, 0));
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::MeanRows(a) => {
                let src = &self.nodes[*a].value;
                let n = src.rows() as f64;
                let dx = Matrix::from_fn(src.rows(), src.cols(), |_, j| g.get(0, j) / n);
                self.accumulate(grads, *a, dx)?;
            }
            Op::NormalizeRows(a) => {
                // y = x / s, s = Σx: dx_j = (g_j − Σ_k g_k y_k) / s
                let src = &self.nodes[*a].value;
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    let s: f64 = src.row(r).iter().sum();
                    if s == 0.0 {
                        continue;
                    }
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = (gr[j] - inner) / s;
                    }
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::Sum(a) => {
                let src = &self.nodes[*a].value;
                self.accumulate(grads, *a, Matrix::filled(src.rows(), src.cols(), g.get(0, 0)))?;
            }
        }
        Ok(())
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
