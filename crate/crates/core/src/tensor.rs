//! Dense row-major matrices and a small tape-based reverse-mode autodiff.
//!
//! The model, the losses and the trainer are all expressed against [`Graph`].
//! A graph borrows a [`ParamStore`] immutably for its lifetime; trainable leaves
//! are created with [`Graph::param`] or [`Graph::gather_param`], everything else
//! is a constant. Because frozen tensors (LLM item and profile embeddings) only
//! ever enter a graph through [`Graph::constant`], they never receive a gradient.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_vec(1, 1, vec![x])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_bt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_bt inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn matmul_at(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_at inner dimension mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub type ParamId = usize;

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (i, n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    GatherParam { param: ParamId, idx: Vec<usize> },
    SelectRows { src: Var, idx: Vec<usize> },
    StackRows(Vec<Var>),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    CausalSoftmax(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    Softplus(Var),
    Sum(Var),
    ContrastiveExcl(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients with respect to every trainable parameter touched by a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    per_param: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.per_param.get(id).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.per_param.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Mat)> {
        self.per_param.iter_mut().enumerate().filter_map(|(i, g)| g.as_mut().map(|g| (i, g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.frobenius_sq()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, g) in self.iter_mut() {
            g.data.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

const LN_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Rows `idx` of a trainable table, without materialising the full table.
    pub fn gather_param(&mut self, id: ParamId, idx: &[usize]) -> Var {
        let value = self.params.get(id).select_rows(idx);
        self.push(value, Op::GatherParam { param: id, idx: idx.to_vec() })
    }

    pub fn select_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let value = self.value(src).select_rows(idx);
        self.push(value, Op::SelectRows { src, idx: idx.to_vec() })
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows needs at least one input");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "stack_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::StackRows(parts.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        self.push(value, Op::MatMulBT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let value = Mat::from_vec(va.rows, va.cols, data);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Mat::from_vec(va.rows, va.cols, data);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let vb = self.value(bias);
        assert_eq!(vb.rows, 1, "bias must be a row vector");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols, vb.cols, "bias width mismatch");
        let bias_row = vb.data.clone();
        for r in 0..value.rows {
            for (x, b) in value.row_mut(r).iter_mut().zip(&bias_row) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` (both `1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let g = self.value(gamma).data.clone();
        let b = self.value(beta).data.clone();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, g[c] * h + b[c]);
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Softmax of each row `i` over columns `0..=i`; entries above the diagonal are zero.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows, va.cols, "causal softmax expects a square matrix");
        let n = va.rows;
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            let row = &va.row(i)[..=i];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out.set(i, j, e);
                z += e;
            }
            for j in 0..=i {
                out.set(i, j, out.get(i, j) / z);
            }
        }
        self.push(out, Op::CausalSoftmax(a))
    }

    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows);
        for r in 0..vx.rows {
            let n = dot(vx.row(r), vx.row(r)).sqrt().max(NORM_EPS);
            norms.push(n);
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::NormalizeRows { x, norms })
    }

    /// Row-wise dot product, producing an `n × 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "row_dot shape mismatch");
        let data = (0..va.rows).map(|r| dot(va.row(r), vb.row(r))).collect();
        let value = Mat::from_vec(va.rows, 1, data);
        self.push(value, Op::RowDot(a, b))
    }

    /// `ln(1 + e^x)`, elementwise. `softplus(-x) = -ln σ(x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    /// In-batch contrastive loss over a `Z × Z` similarity matrix whose diagonal holds
    /// the positive pairs. The denominator runs over off-diagonal entries only:
    /// `-(1/Z) Σ_i [ S_ii − ln Σ_{j≠i} exp S_ij ]`.
    pub fn contrastive_excl(&mut self, sim: Var) -> Var {
        let vs = self.value(sim);
        let z = vs.rows;
        assert_eq!(z, vs.cols, "similarity matrix must be square");
        assert!(z >= 2, "contrastive loss needs at least two rows");
        let mut total = 0.0;
        for i in 0..z {
            total += log_sum_exp_excl(vs.row(i), i) - vs.get(i, i);
        }
        self.push(Mat::scalar(total / z as f64), Op::ContrastiveExcl(sim))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward requires a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut per_param: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(p) => accumulate_param(&mut per_param, self.params, *p, |acc| acc.add_assign(&g)),
                Op::GatherParam { param, idx: rows } => accumulate_param(&mut per_param, self.params, *param, |acc| {
                    for (o, &r) in rows.iter().enumerate() {
                        for (a, b) in acc.row_mut(r).iter_mut().zip(g.row(o)) {
                            *a += b;
                        }
                    }
                }),
                Op::SelectRows { src, idx: rows } => {
                    let src_shape = self.value(*src).shape();
                    let mut d = Mat::zeros(src_shape.0, src_shape.1);
                    for (o, &r) in rows.iter().enumerate() {
                        for (a, b) in d.row_mut(r).iter_mut().zip(g.row(o)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *src, d);
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let cols = g.cols;
                        let d = Mat::from_vec(rows, cols, g.data[offset * cols..(offset + rows) * cols].to_vec());
                        offset += rows;
                        accumulate(&mut grads, p, d);
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b));
                    let db = self.value(*a).matmul_at(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulBT(a, b) => {
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_at(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect());
                    let db = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect());
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (acc, x) in db.data.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|x| x * f)),
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let d = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&va.data).map(|(gx, x)| if *x > 0.0 { *gx } else { 0.0 }).collect(),
                    );
                    accumulate(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let va = self.value(*a);
                    let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&va.data).map(|(gx, &x)| gx * gelu_grad(x)).collect());
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = &self.value(*gamma).data;
                    let (rows, cols) = g.shape();
                    let mut dx = Mat::zeros(rows, cols);
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                            dg.data[c] += gr[c] * hr[c];
                            db.data[c] += gr[c];
                        }
                        mean_dh /= cols as f64;
                        mean_dh_h /= cols as f64;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            out[c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    let n = y.rows;
                    let mut d = Mat::zeros(n, n);
                    for i in 0..n {
                        let s: f64 = (0..=i).map(|j| y.get(i, j) * g.get(i, j)).sum();
                        for j in 0..=i {
                            d.set(i, j, y.get(i, j) * (g.get(i, j) - s));
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = dot(yr, gr);
                        for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = (gv - yv * proj) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::RowDot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(va.rows, va.cols);
                    let mut db = Mat::zeros(vb.rows, vb.cols);
                    for r in 0..va.rows {
                        let gr = g.data[r];
                        for c in 0..va.cols {
                            da.set(r, c, gr * vb.get(r, c));
                            db.set(r, c, gr * va.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Softplus(a) => {
                    let va = self.value(*a);
                    let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&va.data).map(|(gx, &x)| gx * sigmoid(x)).collect());
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    accumulate(&mut grads, *a, Mat::from_vec(va.rows, va.cols, vec![g.data[0]; va.data.len()]));
                }
                Op::ContrastiveExcl(sim) => {
                    let vs = self.value(*sim);
                    let z = vs.rows;
                    let scale = g.data[0] / z as f64;
                    let mut d = Mat::zeros(z, z);
                    for i in 0..z {
                        let row = vs.row(i);
                        let lse = log_sum_exp_excl(row, i);
                        for j in 0..z {
                            if j == i {
                                d.set(i, j, -scale);
                            } else {
                                d.set(i, j, scale * (row[j] - lse).exp());
                            }
                        }
                    }
                    accumulate(&mut grads, *sim, d);
                }
            }
        }
        Gradients { per_param }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_param(per_param: &mut [Option<Mat>], params: &ParamStore, id: ParamId, f: impl FnOnce(&mut Mat)) {
    let slot = &mut per_param[id];
    let acc = slot.get_or_insert_with(|| {
        let p = params.get(id);
        Mat::zeros(p.rows, p.cols)
    });
    f(acc);
}

fn log_sum_exp_excl(row: &[f64], skip: usize) -> f64 {
    let m = row.iter().enumerate().filter(|&(j, _)| j != skip).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().enumerate().filter(|&(j, _)| j != skip).map(|(_, &v)| (v - m).exp()).sum();
    m + s.ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(param) for a graph builder.
    fn check(store: &mut ParamStore, build: impl Fn(&mut Graph) -> Var) {
        let grads = {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss)
        };
        let h = 1e-5;
        for id in 0..store.len() {
            for k in 0..store.get(id).data.len() {
                let orig = store.get(id).data[k];
                store.get_mut(id).data[k] = orig + h;
                let up = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).data[k] = orig - h;
                let down = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                store.get_mut(id).data[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |m| m.data[k]);
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-5,
                    "param {} [{k}]: analytic {analytic} vs numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn matmul_variants_agree_with_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_mat(&mut rng, 3, 4);
        let b = random_mat(&mut rng, 5, 4);
        assert_eq!(a.matmul_bt(&b), a.matmul(&b.transpose()));
        let c = random_mat(&mut rng, 3, 2);
        let lhs = a.matmul_at(&c);
        let rhs = a.transpose().matmul(&c);
        for (x, y) in lhs.data.iter().zip(&rhs.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.constant(random_mat(&mut rng, 4, 4));
        let p = g.causal_softmax(s);
        let v = g.value(p);
        for i in 0..4 {
            let row_sum: f64 = v.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for j in i + 1..4 {
                assert_eq!(v.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn gradients_of_attention_style_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.add("x", random_mat(&mut rng, 4, 3));
        let w = store.add("w", random_mat(&mut rng, 3, 3));
        let gamma = store.add("gamma", random_mat(&mut rng, 1, 3));
        let beta = store.add("beta", random_mat(&mut rng, 1, 3));
        let bias = store.add("bias", random_mat(&mut rng, 1, 3));
        let table = store.add("table", random_mat(&mut rng, 5, 3));
        check(&mut store, |g| {
            let xv = g.param(x);
            let wv = g.param(w);
            let q = g.matmul(xv, wv);
            let s = g.matmul_bt(q, xv);
            let p = g.causal_softmax(s);
            let a = g.matmul(p, xv);
            let (gv, bv) = (g.param(gamma), g.param(beta));
            let n = g.layer_norm(a, gv, bv);
            let bb = g.param(bias);
            let n = g.add_row(n, bb);
            let n = g.gelu(n);
            let e = g.gather_param(table, &[0, 2, 2, 4]);
            let d = g.row_dot(n, e);
            let d = g.softplus(d);
            g.sum(d)
        });
    }

    #[test]
    fn gradients_of_contrastive_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let a = store.add("a", random_mat(&mut rng, 3, 4));
        let b = store.add("b", random_mat(&mut rng, 3, 4));
        check(&mut store, |g| {
            let (av, bv) = (g.param(a), g.param(b));
            let na = g.normalize_rows(av);
            let nb = g.normalize_rows(bv);
            let s = g.matmul_bt(na, nb);
            let s = g.scale(s, 2.0);
            let l1 = g.contrastive_excl(s);
            let st = g.transpose(s);
            let l2 = g.contrastive_excl(st);
            let r = g.select_rows(av, &[1, 1]);
            let r = g.relu(r);
            let r = g.sum(r);
            let l = g.add(l1, l2);
            let l = g.sub(l, r);
            let parts = g.stack_rows(&[l, l1]);
            let m = g.mul(parts, parts);
            g.sum(m)
        });
    }
}
