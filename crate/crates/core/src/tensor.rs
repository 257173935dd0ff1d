//! Dense `f64` arrays and a recording tape for reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] appends one node holding its output value and
//! enough saved state to run its vector-Jacobian product. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![v; n]).expect("positive extents")
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when viewed as `[numel / cols, cols]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SplitHeads {
        x: Var,
        batch: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        heads: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    params: Vec<(ParamId, Var)>,
    frozen_params: bool,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `c = beta * c + a * b` for strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every strided access made by dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which [`Tape::param`] records parameters as constants, so no
    /// parameter gradients are produced.
    pub fn frozen() -> Self {
        Self {
            frozen_params: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Arc::new(value), op, requires_grad)
    }

    fn push_node(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a value that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Arc::new(value), Op::Leaf, false)
    }

    /// Record an input that requires gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(Arc::new(value), Op::Leaf, true)
    }

    /// Record a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let var = self.push_node(store.get(id).shared_value(), Op::Leaf, !self.frozen_params);
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(var);
        if !self.frozen_params {
            self.params.push((id, var));
        }
        var
    }

    /// Copy of `v`'s value recorded as a constant (gradient stops here).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Add every recorded parameter gradient into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.nodes[var.0].grad {
                let p = store.get_mut(id);
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Parameters that received a gradient in the last backward pass.
    pub fn params_with_grad(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, var)| self.nodes[var.0].grad.is_some())
            .map(|&(id, _)| id)
            .collect()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product over the leading axis: `[n,m,k]·[n,k,p]`, or
    /// `[n,m,k]·[n,p,k]ᵀ` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                (k, 1),
                &bv[i * k * n..],
                b_strides,
                0.0,
                &mut out[i * m * n..],
                (n, 1),
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), f);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Add `bias` (shape `[C]`) to every row of `x` (`[..., C]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Add a same-shape constant (no gradient flows into it).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("add_const", self.shape(x), c.shape()));
        }
        let data = zip_map(self.value(x).data(), c.data(), |a, b| a + b);
        let value = Tensor::new(c.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddConst(x), &[x]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * std_normal_cdf(v), Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        self.unary(x, |v| v.max(min), Op::ClampMin(x, min))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &mask, |a, m| a * m);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    // ---- normalisation --------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| xs[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (xs[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..n {
                    out[idx(k)] /= sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Per-row normalisation over the last axis with population variance,
    /// followed by the affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let h = self.value(x).cols();
        if h < 2 {
            return Err(Error::Contract(format!("layer_norm needs width >= 2, got {h}")));
        }
        if self.shape(gamma) != [h] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.shape(beta) != [h] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(beta)));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / h;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..h {
                let xh = (row[j] - mean) * is;
                xhat[r * h + j] = xh;
                out[r * h + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Sum over the last axis, dropping it (a rank-1 input yields shape `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let data: Vec<f64> = v.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut shape = v.shape()[..v.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, data).expect("consistent shape");
        self.push(value, Op::SumLast(x), &[x])
    }

    /// Per-row `-ln softmax(logits)[label]`, shape `[rows]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (rows, k) = (v.rows(), v.cols());
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", v.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("class label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; rows * k];
        let mut losses = Vec::with_capacity(rows);
        for (r, &label) in labels.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            losses.push(lse - row[label]);
        }
        let value = Tensor::new(vec![rows], losses)?;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(value, op, &[logits]))
    }

    // ---- indexing and layout --------------------------------------------

    /// Select rows of `table` (viewed as `[R, rest...]`) by index.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let rows = t.shape()[0];
        let width = t.numel() / rows;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::Data(format!(
                    "row index {i} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, data)?;
        let op = Op::GatherRows {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(value, op, &[table]))
    }

    /// Stack 2-D inputs with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `[B·L, nh·d]` → `[B·nh, L, d]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || batch == 0 || !s[0].is_multiple_of(batch) || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &s, &[batch, heads]));
        }
        let (len, d) = (s[0] / batch, s[1] / heads);
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let src = (b * len + t) * s[1] + h * d;
                    let dst = ((b * heads + h) * len + t) * d;
                    out[dst..dst + d].copy_from_slice(&xs[src..src + d]);
                }
            }
        }
        let value = Tensor::new(vec![batch * heads, len, d], out)?;
        Ok(self.push(value, Op::SplitHeads { x, batch, heads }, &[x]))
    }

    /// `[B·nh, L, d]` → `[B·L, nh·d]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || batch == 0 || !s[0].is_multiple_of(batch) {
            return Err(Error::shape("merge_heads", &s, &[batch]));
        }
        let heads = s[0] / batch;
        let (len, d) = (s[1], s[2]);
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let dst = (b * len + t) * heads * d + h * d;
                    let src = ((b * heads + h) * len + t) * d;
                    out[dst..dst + d].copy_from_slice(&xs[src..src + d]);
                }
            }
        }
        let value = Tensor::new(vec![batch * len, heads * d], out)?;
        Ok(self.push(value, Op::MergeHeads { x, batch, heads }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let value =
            Tensor::new(shape.to_vec(), v.data().to_vec()).map_err(|_| Error::shape("reshape", v.shape(), shape))?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever each
    /// node already holds; nothing is reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {ls:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !node.requires_grad {
                continue;
            }
            let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(da) = acc!(*a) {
                    gemm(m, n, k, g, (n, 1), val(*b), (1, n), 1.0, da, (k, 1));
                }
                if let Some(db) = acc!(*b) {
                    gemm(k, m, n, val(*a), (1, k), g, (n, 1), 1.0, db, (n, 1));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = acc!(*a) {
                    for t in 0..bs {
                        let gs = &g[t * m * n..];
                        let bs_ = &bv[t * k * n..];
                        // trans_b: B is [n,k] → dA = G·B; else B is [k,n] → dA = G·Bᵀ
                        let b_strides = if *trans_b { (k, 1) } else { (1, n) };
                        gemm(m, n, k, gs, (n, 1), bs_, b_strides, 1.0, &mut da[t * m * k..], (k, 1));
                    }
                }
                if let Some(db) = acc!(*b) {
                    for t in 0..bs {
                        let gs = &g[t * m * n..];
                        let as_ = &av[t * m * k..];
                        if *trans_b {
                            // dB [n,k] = Gᵀ·A
                            gemm(n, m, k, gs, (1, n), as_, (k, 1), 1.0, &mut db[t * n * k..], (k, 1));
                        } else {
                            // dB [k,n] = Aᵀ·G
                            gemm(k, m, n, as_, (1, k), gs, (n, 1), 1.0, &mut db[t * k * n..], (n, 1));
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = acc!(*a) {
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if let Some(db) = acc!(*b) {
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = acc!(*a) {
                    for j in 0..g.len() {
                        da[j] += g[j] / bv[j];
                    }
                }
                if let Some(db) = acc!(*b) {
                    for j in 0..g.len() {
                        db[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(dx) = acc!(*x) {
                    add_into(dx, g);
                }
                if let Some(db) = acc!(*bias) {
                    let c = db.len();
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                if let Some(dx) = acc!(*x) {
                    add_into(dx, g);
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(dx) = acc!(*x) {
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            for k in 0..n {
                                dx[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let h = nodes[gamma.0].value.numel();
                let gv = val(*gamma);
                if let Some(dg) = acc!(*gamma) {
                    for (grow, xrow) in g.chunks(h).zip(xhat.chunks(h)) {
                        for j in 0..h {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if let Some(db) = acc!(*beta) {
                    for grow in g.chunks(h) {
                        add_into(db, grow);
                    }
                }
                if let Some(dx) = acc!(*x) {
                    for (r, (grow, xrow)) in g.chunks(h).zip(xhat.chunks(h)).enumerate() {
                        let dxhat: Vec<f64> = (0..h).map(|j| grow[j] * gv[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / h as f64;
                        let mean_dx = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / h as f64;
                        for j in 0..h {
                            dx[r * h + j] += inv_std[r] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                if let Some(dx) = acc!(*x) {
                    for j in 0..g.len() {
                        let v = xv[j];
                        dx[j] += g[j] * (std_normal_cdf(v) + v * std_normal_pdf(v));
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = acc!(*x) {
                    for j in 0..g.len() {
                        dx[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                }
            }
            Op::Log(x) => {
                let xv = val(*x);
                if let Some(dx) = acc!(*x) {
                    for j in 0..g.len() {
                        dx[j] += g[j] / xv[j];
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(dx) = acc!(*x) {
                    for j in 0..g.len() {
                        dx[j] += g[j] * 0.5 / out[j];
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(dx) = acc!(*x) {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            dx[j] += g[j];
                        }
                    }
                }
            }
            Op::ClampMin(x, min) => {
                let xv = val(*x);
                if let Some(dx) = acc!(*x) {
                    for j in 0..g.len() {
                        if xv[j] > *min {
                            dx[j] += g[j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = acc!(*x) {
                    for j in 0..g.len() {
                        dx[j] += g[j] * mask[j];
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                if let Some(dt) = acc!(*table) {
                    let width = g.len() / indices.len();
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut dt[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(dp) = acc!(p) {
                        add_into(dp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SplitHeads { x, batch, heads } => {
                if let Some(dx) = acc!(*x) {
                    let s = node.value.shape();
                    let (len, d) = (s[1], s[2]);
                    for b in 0..*batch {
                        for t in 0..len {
                            for h in 0..*heads {
                                let dst = (b * len + t) * heads * d + h * d;
                                let src = ((b * heads + h) * len + t) * d;
                                add_into(&mut dx[dst..dst + d], &g[src..src + d]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, batch, heads } => {
                if let Some(dx) = acc!(*x) {
                    let s = nodes[x.0].value.shape();
                    let (len, d) = (s[1], s[2]);
                    for b in 0..*batch {
                        for t in 0..len {
                            for h in 0..*heads {
                                let src = (b * len + t) * heads * d + h * d;
                                let dst = ((b * heads + h) * len + t) * d;
                                add_into(&mut dx[dst..dst + d], &g[src..src + d]);
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if let Some(dx) = acc!(*x) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumLast(x) => {
                if let Some(dx) = acc!(*x) {
                    let c = nodes[x.0].value.cols();
                    for (row, &gr) in dx.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|d| *d += gr);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(dx) = acc!(*logits) {
                    let k = probs.len() / labels.len();
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dx[r * k + j] += g[r] * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain-slice softmax, used outside the tape.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Lowest-index argmax.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn gelu_value(x: f64) -> f64 {
    x * std_normal_cdf(x)
}
