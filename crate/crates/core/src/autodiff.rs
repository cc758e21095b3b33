//! Reverse-mode differentiation over an execution tape.
//!
//! Every op appends one node holding its forward value; [`Tape::backward`]
//! walks the nodes in exact reverse order. Values on the tape are kept in
//! `f64` so reductions and gradients accumulate in 64-bit; parameters and
//! exported values are `f32` [`Tensor`]s.
//!
//! Shapes are checked at every op boundary. The only broadcasts are the
//! explicit ones: [`Tape::add_bias`] (row vector over rows) and
//! [`Tape::mul_scalar`] (one-element tensor over everything).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Floor applied inside logarithms and norm denominators.
pub const NUM_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MulScalar(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Transpose(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Row {
        x: usize,
        index: usize,
    },
    StackRows(Vec<usize>),
    MeanRows(usize),
    Sum(usize),
    Mean(usize),
    /// Saved per-row norms.
    NormalizeRows(usize, Vec<f64>),
    /// `(q, p)`.
    JsDivRows(usize, usize),
    /// Saved row softmax of the logits.
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops with the activations needed for backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient w.r.t. a recorded value, if it was reachable from the loss.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. a parameter; `None` if the parameter was never
    /// placed on the tape.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Adds every parameter gradient into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (&id, &var) in &self.params {
            if let Some(g) = self.wrt(var) {
                let p = store.get_mut(id);
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                    *dst = (*dst as f64 + src) as f32;
                }
            }
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::invalid(
            op,
            format!("expected a matrix, got shape {shape:?}"),
        )),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for r in 0..k {
            let a_ir = a[i * k + r];
            let b_row = &b[r * n..(r + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ir * bv;
            }
        }
    }
    c
}

/// `da[m×k] += dc[m×n] · b[k×n]ᵀ`
fn mm_nt_acc(da: &mut [f64], dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for r in 0..k {
            let b_row = &b[r * n..(r + 1) * n];
            let dot: f64 = dc_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            da[i * k + r] += dot;
        }
    }
}

/// `db[k×n] += a[m×k]ᵀ · dc[m×n]`
fn mm_tn_acc(db: &mut [f64], a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for r in 0..k {
            let a_ir = a[i * k + r];
            let db_row = &mut db[r * n..(r + 1) * n];
            for (d, g) in db_row.iter_mut().zip(dc_row) {
                *d += a_ir * g;
            }
        }
    }
}

fn js_terms(p: f64, q: f64) -> (f64, f64) {
    let m = (p + q).max(NUM_FLOOR);
    let lp = ((2.0 * p).max(NUM_FLOOR) / m).ln();
    let lq = ((2.0 * q).max(NUM_FLOOR) / m).ln();
    (lp, lq)
}

/// Jensen–Shannon divergence of two distributions, natural log, with the
/// convention `0·ln(·) = 0`.
pub(crate) fn js_div_f64(q: &[f64], p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pk, &qk) in p.iter().zip(q) {
        let (lp, lq) = js_terms(pk, qk);
        if pk > 0.0 {
            acc += 0.5 * pk * lp;
        }
        if qk > 0.0 {
            acc += 0.5 * qk * lq;
        }
    }
    acc.max(0.0)
}

pub(crate) fn check_simplex(op: &'static str, row: &[f64]) -> Result<()> {
    if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::NotSimplex {
            op,
            msg: format!("entry {v}"),
        });
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::NotSimplex {
            op,
            msg: format!("row sums to {s}"),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| x as f64).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, false)
    }

    pub fn constant_f64(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::invalid(
                "constant",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(&shape),
                    value.len()
                ),
            ));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    /// Places a parameter on the tape. Repeated calls with the same id return
    /// the same handle, so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.value(id);
        let value = t.data().iter().map(|&x| x as f64).collect();
        let v = self.push(t.shape().to_vec(), value, Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Records an independent differentiable leaf (not tied to a store).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| x as f64).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value_f64(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Forward value as an `f32` tensor.
    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.iter().map(|&x| x as f32).collect())
            .expect("tape node shapes are valid")
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "scalar() on shape {:?}", n.shape);
        n.value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let value = mm(&self.node(a).value, &self.node(b).value, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a.0, b.0), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(shape, value, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.node(a).value.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a.0, c), |x| x * c)
    }

    /// `x[r×c] + bias` with `bias` of shape `[c]` or `[1×c]` added to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims2("add_bias", self.shape(x))?;
        if numel(self.shape(bias)) != c || self.shape(bias).iter().filter(|&&d| d != 1).count() > 1
        {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = &self.node(bias).value;
        let mut value = self.node(x).value.clone();
        for i in 0..r {
            for (v, bv) in value[i * c..(i + 1) * c].iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(vec![r, c], value, Op::AddBias(x.0, bias.0), rg))
    }

    /// Multiplies every entry of `x` by the one-element value `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.node(s).value[0];
        let value = self.node(x).value.iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, s]);
        Ok(self.push(shape, value, Op::MulScalar(x.0, s.0), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = &self.node(x).value;
        let mut value = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len)
                    .map(|l| xv[at(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (xv[at(l)] - max).exp();
                    value[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    value[at(l)] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            value,
            Op::Softmax {
                x: x.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(x))?;
        let xv = &self.node(x).value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, r], value, Op::Transpose(x.0), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2("slice_cols", self.shape(x))?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_cols",
                format!("columns {start}..{} out of range for {c}", start + len),
            ));
        }
        let xv = &self.node(x).value;
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, len], value, Op::SliceCols { x: x.0, start }, rg))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (r, _) = dims2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2("concat_cols", self.shape(p))?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.node(p).value[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            vec![r, total],
            value,
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
            rg,
        ))
    }

    /// Row `index` of a matrix as a `[1×c]` matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (r, c) = dims2("row", self.shape(x))?;
        if index >= r {
            return Err(Error::invalid("row", format!("row {index} of {r}")));
        }
        let value = self.node(x).value[index * c..(index + 1) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1, c], value, Op::Row { x: x.0, index }, rg))
    }

    /// Stacks `[1×c]` rows into a `[k×c]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(Error::EmptySequence("stack_rows"))?;
        let want = self.shape(first).to_vec();
        let (one, c) = dims2("stack_rows", &want)?;
        if one != 1 {
            return Err(Error::invalid(
                "stack_rows",
                format!("row of shape {want:?}"),
            ));
        }
        let mut value = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if self.shape(r) != want.as_slice() {
                return Err(Error::shape("stack_rows", &want, self.shape(r)));
            }
            value.extend_from_slice(&self.node(r).value);
        }
        let rg = self.rg(rows);
        Ok(self.push(
            vec![rows.len(), c],
            value,
            Op::StackRows(rows.iter().map(|v| v.0).collect()),
            rg,
        ))
    }

    /// Column means of a matrix as a `[1×c]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("mean_rows", self.shape(x))?;
        let xv = &self.node(x).value;
        let mut value = vec![0.0; c];
        for i in 0..r {
            for (v, x) in value.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                *v += x;
            }
        }
        value.iter_mut().for_each(|v| *v /= r as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1, c], value, Op::MeanRows(x.0), rg))
    }

    /// Sum of all entries as a `[1×1]` value.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1, 1], vec![s], Op::Sum(x.0), rg)
    }

    /// Mean of all entries as a `[1×1]` value.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = &self.node(x).value;
        let s = n.iter().sum::<f64>() / n.len() as f64;
        let rg = self.rg(&[x]);
        self.push(vec![1, 1], vec![s], Op::Mean(x.0), rg)
    }

    /// Divides each row by its Euclidean norm; rows with norm below
    /// [`NUM_FLOOR`] are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("normalize_rows", self.shape(x))?;
        let xv = &self.node(x).value;
        let mut norms = Vec::with_capacity(r);
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NUM_FLOOR || !norm.is_finite() {
                return Err(Error::DegenerateVector {
                    op: "cosine_sim",
                    norm,
                });
            }
            value.extend(row.iter().map(|v| v / norm));
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, c], value, Op::NormalizeRows(x.0, norms), rg))
    }

    /// Per-row Jensen–Shannon divergence between simplices `q` and `p`
    /// (both `[M×N]`), giving `[M×1]`.
    pub fn js_div_rows(&mut self, q: Var, p: Var) -> Result<Var> {
        self.same_shape("js_div", q, p)?;
        let (m, n) = dims2("js_div", self.shape(q))?;
        let qv = &self.node(q).value;
        let pv = &self.node(p).value;
        let mut value = Vec::with_capacity(m);
        for i in 0..m {
            let qr = &qv[i * n..(i + 1) * n];
            let pr = &pv[i * n..(i + 1) * n];
            check_simplex("js_div", qr)?;
            check_simplex("js_div", pr)?;
            value.push(js_div_f64(qr, pr));
        }
        let rg = self.rg(&[q, p]);
        Ok(self.push(vec![m, 1], value, Op::JsDivRows(q.0, p.0), rg))
    }

    /// Mean cross-entropy of row-wise `softmax(logits)` against class ids,
    /// evaluated through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = dims2("cross_entropy", self.shape(logits))?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        if let Some(&class) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::ClassOutOfRange {
                class,
                n_classes: n,
            });
        }
        let lv = &self.node(logits).value;
        let mut probs = Vec::with_capacity(m * n);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1, 1],
            vec![loss / m as f64],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must have one element, got shape {:?}", ln.shape),
            ));
        }
        if !ln.value[0].is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", ln.value[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[i].requires_grad {
                return;
            }
            let buf = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                acc(*a, &mut |da| mm_nt_acc(da, g, &nodes[*b].value, m, k, n));
                acc(*b, &mut |db| mm_tn_acc(db, &nodes[*a].value, g, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)
                });
            }
            Op::AddBias(x, b) => {
                let c = nodes[*x].shape[1];
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| {
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let sv = nodes[*s].value[0];
                let xv = &nodes[*x].value;
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * sv)
                });
                acc(*s, &mut |d| {
                    d[0] += g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(a) => {
                let xv = &nodes[*a].value;
                acc(*a, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                d[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                let len = node.shape[1];
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..len {
                            d[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].shape[1];
                    acc(p, &mut |d| {
                        for i in 0..r {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Row { x, index } => {
                let c = node.shape[1];
                acc(*x, &mut |d| {
                    d[index * c..(index + 1) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g);
                });
            }
            Op::StackRows(rows) => {
                let c = node.shape[1];
                for (i, &r) in rows.iter().enumerate() {
                    acc(r, &mut |d| {
                        d.iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(d, g)| *d += g);
                    });
                }
            }
            Op::MeanRows(x) => {
                let r = nodes[*x].shape[0];
                let c = node.shape[1];
                acc(*x, &mut |d| {
                    for row in d.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(d, g)| *d += g / r as f64);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = nodes[*x].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::NormalizeRows(x, norms) => {
                let c = node.shape[1];
                let y = &node.value;
                acc(*x, &mut |d| {
                    for (i, norm) in norms.iter().enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::JsDivRows(q, p) => {
                let n = nodes[*q].shape[1];
                let (qv, pv) = (&nodes[*q].value, &nodes[*p].value);
                // d/dp = ½ ln(2p/(p+q)), d/dq = ½ ln(2q/(p+q))
                acc(*q, &mut |d| {
                    for (k, d) in d.iter_mut().enumerate() {
                        let (_, lq) = js_terms(pv[k], qv[k]);
                        *d += g[k / n] * 0.5 * lq;
                    }
                });
                acc(*p, &mut |d| {
                    for (k, d) in d.iter_mut().enumerate() {
                        let (lp, _) = js_terms(pv[k], qv[k]);
                        *d += g[k / n] * 0.5 * lp;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = nodes[*logits].shape[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |d| {
                    for (k, d) in d.iter_mut().enumerate() {
                        let hot = if targets[k / n] == k % n { 1.0 } else { 0.0 };
                        *d += scale * (probs[k] - hot);
                    }
                });
            }
        }
    }
}

/// Per-parameter outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_error < tol)
    }
}

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar graph built by `f` against
/// central differences, entry by entry, for every parameter in `params`.
///
/// Each entry is perturbed in its `f32` storage, so the difference quotient
/// divides by the step that was actually representable. `corrupt` is a fault
/// injection hook applied to the analytic gradients before comparison.
pub fn grad_check_with<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    mut f: F,
    mut corrupt: impl FnMut(ParamId, &mut [f64]),
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps {eps} outside [1e-4, 1e-2]"),
        ));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = tape.scalar(loss);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("grad_check objective {base}")));
    }
    let grads = tape.backward(loss)?;

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let l = f(&mut t, store)?;
        let v = t.scalar(l);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check objective {v}")));
        }
        Ok(v)
    };

    let mut out = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.value(id).len();
        let mut analytic = grads
            .param(id)
            .map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        corrupt(id, &mut analytic);
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..n {
            let orig = store.value(id).data()[k];
            let plus = orig + eps as f32;
            let minus = orig - eps as f32;
            store.get_mut(id).value.data_mut()[k] = plus;
            let fp = eval(store);
            store.get_mut(id).value.data_mut()[k] = minus;
            let fm = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (fp? - fm?) / (plus as f64 - minus as f64);
            let err = relative_error(analytic[k], numeric);
            if err > check.max_rel_error || k == 0 {
                check.max_rel_error = err;
                check.worst_index = k;
                check.analytic = analytic[k];
                check.numeric = numeric;
            }
        }
        out.push(check);
    }
    Ok(GradCheckReport { params: out })
}

/// [`grad_check_with`] without fault injection.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_with(store, params, eps, f, |_, _| {})
}
