use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{axpy, dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{ComputeError, ParamId, ParamStore, Tensor};
use crate::math;
use crate::rng::SplitMix64;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Targets and weights for [`Tape::sequence_nll`]; per-row slices are
/// time-major (`r = t·B + b`).
#[derive(Debug, Clone, Copy)]
pub struct SequenceTargets<'a> {
    pub targets: &'a [u32],
    /// Per-position weight; 0 marks padding.
    pub lambdas: &'a [f64],
    /// Per-sequence weight `w_b`.
    pub weights: &'a [f64],
    /// Per-sequence divisor `n_b`.
    pub divisors: &'a [f64],
}

/// `-(1-ε)·logp[t] - ε/V · Σ_j logp[j]`
fn nll_term(row: &[f64], t: usize, smoothing: f64) -> f64 {
    let mut term = -(1.0 - smoothing) * row[t];
    if smoothing > 0.0 {
        term -= smoothing / row.len() as f64 * row.iter().sum::<f64>();
    }
    term
}

fn nll_term_grad(row: &mut [f64], t: usize, scale: f64, smoothing: f64) {
    row[t] -= scale * (1.0 - smoothing);
    if smoothing > 0.0 {
        let u = scale * smoothing / row.len() as f64;
        for x in row.iter_mut() {
            *x -= u;
        }
    }
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Embedding(Var, Vec<u32>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskMul(Var, Rc<[f64]>),
    RowMaskMul(Var, Rc<[f64]>),
    Softmax(Var),
    LogSoftmax(Var),
    WeightedNll {
        logp: Var,
        targets: Vec<u32>,
        weights: Vec<f64>,
        smoothing: f64,
    },
    SequenceNll {
        steps: Vec<Var>,
        targets: Vec<u32>,
        /// `λ_r · w_b / n_b` per row.
        coef: Vec<f64>,
        smoothing: f64,
    },
    Sum(Var),
    AddGroups(Var, Var, usize),
    Attend(Var, Var),
    StackTime(Vec<Var>),
    Reshape(Var),
    Blend(Var, Var, Rc<[f64]>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Value,
    op: Op,
}

/// Records primitive applications in execution order.
///
/// Parameters are read in place from the borrowed [`ParamStore`]; each
/// parameter gets at most one leaf node, so a table used twice (tied
/// embeddings) accumulates both gradient contributions.
pub struct Tape<'p> {
    params: &'p ParamStore,
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, left: (usize, usize), right: (usize, usize)) -> ComputeError {
    ComputeError::ShapeMismatch { op, left, right }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.get(*id).data(),
        }
    }

    /// The value as a tensor of shape `[rows, cols]`.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node dims match data")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(data),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a parameter tensor; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let (rows, cols) = self.params.get(id).matrix_dims();
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Leaf holding a copy of `data`; gradients flow into it but nowhere else.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, ComputeError> {
        if rows * cols != data.len() {
            return Err(ComputeError::DataLength {
                len: data.len(),
                shape: vec![rows, cols],
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf)
    }

    // -- linear algebra ---------------------------------------------------

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(mismatch("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(mismatch("matmul_bt", (m, k), (n, k2)));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMulBt(a, b)))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        record: Op,
    ) -> Result<Var, ComputeError> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(mismatch(op, da, db));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(da.0, da.1, out, record))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1,n]` row to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, ComputeError> {
        let (m, n) = self.dims(a);
        let dr = self.dims(row);
        if dr != (1, n) {
            return Err(mismatch("add_row", (m, n), dr));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(n.max(1)) {
            for (o, &x) in chunk.iter_mut().zip(r) {
                *o += x;
            }
        }
        Ok(self.push(m, n, out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        self.push(m, n, out, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    // -- elementwise ------------------------------------------------------

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(m, n, out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, math::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    // -- shape ------------------------------------------------------------

    /// Concatenates along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, ComputeError> {
        let m = self.dims(parts[0]).0;
        let mut n = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.0 != m {
                return Err(mismatch("concat", self.dims(parts[0]), d));
            }
            n += d.1;
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(m, n, out, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, ComputeError> {
        let (m, n) = self.dims(a);
        if start + len > n {
            return Err(ComputeError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        Ok(self.push(m, len, out, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, ComputeError> {
        let (m, n) = self.dims(a);
        if start + len > m {
            return Err(ComputeError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: m,
            });
        }
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        Ok(self.push(len, n, out, Op::SliceRows(a, start)))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, ComputeError> {
        let d = self.dims(a);
        if d.0 * d.1 != rows * cols {
            return Err(mismatch("reshape", d, (rows, cols)));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(rows, cols, out, Op::Reshape(a)))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, ComputeError> {
        let (v, e) = self.dims(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(ComputeError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&t[id * e..(id + 1) * e]);
        }
        Ok(self.push(ids.len(), e, out, Op::Embedding(table, ids.to_vec())))
    }

    /// Stacks `L` per-step `[B,D]` values into a batch-major `[B·L, D]`
    /// matrix (row `b·L + t` is step `t` of item `b`).
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var, ComputeError> {
        let (b, d) = self.dims(steps[0]);
        for &s in steps {
            if self.dims(s) != (b, d) {
                return Err(mismatch("stack_time", (b, d), self.dims(s)));
            }
        }
        let l = steps.len();
        let mut out = vec![0.0; b * l * d];
        for (t, &s) in steps.iter().enumerate() {
            let v = self.value(s);
            for i in 0..b {
                out[(i * l + t) * d..(i * l + t + 1) * d].copy_from_slice(&v[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(b * l, d, out, Op::StackTime(steps.to_vec())))
    }

    // -- normalization and masking ---------------------------------------

    /// Normalizes each row to zero mean and unit variance (epsilon 1e-6),
    /// then applies the learned `gain` and `bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, ComputeError> {
        const EPS: f64 = 1e-6;
        let (m, n) = self.dims(x);
        for p in [gain, bias] {
            if self.dims(p) != (1, n) {
                return Err(mismatch("layer_norm", (m, n), self.dims(p)));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / math::sqrt(var + EPS);
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Rc<[f64]>) -> Result<Var, ComputeError> {
        let (m, n) = self.dims(x);
        if mask.len() != m * n {
            return Err(mismatch("dropout_mask_apply", (m, n), (1, mask.len())));
        }
        let out = self.value(x).iter().zip(mask.iter()).map(|(a, b)| a * b).collect();
        Ok(self.push(m, n, out, Op::MaskMul(x, mask)))
    }

    /// Inverted dropout with rate `p`. Identity when `rng` is `None`
    /// (inference) or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut SplitMix64>) -> Var {
        match rng {
            Some(rng) if p > 0.0 => {
                let (m, n) = self.dims(x);
                let mask: Rc<[f64]> = Rc::from(super::dropout_mask(m * n, p, rng));
                let out = self.value(x).iter().zip(mask.iter()).map(|(a, b)| a * b).collect();
                self.push(m, n, out, Op::MaskMul(x, mask))
            }
            _ => x,
        }
    }

    /// Scales whole rows by constants (token-level dropout).
    pub fn row_mask_mul(&mut self, x: Var, mask: Rc<[f64]>) -> Result<Var, ComputeError> {
        let (m, n) = self.dims(x);
        if mask.len() != m {
            return Err(mismatch("dropout_mask_apply", (m, n), (mask.len(), 1)));
        }
        let mut out = self.value(x).to_vec();
        for (i, row) in out.chunks_mut(n.max(1)).enumerate() {
            for v in row {
                *v *= mask[i];
            }
        }
        Ok(self.push(m, n, out, Op::RowMaskMul(x, mask)))
    }

    /// Per row `r`: `mask[r]·a[r] + (1 - mask[r])·b[r]`.
    pub fn blend(&mut self, a: Var, b: Var, mask: Rc<[f64]>) -> Result<Var, ComputeError> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db || mask.len() != da.0 {
            return Err(mismatch("blend", da, db));
        }
        let n = da.1;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.len());
        for i in 0..da.0 {
            let w = mask[i];
            for j in 0..n {
                out.push(w * av[i * n + j] + (1.0 - w) * bv[i * n + j]);
            }
        }
        Ok(self.push(da.0, n, out, Op::Blend(a, b, mask)))
    }

    // -- distributions ----------------------------------------------------

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row, None);
        }
        self.push(m, n, out, Op::Softmax(x))
    }

    /// Row-wise softmax over the entries where `valid` is true; the others
    /// get probability zero.
    pub fn masked_softmax(&mut self, x: Var, valid: &[bool]) -> Result<Var, ComputeError> {
        let (m, n) = self.dims(x);
        if valid.len() != m * n {
            return Err(mismatch("softmax", (m, n), (1, valid.len())));
        }
        let mut out = self.value(x).to_vec();
        for (row, mask) in out.chunks_mut(n.max(1)).zip(valid.chunks(n.max(1))) {
            softmax_in_place(row, Some(mask));
        }
        Ok(self.push(m, n, out, Op::Softmax(x)))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let lse = math::log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(m, n, out, Op::LogSoftmax(x))
    }

    /// `Σ_r w_r · (-(1-ε)·logp[r, t_r] - ε/V · Σ_j logp[r, j])`; with
    /// `ε = 0` this is `Σ_r -w_r · logp[r, t_r]`.
    pub fn weighted_nll(
        &mut self,
        logp: Var,
        targets: &[u32],
        weights: &[f64],
        smoothing: f64,
    ) -> Result<Var, ComputeError> {
        let (m, v) = self.dims(logp);
        if targets.len() != m || weights.len() != m {
            return Err(mismatch("weighted_nll", (m, v), (targets.len(), weights.len())));
        }
        let lp = self.value(logp);
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let t = t as usize;
            if t >= v {
                return Err(ComputeError::IndexOutOfRange {
                    op: "weighted_nll",
                    index: t,
                    bound: v,
                });
            }
            if w == 0.0 {
                continue;
            }
            loss += w * nll_term(&lp[r * v..(r + 1) * v], t, smoothing);
        }
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::WeightedNll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing,
            },
        ))
    }

    /// Loss over a padded batch of sequences given one `[B,V]` log-probability
    /// matrix per step: `Σ_b w_b · (Σ_t λ_tb · nll_tb) / n_b`, with `nll` as in
    /// [`Tape::weighted_nll`]. Rows with `λ = 0` are padding.
    ///
    /// Each sequence's sum is divided by `n_b` before `w_b` is applied, so
    /// scaling a lone sequence's weight scales the loss by exactly that factor.
    pub fn sequence_nll(&mut self, steps: &[Var], y: SequenceTargets<'_>, smoothing: f64) -> Result<Var, ComputeError> {
        let b = y.weights.len();
        let (rows, v) = self.dims(steps[0]);
        let n = steps.len() * b;
        if rows != b || y.divisors.len() != b || y.targets.len() != n || y.lambdas.len() != n {
            return Err(mismatch("sequence_nll", (rows, v), (b, y.targets.len())));
        }
        let mut sums = vec![0.0; b];
        for (t, &s) in steps.iter().enumerate() {
            if self.dims(s) != (b, v) {
                return Err(mismatch("sequence_nll", (b, v), self.dims(s)));
            }
            let lp = self.value(s);
            for (i, sum) in sums.iter_mut().enumerate() {
                let r = t * b + i;
                let (target, lambda) = (y.targets[r] as usize, y.lambdas[r]);
                if target >= v {
                    return Err(ComputeError::IndexOutOfRange {
                        op: "sequence_nll",
                        index: target,
                        bound: v,
                    });
                }
                if lambda != 0.0 {
                    *sum += lambda * nll_term(&lp[i * v..(i + 1) * v], target, smoothing);
                }
            }
        }
        let mut loss = 0.0;
        for ((s, w), d) in sums.iter().zip(y.weights).zip(y.divisors) {
            loss += w * (s / d);
        }
        let coef = (0..n).map(|r| y.lambdas[r] * y.weights[r % b] / y.divisors[r % b]).collect();
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::SequenceNll {
                steps: steps.to_vec(),
                targets: y.targets.to_vec(),
                coef,
                smoothing,
            },
        ))
    }

    // -- attention helpers ------------------------------------------------

    /// Adds query row `q[b]` to each of the `group` rows `keys[b·group ..]`.
    pub fn add_groups(&mut self, keys: Var, q: Var, group: usize) -> Result<Var, ComputeError> {
        let (bl, a) = self.dims(keys);
        let (b, a2) = self.dims(q);
        if a != a2 || b * group != bl {
            return Err(mismatch("add_groups", (bl, a), (b, a2)));
        }
        let qv = self.value(q);
        let mut out = self.value(keys).to_vec();
        for (r, row) in out.chunks_mut(a.max(1)).enumerate() {
            let i = r / group;
            for (o, &x) in row.iter_mut().zip(&qv[i * a..(i + 1) * a]) {
                *o += x;
            }
        }
        Ok(self.push(bl, a, out, Op::AddGroups(keys, q, group)))
    }

    /// `out[b] = Σ_j alpha[b,j] · values[b·L + j]`.
    pub fn attend(&mut self, alpha: Var, values: Var) -> Result<Var, ComputeError> {
        let (b, l) = self.dims(alpha);
        let (bl, d) = self.dims(values);
        if b * l != bl {
            return Err(mismatch("attend", (b, l), (bl, d)));
        }
        let (al, vals) = (self.value(alpha), self.value(values));
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..l {
                let w = al[i * l + j];
                if w != 0.0 {
                    axpy(w, &vals[(i * l + j) * d..(i * l + j + 1) * d], o);
                }
            }
        }
        Ok(self.push(b, d, out, Op::Attend(alpha, values)))
    }

    // -- reverse pass -----------------------------------------------------

    /// Reverse pass from a scalar. Every recorded node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, ComputeError> {
        let d = self.dims(loss);
        if d != (1, 1) {
            return Err(ComputeError::NonScalarLoss(d));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Parameter gradients indexed by [`ParamId`]; parameters that do not
    /// reach the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.param_nodes[i]
                    .and_then(|v| grads.wrt(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (m, n) = (node.rows, node.cols);
        let out = match &node.value {
            Value::Owned(d) => d.as_slice(),
            Value::Param(_) => &[],
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.dims(*a).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G·Bᵀ, dB = Aᵀ·G
                matmul_bt_acc(g, bv, self.grad_mut(grads, *a), m, n, k);
                matmul_at_acc(av, g, self.grad_mut(grads, *b), m, k, n);
            }
            Op::MatMulBt(a, b) => {
                let k = self.dims(*a).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                matmul_acc(g, bv, self.grad_mut(grads, *a), m, n, k);
                matmul_at_acc(g, av, self.grad_mut(grads, *b), m, n, k);
            }
            Op::Add(a, b) => {
                axpy(1.0, g, self.grad_mut(grads, *a));
                axpy(1.0, g, self.grad_mut(grads, *b));
            }
            Op::Sub(a, b) => {
                axpy(1.0, g, self.grad_mut(grads, *a));
                axpy(-1.0, g, self.grad_mut(grads, *b));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = self.grad_mut(grads, *a);
                for j in 0..g.len() {
                    ga[j] += g[j] * bv[j];
                }
                let gb = self.grad_mut(grads, *b);
                for j in 0..g.len() {
                    gb[j] += g[j] * av[j];
                }
            }
            Op::AddRow(a, row) => {
                axpy(1.0, g, self.grad_mut(grads, *a));
                let gr = self.grad_mut(grads, *row);
                for chunk in g.chunks(n.max(1)) {
                    axpy(1.0, chunk, gr);
                }
            }
            Op::Scale(a, c) => axpy(*c, g, self.grad_mut(grads, *a)),
            Op::Sum(a) => {
                for v in self.grad_mut(grads, *a) {
                    *v += g[0];
                }
            }
            Op::Sigmoid(a) => {
                let ga = self.grad_mut(grads, *a);
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }
            Op::Tanh(a) => {
                let ga = self.grad_mut(grads, *a);
                for j in 0..g.len() {
                    ga[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }
            Op::Relu(a) => {
                let ga = self.grad_mut(grads, *a);
                for j in 0..g.len() {
                    if out[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    let gp = self.grad_mut(grads, p);
                    for r in 0..m {
                        axpy(1.0, &g[r * n + offset..r * n + offset + c], &mut gp[r * c..(r + 1) * c]);
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let full = self.dims(*a).1;
                let ga = self.grad_mut(grads, *a);
                for r in 0..m {
                    axpy(1.0, &g[r * n..(r + 1) * n], &mut ga[r * full + start..r * full + start + n]);
                }
            }
            Op::SliceRows(a, start) => {
                let ga = self.grad_mut(grads, *a);
                axpy(1.0, g, &mut ga[start * n..(start + m) * n]);
            }
            Op::Reshape(a) => axpy(1.0, g, self.grad_mut(grads, *a)),
            Op::Embedding(table, ids) => {
                let gt = self.grad_mut(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    axpy(1.0, &g[r * n..(r + 1) * n], &mut gt[id * n..(id + 1) * n]);
                }
            }
            Op::StackTime(steps) => {
                let l = steps.len();
                let b = m / l;
                for (t, &s) in steps.iter().enumerate() {
                    let gs = self.grad_mut(grads, s);
                    for i in 0..b {
                        axpy(1.0, &g[(i * l + t) * n..(i * l + t + 1) * n], &mut gs[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        mean_d += dh;
                        mean_dh += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        dx[r * n + j] = rstd[r] * (dh - mean_d - hr[j] * mean_dh);
                    }
                }
                axpy(1.0, &dx, self.grad_mut(grads, *x));
                axpy(1.0, &dgain, self.grad_mut(grads, *gain));
                axpy(1.0, &dbias, self.grad_mut(grads, *bias));
            }
            Op::MaskMul(x, mask) => {
                let gx = self.grad_mut(grads, *x);
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }
            Op::RowMaskMul(x, mask) => {
                let gx = self.grad_mut(grads, *x);
                for r in 0..m {
                    axpy(mask[r], &g[r * n..(r + 1) * n], &mut gx[r * n..(r + 1) * n]);
                }
            }
            Op::Blend(a, b, mask) => {
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    axpy(mask[r], gr, &mut self.grad_mut(grads, *a)[r * n..(r + 1) * n]);
                    axpy(1.0 - mask[r], gr, &mut self.grad_mut(grads, *b)[r * n..(r + 1) * n]);
                }
            }
            Op::Softmax(x) => {
                let gx = self.grad_mut(grads, *x);
                for r in 0..m {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s = dot(gr, y);
                    for j in 0..n {
                        gx[r * n + j] += y[j] * (gr[j] - s);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let gx = self.grad_mut(grads, *x);
                for r in 0..m {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        gx[r * n + j] += gr[j] - math::exp(y[j]) * s;
                    }
                }
            }
            Op::WeightedNll {
                logp,
                targets,
                weights,
                smoothing,
            } => {
                let v = self.dims(*logp).1;
                let gl = self.grad_mut(grads, *logp);
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    nll_term_grad(&mut gl[r * v..(r + 1) * v], t as usize, g[0] * w, *smoothing);
                }
            }
            Op::SequenceNll {
                steps,
                targets,
                coef,
                smoothing,
            } => {
                let (b, v) = self.dims(steps[0]);
                for (t, &s) in steps.iter().enumerate() {
                    let gl = self.grad_mut(grads, s);
                    for i in 0..b {
                        let r = t * b + i;
                        if coef[r] == 0.0 {
                            continue;
                        }
                        nll_term_grad(&mut gl[i * v..(i + 1) * v], targets[r] as usize, g[0] * coef[r], *smoothing);
                    }
                }
            }
            Op::AddGroups(keys, q, group) => {
                axpy(1.0, g, self.grad_mut(grads, *keys));
                let gq = self.grad_mut(grads, *q);
                for (r, row) in g.chunks(n.max(1)).enumerate() {
                    let i = r / group;
                    axpy(1.0, row, &mut gq[i * n..(i + 1) * n]);
                }
            }
            Op::Attend(alpha, values) => {
                let l = self.dims(*alpha).1;
                let (al, vals) = (self.value(*alpha), self.value(*values));
                let mut dalpha = vec![0.0; m * l];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for j in 0..l {
                        dalpha[i * l + j] = dot(gi, &vals[(i * l + j) * n..(i * l + j + 1) * n]);
                    }
                }
                let gv = self.grad_mut(grads, *values);
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for j in 0..l {
                        let w = al[i * l + j];
                        if w != 0.0 {
                            axpy(w, gi, &mut gv[(i * l + j) * n..(i * l + j + 1) * n]);
                        }
                    }
                }
                axpy(1.0, &dalpha, self.grad_mut(grads, *alpha));
            }
        }
    }

    fn grad_mut<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let (r, c) = self.dims(v);
        grads[v.0].get_or_insert_with(|| vec![0.0; r * c])
    }
}

fn softmax_in_place(row: &mut [f64], valid: Option<&[bool]>) {
    let ok = |j: usize| valid.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    let mut s = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        *v = if ok(j) { math::exp(*v - max) } else { 0.0 };
        s += *v;
    }
    if s > 0.0 {
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}
