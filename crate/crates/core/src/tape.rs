//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; each
//! op returns a [`Var`] handle into the tape. [`Tape::backward`] replays the
//! list in reverse, accumulating exact first-order derivatives into the
//! gradient buffers of a [`ParamSet`]. Every op validates shapes and rejects
//! non-finite outputs, so numeric faults surface at the op that produced
//! them rather than epochs later.
//!
//! Parameters are bound by name via [`Tape::param`]; binding the same name
//! twice returns the same node, so a parameter used in several places
//! receives the sum of all its path gradients.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use std::collections::BTreeMap;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Square(Var),
    /// m * x + b with scalar constants; only the slope matters in reverse.
    AffineConst(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Silu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Concat(Var, Var),
    SliceVec(Var, usize, usize),
    SelectElem(Var, usize),
    Matmul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    SelectRow(Var, usize),
    MeanRows(Var),
    SubsetRowsMean(Var, Vec<usize>),
    AddRowBroadcast(Var, Var),
    SliceCols(Var, usize, usize),
    HConcat(Var, Var),
    SoftmaxRows(Var),
    MaskedSoftmax(Var, Vec<bool>),
    MaskedLogProb(Var, Vec<bool>, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    bindings: BTreeMap<String, Var>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to node `v`.
    /// Empty until `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).map(|g| g.as_slice())
    }

    fn push(&mut self, value: Tensor, op: Op, context: &'static str) -> Result<Var> {
        value.check_finite(context)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input leaf (constant with respect to parameters, but still
    /// receives a gradient buffer, which tests use for input sensitivities).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "input")
    }

    pub fn scalar_input(&mut self, value: f64) -> Result<Var> {
        self.input(Tensor::scalar(value))
    }

    /// Bind a named parameter. Repeated binds of one name return the same
    /// node so all use sites share one gradient buffer.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let value = params.get(name)?.clone();
        let v = self.push(value, Op::Leaf, "param")?;
        self.bindings.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy a node's value back in as a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    // ---- elementwise ----

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        name: &'static str,
    ) -> Result<Tensor> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor::new(ta.shape().to_vec(), data)?)
        } else if ta.is_scalar() {
            let x = ta.item();
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            Ok(Tensor::new(tb.shape().to_vec(), data)?)
        } else if tb.is_scalar() {
            let y = tb.item();
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            Ok(Tensor::new(ta.shape().to_vec(), data)?)
        } else {
            Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_elementwise(a, b, |x, y| x + y, "add")?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_elementwise(a, b, |x, y| x - y, "sub")?;
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary_elementwise(a, b, |x, y| x * y, "mul")?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg(a), "neg")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a), "square")
    }

    /// Elementwise m·x + b with f64 constants.
    pub fn affine_const(&mut self, a: Var, m: f64, b: f64) -> Result<Var> {
        self.unary(a, |x| m * x + b, Op::AffineConst(a, m), "affine_const")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus, Op::Softplus(a), "softplus")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a), "silu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a), "relu")
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Mean squared error between two equal-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.rank() != 1 || tb.rank() != 1 || ta.numel() != tb.numel() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b), "dot")
    }

    // ---- vector ops ----

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.rank() != 1 || tb.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let value = Tensor::vector(data);
        self.push(value, Op::Concat(a, b), "concat")
    }

    pub fn slice_vec(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 1 || start + len > ta.numel() {
            return Err(Error::ShapeMismatch {
                op: "slice_vec",
                detail: format!("[{start}, {start}+{len}) of {:?}", ta.shape()),
            });
        }
        let value = Tensor::vector(ta.data()[start..start + len].to_vec());
        self.push(value, Op::SliceVec(a, start, len), "slice_vec")
    }

    pub fn select_elem(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "select_elem",
                detail: format!("expected vector, got {:?}", ta.shape()),
            });
        }
        if index >= ta.numel() {
            return Err(Error::IndexOutOfBounds { what: "select_elem", index, len: ta.numel() });
        }
        let value = Tensor::scalar(ta.data()[index]);
        self.push(value, Op::SelectElem(a, index), "select_elem")
    }

    // ---- matrix ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let (m, ka) = ta.dims2().map_err(|_| Error::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        })?;
        let (kb, n) = tb.dims2().map_err(|_| Error::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        })?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner extents differ: {:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut out = vec![0.0; m * n];
        let ad = ta.data();
        let bd = tb.data();
        for i in 0..m {
            let arow = &ad[i * ka..(i + 1) * ka];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::Matmul(a, b), "matmul")
    }

    /// Matrix (m×n) times vector (n) → vector (m).
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tx = &self.nodes[x.0].value;
        let (m, n) = ta.dims2()?;
        if tx.rank() != 1 || tx.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                detail: format!("{:?} vs {:?}", ta.shape(), tx.shape()),
            });
        }
        let ad = ta.data();
        let xd = tx.data();
        let out: Vec<f64> = (0..m)
            .map(|i| ad[i * n..(i + 1) * n].iter().zip(xd).map(|(&a, &b)| a * b).sum())
            .collect();
        self.push(Tensor::vector(out), Op::MatVec(a, x), "matvec")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2()?;
        let ad = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push(value, Op::Transpose(a), "transpose")
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2()?;
        if row >= m {
            return Err(Error::IndexOutOfBounds { what: "select_row", index: row, len: m });
        }
        let value = Tensor::vector(ta.data()[row * n..(row + 1) * n].to_vec());
        self.push(value, Op::SelectRow(a, row), "select_row")
    }

    /// Column means: (m×n) → vector (n).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2()?;
        let ad = ta.data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&ad[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push(Tensor::vector(out), Op::MeanRows(a), "mean_rows")
    }

    /// Mean of the rows listed in `rows`: (m×n) → vector (n).
    pub fn subset_rows_mean(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2()?;
        if rows.is_empty() {
            return Err(Error::BadData("subset_rows_mean needs at least one row".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::IndexOutOfBounds { what: "subset_rows_mean", index: bad, len: m });
        }
        // Accumulate in sorted row order so the result is bitwise invariant
        // to the caller's ordering.
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        let ad = ta.data();
        let mut out = vec![0.0; n];
        for &r in &rows {
            for (o, &v) in out.iter_mut().zip(&ad[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows.len() as f64);
        self.push(Tensor::vector(out), Op::SubsetRowsMean(a, rows), "subset_rows_mean")
    }

    /// Add vector `v` (n) to every row of matrix `a` (m×n).
    pub fn add_row_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tv = &self.nodes[v.0].value;
        let (m, n) = ta.dims2()?;
        if tv.rank() != 1 || tv.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("{:?} vs {:?}", ta.shape(), tv.shape()),
            });
        }
        let ad = ta.data();
        let vd = tv.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = ad[i * n + j] + vd[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::AddRowBroadcast(a, v), "add_row_broadcast")
    }

    /// Columns [start, start+len) of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2()?;
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols [{start}, {start}+{len}) of {:?}", ta.shape()),
            });
        }
        let ad = ta.data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&ad[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        self.push(value, Op::SliceCols(a, start, len), "slice_cols")
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn hconcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let (ma, na) = ta.dims2()?;
        let (mb, nb) = tb.dims2()?;
        if ma != mb {
            return Err(Error::ShapeMismatch {
                op: "hconcat",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let ad = ta.data();
        let bd = tb.data();
        let mut out = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            out.extend_from_slice(&ad[i * na..(i + 1) * na]);
            out.extend_from_slice(&bd[i * nb..(i + 1) * nb]);
        }
        let value = Tensor::new(vec![ma, na + nb], out)?;
        self.push(value, Op::HConcat(a, b), "hconcat")
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2()?;
        let ad = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Softmax over a vector with masked entries forced to exactly zero.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.rank() != 1 || tl.numel() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("logits {:?} vs mask len {}", tl.shape(), mask.len()),
            });
        }
        if mask.iter().all(|&m| m) {
            return Err(Error::BadData("masked_softmax: no candidate left unmasked".into()));
        }
        let ld = tl.data();
        let mx = ld
            .iter()
            .zip(mask)
            .filter(|&(_, &m)| !m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; ld.len()];
        let mut z = 0.0;
        for (i, (&v, &m)) in ld.iter().zip(mask).enumerate() {
            if !m {
                out[i] = (v - mx).exp();
                z += out[i];
            }
        }
        out.iter_mut().for_each(|o| *o /= z);
        let value = Tensor::vector(out);
        self.push(value, Op::MaskedSoftmax(logits, mask.to_vec()), "masked_softmax")
    }

    /// log softmax(logits)[index] under a mask, as one numerically stable
    /// scalar op (log of the masked softmax without forming the quotient).
    pub fn masked_logprob(&mut self, logits: Var, mask: &[bool], index: usize) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.rank() != 1 || tl.numel() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_logprob",
                detail: format!("logits {:?} vs mask len {}", tl.shape(), mask.len()),
            });
        }
        if index >= mask.len() {
            return Err(Error::IndexOutOfBounds { what: "masked_logprob", index, len: mask.len() });
        }
        if mask[index] {
            return Err(Error::BadData(format!("masked_logprob: index {index} is masked")));
        }
        let ld = tl.data();
        let mx = ld
            .iter()
            .zip(mask)
            .filter(|&(_, &m)| !m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = ld
            .iter()
            .zip(mask)
            .filter(|&(_, &m)| !m)
            .map(|(&v, _)| (v - mx).exp())
            .sum();
        let lp = ld[index] - mx - z.ln();
        let value = Tensor::scalar(lp);
        self.push(value, Op::MaskedLogProb(logits, mask.to_vec(), index), "masked_logprob")
    }

    // ---- backward ----

    /// Reverse-mode sweep from scalar `loss`, adding `seed`-scaled gradients
    /// into `params` for every bound parameter. Callers zero the param grads
    /// when starting a new accumulation window.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64, params: &mut ParamSet) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            });
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.value.numel()]).collect();
        self.grads[loss.0][0] = seed;

        for i in (0..=loss.0).rev() {
            // Split the grads vec so we can read grads[i] while writing parents.
            let (head, tail) = self.grads.split_at_mut(i);
            let g = std::mem::take(&mut tail[0]);
            if g.iter().all(|&x| x == 0.0) {
                tail[0] = g;
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate_or_reduce(&mut head[a.0], &g);
                    accumulate_or_reduce(&mut head[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate_or_reduce(&mut head[a.0], &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate_or_reduce(&mut head[b.0], &neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    let da = elementwise_partner(&g, bv);
                    let db = elementwise_partner(&g, av);
                    accumulate_or_reduce(&mut head[a.0], &da);
                    accumulate_or_reduce(&mut head[b.0], &db);
                }
                Op::Neg(a) => {
                    for (ga, &gi) in head[a.0].iter_mut().zip(&g) {
                        *ga -= gi;
                    }
                }
                Op::Square(a) => {
                    let av = self.nodes[a.0].value.data();
                    for ((ga, &x), &gi) in head[a.0].iter_mut().zip(av).zip(&g) {
                        *ga += 2.0 * x * gi;
                    }
                }
                Op::AffineConst(a, m) => {
                    for (ga, &gi) in head[a.0].iter_mut().zip(&g) {
                        *ga += m * gi;
                    }
                }
                Op::Sigmoid(a) => {
                    let yv = node.value.data();
                    for ((ga, &y), &gi) in head[a.0].iter_mut().zip(yv).zip(&g) {
                        *ga += y * (1.0 - y) * gi;
                    }
                }
                Op::Tanh(a) => {
                    let yv = node.value.data();
                    for ((ga, &y), &gi) in head[a.0].iter_mut().zip(yv).zip(&g) {
                        *ga += (1.0 - y * y) * gi;
                    }
                }
                Op::Softplus(a) => {
                    let av = self.nodes[a.0].value.data();
                    for ((ga, &x), &gi) in head[a.0].iter_mut().zip(av).zip(&g) {
                        *ga += sigmoid(x) * gi;
                    }
                }
                Op::Silu(a) => {
                    let av = self.nodes[a.0].value.data();
                    for ((ga, &x), &gi) in head[a.0].iter_mut().zip(av).zip(&g) {
                        let s = sigmoid(x);
                        *ga += (s + x * s * (1.0 - s)) * gi;
                    }
                }
                Op::Relu(a) => {
                    let av = self.nodes[a.0].value.data();
                    for ((ga, &x), &gi) in head[a.0].iter_mut().zip(av).zip(&g) {
                        if x > 0.0 {
                            *ga += gi;
                        }
                    }
                }
                Op::Sum(a) => {
                    let gi = g[0];
                    head[a.0].iter_mut().for_each(|ga| *ga += gi);
                }
                Op::Mean(a) => {
                    let gi = g[0] / self.nodes[a.0].value.numel() as f64;
                    head[a.0].iter_mut().for_each(|ga| *ga += gi);
                }
                Op::Dot(a, b) => {
                    let gi = g[0];
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    for (ga, &y) in head[a.0].iter_mut().zip(bv) {
                        *ga += gi * y;
                    }
                    for (gb, &x) in head[b.0].iter_mut().zip(av) {
                        *gb += gi * x;
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a.0].value.numel();
                    for (ga, &gi) in head[a.0].iter_mut().zip(&g[..na]) {
                        *ga += gi;
                    }
                    for (gb, &gi) in head[b.0].iter_mut().zip(&g[na..]) {
                        *gb += gi;
                    }
                }
                Op::SliceVec(a, start, len) => {
                    for (ga, &gi) in head[a.0][*start..start + len].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                }
                Op::SelectElem(a, idx) => {
                    head[a.0][*idx] += g[0];
                }
                Op::Matmul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    let (ad, bd) = (ta.data(), tb.data());
                    // dA += G · Bᵀ
                    {
                        let da = &mut head[a.0];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let darow = &mut da[i * k..(i + 1) * k];
                            for (p, dap) in darow.iter_mut().enumerate() {
                                let brow = &bd[p * n..(p + 1) * n];
                                *dap += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    // dB += Aᵀ · G
                    {
                        let db = &mut head[b.0];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let arow = &ad[i * k..(i + 1) * k];
                            for (p, &ap) in arow.iter().enumerate() {
                                let dbrow = &mut db[p * n..(p + 1) * n];
                                for (dbv, &gv) in dbrow.iter_mut().zip(grow) {
                                    *dbv += ap * gv;
                                }
                            }
                        }
                    }
                }
                Op::MatVec(a, x) => {
                    let ta = &self.nodes[a.0].value;
                    let (m, n) = (ta.shape()[0], ta.shape()[1]);
                    let ad = ta.data();
                    let xd = self.nodes[x.0].value.data();
                    {
                        let da = &mut head[a.0];
                        for i in 0..m {
                            let gi = g[i];
                            for (dav, &xv) in da[i * n..(i + 1) * n].iter_mut().zip(xd) {
                                *dav += gi * xv;
                            }
                        }
                    }
                    {
                        let dx = &mut head[x.0];
                        for i in 0..m {
                            let gi = g[i];
                            for (dxv, &av) in dx.iter_mut().zip(&ad[i * n..(i + 1) * n]) {
                                *dxv += gi * av;
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                    let da = &mut head[a.0];
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] += g[i * m + j];
                        }
                    }
                }
                Op::SelectRow(a, row) => {
                    let n = g.len();
                    for (ga, &gi) in head[a.0][row * n..(row + 1) * n].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                }
                Op::MeanRows(a) => {
                    let ta = &self.nodes[a.0].value;
                    let (m, n) = (ta.shape()[0], ta.shape()[1]);
                    let da = &mut head[a.0];
                    for i in 0..m {
                        for (dav, &gi) in da[i * n..(i + 1) * n].iter_mut().zip(&g) {
                            *dav += gi / m as f64;
                        }
                    }
                }
                Op::SubsetRowsMean(a, rows) => {
                    let n = g.len();
                    let da = &mut head[a.0];
                    let scale = 1.0 / rows.len() as f64;
                    for &r in rows {
                        for (dav, &gi) in da[r * n..(r + 1) * n].iter_mut().zip(&g) {
                            *dav += gi * scale;
                        }
                    }
                }
                Op::AddRowBroadcast(a, v) => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    for (ga, &gi) in head[a.0].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    let dv = &mut head[v.0];
                    for i in 0..m {
                        for (dvv, &gi) in dv.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *dvv += gi;
                        }
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let na = self.nodes[a.0].value.shape()[1];
                    let m = node.value.shape()[0];
                    let da = &mut head[a.0];
                    for i in 0..m {
                        let dst = &mut da[i * na + start..i * na + start + len];
                        for (dav, &gi) in dst.iter_mut().zip(&g[i * len..(i + 1) * len]) {
                            *dav += gi;
                        }
                    }
                }
                Op::HConcat(a, b) => {
                    let na = self.nodes[a.0].value.shape()[1];
                    let nb = self.nodes[b.0].value.shape()[1];
                    let m = node.value.shape()[0];
                    for i in 0..m {
                        let grow = &g[i * (na + nb)..(i + 1) * (na + nb)];
                        for (ga, &gi) in head[a.0][i * na..(i + 1) * na].iter_mut().zip(&grow[..na])
                        {
                            *ga += gi;
                        }
                        for (gb, &gi) in head[b.0][i * nb..(i + 1) * nb].iter_mut().zip(&grow[na..])
                        {
                            *gb += gi;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    let yv = node.value.data();
                    let da = &mut head[a.0];
                    for i in 0..m {
                        let yrow = &yv[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let gy: f64 = yrow.iter().zip(grow).map(|(&y, &gi)| y * gi).sum();
                        for ((dav, &y), &gi) in
                            da[i * n..(i + 1) * n].iter_mut().zip(yrow).zip(grow)
                        {
                            *dav += y * (gi - gy);
                        }
                    }
                }
                Op::MaskedSoftmax(a, mask) => {
                    let yv = node.value.data();
                    let gy: f64 = yv.iter().zip(&g).map(|(&y, &gi)| y * gi).sum();
                    for (j, (ga, &gi)) in head[a.0].iter_mut().zip(&g).enumerate() {
                        if !mask[j] {
                            *ga += yv[j] * (gi - gy);
                        }
                    }
                }
                Op::MaskedLogProb(a, mask, index) => {
                    let gi = g[0];
                    let ld = self.nodes[a.0].value.data();
                    let mx = ld
                        .iter()
                        .zip(mask)
                        .filter(|&(_, &m)| !m)
                        .map(|(&v, _)| v)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = ld
                        .iter()
                        .zip(mask)
                        .filter(|&(_, &m)| !m)
                        .map(|(&v, _)| (v - mx).exp())
                        .sum();
                    for (j, ga) in head[a.0].iter_mut().enumerate() {
                        if !mask[j] {
                            let p = (ld[j] - mx).exp() / z;
                            let ind = if j == *index { 1.0 } else { 0.0 };
                            *ga += gi * (ind - p);
                        }
                    }
                }
            }
            let (_, tail) = self.grads.split_at_mut(i);
            tail[0] = g;
        }

        for (name, var) in &self.bindings {
            let delta = self.grads[var.0].clone();
            params.accumulate_grad(name, &delta, 1.0)?;
        }
        Ok(())
    }

    /// `backward_scaled` with seed 1.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        self.backward_scaled(loss, 1.0, params)
    }
}

/// Accumulate `g` into `dst`, reducing by sum when `dst` is the scalar side
/// of a broadcast.
fn accumulate_or_reduce(dst: &mut [f64], g: &[f64]) {
    if dst.len() == g.len() {
        for (d, &gi) in dst.iter_mut().zip(g) {
            *d += gi;
        }
    } else {
        debug_assert_eq!(dst.len(), 1);
        dst[0] += g.iter().sum::<f64>();
    }
}

/// Upstream gradient times the other operand of a (possibly broadcast) mul.
fn elementwise_partner(g: &[f64], partner: &[f64]) -> Vec<f64> {
    if partner.len() == g.len() {
        g.iter().zip(partner).map(|(&gi, &p)| gi * p).collect()
    } else {
        debug_assert_eq!(partner.len(), 1);
        g.iter().map(|&gi| gi * partner[0]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, data: Vec<f64>) -> Var {
        tape.input(Tensor::vector(data)).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut tape = Tape::new();
        let i2 = tape.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let x = tape.input(Tensor::matrix(2, 1, vec![5.0, 7.0]).unwrap()).unwrap();
        let y = tape.matmul(i2, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);

        let a = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let ones = tape.input(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        let z = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(z).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let b = tape.input(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap()).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "got: {err}");
    }

    #[test]
    fn linear_loss_grad_is_exact() {
        // loss = w·x with fixed x → grad(w) = x exactly.
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![0.5, -1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let x = leaf(&mut tape, vec![3.0, 4.0, 5.0]);
        let loss = tape.dot(w, x).unwrap();
        params.zero_grads();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad("w").unwrap(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut params = ParamSet::new();
        params.insert("used", Tensor::vector(vec![1.0])).unwrap();
        params.insert("unused", Tensor::vector(vec![1.0])).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&params, "used").unwrap();
        let loss = tape.sum(u).unwrap();
        params.zero_grads();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad("unused").unwrap(), &[0.0]);
        assert_eq!(params.grad("used").unwrap(), &[1.0]);
    }

    #[test]
    fn rebinding_param_accumulates_both_paths() {
        // loss = w·w → grad = 2w.
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![3.0, -2.0])).unwrap();
        let mut tape = Tape::new();
        let w1 = tape.param(&params, "w").unwrap();
        let w2 = tape.param(&params, "w").unwrap();
        assert_eq!(w1, w2);
        let loss = tape.dot(w1, w2).unwrap();
        params.zero_grads();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad("w").unwrap(), &[6.0, -4.0]);
    }

    #[test]
    fn square_gradient_matches_hand_value() {
        // d/dx sum(x⊙x) at x=[3] is [6].
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3.0]);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let mut params = ParamSet::new();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softplus_values_and_asymptote() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![0.0, 100.0, -100.0]);
        let y = tape.softplus(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 2f64.ln()).abs() < 1e-12);
        assert!((v[1] - 100.0).abs() < 1e-12);
        assert!(v[2] >= 0.0 && v[2] < 1e-40);
    }

    #[test]
    fn scalar_broadcast_rules() {
        let mut tape = Tape::new();
        let v = leaf(&mut tape, vec![1.0, 2.0, 3.0]);
        let s = tape.scalar_input(10.0).unwrap();
        let sum = tape.add(v, s).unwrap();
        assert_eq!(tape.value(sum).data(), &[11.0, 12.0, 13.0]);
        let prod = tape.mul(s, v).unwrap();
        assert_eq!(tape.value(prod).data(), &[10.0, 20.0, 30.0]);
        let diff = tape.sub(s, v).unwrap();
        assert_eq!(tape.value(diff).data(), &[9.0, 8.0, 7.0]);

        // Gradient of sum(v + s) w.r.t. scalar s is the element count.
        let total = tape.sum(sum).unwrap();
        let mut params = ParamSet::new();
        tape.backward(total, &mut params).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[3.0]);

        let w = leaf(&mut tape, vec![1.0, 2.0]);
        assert!(tape.add(v, w).is_err());
    }

    #[test]
    fn masked_softmax_contract() {
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![1.0, 1.0, 1.0]);
        let p = tape.masked_softmax(l, &[false, false, false]).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let l2 = leaf(&mut tape, vec![1.0, 2.0, 3.0]);
        let p2 = tape.masked_softmax(l2, &[false, false, true]).unwrap();
        let v = tape.value(p2).data();
        assert_eq!(v[2], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert!((v[1] / v[0] - 1f64.exp()).abs() < 1e-9);

        let l3 = leaf(&mut tape, vec![1.0]);
        assert!(tape.masked_softmax(l3, &[true]).is_err());
    }

    #[test]
    fn masked_softmax_is_stable_under_huge_logits() {
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![1000.0, 999.0, -1000.0]);
        let p = tape.masked_softmax(l, &[false, false, false]).unwrap();
        let v = tape.value(p).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v[0] > v[1] && v[1] > v[2]);
    }

    #[test]
    fn masked_logprob_matches_log_of_masked_softmax() {
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![0.3, -1.2, 2.0, 0.7]);
        let mask = [false, true, false, false];
        let p = tape.masked_softmax(l, &mask).unwrap();
        let lp = tape.masked_logprob(l, &mask, 2).unwrap();
        let direct = tape.value(p).data()[2].ln();
        assert!((tape.value(lp).item() - direct).abs() < 1e-12);
        assert!(tape.masked_logprob(l, &mask, 1).is_err());
    }

    #[test]
    fn masked_entries_get_zero_gradient() {
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![0.5, 1.5, -0.5]);
        let mask = [false, true, false];
        let p = tape.masked_softmax(l, &mask).unwrap();
        let loss = tape.select_elem(p, 0).unwrap();
        let mut params = ParamSet::new();
        tape.backward(loss, &mut params).unwrap();
        let g = tape.grad(l).unwrap();
        assert_eq!(g[1], 0.0);
        assert!(g[0] != 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let v = leaf(&mut tape, vec![1.0, 2.0]);
        let mut params = ParamSet::new();
        assert!(tape.backward(v, &mut params).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let big = leaf(&mut tape, vec![1e308]);
        let bigger = tape.affine_const(big, 10.0, 0.0);
        assert!(matches!(bigger, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap()).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        let v = tape.value(s).data();
        assert!((v[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((v[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transpose_and_slices_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let t = tape.transpose(a).unwrap();
        assert_eq!(tape.value(t).shape(), &[3, 2]);
        assert_eq!(tape.value(t).data(), &[1., 4., 2., 5., 3., 6.]);

        let left = tape.slice_cols(a, 0, 2).unwrap();
        let right = tape.slice_cols(a, 2, 1).unwrap();
        let back = tape.hconcat(left, right).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());

        let r1 = tape.select_row(a, 1).unwrap();
        assert_eq!(tape.value(r1).data(), &[4., 5., 6.]);

        let mr = tape.mean_rows(a).unwrap();
        assert_eq!(tape.value(mr).data(), &[2.5, 3.5, 4.5]);

        let sm = tape.subset_rows_mean(a, &[1]).unwrap();
        assert_eq!(tape.value(sm).data(), &[4., 5., 6.]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![2.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let d = tape.detach(w).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq).unwrap();
        params.zero_grads();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad("w").unwrap(), &[0.0]);
        assert_eq!(tape.value(loss).item(), 4.0);
    }
}
