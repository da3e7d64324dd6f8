//! Reverse-mode differentiation tape.
//!
//! Every primitive records its inputs and whatever forward values its
//! backward rule needs. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and the backward pass is
//! a single reverse sweep. Gradients from several consumers of one node
//! are summed.

use std::borrow::Cow;

use super::kernels::{self, Activation};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One `scale ⊙ (x · wᵀ)` summand of a fused affine node.
#[derive(Clone, Copy, Debug)]
pub struct AffineTerm {
    /// Weight matrix `[m x n]`.
    pub weight: NodeId,
    /// Batched input `[rows x n]`.
    pub input: NodeId,
    /// Optional per-row multiplier `[rows x 1]`.
    pub row_scale: Option<NodeId>,
}

impl AffineTerm {
    pub fn new(weight: NodeId, input: NodeId) -> Self {
        Self { weight, input, row_scale: None }
    }

    pub fn scaled(weight: NodeId, input: NodeId, row_scale: NodeId) -> Self {
        Self { weight, input, row_scale: Some(row_scale) }
    }
}

/// Deliberate backward-rule corruption used to prove gradient checks are live.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    /// Multiply the sigmoid derivative by this factor.
    SigmoidDerivativeScale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { terms: Vec<AffineTerm>, bias: Option<NodeId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleRows { x: NodeId, scale: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    OneMinus(NodeId),
    Activation { x: NodeId, kind: Activation },
    StraightThrough(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    LayerNorm { x: NodeId, gain: NodeId, bias: Option<NodeId>, moments: Vec<(f64, f64)> },
    Embed { table: NodeId, symbols: Vec<usize> },
    SoftmaxXent { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    Sum { inputs: Vec<NodeId>, scale: f64 },
}

/// Recorded computation. Parameter leaves may borrow their storage.
pub struct Tape<'a> {
    values: Vec<Cow<'a, Tensor>>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    grad_enabled: bool,
    fault: Option<BackwardFault>,
}

/// Accumulated gradients, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), requires_grad: Vec::new(), grad_enabled: true, fault: None }
    }

    /// A tape whose leaves never require gradients; used for evaluation.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn set_backward_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires_grad[id.0]
    }

    /// Trainable leaf borrowing its storage.
    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        let rg = self.grad_enabled;
        self.push(Cow::Borrowed(t), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        let rg = requires_grad && self.grad_enabled;
        self.push(Cow::Owned(t), Op::Leaf, rg)
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        NodeId(self.values.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[NodeId], what: &str) -> Result<NodeId> {
        value.ensure_finite(what)?;
        let rg = self.grad_enabled && inputs.iter().any(|i| self.requires_grad[i.0]);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn check_row_scale(&self, x: NodeId, s: NodeId, what: &str) -> Result<()> {
        if self.value(s).len() != self.value(x).rows() {
            return Err(Error::Dimension(format!(
                "{what}: {} row scales for {} rows",
                self.value(s).len(),
                self.value(x).rows()
            )));
        }
        Ok(())
    }

    /// `Σ_k scale_k ⊙ (x_k · w_kᵀ) + bias`, each `x_k` batched by rows.
    pub fn affine(&mut self, terms: &[AffineTerm], bias: Option<NodeId>) -> Result<NodeId> {
        let first = terms.first().ok_or_else(|| Error::Usage("affine needs at least one term".into()))?;
        let w0 = self.value(first.weight);
        if w0.shape().len() != 2 {
            return Err(Error::Dimension(format!("weight must be a matrix, got {:?}", w0.shape())));
        }
        let m = w0.shape()[0];
        let rows = self.value(first.input).rows();
        let mut out = vec![0.0; rows * m];
        let mut inputs = Vec::new();
        for term in terms {
            let w = self.value(term.weight);
            let x = self.value(term.input);
            if w.shape().len() != 2 || w.shape()[0] != m || x.cols() != w.shape()[1] || x.rows() != rows {
                return Err(Error::Dimension(format!(
                    "affine term: weight {:?} against input {:?} ({rows} rows, {m} outputs)",
                    w.shape(),
                    x.shape()
                )));
            }
            let n = x.cols();
            inputs.push(term.weight);
            inputs.push(term.input);
            match term.row_scale {
                None => kernels::gemm_nt(rows, n, m, x.data(), w.data(), &mut out, 1.0),
                Some(s) => {
                    self.check_row_scale(term.input, s, "affine row scale")?;
                    let sx = scale_rows(x, self.value(s));
                    kernels::gemm_nt(rows, n, m, sx.data(), w.data(), &mut out, 1.0);
                    inputs.push(s);
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(Error::Dimension(format!("bias of {} for {m} outputs", bv.len())));
            }
            for r in 0..rows {
                for (y, bi) in out[r * m..(r + 1) * m].iter_mut().zip(bv.data()) {
                    *y += bi;
                }
            }
            inputs.push(b);
        }
        let value = Tensor::new(vec![rows, m], out)?;
        self.record(value, Op::Affine { terms: terms.to_vec(), bias }, &inputs, "affine")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.record(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.record(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.record(v, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Multiply row `r` of `x` by `scale[r]`.
    pub fn scale_rows(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId> {
        self.check_row_scale(x, scale, "scale_rows")?;
        let v = scale_rows(self.value(x), self.value(scale));
        self.record(v, Op::ScaleRows { x, scale }, &[x, scale], "scale_rows")
    }

    /// Add the vector `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.len() != xv.cols() {
            return Err(Error::Dimension(format!("bias of {} for {} columns", bv.len(), xv.cols())));
        }
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (y, b) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *y += b;
            }
        }
        self.record(v, Op::AddBias { x, bias }, &[x, bias], "add_bias")
    }

    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let v = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| 1.0 - v).collect())?;
        self.record(v, Op::OneMinus(x), &[x], "one_minus")
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let v = kernels::apply_activation(kind, self.value(x))?;
        self.record(v, Op::Activation { x, kind }, &[x], "activation")
    }

    /// Binarize values in `[0, 1]`: threshold at 0.5 (strict), or Bernoulli
    /// draws when `uniforms` are given. The backward rule is the identity.
    pub fn straight_through(&mut self, x: NodeId, uniforms: Option<&[f64]>) -> Result<NodeId> {
        let xv = self.value(x);
        if let Some(u) = uniforms {
            if u.len() != xv.len() {
                return Err(Error::Dimension(format!("{} uniforms for {} values", u.len(), xv.len())));
            }
        }
        let mut data = Vec::with_capacity(xv.len());
        for (i, &p) in xv.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invariant(format!("boundary probability {p} outside [0, 1]")));
            }
            data.push(kernels::binarize_value(p, uniforms.map(|u| u[i])));
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.record(v, Op::StraightThrough(x), &[x], "straight_through")
    }

    /// Columns `[start, end)` of every row.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let n = xv.cols();
        if start >= end || end > n {
            return Err(Error::Dimension(format!("column slice {start}..{end} of {n}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(xv.rows() * w);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let v = Tensor::new(vec![xv.rows(), w], data)?;
        self.record(v, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::Dimension("concat parts disagree on row count".into()));
        }
        let width: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let v = Tensor::new(vec![rows, width], data)?;
        self.record(v, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Row-wise layer normalization with a learned gain and optional bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xv = self.value(x);
        let n = xv.cols();
        let gv = self.value(gain);
        if gv.len() != n || bias.is_some_and(|b| self.value(b).len() != n) {
            return Err(Error::Dimension(format!("layer norm over {n} features")));
        }
        let mut out = xv.clone();
        let mut moments = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let (mean, rstd) = kernels::row_moments(xv.row(r));
            moments.push((mean, rstd));
            let row = out.row_mut(r);
            for (j, y) in row.iter_mut().enumerate() {
                *y = (*y - mean) * rstd * gv.data()[j];
            }
            if let Some(b) = bias {
                for (y, bj) in row.iter_mut().zip(self.values[b.0].data()) {
                    *y += bj;
                }
            }
        }
        let mut inputs = vec![x, gain];
        inputs.extend(bias);
        self.record(out, Op::LayerNorm { x, gain, bias, moments }, &inputs, "layer_norm")
    }

    /// Column lookup: row `r` of the result is column `symbols[r]` of `table`.
    pub fn embed(&mut self, table: NodeId, symbols: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::Dimension(format!("embedding table must be a matrix, got {:?}", tv.shape())));
        }
        if symbols.is_empty() {
            return Err(Error::Usage("embedding lookup of no symbols".into()));
        }
        let (e, k) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(symbols.len() * e);
        for &s in symbols {
            if s >= k {
                return Err(Error::Index { index: s, size: k });
            }
            data.extend((0..e).map(|i| tv.data()[i * k + s]));
        }
        let v = Tensor::new(vec![symbols.len(), e], data)?;
        self.record(v, Op::Embed { table, symbols: symbols.to_vec() }, &[table], "embed")
    }

    /// Summed negative log-likelihood of one target per row; a scalar node.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::Dimension(format!("{} targets for {} rows", targets.len(), lv.rows())));
        }
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(lv.len());
        for (r, &t) in targets.iter().enumerate() {
            let (loss, p) = kernels::softmax_xent(lv.row(r), t)?;
            total += loss;
            probs.extend(p);
        }
        let op = Op::SoftmaxXent { logits, targets: targets.to_vec(), probs };
        self.record(Tensor::scalar(total), op, &[logits], "softmax_xent")
    }

    /// `scale * Σ inputs` over same-shaped nodes.
    pub fn sum(&mut self, inputs: &[NodeId], scale: f64) -> Result<NodeId> {
        let first = inputs.first().ok_or_else(|| Error::Usage("sum of nothing".into()))?;
        let mut acc = self.value(*first).clone();
        for i in &inputs[1..] {
            self.same_shape(*first, *i, "sum")?;
            acc.add_assign(self.value(*i));
        }
        for v in acc.data_mut() {
            *v *= scale;
        }
        self.record(acc, Op::Sum { inputs: inputs.to_vec(), scale }, inputs, "sum")
    }

    /// Smallest distance of any recorded ReLU / hard-sigmoid input to a kink.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for op in &self.ops {
            if let Op::Activation { x, kind } = op {
                for &v in self.values[x.0].data() {
                    best = best.min(kind.kink_distance(v));
                }
            }
        }
        best
    }

    /// Every recorded ReLU / hard-sigmoid input with its distance to a kink,
    /// in recording order.
    pub fn kink_profile(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for op in &self.ops {
            if let Op::Activation { x, kind } = op {
                if kind.kink_distance(0.0).is_finite() {
                    out.extend(self.values[x.0].data().iter().map(|&v| (v, kind.kink_distance(v))));
                }
            }
        }
        out
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!("backward from non-scalar node of shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        if !self.requires_grad[loss.0] {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) || !self.requires_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> Option<&'g mut Tensor> {
        if !self.requires_grad[id.0] {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(self.values[id.0].shape())))
    }

    fn backward_op(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Affine { terms, bias } => {
                let rows = g.rows();
                let m = g.cols();
                for term in terms {
                    let w = self.value(term.weight);
                    let x = self.value(term.input);
                    let n = x.cols();
                    let scale = term.row_scale.map(|s| self.value(s));
                    if let Some(dw) = self.grad_slot(grads, term.weight) {
                        match scale {
                            None => kernels::gemm_tn_acc(rows, m, n, g.data(), x.data(), dw.data_mut()),
                            Some(s) => {
                                let sx = scale_rows(x, s);
                                kernels::gemm_tn_acc(rows, m, n, g.data(), sx.data(), dw.data_mut());
                            }
                        }
                    }
                    let need_x = self.requires_grad[term.input.0];
                    let need_s = term.row_scale.is_some_and(|s| self.requires_grad[s.0]);
                    if !need_x && !need_s {
                        continue;
                    }
                    let mut p = vec![0.0; rows * n];
                    kernels::gemm_nn_acc(rows, m, n, g.data(), w.data(), &mut p);
                    if let (Some(sid), true) = (term.row_scale, need_s) {
                        let ds = self.grad_slot(grads, sid).expect("requires grad");
                        for r in 0..rows {
                            let dot: f64 = x.row(r).iter().zip(&p[r * n..(r + 1) * n]).map(|(a, b)| a * b).sum();
                            ds.data_mut()[r] += dot;
                        }
                    }
                    if need_x {
                        let dx = self.grad_slot(grads, term.input).expect("requires grad");
                        match scale {
                            None => dx.add_scaled(&p, 1.0),
                            Some(s) => {
                                for r in 0..rows {
                                    let sr = s.data()[r];
                                    for (d, v) in dx.row_mut(r).iter_mut().zip(&p[r * n..(r + 1) * n]) {
                                        *d += sr * v;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    if let Some(db) = self.grad_slot(grads, *b) {
                        for r in 0..rows {
                            for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    db.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    db.add_scaled(g.data(), -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.grad_slot(grads, *a) {
                    for ((d, gi), bi) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for ((d, gi), ai) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::ScaleRows { x, scale } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for r in 0..xv.rows() {
                        let s = sv.data()[r];
                        for (d, gi) in dx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += s * gi;
                        }
                    }
                }
                if let Some(ds) = self.grad_slot(grads, *scale) {
                    for r in 0..xv.rows() {
                        ds.data_mut()[r] += xv.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.add_assign(g);
                }
                if let Some(db) = self.grad_slot(grads, *bias) {
                    for r in 0..g.rows() {
                        for (d, gi) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::OneMinus(x) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.add_scaled(g.data(), -1.0);
                }
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x);
                let fault = match (self.fault, kind) {
                    (Some(BackwardFault::SigmoidDerivativeScale(f)), Activation::Sigmoid) => f,
                    _ => 1.0,
                };
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (((d, gi), xi), yi) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()).zip(out.data()) {
                        *d += gi * kind.derivative(*xi, *yi) * fault;
                    }
                }
            }
            Op::StraightThrough(x) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.add_assign(g);
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let w = g.cols();
                    for r in 0..g.rows() {
                        for (d, gi) in dx.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(dp) = self.grad_slot(grads, *p) {
                        for r in 0..g.rows() {
                            for (d, gi) in dp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *d += gi;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::LayerNorm { x, gain, bias, moments } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let n = xv.cols();
                let nf = n as f64;
                let mut dgain = vec![0.0; n];
                let mut dx_all = vec![0.0; xv.len()];
                for (r, &(mean, rstd)) in moments.iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / nf;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        dgain[j] += gr[j] * xhat[j];
                        dx_all[r * n + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.add_scaled(&dx_all, 1.0);
                }
                if let Some(dg) = self.grad_slot(grads, *gain) {
                    dg.add_scaled(&dgain, 1.0);
                }
                if let Some(b) = bias {
                    if let Some(db) = self.grad_slot(grads, *b) {
                        for r in 0..g.rows() {
                            for (d, gi) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += gi;
                            }
                        }
                    }
                }
            }
            Op::Embed { table, symbols } => {
                if let Some(dt) = self.grad_slot(grads, *table) {
                    let k = dt.cols();
                    for (r, &s) in symbols.iter().enumerate() {
                        for (e, gi) in g.row(r).iter().enumerate() {
                            dt.data_mut()[e * k + s] += gi;
                        }
                    }
                }
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let scale = g.data()[0];
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    let k = dl.cols();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = dl.row_mut(r);
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            row[j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum { inputs, scale } => {
                for inp in inputs {
                    if let Some(d) = self.grad_slot(grads, *inp) {
                        d.add_scaled(g.data(), *scale);
                    }
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn scale_rows(x: &Tensor, s: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let sr = s.data()[r];
        for v in out.row_mut(r) {
            *v *= sr;
        }
    }
    out
}
