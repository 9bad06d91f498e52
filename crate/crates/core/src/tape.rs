//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every primitive appends exactly one node holding its forward value.
//! `backward` walks the tape in reverse and *emits the vector-Jacobian
//! products as new tape nodes*, so a gradient is itself a differentiable
//! quantity: calling `backward` on a scalar built from earlier gradients
//! yields exact second-order derivatives. This is the mechanism behind the
//! architecture hypergradient, which differentiates through a chain of
//! gradient-containing weight updates.
//!
//! Tapes are per-run and bounded; tensors are immutable once recorded.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{GradMap, ParamSet, Tensor};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TensorRef(pub(crate) usize);

/// Leaf refs keyed by parameter name; also used for gradient refs.
pub type ParamRefs = BTreeMap<String, TensorRef>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorRef, TensorRef),
    Transpose(TensorRef),
    Add(TensorRef, TensorRef),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    Scale(TensorRef, f64),
    /// Elementwise product with a scalar node (shape `[1]`).
    ScaleBy(TensorRef, TensorRef),
    Relu(TensorRef),
    Tanh(TensorRef),
    Mean(TensorRef),
    Sum(TensorRef),
    SoftmaxRows(TensorRef),
    CrossEntropy(TensorRef, Vec<usize>),
    SqL2Dist(TensorRef, TensorRef),
    Index(TensorRef, usize),
    Detach(TensorRef),
}

impl Op {
    fn inputs(&self) -> Vec<TensorRef> {
        match *self {
            Op::Leaf => vec![],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::SoftmaxRows(a)
            | Op::CrossEntropy(a, _)
            | Op::Index(a, _)
            | Op::Detach(a) => vec![a],
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::SqL2Dist(a, b) => vec![a, b],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of primitive operations; topological by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.0].value
    }

    fn check_ref(&self, r: TensorRef) -> Result<()> {
        if r.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownParam(format!("node {} not on tape", r.0)))
        }
    }

    fn push(&mut self, op: Op, value: Tensor, what: &str) -> Result<TensorRef> {
        value.check_finite(what)?;
        self.nodes.push(Node { op, value });
        Ok(TensorRef(self.nodes.len() - 1))
    }

    /// Record a constant or parameter leaf.
    pub fn leaf(&mut self, value: Tensor) -> TensorRef {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        TensorRef(self.nodes.len() - 1)
    }

    pub fn is_leaf(&self, r: TensorRef) -> bool {
        matches!(self.nodes[r.0].op, Op::Leaf)
    }

    /// Register every tensor of a `ParamSet` as a named leaf.
    pub fn register(&mut self, params: &ParamSet) -> ParamRefs {
        params
            .iter()
            .map(|(k, v)| (k.clone(), self.leaf(v.clone())))
            .collect()
    }

    fn ones(&mut self, shape: Vec<usize>) -> TensorRef {
        let numel: usize = shape.iter().product();
        self.leaf(Tensor::new(shape, vec![1.0; numel]).expect("ones"))
    }

    // ── forward primitives ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_ref(a)?;
        self.check_ref(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * tb.data()[p * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::Matmul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_ref(a)?;
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(Error::ShapeMismatch(format!(
                "transpose of {:?}",
                ta.shape()
            )));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push(Op::Transpose(a), value, "transpose")
    }

    fn zip_elementwise(
        &mut self,
        a: TensorRef,
        b: TensorRef,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check_ref(a)?;
        self.check_ref(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what} {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let value = self.zip_elementwise(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let value = self.zip_elementwise(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), value, "sub")
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let value = self.zip_elementwise(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), value, "mul")
    }

    pub fn scale(&mut self, a: TensorRef, c: f64) -> Result<TensorRef> {
        self.check_ref(a)?;
        if !c.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let value = self.value(a).map(|v| v * c);
        self.push(Op::Scale(a, c), value, "scale")
    }

    /// `a * s` where `s` is a scalar node of shape `[1]`.
    pub fn scale_by(&mut self, a: TensorRef, s: TensorRef) -> Result<TensorRef> {
        self.check_ref(a)?;
        self.check_ref(s)?;
        if self.value(s).shape() != [1] {
            return Err(Error::NotScalar(self.value(s).shape().to_vec()));
        }
        let sv = self.value(s).data()[0];
        let value = self.value(a).map(|v| v * sv);
        self.push(Op::ScaleBy(a, s), value, "scale_by")
    }

    pub fn relu(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_ref(a)?;
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(a), value, "relu")
    }

    pub fn tanh(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_ref(a)?;
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value, "tanh")
    }

    pub fn mean(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_ref(a)?;
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m), "mean")
    }

    pub fn sum(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_ref(a)?;
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// Row-wise softmax of a 2-D tensor, max-shifted for stability.
    pub fn softmax_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_ref(a)?;
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(Error::ShapeMismatch(format!(
                "softmax_rows of {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push(Op::SoftmaxRows(a), value, "softmax_rows")
    }

    /// Mean cross-entropy of row logits against integer class labels.
    pub fn cross_entropy(&mut self, logits: TensorRef, labels: &[usize]) -> Result<TensorRef> {
        self.check_ref(logits)?;
        let t = self.value(logits);
        if !t.is_matrix() || t.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy logits {:?} vs {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        for &l in labels {
            if l >= c {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: c,
                });
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            let row = &t.data()[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            Op::CrossEntropy(logits, labels.to_vec()),
            value,
            "cross_entropy",
        )
    }

    /// Squared Euclidean distance summed over all entries.
    pub fn sq_l2_dist(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_ref(a)?;
        self.check_ref(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "sq_l2_dist {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push(Op::SqL2Dist(a, b), Tensor::scalar(s), "sq_l2_dist")
    }

    /// Single entry at flat index `i`, as a scalar node.
    pub fn index(&mut self, a: TensorRef, i: usize) -> Result<TensorRef> {
        self.check_ref(a)?;
        let t = self.value(a);
        if i >= t.numel() {
            return Err(Error::ShapeMismatch(format!(
                "index {i} out of {} entries",
                t.numel()
            )));
        }
        let value = Tensor::scalar(t.data()[i]);
        self.push(Op::Index(a, i), value, "index")
    }

    /// Identity forward; blocks all gradient flow into its input.
    pub fn detach(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_ref(a)?;
        let value = self.value(a).clone();
        self.push(Op::Detach(a), value, "detach")
    }

    // ── reverse mode ────────────────────────────────────────────────────

    fn accumulate(
        &mut self,
        cot: &mut [Option<TensorRef>],
        target: TensorRef,
        contrib: TensorRef,
    ) -> Result<()> {
        debug_assert_eq!(
            self.value(target).shape(),
            self.value(contrib).shape(),
            "cotangent shape drift"
        );
        cot[target.0] = Some(match cot[target.0] {
            Some(prev) => self.add(prev, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    /// Reverse-mode gradients of a scalar `root` with respect to leaf nodes.
    ///
    /// Returns one gradient node per requested leaf (an exact-zero constant
    /// when no gradient flows). The VJPs are recorded on the tape, so the
    /// returned refs can participate in further differentiable computation.
    pub fn backward_refs(
        &mut self,
        root: TensorRef,
        wrt: &[TensorRef],
    ) -> Result<Vec<TensorRef>> {
        self.check_ref(root)?;
        if !self.value(root).is_scalar() {
            return Err(Error::NotScalar(self.value(root).shape().to_vec()));
        }
        for &w in wrt {
            self.check_ref(w)?;
            if !self.is_leaf(w) {
                return Err(Error::UnknownParam(format!("node {} is not a leaf", w.0)));
            }
        }

        let upto = root.0 + 1;
        let mut cot: Vec<Option<TensorRef>> = vec![None; upto];
        let seed = self.ones(self.value(root).shape().to_vec());
        cot[root.0] = Some(seed);

        for id in (0..upto).rev() {
            let Some(d) = cot[id] else { continue };
            let op = self.nodes[id].op.clone();
            let out = TensorRef(id);
            match op {
                Op::Leaf | Op::Detach(_) => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut cot, a, d)?;
                    self.accumulate(&mut cot, b, d)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut cot, a, d)?;
                    let nd = self.scale(d, -1.0)?;
                    self.accumulate(&mut cot, b, nd)?;
                }
                Op::Mul(a, b) => {
                    let da = self.mul(d, b)?;
                    let db = self.mul(d, a)?;
                    self.accumulate(&mut cot, a, da)?;
                    self.accumulate(&mut cot, b, db)?;
                }
                Op::Scale(a, c) => {
                    let da = self.scale(d, c)?;
                    self.accumulate(&mut cot, a, da)?;
                }
                Op::ScaleBy(a, s) => {
                    let da = self.scale_by(d, s)?;
                    let prod = self.mul(d, a)?;
                    let ds = self.sum(prod)?;
                    self.accumulate(&mut cot, a, da)?;
                    self.accumulate(&mut cot, s, ds)?;
                }
                Op::Matmul(a, b) => {
                    let bt = self.transpose(b)?;
                    let da = self.matmul(d, bt)?;
                    let at = self.transpose(a)?;
                    let db = self.matmul(at, d)?;
                    self.accumulate(&mut cot, a, da)?;
                    self.accumulate(&mut cot, b, db)?;
                }
                Op::Transpose(a) => {
                    let da = self.transpose(d)?;
                    self.accumulate(&mut cot, a, da)?;
                }
                Op::Relu(a) => {
                    // Mask is constant: relu'' is 0 almost everywhere.
                    let mask = self
                        .value(a)
                        .map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let m = self.leaf(mask);
                    let da = self.mul(d, m)?;
                    self.accumulate(&mut cot, a, da)?;
                }
                Op::Tanh(a) => {
                    // 1 - y^2 built from the recorded output node, so the
                    // second derivative flows through y as well.
                    let y2 = self.mul(out, out)?;
                    let one = self.ones(self.value(a).shape().to_vec());
                    let f = self.sub(one, y2)?;
                    let da = self.mul(d, f)?;
                    self.accumulate(&mut cot, a, da)?;
                }
                Op::Mean(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let n = self.value(a).numel() as f64;
                    let ones = self.ones(shape);
                    let spread = self.scale_by(ones, d)?;
                    let da = self.scale(spread, 1.0 / n)?;
                    self.accumulate(&mut cot, a, da)?;
                }
                Op::Sum(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let ones = self.ones(shape);
                    let da = self.scale_by(ones, d)?;
                    self.accumulate(&mut cot, a, da)?;
                }
                Op::SoftmaxRows(a) => {
                    // dX = y ⊙ (d - rowsum(d ⊙ y) broadcast over columns)
                    let c = self.value(a).shape()[1];
                    let t = self.mul(d, out)?;
                    let col = self.ones(vec![c, 1]);
                    let rs = self.matmul(t, col)?;
                    let row = self.ones(vec![1, c]);
                    let bcast = self.matmul(rs, row)?;
                    let inner = self.sub(d, bcast)?;
                    let da = self.mul(out, inner)?;
                    self.accumulate(&mut cot, a, da)?;
                }
                Op::CrossEntropy(logits, labels) => {
                    // dLogits = (softmax(logits) - onehot) * d / n, with the
                    // softmax re-emitted on tape for exact second order.
                    let (n, c) = {
                        let t = self.value(logits);
                        (t.shape()[0], t.shape()[1])
                    };
                    let p = self.softmax_rows(logits)?;
                    let mut oh = Tensor::zeros(vec![n, c]);
                    for (i, &l) in labels.iter().enumerate() {
                        oh.data_mut()[i * c + l] = 1.0;
                    }
                    let ohref = self.leaf(oh);
                    let diff = self.sub(p, ohref)?;
                    let scaled = self.scale(diff, 1.0 / n as f64)?;
                    let da = self.scale_by(scaled, d)?;
                    self.accumulate(&mut cot, logits, da)?;
                }
                Op::SqL2Dist(a, b) => {
                    let diff = self.sub(a, b)?;
                    let w = self.scale_by(diff, d)?;
                    let da = self.scale(w, 2.0)?;
                    let db = self.scale(w, -2.0)?;
                    self.accumulate(&mut cot, a, da)?;
                    self.accumulate(&mut cot, b, db)?;
                }
                Op::Index(a, i) => {
                    let mut oh = Tensor::zeros(self.value(a).shape().to_vec());
                    oh.data_mut()[i] = 1.0;
                    let ohref = self.leaf(oh);
                    let da = self.scale_by(ohref, d)?;
                    self.accumulate(&mut cot, a, da)?;
                }
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match cot[w.0] {
                Some(g) => grads.push(g),
                None => {
                    let z = Tensor::zeros(self.value(w).shape().to_vec());
                    grads.push(self.leaf(z));
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of `root` for every named leaf in `wrt`.
    pub fn backward(&mut self, root: TensorRef, wrt: &ParamRefs) -> Result<ParamRefs> {
        let refs: Vec<TensorRef> = wrt.values().copied().collect();
        let grads = self.backward_refs(root, &refs)?;
        Ok(wrt
            .keys()
            .cloned()
            .zip(grads)
            .collect())
    }

    /// Materialize a named ref map into value-level tensors (used for
    /// gradients and updated parameters alike).
    pub fn materialize(&self, refs: &ParamRefs) -> GradMap {
        refs.iter()
            .map(|(k, &r)| (k.clone(), self.value(r).clone()))
            .collect()
    }

    /// True when `target` is an ancestor of `from` through recorded ops.
    /// `Detach` stops the walk, mirroring gradient flow.
    pub fn reaches(&self, from: TensorRef, target: TensorRef) -> bool {
        let mut stack = vec![from];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(r) = stack.pop() {
            if r == target {
                return true;
            }
            if seen[r.0] {
                continue;
            }
            seen[r.0] = true;
            if matches!(self.nodes[r.0].op, Op::Detach(_)) {
                continue;
            }
            stack.extend(self.nodes[r.0].op.inputs());
        }
        false
    }
}

/// Register a `ParamSet`, run a computation, and return named leaf refs.
pub fn bind_params(tape: &mut Tape, params: &ParamSet) -> ParamRefs {
    tape.register(params)
}
