//! The shared differentiable encoder: a small DAG cell whose edges each
//! compute a softmax-weighted mixture of candidate dense operations, plus
//! per-task linear heads and argmax discretization.
//!
//! The candidate set {zero, identity, linear, linear_relu, linear_tanh}
//! keeps the mixture/softmax/discretization structure of a convolutional
//! search space at desk scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tape::{ParamRefs, Tape, TensorRef};
use crate::tensor::{ParamSet, Tensor};

/// Candidate operation on an edge. Linear kinds own a weight matrix that
/// lives in the encoder `ParamSet` under `e{edge}.{kind}.w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Zero,
    Identity,
    Linear,
    LinearRelu,
    LinearTanh,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Zero,
        OpKind::Identity,
        OpKind::Linear,
        OpKind::LinearRelu,
        OpKind::LinearTanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Identity => "identity",
            OpKind::Linear => "linear",
            OpKind::LinearRelu => "linear_relu",
            OpKind::LinearTanh => "linear_tanh",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn has_weights(self) -> bool {
        matches!(self, OpKind::Linear | OpKind::LinearRelu | OpKind::LinearTanh)
    }
}

/// One edge of the cell with its candidate operation list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: usize,
    pub to: usize,
    pub ops: Vec<OpKind>,
}

/// The cell: node widths plus a DAG of mixed edges. Node 0 is the input,
/// the last node is the output; each interior/output node sums its
/// incoming edge values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    widths: Vec<usize>,
    edges: Vec<EdgeSpec>,
}

impl CellSpec {
    pub fn new(widths: Vec<usize>, edges: Vec<EdgeSpec>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidCell("need at least input and output nodes".into()));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidCell("zero node width".into()));
        }
        let n = widths.len();
        let mut has_incoming = vec![false; n];
        for (i, e) in edges.iter().enumerate() {
            if e.to >= n || e.from >= n {
                return Err(Error::InvalidCell(format!("edge {i} references missing node")));
            }
            if e.from >= e.to {
                return Err(Error::InvalidCell(format!(
                    "edge {i} ({} -> {}) would break the forward DAG order",
                    e.from, e.to
                )));
            }
            if e.ops.is_empty() {
                return Err(Error::InvalidCell(format!("edge {i} has no candidate ops")));
            }
            if e.ops.contains(&OpKind::Identity) && widths[e.from] != widths[e.to] {
                return Err(Error::InvalidCell(format!(
                    "edge {i}: identity needs equal widths, got {} -> {}",
                    widths[e.from], widths[e.to]
                )));
            }
            has_incoming[e.to] = true;
        }
        for j in 1..n {
            if !has_incoming[j] {
                return Err(Error::InvalidCell(format!("node {j} has no incoming edge")));
            }
        }
        Ok(CellSpec { widths, edges })
    }

    /// Default desk-scale cell: 4 nodes of width 16, every forward edge,
    /// all five candidate ops.
    pub fn default_desk() -> Self {
        CellSpec::fully_connected(4, 16, &OpKind::ALL)
    }

    /// All forward edges over `nodes` nodes of uniform `width`.
    pub fn fully_connected(nodes: usize, width: usize, ops: &[OpKind]) -> Self {
        let mut edges = Vec::new();
        for from in 0..nodes {
            for to in from + 1..nodes {
                edges.push(EdgeSpec {
                    from,
                    to,
                    ops: ops.to_vec(),
                });
            }
        }
        CellSpec::new(vec![width; nodes], edges).expect("fully connected cell")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn edges(&self) -> &[EdgeSpec] {
        &self.edges
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn edge_param_name(edge: usize, kind: OpKind) -> String {
        format!("e{edge:03}.{}.w", kind.name())
    }

    /// Stable ordering of every encoder weight tensor with its init fan-in.
    pub fn encoder_param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (i, e) in self.edges.iter().enumerate() {
            for &kind in &e.ops {
                if kind.has_weights() {
                    specs.push(ParamSpec {
                        name: Self::edge_param_name(i, kind),
                        shape: vec![self.widths[e.from], self.widths[e.to]],
                        fan_in: self.widths[e.from],
                        zero_init: false,
                    });
                }
            }
        }
        specs
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder_param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

/// Shape and init recipe for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub zero_init: bool,
}

/// Draw parameters in spec order: uniform(-s, s) with `s = 1/sqrt(fan_in)`,
/// or exact zeros for `zero_init` entries (which consume no draws).
pub fn init_params(specs: &[ParamSpec], rng: &mut impl Rng) -> ParamSet {
    let mut params = ParamSet::new();
    for spec in specs {
        let numel: usize = spec.shape.iter().product();
        let t = if spec.zero_init {
            Tensor::zeros(spec.shape.clone())
        } else {
            let s = 1.0 / (spec.fan_in as f64).sqrt();
            let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-s..s)).collect();
            Tensor::new(spec.shape.clone(), data).expect("init draw")
        };
        params.insert(spec.name.clone(), t);
    }
    params
}

/// Architecture parameters: one logit vector per edge, softmaxed into
/// mixture weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub per_edge: Vec<Tensor>,
}

impl ArchParams {
    /// All-zero logits: the uniform mixture.
    pub fn zeros(cell: &CellSpec) -> Self {
        ArchParams {
            per_edge: cell
                .edges()
                .iter()
                .map(|e| Tensor::zeros(vec![1, e.ops.len()]))
                .collect(),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let per_edge = rows
            .into_iter()
            .map(|r| {
                let n = r.len();
                Tensor::new(vec![1, n], r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ArchParams { per_edge })
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.per_edge.iter().map(|t| t.data().to_vec()).collect()
    }

    /// softmax of one edge's logits.
    pub fn mixture_weights(&self, edge: usize) -> Vec<f64> {
        softmax(self.per_edge[edge].data())
    }

    /// Register each edge's logits as a tape leaf, in edge order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<TensorRef> {
        self.per_edge.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Plain gradient step `alpha -= eta * g`.
    pub fn step(&mut self, grads: &[Tensor], eta: f64) -> Result<()> {
        if grads.len() != self.per_edge.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradient rows for {} edges",
                grads.len(),
                self.per_edge.len()
            )));
        }
        for (t, g) in self.per_edge.iter_mut().zip(grads) {
            if t.shape() != g.shape() {
                return Err(Error::ShapeMismatch("alpha gradient shape".into()));
            }
            let updated: Vec<f64> = t
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, gi)| a - eta * gi)
                .collect();
            *t = Tensor::new(t.shape().to_vec(), updated)?;
        }
        Ok(())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Mixture output of one edge: `sum_o softmax(alpha)_o * op_o(x)`,
/// recorded on the tape. The zero op's term is identically zero and is
/// not materialized; its logit still receives gradient through the
/// softmax normalization.
pub fn mixed_edge_forward(
    tape: &mut Tape,
    cell: &CellSpec,
    edge: usize,
    x: TensorRef,
    alpha_edge: TensorRef,
    weights: &ParamRefs,
) -> Result<TensorRef> {
    let spec = &cell.edges()[edge];
    let in_w = cell.widths()[spec.from];
    let out_w = cell.widths()[spec.to];
    if tape.value(x).cols() != in_w {
        return Err(Error::ShapeMismatch(format!(
            "edge {edge} input width {} expected {in_w}",
            tape.value(x).cols()
        )));
    }
    let sm = tape.softmax_rows(alpha_edge)?;
    let mut acc: Option<TensorRef> = None;
    for (o, &kind) in spec.ops.iter().enumerate() {
        if kind == OpKind::Zero {
            continue;
        }
        let w_o = tape.index(sm, o)?;
        let raw = match kind {
            OpKind::Zero => unreachable!(),
            OpKind::Identity => x,
            OpKind::Linear | OpKind::LinearRelu | OpKind::LinearTanh => {
                let name = CellSpec::edge_param_name(edge, kind);
                let w = *weights
                    .get(&name)
                    .ok_or_else(|| Error::UnknownParam(name.clone()))?;
                let lin = tape.matmul(x, w)?;
                match kind {
                    OpKind::LinearRelu => tape.relu(lin)?,
                    OpKind::LinearTanh => tape.tanh(lin)?,
                    _ => lin,
                }
            }
        };
        let term = tape.scale_by(raw, w_o)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => {
            let n = tape.value(x).rows();
            Ok(tape.leaf(Tensor::zeros(vec![n, out_w])))
        }
    }
}

/// Cell forward pass: node values in topological order, each node summing
/// its incoming mixed-edge outputs.
pub fn encoder_forward(
    tape: &mut Tape,
    cell: &CellSpec,
    x: TensorRef,
    alpha: &[TensorRef],
    weights: &ParamRefs,
) -> Result<TensorRef> {
    if alpha.len() != cell.edges().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} alpha vectors for {} edges",
            alpha.len(),
            cell.edges().len()
        )));
    }
    if tape.value(x).cols() != cell.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} expected {}",
            tape.value(x).cols(),
            cell.input_width()
        )));
    }
    let n_nodes = cell.widths().len();
    let mut values: Vec<Option<TensorRef>> = vec![None; n_nodes];
    values[0] = Some(x);
    for node in 1..n_nodes {
        let mut acc: Option<TensorRef> = None;
        for (i, e) in cell.edges().iter().enumerate() {
            if e.to != node {
                continue;
            }
            let src = values[e.from].expect("topological order");
            let out = mixed_edge_forward(tape, cell, i, src, alpha[i], weights)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, out)?,
                None => out,
            });
        }
        values[node] = Some(acc.expect("validated: every node has an incoming edge"));
    }
    Ok(values[n_nodes - 1].unwrap())
}

/// Task head: a linear classifier over the encoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub in_width: usize,
    pub classes: usize,
}

impl Head {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: "head.w".into(),
                shape: vec![self.in_width, self.classes],
                fan_in: self.in_width,
                zero_init: false,
            },
            ParamSpec {
                name: "head.b".into(),
                shape: vec![1, self.classes],
                fan_in: self.in_width,
                zero_init: true,
            },
        ]
    }
}

/// `logits = z W + 1 b`: the bias row is broadcast with a ones-column
/// matmul so its gradient stays on the tape.
pub fn head_forward(tape: &mut Tape, heads: &ParamRefs, z: TensorRef) -> Result<TensorRef> {
    let w = *heads
        .get("head.w")
        .ok_or_else(|| Error::UnknownParam("head.w".into()))?;
    let b = *heads
        .get("head.b")
        .ok_or_else(|| Error::UnknownParam("head.b".into()))?;
    let zw = tape.matmul(z, w)?;
    let n = tape.value(z).rows();
    let ones = tape.leaf(Tensor::new(vec![n, 1], vec![1.0; n]).expect("ones column"));
    let bias = tape.matmul(ones, b)?;
    tape.add(zw, bias)
}

/// Mean cross-entropy of the full encoder+head model on a batch.
pub fn loss(
    tape: &mut Tape,
    cell: &CellSpec,
    alpha: &[TensorRef],
    weights: &ParamRefs,
    heads: &ParamRefs,
    batch: &Batch,
) -> Result<TensorRef> {
    if batch.labels.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let x = tape.leaf(batch.features.clone());
    let z = encoder_forward(tape, cell, x, alpha, weights)?;
    let logits = head_forward(tape, heads, z)?;
    tape.cross_entropy(logits, &batch.labels)
}

/// One retained operation per edge, with the mixture weights that chose it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedEdge {
    pub from: usize,
    pub to: usize,
    pub kept: OpKind,
    pub candidates: Vec<OpKind>,
    pub weights: Vec<f64>,
}

/// A discretized cell, serializable as a stable text document.
/// The cell index is reserved for multi-cell encoders; a single-cell
/// encoder always writes `cell 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedCell {
    pub cell_index: usize,
    pub widths: Vec<usize>,
    pub edges: Vec<DiscretizedEdge>,
}

/// Keep each edge's argmax-softmax operation; ties break to the lowest
/// op index.
pub fn discretize(alpha: &ArchParams, cell: &CellSpec) -> DiscretizedCell {
    let edges = cell
        .edges()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let weights = softmax(alpha.per_edge[i].data());
            let mut best = 0;
            for (o, &w) in weights.iter().enumerate() {
                if w > weights[best] {
                    best = o;
                }
            }
            DiscretizedEdge {
                from: e.from,
                to: e.to,
                kept: e.ops[best],
                candidates: e.ops.clone(),
                weights,
            }
        })
        .collect();
    DiscretizedCell {
        cell_index: 0,
        widths: cell.widths().to_vec(),
        edges,
    }
}

impl DiscretizedCell {
    /// Rebuild a cell spec with exactly one candidate op per edge.
    pub fn to_cell_spec(&self) -> Result<CellSpec> {
        let edges = self
            .edges
            .iter()
            .map(|e| EdgeSpec {
                from: e.from,
                to: e.to,
                ops: vec![e.kept],
            })
            .collect();
        CellSpec::new(self.widths.clone(), edges)
    }

    /// Stable text rendering: fixed field order, shortest-round-trip floats.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("arch-schema 1\n");
        out.push_str(&format!("cell {}\n", self.cell_index));
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        out.push_str(&format!("widths {}\n", widths.join(" ")));
        for (i, e) in self.edges.iter().enumerate() {
            let cands: Vec<&str> = e.candidates.iter().map(|k| k.name()).collect();
            let weights: Vec<String> = e.weights.iter().map(|w| w.to_string()).collect();
            out.push_str(&format!(
                "edge {i} from {} to {} keep {} candidates {} weights {}\n",
                e.from,
                e.to,
                e.kept.name(),
                cands.join(","),
                weights.join(",")
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("architecture file: {what}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        if header.trim() != "arch-schema 1" {
            return Err(bad("missing `arch-schema 1` header"));
        }
        let cell_line = lines.next().ok_or_else(|| bad("missing cell line"))?;
        let cell_index: usize = cell_line
            .trim()
            .strip_prefix("cell ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad cell line"))?;
        let widths_line = lines.next().ok_or_else(|| bad("missing widths line"))?;
        let widths: Vec<usize> = widths_line
            .trim()
            .strip_prefix("widths ")
            .ok_or_else(|| bad("bad widths line"))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad width")))
            .collect::<Result<_>>()?;
        let mut edges = Vec::new();
        for line in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 12
                || toks[0] != "edge"
                || toks[2] != "from"
                || toks[4] != "to"
                || toks[6] != "keep"
                || toks[8] != "candidates"
                || toks[10] != "weights"
            {
                return Err(bad(&format!("bad edge line `{line}`")));
            }
            let from: usize = toks[3].parse().map_err(|_| bad("bad from"))?;
            let to: usize = toks[5].parse().map_err(|_| bad("bad to"))?;
            let kept = OpKind::parse(toks[7]).ok_or_else(|| bad("unknown op"))?;
            let candidates: Vec<OpKind> = toks[9]
                .split(',')
                .map(|s| OpKind::parse(s).ok_or_else(|| bad("unknown candidate")))
                .collect::<Result<_>>()?;
            let weights: Vec<f64> = toks[11]
                .split(',')
                .map(|s| s.parse().map_err(|_| bad("bad weight")))
                .collect::<Result<_>>()?;
            if weights.len() != candidates.len() {
                return Err(bad("weights/candidates length mismatch"));
            }
            edges.push(DiscretizedEdge {
                from,
                to,
                kept,
                candidates,
                weights,
            });
        }
        Ok(DiscretizedCell {
            cell_index,
            widths,
            edges,
        })
    }
}
