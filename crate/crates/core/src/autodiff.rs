//! Minimal reverse-mode differentiation over 2-D values.
//!
//! A [`Graph`] records operations in creation order, which is already a
//! topological order, so [`Graph::backward`] walks the node list in reverse.
//! Learnable arrays live in a [`Params`] store borrowed by the graph; their
//! gradients are written into a [`Gradients`] accumulator shaped like the
//! store. Only the primitives the ranking models need are provided.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || data.len() != expected {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in &mut t.data {
            *v = rng.uniform(-bound, bound);
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of the trailing dimensions.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable arrays. Embedding tables registered with
/// [`Params::add_embedding`] keep row 0 pinned at zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    pad_frozen: Vec<bool>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.into());
        self.pad_frozen.push(false);
        ParamId(self.tensors.len() - 1)
    }

    /// Register a table whose row 0 is padding: zeroed now and never updated.
    pub fn add_embedding(&mut self, name: impl Into<String>, mut table: Tensor) -> ParamId {
        let d = table.row_len();
        table.data[..d].iter_mut().for_each(|v| *v = 0.0);
        let id = self.add(name, table);
        self.pad_frozen[id.0] = true;
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Remove the most recently added array.
    pub fn pop(&mut self) -> Option<(String, Tensor)> {
        self.pad_frozen.pop();
        let name = self.names.pop()?;
        Some((name, self.tensors.pop()?))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn is_pad_frozen(&self, id: ParamId) -> bool {
        self.pad_frozen[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn rezero_pad_rows(&mut self) {
        for (t, &frozen) in self.tensors.iter_mut().zip(&self.pad_frozen) {
            if frozen {
                let d = t.row_len();
                t.data[..d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Gradient buffers shaped like a [`Params`] store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Self {
        Gradients {
            grads: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

/// Dot product with four interleaved partial sums. The summation order is
/// fixed, so results are reproducible bit for bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit: `(probability, loss, dloss/dlogit)`.
/// The loss uses the fused form `max(z,0) - z*y + ln(1 + e^-|z|)`.
pub fn sigmoid_bce(logit: f64, label: f64) -> (f64, f64, f64) {
    let p = sigmoid(logit);
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (p, loss, p - label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug)]
enum Op {
    Input,
    Embed {
        table: ParamId,
        ids: Vec<u32>,
    },
    Conv1dRelu {
        input: NodeId,
        filters: ParamId,
        bias: ParamId,
        width: usize,
    },
    MaxOverTime {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Linear {
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    SigmoidBce {
        logits: NodeId,
        labels: Vec<f64>,
    },
    SquaredNorm {
        param: ParamId,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// A recorded forward computation over a borrowed parameter store.
#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Params) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::shape(format!("unknown node {}", id.0)))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Smallest distance of any ReLU pre-activation from zero, or of any
    /// pooled maximum from the runner-up value in its column. Finite
    /// differences are only trustworthy when this exceeds the step size.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// A constant `rows x cols` value.
    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<NodeId> {
        if values.len() != rows * cols {
            return Err(Error::shape(format!(
                "input {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(self.push(values, rows, cols, Op::Input))
    }

    /// Gather rows of `table` (shape `V x d`) for `ids`, giving `L x d`.
    pub fn embed(&mut self, table: ParamId, ids: &[u32]) -> Result<NodeId> {
        let t = self.params.get(table);
        let (v, d) = (t.rows(), t.row_len());
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::shape(format!("token id {id} out of range for {v} rows")));
            }
            value.extend_from_slice(t.row(id as usize));
        }
        Ok(self.push(
            value,
            ids.len(),
            d,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Valid cross-correlation over time of an `L x d` input with `F`
    /// filters of shape `w x d` (param shape `[F, w, d]`), plus bias, then
    /// ReLU. Output is `(L - w + 1) x F`.
    pub fn conv1d_relu(&mut self, input: NodeId, filters: ParamId, bias: ParamId) -> Result<NodeId> {
        let (len, d) = self.shape(input);
        let fbank = self.params.get(filters);
        let b = self.params.get(bias);
        if fbank.shape().len() != 3 || fbank.shape()[2] != d {
            return Err(Error::shape(format!(
                "filter bank {:?} incompatible with embedding width {d}",
                fbank.shape()
            )));
        }
        let (n_filters, width) = (fbank.shape()[0], fbank.shape()[1]);
        if b.len() != n_filters {
            return Err(Error::shape("conv bias length must equal filter count"));
        }
        if len < width {
            return Err(Error::shape(format!(
                "sequence length {len} shorter than filter width {width}"
            )));
        }
        let steps = len - width + 1;
        let x = &self.nodes[input.0].value;
        let span = width * d;
        let mut out = vec![0.0; steps * n_filters];
        let mut margin = self.kink_margin;
        for t in 0..steps {
            let window = &x[t * d..t * d + span];
            let row = &mut out[t * n_filters..(t + 1) * n_filters];
            for (f, o) in row.iter_mut().enumerate() {
                let pre = b.data()[f] + dot(window, fbank.row(f));
                margin = margin.min(pre.abs());
                *o = pre.max(0.0);
            }
        }
        self.kink_margin = margin;
        Ok(self.push(
            out,
            steps,
            n_filters,
            Op::Conv1dRelu {
                input,
                filters,
                bias,
                width,
            },
        ))
    }

    /// Column-wise maximum of a `T x F` input; gradient goes to the first
    /// maximal row of each column.
    pub fn max_over_time(&mut self, input: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(input);
        if rows == 0 {
            return Err(Error::shape("max over an empty time axis"));
        }
        let x = &self.nodes[input.0].value;
        let mut best = x[..cols].to_vec();
        let mut argmax = vec![0; cols];
        for t in 1..rows {
            for f in 0..cols {
                let v = x[t * cols + f];
                if v > best[f] {
                    best[f] = v;
                    argmax[f] = t;
                }
            }
        }
        let mut margin = self.kink_margin;
        for f in 0..cols {
            let runner_up = (0..rows)
                .map(|t| x[t * cols + f])
                .filter(|&v| v < best[f])
                .fold(f64::NEG_INFINITY, f64::max);
            margin = margin.min(best[f] - runner_up);
        }
        self.kink_margin = margin;
        Ok(self.push(best, 1, cols, Op::MaxOverTime { input, argmax }))
    }

    /// Inverted dropout. Identity in inference mode or when `p == 0`.
    pub fn dropout(&mut self, input: NodeId, p: f64, mode: Mode, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Infer || p == 0.0 {
            return Ok(input);
        }
        let (rows, cols) = self.shape(input);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        let value = self.nodes[input.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        Ok(self.push(value, rows, cols, Op::Dropout { input, mask }))
    }

    /// Elementwise product of equally shaped nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("mul of {sa:?} and {sb:?}")));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(value, sa.0, sa.1, Op::Mul { a, b }))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("add of {sa:?} and {sb:?}")));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(value, sa.0, sa.1, Op::Add { a, b }))
    }

    /// Flatten and join nodes into a single `1 x n` row.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat of nothing"));
        }
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(&self.node(p)?.value);
        }
        let n = value.len();
        Ok(self.push(
            value,
            1,
            n,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Row-wise affine map: input `r x n`, weight `[m, n]`, optional bias
    /// `[m]`, output `r x m`.
    pub fn linear(&mut self, input: NodeId, weight: ParamId, bias: Option<ParamId>) -> Result<NodeId> {
        let (rows, n) = self.shape(input);
        let w = self.params.get(weight);
        if w.shape().len() != 2 || w.shape()[1] != n {
            return Err(Error::shape(format!(
                "weight {:?} incompatible with input width {n}",
                w.shape()
            )));
        }
        let m = w.rows();
        if let Some(b) = bias {
            if self.params.get(b).len() != m {
                return Err(Error::shape("bias length must equal output width"));
            }
        }
        let x = &self.nodes[input.0].value;
        let mut out = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let xr = &x[r * n..(r + 1) * n];
            for j in 0..m {
                let s = dot(w.row(j), xr);
                out.push(match bias {
                    Some(b) => s + self.params.get(b).data()[j],
                    None => s,
                });
            }
        }
        Ok(self.push(
            out,
            rows,
            m,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Mean binary cross-entropy of a column of logits against 0/1 labels.
    pub fn sigmoid_bce(&mut self, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
        let (rows, cols) = self.shape(logits);
        if cols != 1 || rows != labels.len() || rows == 0 {
            return Err(Error::shape(format!(
                "bce needs one logit per label: {rows}x{cols} vs {}",
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        let z = &self.nodes[logits.0].value;
        let total: f64 = z
            .iter()
            .zip(labels)
            .map(|(&zi, &yi)| sigmoid_bce(zi, yi).1)
            .sum();
        Ok(self.push(
            vec![total / rows as f64],
            1,
            1,
            Op::SigmoidBce {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `scale * ||param||^2` as a scalar node.
    pub fn squared_norm(&mut self, param: ParamId, scale: f64) -> NodeId {
        let v = self.params.get(param).data();
        let s = scale * v.iter().map(|x| x * x).sum::<f64>();
        self.push(vec![s], 1, 1, Op::SquaredNorm { param, scale })
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self.params);
        self.backward_into(loss, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Accumulate `seed * dloss/dparam` into `grads`.
    pub fn backward_into(&self, loss: NodeId, seed: f64, grads: &mut Gradients) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::NoForwardPass);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut node_grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        node_grads[loss.0] = Some(vec![seed]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Embed { table, ids } => {
                    let frozen = self.params.is_pad_frozen(*table);
                    let d = node.cols;
                    let tg = grads.get_mut(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        if frozen && id == 0 {
                            continue;
                        }
                        let id = id as usize;
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut tg[id * d..(id + 1) * d]);
                    }
                }
                Op::Conv1dRelu {
                    input,
                    filters,
                    bias,
                    width,
                } => {
                    let (len, d) = self.shape(*input);
                    let x = &self.nodes[input.0].value;
                    let fbank = self.params.get(*filters);
                    let n_filters = node.cols;
                    let span = width * d;
                    let mut gx = vec![0.0; len * d];
                    for t in 0..node.rows {
                        let window = &x[t * d..t * d + span];
                        for f in 0..n_filters {
                            let k = t * n_filters + f;
                            if g[k] == 0.0 || node.value[k] <= 0.0 {
                                continue;
                            }
                            axpy(g[k], fbank.row(f), &mut gx[t * d..t * d + span]);
                            let gf = grads.get_mut(*filters);
                            axpy(g[k], window, &mut gf[f * span..(f + 1) * span]);
                            grads.get_mut(*bias)[f] += g[k];
                        }
                    }
                    accumulate(&mut node_grads, *input, gx);
                }
                Op::MaxOverTime { input, argmax } => {
                    let (rows, cols) = self.shape(*input);
                    let mut gx = vec![0.0; rows * cols];
                    for (f, &t) in argmax.iter().enumerate() {
                        gx[t * cols + f] = g[f];
                    }
                    accumulate(&mut node_grads, *input, gx);
                }
                Op::Dropout { input, mask } => {
                    let gx = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                    accumulate(&mut node_grads, *input, gx);
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    accumulate(&mut node_grads, *a, ga);
                    accumulate(&mut node_grads, *b, gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut node_grads, *a, g.clone());
                    accumulate(&mut node_grads, *b, g);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.len();
                        accumulate(&mut node_grads, p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (rows, n) = self.shape(*input);
                    let m = node.cols;
                    let x = &self.nodes[input.0].value;
                    let w = self.params.get(*weight);
                    let mut gx = vec![0.0; rows * n];
                    for r in 0..rows {
                        for j in 0..m {
                            let gj = g[r * m + j];
                            if gj == 0.0 {
                                continue;
                            }
                            axpy(gj, w.row(j), &mut gx[r * n..(r + 1) * n]);
                            axpy(
                                gj,
                                &x[r * n..(r + 1) * n],
                                &mut grads.get_mut(*weight)[j * n..(j + 1) * n],
                            );
                            if let Some(b) = bias {
                                grads.get_mut(*b)[j] += gj;
                            }
                        }
                    }
                    accumulate(&mut node_grads, *input, gx);
                }
                Op::SigmoidBce { logits, labels } => {
                    let z = &self.nodes[logits.0].value;
                    let n = labels.len() as f64;
                    let gz = z
                        .iter()
                        .zip(labels)
                        .map(|(&zi, &yi)| g[0] * sigmoid_bce(zi, yi).2 / n)
                        .collect();
                    accumulate(&mut node_grads, *logits, gz);
                }
                Op::SquaredNorm { param, scale } => {
                    let v = self.params.get(*param).data();
                    let pg = grads.get_mut(*param);
                    for (gi, &vi) in pg.iter_mut().zip(v) {
                        *gi += g[0] * 2.0 * scale * vi;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(node_grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut node_grads[id.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Gradients, lr: f64) {
        self.step_with(params, grads, |_| lr)
    }

    /// One update with a per-parameter learning rate.
    pub fn step_with(&mut self, params: &mut Params, grads: &Gradients, lr: impl Fn(ParamId) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in params.ids() {
            let rate = lr(id);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let theta = params.get_mut(id).data_mut();
            for i in 0..theta.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        params.rezero_pad_rows();
    }
}

/// Compare analytic gradients against central differences at the given
/// coordinates; returns the largest `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(
    loss: F,
    params: &Params,
    analytic: &Gradients,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&Params) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for &(id, i) in coords {
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + eps;
        let up = loss(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig - eps;
        let down = loss(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(id)[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Sample `n` coordinates uniformly over all parameter entries, skipping
/// frozen padding rows.
pub fn sample_coords(params: &Params, n: usize, rng: &mut Rng) -> Vec<(ParamId, usize)> {
    let mut all = Vec::new();
    for id in params.ids() {
        let t = params.get(id);
        let skip = if params.is_pad_frozen(id) { t.row_len() } else { 0 };
        all.extend((skip..t.len()).map(|i| (id, i)));
    }
    rng.sample_indices(all.len(), n)
        .into_iter()
        .map(|k| all[k])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with(entries: &[(&str, &[usize], Vec<f64>)]) -> (Params, Vec<ParamId>) {
        let mut p = Params::new();
        let ids = entries
            .iter()
            .map(|(n, s, v)| p.add(*n, Tensor::from_vec(s, v.clone()).unwrap()))
            .collect();
        (p, ids)
    }

    #[test]
    fn embed_gathers_and_scatters() {
        let mut p = Params::new();
        let table = p.add_embedding(
            "emb",
            Tensor::from_vec(&[3, 2], vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let head = p.add("w", Tensor::from_vec(&[1, 6], vec![1.0; 6]).unwrap());
        let mut g = Graph::new(&p);
        let e = g.embed(table, &[2, 0]).unwrap();
        assert_eq!(g.value(e), &[3.0, 4.0, 0.0, 0.0]);

        // all-ones upstream gradient; row 2 used twice, PAD row frozen
        let mut g = Graph::new(&p);
        let e = g.embed(table, &[2, 2, 0]).unwrap();
        let flat = g.concat(&[e]).unwrap();
        let out = g.linear(flat, head, None).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(table), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let mut p = Params::new();
        let table = p.add_embedding("emb", Tensor::zeros(&[3, 2]));
        let mut g = Graph::new(&p);
        assert!(g.embed(table, &[3]).is_err());
    }

    #[test]
    fn conv_hand_example() {
        let (p, ids) = params_with(&[
            ("f", &[1, 2, 1], vec![1.0, 1.0]),
            ("b", &[1], vec![0.0]),
            ("zf", &[1, 2, 1], vec![0.0, 0.0]),
            ("bneg", &[1], vec![-1.0]),
            ("bpos", &[1], vec![1.0]),
        ]);
        let mut g = Graph::new(&p);
        let x = g.input(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let c = g.conv1d_relu(x, ids[0], ids[1]).unwrap();
        assert_eq!(g.value(c), &[3.0, 5.0]);
        let c = g.conv1d_relu(x, ids[2], ids[3]).unwrap();
        assert_eq!(g.value(c), &[0.0, 0.0]);
        let c = g.conv1d_relu(x, ids[2], ids[4]).unwrap();
        assert_eq!(g.value(c), &[1.0, 1.0]);

        let short = g.input(1, 1, vec![1.0]).unwrap();
        assert!(matches!(g.conv1d_relu(short, ids[0], ids[1]), Err(Error::Shape(_))));
    }

    #[test]
    fn max_pool_values_and_tie_rule() {
        let (p, ids) = params_with(&[("w", &[1, 2], vec![1.0, 0.0])]);
        let mut g = Graph::new(&p);
        let x = g.input(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let m = g.max_over_time(x).unwrap();
        assert_eq!(g.value(m), &[3.0, 5.0]);

        let mut g = Graph::new(&p);
        let x = g.input(1, 2, vec![7.0, -1.0]).unwrap();
        let m = g.max_over_time(x).unwrap();
        assert_eq!(g.value(m), &[7.0, -1.0]);

        // tie column [2, 2]: gradient lands on the first row only
        let mut p2 = Params::new();
        let f = p2.add("f", Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap());
        let b = p2.add("b", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let w = p2.add("w", Tensor::from_vec(&[1, 1], vec![1.0]).unwrap());
        let mut g = Graph::new(&p2);
        let emb_like = g.input(2, 1, vec![2.0, 2.0]).unwrap();
        let c = g.conv1d_relu(emb_like, f, b).unwrap();
        let m = g.max_over_time(c).unwrap();
        let out = g.linear(m, w, None).unwrap();
        let grads = g.backward(out).unwrap();
        // d out / d filter = x at the first argmax only (2.0), not the sum (4.0)
        assert_eq!(grads.get(f), &[2.0]);
        let _ = ids;

        // direct tie: rows 1 and 2 both hold 2.0; upstream grad 1 -> [1, 0]
        let mut p3 = Params::new();
        let t = p3.add_embedding("e", Tensor::from_vec(&[3, 1], vec![0.0, 2.0, 2.0]).unwrap());
        let w = p3.add("w", Tensor::from_vec(&[1, 1], vec![1.0]).unwrap());
        let mut g = Graph::new(&p3);
        let x = g.embed(t, &[1, 2]).unwrap();
        let m = g.max_over_time(x).unwrap();
        let out = g.linear(m, w, None).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(t), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn dropout_modes() {
        let p = Params::new();
        let mut rng = Rng::new(1);
        let mut g = Graph::new(&p);
        let x = g.input(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(g.dropout(x, 0.5, Mode::Infer, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        let d = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        for (&o, &i) in g.value(d).iter().zip(&[1.0, -2.0, 3.0]) {
            assert!(o == 0.0 || o == 2.0 * i);
        }
    }

    #[test]
    fn dropout_mean_preserved() {
        let p = Params::new();
        let mut rng = Rng::new(99);
        let n = 4;
        let mut sums = vec![0.0; n];
        let trials = 10_000;
        for _ in 0..trials {
            let mut g = Graph::new(&p);
            let x = g.input(1, n, vec![1.0; n]).unwrap();
            let d = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(g.value(d)) {
                *s += v;
            }
        }
        for s in sums {
            assert!((s / trials as f64 - 1.0).abs() < 0.02, "mean {s}");
        }
    }

    #[test]
    fn affine_cases() {
        let (p, ids) = params_with(&[
            ("eye", &[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            ("zero_b", &[2], vec![0.0, 0.0]),
            ("zero_w", &[2, 2], vec![0.0; 4]),
            ("c", &[2], vec![5.0, -6.0]),
            ("row", &[1, 2], vec![1.0, 1.0]),
            ("one", &[1], vec![1.0]),
            ("bad", &[1, 3], vec![0.0; 3]),
        ]);
        let mut g = Graph::new(&p);
        let x = g.input(1, 2, vec![1.0, 2.0]).unwrap();
        let y = g.linear(x, ids[0], Some(ids[1])).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);
        let y = g.linear(x, ids[2], Some(ids[3])).unwrap();
        assert_eq!(g.value(y), &[5.0, -6.0]);
        let y = g.linear(x, ids[4], Some(ids[5])).unwrap();
        assert_eq!(g.value(y), &[4.0]);
        assert!(g.linear(x, ids[6], None).is_err());
    }

    #[test]
    fn bce_values() {
        let (p, l, g) = sigmoid_bce(0.0, 1.0);
        assert_eq!(p, 0.5);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, -0.5);
        let (p, l, _) = sigmoid_bce(40.0, 1.0);
        assert!(p > 0.999_999 && l < 1e-15 && l.is_finite());
        let (_, l, _) = sigmoid_bce(-800.0, 1.0);
        assert!((l - 800.0).abs() < 1e-9);
        assert_eq!(sigmoid_bce(0.0, 0.0).2, 0.5);
    }

    #[test]
    fn backward_needs_forward() {
        let p = Params::new();
        let g = Graph::new(&p);
        assert!(matches!(g.backward(NodeId(0)), Err(Error::NoForwardPass)));
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let (p, ids) = params_with(&[("w", &[1, 2], vec![0.3, -0.2])]);
        let mut g = Graph::new(&p);
        let c = g.input(1, 1, vec![4.0]).unwrap();
        let loss = g.sigmoid_bce(c, &[1.0]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ids[0]), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_use_sums_gradients() {
        let (p, ids) = params_with(&[("w", &[1, 1], vec![3.0])]);
        let mut g = Graph::new(&p);
        let x = g.input(1, 1, vec![2.0]).unwrap();
        let a = g.linear(x, ids[0], None).unwrap();
        let b = g.linear(x, ids[0], None).unwrap();
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ids[0]), &[4.0]);
        let mut g = Graph::new(&p);
        let xn = x_node(&mut g);
        let a = g.linear(xn, ids[0], None).unwrap();
        let sq = g.mul(a, a).unwrap();
        let grads = g.backward(sq).unwrap();
        // d/dw (w*2)^2 = 8w = 24
        assert_eq!(grads.get(ids[0]), &[24.0]);
    }

    fn x_node(g: &mut Graph<'_>) -> NodeId {
        g.input(1, 1, vec![2.0]).unwrap()
    }

    #[test]
    fn tiny_net_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let mut p = Params::new();
        let w = p.add("w", Tensor::uniform(&[3, 4], 0.5, &mut rng));
        let b = p.add("b", Tensor::uniform(&[3], 0.5, &mut rng));
        let v = p.add("v", Tensor::uniform(&[1, 3], 0.5, &mut rng));
        let c = p.add("c", Tensor::uniform(&[1], 0.5, &mut rng));
        let x: Vec<f64> = (0..4).map(|i| 0.3 * i as f64 - 0.4).collect();
        let forward = |p: &Params| -> Result<(f64, Gradients)> {
            let mut g = Graph::new(p);
            let xi = g.input(1, 4, x.clone())?;
            let h = g.linear(xi, w, Some(b))?;
            let hh = g.mul(h, h)?;
            let z = g.linear(hh, v, Some(c))?;
            let loss = g.sigmoid_bce(z, &[1.0])?;
            Ok((g.value(loss)[0], g.backward(loss)?))
        };
        let (_, analytic) = forward(&p).unwrap();
        let coords: Vec<(ParamId, usize)> = p
            .ids()
            .flat_map(|id| (0..p.get(id).len()).map(move |i| (id, i)))
            .collect();
        let err = grad_check(|q| Ok(forward(q)?.0), &p, &analytic, &coords, 1e-4).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn linear_model_gradient_is_exact() {
        let (p, ids) = params_with(&[("w", &[1, 3], vec![0.5, -1.5, 2.0])]);
        let x = vec![1.0, 2.0, -0.5];
        let forward = |p: &Params| -> Result<(f64, Gradients)> {
            let mut g = Graph::new(p);
            let xi = g.input(1, 3, x.clone())?;
            let z = g.linear(xi, ids[0], None)?;
            Ok((g.value(z)[0], g.backward(z)?))
        };
        let (_, analytic) = forward(&p).unwrap();
        let coords: Vec<_> = (0..3).map(|i| (ids[0], i)).collect();
        let err = grad_check(|q| Ok(forward(q)?.0), &p, &analytic, &coords, 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let (mut p, ids) = params_with(&[("t", &[1], vec![0.0])]);
        let mut st = AdamState::new(&p);
        let mut grads = Gradients::zeros_like(&p);
        st.step(&mut p, &grads, 1e-3);
        assert_eq!(p.get(ids[0]).data(), &[0.0]);

        let (mut p, ids) = params_with(&[("t", &[1], vec![0.0])]);
        let mut st = AdamState::new(&p);
        grads.get_mut(ids[0])[0] = 1.0;
        st.step(&mut p, &grads, 1e-3);
        assert!((p.get(ids[0]).data()[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_keeps_pad_row_zero() {
        let mut p = Params::new();
        let t = p.add_embedding("e", Tensor::from_vec(&[2, 2], vec![1.0; 4]).unwrap());
        let mut grads = Gradients::zeros_like(&p);
        grads.get_mut(t).copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        let mut st = AdamState::new(&p);
        st.step(&mut p, &grads, 0.1);
        assert_eq!(&p.get(t).data()[..2], &[0.0, 0.0]);
        assert!(p.get(t).data()[2] < 1.0);
    }

    #[test]
    fn dot_is_exact_on_small_integers() {
        let a: Vec<f64> = (0..11).map(|i| i as f64).collect();
        assert_eq!(dot(&a, &a), (0..11).map(|i| (i * i) as f64).sum::<f64>());
    }
}
