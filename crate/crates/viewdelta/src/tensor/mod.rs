//! Minimal deterministic reverse-mode autodiff engine.
//!
//! A [`Graph`] owns every tensor created during one forward pass and records
//! the operations needed to replay it backwards. Tensors are referenced by
//! [`TensorId`] handles; data is row-major `f64` with an optional float32
//! rounding mode (see [`Precision`]). Reduction order is fixed left-to-right
//! row-major so results are bit-reproducible across runs.

mod conv;
mod linalg;
mod nn;

use std::sync::atomic::{AtomicU8, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} got {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid geometry for {op}: {msg}")]
    Geometry { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice without resetting the graph")]
    DoubleBackward,
    #[error("invalid axis {axis} for rank-{rank} tensor")]
    BadAxis { axis: usize, rank: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Numeric mode for forward values. Gradients are always accumulated in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

static DEFAULT_PRECISION: AtomicU8 = AtomicU8::new(1); // 1 = F64

/// Process-wide default used by `Graph::new`.
pub fn set_default_precision(p: Precision) {
    DEFAULT_PRECISION.store(if p == Precision::F64 { 1 } else { 0 }, Ordering::Relaxed);
}

pub fn default_precision() -> Precision {
    if DEFAULT_PRECISION.load(Ordering::Relaxed) == 1 {
        Precision::F64
    } else {
        Precision::F32
    }
}

/// Handle to a tensor living in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

pub(crate) struct Node {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

type BackFn = Box<dyn FnOnce(&[Node], &[f64], &mut [Option<Vec<f64>>])>;

struct Record {
    out: TensorId,
    back: BackFn,
}

/// One computation graph: forward tape plus gradient buffers.
pub struct Graph {
    nodes: Vec<Node>,
    records: Vec<Record>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    precision: Precision,
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(default_precision())
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn round(&self, v: f64) -> f64 {
        match self.precision {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }

    pub(crate) fn round_vec(&self, mut v: Vec<f64>) -> Vec<f64> {
        if self.precision == Precision::F32 {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        v
    }

    pub(crate) fn push_node(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let data = self.round_vec(data);
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub(crate) fn push_record(&mut self, out: TensorId, back: BackFn) {
        self.records.push(Record { out, back });
    }

    /// New leaf tensor. `requires_grad` leaves receive gradients in backward().
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        self.leaf_checked(data, shape, requires_grad).expect("leaf shape/data length mismatch")
    }

    pub fn leaf_checked(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::Geometry {
                op: "leaf",
                msg: format!("data length {} != product of shape {:?}", data.len(), shape),
            });
        }
        Ok(self.push_node(data, shape, requires_grad))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push_node(vec![v], vec![], false)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of a tensor after backward(); None if no gradient flowed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub(crate) fn accumulate(grads: &mut [Option<Vec<f64>>], id: TensorId, len: usize) -> &mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Reverse pass from a scalar loss. Populates gradients of every
    /// `requires_grad` tensor reachable from it.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        let records = std::mem::take(&mut self.records);
        for rec in records.into_iter().rev() {
            // A record whose output never received a gradient contributes nothing.
            let gout = match self.grads[rec.out.0].take() {
                Some(g) => g,
                None => continue,
            };
            (rec.back)(&self.nodes, &gout, &mut self.grads);
            // Keep the gradient visible for non-leaf inspection.
            self.grads[rec.out.0] = Some(gout);
        }
        Ok(())
    }

    /// Node indices (creation order) whose data or gradient contains a
    /// non-finite value. Debug aid for localizing numeric blowups.
    pub fn nonfinite_nodes(&self) -> Vec<(usize, Vec<usize>, bool, bool)> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let bad_data = n.data.iter().any(|v| !v.is_finite());
            let bad_grad = self.grads[i]
                .as_ref()
                .map(|g| g.iter().any(|v| !v.is_finite()))
                .unwrap_or(false);
            if bad_data || bad_grad {
                out.push((i, n.shape.clone(), bad_data, bad_grad));
            }
        }
        out
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push_node(data, sa, rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |nodes, gout, grads| {
                    for (id, n) in [(a, gout.len()), (b, gout.len())] {
                        if nodes[id.0].requires_grad || grad_needed(nodes, id) {
                            let g = Graph::accumulate(grads, id, n);
                            for (gi, go) in g.iter_mut().zip(gout) {
                                *gi += go;
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push_node(data, sa, rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |nodes, gout, grads| {
                    if grad_needed(nodes, a) {
                        let bd: Vec<f64> = nodes[b.0].data.clone();
                        let g = Graph::accumulate(grads, a, gout.len());
                        for i in 0..gout.len() {
                            g[i] += gout[i] * bd[i];
                        }
                    }
                    if grad_needed(nodes, b) {
                        let ad: Vec<f64> = nodes[a.0].data.clone();
                        let g = Graph::accumulate(grads, b, gout.len());
                        for i in 0..gout.len() {
                            g[i] += gout[i] * ad[i];
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        let out = self.push_node(data, shape, rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |_nodes, gout, grads| {
                    let g = Graph::accumulate(grads, a, gout.len());
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go * c;
                    }
                }),
            );
        }
        out
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        let out = self.push_node(data, shape, rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |nodes, gout, grads| {
                    let xs = &nodes[a.0].data;
                    let mask: Vec<f64> = xs.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
                    let g = Graph::accumulate(grads, a, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * mask[i];
                    }
                }),
            );
        }
        out
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        let out = self.push_node(data, shape, rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |nodes, gout, grads| {
                    let xs = nodes[a.0].data.clone();
                    let g = Graph::accumulate(grads, a, gout.len());
                    for i in 0..gout.len() {
                        let x = xs[i];
                        let t = (C * (x + A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
                        g[i] += gout[i] * d;
                    }
                }),
            );
        }
        out
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        let data = self.round_vec(data);
        let out = self.push_node(data, shape, rg);
        if rg {
            let sd = self.data(out).to_vec();
            self.push_record(
                out,
                Box::new(move |_nodes, gout, grads| {
                    let g = Graph::accumulate(grads, a, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * sd[i] * (1.0 - sd[i]);
                    }
                }),
            );
        }
        out
    }

    /// Sum of all elements, left-to-right row-major order.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = 0.0;
        for &x in self.data(a) {
            acc = self.round(acc + x);
        }
        let n = self.numel(a);
        let rg = self.requires_grad(a);
        let out = self.push_node(vec![acc], vec![], rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |_nodes, gout, grads| {
                    let g = Graph::accumulate(grads, a, n);
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                }),
            );
        }
        out
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.numel(a) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reinterpret shape; element count must match.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.numel(a) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.requires_grad(a);
        let out = self.push_node(data, shape, rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |_nodes, gout, grads| {
                    let g = Graph::accumulate(grads, a, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i];
                    }
                }),
            );
        }
        Ok(out)
    }

    /// x: [n, d], bias: [d] — add bias to every row.
    pub fn add_bias_rows(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "add_bias_rows", lhs: sx, rhs: sb });
        }
        let (n, d) = (sx[0], sx[1]);
        let mut data = self.data(x).to_vec();
        let b = self.data(bias).to_vec();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += b[c];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        let out = self.push_node(data, sx, rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |nodes, gout, grads| {
                    if grad_needed(nodes, x) {
                        let g = Graph::accumulate(grads, x, n * d);
                        for i in 0..n * d {
                            g[i] += gout[i];
                        }
                    }
                    if grad_needed(nodes, bias) {
                        let g = Graph::accumulate(grads, bias, d);
                        for r in 0..n {
                            for c in 0..d {
                                g[c] += gout[r * d + c];
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// x: [c, h, w], bias: [c] — add per-channel bias.
    pub fn add_bias_chan(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 3 || sb.len() != 1 || sx[0] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "add_bias_chan", lhs: sx, rhs: sb });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let plane = h * w;
        let mut data = self.data(x).to_vec();
        let b = self.data(bias).to_vec();
        for ch in 0..c {
            for i in 0..plane {
                data[ch * plane + i] += b[ch];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        let out = self.push_node(data, sx, rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |nodes, gout, grads| {
                    if grad_needed(nodes, x) {
                        let g = Graph::accumulate(grads, x, c * plane);
                        for i in 0..c * plane {
                            g[i] += gout[i];
                        }
                    }
                    if grad_needed(nodes, bias) {
                        let g = Graph::accumulate(grads, bias, c);
                        for ch in 0..c {
                            for i in 0..plane {
                                g[ch] += gout[ch * plane + i];
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Whether gradient should flow into this node (it, or something it was
/// computed from, requires grad). Non-leaf outputs always carry the flag.
pub(crate) fn grad_needed(nodes: &[Node], id: TensorId) -> bool {
    nodes[id.0].requires_grad
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::with_precision(Precision::F64);
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_grad_is_2x() {
        let mut g = Graph::with_precision(Precision::F64);
        let x = g.leaf(vec![1.0, -2.0, 0.5], vec![3], true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.leaf(vec![-1.0, 2.0], vec![2], false);
        let r = g.relu(x);
        assert_eq!(g.data(r), &[0.0, 2.0]);
        let z = g.leaf(vec![0.0], vec![1], false);
        let ge = g.gelu(z);
        assert_eq!(g.data(ge)[0], 0.0);
        let si = g.sigmoid(z);
        assert_eq!(g.data(si)[0], 0.5);
    }

    #[test]
    fn double_backward_rejected() {
        let mut g = Graph::with_precision(Precision::F64);
        let x = g.leaf(vec![1.0], vec![], true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::DoubleBackward)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], vec![2], true);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }
}
