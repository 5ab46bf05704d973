//! Neural-net ops: softmax, layer norm, multi-head attention, BCE loss.

use super::{grad_needed, stable_sigmoid, Graph, Result, TensorError, TensorId};

/// Iterate lanes along `axis`: yields (base offset, stride) for each lane.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, Vec<(usize, usize)>) {
    let rank = shape.len();
    let lane_len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let inner = stride;
    let block = lane_len * stride;
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            out.push((o * block + i, stride));
        }
    }
    (lane_len, rank, out)
}

impl Graph {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis { axis, rank: shape.len() });
        }
        let (lane_len, _, lane_list) = lanes(&shape, axis);
        let x = self.data(a);
        let mut data = vec![0.0; x.len()];
        for &(base, stride) in &lane_list {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..lane_len {
                mx = mx.max(x[base + j * stride]);
            }
            let mut denom = 0.0;
            for j in 0..lane_len {
                let e = (x[base + j * stride] - mx).exp();
                data[base + j * stride] = e;
                denom += e;
            }
            for j in 0..lane_len {
                data[base + j * stride] /= denom;
            }
        }
        let data = self.round_vec(data);
        let rg = self.requires_grad(a);
        let out = self.push_node(data, shape, rg);
        if rg {
            let probs = self.data(out).to_vec();
            self.push_record(
                out,
                Box::new(move |_nodes, gout, grads| {
                    let g = Graph::accumulate(grads, a, probs.len());
                    for &(base, stride) in &lane_list {
                        let mut dot = 0.0;
                        for j in 0..lane_len {
                            let idx = base + j * stride;
                            dot += gout[idx] * probs[idx];
                        }
                        for j in 0..lane_len {
                            let idx = base + j * stride;
                            g[idx] += probs[idx] * (gout[idx] - dot);
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Layer norm over the last axis with learned gain and bias of length d.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: sx.clone(),
            rhs: vec![],
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = self.numel(x) / d;
        let xs = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let mut data = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let h = (row[c] - mean) * istd;
                xhat[r * d + c] = h;
                data[r * d + c] = gd[c] * h + bd[c];
            }
        }
        let data = self.round_vec(data);
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        let out = self.push_node(data, sx, rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |nodes, gout, grads| {
                    let gd = nodes[gain.0].data.clone();
                    if grad_needed(nodes, gain) {
                        let g = Graph::accumulate(grads, gain, d);
                        for r in 0..rows {
                            for c in 0..d {
                                g[c] += gout[r * d + c] * xhat[r * d + c];
                            }
                        }
                    }
                    if grad_needed(nodes, bias) {
                        let g = Graph::accumulate(grads, bias, d);
                        for r in 0..rows {
                            for c in 0..d {
                                g[c] += gout[r * d + c];
                            }
                        }
                    }
                    if grad_needed(nodes, x) {
                        let g = Graph::accumulate(grads, x, rows * d);
                        for r in 0..rows {
                            let mut mean_gy = 0.0;
                            let mut mean_gyh = 0.0;
                            for c in 0..d {
                                let gy = gout[r * d + c] * gd[c];
                                mean_gy += gy;
                                mean_gyh += gy * xhat[r * d + c];
                            }
                            mean_gy /= d as f64;
                            mean_gyh /= d as f64;
                            for c in 0..d {
                                let gy = gout[r * d + c] * gd[c];
                                g[r * d + c] += (gy - mean_gy - xhat[r * d + c] * mean_gyh) * inv_std[r];
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Multi-head scaled dot-product attention over a single sequence.
    /// q, k, v: [n, d] with d divisible by `heads`; full bidirectional
    /// attention, scale 1/sqrt(d/heads).
    pub fn attention(&mut self, q: TensorId, k: TensorId, v: TensorId, heads: usize) -> Result<TensorId> {
        let sq = self.shape(q).to_vec();
        for &t in &[k, v] {
            if self.shape(t) != sq.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: sq,
                    rhs: self.shape(t).to_vec(),
                });
            }
        }
        let d = sq[1];
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Geometry {
                op: "attention",
                msg: format!("model dim {d} not divisible by {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, dh)?;
            let kh = self.slice_cols(k, h * dh, dh)?;
            let vh = self.slice_cols(v, h * dh, dh)?;
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scaled = self.scale(scores, scale);
            let probs = self.softmax(scaled, 1)?;
            outs.push(self.matmul(probs, vh)?);
        }
        self.concat_cols(&outs)
    }

    /// Mean over elements of the numerically stable BCE-with-logits:
    /// max(z,0) − z·y + ln(1 + exp(−|z|)). Targets carry no gradient and
    /// must be 0/1.
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: &[f64]) -> Result<TensorId> {
        self.bce_with_logits_weighted(logits, targets, 1.0)
    }

    /// BCE with a positive-class weight: mean over elements of
    /// w·y·softplus(−z) + (1−y)·softplus(z). `pos_weight` = 1 recovers the
    /// unweighted loss; larger values counter sparse-positive labels.
    pub fn bce_with_logits_weighted(
        &mut self,
        logits: TensorId,
        targets: &[f64],
        pos_weight: f64,
    ) -> Result<TensorId> {
        if !(pos_weight > 0.0) {
            return Err(TensorError::Geometry {
                op: "bce_with_logits",
                msg: format!("pos_weight must be positive, got {pos_weight}"),
            });
        }
        let n = self.numel(logits);
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::Geometry {
                op: "bce_with_logits",
                msg: "targets must be binary (0 or 1)".into(),
            });
        }
        let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        let zs = self.data(logits);
        let mut acc = 0.0;
        for (&z, &y) in zs.iter().zip(targets) {
            acc += pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z);
        }
        let loss = acc / n as f64;
        let rg = self.requires_grad(logits);
        let y: Vec<f64> = targets.to_vec();
        let out = self.push_node(vec![loss], vec![], rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |nodes, gout, grads| {
                    let zs = &nodes[logits.0].data;
                    let g = Graph::accumulate(grads, logits, zs.len());
                    let inv = gout[0] / zs.len() as f64;
                    for i in 0..zs.len() {
                        let s = stable_sigmoid(zs[i]);
                        // The unweighted form is kept as written (not the
                        // algebraically equal weighted formula at w = 1) so
                        // that pos_weight = 1 reproduces bit-identical runs.
                        g[i] += if pos_weight == 1.0 {
                            (s - y[i]) * inv
                        } else {
                            ((1.0 - y[i]) * s - pos_weight * y[i] * (1.0 - s)) * inv
                        };
                    }
                }),
            );
        }
        Ok(out)
    }
}
