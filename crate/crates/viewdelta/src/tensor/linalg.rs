//! Matrix ops and sequence slicing/concatenation on 2-D tensors.

use super::{grad_needed, Graph, Result, TensorError, TensorId};

/// Row-major C = A·B for A [m,k], B [k,n]. Inner loop order is fixed (i,k,j)
/// so every output element is reduced in the same order each run.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

impl Graph {
    /// a: [m,k] × b: [k,n] → [m,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let data = self.round_vec(data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push_node(data, vec![m, n], rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |nodes, gout, grads| {
                    if grad_needed(nodes, a) {
                        // dA = G · Bᵀ
                        let bt = transpose_raw(&nodes[b.0].data, k, n);
                        let da = matmul_raw(gout, &bt, m, n, k);
                        let g = Graph::accumulate(grads, a, m * k);
                        for i in 0..m * k {
                            g[i] += da[i];
                        }
                    }
                    if grad_needed(nodes, b) {
                        // dB = Aᵀ · G
                        let at = transpose_raw(&nodes[a.0].data, m, k);
                        let db = matmul_raw(&at, gout, k, m, n);
                        let g = Graph::accumulate(grads, b, k * n);
                        for i in 0..k * n {
                            g[i] += db[i];
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "transpose", lhs: sa, rhs: vec![] });
        }
        let (r, c) = (sa[0], sa[1]);
        let data = transpose_raw(self.data(a), r, c);
        let rg = self.requires_grad(a);
        let out = self.push_node(data, vec![c, r], rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |_nodes, gout, grads| {
                    let gt = transpose_raw(gout, c, r);
                    let g = Graph::accumulate(grads, a, r * c);
                    for i in 0..r * c {
                        g[i] += gt[i];
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Rows [start, start+len) of a 2-D tensor.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[0] {
            return Err(TensorError::Geometry {
                op: "slice_rows",
                msg: format!("rows {}..{} of shape {:?}", start, start + len, sa),
            });
        }
        let d = sa[1];
        let data = self.data(a)[start * d..(start + len) * d].to_vec();
        let rg = self.requires_grad(a);
        let total = sa[0] * d;
        let out = self.push_node(data, vec![len, d], rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |_nodes, gout, grads| {
                    let g = Graph::accumulate(grads, a, total);
                    for i in 0..len * d {
                        g[start * d + i] += gout[i];
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[1] {
            return Err(TensorError::Geometry {
                op: "slice_cols",
                msg: format!("cols {}..{} of shape {:?}", start, start + len, sa),
            });
        }
        let (n, d) = (sa[0], sa[1]);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&self.data(a)[r * d + start..r * d + start + len]);
        }
        let rg = self.requires_grad(a);
        let out = self.push_node(data, vec![n, len], rg);
        if rg {
            self.push_record(
                out,
                Box::new(move |_nodes, gout, grads| {
                    let g = Graph::accumulate(grads, a, n * d);
                    for r in 0..n {
                        for c in 0..len {
                            g[r * d + start + c] += gout[r * len + c];
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Concatenate 2-D tensors along rows; all must share the column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let d = self.shape(parts[0])[1];
        let mut data = Vec::new();
        let mut rows = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let sp = self.shape(p).to_vec();
            if sp.len() != 2 || sp[1] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp,
                });
            }
            rows.push(sp[0]);
            rg |= self.requires_grad(p);
            data.extend_from_slice(self.data(p));
        }
        let total_rows: usize = rows.iter().sum();
        let out = self.push_node(data, vec![total_rows, d], rg);
        if rg {
            let parts: Vec<TensorId> = parts.to_vec();
            self.push_record(
                out,
                Box::new(move |nodes, gout, grads| {
                    let mut off = 0;
                    for (&p, &r) in parts.iter().zip(&rows) {
                        if grad_needed(nodes, p) {
                            let g = Graph::accumulate(grads, p, r * d);
                            for i in 0..r * d {
                                g[i] += gout[off + i];
                            }
                        }
                        off += r * d;
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Concatenate 2-D tensors along columns; all must share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let sp = self.shape(p).to_vec();
            if sp.len() != 2 || sp[0] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp,
                });
            }
            widths.push(sp[1]);
            rg |= self.requires_grad(p);
        }
        let d: usize = widths.iter().sum();
        let mut data = vec![0.0; n * d];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..n {
                data[r * d + off..r * d + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = self.push_node(data, vec![n, d], rg);
        if rg {
            let parts: Vec<TensorId> = parts.to_vec();
            self.push_record(
                out,
                Box::new(move |nodes, gout, grads| {
                    let mut off = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if grad_needed(nodes, p) {
                            let g = Graph::accumulate(grads, p, n * w);
                            for r in 0..n {
                                for c in 0..w {
                                    g[r * w + c] += gout[r * d + off + c];
                                }
                            }
                        }
                        off += w;
                    }
                }),
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::with_precision(Precision::F64);
        let i2 = g.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let y = g.matmul(i2, a).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::with_precision(Precision::F64);
        let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = g.constant(vec![5.0, 6.0], vec![2, 1]);
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.data(y), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 6], vec![2, 3]);
        let b = g.constant(vec![0.0; 8], vec![2, 4]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut g = Graph::with_precision(Precision::F64);
        let x = g.leaf((0..12).map(|v| v as f64).collect(), vec![3, 4], true);
        let a = g.slice_rows(x, 0, 1).unwrap();
        let b = g.slice_rows(x, 1, 2).unwrap();
        let y = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.data(y), g.data(x));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn col_slice_concat_grad() {
        let mut g = Graph::with_precision(Precision::F64);
        let x = g.leaf((0..6).map(|v| v as f64).collect(), vec![2, 3], true);
        let a = g.slice_cols(x, 0, 2).unwrap();
        let b = g.slice_cols(x, 2, 1).unwrap();
        let y = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.data(y), g.data(x));
        let yy = g.mul(y, y).unwrap();
        let s = g.sum(yy);
        g.backward(s).unwrap();
        let expect: Vec<f64> = (0..6).map(|v| 2.0 * v as f64).collect();
        assert_eq!(g.grad(x).unwrap(), expect.as_slice());
    }
}
