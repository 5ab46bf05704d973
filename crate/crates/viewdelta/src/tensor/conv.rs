//! 2-D convolution, transposed convolution and bilinear upsampling.
//!
//! Layouts: activations [c, h, w], conv kernels [c_out, c_in, kh, kw].
//! `conv_transpose2d` is the exact adjoint of `conv2d` with the same kernel,
//! so it maps [c_out, h, w] back to [c_in, h', w'].

use super::{grad_needed, Graph, Result, TensorError, TensorId};

fn conv_out_extent(inp: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let num = inp + 2 * pad;
    if num < k || (num - k) % stride != 0 {
        return None;
    }
    Some((num - k) / stride + 1)
}

impl Graph {
    /// Cross-correlation. x: [c_in,h,w], kernel: [c_out,c_in,kh,kw],
    /// bias: optional [c_out].
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sk });
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let oh = conv_out_extent(h, kh, stride, pad).ok_or_else(|| TensorError::Geometry {
            op: "conv2d",
            msg: format!("input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}: non-integral output extent"),
        })?;
        let ow = conv_out_extent(w, kw, stride, pad).ok_or_else(|| TensorError::Geometry {
            op: "conv2d",
            msg: format!("input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}: non-integral output extent"),
        })?;
        let xd = self.data(x);
        let kd = self.data(kernel);
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[ci * h * w + iy as usize * w + ix as usize]
                                    * kd[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[co * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        let out = self.round_vec(out);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rg_core = self.requires_grad(x) || self.requires_grad(kernel);
        let conv_out = self.push_node(out, vec![cout, oh, ow], rg_core);
        if rg_core {
            self.push_record(
                conv_out,
                Box::new(move |nodes, gout, grads| {
                    let xd = &nodes[x.0].data;
                    let kd = &nodes[kernel.0].data;
                    let want_x = grad_needed(nodes, x);
                    let want_k = grad_needed(nodes, kernel);
                    let mut dx = vec![0.0; cin * h * w];
                    let mut dk = vec![0.0; cout * cin * kh * kw];
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gout[co * oh * ow + oy * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = ci * h * w + iy as usize * w + ix as usize;
                                            let kidx = ((co * cin + ci) * kh + ky) * kw + kx;
                                            if want_x {
                                                dx[xi] += g * kd[kidx];
                                            }
                                            if want_k {
                                                dk[kidx] += g * xd[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if want_x {
                        let gx = Graph::accumulate(grads, x, cin * h * w);
                        for i in 0..dx.len() {
                            gx[i] += dx[i];
                        }
                    }
                    if want_k {
                        let gk = Graph::accumulate(grads, kernel, dk.len());
                        for i in 0..dk.len() {
                            gk[i] += dk[i];
                        }
                    }
                }),
            );
        }
        match bias {
            Some(b) => self.add_bias_chan(conv_out, b),
            None => Ok(conv_out),
        }
    }

    /// Adjoint of `conv2d` with the same kernel layout [c_out,c_in,kh,kw]:
    /// x: [c_out,h,w] → [c_in, (h−1)·s − 2p + kh, (w−1)·s − 2p + kw].
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[0] {
            return Err(TensorError::ShapeMismatch { op: "conv_transpose2d", lhs: sx, rhs: sk });
        }
        let (cout, h, w) = (sx[0], sx[1], sx[2]);
        let (cin, kh, kw) = (sk[1], sk[2], sk[3]);
        let oh_full = (h - 1) * stride + kh;
        let ow_full = (w - 1) * stride + kw;
        if oh_full < 2 * pad + 1 || ow_full < 2 * pad + 1 {
            return Err(TensorError::Geometry {
                op: "conv_transpose2d",
                msg: format!("padding {pad} too large for output {oh_full}x{ow_full}"),
            });
        }
        let (oh, ow) = (oh_full - 2 * pad, ow_full - 2 * pad);
        let xd = self.data(x);
        let kd = self.data(kernel);
        let mut out = vec![0.0; cin * oh * ow];
        for co in 0..cout {
            for sy in 0..h {
                for sxx in 0..w {
                    let v = xd[co * h * w + sy * w + sxx];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let oy = (sy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ox = (sxx * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[ci * oh * ow + oy as usize * ow + ox as usize]
                                    += v * kd[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
        let out = self.round_vec(out);
        if let Some(b) = bias {
            if self.shape(b) != [cin] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose2d bias",
                    lhs: vec![cin],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rg_core = self.requires_grad(x) || self.requires_grad(kernel);
        let conv_out = self.push_node(out, vec![cin, oh, ow], rg_core);
        if rg_core {
            self.push_record(
                conv_out,
                Box::new(move |nodes, gout, grads| {
                    let xd = &nodes[x.0].data;
                    let kd = &nodes[kernel.0].data;
                    let want_x = grad_needed(nodes, x);
                    let want_k = grad_needed(nodes, kernel);
                    let mut dx = vec![0.0; cout * h * w];
                    let mut dk = vec![0.0; cout * cin * kh * kw];
                    for co in 0..cout {
                        for sy in 0..h {
                            for sxx in 0..w {
                                let xi = co * h * w + sy * w + sxx;
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let oy = (sy * stride + ky) as isize - pad as isize;
                                        if oy < 0 || oy >= oh as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ox = (sxx * stride + kx) as isize - pad as isize;
                                            if ox < 0 || ox >= ow as isize {
                                                continue;
                                            }
                                            let g = gout[ci * oh * ow + oy as usize * ow + ox as usize];
                                            let kidx = ((co * cin + ci) * kh + ky) * kw + kx;
                                            if want_x {
                                                dx[xi] += g * kd[kidx];
                                            }
                                            if want_k {
                                                dk[kidx] += g * xd[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if want_x {
                        let gx = Graph::accumulate(grads, x, dx.len());
                        for i in 0..dx.len() {
                            gx[i] += dx[i];
                        }
                    }
                    if want_k {
                        let gk = Graph::accumulate(grads, kernel, dk.len());
                        for i in 0..dk.len() {
                            gk[i] += dk[i];
                        }
                    }
                }),
            );
        }
        match bias {
            Some(b) => self.add_bias_chan(conv_out, b),
            None => Ok(conv_out),
        }
    }

    /// Bilinear upsampling by an integer factor, align-corners=false:
    /// source coordinate = (i + 0.5)/f − 0.5, clamped to the input extent.
    pub fn bilinear_upsample(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "bilinear_upsample", lhs: sx, rhs: vec![] });
        }
        if factor < 1 {
            return Err(TensorError::Geometry {
                op: "bilinear_upsample",
                msg: "factor must be >= 1".into(),
            });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (oh, ow) = (h * factor, w * factor);
        // taps[(o, extent)] -> (i0, i1, w1)
        let taps = |o: usize, f: usize, extent: usize| -> (usize, usize, f64) {
            let src = (o as f64 + 0.5) / f as f64 - 0.5;
            let src = src.clamp(0.0, (extent - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, src - i0 as f64)
        };
        let xd = self.data(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1, wy) = taps(oy, factor, h);
                for ox in 0..ow {
                    let (x0, x1, wx) = taps(ox, factor, w);
                    let p = ch * h * w;
                    out[ch * oh * ow + oy * ow + ox] = (1.0 - wy) * (1.0 - wx) * xd[p + y0 * w + x0]
                        + (1.0 - wy) * wx * xd[p + y0 * w + x1]
                        + wy * (1.0 - wx) * xd[p + y1 * w + x0]
                        + wy * wx * xd[p + y1 * w + x1];
                }
            }
        }
        let out = self.round_vec(out);
        let rg = self.requires_grad(x);
        let y = self.push_node(out, vec![c, oh, ow], rg);
        if rg {
            self.push_record(
                y,
                Box::new(move |_nodes, gout, grads| {
                    let g = Graph::accumulate(grads, x, c * h * w);
                    let taps = |o: usize, f: usize, extent: usize| -> (usize, usize, f64) {
                        let src = (o as f64 + 0.5) / f as f64 - 0.5;
                        let src = src.clamp(0.0, (extent - 1) as f64);
                        let i0 = src.floor() as usize;
                        let i1 = (i0 + 1).min(extent - 1);
                        (i0, i1, src - i0 as f64)
                    };
                    for ch in 0..c {
                        for oy in 0..oh {
                            let (y0, y1, wy) = taps(oy, factor, h);
                            for ox in 0..ow {
                                let (x0, x1, wx) = taps(ox, factor, w);
                                let go = gout[ch * oh * ow + oy * ow + ox];
                                let p = ch * h * w;
                                g[p + y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * go;
                                g[p + y0 * w + x1] += (1.0 - wy) * wx * go;
                                g[p + y1 * w + x0] += wy * (1.0 - wx) * go;
                                g[p + y1 * w + x1] += wy * wx * go;
                            }
                        }
                    }
                }),
            );
        }
        Ok(y)
    }
}
