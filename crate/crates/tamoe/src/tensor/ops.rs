//! Differentiable tensor operations and their backward rules.
//!
//! Every op validates shapes up front, computes the forward value into a
//! fresh buffer, and registers a closure that accumulates input gradients
//! from the output gradient. Reductions (`cross_entropy`, `mse`, `sum`)
//! produce shape-`[1]` scalars.

use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

// GELU tanh approximation constants.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn dims2(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{op}: expected rank-2 tensor, got shape {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn softmax_slice(src: &[f64], dst: &mut [f64]) {
    // Max-subtraction for stability.
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &v) in dst.iter_mut().zip(src) {
        let e = (v - max).exp();
        *d = e;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// dx = y .* (g - sum(g .* y)) for one softmax slice.
fn softmax_backward_slice(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for i in 0..y.len() {
        dx[i] += y[i] * (g[i] - dot);
    }
}

impl Tensor {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.accumulate_grad(g);
                b.accumulate_grad(g);
            }),
        ))
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.accumulate_grad(g);
                b.with_grad_mut(|gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= *y;
                    }
                });
            }),
        ))
    }

    /// Hadamard product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.with_grad_mut(|ga| {
                    let bd = b.data();
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                b.with_grad_mut(|gb| {
                    let ad = a.data();
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }),
        ))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.with_grad_mut(|ga| {
                    for i in 0..ga.len() {
                        ga[i] += c * g[i];
                    }
                });
            }),
        )
    }

    /// Multiplication by a learnable shape-`[1]` scalar (the sanctioned
    /// scalar broadcast).
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        if !s.is_scalar() {
            return Err(Error::Shape(format!(
                "scale_by: scale must be a scalar, got shape {:?}",
                s.shape()
            )));
        }
        let sv = s.item();
        let data = self.data().iter().map(|v| v * sv).collect();
        let (a, sc) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.with_grad_mut(|ga| {
                    for i in 0..ga.len() {
                        ga[i] += sv * g[i];
                    }
                });
                sc.with_grad_mut(|gs| {
                    let ad = a.data();
                    let mut acc = 0.0;
                    for i in 0..ad.len() {
                        acc += g[i] * ad[i];
                    }
                    gs[0] += acc;
                });
            }),
        ))
    }

    /// Division by a shape-`[1]` scalar.
    pub fn div_by(&self, s: &Tensor) -> Result<Tensor> {
        if !s.is_scalar() {
            return Err(Error::Shape(format!(
                "div_by: divisor must be a scalar, got shape {:?}",
                s.shape()
            )));
        }
        let sv = s.item();
        let data = self.data().iter().map(|v| v / sv).collect();
        let (a, sc) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.with_grad_mut(|ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / sv;
                    }
                });
                sc.with_grad_mut(|gs| {
                    let ad = a.data();
                    let mut acc = 0.0;
                    for i in 0..ad.len() {
                        acc -= g[i] * ad[i] / (sv * sv);
                    }
                    gs[0] += acc;
                });
            }),
        ))
    }

    /// Standard matrix product `[m,k] . [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner extents differ, lhs {:?} rhs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = self.data();
            let bd = other.data();
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (t, &av) in arow.iter().enumerate() {
                    let brow = &bd[t * n..(t + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                // dA += G . B^T
                a.with_grad_mut(|ga| {
                    let bd = b.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for t in 0..k {
                            let brow = &bd[t * n..(t + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            garow[t] += s;
                        }
                    }
                });
                // dB += A^T . G
                b.with_grad_mut(|gb| {
                    let ad = a.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &ad[i * k..(i + 1) * k];
                        for (t, &av) in arow.iter().enumerate() {
                            let gbrow = &mut gb[t * n..(t + 1) * n];
                            for j in 0..n {
                                gbrow[j] += av * grow[j];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// `A . B^T` without materializing the transpose: `[m,k] . [n,k] -> [m,n]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul_nt")?;
        let (n, k2) = dims2(other, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt: inner extents differ, lhs {:?} rhs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = self.data();
            let bd = other.data();
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for t in 0..k {
                        s += arow[t] * brow[t];
                    }
                    orow[j] = s;
                }
            }
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                // dA += G . B
                a.with_grad_mut(|ga| {
                    let bd = b.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for (j, &gv) in grow.iter().enumerate() {
                            let brow = &bd[j * k..(j + 1) * k];
                            for t in 0..k {
                                garow[t] += gv * brow[t];
                            }
                        }
                    }
                });
                // dB += G^T . A
                b.with_grad_mut(|gb| {
                    let ad = a.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &ad[i * k..(i + 1) * k];
                        for (j, &gv) in grow.iter().enumerate() {
                            let gbrow = &mut gb[j * k..(j + 1) * k];
                            for t in 0..k {
                                gbrow[t] += gv * arow[t];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Matrix transpose `[m,n] -> [n,m]`.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "transpose")?;
        let d = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        drop(d);
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.with_grad_mut(|ga| {
                    for i in 0..n {
                        for j in 0..m {
                            ga[j * n + i] += g[i * m + j];
                        }
                    }
                });
            }),
        ))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.accumulate_grad(g);
            }),
        ))
    }

    /// Adds a length-`d` bias vector to every row of an `[n,d]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, d) = dims2(self, "add_bias")?;
        if bias.shape() != [d] {
            return Err(Error::Shape(format!(
                "add_bias: matrix {:?} needs bias [{d}], got {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let bd = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % d])
            .collect();
        drop(bd);
        let (a, b) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.accumulate_grad(g);
                b.with_grad_mut(|gb| {
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
            }),
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.with_grad_mut(|ga| {
                    let ad = a.data();
                    for i in 0..ga.len() {
                        let x = ad[i];
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        ga[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                });
            }),
        )
    }

    /// Layer normalization over the last axis with learnable gain and bias
    /// (epsilon 1e-5). Pass unit gain and zero bias for the raw normalized
    /// values.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (n, d) = match self.shape() {
            [d] => (1usize, *d),
            [n, d] => (*n, *d),
            s => {
                return Err(Error::Shape(format!(
                    "layer_norm: expected rank 1 or 2, got {s:?}"
                )))
            }
        };
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?} needs gain/bias [{d}], got {:?}/{:?}",
                self.shape(),
                gain.shape(),
                bias.shape()
            )));
        }
        let xd = self.data();
        let gd = gain.data();
        let bd = bias.data();
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let xrow = &xd[i * d..(i + 1) * d];
            let mean = xrow.iter().sum::<f64>() / d as f64;
            let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let xh = (xrow[j] - mean) * r;
                xhat[i * d + j] = xh;
                out[i * d + j] = gd[j] * xh + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let (x, gn, bs) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                bs.with_grad_mut(|gb| {
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
                gn.with_grad_mut(|gg| {
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                x.with_grad_mut(|gx| {
                    let gd = gn.data();
                    for i in 0..n {
                        let xh = &xhat[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        // dxhat = g .* gain; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat.*xhat))
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = grow[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = grow[j] * gd[j];
                            gx[i * d + j] += rstd[i] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
            }),
        ))
    }

    /// Softmax along `axis` (0 for rank-1; 0 or 1 for rank-2), computed with
    /// max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let slices: Vec<(usize, usize, usize)> = match (shape.as_slice(), axis) {
            ([n], 0) => vec![(0, 1, *n)],
            ([r, c], 1) => (0..*r).map(|i| (i * c, 1, *c)).collect(),
            ([r, c], 0) => (0..*c).map(|j| (j, *c, *r)).collect(),
            (s, a) => {
                return Err(Error::Shape(format!(
                    "softmax: axis {a} invalid for shape {s:?}"
                )))
            }
        };
        let xd = self.data();
        let mut out = vec![0.0; self.numel()];
        let mut buf_src = Vec::new();
        let mut buf_dst = Vec::new();
        for &(start, stride, len) in &slices {
            buf_src.clear();
            buf_src.extend((0..len).map(|i| xd[start + i * stride]));
            buf_dst.resize(len, 0.0);
            softmax_slice(&buf_src, &mut buf_dst);
            for i in 0..len {
                out[start + i * stride] = buf_dst[i];
            }
        }
        drop(xd);
        let x = self.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                let yd = out.data();
                x.with_grad_mut(|gx| {
                    let mut ybuf = Vec::new();
                    let mut gbuf = Vec::new();
                    let mut dbuf = Vec::new();
                    for &(start, stride, len) in &slices {
                        ybuf.clear();
                        gbuf.clear();
                        ybuf.extend((0..len).map(|i| yd[start + i * stride]));
                        gbuf.extend((0..len).map(|i| g[start + i * stride]));
                        dbuf.clear();
                        dbuf.resize(len, 0.0);
                        softmax_backward_slice(&ybuf, &gbuf, &mut dbuf);
                        for i in 0..len {
                            gx[start + i * stride] += dbuf[i];
                        }
                    }
                });
            }),
        ))
    }

    /// Row-wise softmax over the causal prefix of a square score matrix:
    /// row `i` normalizes over columns `0..=i`, later columns are zero.
    pub fn causal_softmax(&self) -> Result<Tensor> {
        let (n, c) = dims2(self, "causal_softmax")?;
        if n != c {
            return Err(Error::Shape(format!(
                "causal_softmax: matrix must be square, got {:?}",
                self.shape()
            )));
        }
        let xd = self.data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &xd[i * n..i * n + i + 1];
            let dst = &mut out[i * n..i * n + i + 1];
            softmax_slice(row, dst);
        }
        drop(xd);
        let x = self.clone();
        Ok(Tensor::from_op(
            vec![n, n],
            out,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                let yd = out.data();
                x.with_grad_mut(|gx| {
                    for i in 0..n {
                        let y = &yd[i * n..i * n + i + 1];
                        let grow = &g[i * n..i * n + i + 1];
                        let dst = &mut gx[i * n..i * n + i + 1];
                        softmax_backward_slice(y, grow, dst);
                    }
                });
            }),
        ))
    }

    /// Mean negative log-softmax probability of the target class over masked
    /// rows. `targets[i]` indexes row `i`'s class; `mask[i] != 0` includes the
    /// row in the mean.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[u8]) -> Result<Tensor> {
        let (n, v) = dims2(self, "cross_entropy")?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} need {n} targets and mask entries, got {}/{}",
                self.shape(),
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::IndexOutOfRange(format!(
                "cross_entropy: target {t} outside vocabulary of {v}"
            )));
        }
        let m_count = mask.iter().filter(|&&m| m != 0).count();
        if m_count == 0 {
            return Err(Error::EmptyReduction(
                "cross_entropy: mask selects no positions".into(),
            ));
        }
        let xd = self.data();
        // Cache the per-row softmax for the backward rule.
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &xd[i * v..(i + 1) * v];
            softmax_slice(row, &mut probs[i * v..(i + 1) * v]);
            if mask[i] != 0 {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse: f64 = row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
                loss += lse - row[targets[i]];
            }
        }
        drop(xd);
        loss /= m_count as f64;
        let x = self.clone();
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present")[0];
                x.with_grad_mut(|gx| {
                    let scale = g / m_count as f64;
                    for i in 0..n {
                        if mask[i] == 0 {
                            continue;
                        }
                        let prow = &probs[i * v..(i + 1) * v];
                        let grow = &mut gx[i * v..(i + 1) * v];
                        for j in 0..v {
                            grow[j] += scale * prow[j];
                        }
                        grow[targets[i]] -= scale;
                    }
                });
            }),
        ))
    }

    /// Mean squared error over all elements; shapes must match.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        same_shape(self, target, "mse")?;
        let n = self.numel();
        let loss = self
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        let (p, t) = (self.clone(), target.clone());
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone(), target.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present")[0];
                let scale = 2.0 * g / n as f64;
                p.with_grad_mut(|gp| {
                    let pd = p.data();
                    let td = t.data();
                    for i in 0..n {
                        gp[i] += scale * (pd[i] - td[i]);
                    }
                });
                t.with_grad_mut(|gt| {
                    let pd = p.data();
                    let td = t.data();
                    for i in 0..n {
                        gt[i] -= scale * (pd[i] - td[i]);
                    }
                });
            }),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let a = self.clone();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present")[0];
                a.with_grad_mut(|ga| {
                    for v in ga.iter_mut() {
                        *v += g;
                    }
                });
            }),
        )
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row `i` of an `[n,d]` matrix as a `[1,d]` view copy.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (n, d) = dims2(self, "row")?;
        if i >= n {
            return Err(Error::IndexOutOfRange(format!(
                "row: index {i} outside {n} rows"
            )));
        }
        let data = self.data()[i * d..(i + 1) * d].to_vec();
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![1, d],
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.with_grad_mut(|ga| {
                    for j in 0..d {
                        ga[i * d + j] += g[j];
                    }
                });
            }),
        ))
    }

    /// Columns `start..start+len` of an `[n,d]` matrix.
    pub fn cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, d) = dims2(self, "cols")?;
        if start + len > d {
            return Err(Error::IndexOutOfRange(format!(
                "cols: {start}..{} outside width {d}",
                start + len
            )));
        }
        let xd = self.data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xd[i * d + start..i * d + start + len]);
        }
        drop(xd);
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![n, len],
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.with_grad_mut(|ga| {
                    for i in 0..n {
                        for j in 0..len {
                            ga[i * d + start + j] += g[i * len + j];
                        }
                    }
                });
            }),
        ))
    }

    /// Rows `table[idx[i]]` stacked into an `[idx.len(), d]` matrix.
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (n, d) = dims2(self, "gather_rows")?;
        if let Some(&i) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange(format!(
                "gather_rows: row {i} outside {n} rows"
            )));
        }
        let xd = self.data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        drop(xd);
        let a = self.clone();
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![idx.len(), d],
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.with_grad_mut(|ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            ga[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }),
        ))
    }

    /// Elements of a rank-1 tensor at `idx`, as a rank-1 tensor.
    pub fn gather_elems(&self, idx: &[usize]) -> Result<Tensor> {
        let e = match self.shape() {
            [e] => *e,
            s => {
                return Err(Error::Shape(format!(
                    "gather_elems: expected rank-1 tensor, got {s:?}"
                )))
            }
        };
        if let Some(&i) = idx.iter().find(|&&i| i >= e) {
            return Err(Error::IndexOutOfRange(format!(
                "gather_elems: index {i} outside length {e}"
            )));
        }
        let xd = self.data();
        let data: Vec<f64> = idx.iter().map(|&i| xd[i]).collect();
        drop(xd);
        let a = self.clone();
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![idx.len()],
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad_ref();
                let g = g.as_ref().expect("output grad present");
                a.with_grad_mut(|ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        ga[i] += g[r];
                    }
                });
            }),
        ))
    }
}

/// Stacks `[1,d]` (or `[d]`) rows into an `[n,d]` matrix.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::EmptyReduction("stack_rows: no rows".into()));
    }
    let d = rows[0].cols_len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.numel() != d || r.rows() != 1 {
            return Err(Error::Shape(format!(
                "stack_rows: expected row of width {d}, got shape {:?}",
                r.shape()
            )));
        }
        data.extend_from_slice(&r.data());
    }
    let parents: Vec<Tensor> = rows.to_vec();
    let captured = parents.clone();
    Ok(Tensor::from_op(
        vec![rows.len(), d],
        data,
        parents,
        Box::new(move |out| {
            let g = out.grad_ref();
            let g = g.as_ref().expect("output grad present");
            for (i, r) in captured.iter().enumerate() {
                r.accumulate_grad(&g[i * d..(i + 1) * d]);
            }
        }),
    ))
}

/// Concatenates `[n, w_i]` matrices along columns into `[n, sum(w_i)]`.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::EmptyReduction("concat_cols: no parts".into()));
    }
    let n = parts[0].rows();
    let widths: Vec<usize> = parts.iter().map(|p| p.cols_len()).collect();
    for p in parts {
        if p.rows() != n || p.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "concat_cols: all parts need {n} rows, got shape {:?}",
                p.shape()
            )));
        }
    }
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; n * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for i in 0..n {
            data[i * total + offset..i * total + offset + w]
                .copy_from_slice(&pd[i * w..(i + 1) * w]);
        }
        offset += w;
    }
    let parents: Vec<Tensor> = parts.to_vec();
    let captured = parents.clone();
    Ok(Tensor::from_op(
        vec![n, total],
        data,
        parents,
        Box::new(move |out| {
            let g = out.grad_ref();
            let g = g.as_ref().expect("output grad present");
            let mut offset = 0;
            for (p, &w) in captured.iter().zip(&widths) {
                p.with_grad_mut(|gp| {
                    for i in 0..n {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }),
    ))
}
