//! Differentiable operations, implemented as methods on [`Graph`].

use super::kernels;
use super::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngStream;

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Dim(format!("{what} must be 2-d, got shape {s:?}")));
    }
    Ok((s[0], s[1]))
}

impl Graph {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Dim(format!(
                "add: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(a.shape(), data, false);
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.push(a.requires_grad() || b.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                store.accumulate(&ac, &g);
                store.accumulate(&bc, &g);
            }
        });
        Ok(out)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Dim(format!(
                "mul: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(a.shape(), data, false);
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.push(a.requires_grad() || b.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                let da: Vec<f32> = g.iter().zip(bc.data().iter()).map(|(gi, bi)| gi * bi).collect();
                store.accumulate(&ac, &da);
                let db: Vec<f32> = g.iter().zip(ac.data().iter()).map(|(gi, ai)| gi * ai).collect();
                store.accumulate(&bc, &db);
            }
        });
        Ok(out)
    }

    /// Multiply every element by a scalar constant.
    pub fn scale(&mut self, a: &Tensor, c: f32) -> Tensor {
        let data = a.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_parts(a.shape(), data, false);
        let (ac, oc) = (a.clone(), out.clone());
        self.push(a.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                let da: Vec<f32> = g.iter().map(|gi| gi * c).collect();
                store.accumulate(&ac, &da);
            }
        });
        out
    }

    /// Matrix product C[m,n] = A[m,k] B[k,n].
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(a, "matmul lhs")?;
        let (kb, n) = dims2(b, "matmul rhs")?;
        if k != kb {
            return Err(Error::Dim(format!(
                "matmul inner extents differ: [{m}x{k}] vs [{kb}x{n}]"
            )));
        }
        let data = kernels::mm_nn(&a.data(), &b.data(), m, k, n);
        let out = Tensor::from_parts(vec![m, n], data, false);
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.push(a.requires_grad() || b.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                // dA = dC B^T, dB = A^T dC
                let da = kernels::mm_nt(&g, &bc.data(), m, n, k);
                store.accumulate(&ac, &da);
                let db = kernels::mm_tn(&ac.data(), &g, m, k, n);
                store.accumulate(&bc, &db);
            }
        });
        Ok(out)
    }

    /// C[m,n] = A[m,k] B[n,k]^T. This is the x W^T shape used by linear
    /// layers and by attention score computation.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(a, "matmul_nt lhs")?;
        let (n, kb) = dims2(b, "matmul_nt rhs")?;
        if k != kb {
            return Err(Error::Dim(format!(
                "matmul_nt inner extents differ: [{m}x{k}] vs [{n}x{kb}]^T"
            )));
        }
        let data = kernels::mm_nt(&a.data(), &b.data(), m, k, n);
        let out = Tensor::from_parts(vec![m, n], data, false);
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.push(a.requires_grad() || b.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                // C = A B^T: dA = dC B, dB = dC^T A
                let da = kernels::mm_nn(&g, &bc.data(), m, n, k);
                store.accumulate(&ac, &da);
                let db = kernels::mm_tn(&g, &ac.data(), m, n, k);
                store.accumulate(&bc, &db);
            }
        });
        Ok(out)
    }

    /// y = x W^T + b with weights stored [out, in].
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(bias) => self.add_bias(&y, bias),
            None => Ok(y),
        }
    }

    /// Add a 1-d bias to every row of a 2-d tensor.
    pub fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2(x, "add_bias input")?;
        if b.shape() != vec![n] {
            return Err(Error::Dim(format!(
                "add_bias: bias shape {:?} does not match row width {n}",
                b.shape()
            )));
        }
        let bd = b.to_vec();
        let data = {
            let xd = x.data();
            let mut out = Vec::with_capacity(m * n);
            for row in xd.chunks(n) {
                for (v, bv) in row.iter().zip(&bd) {
                    out.push(v + bv);
                }
            }
            out
        };
        let out = Tensor::from_parts(vec![m, n], data, false);
        let (xc, bc, oc) = (x.clone(), b.clone(), out.clone());
        self.push(x.requires_grad() || b.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                store.accumulate(&xc, &g);
                let mut db = vec![0.0f32; n];
                for row in g.chunks(n) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                store.accumulate(&bc, &db);
            }
        });
        Ok(out)
    }

    /// Add a [t, n] tensor to an [m, n] tensor whose rows are t-periodic
    /// (m must be a multiple of t). Used for positional embeddings over a
    /// batch of token blocks.
    pub fn add_tiled(&mut self, x: &Tensor, tile: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2(x, "add_tiled input")?;
        let (t, nt) = dims2(tile, "add_tiled tile")?;
        if nt != n || m % t != 0 {
            return Err(Error::Dim(format!(
                "add_tiled: tile [{t}x{nt}] does not tile [{m}x{n}]"
            )));
        }
        let td = tile.to_vec();
        let data = {
            let xd = x.data();
            let mut out = Vec::with_capacity(m * n);
            for (i, row) in xd.chunks(n).enumerate() {
                let trow = &td[(i % t) * n..(i % t + 1) * n];
                for (v, tv) in row.iter().zip(trow) {
                    out.push(v + tv);
                }
            }
            out
        };
        let out = Tensor::from_parts(vec![m, n], data, false);
        let (xc, tc, oc) = (x.clone(), tile.clone(), out.clone());
        self.push(x.requires_grad() || tile.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                store.accumulate(&xc, &g);
                let mut dt = vec![0.0f32; t * n];
                for (i, row) in g.chunks(n).enumerate() {
                    let drow = &mut dt[(i % t) * n..(i % t + 1) * n];
                    for (d, gv) in drow.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                store.accumulate(&tc, &dt);
            }
        });
        Ok(out)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let total: f32 = a.data().iter().sum();
        let out = Tensor::from_parts(vec![1], vec![total], false);
        let (ac, oc) = (a.clone(), out.clone());
        let numel = a.numel();
        self.push(a.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                let da = vec![g[0]; numel];
                store.accumulate(&ac, &da);
            }
        });
        out
    }

    /// Softmax along `axis`, shifted by the per-slice maximum.
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::Dim(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = x.to_vec();
        for o in 0..outer {
            for s in 0..stride {
                let base = o * len * stride + s;
                let mut maxv = f32::NEG_INFINITY;
                for l in 0..len {
                    maxv = maxv.max(data[base + l * stride]);
                }
                let mut total = 0.0f32;
                for l in 0..len {
                    let e = libm::expf(data[base + l * stride] - maxv);
                    data[base + l * stride] = e;
                    total += e;
                }
                for l in 0..len {
                    data[base + l * stride] /= total;
                }
            }
        }
        let out = Tensor::from_parts(shape, data, false);
        let (xc, oc) = (x.clone(), out.clone());
        self.push(x.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                let y = oc.data();
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for s in 0..stride {
                        let base = o * len * stride + s;
                        let mut dot = 0.0f32;
                        for l in 0..len {
                            let i = base + l * stride;
                            dot += y[i] * g[i];
                        }
                        for l in 0..len {
                            let i = base + l * stride;
                            dx[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                store.accumulate(&xc, &dx);
            }
        });
        Ok(out)
    }

    /// Layer normalization over the last axis, followed by an affine map.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f32,
    ) -> Result<Tensor> {
        let shape = x.shape();
        let n = *shape.last().ok_or_else(|| Error::Dim("layer_norm on 0-d tensor".into()))?;
        if gamma.shape() != vec![n] || beta.shape() != vec![n] {
            return Err(Error::Dim(format!(
                "layer_norm: gamma {:?} / beta {:?} must both be [{n}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let rows = x.numel() / n;
        let gd = gamma.to_vec();
        let bd = beta.to_vec();
        let mut xhat = vec![0.0f32; x.numel()];
        let mut inv_std = vec![0.0f32; rows];
        let data = {
            let xd = x.data();
            let mut out = vec![0.0f32; x.numel()];
            for r in 0..rows {
                let row = &xd[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f32>() / n as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[r] = istd;
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * istd;
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * gd[j] + bd[j];
                }
            }
            out
        };
        let out = Tensor::from_parts(shape, data, false);
        let (xc, gc, bc, oc) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        let requires = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.push(requires, &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                let mut dx = vec![0.0f32; rows * n];
                let mut dgamma = vec![0.0f32; n];
                let mut dbeta = vec![0.0f32; n];
                for r in 0..rows {
                    let grow = &g[r * n..(r + 1) * n];
                    let hrow = &xhat[r * n..(r + 1) * n];
                    let mut mean_gg = 0.0f32;
                    let mut mean_ggh = 0.0f32;
                    for j in 0..n {
                        let gg = grow[j] * gd[j];
                        mean_gg += gg;
                        mean_ggh += gg * hrow[j];
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                    mean_gg /= n as f32;
                    mean_ggh /= n as f32;
                    for j in 0..n {
                        let gg = grow[j] * gd[j];
                        dx[r * n + j] = (gg - mean_gg - hrow[j] * mean_ggh) * inv_std[r];
                    }
                }
                store.accumulate(&xc, &dx);
                store.accumulate(&gc, &dgamma);
                store.accumulate(&bc, &dbeta);
            }
        });
        Ok(out)
    }

    /// Exact-erf GELU: x * Phi(x).
    pub fn gelu(&mut self, x: &Tensor) -> Tensor {
        let data: Vec<f32> = x.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::from_parts(x.shape(), data, false);
        let (xc, oc) = (x.clone(), out.clone());
        self.push(x.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                let dx: Vec<f32> = {
                    let xd = xc.data();
                    g.iter()
                        .zip(xd.iter())
                        .map(|(gi, &v)| gi * gelu_deriv_scalar(v))
                        .collect()
                };
                store.accumulate(&xc, &dx);
            }
        });
        out
    }

    /// Inverted dropout: in training, each element survives with probability
    /// 1-p and survivors are scaled by 1/(1-p); in eval the op is the
    /// identity. Drawing from `stream` marks the graph stochastic.
    pub fn dropout(
        &mut self,
        x: &Tensor,
        p: f32,
        stream: &mut RngStream,
        training: bool,
    ) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0,1]")));
        }
        if !training || p == 0.0 {
            return Ok(x.clone());
        }
        self.mark_stochastic();
        let pf = p as f64;
        let keep_scale = if p < 1.0 { 1.0 / (1.0 - p) } else { 0.0 };
        let mask: Vec<f32> = (0..x.numel())
            .map(|_| if stream.next_f64() < pf { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f32> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(x.shape(), data, false);
        let (xc, oc) = (x.clone(), out.clone());
        self.push(x.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                let dx: Vec<f32> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
                store.accumulate(&xc, &dx);
            }
        });
        Ok(out)
    }

    /// Contiguous sub-block of a 2-d tensor.
    pub fn block_slice(
        &mut self,
        x: &Tensor,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<Tensor> {
        let (m, n) = dims2(x, "block_slice input")?;
        if row0 + rows > m || col0 + cols > n || rows == 0 || cols == 0 {
            return Err(Error::Dim(format!(
                "block_slice [{row0}+{rows}, {col0}+{cols}] outside [{m}x{n}]"
            )));
        }
        let data = {
            let xd = x.data();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let base = (row0 + r) * n + col0;
                out.extend_from_slice(&xd[base..base + cols]);
            }
            out
        };
        let out = Tensor::from_parts(vec![rows, cols], data, false);
        let (xc, oc) = (x.clone(), out.clone());
        self.push(x.requires_grad(), &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                let mut dx = vec![0.0f32; m * n];
                for r in 0..rows {
                    let base = (row0 + r) * n + col0;
                    dx[base..base + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                }
                store.accumulate(&xc, &dx);
            }
        });
        Ok(out)
    }

    /// Stack 2-d tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let (_, n) = dims2(parts[0], "concat_rows part")?;
        let mut total_rows = 0;
        for p in parts {
            let (r, c) = dims2(p, "concat_rows part")?;
            if c != n {
                return Err(Error::Dim(format!(
                    "concat_rows: column counts differ ({c} vs {n})"
                )));
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * n);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let out = Tensor::from_parts(vec![total_rows, n], data, false);
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let requires = owned.iter().any(Tensor::requires_grad);
        let oc = out.clone();
        self.push(requires, &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                let mut offset = 0;
                for p in &owned {
                    let len = p.numel();
                    store.accumulate(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
        });
        Ok(out)
    }

    /// Stack 2-d tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let (m, _) = dims2(parts[0], "concat_cols part")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_cols = 0;
        for p in parts {
            let (r, c) = dims2(p, "concat_cols part")?;
            if r != m {
                return Err(Error::Dim(format!(
                    "concat_cols: row counts differ ({r} vs {m})"
                )));
            }
            widths.push(c);
            total_cols += c;
        }
        let mut data = Vec::with_capacity(m * total_cols);
        for r in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                let pd = p.data();
                data.extend_from_slice(&pd[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![m, total_cols], data, false);
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let requires = owned.iter().any(Tensor::requires_grad);
        let oc = out.clone();
        let widths_c = widths.clone();
        self.push(requires, &out, move |store| {
            if let Some(g) = store.grad_of(&oc).map(<[f32]>::to_vec) {
                let mut col0 = 0;
                for (p, &w) in owned.iter().zip(&widths_c) {
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        let base = r * total_cols + col0;
                        dp.extend_from_slice(&g[base..base + w]);
                    }
                    store.accumulate(p, &dp);
                    col0 += w;
                }
            }
        });
        Ok(out)
    }
}

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    let phi = 0.5 * (1.0 + libm::erf(x as f64 / std::f64::consts::SQRT_2));
    (x as f64 * phi) as f32
}

pub(crate) fn gelu_deriv_scalar(x: f32) -> f32 {
    let xf = x as f64;
    let phi = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    let pdf = libm::exp(-0.5 * xf * xf) / (2.0 * std::f64::consts::PI).sqrt();
    (phi + xf * pdf) as f32
}
