//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes the forward value eagerly, and
//! registers a closure that maps the output gradient to parent gradients.
//! Binary pointwise ops broadcast the right operand when its shape is a
//! suffix of the left operand's shape (row-major repetition).

use std::rc::Rc;

use rand::Rng;

use super::{normalize_axis, strides_of, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn suffix_broadcast_check(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if rhs.len() > lhs.len() || !lhs.ends_with(rhs) {
        return Err(Error::shape(op, lhs, rhs));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    fn pointwise_binary(
        &self,
        op: &'static str,
        rhs: &Tensor<S>,
        fwd: impl Fn(S, S) -> S,
        dlhs: impl Fn(S, S, S) -> S + 'static,
        drhs: impl Fn(S, S, S) -> S + 'static,
    ) -> Result<Tensor<S>> {
        suffix_broadcast_check(op, self.shape(), rhs.shape())?;
        let rn = rhs.numel();
        let a = self.data();
        let b = rhs.data();
        let mut out = Vec::with_capacity(a.len());
        for (i, &ai) in a.iter().enumerate() {
            out.push(fwd(ai, b[i % rn]));
        }
        let l = self.clone();
        let r = rhs.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            move |g| {
                let a = l.data();
                let b = r.data();
                if l.requires_grad() {
                    let gl: Vec<S> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| dlhs(gi, a[i], b[i % rn]))
                        .collect();
                    l.accumulate_grad(&gl);
                }
                if r.requires_grad() {
                    let mut gr = vec![S::zero(); rn];
                    for (i, &gi) in g.iter().enumerate() {
                        gr[i % rn] += drhs(gi, a[i], b[i % rn]);
                    }
                    r.accumulate_grad(&gr);
                }
            },
        ))
    }

    fn pointwise_unary(
        &self,
        fwd: impl Fn(S) -> S,
        dback: impl Fn(S, S) -> S + 'static,
    ) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&x| fwd(x)).collect();
        let p = self.clone();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], move |g| {
            if p.requires_grad() {
                let x = p.data();
                let gx: Vec<S> = g.iter().zip(x).map(|(&gi, &xi)| dback(gi, xi)).collect();
                p.accumulate_grad(&gx);
            }
        })
    }

    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.pointwise_binary("add", rhs, |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.pointwise_binary("sub", rhs, |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.pointwise_binary("mul", rhs, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    pub fn neg(&self) -> Tensor<S> {
        self.pointwise_unary(|x| -x, |g, _| -g)
    }

    pub fn scale(&self, factor: f64) -> Tensor<S> {
        let c = S::of(factor);
        self.pointwise_unary(move |x| x * c, move |g, _| g * c)
    }

    pub fn add_scalar(&self, value: f64) -> Tensor<S> {
        let c = S::of(value);
        self.pointwise_unary(move |x| x + c, |g, _| g)
    }

    /// Rectified linear unit; the subgradient at zero is zero.
    pub fn relu(&self) -> Tensor<S> {
        self.pointwise_unary(
            |x| if x > S::zero() { x } else { S::zero() },
            |g, x| if x > S::zero() { g } else { S::zero() },
        )
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&self) -> Tensor<S> {
        self.pointwise_unary(
            |x| x.abs(),
            |g, x| {
                if x > S::zero() {
                    g
                } else if x < S::zero() {
                    -g
                } else {
                    S::zero()
                }
            },
        )
    }

    /// Matrix product over the trailing two axes. Leading batch axes must
    /// match exactly, except that a rank-2 operand broadcasts across the
    /// other side's batch.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let ashape = self.shape();
        let bshape = rhs.shape();
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::shape("matmul", ashape, bshape));
        }
        let m = ashape[ashape.len() - 2];
        let k = ashape[ashape.len() - 1];
        let k2 = bshape[bshape.len() - 2];
        let n = bshape[bshape.len() - 1];
        if k != k2 {
            return Err(Error::shape("matmul", ashape, bshape));
        }
        let abatch = &ashape[..ashape.len() - 2];
        let bbatch = &bshape[..bshape.len() - 2];
        let (batch_shape, a_bcast, b_bcast) = if abatch == bbatch {
            (abatch.to_vec(), false, false)
        } else if abatch.is_empty() {
            (bbatch.to_vec(), true, false)
        } else if bbatch.is_empty() {
            (abatch.to_vec(), false, true)
        } else {
            return Err(Error::shape("matmul", ashape, bshape));
        };
        let batch: usize = batch_shape.iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for bi in 0..batch {
                let ao = if a_bcast { 0 } else { bi * m * k };
                let bo = if b_bcast { 0 } else { bi * k * n };
                mm_nn(
                    &a[ao..ao + m * k],
                    &b[bo..bo + k * n],
                    m,
                    k,
                    n,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut out_shape = batch_shape;
        out_shape.extend_from_slice(&[m, n]);
        let l = self.clone();
        let r = rhs.clone();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), rhs.clone()],
            move |g| {
                let a = l.data();
                let b = r.data();
                if l.requires_grad() {
                    // da = g @ b^T, summed over the batch when a broadcast.
                    let mut da = vec![S::zero(); a.len()];
                    for bi in 0..batch {
                        let ao = if a_bcast { 0 } else { bi * m * k };
                        let bo = if b_bcast { 0 } else { bi * k * n };
                        mm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b[bo..bo + k * n],
                            m,
                            n,
                            k,
                            &mut da[ao..ao + m * k],
                        );
                    }
                    l.accumulate_grad(&da);
                }
                if r.requires_grad() {
                    // db = a^T @ g, summed over the batch when b broadcast.
                    let mut db = vec![S::zero(); b.len()];
                    for bi in 0..batch {
                        let ao = if a_bcast { 0 } else { bi * m * k };
                        let bo = if b_bcast { 0 } else { bi * k * n };
                        mm_tn(
                            &a[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[bo..bo + k * n],
                        );
                    }
                    r.accumulate_grad(&db);
                }
            },
        ))
    }

    /// Softmax along one axis, stabilized by max subtraction.
    pub fn softmax(&self, axis: isize) -> Result<Tensor<S>> {
        let ax = normalize_axis("softmax", axis, self.rank())?;
        let shape = self.shape().to_vec();
        let extent = shape[ax];
        let inner: usize = shape[ax + 1..].iter().product();
        let outer: usize = shape[..ax].iter().product();
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        for o in 0..outer {
            let base = o * extent * inner;
            for i in 0..inner {
                let mut max = S::neg_infinity();
                for a in 0..extent {
                    max = max.max(x[base + a * inner + i]);
                }
                let mut sum = S::zero();
                for a in 0..extent {
                    let e = (x[base + a * inner + i] - max).exp();
                    out[base + a * inner + i] = e;
                    sum += e;
                }
                for a in 0..extent {
                    out[base + a * inner + i] = out[base + a * inner + i] / sum;
                }
            }
        }
        let p = self.clone();
        let y = Rc::new(out.clone());
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            move |g| {
                if !p.requires_grad() {
                    return;
                }
                // dx = y * (g - sum_axis(g * y))
                let y = y.as_slice();
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    let base = o * extent * inner;
                    for i in 0..inner {
                        let mut dot = S::zero();
                        for a in 0..extent {
                            let idx = base + a * inner + i;
                            dot += g[idx] * y[idx];
                        }
                        for a in 0..extent {
                            let idx = base + a * inner + i;
                            gx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                p.accumulate_grad(&gx);
            },
        ))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    /// Variance is the population variance; `eps` keeps the inverse standard
    /// deviation finite and must be positive.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        let shape = self.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::contract("layer_norm", "input must have rank >= 1"));
        }
        let f = *shape.last().unwrap();
        if gamma.shape() != [f] || beta.shape() != [f] {
            return Err(Error::shape("layer_norm", &shape, gamma.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm", "eps must be positive"));
        }
        let rows = self.numel() / f;
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let eps_s = S::of(eps);
        let inv_f = S::of(1.0 / f as f64);
        let mut out = vec![S::zero(); x.len()];
        let mut saved = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let row = &x[r * f..(r + 1) * f];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_f;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_f;
            let rstd = (var + eps_s).sqrt().recip();
            saved.push(mean);
            saved.push(rstd);
            for (c, &v) in row.iter().enumerate() {
                out[r * f + c] = (v - mean) * rstd * gm[c] + bt[c];
            }
        }
        let px = self.clone();
        let pg = gamma.clone();
        let pb = beta.clone();
        let saved = Rc::new(saved);
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let x = px.data();
                let gm = pg.data();
                let mut dgamma = vec![S::zero(); f];
                let mut dbeta = vec![S::zero(); f];
                let mut dx = vec![S::zero(); x.len()];
                for r in 0..rows {
                    let mean = saved[2 * r];
                    let rstd = saved[2 * r + 1];
                    let row = &x[r * f..(r + 1) * f];
                    let grow = &g[r * f..(r + 1) * f];
                    // dxhat plus the two row means needed for dx.
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for c in 0..f {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = grow[c] * gm[c];
                        dgamma[c] += grow[c] * xhat;
                        dbeta[c] += grow[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let m1 = sum_dxhat * inv_f;
                    let m2 = sum_dxhat_xhat * inv_f;
                    for c in 0..f {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = grow[c] * gm[c];
                        dx[r * f + c] = rstd * (dxhat - m1 - xhat * m2);
                    }
                }
                if px.requires_grad() {
                    px.accumulate_grad(&dx);
                }
                if pg.requires_grad() {
                    pg.accumulate_grad(&dgamma);
                }
                if pb.requires_grad() {
                    pb.accumulate_grad(&dbeta);
                }
            },
        ))
    }

    /// 2D cross-correlation. Input is `[B, Cin, H, W]`, kernel is
    /// `[Cout, Cin, KH, KW]`, bias is `[Cout]`. Zero padding, floor output
    /// size.
    pub fn conv2d(
        &self,
        kernel: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Tensor<S>> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape("conv2d", xs, ks));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if cin != kcin {
            return Err(Error::shape("conv2d", xs, ks));
        }
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        if sh == 0 || sw == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::contract(
                "conv2d",
                format!(
                    "kernel {}x{} exceeds padded input {}x{}",
                    kh,
                    kw,
                    h + 2 * ph,
                    w + 2 * pw
                ),
            ));
        }
        if let Some(bia) = bias {
            if bia.shape() != [cout] {
                return Err(Error::shape("conv2d", &[cout], bia.shape()));
            }
        }
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let x = self.data();
        let k = kernel.data();
        let mut out = vec![S::zero(); b * cout * oh * ow];
        for ib in 0..b {
            for co in 0..cout {
                let bias_v = bias.map(|t| t.data()[co]).unwrap_or_else(S::zero);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias_v;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x[((ib * cin + ci) * h + iy as usize) * w
                                        + ix as usize];
                                    let kv = k[((co * cin + ci) * kh + ky) * kw + kx];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((ib * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let px = self.clone();
        let pk = kernel.clone();
        let pb = bias.cloned();
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![b, cout, oh, ow],
            parents,
            move |g| {
                let x = px.data();
                let k = pk.data();
                let want_dx = px.requires_grad();
                let want_dk = pk.requires_grad();
                let mut dx = vec![S::zero(); x.len()];
                let mut dk = vec![S::zero(); k.len()];
                let mut dbias = vec![S::zero(); cout];
                for ib in 0..b {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[((ib * cout + co) * oh + oy) * ow + ox];
                                dbias[co] += go;
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * sh + ky) as isize - ph as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * sw + kx) as isize - pw as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = ((ib * cin + ci) * h + iy as usize) * w
                                                + ix as usize;
                                            let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                            if want_dx {
                                                dx[xi] += go * k[ki];
                                            }
                                            if want_dk {
                                                dk[ki] += go * x[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_dx {
                    px.accumulate_grad(&dx);
                }
                if want_dk {
                    pk.accumulate_grad(&dk);
                }
                if let Some(bt) = &pb {
                    if bt.requires_grad() {
                        bt.accumulate_grad(&dbias);
                    }
                }
            },
        ))
    }

    /// 1D cross-correlation with dilation, valid padding. Input is
    /// `[B, Cin, L]`, kernel is `[Cout, Cin, K]`.
    pub fn conv1d(
        &self,
        kernel: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        dilation: usize,
    ) -> Result<Tensor<S>> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 3 || ks.len() != 3 {
            return Err(Error::shape("conv1d", xs, ks));
        }
        let (b, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, kcin, kk) = (ks[0], ks[1], ks[2]);
        if cin != kcin {
            return Err(Error::shape("conv1d", xs, ks));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::contract("conv1d", "stride and dilation must be positive"));
        }
        let effective = dilation * (kk - 1) + 1;
        if l < effective {
            return Err(Error::contract(
                "conv1d",
                format!("dilated kernel extent {} exceeds input length {}", effective, l),
            ));
        }
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return Err(Error::shape("conv1d", &[cout], bt.shape()));
            }
        }
        let ol = (l - effective) / stride + 1;
        let x = self.data();
        let k = kernel.data();
        let mut out = vec![S::zero(); b * cout * ol];
        for ib in 0..b {
            for co in 0..cout {
                let bias_v = bias.map(|t| t.data()[co]).unwrap_or_else(S::zero);
                for op in 0..ol {
                    let mut acc = bias_v;
                    for ci in 0..cin {
                        for kt in 0..kk {
                            let it = op * stride + kt * dilation;
                            acc += x[(ib * cin + ci) * l + it] * k[(co * cin + ci) * kk + kt];
                        }
                    }
                    out[(ib * cout + co) * ol + op] = acc;
                }
            }
        }
        let px = self.clone();
        let pk = kernel.clone();
        let pb = bias.cloned();
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        Ok(Tensor::from_op(out, vec![b, cout, ol], parents, move |g| {
            let x = px.data();
            let k = pk.data();
            let want_dx = px.requires_grad();
            let want_dk = pk.requires_grad();
            let mut dx = vec![S::zero(); x.len()];
            let mut dk = vec![S::zero(); k.len()];
            let mut dbias = vec![S::zero(); cout];
            for ib in 0..b {
                for co in 0..cout {
                    for op in 0..ol {
                        let go = g[(ib * cout + co) * ol + op];
                        dbias[co] += go;
                        for ci in 0..cin {
                            for kt in 0..kk {
                                let it = op * stride + kt * dilation;
                                let xi = (ib * cin + ci) * l + it;
                                let ki = (co * cin + ci) * kk + kt;
                                if want_dx {
                                    dx[xi] += go * k[ki];
                                }
                                if want_dk {
                                    dk[ki] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
            if want_dx {
                px.accumulate_grad(&dx);
            }
            if want_dk {
                pk.accumulate_grad(&dk);
            }
            if let Some(bt) = &pb {
                if bt.requires_grad() {
                    bt.accumulate_grad(&dbias);
                }
            }
        }))
    }

    /// Contiguous slice of `len` positions starting at `start` along `axis`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Tensor<S>> {
        let ax = normalize_axis("narrow", axis, self.rank())?;
        let shape = self.shape().to_vec();
        let extent = shape[ax];
        if len == 0 || start + len > extent {
            return Err(Error::contract(
                "narrow",
                format!(
                    "range {}..{} out of bounds for axis extent {}",
                    start,
                    start + len,
                    extent
                ),
            ));
        }
        let inner: usize = shape[ax + 1..].iter().product();
        let outer: usize = shape[..ax].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[ax] = len;
        let p = self.clone();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            move |g| {
                if !p.requires_grad() {
                    return;
                }
                let mut dx = vec![S::zero(); p.numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * extent + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                p.accumulate_grad(&dx);
            },
        ))
    }

    /// Same elements under a new shape; the buffer is shared, not copied.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        let p = self.clone();
        Ok(self.view_of(shape.to_vec(), vec![self.clone()], move |g| {
            if p.requires_grad() {
                p.accumulate_grad(g);
            }
        }))
    }

    /// Inserts a unit axis at `axis` (may equal rank to append).
    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor<S>> {
        if axis > self.rank() {
            return Err(Error::contract(
                "unsqueeze",
                format!("axis {} out of range for rank {}", axis, self.rank()),
            ));
        }
        let mut shape = self.shape().to_vec();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    /// Reorders axes; `axes` must be a permutation of `0..rank`. The result
    /// is materialized in row-major order.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let rank = self.rank();
        if axes.len() != rank {
            return Err(Error::contract(
                "permute",
                format!("expected {} axes, got {}", rank, axes.len()),
            ));
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(Error::contract(
                    "permute",
                    format!("{:?} is not a permutation of 0..{}", axes, rank),
                ));
            }
            seen[a] = true;
        }
        let in_shape = self.shape().to_vec();
        let in_strides = strides_of(&in_shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides_for_out: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        for_each_permuted(&out_shape, &in_strides_for_out, |out_flat, in_flat| {
            out[out_flat] = x[in_flat];
        });
        let p = self.clone();
        let out_shape_c = out_shape.clone();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            move |g| {
                if !p.requires_grad() {
                    return;
                }
                let mut dx = vec![S::zero(); p.numel()];
                for_each_permuted(&out_shape_c, &in_strides_for_out, |out_flat, in_flat| {
                    dx[in_flat] += g[out_flat];
                });
                p.accumulate_grad(&dx);
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: isize, b: isize) -> Result<Tensor<S>> {
        let ax = normalize_axis("transpose", a, self.rank())?;
        let bx = normalize_axis("transpose", b, self.rank())?;
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        axes.swap(ax, bx);
        self.permute(&axes)
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let mut s = S::zero();
        for &v in self.data() {
            s += v;
        }
        let p = self.clone();
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], move |g| {
            if p.requires_grad() {
                p.accumulate_grad(&vec![g[0]; p.numel()]);
            }
        })
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = self.numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sums along one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: isize) -> Result<Tensor<S>> {
        let ax = normalize_axis("sum_axis", axis, self.rank())?;
        let shape = self.shape().to_vec();
        let extent = shape[ax];
        let inner: usize = shape[ax + 1..].iter().product();
        let outer: usize = shape[..ax].iter().product();
        let x = self.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(ax);
        let p = self.clone();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            move |g| {
                if !p.requires_grad() {
                    return;
                }
                let mut dx = vec![S::zero(); p.numel()];
                for o in 0..outer {
                    for a in 0..extent {
                        let base = (o * extent + a) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i];
                        }
                    }
                }
                p.accumulate_grad(&dx);
            },
        ))
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: isize) -> Result<Tensor<S>> {
        let ax = normalize_axis("mean_axis", axis, self.rank())?;
        let extent = self.shape()[ax].max(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / extent as f64))
    }

    /// Inverted dropout. In training, each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)` so the
    /// expectation is unchanged. In eval it is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(
                "dropout",
                format!("rate {} outside [0, 1)", rate),
            ));
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - rate;
        let scale = S::of(1.0 / keep);
        let x = self.data();
        let mut mask = Vec::with_capacity(x.len());
        for _ in 0..x.len() {
            if rng.random::<f64>() < keep {
                mask.push(scale);
            } else {
                mask.push(S::zero());
            }
        }
        let mask = Rc::new(mask);
        let out: Vec<S> = x.iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
        let p = self.clone();
        let mask_b = Rc::clone(&mask);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g| {
                if !p.requires_grad() {
                    return;
                }
                let gx: Vec<S> = g.iter().zip(mask_b.iter()).map(|(&gi, &m)| gi * m).collect();
                p.accumulate_grad(&gx);
            },
        ))
    }
}

/// Concatenates tensors along `axis`. All other axes must agree.
pub fn concat<S: Scalar>(tensors: &[&Tensor<S>], axis: isize) -> Result<Tensor<S>> {
    if tensors.is_empty() {
        return Err(Error::contract("concat", "needs at least one tensor"));
    }
    let rank = tensors[0].rank();
    let ax = normalize_axis("concat", axis, rank)?;
    let mut out_shape = tensors[0].shape().to_vec();
    let mut total = 0usize;
    for t in tensors {
        if t.rank() != rank {
            return Err(Error::shape("concat", tensors[0].shape(), t.shape()));
        }
        for (d, (&a, &b)) in out_shape.iter().zip(t.shape()).enumerate() {
            if d != ax && a != b {
                return Err(Error::shape("concat", tensors[0].shape(), t.shape()));
            }
        }
        total += t.shape()[ax];
    }
    out_shape[ax] = total;
    let inner: usize = out_shape[ax + 1..].iter().product();
    let outer: usize = out_shape[..ax].iter().product();
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    for o in 0..outer {
        for t in tensors {
            let e = t.shape()[ax];
            let block = e * inner;
            out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    let parents: Vec<Tensor<S>> = tensors.iter().map(|t| (*t).clone()).collect();
    let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[ax]).collect();
    let parents_b = parents.clone();
    Ok(Tensor::from_op(out, out_shape, parents, move |g| {
        let total_block = total * inner;
        let mut offset = 0usize;
        for (t, &e) in parents_b.iter().zip(&extents) {
            let block = e * inner;
            if t.requires_grad() {
                let mut gt = Vec::with_capacity(outer * block);
                for o in 0..outer {
                    let base = o * total_block + offset;
                    gt.extend_from_slice(&g[base..base + block]);
                }
                t.accumulate_grad(&gt);
            }
            offset += block;
        }
    }))
}

fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// out[m, n2] += a[m, k] @ b[n2, k]^T
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n2: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n2 {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n2 + j] += s;
        }
    }
}

/// out[k, n] += a[m, k]^T @ g[m, n]
fn mm_tn<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for p in 0..m {
        let grow = &g[p * n..(p + 1) * n];
        for i in 0..k {
            let api = a[p * k + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += api * grow[j];
            }
        }
    }
}

/// Walks output positions in row-major order together with the matching
/// input position under an axis permutation.
fn for_each_permuted(
    out_shape: &[usize],
    in_strides_for_out: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut counters = vec![0usize; rank];
    let mut in_flat = 0usize;
    for out_flat in 0..numel {
        f(out_flat, in_flat);
        for d in (0..rank).rev() {
            counters[d] += 1;
            in_flat += in_strides_for_out[d];
            if counters[d] < out_shape[d] {
                break;
            }
            in_flat -= counters[d] * in_strides_for_out[d];
            counters[d] = 0;
        }
    }
}
