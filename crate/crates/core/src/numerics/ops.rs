//! Differentiable operations on [`Tensor`].

use rand::Rng;

use super::scalar::{gemm_into, Trans};
use super::tensor::numel;
use super::{Scalar, Tensor};
use crate::error::{bail, Result};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(
            Argument,
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative).
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let u = c * (x + a * x3);
    let t = u.tanh();
    let value = half * x * (one + t);
    let du = c * (one + T::lit(3.0) * a * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * du;
    (value, deriv)
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Tensor<T> {
    fn map_unary(&self, f: impl Fn(T) -> (T, T)) -> Tensor<T> {
        let (values, derivs): (Vec<T>, Vec<T>) = self.data().iter().map(|&x| f(x)).unzip();
        Tensor::from_op(
            values,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g| vec![Some(g.iter().zip(&derivs).map(|(&g, &d)| g * d).collect())],
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "add")?;
        let out = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "sub")?;
        let out = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "mul")?;
        let (a, b) = (self.to_vec(), other.to_vec());
        let out = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            move |g| {
                vec![
                    Some(g.iter().zip(&b).map(|(&g, &y)| g * y).collect()),
                    Some(g.iter().zip(&a).map(|(&g, &x)| g * x).collect()),
                ]
            },
        ))
    }

    /// Adds `other` repeated over the leading axes; `other.shape()` must be a
    /// suffix of `self.shape()` (bias rows, position tables).
    pub fn add_broadcast(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, o) = (self.shape(), other.shape());
        if o.len() > s.len() || s[s.len() - o.len()..] != *o {
            bail!(Argument, "add_broadcast: {o:?} is not a suffix of {s:?}");
        }
        let inner = other.numel();
        let out = {
            let (a, b) = (self.data(), other.data());
            if inner == 0 {
                a.clone()
            } else {
                a.chunks(inner)
                    .flat_map(|row| row.iter().zip(b.iter()).map(|(&x, &y)| x + y))
                    .collect()
            }
        };
        Ok(Tensor::from_op(
            out,
            s.to_vec(),
            vec![self.clone(), other.clone()],
            move |g| {
                let mut gb = vec![T::zero(); inner];
                if inner > 0 {
                    for row in g.chunks(inner) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.map_unary(|x| (x * c, c))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.map_unary(|x| (x + c, T::one()))
    }

    pub fn square(&self) -> Tensor<T> {
        self.map_unary(|x| (x * x, x + x))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map_unary(|x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.map_unary(|x| {
            let t = x.tanh();
            (t, T::one() - t * t)
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map_unary(|x| {
            let s = stable_sigmoid(x);
            (s, s * (T::one() - s))
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        self.map_unary(gelu_parts)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            bail!(
                Argument,
                "reshape {:?} -> {shape:?} changes element count",
                self.shape()
            );
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = self.dims2()?;
        let src = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            out,
            vec![c, r],
            vec![self.clone()],
            move |g| {
                let mut gi = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gi[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gi)]
            },
        ))
    }

    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![total], vec![], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.numel();
        if n == 0 {
            bail!(Argument, "mean of an empty tensor");
        }
        Ok(self.sum().scale(T::one() / T::lit(n as f64)))
    }

    /// `self @ other` for rank-2 operands.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = self.dims2()?;
        let (k2, m) = other.dims2()?;
        if k != k2 {
            bail!(
                Argument,
                "matmul: inner dimensions differ ({n}x{k} @ {k2}x{m})"
            );
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let mut out = vec![T::zero(); n * m];
        gemm_into(&a, n, k, Trans::No, &b, k, m, Trans::No, &mut out, false);
        let (pa, pb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            out,
            vec![n, m],
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = pa.then(|| {
                    let mut ga = vec![T::zero(); n * k];
                    gemm_into(g, n, m, Trans::No, &b, k, m, Trans::Yes, &mut ga, false);
                    ga
                });
                let gb = pb.then(|| {
                    let mut gb = vec![T::zero(); k * m];
                    gemm_into(&a, n, k, Trans::Yes, g, n, m, Trans::No, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Affine map `x @ weight + bias` with `weight` stored `in x out`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_broadcast(b),
            None => Ok(y),
        }
    }

    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            bail!(
                Argument,
                "softmax axis {axis} invalid for shape {:?}",
                self.shape()
            );
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut y = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| y[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (y[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    y[idx(j)] = y[idx(j)] / total;
                }
            }
        }
        let probs = y.clone();
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g| {
                let mut gx = vec![T::zero(); probs.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[idx(j)] * probs[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = probs[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let width = *self
            .shape()
            .last()
            .ok_or_else(|| crate::error::Error::Argument("layer_norm on a scalar".into()))?;
        if gain.shape() != [width] || bias.shape() != [width] {
            bail!(
                Argument,
                "layer_norm: gain {:?} / bias {:?} do not match width {width}",
                gain.shape(),
                bias.shape()
            );
        }
        let x = self.data();
        let gv = gain.to_vec();
        let bv = bias.to_vec();
        let rows = if width == 0 { 0 } else { x.len() / width };
        let eps = T::lit(eps);
        let inv_w = T::one() / T::lit(width as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<T>() * inv_w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..width {
                let h = (row[c] - mean) * rs;
                xhat[r * width + c] = h;
                out[r * width + c] = h * gv[c] + bv[c];
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g| {
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); width];
                let mut gb = vec![T::zero(); width];
                for r in 0..rows {
                    let gr = &g[r * width..(r + 1) * width];
                    let hr = &xhat[r * width..(r + 1) * width];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for c in 0..width {
                        let dh = gr[c] * gv[c];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[c];
                        gg[c] = gg[c] + gr[c] * hr[c];
                        gb[c] = gb[c] + gr[c];
                    }
                    mean_dh = mean_dh * inv_w;
                    mean_dh_h = mean_dh_h * inv_w;
                    for c in 0..width {
                        let dh = gr[c] * gv[c];
                        gx[r * width + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            },
        ))
    }

    /// Rows of a rank-2 tensor picked by index (embedding lookup, gathers).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let (rows, width) = self.dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            bail!(
                Argument,
                "gather_rows: index {bad} out of range for {rows} rows"
            );
        }
        let src = self.data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        drop(src);
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![indices.len(), width],
            vec![self.clone()],
            move |g| {
                let mut gs = vec![T::zero(); rows * width];
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut gs[i * width..(i + 1) * width];
                    dst.iter_mut()
                        .zip(&g[k * width..(k + 1) * width])
                        .for_each(|(a, &b)| *a = *a + b);
                }
                vec![Some(gs)]
            },
        ))
    }

    /// Copy of `self` whose rows at `indices` are taken from `rows`.
    pub fn replace_rows(&self, indices: &[usize], rows: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, width) = self.dims2()?;
        let (r, w2) = rows.dims2()?;
        if r != indices.len() || w2 != width {
            bail!(
                Argument,
                "replace_rows: {} indices with replacement shape {:?} into {:?}",
                indices.len(),
                rows.shape(),
                self.shape()
            );
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            bail!(
                Argument,
                "replace_rows: index {bad} out of range for {n} rows"
            );
        }
        let mut seen = vec![false; n];
        for &i in indices {
            if std::mem::replace(&mut seen[i], true) {
                bail!(Argument, "replace_rows: duplicate index {i}");
            }
        }
        let mut out = self.to_vec();
        {
            let src = rows.data();
            for (k, &i) in indices.iter().enumerate() {
                out[i * width..(i + 1) * width].copy_from_slice(&src[k * width..(k + 1) * width]);
            }
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![n, width],
            vec![self.clone(), rows.clone()],
            move |g| {
                let mut gb = g.to_vec();
                let mut gr = vec![T::zero(); idx.len() * width];
                for (k, &i) in idx.iter().enumerate() {
                    gr[k * width..(k + 1) * width].copy_from_slice(&g[i * width..(i + 1) * width]);
                    gb[i * width..(i + 1) * width]
                        .iter_mut()
                        .for_each(|v| *v = T::zero());
                }
                vec![Some(gb), Some(gr)]
            },
        ))
    }

    /// `len` slices starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            bail!(
                Argument,
                "narrow(axis {axis}, {start}..{}) out of range for {:?}",
                start + len,
                self.shape()
            );
        }
        let (outer, full, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Ok(Tensor::from_op(out, shape, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); total];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            bail!(Argument, "concat of zero tensors");
        };
        let rank = first.rank();
        if axis >= rank {
            bail!(Argument, "concat axis {axis} invalid for rank {rank}");
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                bail!(
                    Argument,
                    "concat: shape {:?} incompatible with {:?} on axis {axis}",
                    p.shape(),
                    first.shape()
                );
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total_len * inner);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &l) in datas.iter().zip(&lens) {
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        drop(datas);
        let mut shape = first.shape().to_vec();
        shape[axis] = total_len;
        let parents: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op(out, shape, parents, move |g| {
            let mut grads: Vec<Vec<T>> = lens
                .iter()
                .map(|&l| Vec::with_capacity(outer * l * inner))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[offset..offset + l * inner]);
                    offset += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Mean cross-entropy of rank-2 `logits` against class `targets`.
    ///
    /// Zero rows yield a constant zero loss.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let (n, classes) = self.dims2()?;
        if targets.len() != n {
            bail!(
                Argument,
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            );
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            bail!(Argument, "cross_entropy: target {bad} >= {classes} classes");
        }
        if n == 0 {
            return Ok(Tensor::scalar(T::zero()));
        }
        let x = self.data();
        let mut probs = vec![T::zero(); n * classes];
        let mut total = T::zero();
        for r in 0..n {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total = total + (log_z - row[targets[r]]);
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - log_z).exp();
            }
        }
        drop(x);
        let inv_n = T::one() / T::lit(n as f64);
        let t = targets.to_vec();
        Ok(Tensor::from_op(
            vec![total * inv_n],
            vec![],
            vec![self.clone()],
            move |g| {
                let s = g[0] * inv_n;
                let mut gx: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (r, &tr) in t.iter().enumerate() {
                    gx[r * classes + tr] = gx[r * classes + tr] - s;
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Mean binary cross-entropy of logits against labels in {0, 1}.
    pub fn bce_with_logits(&self, labels: &[f64]) -> Result<Tensor<T>> {
        let n = self.numel();
        if labels.len() != n {
            bail!(
                Argument,
                "bce_with_logits: {} labels for {n} logits",
                labels.len()
            );
        }
        if n == 0 {
            return Ok(Tensor::scalar(T::zero()));
        }
        let x = self.to_vec();
        let y: Vec<T> = labels.iter().map(|&l| T::lit(l)).collect();
        // -[y log s(x) + (1-y) log(1-s(x))] = softplus(x) - y x
        let total: T = x.iter().zip(&y).map(|(&x, &y)| softplus(x) - y * x).sum();
        let inv_n = T::one() / T::lit(n as f64);
        Ok(Tensor::from_op(
            vec![total * inv_n],
            vec![],
            vec![self.clone()],
            move |g| {
                let s = g[0] * inv_n;
                vec![Some(
                    x.iter()
                        .zip(&y)
                        .map(|(&x, &y)| (stable_sigmoid(x) - y) * s)
                        .collect(),
                )]
            },
        ))
    }

    /// Mean squared error over all entries.
    pub fn mse(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, target, "mse")?;
        self.sub(target)?.square().mean()
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            bail!(Argument, "dropout probability {p} not in [0, 1)");
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g| vec![Some(g.iter().zip(&mask).map(|(&g, &m)| g * m).collect())],
        ))
    }
}

/// Multi-head scaled dot-product attention core, without projections.
///
/// `q` is `n x width`, `k` and `v` are `m x width`. Each head `h` attends
/// with its own column block of width `width / heads`. Returns the
/// concatenated head outputs (`n x width`) and the attention probabilities,
/// laid out `heads x n x m`.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, width) = q.dims2()?;
    let (m, kw) = k.dims2()?;
    let (mv, vw) = v.dims2()?;
    if kw != width || vw != width || mv != m {
        bail!(
            Argument,
            "attention: Q {:?}, K {:?}, V {:?} are not compatible",
            q.shape(),
            k.shape(),
            v.shape()
        );
    }
    if heads == 0 || width % heads != 0 {
        bail!(
            Argument,
            "attention: width {width} not divisible by {heads} heads"
        );
    }
    if m == 0 {
        bail!(Argument, "attention over an empty key set");
    }
    let dh = width / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (qd, kd, vd) = (q.to_vec(), k.to_vec(), v.to_vec());
    let mut probs = vec![T::zero(); heads * n * m];
    let mut out = vec![T::zero(); n * width];
    for h in 0..heads {
        let col = h * dh;
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        for i in 0..n {
            let qi = &qd[i * width + col..i * width + col + dh];
            let row = &mut p[i * m..(i + 1) * m];
            for j in 0..m {
                let kj = &kd[j * width + col..j * width + col + dh];
                row[j] = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z = z + *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
            let oi = &mut out[i * width + col..i * width + col + dh];
            for j in 0..m {
                let a = row[j];
                let vj = &vd[j * width + col..j * width + col + dh];
                oi.iter_mut().zip(vj).for_each(|(o, &vv)| *o = *o + a * vv);
            }
        }
    }
    let saved = probs.clone();
    let tensor = Tensor::from_op(
        out,
        vec![n, width],
        vec![q.clone(), k.clone(), v.clone()],
        move |g| {
            let mut gq = vec![T::zero(); n * width];
            let mut gk = vec![T::zero(); m * width];
            let mut gv = vec![T::zero(); m * width];
            let mut ds = vec![T::zero(); m];
            for h in 0..heads {
                let col = h * dh;
                let p = &saved[h * n * m..(h + 1) * n * m];
                for i in 0..n {
                    let gi = &g[i * width + col..i * width + col + dh];
                    let pi = &p[i * m..(i + 1) * m];
                    // dP_ij = g_i . v_j ; dS = P * (dP - sum_j P dP)
                    let mut dot = T::zero();
                    for j in 0..m {
                        let vj = &vd[j * width + col..j * width + col + dh];
                        let dp = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                        ds[j] = dp;
                        dot = dot + pi[j] * dp;
                    }
                    for j in 0..m {
                        ds[j] = pi[j] * (ds[j] - dot) * scale;
                    }
                    for j in 0..m {
                        let (pij, dsj) = (pi[j], ds[j]);
                        let gvj = &mut gv[j * width + col..j * width + col + dh];
                        gvj.iter_mut().zip(gi).for_each(|(a, &b)| *a = *a + pij * b);
                        let kj = &kd[j * width + col..j * width + col + dh];
                        let gqi = &mut gq[i * width + col..i * width + col + dh];
                        gqi.iter_mut().zip(kj).for_each(|(a, &b)| *a = *a + dsj * b);
                        let qi = &qd[i * width + col..i * width + col + dh];
                        let gkj = &mut gk[j * width + col..j * width + col + dh];
                        gkj.iter_mut().zip(qi).for_each(|(a, &b)| *a = *a + dsj * b);
                    }
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        },
    );
    Ok((tensor, probs))
}
