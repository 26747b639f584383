//! Fused group normalisation with per-channel affine, as a custom op.
//!
//! Composed from broadcasting tensor ops the backward pass allocates a dozen
//! full-size temporaries and reduces over strided dimensions; the fused
//! version makes two passes per group.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct GroupNorm {
    pub groups: usize,
    pub eps: f64,
}

/// Sizes of an `(N, C, H·W)` input.
#[derive(Clone, Copy)]
struct Dims {
    c: usize,
    hw: usize,
    per_group: usize,
}

impl GroupNorm {
    fn dims(&self, layout: &Layout) -> candle_core::Result<Dims> {
        let d = layout.dims();
        if d.len() < 2 || d[1] % self.groups != 0 {
            candle_core::bail!("shape {d:?} cannot be split into {} channel groups", self.groups);
        }
        let hw: usize = d[2..].iter().product();
        Ok(Dims {
            c: d[1],
            hw,
            per_group: d[1] / self.groups * hw,
        })
    }
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("group norm needs contiguous input"),
    }
}

/// Mean and `sqrt(var + eps)` of one group.
fn stats<T: Copy + Into<f64>>(x: &[T], eps: f64) -> (f64, f64) {
    let m = x.len() as f64;
    let mean = x.iter().map(|&v| v.into()).sum::<f64>() / m;
    let var = x.iter().map(|&v| (v.into() - mean).powi(2)).sum::<f64>() / m;
    (mean, (var + eps).sqrt())
}

/// Visits each group chunk together with the channel index of its first element.
fn for_groups(len: usize, d: Dims, mut f: impl FnMut(std::ops::Range<usize>, usize)) {
    let mut start = 0;
    while start < len {
        let first_channel = (start / d.hw) % d.c;
        f(start..start + d.per_group, first_channel);
        start += d.per_group;
    }
}

fn forward<T: Copy + Into<f64>>(x: &[T], gamma: &[T], beta: &[T], d: Dims, eps: f64, cast: fn(f64) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for_groups(x.len(), d, |r, c0| {
        let (mean, sigma) = stats(&x[r.clone()], eps);
        for (j, &v) in x[r].iter().enumerate() {
            let ch = c0 + j / d.hw;
            out.push(cast((v.into() - mean) / sigma * gamma[ch].into() + beta[ch].into()));
        }
    });
    out
}

fn grad_input<T: Copy + Into<f64>>(x: &[T], g: &[T], gamma: &[T], d: Dims, eps: f64, cast: fn(f64) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for_groups(x.len(), d, |r, c0| {
        let (xs, gs) = (&x[r.clone()], &g[r]);
        let (mean, sigma) = stats(xs, eps);
        let m = xs.len() as f64;
        let dxhat = |j: usize| gs[j].into() * gamma[c0 + j / d.hw].into();
        let xhat = |j: usize| (xs[j].into() - mean) / sigma;
        let (mut sum_d, mut sum_dx) = (0.0, 0.0);
        for j in 0..xs.len() {
            sum_d += dxhat(j);
            sum_dx += dxhat(j) * xhat(j);
        }
        let (mean_d, mean_dx) = (sum_d / m, sum_dx / m);
        out.extend((0..xs.len()).map(|j| cast((dxhat(j) - mean_d - xhat(j) * mean_dx) / sigma)));
    });
    out
}

/// `[dgamma; dbeta]` as a `(2, C)` buffer.
fn grad_affine<T: Copy + Into<f64>>(x: &[T], g: &[T], d: Dims, eps: f64, cast: fn(f64) -> T) -> Vec<T> {
    let mut acc = vec![0.0f64; 2 * d.c];
    for_groups(x.len(), d, |r, c0| {
        let (xs, gs) = (&x[r.clone()], &g[r]);
        let (mean, sigma) = stats(xs, eps);
        for j in 0..xs.len() {
            let ch = c0 + j / d.hw;
            let gv = gs[j].into();
            acc[ch] += gv * (xs[j].into() - mean) / sigma;
            acc[d.c + ch] += gv;
        }
    });
    acc.into_iter().map(cast).collect()
}

impl CustomOp3 for GroupNorm {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.dims(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(forward(
                slice(x, l1)?,
                slice(g, l2)?,
                slice(b, l3)?,
                d,
                self.eps,
                |v| v as f32,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, d, self.eps, |v| v))
            }
            _ => candle_core::bail!("group norm needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = x.apply_op3_no_bwd(&grad, gamma, &InputGrad(*self))?;
        let affine = x.apply_op2_no_bwd(&grad, &AffineGrad(*self))?;
        Ok((Some(dx), Some(affine.get(0)?), Some(affine.get(1)?)))
    }
}

/// `(x, dy, gamma) -> dx`.
struct InputGrad(GroupNorm);

/// `(x, dy) -> [dgamma; dbeta]`.
struct AffineGrad(GroupNorm);

impl CustomOp3 for InputGrad {
    fn name(&self) -> &'static str {
        "group-norm-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0.dims(l1)?;
        let eps = self.0.eps;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(w)) => CpuStorage::F32(grad_input(
                slice(x, l1)?,
                slice(g, l2)?,
                slice(w, l3)?,
                d,
                eps,
                |v| v as f32,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(w)) => {
                CpuStorage::F64(grad_input(slice(x, l1)?, slice(g, l2)?, slice(w, l3)?, d, eps, |v| v))
            }
            _ => candle_core::bail!("group norm gradient needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp2 for AffineGrad {
    fn name(&self) -> &'static str {
        "group-norm-affine-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0.dims(l1)?;
        let eps = self.0.eps;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(grad_affine(slice(x, l1)?, slice(g, l2)?, d, eps, |v| v as f32))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(grad_affine(slice(x, l1)?, slice(g, l2)?, d, eps, |v| v))
            }
            _ => candle_core::bail!("group norm gradient needs matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((2, d.c))))
    }
}
