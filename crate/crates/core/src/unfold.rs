//! Patch extraction (`im2col`) and its adjoint (`col2im`) as differentiable
//! custom ops, so convolutions become one batched matmul in both directions.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl Geometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.k) / self.stride + 1
    }

    /// Calls `f(image_index, column_index)` for every in-bounds tap, with both
    /// indices relative to one sample. Column layout is
    /// `[(c * k + ky) * k + kx][oy * out_w + ox]`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo, k) = (self.out_h(), self.out_w(), self.k);
        let hw = ho * wo;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let img = (c * self.h + iy as usize) * self.w + ix as usize;
                            f(img, row * hw + oy * wo + ox);
                        }
                    }
                }
            }
        }
    }

    fn image_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    fn cols_len(&self) -> usize {
        self.channels * self.k * self.k * self.out_h() * self.out_w()
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("unfold ops need contiguous input"),
    }
}

fn im2col<T: Copy + Default>(src: &[T], g: &Geometry, n: usize) -> Vec<T> {
    let (il, cl) = (g.image_len(), g.cols_len());
    let mut out = vec![T::default(); n * cl];
    for b in 0..n {
        let (s, d) = (&src[b * il..(b + 1) * il], &mut out[b * cl..(b + 1) * cl]);
        g.for_each_tap(|img, col| d[col] = s[img]);
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: &Geometry, n: usize) -> Vec<T> {
    let (il, cl) = (g.image_len(), g.cols_len());
    let mut out = vec![T::default(); n * il];
    for b in 0..n {
        let (s, d) = (&src[b * cl..(b + 1) * cl], &mut out[b * il..(b + 1) * il]);
        g.for_each_tap(|img, col| d[img] += s[col]);
    }
    out
}

/// `(N, C, H, W)` to `(N, C·k·k, H'·W')`.
pub(crate) struct Im2Col(pub Geometry);

/// `(N, C·k·k, H'·W')` back to `(N, C, H, W)`, summing overlapping taps.
pub(crate) struct Col2Im(pub Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = layout.dims()[0];
        let shape = Shape::from((n, g.channels * g.k * g.k, g.out_h() * g.out_w()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, layout)?, g, n)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, layout)?, g, n)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = layout.dims()[0];
        let shape = Shape::from((n, g.channels, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, layout)?, g, n)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, layout)?, g, n)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Geometry {
            k: 3,
            stride: 2,
            padding: 1,
            channels: 2,
            h: 5,
            w: 6,
        };
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 2, 5, 6), &dev).unwrap();
        let cols = x.apply_op1(Im2Col(g)).unwrap();
        let y = Tensor::randn(0f64, 1.0, cols.dims(), &dev).unwrap();
        let back = y.apply_op1(Col2Im(g)).unwrap();
        let lhs = (cols * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (x * back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
