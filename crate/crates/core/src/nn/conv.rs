//! Convolution lowered to `im2col` + one GEMM.
//!
//! The column matrix is laid out as `(C·k·k, B·OH·OW)` so a whole batch is a
//! single matmul against the `(C_out, C·k·k)` weight. The backward of the
//! lowering is the scatter-add `col2im`, and vice versa.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

struct Im2Col(ConvGeometry);
struct Col2Im(ConvGeometry);

fn im2col<T: WithDType>(src: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane_out = oh * ow;
    let mut out = vec![T::zero(); g.rows() * batch * plane_out];
    for bi in 0..batch {
        for ci in 0..g.channels {
            let plane = &src[(bi * g.channels + ci) * g.height * g.width..][..g.height * g.width];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let r = (ci * g.kernel + ky) * g.kernel + kx;
                    let dst = &mut out[(r * batch + bi) * plane_out..][..plane_out];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * g.width..][..g.width];
                        let drow = &mut dst[oy * ow..][..ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                *d = row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(src: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane_out = oh * ow;
    let mut out = vec![T::zero(); batch * g.channels * g.height * g.width];
    for bi in 0..batch {
        for ci in 0..g.channels {
            let plane = &mut out[(bi * g.channels + ci) * g.height * g.width..][..g.height * g.width];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let r = (ci * g.kernel + ky) * g.kernel + kx;
                    let s = &src[(r * batch + bi) * plane_out..][..plane_out];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let row = &mut plane[iy as usize * g.width..][..g.width];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                row[ix as usize] += s[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let batch = l.dims()[0];
        let g = self.0;
        let shape = Shape::from((g.rows(), batch * g.out_height() * g.out_width()));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, l)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, l)?, batch, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = l.dims()[1] / (g.out_height() * g.out_width());
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, l)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, l)?, batch, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Cross-correlation of `x: (B, C, H, W)` with `weight: (C_out, C, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    conv2d_bias(x, weight, None, stride, pad)
}

/// [`conv2d`] plus a per-channel bias, added while the output is still in
/// `(C_out, B·OH·OW)` layout.
pub fn conv2d_bias(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        candle_core::bail!("conv2d: input has {c} channels, weight {:?}", weight.dims());
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        candle_core::bail!("conv2d: kernel {k} larger than padded input {h}x{w}");
    }
    let g = ConvGeometry { channels: c, height: h, width: w, kernel: k, stride, pad };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let mut y = weight.reshape((co, c * k * k))?.matmul(&cols)?;
    if let Some(b) = bias {
        y = y.broadcast_add(&b.reshape((co, 1))?)?;
    }
    y.reshape((co, b, g.out_height(), g.out_width()))?
        .transpose(0, 1)?
        .contiguous()
}

struct Upsample2x;
struct BlockSum2x;

fn upsample2x<T: WithDType>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        let s = &src[p * h * w..][..h * w];
        let d = &mut out[p * 4 * h * w..][..4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = s[y * w + x];
                let o = 2 * y * 2 * w + 2 * x;
                d[o] = v;
                d[o + 1] = v;
                d[o + 2 * w] = v;
                d[o + 2 * w + 1] = v;
            }
        }
    }
    out
}

fn block_sum2x<T: WithDType>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let s = &src[p * 4 * h * w..][..4 * h * w];
        let d = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let o = 2 * y * 2 * w + 2 * x;
                d[y * w + x] = s[o] + s[o + 1] + s[o + 2 * w] + s[o + 2 * w + 1];
            }
        }
    }
    out
}

fn planes_of(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let d = l.dims();
    if d.len() != 4 {
        candle_core::bail!("expected a rank-4 tensor, got {d:?}");
    }
    Ok((d[0] * d[1], d[2], d[3]))
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (p, h, w) = planes_of(l)?;
        let d = l.dims();
        let shape = Shape::from((d[0], d[1], 2 * h, 2 * w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(upsample2x(contiguous_slice(v, l)?, p, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(upsample2x(contiguous_slice(v, l)?, p, h, w)),
            _ => candle_core::bail!("upsample2x supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(BlockSum2x)?))
    }
}

impl CustomOp1 for BlockSum2x {
    fn name(&self) -> &'static str {
        "block_sum2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (p, h2, w2) = planes_of(l)?;
        let (h, w) = (h2 / 2, w2 / 2);
        let d = l.dims();
        let shape = Shape::from((d[0], d[1], h, w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(block_sum2x(contiguous_slice(v, l)?, p, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(block_sum2x(contiguous_slice(v, l)?, p, h, w)),
            _ => candle_core::bail!("block_sum2x supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Upsample2x)?))
    }
}

/// Nearest-neighbour ×2 upsampling of a `(B, C, H, W)` tensor.
pub fn upsample_nearest2x(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_reference_conv_and_gradients() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1., (2, 3, 8, 6), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f64, 1., (5, 3, 3, 3), &dev).unwrap()).unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let ours = conv2d(&x, &w, stride, pad).unwrap();
            let reference = x.as_tensor().conv2d(&w, pad, stride, 1, 1).unwrap();
            assert!(max_diff(&ours, &reference) < 1e-12);
            let ga = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let gb = reference.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_diff(ga.get(&x).unwrap(), gb.get(&x).unwrap()) < 1e-10);
            assert!(max_diff(ga.get(&w).unwrap(), gb.get(&w).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn upsample_matches_candle_with_gradients() {
        let x = Var::from_tensor(&Tensor::randn(0f64, 1., (2, 3, 5, 4), &Device::Cpu).unwrap()).unwrap();
        let ours = upsample_nearest2x(&x).unwrap();
        let reference = x.as_tensor().upsample_nearest2d(10, 8).unwrap();
        assert_eq!(max_diff(&ours, &reference), 0.0);
        let ga = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let gb = reference.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(ga.get(&x).unwrap(), gb.get(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn bias_variant_matches_broadcast_add() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1., (2, 3, 6, 6), &dev).unwrap();
        let w = Tensor::randn(0f64, 1., (4, 3, 3, 3), &dev).unwrap();
        let b = Tensor::randn(0f64, 1., 4, &dev).unwrap();
        let ours = conv2d_bias(&x, &w, Some(&b), 2, 1).unwrap();
        let reference = conv2d(&x, &w, 2, 1).unwrap().broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap()).unwrap();
        assert!(max_diff(&ours, &reference) < 1e-12);
    }

    #[test]
    fn rejects_oversized_kernel() {
        let x = Tensor::zeros((1, 1, 2, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        let w = Tensor::zeros((1, 1, 5, 5), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(conv2d(&x, &w, 1, 0).is_err());
    }
}
