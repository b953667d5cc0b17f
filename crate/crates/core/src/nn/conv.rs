//! Convolution as `im2col` followed by one matrix product. The patch
//! extraction and its adjoint are custom ops so that both directions of the
//! backward pass run through gemm.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Visits every (patch row, column, input offset) triple that lies
    /// inside the image.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let ncols = self.cols();
        for c in 0..self.channels {
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (c * self.k + kh) * self.k + kw;
                    for b in 0..self.batch {
                        let src_plane = (b * self.channels + c) * self.h * self.w;
                        let dst_base = row * ncols + b * oh * ow;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + kh) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = src_plane + iy as usize * self.w;
                            let dst_row = dst_base + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kw) as isize - self.pad as isize;
                                if ix >= 0 && (ix as usize) < self.w {
                                    f(dst_row + ox, src_row + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

/// `(B, C, H, W) -> (C·k·k, B·H_out·W_out)`.
struct Im2Col(ConvGeometry);

/// Adjoint of [`Im2Col`]: scatter-adds patch columns back into an image.
struct Col2Im(ConvGeometry);

fn im2col_vec<T: Copy + Default>(g: &ConvGeometry, x: &[T]) -> Vec<T> {
    let mut out = vec![T::default(); g.rows() * g.cols()];
    g.for_each(|dst, src| out[dst] = x[src]);
    out
}

fn col2im_vec<T: Copy + Default + std::ops::AddAssign>(g: &ConvGeometry, cols: &[T]) -> Vec<T> {
    let mut out = vec![T::default(); g.batch * g.channels * g.h * g.w];
    g.for_each(|c, img| out[img] += cols[c]);
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.rows(), g.cols()));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_vec(g, contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_vec(g, contiguous(v, l)?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.batch, g.channels, g.h, g.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_vec(g, contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_vec(g, contiguous(v, l)?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Square-kernel 2-d convolution, `x (B, C, H, W)`, `weight (O, C, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, channels, h, w) = x.dims4()?;
    let (o, c2, k, k2) = weight.dims4()?;
    if c2 != channels || k != k2 {
        return Err(crate::Error::ShapeMismatch {
            expected: format!("kernel (_, {channels}, k, k)"),
            actual: format!("{:?}", weight.dims()),
        });
    }
    let g = ConvGeometry { batch, channels, h, w, k, stride, pad };
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((o, channels * k * k))?.matmul(&cols)?;
    Ok(y.reshape((o, batch, oh, ow))?.transpose(0, 1)?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = crate::rng::seeded(seed);
        crate::rng::normal_tensor(&mut rng, shape, DType::F64).unwrap()
    }

    #[test]
    fn matches_candle_convolution_and_its_gradients() {
        for (stride, pad, hw) in [(1, 1, 7), (2, 1, 8), (2, 1, 7), (1, 0, 5)] {
            let x = Var::from_tensor(&rand((3, 2, hw, hw), 1)).unwrap();
            let w = Var::from_tensor(&rand((4, 2, 3, 3), 2)).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), stride, pad).unwrap();
            let theirs = x.as_tensor().conv2d(w.as_tensor(), pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            let d = (&ours - &theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-10, "forward differs by {d}");
            let probe = rand(ours.dims4().unwrap(), 3);
            let ga = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let a = ga.get(v.as_tensor()).unwrap();
                let b = gb.get(v.as_tensor()).unwrap();
                let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(d < 1e-10, "gradient differs by {d} (stride {stride})");
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        let g = ConvGeometry { batch: 2, channels: 3, h: 5, w: 6, k: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..2 * 3 * 5 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col_vec(&g, &x).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = col2im_vec(&g, &c).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let _ = Device::Cpu;
    }
}
