//! Differentiable similarity warps (rotation, isotropic scale, shift) with
//! bilinear sampling.
//!
//! Coordinates are pixel-centred: the origin sits at `((W-1)/2, (H-1)/2)`, so
//! for odd sizes the centre pixel is a fixed point of every rotation and
//! scale. A transform maps a source location `p` to
//! `scale * R(rotation) * p + shift`; sampling inverts it for every output pixel. Rotation is in
//! degrees and shift in pixels.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Out-of-frame samples read as 0 (black background datasets).
    Zeros,
    /// Out-of-frame samples replicate the nearest border pixel.
    Border,
}

/// Per-image similarity transform; every field is a `(B,)` tensor.
#[derive(Debug, Clone)]
pub struct Similarity {
    pub rotation_deg: Tensor,
    pub scale: Tensor,
    pub shift_x: Tensor,
    pub shift_y: Tensor,
}

impl Similarity {
    pub fn identity(batch: usize, dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let z = Tensor::zeros(batch, dtype, &dev)?;
        Ok(Self {
            rotation_deg: z.clone(),
            scale: Tensor::ones(batch, dtype, &dev)?,
            shift_x: z.clone(),
            shift_y: z,
        })
    }

    pub fn from_values(rotation_deg: &[f64], scale: &[f64], shift_x: &[f64], shift_y: &[f64], dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let t = |v: &[f64]| -> Result<Tensor> { Ok(Tensor::new(v, &dev)?.to_dtype(dtype)?) };
        Ok(Self {
            rotation_deg: t(rotation_deg)?,
            scale: t(scale)?,
            shift_x: t(shift_x)?,
            shift_y: t(shift_y)?,
        })
    }

    pub fn rotation(angles_deg: &[f64], dtype: DType) -> Result<Self> {
        let n = angles_deg.len();
        Self::from_values(angles_deg, &vec![1.0; n], &vec![0.0; n], &vec![0.0; n], dtype)
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.rotation_deg.dims1()?)
    }

    fn radians(&self) -> Result<Tensor> {
        Ok((&self.rotation_deg * (std::f64::consts::PI / 180.0))?)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Similarity) -> Result<Similarity> {
        let rotation_deg = (&self.rotation_deg + &other.rotation_deg)?;
        let scale = (&self.scale * &other.scale)?;
        let th = self.radians()?;
        let (c, s) = (th.cos()?, th.sin()?);
        // self.scale * R(self) * other.shift + self.shift
        let ox = &other.shift_x;
        let oy = &other.shift_y;
        let rx = ((&c * ox)? - (&s * oy)?)?;
        let ry = ((&s * ox)? + (&c * oy)?)?;
        let shift_x = ((&self.scale * rx)? + &self.shift_x)?;
        let shift_y = ((&self.scale * ry)? + &self.shift_y)?;
        Ok(Similarity { rotation_deg, scale, shift_x, shift_y })
    }

    pub fn inverse(&self) -> Result<Similarity> {
        let rotation_deg = self.rotation_deg.neg()?;
        let scale = self.scale.recip()?;
        let th = rotation_deg.affine(std::f64::consts::PI / 180.0, 0.0)?;
        let (c, s) = (th.cos()?, th.sin()?);
        let tx = self.shift_x.neg()?;
        let ty = self.shift_y.neg()?;
        let shift_x = (((&c * &tx)? - (&s * &ty)?)? * &scale)?;
        let shift_y = (((&s * &tx)? + (&c * &ty)?)? * &scale)?;
        Ok(Similarity { rotation_deg, scale, shift_x, shift_y })
    }

    fn check_finite(&self) -> Result<()> {
        for (name, t) in [
            ("rotation", &self.rotation_deg),
            ("scale", &self.scale),
            ("shift_x", &self.shift_x),
            ("shift_y", &self.shift_y),
        ] {
            if !crate::nn::ops::all_finite(t)? {
                return Err(Error::NonFinite(format!("warp parameter `{name}`")));
            }
        }
        let scales = crate::nn::ops::to_vec_f64(&self.scale)?;
        if scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::Precondition("warp scale must be positive".into()));
        }
        Ok(())
    }
}

/// Warps `x` `(B, C, H, W)` by the per-image transform, differentiable in
/// both the image and the transform parameters.
pub fn warp(x: &Tensor, t: &Similarity, padding: Padding) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if t.batch_size()? != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{b} transforms"),
            actual: format!("{}", t.batch_size()?),
        });
    }
    t.check_finite()?;
    let dtype = x.dtype();
    let dev = Device::Cpu;
    let hw = h * w;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let mut gx = Vec::with_capacity(hw);
    let mut gy = Vec::with_capacity(hw);
    for i in 0..h {
        for j in 0..w {
            gx.push(j as f64 - cx);
            gy.push(i as f64 - cy);
        }
    }
    let qx = Tensor::from_vec(gx, (1, hw), &dev)?.to_dtype(dtype)?;
    let qy = Tensor::from_vec(gy, (1, hw), &dev)?.to_dtype(dtype)?;

    let th = t.radians()?.reshape((b, 1))?;
    let cos = th.cos()?;
    let sin = th.sin()?;
    let s = t.scale.reshape((b, 1))?;
    let dx = qx.broadcast_sub(&t.shift_x.reshape((b, 1))?)?;
    let dy = qy.broadcast_sub(&t.shift_y.reshape((b, 1))?)?;
    let sx = (dx.broadcast_mul(&cos)? + dy.broadcast_mul(&sin)?)?.broadcast_div(&s)?;
    let sy = (dy.broadcast_mul(&cos)? - dx.broadcast_mul(&sin)?)?.broadcast_div(&s)?;
    let mut sx = (sx + cx)?;
    let mut sy = (sy + cy)?;
    if padding == Padding::Border {
        sx = sx.clamp(0.0, (w - 1) as f64)?;
        sy = sy.clamp(0.0, (h - 1) as f64)?;
    }

    let sxv = sx.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let syv = sy.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let n = b * hw;
    let mut fx0 = Vec::with_capacity(n);
    let mut fy0 = Vec::with_capacity(n);
    // corner order: (x0,y0), (x1,y0), (x0,y1), (x1,y1)
    let mut idx: [Vec<u32>; 4] = Default::default();
    let mut mask: [Vec<f64>; 4] = Default::default();
    for k in 0..4 {
        idx[k].reserve(n);
        mask[k].reserve(n);
    }
    for p in 0..n {
        let x0 = sxv[p].floor();
        let y0 = syv[p].floor();
        fx0.push(x0);
        fy0.push(y0);
        let corners = [(x0, y0), (x0 + 1.0, y0), (x0, y0 + 1.0), (x0 + 1.0, y0 + 1.0)];
        for (k, (cxk, cyk)) in corners.into_iter().enumerate() {
            let inside = cxk >= 0.0 && cxk <= (w - 1) as f64 && cyk >= 0.0 && cyk <= (h - 1) as f64;
            let xi = cxk.clamp(0.0, (w - 1) as f64) as usize;
            let yi = cyk.clamp(0.0, (h - 1) as f64) as usize;
            idx[k].push((yi * w + xi) as u32);
            let m = match padding {
                Padding::Zeros => f64::from(u8::from(inside)),
                Padding::Border => 1.0,
            };
            mask[k].push(m);
        }
    }
    let x0t = Tensor::from_vec(fx0, (b, hw), &dev)?.to_dtype(dtype)?;
    let y0t = Tensor::from_vec(fy0, (b, hw), &dev)?.to_dtype(dtype)?;
    let fx = (sx - x0t)?;
    let fy = (sy - y0t)?;
    let gx1 = fx.clone();
    let gx0 = fx.affine(-1.0, 1.0)?;
    let gy1 = fy.clone();
    let gy0 = fy.affine(-1.0, 1.0)?;
    let weights = [(&gx0 * &gy0)?, (&gx1 * &gy0)?, (&gx0 * &gy1)?, (&gx1 * &gy1)?];

    let flat = x.reshape((b, c, hw))?;
    let mut out: Option<Tensor> = None;
    for k in 0..4 {
        let ik = Tensor::from_vec(std::mem::take(&mut idx[k]), (b, 1, hw), &dev)?
            .broadcast_as((b, c, hw))?
            .contiguous()?;
        let mk = Tensor::from_vec(std::mem::take(&mut mask[k]), (b, hw), &dev)?.to_dtype(dtype)?;
        let wk = (&weights[k] * mk)?.unsqueeze(1)?;
        let term = flat.gather(&ik, 2)?.broadcast_mul(&wk)?;
        out = Some(match out {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    Ok(out.expect("four corners").reshape((b, c, h, w))?)
}

/// Whether any sample coordinate lies within `margin` of an integer grid
/// line. Gradients of bilinear sampling are discontinuous there, so finite
/// difference probes use this to skip ill-posed points.
pub fn grid_proximity(x_shape: (usize, usize), t: &Similarity, margin: f64) -> Result<bool> {
    let (h, w) = x_shape;
    let b = t.batch_size()?;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let rot = crate::nn::ops::to_vec_f64(&t.rotation_deg)?;
    let sc = crate::nn::ops::to_vec_f64(&t.scale)?;
    let tx = crate::nn::ops::to_vec_f64(&t.shift_x)?;
    let ty = crate::nn::ops::to_vec_f64(&t.shift_y)?;
    for n in 0..b {
        let th = rot[n].to_radians();
        let (c, s) = (th.cos(), th.sin());
        for i in 0..h {
            for j in 0..w {
                let dx = j as f64 - cx - tx[n];
                let dy = i as f64 - cy - ty[n];
                let sx = (dx * c + dy * s) / sc[n] + cx;
                let sy = (dy * c - dx * s) / sc[n] + cy;
                for v in [sx, sy] {
                    let f = v - v.round();
                    if f.abs() < margin && v > -1.0 && v < w.max(h) as f64 {
                        return Ok(true);
                    }
                }
            }
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(b: usize, h: usize, w: usize) -> Tensor {
        let v: Vec<f64> = (0..b * h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        Tensor::from_vec(v, (b, 1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn identity_transform_is_exact() {
        let x = ramp(2, 28, 28);
        let y = warp(&x, &Similarity::identity(2, DType::F64).unwrap(), Padding::Zeros).unwrap();
        let d = (x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-6);
    }

    #[test]
    fn centre_pixel_is_fixed_under_rotation() {
        let (h, w) = (29, 29);
        let mut v = vec![0f64; h * w];
        v[14 * w + 14] = 1.0;
        let x = Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap();
        for angle in [-45.0, -13.0, 30.0, 90.0] {
            let y = warp(&x, &Similarity::rotation(&[angle], DType::F64).unwrap(), Padding::Zeros).unwrap();
            let c = y.flatten_all().unwrap().to_vec1::<f64>().unwrap()[14 * w + 14];
            assert!((c - 1.0).abs() < 1e-9, "angle {angle}: {c}");
        }
    }

    #[test]
    fn quarter_turn_permutes_pixels() {
        let x = ramp(1, 5, 5);
        let y = warp(&x, &Similarity::rotation(&[90.0], DType::F64).unwrap(), Padding::Zeros).unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut xs = xv.clone();
        let mut ys = yv.clone();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        for (a, b) in xs.iter().zip(&ys) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn integer_shift_moves_content() {
        let x = ramp(1, 6, 6);
        let t = Similarity::from_values(&[0.0], &[1.0], &[2.0], &[0.0], DType::F64).unwrap();
        let y = warp(&x, &t, Padding::Zeros).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..6 {
            assert_eq!(y[i * 6], 0.0);
            assert_eq!(y[i * 6 + 1], 0.0);
            for j in 2..6 {
                assert!((y[i * 6 + j] - xv[i * 6 + j - 2]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn border_padding_replicates_edges() {
        let x = Tensor::ones((1, 1, 6, 6), DType::F64, &Device::Cpu).unwrap();
        let t = Similarity::from_values(&[20.0], &[0.8], &[1.0], &[-1.0], DType::F64).unwrap();
        let y = warp(&x, &t, Padding::Border).unwrap();
        let m = y.min_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((m - 1.0).abs() < 1e-9);
    }

    #[test]
    fn compose_then_inverse_is_identity() {
        let a = Similarity::from_values(&[25.0, -10.0], &[1.2, 0.8], &[1.5, -2.0], &[0.5, 3.0], DType::F64).unwrap();
        let id = a.compose(&a.inverse().unwrap()).unwrap();
        for (t, expect) in [(&id.rotation_deg, 0.0), (&id.scale, 1.0), (&id.shift_x, 0.0), (&id.shift_y, 0.0)] {
            for v in t.to_vec1::<f64>().unwrap() {
                assert!((v - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let x = ramp(1, 4, 4);
        let t = Similarity::rotation(&[f64::NAN], DType::F64).unwrap();
        assert!(matches!(warp(&x, &t, Padding::Zeros), Err(Error::NonFinite(_))));
    }
}
