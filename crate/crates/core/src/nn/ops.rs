//! Differentiable helpers shared by the models.

use candle_core::{DType, Device, Tensor, D};

use crate::Result;

/// Floor applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(logits)?.exp()?)
}

pub fn labels_tensor(labels: &[usize]) -> Result<Tensor> {
    let ids: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    Ok(Tensor::from_vec(ids, labels.len(), &Device::Cpu)?)
}

/// Picks `t[i, y[i]]` for every row.
pub fn pick(t: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let idx = labels_tensor(labels)?.unsqueeze(1)?;
    Ok(t.gather(&idx, 1)?.squeeze(1)?)
}

/// Per-example `-log p[y]` from logits, shape `(n,)`.
///
/// Written as `m + log(e^-m + Σ_{j≠y} e^(d_j - m))` with `d = logits - logits[y]`
/// and the true class masked out of the sum. The gradient with respect to
/// the true logit is then a sum of small terms instead of `p[y] - 1`, which
/// rounds to zero in f32 for confident predictions.
pub fn cross_entropy_per_example(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(crate::Error::ShapeMismatch { expected: format!("{n} labels"), actual: labels.len().to_string() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(crate::Error::Precondition(format!("label {bad} out of range for {k} classes")));
    }
    let mut mask = vec![1f64; n * k];
    for (i, &y) in labels.iter().enumerate() {
        mask[i * k + y] = 0.0;
    }
    let mask = Tensor::from_vec(mask, (n, k), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let d = logits.broadcast_sub(&pick(logits, labels)?.unsqueeze(1)?)?;
    let m = d.max_keepdim(D::Minus1)?.detach();
    let s = (d.broadcast_sub(&m)?.exp()? * mask)?.sum_keepdim(D::Minus1)?;
    let ce = (m.clone() + (m.neg()?.exp()? + s)?.log()?)?;
    Ok(ce.squeeze(1)?)
}

/// Mean cross-entropy from logits. Equal to [`cross_entropy`] on the softmax
/// without the floor.
pub fn logits_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    Ok(cross_entropy_per_example(logits, labels)?.mean_all()?)
}

/// Mean over the batch of `-log max(p[y], floor)`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let p = pick(probs, labels)?.clamp(PROB_FLOOR, f64::INFINITY)?;
    Ok(p.log()?.neg()?.mean_all()?)
}

pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let idx = t.argmax(D::Minus1)?.to_dtype(DType::U32)?.to_vec1::<u32>()?;
    Ok(idx.into_iter().map(|i| i as usize).collect())
}

/// Per-example L1 norm over all non-batch dimensions, shape `(n,)`.
pub fn l1_per_example(t: &Tensor) -> Result<Tensor> {
    Ok(t.abs()?.flatten_from(1)?.sum(1)?)
}

/// Per-example l-infinity norm (host side, no gradient).
pub fn linf_per_example(t: &Tensor) -> Result<Vec<f64>> {
    let v = t.abs()?.flatten_from(1)?.max(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(to_vec_f64(t)?.iter().all(|v| v.is_finite()))
}

pub fn sigmoid(t: &Tensor) -> Result<Tensor> {
    Ok((t.neg()?.exp()? + 1.0)?.recip()?)
}

/// Clamps values to `[0, 1]` while passing the gradient through unchanged.
/// Used where the unclamped value is already in range up to rounding.
pub fn clamp_unit_straight_through(t: &Tensor) -> Result<Tensor> {
    let delta = (t.clamp(0.0, 1.0)? - t)?.detach();
    Ok((t + delta)?)
}

/// Squashes an unconstrained tensor into `[lo, hi]` per column; `lo`/`hi`
/// have one entry per column of the `(B, A)` input.
pub fn squash_to_range(u: &Tensor, lo: &[f64], hi: &[f64]) -> Result<Tensor> {
    let dtype = u.dtype();
    let a = lo.len();
    let lo_t = Tensor::new(lo, &Device::Cpu)?.to_dtype(dtype)?.reshape((1, a))?;
    let w: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (h - l)).collect();
    let w_t = Tensor::new(w.as_slice(), &Device::Cpu)?.to_dtype(dtype)?.reshape((1, a))?;
    Ok((u.tanh()? + 1.0)?.broadcast_mul(&w_t)?.broadcast_add(&lo_t)?)
}

/// Inverse of [`squash_to_range`] for values strictly inside the range.
pub fn unsquash_from_range(v: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let a = lo.len();
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let (l, h) = (lo[i % a], hi[i % a]);
            let r = (2.0 * (x - l) / (h - l) - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6);
            r.atanh()
        })
        .collect()
}

/// Nearest-neighbour upsampling to `(h, w)`. Integer factors go through a
/// broadcast, whose backward pass is a plain sum.
pub fn upsample_nearest(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, h0, w0) = x.dims4()?;
    if h0 == 0 || w0 == 0 || h % h0 != 0 || w % w0 != 0 {
        return Ok(x.upsample_nearest2d(h, w)?);
    }
    let (fh, fw) = (h / h0, w / w0);
    let y = x
        .reshape((b, c, h0, 1, w0, 1))?
        .broadcast_as((b, c, h0, fh, w0, fw))?
        .reshape((b, c, h, w))?;
    Ok(y)
}
