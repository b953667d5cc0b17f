use candle_core::{Tensor, Var, D};

use super::ParamStore;
use crate::rng::SeededRng;
use crate::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(
            &format!("{name}.weight"),
            (out_channels, in_channels, kernel, kernel),
            bound,
            rng,
        )?;
        let bias = store.uniform(&format!("{name}.bias"), out_channels, bound, rng)?;
        Ok(Self { weight, bias, stride, padding })
    }

    /// Same layer with weight and bias set to zero.
    #[allow(clippy::too_many_arguments)]
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight =
            store.zeros(&format!("{name}.weight"), (out_channels, in_channels, kernel, kernel))?;
        let bias = store.zeros(&format!("{name}.bias"), out_channels)?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        let (o, c, k, _) = self.weight.dims4()?;
        if k == 1 && self.stride == 1 && self.padding == 0 {
            // 1x1: a batched matmul is much cheaper than the generic conv path
            let (n, _, h, w) = x.dims4()?;
            let cols = x.transpose(0, 1)?.reshape((c, n * h * w))?;
            let y = self.weight.as_tensor().reshape((o, c))?.matmul(&cols)?;
            let y = y.reshape((o, n, h, w))?.transpose(0, 1)?.contiguous()?;
            return Ok(y.broadcast_add(&b)?);
        }
        let y = super::conv::conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        Ok(y.broadcast_add(&b)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), (out_features, in_features), bound, rng)?;
        let bias = store.uniform(&format!("{name}.bias"), out_features, bound, rng)?;
        Ok(Self { weight, bias })
    }

    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), (out_features, in_features))?;
        let bias = store.zeros(&format!("{name}.bias"), out_features)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Var,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        count: usize,
        dim: usize,
        scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let table = store.uniform(&format!("{name}.table"), (count, dim), scale, rng)?;
        Ok(Self { table })
    }

    /// `ids` is a u32 tensor of shape `(n,)`; returns `(n, dim)`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(self.table.as_tensor().index_select(ids, 0)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let weight = store.ones(&format!("{name}.weight"), channels)?;
        let bias = store.zeros(&format!("{name}.bias"), channels)?;
        let dev = candle_core::Device::Cpu;
        let running_mean = store.buffer(
            &format!("{name}.running_mean"),
            Tensor::zeros(channels, store.dtype(), &dev)?,
        )?;
        let running_var = store.buffer(
            &format!("{name}.running_var"),
            Tensor::ones(channels, store.dtype(), &dev)?,
        )?;
        Ok(Self { weight, bias, running_mean, running_var, momentum: 0.1, eps: 1e-5 })
    }

    fn affine(&self, xhat: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().reshape((1, (), 1, 1))?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(xhat.broadcast_mul(&w)?.broadcast_add(&b)?)
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
        let mean = flat.mean(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean.unsqueeze(1)?)?;
        let var = centered.sqr()?.mean(D::Minus1)?;
        let m = self.momentum;
        let count = (n * h * w) as f64;
        let unbiased = (&var.detach() * (count / (count - 1.0).max(1.0)))?;
        self.running_mean.set(
            &((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?,
        )?;
        self.running_var
            .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
        let xhat = x
            .broadcast_sub(&mean.reshape((1, c, 1, 1))?)?
            .broadcast_div(&(var + self.eps)?.sqrt()?.reshape((1, c, 1, 1))?)?;
        self.affine(&xhat)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mean = self.running_mean.as_tensor().reshape((1, (), 1, 1))?;
        let std = (self.running_var.as_tensor() + self.eps)?.sqrt()?.reshape((1, (), 1, 1))?;
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        self.affine(&xhat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn pointwise_conv_matches_candle_on_every_batch_row() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = crate::rng::seeded(4);
        let conv = Conv2d::new(&mut store, "pw", 5, 2, 1, 1, 0, &mut rng).unwrap();
        let x = crate::rng::normal_tensor(&mut rng, (3, 5, 4, 4), DType::F32).unwrap();
        let ours = conv.forward(&x).unwrap();
        let b = conv.bias.as_tensor().reshape((1, 2, 1, 1)).unwrap();
        let theirs = x.conv2d(conv.weight.as_tensor(), 0, 1, 1, 1).unwrap().broadcast_add(&b).unwrap();
        let d = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5, "{d}");
        let _ = Device::Cpu;
    }
}
