//! Parameter storage and the small set of layers the networks are built from.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops;

/// Ordered collection of trainable variables. Each network owns one prefix;
/// layers hold handles into the same storage, so updates through [`Var::set`]
/// are visible everywhere a parameter is used.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            dtype,
            device,
            vars: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn register(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.push((name, var));
        Ok(handle)
    }

    /// Conv layer with fan-in scaled normal weights and zero bias.
    pub fn conv<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Conv2d> {
        let fan_in = (cin * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("positive std");
        let w: Vec<f64> = (0..cout * cin * kernel * kernel)
            .map(|_| normal.sample(rng))
            .collect();
        let weight = self.register(format!("{name}.weight"), w, &[cout, cin, kernel, kernel])?;
        let bias = self.register(format!("{name}.bias"), vec![0.0; cout], &[cout])?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// Instance normalisation with unit scale and zero shift.
    pub fn norm(&mut self, name: &str, channels: usize) -> Result<InstanceNorm> {
        let gamma = self.register(format!("{name}.gamma"), vec![1.0; channels], &[channels])?;
        let beta = self.register(format!("{name}.beta"), vec![0.0; channels], &[channels])?;
        Ok(InstanceNorm { gamma, beta })
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every registered variable from `values`; shapes must match.
    pub fn assign(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?} in checkpoint, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path)?;
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "weights file not found"),
            ));
        }
        let values = candle_core::safetensors::load(path, &self.device)?;
        self.assign(&values)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize) -> Self {
        let padding = weight.dims()[2] / 2;
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(ops::add_channel_bias(&y, &self.bias)?)
    }
}

/// Per-sample, per-channel standardisation over space followed by a learned
/// channel affine. Has no running statistics, so training and inference agree.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl InstanceNorm {
    const EPS: f64 = 1e-5;

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::standardize(x, Self::EPS)?;
        Ok(ops::add_channel_bias(&ops::scale_channels(&y, &self.gamma)?, &self.beta)?)
    }
}

pub fn act(x: &Tensor) -> Result<Tensor> {
    Ok(ops::silu(x)?)
}

/// Pre-activation residual block: `x + conv(act(norm(conv(act(norm(x))))))`, constant width.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: InstanceNorm,
    conv1: Conv2d,
    norm2: InstanceNorm,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: store.norm(&format!("{name}.norm1"), width)?,
            conv1: store.conv(&format!("{name}.conv1"), width, width, 3, 1, rng)?,
            norm2: store.norm(&format!("{name}.norm2"), width)?,
            conv2: store.conv(&format!("{name}.conv2"), width, width, 3, 1, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&act(&self.norm1.forward(x)?)?)?;
        let h = self.conv2.forward(&act(&self.norm2.forward(&h)?)?)?;
        Ok((x + h)?)
    }
}

/// Number of stride-2 stages that take `from` down to `to`.
pub fn halvings(from: usize, to: usize) -> Result<usize> {
    if to == 0 || from % to != 0 || !(from / to).is_power_of_two() {
        return Err(Error::Config(format!(
            "{from} must be a power-of-two multiple of {to}"
        )));
    }
    Ok((from / to).trailing_zeros() as usize)
}
