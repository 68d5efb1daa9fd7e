//! Parameter storage and the convolutional building blocks.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::config::Activation;
use crate::error::{DsrError, Result};
use crate::nets::conv;

/// Named trainable tensors, ordered by name.
#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) -> Result<()> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(DsrError::contract(format!("duplicate parameter `{name}`")));
        }
        self.vars.insert(name, var);
        Ok(())
    }

    /// Fresh variable with entries uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f32,
        rng: &mut R,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.from_vec(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.from_vec(name, shape, vec![value; n])
    }

    fn from_vec(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.insert(name, var)?;
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Variables whose name starts with `prefix` followed by `.` or equals it.
    pub fn with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| {
                k.as_str() == prefix
                    || (k.starts_with(prefix) && k.as_bytes().get(prefix.len()) == Some(&b'.'))
            })
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Host copy of every parameter, by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)))
            .collect()
    }

    /// Overwrites every parameter from `values`, which must name exactly
    /// the stored parameters with matching element counts.
    pub fn restore(&self, values: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        let missing: Vec<&str> = self
            .vars
            .keys()
            .filter(|k| !values.contains_key(*k))
            .map(String::as_str)
            .collect();
        let extra: Vec<&str> = values
            .keys()
            .filter(|k| !self.vars.contains_key(*k))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(DsrError::CorruptCheckpoint(format!(
                "parameter names differ; missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (k, var) in &self.vars {
            let v = &values[k];
            if v.len() != var.elem_count() {
                return Err(DsrError::CorruptCheckpoint(format!(
                    "{k}: {} values for shape {:?}",
                    v.len(),
                    var.dims()
                )));
            }
            var.set(&Tensor::from_slice(v, var.shape(), &self.device)?)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            if v.flatten_all()?.to_vec1::<f32>()?.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Act(pub Activation);

impl Act {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self.0 {
            Activation::Silu => x.silu()?,
            Activation::Relu => x.relu()?,
        })
    }
}

pub(crate) struct Builder<'a, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub groups: usize,
    pub act: Act,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv> {
        let bound = 1.0 / ((cin * k * k) as f32).sqrt();
        let weight = self.store.uniform(&format!("{name}.weight"), &[cout, cin, k, k], bound, self.rng)?;
        let bias = self.store.uniform(&format!("{name}.bias"), &[cout], bound, self.rng)?;
        Ok(Conv {
            weight,
            bias,
            stride,
            transposed: false,
        })
    }

    /// Kernel 4, stride 2, padding 1: doubles the spatial size.
    pub fn conv_t(&mut self, name: &str, cin: usize, cout: usize) -> Result<Conv> {
        let bound = 1.0 / ((cout * 16) as f32).sqrt();
        let weight = self.store.uniform(&format!("{name}.weight"), &[cin, cout, 4, 4], bound, self.rng)?;
        let bias = self.store.uniform(&format!("{name}.bias"), &[cout], bound, self.rng)?;
        Ok(Conv {
            weight,
            bias,
            stride: 2,
            transposed: true,
        })
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Result<Option<Norm>> {
        if self.groups == 0 {
            return Ok(None);
        }
        Ok(Some(Norm {
            weight: self.store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            bias: self.store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            groups: self.groups,
        }))
    }

    pub fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Result<ConvBlock> {
        Ok(ConvBlock {
            conv: self.conv(&format!("{name}.conv"), cin, cout, 3, stride)?,
            norm: self.norm(&format!("{name}.norm"), cout)?,
            act: self.act,
        })
    }

    pub fn up_block(&mut self, name: &str, cin: usize, cout: usize) -> Result<ConvBlock> {
        Ok(ConvBlock {
            conv: self.conv_t(&format!("{name}.conv"), cin, cout)?,
            norm: self.norm(&format!("{name}.norm"), cout)?,
            act: self.act,
        })
    }

    pub fn res(&mut self, name: &str, ch: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), ch)?,
            conv1: self.conv(&format!("{name}.conv1"), ch, ch, 3, 1)?,
            norm2: self.norm(&format!("{name}.norm2"), ch)?,
            conv2: self.conv(&format!("{name}.conv2"), ch, ch, 3, 1)?,
            act: self.act,
        })
    }
}

pub(crate) struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    transposed: bool,
}

impl Conv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.transposed {
            conv::conv_transpose2d(x, &self.weight, Some(&self.bias))
        } else {
            conv::conv2d(x, &self.weight, Some(&self.bias), self.stride)
        }
    }
}

pub(crate) struct Norm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl Norm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv::group_norm(x, self.groups, &self.weight, &self.bias, 1e-5)
    }
}

fn maybe_norm(norm: &Option<Norm>, x: &Tensor) -> Result<Tensor> {
    match norm {
        Some(n) => n.forward(x),
        None => Ok(x.clone()),
    }
}

/// Convolution, group norm, activation.
pub(crate) struct ConvBlock {
    conv: Conv,
    norm: Option<Norm>,
    act: Act,
}

impl ConvBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = maybe_norm(&self.norm, &self.conv.forward(x)?)?;
        self.act.apply(&h)
    }
}

/// Pre-activation residual block: `x + conv(act(norm(conv(act(norm(x))))))`,
/// both convolutions 3x3 at constant width.
pub(crate) struct ResBlock {
    norm1: Option<Norm>,
    conv1: Conv,
    norm2: Option<Norm>,
    conv2: Conv,
    act: Act,
}

impl ResBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.act.apply(&maybe_norm(&self.norm1, x)?)?)?;
        let h = self.conv2.forward(&self.act.apply(&maybe_norm(&self.norm2, &h)?)?)?;
        Ok((x + h)?)
    }
}
