//! Small neural-network toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path. Each parameter is
//! initialized from a random stream keyed by its own name, so construction
//! order never changes the initial values. Frozen parameters are stored as
//! variables too (so checkpoints can restore them in place) but are never
//! returned by [`ParamStore::trainable`].

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

impl Init {
    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        }
    }
}

#[derive(Debug)]
struct Entry {
    var: Var,
    trainable: bool,
}

#[derive(Debug, Default)]
struct StoreInner {
    entries: BTreeMap<String, Entry>,
}

/// Named parameter collection shared by every module of a model.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner::default())),
            seed,
        }
    }

    fn lock(&self) -> MutexGuard<'_, StoreInner> {
        self.inner.lock().expect("param store poisoned")
    }

    pub fn root(&self) -> VarBuilder {
        VarBuilder {
            store: self.clone(),
            prefix: String::new(),
            trainable: true,
        }
    }

    /// All trainable variables in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// All variables in name order, frozen ones included.
    pub fn all(&self) -> Vec<(String, Var, bool)> {
        self.lock()
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.clone(), e.trainable))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().entries.get(name).map(|e| e.var.clone())
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.lock().entries.get(name).map(|e| e.trainable)
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().entries.keys().cloned().collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites one scalar entry of a parameter in place.
    pub fn set_entry(&self, name: &str, flat_index: usize, value: f64) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let shape = var.shape().clone();
        let mut data = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        if flat_index >= data.len() {
            return Err(Error::Shape(format!(
                "index {flat_index} out of range for {name} with {} entries",
                data.len()
            )));
        }
        data[flat_index] = value;
        var.set(&Tensor::from_vec(data, shape, &device())?)?;
        Ok(())
    }

    pub fn entry(&self, name: &str, flat_index: usize) -> Result<f64> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let data = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        data.get(flat_index)
            .copied()
            .ok_or_else(|| Error::Shape(format!("index {flat_index} out of range for {name}")))
    }

    fn get_or_init(&self, name: String, dims: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        let mut inner = self.lock();
        if let Some(e) = inner.entries.get(&name) {
            if e.var.dims() != dims {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {dims:?}",
                    e.var.dims()
                )));
            }
            return Ok(e.var.as_tensor().clone());
        }
        let n: usize = dims.iter().product();
        let mut r = rng::stream(self.seed, &[rng::tag::INIT, rng::string_key(&name)]);
        let data = init.sample(n, &mut r);
        let var = Var::from_tensor(&Tensor::from_vec(data, dims, &device())?)?;
        let t = var.as_tensor().clone();
        inner.entries.insert(name, Entry { var, trainable });
        Ok(t)
    }
}

/// Path-scoped handle used by module constructors.
#[derive(Debug, Clone)]
pub struct VarBuilder {
    store: ParamStore,
    prefix: String,
    trainable: bool,
}

impl VarBuilder {
    pub fn pp(&self, s: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            s.to_string()
        } else {
            format!("{}.{}", self.prefix, s)
        };
        Self {
            store: self.store.clone(),
            prefix,
            trainable: self.trainable,
        }
    }

    /// Parameters created below this builder never receive updates.
    pub fn frozen(&self) -> Self {
        Self {
            trainable: false,
            ..self.clone()
        }
    }

    pub fn get(&self, dims: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get_or_init(full, dims, init, self.trainable)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// Fully connected layer `y = x W^T + b` applied over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vb: &VarBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: vb.get(&[out_dim, in_dim], "weight", Init::Uniform(bound))?,
            bias: Some(vb.get(&[out_dim], "bias", Init::Zeros)?),
        })
    }

    pub fn no_bias(vb: &VarBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: vb.get(&[out_dim, in_dim], "weight", Init::Uniform(bound))?,
            bias: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        if last != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim(),
                dims
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, last))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vb: &VarBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.get(&[dim], "weight", Init::Ones)?,
            bias: vb.get(&[dim], "bias", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(vb: &VarBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&vb.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&vb.pp("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Inverted dropout driven by an explicit random stream.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let n = x.elem_count();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape().clone(), x.device())?;
    Ok(x.mul(&mask)?)
}

pub fn tensor(data: Vec<f64>, dims: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, dims, &device())?)
}

pub fn to_vec2(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DTYPE)?.to_vec2::<f64>()?)
}

pub fn to_vec1(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DTYPE)?.flatten_all()?.to_vec1::<f64>()?)
}
