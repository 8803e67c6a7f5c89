//! Minimal neural-network building blocks on top of candle.
//!
//! Every parameter lives in a [`ParamStore`] as a [`Var`]. Modules hold plain
//! tensor handles that share storage with those vars: trainable parameters
//! get the tracked tensor, frozen ones a detached view. Gradients therefore
//! never reach frozen weights, while checkpoint loading can still overwrite
//! them in place.
//!
//! All computation runs in `f64` on the CPU.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Large negative value used in attention masks in place of -inf so that
/// masked rows never produce NaN gradients.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
}

/// FNV-1a, used to derive per-parameter seeds that are independent of the
/// order in which parameters are created.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn init_values(seed: u64, name: &str, n: usize, init: Init) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(name));
    match init {
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..=a)).collect(),
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    }
}

/// Named parameter registry with a trainable/frozen split.
#[derive(Debug)]
pub struct ParamStore {
    seed: u64,
    vars: BTreeMap<String, Var>,
    trainable: BTreeMap<String, bool>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, vars: BTreeMap::new(), trainable: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Replaces the seed used for parameters created from now on and returns
    /// the previous one.
    pub fn set_seed(&mut self, seed: u64) -> u64 {
        std::mem::replace(&mut self.seed, seed)
    }

    /// Creates a parameter and returns the handle a module should keep.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        self.param_with_seed(name, shape, init, trainable, self.seed)
    }

    /// Like [`ParamStore::param`] but initialized from an explicit seed.
    pub fn param_with_seed(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
        seed: u64,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::validation("param", format!("duplicate parameter {name}")));
        }
        let n = shape.iter().product();
        let values = init_values(seed, name, n, init);
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &device())?)?;
        let handle = if trainable { var.as_tensor().clone() } else { var.as_tensor().detach() };
        self.vars.insert(name.to_string(), var);
        self.trainable.insert(name.to_string(), trainable);
        Ok(handle)
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.trainable.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable.iter().filter(|(_, t)| **t).map(|(n, _)| n.clone()).collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.trainable.iter().filter(|(_, t)| !**t).map(|(n, _)| n.clone()).collect()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.vars.iter().filter(|(n, _)| self.trainable[*n]).map(|(_, v)| v.clone()).collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars.iter().map(|(n, v)| Ok((n.clone(), v.as_tensor().detach().copy()?))).collect()
    }

    /// Overwrites the named parameters in place. Unknown names and shape
    /// mismatches are errors.
    pub fn load(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, t) in values {
            let var = self
                .vars
                .get(name)
                .ok_or_else(|| Error::validation("checkpoint", format!("unknown parameter {name}")))?;
            if var.dims() != t.dims() {
                return Err(Error::validation(
                    "checkpoint",
                    format!("{name}: shape {:?} != {:?}", t.dims(), var.dims()),
                ));
            }
            var.set(&t.to_dtype(DTYPE)?)?;
        }
        Ok(())
    }

    /// Writes the parameters whose names satisfy `keep` to a safetensors file.
    pub fn save_filtered(&self, path: &Path, keep: impl Fn(&str, bool) -> bool) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .filter(|(n, _)| keep(n, self.trainable[*n]))
            .map(|(n, v)| (n.clone(), v.as_tensor().detach()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load_file(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &device())?;
        self.load(&map)
    }
}

/// Dense layer `y = x W^T + b` over row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, trainable: bool) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(store, name, in_dim, out_dim, trainable, Init::Normal(std))
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        trainable: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[out_dim, in_dim], init, trainable)?;
        let bias = store.param(&format!("{name}.bias"), &[out_dim], Init::Zeros, trainable)?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Frozen linear layer with an optional trainable low-rank update:
/// `y = base(x) + (alpha / r) * x A^T B^T`.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapter: Option<LoraAdapter>,
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl LoraLinear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        lora: Option<(usize, f64)>,
    ) -> Result<Self> {
        Self::with_base(store, name, in_dim, out_dim, lora, false)
    }

    /// Like [`LoraLinear::new`] but lets the base weights be trainable.
    pub fn with_base(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        lora: Option<(usize, f64)>,
        trainable_base: bool,
    ) -> Result<Self> {
        let base = Linear::new(store, name, in_dim, out_dim, trainable_base)?;
        let adapter = match lora {
            Some((rank, alpha)) => Some(LoraAdapter {
                a: store.param(
                    &format!("{name}.lora_a"),
                    &[rank, in_dim],
                    Init::Normal(1.0 / (in_dim as f64).sqrt()),
                    true,
                )?,
                b: store.param(&format!("{name}.lora_b"), &[out_dim, rank], Init::Zeros, true)?,
                scale: alpha / rank as f64,
            }),
            None => None,
        };
        Ok(Self { base, adapter })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.base.forward(x)?;
        match &self.adapter {
            Some(ad) => {
                let low = x.matmul(&ad.a.t()?)?.matmul(&ad.b.t()?)?;
                Ok((y + (low * ad.scale)?)?)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, trainable)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, trainable)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Parameter-free layer normalization over the last axis.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Fixed sinusoidal position table, `len x width`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(len * width);
    for pos in 0..len {
        for i in 0..width {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Ok(Tensor::from_vec(data, (len, width), &device())?)
}

/// `len x len` additive mask that blocks attention to future positions.
pub fn causal_mask(len: usize) -> Result<Tensor> {
    let data: Vec<f64> = (0..len).flat_map(|i| (0..len).map(move |j| if j > i { MASK_VALUE } else { 0.0 })).collect();
    Ok(Tensor::from_vec(data, (len, len), &device())?)
}

/// Multi-head attention whose projections may carry low-rank adapters.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    pub heads: usize,
}

impl Attention {
    /// `width` is the query/output width, `kv_dim` the width of the attended
    /// sequence (equal to `width` for self-attention).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        kv_dim: usize,
        heads: usize,
        lora: Option<(usize, f64)>,
    ) -> Result<Self> {
        Self::with_base(store, name, width, kv_dim, heads, lora, false)
    }

    pub fn with_base(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        kv_dim: usize,
        heads: usize,
        lora: Option<(usize, f64)>,
        trainable_base: bool,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::validation("heads", format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: LoraLinear::with_base(store, &format!("{name}.q"), width, width, lora, trainable_base)?,
            k: LoraLinear::with_base(store, &format!("{name}.k"), kv_dim, width, lora, trainable_base)?,
            v: LoraLinear::with_base(store, &format!("{name}.v"), kv_dim, width, lora, trainable_base)?,
            o: LoraLinear::with_base(store, &format!("{name}.o"), width, width, lora, trainable_base)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (tq, width) = x.dims2()?;
        let tk = context.dim(0)?;
        let hd = width / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((len, self.heads, hd))?.transpose(0, 1)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?, tq)?;
        let k = split(self.k.forward(context)?, tk)?;
        let v = split(self.v.forward(context)?, tk)?;
        let mut scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let att = softmax_last(&scores)?;
        let out = att.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((tq, width))?;
        self.o.forward(&out)
    }
}

/// Extracts a scalar from a rank-0 or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?[0])
}
