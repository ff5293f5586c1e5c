//! Trainable-parameter storage and the small set of layers shared by the
//! segmentation network and both codecs.
//!
//! Parameters are created from a seeded ChaCha stream rather than the tensor
//! backend's global RNG so that initialization is reproducible per seed.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const ORDER_KEY: &str = "param_order";

/// Named, ordered collection of trainable arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamBundle {
    entries: Vec<(String, Var)>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Invariant(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, var));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        Ok(self.get(name)?.as_tensor().clone())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copy with fresh storage; later updates to `self` do not leak into the copy.
    pub fn deep_clone(&self) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    /// Flat f64 copy of every parameter, in bundle order.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<f64>)>> {
        self.entries
            .iter()
            .map(|(n, v)| {
                Ok((
                    n.clone(),
                    v.as_tensor()
                        .to_dtype(DType::F64)?
                        .flatten_all()?
                        .to_vec1::<f64>()?,
                ))
            })
            .collect()
    }

    /// Bitwise equality of parameter values against a snapshot.
    pub fn matches_snapshot(&self, snap: &[(String, Vec<f64>)]) -> Result<bool> {
        let now = self.snapshot()?;
        Ok(now.len() == snap.len()
            && now.iter().zip(snap).all(|((na, a), (nb, b))| {
                na == nb
                    && a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }))
    }

    pub fn all_finite(&self) -> Result<bool> {
        for (_, v) in &self.entries {
            let s = v
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            if s.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Overwrites one parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        self.get(name)?.set(value)?;
        Ok(())
    }

    pub fn save(&self, path: &Path, meta: &HashMap<String, String>) -> Result<()> {
        let mut info = meta.clone();
        let order: Vec<&str> = self.names().collect();
        info.insert(ORDER_KEY.into(), serde_json::to_string(&order)?);
        let tensors: Vec<(&str, &Tensor)> = self
            .entries
            .iter()
            .map(|(n, v)| (n.as_str(), v.as_tensor()))
            .collect();
        safetensors::serialize_to_file(tensors, Some(info), path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        Ok(())
    }

    /// Loads an archive written by [`ParamBundle::save`], returning the stored metadata.
    pub fn load(path: &Path, device: &Device) -> Result<(Self, HashMap<String, String>)> {
        use candle_core::safetensors::Load;

        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: safetensors::SafeTensorError| Error::Ingestion {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let (_, metadata) = safetensors::SafeTensors::read_metadata(&bytes).map_err(bad)?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(bad)?;
        let mut meta = metadata.metadata().clone().unwrap_or_default();
        let order: Vec<String> = match meta.remove(ORDER_KEY) {
            Some(s) => serde_json::from_str(&s)?,
            None => {
                let mut names: Vec<String> = st.names().into_iter().map(String::from).collect();
                names.sort();
                names
            }
        };
        let mut bundle = Self::new();
        for name in order {
            let view = st.tensor(&name).map_err(bad)?;
            let t = view.load(device)?;
            bundle.insert(name, Var::from_tensor(&t)?)?;
        }
        Ok((bundle, meta))
    }
}

/// Seeded parameter factory.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: &'a Device,
}

impl Init<'_> {
    /// Xavier/Glorot uniform: `U(-a, a)` with `a = √(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Var> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n)
            .map(|_| (self.rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        self.from_values(shape, vals)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let vals: Vec<f64> = (0..n)
            .map(|_| rand_distr::Distribution::sample(&dist, self.rng))
            .collect();
        self.from_values(shape, vals)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.from_values(shape, vec![value; n])
    }

    fn from_values(&self, shape: &[usize], vals: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(vals, shape, self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }
}

/// 2-D convolution with bias, stride 1 and symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv2d {
    pub fn create(
        bundle: &mut ParamBundle,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        let k2 = kernel * kernel;
        let w = init.xavier(&[out_ch, in_ch, kernel, kernel], in_ch * k2, out_ch * k2)?;
        let b = init.constant(&[out_ch], 0.0)?;
        bundle.insert(format!("{name}.weight"), w)?;
        bundle.insert(format!("{name}.bias"), b)?;
        Self::from_bundle(bundle, name, kernel / 2)
    }

    pub fn from_bundle(bundle: &ParamBundle, name: &str, padding: usize) -> Result<Self> {
        Ok(Self {
            weight: bundle.tensor(&format!("{name}.weight"))?,
            bias: bundle.tensor(&format!("{name}.bias"))?,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Transposed 2-D convolution at stride 1; weight layout `(in, out, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn create(
        bundle: &mut ParamBundle,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        let k2 = kernel * kernel;
        let w = init.xavier(&[in_ch, out_ch, kernel, kernel], out_ch * k2, in_ch * k2)?;
        let b = init.constant(&[out_ch], 0.0)?;
        bundle.insert(format!("{name}.weight"), w)?;
        bundle.insert(format!("{name}.bias"), b)?;
        Self::from_bundle(bundle, name, kernel / 2)
    }

    pub fn from_bundle(bundle: &ParamBundle, name: &str, padding: usize) -> Result<Self> {
        Ok(Self {
            weight: bundle.tensor(&format!("{name}.weight"))?,
            bias: bundle.tensor(&format!("{name}.bias"))?,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }
}

impl Module for ConvTranspose2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, 1, 1)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Affine map over the last dimension; weight layout `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn create(
        bundle: &mut ParamBundle,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        bundle.insert(
            format!("{name}.weight"),
            init.xavier(&[out_dim, in_dim], in_dim, out_dim)?,
        )?;
        if bias {
            bundle.insert(format!("{name}.bias"), init.constant(&[out_dim], 0.0)?)?;
        }
        Self::from_bundle(bundle, name, bias)
    }

    pub fn from_bundle(bundle: &ParamBundle, name: &str, bias: bool) -> Result<Self> {
        Ok(Self {
            weight: bundle.tensor(&format!("{name}.weight"))?,
            bias: if bias {
                Some(bundle.tensor(&format!("{name}.bias"))?)
            } else {
                None
            },
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        // fold leading dims so the weight is shared, not broadcast per batch
        let dims = x.dims();
        let (last, lead) = dims.split_last().expect("linear input has a feature axis");
        let rows = lead.iter().product::<usize>();
        let y = x.reshape((rows, *last))?.matmul(&self.weight.t()?)?;
        let mut out_dims = lead.to_vec();
        out_dims.push(self.weight.dim(0)?);
        let y = y.reshape(out_dims)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last dimension, built from differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn create(bundle: &mut ParamBundle, init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        bundle.insert(format!("{name}.gamma"), init.constant(&[dim], 1.0)?)?;
        bundle.insert(format!("{name}.beta"), init.constant(&[dim], 0.0)?)?;
        Self::from_bundle(bundle, name)
    }

    pub fn from_bundle(bundle: &ParamBundle, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: bundle.tensor(&format!("{name}.gamma"))?,
            beta: bundle.tensor(&format!("{name}.beta"))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Optimizer settings shared by every trainable component.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 10,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Adam with decoupled weight decay over `vars`; `None` when the step is a no-op.
    pub fn optimizer(&self, vars: Vec<Var>) -> Result<Option<AdamW>> {
        if self.learning_rate == 0.0 || vars.is_empty() {
            return Ok(None);
        }
        let params = ParamsAdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        };
        Ok(Some(AdamW::new(vars, params)?))
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    /// Training-set loss before the first update.
    pub initial_loss: f64,
    /// Training-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Runs one optimizer step if an optimizer is present.
pub fn step(opt: &mut Option<AdamW>, loss: &Tensor) -> Result<()> {
    if let Some(opt) = opt.as_mut() {
        opt.backward_step(loss)?;
    }
    Ok(())
}

/// Scalar value of a rank-0 tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Fixed-order minibatches of `0..n`, reshuffled per epoch from `rng`.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bundle_archive_round_trip() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init {
            rng: &mut rng,
            dtype: DType::F32,
            device: &dev,
        };
        let mut b = ParamBundle::new();
        Conv2d::create(&mut b, &mut init, "c", 3, 4, 3).unwrap();
        Linear::create(&mut b, &mut init, "l", 4, 2, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let mut meta = HashMap::new();
        meta.insert("stage".to_string(), "2".to_string());
        b.save(&path, &meta).unwrap();
        let (back, meta_back) = ParamBundle::load(&path, &dev).unwrap();
        assert_eq!(meta_back.get("stage").map(String::as_str), Some("2"));
        assert_eq!(
            back.names().collect::<Vec<_>>(),
            vec!["c.weight", "c.bias", "l.weight"]
        );
        assert!(back.matches_snapshot(&b.snapshot().unwrap()).unwrap());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let dev = Device::Cpu;
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut init = Init {
                rng: &mut rng,
                dtype: DType::F32,
                device: &dev,
            };
            init.xavier(&[5, 7], 7, 5).unwrap()
        };
        let a = make().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = make().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let bound = (6.0f32 / 12.0).sqrt();
        assert!(a.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn layer_norm_normalizes() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut init = Init {
            rng: &mut rng,
            dtype: DType::F64,
            device: &dev,
        };
        let mut b = ParamBundle::new();
        let ln = LayerNorm::create(&mut b, &mut init, "ln", 6).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0, 5.0, 9.0]], &dev).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 6.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn transposed_conv_preserves_size() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init {
            rng: &mut rng,
            dtype: DType::F32,
            device: &dev,
        };
        let mut b = ParamBundle::new();
        let ct = ConvTranspose2d::create(&mut b, &mut init, "ct", 4, 6, 3).unwrap();
        let x = Tensor::zeros((2, 4, 8, 8), DType::F32, &dev).unwrap();
        assert_eq!(ct.forward(&x).unwrap().dims(), &[2, 6, 8, 8]);
    }
}
