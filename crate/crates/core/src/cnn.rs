//! Plain convolutional baseline: four strided conv blocks and a choice of
//! two classifier heads (small or large) ending in a softmax over the
//! three ship classes.

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::init::{init_conv, init_dense, zeros};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarcaps_tensor::{Scalar, Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    S,
    L,
}

impl HeadKind {
    pub fn hidden(&self) -> [usize; 2] {
        match self {
            HeadKind::S => [32, 16],
            HeadKind::L => [1024, 512],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::S => "S",
            HeadKind::L => "L",
        }
    }
}

impl FromStr for HeadKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(HeadKind::S),
            "L" | "l" => Ok(HeadKind::L),
            other => Err(CoreError::InvalidArgument(format!("unknown head {other:?}, expected S or L"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CnnConfig {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    pub num_classes: usize,
    pub head: HeadKind,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            input_size: 64,
            channels: vec![16, 32, 64, 64],
            kernel_size: 3,
            stride: 2,
            num_classes: 3,
            head: HeadKind::S,
        }
    }
}

impl CnnConfig {
    pub fn with_head(head: HeadKind) -> Self {
        CnnConfig { head, ..CnnConfig::default() }
    }

    /// Feature-map sizes after each block (64 -> 31, 15, 7, 3).
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut s = self.input_size;
        self.channels
            .iter()
            .map(|_| {
                s = (s - self.kernel_size) / self.stride + 1;
                s
            })
            .collect()
    }

    pub fn flat_features(&self) -> usize {
        let last = *self.spatial_sizes().last().expect("at least one block");
        last * last * self.channels.last().expect("at least one block")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(CoreError::Config("cnn needs at least one conv block".into()));
        }
        if self.channels.iter().any(|&c| c == 0)
            || self.input_size == 0
            || self.kernel_size == 0
            || self.stride == 0
            || self.num_classes == 0
        {
            return Err(CoreError::Config("cnn config fields must be positive".into()));
        }
        let mut s = self.input_size;
        for _ in &self.channels {
            if self.kernel_size > s {
                return Err(CoreError::Config(format!(
                    "kernel {} exceeds feature map {s}",
                    self.kernel_size
                )));
            }
            s = (s - self.kernel_size) / self.stride + 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Cnn<T> {
    pub config: CnnConfig,
    /// (kernel `[k,k,cin,cout]`, bias `[cout]`) per block.
    pub blocks: Vec<(Tensor<T>, Tensor<T>)>,
    /// (weight `[in,out]`, bias `[out]`) for head1, head2, out.
    pub dense: Vec<(Tensor<T>, Tensor<T>)>,
}

fn block_name(i: usize, part: &str) -> String {
    format!("block{}.{part}", i + 1)
}

fn dense_name(i: usize, part: &str) -> String {
    let stem = match i {
        0 => "head1",
        1 => "head2",
        _ => "out",
    };
    format!("{stem}.{part}")
}

impl<T: Scalar> Cnn<T> {
    pub fn init(config: CnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;
        let mut blocks = Vec::new();
        let mut cin = 1;
        for &cout in &config.channels {
            blocks.push((init_conv(vec![k, k, cin, cout], &mut rng), zeros(vec![cout])));
            cin = cout;
        }
        let [h1, h2] = config.head.hidden();
        let sizes = [(config.flat_features(), h1), (h1, h2), (h2, config.num_classes)];
        let dense = sizes
            .iter()
            .map(|&(i, o)| (init_dense(vec![i, o], &mut rng), zeros(vec![o])))
            .collect();
        Ok(Cnn { config, blocks, dense })
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (kern, bias)) in self.blocks.iter().enumerate() {
            out.push((block_name(i, "k"), kern));
            out.push((block_name(i, "b"), bias));
        }
        for (i, (w, b)) in self.dense.iter().enumerate() {
            out.push((dense_name(i, "w"), w));
            out.push((dense_name(i, "b"), b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (kern, bias)) in self.blocks.iter_mut().enumerate() {
            out.push((block_name(i, "k"), kern));
            out.push((block_name(i, "b"), bias));
        }
        for (i, (w, b)) in self.dense.iter_mut().enumerate() {
            out.push((dense_name(i, "w"), w));
            out.push((dense_name(i, "b"), b));
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "model": "cnn", "config": self.config });
        let mut ckpt = Checkpoint::new(meta);
        for (name, t) in self.params() {
            ckpt.push(name, t.cast::<f32>());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: CnnConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| CoreError::Config("checkpoint lacks a cnn config".into()))?,
        )?;
        let mut model = Cnn::init(config, 0)?;
        for (name, slot) in model.params_mut() {
            let stored = ckpt
                .get(&name)
                .ok_or_else(|| CoreError::Config(format!("checkpoint lacks tensor {name}")))?;
            if stored.shape() != slot.shape() {
                return Err(CoreError::Config(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.cast::<T>();
        }
        Ok(model)
    }
}

/// Tape handles for one insertion of the parameters.
#[derive(Debug, Clone)]
pub struct CnnIds {
    pub blocks: Vec<(TensorId, TensorId)>,
    pub dense: Vec<(TensorId, TensorId)>,
}

impl CnnIds {
    pub fn ordered(&self) -> Vec<TensorId> {
        self.blocks
            .iter()
            .chain(self.dense.iter())
            .flat_map(|&(a, b)| [a, b])
            .collect()
    }
}

pub fn insert_params<T: Scalar>(tape: &mut Tape<T>, model: &Cnn<T>, trainable: bool) -> CnnIds {
    let mut put = |t: &Tensor<T>| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    CnnIds {
        blocks: model.blocks.iter().map(|(k, b)| (put(k), put(b))).collect(),
        dense: model.dense.iter().map(|(w, b)| (put(w), put(b))).collect(),
    }
}

/// Full pass from a `[S,S,1]` tile to class probabilities `[1,C]`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &CnnIds,
    config: &CnnConfig,
    tile: TensorId,
) -> Result<TensorId> {
    let s = config.input_size;
    if tape.shape(tile) != [s, s, 1] {
        return Err(CoreError::InvalidArgument(format!(
            "tile shape {:?} does not match configured input {s}x{s}x1",
            tape.shape(tile)
        )));
    }
    let mut x = tile;
    for &(kern, bias) in &ids.blocks {
        x = tape.conv2d(x, kern, config.stride)?;
        x = tape.add_channel_bias(x, bias)?;
        x = tape.relu(x)?;
    }
    let mut h = tape.reshape(x, vec![1, config.flat_features()])?;
    let last = ids.dense.len() - 1;
    for (i, &(w, b)) in ids.dense.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_channel_bias(h, b)?;
        if i < last {
            h = tape.relu(h)?;
        }
    }
    Ok(tape.softmax(h, 1)?)
}

/// −Σ_k label_k · ln(p_k + 1e-12) for a one-hot label over `[1,C]` (or
/// `[C]`) probabilities. Rejects inputs that are not a distribution.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, probs: TensorId, label: &[T]) -> Result<TensorId> {
    let shape = tape.shape(probs).to_vec();
    let flat_len: usize = shape.iter().product();
    if flat_len != label.len() || shape.len() > 2 || (shape.len() == 2 && shape[0] != 1) {
        return Err(CoreError::InvalidArgument(format!(
            "probabilities {shape:?} do not match label length {}",
            label.len()
        )));
    }
    crate::capsnet::check_one_hot(label)?;
    let total: f64 = tape.data(probs).iter().map(|v| v.to_f64x()).sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(CoreError::InvalidArgument(format!(
            "probabilities sum to {total}, not a distribution"
        )));
    }
    let flat = tape.reshape(probs, vec![flat_len])?;
    let shifted = tape.add_scalar(flat, T::from_f64x(1e-12))?;
    let logs = tape.ln(shifted)?;
    let label_t = tape.constant(Tensor::new(vec![flat_len], label.to_vec())?);
    let picked = tape.mul(logs, label_t)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -T::one())?)
}

/// Cross-entropy for one labeled tile; returns `(loss, probs)`.
pub fn sample_loss<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &CnnIds,
    config: &CnnConfig,
    tile: TensorId,
    label: &[T],
) -> Result<(TensorId, TensorId)> {
    let probs = forward(tape, ids, config, tile)?;
    let loss = cross_entropy(tape, probs, label)?;
    Ok((loss, probs))
}
