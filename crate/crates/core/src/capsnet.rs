//! Capsule network: conv front-end, primary capsules, dynamic
//! routing-by-agreement to one 16-D capsule per ship class, margin loss,
//! and a reconstruction decoder.

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::init::{init_conv, init_dense, init_tensor, zeros, ROUTING_STD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarcaps_tensor::{Scalar, Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CapsNetConfig {
    pub input_size: usize,
    pub conv1_kernels: usize,
    pub conv1_size: usize,
    pub conv1_stride: usize,
    pub primary_channels: usize,
    pub caps_dim: usize,
    pub primary_size: usize,
    pub primary_stride: usize,
    pub num_classes: usize,
    pub class_caps_dim: usize,
    pub routing_iterations: usize,
    pub recon_scale: f64,
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    pub decoder_hidden1: usize,
    pub decoder_hidden2: usize,
}

impl Default for CapsNetConfig {
    fn default() -> Self {
        CapsNetConfig::paper()
    }
}

impl CapsNetConfig {
    /// Full-scale architecture: 128×128 input, stride-1 conv front-end,
    /// 56×56×32 = 100352 primary capsules. The routing tensor alone is
    /// ~3.9e8 parameters — runnable, but not on a whim.
    pub fn paper() -> Self {
        CapsNetConfig {
            input_size: 128,
            conv1_kernels: 256,
            conv1_size: 9,
            conv1_stride: 1,
            primary_channels: 32,
            caps_dim: 8,
            primary_size: 9,
            primary_stride: 2,
            num_classes: 3,
            class_caps_dim: 16,
            routing_iterations: 3,
            recon_scale: 0.0005,
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
            decoder_hidden1: 512,
            decoder_hidden2: 1024,
        }
    }

    /// Same architecture family at test scale: 64×64 input and a stride-2
    /// front-end give 10×10×32 = 3200 primary capsules.
    pub fn desk() -> Self {
        CapsNetConfig { input_size: 64, conv1_stride: 2, ..CapsNetConfig::paper() }
    }

    /// Tiny instance for exhaustive finite-difference checks.
    pub fn mini() -> Self {
        CapsNetConfig {
            input_size: 16,
            conv1_kernels: 8,
            conv1_size: 5,
            conv1_stride: 2,
            primary_channels: 2,
            caps_dim: 4,
            primary_size: 3,
            primary_stride: 2,
            num_classes: 3,
            class_caps_dim: 6,
            routing_iterations: 3,
            recon_scale: 0.0005,
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
            decoder_hidden1: 16,
            decoder_hidden2: 32,
        }
    }

    pub fn conv1_out(&self) -> usize {
        (self.input_size - self.conv1_size) / self.conv1_stride + 1
    }

    pub fn primary_grid(&self) -> usize {
        (self.conv1_out() - self.primary_size) / self.primary_stride + 1
    }

    pub fn num_primary(&self) -> usize {
        self.primary_grid() * self.primary_grid() * self.primary_channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_size,
            self.conv1_kernels,
            self.conv1_size,
            self.conv1_stride,
            self.primary_channels,
            self.caps_dim,
            self.primary_size,
            self.primary_stride,
            self.num_classes,
            self.class_caps_dim,
            self.routing_iterations,
            self.decoder_hidden1,
            self.decoder_hidden2,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(CoreError::Config("capsnet config fields must be positive".into()));
        }
        if self.m_minus >= self.m_plus {
            return Err(CoreError::Config(format!(
                "m_minus {} must be below m_plus {}",
                self.m_minus, self.m_plus
            )));
        }
        if self.recon_scale < 0.0 {
            return Err(CoreError::Config("recon_scale must be nonnegative".into()));
        }
        if self.conv1_size > self.input_size || self.primary_size > self.conv1_out() {
            return Err(CoreError::Config("kernel sizes exceed feature maps".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CapsNet<T> {
    pub config: CapsNetConfig,
    pub conv1_k: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub primary_k: Tensor<T>,
    pub primary_b: Tensor<T>,
    pub routing_w: Tensor<T>,
    pub dec_w1: Tensor<T>,
    pub dec_b1: Tensor<T>,
    pub dec_w2: Tensor<T>,
    pub dec_b2: Tensor<T>,
    pub dec_w3: Tensor<T>,
    pub dec_b3: Tensor<T>,
}

impl<T: Scalar> CapsNet<T> {
    pub fn init(config: CapsNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caps_channels = config.primary_channels * config.caps_dim;
        let n = config.num_primary();
        let dec_in = config.num_classes * config.class_caps_dim;
        let out_px = config.input_size * config.input_size;
        Ok(CapsNet {
            conv1_k: init_conv(vec![config.conv1_size, config.conv1_size, 1, config.conv1_kernels], &mut rng),
            conv1_b: zeros(vec![config.conv1_kernels]),
            primary_k: init_conv(
                vec![config.primary_size, config.primary_size, config.conv1_kernels, caps_channels],
                &mut rng,
            ),
            primary_b: zeros(vec![caps_channels]),
            routing_w: init_tensor(
                vec![n, config.num_classes, config.caps_dim, config.class_caps_dim],
                ROUTING_STD,
                &mut rng,
            ),
            dec_w1: init_dense(vec![dec_in, config.decoder_hidden1], &mut rng),
            dec_b1: zeros(vec![config.decoder_hidden1]),
            dec_w2: init_dense(vec![config.decoder_hidden1, config.decoder_hidden2], &mut rng),
            dec_b2: zeros(vec![config.decoder_hidden2]),
            dec_w3: init_dense(vec![config.decoder_hidden2, out_px], &mut rng),
            dec_b3: zeros(vec![out_px]),
            config,
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("conv1.k", &self.conv1_k),
            ("conv1.b", &self.conv1_b),
            ("primary.k", &self.primary_k),
            ("primary.b", &self.primary_b),
            ("routing.w", &self.routing_w),
            ("decoder.w1", &self.dec_w1),
            ("decoder.b1", &self.dec_b1),
            ("decoder.w2", &self.dec_w2),
            ("decoder.b2", &self.dec_b2),
            ("decoder.w3", &self.dec_w3),
            ("decoder.b3", &self.dec_b3),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("conv1.k", &mut self.conv1_k),
            ("conv1.b", &mut self.conv1_b),
            ("primary.k", &mut self.primary_k),
            ("primary.b", &mut self.primary_b),
            ("routing.w", &mut self.routing_w),
            ("decoder.w1", &mut self.dec_w1),
            ("decoder.b1", &mut self.dec_b1),
            ("decoder.w2", &mut self.dec_w2),
            ("decoder.b2", &mut self.dec_b2),
            ("decoder.w3", &mut self.dec_w3),
            ("decoder.b3", &mut self.dec_b3),
        ]
    }
}

impl<T: Scalar> CapsNet<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "model": "capsnet", "config": self.config });
        let mut ckpt = Checkpoint::new(meta);
        for (name, t) in self.params() {
            ckpt.push(name, t.cast::<f32>());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: CapsNetConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| CoreError::Config("checkpoint lacks a capsnet config".into()))?,
        )?;
        let mut model = CapsNet::init(config, 0)?;
        for (name, slot) in model.params_mut() {
            let stored = ckpt
                .get(name)
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
#[derive(Debug, Clone, Copy)]
pub struct CapsIds {
    pub conv1_k: TensorId,
    pub conv1_b: TensorId,
    pub primary_k: TensorId,
    pub primary_b: TensorId,
    pub routing_w: TensorId,
    pub dec_w1: TensorId,
    pub dec_b1: TensorId,
    pub dec_w2: TensorId,
    pub dec_b2: TensorId,
    pub dec_w3: TensorId,
    pub dec_b3: TensorId,
}

impl CapsIds {
    pub fn ordered(&self) -> [TensorId; 11] {
        [
            self.conv1_k, self.conv1_b, self.primary_k, self.primary_b, self.routing_w,
            self.dec_w1, self.dec_b1, self.dec_w2, self.dec_b2, self.dec_w3, self.dec_b3,
        ]
    }
}

pub fn insert_params<T: Scalar>(tape: &mut Tape<T>, model: &CapsNet<T>, trainable: bool) -> CapsIds {
    let mut put = |t: &Tensor<T>| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    CapsIds {
        conv1_k: put(&model.conv1_k),
        conv1_b: put(&model.conv1_b),
        primary_k: put(&model.primary_k),
        primary_b: put(&model.primary_b),
        routing_w: put(&model.routing_w),
        dec_w1: put(&model.dec_w1),
        dec_b1: put(&model.dec_b1),
        dec_w2: put(&model.dec_w2),
        dec_b2: put(&model.dec_b2),
        dec_w3: put(&model.dec_w3),
        dec_b3: put(&model.dec_b3),
    }
}

/// Routing-by-agreement over prediction vectors `u_hat [N,C,D]`.
/// Logits start at zero; each iteration couples by softmax over classes,
/// sums, squashes, and (except after the last pass) adds the agreement
/// û·v back into the logits. Returns the final class capsules `[C,D]`
/// and the couplings `[N,C]` of every iteration.
pub fn dynamic_routing<T: Scalar>(
    tape: &mut Tape<T>,
    u_hat: TensorId,
    iterations: usize,
) -> Result<(TensorId, Vec<TensorId>)> {
    if iterations < 1 {
        return Err(CoreError::InvalidArgument("routing needs at least one iteration".into()));
    }
    let shape = tape.shape(u_hat).to_vec();
    if shape.len() != 3 {
        return Err(CoreError::InvalidArgument(format!("u_hat must be [N,C,D], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let mut logits = tape.constant(Tensor::zeros(vec![n, c]));
    let mut couplings = Vec::with_capacity(iterations);
    let mut v = None;
    for it in 0..iterations {
        let coup = tape.softmax(logits, 1)?;
        couplings.push(coup);
        let s = tape.weighted_caps_sum(coup, u_hat)?;
        let vi = tape.squash_rows(s)?;
        if it + 1 < iterations {
            let agreement = tape.caps_agreement(u_hat, vi)?;
            logits = tape.add(logits, agreement)?;
        }
        v = Some(vi);
    }
    Ok((v.expect("iterations >= 1"), couplings))
}

/// Everything the rest of the system needs from one forward pass.
pub struct CapsForward {
    /// Squashed primary poses `[N, caps_dim]`.
    pub primary: TensorId,
    /// Class capsules `[C, class_caps_dim]`.
    pub v: TensorId,
    /// Class scores = capsule norms `[C]`.
    pub norms: TensorId,
    /// Per-iteration routing couplings `[N, C]`.
    pub couplings: Vec<TensorId>,
}

pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &CapsIds,
    config: &CapsNetConfig,
    tile: TensorId,
) -> Result<CapsForward> {
    let s = config.input_size;
    if tape.shape(tile) != [s, s, 1] {
        return Err(CoreError::InvalidArgument(format!(
            "tile shape {:?} does not match configured input {s}x{s}x1",
            tape.shape(tile)
        )));
    }
    let c1 = tape.conv2d(tile, ids.conv1_k, config.conv1_stride)?;
    let c1 = tape.add_channel_bias(c1, ids.conv1_b)?;
    let c1 = tape.relu(c1)?;

    let p = tape.conv2d(c1, ids.primary_k, config.primary_stride)?;
    let p = tape.add_channel_bias(p, ids.primary_b)?;
    let poses = tape.reshape(p, vec![config.num_primary(), config.caps_dim])?;
    let primary = tape.squash_rows(poses)?;

    let u_hat = tape.caps_predict(primary, ids.routing_w)?;
    let (v, couplings) = dynamic_routing(tape, u_hat, config.routing_iterations)?;
    let norms = tape.row_norms(v)?;
    Ok(CapsForward { primary, v, norms, couplings })
}

pub(crate) fn check_one_hot<T: Scalar>(label: &[T]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in label.iter().enumerate() {
        if v == T::one() {
            if hot.is_some() {
                return Err(CoreError::InvalidArgument("label has multiple hot entries".into()));
            }
            hot = Some(i);
        } else if v != T::zero() {
            return Err(CoreError::InvalidArgument("label entries must be 0 or 1".into()));
        }
    }
    hot.ok_or_else(|| CoreError::InvalidArgument("label has no hot entry".into()))
}

/// Σ_k T_k·max(0, m⁺−‖v_k‖)² + λ·(1−T_k)·max(0, ‖v_k‖−m⁻)²
pub fn margin_loss<T: Scalar>(
    tape: &mut Tape<T>,
    config: &CapsNetConfig,
    norms: TensorId,
    label: &[T],
) -> Result<TensorId> {
    if tape.shape(norms) != [label.len()] {
        return Err(CoreError::InvalidArgument(format!(
            "norms shape {:?} vs label length {}",
            tape.shape(norms),
            label.len()
        )));
    }
    check_one_hot(label)?;
    let c = label.len();
    let t = tape.constant(Tensor::new(vec![c], label.to_vec())?);
    let not_t: Vec<T> = label.iter().map(|&v| T::one() - v).collect();
    let not_t = tape.constant(Tensor::new(vec![c], not_t)?);

    let neg_norms = tape.scale(norms, -T::one())?;
    let present = tape.add_scalar(neg_norms, T::from_f64x(config.m_plus))?;
    let present = tape.relu(present)?;
    let present = tape.mul(present, present)?;
    let present = tape.mul(present, t)?;

    let absent = tape.add_scalar(norms, -T::from_f64x(config.m_minus))?;
    let absent = tape.relu(absent)?;
    let absent = tape.mul(absent, absent)?;
    let absent = tape.mul(absent, not_t)?;
    let absent = tape.scale(absent, T::from_f64x(config.lambda))?;

    let per_class = tape.add(present, absent)?;
    Ok(tape.sum(per_class)?)
}

/// Mask all but one class capsule, then dense 512 → 1024 → size² with
/// relu/relu/sigmoid. Returns `[1, size²]` in (0,1).
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &CapsIds,
    config: &CapsNetConfig,
    v: TensorId,
    mask: &[T],
) -> Result<TensorId> {
    check_one_hot(mask)?;
    let mask_t = tape.constant(Tensor::new(vec![mask.len()], mask.to_vec())?);
    let masked = tape.mask_rows(v, mask_t)?;
    let flat = tape.reshape(masked, vec![1, config.num_classes * config.class_caps_dim])?;

    let h1 = tape.matmul(flat, ids.dec_w1)?;
    let h1 = tape.add_channel_bias(h1, ids.dec_b1)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.matmul(h1, ids.dec_w2)?;
    let h2 = tape.add_channel_bias(h2, ids.dec_b2)?;
    let h2 = tape.relu(h2)?;
    let out = tape.matmul(h2, ids.dec_w3)?;
    let out = tape.add_channel_bias(out, ids.dec_b3)?;
    Ok(tape.sigmoid(out)?)
}

/// scale · Σ(recon − target)²
pub fn reconstruction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    config: &CapsNetConfig,
    recon: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    let diff = tape.sub(recon, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(total, T::from_f64x(config.recon_scale))?)
}

/// Margin + scaled reconstruction for one labeled tile. Returns
/// `(loss, norms)` so callers can also score the prediction.
pub fn sample_loss<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &CapsIds,
    config: &CapsNetConfig,
    tile: TensorId,
    label: &[T],
) -> Result<(TensorId, TensorId)> {
    let fwd = forward(tape, ids, config, tile)?;
    let margin = margin_loss(tape, config, fwd.norms, label)?;
    let recon = decoder_forward(tape, ids, config, fwd.v, label)?;
    let px = config.input_size * config.input_size;
    let target = tape.reshape(tile, vec![1, px])?;
    let recon_l = reconstruction_loss(tape, config, recon, target)?;
    let loss = tape.add(margin, recon_l)?;
    Ok((loss, fwd.norms))
}

/// Independent routing reference: plain f64 loops over the definition.
/// Used by tests; kept in the library so the CLI gradcheck suites can
/// cross-check against it too.
pub fn routing_oracle(u_hat: &[f64], n: usize, c: usize, d: usize, iterations: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(u_hat.len(), n * c * d);
    let mut logits = vec![0f64; n * c];
    let mut v = vec![0f64; c * d];
    let mut couplings = vec![0f64; n * c];
    for it in 0..iterations {
        for i in 0..n {
            let row = &logits[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&b| (b - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..c {
                couplings[i * c + j] = exps[j] / total;
            }
        }
        for j in 0..c {
            for e in 0..d {
                let mut acc = 0f64;
                for i in 0..n {
                    acc += couplings[i * c + j] * u_hat[(i * c + j) * d + e];
                }
                v[j * d + e] = acc;
            }
        }
        for j in 0..c {
            let row = &mut v[j * d..(j + 1) * d];
            let sq: f64 = row.iter().map(|x| x * x).sum();
            let g = (sq / (1.0 + sq)) / (sq + 1e-9).sqrt();
            for x in row {
                *x *= g;
            }
        }
        if it + 1 < iterations {
            for i in 0..n {
                for j in 0..c {
                    let mut dot = 0f64;
                    for e in 0..d {
                        dot += u_hat[(i * c + j) * d + e] * v[j * d + e];
                    }
                    logits[i * c + j] += dot;
                }
            }
        }
    }
    (v, couplings)
}
