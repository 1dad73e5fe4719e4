//! Per-class DCGAN rebalancer: a generator (dense projection + four
//! transposed-conv doublings, tanh output) against a specular
//! discriminator, trained adversarially on one ship class and used to top
//! the class up to a fixed tile count.

use crate::checkpoint::Checkpoint;
use crate::data::{
    denormalize_tile, normalize_tile, resize_or_pad, Manifest, Polarization, SarTile, ShipClass,
    Split, TileRecord, DB_MAX, DB_MIN,
};
use crate::error::{CoreError, Result};
use crate::init::{init_tensor, standard_normal, zeros};
use crate::optim::{Adam, AdamParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarcaps_tensor::{Scalar, Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// All GAN weights start from N(0, 0.02), truncated at two sigma.
pub const GAN_INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-12;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub tile_size: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub target_per_class: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig::paper()
    }
}

impl GanConfig {
    /// Full scale: 128×128 tiles from an 8×8×256 base grid, 2000 epochs.
    pub fn paper() -> Self {
        GanConfig {
            latent_dim: 100,
            tile_size: 128,
            base_channels: 256,
            kernel_size: 4,
            epochs: 2000,
            batch: 32,
            lr: 0.002,
            beta1: 0.5,
            beta2: 0.999,
            target_per_class: 2000,
        }
    }

    /// Test scale: 32×32 tiles (2×2 base grid), 200 epochs.
    pub fn desk() -> Self {
        GanConfig { tile_size: 32, epochs: 200, ..GanConfig::paper() }
    }

    /// Side of the dense-projection feature map; four doublings take it to
    /// the tile size.
    pub fn base_grid(&self) -> usize {
        self.tile_size / 16
    }

    /// Generator channel progression (base → 1-channel tile).
    fn g_channels(&self) -> [usize; 5] {
        let b = self.base_channels;
        [b, b / 2, b / 4, b / 8, 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 16 || self.tile_size % 16 != 0 {
            return Err(CoreError::Config(format!(
                "tile size {} must be a positive multiple of 16 (four 2x upsamplings)",
                self.tile_size
            )));
        }
        if self.kernel_size != 4 {
            return Err(CoreError::Config(
                "the upsampling stack is defined for kernel 4, stride 2".into(),
            ));
        }
        if self.base_channels < 8 || self.base_channels % 8 != 0 {
            return Err(CoreError::Config(format!(
                "base_channels {} must be a positive multiple of 8",
                self.base_channels
            )));
        }
        if self.latent_dim == 0 || self.epochs == 0 || self.batch == 0 || self.target_per_class == 0 {
            return Err(CoreError::Config("gan config fields must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    /// (kernel `[4,4,cout,cin]`, bias `[cout]`) per upsampling block.
    pub ups: Vec<(Tensor<T>, Tensor<T>)>,
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    /// (kernel `[4,4,cin,cout]`, bias `[cout]`) per downsampling block.
    pub convs: Vec<(Tensor<T>, Tensor<T>)>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

#[derive(Debug, Clone)]
pub struct GanPair<T> {
    pub config: GanConfig,
    pub class: ShipClass,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub history: Vec<EpochLoss>,
}

impl<T: Scalar> GanPair<T> {
    pub fn init(config: GanConfig, class: ShipClass, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = config.base_grid();
        let k = config.kernel_size;
        let ch = config.g_channels();
        let proj_out = b * b * config.base_channels;

        let proj_w = init_tensor(vec![config.latent_dim, proj_out], GAN_INIT_STD, &mut rng);
        let proj_b = zeros(vec![proj_out]);
        let ups = (0..4)
            .map(|i| {
                let (cin, cout) = (ch[i], ch[i + 1]);
                (init_tensor(vec![k, k, cout, cin], GAN_INIT_STD, &mut rng), zeros(vec![cout]))
            })
            .collect();

        let convs = (0..4)
            .map(|i| {
                let (cin, cout) = (ch[4 - i], ch[3 - i]);
                (init_tensor(vec![k, k, cin, cout], GAN_INIT_STD, &mut rng), zeros(vec![cout]))
            })
            .collect();
        let out_w = init_tensor(vec![proj_out, 1], GAN_INIT_STD, &mut rng);
        let out_b = zeros(vec![1]);

        Ok(GanPair {
            config,
            class,
            generator: Generator { proj_w, proj_b, ups },
            discriminator: Discriminator { convs, out_w, out_b },
            history: Vec::new(),
        })
    }

    pub fn g_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("g.proj.w".to_string(), &self.generator.proj_w),
            ("g.proj.b".to_string(), &self.generator.proj_b),
        ];
        for (i, (k, b)) in self.generator.ups.iter().enumerate() {
            out.push((format!("g.up{}.k", i + 1), k));
            out.push((format!("g.up{}.b", i + 1), b));
        }
        out
    }

    pub fn d_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.discriminator.convs.iter().enumerate() {
            out.push((format!("d.conv{}.k", i + 1), k));
            out.push((format!("d.conv{}.b", i + 1), b));
        }
        out.push(("d.out.w".to_string(), &self.discriminator.out_w));
        out.push(("d.out.b".to_string(), &self.discriminator.out_b));
        out
    }

    pub(crate) fn g_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.generator.proj_w, &mut self.generator.proj_b];
        for (k, b) in self.generator.ups.iter_mut() {
            out.push(k);
            out.push(b);
        }
        out
    }

    pub(crate) fn d_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (k, b) in self.discriminator.convs.iter_mut() {
            out.push(k);
            out.push(b);
        }
        out.push(&mut self.discriminator.out_w);
        out.push(&mut self.discriminator.out_b);
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "model": "gan",
            "config": self.config,
            "class": self.class.as_str(),
            "history": self.history,
        });
        let mut ckpt = Checkpoint::new(meta);
        for (name, t) in self.g_params().into_iter().chain(self.d_params()) {
            ckpt.push(name, t.cast::<f32>());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: GanConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| CoreError::Config("checkpoint lacks a gan config".into()))?,
        )?;
        let class: ShipClass = ckpt
            .meta_str("class")
            .ok_or_else(|| CoreError::Config("checkpoint lacks a gan class".into()))?
            .parse()?;
        let history = match ckpt.meta.get("history") {
            Some(h) => serde_json::from_value(h.clone())?,
            None => Vec::new(),
        };
        let mut pair = GanPair::init(config, class, 0)?;
        pair.history = history;
        let names: Vec<String> = pair
            .g_params()
            .into_iter()
            .chain(pair.d_params())
            .map(|(n, _)| n)
            .collect();
        for name in names {
            let stored = ckpt
                .get(&name)
                .ok_or_else(|| CoreError::Config(format!("checkpoint lacks tensor {name}")))?
                .clone();
            let slot = pair.param_mut_by_name(&name)?;
            if stored.shape() != slot.shape() {
                return Err(CoreError::Config(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.cast::<T>();
        }
        Ok(pair)
    }

    fn param_mut_by_name(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let g_names: Vec<String> = self.g_params().into_iter().map(|(n, _)| n).collect();
        if let Some(i) = g_names.iter().position(|n| n == name) {
            return Ok(self.g_params_mut().swap_remove(i));
        }
        let d_names: Vec<String> = self.d_params().into_iter().map(|(n, _)| n).collect();
        if let Some(i) = d_names.iter().position(|n| n == name) {
            return Ok(self.d_params_mut().swap_remove(i));
        }
        Err(CoreError::Config(format!("unknown gan tensor {name}")))
    }
}

/// Spatial sizes through both nets, endpoints included: the discriminator
/// chain is the generator chain reversed.
pub fn layer_spatial_sizes(config: &GanConfig) -> (Vec<usize>, Vec<usize>) {
    let b = config.base_grid();
    let g: Vec<usize> = (0..5).map(|i| b << i).collect();
    let d: Vec<usize> = (0..5).map(|i| config.tile_size >> i).collect();
    (g, d)
}

pub struct GenIds {
    pub proj_w: TensorId,
    pub proj_b: TensorId,
    pub ups: Vec<(TensorId, TensorId)>,
}

pub struct DiscIds {
    pub convs: Vec<(TensorId, TensorId)>,
    pub out_w: TensorId,
    pub out_b: TensorId,
}

pub fn insert_generator<T: Scalar>(tape: &mut Tape<T>, g: &Generator<T>, trainable: bool) -> GenIds {
    let mut put = |t: &Tensor<T>| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    GenIds {
        proj_w: put(&g.proj_w),
        proj_b: put(&g.proj_b),
        ups: g.ups.iter().map(|(k, b)| (put(k), put(b))).collect(),
    }
}

pub fn insert_discriminator<T: Scalar>(
    tape: &mut Tape<T>,
    d: &Discriminator<T>,
    trainable: bool,
) -> DiscIds {
    let mut put = |t: &Tensor<T>| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    DiscIds {
        convs: d.convs.iter().map(|(k, b)| (put(k), put(b))).collect(),
        out_w: put(&d.out_w),
        out_b: put(&d.out_b),
    }
}

/// Noise vector `[latent]` or `[1,latent]` → tile `[S,S,1]` in [−1,1].
pub fn generator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &GenIds,
    config: &GanConfig,
    z: TensorId,
) -> Result<TensorId> {
    let zshape = tape.shape(z).to_vec();
    let flat: usize = zshape.iter().product();
    if flat != config.latent_dim || zshape.len() > 2 {
        return Err(CoreError::InvalidArgument(format!(
            "latent {zshape:?} does not match configured dimension {}",
            config.latent_dim
        )));
    }
    if !tape.value(z).is_finite() {
        return Err(CoreError::InvalidArgument("latent vector must be finite".into()));
    }
    let b = config.base_grid();
    let z2 = tape.reshape(z, vec![1, config.latent_dim])?;
    let h = tape.matmul(z2, ids.proj_w)?;
    let h = tape.add_channel_bias(h, ids.proj_b)?;
    let mut x = tape.reshape(h, vec![b, b, config.base_channels])?;
    let eps = T::from_f64x(NORM_EPS);
    for (i, &(k, bias)) in ids.ups.iter().enumerate() {
        let side = tape.shape(x)[0];
        x = tape.conv_transpose2d(x, k, 2)?;
        x = tape.crop_center(x, 2 * side, 2 * side)?;
        // The bias goes after the normalization (it acts as the norm's
        // offset); before it, the mean subtraction would cancel it exactly.
        if i + 1 < ids.ups.len() {
            x = tape.instance_norm(x, eps)?;
            x = tape.add_channel_bias(x, bias)?;
            x = tape.relu(x)?;
        } else {
            x = tape.add_channel_bias(x, bias)?;
            x = tape.tanh(x)?;
        }
    }
    Ok(x)
}

/// Tile `[S,S,1]` → probability-of-real `[1,1]`.
pub fn discriminator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &DiscIds,
    config: &GanConfig,
    tile: TensorId,
) -> Result<TensorId> {
    let s = config.tile_size;
    if tape.shape(tile) != [s, s, 1] {
        return Err(CoreError::InvalidArgument(format!(
            "tile shape {:?} does not match configured size {s}x{s}x1",
            tape.shape(tile)
        )));
    }
    let eps = T::from_f64x(NORM_EPS);
    let slope = T::from_f64x(LEAKY_SLOPE);
    let mut x = tile;
    for (i, &(k, bias)) in ids.convs.iter().enumerate() {
        x = tape.pad2d(x, 1)?;
        x = tape.conv2d(x, k, 2)?;
        // Normalization before the bias, as in the generator.
        if i > 0 {
            x = tape.instance_norm(x, eps)?;
        }
        x = tape.add_channel_bias(x, bias)?;
        x = tape.leaky_relu(x, slope)?;
    }
    let b = config.base_grid();
    let flat = tape.reshape(x, vec![1, b * b * config.base_channels])?;
    let out = tape.matmul(flat, ids.out_w)?;
    let out = tape.add_channel_bias(out, ids.out_b)?;
    Ok(tape.sigmoid(out)?)
}

/// −ln(p + ε) for a `[1,1]` probability.
fn nll_real<T: Scalar>(tape: &mut Tape<T>, p: TensorId) -> Result<TensorId> {
    let shifted = tape.add_scalar(p, T::from_f64x(LN_EPS))?;
    let l = tape.ln(shifted)?;
    Ok(tape.scale(l, -T::one())?)
}

/// −ln(1 − p + ε) for a `[1,1]` probability.
fn nll_fake<T: Scalar>(tape: &mut Tape<T>, p: TensorId) -> Result<TensorId> {
    let neg = tape.scale(p, -T::one())?;
    let shifted = tape.add_scalar(neg, T::one() + T::from_f64x(LN_EPS))?;
    let l = tape.ln(shifted)?;
    Ok(tape.scale(l, -T::one())?)
}

fn sum_losses<T: Scalar>(tape: &mut Tape<T>, parts: Vec<TensorId>) -> Result<TensorId> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

/// Adversarial trainer for one class-specialized pair. Keeps separate Adam
/// state for the two networks and a private noise stream.
pub struct GanTrainer<T> {
    pub pair: GanPair<T>,
    adam_g: Adam<T>,
    adam_d: Adam<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> GanTrainer<T> {
    pub fn new(config: GanConfig, class: ShipClass, seed: u64) -> Result<Self> {
        let pair = GanPair::init(config.clone(), class, seed)?;
        let adam = AdamParams { lr: config.lr, beta1: config.beta1, beta2: config.beta2, eps: 1e-8 };
        let g_sizes: Vec<usize> = pair.g_params().iter().map(|(_, t)| t.numel()).collect();
        let d_sizes: Vec<usize> = pair.d_params().iter().map(|(_, t)| t.numel()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(GanTrainer {
            pair,
            adam_g: Adam::new(adam, &g_sizes),
            adam_d: Adam::new(adam, &d_sizes),
            rng,
        })
    }

    fn draw_latent(&mut self) -> Tensor<T> {
        let data: Vec<T> = (0..self.pair.config.latent_dim)
            .map(|_| T::from_f64x(standard_normal(&mut self.rng)))
            .collect();
        Tensor::new(vec![self.pair.config.latent_dim], data).expect("latent shape")
    }

    /// One discriminator update: reals toward 1, generated toward 0.
    /// Generator weights are frozen constants on this tape.
    pub fn d_step(&mut self, real: &[Vec<T>]) -> Result<f64> {
        if real.is_empty() {
            return Err(CoreError::Train("empty gan batch".into()));
        }
        let s = self.pair.config.tile_size;
        let m = real.len();
        let mut tape = Tape::new();
        let d_ids = insert_discriminator(&mut tape, &self.pair.discriminator, true);
        let g_ids = insert_generator(&mut tape, &self.pair.generator, false);
        let mut parts = Vec::with_capacity(2 * m);
        for tile in real {
            let t = tape.constant(Tensor::new(vec![s, s, 1], tile.clone())?);
            let p = discriminator_forward(&mut tape, &d_ids, &self.pair.config, t)?;
            parts.push(nll_real(&mut tape, p)?);
        }
        for _ in 0..m {
            let z = self.draw_latent();
            let z = tape.constant(z);
            let fake = generator_forward(&mut tape, &g_ids, &self.pair.config, z)?;
            let p = discriminator_forward(&mut tape, &d_ids, &self.pair.config, fake)?;
            parts.push(nll_fake(&mut tape, p)?);
        }
        let total = sum_losses(&mut tape, parts)?;
        let loss = tape.scale(total, T::from_f64x(1.0 / (2.0 * m as f64)))?;
        tape.backward(loss)?;
        self.adam_d.begin_step();
        let ordered = [
            d_ids.convs.iter().flat_map(|&(k, b)| [k, b]).collect::<Vec<_>>(),
            vec![d_ids.out_w, d_ids.out_b],
        ]
        .concat();
        let lr = self.pair.config.lr;
        for (slot, (&id, param)) in ordered.iter().zip(self.pair.d_params_mut()).enumerate() {
            let grad = tape.grad(id).expect("trainable disc param has a gradient").to_vec();
            self.adam_d.update(slot, lr, param.data_mut(), &grad)?;
        }
        Ok(tape.data(loss)[0].to_f64x())
    }

    /// One generator update through the frozen discriminator: generated
    /// tiles pushed toward the "real" label.
    pub fn g_step(&mut self, batch: usize) -> Result<f64> {
        if batch == 0 {
            return Err(CoreError::Train("empty gan batch".into()));
        }
        let mut tape = Tape::new();
        let g_ids = insert_generator(&mut tape, &self.pair.generator, true);
        let d_ids = insert_discriminator(&mut tape, &self.pair.discriminator, false);
        let mut parts = Vec::with_capacity(batch);
        for _ in 0..batch {
            let z = self.draw_latent();
            let z = tape.constant(z);
            let fake = generator_forward(&mut tape, &g_ids, &self.pair.config, z)?;
            let p = discriminator_forward(&mut tape, &d_ids, &self.pair.config, fake)?;
            parts.push(nll_real(&mut tape, p)?);
        }
        let total = sum_losses(&mut tape, parts)?;
        let loss = tape.scale(total, T::from_f64x(1.0 / batch as f64))?;
        tape.backward(loss)?;
        self.adam_g.begin_step();
        let ordered = [
            vec![g_ids.proj_w, g_ids.proj_b],
            g_ids.ups.iter().flat_map(|&(k, b)| [k, b]).collect::<Vec<_>>(),
        ]
        .concat();
        let lr = self.pair.config.lr;
        for (slot, (&id, param)) in ordered.iter().zip(self.pair.g_params_mut()).enumerate() {
            let grad = tape.grad(id).expect("trainable gen param has a gradient").to_vec();
            self.adam_g.update(slot, lr, param.data_mut(), &grad)?;
        }
        Ok(tape.data(loss)[0].to_f64x())
    }

    /// One adversarial step: discriminator first, then generator.
    pub fn step(&mut self, real: &[Vec<T>]) -> Result<(f64, f64)> {
        let d = self.d_step(real)?;
        let g = self.g_step(real.len())?;
        Ok((d, g))
    }

    /// One pass over the tiles in a fresh shuffled order; short final
    /// batch kept. Records and returns the mean epoch losses.
    pub fn train_epoch(&mut self, tiles: &[Vec<T>]) -> Result<(f64, f64)> {
        if tiles.is_empty() {
            return Err(CoreError::Train("no gan training tiles".into()));
        }
        let mut order: Vec<usize> = (0..tiles.len()).collect();
        order.shuffle(&mut self.rng);
        let mut d_total = 0.0;
        let mut g_total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(self.pair.config.batch) {
            let batch: Vec<Vec<T>> = chunk.iter().map(|&i| tiles[i].clone()).collect();
            let (d, g) = self.step(&batch)?;
            d_total += d;
            g_total += g;
            steps += 1;
        }
        let epoch = self.pair.history.len() + 1;
        let (d, g) = (d_total / steps as f64, g_total / steps as f64);
        self.pair.history.push(EpochLoss { epoch, d_loss: d, g_loss: g });
        Ok((d, g))
    }
}

/// Load, resize, and map one manifest tile onto the GAN's [−1,1] range.
pub fn tile_to_gan_range<T: Scalar>(tile: &SarTile, size: usize) -> Result<Vec<T>> {
    let sized = resize_or_pad(tile, size)?;
    let norm = normalize_tile(&sized.data, DB_MIN, DB_MAX)?;
    Ok(norm.iter().map(|&v| T::from_f64x(v as f64 * 2.0 - 1.0)).collect())
}

/// Train one class-specialized pair on the manifest's training tiles of
/// that class (generated tiles excluded).
pub fn train_gan<T: Scalar>(
    manifest: &Manifest,
    class: ShipClass,
    config: &GanConfig,
    seed: u64,
) -> Result<GanPair<T>> {
    config.validate()?;
    let records: Vec<&TileRecord> = manifest
        .split_records(Split::Train)
        .into_iter()
        .filter(|r| r.ship_class == class && !r.synthetic)
        .collect();
    if records.is_empty() {
        return Err(CoreError::Train(format!("no training tiles for class {class}")));
    }
    let tiles: Vec<Vec<T>> = records
        .iter()
        .map(|r| {
            let tile = manifest.load_tile(r)?;
            tile_to_gan_range(&tile, config.tile_size)
        })
        .collect::<Result<_>>()?;
    let mut trainer: GanTrainer<T> = GanTrainer::new(config.clone(), class, seed)?;
    for _ in 0..config.epochs {
        trainer.train_epoch(&tiles)?;
    }
    Ok(trainer.pair)
}

/// Generate one tile from a seeded noise stream, mapped back to the
/// backscatter domain.
pub fn generate_tile(pair: &GanPair<f32>, rng: &mut ChaCha8Rng) -> Result<SarTile> {
    let data: Vec<f32> = (0..pair.config.latent_dim)
        .map(|_| standard_normal(rng) as f32)
        .collect();
    let mut tape: Tape<f32> = Tape::new();
    let g_ids = insert_generator(&mut tape, &pair.generator, false);
    let z = tape.constant(Tensor::new(vec![pair.config.latent_dim], data)?);
    let out = generator_forward(&mut tape, &g_ids, &pair.config, z)?;
    let unit: Vec<f32> = tape.data(out).iter().map(|v| (v + 1.0) / 2.0).collect();
    let sigma = denormalize_tile(&unit, DB_MIN, DB_MAX)?;
    SarTile::new(pair.config.tile_size, pair.config.tile_size, Polarization::VH, sigma)
}

/// Expected checkpoint filename for one class inside a GAN directory.
pub fn gan_checkpoint_path(dir: &Path, class: ShipClass) -> std::path::PathBuf {
    dir.join(format!("{}.sckp", class.slug()))
}

/// Top every under-represented class up to `target` training tiles with
/// generated ones. Classes at or above `target` are untouched; a deficient
/// class without a checkpoint in `gans_dir` is an error. Returns per-class
/// added counts.
pub fn rebalance(
    manifest: &mut Manifest,
    gans_dir: &Path,
    target: usize,
    seed: u64,
) -> Result<BTreeMap<ShipClass, usize>> {
    let counts = manifest.class_counts(Some(Split::Train));
    let any_split = manifest.records.iter().any(|r| r.split != Split::Unassigned);
    let mut added = BTreeMap::new();
    for class in ShipClass::ALL {
        let have = counts.get(&class).copied().unwrap_or(0);
        if have >= target {
            added.insert(class, 0);
            continue;
        }
        let ckpt_path = gan_checkpoint_path(gans_dir, class);
        if !ckpt_path.exists() {
            return Err(CoreError::Train(format!(
                "class {class} has {have} < {target} tiles but no GAN at {}",
                ckpt_path.display()
            )));
        }
        let pair = GanPair::<f32>::from_checkpoint(&Checkpoint::load(&ckpt_path)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class.index() as u64 + 1);
        let existing = manifest
            .records
            .iter()
            .filter(|r| r.ship_class == class && r.synthetic)
            .count();
        let gan_dir = manifest.dir.join("gan");
        std::fs::create_dir_all(&gan_dir).map_err(|e| CoreError::io(&gan_dir, e))?;
        let need = target - have;
        for k in 0..need {
            let tile = generate_tile(&pair, &mut rng)?;
            let id = format!("{}-gan-{:04}", class.slug(), existing + k);
            let rel = Path::new("gan").join(format!("{id}.sart"));
            tile.write(&manifest.dir.join(&rel))?;
            manifest.records.push(TileRecord {
                id,
                path: rel,
                ship_class: class,
                polarization: Polarization::VH,
                split: if any_split { Split::Train } else { Split::Unassigned },
                synthetic: true,
                elaborated_type: class.as_str().to_string(),
                ais_type: None,
            });
        }
        added.insert(class, need);
    }
    manifest.validate()?;
    Ok(added)
}

/// Write the per-epoch loss series as `epoch,d_loss,g_loss`.
pub fn save_history_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,d_loss,g_loss\n");
    for e in history {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.d_loss, e.g_loss));
    }
    std::fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    // The discriminator halves the tile four times; at tile 16 the last conv
    // map is 1×1 and instance norm of a single element is identically zero,
    // so 32 is the smallest size that exercises the whole network.
    fn tiny_config() -> GanConfig {
        GanConfig { tile_size: 32, base_channels: 8, epochs: 2, batch: 4, ..GanConfig::desk() }
    }

    fn random_tiles(n: usize, size: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..size * size).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect()
    }

    #[test]
    fn config_geometry_and_validation() {
        assert_eq!(GanConfig::desk().base_grid(), 2);
        assert_eq!(GanConfig::paper().base_grid(), 8);
        assert!(GanConfig::paper().validate().is_ok());
        assert!(GanConfig { tile_size: 20, ..GanConfig::desk() }.validate().is_err());
        assert!(GanConfig { kernel_size: 3, ..GanConfig::desk() }.validate().is_err());
        assert!(GanConfig { base_channels: 12, ..GanConfig::desk() }.validate().is_err());
    }

    #[test]
    fn spatial_chains_are_specular() {
        for cfg in [GanConfig::desk(), GanConfig::paper(), tiny_config()] {
            let (g, d) = layer_spatial_sizes(&cfg);
            let mut rev = d.clone();
            rev.reverse();
            assert_eq!(g, rev, "tile {}", cfg.tile_size);
            assert_eq!(*g.last().unwrap(), cfg.tile_size);
            assert_eq!(g[0], cfg.base_grid());
        }
    }

    #[test]
    fn generator_emits_tile_shaped_output_in_range() {
        let cfg = GanConfig::desk();
        let pair: GanPair<f32> = GanPair::init(cfg.clone(), ShipClass::Tanker, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z: Vec<f32> = (0..cfg.latent_dim).map(|_| standard_normal(&mut rng) as f32).collect();
        let mut tape = Tape::new();
        let ids = insert_generator(&mut tape, &pair.generator, false);
        let zid = tape.constant(Tensor::new(vec![cfg.latent_dim], z).unwrap());
        let out = generator_forward(&mut tape, &ids, &cfg, zid).unwrap();
        assert_eq!(tape.shape(out), [32, 32, 1]);
        assert!(tape.data(out).iter().all(|&v| (-1.0..=1.0).contains(&v)));

        let bad = tape.constant(Tensor::filled(vec![cfg.latent_dim + 1], 0.0f32));
        assert!(generator_forward(&mut tape, &ids, &cfg, bad).is_err());
    }

    #[test]
    fn discriminator_scores_are_probabilities_and_deterministic() {
        let cfg = tiny_config();
        let score = |seed: u64| -> f32 {
            let pair: GanPair<f32> = GanPair::init(cfg.clone(), ShipClass::BulkCarrier, seed).unwrap();
            let tile = random_tiles(1, cfg.tile_size, 5).remove(0);
            let mut tape = Tape::new();
            let ids = insert_discriminator(&mut tape, &pair.discriminator, false);
            let t =
                tape.constant(Tensor::new(vec![cfg.tile_size, cfg.tile_size, 1], tile).unwrap());
            let p = discriminator_forward(&mut tape, &ids, &cfg, t).unwrap();
            assert_eq!(tape.shape(p), [1, 1]);
            tape.data(p)[0]
        };
        let a = score(11);
        assert!(a > 0.0 && a < 1.0);
        assert_eq!(a, score(11));
        assert_ne!(a, score(12));
    }

    #[test]
    fn steps_update_only_their_own_network() {
        let cfg = tiny_config();
        let mut trainer: GanTrainer<f32> = GanTrainer::new(cfg.clone(), ShipClass::Tanker, 1).unwrap();
        let tiles = random_tiles(4, cfg.tile_size, 2);

        let g_before: Vec<Vec<f32>> =
            trainer.pair.g_params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let d_loss = trainer.d_step(&tiles).unwrap();
        assert!(d_loss.is_finite() && d_loss > 0.0);
        let g_after: Vec<Vec<f32>> =
            trainer.pair.g_params().iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(g_before, g_after, "generator moved during the discriminator step");

        let d_snapshot: Vec<Vec<f32>> =
            trainer.pair.d_params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let g_loss = trainer.g_step(tiles.len()).unwrap();
        assert!(g_loss.is_finite() && g_loss > 0.0);
        let d_after: Vec<Vec<f32>> =
            trainer.pair.d_params().iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(d_snapshot, d_after, "discriminator moved during the generator step");
        let g_moved: Vec<Vec<f32>> =
            trainer.pair.g_params().iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_ne!(g_before, g_moved, "generator failed to move on its own step");

        assert!(trainer.d_step(&[]).is_err());
        assert!(trainer.g_step(0).is_err());
    }

    #[test]
    fn same_seed_gives_identical_loss_series() {
        let cfg = tiny_config();
        let tiles = random_tiles(6, cfg.tile_size, 9);
        let run = || -> Vec<EpochLoss> {
            let mut trainer: GanTrainer<f32> =
                GanTrainer::new(cfg.clone(), ShipClass::ContainerShip, 21).unwrap();
            for _ in 0..cfg.epochs {
                trainer.train_epoch(&tiles).unwrap();
            }
            trainer.pair.history.clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), cfg.epochs);
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_weights_class_and_history() {
        let cfg = tiny_config();
        let mut pair: GanPair<f32> = GanPair::init(cfg.clone(), ShipClass::BulkCarrier, 13).unwrap();
        pair.history.push(EpochLoss { epoch: 1, d_loss: 1.25, g_loss: 0.75 });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gan.sckp");
        pair.to_checkpoint().save(&path).unwrap();
        let loaded = GanPair::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(loaded.class, ShipClass::BulkCarrier);
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.history, pair.history);
        for ((na, a), (nb, b)) in pair
            .g_params()
            .iter()
            .chain(pair.d_params().iter())
            .zip(loaded.g_params().iter().chain(loaded.d_params().iter()))
        {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn rebalance_tops_up_exactly_and_is_idempotent() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let gans = dir.path().join("gans");
        std::fs::create_dir_all(&gans).unwrap();
        for class in ShipClass::ALL {
            let pair: GanPair<f32> = GanPair::init(cfg.clone(), class, 3).unwrap();
            pair.to_checkpoint().save(&gan_checkpoint_path(&gans, class)).unwrap();
        }

        let mut manifest = Manifest::new(dir.path());
        let counts = [(ShipClass::Tanker, 3), (ShipClass::ContainerShip, 5), (ShipClass::BulkCarrier, 2)];
        for (class, n) in counts {
            for i in 0..n {
                manifest.records.push(TileRecord {
                    id: format!("{}-{i:02}", class.slug()),
                    path: format!("tiles/{}-{i:02}.sart", class.slug()).into(),
                    ship_class: class,
                    polarization: Polarization::VH,
                    split: Split::Unassigned,
                    synthetic: false,
                    elaborated_type: class.as_str().to_string(),
                    ais_type: None,
                });
            }
        }

        let added = rebalance(&mut manifest, &gans, 5, 99).unwrap();
        assert_eq!(added[&ShipClass::Tanker], 2);
        assert_eq!(added[&ShipClass::ContainerShip], 0);
        assert_eq!(added[&ShipClass::BulkCarrier], 3);
        let after = manifest.class_counts(Some(Split::Train));
        assert!(after.values().all(|&n| n == 5));
        assert_eq!(manifest.records.iter().filter(|r| r.synthetic).count(), 5);
        for r in manifest.records.iter().filter(|r| r.synthetic) {
            assert!(manifest.tile_path(r).exists());
            let tile = manifest.load_tile(r).unwrap();
            assert_eq!((tile.height, tile.width), (cfg.tile_size, cfg.tile_size));
            assert!(tile.data.iter().all(|v| v.is_finite() && *v >= 0.0));
        }

        let again = rebalance(&mut manifest, &gans, 5, 99).unwrap();
        assert!(again.values().all(|&n| n == 0));
        assert_eq!(manifest.records.len(), 15);
    }

    #[test]
    fn rebalance_requires_a_gan_for_deficient_classes() {
        let dir = tempfile::tempdir().unwrap();
        let gans = dir.path().join("gans");
        std::fs::create_dir_all(&gans).unwrap();
        let mut manifest = Manifest::new(dir.path());
        manifest.records.push(TileRecord {
            id: "tanker-00".into(),
            path: "tiles/tanker-00.sart".into(),
            ship_class: ShipClass::Tanker,
            polarization: Polarization::VH,
            split: Split::Unassigned,
            synthetic: false,
            elaborated_type: "Tanker".into(),
            ais_type: None,
        });
        assert!(rebalance(&mut manifest, &gans, 3, 1).is_err());
    }

    #[test]
    fn two_epoch_smoke_training_produces_history() {
        let cfg = tiny_config();
        let tiles = random_tiles(4, cfg.tile_size, 31);
        let mut trainer: GanTrainer<f32> = GanTrainer::new(cfg.clone(), ShipClass::Tanker, 8).unwrap();
        for _ in 0..cfg.epochs {
            let (d, g) = trainer.train_epoch(&tiles).unwrap();
            assert!(d.is_finite() && d > 0.0);
            assert!(g.is_finite() && g > 0.0);
        }
        assert_eq!(trainer.pair.history.len(), 2);
        assert_eq!(trainer.pair.history[0].epoch, 1);
        assert_eq!(trainer.pair.history[1].epoch, 2);

        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("history.csv");
        save_history_csv(&csv, &trainer.pair.history).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("epoch,d_loss,g_loss\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
