//! Seeded training and evaluation loops shared by the capsule network and
//! the CNN baseline: Adam with per-epoch learning-rate decay, per-epoch
//! train/val history, best-checkpoint selection, and classification
//! metrics.

use crate::capsnet::{self, CapsNet, CapsNetConfig};
use crate::checkpoint::Checkpoint;
use crate::cnn::{self, Cnn, CnnConfig, HeadKind};
use crate::data::{
    normalize_tile, resize_or_pad, AugmentPolicy, Manifest, PolarizationMode, Split, TileRecord,
    DB_MAX, DB_MIN,
};
use crate::error::{CoreError, Result};
use crate::optim::{lr_schedule, Adam, AdamParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarcaps_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Capsnet,
    Cnn,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Capsnet => "capsnet",
            ModelKind::Cnn => "cnn",
        }
    }
}

impl FromStr for ModelKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "capsnet" => Ok(ModelKind::Capsnet),
            "cnn" => Ok(ModelKind::Cnn),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown model {other:?}, expected capsnet or cnn"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AugmentKind {
    #[default]
    #[serde(rename = "none")]
    None,
    A,
    B,
    #[serde(rename = "gan")]
    Gan,
}

impl AugmentKind {
    fn flip_policy(&self) -> Option<AugmentPolicy> {
        match self {
            AugmentKind::A => Some(AugmentPolicy::A),
            AugmentKind::B => Some(AugmentPolicy::B),
            _ => None,
        }
    }
}

impl FromStr for AugmentKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentKind::None),
            "A" | "a" => Ok(AugmentKind::A),
            "B" | "b" => Ok(AugmentKind::B),
            "gan" => Ok(AugmentKind::Gan),
            other => Err(CoreError::InvalidArgument(format!("unknown augmentation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// CNN classifier head; ignored by the capsule network.
    pub head: HeadKind,
    pub epochs: usize,
    /// Per-model default when absent: 100 for capsnet, 32 for cnn.
    pub batch: Option<usize>,
    pub adam: AdamParams,
    /// Per-epoch exponential decay; per-model default when absent:
    /// 0.9 for capsnet, 1.0 (constant) for cnn.
    pub lr_decay: Option<f64>,
    pub seed: u64,
    pub mode: PolarizationMode,
    pub augment: AugmentKind,
    pub capsnet: CapsNetConfig,
    pub cnn: CnnConfig,
    /// Stop once training accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
    /// Stop after this many epochs without a validation-accuracy improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Capsnet,
            head: HeadKind::S,
            epochs: 50,
            batch: None,
            adam: AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            lr_decay: None,
            seed: 0,
            mode: PolarizationMode::VH,
            augment: AugmentKind::None,
            capsnet: CapsNetConfig::paper(),
            cnn: CnnConfig::default(),
            stop_at_train_acc: None,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch.unwrap_or(match self.model {
            ModelKind::Capsnet => 100,
            ModelKind::Cnn => 32,
        })
    }

    pub fn decay(&self) -> f64 {
        self.lr_decay.unwrap_or(match self.model {
            ModelKind::Capsnet => 0.9,
            ModelKind::Cnn => 1.0,
        })
    }

    pub fn input_size(&self) -> usize {
        match self.model {
            ModelKind::Capsnet => self.capsnet.input_size,
            ModelKind::Cnn => self.cnn.input_size,
        }
    }

    /// Row label used in result files and report tables.
    pub fn architecture(&self) -> String {
        match self.model {
            ModelKind::Capsnet => "CapsNet".to_string(),
            ModelKind::Cnn => format!("CNN-{}", self.head.as_str()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size() == 0 {
            return Err(CoreError::Config("epochs and batch must be positive".into()));
        }
        let d = self.decay();
        if !(d > 0.0 && d <= 1.0) {
            return Err(CoreError::Config(format!("lr decay {d} must lie in (0,1]")));
        }
        match self.model {
            ModelKind::Capsnet => self.capsnet.validate(),
            ModelKind::Cnn => {
                let mut cfg = self.cnn.clone();
                cfg.head = self.head;
                cfg.validate()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Caps(CapsNet<f32>),
    Cnn(Cnn<f32>),
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            TrainedModel::Caps(m) => m.to_checkpoint(),
            TrainedModel::Cnn(m) => m.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.meta_str("model") {
            Some("capsnet") => Ok(TrainedModel::Caps(CapsNet::from_checkpoint(ckpt)?)),
            Some("cnn") => Ok(TrainedModel::Cnn(Cnn::from_checkpoint(ckpt)?)),
            other => Err(CoreError::Config(format!("checkpoint has unknown model kind {other:?}"))),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            TrainedModel::Caps(m) => m.config.input_size,
            TrainedModel::Cnn(m) => m.config.input_size,
        }
    }

    pub fn architecture(&self) -> String {
        match self {
            TrainedModel::Caps(_) => "CapsNet".to_string(),
            TrainedModel::Cnn(m) => format!("CNN-{}", m.config.head.as_str()),
        }
    }

    /// Class scores for one normalized tile (capsule norms or softmax
    /// probabilities); inference only, no parameters touched.
    pub fn scores(&self, tile: &[f32]) -> Result<Vec<f32>> {
        let mut tape: Tape<f32> = Tape::new();
        match self {
            TrainedModel::Caps(m) => {
                let ids = capsnet::insert_params(&mut tape, m, false);
                let s = m.config.input_size;
                let t = tape.constant(Tensor::new(vec![s, s, 1], tile.to_vec())?);
                let fwd = capsnet::forward(&mut tape, &ids, &m.config, t)?;
                Ok(tape.data(fwd.norms).to_vec())
            }
            TrainedModel::Cnn(m) => {
                let ids = cnn::insert_params(&mut tape, m, false);
                let s = m.config.input_size;
                let t = tape.constant(Tensor::new(vec![s, s, 1], tile.to_vec())?);
                let probs = cnn::forward(&mut tape, &ids, &m.config, t)?;
                Ok(tape.data(probs).to_vec())
            }
        }
    }
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

/// One normalized training sample: `[S,S,1]` pixel data plus class index.
struct Sample {
    pixels: Vec<f32>,
    label: usize,
}

fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

fn load_samples(
    manifest: &Manifest,
    records: &[&TileRecord],
    input_size: usize,
) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            let tile = manifest.load_tile(r)?;
            let sized = resize_or_pad(&tile, input_size)?;
            let pixels = normalize_tile(&sized.data, DB_MIN, DB_MAX)?;
            Ok(Sample { pixels, label: r.ship_class.index() })
        })
        .collect()
}

fn gather_train_samples(manifest: &Manifest, config: &TrainConfig) -> Result<Vec<Sample>> {
    let include_synth = config.augment == AugmentKind::Gan;
    let records: Vec<&TileRecord> = manifest
        .split_records(Split::Train)
        .into_iter()
        .filter(|r| config.mode.accepts(r.polarization) && (include_synth || !r.synthetic))
        .collect();
    if records.is_empty() {
        return Err(CoreError::Train("empty training split".into()));
    }
    if let Some(policy) = config.augment.flip_policy() {
        let items: Vec<(&TileRecord, crate::data::SarTile)> = records
            .iter()
            .map(|r| Ok((*r, manifest.load_tile(r)?)))
            .collect::<Result<_>>()?;
        let variants = crate::data::augment_tiles(&items, policy, config.seed)?;
        let per_item = variants.len() / items.len();
        let mut out = Vec::with_capacity(variants.len());
        for (chunk, (record, _)) in variants.chunks(per_item).zip(&items) {
            for (_, tile) in chunk {
                let sized = resize_or_pad(tile, config.input_size())?;
                let pixels = normalize_tile(&sized.data, DB_MIN, DB_MAX)?;
                out.push(Sample { pixels, label: record.ship_class.index() });
            }
        }
        Ok(out)
    } else {
        load_samples(manifest, &records, config.input_size())
    }
}

/// Per-sample loss and scores on an existing tape. `trainable` decides
/// whether parameters were inserted as params or constants.
enum TapeModel {
    Caps { ids: capsnet::CapsIds, config: CapsNetConfig },
    Cnn { ids: cnn::CnnIds, config: CnnConfig },
}

impl TapeModel {
    fn insert(tape: &mut Tape<f32>, model: &TrainedModel, trainable: bool) -> TapeModel {
        match model {
            TrainedModel::Caps(m) => TapeModel::Caps {
                ids: capsnet::insert_params(tape, m, trainable),
                config: m.config.clone(),
            },
            TrainedModel::Cnn(m) => TapeModel::Cnn {
                ids: cnn::insert_params(tape, m, trainable),
                config: m.config.clone(),
            },
        }
    }

    fn sample_loss(
        &self,
        tape: &mut Tape<f32>,
        sample: &Sample,
    ) -> Result<(sarcaps_tensor::TensorId, usize)> {
        let label: Vec<f32> = (0..3).map(|i| if i == sample.label { 1.0 } else { 0.0 }).collect();
        match self {
            TapeModel::Caps { ids, config } => {
                let s = config.input_size;
                let t = tape.constant(Tensor::new(vec![s, s, 1], sample.pixels.clone())?);
                let (loss, norms) = capsnet::sample_loss(tape, ids, config, t, &label)?;
                Ok((loss, argmax(tape.data(norms))))
            }
            TapeModel::Cnn { ids, config } => {
                let s = config.input_size;
                let t = tape.constant(Tensor::new(vec![s, s, 1], sample.pixels.clone())?);
                let (loss, probs) = cnn::sample_loss(tape, ids, config, t, &label)?;
                Ok((loss, argmax(tape.data(probs))))
            }
        }
    }

    fn ordered_ids(&self) -> Vec<sarcaps_tensor::TensorId> {
        match self {
            TapeModel::Caps { ids, .. } => ids.ordered().to_vec(),
            TapeModel::Cnn { ids, .. } => ids.ordered(),
        }
    }
}

fn apply_updates(
    model: &mut TrainedModel,
    tape: &Tape<f32>,
    tape_ids: &[sarcaps_tensor::TensorId],
    adam: &mut Adam<f32>,
    lr: f64,
) -> Result<()> {
    adam.begin_step();
    let mut step = |slot: usize, data: &mut [f32]| -> Result<()> {
        let grad = tape
            .grad(tape_ids[slot])
            .expect("trainable parameter has a gradient")
            .to_vec();
        adam.update(slot, lr, data, &grad)
    };
    match model {
        TrainedModel::Caps(m) => {
            for (slot, (_, p)) in m.params_mut().into_iter().enumerate() {
                step(slot, p.data_mut())?;
            }
        }
        TrainedModel::Cnn(m) => {
            for (slot, (_, p)) in m.params_mut().into_iter().enumerate() {
                step(slot, p.data_mut())?;
            }
        }
    }
    Ok(())
}

/// Mean loss and accuracy of an inference pass (no parameter updates).
fn evaluate_samples(model: &TrainedModel, samples: &[Sample]) -> Result<(f64, f64)> {
    let mut loss_total = 0.0;
    let mut correct = 0usize;
    for sample in samples {
        let mut tape: Tape<f32> = Tape::new();
        let tm = TapeModel::insert(&mut tape, model, false);
        let (loss, pred) = tm.sample_loss(&mut tape, sample)?;
        loss_total += tape.data(loss)[0] as f64;
        if pred == sample.label {
            correct += 1;
        }
    }
    Ok((loss_total / samples.len() as f64, correct as f64 / samples.len() as f64))
}

fn init_model(config: &TrainConfig) -> Result<TrainedModel> {
    Ok(match config.model {
        ModelKind::Capsnet => {
            TrainedModel::Caps(CapsNet::init(config.capsnet.clone(), config.seed)?)
        }
        ModelKind::Cnn => {
            let mut cfg = config.cnn.clone();
            cfg.head = config.head;
            TrainedModel::Cnn(Cnn::init(cfg, config.seed)?)
        }
    })
}

/// Seeded training: per-epoch reshuffle, short final batch kept, Adam with
/// per-epoch lr decay, history of train/val loss and accuracy, and the
/// best-validation-accuracy weights retained (final weights when the
/// manifest has no validation split).
pub fn train(manifest: &Manifest, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let train_samples = gather_train_samples(manifest, config)?;
    let val_records: Vec<&TileRecord> = manifest
        .split_records(Split::Val)
        .into_iter()
        .filter(|r| config.mode.accepts(r.polarization))
        .collect();
    let val_samples = load_samples(manifest, &val_records, config.input_size())?;

    let mut model = init_model(config)?;
    let sizes: Vec<usize> = {
        let mut tape: Tape<f32> = Tape::new();
        let tm = TapeModel::insert(&mut tape, &model, false);
        tm.ordered_ids().iter().map(|&id| tape.data(id).len()).collect()
    };
    let mut adam = Adam::new(config.adam, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, TrainedModel)> = None; // (val_acc, epoch, weights)
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let lr = lr_schedule(config.adam.lr, config.decay(), epoch);
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size()) {
            let mut tape: Tape<f32> = Tape::new();
            let tm = TapeModel::insert(&mut tape, &model, true);
            let mut parts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (loss, pred) = tm.sample_loss(&mut tape, &train_samples[i])?;
                parts.push(loss);
                if pred == train_samples[i].label {
                    correct += 1;
                }
            }
            let mut total = parts[0];
            for &p in &parts[1..] {
                total = tape.add(total, p)?;
            }
            let batch_loss = tape.scale(total, 1.0 / chunk.len() as f32)?;
            tape.backward(batch_loss)?;
            loss_sum += tape.data(batch_loss)[0] as f64 * chunk.len() as f64;
            let ids = tm.ordered_ids();
            apply_updates(&mut model, &tape, &ids, &mut adam, lr)?;
        }
        let train_loss = loss_sum / train_samples.len() as f64;
        let train_acc = correct as f64 / train_samples.len() as f64;

        let (val_loss, val_acc) = if val_samples.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_samples(&model, &val_samples)?;
            (Some(l), Some(a))
        };

        history.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });

        if let Some(acc) = val_acc {
            let improved = best.as_ref().map_or(true, |(b, _, _)| acc > *b);
            if improved {
                best = Some((acc, epoch + 1, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if config.patience.map_or(false, |p| since_best >= p) {
                break;
            }
        }
        if config.stop_at_train_acc.map_or(false, |t| train_acc >= t) {
            break;
        }
    }

    let (best_epoch, final_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (history.len(), model),
    };
    Ok(TrainOutcome { model: final_model, history, best_epoch })
}

/// Write per-epoch history as CSV; absent validation metrics stay empty.
pub fn save_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,train_acc,val_loss,val_acc\n");
    for r in history {
        let v = |o: Option<f64>| o.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_acc,
            v(r.val_loss),
            v(r.val_acc)
        ));
    }
    std::fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub architecture: String,
    pub mode: String,
    pub accuracy: f64,
    /// Rows = true class, columns = predicted class, stable class order.
    pub confusion: [[usize; 3]; 3],
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    /// Dataset fingerprint: per-class evaluated counts plus the seed the
    /// model was trained with.
    pub class_counts: [usize; 3],
    pub seed: u64,
}

/// Metrics from (true, predicted) index pairs; the scoring core of
/// `evaluate`, kept pure so it can be checked against hand counts.
pub fn score_predictions(pairs: &[(usize, usize)]) -> (f64, [[usize; 3]; 3], [f64; 3], [f64; 3]) {
    let mut confusion = [[0usize; 3]; 3];
    for &(t, p) in pairs {
        confusion[t][p] += 1;
    }
    let total: usize = pairs.len();
    let trace: usize = (0..3).map(|i| confusion[i][i]).sum();
    let accuracy = trace as f64 / total as f64;
    let mut precision = [0f64; 3];
    let mut recall = [0f64; 3];
    for k in 0..3 {
        let col: usize = (0..3).map(|i| confusion[i][k]).sum();
        let row: usize = confusion[k].iter().sum();
        precision[k] = if col == 0 { 0.0 } else { confusion[k][k] as f64 / col as f64 };
        recall[k] = if row == 0 { 0.0 } else { confusion[k][k] as f64 / row as f64 };
    }
    (accuracy, confusion, precision, recall)
}

/// Score one split of the manifest. Parameters are untouched; calling it
/// twice returns identical reports.
pub fn evaluate(
    model: &TrainedModel,
    manifest: &Manifest,
    mode: PolarizationMode,
    split: Split,
    seed: u64,
) -> Result<EvalReport> {
    let records: Vec<&TileRecord> = manifest
        .split_records(split)
        .into_iter()
        .filter(|r| mode.accepts(r.polarization))
        .collect();
    if records.is_empty() {
        return Err(CoreError::Train(format!("empty {} split", split.as_str())));
    }
    let samples = load_samples(manifest, &records, model.input_size())?;
    let mut pairs = Vec::with_capacity(samples.len());
    let mut class_counts = [0usize; 3];
    for s in &samples {
        let scores = model.scores(&s.pixels)?;
        pairs.push((s.label, argmax(&scores)));
        class_counts[s.label] += 1;
    }
    let (accuracy, confusion, precision, recall) = score_predictions(&pairs);
    Ok(EvalReport {
        architecture: model.architecture(),
        mode: mode.as_str().to_string(),
        accuracy,
        confusion,
        precision,
        recall,
        class_counts,
        seed,
    })
}
