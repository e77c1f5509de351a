//! The epoch loop, checkpoints and resumption.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::loss_on_tape;
use super::{RotationAugment, TrainConfig, TrainError};
use crate::datagen::{augment_rotation, nonexact_substitute, rotate_sample, AssemblySample, Dataset, Split, Variant};
use crate::eval::seg_accuracy;
use crate::geometry::Rotation;
use crate::model::{Model, ModelConfig};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamId, Tape, Tensor};

const LOG_FILE: &str = "train_log.jsonl";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const MIX_SALT: u64 = 0x6e6f_6e65_7861_6374;
const ROTATION_SALT: u64 = 0x726f_7461_7465_0001;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the dataset has no validation split.
    pub val_seg_acc: Option<f64>,
    pub wall_ms: u64,
}

impl EpochRecord {
    /// Equality ignoring wall time.
    pub fn same_numbers(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch && self.train_loss == other.train_loss && self.val_seg_acc == other.val_seg_acc
    }
}

/// Sidecar of a checkpoint: everything needed to rebuild and resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs_completed: usize,
    pub adam_step: u64,
    /// Epoch `e` draws from streams keyed by `(seed, e)`, so the generator
    /// state is fully described by the next epoch index.
    pub rng_seed: u64,
    pub next_epoch: usize,
}

pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Adam,
    pub log: Vec<EpochRecord>,
}

/// Path of the JSON sidecar belonging to a checkpoint file.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

fn stream_rng(seed: u64, salt: u64, epoch: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(((epoch as u64) << 32) | slot as u64);
    rng
}

/// The training view of sample `slot` in `epoch`: optional non-exact
/// substitution, then the configured rotation.
pub fn augment(sample: &AssemblySample, config: &TrainConfig, epoch: usize, slot: usize) -> Result<AssemblySample, TrainError> {
    let mut s = if sample.variant == Variant::Exact && config.nonexact_fraction > 0.0 {
        let mut rng = stream_rng(config.seed, MIX_SALT, epoch, slot);
        if rng.gen::<f64>() < config.nonexact_fraction {
            nonexact_substitute(sample, &mut rng)?
        } else {
            sample.clone()
        }
    } else {
        sample.clone()
    };
    s = match config.rotation {
        RotationAugment::Off => s,
        RotationAugment::Identity => rotate_sample(&s, &Rotation::IDENTITY),
        RotationAugment::Random => augment_rotation(&s, &mut stream_rng(config.seed, ROTATION_SALT, epoch, slot)),
    };
    Ok(s)
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradient(model: &Model, sample: &AssemblySample, cap: usize) -> Result<(f64, Vec<(ParamId, Vec<f64>)>), TrainError> {
    let mut tape = Tape::new();
    let fv = model.forward_tape(&mut tape, &sample.target, &sample.parts)?;
    let gt: Vec<usize> = fv.attn_indices.iter().map(|&i| sample.gt_labels[i]).collect();
    let (loss, _) = loss_on_tape(&mut tape, fv.log_probs, &gt, &sample.equivalence_classes, cap)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads.params().map(|(id, g)| (id, g.to_vec())).collect()))
}

/// Mean per-point segmentation accuracy of `model` on `samples`.
pub fn mean_seg_accuracy(model: &Model, samples: &[&AssemblySample]) -> Result<Option<f64>, TrainError> {
    if samples.is_empty() {
        return Ok(None);
    }
    let accs: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let r = model.forward(&s.target, &s.parts)?;
            Ok(seg_accuracy(&r.labels, &s.gt_labels, &s.equivalence_classes))
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(Some(accs.iter().sum::<f64>() / accs.len() as f64))
}

struct Run<'a> {
    train: Vec<&'a AssemblySample>,
    val: Vec<&'a AssemblySample>,
    config: &'a TrainConfig,
    out: Option<&'a Path>,
}

impl Run<'_> {
    fn epoch(&self, model: &mut Model, adam: &mut Adam, epoch: usize) -> Result<f64, TrainError> {
        let cfg = self.config;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, 0, epoch, u32::MAX as usize));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let m: &Model = model;
            let results: Vec<(f64, Vec<(ParamId, Vec<f64>)>)> = batch
                .par_iter()
                .map(|&i| {
                    let s = augment(self.train[i], cfg, epoch, i)?;
                    sample_gradient(m, &s, cfg.permutation_cap)
                })
                .collect::<Result<_, TrainError>>()?;
            model.params.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for (&i, (loss, grads)) in batch.iter().zip(&results) {
                if !loss.is_finite() {
                    let id = self.train[i].sample_id.clone();
                    self.dump_non_finite(epoch, &id, *loss);
                    return Err(TrainError::NonFinite { epoch, sample_id: id, loss: *loss });
                }
                total += loss;
                for (id, g) in grads {
                    let p = model.params.get_mut(*id);
                    for (acc, v) in p.grad.data_mut().iter_mut().zip(g) {
                        *acc += scale * v;
                    }
                }
            }
            adam.update(&mut model.params, &cfg.adam());
        }
        Ok(total / self.train.len() as f64)
    }

    fn dump_non_finite(&self, epoch: usize, sample_id: &str, loss: f64) {
        log::error!("non-finite loss {loss} at epoch {epoch} on sample {sample_id}");
        if let Some(dir) = self.out {
            let dump = serde_json::json!({ "epoch": epoch, "sample_id": sample_id, "loss": loss.to_string() });
            let _ = fs::write(dir.join("nan_dump.json"), dump.to_string());
        }
    }

    fn run(&self, mut model: Model, mut adam: Adam, start: usize, end: usize) -> Result<TrainOutcome, TrainError> {
        let mut log = Vec::new();
        let mut writer = match self.out {
            Some(dir) => Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?)),
            None => None,
        };
        for epoch in start..end {
            let t0 = Instant::now();
            let train_loss = self.epoch(&mut model, &mut adam, epoch)?;
            let val_seg_acc = mean_seg_accuracy(&model, &self.val)?;
            let rec = EpochRecord { epoch: epoch + 1, train_loss, val_seg_acc, wall_ms: t0.elapsed().as_millis() as u64 };
            log::info!(
                "epoch {} loss {:.5} val_seg_acc {} ({} ms)",
                rec.epoch,
                rec.train_loss,
                rec.val_seg_acc.map_or("-".into(), |a| format!("{a:.4}")),
                rec.wall_ms
            );
            if let Some(w) = writer.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w)?;
                w.flush()?;
            }
            log.push(rec);
            let done = epoch + 1;
            let cadence = self.config.checkpoint_every > 0 && done % self.config.checkpoint_every == 0;
            if let Some(dir) = self.out {
                if cadence || done == end {
                    save_checkpoint(&dir.join(CHECKPOINT_FILE), &model, &adam, self.config, done)?;
                }
            }
        }
        Ok(TrainOutcome { model, optimizer: adam, log })
    }
}

fn splits<'a>(dataset: &'a Dataset) -> Result<(Vec<&'a AssemblySample>, Vec<&'a AssemblySample>), TrainError> {
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(TrainError::Config("the training split is empty".into()));
    }
    Ok((train, dataset.split(Split::Val)))
}

/// Trains a fresh model. With `out`, appends the log to
/// `out/train_log.jsonl` and writes `out/checkpoint.bin` (+ `.json`) at the
/// configured cadence and after the last epoch.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    train_model(dataset, Model::new(model_config.clone())?, config, out)
}

/// [`train`] starting from the given parameters.
pub fn train_model(dataset: &Dataset, model: Model, config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let (train, val) = splits(dataset)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let adam = Adam::new(&model.params);
    Run { train, val, config, out }.run(model, adam, 0, config.epochs)
}

/// Continues from a checkpoint up to `epochs` (default: the stored budget).
pub fn resume(dataset: &Dataset, ckpt: &Path, epochs: Option<usize>, out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    let (model, adam, meta) = load_checkpoint(ckpt)?;
    let mut config = meta.train.clone();
    if let Some(e) = epochs {
        config.epochs = e;
    }
    config.validate()?;
    let (train, val) = splits(dataset)?;
    Run { train, val, config: &config, out }.run(model, adam, meta.next_epoch, config.epochs)
}

pub fn save_checkpoint(path: &Path, model: &Model, adam: &Adam, config: &TrainConfig, epochs_completed: usize) -> Result<(), TrainError> {
    let adam_entries = adam.entries(&model.params);
    let mut entries: Vec<(&str, &Tensor)> = model.params.entries();
    entries.extend(adam_entries.iter().map(|(n, t)| (n.as_str(), *t)));
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &entries)?;
    w.flush()?;
    let meta = CheckpointMeta {
        model: model.config.clone(),
        train: config.clone(),
        epochs_completed,
        adam_step: adam.step,
        rng_seed: config.seed,
        next_epoch: epochs_completed,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_meta(ckpt: &Path) -> Result<CheckpointMeta, TrainError> {
    let text = fs::read_to_string(sidecar_path(ckpt))?;
    Ok(serde_json::from_str(&text)?)
}

/// Model, optimizer state and sidecar of a checkpoint.
pub fn load_checkpoint(ckpt: &Path) -> Result<(Model, Adam, CheckpointMeta), TrainError> {
    let meta = read_meta(ckpt)?;
    let entries = read_checkpoint(&mut BufReader::new(File::open(ckpt)?))?;
    let mut model = Model::new(meta.model.clone())?;
    model.params.load_named(&entries)?;
    let adam = Adam::from_entries(&model.params, &entries, meta.adam_step).map_err(TrainError::Config)?;
    Ok((model, adam, meta))
}

/// Only the trained model; `expected`, when given, must match the stored config.
pub fn load_model(ckpt: &Path, expected: Option<&ModelConfig>) -> Result<Model, TrainError> {
    let meta = read_meta(ckpt)?;
    if let Some(e) = expected {
        if *e != meta.model {
            return Err(TrainError::Config("checkpoint was trained with a different model config".into()));
        }
    }
    let entries = read_checkpoint(&mut BufReader::new(File::open(ckpt)?))?;
    let mut model = Model::new(meta.model)?;
    model.params.load_named(&entries)?;
    Ok(model)
}
