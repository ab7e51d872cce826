//! Fold-wise training loops: optimization, early stopping, and top-k
//! checkpoint retention.
//!
//! The loop itself is track-agnostic — a [`FoldTask`] supplies batch
//! planning, the per-batch loss/gradient computation, and the validation
//! loss. [`SegFoldTask`] and [`ClsFoldTask`] implement it for the two
//! tracks.

use crate::augment::{
    normalize_image, resize, train_transform, worker_rng, AugmentPolicy, NormalizeSpec, Sample,
    SampleTarget,
};
use crate::data::{load_image_tensor, stack_batch, DatasetManifest};
use crate::error::{Error, Result};
use crate::geometry::{render_disk_mask, DiskTargetSpec};
use crate::losses::{combo_seg_loss, focal_loss, ComboLossWeights, FocalParams, Reduction};
use crate::models::seg::SegModel;
use crate::models::vit::VitModel;
use crate::nn::{Adam, AdamConfig, ParamSnapshot, Params, Session};
use crate::sampling::{inverse_frequency_weights, plan_fraction_batches, weighted_draws};
use crate::scalar::Scalar;
use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Validation loss must fall by more than this to count as an improvement.
pub const IMPROVE_EPS: f64 = 1e-8;

/// Optimization and stopping hyperparameters for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub top_k_checkpoints: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Segmentation-track defaults: decoupled weight decay, long patience.
    pub fn detection_defaults() -> Self {
        TrainConfig {
            optimizer: AdamConfig::adamw(4e-4, 0.01),
            max_epochs: 200,
            patience: 20,
            top_k_checkpoints: 3,
            batch_size: 8,
            seed: 0,
        }
    }

    /// Classification-track defaults: plain Adam, shorter patience.
    pub fn classification_defaults() -> Self {
        TrainConfig {
            optimizer: AdamConfig::adam(5e-5, 1e-5),
            max_epochs: 200,
            patience: 10,
            top_k_checkpoints: 3,
            batch_size: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0
            || self.top_k_checkpoints == 0
            || self.batch_size == 0
            || self.max_epochs == 0
        {
            return Err(Error::InvalidParameter(
                "patience, top_k_checkpoints, batch_size, and max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One trained-and-saved model state.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub snapshot: ParamSnapshot,
    pub fold: usize,
    pub epoch: usize,
    pub val_loss: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?,
        );
        Ok(serde_json::from_reader(file)?)
    }
}

/// Registry row for a retained checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub path: PathBuf,
    pub fold: usize,
    pub epoch: usize,
    pub val_loss: f64,
}

fn checkpoint_order(a: &CheckpointInfo, b: &CheckpointInfo) -> std::cmp::Ordering {
    a.val_loss
        .total_cmp(&b.val_loss)
        .then(a.fold.cmp(&b.fold))
        .then(a.epoch.cmp(&b.epoch))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped { at_epoch: usize },
}

/// Append-only record of one fold's training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub fold: usize,
    pub epochs: Vec<EpochRecord>,
    /// Exactly the `top_k` lowest-validation-loss checkpoints seen, sorted
    /// best first with ties broken by (fold, epoch).
    pub checkpoints: Vec<CheckpointInfo>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl RunLedger {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?,
        );
        Ok(serde_json::from_reader(file)?)
    }
}

/// Track-specific behavior plugged into [`run_training_loop`].
pub trait FoldTask<T: Scalar> {
    /// The batches (record ids) for one epoch, in order.
    fn plan_epoch(&mut self, epoch: usize) -> Result<Vec<Vec<String>>>;

    /// Forward + backward on one batch, accumulating gradients into
    /// `params`; returns the batch loss.
    fn train_batch(
        &mut self,
        params: &mut Params<T>,
        ids: &[String],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64>;

    /// Loss over the whole validation split with deterministic prep.
    fn val_loss(&mut self, params: &Params<T>) -> Result<f64>;
}

/// Train one fold to completion and restore the best checkpoint.
///
/// Stops at `max_epochs` or when the validation loss has not improved
/// (strict decrease by more than [`IMPROVE_EPS`]) for `patience`
/// consecutive epochs. On return `params` holds the weights of the best
/// retained checkpoint.
pub fn run_training_loop<T: Scalar>(
    params: &mut Params<T>,
    task: &mut dyn FoldTask<T>,
    config: &TrainConfig,
    fold: usize,
    checkpoint_dir: &Path,
) -> Result<RunLedger> {
    config.validate()?;
    std::fs::create_dir_all(checkpoint_dir)?;
    let mut opt = Adam::new(config.optimizer);
    let mut ledger = RunLedger {
        fold,
        epochs: Vec::new(),
        checkpoints: Vec::new(),
        stop_reason: StopReason::MaxEpochs,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    let mut streak = 0usize;

    for epoch in 1..=config.max_epochs {
        let batches = task.plan_epoch(epoch)?;
        if batches.is_empty() {
            return Err(Error::EmptySplit("epoch plan holds no batches".into()));
        }
        let mut total = 0.0;
        for (bi, ids) in batches.iter().enumerate() {
            let mut rng = worker_rng(config.seed, bi as u64, epoch as u64);
            params.zero_grads();
            let loss = task.train_batch(params, ids, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    what: "training loss".into(),
                    value: loss,
                    epoch,
                });
            }
            opt.step(params);
            total += loss;
        }
        let train_loss = total / batches.len() as f64;
        let val_loss = task.val_loss(params)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                what: "validation loss".into(),
                value: val_loss,
                epoch,
            });
        }
        ledger.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });

        // admit into the top-k registry, writing the file only if retained
        let path = checkpoint_dir.join(format!("fold{fold}_epoch{epoch:04}.json"));
        let info = CheckpointInfo {
            path: path.clone(),
            fold,
            epoch,
            val_loss,
        };
        ledger.checkpoints.push(info);
        ledger.checkpoints.sort_by(checkpoint_order);
        let retained = ledger.checkpoints[..config.top_k_checkpoints.min(ledger.checkpoints.len())]
            .iter()
            .any(|c| c.epoch == epoch);
        if retained {
            Checkpoint {
                snapshot: params.snapshot(),
                fold,
                epoch,
                val_loss,
            }
            .save(&path)?;
        }
        while ledger.checkpoints.len() > config.top_k_checkpoints {
            let dropped = ledger.checkpoints.pop().expect("nonempty registry");
            if dropped.epoch != epoch {
                std::fs::remove_file(&dropped.path)?;
            }
        }

        if val_loss < ledger.best_val_loss - IMPROVE_EPS {
            ledger.best_val_loss = val_loss;
            ledger.best_epoch = epoch;
            streak = 0;
        } else {
            streak += 1;
            if streak >= config.patience {
                ledger.stop_reason = StopReason::EarlyStopped { at_epoch: epoch };
                break;
            }
        }
    }

    let best = ledger
        .checkpoints
        .first()
        .ok_or_else(|| Error::EmptySplit("no checkpoints were retained".into()))?;
    let restored = Checkpoint::load(&best.path)?;
    params.load_snapshot(&restored.snapshot)?;
    Ok(ledger)
}

/// The `k` globally best checkpoints across folds, ties broken by
/// (fold, epoch) ascending.
pub fn select_ensemble(ledgers: &[RunLedger], k: usize) -> Result<Vec<CheckpointInfo>> {
    let mut all: Vec<CheckpointInfo> = ledgers
        .iter()
        .flat_map(|l| l.checkpoints.iter().cloned())
        .collect();
    if all.len() < k {
        return Err(Error::InsufficientCheckpoints {
            have: all.len(),
            need: k,
        });
    }
    all.sort_by(checkpoint_order);
    all.truncate(k);
    Ok(all)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

// ---- segmentation fold task ----

/// Knobs for the segmentation task beyond the shared [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTaskConfig {
    pub batch_size: usize,
    /// Minimum fraction of mitosis-bearing patches per batch.
    pub positive_fraction: f64,
    pub disk: DiskTargetSpec,
    pub policy: AugmentPolicy,
    pub loss_weights: ComboLossWeights,
    pub focal: FocalParams,
    pub smooth: f64,
    pub seed: u64,
}

impl SegTaskConfig {
    pub fn defaults(patch_size: usize, batch_size: usize, seed: u64) -> Self {
        SegTaskConfig {
            batch_size,
            positive_fraction: 0.4,
            disk: DiskTargetSpec::default().with_patch_size(patch_size),
            policy: AugmentPolicy::detection_default(),
            loss_weights: ComboLossWeights::default(),
            focal: FocalParams::default(),
            smooth: 1.0,
            seed,
        }
    }
}

/// Detection-track task: positive-quota batches, joint geometric
/// augmentation, disk-mask targets, combined segmentation loss.
pub struct SegFoldTask<T: Scalar> {
    model: SegModel,
    cfg: SegTaskConfig,
    train_pos: Vec<String>,
    train_neg: Vec<String>,
    val_ids: Vec<String>,
    cache: HashMap<String, (Array3<T>, Vec<(f64, f64)>)>,
}

impl<T: Scalar> SegFoldTask<T> {
    pub fn new(
        manifest: &DatasetManifest,
        train_ids: &[String],
        val_ids: &[String],
        model: SegModel,
        cfg: SegTaskConfig,
    ) -> Result<Self> {
        if train_ids.is_empty() {
            return Err(Error::EmptySplit("segmentation train split".into()));
        }
        if val_ids.is_empty() {
            return Err(Error::EmptySplit("segmentation val split".into()));
        }
        let mut cache = HashMap::new();
        let mut train_pos = Vec::new();
        let mut train_neg = Vec::new();
        for id in train_ids.iter().chain(val_ids) {
            let rec = manifest.record(id).ok_or_else(|| Error::Schema {
                record: id.clone(),
                reason: "split id missing from manifest".into(),
            })?;
            let centroids = rec.centroids.clone().ok_or_else(|| Error::Schema {
                record: id.clone(),
                reason: "segmentation training needs detection records".into(),
            })?;
            let image = load_image_tensor::<T>(&rec.image_path)?;
            cache.insert(id.clone(), (image, centroids));
        }
        for id in train_ids {
            if cache[id].1.is_empty() {
                train_neg.push(id.clone());
            } else {
                train_pos.push(id.clone());
            }
        }
        Ok(SegFoldTask {
            model,
            cfg,
            train_pos,
            train_neg,
            val_ids: val_ids.to_vec(),
            cache,
        })
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    fn batch_tensors(
        &self,
        ids: &[String],
        augment_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ArrayD<T>, ArrayD<T>)> {
        let mut rng = augment_rng;
        let mut images = Vec::with_capacity(ids.len());
        let mut masks = Vec::with_capacity(ids.len());
        for id in ids {
            let (image, centroids) = &self.cache[id];
            let mut sample = Sample {
                image: image.clone(),
                target: SampleTarget::Centroids(centroids.clone()),
            };
            if let Some(r) = rng.as_deref_mut() {
                train_transform(&mut sample, &self.cfg.policy, r)?;
            }
            let size = sample.height();
            let spec = self.cfg.disk.with_patch_size(size);
            let centroids = match &sample.target {
                SampleTarget::Centroids(c) => c.clone(),
                SampleTarget::Label(_) => unreachable!("segmentation targets are centroids"),
            };
            let mask = render_disk_mask(&centroids, &spec)?;
            let mut target = Array3::<T>::zeros((1, size, size));
            for ((y, x), &v) in mask.indexed_iter() {
                target[[0, y, x]] = T::of_usize(v as usize);
            }
            images.push(sample.image);
            masks.push(target);
        }
        Ok((
            stack_batch(&images).into_dyn(),
            stack_batch(&masks).into_dyn(),
        ))
    }
}

impl<T: Scalar> FoldTask<T> for SegFoldTask<T> {
    fn plan_epoch(&mut self, epoch: usize) -> Result<Vec<Vec<String>>> {
        let plan = plan_fraction_batches(
            &self.train_pos,
            &self.train_neg,
            self.cfg.batch_size,
            self.cfg.positive_fraction,
            epoch_seed(self.cfg.seed, epoch),
        )?;
        Ok(plan.batches)
    }

    fn train_batch(
        &mut self,
        params: &mut Params<T>,
        ids: &[String],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let (images, targets) = self.batch_tensors(ids, Some(rng))?;
        let mut sess = Session::new(params, true);
        let x = sess.input(images);
        let probs = self.model.predict_probs(&mut sess, x);
        let combo = combo_seg_loss(
            sess.tape.value(probs),
            &targets,
            &self.cfg.loss_weights,
            &self.cfg.focal,
            self.cfg.smooth,
        )?;
        let root = sess.tape.scalar_with_grad(probs, combo.total, combo.grad);
        let grads = sess.backward(root);
        params.accumulate(&grads);
        Ok(combo.total.as_f64())
    }

    fn val_loss(&mut self, params: &Params<T>) -> Result<f64> {
        let ids = self.val_ids.clone();
        let mut total = 0.0;
        for chunk in ids.chunks(self.cfg.batch_size) {
            let (images, targets) = self.batch_tensors(chunk, None)?;
            let mut sess = Session::new(params, false);
            let x = sess.input(images);
            let probs = self.model.predict_probs(&mut sess, x);
            let combo = combo_seg_loss(
                sess.tape.value(probs),
                &targets,
                &self.cfg.loss_weights,
                &self.cfg.focal,
                self.cfg.smooth,
            )?;
            total += combo.total.as_f64() * chunk.len() as f64;
        }
        Ok(total / self.val_ids.len() as f64)
    }
}

// ---- classification fold task ----

/// Knobs for the classification task beyond the shared [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsTaskConfig {
    pub batch_size: usize,
    pub focal: FocalParams,
    pub policy: AugmentPolicy,
    pub normalize: NormalizeSpec,
    /// Square edge every image is resized to before the model.
    pub input_size: usize,
    pub seed: u64,
}

impl ClsTaskConfig {
    pub fn defaults(input_size: usize, batch_size: usize, seed: u64) -> Self {
        ClsTaskConfig {
            batch_size,
            focal: FocalParams::default(),
            policy: AugmentPolicy::classification_default(input_size),
            normalize: NormalizeSpec::default(),
            input_size,
            seed,
        }
    }
}

/// Classification-track task: inverse-frequency sampling, photometric +
/// geometric augmentation, focal loss on the single logit.
pub struct ClsFoldTask<T: Scalar> {
    model: VitModel,
    cfg: ClsTaskConfig,
    train_ids: Vec<String>,
    weights: Vec<f64>,
    val_ids: Vec<String>,
    cache: HashMap<String, (Array3<T>, u8)>,
}

impl<T: Scalar> ClsFoldTask<T> {
    pub fn new(
        manifest: &DatasetManifest,
        train_ids: &[String],
        val_ids: &[String],
        model: VitModel,
        cfg: ClsTaskConfig,
    ) -> Result<Self> {
        if train_ids.is_empty() {
            return Err(Error::EmptySplit("classification train split".into()));
        }
        if val_ids.is_empty() {
            return Err(Error::EmptySplit("classification val split".into()));
        }
        let mut cache = HashMap::new();
        for id in train_ids.iter().chain(val_ids) {
            let rec = manifest.record(id).ok_or_else(|| Error::Schema {
                record: id.clone(),
                reason: "split id missing from manifest".into(),
            })?;
            let label = rec.class_label.ok_or_else(|| Error::Schema {
                record: id.clone(),
                reason: "classification training needs labeled records".into(),
            })?;
            let image = load_image_tensor::<T>(&rec.image_path)?;
            cache.insert(id.clone(), (image, label));
        }
        let labels: Vec<u8> = train_ids.iter().map(|id| cache[id].1).collect();
        let weights = inverse_frequency_weights(&labels, &[0, 1])?.weights;
        Ok(ClsFoldTask {
            model,
            cfg,
            train_ids: train_ids.to_vec(),
            weights,
            val_ids: val_ids.to_vec(),
            cache,
        })
    }

    pub fn model(&self) -> &VitModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut VitModel {
        &mut self.model
    }

    pub fn into_model(self) -> VitModel {
        self.model
    }

    fn batch_tensors(
        &self,
        ids: &[String],
        augment_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ArrayD<T>, ArrayD<T>)> {
        let mut rng = augment_rng;
        let mut images = Vec::with_capacity(ids.len());
        let mut labels = ArrayD::<T>::zeros(IxDyn(&[ids.len()]));
        for (i, id) in ids.iter().enumerate() {
            let (image, label) = &self.cache[id];
            let mut sample = Sample {
                image: image.clone(),
                target: SampleTarget::Label(*label),
            };
            if let Some(r) = rng.as_deref_mut() {
                train_transform(&mut sample, &self.cfg.policy, r)?;
            } else {
                resize(&mut sample, self.cfg.input_size, self.cfg.input_size);
            }
            normalize_image(&mut sample.image, &self.cfg.normalize);
            images.push(sample.image);
            labels[[i]] = T::of_usize(*label as usize);
        }
        Ok((stack_batch(&images).into_dyn(), labels))
    }

}

impl<T: Scalar> FoldTask<T> for ClsFoldTask<T> {
    fn plan_epoch(&mut self, epoch: usize) -> Result<Vec<Vec<String>>> {
        let draws = weighted_draws(
            &self.weights,
            self.train_ids.len(),
            epoch_seed(self.cfg.seed, epoch),
        )?;
        Ok(draws
            .chunks(self.cfg.batch_size)
            .map(|c| c.iter().map(|&i| self.train_ids[i].clone()).collect())
            .collect())
    }

    fn train_batch(
        &mut self,
        params: &mut Params<T>,
        ids: &[String],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let (images, targets) = self.batch_tensors(ids, Some(rng))?;
        let mut sess = Session::new(params, true);
        let x = sess.input(images);
        let logits = self.model.forward(&mut sess, x, Some(rng));
        let flat = sess.tape.reshape(logits, &[ids.len()]);
        let probs = sess.tape.sigmoid(flat);
        let loss = focal_loss(
            sess.tape.value(probs),
            &targets,
            &self.cfg.focal,
            Reduction::Mean,
        )?;
        let root = sess.tape.scalar_with_grad(probs, loss.value, loss.grad);
        let grads = sess.backward(root);
        params.accumulate(&grads);
        Ok(loss.value.as_f64())
    }

    fn val_loss(&mut self, params: &Params<T>) -> Result<f64> {
        let ids = self.val_ids.clone();
        let mut total = 0.0;
        for chunk in ids.chunks(self.cfg.batch_size) {
            let (images, targets) = self.batch_tensors(chunk, None)?;
            let mut sess = Session::new(params, false);
            let x = sess.input(images);
            let logits = self.model.forward(&mut sess, x, None);
            let flat = sess.tape.reshape(logits, &[chunk.len()]);
            let probs = sess.tape.sigmoid(flat);
            let loss = focal_loss(
                sess.tape.value(probs),
                &targets,
                &self.cfg.focal,
                Reduction::Mean,
            )?;
            total += loss.value.as_f64() * chunk.len() as f64;
        }
        Ok(total / self.val_ids.len() as f64)
    }
}
