//! Pretraining: loss, optimizer, EMA target updates, schedules and the
//! training loop with its metric log.

mod loss;
mod optim;
mod schedule;

pub use loss::{tjepa_loss, LossNormalization};
pub use optim::{ema_scalar, ema_update, AdamW, AdamWConfig, Gradients};
pub use schedule::{cosine_lr, momentum_schedule};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, PairwiseMetric, DEFAULT_PAIR_CAP};
use crate::data::{encode_rows, fit_preprocessor, EncodedSample, FeatureSchema, Split, TabularDataset, UnseenTally};
use crate::error::{Error, Result};
use crate::masking::{apply_target_mask, check_feasible, sample_mask_set, MaskSet, ShareBounds};
use crate::model::{strip_reg, BindMode, Binder, Checkpoint, CheckpointMeta, ModelConfig, ModelState, RngState};
use crate::numeric::{Graph, Real, Var};
use crate::par::{map_indexed, Parallelism};

/// Samples handled by one worker before its gradients are merged.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Initial learning rate.
    pub exp_lr: f64,
    pub weight_decay: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub n_context: usize,
    pub n_target: usize,
    /// Share bounds are fractions of the `d` features each mask keeps visible.
    pub mask_min_ctx_share: f64,
    pub mask_max_ctx_share: f64,
    pub mask_min_trgt_share: f64,
    pub mask_max_trgt_share: f64,
    pub model_num_heads: usize,
    pub model_dim_hidden: usize,
    pub model_num_layers: usize,
    pub model_dim_feedforward: usize,
    pub model_dropout_prob: f64,
    pub pred_num_layers: usize,
    pub pred_embed_dim: usize,
    pub pred_num_heads: usize,
    pub pred_p_dropout: f64,
    pub n_reg_tokens: usize,
    pub seed: u64,
    pub target_column: Option<String>,
    pub has_header: bool,
    pub loss_normalization: LossNormalization,
    /// Epoch interval between checkpoints; epoch 0 and the last epoch are
    /// always written.
    pub checkpoint_every: usize,
    /// Training rows used for the representation snapshots.
    pub metric_samples: usize,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            epochs: 100,
            exp_lr: 1e-3,
            weight_decay: 0.01,
            ema_start: 0.996,
            ema_end: 1.0,
            n_context: 1,
            n_target: 4,
            mask_min_ctx_share: 0.1,
            mask_max_ctx_share: 0.5,
            mask_min_trgt_share: 0.1,
            mask_max_trgt_share: 0.4,
            model_num_heads: 2,
            model_dim_hidden: 16,
            model_num_layers: 2,
            model_dim_feedforward: 64,
            model_dropout_prob: 0.0,
            pred_num_layers: 2,
            pred_embed_dim: 8,
            pred_num_heads: 2,
            pred_p_dropout: 0.0,
            n_reg_tokens: 1,
            seed: 0,
            target_column: Some("y".into()),
            has_header: true,
            loss_normalization: LossNormalization::Sum,
            checkpoint_every: 1,
            metric_samples: 256,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn context_shares(&self) -> ShareBounds {
        ShareBounds::new(self.mask_min_ctx_share, self.mask_max_ctx_share)
    }

    pub fn target_shares(&self) -> ShareBounds {
        ShareBounds::new(self.mask_min_trgt_share, self.mask_max_trgt_share)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.exp_lr > 0.0 && self.exp_lr.is_finite()) {
            return Err(Error::Config(format!("exp_lr = {} must be positive", self.exp_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay = {} must be >= 0", self.weight_decay)));
        }
        if !(0.0 < self.ema_start && self.ema_start <= self.ema_end && self.ema_end <= 1.0) {
            return Err(Error::Config(format!(
                "EMA schedule needs 0 < ema_start <= ema_end <= 1, got {} and {}",
                self.ema_start, self.ema_end
            )));
        }
        if self.n_context == 0 || self.n_target == 0 {
            return Err(Error::Config("n_context and n_target must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Model layout for `schema`. The predictor FFN is four times its width.
    pub fn model_config(&self, schema: &FeatureSchema) -> ModelConfig {
        ModelConfig {
            cardinalities: schema.cardinalities(),
            kinds: schema.kinds(),
            hidden: self.model_dim_hidden,
            num_heads: self.model_num_heads,
            num_layers: self.model_num_layers,
            feedforward: self.model_dim_feedforward,
            dropout: self.model_dropout_prob,
            pred_hidden: self.pred_embed_dim,
            pred_num_heads: self.pred_num_heads,
            pred_num_layers: self.pred_num_layers,
            pred_feedforward: 4 * self.pred_embed_dim,
            pred_dropout: self.pred_p_dropout,
            n_reg: self.n_reg_tokens,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub momentum: f64,
}

/// Representation snapshot taken at a checkpoint epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: u64,
    /// Mean step loss over the epoch; absent for epoch 0.
    pub mean_loss: Option<f64>,
    pub skipped_steps: u64,
    pub uniformity: Option<f64>,
    pub mean_kl: Option<f64>,
    pub mean_distance: Option<f64>,
}

/// SplitMix64 finalizer over a combination of stream coordinates.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Graph holding the loss of one sample under one mask set.
pub struct SampleLoss<T> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub predictions: Vec<Var>,
}

/// Builds the per-sample loss: target representations from `f_θ̄` on the
/// full sample (detached), predictions from `g_φ(f_θ(z^m))` for every
/// context/target pair.
pub fn sample_loss<T: Real>(
    state: &ModelState<T>,
    sample: &EncodedSample<T>,
    masks: &MaskSet,
    norm: LossNormalization,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<SampleLoss<T>> {
    let h_target = {
        let mut tg = Graph::no_grad();
        let mut tb = Binder::new(&state.store);
        let z = state.embed_sample(&mut tg, &mut tb, sample, None, BindMode::Frozen)?;
        let h = state.target_forward(&mut tg, &mut tb, z)?;
        let h = strip_reg(&mut tg, h, state.n_reg())?;
        tg.value(h).clone()
    };

    let mut g = Graph::new();
    let mut b = Binder::new(&state.store);
    let mut preds = Vec::with_capacity(masks.context.len() * masks.target.len());
    let mut targets = Vec::with_capacity(preds.capacity());
    for cm in &masks.context {
        let z = state.embed_sample(&mut g, &mut b, sample, Some(cm), BindMode::Train)?;
        let h = state.context_forward(&mut g, &mut b, z, rng.as_deref_mut())?;
        let h = strip_reg(&mut g, h, state.n_reg())?;
        for tm in &masks.target {
            preds.push(state.predict_targets(&mut g, &mut b, h, tm, rng.as_deref_mut())?);
            targets.push(g.constant(apply_target_mask(&h_target, tm)?));
        }
    }
    let loss = tjepa_loss(&mut g, &preds, &targets, masks.context.len(), masks.target.len(), norm)?;
    Ok(SampleLoss {
        graph: g,
        loss,
        predictions: preds,
    })
}

/// Optimizer, EMA and schedule state around a [`ModelState`].
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub state: ModelState<T>,
    pub optimizer: AdamW,
    step: u64,
    total_steps: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, schema: &FeatureSchema, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let state = ModelState::new(config.model_config(schema), config.seed)?;
        check_feasible(state.d(), config.context_shares(), config.target_shares())?;
        Ok(Self::from_state(config, state, total_steps))
    }

    pub fn from_state(config: TrainConfig, state: ModelState<T>, total_steps: u64) -> Self {
        let optimizer = AdamW::new(config.adamw(), &state.store, &state.trainable_ids());
        Trainer {
            config,
            state,
            optimizer,
            step: 0,
            total_steps,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Mask sets drawn for the sample at position `i` of the batch at
    /// `step`, together with the stream that continues into dropout.
    pub fn sample_stream(&self, step: u64, i: usize) -> Result<(MaskSet, ChaCha8Rng)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, step, i as u64));
        let ms = sample_mask_set(
            self.state.d(),
            self.config.n_context,
            self.config.n_target,
            self.config.context_shares(),
            self.config.target_shares(),
            &mut rng,
        )?;
        Ok((ms, rng))
    }

    /// Mean loss and mean gradients over a batch. Samples are processed in
    /// fixed chunks merged in index order, so the result does not depend on
    /// the thread count.
    pub fn batch_gradients(&self, batch: &[&EncodedSample<T>]) -> Result<(f64, Gradients<T>)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let n_params = self.state.store.len();
        let chunks = batch.len().div_ceil(GRAD_CHUNK);
        let parts = map_indexed(self.config.parallelism, chunks, |c| -> Result<(f64, Gradients<T>)> {
            let mut grads = Gradients::new(n_params);
            let mut loss = 0.0;
            for (i, sample) in batch.iter().enumerate().skip(c * GRAD_CHUNK).take(GRAD_CHUNK) {
                let (ms, mut rng) = self.sample_stream(self.step, i)?;
                let mut s = sample_loss(&self.state, sample, &ms, self.config.loss_normalization, Some(&mut rng))?;
                loss += s.graph.value(s.loss).data()[0].f64();
                s.graph.backward(s.loss)?;
                grads.accumulate_graph(&s.graph);
            }
            Ok((loss, grads))
        });
        let mut loss = 0.0;
        let mut grads = Gradients::new(n_params);
        for p in parts {
            let (l, g) = p?;
            loss += l;
            grads.accumulate(&g);
        }
        let n = batch.len() as f64;
        grads.scale(T::of(1.0 / n));
        Ok((loss / n, grads))
    }

    /// One optimizer step followed by the EMA update of the target encoder.
    pub fn train_step(&mut self, batch: &[&EncodedSample<T>], epoch: usize) -> Result<StepRecord> {
        let (loss, grads) = self.batch_gradients(batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {} (epoch {epoch}); batch of {} samples, mean |x| {:.4e}, gradient norm {:.4e}, parameter norm {:.4e}",
                self.step,
                batch.len(),
                mean_abs_input(batch),
                grads.global_norm(),
                param_norm(&self.state),
            )));
        }
        let lr = cosine_lr(self.step, self.total_steps, self.config.exp_lr);
        let momentum = momentum_schedule(self.step, self.total_steps, self.config.ema_start, self.config.ema_end);
        if self.optimizer.step(&mut self.state.store, &grads, lr)? {
            let pairs = self.state.ema_pairs();
            ema_update(&mut self.state.store, &pairs, momentum)?;
        }
        let rec = StepRecord {
            step: self.step,
            epoch,
            loss,
            lr,
            momentum,
        };
        self.step += 1;
        Ok(rec)
    }
}

fn mean_abs_input<T: Real>(batch: &[&EncodedSample<T>]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in batch {
        for v in x.features.iter().flatten() {
            s += v.f64().abs();
            n += 1;
        }
    }
    s / n.max(1) as f64
}

fn param_norm<T: Real>(state: &ModelState<T>) -> f64 {
    state
        .store
        .iter()
        .flat_map(|(_, _, t)| t.data().iter().map(|x| x.f64() * x.f64()))
        .sum::<f64>()
        .sqrt()
}

/// Encoded training rows and the schema fitted on them.
pub struct PreparedData<T> {
    pub dataset: TabularDataset,
    pub schema: FeatureSchema,
    pub train: Vec<EncodedSample<T>>,
}

/// Splits `ds` with the configured seed, fits the preprocessor on the
/// training split and encodes it.
pub fn prepare<T: Real>(ds: &TabularDataset, cfg: &TrainConfig) -> Result<PreparedData<T>> {
    let mut ds = ds.clone();
    ds.assign_splits(cfg.seed)?;
    let schema = fit_preprocessor(&ds, Split::Train)?;
    let rows = ds.rows_in(Split::Train);
    let train = encode_rows(&ds, &schema, &rows, &mut UnseenTally::default())?;
    Ok(PreparedData {
        dataset: ds,
        schema,
        train,
    })
}

/// Uniformity (t = 2), mean pairwise KL and mean pairwise distance of the
/// representations of `samples`.
pub fn snapshot_metrics<T: Real>(
    state: &ModelState<T>,
    samples: &[EncodedSample<T>],
    seed: u64,
    par: Parallelism,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    if samples.len() < 2 {
        return Ok((None, None, None));
    }
    let e = analysis::representations(state, samples, par)?;
    let u = analysis::uniformity(&e, 2.0, DEFAULT_PAIR_CAP, seed, par)?;
    let kl = analysis::mean_pairwise(PairwiseMetric::Kl, &e, DEFAULT_PAIR_CAP, seed, par)?;
    let dist = analysis::mean_pairwise(PairwiseMetric::Euclidean, &e, DEFAULT_PAIR_CAP, seed, par)?;
    Ok((Some(u), Some(kl), Some(dist)))
}

pub const STEP_LOG: &str = "metrics.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch:04}.json")
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: ModelState<f32>,
    pub schema: FeatureSchema,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
    pub skipped_steps: u64,
}

struct Logs {
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    File::create(&path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_line<W: Write>(w: &mut W, v: &impl Serialize, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Runs the full pretraining loop on the training split of `ds`. With
/// `out_dir`, the step log, epoch snapshots and checkpoints are written
/// there.
pub fn pretrain(ds: &TabularDataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let data = prepare::<f32>(ds, cfg)?;
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let mut trainer = Trainer::<f32>::new(cfg.clone(), &data.schema, total)?;
    let config_echo = serde_json::to_value(cfg)?;

    let metric_rows: Vec<EncodedSample<f32>> = {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX, 0)));
        idx.truncate(cfg.metric_samples.min(n));
        idx.sort_unstable();
        idx.into_iter().map(|i| data.train[i].clone()).collect()
    };

    let mut logs = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(Logs {
                steps: create(dir.join(STEP_LOG))?,
                epochs: create(dir.join(EPOCH_LOG))?,
            })
        }
        None => None,
    };

    let mut out = PretrainOutcome {
        state: trainer.state.clone(),
        schema: data.schema.clone(),
        steps: Vec::new(),
        epochs: Vec::new(),
        checkpoints: Vec::new(),
        skipped_steps: 0,
    };

    let snapshot = |trainer: &Trainer<f32>, epoch: usize, mean_loss: Option<f64>, out: &mut PretrainOutcome, logs: &mut Option<Logs>| -> Result<()> {
        let (uniformity, mean_kl, mean_distance) =
            snapshot_metrics(&trainer.state, &metric_rows, cfg.seed, cfg.parallelism)?;
        let summary = EpochSummary {
            epoch,
            step: trainer.step(),
            mean_loss,
            skipped_steps: trainer.optimizer.skipped(),
            uniformity,
            mean_kl,
            mean_distance,
        };
        if let (Some(dir), Some(l)) = (out_dir, logs.as_mut()) {
            write_line(&mut l.epochs, &summary, &dir.join(EPOCH_LOG))?;
            l.epochs.flush().map_err(|e| Error::io(dir.join(EPOCH_LOG), e))?;
            let path = dir.join(checkpoint_name(epoch));
            let ckpt = Checkpoint {
                meta: CheckpointMeta {
                    schema_hash: data.schema.hash(),
                    schema: data.schema.clone(),
                    epoch,
                    step: trainer.step(),
                    rng: RngState {
                        seed: cfg.seed,
                        step: trainer.step(),
                    },
                    model: trainer.state.config.clone(),
                    config: config_echo.clone(),
                },
                state: trainer.state.clone(),
            };
            ckpt.save(&path)?;
            out.checkpoints.push(path);
        }
        out.epochs.push(summary);
        Ok(())
    };

    snapshot(&trainer, 0, None, &mut out, &mut logs)?;

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX)));
        let mut losses = Vec::with_capacity(steps_per_epoch as usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedSample<f32>> = chunk.iter().map(|&i| &data.train[i]).collect();
            let rec = trainer.train_step(&batch, epoch)?;
            losses.push(rec.loss);
            if let (Some(dir), Some(l)) = (out_dir, logs.as_mut()) {
                write_line(&mut l.steps, &rec, &dir.join(STEP_LOG))?;
            }
            out.steps.push(rec);
        }
        if let (Some(dir), Some(l)) = (out_dir, logs.as_mut()) {
            l.steps.flush().map_err(|e| Error::io(dir.join(STEP_LOG), e))?;
        }
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            snapshot(&trainer, epoch, Some(mean), &mut out, &mut logs)?;
        }
    }

    out.skipped_steps = trainer.optimizer.skipped();
    out.state = trainer.state;
    Ok(out)
}
