use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use menisc_autograd::{Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::early_stop::{EarlyStopping, Verdict};
use super::loss::{loss, LossKind, DEFAULT_DICE_SMOOTH};
use super::optim::Adam;
use crate::checkpoint::{save_checkpoint, write_atomic, CheckpointMeta};
use crate::error::{Error, IoContext, Result};
use crate::nn::{self, ForwardCtx};

/// A trainable segmentation network producing one logit map per input.
pub trait Segmenter {
    /// Short model identifier stored in checkpoints.
    fn kind(&self) -> &'static str;
    fn store(&self) -> &ParamStore<f32>;
    fn store_mut(&mut self) -> &mut ParamStore<f32>;
    /// Logits `[N, 1, ...]` for a batched input `[N, C, ...]`.
    fn logits<'g>(&self, g: &'g Graph<f32>, input: Var<'g, f32>, ctx: &mut ForwardCtx) -> Result<Var<'g, f32>>;
    /// Folds statistics collected during a training step into the model.
    fn absorb_stats(&mut self, _ctx: &ForwardCtx) -> Result<()> {
        Ok(())
    }
    fn config_json(&self) -> serde_json::Value;
}

/// One example: `input [C, ...]` and binary `target [1, ...]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub dice_smooth: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub batch_norm_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            loss: LossKind::BcePlusDice,
            dice_smooth: DEFAULT_DICE_SMOOTH,
            max_epochs: 200,
            patience: 5,
            seed: 0,
            batch_norm_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    /// Decoder-only fine-tuning of the first foundation backbone.
    pub fn sam1() -> Self {
        Self { learning_rate: 5e-6, batch_size: 8, loss: LossKind::Bce, ..Self::default() }
    }

    /// Fine-tuning setup used for the second foundation backbone.
    pub fn sam2() -> Self {
        Self { learning_rate: 5e-7, batch_size: 16, loss: LossKind::Bce, ..Self::default() }
    }

    pub fn unet() -> Self {
        Self { learning_rate: 1e-3, batch_size: 4, loss: LossKind::BcePlusDice, ..Self::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "sam1" => Ok(Self::sam1()),
            "sam2" => Ok(Self::sam2()),
            "unet" => Ok(Self::unet()),
            _ => Err(Error::Config(format!("unknown training preset `{name}` (sam1, sam2, unet)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch size, epochs and patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub seconds: Vec<f64>,
    /// One-based.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_loss", "seconds"])?;
        for i in 0..self.train_loss.len() {
            w.write_record([
                (i + 1).to_string(),
                self.train_loss[i].to_string(),
                self.val_loss[i].to_string(),
                format!("{:.3}", self.seconds[i]),
            ])?;
        }
        w.flush().at(path)?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub history: TrainingHistory,
    /// Path of the best checkpoint when a run directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Stacks samples into `[N, C, ...]` inputs and `[N, 1, ...]` targets.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    let stack = |get: &dyn Fn(&Sample) -> &Tensor<f32>| -> Result<Tensor<f32>> {
        let shape = get(first).shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * get(first).numel());
        for s in samples {
            if get(s).shape() != shape.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "batch mixes shapes {:?} and {:?}",
                    shape,
                    get(s).shape()
                )));
            }
            data.extend_from_slice(get(s).data());
        }
        let mut out_shape = vec![samples.len()];
        out_shape.extend_from_slice(&shape);
        Ok(Tensor::new(&out_shape, data)?)
    };
    Ok((stack(&|s| &s.input)?, stack(&|s| &s.target)?))
}

fn mean_loss<M: Segmenter + ?Sized>(model: &M, data: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(cfg.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = collate(&refs)?;
        let g = Graph::inference();
        let logits = model.logits(&g, g.constant(x), &mut ForwardCtx::eval())?;
        total += loss(cfg.loss, &logits, &y, cfg.dice_smooth)?.item() as f64 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Runs Adam with early stopping on the validation loss. The model ends
/// with the parameters of its best validation epoch. With a run
/// directory, `config.json`, `history.csv`, `best.safetensors` and
/// `summary.json` are written there.
pub fn train<M: Segmenter + ?Sized>(
    model: &mut M,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("training needs non-empty training and validation sets".into()));
    }
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).at(dir)?;
        let snapshot = serde_json::json!({ "train": cfg, "model": model.config_json(), "kind": model.kind() });
        write_atomic(&dir.join("config.json"), serde_json::to_string_pretty(&snapshot)?.as_bytes())?;
    }
    let checkpoint = run_dir.map(|d| d.join("best.safetensors"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainingHistory::default();
    let mut best: Option<ParamStore<f32>> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = collate(&refs)?;
            let g = Graph::new();
            let mut ctx = ForwardCtx::train();
            let logits = model.logits(&g, g.constant(x), &mut ctx)?;
            let l = loss(cfg.loss, &logits, &y, cfg.dice_smooth)?;
            let value = l.item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(format!("epoch {epoch}, batch {}: loss {value}", b + 1)));
            }
            let grads = g.backward(l)?;
            opt.step(model.store_mut(), &grads);
            model.absorb_stats(&ctx)?;
            nn::update_running_stats(model.store_mut(), &ctx.batch_stats, cfg.batch_norm_momentum)?;
            total += value * idx.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = mean_loss(model, val_set, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("epoch {epoch}: validation loss {val_loss}")));
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.seconds.push(started.elapsed().as_secs_f64());
        let verdict = stopper.observe(val_loss);
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if verdict == Verdict::Improved {
            best = Some(model.store().clone());
            if let Some(path) = &checkpoint {
                let meta = CheckpointMeta::new(model.kind(), model.config_json(), cfg.seed);
                save_checkpoint(path, model.store(), &meta)?;
            }
        }
        if let Some(dir) = run_dir {
            history.write_csv(&dir.join("history.csv"))?;
        }
        if verdict == Verdict::Stop {
            history.stopped_early = true;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch().unwrap_or(0);
    history.best_val_loss = stopper.best_loss();
    if let Some(best) = best {
        *model.store_mut() = best;
    }
    if let Some(dir) = run_dir {
        let summary = serde_json::json!({
            "epochs_run": history.train_loss.len(),
            "best_epoch": history.best_epoch,
            "best_val_loss": history.best_val_loss,
            "stopped_early": history.stopped_early,
            "trainable_parameters": model.store().num_scalars(true),
        });
        write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    }
    Ok(TrainOutcome { history, checkpoint })
}
