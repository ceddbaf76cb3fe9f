//! Adam, the training loop with validation-based model selection, metrics
//! logging, and checkpoints.

mod adam;
mod checkpoint;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, NetworkSpec, TrainInputs};
use crate::rng;
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.pcap";
pub const METRICS_HEADER: &str = "epoch,train_margin_loss,train_recon_loss,val_error_pct,test_error_pct,seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Pad-and-crop augmentation of training images.
    pub augment: bool,
    pub adam: AdamConfig,
    /// Evaluate the test set after every epoch instead of once at the end.
    pub test_every_epoch: bool,
    /// Fill the `seconds` column. Off by default so reruns give identical CSVs.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            augment: true,
            adam: AdamConfig::default(),
            test_every_epoch: true,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        let a = self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(Error::config("adam.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::config("adam.beta", "betas must lie in [0, 1)"));
        }
        if !(a.eps > 0.0) {
            return Err(Error::config("adam.eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Option<Dataset>,
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_margin_loss: f64,
    pub train_recon_loss: Option<f64>,
    pub val_error_pct: f64,
    pub test_error_pct: Option<f64>,
    pub seconds: Option<f64>,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Metrics CSV text, header included.
pub fn metrics_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.train_margin_loss,
            cell(r.train_recon_loss),
            r.val_error_pct,
            cell(r.test_error_pct),
            cell(r.seconds)
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub error_pct: f64,
    pub margin_loss: f64,
    pub recon_loss: Option<f64>,
    pub predictions: Vec<usize>,
}

/// Error rate and mean losses with all paths active and no augmentation.
pub fn evaluate(spec: &NetworkSpec, params: &ModelParams, dataset: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let batch_size = batch_size.max(1);
    let n = dataset.len();
    let mut predictions = Vec::with_capacity(n);
    let (mut margin, mut recon) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let labels = &dataset.labels[start..end];
        let mut g = Graph::new();
        let bound = params.bind_constant(&mut g);
        let images = g.constant(dataset.images.gather_batch(&idx)?);
        let out = model::forward(&mut g, spec, &bound, images, None)?;
        let losses = model::total_loss(&mut g, &out, images, labels)?;
        let weight = (end - start) as f64;
        margin += g.value(losses.margin).item()? * weight;
        if let Some(r) = losses.reconstruction {
            recon += g.value(r).item()? * weight;
        }
        predictions.extend(model::predictions(g.value(out.lengths)));
        start = end;
    }
    let wrong = predictions.iter().zip(&dataset.labels).filter(|(p, l)| p != l).count();
    Ok(Evaluation {
        error_pct: 100.0 * wrong as f64 / n as f64,
        margin_loss: margin / n as f64,
        recon_loss: spec.reconstruction.then_some(recon / n as f64),
        predictions,
    })
}

/// Index of the lowest validation error, the earliest on ties.
pub fn select_best(val_errors: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &e) in val_errors.iter().enumerate() {
        if best.is_none_or(|b| e < val_errors[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub best: Checkpoint,
    pub best_val_error_pct: f64,
    /// Test error of the retained checkpoint, when a test set was given.
    pub best_test_error_pct: Option<f64>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

struct EpochLoss {
    margin: f64,
    recon: Option<f64>,
}

fn augment_batch(images: &Tensor, rng: &mut rng::StreamRng) -> Result<Tensor> {
    let pixels = model::IMAGE_PIXELS;
    let mut out = Vec::with_capacity(images.len());
    for sample in images.data().chunks(pixels) {
        out.extend(data::augment(sample, rng));
    }
    Tensor::new(images.shape(), out)
}

fn run_epoch(
    spec: &NetworkSpec,
    params: &mut ModelParams,
    adam: &mut AdamState,
    train: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochLoss> {
    let stream = epoch as u64;
    let mut aug_rng = rng::stream(spec.seed, "augment", stream);
    let mut mask_rng = rng::stream(spec.seed, "dropcircuit", stream);
    let (mut margin, mut recon, mut seen) = (0.0, 0.0, 0usize);

    for (batch, (images, labels)) in data::batches(train, cfg.batch_size, spec.seed, stream)?.enumerate() {
        let images = if cfg.augment { augment_batch(&images, &mut aug_rng)? } else { images };
        let masks = model::sample_masks(spec, labels.len(), &mut mask_rng)?;

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(images);
        let inputs = TrainInputs { labels: &labels, masks };
        let out = model::forward(&mut g, spec, &bound, x, Some(&inputs))?;
        let losses = model::total_loss(&mut g, &out, x, &labels)?;
        let m = g.value(losses.margin).item()?;
        let r = losses.reconstruction.map(|r| g.value(r).item()).transpose()?;
        if !m.is_finite() || r.is_some_and(|r| !r.is_finite()) {
            return Err(Error::NonFinite {
                epoch,
                batch: batch + 1,
                detail: format!("margin loss {m}, reconstruction loss {}", cell(r)),
            });
        }
        g.backward(losses.total)?;
        let grads = bound.grads(&g);
        adam_step(params, &grads, adam)?;
        if let Some((name, _)) = params.iter().find(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                epoch,
                batch: batch + 1,
                detail: format!("parameter {name} became non-finite after the update"),
            });
        }

        let w = labels.len() as f64;
        margin += m * w;
        recon += r.unwrap_or(0.0) * w;
        seen += labels.len();
    }
    let seen = seen.max(1) as f64;
    Ok(EpochLoss {
        margin: margin / seen,
        recon: spec.reconstruction.then_some(recon / seen),
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains from a fresh initialization. See [`train_with`].
pub fn train(spec: &NetworkSpec, datasets: &Datasets, cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    train_with(spec, datasets, cfg, out_dir, |_| {})
}

/// Trains for `cfg.epochs`, writing `metrics.csv` after every epoch and
/// `best.pcap` whenever validation error improves. `on_epoch` sees each
/// finished row.
pub fn train_with(
    spec: &NetworkSpec,
    datasets: &Datasets,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    mut on_epoch: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    if datasets.train.is_empty() {
        return Err(Error::config("train", "training set is empty"));
    }
    if datasets.validation.is_empty() {
        return Err(Error::config("validation", "validation set is empty"));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);

    let mut params = model::init_params(spec);
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut records: Vec<TrainRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Checkpoint, f64)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let loss = run_epoch(spec, &mut params, &mut adam, &datasets.train, cfg, epoch)?;
        let val = evaluate(spec, &params, &datasets.validation, cfg.batch_size)?;
        let test = match &datasets.test {
            Some(t) if cfg.test_every_epoch => Some(evaluate(spec, &params, t, cfg.batch_size)?.error_pct),
            _ => None,
        };
        let record = TrainRecord {
            epoch,
            train_margin_loss: loss.margin,
            train_recon_loss: loss.recon,
            val_error_pct: val.error_pct,
            test_error_pct: test,
            seconds: cfg.record_time.then(|| started.elapsed().as_secs_f64()),
        };

        if best.as_ref().is_none_or(|(_, e)| val.error_pct < *e) {
            let ckpt = Checkpoint {
                spec: spec.clone(),
                params: params.clone(),
                adam: adam.clone(),
                epoch: epoch as u64,
            };
            save_checkpoint(&ckpt, &checkpoint_path)?;
            best = Some((ckpt, val.error_pct));
        }
        records.push(record);
        write_file(&metrics_path, metrics_csv(&records).as_bytes())?;
        on_epoch(records.last().expect("just pushed"));
    }

    let (best, best_val_error_pct) = best.expect("at least one epoch");
    let best_test_error_pct = match &datasets.test {
        Some(t) => Some(evaluate(spec, &best.params, t, cfg.batch_size)?.error_pct),
        None => None,
    };
    Ok(TrainOutcome {
        records,
        best,
        best_val_error_pct,
        best_test_error_pct,
        metrics_path,
        checkpoint_path,
    })
}
