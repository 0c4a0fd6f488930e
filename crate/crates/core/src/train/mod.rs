//! Mini-batch Adam training with per-epoch validation and best-model selection.

mod adam;
mod sweep;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use sweep::{fraction_sweep, resolution_sweep, train_and_evaluate, SweepRow};

use crate::data::{DataError, DataMode, ExamSet, Preprocessor, Scale};
use crate::metrics::{
    confidence_thresholds, hc_mac_auc, mac_auc, ClassAucs, HcSubset, MetricsError, MetricsReport,
    PredictionDistribution, CLASSES,
};
use crate::model::{
    forward_graph, predict_centered, predict_tta, save_checkpoint, Mode, ModelConfig, ModelError, ModelParams,
    TrainNoise,
};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{set} set lacks class {class}: {detail}")]
    MissingClass { set: &'static str, class: usize, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub input_noise_std: f64,
    pub dropout: f64,
    pub seed: u64,
    pub scale: Scale,
    /// Fraction of training exams kept, sampled without replacement.
    pub data_fraction: f64,
    pub width_divisor: usize,
    pub hidden_units: usize,
    /// Stop once validation macAUC reaches this value.
    pub target_val_mac_auc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 4,
            max_epochs: 200,
            input_noise_std: 0.01,
            dropout: 0.2,
            seed: 0,
            scale: Scale::Eighth,
            data_fraction: 1.0,
            width_divisor: 1,
            hidden_units: 1024,
            target_val_mac_auc: None,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::for_scale(self.scale)
            .with_width_divisor(self.width_divisor)
            .with_hidden_units(self.hidden_units)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data_fraction must be in (0,1], got {}", self.data_fraction));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        if !(self.input_noise_std >= 0.0 && self.input_noise_std.is_finite()) {
            return bad(format!("input_noise_std must be >= 0, got {}", self.input_noise_std));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: ClassAucs,
    /// Whether this epoch produced the new best checkpoint.
    pub checkpoint: bool,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_auc0,val_auc1,val_auc2,val_macauc,checkpoint_flag";

pub fn render_epoch_log(log: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.val.auc[0],
            r.val.auc[1],
            r.val.auc[2],
            r.val.mac_auc,
            u8::from(r.checkpoint)
        );
    }
    out
}

pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val: ClassAucs,
    pub log: Vec<EpochRecord>,
    /// Loss of the very first mini-batch, before any update.
    pub first_batch_loss: f64,
    /// Training exams actually used, as indices into the source.
    pub train_indices: Vec<usize>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const EPOCH_LOG: &str = "epoch_log.csv";

fn write_file(path: &Path, contents: &[u8]) -> Result<(), TrainError> {
    fs::write(path, contents).map_err(|e| TrainError::Io { path: path.to_path_buf(), source: e })
}

fn require_classes(set: &'static str, labels: &[usize], detail: &str) -> Result<(), TrainError> {
    for c in 0..CLASSES {
        if !labels.contains(&c) {
            return Err(TrainError::MissingClass { set, class: c, detail: detail.into() });
        }
    }
    Ok(())
}

/// Without-replacement subsample of `indices`; the full list when `fraction` is 1.
pub fn subsample(indices: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return indices.to_vec();
    }
    let n = ((indices.len() as f64 * fraction).round() as usize).clamp(1, indices.len());
    let mut rng = stream_rng(seed, Stream::Subsample, &[]);
    let mut picked: Vec<usize> = index::sample(&mut rng, indices.len(), n).into_iter().map(|i| indices[i]).collect();
    picked.sort_unstable();
    picked
}

/// Loss and parameter gradients for one exam.
fn exam_gradients(
    params: &ModelParams,
    set: ExamSet<'_>,
    k: usize,
    pre: &Preprocessor,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
    let exam = set.load(k)?;
    let item = set.indices()[k] as u64;
    let mut rng = stream_rng(cfg.seed, Stream::Data, &[epoch as u64, item]);
    let views = pre.prepare(&exam, DataMode::Train, &mut rng)?;
    let noise = TrainNoise {
        input_noise_std: cfg.input_noise_std,
        dropout: cfg.dropout,
        seed: derive_seed(cfg.seed, Stream::Dropout, &[epoch as u64, item]),
    };
    let mut pass = forward_graph(params, views.map(Arc::new), Mode::Train(noise), true, false)?;
    let loss = pass.graph.cross_entropy(pass.probs, exam.label()).map_err(ModelError::from)?;
    pass.graph.backward(loss).map_err(ModelError::from)?;
    let value = f64::from(pass.graph.value(loss).data()[0]);
    let grads = pass
        .params
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| pass.graph.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// Mean loss and mean gradient over a batch; the reduction runs in batch order.
pub fn batch_gradients(
    params: &ModelParams,
    set: ExamSet<'_>,
    batch: &[usize],
    pre: &Preprocessor,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
    let per_exam = batch
        .par_iter()
        .map(|&k| exam_gradients(params, set, k, pre, cfg, epoch))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = 1.0 / batch.len() as f32;
    let mut iter = per_exam.into_iter();
    let (mut loss, mut sum) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in sum.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += *b;
            }
        }
    }
    for acc in &mut sum {
        for a in acc.data_mut() {
            *a *= scale;
        }
    }
    Ok((loss / batch.len() as f64, sum))
}

/// Centered-crop predictions for every exam in `set`, in set order.
pub fn predict_set_centered(
    params: &ModelParams,
    set: ExamSet<'_>,
    pre: &Preprocessor,
) -> Result<Vec<PredictionDistribution>, TrainError> {
    (0..set.len())
        .into_par_iter()
        .map(|k| Ok(predict_centered(params, &set.load(k)?, pre)?))
        .collect()
}

/// TTA predictions for every exam; each exam's crops derive from `seed` and
/// its source index.
pub fn predict_set_tta(
    params: &ModelParams,
    set: ExamSet<'_>,
    pre: &Preprocessor,
    n_crops: usize,
    seed: u64,
) -> Result<Vec<PredictionDistribution>, TrainError> {
    (0..set.len())
        .into_par_iter()
        .map(|k| {
            let exam_seed = derive_seed(seed, Stream::Tta, &[set.indices()[k] as u64]);
            Ok(predict_tta(params, &set.load(k)?, pre, n_crops, exam_seed)?)
        })
        .collect()
}

/// How exam predictions are produced during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prediction {
    Centered,
    Tta { crops: usize, seed: u64 },
}

pub fn predict_set(
    params: &ModelParams,
    set: ExamSet<'_>,
    pre: &Preprocessor,
    how: Prediction,
) -> Result<Vec<PredictionDistribution>, TrainError> {
    match how {
        Prediction::Centered => predict_set_centered(params, set, pre),
        Prediction::Tta { crops, seed } => predict_set_tta(params, set, pre, crops, seed),
    }
}

/// Test-set report with confidence thresholds taken from validation predictions.
pub fn evaluate_report(
    val: (&[PredictionDistribution], &[usize]),
    test: (&[PredictionDistribution], &[usize]),
    hc_percent: f64,
    subset: HcSubset,
) -> Result<MetricsReport, TrainError> {
    let aucs = mac_auc(test.0, test.1)?;
    let thresholds = confidence_thresholds(val.0, val.1, hc_percent)?;
    let high = hc_mac_auc(test.0, test.1, &thresholds, subset)?;
    Ok(MetricsReport { aucs, high_confidence: Some(high), thresholds: Some(thresholds), kappa: None })
}

/// Trains from a fresh initialization and returns the epoch with the highest
/// validation macAUC (first such epoch on ties).
///
/// With `out_dir`, the best checkpoint and the epoch log are written there
/// as training proceeds.
pub fn train(
    train_set: ExamSet<'_>,
    validation: ExamSet<'_>,
    pre: &Preprocessor,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(TrainError::Config("training and validation sets must be non-empty".into()));
    }
    if pre.scale() != cfg.scale {
        return Err(TrainError::Config(format!(
            "preprocessor runs at x{}, configuration asks for x{}",
            pre.scale(),
            cfg.scale
        )));
    }
    require_classes("validation", &validation.labels(), "validation macAUC is undefined without all three classes")?;
    let train_indices = subsample(train_set.indices(), cfg.data_fraction, cfg.seed);
    let used = ExamSet::new(train_set.source(), &train_indices);
    require_classes(
        "training",
        &used.labels(),
        &format!("data fraction {} left too few exams", cfg.data_fraction),
    )?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io { path: dir.to_path_buf(), source: e })?;
    }

    let mut params: ModelParams = ModelParams::init(cfg.model_config(), cfg.seed)?;
    let mut adam = AdamState::new(params.tensors());
    let mut log = Vec::new();
    let mut best: Option<(ModelParams, usize, ClassAucs)> = None;
    let mut first_batch_loss = None;
    let mut order: Vec<usize> = (0..used.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, &[epoch as u64]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradients(&params, used, batch, pre, cfg, epoch)?;
            first_batch_loss.get_or_insert(loss);
            loss_sum += loss * batch.len() as f64;
            adam_step(params.tensors_mut(), &grads, &mut adam, cfg.learning_rate)?;
        }
        let val_dists = predict_set_centered(&params, validation, pre)?;
        let val = mac_auc(&val_dists, &validation.labels())?;
        let improved = best.as_ref().is_none_or(|b| val.mac_auc > b.2.mac_auc);
        if improved {
            if let Some(dir) = out_dir {
                save_checkpoint(&params, &dir.join(BEST_CHECKPOINT))?;
            }
            best = Some((params.clone(), epoch, val));
        }
        log.push(EpochRecord { epoch, train_loss: loss_sum / used.len() as f64, val, checkpoint: improved });
        if let Some(dir) = out_dir {
            write_file(&dir.join(EPOCH_LOG), render_epoch_log(&log).as_bytes())?;
        }
        if cfg.target_val_mac_auc.is_some_and(|t| val.mac_auc >= t) {
            break;
        }
    }
    let (best, best_epoch, best_val) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val,
        log,
        first_batch_loss: first_batch_loss.expect("at least one batch"),
        train_indices,
    })
}
