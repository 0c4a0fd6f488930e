use serde::Serialize;

use super::{evaluate_report, predict_set, train, Prediction, TrainConfig, TrainError, TrainOutcome};
use crate::data::{ExamSet, ExamSource, PatientSplit, Preprocessor, Scale};
use crate::metrics::{mac_auc, HcSubset, MetricsReport};

/// One trained setting of a sweep, evaluated on the test split.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub setting: String,
    pub report: MetricsReport,
    pub best_epoch: usize,
    pub best_val_mac_auc: f64,
    pub train_exams: usize,
    pub parameter_count: usize,
    /// Why the high-confidence metrics are absent, if they are.
    pub note: Option<String>,
}

/// Trains on `split.train`, selects on `split.validation` and reports on `split.test`.
pub fn train_and_evaluate(
    setting: String,
    source: &dyn ExamSource,
    split: &PatientSplit,
    pre: &Preprocessor,
    cfg: &TrainConfig,
    prediction: Prediction,
    hc_percent: f64,
) -> Result<(SweepRow, TrainOutcome), TrainError> {
    let train_set = ExamSet::new(source, &split.train);
    let val_set = ExamSet::new(source, &split.validation);
    let test_set = ExamSet::new(source, &split.test);
    let outcome = train(train_set, val_set, pre, cfg, None)?;
    let val = predict_set(&outcome.best, val_set, pre, prediction)?;
    let test = predict_set(&outcome.best, test_set, pre, prediction)?;
    let (val_labels, test_labels) = (val_set.labels(), test_set.labels());
    let (report, note) = match evaluate_report((&val, &val_labels), (&test, &test_labels), hc_percent, HcSubset::Union)
    {
        Ok(r) => (r, None),
        Err(TrainError::Metrics(e)) => {
            let aucs = mac_auc(&test, &test_labels)?;
            (MetricsReport { aucs, high_confidence: None, thresholds: None, kappa: None }, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    let row = SweepRow {
        setting,
        report,
        best_epoch: outcome.best_epoch,
        best_val_mac_auc: outcome.best_val.mac_auc,
        train_exams: outcome.train_indices.len(),
        parameter_count: outcome.best.count(),
        note,
    };
    Ok((row, outcome))
}

/// One model per training-data fraction; everything else fixed.
pub fn fraction_sweep(
    source: &dyn ExamSource,
    split: &PatientSplit,
    fractions: &[f64],
    pre: &Preprocessor,
    cfg: &TrainConfig,
    prediction: Prediction,
    hc_percent: f64,
) -> Result<Vec<SweepRow>, TrainError> {
    fractions
        .iter()
        .map(|&f| {
            let cfg = TrainConfig { data_fraction: f, ..cfg.clone() };
            let (row, _) = train_and_evaluate(format!("{}%", f * 100.0), source, split, pre, &cfg, prediction, hc_percent)?;
            Ok(row)
        })
        .collect()
}

/// One model per input resolution, each with its own layer-skip plan.
/// Images are stored at `source_scale` and resampled down as needed.
#[allow(clippy::too_many_arguments)]
pub fn resolution_sweep(
    source: &dyn ExamSource,
    split: &PatientSplit,
    scales: &[Scale],
    source_scale: Scale,
    cfg: &TrainConfig,
    prediction: Prediction,
    hc_percent: f64,
    cache_bytes: usize,
) -> Result<Vec<SweepRow>, TrainError> {
    scales
        .iter()
        .map(|&scale| {
            let pre = Preprocessor::new(scale, source_scale)?.with_cache(cache_bytes);
            let cfg = TrainConfig { scale, ..cfg.clone() };
            let (row, _) = train_and_evaluate(format!("x{scale}"), source, split, &pre, &cfg, prediction, hc_percent)?;
            Ok(row)
        })
        .collect()
}
