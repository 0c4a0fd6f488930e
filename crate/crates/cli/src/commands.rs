use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mvscreen::data::{
    split_by_patient, write_exam_images, write_manifest, ClassMix, DataMode, ExamSet, ExamSource, ManifestSource,
    PatientSplit, Preprocessor, Scale, SynthConfig, SyntheticSource, MANIFEST_FILE,
};
use mvscreen::metrics::{
    confidence_thresholds, hc_mac_auc, mac_auc, render_csv, render_table, MetricsReport, PredictionDistribution,
};
use mvscreen::model::{load_checkpoint, ModelParams};
use mvscreen::rng::{stream_rng, Stream};
use mvscreen::saliency::{heatmap_path, saliency as saliency_maps, write_heatmap};
use mvscreen::train::{
    self, fraction_sweep, predict_set, resolution_sweep, Prediction, SweepRow, BEST_CHECKPOINT,
};

use crate::config::RunConfig;
use crate::{RunArgs, SplitName, SweepMode};

/// Records how a generated dataset was produced; read back by every command.
pub const DATASET_CONFIG: &str = "dataset.cfg";
pub const EFFECTIVE_CONFIG: &str = "effective.cfg";
pub const TRAIN_SUMMARY: &str = "train_summary.cfg";

fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &run.config {
        cfg.apply_file(path)?;
    }
    if let Some(d) = &run.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(d) = &run.out {
        cfg.out_dir = Some(d.clone());
    }
    if let Some(s) = run.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = &run.scale {
        cfg.set("scale", s)?;
    }
    if let Some(f) = run.fraction {
        cfg.train.data_fraction = f;
    }
    cfg.apply_overrides(&run.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().context("an output directory is required (--out or out_dir=)")?;
    create_dir(&dir)?;
    Ok(dir)
}

struct Dataset {
    source: ManifestSource,
    source_scale: Scale,
    split: PatientSplit,
}

/// Resolution of the stored images: recorded by `gen-data`, full resolution otherwise.
fn source_scale(data_dir: &Path) -> Result<Scale> {
    let path = data_dir.join(DATASET_CONFIG);
    if !path.exists() {
        return Ok(Scale::Full);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    for line in text.lines() {
        if let Some(v) = line.trim().strip_prefix("source_scale=") {
            return v.parse::<Scale>().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()));
        }
    }
    Ok(Scale::Full)
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir.as_ref().context("a dataset is required (--data-dir or data_dir=)")?;
    let source = ManifestSource::open(&dir.join(MANIFEST_FILE))?;
    let split = split_by_patient(&source.infos(), &cfg.split)?;
    Ok(Dataset { source, source_scale: source_scale(dir)?, split })
}

fn preprocessor(scale: Scale, ds: &Dataset, cfg: &RunConfig) -> Result<Preprocessor> {
    Ok(Preprocessor::new(scale, ds.source_scale)?.with_cache(cfg.cache_mb << 20))
}

pub fn gen_data(out: &Path, n_exams: usize, seed: u64, scale: &str, class_mix: &str, margin: usize) -> Result<()> {
    ensure!(n_exams >= 30, "--n-exams must be at least 30, got {n_exams}");
    let scale: Scale = scale.parse().map_err(anyhow::Error::msg)?;
    let mix: ClassMix = class_mix.parse().map_err(anyhow::Error::msg)?;
    create_dir(out)?;
    let source = SyntheticSource::cohort(n_exams, seed, mix, SynthConfig { scale, margin, ..SynthConfig::default() });
    let mut entries = Vec::with_capacity(n_exams);
    for i in 0..source.len() {
        entries.push(write_exam_images(out, &source.load(i)?)?);
    }
    write_manifest(&out.join(MANIFEST_FILE), &entries)?;
    let counts = mix.counts(n_exams);
    write(
        &out.join(DATASET_CONFIG),
        &format!(
            "source_scale={scale}\nseed={seed}\nn_exams={n_exams}\nclass_mix={},{},{}\nmargin={margin}\n",
            mix.0[0], mix.0[1], mix.0[2]
        ),
    )?;
    println!(
        "wrote {n_exams} exams ({} / {} / {} for labels 0 / 1 / 2) to {}",
        counts[0],
        counts[1],
        counts[2],
        out.display()
    );
    Ok(())
}

pub fn train(run: &RunArgs) -> Result<()> {
    let cfg = resolve(run)?;
    let out = out_dir(&cfg)?;
    write(&out.join(EFFECTIVE_CONFIG), &cfg.render())?;
    let ds = open_dataset(&cfg)?;
    let pre = preprocessor(cfg.train.scale, &ds, &cfg)?;
    let train_set = ExamSet::new(&ds.source, &ds.split.train);
    let val_set = ExamSet::new(&ds.source, &ds.split.validation);
    println!(
        "training on {} exams, validating on {}, x{} input",
        train_set.len(),
        val_set.len(),
        cfg.train.scale
    );
    let outcome = train::train(train_set, val_set, &pre, &cfg.train, Some(&out))?;
    let last = outcome.log.last().expect("at least one epoch");
    write(
        &out.join(TRAIN_SUMMARY),
        &format!(
            "best_epoch={}\nbest_val_macauc={}\nepochs_run={}\nfirst_batch_loss={}\nfirst_epoch_loss={}\ntrain_exams={}\n",
            outcome.best_epoch,
            outcome.best_val.mac_auc,
            last.epoch,
            outcome.first_batch_loss,
            outcome.log[0].train_loss,
            outcome.train_indices.len()
        ),
    )?;
    println!(
        "best validation macAUC {:.6} at epoch {} of {}; checkpoint {}",
        outcome.best_val.mac_auc,
        outcome.best_epoch,
        last.epoch,
        out.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

fn load_params(checkpoint: &Path, cfg: &RunConfig) -> Result<ModelParams> {
    let params = load_checkpoint(checkpoint)?;
    if cfg.scale_set {
        params.check_scale(cfg.train.scale)?;
    }
    Ok(params)
}

fn predictions_csv(set: ExamSet<'_>, dists: &[PredictionDistribution]) -> String {
    let mut s = String::from("exam_id,p0,p1,p2,label\n");
    for (k, d) in dists.iter().enumerate() {
        let info = set.info(k);
        let p = d.probs();
        let _ = writeln!(s, "{},{},{},{},{}", info.exam_id, p[0], p[1], p[2], info.label);
    }
    s
}

pub fn evaluate(
    checkpoint: &Path,
    split: SplitName,
    hc_percent: Option<f64>,
    tta_crops: Option<usize>,
    run: &RunArgs,
) -> Result<()> {
    let mut cfg = resolve(run)?;
    if let Some(k) = hc_percent {
        cfg.set("hc_percent", &k.to_string())?;
    }
    if let Some(n) = tta_crops {
        cfg.set("tta_crops", &n.to_string())?;
    }
    cfg.validate()?;
    let params = load_params(checkpoint, &cfg)?;
    let ds = open_dataset(&cfg)?;
    let pre = preprocessor(params.config().scale, &ds, &cfg)?;
    let (indices, name) = match split {
        SplitName::Train => (&ds.split.train, "train"),
        SplitName::Validation => (&ds.split.validation, "validation"),
        SplitName::Test => (&ds.split.test, "test"),
    };
    // Validation-mode data are centered crops; test data use TTA.
    let how = match split {
        SplitName::Test => Prediction::Tta { crops: cfg.tta_crops, seed: cfg.train.seed },
        _ => Prediction::Centered,
    };
    let set = ExamSet::new(&ds.source, indices);
    let val_set = ExamSet::new(&ds.source, &ds.split.validation);
    let dists = predict_set(&params, set, &pre, how)?;
    let labels = set.labels();
    let aucs = mac_auc(&dists, &labels)?;
    let val_dists = if split == SplitName::Validation { dists.clone() } else { predict_set(&params, val_set, &pre, how)? };
    let thresholds = confidence_thresholds(&val_dists, &val_set.labels(), cfg.hc_percent)?;
    let (high_confidence, note) = match hc_mac_auc(&dists, &labels, &thresholds, cfg.hc_subset) {
        Ok(h) => (Some(h), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let report = MetricsReport { aucs, high_confidence, thresholds: Some(thresholds), kappa: None };

    let out = match &cfg.out_dir {
        Some(d) => d.clone(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    create_dir(&out)?;
    let columns = [(name.to_string(), report.clone())];
    let mut table = render_table("split", &columns);
    if let Some(h) = &report.high_confidence {
        let _ = writeln!(
            table,
            "kept fraction at k={}: {:.3} / {:.3} / {:.3}",
            cfg.hc_percent, h.kept_fraction[0], h.kept_fraction[1], h.kept_fraction[2]
        );
    }
    if let Some(n) = &note {
        let _ = writeln!(table, "HC-macAUC unavailable: {n}");
    }
    write(&out.join(format!("eval_{name}.txt")), &table)?;
    write(&out.join(format!("eval_{name}.csv")), &render_csv("metric", &columns))?;
    write(&out.join(format!("predictions_{name}.csv")), &predictions_csv(set, &dists))?;
    print!("{table}");
    println!("macAUC={}", report.mac_auc());
    Ok(())
}

pub fn predict(
    checkpoint: &Path,
    exam_id: Option<&str>,
    manifest: Option<&Path>,
    tta_crops: Option<usize>,
    run: &RunArgs,
) -> Result<()> {
    let mut cfg = resolve(run)?;
    if let Some(n) = tta_crops {
        cfg.set("tta_crops", &n.to_string())?;
    }
    cfg.validate()?;
    let params = load_params(checkpoint, &cfg)?;
    let (source, scale) = match (exam_id, manifest) {
        (_, Some(m)) => {
            let root = m.parent().map(Path::to_path_buf).unwrap_or_default();
            (ManifestSource::open(m)?, source_scale(&root)?)
        }
        (Some(_), None) => {
            let dir = cfg.data_dir.as_ref().context("--exam-id needs --data-dir")?;
            (ManifestSource::open(&dir.join(MANIFEST_FILE))?, source_scale(dir)?)
        }
        (None, None) => bail!("give --exam-id or --manifest"),
    };
    let indices: Vec<usize> = match exam_id {
        Some(id) => vec![(0..source.len())
            .find(|&i| source.info(i).exam_id == id)
            .with_context(|| format!("exam {id:?} is not in the dataset"))?],
        None => (0..source.len()).collect(),
    };
    let pre = Preprocessor::new(params.config().scale, scale)?.with_cache(cfg.cache_mb << 20);
    let set = ExamSet::new(&source, &indices);
    let dists = predict_set(&params, set, &pre, Prediction::Tta { crops: cfg.tta_crops, seed: cfg.train.seed })?;
    let csv = predictions_csv(set, &dists);
    match &cfg.out_dir {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join("predictions.csv");
            write(&path, &csv)?;
            println!("wrote {} predictions to {}", dists.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn saliency(checkpoint: &Path, exam_id: &str, percentile: f64, run: &RunArgs) -> Result<()> {
    let cfg = resolve(run)?;
    let params = load_params(checkpoint, &cfg)?;
    let ds = open_dataset(&cfg)?;
    let index = (0..ds.source.len())
        .find(|&i| ds.source.info(i).exam_id == exam_id)
        .with_context(|| format!("exam {exam_id:?} is not in the dataset"))?;
    let exam = ds.source.load(index)?;
    let pre = preprocessor(params.config().scale, &ds, &cfg)?;
    // Validation mode: earliest image per view, centered crop, no randomness.
    let mut rng = stream_rng(cfg.train.seed, Stream::Data, &[]);
    let records = mvscreen::data::select_image_per_view(&exam, DataMode::Validation, &mut rng)?;
    let views = pre.prepare(&exam, DataMode::Validation, &mut rng)?;
    let maps = saliency_maps(&params, views)?;
    for (map, record) in maps.iter().zip(&records) {
        let path = match (&cfg.out_dir, &record.path) {
            (Some(dir), _) => dir.join(format!("{exam_id}_{}.saliency.pgm", map.view)),
            (None, Some(p)) => heatmap_path(p),
            (None, None) => bail!("no output location for view {}", map.view),
        };
        write_heatmap(map, &path, percentile)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn sweep_notes(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = write!(
            s,
            "{}: {} training exams, best epoch {}, validation macAUC {:.4}, {} parameters",
            r.setting, r.train_exams, r.best_epoch, r.best_val_mac_auc, r.parameter_count
        );
        if let Some(n) = &r.note {
            let _ = write!(s, "; HC-macAUC unavailable: {n}");
        }
        s.push('\n');
    }
    s
}

pub fn sweep(mode: SweepMode, run: &RunArgs) -> Result<()> {
    let cfg = resolve(run)?;
    let out = out_dir(&cfg)?;
    write(&out.join(EFFECTIVE_CONFIG), &cfg.render())?;
    let ds = open_dataset(&cfg)?;
    let how = Prediction::Tta { crops: cfg.tta_crops, seed: cfg.train.seed };
    let (rows, name, header) = match mode {
        SweepMode::Fraction => {
            let pre = preprocessor(cfg.train.scale, &ds, &cfg)?;
            let rows = fraction_sweep(&ds.source, &ds.split, &cfg.sweep_fractions, &pre, &cfg.train, how, cfg.hc_percent)?;
            (rows, "fraction", "data")
        }
        SweepMode::Resolution => {
            let rows = resolution_sweep(
                &ds.source,
                &ds.split,
                &cfg.sweep_scales,
                ds.source_scale,
                &cfg.train,
                how,
                cfg.hc_percent,
                cfg.cache_mb << 20,
            )?;
            (rows, "resolution", "resolution")
        }
    };
    let columns: Vec<(String, MetricsReport)> = rows.iter().map(|r| (r.setting.clone(), r.report.clone())).collect();
    let table = format!("{}{}", render_table(header, &columns), sweep_notes(&rows));
    write(&out.join(format!("sweep_{name}.csv")), &render_csv(header, &columns))?;
    write(&out.join(format!("sweep_{name}.txt")), &table)?;
    print!("{table}");
    Ok(())
}
