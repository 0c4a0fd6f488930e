//! Exam collections with lazy pixel loading.

use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;

use super::manifest::{manifest_root, read_manifest, ManifestEntry};
use super::synth::{generate_synthetic_exam, with_info, ClassMix, SynthConfig};
use super::{DataError, Exam, ExamInfo};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Indexed exams whose metadata is cheap and whose pixels load on demand.
pub trait ExamSource: Sync {
    fn len(&self) -> usize;

    fn info(&self, index: usize) -> &ExamInfo;

    fn load(&self, index: usize) -> Result<Exam, DataError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn infos(&self) -> Vec<ExamInfo> {
        (0..self.len()).map(|i| self.info(i).clone()).collect()
    }
}

pub struct InMemorySource {
    exams: Vec<Exam>,
}

impl InMemorySource {
    pub fn new(exams: Vec<Exam>) -> Self {
        Self { exams }
    }

    pub fn exams(&self) -> &[Exam] {
        &self.exams
    }
}

impl ExamSource for InMemorySource {
    fn len(&self) -> usize {
        self.exams.len()
    }

    fn info(&self, index: usize) -> &ExamInfo {
        &self.exams[index].info
    }

    fn load(&self, index: usize) -> Result<Exam, DataError> {
        Ok(self.exams[index].clone())
    }
}

/// Exams listed in a `manifest.jsonl`, read from disk on each load.
pub struct ManifestSource {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    infos: Vec<ExamInfo>,
}

impl ManifestSource {
    pub fn open(manifest: &Path) -> Result<Self, DataError> {
        let entries = read_manifest(manifest)?;
        let infos = entries.iter().map(ManifestEntry::info).collect();
        Ok(Self { root: manifest_root(manifest), entries, infos })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }
}

impl ExamSource for ManifestSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn info(&self, index: usize) -> &ExamInfo {
        &self.infos[index]
    }

    fn load(&self, index: usize) -> Result<Exam, DataError> {
        self.entries[index].load(&self.root)
    }
}

/// A generated cohort; images are rendered on each load.
pub struct SyntheticSource {
    config: SynthConfig,
    infos: Vec<ExamInfo>,
    seeds: Vec<u64>,
    images_per_view: Vec<usize>,
}

impl SyntheticSource {
    /// Builds `n` exams with exact class counts from `mix`. About one patient
    /// in five has a second, later exam and one exam in ten carries two images
    /// per view.
    pub fn cohort(n: usize, seed: u64, mix: ClassMix, config: SynthConfig) -> Self {
        Self::cohort_with_repeats(n, seed, mix, config, 0.25)
    }

    /// As [`SyntheticSource::cohort`], with `repeat_rate` the chance that an
    /// exam belongs to the previous single-exam patient. Zero gives one exam
    /// per patient.
    pub fn cohort_with_repeats(n: usize, seed: u64, mix: ClassMix, config: SynthConfig, repeat_rate: f64) -> Self {
        let mut rng = stream_rng(seed, Stream::Cohort, &[]);
        let mut labels: Vec<usize> = mix.counts(n).iter().enumerate().flat_map(|(c, &k)| vec![c; k]).collect();
        labels.shuffle(&mut rng);
        let first_day = NaiveDate::from_ymd_opt(2012, 1, 1).expect("valid date");
        let mut infos = Vec::with_capacity(n);
        let mut images_per_view = Vec::with_capacity(n);
        let mut patient = 0usize;
        let mut prev_single = false;
        for (i, &label) in labels.iter().enumerate() {
            let repeat = prev_single && rng.random_bool(repeat_rate);
            let exam_date = if repeat {
                let prev: &ExamInfo = &infos[i - 1];
                prev.exam_date + Days::new(rng.random_range(300..420))
            } else {
                patient += 1;
                first_day + Days::new(rng.random_range(0..5 * 365))
            };
            prev_single = !repeat;
            infos.push(ExamInfo {
                exam_id: format!("E{:05}", i + 1),
                patient_id: format!("P{patient:05}"),
                exam_date,
                label,
            });
            images_per_view.push(if rng.random_bool(0.1) { 2 } else { config.images_per_view.max(1) });
        }
        let seeds = (0..n).map(|i| derive_seed(seed, Stream::Synthetic, &[i as u64])).collect();
        Self { config, infos, seeds, images_per_view }
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }
}

impl ExamSource for SyntheticSource {
    fn len(&self) -> usize {
        self.infos.len()
    }

    fn info(&self, index: usize) -> &ExamInfo {
        &self.infos[index]
    }

    fn load(&self, index: usize) -> Result<Exam, DataError> {
        let info = &self.infos[index];
        let cfg = SynthConfig { images_per_view: self.images_per_view[index], ..self.config };
        let exam = generate_synthetic_exam(self.seeds[index], info.label, &cfg)?;
        Ok(with_info(exam, info.clone()))
    }
}

/// A subset of a source's exams.
#[derive(Clone, Copy)]
pub struct ExamSet<'a> {
    source: &'a dyn ExamSource,
    indices: &'a [usize],
}

impl<'a> ExamSet<'a> {
    pub fn new(source: &'a dyn ExamSource, indices: &'a [usize]) -> Self {
        Self { source, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &'a [usize] {
        self.indices
    }

    pub fn source(&self) -> &'a dyn ExamSource {
        self.source
    }

    /// Metadata of the `k`-th member.
    pub fn info(&self, k: usize) -> &'a ExamInfo {
        self.source.info(self.indices[k])
    }

    pub fn load(&self, k: usize) -> Result<Exam, DataError> {
        self.source.load(self.indices[k])
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|k| self.info(k).label).collect()
    }
}
