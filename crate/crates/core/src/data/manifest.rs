//! JSON-lines exam manifests.
//!
//! One exam per line:
//!
//! ```json
//! {"exam_id":"E00001","patient_id":"P00001","exam_date":"2016-04-02","label":1,
//!  "views":{"L-CC":[{"path":"images/E00001/L-CC_0.pgm","timestamp":"2016-04-02T09:00:00"}], ...}}
//! ```
//!
//! Image paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{pgm, DataError, Exam, ExamInfo, ImageRecord, View};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub path: String,
    pub timestamp: NaiveDateTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub exam_id: String,
    pub patient_id: String,
    pub exam_date: NaiveDate,
    pub label: i64,
    pub views: BTreeMap<View, Vec<ManifestImage>>,
}

impl ManifestEntry {
    fn validate(&self) -> Result<(), DataError> {
        if !(0..=2).contains(&self.label) {
            return Err(DataError::InvalidLabel { exam_id: self.exam_id.clone(), label: self.label });
        }
        for v in View::ALL {
            if self.views.get(&v).is_none_or(|l| l.is_empty()) {
                return Err(DataError::MissingView { exam_id: self.exam_id.clone(), view: v });
            }
        }
        Ok(())
    }

    pub fn info(&self) -> ExamInfo {
        ExamInfo {
            exam_id: self.exam_id.clone(),
            patient_id: self.patient_id.clone(),
            exam_date: self.exam_date,
            label: self.label as usize,
        }
    }

    /// Reads every referenced image; `root` is the manifest's directory.
    pub fn load(&self, root: &Path) -> Result<Exam, DataError> {
        let mut views = BTreeMap::new();
        for (&view, images) in &self.views {
            let records = images
                .iter()
                .map(|img| {
                    let path = root.join(&img.path);
                    Ok(ImageRecord {
                        view,
                        timestamp: img.timestamp,
                        pixels: Arc::new(pgm::read_pgm(&path)?),
                        path: Some(path),
                    })
                })
                .collect::<Result<Vec<_>, DataError>>()?;
            views.insert(view, records);
        }
        Exam::new(self.info(), views)
    }
}

/// Parses and validates manifest metadata without reading images.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        entry.validate()?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Reads the manifest and every image it references.
pub fn load_manifest(path: &Path) -> Result<Vec<Exam>, DataError> {
    let root = manifest_root(path);
    read_manifest(path)?.iter().map(|e| e.load(&root)).collect()
}

pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let io = |e| DataError::Io { path: path.to_path_buf(), source: e };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DataError::Io { path: parent.to_path_buf(), source: e })?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Relative path of an exam image inside a dataset directory.
pub fn image_path(exam_id: &str, view: View, index: usize) -> String {
    format!("images/{exam_id}/{}_{index}.pgm", view.name())
}

/// Writes one exam's images as 16-bit PGM under `dir` and returns its manifest entry.
pub fn write_exam_images(dir: &Path, exam: &Exam) -> Result<ManifestEntry, DataError> {
    let mut views = BTreeMap::new();
    for (&view, records) in &exam.views {
        let mut images = Vec::with_capacity(records.len());
        for (k, rec) in records.iter().enumerate() {
            let rel = image_path(&exam.info.exam_id, view, k);
            pgm::write_pgm16(&dir.join(&rel), &rec.pixels)?;
            images.push(ManifestImage { path: rel, timestamp: rec.timestamp });
        }
        views.insert(view, images);
    }
    Ok(ManifestEntry {
        exam_id: exam.info.exam_id.clone(),
        patient_id: exam.info.patient_id.clone(),
        exam_date: exam.info.exam_date,
        label: exam.info.label as i64,
        views,
    })
}

/// Writes exam images plus `manifest.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, exams: &[Exam]) -> Result<Vec<ManifestEntry>, DataError> {
    let entries = exams.iter().map(|e| write_exam_images(dir, e)).collect::<Result<Vec<_>, _>>()?;
    write_manifest(&dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_exam, SynthConfig};
    use crate::data::Scale;

    fn small_cfg() -> SynthConfig {
        SynthConfig { scale: Scale::Eighth, margin: 16, ..SynthConfig::default() }
    }

    #[test]
    fn empty_manifest_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn dataset_round_trip_preserves_metadata_and_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let exams: Vec<Exam> =
            (0..5).map(|i| generate_synthetic_exam(100 + i, (i % 3) as usize, &small_cfg()).unwrap()).collect();
        let written = write_dataset(dir.path(), &exams).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        assert_eq!(read_manifest(&path).unwrap(), written);
        let loaded = load_manifest(&path).unwrap();
        for (a, b) in exams.iter().zip(&loaded) {
            assert_eq!(a.info, b.info);
            for v in View::ALL {
                assert_eq!(a.views[&v].len(), b.views[&v].len());
                for (x, y) in a.views[&v].iter().zip(&b.views[&v]) {
                    assert_eq!(x.timestamp, y.timestamp);
                    assert_eq!(x.pixels, y.pixels);
                }
            }
        }
    }

    #[test]
    fn errors_are_distinct_and_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        let exam = generate_synthetic_exam(1, 0, &small_cfg()).unwrap();
        let mut entries = write_dataset(dir.path(), std::slice::from_ref(&exam)).unwrap();
        let path = dir.path().join("m.jsonl");

        // Absent image file.
        let mut missing = entries[0].clone();
        missing.views.get_mut(&View::LeftMlo).unwrap()[0].path = "images/nope.pgm".into();
        write_manifest(&path, &[missing]).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
        assert!(err.to_string().contains("images/nope.pgm"), "{err}");

        // Missing view.
        entries[0].views.remove(&View::RightCc);
        write_manifest(&path, &entries).unwrap();
        assert!(matches!(read_manifest(&path), Err(DataError::MissingView { view: View::RightCc, .. })));

        // Label out of range.
        fs::write(
            &path,
            r#"{"exam_id":"x","patient_id":"p","exam_date":"2016-01-01","label":3,"views":{}}"#,
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(DataError::InvalidLabel { label: 3, .. })));

        // Malformed JSON names the line.
        fs::write(&path, "\n{not json}\n").unwrap();
        let err = read_manifest(&path).unwrap_err();
        assert!(matches!(err, DataError::Manifest { line: 2, .. }));

        // Unreadable image.
        let bad = dir.path().join("images/bad.pgm");
        fs::write(&bad, b"P5\n10 10\n65535\n\x00").unwrap();
        let mut e = write_dataset(dir.path(), std::slice::from_ref(&exam)).unwrap();
        e[0].views.get_mut(&View::LeftCc).unwrap()[0].path = "images/bad.pgm".into();
        write_manifest(&path, &e).unwrap();
        assert!(matches!(load_manifest(&path), Err(DataError::Image { .. })));

        // Missing manifest.
        assert!(matches!(read_manifest(&dir.path().join("absent.jsonl")), Err(DataError::Io { .. })));
    }
}
