use std::collections::BTreeMap;

use chrono::NaiveDate;

use super::{DataError, ExamInfo};

/// Patient-level split fractions, applied in order of each patient's latest exam date.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8, validation_fraction: 0.1, test_fraction: 0.1 }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train_fraction, self.validation_fraction, self.test_fraction];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!("fractions {parts:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }
}

/// Exam indices per split. `test_latest` holds only each test patient's latest exam.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PatientSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub test_latest: Vec<usize>,
}

/// Sorts patients by the date of their latest exam and assigns the first,
/// middle and last blocks of patients to train, validation and test.
pub fn split_by_patient(exams: &[ExamInfo], spec: &SplitSpec) -> Result<PatientSplit, DataError> {
    spec.validate()?;
    let mut patients: BTreeMap<&str, (NaiveDate, Vec<usize>)> = BTreeMap::new();
    for (i, e) in exams.iter().enumerate() {
        let entry = patients.entry(e.patient_id.as_str()).or_insert((e.exam_date, Vec::new()));
        entry.0 = entry.0.max(e.exam_date);
        entry.1.push(i);
    }
    let n = patients.len();
    if n < 10 {
        return Err(DataError::TooFewPatients(n));
    }
    let mut order: Vec<(&str, NaiveDate, Vec<usize>)> =
        patients.into_iter().map(|(p, (d, idx))| (p, d, idx)).collect();
    // Stable on patient id for equal dates.
    order.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));

    let n_train = (n as f64 * spec.train_fraction).round() as usize;
    let n_val = ((n as f64 * spec.validation_fraction).round() as usize).min(n - n_train);
    let mut split = PatientSplit::default();
    for (rank, (_, _, idx)) in order.iter().enumerate() {
        let bucket = if rank < n_train {
            &mut split.train
        } else if rank < n_train + n_val {
            &mut split.validation
        } else {
            let latest = idx
                .iter()
                .copied()
                .max_by(|&a, &b| exams[a].exam_date.cmp(&exams[b].exam_date).then(b.cmp(&a)))
                .expect("patient has exams");
            split.test_latest.push(latest);
            &mut split.test
        };
        bucket.extend(idx.iter().copied());
    }
    for v in [&mut split.train, &mut split.validation, &mut split.test, &mut split.test_latest] {
        v.sort_unstable();
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn info(exam: usize, patient: usize, day: u32) -> ExamInfo {
        ExamInfo {
            exam_id: format!("e{exam}"),
            patient_id: format!("p{patient}"),
            exam_date: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap() + chrono::Days::new(u64::from(day)),
            label: exam % 3,
        }
    }

    #[test]
    fn ten_patients_split_eight_one_one() {
        let exams: Vec<_> = (0..10).map(|i| info(i, i, (10 - i) as u32)).collect();
        let s = split_by_patient(&exams, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        // Latest date goes to test: patient 0 has day 10.
        assert_eq!(s.test, vec![0]);
        assert_eq!(s.validation, vec![1]);
    }

    #[test]
    fn patients_never_straddle_splits() {
        let mut exams = Vec::new();
        for p in 0..30 {
            exams.push(info(exams.len(), p, p as u32 * 3));
            if p % 3 == 0 {
                exams.push(info(exams.len(), p, p as u32 * 3 + 40));
            }
        }
        let s = split_by_patient(&exams, &SplitSpec::default()).unwrap();
        let pid = |v: &[usize]| v.iter().map(|&i| exams[i].patient_id.clone()).collect::<HashSet<_>>();
        let (a, b, c) = (pid(&s.train), pid(&s.validation), pid(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(a.len() + b.len() + c.len(), 30);
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), exams.len());
        // One latest exam per test patient.
        assert_eq!(s.test_latest.len(), c.len());
        for &i in &s.test_latest {
            let p = &exams[i].patient_id;
            let latest = s.test.iter().filter(|&&j| &exams[j].patient_id == p).map(|&j| exams[j].exam_date).max();
            assert_eq!(Some(exams[i].exam_date), latest);
        }
    }

    #[test]
    fn rejects_small_or_invalid_input() {
        let exams: Vec<_> = (0..9).map(|i| info(i, i, i as u32)).collect();
        assert!(matches!(split_by_patient(&exams, &SplitSpec::default()), Err(DataError::TooFewPatients(9))));
        let bad = SplitSpec { train_fraction: 0.9, validation_fraction: 0.2, test_fraction: 0.1 };
        let exams: Vec<_> = (0..12).map(|i| info(i, i, i as u32)).collect();
        assert!(split_by_patient(&exams, &bad).is_err());
    }
}
