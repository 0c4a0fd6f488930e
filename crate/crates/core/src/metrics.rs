//! Classification metrics over three-way predictive distributions.
//!
//! AUCs are one-vs-rest rank statistics with half credit for ties, the
//! macro average is unweighted, and confidence is the entropy of the
//! predictive distribution (in nats).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CLASSES: usize = 3;

/// Tolerance on the total mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("invalid distribution {0:?}: entries must be finite, non-negative and sum to 1")]
    InvalidDistribution(Vec<f64>),
    #[error("class label {0} is outside 0..3")]
    InvalidLabel(usize),
    #[error("AUC undefined: {positives} positive and {negatives} negative examples (need at least one of each)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores contain a non-finite value")]
    NonFiniteScore,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("class {class} has no examples {context}")]
    MissingClass { class: usize, context: &'static str },
    #[error("percent must be in (0, 100], got {0}")]
    InvalidPercent(f64),
    #[error("kappa undefined: chance agreement is 1 but observed agreement is {0}")]
    DegenerateKappa(f64),
}

/// A probability vector over BI-RADS classes {0, 1, 2}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution([f64; CLASSES]);

impl PredictionDistribution {
    pub fn new(p: [f64; CLASSES]) -> Result<Self, MetricsError> {
        let total: f64 = p.iter().sum();
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(MetricsError::InvalidDistribution(p.to_vec()));
        }
        Ok(Self(p))
    }

    pub fn from_slice(p: &[f64]) -> Result<Self, MetricsError> {
        let arr: [f64; CLASSES] =
            p.try_into().map_err(|_| MetricsError::InvalidDistribution(p.to_vec()))?;
        Self::new(arr)
    }

    pub fn uniform() -> Self {
        Self([1.0 / 3.0; CLASSES])
    }

    pub fn one_hot(label: usize) -> Result<Self, MetricsError> {
        check_label(label)?;
        let mut p = [0.0; CLASSES];
        p[label] = 1.0;
        Ok(Self(p))
    }

    pub fn probs(&self) -> &[f64; CLASSES] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for c in 1..CLASSES {
            if self.0[c] > self.0[best] {
                best = c;
            }
        }
        best
    }

    /// Arithmetic mean of distributions, summed in input order.
    pub fn mean(dists: &[PredictionDistribution]) -> Result<Self, MetricsError> {
        if dists.is_empty() {
            return Err(MetricsError::Empty("no distributions to average"));
        }
        let mut acc = [0.0; CLASSES];
        for d in dists {
            for (a, p) in acc.iter_mut().zip(d.0) {
                *a += p;
            }
        }
        let n = dists.len() as f64;
        Self::new(acc.map(|a| a / n))
    }
}

fn check_label(label: usize) -> Result<(), MetricsError> {
    if label >= CLASSES {
        Err(MetricsError::InvalidLabel(label))
    } else {
        Ok(())
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(dist: &PredictionDistribution) -> f64 {
    dist.0.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U, kept integral so the result is exact.
    let mut twice_u: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

/// One-vs-rest AUC per class and their unweighted mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAucs {
    pub auc: [f64; CLASSES],
    pub mac_auc: f64,
}

pub fn mac_auc(dists: &[PredictionDistribution], labels: &[usize]) -> Result<ClassAucs, MetricsError> {
    if dists.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { left: dists.len(), right: labels.len() });
    }
    for &l in labels {
        check_label(l)?;
    }
    let mut auc = [0.0; CLASSES];
    for (c, slot) in auc.iter_mut().enumerate() {
        if !labels.contains(&c) {
            return Err(MetricsError::MissingClass { class: c, context: "(macAUC needs all three classes)" });
        }
        let scores: Vec<f64> = dists.iter().map(|d| d.0[c]).collect();
        let positives: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        *slot = auc_binary(&scores, &positives)?;
    }
    Ok(ClassAucs { auc, mac_auc: auc.iter().sum::<f64>() / CLASSES as f64 })
}

/// Per-class entropy thresholds below which a prediction counts as confident.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceThresholds {
    pub percent: f64,
    pub per_class: [f64; CLASSES],
}

/// Nearest-rank percentile of already sorted values.
fn nearest_rank(sorted: &[f64], percent: f64) -> f64 {
    let rank = ((percent / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// The `percent`-th nearest-rank percentile of prediction entropies, per true class.
pub fn confidence_thresholds(
    dists: &[PredictionDistribution],
    labels: &[usize],
    percent: f64,
) -> Result<ConfidenceThresholds, MetricsError> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(MetricsError::InvalidPercent(percent));
    }
    if dists.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { left: dists.len(), right: labels.len() });
    }
    let mut per_class = [0.0; CLASSES];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let mut ent: Vec<f64> = dists
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(d, _)| entropy(d))
            .collect();
        if ent.is_empty() {
            return Err(MetricsError::MissingClass { class: c, context: "in the validation set" });
        }
        ent.sort_by(f64::total_cmp);
        *slot = nearest_rank(&ent, percent);
    }
    Ok(ConfidenceThresholds { percent, per_class })
}

/// How the three AUCs are recomputed on the confident subset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HcSubset {
    /// All three AUCs on the union of confident exams from every class.
    #[default]
    Union,
    /// AUC for class `c` uses the confident exams of class `c` as positives
    /// against every test exam of the other classes.
    PerClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighConfidence {
    pub aucs: ClassAucs,
    pub kept_fraction: [f64; CLASSES],
    pub kept: usize,
}

impl HighConfidence {
    pub fn mac_auc(&self) -> f64 {
        self.aucs.mac_auc
    }
}

/// macAUC restricted to test exams whose entropy is below their class threshold.
pub fn hc_mac_auc(
    dists: &[PredictionDistribution],
    labels: &[usize],
    thresholds: &ConfidenceThresholds,
    subset: HcSubset,
) -> Result<HighConfidence, MetricsError> {
    if dists.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { left: dists.len(), right: labels.len() });
    }
    let mut keep = Vec::with_capacity(labels.len());
    let mut totals = [0usize; CLASSES];
    let mut kept_counts = [0usize; CLASSES];
    for (d, &l) in dists.iter().zip(labels) {
        check_label(l)?;
        let k = entropy(d) < thresholds.per_class[l];
        totals[l] += 1;
        kept_counts[l] += usize::from(k);
        keep.push(k);
    }
    let mut kept_fraction = [0.0; CLASSES];
    for c in 0..CLASSES {
        if totals[c] == 0 {
            return Err(MetricsError::MissingClass { class: c, context: "in the test set" });
        }
        if kept_counts[c] == 0 {
            return Err(MetricsError::MissingClass { class: c, context: "below its confidence threshold" });
        }
        kept_fraction[c] = kept_counts[c] as f64 / totals[c] as f64;
    }
    let aucs = match subset {
        HcSubset::Union => {
            let (d, l): (Vec<_>, Vec<_>) = dists
                .iter()
                .zip(labels)
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|((d, &l), _)| (*d, l))
                .unzip();
            mac_auc(&d, &l)?
        }
        HcSubset::PerClass => {
            let mut auc = [0.0; CLASSES];
            for (c, slot) in auc.iter_mut().enumerate() {
                let mut scores = Vec::new();
                let mut positives = Vec::new();
                for ((d, &l), &k) in dists.iter().zip(labels).zip(&keep) {
                    if l != c || k {
                        scores.push(d.0[c]);
                        positives.push(l == c);
                    }
                }
                *slot = auc_binary(&scores, &positives)?;
            }
            ClassAucs { auc, mac_auc: auc.iter().sum::<f64>() / CLASSES as f64 }
        }
    };
    Ok(HighConfidence { aucs, kept_fraction, kept: kept_counts.iter().sum() })
}

/// Empirical frequency of expert votes.
pub fn committee_distribution(votes: &[usize]) -> Result<PredictionDistribution, MetricsError> {
    if votes.is_empty() {
        return Err(MetricsError::Empty("committee needs at least one vote"));
    }
    let mut counts = [0usize; CLASSES];
    for &v in votes {
        check_label(v)?;
        counts[v] += 1;
    }
    let n = votes.len() as f64;
    PredictionDistribution::new(counts.map(|c| c as f64 / n))
}

/// Equal-weight combination of two predictive distributions.
pub fn ensemble(a: &PredictionDistribution, b: &PredictionDistribution) -> PredictionDistribution {
    let mut p = [0.0; CLASSES];
    for (c, slot) in p.iter_mut().enumerate() {
        *slot = 0.5 * (a.0[c] + b.0[c]);
    }
    PredictionDistribution(p)
}

/// Cohen's kappa between two raters over the three classes.
pub fn cohen_kappa(a: &[usize], b: &[usize]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(MetricsError::Empty("kappa needs at least one rated item"));
    }
    let n = a.len() as f64;
    let mut agree = 0usize;
    let mut ma = [0usize; CLASSES];
    let mut mb = [0usize; CLASSES];
    for (&x, &y) in a.iter().zip(b) {
        check_label(x)?;
        check_label(y)?;
        agree += usize::from(x == y);
        ma[x] += 1;
        mb[y] += 1;
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = (0..CLASSES).map(|c| (ma[c] as f64 / n) * (mb[c] as f64 / n)).sum();
    if p_e == 1.0 {
        return if p_o == 1.0 { Ok(1.0) } else { Err(MetricsError::DegenerateKappa(p_o)) };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Pairwise kappa between every pair of raters (diagonal is 1).
pub fn kappa_matrix(raters: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, MetricsError> {
    let n = raters.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let k = cohen_kappa(&raters[i], &raters[j])?;
            m[i][j] = k;
            m[j][i] = k;
        }
    }
    Ok(m)
}

/// Evaluation summary for one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aucs: ClassAucs,
    pub high_confidence: Option<HighConfidence>,
    pub thresholds: Option<ConfidenceThresholds>,
    pub kappa: Option<Vec<Vec<f64>>>,
}

impl MetricsReport {
    pub fn mac_auc(&self) -> f64 {
        self.aucs.mac_auc
    }

    pub fn hc_mac_auc(&self) -> Option<f64> {
        self.high_confidence.map(|h| h.aucs.mac_auc)
    }
}

const ROW_LABELS: [&str; 5] = ["0 vs. others", "1 vs. others", "2 vs. others", "macAUC", "HC-macAUC"];

fn report_rows(r: &MetricsReport) -> [Option<f64>; 5] {
    [
        Some(r.aucs.auc[0]),
        Some(r.aucs.auc[1]),
        Some(r.aucs.auc[2]),
        Some(r.aucs.mac_auc),
        r.hc_mac_auc(),
    ]
}

/// Text table with one column per setting and one row per metric.
pub fn render_table(header: &str, columns: &[(String, MetricsReport)]) -> String {
    let mut out = String::new();
    let width = columns.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let _ = write!(out, "{header:>14} |");
    for (name, _) in columns {
        let _ = write!(out, " {name:>width$}");
    }
    out.push('\n');
    out.push_str(&"=".repeat(16 + columns.len() * (width + 1)));
    out.push('\n');
    for (row, label) in ROW_LABELS.iter().enumerate() {
        if row == 3 {
            out.push_str(&"-".repeat(16 + columns.len() * (width + 1)));
            out.push('\n');
        }
        let _ = write!(out, "{label:>14} |");
        for (_, r) in columns {
            match report_rows(r)[row] {
                Some(v) => {
                    let _ = write!(out, " {v:>width$.3}");
                }
                None => {
                    let _ = write!(out, " {:>width$}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// CSV with the same layout as [`render_table`].
pub fn render_csv(header: &str, columns: &[(String, MetricsReport)]) -> String {
    let mut out = String::from(header);
    for (name, _) in columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (row, label) in ROW_LABELS.iter().enumerate() {
        out.push_str(label);
        for (_, r) in columns {
            out.push(',');
            if let Some(v) = report_rows(r)[row] {
                let _ = write!(out, "{v}");
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(p: [f64; 3]) -> PredictionDistribution {
        PredictionDistribution::new(p).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&PredictionDistribution::uniform()) - 3f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&d([1.0, 0.0, 0.0])), 0.0);
        assert!((entropy(&d([0.5, 0.25, 0.25])) - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!(PredictionDistribution::new([0.5, 0.5, 0.5]).is_err());
        assert!(PredictionDistribution::new([1.5, -0.5, 0.0]).is_err());
    }

    #[test]
    fn auc_examples() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(auc_binary(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc_binary(&s, &[false, false, true, true]).unwrap(), 0.0);
        let s = [0.9, 0.5, 0.5, 0.1];
        assert_eq!(auc_binary(&s, &[true, false, true, false]).unwrap(), 0.875);
        assert!(matches!(
            auc_binary(&s, &[true; 4]),
            Err(MetricsError::SingleClass { positives: 4, negatives: 0 })
        ));
    }

    #[test]
    fn mac_auc_is_mean_of_class_aucs() {
        let dists = vec![
            d([0.8, 0.1, 0.1]),
            d([0.2, 0.7, 0.1]),
            d([0.1, 0.1, 0.8]),
            d([0.4, 0.3, 0.3]),
            d([0.3, 0.4, 0.3]),
            d([0.3, 0.3, 0.4]),
        ];
        let labels = [0, 1, 2, 1, 2, 0];
        let r = mac_auc(&dists, &labels).unwrap();
        assert_eq!(r.mac_auc, r.auc.iter().sum::<f64>() / 3.0);
        let perfect = mac_auc(&dists[..3], &[0, 1, 2]).unwrap();
        assert_eq!(perfect.mac_auc, 1.0);
        assert!(matches!(mac_auc(&dists[..2], &[0, 1]), Err(MetricsError::MissingClass { class: 2, .. })));
    }

    #[test]
    fn threshold_examples() {
        // Entropies 0.1..1.0 need distributions with those entropies; build via a bisection on p.
        fn with_entropy(h: f64) -> PredictionDistribution {
            let (mut lo, mut hi) = (1.0 / 3.0, 1.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let q = (1.0 - mid) / 2.0;
                if entropy(&PredictionDistribution([mid, q, q])) > h {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let q = (1.0 - hi) / 2.0;
            PredictionDistribution([hi, q, q])
        }
        let mut dists = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for i in 1..=10 {
                dists.push(with_entropy(i as f64 / 10.0));
                labels.push(c);
            }
        }
        let t = confidence_thresholds(&dists, &labels, 30.0).unwrap();
        for v in t.per_class {
            assert!((v - 0.3).abs() < 1e-9, "{v}");
        }
        let t100 = confidence_thresholds(&dists, &labels, 100.0).unwrap();
        for (c, v) in t100.per_class.iter().enumerate() {
            for (dd, &l) in dists.iter().zip(&labels) {
                if l == c {
                    assert!(*v >= entropy(dd));
                }
            }
        }
        let same = vec![d([0.5, 0.25, 0.25]); 3];
        let t = confidence_thresholds(&same, &[0, 1, 2], 30.0).unwrap();
        assert_eq!(t.per_class, [entropy(&same[0]); 3]);
        assert!(confidence_thresholds(&same, &[0, 0, 1], 30.0).is_err());
        assert!(confidence_thresholds(&same, &[0, 1, 2], 0.0).is_err());
    }

    #[test]
    fn hc_rejects_empty_subset() {
        let dists = vec![d([0.5, 0.25, 0.25]), d([0.25, 0.5, 0.25]), d([0.25, 0.25, 0.5])];
        let labels = [0, 1, 2];
        let t = ConfidenceThresholds { percent: 30.0, per_class: [0.0; 3] };
        assert!(matches!(
            hc_mac_auc(&dists, &labels, &t, HcSubset::Union),
            Err(MetricsError::MissingClass { .. })
        ));
        let t = ConfidenceThresholds { percent: 100.0, per_class: [10.0; 3] };
        let hc = hc_mac_auc(&dists, &labels, &t, HcSubset::Union).unwrap();
        assert_eq!(hc.aucs, mac_auc(&dists, &labels).unwrap());
        assert_eq!(hc.kept_fraction, [1.0; 3]);
        let per = hc_mac_auc(&dists, &labels, &t, HcSubset::PerClass).unwrap();
        assert_eq!(per.aucs, hc.aucs);
    }

    #[test]
    fn committee_and_ensemble_examples() {
        assert_eq!(committee_distribution(&[1, 1, 1, 1]).unwrap().probs(), &[0.0, 1.0, 0.0]);
        let third = 1.0 / 3.0;
        assert_eq!(committee_distribution(&[0, 1, 2]).unwrap().probs(), &[third; 3]);
        assert_eq!(committee_distribution(&[0, 0, 1, 2]).unwrap().probs(), &[0.5, 0.25, 0.25]);
        assert!(committee_distribution(&[3]).is_err());
        assert!(committee_distribution(&[]).is_err());
        let a = d([1.0, 0.0, 0.0]);
        let b = d([0.0, 1.0, 0.0]);
        assert_eq!(ensemble(&a, &b).probs(), &[0.5, 0.5, 0.0]);
        assert_eq!(ensemble(&a, &a), a);
        assert_eq!(ensemble(&a, &b), ensemble(&b, &a));
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), -1.0);
        assert_eq!(cohen_kappa(&[1, 1], &[1, 1]).unwrap(), 1.0);
        assert!(matches!(cohen_kappa(&[0], &[0, 1]), Err(MetricsError::LengthMismatch { .. })));
        let m = kappa_matrix(&[vec![0, 1, 2, 2], vec![0, 1, 1, 2], vec![2, 1, 0, 0]]).unwrap();
        assert_eq!(m[0][1], m[1][0]);
        assert_eq!(m[2][2], 1.0);
    }

    #[test]
    fn table_layout_has_metric_rows() {
        let r = MetricsReport {
            aucs: ClassAucs { auc: [0.6, 0.7, 0.8], mac_auc: 0.7 },
            high_confidence: None,
            thresholds: None,
            kappa: None,
        };
        let text = render_table("scale", &[("x1/8".into(), r.clone()), ("x1".into(), r.clone())]);
        assert!(text.contains("0 vs. others"));
        assert!(text.contains("0.700"));
        let csv = render_csv("scale", &[("x1".into(), r)]);
        assert!(csv.starts_with("scale,x1\n0 vs. others,0.6\n"));
        assert!(csv.contains("HC-macAUC,\n"));
    }
}
