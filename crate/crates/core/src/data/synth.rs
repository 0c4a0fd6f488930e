//! Synthetic four-view exams standing in for private screening data.
//!
//! Each view shows a breast silhouette attached to the chest-wall edge (left
//! for L views, right for R views), a smooth tissue texture and, depending on
//! the label, Gaussian lesions:
//!
//! - label 0: one high-contrast lesion in one breast (both of its views);
//! - label 1: nothing beyond background;
//! - label 2: low-contrast lesions at mirror-symmetric positions in both breasts.
//!
//! Output pixels are 12-bit integer intensities stored as `f32`, so they
//! survive a 16-bit PGM round trip unchanged.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{NaiveDate, NaiveDateTime};
use rand::Rng;

use super::{DataError, Exam, ExamInfo, ImageRecord, Scale, View, CROP_HEIGHT, CROP_WIDTH};
use crate::rng::{derive_seed, hash_unit, stream_rng, Stream};
use crate::tensor::Tensor;

const MAX_INTENSITY: f64 = 4095.0;
const BACKGROUND: f64 = 0.04;
const TISSUE: f64 = 0.40;
const PECTORAL: f64 = 0.15;
const TEXTURE_TERMS: usize = 6;
const TEXTURE_AMPLITUDE: f64 = 0.02;
const PIXEL_NOISE: f64 = 0.015;
const HIGH_CONTRAST: f64 = 0.35;
const LOW_CONTRAST: f64 = 0.14;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    /// Resolution of the generated images.
    pub scale: Scale,
    /// Extra full-resolution pixels beyond the 2600x2000 crop, in each dimension.
    pub margin: usize,
    pub images_per_view: usize,
    /// Lesion standard deviation as a fraction of the crop width.
    pub lesion_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { scale: Scale::Eighth, margin: 0, images_per_view: 1, lesion_sigma: 0.07 }
    }
}

impl SynthConfig {
    /// Image extent `(height, width)` at the configured scale.
    pub fn image_extent(&self) -> (usize, usize) {
        (self.scale.apply(CROP_HEIGHT + self.margin), self.scale.apply(CROP_WIDTH + self.margin))
    }
}

/// Class proportions for generated cohorts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMix(pub [f64; 3]);

impl Default for ClassMix {
    /// 13% BI-RADS 0, 46% BI-RADS 1, 41% BI-RADS 2.
    fn default() -> Self {
        Self([0.13, 0.46, 0.41])
    }
}

impl ClassMix {
    pub fn balanced() -> Self {
        Self([1.0 / 3.0; 3])
    }

    /// Exact per-class counts for `n` exams (largest remainder rounding).
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let total: f64 = self.0.iter().sum();
        let raw = self.0.map(|p| p / total * n as f64);
        let mut counts = raw.map(|r| r.floor() as usize);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        let mut left = n - counts.iter().sum::<usize>();
        for &c in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[c] += 1;
            left -= 1;
        }
        counts
    }
}

impl FromStr for ClassMix {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split([',', '/', ':'])
            .map(|p| p.trim().parse::<f64>().map_err(|_| format!("invalid class mix {s:?}")))
            .collect::<Result<_, _>>()?;
        let arr: [f64; 3] = parts.try_into().map_err(|_| format!("class mix needs three values, got {s:?}"))?;
        if arr.iter().any(|v| *v < 0.0 || !v.is_finite()) || arr.iter().sum::<f64>() <= 0.0 {
            return Err(format!("class mix must be non-negative with a positive total, got {s:?}"));
        }
        Ok(Self(arr))
    }
}

/// A Gaussian lesion in standardized (chest wall on the left) coordinates,
/// expressed as fractions of the crop extent.
#[derive(Clone, Copy, Debug)]
struct Lesion {
    y: f64,
    x: f64,
    sigma: f64,
    amplitude: f64,
}

fn random_lesion(rng: &mut impl Rng, amplitude: f64, sigma: f64) -> Lesion {
    Lesion {
        y: rng.random_range(0.35..0.65),
        x: rng.random_range(0.12..0.42),
        sigma: sigma * rng.random_range(0.9..1.1),
        amplitude,
    }
}

fn lesions_for(label: usize, sigma: f64, rng: &mut impl Rng) -> BTreeMap<View, Vec<Lesion>> {
    let mut map: BTreeMap<View, Vec<Lesion>> = View::ALL.iter().map(|&v| (v, Vec::new())).collect();
    match label {
        0 => {
            let right = rng.random_bool(0.5);
            let (cc, mlo) = if right { (View::RightCc, View::RightMlo) } else { (View::LeftCc, View::LeftMlo) };
            map.get_mut(&cc).unwrap().push(random_lesion(rng, HIGH_CONTRAST, sigma));
            map.get_mut(&mlo).unwrap().push(random_lesion(rng, HIGH_CONTRAST, sigma));
        }
        2 => {
            let cc = random_lesion(rng, LOW_CONTRAST, sigma);
            let mlo = random_lesion(rng, LOW_CONTRAST, sigma);
            map.get_mut(&View::LeftCc).unwrap().push(cc);
            map.get_mut(&View::RightCc).unwrap().push(cc);
            map.get_mut(&View::LeftMlo).unwrap().push(mlo);
            map.get_mut(&View::RightMlo).unwrap().push(mlo);
        }
        _ => {}
    }
    map
}

struct ViewParams {
    breast_ry: f64,
    breast_rx: f64,
    texture: Vec<(f64, f64, f64, f64, f64)>,
    noise_seed: u64,
}

fn render_view(cfg: &SynthConfig, view: View, params: &ViewParams, lesions: &[Lesion]) -> Tensor<f32> {
    let (h, w) = cfg.image_extent();
    let (crop_h, crop_w) = cfg.scale.crop_extent();
    let (ch, cw) = (crop_h as f64, crop_w as f64);
    let cy = h as f64 / 2.0;
    let ry = params.breast_ry * ch;
    let rx = params.breast_rx * cw;
    let edge = (0.01 * cw).max(1.0);

    // Separable texture tables.
    let rows: Vec<Vec<f64>> = params
        .texture
        .iter()
        .map(|&(amp, fy, py, _, _)| (0..h).map(|y| amp * (fy * y as f64 / cw + py).sin()).collect())
        .collect();
    let cols: Vec<Vec<f64>> = params
        .texture
        .iter()
        .map(|&(_, _, _, fx, px)| (0..w).map(|x| (fx * x as f64 / cw + px).sin()).collect())
        .collect();

    let mut data = vec![0f32; h * w];
    for y in 0..h {
        let dy = (y as f64 + 0.5 - cy) / ry;
        for x in 0..w {
            // Standardized column: chest wall at x = 0.
            let sx = if view.is_right() { w - 1 - x } else { x };
            let dx = (sx as f64 + 0.5) / rx;
            let radius = (dx * dx + dy * dy).sqrt();
            let inside = ((1.0 - radius) * rx / edge).clamp(0.0, 1.0);
            let mut v = BACKGROUND;
            if inside > 0.0 {
                let mut tex = 0.0;
                for k in 0..TEXTURE_TERMS {
                    tex += rows[k][y] * cols[k][sx];
                }
                let mut tissue = TISSUE + tex;
                if !view.is_cc() && (sx as f64 / cw + y as f64 / ch) < 0.35 {
                    tissue += PECTORAL;
                }
                v += inside * (tissue - BACKGROUND);
            }
            v += PIXEL_NOISE * (2.0 * hash_unit(params.noise_seed, (y * w + x) as u64) - 1.0);
            data[y * w + x] = v as f32;
        }
    }
    // Lesions, evaluated within three standard deviations.
    for l in lesions {
        let sigma = l.sigma * cw;
        let ly = cy + (l.y - 0.5) * ch;
        let lx = l.x * cw;
        let reach = 3.0 * sigma;
        let y0 = (ly - reach).floor().max(0.0) as usize;
        let y1 = ((ly + reach).ceil() as usize).min(h);
        let x0 = (lx - reach).floor().max(0.0) as usize;
        let x1 = ((lx + reach).ceil() as usize).min(w);
        for y in y0..y1 {
            for sx in x0..x1 {
                let d2 = ((y as f64 + 0.5 - ly).powi(2) + (sx as f64 + 0.5 - lx).powi(2)) / (sigma * sigma);
                let x = if view.is_right() { w - 1 - sx } else { sx };
                data[y * w + x] += (l.amplitude * (-0.5 * d2).exp()) as f32;
            }
        }
    }
    for v in &mut data {
        *v = (f64::from(*v).clamp(0.0, 1.0) * MAX_INTENSITY).round() as f32;
    }
    Tensor::new(vec![h, w], data).expect("extent matches buffer")
}

fn base_timestamp(date: NaiveDate, index: usize) -> NaiveDateTime {
    date.and_hms_opt(9, 0, 0).expect("valid time") + chrono::Duration::minutes(5 * index as i64)
}

/// Generates one exam; a pure function of `(seed, label, cfg)`.
pub fn generate_synthetic_exam(seed: u64, label: usize, cfg: &SynthConfig) -> Result<Exam, DataError> {
    if label > 2 {
        return Err(DataError::InvalidLabel { exam_id: format!("S{seed:016x}"), label: label as i64 });
    }
    if cfg.images_per_view == 0 {
        return Err(DataError::InvalidConfig("images_per_view must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, Stream::Synthetic, &[label as u64]);
    let lesions = lesions_for(label, cfg.lesion_sigma, &mut rng);
    let date = NaiveDate::from_ymd_opt(2017, 1, 1).expect("valid date");
    let mut views = BTreeMap::new();
    let breast_ry = 0.42 * rng.random_range(0.98..1.02);
    let breast_rx = 0.72 * rng.random_range(0.98..1.02);
    for view in View::ALL {
        let mut records = Vec::with_capacity(cfg.images_per_view);
        for index in 0..cfg.images_per_view {
            let texture = (0..TEXTURE_TERMS)
                .map(|_| {
                    (
                        TEXTURE_AMPLITUDE * rng.random_range(0.5..1.5),
                        TAU / rng.random_range(0.12..0.5),
                        rng.random_range(0.0..TAU),
                        TAU / rng.random_range(0.12..0.5),
                        rng.random_range(0.0..TAU),
                    )
                })
                .collect();
            let params = ViewParams {
                breast_ry,
                breast_rx,
                texture,
                noise_seed: derive_seed(seed, Stream::Synthetic, &[label as u64, view.index() as u64, index as u64]),
            };
            records.push(ImageRecord {
                view,
                timestamp: base_timestamp(date, index),
                pixels: Arc::new(render_view(cfg, view, &params, &lesions[&view])),
                path: None,
            });
        }
        views.insert(view, records);
    }
    let info = ExamInfo { exam_id: format!("S{seed:016x}"), patient_id: format!("P{seed:016x}"), exam_date: date, label };
    Exam::new(info, views)
}

/// Re-dates an exam's images to `date`, keeping their relative order.
pub(crate) fn with_info(mut exam: Exam, info: ExamInfo) -> Exam {
    for records in exam.views.values_mut() {
        for (i, r) in records.iter_mut().enumerate() {
            r.timestamp = base_timestamp(info.exam_date, i);
        }
    }
    exam.info = info;
    exam
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic_exam(11, 2, &cfg).unwrap();
        let b = generate_synthetic_exam(11, 2, &cfg).unwrap();
        for v in View::ALL {
            assert_eq!(a.views[&v][0].pixels, b.views[&v][0].pixels);
        }
        let c = generate_synthetic_exam(12, 2, &cfg).unwrap();
        assert_ne!(a.views[&View::LeftCc][0].pixels, c.views[&View::LeftCc][0].pixels);
    }

    #[test]
    fn extents_follow_scale_and_margin() {
        let e = generate_synthetic_exam(1, 1, &SynthConfig::default()).unwrap();
        assert_eq!(e.views[&View::LeftCc][0].pixels.shape(), &[325, 250]);
        let cfg = SynthConfig { margin: 200, images_per_view: 2, ..SynthConfig::default() };
        let e = generate_synthetic_exam(1, 1, &cfg).unwrap();
        assert_eq!(e.views[&View::RightMlo][1].pixels.shape(), &[350, 275]);
        assert!(e.views[&View::RightMlo][0].timestamp < e.views[&View::RightMlo][1].timestamp);
        assert!(generate_synthetic_exam(1, 3, &cfg).is_err());
    }

    #[test]
    fn label_one_has_no_lesions() {
        let mut rng = stream_rng(1, Stream::Synthetic, &[]);
        assert!(lesions_for(1, 0.07, &mut rng).values().all(Vec::is_empty));
        let zero = lesions_for(0, 0.07, &mut rng);
        assert_eq!(zero.values().map(Vec::len).sum::<usize>(), 2);
        let two = lesions_for(2, 0.07, &mut rng);
        assert!(two.values().all(|l| l.len() == 1));
    }

    #[test]
    fn breast_faces_the_chest_wall_side() {
        let e = generate_synthetic_exam(5, 1, &SynthConfig::default()).unwrap();
        let mean_cols = |t: &Tensor<f32>, c0: usize, c1: usize| {
            let (h, w) = t.dims2("t").unwrap();
            let mut s = 0.0;
            for r in 0..h {
                for c in c0..c1 {
                    s += f64::from(t.data()[r * w + c]);
                }
            }
            s / (h * (c1 - c0)) as f64
        };
        let l = &e.views[&View::LeftCc][0].pixels;
        let r = &e.views[&View::RightCc][0].pixels;
        assert!(mean_cols(l, 0, 20) > 2.0 * mean_cols(l, 230, 250));
        assert!(mean_cols(r, 230, 250) > 2.0 * mean_cols(r, 0, 20));
    }

    #[test]
    fn class_mix_counts() {
        assert_eq!(ClassMix::default().counts(1000), [130, 460, 410]);
        assert_eq!(ClassMix::default().counts(100), [13, 46, 41]);
        assert_eq!(ClassMix::balanced().counts(64).iter().sum::<usize>(), 64);
        assert_eq!("13,46,41".parse::<ClassMix>().unwrap(), ClassMix([13.0, 46.0, 41.0]));
        assert!("1,2".parse::<ClassMix>().is_err());
    }
}
