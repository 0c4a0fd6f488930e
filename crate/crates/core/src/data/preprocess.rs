//! Per-image preprocessing: orientation, resampling, cropping, normalization.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;

use super::{DataError, DataMode, Exam, ImageRecord, Scale, View, CROP_HEIGHT, CROP_WIDTH, JITTER_CAP};
use crate::tensor::Tensor;

/// Guard on the standard deviation of constant images.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Standardizes an image to zero mean and unit population standard deviation.
pub fn normalize_image(pixels: &Tensor<f32>) -> Tensor<f32> {
    let n = pixels.len() as f64;
    let mean = pixels.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = pixels.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(NORMALIZE_EPS);
    pixels.map(|v| ((f64::from(v) - mean) / sd) as f32)
}

fn flip_columns(pixels: &Tensor<f32>) -> Result<Tensor<f32>, DataError> {
    let (h, w) = pixels.dims2("flip")?;
    let src = pixels.data();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        out.extend(src[r * w..(r + 1) * w].iter().rev());
    }
    Ok(Tensor::new(pixels.shape().to_vec(), out)?)
}

/// Mirrors right-breast views horizontally so every breast faces the same way.
pub fn standardize_orientation(record: &ImageRecord) -> Result<ImageRecord, DataError> {
    if !record.view.is_right() {
        return Ok(record.clone());
    }
    Ok(ImageRecord { pixels: Arc::new(flip_columns(&record.pixels)?), ..record.clone() })
}

/// Crop geometry and jitter policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRule {
    pub crop_height: usize,
    pub crop_width: usize,
    pub jitter_cap: usize,
    pub mode: DataMode,
}

impl CropRule {
    /// Full-resolution rule: 2600x2000 crop, translations capped at 100 pixels.
    pub fn full(mode: DataMode) -> Self {
        Self { crop_height: CROP_HEIGHT, crop_width: CROP_WIDTH, jitter_cap: JITTER_CAP, mode }
    }

    /// Crop extent and jitter cap scaled to a reduced input resolution.
    pub fn at_scale(scale: Scale, mode: DataMode) -> Self {
        let (crop_height, crop_width) = scale.crop_extent();
        Self { crop_height, crop_width, jitter_cap: scale.apply(JITTER_CAP), mode }
    }
}

/// Placement of a crop inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropOffset {
    pub top: usize,
    pub left: usize,
    /// Vertical translation applied to the centered base position.
    pub t_vertical: i64,
    /// Horizontal translation applied to the leftmost base position.
    pub t_horizontal: i64,
}

/// Base position is leftmost and vertically centered. Training and test crops
/// are translated by integer draws `t_vertical ~ U[-min(b_top,cap), min(b_bottom,cap)]`
/// and `t_horizontal ~ U[0, min(b_right,cap)]`; validation crops are not moved.
pub fn crop_offset(height: usize, width: usize, rule: &CropRule, rng: &mut impl Rng) -> Result<CropOffset, DataError> {
    if height < rule.crop_height || width < rule.crop_width {
        return Err(DataError::ImageTooSmall {
            height,
            width,
            crop_height: rule.crop_height,
            crop_width: rule.crop_width,
        });
    }
    let b_top = (height - rule.crop_height) / 2;
    let b_bottom = height - rule.crop_height - b_top;
    let b_right = width - rule.crop_width;
    let (t_vertical, t_horizontal) = match rule.mode {
        DataMode::Validation => (0i64, 0i64),
        DataMode::Train | DataMode::Test => {
            let up = b_top.min(rule.jitter_cap) as i64;
            let down = b_bottom.min(rule.jitter_cap) as i64;
            let right = b_right.min(rule.jitter_cap) as i64;
            (rng.random_range(-up..=down), rng.random_range(0..=right))
        }
    };
    Ok(CropOffset {
        top: (b_top as i64 + t_vertical) as usize,
        left: t_horizontal as usize,
        t_vertical,
        t_horizontal,
    })
}

pub fn extract_crop(pixels: &Tensor<f32>, offset: CropOffset, rule: &CropRule) -> Result<Tensor<f32>, DataError> {
    let (h, w) = pixels.dims2("crop")?;
    if offset.top + rule.crop_height > h || offset.left + rule.crop_width > w {
        return Err(DataError::ImageTooSmall { height: h, width: w, crop_height: rule.crop_height, crop_width: rule.crop_width });
    }
    let src = pixels.data();
    let mut out = Vec::with_capacity(rule.crop_height * rule.crop_width);
    for r in offset.top..offset.top + rule.crop_height {
        out.extend_from_slice(&src[r * w + offset.left..r * w + offset.left + rule.crop_width]);
    }
    Ok(Tensor::new(vec![rule.crop_height, rule.crop_width], out)?)
}

/// Samples a crop position per `rule` and copies the crop out.
pub fn sample_crop(pixels: &Tensor<f32>, rule: &CropRule, rng: &mut impl Rng) -> Result<Tensor<f32>, DataError> {
    let (h, w) = pixels.dims2("crop")?;
    let offset = crop_offset(h, w, rule, rng)?;
    extract_crop(pixels, offset, rule)
}

/// Catmull-Rom cubic (a = -0.5).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Normalized filter taps for resampling `in_len` samples to `out_len`.
/// When shrinking, the kernel is stretched by the shrink ratio.
fn resample_taps(in_len: usize, out_len: usize) -> Vec<(usize, Vec<f64>)> {
    let ratio = in_len as f64 / out_len as f64;
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio;
            let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
            let hi = ((center + support + 0.5).floor() as usize).min(in_len);
            let mut w: Vec<f64> = (lo..hi).map(|i| cubic((i as f64 + 0.5 - center) / stretch)).collect();
            let total: f64 = w.iter().sum();
            if total != 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            }
            (lo, w)
        })
        .collect()
}

/// Bicubic resampling by `factor` in `(0, 1]`; output extents are rounded.
pub fn downscale(pixels: &Tensor<f32>, factor: f64) -> Result<Tensor<f32>, DataError> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(DataError::InvalidScale(format!("factor must be in (0, 1], got {factor}")));
    }
    let (h, w) = pixels.dims2("downscale")?;
    if factor == 1.0 {
        return Ok(pixels.clone());
    }
    let (oh, ow) = ((h as f64 * factor).round() as usize, (w as f64 * factor).round() as usize);
    if oh == 0 || ow == 0 {
        return Err(DataError::InvalidScale(format!("{h}x{w} at x{factor} has an empty extent")));
    }
    let src = pixels.data();
    let col_taps = resample_taps(w, ow);
    let mut horizontal = vec![0f32; h * ow];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for (o, (lo, taps)) in col_taps.iter().enumerate() {
            let acc: f64 = taps.iter().zip(&row[*lo..]).map(|(&k, &v)| k * f64::from(v)).sum();
            horizontal[r * ow + o] = acc as f32;
        }
    }
    let row_taps = resample_taps(h, oh);
    let mut out = vec![0f32; oh * ow];
    let mut acc = vec![0f64; ow];
    for (o, (lo, taps)) in row_taps.iter().enumerate() {
        acc.fill(0.0);
        for (t, &k) in taps.iter().enumerate() {
            let row = &horizontal[(lo + t) * ow..(lo + t + 1) * ow];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += k * f64::from(v);
            }
        }
        for (dst, &a) in out[o * ow..(o + 1) * ow].iter_mut().zip(&acc) {
            *dst = a as f32;
        }
    }
    Ok(Tensor::new(vec![oh, ow], out)?)
}

/// Index of the image to use from one view's list: uniform in training and
/// test, earliest timestamp (first on ties) in validation.
pub fn select_index(images: &[ImageRecord], mode: DataMode, rng: &mut impl Rng) -> Option<usize> {
    if images.is_empty() {
        return None;
    }
    Some(match mode {
        DataMode::Validation => {
            images.iter().enumerate().min_by_key(|(_, r)| r.timestamp).map(|(i, _)| i).unwrap_or(0)
        }
        DataMode::Train | DataMode::Test => rng.random_range(0..images.len()),
    })
}

/// One image per view, in [`View::ALL`] order.
pub fn select_image_per_view(exam: &Exam, mode: DataMode, rng: &mut impl Rng) -> Result<[ImageRecord; 4], DataError> {
    let mut picked = Vec::with_capacity(4);
    for view in View::ALL {
        let list = exam.views.get(&view).map(Vec::as_slice).unwrap_or(&[]);
        let i = select_index(list, mode, rng)
            .ok_or(DataError::MissingView { exam_id: exam.info.exam_id.clone(), view })?;
        picked.push(list[i].clone());
    }
    Ok(picked.try_into().expect("four views"))
}

type CacheKey = (String, View, usize);

/// Memo of oriented, resampled images, bounded by a byte budget.
#[derive(Default)]
struct ResampleCache {
    budget_bytes: usize,
    used_bytes: usize,
    entries: HashMap<CacheKey, Arc<Tensor<f32>>>,
}

/// Turns exams into four network-ready `[1, h, w]` inputs.
pub struct Preprocessor {
    scale: Scale,
    source_scale: Scale,
    cache: Option<Mutex<ResampleCache>>,
}

impl Preprocessor {
    /// `scale` is the network input resolution; `source_scale` the resolution
    /// of the stored images (full resolution for real data).
    pub fn new(scale: Scale, source_scale: Scale) -> Result<Self, DataError> {
        if source_scale.denominator() > scale.denominator() {
            return Err(DataError::InvalidScale(format!(
                "cannot upsample: images are at x{source_scale}, input requested at x{scale}"
            )));
        }
        Ok(Self { scale, source_scale, cache: None })
    }

    /// Keeps resampled images in memory up to `budget_bytes`.
    pub fn with_cache(mut self, budget_bytes: usize) -> Self {
        self.cache = Some(Mutex::new(ResampleCache { budget_bytes, ..ResampleCache::default() }));
        self
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn source_scale(&self) -> Scale {
        self.source_scale
    }

    pub fn resample_factor(&self) -> f64 {
        self.source_scale.denominator() as f64 / self.scale.denominator() as f64
    }

    pub fn crop_rule(&self, mode: DataMode) -> CropRule {
        CropRule::at_scale(self.scale, mode)
    }

    fn oriented_resampled(&self, exam: &Exam, view: View, index: usize) -> Result<Arc<Tensor<f32>>, DataError> {
        let record = &exam.views[&view][index];
        let factor = self.resample_factor();
        let compute = || -> Result<Arc<Tensor<f32>>, DataError> {
            let oriented = standardize_orientation(record)?;
            if factor == 1.0 {
                Ok(oriented.pixels)
            } else {
                Ok(Arc::new(downscale(&oriented.pixels, factor)?))
            }
        };
        let Some(cache) = self.cache.as_ref().filter(|_| factor < 1.0) else {
            return compute();
        };
        let key = (exam.info.exam_id.clone(), view, index);
        if let Some(hit) = cache.lock().expect("cache lock").entries.get(&key) {
            return Ok(Arc::clone(hit));
        }
        let value = compute()?;
        let mut c = cache.lock().expect("cache lock");
        let bytes = value.len() * std::mem::size_of::<f32>();
        if c.used_bytes + bytes <= c.budget_bytes {
            c.used_bytes += bytes;
            c.entries.insert(key, Arc::clone(&value));
        }
        Ok(value)
    }

    /// Select, orient, resample, crop and normalize all four views.
    pub fn prepare(&self, exam: &Exam, mode: DataMode, rng: &mut impl Rng) -> Result<[Tensor<f32>; 4], DataError> {
        let rule = self.crop_rule(mode);
        let mut out = Vec::with_capacity(4);
        for view in View::ALL {
            let list = exam.views.get(&view).map(Vec::as_slice).unwrap_or(&[]);
            let index = select_index(list, mode, rng)
                .ok_or(DataError::MissingView { exam_id: exam.info.exam_id.clone(), view })?;
            let image = self.oriented_resampled(exam, view, index)?;
            let crop = sample_crop(&image, &rule, rng)?;
            let (h, w) = (rule.crop_height, rule.crop_width);
            out.push(normalize_image(&crop).reshape(vec![1, h, w])?);
        }
        Ok(out.try_into().expect("four views"))
    }
}
