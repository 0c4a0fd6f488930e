//! Input sensitivity of prediction confidence: `|dH/dx|` for every pixel of
//! every view, where `H` is the entropy of the predicted distribution.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::data::{pgm, DataError, View};
use crate::model::{forward_graph, Mode, ModelError, ModelParams};
use crate::tensor::{Scalar, Tensor};

/// Non-negative sensitivities of one view, `[h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<T: Scalar = f32> {
    pub view: View,
    pub values: Tensor<T>,
}

/// Eval-mode entropy of the prediction for four preprocessed views.
pub fn prediction_entropy<T: Scalar>(params: &ModelParams<T>, views: [Tensor<T>; 4]) -> Result<T, ModelError> {
    let mut pass = forward_graph(params, views.map(Arc::new), Mode::Eval, false, false)?;
    let h = pass.graph.entropy(pass.probs);
    Ok(pass.graph.value(h).data()[0])
}

/// Backpropagates the prediction entropy to the four inputs and takes
/// absolute values. Views are in [`View::ALL`] order, each `[1, h, w]`.
pub fn saliency<T: Scalar>(params: &ModelParams<T>, views: [Tensor<T>; 4]) -> Result<[SaliencyMap<T>; 4], ModelError> {
    let mut pass = forward_graph(params, views.map(Arc::new), Mode::Eval, false, true)?;
    let h = pass.graph.entropy(pass.probs);
    pass.graph.backward(h)?;
    let (height, width) = (params.config().input_height, params.config().input_width);
    let maps: Vec<SaliencyMap<T>> = View::ALL
        .iter()
        .map(|&view| {
            let values = match pass.graph.take_grad(pass.inputs[view.index()]) {
                Some(g) => Tensor::new(vec![height, width], g.data().iter().map(|v| v.abs()).collect())?,
                None => Tensor::zeros(&[height, width]),
            };
            Ok(SaliencyMap { view, values })
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(maps.try_into().expect("four views"))
}

/// Clips at the `percentile`-th nearest-rank percentile of the positive
/// values and scales linearly to `0..=255`. An all-zero map renders black.
pub fn render_heatmap<T: Scalar>(map: &Tensor<T>, percentile: f64) -> Vec<u8> {
    let values: Vec<f64> = map.data().iter().map(|v| v.to_f64_lossy()).collect();
    let mut positive: Vec<f64> = values.iter().copied().filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        return vec![0; values.len()];
    }
    positive.sort_by(f64::total_cmp);
    let rank = ((percentile.clamp(0.0, 100.0) / 100.0) * positive.len() as f64).ceil() as usize;
    let clip = positive[rank.clamp(1, positive.len()) - 1];
    values.iter().map(|&v| (v.clamp(0.0, clip) / clip * 255.0).round() as u8).collect()
}

/// `images/E1/L-CC_0.pgm` becomes `images/E1/L-CC_0.saliency.pgm`.
pub fn heatmap_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image.with_file_name(format!("{stem}.saliency.pgm"))
}

/// Renders a map and writes it as an 8-bit PGM.
pub fn write_heatmap<T: Scalar>(map: &SaliencyMap<T>, path: &Path, percentile: f64) -> Result<(), DataError> {
    let (h, w) = map.values.dims2("heatmap")?;
    pgm::write_pgm8(path, h, w, &render_heatmap(&map.values, percentile))
}
