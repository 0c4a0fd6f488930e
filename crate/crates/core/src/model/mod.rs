//! The four-column network: tied CC and MLO columns, concatenation fusion,
//! a rectified hidden layer with dropout, and a three-way softmax head.

mod checkpoint;
mod plan;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use plan::{ColumnSpec, Layer, LayerPlan};

use crate::data::{DataError, DataMode, Exam, Preprocessor, Scale, View};
use crate::metrics::{MetricsError, PredictionDistribution, CLASSES};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("input {height}x{width} is smaller than the first {kernel}x{kernel} kernel")]
    InputTooSmall { height: usize, width: usize, kernel: usize },
    #[error("view {view} is {got:?}, the model expects [1, {height}, {width}]")]
    InputShape { view: View, got: Vec<usize>, height: usize, width: usize },
    #[error("checkpoint was trained at x{checkpoint}, cannot run at x{requested}")]
    ScaleMismatch { checkpoint: Scale, requested: Scale },
    #[error("{path}: checkpoint field {field}: {detail}")]
    Checkpoint { path: String, field: &'static str, detail: String },
    #[error("invalid model argument: {0}")]
    InvalidArgument(String),
}

/// Architecture hyperparameters, all recorded in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ModelConfig {
    pub scale: Scale,
    pub input_height: usize,
    pub input_width: usize,
    /// Divides every column map count; 1 is the full-width network.
    pub width_divisor: usize,
    pub hidden_units: usize,
}

impl ModelConfig {
    /// Full-width network on the standard crop at `scale`.
    pub fn for_scale(scale: Scale) -> Self {
        let (input_height, input_width) = scale.crop_extent();
        Self { scale, input_height, input_width, width_divisor: 1, hidden_units: 1024 }
    }

    pub fn with_width_divisor(mut self, divisor: usize) -> Self {
        self.width_divisor = divisor;
        self
    }

    pub fn with_hidden_units(mut self, units: usize) -> Self {
        self.hidden_units = units;
        self
    }

    pub fn plan(&self) -> Result<LayerPlan, ModelError> {
        if self.width_divisor == 0 || self.hidden_units == 0 {
            return Err(ModelError::InvalidArgument("width divisor and hidden units must be >= 1".into()));
        }
        let column = ColumnSpec::with_width_divisor(self.width_divisor);
        let kernel = column.layers[0].window().0;
        LayerPlan::for_input(column, self.input_height, self.input_width).ok_or(ModelError::InputTooSmall {
            height: self.input_height,
            width: self.input_width,
            kernel,
        })
    }
}

/// Truncated column for a scale, using the standard crop.
pub fn layer_skip_plan(scale: Scale) -> Result<LayerPlan, ModelError> {
    ModelConfig::for_scale(scale).plan()
}

/// Regularization used in training mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainNoise {
    pub input_noise_std: f64,
    pub dropout: f64,
    /// Seed for this forward pass's noise and dropout draws.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train(TrainNoise),
    Eval,
}

/// Which column parameter set a view uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnKind {
    Cc,
    Mlo,
}

impl ColumnKind {
    pub fn of(view: View) -> Self {
        if view.is_cc() {
            ColumnKind::Cc
        } else {
            ColumnKind::Mlo
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            ColumnKind::Cc => "cc",
            ColumnKind::Mlo => "mlo",
        }
    }
}

/// Network parameters. Each column parameter set is stored once and used
/// by both the left and right view of its type.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar = f32> {
    config: ModelConfig,
    plan: LayerPlan,
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.plan == other.plan
            && self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a == b)
    }
}

fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-limit..=limit)))
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let plan = config.plan()?;
        let mut rng = stream_rng(seed, Stream::Init, &[]);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for kind in [ColumnKind::Cc, ColumnKind::Mlo] {
            for (i, layer) in plan.layers().iter().enumerate() {
                if let Layer::Conv(spec) = layer {
                    names.push(format!("{}.conv{i}.weight", kind.prefix()));
                    tensors.push(glorot(&spec.weight_shape(), spec.fan_in(), spec.fan_out(), &mut rng));
                    names.push(format!("{}.conv{i}.bias", kind.prefix()));
                    tensors.push(Tensor::zeros(&[spec.out_maps]));
                }
            }
        }
        let fused = 4 * plan.embedding_len();
        let hidden = config.hidden_units;
        names.push("fusion.weight".into());
        tensors.push(glorot(&[hidden, fused], fused, hidden, &mut rng));
        names.push("fusion.bias".into());
        tensors.push(Tensor::zeros(&[hidden]));
        names.push("head.weight".into());
        tensors.push(glorot(&[CLASSES, hidden], hidden, CLASSES, &mut rng));
        names.push("head.bias".into());
        tensors.push(Tensor::zeros(&[CLASSES]));
        Ok(Self { config, plan, names, tensors: tensors.into_iter().map(Arc::new).collect() })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        names: Vec<String>,
        tensors: Vec<Tensor<T>>,
    ) -> Result<Self, ModelError> {
        let reference = Self::init(config, 0)?;
        if reference.names != names {
            return Err(ModelError::InvalidArgument(format!(
                "parameter names {names:?} do not match the architecture {:?}",
                reference.names
            )));
        }
        for ((n, a), b) in names.iter().zip(&reference.tensors).zip(&tensors) {
            if a.shape() != b.shape() {
                return Err(ModelError::InvalidArgument(format!(
                    "parameter {n} has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self { tensors: tensors.into_iter().map(Arc::new).collect(), ..reference })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Arc<Tensor<T>>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Arc<Tensor<T>>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor<T>>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Arc<Tensor<T>>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    fn column_range(&self, kind: ColumnKind) -> std::ops::Range<usize> {
        let per_column = 2 * self.plan.layers().iter().filter(|l| matches!(l, Layer::Conv(_))).count();
        match kind {
            ColumnKind::Cc => 0..per_column,
            ColumnKind::Mlo => per_column..2 * per_column,
        }
    }

    /// The parameter set that drives `view`'s column. Both views of a type
    /// return the same storage.
    pub fn column(&self, view: View) -> &[Arc<Tensor<T>>] {
        &self.tensors[self.column_range(ColumnKind::of(view))]
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            plan: self.plan.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
        }
    }

    /// Refuses to drive an evaluation at a different scale than trained.
    pub fn check_scale(&self, requested: Scale) -> Result<(), ModelError> {
        if self.config.scale != requested {
            return Err(ModelError::ScaleMismatch { checkpoint: self.config.scale, requested });
        }
        Ok(())
    }
}

/// A recorded forward pass, ready for backpropagation.
pub struct ForwardPass<T: Scalar = f32> {
    pub graph: Graph<T>,
    /// Leaves for each parameter tensor, in [`ModelParams::names`] order.
    pub params: Vec<Var>,
    pub inputs: [Var; 4],
    pub embeddings: [Var; 4],
    pub fused: Var,
    pub probs: Var,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn distribution(&self) -> Result<PredictionDistribution, ModelError> {
        let p: Vec<f64> = self.graph.value(self.probs).data().iter().map(|v| v.to_f64_lossy()).collect();
        Ok(PredictionDistribution::from_slice(&p)?)
    }

    pub fn embedding(&self, view: View) -> &Tensor<T> {
        self.graph.value(self.embeddings[view.index()])
    }
}

fn check_input<T: Scalar>(config: &ModelConfig, view: View, x: &Tensor<T>) -> Result<(), ModelError> {
    let expected = [1, config.input_height, config.input_width];
    if x.shape() != expected && x.shape() != &expected[1..] {
        return Err(ModelError::InputShape {
            view,
            got: x.shape().to_vec(),
            height: config.input_height,
            width: config.input_width,
        });
    }
    Ok(())
}

fn column_on_graph<T: Scalar>(
    graph: &mut Graph<T>,
    plan: &LayerPlan,
    column: &[Var],
    input: Var,
) -> Result<Var, ModelError> {
    let mut x = input;
    let mut p = column.iter();
    for layer in plan.layers() {
        x = match *layer {
            Layer::Conv(spec) => {
                let (w, b) = (*p.next().expect("weight"), *p.next().expect("bias"));
                let y = graph.conv2d(x, w, b, spec)?;
                graph.relu(y)
            }
            Layer::MaxPool(spec) => graph.maxpool2d(x, spec)?,
        };
    }
    Ok(graph.global_avg_pool(x)?)
}

/// Records the full network on a fresh graph.
///
/// Views are in [`View::ALL`] order, each `[1, h, w]`. Parameter and input
/// leaves are tracked for gradients as requested.
pub fn forward_graph<T: Scalar>(
    params: &ModelParams<T>,
    views: [Arc<Tensor<T>>; 4],
    mode: Mode,
    params_require_grad: bool,
    inputs_require_grad: bool,
) -> Result<ForwardPass<T>, ModelError> {
    let config = &params.config;
    for (view, x) in View::ALL.iter().zip(&views) {
        check_input(config, *view, x)?;
    }
    let mut g = Graph::new();
    let leaves: Vec<Var> = params.tensors.iter().map(|t| g.leaf_shared(Arc::clone(t), params_require_grad)).collect();
    let inputs: Vec<Var> = views.into_iter().map(|x| g.leaf_shared(x, inputs_require_grad)).collect();

    let mut embeddings = Vec::with_capacity(4);
    for view in View::ALL {
        let mut x = inputs[view.index()];
        if let Mode::Train(noise) = mode {
            if noise.input_noise_std > 0.0 {
                let shape = g.value(x).shape().to_vec();
                let mut rng = stream_rng(noise.seed, Stream::InputNoise, &[view.index() as u64]);
                let normal = Normal::new(0.0, noise.input_noise_std)
                    .map_err(|e| ModelError::InvalidArgument(format!("input noise: {e}")))?;
                let n = Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(&mut rng)));
                x = g.add_const(x, &n)?;
            }
        }
        let column = &leaves[params.column_range(ColumnKind::of(view))];
        embeddings.push(column_on_graph(&mut g, &params.plan, column, x)?);
    }
    let fused = g.concat(&embeddings)?;
    let n = leaves.len();
    let (fw, fb, hw, hb) = (leaves[n - 4], leaves[n - 3], leaves[n - 2], leaves[n - 1]);
    let hidden = g.dense(fused, fw, fb)?;
    let mut hidden = g.relu(hidden);
    if let Mode::Train(noise) = mode {
        if noise.dropout > 0.0 {
            if !(0.0..1.0).contains(&noise.dropout) {
                return Err(ModelError::InvalidArgument(format!("dropout rate {} not in [0,1)", noise.dropout)));
            }
            let mut rng = stream_rng(noise.seed, Stream::Dropout, &[]);
            let keep = 1.0 - noise.dropout;
            let scale = T::from_f64_lossy(1.0 / keep);
            let mask = Tensor::from_fn(&[config.hidden_units], |_| {
                if rng.random_bool(keep) {
                    scale
                } else {
                    T::zero()
                }
            });
            hidden = g.mul_const(hidden, &mask)?;
        }
    }
    let logits = g.dense(hidden, hw, hb)?;
    let probs = g.softmax(logits)?;
    Ok(ForwardPass {
        graph: g,
        params: leaves,
        inputs: inputs.try_into().expect("four inputs"),
        embeddings: embeddings.try_into().expect("four embeddings"),
        fused,
        probs,
    })
}

/// Embedding of a single view through its column, in eval mode.
pub fn column_forward<T: Scalar>(params: &ModelParams<T>, view: View, image: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    check_input(&params.config, view, image)?;
    let mut g = Graph::new();
    let column: Vec<Var> = params.column(view).iter().map(|t| g.leaf_shared(Arc::clone(t), false)).collect();
    let x = g.leaf(image.clone(), false);
    let out = column_on_graph(&mut g, &params.plan, &column, x)?;
    Ok(g.value(out).clone())
}

/// Class distribution for one set of four preprocessed views.
pub fn forward(params: &ModelParams, views: [Tensor<f32>; 4], mode: Mode) -> Result<PredictionDistribution, ModelError> {
    forward_graph(params, views.map(Arc::new), mode, false, false)?.distribution()
}

/// Averages eval-mode predictions over `n_crops` independently sampled
/// test-mode view sets. Crop `i` draws from its own seeded stream, so the
/// result does not depend on evaluation order.
pub fn predict_tta(
    params: &ModelParams,
    exam: &Exam,
    preprocessor: &Preprocessor,
    n_crops: usize,
    seed: u64,
) -> Result<PredictionDistribution, ModelError> {
    if n_crops == 0 {
        return Err(ModelError::InvalidArgument("n_crops must be >= 1".into()));
    }
    params.check_scale(preprocessor.scale())?;
    let key = derive_seed(seed, Stream::Tta, &[]);
    let dists = (0..n_crops)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(key, Stream::Tta, &[i as u64]);
            let views = preprocessor.prepare(exam, DataMode::Test, &mut rng)?;
            forward(params, views, Mode::Eval)
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(PredictionDistribution::mean(&dists)?)
}

/// Single eval-mode prediction on the centered, earliest-image view set.
pub fn predict_centered(
    params: &ModelParams,
    exam: &Exam,
    preprocessor: &Preprocessor,
) -> Result<PredictionDistribution, ModelError> {
    params.check_scale(preprocessor.scale())?;
    let mut rng = stream_rng(0, Stream::Data, &[]);
    let views = preprocessor.prepare(exam, DataMode::Validation, &mut rng)?;
    forward(params, views, Mode::Eval)
}
