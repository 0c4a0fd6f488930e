use serde::Serialize;

use crate::tensor::{ConvSpec, PoolSpec};

/// One stage of a view column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Layer {
    /// Valid convolution followed by a rectifier.
    Conv(ConvSpec),
    MaxPool(PoolSpec),
}

impl Layer {
    pub fn window(&self) -> (usize, usize) {
        match self {
            Layer::Conv(c) => (c.kernel_h, c.kernel_w),
            Layer::MaxPool(p) => (p.window_h, p.window_w),
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        match self {
            Layer::Conv(c) => c.output_extent(h, w),
            Layer::MaxPool(p) => p.output_extent(h, w),
        }
    }
}

/// The ordered layer list of one view column, bottom-up, before global
/// average pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ColumnSpec {
    pub layers: Vec<Layer>,
}

impl ColumnSpec {
    /// The full-width column: 32, 64, 128, 128, 256 maps.
    pub fn standard() -> Self {
        Self::with_width_divisor(1)
    }

    /// The standard column with every map count divided by `divisor`
    /// (at least one map per layer).
    pub fn with_width_divisor(divisor: usize) -> Self {
        let d = divisor.max(1);
        let maps = |m: usize| (m / d).max(1);
        let mut layers = Vec::new();
        let mut c = 1;
        let mut conv = |layers: &mut Vec<Layer>, stride: usize, out: usize| {
            layers.push(Layer::Conv(ConvSpec::square(3, stride, c, out)));
            c = out;
        };
        conv(&mut layers, 2, maps(32));
        layers.push(Layer::MaxPool(PoolSpec::square(3, 3)));
        conv(&mut layers, 2, maps(64));
        conv(&mut layers, 1, maps(64));
        conv(&mut layers, 1, maps(64));
        for block in [128, 128, 256] {
            layers.push(Layer::MaxPool(PoolSpec::square(2, 2)));
            for _ in 0..3 {
                conv(&mut layers, 1, maps(block));
            }
        }
        Self { layers }
    }

    /// Map count after the first `n` layers.
    pub fn maps_after(&self, n: usize) -> usize {
        self.layers[..n]
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv(c) => Some(c.out_maps),
                Layer::MaxPool(_) => None,
            })
            .unwrap_or(1)
    }
}

/// A column truncated for a specific input extent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerPlan {
    pub column: ColumnSpec,
    pub input: (usize, usize),
    /// Number of leading layers kept; the rest are skipped up to pooling.
    pub retained: usize,
    /// `(maps, height, width)` after each retained layer.
    pub trace: Vec<(usize, usize, usize)>,
}

impl LayerPlan {
    /// Walks the column on an `height x width` input and cuts it at the first
    /// layer whose window exceeds the current feature map. Returns `None` if
    /// even the first layer does not fit.
    pub fn for_input(column: ColumnSpec, height: usize, width: usize) -> Option<Self> {
        let (mut h, mut w) = (height, width);
        let mut trace = Vec::new();
        for (i, layer) in column.layers.iter().enumerate() {
            let (kh, kw) = layer.window();
            if kh > h || kw > w {
                break;
            }
            (h, w) = layer.output_extent(h, w)?;
            trace.push((column.maps_after(i + 1), h, w));
        }
        if trace.is_empty() {
            return None;
        }
        Some(Self { retained: trace.len(), column, input: (height, width), trace })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.column.layers[..self.retained]
    }

    /// Length of the pooled view embedding.
    pub fn embedding_len(&self) -> usize {
        self.column.maps_after(self.retained)
    }

    pub fn is_truncated(&self) -> bool {
        self.retained < self.column.layers.len()
    }
}
