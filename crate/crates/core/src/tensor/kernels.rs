//! Convolution and pooling kernels on `[C,H,W]` buffers.
//!
//! Convolution is valid (no padding) and lowered to GEMM through an
//! im2col buffer that covers a band of output rows at a time, so the scratch
//! memory stays bounded even for full-resolution inputs.

use serde::{Deserialize, Serialize};

use super::{gemm, MatRef, Scalar, TensorError};

/// Number of output positions lowered per im2col band.
const BAND_POSITIONS: usize = 4096;

/// Output extent of a valid window sweep, or `None` when the window does not fit.
pub fn output_extent(input: usize, window: usize, stride: usize) -> Option<usize> {
    if window == 0 || stride == 0 || window > input {
        None
    } else {
        Some((input - window) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub in_maps: usize,
    pub out_maps: usize,
}

impl ConvSpec {
    pub fn square(kernel: usize, stride: usize, in_maps: usize, out_maps: usize) -> Self {
        Self { kernel_h: kernel, kernel_w: kernel, stride_h: stride, stride_w: stride, in_maps, out_maps }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((output_extent(h, self.kernel_h, self.stride_h)?, output_extent(w, self.kernel_w, self.stride_w)?))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_maps, self.in_maps, self.kernel_h, self.kernel_w]
    }

    pub fn fan_in(&self) -> usize {
        self.in_maps * self.kernel_h * self.kernel_w
    }

    pub fn fan_out(&self) -> usize {
        self.out_maps * self.kernel_h * self.kernel_w
    }

    fn validate(&self) -> Result<(), TensorError> {
        let fields = [self.kernel_h, self.kernel_w, self.stride_h, self.stride_w, self.in_maps, self.out_maps];
        if fields.iter().any(|&v| v == 0) {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!("all ConvSpec fields must be >= 1, got {self:?}"),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window_h: usize,
    pub window_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl PoolSpec {
    pub fn square(window: usize, stride: usize) -> Self {
        Self { window_h: window, window_w: window, stride_h: stride, stride_w: stride }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((output_extent(h, self.window_h, self.stride_h)?, output_extent(w, self.window_w, self.stride_w)?))
    }
}

/// A convolution resolved against a concrete input extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub spec: ConvSpec,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve(spec: ConvSpec, c_in: usize, in_h: usize, in_w: usize) -> Result<Self, TensorError> {
        spec.validate()?;
        if c_in != spec.in_maps {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {c_in} maps, kernel expects {}", spec.in_maps),
            });
        }
        let (out_h, out_w) = spec.output_extent(in_h, in_w).ok_or(TensorError::KernelTooLarge {
            op: "conv2d",
            kernel_h: spec.kernel_h,
            kernel_w: spec.kernel_w,
            input_h: in_h,
            input_w: in_w,
        })?;
        Ok(Self { spec, in_h, in_w, out_h, out_w })
    }

    fn patch_len(&self) -> usize {
        self.spec.fan_in()
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn band_rows(&self) -> usize {
        (BAND_POSITIONS / self.out_w).clamp(1, self.out_h)
    }
}

/// Copies the receptive fields of output rows `r0..r1` into `cols` as a
/// `[patch_len, (r1-r0)*out_w]` row-major matrix.
fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry, r0: usize, r1: usize, cols: &mut [T]) {
    let s = &g.spec;
    let width = (r1 - r0) * g.out_w;
    let plane = g.in_h * g.in_w;
    let mut p = 0;
    for c in 0..s.in_maps {
        let src = &input[c * plane..(c + 1) * plane];
        for ki in 0..s.kernel_h {
            for kj in 0..s.kernel_w {
                let dst = &mut cols[p * width..(p + 1) * width];
                for (ri, r) in (r0..r1).enumerate() {
                    let row = &src[(r * s.stride_h + ki) * g.in_w + kj..];
                    let out = &mut dst[ri * g.out_w..(ri + 1) * g.out_w];
                    if s.stride_w == 1 {
                        out.copy_from_slice(&row[..g.out_w]);
                    } else {
                        for (oc, o) in out.iter_mut().enumerate() {
                            *o = row[oc * s.stride_w];
                        }
                    }
                }
                p += 1;
            }
        }
    }
}

/// Scatter-adds a `[patch_len, (r1-r0)*out_w]` column buffer back onto the input layout.
fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, r0: usize, r1: usize, dinput: &mut [T]) {
    let s = &g.spec;
    let width = (r1 - r0) * g.out_w;
    let plane = g.in_h * g.in_w;
    let mut p = 0;
    for c in 0..s.in_maps {
        let dst = &mut dinput[c * plane..(c + 1) * plane];
        for ki in 0..s.kernel_h {
            for kj in 0..s.kernel_w {
                let src = &cols[p * width..(p + 1) * width];
                for (ri, r) in (r0..r1).enumerate() {
                    let base = (r * s.stride_h + ki) * g.in_w + kj;
                    let vals = &src[ri * g.out_w..(ri + 1) * g.out_w];
                    for (oc, &v) in vals.iter().enumerate() {
                        let idx = base + oc * s.stride_w;
                        dst[idx] = dst[idx] + v;
                    }
                }
                p += 1;
            }
        }
    }
}

/// Valid strided convolution. Returns a `[out_maps, out_h, out_w]` buffer.
pub fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeometry) -> Vec<T> {
    let k = g.patch_len();
    let n = g.positions();
    let c_out = g.spec.out_maps;
    let mut out = vec![T::zero(); c_out * n];
    for (co, &b) in bias.iter().enumerate() {
        out[co * n..(co + 1) * n].fill(b);
    }
    let band = g.band_rows();
    let mut cols = vec![T::zero(); k * band * g.out_w];
    let w = MatRef::row_major(weight, c_out, k);
    let mut r0 = 0;
    while r0 < g.out_h {
        let r1 = (r0 + band).min(g.out_h);
        let nc = (r1 - r0) * g.out_w;
        im2col(input, g, r0, r1, &mut cols[..k * nc]);
        gemm(w, MatRef::row_major(&cols[..k * nc], k, nc), T::one(), &mut out[r0 * g.out_w..], n);
        r0 = r1;
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of a valid convolution given the upstream gradient `dout`.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads<T> {
    let k = g.patch_len();
    let n = g.positions();
    let c_out = g.spec.out_maps;
    let bias: Vec<T> = (0..c_out).map(|co| dout[co * n..(co + 1) * n].iter().copied().sum()).collect();
    let mut dweight = vec![T::zero(); c_out * k];
    let mut dinput = need_input.then(|| vec![T::zero(); input.len()]);
    let band = g.band_rows();
    let mut cols = vec![T::zero(); k * band * g.out_w];
    let mut dcols = if need_input { vec![T::zero(); k * band * g.out_w] } else { Vec::new() };
    let w_t = MatRef::row_major(weight, c_out, k).transposed();
    let mut r0 = 0;
    while r0 < g.out_h {
        let r1 = (r0 + band).min(g.out_h);
        let nc = (r1 - r0) * g.out_w;
        let dout_band = MatRef {
            data: &dout[r0 * g.out_w..],
            rows: c_out,
            cols: nc,
            row_stride: n,
            col_stride: 1,
        };
        im2col(input, g, r0, r1, &mut cols[..k * nc]);
        let cols_t = MatRef::row_major(&cols[..k * nc], k, nc).transposed();
        gemm(dout_band, cols_t, T::one(), &mut dweight, k);
        if let Some(dinput) = dinput.as_mut() {
            gemm(w_t, dout_band, T::zero(), &mut dcols[..k * nc], nc);
            col2im_add(&dcols[..k * nc], g, r0, r1, dinput);
        }
        r0 = r1;
    }
    ConvGrads { input: dinput, weight: dweight, bias }
}

/// A pooling window resolved against a concrete input extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub spec: PoolSpec,
    pub maps: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn resolve(spec: PoolSpec, maps: usize, in_h: usize, in_w: usize) -> Result<Self, TensorError> {
        if spec.stride_h == 0 || spec.stride_w == 0 || spec.window_h == 0 || spec.window_w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "maxpool2d",
                detail: format!("window and stride must be >= 1, got {spec:?}"),
            });
        }
        let (out_h, out_w) = spec.output_extent(in_h, in_w).ok_or(TensorError::KernelTooLarge {
            op: "maxpool2d",
            kernel_h: spec.window_h,
            kernel_w: spec.window_w,
            input_h: in_h,
            input_w: in_w,
        })?;
        Ok(Self { spec, maps, in_h, in_w, out_h, out_w })
    }
}

/// Max pooling. Returns the pooled maps and, per output, the flat input
/// index of the first maximal element in row-major window order.
pub fn maxpool2d_forward<T: Scalar>(input: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let s = &g.spec;
    let plane = g.in_h * g.in_w;
    let mut out = Vec::with_capacity(g.maps * g.out_h * g.out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    for c in 0..g.maps {
        let base = c * plane;
        for oi in 0..g.out_h {
            for oj in 0..g.out_w {
                let mut best_idx = base + oi * s.stride_h * g.in_w + oj * s.stride_w;
                let mut best = input[best_idx];
                for ki in 0..s.window_h {
                    let row = base + (oi * s.stride_h + ki) * g.in_w + oj * s.stride_w;
                    for idx in row..row + s.window_w {
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2d_backward<T: Scalar>(dout: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dinput = vec![T::zero(); input_len];
    for (&idx, &d) in argmax.iter().zip(dout) {
        dinput[idx] = dinput[idx] + d;
    }
    dinput
}
