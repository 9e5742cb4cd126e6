//! Minimal CPU neural-network layer: conv/linear/residual stages with
//! explicit forward caches and hand-written backward passes, an SGD+momentum
//! optimizer with per-block learning rates, and the loss functions used by
//! the training loops.
//!
//! Everything is generic over the float type; training runs in `f32`, while
//! gradient checks instantiate the same code in `f64`.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub trait Float: NdFloat + FromPrimitive + std::iter::Sum {}
impl<T: NdFloat + FromPrimitive + std::iter::Sum> Float for T {}

#[inline]
pub fn f<F: Float>(x: f64) -> F {
    F::from_f64(x).expect("finite constant")
}

/// (name, block) identity of one parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    pub block: usize,
}

pub struct ParamSlot<'a, F> {
    pub meta: ParamMeta,
    pub param: &'a [F],
}

pub struct ParamSlotMut<'a, F> {
    pub meta: ParamMeta,
    pub param: &'a mut [F],
    pub grad: &'a [F],
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds (C, H, W) into (C*k*k, OH*OW) with zero padding.
fn im2col<F: Float>(x: &ArrayView3<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut col = Array2::<F>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut out_row = col.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Folds (C*k*k, OH*OW) gradients back onto (C, H, W).
fn col2im<F: Float>(
    col: &ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut x = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col_row = col.row(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += col_row[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// (c_out, c_in * k * k)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub grad_weight: Array2<F>,
    pub grad_bias: Array1<F>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache<F> {
    cols: Vec<Array2<F>>,
    in_dim: (usize, usize, usize),
}

impl<F: Float> Conv2d<F> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weight = Array2::from_shape_fn((c_out, fan_in), |_| f::<F>(normal.sample(rng)));
        Conv2d {
            weight,
            bias: Array1::zeros(c_out),
            grad_weight: Array2::zeros((c_out, fan_in)),
            grad_bias: Array1::zeros(c_out),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, Conv2dCache<F>) {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let oh = conv_out_dim(h, self.k, self.stride, self.pad);
        let ow = conv_out_dim(w, self.k, self.stride, self.pad);

        let results: Vec<(Array2<F>, Array2<F>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let col = im2col(&x.index_axis(Axis(0), i), self.k, self.stride, self.pad);
                let mut out = self.weight.dot(&col);
                out += &self.bias.view().insert_axis(Axis(1));
                (col, out)
            })
            .collect();

        let mut y = Array4::<F>::zeros((n, self.c_out, oh, ow));
        let mut cols = Vec::with_capacity(n);
        for (i, (col, out)) in results.into_iter().enumerate() {
            let reshaped = out.into_shape_with_order((self.c_out, oh, ow)).unwrap();
            y.index_axis_mut(Axis(0), i).assign(&reshaped);
            cols.push(col);
        }
        (
            y,
            Conv2dCache {
                cols,
                in_dim: (c, h, w),
            },
        )
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, cache: &Conv2dCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (n, _, oh, ow) = dy.dim();
        let (c, h, w) = cache.in_dim;

        let parts: Vec<(Array2<F>, Array1<F>, Array3<F>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let dy_mat = dy
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape_with_order((self.c_out, oh * ow))
                    .unwrap();
                let dw = dy_mat.dot(&cache.cols[i].t());
                let db = dy_mat.sum_axis(Axis(1));
                let dcol = self.weight.t().dot(&dy_mat);
                let dx = col2im(&dcol.view(), c, h, w, self.k, self.stride, self.pad);
                (dw, db, dx)
            })
            .collect();

        let mut dx = Array4::<F>::zeros((n, c, h, w));
        // Fixed-order reduction keeps gradients bit-identical run to run.
        for (i, (dw, db, dxi)) in parts.into_iter().enumerate() {
            self.grad_weight += &dw;
            self.grad_bias += &db;
            dx.index_axis_mut(Axis(0), i).assign(&dxi);
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(F::zero());
        self.grad_bias.fill(F::zero());
    }

    fn slots<'a>(&'a self, prefix: &str, block: usize, out: &mut Vec<ParamSlot<'a, F>>) {
        out.push(ParamSlot {
            meta: ParamMeta {
                name: format!("{prefix}.weight"),
                block,
            },
            param: self.weight.as_slice().unwrap(),
        });
        out.push(ParamSlot {
            meta: ParamMeta {
                name: format!("{prefix}.bias"),
                block,
            },
            param: self.bias.as_slice().unwrap(),
        });
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str, block: usize, out: &mut Vec<ParamSlotMut<'a, F>>) {
        out.push(ParamSlotMut {
            meta: ParamMeta {
                name: format!("{prefix}.weight"),
                block,
            },
            param: self.weight.as_slice_mut().unwrap(),
            grad: self.grad_weight.as_slice().unwrap(),
        });
        out.push(ParamSlotMut {
            meta: ParamMeta {
                name: format!("{prefix}.bias"),
                block,
            },
            param: self.bias.as_slice_mut().unwrap(),
            grad: self.grad_bias.as_slice().unwrap(),
        });
    }
}

// ---------------------------------------------------------------------------
// Instance normalization
// ---------------------------------------------------------------------------

/// Per-sample, per-channel normalization over the spatial extent with a
/// learnable affine. Unlike batch normalization there is no cross-sample
/// coupling and no running statistics, so training and inference behave
/// identically and per-sample parallelism stays deterministic.
#[derive(Debug, Clone)]
pub struct InstanceNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub grad_gamma: Array1<F>,
    pub grad_beta: Array1<F>,
    eps: F,
}

pub struct InstanceNormCache<F> {
    normalized: Array4<F>,
    inv_std: Array2<F>,
}

impl<F: Float> InstanceNorm<F> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            eps: f::<F>(1e-5),
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, InstanceNormCache<F>) {
        let (n, c, h, w) = x.dim();
        let count = f::<F>((h * w) as f64);
        let mut normalized = Array4::<F>::zeros((n, c, h, w));
        let mut inv_std = Array2::<F>::zeros((n, c));
        let mut y = Array4::<F>::zeros((n, c, h, w));
        for i in 0..n {
            for ci in 0..c {
                let plane = x.index_axis(Axis(0), i);
                let plane = plane.index_axis(Axis(0), ci);
                let mut mean = F::zero();
                for &v in plane.iter() {
                    mean += v;
                }
                mean /= count;
                let mut var = F::zero();
                for &v in plane.iter() {
                    let d = v - mean;
                    var += d * d;
                }
                var /= count;
                let istd = F::one() / (var + self.eps).sqrt();
                inv_std[[i, ci]] = istd;
                for (idx, &v) in plane.indexed_iter() {
                    let xhat = (v - mean) * istd;
                    normalized[[i, ci, idx.0, idx.1]] = xhat;
                    y[[i, ci, idx.0, idx.1]] = self.gamma[ci] * xhat + self.beta[ci];
                }
            }
        }
        (
            y,
            InstanceNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(&mut self, cache: &InstanceNormCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = dy.dim();
        let count = f::<F>((h * w) as f64);
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        for ci in 0..c {
            let mut dgamma = F::zero();
            let mut dbeta = F::zero();
            for i in 0..n {
                let dy_plane = dy.index_axis(Axis(0), i);
                let dy_plane = dy_plane.index_axis(Axis(0), ci);
                let xhat_plane = cache.normalized.index_axis(Axis(0), i);
                let xhat_plane = xhat_plane.index_axis(Axis(0), ci);
                let mut sum_dy = F::zero();
                let mut sum_dy_xhat = F::zero();
                for (&g, &xh) in dy_plane.iter().zip(xhat_plane.iter()) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
                dgamma += sum_dy_xhat;
                dbeta += sum_dy;
                let istd = cache.inv_std[[i, ci]];
                let scale = self.gamma[ci] * istd / count;
                for (idx, (&g, &xh)) in dy_plane.iter().zip(xhat_plane.iter()).enumerate() {
                    let (yy, xx) = (idx / w, idx % w);
                    dx[[i, ci, yy, xx]] = scale * (count * g - sum_dy - xh * sum_dy_xhat);
                }
            }
            self.grad_gamma[ci] += dgamma;
            self.grad_beta[ci] += dbeta;
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(F::zero());
        self.grad_beta.fill(F::zero());
    }

    fn slots<'a>(&'a self, prefix: &str, block: usize, out: &mut Vec<ParamSlot<'a, F>>) {
        out.push(ParamSlot {
            meta: ParamMeta {
                name: format!("{prefix}.gamma"),
                block,
            },
            param: self.gamma.as_slice().unwrap(),
        });
        out.push(ParamSlot {
            meta: ParamMeta {
                name: format!("{prefix}.beta"),
                block,
            },
            param: self.beta.as_slice().unwrap(),
        });
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str, block: usize, out: &mut Vec<ParamSlotMut<'a, F>>) {
        out.push(ParamSlotMut {
            meta: ParamMeta {
                name: format!("{prefix}.gamma"),
                block,
            },
            param: self.gamma.as_slice_mut().unwrap(),
            grad: self.grad_gamma.as_slice().unwrap(),
        });
        out.push(ParamSlotMut {
            meta: ParamMeta {
                name: format!("{prefix}.beta"),
                block,
            },
            param: self.beta.as_slice_mut().unwrap(),
            grad: self.grad_beta.as_slice().unwrap(),
        });
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// (d_out, d_in)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub grad_weight: Array2<F>,
    pub grad_bias: Array1<F>,
}

pub struct LinearCache<F> {
    input: Array2<F>,
}

impl<F: Float> Linear<F> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / d_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Linear {
            weight: Array2::from_shape_fn((d_out, d_in), |_| f::<F>(normal.sample(rng))),
            bias: Array1::zeros(d_out),
            grad_weight: Array2::zeros((d_out, d_in)),
            grad_bias: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LinearCache<F>) {
        let y = x.dot(&self.weight.t()) + &self.bias;
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache<F>, dy: &Array2<F>) -> Array2<F> {
        self.grad_weight += &dy.t().dot(&cache.input);
        self.grad_bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(F::zero());
        self.grad_bias.fill(F::zero());
    }

    pub fn slots_into<'a>(&'a self, prefix: &str, block: usize, out: &mut Vec<ParamSlot<'a, F>>) {
        out.push(ParamSlot {
            meta: ParamMeta {
                name: format!("{prefix}.weight"),
                block,
            },
            param: self.weight.as_slice().unwrap(),
        });
        out.push(ParamSlot {
            meta: ParamMeta {
                name: format!("{prefix}.bias"),
                block,
            },
            param: self.bias.as_slice().unwrap(),
        });
    }

    pub fn slots_mut_into<'a>(
        &'a mut self,
        prefix: &str,
        block: usize,
        out: &mut Vec<ParamSlotMut<'a, F>>,
    ) {
        out.push(ParamSlotMut {
            meta: ParamMeta {
                name: format!("{prefix}.weight"),
                block,
            },
            param: self.weight.as_slice_mut().unwrap(),
            grad: self.grad_weight.as_slice().unwrap(),
        });
        out.push(ParamSlotMut {
            meta: ParamMeta {
                name: format!("{prefix}.bias"),
                block,
            },
            param: self.bias.as_slice_mut().unwrap(),
            grad: self.grad_bias.as_slice().unwrap(),
        });
    }
}

// ---------------------------------------------------------------------------
// Activation / pooling helpers
// ---------------------------------------------------------------------------

pub fn relu4<F: Float>(x: &Array4<F>) -> Array4<F> {
    x.map(|&v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward4<F: Float>(y: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn relu2<F: Float>(x: &Array2<F>) -> Array2<F> {
    x.map(|&v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward2<F: Float>(y: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn global_avg_pool<F: Float>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let denom = f::<F>((h * w) as f64);
    let mut out = Array2::<F>::zeros((n, c));
    for i in 0..n {
        for ci in 0..c {
            let mut acc = F::zero();
            for v in x.index_axis(Axis(0), i).index_axis(Axis(0), ci).iter() {
                acc += *v;
            }
            out[[i, ci]] = acc / denom;
        }
    }
    out
}

pub fn global_avg_pool_backward<F: Float>(dy: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (n, c) = dy.dim();
    let denom = f::<F>((h * w) as f64);
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    for i in 0..n {
        for ci in 0..c {
            let g = dy[[i, ci]] / denom;
            dx.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

/// Row-wise L2 normalization with its backward pass.
pub struct L2NormCache<F> {
    normalized: Array2<F>,
    norms: Array1<F>,
}

pub fn l2_normalize_rows<F: Float>(x: &Array2<F>) -> (Array2<F>, L2NormCache<F>) {
    let eps = f::<F>(1e-12);
    let (n, _) = x.dim();
    let mut norms = Array1::<F>::zeros(n);
    let mut y = x.clone();
    for i in 0..n {
        let row = x.row(i);
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps);
        norms[i] = norm;
        y.row_mut(i).mapv_inplace(|v| v / norm);
    }
    (
        y.clone(),
        L2NormCache {
            normalized: y,
            norms,
        },
    )
}

pub fn l2_normalize_backward<F: Float>(cache: &L2NormCache<F>, dy: &Array2<F>) -> Array2<F> {
    let (n, d) = dy.dim();
    let mut dx = Array2::<F>::zeros((n, d));
    for i in 0..n {
        let y = cache.normalized.row(i);
        let g = dy.row(i);
        let dot = y.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum::<F>();
        let norm = cache.norms[i];
        for j in 0..d {
            dx[[i, j]] = (g[j] - y[j] * dot) / norm;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Conv + instance norm + ReLU unit, and the residual basic block.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvUnit<F> {
    pub conv: Conv2d<F>,
    pub norm: Option<InstanceNorm<F>>,
    pub relu: bool,
}

pub struct ConvUnitCache<F> {
    conv: Conv2dCache<F>,
    norm: Option<InstanceNormCache<F>>,
    out: Option<Array4<F>>,
}

impl<F: Float> ConvUnit<F> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvUnit {
            conv: Conv2d::new(c_in, c_out, k, stride, pad, rng),
            norm: Some(InstanceNorm::new(c_out)),
            relu: true,
        }
    }

    /// Plain signed convolution: no normalization, no ReLU. Used as the final
    /// feature stage so global pooling keeps per-input variance.
    pub fn new_plain(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvUnit {
            conv: Conv2d::new(c_in, c_out, k, stride, pad, rng),
            norm: None,
            relu: false,
        }
    }

    /// conv -> (instance norm) -> (ReLU).
    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvUnitCache<F>) {
        let (z, conv) = self.conv.forward(x);
        let (zn, norm) = match &self.norm {
            Some(n) => {
                let (zn, c) = n.forward(&z);
                (zn, Some(c))
            }
            None => (z, None),
        };
        if self.relu {
            let y = relu4(&zn);
            (
                y.clone(),
                ConvUnitCache {
                    conv,
                    norm,
                    out: Some(y),
                },
            )
        } else {
            (
                zn,
                ConvUnitCache {
                    conv,
                    norm,
                    out: None,
                },
            )
        }
    }

    pub fn backward(&mut self, cache: &ConvUnitCache<F>, dy: &Array4<F>) -> Array4<F> {
        let dzn = match &cache.out {
            Some(y) => relu_backward4(y, dy),
            None => dy.clone(),
        };
        let dz = match (&mut self.norm, &cache.norm) {
            (Some(n), Some(nc)) => n.backward(nc, &dzn),
            _ => dzn,
        };
        self.conv.backward(&cache.conv, &dz)
    }

    pub fn zero_grad(&mut self) {
        self.conv.zero_grad();
        if let Some(n) = &mut self.norm {
            n.zero_grad();
        }
    }

    fn slots<'a>(&'a self, prefix: &str, block: usize, out: &mut Vec<ParamSlot<'a, F>>) {
        self.conv.slots(&format!("{prefix}.conv"), block, out);
        if let Some(n) = &self.norm {
            n.slots(&format!("{prefix}.norm"), block, out);
        }
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str, block: usize, out: &mut Vec<ParamSlotMut<'a, F>>) {
        self.conv.slots_mut(&format!("{prefix}.conv"), block, out);
        if let Some(n) = &mut self.norm {
            n.slots_mut(&format!("{prefix}.norm"), block, out);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock<F> {
    pub conv1: Conv2d<F>,
    pub norm1: Option<InstanceNorm<F>>,
    pub conv2: Conv2d<F>,
    pub norm2: Option<InstanceNorm<F>>,
    /// 1x1 projection (plus optional norm) on the skip path when channels or
    /// stride change.
    pub proj: Option<(Conv2d<F>, Option<InstanceNorm<F>>)>,
    /// A plain final block drops the closing ReLU so its output stays signed.
    pub final_relu: bool,
}

pub struct ResBlockCache<F> {
    c1: Conv2dCache<F>,
    n1: Option<InstanceNormCache<F>>,
    h1: Array4<F>,
    c2: Conv2dCache<F>,
    n2: Option<InstanceNormCache<F>>,
    proj: Option<(Conv2dCache<F>, Option<InstanceNormCache<F>>)>,
    out: Option<Array4<F>>,
}

impl<F: Float> ResBlock<F> {
    pub fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self::build(c_in, c_out, stride, true, rng)
    }

    /// Un-normalized signed variant used as the deepest stage, so pooled
    /// features keep per-input variance.
    pub fn new_plain(c_in: usize, c_out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self::build(c_in, c_out, stride, false, rng)
    }

    fn build(
        c_in: usize,
        c_out: usize,
        stride: usize,
        normalized: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = Conv2d::new(c_in, c_out, 3, stride, 1, rng);
        let conv2 = Conv2d::new(c_out, c_out, 3, 1, 1, rng);
        let mk_norm = || {
            if normalized {
                Some(InstanceNorm::new(c_out))
            } else {
                None
            }
        };
        let proj = if c_in != c_out || stride != 1 {
            Some((Conv2d::new(c_in, c_out, 1, stride, 0, rng), mk_norm()))
        } else {
            None
        };
        ResBlock {
            conv1,
            norm1: mk_norm(),
            conv2,
            norm2: mk_norm(),
            proj,
            final_relu: normalized,
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ResBlockCache<F>) {
        let (z1, c1) = self.conv1.forward(x);
        let (z1n, n1) = match &self.norm1 {
            Some(n) => {
                let (z, c) = n.forward(&z1);
                (z, Some(c))
            }
            None => (z1, None),
        };
        let h1 = relu4(&z1n);
        let (z2, c2) = self.conv2.forward(&h1);
        let (z2n, n2) = match &self.norm2 {
            Some(n) => {
                let (z, c) = n.forward(&z2);
                (z, Some(c))
            }
            None => (z2, None),
        };
        let (skip, proj_cache) = match &self.proj {
            Some((p, pn)) => {
                let (sv, pc) = p.forward(x);
                let (sn, pnc) = match pn {
                    Some(n) => {
                        let (z, c) = n.forward(&sv);
                        (z, Some(c))
                    }
                    None => (sv, None),
                };
                (sn, Some((pc, pnc)))
            }
            None => (x.clone(), None),
        };
        let pre = z2n + skip;
        if self.final_relu {
            let out = relu4(&pre);
            (
                out.clone(),
                ResBlockCache {
                    c1,
                    n1,
                    h1,
                    c2,
                    n2,
                    proj: proj_cache,
                    out: Some(out),
                },
            )
        } else {
            (
                pre,
                ResBlockCache {
                    c1,
                    n1,
                    h1,
                    c2,
                    n2,
                    proj: proj_cache,
                    out: None,
                },
            )
        }
    }

    pub fn backward(&mut self, cache: &ResBlockCache<F>, dy: &Array4<F>) -> Array4<F> {
        let dz = match &cache.out {
            Some(y) => relu_backward4(y, dy),
            None => dy.clone(),
        };
        let dz2 = match (&mut self.norm2, &cache.n2) {
            (Some(n), Some(nc)) => n.backward(nc, &dz),
            _ => dz.clone(),
        };
        let dh1 = self.conv2.backward(&cache.c2, &dz2);
        let dz1n = relu_backward4(&cache.h1, &dh1);
        let dz1 = match (&mut self.norm1, &cache.n1) {
            (Some(n), Some(nc)) => n.backward(nc, &dz1n),
            _ => dz1n,
        };
        let mut dx = self.conv1.backward(&cache.c1, &dz1);
        match (&mut self.proj, &cache.proj) {
            (Some((p, pn)), Some((pc, pnc))) => {
                let ds = match (pn, pnc) {
                    (Some(n), Some(nc)) => n.backward(nc, &dz),
                    _ => dz,
                };
                dx += &p.backward(pc, &ds);
            }
            _ => {
                dx += &dz;
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.conv2.zero_grad();
        if let Some(n) = &mut self.norm1 {
            n.zero_grad();
        }
        if let Some(n) = &mut self.norm2 {
            n.zero_grad();
        }
        if let Some((p, pn)) = &mut self.proj {
            p.zero_grad();
            if let Some(n) = pn {
                n.zero_grad();
            }
        }
    }

    fn slots<'a>(&'a self, prefix: &str, block: usize, out: &mut Vec<ParamSlot<'a, F>>) {
        self.conv1.slots(&format!("{prefix}.conv1"), block, out);
        if let Some(n) = &self.norm1 {
            n.slots(&format!("{prefix}.norm1"), block, out);
        }
        self.conv2.slots(&format!("{prefix}.conv2"), block, out);
        if let Some(n) = &self.norm2 {
            n.slots(&format!("{prefix}.norm2"), block, out);
        }
        if let Some((p, pn)) = &self.proj {
            p.slots(&format!("{prefix}.proj"), block, out);
            if let Some(n) = pn {
                n.slots(&format!("{prefix}.projnorm"), block, out);
            }
        }
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str, block: usize, out: &mut Vec<ParamSlotMut<'a, F>>) {
        self.conv1.slots_mut(&format!("{prefix}.conv1"), block, out);
        if let Some(n) = &mut self.norm1 {
            n.slots_mut(&format!("{prefix}.norm1"), block, out);
        }
        self.conv2.slots_mut(&format!("{prefix}.conv2"), block, out);
        if let Some(n) = &mut self.norm2 {
            n.slots_mut(&format!("{prefix}.norm2"), block, out);
        }
        if let Some((p, pn)) = &mut self.proj {
            p.slots_mut(&format!("{prefix}.proj"), block, out);
            if let Some(n) = pn {
                n.slots_mut(&format!("{prefix}.projnorm"), block, out);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Encoder stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Stage<F> {
    /// Convolution, instance norm, ReLU.
    ConvRelu(ConvUnit<F>),
    Res(ResBlock<F>),
}

pub enum StageCache<F> {
    ConvRelu(ConvUnitCache<F>),
    Res(ResBlockCache<F>),
}

impl<F: Float> Stage<F> {
    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, StageCache<F>) {
        match self {
            Stage::ConvRelu(unit) => {
                let (y, c) = unit.forward(x);
                (y, StageCache::ConvRelu(c))
            }
            Stage::Res(block) => {
                let (y, c) = block.forward(x);
                (y, StageCache::Res(c))
            }
        }
    }

    pub fn backward(&mut self, cache: &StageCache<F>, dy: &Array4<F>) -> Array4<F> {
        match (self, cache) {
            (Stage::ConvRelu(unit), StageCache::ConvRelu(c)) => unit.backward(c, dy),
            (Stage::Res(block), StageCache::Res(c)) => block.backward(c, dy),
            _ => unreachable!("cache kind mismatch"),
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            Stage::ConvRelu(c) => c.zero_grad(),
            Stage::Res(b) => b.zero_grad(),
        }
    }

    pub fn slots<'a>(&'a self, prefix: &str, block: usize, out: &mut Vec<ParamSlot<'a, F>>) {
        match self {
            Stage::ConvRelu(c) => c.slots(prefix, block, out),
            Stage::Res(b) => b.slots(prefix, block, out),
        }
    }

    pub fn slots_mut<'a>(
        &'a mut self,
        prefix: &str,
        block: usize,
        out: &mut Vec<ParamSlotMut<'a, F>>,
    ) {
        match self {
            Stage::ConvRelu(c) => c.slots_mut(prefix, block, out),
            Stage::Res(b) => b.slots_mut(prefix, block, out),
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy. Returns (loss, dL/dlogits).
pub fn softmax_cross_entropy<F: Float>(logits: &Array2<F>, targets: &[usize]) -> (f64, Array2<F>) {
    let (n, c) = logits.dim();
    assert_eq!(n, targets.len());
    let mut dlogits = Array2::<F>::zeros((n, c));
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let exps: Vec<f64> = row
            .iter()
            .map(|&v| (v - max).to_f64().unwrap().exp())
            .collect();
        let z: f64 = exps.iter().sum();
        let t = targets[i];
        loss += z.ln() - (row[t] - max).to_f64().unwrap();
        for j in 0..c {
            let p = exps[j] / z;
            let delta = if j == t { 1.0 } else { 0.0 };
            dlogits[[i, j]] = f::<F>((p - delta) / n as f64);
        }
    }
    (loss / n as f64, dlogits)
}

/// Row-wise softmax probabilities of the positive/abnormal class (index 1)
/// for a 2-class logit matrix.
pub fn softmax_prob_class1<F: Float>(logits: &Array2<F>) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let a = row[0].to_f64().unwrap();
            let b = row[1].to_f64().unwrap();
            let m = a.max(b);
            let ea = (a - m).exp();
            let eb = (b - m).exp();
            eb / (ea + eb)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// SGD with momentum and per-block learning rates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGroup {
    pub block: usize,
    pub lr: f64,
    pub trainable: bool,
}

#[derive(Debug)]
pub struct Sgd<F> {
    groups: Vec<ParamGroup>,
    momentum: F,
    weight_decay: F,
    /// Multiplicative schedule factor applied to every group.
    pub lr_scale: f64,
    velocity: Vec<Vec<F>>,
}

impl<F: Float> Sgd<F> {
    /// `groups[block]` carries the base learning rate of that block.
    pub fn new(groups: Vec<ParamGroup>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            groups,
            momentum: f::<F>(momentum),
            weight_decay: f::<F>(weight_decay),
            lr_scale: 1.0,
            velocity: Vec::new(),
        }
    }

    pub fn param_groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn step(&mut self, mut slots: Vec<ParamSlotMut<'_, F>>) {
        if self.velocity.is_empty() {
            self.velocity = slots
                .iter()
                .map(|s| vec![F::zero(); s.param.len()])
                .collect();
        }
        assert_eq!(self.velocity.len(), slots.len(), "parameter set changed");
        for (slot, vel) in slots.iter_mut().zip(self.velocity.iter_mut()) {
            let group = &self.groups[slot.meta.block];
            if !group.trainable {
                continue;
            }
            let lr = f::<F>(group.lr * self.lr_scale);
            for ((p, g), v) in slot
                .param
                .iter_mut()
                .zip(slot.grad.iter())
                .zip(vel.iter_mut())
            {
                let g = *g + self.weight_decay * *p;
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// In-place EMA update: dst <- m * dst + (1 - m) * src, element-wise.
pub fn ema_update_params<F: Float>(dst: &mut [F], src: &[F], m: f64) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Training(format!(
            "EMA structure mismatch: {} vs {} parameters",
            dst.len(),
            src.len()
        )));
    }
    let m = f::<F>(m);
    let one_minus = F::one() - m;
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = m * *d + one_minus * *s;
    }
    Ok(())
}
