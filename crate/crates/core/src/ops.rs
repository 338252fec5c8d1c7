//! Neural building blocks recorded on the tape: convolution (plain and
//! dilated), bilinear resize, pyramid pooling, activations, convolutional
//! GRU steps, per-sample dynamic convolution, channel concatenation, and
//! MSE loss. Every operation here has a backward rule; all of them are
//! validated against the finite-difference oracle.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Convolution parameters bound to a tape.
///
/// `kernel` is `[out_channels, in_channels, kh, kw]` with odd `kh`/`kw`, so
/// `padding = dilation·(k−1)/2` preserves spatial size at stride 1.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub kernel: TensorId,
    pub bias: TensorId,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvParams {
    /// Stride-1 convolution whose padding preserves spatial size.
    pub fn same(kernel: TensorId, bias: TensorId, k: usize, dilation: usize) -> Self {
        ConvParams {
            kernel,
            bias,
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
        }
    }
}

/// Fully connected layer: `weight` is `[out_features, in_features]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: TensorId,
    pub bias: TensorId,
}

/// Convolutional GRU gates. Each convolution takes the channel-concatenated
/// `[state, input]` (or `[r⊙state, input]` for the candidate) and emits the
/// state's channel count, preserving spatial size.
#[derive(Debug, Clone, Copy)]
pub struct ConvGruParams {
    pub reset: ConvParams,
    pub update: ConvParams,
    pub candidate: ConvParams,
}

pub(crate) enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Sum(TensorId),
    Mean(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    DynamicConv {
        input: TensorId,
        kernel: TensorId,
    },
    BilinearResize(TensorId),
    AvgPoolGrid {
        input: TensorId,
        bins: usize,
    },
    MaxPool2x2 {
        input: TensorId,
        argmax: Vec<usize>,
    },
    ConcatChannels(Vec<TensorId>),
    SpatialMean(TensorId),
    Linear {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    Reshape(TensorId),
    MulBroadcastMap {
        map: TensorId,
        x: TensorId,
    },
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected a [B,C,H,W] tensor, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Valid output range so that `t·stride + offset` stays inside `[0, len)`.
fn valid_range(out_len: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let s = stride as isize;
    let div_ceil = |a: isize, b: isize| a.div_euclid(b) + if a.rem_euclid(b) != 0 { 1 } else { 0 };
    let lo = div_ceil(-offset, s).max(0) as usize;
    let hi = div_ceil(len as isize - offset, s).clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

/// Corner-aligned source position for output index `t` when resizing an
/// axis of length `n` to length `m`: `t·(n−1)/(m−1)`, the center for `m == 1`.
fn resize_position(t: usize, n: usize, m: usize) -> (usize, usize, f64) {
    let p = if m == 1 {
        (n - 1) as f64 / 2.0
    } else {
        t as f64 * (n - 1) as f64 / (m - 1) as f64
    };
    let x0 = (p.floor() as usize).min(n - 1);
    let x1 = (x0 + 1).min(n - 1);
    (x0, x1, p - x0 as f64)
}

/// Equal-or-near-equal pooling window along one axis.
fn pool_window(bin: usize, bins: usize, len: usize) -> (usize, usize) {
    (bin * len / bins, (bin + 1) * len / bins)
}

impl Tape {
    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<()> {
        let sa = self.shape(a)?.to_vec();
        let sb = self.shape(b)?;
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{name}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)?
            .data()
            .iter()
            .zip(self.value(b)?.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a)?, data)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)?
            .data()
            .iter()
            .zip(self.value(b)?.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a)?, data)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)?
            .data()
            .iter()
            .zip(self.value(b)?.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a)?, data)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    /// Multiply by an untracked constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a)?.data().iter().map(|x| c * x).collect();
        let value = Tensor::new(self.shape(a)?, data)?;
        let tracked = self.any_tracked(&[a]);
        Ok(self.push(value, Op::Scale(a, c), tracked))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let total = self.value(a)?.sum();
        let tracked = self.any_tracked(&[a]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(a), tracked))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.value(a)?;
        let m = v.sum() / v.numel() as f64;
        let tracked = self.any_tracked(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), tracked))
    }

    /// Elementwise logistic sigmoid, `1/(1+exp(−x))`, always in `(0,1)`.
    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self
            .value(a)?
            .data()
            .iter()
            .map(|&x| sigmoid_scalar(x))
            .collect();
        let value = Tensor::new(self.shape(a)?, data)?;
        let tracked = self.any_tracked(&[a]);
        Ok(self.push(value, Op::Sigmoid(a), tracked))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a)?.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(self.shape(a)?, data)?;
        let tracked = self.any_tracked(&[a]);
        Ok(self.push(value, Op::Tanh(a), tracked))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.value(a)?.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(self.shape(a)?, data)?;
        let tracked = self.any_tracked(&[a]);
        Ok(self.push(value, Op::Relu(a), tracked))
    }

    /// 2D cross-correlation with dilation; bias added per output channel.
    #[allow(clippy::needless_range_loop)]
    pub fn conv2d(&mut self, input: TensorId, params: &ConvParams) -> Result<TensorId> {
        let (b, cin, h, w) = dims4(self.shape(input)?, "conv2d input")?;
        let kshape = self.shape(params.kernel)?.to_vec();
        if kshape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel must be [Cout,Cin,kh,kw], got {kshape:?}"
            )));
        }
        let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel size must be odd, got {kh}x{kw}"
            )));
        }
        if self.shape(params.bias)? != [cout] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias must be [{cout}], got {:?}",
                self.shape(params.bias)?
            )));
        }
        if params.stride == 0 || params.dilation == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride and dilation must be positive".into(),
            ));
        }
        let (s, p, d) = (params.stride, params.padding, params.dilation);
        let span_h = d * (kh - 1) + 1;
        let span_w = d * (kw - 1) + 1;
        if h + 2 * p < span_h || w + 2 * p < span_w {
            return Err(Error::InvalidArgument(format!(
                "conv2d output would be empty: input {h}x{w}, padding {p}, kernel span {span_h}x{span_w}"
            )));
        }
        let oh = (h + 2 * p - span_h) / s + 1;
        let ow = (w + 2 * p - span_w) / s + 1;

        let kernel = self.value(params.kernel)?.data();
        let bias = self.value(params.bias)?.data();
        let x = self.value(input)?.data();
        let mut out = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for o in 0..cout {
                let plane = &mut out[(bi * cout + o) * oh * ow..][..oh * ow];
                plane.fill(bias[o]);
                for c in 0..cin {
                    let xin = &x[(bi * cin + c) * h * w..][..h * w];
                    for ki in 0..kh {
                        let off_y = (ki * d) as isize - p as isize;
                        let (y_lo, y_hi) = valid_range(oh, s, off_y, h);
                        for kj in 0..kw {
                            let wgt = kernel[((o * cin + c) * kh + ki) * kw + kj];
                            let off_x = (kj * d) as isize - p as isize;
                            let (x_lo, x_hi) = valid_range(ow, s, off_x, w);
                            for y in y_lo..y_hi {
                                let iy = (y * s) as isize + off_y;
                                let row = &xin[iy as usize * w..][..w];
                                let orow = &mut plane[y * ow..][..ow];
                                for ox in x_lo..x_hi {
                                    let ix = ((ox * s) as isize + off_x) as usize;
                                    orow[ox] += wgt * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, cout, oh, ow], out)?;
        let tracked = self.any_tracked(&[input, params.kernel, params.bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel: params.kernel,
                bias: params.bias,
                stride: s,
                padding: p,
                dilation: d,
            },
            tracked,
        ))
    }

    /// Per-sample 1×1 convolution: each batch element is mixed by its own
    /// `[Cout,Cin]` kernel. Gradients flow to both the input and the kernel.
    /// An identity kernel reproduces the input bit for bit.
    pub fn dynamic_conv(&mut self, input: TensorId, kernel: TensorId) -> Result<TensorId> {
        let (b, cin, h, w) = dims4(self.shape(input)?, "dynamic_conv input")?;
        let kshape = self.shape(kernel)?.to_vec();
        if kshape.len() != 5 || kshape[3] != 1 || kshape[4] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "dynamic_conv kernel must be [B,Cout,Cin,1,1], got {kshape:?}"
            )));
        }
        if kshape[0] != b {
            return Err(Error::ShapeMismatch(format!(
                "dynamic_conv: input batch {b} vs kernel batch {}",
                kshape[0]
            )));
        }
        if kshape[2] != cin {
            return Err(Error::ShapeMismatch(format!(
                "dynamic_conv: input has {cin} channels, kernel expects {}",
                kshape[2]
            )));
        }
        let cout = kshape[1];
        let x = self.value(input)?.data();
        let k = self.value(kernel)?.data();
        let mut out = vec![0.0; b * cout * h * w];
        let hw = h * w;
        for bi in 0..b {
            for o in 0..cout {
                let plane = &mut out[(bi * cout + o) * hw..][..hw];
                // First contributing channel assigns rather than adds, so an
                // identity kernel is a bitwise identity.
                let mut first = true;
                for c in 0..cin {
                    let wgt = k[(bi * cout + o) * cin + c];
                    if wgt == 0.0 {
                        continue;
                    }
                    let xin = &x[(bi * cin + c) * hw..][..hw];
                    if first {
                        for (pv, xv) in plane.iter_mut().zip(xin) {
                            *pv = wgt * xv;
                        }
                        first = false;
                    } else {
                        for (pv, xv) in plane.iter_mut().zip(xin) {
                            *pv += wgt * xv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, cout, h, w], out)?;
        let tracked = self.any_tracked(&[input, kernel]);
        Ok(self.push(value, Op::DynamicConv { input, kernel }, tracked))
    }

    /// Bilinear interpolation with corner-aligned sampling. Resizing to the
    /// source size is an exact identity.
    pub fn bilinear_resize(
        &mut self,
        input: TensorId,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId> {
        let (b, c, h, w) = dims4(self.shape(input)?, "bilinear_resize input")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(
                "bilinear_resize target size must be positive".into(),
            ));
        }
        let x = self.value(input)?.data();
        let mut out = vec![0.0; b * c * out_h * out_w];
        for bc in 0..b * c {
            let xin = &x[bc * h * w..][..h * w];
            let plane = &mut out[bc * out_h * out_w..][..out_h * out_w];
            for oy in 0..out_h {
                let (y0, y1, fy) = resize_position(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1, fx) = resize_position(ox, w, out_w);
                    // lerp as v0 + f·(v1−v0): exact on constant maps.
                    let v00 = xin[y0 * w + x0];
                    let top = if fx == 0.0 {
                        v00
                    } else {
                        v00 + fx * (xin[y0 * w + x1] - v00)
                    };
                    let v = if fy == 0.0 {
                        top
                    } else {
                        let v10 = xin[y1 * w + x0];
                        let bot = if fx == 0.0 {
                            v10
                        } else {
                            v10 + fx * (xin[y1 * w + x1] - v10)
                        };
                        top + fy * (bot - top)
                    };
                    plane[oy * out_w + ox] = v;
                }
            }
        }
        let value = Tensor::new(&[b, c, out_h, out_w], out)?;
        let tracked = self.any_tracked(&[input]);
        Ok(self.push(value, Op::BilinearResize(input), tracked))
    }

    /// Average-pool onto a `bins×bins` grid.
    pub fn avg_pool_grid(&mut self, input: TensorId, bins: usize) -> Result<TensorId> {
        let (b, c, h, w) = dims4(self.shape(input)?, "avg_pool_grid input")?;
        if bins == 0 || bins > h.min(w) {
            return Err(Error::InvalidArgument(format!(
                "pooling bins must be in 1..={}, got {bins}",
                h.min(w)
            )));
        }
        let x = self.value(input)?.data();
        let mut out = vec![0.0; b * c * bins * bins];
        for bc in 0..b * c {
            let xin = &x[bc * h * w..][..h * w];
            let plane = &mut out[bc * bins * bins..][..bins * bins];
            for br in 0..bins {
                let (r0, r1) = pool_window(br, bins, h);
                for bcx in 0..bins {
                    let (c0, c1) = pool_window(bcx, bins, w);
                    if r1 - r0 == 1 && c1 - c0 == 1 {
                        plane[br * bins + bcx] = xin[r0 * w + c0];
                        continue;
                    }
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            acc += xin[r * w + cc];
                        }
                    }
                    plane[br * bins + bcx] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let value = Tensor::new(&[b, c, bins, bins], out)?;
        let tracked = self.any_tracked(&[input]);
        Ok(self.push(value, Op::AvgPoolGrid { input, bins }, tracked))
    }

    /// Average-pool onto a `bins×bins` grid, then resize back to the source
    /// size. `bins == H == W` is a bitwise identity.
    pub fn pyramid_pool(&mut self, input: TensorId, bins: usize) -> Result<TensorId> {
        let (_, _, h, w) = dims4(self.shape(input)?, "pyramid_pool input")?;
        if bins == 0 || bins > h.min(w) {
            return Err(Error::InvalidArgument(format!(
                "pyramid_pool bins must be in 1..={}, got {bins}",
                h.min(w)
            )));
        }
        let pooled = self.avg_pool_grid(input, bins)?;
        self.bilinear_resize(pooled, h, w)
    }

    /// 2×2 max pooling with stride 2. Requires even spatial dimensions.
    pub fn max_pool2(&mut self, input: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = dims4(self.shape(input)?, "max_pool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "max_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input)?.data();
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0usize; b * c * oh * ow];
        for bc in 0..b * c {
            let base = bc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    // First strictly-greater wins: deterministic ties.
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    let o = bc * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        let tracked = self.any_tracked(&[input]);
        Ok(self.push(value, Op::MaxPool2x2 { input, argmax }, tracked))
    }

    /// Channel-axis concatenation in argument order.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat_channels: no inputs".into()));
        }
        let (b, _, h, w) = dims4(self.shape(inputs[0])?, "concat_channels input")?;
        let mut total_c = 0;
        for &id in inputs {
            let (ib, ic, ih, iw) = dims4(self.shape(id)?, "concat_channels input")?;
            if (ib, ih, iw) != (b, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels: [{ib},{ic},{ih},{iw}] does not match batch/spatial [{b},_,{h},{w}]"
                )));
            }
            total_c += ic;
        }
        let mut out = vec![0.0; b * total_c * h * w];
        let hw = h * w;
        for bi in 0..b {
            let mut offset = 0;
            for &id in inputs {
                let v = self.value(id)?;
                let ic = v.shape()[1];
                let src = &v.data()[bi * ic * hw..][..ic * hw];
                out[(bi * total_c + offset) * hw..][..ic * hw].copy_from_slice(src);
                offset += ic;
            }
        }
        let value = Tensor::new(&[b, total_c, h, w], out)?;
        let tracked = self.any_tracked(inputs);
        Ok(self.push(value, Op::ConcatChannels(inputs.to_vec()), tracked))
    }

    /// Global average over the spatial axes: `[B,C,H,W] → [B,C]`.
    pub fn spatial_mean(&mut self, input: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = dims4(self.shape(input)?, "spatial_mean input")?;
        let x = self.value(input)?.data();
        let hw = (h * w) as f64;
        let mut out = vec![0.0; b * c];
        for (bc, slot) in out.iter_mut().enumerate() {
            *slot = x[bc * h * w..][..h * w].iter().sum::<f64>() / hw;
        }
        let value = Tensor::new(&[b, c], out)?;
        let tracked = self.any_tracked(&[input]);
        Ok(self.push(value, Op::SpatialMean(input), tracked))
    }

    /// Fully connected layer over `[B, in] → [B, out]`.
    pub fn linear(&mut self, input: TensorId, params: &LinearParams) -> Result<TensorId> {
        let ishape = self.shape(input)?.to_vec();
        if ishape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "linear input must be [B,F], got {ishape:?}"
            )));
        }
        let (b, f) = (ishape[0], ishape[1]);
        let wshape = self.shape(params.weight)?.to_vec();
        if wshape.len() != 2 || wshape[1] != f {
            return Err(Error::ShapeMismatch(format!(
                "linear weight must be [O,{f}], got {wshape:?}"
            )));
        }
        let o = wshape[0];
        if self.shape(params.bias)? != [o] {
            return Err(Error::ShapeMismatch(format!(
                "linear bias must be [{o}], got {:?}",
                self.shape(params.bias)?
            )));
        }
        let x = self.value(input)?.data();
        let wt = self.value(params.weight)?.data();
        let bias = self.value(params.bias)?.data();
        let mut out = vec![0.0; b * o];
        for bi in 0..b {
            let xin = &x[bi * f..][..f];
            for oi in 0..o {
                let row = &wt[oi * f..][..f];
                let mut acc = bias[oi];
                for (xv, wv) in xin.iter().zip(row) {
                    acc += xv * wv;
                }
                out[bi * o + oi] = acc;
            }
        }
        let value = Tensor::new(&[b, o], out)?;
        let tracked = self.any_tracked(&[input, params.weight, params.bias]);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight: params.weight,
                bias: params.bias,
            },
            tracked,
        ))
    }

    /// Reinterpret the same row-major data under a new shape.
    pub fn reshape(&mut self, input: TensorId, shape: &[usize]) -> Result<TensorId> {
        let v = self.value(input)?;
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {:?} has {} elements, target {shape:?} has {numel}",
                v.shape(),
                v.numel()
            )));
        }
        let value = Tensor::new(shape, v.data().to_vec())?;
        let tracked = self.any_tracked(&[input]);
        Ok(self.push(value, Op::Reshape(input), tracked))
    }

    /// Multiply a one-channel spatial map `[B,1,H,W]` into every channel of
    /// `[B,C,H,W]` — the pixelwise link-weight gating.
    pub fn mul_broadcast_map(&mut self, map: TensorId, x: TensorId) -> Result<TensorId> {
        let (mb, mc, mh, mw) = dims4(self.shape(map)?, "mul_broadcast_map map")?;
        let (b, c, h, w) = dims4(self.shape(x)?, "mul_broadcast_map input")?;
        if mc != 1 || (mb, mh, mw) != (b, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mul_broadcast_map: map [{mb},{mc},{mh},{mw}] vs input [{b},{c},{h},{w}]"
            )));
        }
        let m = self.value(map)?.data();
        let xv = self.value(x)?.data();
        let hw = h * w;
        let mut out = vec![0.0; b * c * hw];
        for bi in 0..b {
            let mplane = &m[bi * hw..][..hw];
            for ci in 0..c {
                let xplane = &xv[(bi * c + ci) * hw..][..hw];
                let oplane = &mut out[(bi * c + ci) * hw..][..hw];
                for ((o, xe), me) in oplane.iter_mut().zip(xplane).zip(mplane) {
                    *o = xe * me;
                }
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        let tracked = self.any_tracked(&[map, x]);
        Ok(self.push(value, Op::MulBroadcastMap { map, x }, tracked))
    }

    /// Mean over all elements of `(pred − target)²`. The target must not be
    /// gradient-tracked.
    pub fn mse_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        self.binary_same_shape(pred, target, "mse_loss")?;
        if self.is_tracked(target)? {
            return Err(Error::InvalidArgument(
                "mse_loss target must not be gradient-tracked".into(),
            ));
        }
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        self.mean(sq)
    }

    /// One convolutional GRU update:
    /// `z = σ(conv_z[state,input])`, `r = σ(conv_r[state,input])`,
    /// `h̃ = tanh(conv_h[r⊙state, input])`, result `(1−z)⊙state + z⊙h̃`.
    pub fn conv_gru_step(
        &mut self,
        state: TensorId,
        input: TensorId,
        params: &ConvGruParams,
    ) -> Result<TensorId> {
        self.binary_same_shape(state, input, "conv_gru_step")?;
        let both = self.concat_channels(&[state, input])?;
        let z_pre = self.conv2d(both, &params.update)?;
        let z = self.sigmoid(z_pre)?;
        let r_pre = self.conv2d(both, &params.reset)?;
        let r = self.sigmoid(r_pre)?;
        let gated = self.mul(r, state)?;
        let cand_in = self.concat_channels(&[gated, input])?;
        let h_pre = self.conv2d(cand_in, &params.candidate)?;
        let h_new = self.tanh(h_pre)?;
        // (1−z)⊙state + z⊙h̃ == state − z⊙state + z⊙h̃
        let zs = self.mul(z, state)?;
        let keep = self.sub(state, zs)?;
        let zh = self.mul(z, h_new)?;
        self.add(keep, zh)
    }
}

impl Op {
    pub(crate) fn accumulate(
        &self,
        tape: &Tape,
        out_value: &Tensor,
        upstream: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                tape.accumulate_grad(grads, *a, upstream);
                tape.accumulate_grad(grads, *b, upstream);
            }
            Op::Sub(a, b) => {
                tape.accumulate_grad(grads, *a, upstream);
                if tape.is_tracked(*b).unwrap_or(false) {
                    let neg: Vec<f64> = upstream.iter().map(|g| -g).collect();
                    tape.accumulate_grad(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if tape.is_tracked(*a).unwrap_or(false) {
                    let bv = tape.nodes[b.0].value.data();
                    let da: Vec<f64> = upstream.iter().zip(bv).map(|(g, v)| g * v).collect();
                    tape.accumulate_grad(grads, *a, &da);
                }
                if tape.is_tracked(*b).unwrap_or(false) {
                    let av = tape.nodes[a.0].value.data();
                    let db: Vec<f64> = upstream.iter().zip(av).map(|(g, v)| g * v).collect();
                    tape.accumulate_grad(grads, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = upstream.iter().map(|g| c * g).collect();
                tape.accumulate_grad(grads, *a, &da);
            }
            Op::Sum(a) => {
                let n = tape.nodes[a.0].value.numel();
                tape.accumulate_grad(grads, *a, &vec![upstream[0]; n]);
            }
            Op::Mean(a) => {
                let n = tape.nodes[a.0].value.numel();
                tape.accumulate_grad(grads, *a, &vec![upstream[0] / n as f64; n]);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = upstream
                    .iter()
                    .zip(out_value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                tape.accumulate_grad(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = upstream
                    .iter()
                    .zip(out_value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                tape.accumulate_grad(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = upstream
                    .iter()
                    .zip(out_value.data())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                tape.accumulate_grad(grads, *a, &da);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
                dilation,
            } => {
                conv2d_backward(
                    tape, out_value, upstream, grads, *input, *kernel, *bias, *stride, *padding,
                    *dilation,
                );
            }
            Op::DynamicConv { input, kernel } => {
                dynamic_conv_backward(tape, out_value, upstream, grads, *input, *kernel);
            }
            Op::BilinearResize(input) => {
                let ishape = tape.nodes[input.0].value.shape();
                let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let oshape = out_value.shape();
                let (oh, ow) = (oshape[2], oshape[3]);
                let mut din = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    let up = &upstream[bc * oh * ow..][..oh * ow];
                    let dplane = &mut din[bc * h * w..][..h * w];
                    for oy in 0..oh {
                        let (y0, y1, fy) = resize_position(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1, fx) = resize_position(ox, w, ow);
                            let g = up[oy * ow + ox];
                            dplane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
                            if fx != 0.0 {
                                dplane[y0 * w + x1] += (1.0 - fy) * fx * g;
                            }
                            if fy != 0.0 {
                                dplane[y1 * w + x0] += fy * (1.0 - fx) * g;
                                if fx != 0.0 {
                                    dplane[y1 * w + x1] += fy * fx * g;
                                }
                            }
                        }
                    }
                }
                tape.accumulate_grad(grads, *input, &din);
            }
            Op::AvgPoolGrid { input, bins } => {
                let ishape = tape.nodes[input.0].value.shape();
                let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let bins = *bins;
                let mut din = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    let up = &upstream[bc * bins * bins..][..bins * bins];
                    let dplane = &mut din[bc * h * w..][..h * w];
                    for br in 0..bins {
                        let (r0, r1) = pool_window(br, bins, h);
                        for bcx in 0..bins {
                            let (c0, c1) = pool_window(bcx, bins, w);
                            let g = up[br * bins + bcx] / ((r1 - r0) * (c1 - c0)) as f64;
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    dplane[r * w + cc] += g;
                                }
                            }
                        }
                    }
                }
                tape.accumulate_grad(grads, *input, &din);
            }
            Op::MaxPool2x2 { input, argmax } => {
                let n = tape.nodes[input.0].value.numel();
                let mut din = vec![0.0; n];
                for (o, &src) in argmax.iter().enumerate() {
                    din[src] += upstream[o];
                }
                tape.accumulate_grad(grads, *input, &din);
            }
            Op::ConcatChannels(inputs) => {
                let oshape = out_value.shape();
                let (b, total_c, h, w) = (oshape[0], oshape[1], oshape[2], oshape[3]);
                let hw = h * w;
                let mut offset = 0;
                for &id in inputs {
                    let ic = tape.nodes[id.0].value.shape()[1];
                    if tape.is_tracked(id).unwrap_or(false) {
                        let mut din = vec![0.0; b * ic * hw];
                        for bi in 0..b {
                            let src = &upstream[(bi * total_c + offset) * hw..][..ic * hw];
                            din[bi * ic * hw..][..ic * hw].copy_from_slice(src);
                        }
                        tape.accumulate_grad(grads, id, &din);
                    }
                    offset += ic;
                }
            }
            Op::SpatialMean(input) => {
                let ishape = tape.nodes[input.0].value.shape();
                let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let hw = h * w;
                let mut din = vec![0.0; b * c * hw];
                for bc in 0..b * c {
                    let g = upstream[bc] / hw as f64;
                    din[bc * hw..][..hw].fill(g);
                }
                tape.accumulate_grad(grads, *input, &din);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = tape.nodes[input.0].value.data();
                let wt = tape.nodes[weight.0].value.data();
                let (b, f) = {
                    let s = tape.nodes[input.0].value.shape();
                    (s[0], s[1])
                };
                let o = tape.nodes[weight.0].value.shape()[0];
                if tape.is_tracked(*input).unwrap_or(false) {
                    let mut din = vec![0.0; b * f];
                    for bi in 0..b {
                        for oi in 0..o {
                            let g = upstream[bi * o + oi];
                            let row = &wt[oi * f..][..f];
                            let dst = &mut din[bi * f..][..f];
                            for (d, wv) in dst.iter_mut().zip(row) {
                                *d += g * wv;
                            }
                        }
                    }
                    tape.accumulate_grad(grads, *input, &din);
                }
                if tape.is_tracked(*weight).unwrap_or(false) {
                    let mut dw = vec![0.0; o * f];
                    for bi in 0..b {
                        let xin = &x[bi * f..][..f];
                        for oi in 0..o {
                            let g = upstream[bi * o + oi];
                            let dst = &mut dw[oi * f..][..f];
                            for (d, xv) in dst.iter_mut().zip(xin) {
                                *d += g * xv;
                            }
                        }
                    }
                    tape.accumulate_grad(grads, *weight, &dw);
                }
                if tape.is_tracked(*bias).unwrap_or(false) {
                    let mut db = vec![0.0; o];
                    for bi in 0..b {
                        for oi in 0..o {
                            db[oi] += upstream[bi * o + oi];
                        }
                    }
                    tape.accumulate_grad(grads, *bias, &db);
                }
            }
            Op::Reshape(input) => {
                tape.accumulate_grad(grads, *input, upstream);
            }
            Op::MulBroadcastMap { map, x } => {
                let oshape = out_value.shape();
                let (b, c, h, w) = (oshape[0], oshape[1], oshape[2], oshape[3]);
                let hw = h * w;
                if tape.is_tracked(*map).unwrap_or(false) {
                    let xv = tape.nodes[x.0].value.data();
                    let mut dmap = vec![0.0; b * hw];
                    for bi in 0..b {
                        let dst = &mut dmap[bi * hw..][..hw];
                        for ci in 0..c {
                            let up = &upstream[(bi * c + ci) * hw..][..hw];
                            let xplane = &xv[(bi * c + ci) * hw..][..hw];
                            for ((d, g), xe) in dst.iter_mut().zip(up).zip(xplane) {
                                *d += g * xe;
                            }
                        }
                    }
                    tape.accumulate_grad(grads, *map, &dmap);
                }
                if tape.is_tracked(*x).unwrap_or(false) {
                    let mv = tape.nodes[map.0].value.data();
                    let mut dx = vec![0.0; b * c * hw];
                    for bi in 0..b {
                        let mplane = &mv[bi * hw..][..hw];
                        for ci in 0..c {
                            let up = &upstream[(bi * c + ci) * hw..][..hw];
                            let dst = &mut dx[(bi * c + ci) * hw..][..hw];
                            for ((d, g), me) in dst.iter_mut().zip(up).zip(mplane) {
                                *d = g * me;
                            }
                        }
                    }
                    tape.accumulate_grad(grads, *x, &dx);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn conv2d_backward(
    tape: &Tape,
    out_value: &Tensor,
    upstream: &[f64],
    grads: &mut [Option<Vec<f64>>],
    input: TensorId,
    kernel: TensorId,
    bias: TensorId,
    stride: usize,
    padding: usize,
    dilation: usize,
) {
    let ishape = tape.nodes[input.0].value.shape();
    let (b, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let kshape = tape.nodes[kernel.0].value.shape();
    let (cout, kh, kw) = (kshape[0], kshape[2], kshape[3]);
    let oshape = out_value.shape();
    let (oh, ow) = (oshape[2], oshape[3]);
    let x = tape.nodes[input.0].value.data();
    let k = tape.nodes[kernel.0].value.data();
    let (s, p, d) = (stride, padding, dilation);

    let want_input = tape.is_tracked(input).unwrap_or(false);
    let want_kernel = tape.is_tracked(kernel).unwrap_or(false);

    let mut din = if want_input {
        vec![0.0; b * cin * h * w]
    } else {
        Vec::new()
    };
    let mut dk = if want_kernel {
        vec![0.0; cout * cin * kh * kw]
    } else {
        Vec::new()
    };

    if want_input || want_kernel {
        for bi in 0..b {
            for o in 0..cout {
                let up = &upstream[(bi * cout + o) * oh * ow..][..oh * ow];
                for c in 0..cin {
                    let xin = &x[(bi * cin + c) * h * w..][..h * w];
                    for ki in 0..kh {
                        let off_y = (ki * d) as isize - p as isize;
                        let (y_lo, y_hi) = valid_range(oh, s, off_y, h);
                        for kj in 0..kw {
                            let kidx = ((o * cin + c) * kh + ki) * kw + kj;
                            let wgt = k[kidx];
                            let off_x = (kj * d) as isize - p as isize;
                            let (x_lo, x_hi) = valid_range(ow, s, off_x, w);
                            let mut kacc = 0.0;
                            for y in y_lo..y_hi {
                                let iy = ((y * s) as isize + off_y) as usize;
                                let urow = &up[y * ow..][..ow];
                                if want_input {
                                    let drow = &mut din[(bi * cin + c) * h * w + iy * w..][..w];
                                    for ox in x_lo..x_hi {
                                        let ix = ((ox * s) as isize + off_x) as usize;
                                        let g = urow[ox];
                                        drow[ix] += g * wgt;
                                        kacc += g * xin[iy * w + ix];
                                    }
                                } else {
                                    for ox in x_lo..x_hi {
                                        let ix = ((ox * s) as isize + off_x) as usize;
                                        kacc += urow[ox] * xin[iy * w + ix];
                                    }
                                }
                            }
                            if want_kernel {
                                dk[kidx] += kacc;
                            }
                        }
                    }
                }
            }
        }
    }
    if want_input {
        tape.accumulate_grad(grads, input, &din);
    }
    if want_kernel {
        tape.accumulate_grad(grads, kernel, &dk);
    }
    if tape.is_tracked(bias).unwrap_or(false) {
        let mut db = vec![0.0; cout];
        for bi in 0..b {
            for o in 0..cout {
                db[o] += upstream[(bi * cout + o) * oh * ow..][..oh * ow]
                    .iter()
                    .sum::<f64>();
            }
        }
        tape.accumulate_grad(grads, bias, &db);
    }
}

fn dynamic_conv_backward(
    tape: &Tape,
    out_value: &Tensor,
    upstream: &[f64],
    grads: &mut [Option<Vec<f64>>],
    input: TensorId,
    kernel: TensorId,
) {
    let ishape = tape.nodes[input.0].value.shape();
    let (b, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let cout = out_value.shape()[1];
    let hw = h * w;
    let x = tape.nodes[input.0].value.data();
    let k = tape.nodes[kernel.0].value.data();

    if tape.is_tracked(input).unwrap_or(false) {
        let mut din = vec![0.0; b * cin * hw];
        for bi in 0..b {
            for o in 0..cout {
                let up = &upstream[(bi * cout + o) * hw..][..hw];
                for c in 0..cin {
                    let wgt = k[(bi * cout + o) * cin + c];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dst = &mut din[(bi * cin + c) * hw..][..hw];
                    for (d, g) in dst.iter_mut().zip(up) {
                        *d += g * wgt;
                    }
                }
            }
        }
        tape.accumulate_grad(grads, input, &din);
    }
    if tape.is_tracked(kernel).unwrap_or(false) {
        let mut dk = vec![0.0; b * cout * cin];
        for bi in 0..b {
            for o in 0..cout {
                let up = &upstream[(bi * cout + o) * hw..][..hw];
                for c in 0..cin {
                    let xin = &x[(bi * cin + c) * hw..][..hw];
                    let mut acc = 0.0;
                    for (g, xv) in up.iter().zip(xin) {
                        acc += g * xv;
                    }
                    dk[(bi * cout + o) * cin + c] = acc;
                }
            }
        }
        tape.accumulate_grad(grads, kernel, &dk);
    }
}
