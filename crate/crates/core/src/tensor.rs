//! Dense row-major `f32` tensors and the handful of kernels the toy detector
//! needs: linear, 2D convolution (NCHW), ReLU, nearest 2x upsampling and the
//! pillar scatter. Each forward kernel has a matching backward used by QAT.
//!
//! Accumulation is always in `f32`, including inside fake-quantized layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?} with data")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::shape(op, format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::shape(op, format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride, stride],
            padding: [padding, padding],
        }
    }

    pub fn output_extent(&self, input: [usize; 2], kernel: [usize; 2]) -> Result<[usize; 2]> {
        let mut out = [0; 2];
        for axis in 0..2 {
            if self.stride[axis] == 0 {
                return Err(Error::invalid("convolution stride must be positive"));
            }
            let padded = input[axis] + 2 * self.padding[axis];
            if padded < kernel[axis] {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "kernel extent {} exceeds padded input extent {} on axis {axis}",
                        kernel[axis], padded
                    ),
                ));
            }
            out[axis] = (padded - kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, params: ConvParams) -> Result<Self> {
        let [n, c, h, w] = input.dims4("conv2d")?;
        let [f, wc, kh, kw] = weight.dims4("conv2d")?;
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but weight expects {wc} (weight shape {:?})", weight.shape()),
            ));
        }
        if let Some(bias) = bias {
            if bias.shape() != [f] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {f} filters", bias.shape()),
                ));
            }
        }
        let [oh, ow] = params.output_extent([h, w], [kh, kw])?;
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            oh,
            ow,
        })
    }

    /// Output columns `ox` for which `ox * stride + k - pad` lands inside `[0, extent)`.
    fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        // smallest ox with ox*stride + k >= pad
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        // largest ox with ox*stride + k - pad <= extent - 1
        let hi = if extent + pad > k {
            ((extent + pad - k - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Cross-correlation over NCHW input with FCHW weights.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, params: ConvParams) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weight, Some(bias), params)?;
    let [sy, sx] = params.stride;
    let [py, px] = params.padding;
    let mut out = vec![0.0f32; g.n * g.f * g.oh * g.ow];
    let x = input.data();
    let wt = weight.data();
    for n in 0..g.n {
        for f in 0..g.f {
            let plane = &mut out[(n * g.f + f) * g.oh * g.ow..][..g.oh * g.ow];
            plane.fill(bias.data()[f]);
            for c in 0..g.c {
                let xin = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = ConvGeometry::valid_range(g.oh, g.h, ky, sy, py);
                    for kx in 0..g.kw {
                        let wv = wt[((f * g.c + c) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = ConvGeometry::valid_range(g.ow, g.w, kx, sx, px);
                        for oy in oy0..oy1 {
                            let iy = oy * sy + ky - py;
                            let row = &xin[iy * g.w..][..g.w];
                            let orow = &mut plane[oy * g.ow..][..g.ow];
                            if sx == 1 {
                                let off = kx as isize - px as isize;
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * row[(ox as isize + off) as usize];
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * row[ox * sx + kx - px];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.f, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    params: ConvParams,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(input, weight, None, params)?;
    if upstream.shape() != [g.n, g.f, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream {:?} vs output [{}, {}, {}, {}]", upstream.shape(), g.n, g.f, g.oh, g.ow),
        ));
    }
    let [sy, sx] = params.stride;
    let [py, px] = params.padding;
    let x = input.data();
    let wt = weight.data();
    let dy = upstream.data();
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; wt.len()];
    let mut db = vec![0.0f32; g.f];
    for n in 0..g.n {
        for f in 0..g.f {
            let dplane = &dy[(n * g.f + f) * g.oh * g.ow..][..g.oh * g.ow];
            db[f] += dplane.iter().sum::<f32>();
            for c in 0..g.c {
                let base = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy0, oy1) = ConvGeometry::valid_range(g.oh, g.h, ky, sy, py);
                    for kx in 0..g.kw {
                        let widx = ((f * g.c + c) * g.kh + ky) * g.kw + kx;
                        let wv = wt[widx];
                        let (ox0, ox1) = ConvGeometry::valid_range(g.ow, g.w, kx, sx, px);
                        let mut acc = 0.0f32;
                        for oy in oy0..oy1 {
                            let iy = oy * sy + ky - py;
                            let drow = &dplane[oy * g.ow..][..g.ow];
                            let xrow = &x[base + iy * g.w..][..g.w];
                            let dxrow = &mut dx[base + iy * g.w..][..g.w];
                            for ox in ox0..ox1 {
                                let ix = ox * sx + kx - px;
                                acc += xrow[ix] * drow[ox];
                                dxrow[ix] += wv * drow[ox];
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![g.f], db)?,
    ))
}

/// `input · weightᵀ + bias` for `input: [N, Din]`, `weight: [Dout, Din]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, din] = input.dims2("linear")?;
    let [dout, wdin] = weight.dims2("linear")?;
    if wdin != din {
        return Err(Error::shape(
            "linear",
            format!("input has {din} features but weight {:?} expects {wdin}", weight.shape()),
        ));
    }
    if bias.shape() != [dout] {
        return Err(Error::shape(
            "linear",
            format!("bias shape {:?} does not match {dout} outputs", bias.shape()),
        ));
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * dout);
    for row in x.chunks_exact(din.max(1)).take(n) {
        for (o, wrow) in w.chunks_exact(din.max(1)).enumerate().take(dout) {
            let dot: f32 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
            out.push(dot + bias.data()[o]);
        }
    }
    if din == 0 {
        out = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    }
    Tensor::new(vec![n, dout], out)
}

/// Gradients of [`linear`]: `(d_input, d_weight, d_bias)`.
pub fn linear_backward(input: &Tensor, weight: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, din] = input.dims2("linear_backward")?;
    let [dout, _] = weight.dims2("linear_backward")?;
    if upstream.shape() != [n, dout] {
        return Err(Error::shape(
            "linear_backward",
            format!("upstream {:?} vs output [{n}, {dout}]", upstream.shape()),
        ));
    }
    let x = input.data();
    let w = weight.data();
    let dy = upstream.data();
    let mut dx = vec![0.0f32; n * din];
    let mut dw = vec![0.0f32; dout * din];
    let mut db = vec![0.0f32; dout];
    for i in 0..n {
        let xrow = &x[i * din..][..din];
        let dxrow = &mut dx[i * din..][..din];
        for o in 0..dout {
            let g = dy[i * dout + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wrow = &w[o * din..][..din];
            let dwrow = &mut dw[o * din..][..din];
            for d in 0..din {
                dxrow[d] += g * wrow[d];
                dwrow[d] += g * xrow[d];
            }
        }
    }
    Ok((
        Tensor::new(vec![n, din], dx)?,
        Tensor::new(vec![dout, din], dw)?,
        Tensor::new(vec![dout], db)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Zeroes `upstream` where the forward ReLU output was not positive.
pub fn relu_backward(output: &Tensor, upstream: &Tensor) -> Tensor {
    Tensor {
        shape: upstream.shape.clone(),
        data: output
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Nearest-neighbour 2x upsampling of an NCHW tensor.
pub fn upsample2x(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("upsample2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample2x_backward(upstream: &Tensor) -> Result<Tensor> {
    let [n, c, oh, ow] = upstream.dims4("upsample2x_backward")?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::shape("upsample2x_backward", format!("odd extents {:?}", upstream.shape())));
    }
    let (h, w) = (oh / 2, ow / 2);
    let dy = upstream.data();
    let mut dx = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let src = &dy[plane * oh * ow..][..oh * ow];
        let dst = &mut dx[plane * h * w..][..h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

fn check_coords(coords: &[(usize, usize)], grid: (usize, usize)) -> Result<()> {
    let (h, w) = grid;
    let mut seen = vec![false; h * w];
    for (p, &(r, c)) in coords.iter().enumerate() {
        if r >= h || c >= w {
            return Err(Error::invalid(format!(
                "pillar {p} at ({r}, {c}) lies outside the {h}x{w} grid"
            )));
        }
        if std::mem::replace(&mut seen[r * w + c], true) {
            return Err(Error::invalid(format!("duplicate pillar coordinate ({r}, {c}) at pillar {p}")));
        }
    }
    Ok(())
}

/// Writes row `p` of `features: [P, C]` into cell `coords[p]` of a zeroed
/// `[1, C, H, W]` pseudo-image.
pub fn scatter_pillars(features: &Tensor, coords: &[(usize, usize)], grid: (usize, usize)) -> Result<Tensor> {
    let [p, c] = features.dims2("scatter_pillars")?;
    if p != coords.len() {
        return Err(Error::shape(
            "scatter_pillars",
            format!("{p} feature rows but {} coordinates", coords.len()),
        ));
    }
    check_coords(coords, grid)?;
    let (h, w) = grid;
    let mut out = vec![0.0f32; c * h * w];
    let f = features.data();
    for (i, &(r, col)) in coords.iter().enumerate() {
        for ch in 0..c {
            out[(ch * h + r) * w + col] = f[i * c + ch];
        }
    }
    Tensor::new(vec![1, c, h, w], out)
}

/// Gathers the pseudo-image gradient back to per-pillar rows.
pub fn scatter_pillars_backward(upstream: &Tensor, coords: &[(usize, usize)]) -> Result<Tensor> {
    let [_, c, h, w] = upstream.dims4("scatter_pillars_backward")?;
    let dy = upstream.data();
    let mut out = Vec::with_capacity(coords.len() * c);
    for &(r, col) in coords {
        for ch in 0..c {
            out.push(dy[(ch * h + r) * w + col]);
        }
    }
    Tensor::new(vec![coords.len(), c], out)
}
