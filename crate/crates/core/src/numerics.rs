//! Dense f32 tensors and the handful of image-processing primitives the rest
//! of the engine is built on: cross-correlation, pointwise activations,
//! corner-aligned bilinear resizing and min-max normalization.
//!
//! Everything here is a pure function of its inputs.

use crate::error::{Error, Result};

/// Row-major f32 tensor of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Shape(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 0.0)
    }

    /// # Panics
    ///
    /// If the rank is outside 1..=4.
    pub fn filled(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.len() <= 4,
            "tensor rank must be 1..=4"
        );
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Builds an `[h, w]` map from a function of `(row, col)`.
    pub fn from_fn_2d(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![h, w],
            data,
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [h, w] => Ok((h, w)),
            _ => Err(Error::Shape(format!(
                "expected a rank-2 map, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [k, h, w] => Ok((k, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a rank-3 stack, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::Shape(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Value at `(row, col)` of a rank-2 map. Panics when out of range.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    /// Value at `(k, row, col)` of a rank-3 stack. Panics when out of range.
    #[inline]
    pub fn at3(&self, k: usize, i: usize, j: usize) -> f32 {
        self.data[(k * self.shape[1] + i) * self.shape[2] + j]
    }

    #[inline]
    pub fn set3(&mut self, k: usize, i: usize, j: usize, v: f32) {
        let idx = (k * self.shape[1] + i) * self.shape[2] + j;
        self.data[idx] = v;
    }

    /// Channel `k` of a `[K, h, w]` stack as an `[h, w]` map.
    pub fn channel(&self, k: usize) -> Result<Tensor> {
        let (kk, h, w) = self.dims3()?;
        if k >= kk {
            return Err(Error::Shape(format!("channel {k} out of range for K={kk}")));
        }
        let plane = h * w;
        Ok(Tensor {
            shape: vec![h, w],
            data: self.data[k * plane..(k + 1) * plane].to_vec(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|x| x * s)
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

/// RGB image with values in `[0, 1]`, stored interleaved (HWC).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "image value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Quantizes to 8 bits per channel (round to nearest).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Sets a pixel, clamping each channel into `[0, 1]`.
    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let o = (row * self.width + col) * 3;
        for (c, v) in rgb.iter().enumerate() {
            self.data[o + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Planar `[3, H, W]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut data = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = self.data[p * 3 + c];
            }
        }
        Tensor {
            shape: vec![3, self.height, self.width],
            data,
        }
    }

    /// Scalar mean over all pixels and channels.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width) as f64;
        sums.map(|s| s / n)
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative evaluated at the pre-activation value. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

fn conv_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Shape("conv stride must be >= 1".into()));
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if kh > ph || kw > pw {
        return Err(Error::Shape(format!(
            "{kh}x{kw} kernel does not fit padded {ph}x{pw} input"
        )));
    }
    if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
        return Err(Error::Shape(format!(
            "stride {stride} does not tile padded {ph}x{pw} input with {kh}x{kw} kernel"
        )));
    }
    Ok(((ph - kh) / stride + 1, (pw - kw) / stride + 1))
}

fn check_conv_shapes(
    input: (usize, usize, usize),
    weights: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize)> {
    let (cout, cin, kh, kw) = weights.dims4()?;
    if cin != input.0 {
        return Err(Error::Shape(format!(
            "weights expect {cin} input channels, input has {}",
            input.0
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    Ok((cout, kh, kw))
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[Cin, h, w]`, `weights` is `[Cout, Cin, kh, kw]`, `bias` is
/// `[Cout]`. The padded extent minus the kernel must be a multiple of
/// `stride`.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (cin, h, w) = input.dims3()?;
    let (cout, kh, kw) = check_conv_shapes((cin, h, w), weights, bias)?;
    let (oh, ow) = conv_output_dims(h, w, kh, kw, stride, padding)?;

    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0f32; cout * oh * ow];
    for co in 0..cout {
        let o_plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        o_plane.fill(bias.data()[co]);
        for ci in 0..cin {
            let x_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut o_plane[oy * ow..(oy + 1) * ow];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *o += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

/// Gradient of a [`conv2d`] output with respect to its input: the adjoint
/// (transposed) correlation of `grad_out` with `weights`.
pub fn conv2d_input_grad(
    grad_out: &Tensor,
    weights: &Tensor,
    input_shape: (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (cin, h, w) = input_shape;
    let (cout, wcin, kh, kw) = weights.dims4()?;
    if wcin != cin {
        return Err(Error::Shape(format!(
            "weights expect {wcin} input channels, input has {cin}"
        )));
    }
    let (oh, ow) = conv_output_dims(h, w, kh, kw, stride, padding)?;
    if grad_out.shape() != [cout, oh, ow] {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match conv output [{cout}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }

    let g = grad_out.data();
    let wt = weights.data();
    let mut gin = vec![0.0f32; cin * h * w];
    for co in 0..cout {
        let g_plane = &g[co * oh * ow..(co + 1) * oh * ow];
        for (oy, grow) in g_plane.chunks_exact(ow).enumerate() {
            for (ox, &gv) in grow.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                            gin[(ci * h + iy as usize) * w + ix as usize] += gv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cin, h, w], gin)
}

/// Bilinear resize of an `[h, w]` map with corner-aligned sampling: output
/// pixel `(y, x)` samples the source at `(y·(h−1)/(outH−1), x·(w−1)/(outW−1))`,
/// so the four corner values are reproduced exactly. A single output row or
/// column samples source coordinate 0.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput(format!(
            "output size must be positive, got {out_h}x{out_w}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("cannot resize an empty map".into()));
    }

    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let src = if n_out > 1 && n_in > 1 {
                    o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
                } else {
                    0.0
                };
                let lo = (src.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);

    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] + (src[y0 * w + x1] - src[y0 * w + x0]) * fx;
            let bot = src[y1 * w + x0] + (src[y1 * w + x1] - src[y1 * w + x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Min-max normalization into `[0, 1]`. A constant map becomes all zeros.
pub fn normalize01(map: &Tensor) -> Tensor {
    let (lo, hi) = (map.min(), map.max());
    if hi <= lo || !(hi - lo).is_finite() {
        return map.map(|_| 0.0);
    }
    let range = hi - lo;
    map.map(|x| ((x - lo) / range).clamp(0.0, 1.0))
}
