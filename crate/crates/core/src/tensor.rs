//! Dense row-major `f64` arrays and the few kernels the attention layer needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "dims {:?} hold {} values but {} were supplied",
                dims,
                n,
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims)?;
        let n = dims.iter().product();
        Ok(Self {
            dims,
            data: vec![0.0; n],
        })
    }

    /// Values drawn independently from `U[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        check_dims(&dims)?;
        let n = dims.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(C, H, W)` of a rank-3 feature map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected a [C, H, W] feature map, got {:?}", self.dims)),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(shape_err!("cannot subtract {:?} from {:?}", other.dims, self.dims));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            dims: self.dims.clone(),
            data,
        })
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(shape_err!("rank must be between 1 and {MAX_RANK}, got {}", dims.len()));
    }
    if dims.contains(&0) {
        return Err(shape_err!("zero extent in dims {:?}", dims));
    }
    Ok(())
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            y0: 0,
            y1: h,
            x0: 0,
            x1: w,
        }
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.y0 <= other.y0 && other.y1 <= self.y1 && self.x0 <= other.x0 && other.x1 <= self.x1
    }

    /// Whether a continuous coordinate lies in the closed pixel-center box
    /// `[y0, y1 - 1] x [x0, x1 - 1]`.
    pub fn contains_point(&self, y: f64, x: f64) -> bool {
        y >= self.y0 as f64 && y <= (self.y1 - 1) as f64 && x >= self.x0 as f64 && x <= (self.x1 - 1) as f64
    }

    pub fn clamp_point(&self, y: f64, x: f64) -> (f64, f64) {
        (
            y.clamp(self.y0 as f64, (self.y1 - 1) as f64),
            x.clamp(self.x0 as f64, (self.x1 - 1) as f64),
        )
    }
}

/// Affine map along the last axis: `out[.., o] = sum_i input[.., i] * weight[o, i] + bias[o]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = match weight.dims[..] {
        [o, i] => (o, i),
        _ => return Err(shape_err!("weight must be [D_out, D_in], got {:?}", weight.dims)),
    };
    if bias.dims != [d_out] {
        return Err(shape_err!("bias must be [{d_out}], got {:?}", bias.dims));
    }
    let last = *input.dims.last().expect("rank >= 1");
    if last != d_in {
        return Err(shape_err!(
            "input inner dim {last} does not match weight inner dim {d_in}"
        ));
    }
    let rows = input.len() / d_in;
    let mut out = Vec::with_capacity(rows * d_out);
    for row in input.data.chunks_exact(d_in) {
        for o in 0..d_out {
            out.push(dot(row, &weight.data[o * d_in..(o + 1) * d_in]) + bias.data[o]);
        }
    }
    let mut dims = input.dims.clone();
    *dims.last_mut().expect("rank >= 1") = d_out;
    Tensor::new(dims, out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax along `axis`, stabilised by subtracting the maximum.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= input.rank() {
        return Err(shape_err!("axis {axis} out of range for rank {}", input.rank()));
    }
    if input.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let n = input.dims[axis];
    let inner: usize = input.dims[axis + 1..].iter().product();
    let outer: usize = input.dims[..axis].iter().product();
    let mut out = input.data.clone();
    let mut lane = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (k, slot) in lane.iter_mut().enumerate() {
                *slot = out[base + k * inner];
            }
            softmax_in_place(&mut lane);
            for (k, v) in lane.iter().enumerate() {
                out[base + k * inner] = *v;
            }
        }
    }
    Tensor::new(input.dims.clone(), out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Bilinear interpolation of every channel of a `[C, H, W]` map at continuous
/// `(y, x)` pixel coordinates. Points are clamped to the map before
/// interpolation. Returns `[C, N]`.
pub fn bilinear_sample(map: &Tensor, points: &[(f64, f64)]) -> Result<Tensor> {
    let (c, h, w) = map.chw()?;
    if points.is_empty() {
        return Err(shape_err!("no sampling points"));
    }
    let rect = Rect::full(h, w);
    let mut out = vec![0.0; c * points.len()];
    let mut buf = vec![0.0; c];
    for (n, &(y, x)) in points.iter().enumerate() {
        if y.is_nan() || x.is_nan() {
            return Err(Error::Numeric(format!("NaN sampling coordinate at index {n}")));
        }
        let (cy, cx) = rect.clamp_point(y, x);
        sample_channels(map, 0..c, cy, cx, &mut buf);
        for ch in 0..c {
            out[ch * points.len() + n] = buf[ch];
        }
    }
    Tensor::new(vec![c, points.len()], out)
}

/// Interpolates channels `channels` of `map` at an already-clamped point.
/// Integer coordinates reproduce the stored pixel exactly.
pub(crate) fn sample_channels(map: &Tensor, channels: std::ops::Range<usize>, y: f64, x: f64, out: &mut [f64]) {
    let (h, w) = (map.dims[1], map.dims[2]);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let plane = h * w;
    for (slot, ch) in out.iter_mut().zip(channels) {
        let base = ch * plane;
        let v00 = map.data[base + y0 * w + x0];
        let v01 = map.data[base + y0 * w + x1];
        let v10 = map.data[base + y1 * w + x0];
        let v11 = map.data[base + y1 * w + x1];
        let top = if fx == 0.0 { v00 } else { (1.0 - fx) * v00 + fx * v01 };
        let bottom = if fx == 0.0 { v10 } else { (1.0 - fx) * v10 + fx * v11 };
        *slot = if fy == 0.0 { top } else { (1.0 - fy) * top + fy * bottom };
    }
}
