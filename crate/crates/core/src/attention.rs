//! Unsliced deformable attention over a full feature map.
//!
//! Every pixel is a query whose reference point is the pixel itself. A small
//! offset network turns the query feature into `n_points` offsets per offset
//! group; keys and values are bilinearly sampled at reference + offset and the
//! query attends over its own sampled set, head by head. The same kernel backs
//! the sliced path in [`crate::slicer`], which only changes the rectangle that
//! sampling coordinates are clamped to.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dot, sample_channels, softmax_in_place, Rect, Tensor};

/// Layer hyper-parameters, everything except the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub d_model: usize,
    pub n_heads: usize,
    /// Sampling points per query and offset group.
    pub n_points: usize,
    /// Maximum offset magnitude per axis, in pixels.
    pub offset_scale: f64,
    /// One offset set per head when true, a single set shared by all heads otherwise.
    pub per_head_offsets: bool,
}

impl Default for LayerShape {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_heads: 4,
            n_points: 4,
            offset_scale: 14.0,
            per_head_offsets: true,
        }
    }
}

impl LayerShape {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_points == 0 {
            return Err(Error::Invalid("d_model, n_heads and n_points must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            return Err(Error::Invalid(format!(
                "offset_scale must be positive and finite, got {}",
                self.offset_scale
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn offset_groups(&self) -> usize {
        if self.per_head_offsets {
            self.n_heads
        } else {
            1
        }
    }

    /// Width of the offset network's output layer: `(dy, dx)` per group and point.
    pub fn offset_outputs(&self) -> usize {
        2 * self.offset_groups() * self.n_points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformAttnParams {
    pub shape: LayerShape,
    /// Seed the weights were synthesised from, `None` when loaded.
    pub seed: Option<u64>,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    /// Offset network: `tanh(W2 tanh(W1 f + b1) + b2) * offset_scale`.
    pub offset_w1: Tensor,
    pub offset_b1: Tensor,
    pub offset_w2: Tensor,
    pub offset_b2: Tensor,
}

/// Where [`make_params`] gets its weights from.
#[derive(Debug, Clone, Copy)]
pub enum ParamSource<'a> {
    Seed(u64),
    File(&'a std::path::Path),
}

pub fn make_params(shape: LayerShape, source: ParamSource<'_>) -> Result<DeformAttnParams> {
    match source {
        ParamSource::Seed(seed) => DeformAttnParams::synthesize(shape, seed),
        ParamSource::File(path) => {
            let params = crate::format::load_params(path)?;
            if params.shape != shape {
                return Err(shape_err!(
                    "weights file describes {:?}, expected {:?}",
                    params.shape,
                    shape
                ));
            }
            Ok(params)
        }
    }
}

pub(crate) const TENSOR_NAMES: [&str; 12] = [
    "w_q",
    "b_q",
    "w_k",
    "b_k",
    "w_v",
    "b_v",
    "w_o",
    "b_o",
    "offset_w1",
    "offset_b1",
    "offset_w2",
    "offset_b2",
];

impl DeformAttnParams {
    /// Draws every weight and bias from `U[-1/sqrt(D_in), 1/sqrt(D_in)]` with a
    /// ChaCha8 stream seeded by `seed`.
    pub fn synthesize(shape: LayerShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = shape.d_model;
        let mut layer = |d_out: usize, d_in: usize| -> Result<(Tensor, Tensor)> {
            let bound = 1.0 / (d_in as f64).sqrt();
            let w = Tensor::uniform(vec![d_out, d_in], -bound, bound, &mut rng)?;
            let b = Tensor::uniform(vec![d_out], -bound, bound, &mut rng)?;
            Ok((w, b))
        };
        let (w_q, b_q) = layer(c, c)?;
        let (w_k, b_k) = layer(c, c)?;
        let (w_v, b_v) = layer(c, c)?;
        let (w_o, b_o) = layer(c, c)?;
        let (offset_w1, offset_b1) = layer(c, c)?;
        let (offset_w2, offset_b2) = layer(shape.offset_outputs(), c)?;
        let params = Self {
            shape,
            seed: Some(seed),
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
            offset_w1,
            offset_b1,
            offset_w2,
            offset_b2,
        };
        params.validate()?;
        Ok(params)
    }

    /// Assembles params from named tensors, checking every dimension.
    pub fn from_tensors(shape: LayerShape, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        shape.validate()?;
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor section '{name}'")))
        };
        let params = Self {
            shape,
            seed: None,
            w_q: take("w_q")?,
            b_q: take("b_q")?,
            w_k: take("w_k")?,
            b_k: take("b_k")?,
            w_v: take("w_v")?,
            b_v: take("b_v")?,
            w_o: take("w_o")?,
            b_o: take("b_o")?,
            offset_w1: take("offset_w1")?,
            offset_b1: take("offset_b1")?,
            offset_w2: take("offset_w2")?,
            offset_b2: take("offset_b2")?,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn named_tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("offset_w1", &self.offset_w1),
            ("offset_b1", &self.offset_b1),
            ("offset_w2", &self.offset_w2),
            ("offset_b2", &self.offset_b2),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let c = self.shape.d_model;
        let hidden = self.offset_w1.dims().first().copied().unwrap_or(0);
        let expect: [(&str, &Tensor, Vec<usize>); 12] = [
            ("w_q", &self.w_q, vec![c, c]),
            ("b_q", &self.b_q, vec![c]),
            ("w_k", &self.w_k, vec![c, c]),
            ("b_k", &self.b_k, vec![c]),
            ("w_v", &self.w_v, vec![c, c]),
            ("b_v", &self.b_v, vec![c]),
            ("w_o", &self.w_o, vec![c, c]),
            ("b_o", &self.b_o, vec![c]),
            ("offset_w1", &self.offset_w1, vec![hidden, c]),
            ("offset_b1", &self.offset_b1, vec![hidden]),
            ("offset_w2", &self.offset_w2, vec![self.shape.offset_outputs(), hidden]),
            ("offset_b2", &self.offset_b2, vec![self.shape.offset_outputs()]),
        ];
        for (name, t, dims) in expect {
            if t.dims() != dims.as_slice() {
                return Err(shape_err!("{name} has dims {:?}, expected {:?}", t.dims(), dims));
            }
        }
        Ok(())
    }

    /// Zeroes the offset network so every sample lands on its reference point.
    pub fn zero_offsets(&mut self) {
        for t in [
            &mut self.offset_w1,
            &mut self.offset_b1,
            &mut self.offset_w2,
            &mut self.offset_b2,
        ] {
            t.data_mut().fill(0.0);
        }
    }
}

/// Reference points, one per `stride x stride` cell at the cell centre,
/// sorted row-major. Remainder cells at the bottom/right edge are centred on
/// their truncated extent.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGrid {
    pub points: Vec<(f64, f64)>,
}

pub fn reference_grid(h: usize, w: usize, stride: usize) -> Result<ReferenceGrid> {
    if h == 0 || w == 0 || stride == 0 {
        return Err(shape_err!(
            "reference grid needs positive extents and stride, got h={h} w={w} stride={stride}"
        ));
    }
    Ok(ReferenceGrid::over(Rect::full(h, w), stride))
}

impl ReferenceGrid {
    /// Grid over an arbitrary rectangle, in absolute map coordinates.
    pub fn over(rect: Rect, stride: usize) -> Self {
        let centres = |lo: usize, hi: usize| -> Vec<f64> {
            (lo..hi)
                .step_by(stride)
                .map(|start| {
                    let end = (start + stride).min(hi);
                    (start + end - 1) as f64 / 2.0
                })
                .collect()
        };
        let ys = centres(rect.y0, rect.y1);
        let xs = centres(rect.x0, rect.x1);
        let points = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One sampling event: which query/head/point, the unclamped position
/// (reference + offset) and the position actually interpolated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub head: u16,
    pub point: u16,
    pub reference: (f64, f64),
    pub raw: (f64, f64),
    pub used: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleTrace {
    pub records: Vec<SampleRecord>,
}

impl SampleTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of samples whose position was moved by clamping.
    pub fn clamped(&self) -> usize {
        self.records.iter().filter(|r| r.raw != r.used).count()
    }

    /// True when every interpolated position lies inside `rect`.
    pub fn confined_to(&self, rect: &Rect) -> bool {
        self.records.iter().all(|r| rect.contains_point(r.used.0, r.used.1))
    }

    pub fn max_offset(&self) -> f64 {
        self.records
            .iter()
            .map(|r| (r.raw.0 - r.reference.0).abs().max((r.raw.1 - r.reference.1).abs()))
            .fold(0.0, f64::max)
    }
}

/// Pointwise projections and offsets for every pixel of a map. These depend on
/// a single pixel each, so computing them once for the whole map gives the same
/// bits as computing them per patch.
pub(crate) struct Projected {
    pub h: usize,
    pub w: usize,
    /// `[C, H, W]` query, key and value maps.
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `[H * W, offset_outputs]`, laid out `[group][point][dy, dx]`.
    pub offsets: Vec<f64>,
}

pub(crate) fn project(x: &Tensor, params: &DeformAttnParams) -> Result<Projected> {
    let (c, h, w) = x.chw()?;
    if c != params.shape.d_model {
        return Err(shape_err!(
            "feature map has {c} channels, layer expects d_model = {}",
            params.shape.d_model
        ));
    }
    let plane = h * w;
    let hidden = params.offset_b1.len();
    let n_off = params.shape.offset_outputs();
    let scale = params.shape.offset_scale;

    let mut q = vec![0.0; c * plane];
    let mut k = vec![0.0; c * plane];
    let mut v = vec![0.0; c * plane];
    let mut offsets = vec![0.0; plane * n_off];
    let mut feat = vec![0.0; c];
    let mut hid = vec![0.0; hidden];

    for p in 0..plane {
        for (ch, f) in feat.iter_mut().enumerate() {
            *f = x.data()[ch * plane + p];
        }
        for (dst, wt, bs) in [
            (&mut q, &params.w_q, &params.b_q),
            (&mut k, &params.w_k, &params.b_k),
            (&mut v, &params.w_v, &params.b_v),
        ] {
            for o in 0..c {
                dst[o * plane + p] = dot(&feat, &wt.data()[o * c..(o + 1) * c]) + bs.data()[o];
            }
        }
        for (j, hv) in hid.iter_mut().enumerate() {
            *hv = (dot(&feat, &params.offset_w1.data()[j * c..(j + 1) * c]) + params.offset_b1.data()[j]).tanh();
        }
        let off = &mut offsets[p * n_off..(p + 1) * n_off];
        for (j, o) in off.iter_mut().enumerate() {
            let z = dot(&hid, &params.offset_w2.data()[j * hidden..(j + 1) * hidden]) + params.offset_b2.data()[j];
            *o = z.tanh() * scale;
        }
    }
    Ok(Projected {
        h,
        w,
        q: Tensor::new(vec![c, h, w], q)?,
        k: Tensor::new(vec![c, h, w], k)?,
        v: Tensor::new(vec![c, h, w], v)?,
        offsets,
    })
}

/// Runs attention for every query pixel of `queries`, clamping sampling
/// positions to `bounds`. Returns the projected outputs for the queries in
/// row-major order (`C` values per pixel) and the sample trace.
pub(crate) fn attend_region(
    proj: &Projected,
    params: &DeformAttnParams,
    queries: Rect,
    bounds: Rect,
) -> (Vec<f64>, SampleTrace) {
    let shape = &params.shape;
    let c = shape.d_model;
    let d = shape.head_dim();
    let n_points = shape.n_points;
    let n_off = shape.offset_outputs();
    let plane = proj.h * proj.w;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let mut out = Vec::with_capacity(queries.area() * c);
    let mut trace = SampleTrace {
        records: Vec::with_capacity(queries.area() * shape.n_heads * n_points),
    };
    let mut q_h = vec![0.0; d];
    let mut keys = vec![0.0; n_points * d];
    let mut values = vec![0.0; n_points * d];
    let mut scores = vec![0.0; n_points];
    let mut attended = vec![0.0; c];

    for y in queries.y0..queries.y1 {
        for x in queries.x0..queries.x1 {
            let p = y * proj.w + x;
            let reference = (y as f64, x as f64);
            let off = &proj.offsets[p * n_off..(p + 1) * n_off];
            for head in 0..shape.n_heads {
                let group = if shape.per_head_offsets { head } else { 0 };
                let channels = head * d..(head + 1) * d;
                for (i, ch) in channels.clone().enumerate() {
                    q_h[i] = proj.q.data()[ch * plane + p];
                }
                for j in 0..n_points {
                    let base = (group * n_points + j) * 2;
                    let raw = (reference.0 + off[base], reference.1 + off[base + 1]);
                    let used = bounds.clamp_point(raw.0, raw.1);
                    sample_channels(&proj.k, channels.clone(), used.0, used.1, &mut keys[j * d..(j + 1) * d]);
                    sample_channels(
                        &proj.v,
                        channels.clone(),
                        used.0,
                        used.1,
                        &mut values[j * d..(j + 1) * d],
                    );
                    scores[j] = dot(&q_h, &keys[j * d..(j + 1) * d]) * inv_sqrt_d;
                    trace.records.push(SampleRecord {
                        head: head as u16,
                        point: j as u16,
                        reference,
                        raw,
                        used,
                    });
                }
                softmax_in_place(&mut scores);
                let dst = &mut attended[head * d..(head + 1) * d];
                dst.fill(0.0);
                for (j, a) in scores.iter().enumerate() {
                    for (o, val) in dst.iter_mut().zip(&values[j * d..(j + 1) * d]) {
                        *o += a * val;
                    }
                }
            }
            for o in 0..c {
                out.push(dot(&attended, &params.w_o.data()[o * c..(o + 1) * c]) + params.b_o.data()[o]);
            }
        }
    }
    (out, trace)
}

/// Scatters row-major per-pixel outputs of `rect` into a `[C, H, W]` buffer.
pub(crate) fn write_region(dst: &mut [f64], h: usize, w: usize, rect: Rect, values: &[f64]) {
    let c = values.len() / rect.area();
    let plane = h * w;
    let mut i = 0;
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            for ch in 0..c {
                dst[ch * plane + y * w + x] = values[i + ch];
            }
            i += c;
        }
    }
}

/// Deformable attention over the whole map, sampling clamped to the map borders.
pub fn forward_full(x: &Tensor, params: &DeformAttnParams) -> Result<(Tensor, SampleTrace)> {
    let proj = project(x, params)?;
    let full = Rect::full(proj.h, proj.w);
    let (values, trace) = attend_region(&proj, params, full, full);
    let mut out = vec![0.0; x.len()];
    write_region(&mut out, proj.h, proj.w, full, &values);
    Ok((Tensor::new(x.dims().to_vec(), out)?, trace))
}

/// A seeded `[C, H, W]` map with values in `[-1, 1)`.
pub fn random_feature_map(c: usize, h: usize, w: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(vec![c, h, w], -1.0, 1.0, &mut rng)
}

/// A feature map that is periodic in both spatial axes with the given period.
pub fn periodic_feature_map(c: usize, h: usize, w: usize, period: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<(f64, f64, f64)> = (0..c)
        .map(|_| {
            (
                rng.random::<f64>() * std::f64::consts::TAU,
                rng.random::<f64>() * std::f64::consts::TAU,
                0.5 + rng.random::<f64>(),
            )
        })
        .collect();
    let omega = std::f64::consts::TAU / period as f64;
    let mut data = Vec::with_capacity(c * h * w);
    for &(py, px, amp) in &phases {
        for y in 0..h {
            for x in 0..w {
                data.push(amp * ((omega * y as f64 + py).sin() + (omega * x as f64 + px).cos()));
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}
