//! Inference-time slicing of the feature map into independent patches.
//!
//! Each patch owns a core rectangle and reads a padded rectangle (core grown
//! by the overlap on every interior side). Queries of a patch only see samples
//! clamped into its padded rectangle and no attention crosses patches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::attention::{attend_region, project, write_region, DeformAttnParams, SampleTrace};
use crate::error::{Error, Result};
use crate::tensor::{Rect, Tensor};

pub const OVERLAPS: [u8; 3] = [0, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceConfig {
    pub h_s: u32,
    pub w_s: u32,
    pub overlap: u8,
}

impl SliceConfig {
    pub fn new(h_s: u32, w_s: u32, overlap: u8) -> Result<Self> {
        let cfg = Self { h_s, w_s, overlap };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One patch covering an `h x w` map.
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h_s: h as u32,
            w_s: w as u32,
            overlap: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_s == 0 || self.w_s == 0 {
            return Err(Error::Invalid(format!("slice extents must be >= 1, got {self}")));
        }
        if !OVERLAPS.contains(&self.overlap) {
            return Err(Error::Invalid(format!(
                "overlap must be 0, 1 or 2, got {}",
                self.overlap
            )));
        }
        Ok(())
    }
}

impl fmt::Display for SliceConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}+{}", self.h_s, self.w_s, self.overlap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub core: Rect,
    pub padded: Rect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub h: usize,
    pub w: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major over the patch grid.
    pub patches: Vec<Patch>,
}

/// Splits an `h x w` map into `ceil(h/h_s) * ceil(w/w_s)` patches. The last
/// row and column absorb the remainder.
pub fn layout(h: usize, w: usize, cfg: &SliceConfig) -> PatchLayout {
    let hs = (cfg.h_s as usize).max(1);
    let ws = (cfg.w_s as usize).max(1);
    let k = cfg.overlap as usize;
    let rows = h.div_ceil(hs);
    let cols = w.div_ceil(ws);
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let core = Rect {
                y0: r * hs,
                y1: ((r + 1) * hs).min(h),
                x0: c * ws,
                x1: ((c + 1) * ws).min(w),
            };
            let padded = Rect {
                y0: core.y0.saturating_sub(k),
                y1: (core.y1 + k).min(h),
                x0: core.x0.saturating_sub(k),
                x1: (core.x1 + k).min(w),
            };
            patches.push(Patch { core, padded });
        }
    }
    PatchLayout {
        h,
        w,
        rows,
        cols,
        patches,
    }
}

impl PatchLayout {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchTrace {
    pub patch: Patch,
    pub trace: SampleTrace,
}

impl PatchTrace {
    pub fn confined(&self) -> bool {
        self.trace.confined_to(&self.patch.padded)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicedOutput {
    pub output: Tensor,
    pub layout: PatchLayout,
    pub traces: Vec<PatchTrace>,
}

pub fn forward_sliced(x: &Tensor, params: &DeformAttnParams, cfg: &SliceConfig) -> Result<SlicedOutput> {
    let (_, h, w) = x.chw()?;
    let order: Vec<usize> = (0..layout(h, w, cfg).len()).collect();
    forward_sliced_in_order(x, params, cfg, &order)
}

/// Evaluates the patches listed in `order` (a permutation of the patch
/// indices) concurrently and assembles the output. Exposed so callers can
/// check that the result does not depend on patch scheduling.
pub fn forward_sliced_in_order(
    x: &Tensor,
    params: &DeformAttnParams,
    cfg: &SliceConfig,
    order: &[usize],
) -> Result<SlicedOutput> {
    cfg.validate()?;
    let proj = project(x, params)?;
    let layout = layout(proj.h, proj.w, cfg);
    let mut seen = vec![false; layout.len()];
    for &i in order {
        if i >= layout.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Invalid(format!(
                "patch order is not a permutation of 0..{}",
                layout.len()
            )));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Invalid(format!(
            "patch order is not a permutation of 0..{}",
            layout.len()
        )));
    }

    let results: Vec<(usize, Vec<f64>, SampleTrace)> = order
        .par_iter()
        .map(|&i| {
            let patch = layout.patches[i];
            let (values, trace) = attend_region(&proj, params, patch.core, patch.padded);
            (i, values, trace)
        })
        .collect();

    let mut out = vec![0.0; x.len()];
    let mut traces: Vec<Option<PatchTrace>> = vec![None; layout.len()];
    for (i, values, trace) in results {
        let patch = layout.patches[i];
        write_region(&mut out, proj.h, proj.w, patch.core, &values);
        traces[i] = Some(PatchTrace { patch, trace });
    }
    Ok(SlicedOutput {
        output: Tensor::new(x.dims().to_vec(), out)?,
        layout,
        traces: traces.into_iter().map(|t| t.expect("every patch evaluated")).collect(),
    })
}

/// How sliced and unsliced outputs are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityMetric {
    /// `1 - min(1, |sliced - full|_2 / |full|_2)`.
    #[default]
    RelativeL2,
    /// `1 - min(1, max_patch max|sliced - full| / max|full|)`.
    PatchMaxError,
}

/// Agreement between sliced and full outputs, in `[0, 1]`.
pub fn fidelity(x: &Tensor, params: &DeformAttnParams, cfg: &SliceConfig) -> Result<f64> {
    let (full, _) = crate::attention::forward_full(x, params)?;
    fidelity_against(&full, x, params, cfg, FidelityMetric::RelativeL2)
}

/// [`fidelity`] with a precomputed unsliced output.
pub fn fidelity_against(
    full: &Tensor,
    x: &Tensor,
    params: &DeformAttnParams,
    cfg: &SliceConfig,
    metric: FidelityMetric,
) -> Result<f64> {
    let sliced = forward_sliced(x, params, cfg)?;
    compare_outputs(full, &sliced, metric)
}

pub fn compare_outputs(full: &Tensor, sliced: &SlicedOutput, metric: FidelityMetric) -> Result<f64> {
    let diff = sliced.output.sub(full)?;
    let (num, den) = match metric {
        FidelityMetric::RelativeL2 => (diff.l2_norm(), full.l2_norm()),
        FidelityMetric::PatchMaxError => {
            let max_abs = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (max_abs(&diff), max_abs(full))
        }
    };
    if den == 0.0 {
        return Ok(if num == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - (num / den).min(1.0))
}

/// Re-arranges a `[C, H, W]` output into `[H * W, C]` rows, one logit vector per pixel.
pub fn pixel_logits(map: &Tensor) -> Result<Tensor> {
    let (c, h, w) = map.chw()?;
    let plane = h * w;
    let mut data = Vec::with_capacity(map.len());
    for p in 0..plane {
        for ch in 0..c {
            data.push(map.data()[ch * plane + p]);
        }
    }
    Tensor::new(vec![plane, c], data)
}
