//! Run configuration, read from TOML and then patched by command-line flags.
//!
//! Every section is optional; missing keys take the library defaults.
//!
//! ```toml
//! [input]
//! channels = 16
//! height = 56
//! width = 56
//! seed = 2024
//! # path = "input.fmap"
//!
//! [layer]
//! n_heads = 4
//! n_points = 4
//! offset_scale = 14.0
//! per_head_offsets = true
//! seed = 7
//! # weights = "layer.datp"
//!
//! [slice]
//! mode = "sliced"   # or "full"
//! h_s = 28
//! w_s = 14
//! overlap = 1
//!
//! [cost]
//! bit_width = 16
//! beta = 0
//! buffer_capacity_bits = 122880
//! burst_bytes = 64
//! samples_per_pixel = 1
//!
//! [search]
//! iterations = 50
//! sample_size = 16
//! seed = 0
//! r_min = 0.0
//! r_max = 14400.0
//! h_min = 8
//! h_max = 28
//! w_min = 8
//! w_max = 28
//! overlaps = [0, 1, 2]
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use dattile_core::attention::{random_feature_map, DeformAttnParams, LayerShape};
use dattile_core::cost::CostModelParams;
use dattile_core::format::{load_params, load_tensor};
use dattile_core::search::{MutationSpec, SearchParams, SearchSpace};
use dattile_core::slicer::{FidelityMetric, SliceConfig};
use dattile_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Seed of the synthetic `U[-1, 1)` feature map.
    pub seed: u64,
    /// FMAP file to use instead of a synthetic map.
    pub path: Option<PathBuf>,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            height: 56,
            width: 56,
            seed: 2024,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerConfig {
    pub n_heads: usize,
    pub n_points: usize,
    pub offset_scale: f64,
    pub per_head_offsets: bool,
    pub seed: u64,
    /// DATP file; its own shape section overrides the fields above.
    pub weights: Option<PathBuf>,
}

impl Default for LayerConfig {
    fn default() -> Self {
        let s = LayerShape::default();
        Self {
            n_heads: s.n_heads,
            n_points: s.n_points,
            offset_scale: s.offset_scale,
            per_head_offsets: s.per_head_offsets,
            seed: 7,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    #[default]
    Sliced,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceSection {
    pub mode: SliceMode,
    pub h_s: u32,
    pub w_s: u32,
    pub overlap: u8,
    pub metric: FidelityMetric,
}

impl Default for SliceSection {
    fn default() -> Self {
        Self {
            mode: SliceMode::Sliced,
            h_s: 28,
            w_s: 14,
            overlap: 1,
            metric: FidelityMetric::RelativeL2,
        }
    }
}

impl SliceSection {
    pub fn slice_config(&self) -> Result<SliceConfig> {
        Ok(SliceConfig::new(self.h_s, self.w_s, self.overlap)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub iterations: usize,
    pub sample_size: usize,
    pub crossover_prob: f64,
    pub max_step: u32,
    pub overlap_redraw_prob: f64,
    pub mutants_per_iteration: usize,
    pub children_per_iteration: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub seed: u64,
    pub eval_budget: Option<usize>,
    pub h_min: u32,
    pub h_max: u32,
    pub w_min: u32,
    pub w_max: u32,
    pub overlaps: Vec<u8>,
    /// Keep only slice sizes that divide the map extents.
    pub divisible: bool,
    pub metric: FidelityMetric,
    /// Also enumerate the space exhaustively and audit the front against it.
    pub oracle: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        let p = SearchParams::default();
        let s = SearchSpace::default();
        Self {
            iterations: p.iterations,
            sample_size: p.sample_size,
            crossover_prob: p.crossover_prob,
            max_step: p.mutation.max_step,
            overlap_redraw_prob: p.mutation.overlap_redraw_prob,
            mutants_per_iteration: p.mutants_per_iteration,
            children_per_iteration: p.children_per_iteration,
            r_min: p.r_min,
            r_max: p.r_max,
            seed: p.seed,
            eval_budget: p.eval_budget,
            h_min: s.h_min,
            h_max: s.h_max,
            w_min: s.w_min,
            w_max: s.w_max,
            overlaps: s.overlaps,
            divisible: false,
            metric: FidelityMetric::RelativeL2,
            oracle: false,
        }
    }
}

impl SearchSection {
    pub fn params(&self) -> SearchParams {
        SearchParams {
            iterations: self.iterations,
            sample_size: self.sample_size,
            crossover_prob: self.crossover_prob,
            mutation: MutationSpec {
                max_step: self.max_step,
                overlap_redraw_prob: self.overlap_redraw_prob,
            },
            mutants_per_iteration: self.mutants_per_iteration,
            children_per_iteration: self.children_per_iteration,
            r_min: self.r_min,
            r_max: self.r_max,
            seed: self.seed,
            eval_budget: self.eval_budget,
        }
    }

    pub fn space(&self, h: usize, w: usize) -> SearchSpace {
        SearchSpace {
            h_min: self.h_min,
            h_max: self.h_max,
            w_min: self.w_min,
            w_max: self.w_max,
            overlaps: self.overlaps.clone(),
            divisible_by: self.divisible.then_some((h as u32, w as u32)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    pub layer: LayerConfig,
    pub slice: SliceSection,
    pub cost: CostModelParams,
    pub search: SearchSection,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn layer_shape(&self) -> LayerShape {
        LayerShape {
            d_model: self.input.channels,
            n_heads: self.layer.n_heads,
            n_points: self.layer.n_points,
            offset_scale: self.layer.offset_scale,
            per_head_offsets: self.layer.per_head_offsets,
        }
    }

    /// Checks everything that can be checked without touching the file system.
    pub fn validate(&self) -> Result<()> {
        let i = &self.input;
        if i.path.is_none() && (i.channels == 0 || i.height == 0 || i.width == 0) {
            return Err(CliError::Validation(format!(
                "input extents must be positive, got {}x{}x{}",
                i.channels, i.height, i.width
            )));
        }
        if self.layer.weights.is_none() && i.path.is_none() {
            self.layer_shape().validate()?;
        }
        if self.slice.mode == SliceMode::Sliced {
            self.slice.slice_config()?;
        }
        self.cost.validate()?;
        self.search.params().validate()?;
        self.search.space(i.height, i.width).validate()?;
        Ok(())
    }

    /// Loads or synthesizes the input map and layer weights, and records the
    /// actual extents and layer shape back into the config.
    pub fn materialize(&mut self) -> Result<(Tensor, DeformAttnParams)> {
        let x = match &self.input.path {
            Some(p) => load_tensor(p)?,
            None => random_feature_map(
                self.input.channels,
                self.input.height,
                self.input.width,
                self.input.seed,
            )?,
        };
        let (c, h, w) = x.chw()?;
        self.input.channels = c;
        self.input.height = h;
        self.input.width = w;

        let params = match &self.layer.weights {
            Some(p) => {
                let params = load_params(p)?;
                let s = params.shape;
                self.layer.n_heads = s.n_heads;
                self.layer.n_points = s.n_points;
                self.layer.offset_scale = s.offset_scale;
                self.layer.per_head_offsets = s.per_head_offsets;
                params
            }
            None => DeformAttnParams::synthesize(self.layer_shape(), self.layer.seed)?,
        };
        if params.shape.d_model != c {
            return Err(CliError::Validation(format!(
                "layer expects {} channels, input has {c}",
                params.shape.d_model
            )));
        }
        Ok((x, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_toml("[slice]\nh_s = 20\n[cost]\nbeta = 5\n").unwrap();
        assert_eq!(c.slice.h_s, 20);
        assert_eq!(c.slice.w_s, 14);
        assert_eq!(c.cost.beta, 5);
        assert_eq!(c.cost.bit_width, 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[slice]\nheight = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn validation_errors_exit_one() {
        let mut c = RunConfig::default();
        c.slice.overlap = 3;
        assert_eq!(c.validate().unwrap_err().exit_code(), 1);
        let mut c = RunConfig::default();
        c.search.r_min = 10.0;
        c.search.r_max = 1.0;
        assert_eq!(c.validate().unwrap_err().exit_code(), 1);
        let mut c = RunConfig::default();
        c.layer.n_heads = 3;
        assert_eq!(c.validate().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn layer_width_follows_input_channels() {
        let mut c = RunConfig::default();
        c.input.channels = 8;
        c.layer.n_heads = 2;
        let (x, p) = c.materialize().unwrap();
        assert_eq!(x.dims(), &[8, 56, 56]);
        assert_eq!(p.shape.d_model, 8);
    }
}
