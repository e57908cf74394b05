//! Hardware resource formula and a burst-granular DRAM traffic model.
//!
//! The traffic model is deliberately small: one on-chip buffer level,
//! write-back of outputs, every transfer rounded up to whole bursts. The
//! intermediate produced by the sampling stage is
//! `samples_per_pixel * C * bit_width` bits per query pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slicer::{layout, SliceConfig};
use crate::tensor::Rect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelParams {
    /// Storage bits per element (8, 16 or 32).
    pub bit_width: u32,
    /// Fixed resource overhead of the rest of the system.
    pub beta: u64,
    /// On-chip buffer size in bits.
    pub buffer_capacity_bits: u64,
    /// DRAM burst size in bytes, a power of two.
    pub burst_bytes: u64,
    /// Sampled feature vectors produced per query pixel.
    pub samples_per_pixel: u32,
}

impl Default for CostModelParams {
    /// 16-bit storage, 64-byte bursts, and a buffer that holds one interior
    /// padded `28 x 14 + 1` patch of a 16-channel map (16 x 30 pixels).
    fn default() -> Self {
        Self {
            bit_width: 16,
            beta: 0,
            buffer_capacity_bits: 16 * 16 * 16 * 30,
            burst_bytes: 64,
            samples_per_pixel: 1,
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        if ![8, 16, 32].contains(&self.bit_width) {
            return Err(Error::Invalid(format!(
                "bit_width must be 8, 16 or 32, got {}",
                self.bit_width
            )));
        }
        if self.buffer_capacity_bits == 0 {
            return Err(Error::Invalid("buffer_capacity_bits must be positive".into()));
        }
        if !self.burst_bytes.is_power_of_two() {
            return Err(Error::Invalid(format!(
                "burst_bytes must be a power of two, got {}",
                self.burst_bytes
            )));
        }
        if self.samples_per_pixel == 0 {
            return Err(Error::Invalid("samples_per_pixel must be positive".into()));
        }
        Ok(())
    }

    fn burst_bits(&self) -> u64 {
        self.burst_bytes * 8
    }

    /// Bits moved for a transfer of `bits`, rounded up to whole bursts.
    pub fn transfer(&self, bits: u64) -> u64 {
        bits.div_ceil(self.burst_bits()) * self.burst_bits()
    }
}

/// `BitWidth * (W_S + O) * (H_S + O) + beta`, with the overlap counted once per axis.
pub fn resource(cfg: &SliceConfig, params: &CostModelParams) -> u64 {
    let k = cfg.overlap as u64;
    params.bit_width as u64 * (cfg.w_s as u64 + k) * (cfg.h_s as u64 + k) + params.beta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficMode {
    /// Sampling and attention run as separate layers through DRAM.
    Baseline,
    /// Sampling fused into attention over the whole map.
    Fused,
    Sliced(SliceConfig),
}

impl TrafficMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Fused => "fused",
            Self::Sliced(_) => "sliced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchTraffic {
    pub core: Rect,
    pub padded: Rect,
    pub read_bits: u64,
    pub write_bits: u64,
    pub spilled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub mode: TrafficMode,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub params: CostModelParams,
    pub dram_reads_bits: u64,
    pub dram_writes_bits: u64,
    pub total_bits: u64,
    /// Total relative to the baseline mode on the same layer.
    pub normalized: f64,
    /// Populated for sliced mode only.
    pub per_patch: Vec<PatchTraffic>,
}

struct Totals {
    reads: u64,
    writes: u64,
    per_patch: Vec<PatchTraffic>,
}

pub fn simulate_traffic(
    h: usize,
    w: usize,
    channels: usize,
    mode: TrafficMode,
    params: &CostModelParams,
) -> Result<TrafficReport> {
    params.validate()?;
    if h == 0 || w == 0 || channels == 0 {
        return Err(Error::Invalid(format!(
            "layer dims must be positive, got {channels}x{h}x{w}"
        )));
    }
    if let TrafficMode::Sliced(cfg) = &mode {
        cfg.validate()?;
    }
    let baseline = count(h, w, channels, &TrafficMode::Baseline, params);
    let t = count(h, w, channels, &mode, params);
    let total = t.reads + t.writes;
    Ok(TrafficReport {
        mode,
        height: h,
        width: w,
        channels,
        params: *params,
        dram_reads_bits: t.reads,
        dram_writes_bits: t.writes,
        total_bits: total,
        normalized: total as f64 / (baseline.reads + baseline.writes) as f64,
        per_patch: t.per_patch,
    })
}

fn count(h: usize, w: usize, channels: usize, mode: &TrafficMode, p: &CostModelParams) -> Totals {
    let pixel_bits = p.bit_width as u64 * channels as u64;
    let map_bits = pixel_bits * (h * w) as u64;
    let intermediate = |pixels: usize| pixels as u64 * pixel_bits * p.samples_per_pixel as u64;
    let fits = |pixels: usize| pixel_bits * pixels as u64 <= p.buffer_capacity_bits;

    match mode {
        TrafficMode::Baseline => {
            let inter = intermediate(h * w);
            Totals {
                // sampling layer reads the map, attention reads intermediates and the map again
                reads: p.transfer(map_bits) + p.transfer(inter) + p.transfer(map_bits),
                writes: p.transfer(inter) + p.transfer(map_bits),
                per_patch: Vec::new(),
            }
        }
        TrafficMode::Fused => {
            let spill = if fits(h * w) {
                0
            } else {
                p.transfer(intermediate(h * w))
            };
            Totals {
                reads: p.transfer(map_bits) + spill,
                writes: p.transfer(map_bits) + spill,
                per_patch: Vec::new(),
            }
        }
        TrafficMode::Sliced(cfg) => {
            let per_patch: Vec<PatchTraffic> = layout(h, w, cfg)
                .patches
                .iter()
                .map(|patch| {
                    let spilled = !fits(patch.padded.area());
                    let spill = if spilled {
                        p.transfer(intermediate(patch.core.area()))
                    } else {
                        0
                    };
                    PatchTraffic {
                        core: patch.core,
                        padded: patch.padded,
                        read_bits: p.transfer(pixel_bits * patch.padded.area() as u64) + spill,
                        write_bits: p.transfer(pixel_bits * patch.core.area() as u64) + spill,
                        spilled,
                    }
                })
                .collect();
            Totals {
                reads: per_patch.iter().map(|t| t.read_bits).sum(),
                writes: per_patch.iter().map(|t| t.write_bits).sum(),
                per_patch,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(h: u32, w: u32, k: u8) -> SliceConfig {
        SliceConfig::new(h, w, k).unwrap()
    }

    #[test]
    fn resource_examples() {
        let p = CostModelParams::default();
        assert_eq!(resource(&cfg(28, 14, 1), &p), 6960);
        let unit = CostModelParams { bit_width: 1, ..p };
        assert_eq!(resource(&cfg(1, 1, 0), &unit), 1);
        let with_beta = CostModelParams {
            bit_width: 8,
            beta: 100,
            ..p
        };
        assert_eq!(resource(&cfg(8, 8, 0), &with_beta), 612);
    }

    #[test]
    fn resource_strictly_increasing() {
        let p = CostModelParams::default();
        for h in 8..28 {
            for w in 8..28 {
                for k in 0..2u8 {
                    let r = resource(&cfg(h, w, k), &p);
                    assert!(resource(&cfg(h + 1, w, k), &p) > r);
                    assert!(resource(&cfg(h, w + 1, k), &p) > r);
                    assert!(resource(&cfg(h, w, k + 1), &p) > r);
                }
            }
        }
    }

    #[test]
    fn params_validation() {
        let p = CostModelParams::default();
        assert!(p.validate().is_ok());
        assert!(CostModelParams { bit_width: 12, ..p }.validate().is_err());
        assert!(CostModelParams { burst_bytes: 48, ..p }.validate().is_err());
        assert!(CostModelParams {
            buffer_capacity_bits: 0,
            ..p
        }
        .validate()
        .is_err());
    }

    #[test]
    fn transfer_rounds_to_bursts() {
        let p = CostModelParams::default();
        assert_eq!(p.transfer(0), 0);
        assert_eq!(p.transfer(1), 512);
        assert_eq!(p.transfer(512), 512);
        assert_eq!(p.transfer(513), 1024);
    }

    #[test]
    fn baseline_normalizes_to_one() {
        let r = simulate_traffic(56, 56, 16, TrafficMode::Baseline, &CostModelParams::default()).unwrap();
        assert_eq!(r.normalized, 1.0);
        // 3 map-sized reads/writes plus an intermediate round trip of the same size
        assert_eq!(r.total_bits, 5 * 802_816);
    }

    #[test]
    fn single_patch_equals_fused() {
        let big = CostModelParams {
            buffer_capacity_bits: u64::MAX,
            ..CostModelParams::default()
        };
        for params in [big, CostModelParams::default()] {
            let fused = simulate_traffic(56, 56, 16, TrafficMode::Fused, &params).unwrap();
            let sliced = simulate_traffic(56, 56, 16, TrafficMode::Sliced(SliceConfig::full(56, 56)), &params).unwrap();
            assert_eq!(sliced.dram_reads_bits, fused.dram_reads_bits);
            assert_eq!(sliced.dram_writes_bits, fused.dram_writes_bits);
            assert_eq!(sliced.normalized, fused.normalized);
        }
    }

    #[test]
    fn fixture_ordering() {
        let p = CostModelParams::default();
        let fused = simulate_traffic(56, 56, 16, TrafficMode::Fused, &p).unwrap();
        let sliced = simulate_traffic(56, 56, 16, TrafficMode::Sliced(cfg(28, 14, 1)), &p).unwrap();
        assert!(sliced.normalized < fused.normalized && fused.normalized < 1.0);
        assert!(sliced.per_patch.iter().all(|t| !t.spilled));
        assert_eq!(sliced.per_patch.len(), 8);
    }

    #[test]
    fn buffer_threshold_is_inclusive() {
        // 8x8 patches with no overlap: 64 pixels * 16 ch * 16 bit = 16384 bits each.
        let exact = CostModelParams {
            buffer_capacity_bits: 16_384,
            ..CostModelParams::default()
        };
        let r = simulate_traffic(16, 16, 16, TrafficMode::Sliced(cfg(8, 8, 0)), &exact).unwrap();
        assert!(r.per_patch.iter().all(|t| !t.spilled));
        let short = CostModelParams {
            buffer_capacity_bits: 16_383,
            ..exact
        };
        let s = simulate_traffic(16, 16, 16, TrafficMode::Sliced(cfg(8, 8, 0)), &short).unwrap();
        assert!(s.per_patch.iter().all(|t| t.spilled));
        assert!(s.total_bits > r.total_bits);
    }

    #[test]
    fn rejects_invalid_inputs() {
        let p = CostModelParams::default();
        assert!(simulate_traffic(0, 4, 4, TrafficMode::Fused, &p).is_err());
        let bad = SliceConfig {
            h_s: 4,
            w_s: 4,
            overlap: 5,
        };
        assert!(simulate_traffic(8, 8, 4, TrafficMode::Sliced(bad), &p).is_err());
    }
}
