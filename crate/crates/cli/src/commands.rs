use std::fs;
use std::path::{Path, PathBuf};

use dattile_core::attention::{forward_full, SampleTrace};
use dattile_core::cost::{resource, simulate_traffic, TrafficMode, TrafficReport};
use dattile_core::format::{load_tensor, save_params, save_tensor};
use dattile_core::search::{
    brute_force_front, dominance_audit, run_search, Candidate, DominanceAudit, FidelityEvaluator,
};
use dattile_core::slicer::{compare_outputs, forward_sliced, SliceConfig};
use dattile_core::tensor::Rect;
use serde::Serialize;

use crate::config::{RunConfig, SliceMode};
use crate::error::{CliError, Result};
use crate::plot::scatter_svg;

pub const FORWARD_OUTPUT: &str = "forward.fmap";
pub const FORWARD_REPORT: &str = "forward_report.json";
pub const COST_REPORT: &str = "cost_report.json";
pub const FRONT_CSV: &str = "front.csv";
pub const SEARCH_REPORT: &str = "search_report.json";
pub const FRONT_SVG: &str = "front.svg";
pub const GEN_INPUT: &str = "input.fmap";
pub const GEN_WEIGHTS: &str = "layer.datp";

fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStats {
    pub samples: usize,
    pub clamped: usize,
    pub max_offset: f64,
}

impl From<&SampleTrace> for TraceStats {
    fn from(t: &SampleTrace) -> Self {
        Self {
            samples: t.len(),
            clamped: t.clamped(),
            max_offset: t.max_offset(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchStats {
    pub core: Rect,
    pub padded: Rect,
    pub confined: bool,
    #[serde(flatten)]
    pub trace: TraceStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardReport {
    pub config: RunConfig,
    pub mode: SliceMode,
    pub slice: Option<SliceConfig>,
    pub output_file: String,
    pub output_dims: Vec<usize>,
    /// Agreement with the unsliced output; absent in full mode.
    pub fidelity: Option<f64>,
    pub trace: TraceStats,
    pub all_confined: bool,
    pub patches: Vec<PatchStats>,
}

/// Runs the layer once, in full or sliced mode, and writes the output map and
/// a report.
pub fn cmd_forward(cfg: &RunConfig) -> Result<ForwardReport> {
    let dir = prepare(cfg)?;
    let mut cfg = cfg.clone();
    let (x, params) = cfg.materialize()?;
    let (full, full_trace) = forward_full(&x, &params)?;

    let report = match cfg.slice.mode {
        SliceMode::Full => {
            save_tensor(&dir.join(FORWARD_OUTPUT), &full)?;
            ForwardReport {
                mode: SliceMode::Full,
                slice: None,
                output_file: FORWARD_OUTPUT.into(),
                output_dims: full.dims().to_vec(),
                fidelity: None,
                trace: TraceStats::from(&full_trace),
                all_confined: true,
                patches: Vec::new(),
                config: cfg,
            }
        }
        SliceMode::Sliced => {
            let slice = cfg.slice.slice_config()?;
            let sliced = forward_sliced(&x, &params, &slice)?;
            let fidelity = compare_outputs(&full, &sliced, cfg.slice.metric)?;
            save_tensor(&dir.join(FORWARD_OUTPUT), &sliced.output)?;
            let patches: Vec<PatchStats> = sliced
                .traces
                .iter()
                .map(|pt| PatchStats {
                    core: pt.patch.core,
                    padded: pt.patch.padded,
                    confined: pt.confined(),
                    trace: TraceStats::from(&pt.trace),
                })
                .collect();
            let merged = SampleTrace {
                records: sliced
                    .traces
                    .iter()
                    .flat_map(|pt| pt.trace.records.iter().copied())
                    .collect(),
            };
            ForwardReport {
                mode: SliceMode::Sliced,
                slice: Some(slice),
                output_file: FORWARD_OUTPUT.into(),
                output_dims: sliced.output.dims().to_vec(),
                fidelity: Some(fidelity),
                trace: TraceStats::from(&merged),
                all_confined: patches.iter().all(|p| p.confined),
                patches,
                config: cfg,
            }
        }
    };
    write_json(&dir.join(FORWARD_REPORT), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizedTraffic {
    pub baseline: f64,
    pub fused: f64,
    pub sliced: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub config: RunConfig,
    pub slice: SliceConfig,
    pub resource: u64,
    pub normalized: NormalizedTraffic,
    pub baseline: TrafficReport,
    pub fused: TrafficReport,
    pub sliced: TrafficReport,
}

/// Resource formula for the configured slice plus DRAM traffic in all three modes.
pub fn cmd_cost(cfg: &RunConfig) -> Result<CostReport> {
    let dir = prepare(cfg)?;
    let mut cfg = cfg.clone();
    if let Some(p) = &cfg.input.path {
        let (c, h, w) = load_tensor(p)?.chw()?;
        cfg.input.channels = c;
        cfg.input.height = h;
        cfg.input.width = w;
    }
    let slice = cfg.slice.slice_config()?;
    let (c, h, w) = (cfg.input.channels, cfg.input.height, cfg.input.width);
    let run = |mode| simulate_traffic(h, w, c, mode, &cfg.cost);
    let baseline = run(TrafficMode::Baseline)?;
    let fused = run(TrafficMode::Fused)?;
    let sliced = run(TrafficMode::Sliced(slice))?;
    let report = CostReport {
        resource: resource(&slice, &cfg.cost),
        normalized: NormalizedTraffic {
            baseline: baseline.normalized,
            fused: fused.normalized,
            sliced: sliced.normalized,
        },
        slice,
        baseline,
        fused,
        sliced,
        config: cfg,
    };
    write_json(&dir.join(COST_REPORT), &report)?;
    Ok(report)
}

/// One row of the front CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrontRow {
    pub h_s: u32,
    pub w_s: u32,
    pub overlap: u8,
    pub fidelity: f64,
    pub resource: f64,
}

impl From<&Candidate> for FrontRow {
    fn from(c: &Candidate) -> Self {
        Self {
            h_s: c.cfg.h_s,
            w_s: c.cfg.w_s,
            overlap: c.cfg.overlap,
            fidelity: c.f1,
            resource: c.f2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub set_equal: bool,
    pub dominated: usize,
    pub missed: usize,
    pub extra: usize,
    pub oracle_front: Vec<FrontRow>,
    pub detail: DominanceAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchReport {
    pub config: RunConfig,
    pub seed: u64,
    pub space_size: usize,
    pub evaluations: usize,
    pub front: Vec<FrontRow>,
    pub hypervolume: Vec<f64>,
    pub diagnostic: Option<String>,
    pub audit: Option<AuditReport>,
}

/// Evolutionary search over the configured space. Writes the front as CSV,
/// a JSON report and an SVG plot. An empty front still produces the files and
/// then fails with [`CliError::EmptyFeasible`].
pub fn cmd_search(cfg: &RunConfig) -> Result<SearchReport> {
    let dir = prepare(cfg)?;
    let mut cfg = cfg.clone();
    let (x, params) = cfg.materialize()?;
    let space = cfg.search.space(cfg.input.height, cfg.input.width);
    let sp = cfg.search.params();
    let evaluator = FidelityEvaluator::new(x, params, cfg.cost)?.with_metric(cfg.search.metric);
    let outcome = run_search(&space, &sp, &evaluator)?;

    let audit = if cfg.search.oracle {
        let oracle = brute_force_front(&space, &evaluator, sp.r_min, sp.r_max)?;
        let detail = dominance_audit(&outcome.front, &oracle);
        Some(AuditReport {
            set_equal: detail.set_equal,
            dominated: detail.dominated.len(),
            missed: detail.missed.len(),
            extra: detail.extra.len(),
            oracle_front: oracle.members().iter().map(FrontRow::from).collect(),
            detail,
        })
    } else {
        None
    };

    let rows: Vec<FrontRow> = outcome.front.members().iter().map(FrontRow::from).collect();
    let csv_path = dir.join(FRONT_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    if rows.is_empty() {
        w.write_record(["h_s", "w_s", "overlap", "fidelity", "resource"])?;
    }
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;

    let svg = scatter_svg(&outcome.evaluated, outcome.front.members(), sp.r_min, sp.r_max);
    let svg_path = dir.join(FRONT_SVG);
    fs::write(&svg_path, svg).map_err(|e| CliError::io(&svg_path, e))?;

    let report = SearchReport {
        seed: sp.seed,
        space_size: space.len(),
        evaluations: outcome.evaluated.len(),
        front: rows,
        hypervolume: outcome.hypervolume,
        diagnostic: outcome.diagnostic.clone(),
        audit,
        config: cfg,
    };
    write_json(&dir.join(SEARCH_REPORT), &report)?;

    if report.front.is_empty() {
        let (lo, hi) = outcome
            .evaluated
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                (lo.min(c.f2), hi.max(c.f2))
            });
        return Err(CliError::EmptyFeasible(format!(
            "no evaluated configuration satisfies r_min = {} <= resource <= r_max = {}; evaluated resources span [{lo}, {hi}]",
            sp.r_min, sp.r_max
        )));
    }
    Ok(report)
}

/// Writes the configured input map and layer weights as FMAP and DATP files.
pub fn cmd_gen(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let dir = prepare(cfg)?;
    let mut cfg = cfg.clone();
    let (x, params) = cfg.materialize()?;
    let (xp, wp) = (dir.join(GEN_INPUT), dir.join(GEN_WEIGHTS));
    save_tensor(&xp, &x)?;
    save_params(&wp, &params)?;
    Ok((xp, wp))
}
