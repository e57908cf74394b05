use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{cmd_cost, cmd_forward, cmd_gen, cmd_search, COST_REPORT, FORWARD_REPORT, SEARCH_REPORT};
use crate::config::{RunConfig, SliceMode};
use crate::error::Result;

/// Sliced deformable attention: forward pass, cost model and slice search.
#[derive(Debug, Parser)]
#[command(name = "dattile", version)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,

    #[command(flatten)]
    pub common: CommonArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// FMAP input map instead of a synthetic one.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true)]
    pub input_seed: Option<u64>,
    #[arg(long, global = true)]
    pub channels: Option<usize>,
    #[arg(long, global = true)]
    pub height: Option<usize>,
    #[arg(long, global = true)]
    pub width: Option<usize>,
    /// DATP layer weights instead of synthetic ones.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true)]
    pub layer_seed: Option<u64>,
    #[arg(long, global = true)]
    pub offset_scale: Option<f64>,
    #[arg(long, global = true)]
    pub bit_width: Option<u32>,
    #[arg(long, global = true)]
    pub beta: Option<u64>,
    #[arg(long, global = true)]
    pub buffer_bits: Option<u64>,
    #[arg(long, global = true)]
    pub burst_bytes: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct SliceArgs {
    #[arg(long)]
    pub h_s: Option<u32>,
    #[arg(long)]
    pub w_s: Option<u32>,
    #[arg(long)]
    pub overlap: Option<u8>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the layer on the input and write the output map and a report.
    Forward {
        #[command(flatten)]
        slice: SliceArgs,
        /// Unsliced evaluation.
        #[arg(long)]
        full: bool,
    },
    /// Resource value and DRAM traffic for the configured slice.
    Cost {
        #[command(flatten)]
        slice: SliceArgs,
    },
    /// Evolutionary search for Pareto-optimal slice configurations.
    Search {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        sample_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        r_min: Option<f64>,
        #[arg(long)]
        r_max: Option<f64>,
        /// Maximum number of distinct configurations evaluated.
        #[arg(long)]
        budget: Option<usize>,
        /// Only slice sizes dividing the map extents.
        #[arg(long)]
        divisible: bool,
        /// Compare the front with an exhaustive enumeration.
        #[arg(long)]
        oracle: bool,
    },
    /// Write the input map and layer weights as FMAP/DATP files.
    Gen,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl SliceArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.slice.h_s, self.h_s);
        set(&mut cfg.slice.w_s, self.w_s);
        set(&mut cfg.slice.overlap, self.overlap);
    }
}

impl Cli {
    /// Config file (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let c = &self.common;
        if c.input.is_some() {
            cfg.input.path = c.input.clone();
        }
        set(&mut cfg.input.seed, c.input_seed);
        set(&mut cfg.input.channels, c.channels);
        set(&mut cfg.input.height, c.height);
        set(&mut cfg.input.width, c.width);
        if c.weights.is_some() {
            cfg.layer.weights = c.weights.clone();
        }
        set(&mut cfg.layer.seed, c.layer_seed);
        set(&mut cfg.layer.offset_scale, c.offset_scale);
        set(&mut cfg.cost.bit_width, c.bit_width);
        set(&mut cfg.cost.beta, c.beta);
        set(&mut cfg.cost.buffer_capacity_bits, c.buffer_bits);
        set(&mut cfg.cost.burst_bytes, c.burst_bytes);
        set(&mut cfg.output.dir, self.out.clone());

        match &self.command {
            Command::Forward { slice, full } => {
                slice.apply(&mut cfg);
                if *full {
                    cfg.slice.mode = SliceMode::Full;
                }
            }
            Command::Cost { slice } => slice.apply(&mut cfg),
            Command::Search {
                iterations,
                sample_size,
                seed,
                r_min,
                r_max,
                budget,
                divisible,
                oracle,
            } => {
                let s = &mut cfg.search;
                set(&mut s.iterations, *iterations);
                set(&mut s.sample_size, *sample_size);
                set(&mut s.seed, *seed);
                set(&mut s.r_min, *r_min);
                set(&mut s.r_max, *r_max);
                if budget.is_some() {
                    s.eval_budget = *budget;
                }
                s.divisible |= divisible;
                s.oracle |= oracle;
            }
            Command::Gen => {}
        }
        Ok(cfg)
    }

    /// Runs the command and returns a one-line summary for stdout.
    pub fn run(&self) -> Result<String> {
        let cfg = self.resolve()?;
        let dir = cfg.output.dir.display().to_string();
        Ok(match self.command {
            Command::Forward { .. } => {
                let r = cmd_forward(&cfg)?;
                match r.fidelity {
                    Some(f) => format!(
                        "fidelity {f:.6}, all patches confined: {}; report in {dir}/{FORWARD_REPORT}",
                        r.all_confined
                    ),
                    None => format!("full forward written; report in {dir}/{FORWARD_REPORT}"),
                }
            }
            Command::Cost { .. } => {
                let r = cmd_cost(&cfg)?;
                format!(
                    "resource {} bits; normalized traffic baseline {:.4}, fused {:.4}, sliced {:.4}; report in {dir}/{COST_REPORT}",
                    r.resource, r.normalized.baseline, r.normalized.fused, r.normalized.sliced
                )
            }
            Command::Search { .. } => {
                let r = cmd_search(&cfg)?;
                let mut line = format!(
                    "{} front members from {} evaluations; report in {dir}/{SEARCH_REPORT}",
                    r.front.len(),
                    r.evaluations
                );
                if let Some(a) = &r.audit {
                    line.push_str(&format!(
                        "; oracle audit: set_equal={} dominated={}",
                        a.set_equal, a.dominated
                    ));
                }
                line
            }
            Command::Gen => {
                let (x, w) = cmd_gen(&cfg)?;
                format!("wrote {} and {}", x.display(), w.display())
            }
        })
    }
}
