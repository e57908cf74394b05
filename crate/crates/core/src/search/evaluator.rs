use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use crate::attention::{forward_full, DeformAttnParams};
use crate::cost::{resource, CostModelParams};
use crate::error::Result;
use crate::slicer::{compare_outputs, forward_sliced, FidelityMetric, SliceConfig};
use crate::tensor::Tensor;

use super::pareto::Candidate;

/// Maps a slice configuration to `(fidelity, resource)`.
pub trait Evaluator: Sync {
    fn objectives(&self, cfg: &SliceConfig) -> Result<(f64, f64)>;
}

impl<F> Evaluator for F
where
    F: Fn(&SliceConfig) -> Result<(f64, f64)> + Sync,
{
    fn objectives(&self, cfg: &SliceConfig) -> Result<(f64, f64)> {
        self(cfg)
    }
}

/// Fidelity of the sliced layer on a fixed input, resource from the cost formula.
pub struct FidelityEvaluator {
    x: Tensor,
    params: DeformAttnParams,
    full: Tensor,
    cost: CostModelParams,
    metric: FidelityMetric,
}

impl FidelityEvaluator {
    pub fn new(x: Tensor, params: DeformAttnParams, cost: CostModelParams) -> Result<Self> {
        let (full, _) = forward_full(&x, &params)?;
        Ok(Self {
            x,
            params,
            full,
            cost,
            metric: FidelityMetric::RelativeL2,
        })
    }

    pub fn with_metric(mut self, metric: FidelityMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn full_output(&self) -> &Tensor {
        &self.full
    }
}

impl Evaluator for FidelityEvaluator {
    fn objectives(&self, cfg: &SliceConfig) -> Result<(f64, f64)> {
        let sliced = forward_sliced(&self.x, &self.params, cfg)?;
        let f1 = compare_outputs(&self.full, &sliced, self.metric)?;
        Ok((f1, resource(cfg, &self.cost) as f64))
    }
}

/// Caches objective pairs per configuration. Safe to share across threads.
pub struct Memoized<'a, E: ?Sized> {
    inner: &'a E,
    table: RwLock<HashMap<SliceConfig, (f64, f64)>>,
    computed: AtomicUsize,
}

impl<'a, E: Evaluator + ?Sized> Memoized<'a, E> {
    pub fn new(inner: &'a E) -> Self {
        Self {
            inner,
            table: RwLock::new(HashMap::new()),
            computed: AtomicUsize::new(0),
        }
    }

    pub fn evaluate(&self, cfg: &SliceConfig) -> Result<Candidate> {
        if let Some(&(f1, f2)) = self.table.read().expect("memo lock").get(cfg) {
            return Ok(Candidate::new(*cfg, f1, f2));
        }
        let (f1, f2) = self.inner.objectives(cfg)?;
        let mut table = self.table.write().expect("memo lock");
        if table.insert(*cfg, (f1, f2)).is_none() {
            self.computed.fetch_add(1, Ordering::Relaxed);
        }
        Ok(Candidate::new(*cfg, f1, f2))
    }

    pub fn is_cached(&self, cfg: &SliceConfig) -> bool {
        self.table.read().expect("memo lock").contains_key(cfg)
    }

    /// Number of distinct configurations evaluated so far.
    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    /// Every cached candidate, sorted by configuration.
    pub fn candidates(&self) -> Vec<Candidate> {
        let mut all: Vec<Candidate> = self
            .table
            .read()
            .expect("memo lock")
            .iter()
            .map(|(cfg, &(f1, f2))| Candidate::new(*cfg, f1, f2))
            .collect();
        all.sort_by_key(|c| c.cfg);
        all
    }
}
