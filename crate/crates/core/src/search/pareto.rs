use serde::{Deserialize, Serialize};

use crate::slicer::SliceConfig;

/// A slice configuration with its objective pair: fidelity `f1` (maximised)
/// and resource `f2` (minimised).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub cfg: SliceConfig,
    pub f1: f64,
    pub f2: f64,
    pub evaluated: bool,
}

impl Candidate {
    pub fn new(cfg: SliceConfig, f1: f64, f2: f64) -> Self {
        Self {
            cfg,
            f1,
            f2,
            evaluated: true,
        }
    }

    /// At least as good in both objectives and strictly better in one.
    pub fn dominates(&self, other: &Candidate) -> bool {
        self.f1 >= other.f1 && self.f2 <= other.f2 && (self.f1 > other.f1 || self.f2 < other.f2)
    }

    pub fn same_objectives(&self, other: &Candidate) -> bool {
        self.f1 == other.f1 && self.f2 == other.f2
    }
}

/// Archive of mutually non-dominated candidates.
///
/// Among candidates with identical objective pairs the lexicographically
/// smallest configuration is kept, so the archive contents do not depend on
/// the order in which candidates arrive.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    members: Vec<Candidate>,
}

impl ParetoFront {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `c` unless it is dominated or tied by a smaller config; evicts
    /// members that `c` dominates. Returns whether `c` entered the archive.
    pub fn insert(&mut self, c: Candidate) -> bool {
        for m in &self.members {
            if m.dominates(&c) || (m.same_objectives(&c) && m.cfg <= c.cfg) {
                return false;
            }
        }
        self.members.retain(|m| !(c.dominates(m) || c.same_objectives(m)));
        self.members.push(c);
        self.members.sort_by_key(|c| c.cfg);
        true
    }

    /// Members sorted by `(h_s, w_s, overlap)`.
    pub fn members(&self) -> &[Candidate] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, cfg: &SliceConfig) -> bool {
        self.members.iter().any(|m| &m.cfg == cfg)
    }

    pub fn is_mutually_non_dominated(&self) -> bool {
        self.members.iter().enumerate().all(|(i, a)| {
            self.members
                .iter()
                .enumerate()
                .all(|(j, b)| i == j || (!a.dominates(b) && !a.same_objectives(b)))
        })
    }

    /// Area dominated by the archive inside the box spanned by the reference
    /// point `(f1 = 0, f2 = r_max)`.
    pub fn hypervolume(&self, r_max: f64) -> f64 {
        let mut pts: Vec<(f64, f64)> = self
            .members
            .iter()
            .filter(|m| m.f2 <= r_max && m.f1 > 0.0)
            .map(|m| (m.f2, m.f1))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut area = 0.0;
        let mut best_f1 = 0.0;
        for (f2, f1) in pts {
            if f1 > best_f1 {
                area += (f1 - best_f1) * (r_max - f2);
                best_f1 = f1;
            }
        }
        area
    }
}

/// Cross-check of an evolutionary front against an exhaustive one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceAudit {
    /// `(searched member, oracle member dominating it)` pairs.
    pub dominated: Vec<(Candidate, Candidate)>,
    /// Oracle members the search did not report.
    pub missed: Vec<Candidate>,
    /// Searched members that are not in the oracle front.
    pub extra: Vec<Candidate>,
    pub set_equal: bool,
}

pub fn dominance_audit(found: &ParetoFront, oracle: &ParetoFront) -> DominanceAudit {
    let dominated = found
        .members()
        .iter()
        .filter_map(|m| oracle.members().iter().find(|o| o.dominates(m)).map(|o| (*m, *o)))
        .collect();
    let missed: Vec<Candidate> = oracle
        .members()
        .iter()
        .filter(|o| !found.contains(&o.cfg))
        .copied()
        .collect();
    let extra: Vec<Candidate> = found
        .members()
        .iter()
        .filter(|m| !oracle.contains(&m.cfg))
        .copied()
        .collect();
    let set_equal = missed.is_empty() && extra.is_empty();
    DominanceAudit {
        dominated,
        missed,
        extra,
        set_equal,
    }
}
