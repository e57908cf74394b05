//! Bi-objective evolutionary search over slice configurations, with an
//! exhaustive oracle for small spaces.
//!
//! Each iteration samples a batch (last iteration's offspring topped up with
//! fresh draws from the space), evaluates it, folds resource-feasible
//! candidates into the Pareto archive in configuration order, then breeds
//! offspring from the archive by mutation and crossover.

mod evaluator;
mod pareto;

pub use evaluator::{Evaluator, FidelityEvaluator, Memoized};
pub use pareto::{dominance_audit, Candidate, DominanceAudit, ParetoFront};

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slicer::SliceConfig;

/// Largest space [`brute_force_front`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub h_min: u32,
    pub h_max: u32,
    pub w_min: u32,
    pub w_max: u32,
    pub overlaps: Vec<u8>,
    /// When set to the map's `(H, W)`, only slice sizes dividing it are kept.
    pub divisible_by: Option<(u32, u32)>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            h_min: 8,
            h_max: 28,
            w_min: 8,
            w_max: 28,
            overlaps: vec![0, 1, 2],
            divisible_by: None,
        }
    }
}

impl SearchSpace {
    pub fn singleton(cfg: SliceConfig) -> Self {
        Self {
            h_min: cfg.h_s,
            h_max: cfg.h_s,
            w_min: cfg.w_s,
            w_max: cfg.w_s,
            overlaps: vec![cfg.overlap],
            divisible_by: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_min == 0 || self.w_min == 0 {
            return Err(Error::Invalid("slice extents must be >= 1".into()));
        }
        let mut seen = HashSet::new();
        for &k in &self.overlaps {
            SliceConfig::new(1, 1, k)?;
            if !seen.insert(k) {
                return Err(Error::Invalid(format!("overlap {k} listed twice")));
            }
        }
        if self.is_empty() {
            return Err(Error::Invalid("search space is empty".into()));
        }
        Ok(())
    }

    fn axis(lo: u32, hi: u32, divides: Option<u32>) -> Vec<u32> {
        (lo..=hi).filter(|v| divides.is_none_or(|n| n % v == 0)).collect()
    }

    pub fn h_values(&self) -> Vec<u32> {
        Self::axis(self.h_min, self.h_max, self.divisible_by.map(|d| d.0))
    }

    pub fn w_values(&self) -> Vec<u32> {
        Self::axis(self.w_min, self.w_max, self.divisible_by.map(|d| d.1))
    }

    fn sorted_overlaps(&self) -> Vec<u8> {
        let mut o = self.overlaps.clone();
        o.sort_unstable();
        o
    }

    pub fn len(&self) -> usize {
        self.h_values().len() * self.w_values().len() * self.overlaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All configurations in `(h_s, w_s, overlap)` order.
    pub fn configs(&self) -> Vec<SliceConfig> {
        let ws = self.w_values();
        let ks = self.sorted_overlaps();
        let mut out = Vec::with_capacity(self.len());
        for h_s in self.h_values() {
            for &w_s in &ws {
                for &overlap in &ks {
                    out.push(SliceConfig { h_s, w_s, overlap });
                }
            }
        }
        out
    }

    pub fn contains(&self, cfg: &SliceConfig) -> bool {
        self.h_values().contains(&cfg.h_s) && self.w_values().contains(&cfg.w_s) && self.overlaps.contains(&cfg.overlap)
    }

    /// Moves `h_s` and `w_s` to the nearest allowed value (lower on ties).
    pub fn clip(&self, h_s: i64, w_s: i64, overlap: u8) -> SliceConfig {
        let nearest = |values: Vec<u32>, v: i64| {
            *values
                .iter()
                .min_by_key(|&&a| ((a as i64 - v).abs(), a))
                .expect("non-empty axis")
        };
        SliceConfig {
            h_s: nearest(self.h_values(), h_s),
            w_s: nearest(self.w_values(), w_s),
            overlap,
        }
    }
}

/// Integer step distribution for mutation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutationSpec {
    /// Steps are uniform on `-max_step..=max_step`.
    pub max_step: u32,
    /// Probability that the overlap is re-drawn from the space.
    pub overlap_redraw_prob: f64,
}

impl Default for MutationSpec {
    fn default() -> Self {
        Self {
            max_step: 3,
            overlap_redraw_prob: 1.0 / 3.0,
        }
    }
}

impl MutationSpec {
    /// Leaves every configuration unchanged.
    pub fn identity() -> Self {
        Self {
            max_step: 0,
            overlap_redraw_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub iterations: usize,
    pub sample_size: usize,
    pub crossover_prob: f64,
    pub mutation: MutationSpec,
    pub mutants_per_iteration: usize,
    pub children_per_iteration: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub seed: u64,
    /// Cap on distinct configurations evaluated; unlimited when `None`.
    pub eval_budget: Option<usize>,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            iterations: 50,
            sample_size: 16,
            crossover_prob: 0.5,
            mutation: MutationSpec::default(),
            mutants_per_iteration: 32,
            children_per_iteration: 32,
            r_min: 0.0,
            // resource of 28x28+2 at 16 bits
            r_max: 14_400.0,
            seed: 0,
            eval_budget: None,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Invalid("iterations must be >= 1".into()));
        }
        if self.sample_size < 2 {
            return Err(Error::Invalid("sample_size must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.crossover_prob) {
            return Err(Error::Invalid(format!(
                "crossover_prob {} outside [0, 1]",
                self.crossover_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.mutation.overlap_redraw_prob) {
            return Err(Error::Invalid("overlap_redraw_prob outside [0, 1]".into()));
        }
        if self.r_min.is_nan() || self.r_max.is_nan() || self.r_min > self.r_max {
            return Err(Error::Invalid(format!(
                "resource bounds [{}, {}] are not ordered",
                self.r_min, self.r_max
            )));
        }
        Ok(())
    }

    pub fn feasible(&self, c: &Candidate) -> bool {
        c.f2 >= self.r_min && c.f2 <= self.r_max
    }
}

/// Perturbs `h_s` and `w_s` by independent integer steps, clips them back into
/// the space and re-draws the overlap with probability `overlap_redraw_prob`.
pub fn mutate<R: Rng + ?Sized>(
    cfg: &SliceConfig,
    space: &SearchSpace,
    spec: &MutationSpec,
    rng: &mut R,
) -> SliceConfig {
    let step = spec.max_step as i64;
    let mut draw = || if step == 0 { 0 } else { rng.random_range(-step..=step) };
    let dh = draw();
    let dw = draw();
    let overlap = if spec.overlap_redraw_prob > 0.0 && rng.random_bool(spec.overlap_redraw_prob) {
        *space.overlaps.choose(rng).expect("non-empty overlaps")
    } else {
        cfg.overlap
    };
    space.clip(cfg.h_s as i64 + dh, cfg.w_s as i64 + dw, overlap)
}

/// Takes each of `h_s` and `w_s` from `b` with probability `p`, otherwise from
/// `a`; the overlap comes from a parent chosen uniformly.
pub fn crossover<R: Rng + ?Sized>(a: &SliceConfig, b: &SliceConfig, p: f64, rng: &mut R) -> SliceConfig {
    let h_s = if rng.random_bool(p) { b.h_s } else { a.h_s };
    let w_s = if rng.random_bool(p) { b.w_s } else { a.w_s };
    let overlap = if rng.random_bool(0.5) { b.overlap } else { a.overlap };
    SliceConfig { h_s, w_s, overlap }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub front: ParetoFront,
    /// Every distinct candidate evaluated, sorted by configuration.
    pub evaluated: Vec<Candidate>,
    /// Archive hypervolume after each iteration, reference `(0, r_max)`.
    pub hypervolume: Vec<f64>,
    /// Set when the archive ended empty.
    pub diagnostic: Option<String>,
}

pub fn run_search<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    params: &SearchParams,
    evaluator: &E,
) -> Result<SearchOutcome> {
    run_search_observed(space, params, evaluator, |_, _| {})
}

/// [`run_search`] calling `observe(iteration, archive)` after every archive update.
pub fn run_search_observed<E, F>(
    space: &SearchSpace,
    params: &SearchParams,
    evaluator: &E,
    mut observe: F,
) -> Result<SearchOutcome>
where
    E: Evaluator + ?Sized,
    F: FnMut(usize, &ParetoFront),
{
    space.validate()?;
    params.validate()?;
    let memo = Memoized::new(evaluator);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut unexplored: Vec<SliceConfig> = space.configs();
    let budget = params.eval_budget.unwrap_or(usize::MAX);

    let mut archive = ParetoFront::new();
    let mut offspring: Vec<SliceConfig> = Vec::new();
    let mut hypervolume = Vec::with_capacity(params.iterations);

    for t in 0..params.iterations {
        // selection: unevaluated offspring first, then fresh draws from the space
        let room =
            |batch: &Vec<SliceConfig>| batch.len() < params.sample_size && memo.computed() + batch.len() < budget;
        let mut batch: Vec<SliceConfig> = Vec::with_capacity(params.sample_size);
        for cfg in offspring.drain(..) {
            if !room(&batch) {
                break;
            }
            // cached configs were already offered to the archive
            if !memo.is_cached(&cfg) && !batch.contains(&cfg) {
                batch.push(cfg);
            }
        }
        while room(&batch) && !unexplored.is_empty() {
            let cfg = unexplored.swap_remove(rng.random_range(0..unexplored.len()));
            if !memo.is_cached(&cfg) && !batch.contains(&cfg) {
                batch.push(cfg);
            }
        }

        let mut evaluated = batch
            .par_iter()
            .map(|cfg| memo.evaluate(cfg))
            .collect::<Result<Vec<Candidate>>>()?;
        evaluated.sort_by_key(|c| c.cfg);

        for c in evaluated {
            if params.feasible(&c) {
                archive.insert(c);
            }
        }
        observe(t, &archive);
        hypervolume.push(archive.hypervolume(params.r_max));

        if archive.is_empty() {
            continue;
        }
        let members = archive.members();
        for _ in 0..params.mutants_per_iteration {
            let parent = members.choose(&mut rng).expect("non-empty archive");
            offspring.push(mutate(&parent.cfg, space, &params.mutation, &mut rng));
        }
        for _ in 0..params.children_per_iteration {
            let a = members.choose(&mut rng).expect("non-empty archive");
            let b = members.choose(&mut rng).expect("non-empty archive");
            offspring.push(crossover(&a.cfg, &b.cfg, params.crossover_prob, &mut rng));
        }
    }

    let evaluated = memo.candidates();
    let diagnostic = archive.is_empty().then(|| empty_front_message(&evaluated, params));
    Ok(SearchOutcome {
        front: archive,
        evaluated,
        hypervolume,
        diagnostic,
    })
}

fn empty_front_message(evaluated: &[Candidate], params: &SearchParams) -> String {
    let lo = evaluated.iter().map(|c| c.f2).fold(f64::INFINITY, f64::min);
    let hi = evaluated.iter().map(|c| c.f2).fold(f64::NEG_INFINITY, f64::max);
    format!(
        "no evaluated configuration has resource within [r_min = {}, r_max = {}]; {} configurations evaluated, resource range [{lo}, {hi}]",
        params.r_min,
        params.r_max,
        evaluated.len()
    )
}

/// Exact Pareto front by evaluating every configuration in the space.
pub fn brute_force_front<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &E,
    r_min: f64,
    r_max: f64,
) -> Result<ParetoFront> {
    space.validate()?;
    let size = space.len();
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::SpaceTooLarge {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let candidates = space
        .configs()
        .par_iter()
        .map(|cfg| {
            let (f1, f2) = evaluator.objectives(cfg)?;
            Ok(Candidate::new(*cfg, f1, f2))
        })
        .collect::<Result<Vec<Candidate>>>()?;
    let mut front = ParetoFront::new();
    for c in candidates {
        if c.f2 >= r_min && c.f2 <= r_max {
            front.insert(c);
        }
    }
    Ok(front)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{resource, CostModelParams};

    fn cfg(h: u32, w: u32, k: u8) -> SliceConfig {
        SliceConfig::new(h, w, k).unwrap()
    }

    fn eq3_only(c: &SliceConfig) -> Result<(f64, f64)> {
        Ok((0.5, resource(c, &CostModelParams::default()) as f64))
    }

    #[test]
    fn default_space_size() {
        let s = SearchSpace::default();
        assert_eq!(s.len(), 1323);
        let configs = s.configs();
        assert_eq!(configs.len(), 1323);
        assert!(configs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn divisibility_filter() {
        let s = SearchSpace {
            divisible_by: Some((56, 56)),
            ..SearchSpace::default()
        };
        assert_eq!(s.h_values(), vec![8, 14, 28]);
        assert_eq!(s.len(), 27);
        assert_eq!(s.clip(20, 10, 0), cfg(14, 8, 0));
        assert_eq!(s.clip(21, 100, 1), cfg(14, 28, 1));
    }

    #[test]
    fn params_validation() {
        let p = SearchParams::default();
        assert!(p.validate().is_ok());
        assert!(SearchParams { iterations: 0, ..p }.validate().is_err());
        assert!(SearchParams { sample_size: 1, ..p }.validate().is_err());
        assert!(SearchParams {
            crossover_prob: 1.5,
            ..p
        }
        .validate()
        .is_err());
        assert!(SearchParams {
            r_min: 2.0,
            r_max: 1.0,
            ..p
        }
        .validate()
        .is_err());
    }

    #[test]
    fn identity_mutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = SearchSpace::default();
        for c in s.configs().iter().step_by(37) {
            assert_eq!(mutate(c, &s, &MutationSpec::identity(), &mut rng), *c);
        }
    }

    #[test]
    fn mutation_clips_at_the_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = SearchSpace::default();
        let spec = MutationSpec {
            max_step: 3,
            overlap_redraw_prob: 0.0,
        };
        for _ in 0..200 {
            let m = mutate(&cfg(28, 28, 1), &s, &spec, &mut rng);
            assert!(m.h_s <= 28 && m.w_s <= 28 && m.h_s >= 25 && m.overlap == 1);
        }
        // a step that can only go up stays pinned
        let up = SearchSpace {
            h_min: 8,
            h_max: 8,
            ..SearchSpace::default()
        };
        assert_eq!(mutate(&cfg(8, 8, 0), &up, &spec, &mut rng).h_s, 8);
    }

    #[test]
    fn mutation_histogram_covers_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = SearchSpace::default();
        let spec = MutationSpec {
            max_step: 12,
            ..MutationSpec::default()
        };
        let mut hist = [0usize; 29];
        let centre = cfg(18, 18, 1);
        for _ in 0..10_000 {
            let m = mutate(&centre, &s, &spec, &mut rng);
            assert!(s.contains(&m));
            hist[m.h_s as usize] += 1;
        }
        let covered = (8..=28).filter(|&h| hist[h] > 0).count();
        assert!(covered * 2 > 21, "covered {covered}");
    }

    #[test]
    fn crossover_extremes_and_gene_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (cfg(8, 8, 0), cfg(28, 28, 2));
        for _ in 0..50 {
            let c = crossover(&a, &b, 0.0, &mut rng);
            assert_eq!((c.h_s, c.w_s), (8, 8));
            let c = crossover(&a, &b, 1.0, &mut rng);
            assert_eq!((c.h_s, c.w_s), (28, 28));
        }
        let mut seen = HashSet::new();
        for _ in 0..1000 {
            let c = crossover(&a, &b, 0.5, &mut rng);
            assert!([8, 28].contains(&c.h_s) && [8, 28].contains(&c.w_s) && [0, 2].contains(&c.overlap));
            seen.insert((c.h_s, c.w_s));
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn singleton_space() {
        let only = cfg(12, 9, 1);
        let space = SearchSpace::singleton(only);
        let out = run_search(&space, &SearchParams::default(), &eq3_only).unwrap();
        assert_eq!(out.front.members().len(), 1);
        assert_eq!(out.front.members()[0].cfg, only);
        assert_eq!(brute_force_front(&space, &eq3_only, 0.0, 1e9).unwrap(), out.front);
    }

    #[test]
    fn brute_force_examples() {
        let two = |c: &SliceConfig| Ok(if c.h_s == 8 { (0.9, 1.0) } else { (0.5, 2.0) });
        let space = SearchSpace {
            h_min: 8,
            h_max: 9,
            w_min: 8,
            w_max: 8,
            overlaps: vec![0],
            divisible_by: None,
        };
        let f = brute_force_front(&space, &two, 0.0, 10.0).unwrap();
        assert_eq!(f.len(), 1);

        let f = brute_force_front(&SearchSpace::default(), &eq3_only, 0.0, f64::INFINITY).unwrap();
        assert_eq!(f.members().len(), 1);
        assert_eq!(f.members()[0].cfg, cfg(8, 8, 0));
    }

    #[test]
    fn brute_force_refuses_huge_spaces() {
        let space = SearchSpace {
            h_min: 1,
            h_max: 400,
            w_min: 1,
            w_max: 400,
            ..SearchSpace::default()
        };
        assert!(matches!(
            brute_force_front(&space, &eq3_only, 0.0, 1.0),
            Err(Error::SpaceTooLarge { .. })
        ));
    }

    #[test]
    fn empty_feasible_region_is_reported() {
        let params = SearchParams {
            r_min: 1.0,
            r_max: 2.0,
            iterations: 3,
            ..SearchParams::default()
        };
        let out = run_search(&SearchSpace::default(), &params, &eq3_only).unwrap();
        assert!(out.front.is_empty());
        assert!(out.diagnostic.unwrap().contains("r_min = 1"));
    }

    #[test]
    fn budget_caps_distinct_evaluations() {
        let params = SearchParams {
            eval_budget: Some(40),
            ..SearchParams::default()
        };
        let out = run_search(&SearchSpace::default(), &params, &eq3_only).unwrap();
        assert_eq!(out.evaluated.len(), 40);
    }
}
