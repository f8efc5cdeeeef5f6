//! Elite choice and parent-pool sampling. Ties always go to the lower id.

use std::cmp::Ordering;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore};

use super::config::SelectionMethod;
use crate::gene::IndividualId;

/// A selectable member: id and normalized fitness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: IndividualId,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no member of the population can be selected as a parent")]
pub struct NoValidParents;

/// Orders fitter first; equal fitness puts the lower id first.
pub fn fitter_first(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness.total_cmp(&a.fitness).then(a.id.cmp(&b.id))
}

/// The `count` fittest candidates.
pub fn elites(candidates: &[Candidate], count: usize) -> Vec<Candidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(fitter_first);
    sorted.truncate(count);
    sorted
}

/// Fittest of `k` uniform draws with replacement from `candidates`.
pub fn tournament<R: RngCore + ?Sized>(candidates: &[Candidate], k: usize, rng: &mut R) -> Candidate {
    (0..k)
        .map(|_| candidates[rng.gen_range(0..candidates.len())])
        .min_by(fitter_first)
        .expect("tournament size is at least 1")
}

/// Linear rank weights: with `V` candidates, the fittest gets weight `V`,
/// the least fit gets `1`.
pub fn rank_weights(candidates: &[Candidate]) -> Vec<(Candidate, u64)> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(fitter_first);
    let v = sorted.len() as u64;
    sorted.into_iter().enumerate().map(|(rank0, c)| (c, v - rank0 as u64)).collect()
}

/// Draws `size` parents. `candidates` must be in ascending id order so the
/// draw sequence is reproducible.
pub fn parent_pool<R: RngCore + ?Sized>(
    candidates: &[Candidate],
    method: SelectionMethod,
    tournament_size: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<Candidate>, NoValidParents> {
    if candidates.is_empty() {
        return Err(NoValidParents);
    }
    Ok(match method {
        SelectionMethod::Tournament => (0..size).map(|_| tournament(candidates, tournament_size, rng)).collect(),
        SelectionMethod::Rank => {
            let weighted = rank_weights(candidates);
            let dist = WeightedIndex::new(weighted.iter().map(|(_, w)| *w)).expect("rank weights are positive");
            (0..size).map(|_| weighted[dist.sample(rng)].0).collect()
        }
    })
}

/// Parent pair for offspring slot `i`; the pool wraps around.
pub fn pair(pool: &[Candidate], i: usize) -> (Candidate, Candidate) {
    let m = pool.len();
    (pool[(2 * i) % m], pool[(2 * i + 1) % m])
}
