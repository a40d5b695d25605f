//! Controlled random search with local mutation (CRS2-LM).
//!
//! A population of `10·(n_h + 1)` uniform samples evolves by replacing its
//! worst member. Each trial reflects a random member through the centroid of
//! a simplex built around the current best; when the reflection leaves the
//! box or fails to beat the worst member, a mutation towards the best point
//! is tried instead.
//!
//! Every evaluated proposal, including the initial samples, is one
//! iteration, so `max_iterations` bounds the total number of objective
//! calls.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{EvalRecord, Objective, ObjectiveError};
use crate::searchspace::{DecodedConfig, RelaxedPoint, SearchSpace};

/// Consecutive out-of-box reflections tolerated when mutation is disabled.
const MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrsError {
    #[error("the search space has no free dimensions")]
    NoFreeDimensions,
    #[error("population size {population} exceeds the iteration budget {iterations}")]
    BudgetTooSmall { population: usize, iterations: usize },
    #[error("population multiplier must be at least 1")]
    BadMultiplier,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrsConfig {
    pub population_multiplier: usize,
    pub max_iterations: usize,
    pub rng_seed: u64,
    pub mutation_enabled: bool,
}

impl Default for CrsConfig {
    fn default() -> Self {
        Self {
            population_multiplier: 10,
            max_iterations: 300,
            rng_seed: 0,
            mutation_enabled: true,
        }
    }
}

impl CrsConfig {
    pub fn with_seed(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..Self::default()
        }
    }

    pub fn population_size(&self, n_h: usize) -> usize {
        self.population_multiplier * (n_h + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub point: RelaxedPoint,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    members: Vec<Member>,
}

impl Population {
    pub fn new(members: Vec<Member>) -> Self {
        Self { members }
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Lowest f; ties go to the lowest index.
    pub fn best_index(&self) -> usize {
        self.extreme(|a, b| a < b)
    }

    /// Highest f; ties go to the lowest index.
    pub fn worst_index(&self) -> usize {
        self.extreme(|a, b| a > b)
    }

    fn extreme(&self, better: impl Fn(f64, f64) -> bool) -> usize {
        let mut idx = 0;
        for (i, m) in self.members.iter().enumerate().skip(1) {
            if better(m.f, self.members[idx].f) {
                idx = i;
            }
        }
        idx
    }

    pub fn best(&self) -> &Member {
        &self.members[self.best_index()]
    }

    pub fn worst(&self) -> &Member {
        &self.members[self.worst_index()]
    }

    /// Replaces the worst member if `candidate` is strictly better.
    pub fn offer(&mut self, candidate: Member) -> bool {
        let worst = self.worst_index();
        if candidate.f < self.members[worst].f {
            self.members[worst] = candidate;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best_point: RelaxedPoint,
    pub best_decoded: DecodedConfig,
    pub best_f: f64,
    pub best_dice: Option<f64>,
    pub trajectory: Vec<EvalRecord>,
    pub effective_evaluations: usize,
}

impl SearchResult {
    fn from_trajectory(space: &SearchSpace, trajectory: Vec<EvalRecord>) -> Result<Self, CrsError> {
        let best = trajectory
            .iter()
            .fold(None::<&EvalRecord>, |acc, r| match acc {
                Some(b) if b.f <= r.f => Some(b),
                _ => Some(r),
            })
            .expect("a search evaluates at least one point");
        let best_point = best.point.clone();
        let best_f = best.f;
        let best_dice = best.outcome.kind.dice();
        let best_decoded = space.decode(&best_point).map_err(ObjectiveError::from)?;
        let effective_evaluations = trajectory.iter().filter(|r| r.is_effective()).count();
        Ok(Self {
            best_point,
            best_decoded,
            best_f,
            best_dice,
            trajectory,
            effective_evaluations,
        })
    }

    /// Running minimum of f over the trajectory.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.trajectory
            .iter()
            .scan(f64::INFINITY, |best, r| {
                *best = best.min(r.f);
                Some(*best)
            })
            .collect()
    }
}

/// `2·G − x_last` where G is the centroid of the best member and `n_h − 1`
/// distinct random members, and `x_last` is one further distinct random
/// member. The result may lie outside the box.
pub fn propose_trial<R: Rng + ?Sized>(population: &Population, rng: &mut R) -> RelaxedPoint {
    let members = population.members();
    let best = population.best_index();
    let dim = members[best].point.len();
    // n_h distinct indices other than the best
    let picks: Vec<usize> = sample(rng, members.len() - 1, dim)
        .into_iter()
        .map(|i| if i >= best { i + 1 } else { i })
        .collect();
    let (last, rest) = picks.split_last().expect("n_h >= 1");
    let mut centroid = members[best].point.coords().to_vec();
    for &i in rest {
        for (c, x) in centroid.iter_mut().zip(members[i].point.coords()) {
            *c += x;
        }
    }
    for c in centroid.iter_mut() {
        *c /= dim as f64;
    }
    reflect(&centroid, members[*last].point.coords())
}

fn reflect(centroid: &[f64], point: &[f64]) -> RelaxedPoint {
    RelaxedPoint::new(
        centroid
            .iter()
            .zip(point)
            .map(|(g, x)| 2.0 * g - x)
            .collect(),
    )
}

/// `(1 + ω)·best − ω·trial` with `ω` drawn per coordinate from `[0, 1]`.
pub fn mutate_with(best: &RelaxedPoint, trial: &RelaxedPoint, weights: &[f64]) -> RelaxedPoint {
    RelaxedPoint::new(
        best.coords()
            .iter()
            .zip(trial.coords())
            .zip(weights)
            .map(|((b, t), w)| (1.0 + w) * b - w * t)
            .collect(),
    )
}

/// Local mutation around `best`, clamped into the half-open box.
pub fn local_mutation<R: Rng + ?Sized>(
    best: &RelaxedPoint,
    trial: &RelaxedPoint,
    bounds: &[(f64, f64)],
    rng: &mut R,
) -> RelaxedPoint {
    let weights: Vec<f64> = (0..best.len()).map(|_| rng.gen_range(0.0..=1.0)).collect();
    clamp_into(&mutate_with(best, trial, &weights), bounds)
}

/// Clamps every coordinate into `[lower, upper)`.
pub fn clamp_into(point: &RelaxedPoint, bounds: &[(f64, f64)]) -> RelaxedPoint {
    RelaxedPoint::new(
        point
            .coords()
            .iter()
            .zip(bounds)
            .map(|(&x, &(lo, hi))| x.max(lo).min(below(hi)))
            .collect(),
    )
}

/// Largest float strictly below `x`.
fn below(x: f64) -> f64 {
    x.next_down()
}

fn in_box(point: &RelaxedPoint, bounds: &[(f64, f64)]) -> bool {
    point
        .coords()
        .iter()
        .zip(bounds)
        .all(|(&x, &(lo, hi))| x.is_finite() && x >= lo && x < hi)
}

/// Samples and evaluates the initial population, recording each evaluation
/// into `trajectory`.
pub fn initialize_population<O: Objective + ?Sized, R: Rng + ?Sized>(
    space: &SearchSpace,
    config: &CrsConfig,
    objective: &mut O,
    rng: &mut R,
    trajectory: &mut Vec<EvalRecord>,
) -> Result<Population, CrsError> {
    let n_h = space.n_h();
    if n_h == 0 {
        return Err(CrsError::NoFreeDimensions);
    }
    let size = config.population_size(n_h);
    let mut members = Vec::with_capacity(size);
    for _ in 0..size {
        let point = space.sample_uniform(rng);
        let record = objective.evaluate(trajectory.len(), &point)?;
        members.push(Member { point, f: record.f });
        trajectory.push(record);
    }
    Ok(Population::new(members))
}

/// Runs CRS2-LM for `config.max_iterations` evaluations.
pub fn run_search<O: Objective + ?Sized>(
    space: &SearchSpace,
    objective: &mut O,
    config: &CrsConfig,
) -> Result<SearchResult, CrsError> {
    if config.population_multiplier == 0 {
        return Err(CrsError::BadMultiplier);
    }
    let n_h = space.n_h();
    if n_h == 0 {
        return Err(CrsError::NoFreeDimensions);
    }
    let population_size = config.population_size(n_h);
    if population_size > config.max_iterations {
        return Err(CrsError::BudgetTooSmall {
            population: population_size,
            iterations: config.max_iterations,
        });
    }
    let bounds = space.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut trajectory = Vec::with_capacity(config.max_iterations);
    let mut population = initialize_population(space, config, objective, &mut rng, &mut trajectory)?;

    let mut rejections = 0;
    while trajectory.len() < config.max_iterations {
        let trial = propose_trial(&population, &mut rng);
        if in_box(&trial, &bounds) {
            rejections = 0;
            let record = objective.evaluate(trajectory.len(), &trial)?;
            let f = record.f;
            trajectory.push(record);
            if population.offer(Member { point: trial.clone(), f }) {
                continue;
            }
            if trajectory.len() >= config.max_iterations {
                break;
            }
        } else if !config.mutation_enabled {
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                break;
            }
            continue;
        }
        if !config.mutation_enabled {
            continue;
        }
        let best = population.best().point.clone();
        let mutant = local_mutation(&best, &trial, &bounds, &mut rng);
        let record = objective.evaluate(trajectory.len(), &mutant)?;
        let f = record.f;
        trajectory.push(record);
        population.offer(Member { point: mutant, f });
    }
    SearchResult::from_trajectory(space, trajectory)
}

/// Uniform random sampling with the same evaluation budget, as a baseline.
pub fn random_search<O: Objective + ?Sized>(
    space: &SearchSpace,
    objective: &mut O,
    evaluations: usize,
    seed: u64,
) -> Result<SearchResult, CrsError> {
    if space.n_h() == 0 {
        return Err(CrsError::NoFreeDimensions);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectory = Vec::with_capacity(evaluations);
    for i in 0..evaluations.max(1) {
        let point = space.sample_uniform(&mut rng);
        trajectory.push(objective.evaluate(i, &point)?);
    }
    SearchResult::from_trajectory(space, trajectory)
}
