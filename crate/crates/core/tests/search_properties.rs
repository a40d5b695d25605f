use proptest::prelude::*;

use crsnas::archbuilder::{ArchSettings, MemoryBudget};
use crsnas::crs::{run_search, CrsConfig};
use crsnas::objective::{
    Candidate, EvalPipeline, EvalRecord, EvaluationOutcome, Evaluator, Objective, ObjectiveError, OutcomeKind,
};
use crsnas::{AnalyticEvaluator, Landscape, RelaxedPoint, SearchSpace, SurrogateEvaluator};

/// Uncached objective straight from a closure over the relaxed point.
struct FnObjective<F>(F);

impl<F: FnMut(&RelaxedPoint) -> f64> Objective for FnObjective<F> {
    fn evaluate(&mut self, iteration: usize, point: &RelaxedPoint) -> Result<EvalRecord, ObjectiveError> {
        let f = (self.0)(point);
        Ok(EvalRecord {
            iteration,
            point: point.clone(),
            key: format!("{iteration}").into(),
            outcome: EvaluationOutcome::instant(OutcomeKind::Trained { dice: (-f).exp() }),
            f,
            cache_hit: false,
        })
    }
}

fn in_box(point: &RelaxedPoint, bounds: &[(f64, f64)]) -> bool {
    point.coords().iter().zip(bounds).all(|(&x, &(lo, hi))| lo <= x && x < hi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trajectory_invariants(seed in any::<u64>(), mutation in any::<bool>(), space_idx in 0usize..3) {
        let name = ["segnas11", "segnas4", "segnas7"][space_idx];
        let space = SearchSpace::preset(name).unwrap();
        let bounds = space.bounds();
        let crs = CrsConfig { max_iterations: 150, mutation_enabled: mutation, ..CrsConfig::with_seed(seed) };
        let evaluator = AnalyticEvaluator::new(Landscape::Rastrigin, &space);
        let mut pipeline = EvalPipeline::new(&space, evaluator, ArchSettings::default(), MemoryBudget::default());
        let result = run_search(&space, &mut pipeline, &crs).unwrap();
        if mutation {
            prop_assert_eq!(result.trajectory.len(), 150);
        }
        prop_assert!(result.trajectory.iter().all(|r| in_box(&r.point, &bounds)));
        let curve = result.best_so_far();
        prop_assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(*curve.last().unwrap(), result.best_f);
        prop_assert!(result.effective_evaluations <= 150);
        for (i, r) in result.trajectory.iter().enumerate() {
            prop_assert_eq!(r.iteration, i);
        }
    }
}

#[test]
fn fixed_seed_reproduces_the_trajectory() {
    let space = SearchSpace::preset("segnas11").unwrap();
    let crs = CrsConfig::with_seed(42);
    let run = || {
        let mut pipeline = EvalPipeline::new(
            &space,
            SurrogateEvaluator::default(),
            ArchSettings::default(),
            MemoryBudget::default(),
        );
        run_search(&space, &mut pipeline, &crs).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |r: &crsnas::SearchResult| -> Vec<(Vec<u64>, u64)> {
        r.trajectory
            .iter()
            .map(|t| (t.point.coords().iter().map(|x| x.to_bits()).collect(), t.f.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    let c = {
        let mut pipeline = EvalPipeline::new(&space, SurrogateEvaluator::default(), ArchSettings::default(), MemoryBudget::default());
        run_search(&space, &mut pipeline, &CrsConfig::with_seed(43)).unwrap()
    };
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn surrogate_search_has_some_but_not_all_effective_evaluations() {
    let space = SearchSpace::preset("segnas11").unwrap();
    for seed in 0..3 {
        let mut pipeline = EvalPipeline::new(&space, SurrogateEvaluator::default(), ArchSettings::default(), MemoryBudget::default());
        let result = run_search(&space, &mut pipeline, &CrsConfig::with_seed(seed)).unwrap();
        assert!(result.effective_evaluations > 0);
        assert!(result.effective_evaluations < 300);
        assert!(result.best_dice.is_some());
        assert!(result.best_f < 1.0, "seed {seed}: best f {}", result.best_f);
    }
}

/// Rejects nine in ten configurations by key hash.
struct MostlyIllegal;

impl Evaluator for MostlyIllegal {
    fn id(&self) -> &str {
        "mostly-illegal"
    }
    fn requires_network(&self) -> bool {
        false
    }
    fn evaluate(&mut self, candidate: &Candidate<'_>) -> EvaluationOutcome {
        let key = candidate.config.canonical_key();
        let hash = key.as_str().bytes().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        let kind = if hash % 10 == 0 {
            OutcomeKind::Trained { dice: (candidate.config.n as f64) / 40.0 }
        } else {
            OutcomeKind::IllegalStructure
        };
        EvaluationOutcome::instant(kind)
    }
}

#[test]
fn penalty_heavy_landscape_still_finds_a_legal_best() {
    let space = SearchSpace::preset("segnas11").unwrap();
    let mut pipeline = EvalPipeline::new(&space, MostlyIllegal, ArchSettings::default(), MemoryBudget::default());
    let result = run_search(&space, &mut pipeline, &CrsConfig::with_seed(8)).unwrap();
    assert_eq!(result.trajectory.len(), 300);
    let legal: Vec<&EvalRecord> = result.trajectory.iter().filter(|r| r.f < 10.0).collect();
    assert!(!legal.is_empty());
    let best_legal = legal.iter().map(|r| r.f).fold(f64::INFINITY, f64::min);
    assert_eq!(result.best_f, best_legal);
    assert!(result.best_dice.is_some());
}

#[test]
fn constant_objective_keeps_the_first_best() {
    let space = SearchSpace::preset("segnas4").unwrap();
    let mut objective = FnObjective(|_: &RelaxedPoint| 3.0);
    let result = run_search(&space, &mut objective, &CrsConfig::with_seed(1)).unwrap();
    assert_eq!(result.best_f, 3.0);
    assert_eq!(result.best_point, result.trajectory[0].point);
}

#[test]
fn sphere_search_improves_on_the_initial_population() {
    let space = SearchSpace::preset("segnas11").unwrap();
    let bounds = space.bounds();
    let mut ratios = Vec::new();
    for seed in 0..20 {
        let mut objective = FnObjective(|p: &RelaxedPoint| {
            -crsnas::evaluators::analytic_evaluate(Landscape::Sphere, p, &bounds).ln()
        });
        let result = run_search(&space, &mut objective, &CrsConfig::with_seed(seed)).unwrap();
        let curve = result.best_so_far();
        ratios.push(curve[299] / curve[119]);
    }
    ratios.sort_by(f64::total_cmp);
    let median = (ratios[9] + ratios[10]) / 2.0;
    assert!(median < 0.6, "median best/initial-best {median}");
}
