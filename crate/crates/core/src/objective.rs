//! Objective value, failure penalty and the floor-keyed evaluation cache.
//!
//! The search minimizes `f = −ln(Dice)` with Dice clipped from below at
//! [`DICE_FLOOR`]. Configurations that cannot be trained (illegal block,
//! out of memory, trainer failure) score [`PENALTY`], which is above every
//! value a trained network can reach.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archbuilder::{
    build_network, estimate_resources, ArchConfig, ArchSettings, BuildError, MemoryBudget,
    NetworkIR, ResourceEstimate,
};
use crate::blockgraph::OperationMatrix;
use crate::searchspace::{CacheKey, DecodedConfig, RelaxedPoint, SearchSpace, SpaceError};

pub const DICE_FLOOR: f64 = 1e-4;
/// `⌈−ln(DICE_FLOOR)⌉`.
pub const PENALTY: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("dice {0} is outside [0, 1]")]
    DiceOutOfRange(f64),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("trajectory: {0}")]
    Trajectory(String),
}

/// `−ln(max(dice, 10⁻⁴))`.
pub fn dice_to_objective(dice: f64) -> Result<f64, ObjectiveError> {
    if !(0.0..=1.0).contains(&dice) {
        return Err(ObjectiveError::DiceOutOfRange(dice));
    }
    // `0 - x` rather than `-x`: no -0.0 at dice = 1
    Ok(0.0 - dice.max(DICE_FLOOR).ln())
}

pub fn penalty_value() -> f64 {
    PENALTY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeKind {
    Trained { dice: f64 },
    IllegalStructure,
    OutOfMemory,
    TrainerFailure { detail: String },
}

impl OutcomeKind {
    pub fn label(&self) -> &'static str {
        match self {
            OutcomeKind::Trained { .. } => "trained",
            OutcomeKind::IllegalStructure => "illegal",
            OutcomeKind::OutOfMemory => "oom",
            OutcomeKind::TrainerFailure { .. } => "failure",
        }
    }

    pub fn dice(&self) -> Option<f64> {
        match self {
            OutcomeKind::Trained { dice } => Some(*dice),
            _ => None,
        }
    }

    /// Objective value; trained Dice outside `[0, 1]` counts as a failure.
    pub fn objective(&self) -> f64 {
        match self {
            OutcomeKind::Trained { dice } => dice_to_objective(*dice).unwrap_or(PENALTY),
            _ => PENALTY,
        }
    }

    fn sanitized(self) -> Self {
        match self {
            OutcomeKind::Trained { dice } if !(0.0..=1.0).contains(&dice) => {
                OutcomeKind::TrainerFailure {
                    detail: format!("dice {dice} outside [0, 1]"),
                }
            }
            other => other,
        }
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutcomeKind::Trained { dice } => write!(f, "trained (dice {dice})"),
            OutcomeKind::TrainerFailure { detail } => write!(f, "failure ({detail})"),
            other => f.write_str(other.label()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutcome {
    pub kind: OutcomeKind,
    /// Time the evaluator reports spending; zero for pure evaluators,
    /// pipeline rejections and cache hits.
    pub wall_seconds: f64,
}

impl EvaluationOutcome {
    pub fn instant(kind: OutcomeKind) -> Self {
        Self {
            kind,
            wall_seconds: 0.0,
        }
    }
}

/// What an evaluator gets to look at.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub point: &'a RelaxedPoint,
    pub config: &'a DecodedConfig,
    /// Present for evaluators that score networks.
    pub network: Option<&'a NetworkIR>,
}

/// A source of validation Dice for candidate configurations.
///
/// Implementations must be deterministic in the configuration for the cache
/// to be sound.
pub trait Evaluator {
    fn id(&self) -> &str;

    /// Whether candidates must pass the legality and memory checks and carry
    /// a built network. Analytic landscapes score raw points and opt out.
    fn requires_network(&self) -> bool {
        true
    }

    fn evaluate(&mut self, candidate: &Candidate<'_>) -> EvaluationOutcome;
}

impl<E: Evaluator + ?Sized> Evaluator for &mut E {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn requires_network(&self) -> bool {
        (**self).requires_network()
    }

    fn evaluate(&mut self, candidate: &Candidate<'_>) -> EvaluationOutcome {
        (**self).evaluate(candidate)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn requires_network(&self) -> bool {
        (**self).requires_network()
    }

    fn evaluate(&mut self, candidate: &Candidate<'_>) -> EvaluationOutcome {
        (**self).evaluate(candidate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub f: f64,
    pub outcome: OutcomeKind,
}

/// Objective values keyed by decoded configuration. Each key is written once.
#[derive(Debug, Clone, Default)]
pub struct EvalCache {
    entries: HashMap<CacheKey, CacheEntry>,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &CacheKey) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    /// Returns `false` and leaves the stored entry untouched if `key` exists.
    pub fn insert(&mut self, key: CacheKey, entry: CacheEntry) -> bool {
        use std::collections::hash_map::Entry;
        match self.entries.entry(key) {
            Entry::Occupied(_) => false,
            Entry::Vacant(v) => {
                v.insert(entry);
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One optimizer proposal and how it scored.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub iteration: usize,
    pub point: RelaxedPoint,
    pub key: CacheKey,
    pub outcome: EvaluationOutcome,
    pub f: f64,
    pub cache_hit: bool,
}

impl EvalRecord {
    /// A freshly trained network, as opposed to a penalty or a cache hit.
    pub fn is_effective(&self) -> bool {
        !self.cache_hit && matches!(self.outcome.kind, OutcomeKind::Trained { .. })
    }
}

/// Anything the optimizer can ask for an objective value.
pub trait Objective {
    fn evaluate(&mut self, iteration: usize, point: &RelaxedPoint) -> Result<EvalRecord, ObjectiveError>;
}

/// Counters kept by [`EvalPipeline`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub cache_hits: usize,
    pub pipeline_runs: usize,
    pub evaluator_calls: usize,
}

/// Decode → cache lookup → legality → build → memory check → evaluator,
/// with every fresh result cached under its floor key.
pub struct EvalPipeline<'s, E> {
    space: &'s SearchSpace,
    evaluator: E,
    cache: EvalCache,
    arch: ArchSettings,
    budget: MemoryBudget,
    stats: PipelineStats,
}

impl<'s, E: Evaluator> EvalPipeline<'s, E> {
    pub fn new(space: &'s SearchSpace, evaluator: E, arch: ArchSettings, budget: MemoryBudget) -> Self {
        Self {
            space,
            evaluator,
            cache: EvalCache::new(),
            arch,
            budget,
            stats: PipelineStats::default(),
        }
    }

    pub fn with_cache(mut self, cache: EvalCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn space(&self) -> &SearchSpace {
        self.space
    }

    pub fn cache(&self) -> &EvalCache {
        &self.cache
    }

    pub fn into_cache(self) -> EvalCache {
        self.cache
    }

    pub fn evaluator(&self) -> &E {
        &self.evaluator
    }

    pub fn stats(&self) -> PipelineStats {
        self.stats
    }

    pub fn arch_settings(&self) -> &ArchSettings {
        &self.arch
    }

    pub fn budget(&self) -> &MemoryBudget {
        &self.budget
    }

    /// Builds the network for `config` and prices it, or explains why not.
    pub fn realize(&self, config: &DecodedConfig) -> Result<(NetworkIR, ResourceEstimate), BuildError> {
        let ir = build_network(&ArchConfig::new(config.clone(), &self.arch))?;
        let estimate = estimate_resources(&ir, &self.budget);
        Ok((ir, estimate))
    }

    pub fn evaluate_point(&mut self, iteration: usize, point: &RelaxedPoint) -> Result<EvalRecord, ObjectiveError> {
        let config = self.space.decode(point)?;
        let key = config.canonical_key();
        if let Some(hit) = self.cache.get(&key) {
            self.stats.cache_hits += 1;
            return Ok(EvalRecord {
                iteration,
                point: point.clone(),
                key,
                outcome: EvaluationOutcome::instant(hit.outcome.clone()),
                f: hit.f,
                cache_hit: true,
            });
        }
        self.stats.pipeline_runs += 1;
        let outcome = self.run_pipeline(point, &config);
        let f = outcome.kind.objective();
        self.cache.insert(
            key.clone(),
            CacheEntry {
                f,
                outcome: outcome.kind.clone(),
            },
        );
        Ok(EvalRecord {
            iteration,
            point: point.clone(),
            key,
            outcome,
            f,
            cache_hit: false,
        })
    }

    fn run_pipeline(&mut self, point: &RelaxedPoint, config: &DecodedConfig) -> EvaluationOutcome {
        if !self.evaluator.requires_network() {
            self.stats.evaluator_calls += 1;
            let candidate = Candidate { point, config, network: None };
            let mut outcome = self.evaluator.evaluate(&candidate);
            outcome.kind = outcome.kind.sanitized();
            return outcome;
        }
        let legal = OperationMatrix::from_ops(&config.ops, config.nodes)
            .map(|m| m.validate().is_legal())
            .unwrap_or(false);
        if !legal {
            return EvaluationOutcome::instant(OutcomeKind::IllegalStructure);
        }
        let ir = match self.realize(config) {
            Ok((_, estimate)) if estimate.oom => {
                return EvaluationOutcome::instant(OutcomeKind::OutOfMemory)
            }
            Ok((ir, _)) => ir,
            Err(BuildError::IllegalBlock(_)) | Err(BuildError::Block(_)) => {
                return EvaluationOutcome::instant(OutcomeKind::IllegalStructure)
            }
            Err(e) => {
                return EvaluationOutcome::instant(OutcomeKind::TrainerFailure {
                    detail: format!("network could not be built: {e}"),
                })
            }
        };
        self.stats.evaluator_calls += 1;
        let candidate = Candidate {
            point,
            config,
            network: Some(&ir),
        };
        let mut outcome = self.evaluator.evaluate(&candidate);
        outcome.kind = outcome.kind.sanitized();
        outcome
    }
}

impl<E: Evaluator> Objective for EvalPipeline<'_, E> {
    fn evaluate(&mut self, iteration: usize, point: &RelaxedPoint) -> Result<EvalRecord, ObjectiveError> {
        self.evaluate_point(iteration, point)
    }
}

/// Column order of the trajectory CSV.
pub const TRAJECTORY_HEADER: [&str; 7] = [
    "iteration",
    "key",
    "outcome",
    "f",
    "dice",
    "cache_hit",
    "wall_seconds",
];

/// A trajectory CSV row as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub key: CacheKey,
    pub outcome: String,
    pub f: f64,
    pub dice: Option<f64>,
    pub cache_hit: bool,
    pub wall_seconds: f64,
}

impl TrajectoryRow {
    pub fn is_effective(&self) -> bool {
        !self.cache_hit && self.outcome == "trained"
    }
}

/// Writes one row per record. Floats use the shortest representation that
/// parses back to the same value.
pub fn write_trajectory<W: std::io::Write>(out: W, records: &[EvalRecord]) -> Result<(), ObjectiveError> {
    let err = |e: csv::Error| ObjectiveError::Trajectory(e.to_string());
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(TRAJECTORY_HEADER).map_err(err)?;
    for r in records {
        writer
            .write_record([
                r.iteration.to_string(),
                r.key.to_string(),
                r.outcome.kind.label().to_string(),
                r.f.to_string(),
                r.outcome.kind.dice().map(|d| d.to_string()).unwrap_or_default(),
                u8::from(r.cache_hit).to_string(),
                r.outcome.wall_seconds.to_string(),
            ])
            .map_err(err)?;
    }
    writer.flush().map_err(|e| ObjectiveError::Trajectory(e.to_string()))
}

pub fn write_trajectory_file(path: &Path, records: &[EvalRecord]) -> Result<(), ObjectiveError> {
    let file = std::fs::File::create(path).map_err(|e| ObjectiveError::Trajectory(format!("{}: {e}", path.display())))?;
    write_trajectory(std::io::BufWriter::new(file), records)
}

pub fn read_trajectory<R: std::io::Read>(input: R) -> Result<Vec<TrajectoryRow>, ObjectiveError> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| ObjectiveError::Trajectory(e.to_string()))?
        .clone();
    if headers.iter().ne(TRAJECTORY_HEADER) {
        return Err(ObjectiveError::Trajectory(format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ObjectiveError::Trajectory(e.to_string()))?;
        let bad = |what: &str| ObjectiveError::Trajectory(format!("row {}: bad {what}", line + 1));
        let float = |i: usize, what: &str| record[i].parse::<f64>().map_err(|_| bad(what));
        rows.push(TrajectoryRow {
            iteration: record[0].parse().map_err(|_| bad("iteration"))?,
            key: CacheKey::from(record[1].to_string()),
            outcome: record[2].to_string(),
            f: float(3, "f")?,
            dice: if record[4].is_empty() { None } else { Some(float(4, "dice")?) },
            cache_hit: match &record[5] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("cache_hit")),
            },
            wall_seconds: float(6, "wall_seconds")?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed {
        dice: f64,
        calls: usize,
    }

    impl Evaluator for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }

        fn evaluate(&mut self, _: &Candidate<'_>) -> EvaluationOutcome {
            self.calls += 1;
            EvaluationOutcome::instant(OutcomeKind::Trained { dice: self.dice })
        }
    }

    fn small_arch() -> ArchSettings {
        ArchSettings {
            input_shape: [32; 3],
            in_channels: 1,
            num_classes: 3,
        }
    }

    #[test]
    fn objective_values() {
        assert_eq!(dice_to_objective(1.0).unwrap(), 0.0);
        assert!(dice_to_objective(1.0).unwrap().is_sign_positive());
        assert!((dice_to_objective(1e-4).unwrap() - 9.21034).abs() < 1e-5);
        assert_eq!(dice_to_objective(0.0).unwrap(), dice_to_objective(1e-4).unwrap());
        assert_eq!(dice_to_objective(1e-9).unwrap(), dice_to_objective(1e-4).unwrap());
        assert!((dice_to_objective(0.82).unwrap() - 0.19845).abs() < 1e-5);
        assert!((dice_to_objective(0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(dice_to_objective(1.01).is_err());
        assert!(dice_to_objective(-0.1).is_err());
        assert!(dice_to_objective(f64::NAN).is_err());
    }

    #[test]
    fn penalty_is_ceiling_of_worst_objective() {
        assert_eq!(penalty_value(), 10.0);
        assert_eq!((-DICE_FLOOR.ln()).ceil(), penalty_value());
        assert!(penalty_value() > dice_to_objective(0.0).unwrap());
    }

    #[test]
    fn objective_is_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let dice = DICE_FLOOR + (1.0 - DICE_FLOOR) * i as f64 / 1000.0;
            let f = dice_to_objective(dice).unwrap();
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn equal_floors_hit_the_cache() {
        let space = SearchSpace::preset("segnas4").unwrap();
        let mut pipeline = EvalPipeline::new(&space, Fixed { dice: 0.5, calls: 0 }, small_arch(), MemoryBudget::default());
        let a = pipeline.evaluate_point(0, &RelaxedPoint::new(vec![8.2, 2.5, 0.1, 1.7])).unwrap();
        let b = pipeline.evaluate_point(1, &RelaxedPoint::new(vec![8.9, 2.0, 0.9, 1.0])).unwrap();
        assert!(!a.cache_hit);
        assert!(b.cache_hit);
        assert_eq!(a.f, b.f);
        assert!((a.f - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(pipeline.evaluator().calls, 1);
        assert!(a.is_effective());
        assert!(!b.is_effective());
    }

    #[test]
    fn illegal_block_is_penalized_without_evaluation() {
        // nodes 4 with ops (1,3), (2,4), (3,4): node 2 has no parent
        let space = SearchSpace::preset("segnas11").unwrap();
        let point = RelaxedPoint::new(vec![8.0, 2.0, 0.0, 0.0, 4.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0]);
        let mut pipeline = EvalPipeline::new(&space, Fixed { dice: 0.9, calls: 0 }, small_arch(), MemoryBudget::default());
        let record = pipeline.evaluate_point(0, &point).unwrap();
        assert_eq!(record.outcome.kind, OutcomeKind::IllegalStructure);
        assert_eq!(record.f, PENALTY);
        assert_eq!(pipeline.evaluator().calls, 0);
    }

    #[test]
    fn memory_overflow_is_penalized() {
        let space = SearchSpace::preset("segnas4").unwrap();
        let budget = MemoryBudget { budget_bytes: 1024, ..Default::default() };
        let mut pipeline = EvalPipeline::new(&space, Fixed { dice: 0.9, calls: 0 }, small_arch(), budget);
        let record = pipeline.evaluate_point(0, &RelaxedPoint::new(vec![8.0, 2.0, 0.0, 0.0])).unwrap();
        assert_eq!(record.outcome.kind, OutcomeKind::OutOfMemory);
        assert_eq!(record.f, PENALTY);
        assert_eq!(pipeline.evaluator().calls, 0);
    }

    #[test]
    fn out_of_range_dice_is_a_failure() {
        let space = SearchSpace::preset("segnas4").unwrap();
        let mut pipeline = EvalPipeline::new(&space, Fixed { dice: 1.5, calls: 0 }, small_arch(), MemoryBudget::default());
        let record = pipeline.evaluate_point(0, &RelaxedPoint::new(vec![8.0, 2.0, 0.0, 0.0])).unwrap();
        assert!(matches!(record.outcome.kind, OutcomeKind::TrainerFailure { .. }));
        assert_eq!(record.f, PENALTY);
    }

    #[test]
    fn out_of_bounds_point_is_an_error() {
        let space = SearchSpace::preset("segnas4").unwrap();
        let mut pipeline = EvalPipeline::new(&space, Fixed { dice: 0.5, calls: 0 }, small_arch(), MemoryBudget::default());
        assert!(matches!(
            pipeline.evaluate_point(0, &RelaxedPoint::new(vec![7.0, 2.0, 0.0, 0.0])),
            Err(ObjectiveError::Space(SpaceError::OutOfBounds { .. }))
        ));
    }

    #[test]
    fn cache_insert_is_once_only() {
        let mut cache = EvalCache::new();
        let key = CacheKey::from("k".to_string());
        assert!(cache.insert(key.clone(), CacheEntry { f: 1.0, outcome: OutcomeKind::OutOfMemory }));
        assert!(!cache.insert(key.clone(), CacheEntry { f: 2.0, outcome: OutcomeKind::IllegalStructure }));
        assert_eq!(cache.get(&key).unwrap().f, 1.0);
    }

    #[test]
    fn trajectory_csv_round_trips() {
        let space = SearchSpace::preset("segnas4").unwrap();
        let mut pipeline = EvalPipeline::new(&space, Fixed { dice: 0.3, calls: 0 }, small_arch(), MemoryBudget::default());
        let records: Vec<_> = [vec![8.5, 2.5, 0.5, 0.5], vec![8.0, 2.9, 0.2, 0.1], vec![30.0, 5.0, 1.0, 1.0]]
            .into_iter()
            .enumerate()
            .map(|(i, c)| pipeline.evaluate_point(i, &RelaxedPoint::new(c)).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,key,outcome,f,dice,cache_hit,wall_seconds\n"));
        assert!(text.contains("\"n=8;p=2;sup=0;res=0;nodes=3;ops=2,0,2\""));
        let rows = read_trajectory(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 3);
        for (row, rec) in rows.iter().zip(&records) {
            assert_eq!(row.f.to_bits(), rec.f.to_bits());
            assert_eq!(row.key, rec.key);
            assert_eq!(row.cache_hit, rec.cache_hit);
            assert_eq!(row.dice, rec.outcome.kind.dice());
        }
        assert!(rows[1].cache_hit);
    }
}
