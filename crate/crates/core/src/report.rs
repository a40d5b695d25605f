//! Run artifacts: the manifest, best-network JSON and plot series.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archbuilder::{ArchSettings, MemoryBudget};
use crate::crs::{CrsConfig, SearchResult};
use crate::evaluators::EvaluatorBinding;
use crate::objective::{write_trajectory_file, TrajectoryRow};
use crate::searchspace::SpaceDefinition;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const BEST_IR_FILE: &str = "best_ir.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_key: String,
    pub best_f: f64,
    pub best_dice: Option<f64>,
    pub effective_evaluations: usize,
    pub iterations: usize,
}

/// Everything needed to replay a search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub space: String,
    pub space_definition: SpaceDefinition,
    pub seed: u64,
    pub iterations: usize,
    pub population_multiplier: usize,
    pub mutation: bool,
    pub evaluator: EvaluatorBinding,
    pub budget_bytes: u64,
    pub element_bytes: u64,
    pub batch_per_device: u64,
    pub architecture: ArchSettings,
    pub summary: RunSummary,
}

impl RunManifest {
    pub fn new(
        space: SpaceDefinition,
        crs: &CrsConfig,
        evaluator: EvaluatorBinding,
        arch: &ArchSettings,
        budget: &MemoryBudget,
        result: &SearchResult,
    ) -> Self {
        Self {
            space: space.variant.clone(),
            space_definition: space,
            seed: crs.rng_seed,
            iterations: crs.max_iterations,
            population_multiplier: crs.population_multiplier,
            mutation: crs.mutation_enabled,
            evaluator,
            budget_bytes: budget.budget_bytes,
            element_bytes: budget.element_bytes,
            batch_per_device: budget.batch_per_device,
            architecture: arch.clone(),
            summary: RunSummary {
                best_key: result.best_decoded.canonical_key().to_string(),
                best_f: result.best_f,
                best_dice: result.best_dice,
                effective_evaluations: result.effective_evaluations,
                iterations: result.trajectory.len(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Paths written by [`write_run`].
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub manifest: PathBuf,
    pub trajectory: PathBuf,
    pub best_ir: Option<PathBuf>,
}

/// Writes manifest, trajectory and, when given, the best network into `dir`.
pub fn write_run(
    dir: &Path,
    manifest: &RunManifest,
    result: &SearchResult,
    best_ir_json: Option<&str>,
) -> anyhow::Result<RunPaths> {
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, manifest.to_json() + "\n")?;
    let trajectory = dir.join(TRAJECTORY_FILE);
    write_trajectory_file(&trajectory, &result.trajectory)?;
    let best_ir = match best_ir_json {
        Some(json) => {
            let path = dir.join(BEST_IR_FILE);
            std::fs::write(&path, json.to_string() + "\n")?;
            Some(path)
        }
        None => None,
    };
    Ok(RunPaths {
        manifest: manifest_path,
        trajectory,
        best_ir,
    })
}

/// One row of the plot series.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub iteration: usize,
    pub outcome: String,
    pub f: f64,
    pub best_f: f64,
    pub dice: Option<f64>,
    pub best_dice: Option<f64>,
    pub cache_hit: bool,
    /// Running count of fresh trained evaluations.
    pub effective: usize,
}

pub fn plot_series(rows: &[TrajectoryRow]) -> Vec<PlotPoint> {
    let mut best_f = f64::INFINITY;
    let mut best_dice: Option<f64> = None;
    let mut effective = 0;
    rows.iter()
        .map(|row| {
            best_f = best_f.min(row.f);
            if let Some(d) = row.dice {
                best_dice = Some(best_dice.map_or(d, |b| b.max(d)));
            }
            if row.is_effective() {
                effective += 1;
            }
            PlotPoint {
                iteration: row.iteration,
                outcome: row.outcome.clone(),
                f: row.f,
                best_f,
                dice: row.dice,
                best_dice,
                cache_hit: row.cache_hit,
                effective,
            }
        })
        .collect()
}

pub fn write_plot_series<W: Write>(out: W, series: &[PlotPoint]) -> anyhow::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record([
        "iteration",
        "outcome",
        "f",
        "best_f",
        "dice",
        "best_dice",
        "cache_hit",
        "effective",
    ])?;
    let opt = |v: Option<f64>| v.map(|d| d.to_string()).unwrap_or_default();
    for p in series {
        writer.write_record([
            p.iteration.to_string(),
            p.outcome.clone(),
            p.f.to_string(),
            p.best_f.to_string(),
            opt(p.dice),
            opt(p.best_dice),
            u8::from(p.cache_hit).to_string(),
            p.effective.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iteration: usize, outcome: &str, f: f64, cache_hit: bool) -> TrajectoryRow {
        TrajectoryRow {
            iteration,
            key: format!("k{iteration}").into(),
            outcome: outcome.into(),
            f,
            dice: (outcome == "trained").then(|| (-f).exp()),
            cache_hit,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn series_tracks_best_and_effective_count() {
        let rows = vec![
            row(0, "trained", 1.0, false),
            row(1, "illegal", 10.0, false),
            row(2, "trained", 0.5, false),
            row(3, "trained", 0.5, true),
            row(4, "trained", 0.7, false),
        ];
        let series = plot_series(&rows);
        let best: Vec<f64> = series.iter().map(|p| p.best_f).collect();
        assert_eq!(best, vec![1.0, 1.0, 0.5, 0.5, 0.5]);
        let eff: Vec<usize> = series.iter().map(|p| p.effective).collect();
        assert_eq!(eff, vec![1, 1, 2, 2, 3]);
        assert_eq!(series[4].best_dice, Some((-0.5f64).exp()));
        let mut buf = Vec::new();
        write_plot_series(&mut buf, &series).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().nth(2).unwrap().starts_with("1,illegal,10,1,,"));
    }
}
