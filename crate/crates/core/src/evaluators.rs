//! Evaluation backends.
//!
//! - [`AnalyticEvaluator`]: closed-form test landscapes for checking the
//!   optimizer.
//! - [`SurrogateEvaluator`]: a deterministic stand-in for training, scored
//!   from the parameter count and edge count of the built network.
//! - [`ExternalTrainer`]: runs a trainer process per evaluation and talks to
//!   it with one JSON request and one JSON reply.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use wait_timeout::ChildExt;

use crate::archbuilder::{count_parameters, NetworkIR};
use crate::objective::{Candidate, EvaluationOutcome, Evaluator, OutcomeKind};
use crate::searchspace::{RelaxedPoint, SearchSpace};

/// Settings that identify an evaluator in a run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorBinding {
    pub id: String,
    pub kind: EvaluatorKind,
    pub parameters: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    AnalyticLandscape,
    ArchitectureSurrogate,
    ExternalTrainer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Landscape {
    /// `Σ zᵢ²` on `[-1, 1]ⁿ`, minimum at the box center.
    Sphere,
    /// Rastrigin on `[-5.12, 5.12]ⁿ`, minimum at the box center.
    Rastrigin,
    /// The sphere evaluated at the floor of the point, with its minimum in
    /// the integer cell that holds the box center.
    StepSphere,
}

impl Landscape {
    pub fn name(self) -> &'static str {
        match self {
            Landscape::Sphere => "sphere",
            Landscape::Rastrigin => "rastrigin",
            Landscape::StepSphere => "step-sphere",
        }
    }

    fn half_width(self) -> f64 {
        match self {
            Landscape::Rastrigin => 5.12,
            Landscape::Sphere | Landscape::StepSphere => 1.0,
        }
    }

    /// Maps `point` into the canonical box `[-w, w]ⁿ`.
    pub fn rescale(self, point: &RelaxedPoint, bounds: &[(f64, f64)]) -> Vec<f64> {
        let w = self.half_width();
        point
            .coords()
            .iter()
            .zip(bounds)
            .map(|(&x, &(lo, hi))| {
                let unit = match self {
                    Landscape::StepSphere => {
                        let center = ((lo + hi) / 2.0).floor();
                        2.0 * (x.floor() - center) / (hi - lo)
                    }
                    _ => 2.0 * (x - lo) / (hi - lo) - 1.0,
                };
                unit * w
            })
            .collect()
    }

    /// The landscape value `g ≥ 0` in canonical coordinates.
    pub fn value(self, z: &[f64]) -> f64 {
        match self {
            Landscape::Sphere | Landscape::StepSphere => z.iter().map(|v| v * v).sum(),
            Landscape::Rastrigin => {
                let two_pi = 2.0 * std::f64::consts::PI;
                10.0 * z.len() as f64
                    + z.iter().map(|v| v * v - 10.0 * (two_pi * v).cos()).sum::<f64>()
            }
        }
    }
}

impl std::str::FromStr for Landscape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sphere" => Ok(Landscape::Sphere),
            "rastrigin" => Ok(Landscape::Rastrigin),
            "step-sphere" => Ok(Landscape::StepSphere),
            other => Err(format!("unknown landscape `{other}`")),
        }
    }
}

/// `exp(−g(z))` for the landscape value at the rescaled point.
pub fn analytic_evaluate(landscape: Landscape, point: &RelaxedPoint, bounds: &[(f64, f64)]) -> f64 {
    (-landscape.value(&landscape.rescale(point, bounds))).exp()
}

pub struct AnalyticEvaluator {
    id: String,
    landscape: Landscape,
    bounds: Vec<(f64, f64)>,
}

impl AnalyticEvaluator {
    pub fn new(landscape: Landscape, space: &SearchSpace) -> Self {
        Self {
            id: landscape.name().to_string(),
            landscape,
            bounds: space.bounds(),
        }
    }

    pub fn binding(&self) -> EvaluatorBinding {
        EvaluatorBinding {
            id: self.id.clone(),
            kind: EvaluatorKind::AnalyticLandscape,
            parameters: serde_json::json!({ "landscape": self.landscape.name() }),
        }
    }
}

impl Evaluator for AnalyticEvaluator {
    fn id(&self) -> &str {
        &self.id
    }

    fn requires_network(&self) -> bool {
        false
    }

    fn evaluate(&mut self, candidate: &Candidate<'_>) -> EvaluationOutcome {
        let dice = analytic_evaluate(self.landscape, candidate.point, &self.bounds);
        EvaluationOutcome::instant(OutcomeKind::Trained { dice })
    }
}

/// Constants of the architecture surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub d_max: f64,
    pub target_params: f64,
    pub sigma: f64,
    pub lambda: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            d_max: 0.9,
            target_params: 5e6,
            sigma: 0.5,
            lambda: 0.1,
        }
    }
}

/// `d_max · exp(−(log₁₀ P − log₁₀ P*)² / σ²) · (1 − λ / edges)` where `P`
/// is the network's parameter count and `edges` the number of non-empty
/// edges the block uses.
pub fn surrogate_dice(params: &SurrogateParams, parameters: u64, edges: usize) -> f64 {
    let offset = (parameters.max(1) as f64).log10() - params.target_params.log10();
    let fit = (-(offset * offset) / (params.sigma * params.sigma)).exp();
    let depth = 1.0 - params.lambda / edges.max(1) as f64;
    params.d_max * fit * depth
}

pub fn surrogate_evaluate(params: &SurrogateParams, ir: &NetworkIR) -> f64 {
    let edges = ir
        .config
        .used_ops()
        .iter()
        .filter(|&&code| code != 0)
        .count();
    surrogate_dice(params, count_parameters(ir), edges)
}

#[derive(Debug, Clone, Default)]
pub struct SurrogateEvaluator {
    pub params: SurrogateParams,
}

impl SurrogateEvaluator {
    pub fn new(params: SurrogateParams) -> Self {
        Self { params }
    }

    pub fn binding(&self) -> EvaluatorBinding {
        EvaluatorBinding {
            id: "arch-surrogate".into(),
            kind: EvaluatorKind::ArchitectureSurrogate,
            parameters: serde_json::to_value(self.params).expect("surrogate params serialize"),
        }
    }
}

impl Evaluator for SurrogateEvaluator {
    fn id(&self) -> &str {
        "arch-surrogate"
    }

    fn evaluate(&mut self, candidate: &Candidate<'_>) -> EvaluationOutcome {
        let kind = match candidate.network {
            Some(ir) => OutcomeKind::Trained {
                dice: surrogate_evaluate(&self.params, ir),
            },
            None => OutcomeKind::TrainerFailure {
                detail: "surrogate needs a built network".into(),
            },
        };
        EvaluationOutcome::instant(kind)
    }
}

/// How to launch the trainer process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerProtocolConfig {
    /// Executable followed by its arguments.
    pub command: Vec<String>,
    pub timeout_seconds: f64,
    #[serde(default)]
    pub working_dir: Option<PathBuf>,
}

/// The `train` section of a request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    pub epochs: u32,
    pub batch: u32,
    pub seed: u64,
    #[serde(default)]
    pub data: Value,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 3,
            seed: 0,
            data: Value::Object(Default::default()),
        }
    }
}

#[derive(Serialize)]
struct TrainingRequest<'a> {
    ir: &'a NetworkIR,
    train: &'a TrainingSettings,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
enum TrainerReply {
    Ok { dice: f64 },
    Oom,
    Error {
        #[serde(default)]
        detail: String,
    },
}

/// Serializes the single-line request document sent to a trainer.
pub fn encode_request(ir: &NetworkIR, settings: &TrainingSettings) -> String {
    serde_json::to_string(&TrainingRequest { ir, train: settings }).expect("request serializes")
}

/// Reads the first JSON document on the trainer's standard output.
pub fn decode_reply(stdout: &[u8]) -> OutcomeKind {
    let mut stream = serde_json::Deserializer::from_slice(stdout).into_iter::<TrainerReply>();
    match stream.next() {
        Some(Ok(TrainerReply::Ok { dice })) if dice.is_finite() && (0.0..=1.0).contains(&dice) => {
            OutcomeKind::Trained { dice }
        }
        Some(Ok(TrainerReply::Ok { dice })) => OutcomeKind::TrainerFailure {
            detail: format!("dice {dice} outside [0, 1]"),
        },
        Some(Ok(TrainerReply::Oom)) => OutcomeKind::OutOfMemory,
        Some(Ok(TrainerReply::Error { detail })) => OutcomeKind::TrainerFailure { detail },
        Some(Err(e)) => OutcomeKind::TrainerFailure {
            detail: format!("malformed reply: {e}"),
        },
        None => OutcomeKind::TrainerFailure {
            detail: "no reply".into(),
        },
    }
}

/// Runs one training request through a fresh trainer process.
pub fn external_trainer_evaluate(
    ir: &NetworkIR,
    proto: &TrainerProtocolConfig,
    settings: &TrainingSettings,
) -> EvaluationOutcome {
    let started = Instant::now();
    let kind = run_trainer(ir, proto, settings);
    EvaluationOutcome {
        kind,
        wall_seconds: started.elapsed().as_secs_f64(),
    }
}

fn failure(detail: impl Into<String>) -> OutcomeKind {
    OutcomeKind::TrainerFailure {
        detail: detail.into(),
    }
}

fn run_trainer(ir: &NetworkIR, proto: &TrainerProtocolConfig, settings: &TrainingSettings) -> OutcomeKind {
    let Some((program, args)) = proto.command.split_first() else {
        return failure("empty trainer command");
    };
    if !(proto.timeout_seconds > 0.0 && proto.timeout_seconds.is_finite()) {
        return failure("trainer timeout must be positive");
    }
    let mut command = Command::new(program);
    command
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = &proto.working_dir {
        command.current_dir(dir);
    }
    let mut child = match command.spawn() {
        Ok(child) => child,
        Err(e) => return failure(format!("could not start trainer: {e}")),
    };

    let mut request = encode_request(ir, settings);
    request.push('\n');
    let mut stdin = child.stdin.take().expect("piped stdin");
    // a trainer that never reads must not block us
    let writer = thread::spawn(move || {
        let _ = stdin.write_all(request.as_bytes());
    });
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let mut stderr = child.stderr.take().expect("piped stderr");
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });

    let status = match child.wait_timeout(Duration::from_secs_f64(proto.timeout_seconds)) {
        Ok(Some(status)) => status,
        Ok(None) => {
            let _ = child.kill();
            let _ = child.wait();
            // readers are detached: grandchildren may still hold the pipes
            return failure("timeout");
        }
        Err(e) => {
            let _ = child.kill();
            let _ = child.wait();
            return failure(format!("waiting for trainer: {e}"));
        }
    };
    let _ = writer.join();
    let out = reader.join().unwrap_or_default();
    let err = err_reader.join().unwrap_or_default();

    match decode_reply(&out) {
        OutcomeKind::TrainerFailure { detail } if !status.success() => {
            let tail = String::from_utf8_lossy(&err);
            let tail = tail.trim();
            let tail: String = tail.chars().rev().take(200).collect::<Vec<_>>().into_iter().rev().collect();
            failure(format!("trainer exited with {status}: {detail}; stderr: {tail}"))
        }
        kind => kind,
    }
}

pub struct ExternalTrainer {
    pub proto: TrainerProtocolConfig,
    pub settings: TrainingSettings,
}

impl ExternalTrainer {
    pub fn new(proto: TrainerProtocolConfig, settings: TrainingSettings) -> Self {
        Self { proto, settings }
    }

    pub fn binding(&self) -> EvaluatorBinding {
        EvaluatorBinding {
            id: "external".into(),
            kind: EvaluatorKind::ExternalTrainer,
            parameters: serde_json::json!({
                "protocol": self.proto,
                "train": self.settings,
            }),
        }
    }
}

impl Evaluator for ExternalTrainer {
    fn id(&self) -> &str {
        "external"
    }

    fn evaluate(&mut self, candidate: &Candidate<'_>) -> EvaluationOutcome {
        match candidate.network {
            Some(ir) => external_trainer_evaluate(ir, &self.proto, &self.settings),
            None => EvaluationOutcome::instant(failure("trainer needs a built network")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_optimum_scores_one() {
        let bounds = [(8.0, 33.0), (2.0, 6.0)];
        let center = RelaxedPoint::new(vec![20.5, 4.0]);
        assert_eq!(analytic_evaluate(Landscape::Sphere, &center, &bounds), 1.0);
    }

    #[test]
    fn sphere_value_two() {
        // corner of a 2-D box: z = (-1, -1)
        let bounds = [(0.0, 4.0), (0.0, 4.0)];
        let dice = analytic_evaluate(Landscape::Sphere, &RelaxedPoint::new(vec![0.0, 0.0]), &bounds);
        assert!((dice - (-2.0f64).exp()).abs() < 1e-15);
        assert!((dice - 0.13534).abs() < 1e-5);
    }

    #[test]
    fn step_sphere_depends_on_floor_only() {
        let bounds = [(8.0, 33.0), (0.0, 2.0), (0.0, 7.0)];
        let a = analytic_evaluate(Landscape::StepSphere, &RelaxedPoint::new(vec![12.1, 0.2, 5.5]), &bounds);
        let b = analytic_evaluate(Landscape::StepSphere, &RelaxedPoint::new(vec![12.9, 0.99, 5.0]), &bounds);
        assert_eq!(a, b);
        let best = analytic_evaluate(Landscape::StepSphere, &RelaxedPoint::new(vec![20.5, 1.5, 3.2]), &bounds);
        assert_eq!(best, 1.0);
    }

    #[test]
    fn rastrigin_center_is_zero() {
        assert_eq!(Landscape::Rastrigin.value(&[0.0, 0.0, 0.0]), 0.0);
        let g = Landscape::Rastrigin.value(&[1.0, 0.5]);
        let oracle = 20.0 + (1.0 - 10.0 * (2.0 * std::f64::consts::PI).cos()) + (0.25 - 10.0 * std::f64::consts::PI.cos());
        assert!((g - oracle).abs() < 1e-12);
    }

    #[test]
    fn surrogate_peak_and_width() {
        let p = SurrogateParams::default();
        let at_peak = surrogate_dice(&p, 5_000_000, 1000);
        assert!((at_peak - 0.9).abs() < 1e-3);
        let off = surrogate_dice(&p, 50_000_000, 1000) / at_peak;
        assert!((off - (-4.0f64).exp()).abs() < 1e-12);
        assert!(((-4.0f64).exp() - 0.0183).abs() < 1e-4);
        assert!(surrogate_dice(&p, 5_000_000, 1) < surrogate_dice(&p, 5_000_000, 3));
    }

    #[test]
    fn reply_decoding() {
        assert_eq!(decode_reply(br#"{"status":"ok","dice":0.5}"#), OutcomeKind::Trained { dice: 0.5 });
        assert_eq!(decode_reply(b"{\n  \"status\": \"oom\"\n}\n"), OutcomeKind::OutOfMemory);
        assert_eq!(
            decode_reply(br#"{"status":"error","detail":"boom"}"#),
            OutcomeKind::TrainerFailure { detail: "boom".into() }
        );
        for bad in [&b"not json"[..], b"", br#"{"status":"ok"}"#, br#"{"status":"ok","dice":2.0}"#, br#"{"status":"maybe"}"#] {
            assert!(matches!(decode_reply(bad), OutcomeKind::TrainerFailure { .. }));
        }
    }
}
