//! Bounded integer hyperparameter spaces and their continuous relaxation.
//!
//! Every hyperparameter lives in a half-open integer interval `[lower, upper)`.
//! The optimizer works on real-valued points inside the same box and a point
//! is turned into a concrete configuration by taking the floor of each
//! coordinate. Dimensions with a fixed value take no part in the relaxed
//! vector.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of distinct operation codes a block edge can carry.
pub const OP_CODE_COUNT: i64 = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("unknown search space preset `{0}`")]
    UnknownPreset(String),
    #[error("dimension `{name}`: {reason}")]
    InvalidDimension { name: String, reason: String },
    #[error("search space is missing dimension `{0}`")]
    MissingDimension(String),
    #[error("dimension `{0}` appears more than once")]
    DuplicateDimension(String),
    #[error("expected {expected} operation dimensions for up to {max_nodes} nodes, found {found}")]
    OpsCount {
        expected: usize,
        found: usize,
        max_nodes: usize,
    },
    #[error("point has {found} coordinates, space has {expected} free dimensions")]
    Dimensionality { expected: usize, found: usize },
    #[error("coordinate {index} (`{name}`) = {value} lies outside [{lower}, {upper})")]
    OutOfBounds {
        index: usize,
        name: String,
        value: f64,
        lower: i64,
        upper: i64,
    },
    #[error("coordinate {index} is not finite")]
    NonFinite { index: usize },
    #[error("config does not belong to this space: {0}")]
    Foreign(String),
    #[error("malformed configuration key `{0}`")]
    MalformedKey(String),
    #[error("invalid space definition: {0}")]
    Json(String),
}

/// Which field of a [`DecodedConfig`] a dimension controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Channels,
    Poolings,
    Supervision,
    Residual,
    Nodes,
    Op(usize),
}

impl Role {
    fn parse(name: &str) -> Option<Role> {
        match name {
            "n" => Some(Role::Channels),
            "p" => Some(Role::Poolings),
            "sup" => Some(Role::Supervision),
            "res" => Some(Role::Residual),
            "nodes" => Some(Role::Nodes),
            other => other
                .strip_prefix("ops")
                .and_then(|idx| idx.parse::<usize>().ok())
                .map(Role::Op),
        }
    }
}

/// One hyperparameter with the half-open integer interval it ranges over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperparameterSpec {
    pub name: String,
    pub lower: i64,
    pub upper: i64,
    #[serde(default)]
    pub fixed: Option<i64>,
}

impl HyperparameterSpec {
    pub fn free(name: impl Into<String>, lower: i64, upper: i64) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            fixed: None,
        }
    }

    pub fn fixed(name: impl Into<String>, value: i64) -> Self {
        Self {
            name: name.into(),
            lower: value,
            upper: value + 1,
            fixed: Some(value),
        }
    }

    pub fn is_free(&self) -> bool {
        self.fixed.is_none()
    }

    /// Smallest value this dimension can decode to.
    fn min_value(&self) -> i64 {
        self.fixed.unwrap_or(self.lower)
    }

    /// Largest value this dimension can decode to.
    fn max_value(&self) -> i64 {
        self.fixed.unwrap_or(self.upper - 1)
    }

    fn contains(&self, value: i64) -> bool {
        match self.fixed {
            Some(v) => v == value,
            None => (self.lower..self.upper).contains(&value),
        }
    }
}

/// On-disk form of a search space: `{"variant": .., "dimensions": [..]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceDefinition {
    pub variant: String,
    pub dimensions: Vec<HyperparameterSpec>,
}

/// A validated search space.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    variant: String,
    specs: Vec<HyperparameterSpec>,
    roles: Vec<Role>,
    free: Vec<usize>,
    max_nodes: usize,
}

impl SearchSpace {
    pub fn new(
        variant: impl Into<String>,
        specs: Vec<HyperparameterSpec>,
    ) -> Result<Self, SpaceError> {
        let mut roles = Vec::with_capacity(specs.len());
        let mut seen = HashSet::new();
        for spec in &specs {
            let role = Role::parse(&spec.name).ok_or_else(|| SpaceError::InvalidDimension {
                name: spec.name.clone(),
                reason: "not one of n, p, sup, res, nodes, ops<i>".into(),
            })?;
            if !seen.insert(role) {
                return Err(SpaceError::DuplicateDimension(spec.name.clone()));
            }
            check_bounds(spec, role)?;
            roles.push(role);
        }
        for (name, role) in [
            ("n", Role::Channels),
            ("p", Role::Poolings),
            ("sup", Role::Supervision),
            ("res", Role::Residual),
            ("nodes", Role::Nodes),
        ] {
            if !seen.contains(&role) {
                return Err(SpaceError::MissingDimension(name.into()));
            }
        }

        let nodes_idx = roles.iter().position(|r| *r == Role::Nodes).unwrap();
        let max_nodes = specs[nodes_idx].max_value() as usize;
        let expected = max_nodes * (max_nodes - 1) / 2;
        let found = roles.iter().filter(|r| matches!(r, Role::Op(_))).count();
        if found != expected {
            return Err(SpaceError::OpsCount {
                expected,
                found,
                max_nodes,
            });
        }
        for i in 0..expected {
            if !seen.contains(&Role::Op(i)) {
                return Err(SpaceError::MissingDimension(format!("ops{i}")));
            }
        }

        let free = specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_free())
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            variant: variant.into(),
            specs,
            roles,
            free,
            max_nodes,
        })
    }

    /// Built-in variants: `segnas11`, `segnas4` and `segnas7`.
    pub fn preset(name: &str) -> Result<Self, SpaceError> {
        use HyperparameterSpec as H;
        let free_ops = || (0..6).map(|i| H::free(format!("ops{i}"), 0, OP_CODE_COUNT));
        let specs: Vec<H> = match name {
            "segnas11" => [
                H::free("n", 8, 33),
                H::free("p", 2, 6),
                H::free("sup", 0, 2),
                H::free("res", 0, 2),
                H::free("nodes", 2, 5),
            ]
            .into_iter()
            .chain(free_ops())
            .collect(),
            "segnas4" => vec![
                H::free("n", 8, 33),
                H::free("p", 2, 6),
                H::free("sup", 0, 2),
                H::free("res", 0, 2),
                H::fixed("nodes", 3),
                H::fixed("ops0", 2),
                H::fixed("ops1", 0),
                H::fixed("ops2", 2),
            ],
            "segnas7" => [
                H::fixed("n", 16),
                H::fixed("p", 4),
                H::fixed("sup", 0),
                H::fixed("res", 1),
                H::free("nodes", 2, 5),
            ]
            .into_iter()
            .chain(free_ops())
            .collect(),
            other => return Err(SpaceError::UnknownPreset(other.to_string())),
        };
        Self::new(name, specs)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["segnas11", "segnas4", "segnas7"]
    }

    pub fn from_definition(def: SpaceDefinition) -> Result<Self, SpaceError> {
        Self::new(def.variant, def.dimensions)
    }

    pub fn from_json(text: &str) -> Result<Self, SpaceError> {
        let def: SpaceDefinition =
            serde_json::from_str(text).map_err(|e| SpaceError::Json(e.to_string()))?;
        Self::from_definition(def)
    }

    pub fn definition(&self) -> SpaceDefinition {
        SpaceDefinition {
            variant: self.variant.clone(),
            dimensions: self.specs.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.definition()).expect("space definition serializes")
    }

    pub fn variant(&self) -> &str {
        &self.variant
    }

    pub fn specs(&self) -> &[HyperparameterSpec] {
        &self.specs
    }

    /// Number of free dimensions, i.e. the length of a relaxed point.
    pub fn n_h(&self) -> usize {
        self.free.len()
    }

    /// Largest node count any decoded block can have.
    pub fn max_nodes(&self) -> usize {
        self.max_nodes
    }

    pub fn free_specs(&self) -> impl Iterator<Item = &HyperparameterSpec> + '_ {
        self.free.iter().map(move |&i| &self.specs[i])
    }

    /// Half-open `[lower, upper)` box of the relaxed space.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.free_specs()
            .map(|s| (s.lower as f64, s.upper as f64))
            .collect()
    }

    /// Number of raw integer grid points, ignoring block legality.
    pub fn cardinality(&self) -> u128 {
        self.free_specs()
            .map(|s| (s.upper - s.lower) as u128)
            .product()
    }

    pub fn contains(&self, point: &RelaxedPoint) -> bool {
        self.check_point(point).is_ok()
    }

    fn check_point(&self, point: &RelaxedPoint) -> Result<(), SpaceError> {
        if point.len() != self.n_h() {
            return Err(SpaceError::Dimensionality {
                expected: self.n_h(),
                found: point.len(),
            });
        }
        for (index, (&x, spec)) in point.coords().iter().zip(self.free_specs()).enumerate() {
            if !x.is_finite() {
                return Err(SpaceError::NonFinite { index });
            }
            if x < spec.lower as f64 || x >= spec.upper as f64 {
                return Err(SpaceError::OutOfBounds {
                    index,
                    name: spec.name.clone(),
                    value: x,
                    lower: spec.lower,
                    upper: spec.upper,
                });
            }
        }
        Ok(())
    }

    /// Floors every free coordinate and fills in the fixed dimensions.
    pub fn decode(&self, point: &RelaxedPoint) -> Result<DecodedConfig, SpaceError> {
        self.check_point(point)?;
        let mut free = point.coords().iter();
        let values = self
            .specs
            .iter()
            .map(|spec| match spec.fixed {
                Some(v) => v,
                None => free.next().unwrap().floor() as i64,
            })
            .collect::<Vec<_>>();
        Ok(self.assemble(&values))
    }

    /// Maps a decoded configuration back onto the relaxed box, one integer per
    /// free coordinate.
    pub fn lift(&self, config: &DecodedConfig) -> Result<RelaxedPoint, SpaceError> {
        let mut coords = Vec::with_capacity(self.n_h());
        for (spec, role) in self.specs.iter().zip(&self.roles) {
            let value = config.value(*role).ok_or_else(|| {
                SpaceError::Foreign(format!("no value for `{}`", spec.name))
            })?;
            if !spec.contains(value) {
                return Err(SpaceError::Foreign(format!(
                    "`{}` = {value} is outside the space",
                    spec.name
                )));
            }
            if spec.is_free() {
                coords.push(value as f64);
            }
        }
        if config.ops.len() != self.max_nodes * (self.max_nodes - 1) / 2 {
            return Err(SpaceError::Foreign(format!(
                "expected {} op codes, found {}",
                self.max_nodes * (self.max_nodes - 1) / 2,
                config.ops.len()
            )));
        }
        Ok(RelaxedPoint::new(coords))
    }

    /// Draws a point uniformly from the half-open box.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> RelaxedPoint {
        RelaxedPoint::new(
            self.free_specs()
                .map(|s| rng.gen_range(s.lower as f64..s.upper as f64))
                .collect(),
        )
    }

    /// Every raw grid point of the space in mixed-radix order, last free
    /// dimension varying fastest.
    pub fn enumerate(&self) -> impl Iterator<Item = DecodedConfig> + '_ {
        let mut counter: Option<Vec<i64>> = Some(self.specs.iter().map(|s| s.min_value()).collect());
        std::iter::from_fn(move || {
            let current = counter.take()?;
            let config = self.assemble(&current);
            let mut next = current;
            let mut carried = true;
            for &i in self.free.iter().rev() {
                next[i] += 1;
                if next[i] < self.specs[i].upper {
                    carried = false;
                    break;
                }
                next[i] = self.specs[i].lower;
            }
            if !carried {
                counter = Some(next);
            }
            Some(config)
        })
    }

    fn assemble(&self, values: &[i64]) -> DecodedConfig {
        let op_count = self.max_nodes * (self.max_nodes - 1) / 2;
        let mut config = DecodedConfig {
            n: 0,
            p: 0,
            sup: false,
            res: false,
            nodes: 0,
            ops: vec![0; op_count],
        };
        for (&role, &v) in self.roles.iter().zip(values) {
            match role {
                Role::Channels => config.n = v as usize,
                Role::Poolings => config.p = v as usize,
                Role::Supervision => config.sup = v != 0,
                Role::Residual => config.res = v != 0,
                Role::Nodes => config.nodes = v as usize,
                Role::Op(i) => config.ops[i] = v as u8,
            }
        }
        config
    }
}

fn check_bounds(spec: &HyperparameterSpec, role: Role) -> Result<(), SpaceError> {
    let bad = |reason: &str| SpaceError::InvalidDimension {
        name: spec.name.clone(),
        reason: reason.to_string(),
    };
    match spec.fixed {
        None if spec.lower >= spec.upper => return Err(bad("lower bound must be below upper bound")),
        Some(v) if v < spec.lower || v >= spec.upper => {
            return Err(bad("fixed value must lie inside [lower, upper)"))
        }
        _ => {}
    }
    let (lo, hi) = (spec.min_value(), spec.max_value());
    let (min, max) = match role {
        Role::Channels => (1, i64::from(u32::MAX)),
        Role::Poolings => (0, 16),
        Role::Supervision | Role::Residual => (0, 1),
        Role::Nodes => (2, 64),
        Role::Op(_) => (0, OP_CODE_COUNT - 1),
    };
    if lo < min || hi > max {
        return Err(bad(&format!("values must lie within [{min}, {max}]")));
    }
    Ok(())
}

/// A real-valued point of the relaxed space, one coordinate per free dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelaxedPoint(Vec<f64>);

impl RelaxedPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for RelaxedPoint {
    fn from(coords: Vec<f64>) -> Self {
        Self(coords)
    }
}

/// The integer configuration a relaxed point floors to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecodedConfig {
    /// Channels of the first block.
    pub n: usize,
    /// Number of max poolings.
    pub p: usize,
    /// Deep supervision.
    pub sup: bool,
    /// Residual connection around every block.
    pub res: bool,
    pub nodes: usize,
    /// Raw operation codes, including entries a small `nodes` leaves unused.
    pub ops: Vec<u8>,
}

impl DecodedConfig {
    fn value(&self, role: Role) -> Option<i64> {
        Some(match role {
            Role::Channels => self.n as i64,
            Role::Poolings => self.p as i64,
            Role::Supervision => i64::from(self.sup),
            Role::Residual => i64::from(self.res),
            Role::Nodes => self.nodes as i64,
            Role::Op(i) => i64::from(*self.ops.get(i)?),
        })
    }

    /// Operation codes that actually fill the block's matrix.
    pub fn used_ops(&self) -> &[u8] {
        let used = self.nodes * self.nodes.saturating_sub(1) / 2;
        &self.ops[..used.min(self.ops.len())]
    }

    pub fn canonical_key(&self) -> CacheKey {
        CacheKey(self.to_string())
    }
}

impl fmt::Display for DecodedConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={};p={};sup={};res={};nodes={};ops=",
            self.n,
            self.p,
            u8::from(self.sup),
            u8::from(self.res),
            self.nodes
        )?;
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

impl FromStr for DecodedConfig {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || SpaceError::MalformedKey(s.to_string());
        let mut parts = s.split(';');
        let mut field = |name: &str| -> Result<&str, SpaceError> {
            parts
                .next()
                .and_then(|p| p.strip_prefix(name))
                .and_then(|p| p.strip_prefix('='))
                .ok_or_else(malformed)
        };
        let int = |v: &str| v.parse::<usize>().map_err(|_| malformed());
        let flag = |v: &str| match v {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(malformed()),
        };
        let n = int(field("n")?)?;
        let p = int(field("p")?)?;
        let sup = flag(field("sup")?)?;
        let res = flag(field("res")?)?;
        let nodes = int(field("nodes")?)?;
        let ops_text = field("ops")?;
        let ops = if ops_text.is_empty() {
            Vec::new()
        } else {
            ops_text
                .split(',')
                .map(|v| v.parse::<u8>().map_err(|_| malformed()))
                .collect::<Result<_, _>>()?
        };
        if parts.next().is_some() {
            return Err(malformed());
        }
        Ok(Self {
            n,
            p,
            sup,
            res,
            nodes,
            ops,
        })
    }
}

/// Memo key of a decoded configuration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn parse_config(&self) -> Result<DecodedConfig, SpaceError> {
        self.0.parse()
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for CacheKey {
    fn from(s: String) -> Self {
        Self(s)
    }
}
