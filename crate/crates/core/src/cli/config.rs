//! Experiment configuration: TOML file with strict keys, flag overrides
//! and deterministic seed resolution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{build_tree, simulate_paths, BrownianScheme, Clock, ClockSpec, JumpMeasureSpec, TreeOptions, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldKind {
    Tree,
    Ensemble,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub kind: WorldKind,
    pub horizon: f64,
    pub steps: usize,
    /// Brownian branching on trees: "none", "two-point" or "three-point".
    pub brownian: String,
    pub extra_noise: bool,
    pub marks: Vec<f64>,
    pub intensities: Vec<f64>,
    /// Ensemble size; ignored on trees.
    pub n_paths: usize,
    /// Explicit seed; takes precedence over the BSVIE_SEED variable.
    pub seed: Option<u64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            kind: WorldKind::Tree,
            horizon: 1.0,
            steps: 3,
            brownian: "two-point".into(),
            extra_noise: false,
            marks: vec![1.0],
            intensities: vec![0.5],
            n_paths: 1000,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub preset: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Norm order for the norms and regularity commands.
    pub p: f64,
    /// Explicit interval boundaries (grid indices) for Type-II solves.
    pub boundaries: Option<Vec<usize>>,
    /// Maximal interval length for the automatic Type-II plan.
    pub max_interval: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iter: 100,
            p: 2.0,
            boundaries: None,
            max_interval: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub solver: SolverConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config echo: {e}")))
    }

    /// Effective seed: config value, else the BSVIE_SEED variable, else 42.
    pub fn resolve_seed(&self) -> Result<u64> {
        if let Some(s) = self.world.seed {
            return Ok(s);
        }
        match std::env::var("BSVIE_SEED") {
            Ok(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("BSVIE_SEED: not a valid seed `{v}`"))),
            Err(_) => Ok(42),
        }
    }

    pub fn build_world(&self, seed: u64) -> Result<World> {
        let w = &self.world;
        if !(w.horizon > 0.0) {
            return Err(Error::Config(format!(
                "world.horizon: must be positive, got {}",
                w.horizon
            )));
        }
        if w.steps == 0 {
            return Err(Error::Config("world.steps: must be at least 1".into()));
        }
        if w.marks.len() != w.intensities.len() {
            return Err(Error::Config(format!(
                "world.intensities: {} entries for {} marks",
                w.intensities.len(),
                w.marks.len()
            )));
        }
        let clock = Clock::build(&ClockSpec::ito_uniform(w.horizon, w.steps))?;
        let jumps = JumpMeasureSpec::new(w.marks.clone(), w.intensities.clone())?;
        match w.kind {
            WorldKind::Tree => {
                let brownian = match w.brownian.as_str() {
                    "none" => BrownianScheme::None,
                    "two-point" => BrownianScheme::TwoPoint,
                    "three-point" => BrownianScheme::ThreePoint,
                    other => {
                        return Err(Error::Config(format!(
                            "world.brownian: unknown scheme `{other}`"
                        )))
                    }
                };
                let tree = build_tree(
                    &clock,
                    &jumps,
                    TreeOptions {
                        brownian,
                        extra_noise: w.extra_noise,
                        max_steps: w.steps,
                    },
                )?;
                Ok(World::Tree(tree))
            }
            WorldKind::Ensemble => {
                let ens = simulate_paths(&clock, &jumps, w.extra_noise, w.n_paths, seed)?;
                Ok(World::Ensemble(ens))
            }
        }
    }
}
