//! Discrete noise worlds: deterministic clocks, exact scenario trees for
//! brute-force conditional expectations, and seeded Monte-Carlo path
//! ensembles for larger instances.

mod clock;
mod ensemble;
mod tree;

pub use clock::{BSpec, Clock, ClockSpec};
pub use ensemble::{ensemble_from_tree, simulate_paths, PathEnsemble};
pub use tree::{build_tree, BranchPoint, BrownianScheme, ScenarioTree, TreeOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite-activity jump measure: a finite set of marks with one Poisson
/// intensity per mark. The compensator of the counting measure is
/// `dt (x) mu` with `mu = sum_k lambda_k delta_{x_k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpMeasureSpec {
    pub marks: Vec<f64>,
    pub intensities: Vec<f64>,
}

impl JumpMeasureSpec {
    pub fn new(marks: Vec<f64>, intensities: Vec<f64>) -> Result<Self> {
        if marks.len() != intensities.len() {
            return Err(Error::Invalid(
                "marks and intensities must have the same length".into(),
            ));
        }
        if intensities.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Invalid(
                "jump intensities must be positive and finite".into(),
            ));
        }
        Ok(JumpMeasureSpec { marks, intensities })
    }

    pub fn none() -> Self {
        JumpMeasureSpec {
            marks: Vec::new(),
            intensities: Vec::new(),
        }
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensities.iter().sum()
    }
}

/// A discrete noise world, either exact (tree) or sampled (ensemble).
#[derive(Debug, Clone)]
pub enum World {
    Tree(ScenarioTree),
    Ensemble(PathEnsemble),
}

impl World {
    pub fn clock(&self) -> &Clock {
        match self {
            World::Tree(t) => t.clock(),
            World::Ensemble(e) => e.clock(),
        }
    }

    pub fn jumps(&self) -> &JumpMeasureSpec {
        match self {
            World::Tree(t) => t.jumps(),
            World::Ensemble(e) => e.jumps(),
        }
    }

    pub fn n_steps(&self) -> usize {
        self.clock().n_steps()
    }

    /// Number of slots a step-`i`-measurable value occupies: tree nodes at
    /// level `i`, or one slot per path in an ensemble.
    pub fn width(&self, level: usize) -> usize {
        match self {
            World::Tree(t) => t.level_len(level),
            World::Ensemble(e) => e.n_paths(),
        }
    }

    pub fn is_tree(&self) -> bool {
        matches!(self, World::Tree(_))
    }

    /// Slot at `target_level <= level` seen from a slot at `level`: the
    /// ancestor node on trees, the same path index on ensembles.
    pub fn ancestor_slot(&self, level: usize, slot: usize, target_level: usize) -> usize {
        match self {
            World::Tree(t) => {
                let mut node = slot;
                for l in (target_level + 1..=level).rev() {
                    node = t.parent(l, node);
                }
                node
            }
            World::Ensemble(_) => slot,
        }
    }

    /// Expectation of step-`level`-measurable values.
    pub fn expectation(&self, level: usize, values: &[f64]) -> f64 {
        match self {
            World::Tree(t) => t.expectation(level, values),
            World::Ensemble(e) => e.mean(values),
        }
    }
}
