//! Built-in data catalog: named free-term/driver pairs with a known
//! oracle, each bound to a sensible default world.

use std::sync::Arc;

use crate::analysis::{FSVIECoefficients, LinearComparisonData};
use crate::bsde::GeneratorSpec;
use crate::bsvie::FreeTerm;
use crate::error::{Error, Result};
use crate::lattice::World;

use super::config::{ExperimentConfig, WorldKind};

/// Catalog entry: what the preset models and which oracle pins it down.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct PresetInfo {
    pub name: &'static str,
    pub description: &'static str,
    pub oracle: &'static str,
}

pub const CATALOG: &[PresetInfo] = &[
    PresetInfo {
        name: "ode-exp",
        description: "No noise, unit free term, driver f = y; the diagonal solves y' = -y backward",
        oracle: "Y(0) = e, first-order error decay in the step count",
    },
    PresetInfo {
        name: "girsanov-drift",
        description: "Terminal Brownian state with a linear z-drift in the driver",
        oracle: "Y(t) = W_t + theta (T - t) in closed form",
    },
    PresetInfo {
        name: "poisson-count",
        description: "Compensated terminal jump count, zero driver",
        oracle: "Y(t) is the compensated count at t; U = 1 on the jump mark",
    },
    PresetInfo {
        name: "extra-noise-M",
        description: "Terminal sum of extra-noise draws, invisible to W and the jump marks",
        oracle: "Z = U = 0 and the orthogonal part M carries the full draw scale",
    },
    PresetInfo {
        name: "duality-linear",
        description: "Bounded smooth kernels for the linear forward equation and its adjoint",
        oracle: "forward and backward pairings agree exactly on trees",
    },
    PresetInfo {
        name: "comparison-partition",
        description: "Ordered half-linear driver pair with monotone time gaps",
        oracle: "partitioned difference nonnegative; error shrinks with the partition mesh",
    },
    PresetInfo {
        name: "holder-regularity",
        description: "Free term with a square-root time modulus plus a compensated jump part",
        oracle: "fitted increment exponent near alpha*p = 2; diagonal jumps only at noise jumps",
    },
    PresetInfo {
        name: "sandwich",
        description: "Driver pair enclosing a nondecreasing middle driver",
        oracle: "iterates from the upper solution decrease monotonically",
    },
    PresetInfo {
        name: "lipschitz",
        description: "Generic Lipschitz driver in (y, z, u) with moderate constants",
        oracle: "Picard gap ratios stay below one; defining-equation residual at tol",
    },
];

pub fn info(name: &str) -> Result<&'static PresetInfo> {
    CATALOG
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("data.preset: unknown preset `{name}`")))
}

/// Default experiment configuration per preset; flags and config files
/// override it.
pub fn default_config(name: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.preset = Some(name.to_string());
    match name {
        "ode-exp" => {
            cfg.world.brownian = "none".into();
            cfg.world.marks.clear();
            cfg.world.intensities.clear();
            cfg.world.steps = 2000;
        }
        "girsanov-drift" => {
            cfg.world.steps = 4;
            cfg.world.marks.clear();
            cfg.world.intensities.clear();
        }
        "poisson-count" => {
            cfg.world.steps = 4;
        }
        "extra-noise-M" => {
            cfg.world.steps = 3;
            cfg.world.extra_noise = true;
        }
        "duality-linear" => {
            cfg.world.steps = 3;
        }
        "comparison-partition" => {
            cfg.world.steps = 8;
            cfg.world.marks.clear();
            cfg.world.intensities.clear();
        }
        "holder-regularity" => {
            cfg.world.kind = WorldKind::Ensemble;
            cfg.world.steps = 64;
            cfg.world.n_paths = 4000;
            cfg.world.marks.clear();
            cfg.world.intensities.clear();
            cfg.solver.p = 4.0;
        }
        "sandwich" | "lipschitz" => {
            cfg.world.steps = 3;
        }
        other => return Err(Error::Config(format!("data.preset: unknown preset `{other}`"))),
    }
    Ok(cfg)
}

/// Concrete data of a preset on a given world.
pub enum PresetData {
    Type1 {
        phi: FreeTerm,
        f: GeneratorSpec,
    },
    Sandwich {
        phi: FreeTerm,
        f1: GeneratorSpec,
        f2: GeneratorSpec,
        f_bar: GeneratorSpec,
    },
    Comparison(Box<LinearComparisonData>),
    Duality {
        psi: Vec<Vec<f64>>,
        phi: FreeTerm,
        coeff: FSVIECoefficients,
    },
}

impl PresetData {
    /// The Type-I pair, or an error for presets of a different shape.
    pub fn type1(self) -> Result<(FreeTerm, GeneratorSpec)> {
        match self {
            PresetData::Type1 { phi, f } => Ok((phi, f)),
            _ => Err(Error::Config(
                "data.preset: this preset does not define a Type-I pair".into(),
            )),
        }
    }
}

/// Terminal Brownian state per leaf or path.
pub fn terminal_w(world: &World) -> Vec<f64> {
    let n = world.n_steps();
    match world {
        World::Tree(t) => (0..t.n_leaves()).map(|l| t.w_state(n, l)).collect(),
        World::Ensemble(e) => (0..e.n_paths()).map(|p| e.w_state(p, n)).collect(),
    }
}

/// Terminal jump count of a mark per leaf or path.
pub fn terminal_count(world: &World, mark: usize) -> Vec<f64> {
    let n = world.n_steps();
    match world {
        World::Tree(t) => (0..t.n_leaves())
            .map(|l| t.count_state(n, l, mark) as f64)
            .collect(),
        World::Ensemble(e) => (0..e.n_paths())
            .map(|p| e.count_state(p, n, mark) as f64)
            .collect(),
    }
}

/// Sum of extra-noise draws along each path.
pub fn terminal_eps_sum(world: &World) -> Vec<f64> {
    let n = world.n_steps();
    match world {
        World::Tree(t) => (0..t.n_leaves())
            .map(|l| {
                let chain = t.ancestors(l);
                (0..n)
                    .map(|s| t.branches(s)[t.branch_of(s + 1, chain[s + 1])].eps)
                    .sum()
            })
            .collect(),
        World::Ensemble(e) => (0..e.n_paths())
            .map(|p| (0..n).map(|s| e.eps(p, s)).sum())
            .collect(),
    }
}

/// Compensated terminal count summed over marks.
fn compensated_terminal(world: &World) -> Vec<f64> {
    let n = world.n_steps();
    let horizon = world.clock().horizon();
    let total: f64 = world.jumps().total_intensity();
    let mut out = vec![0.0; world.width(n)];
    for k in 0..world.jumps().n_marks() {
        for (o, c) in out.iter_mut().zip(terminal_count(world, k)) {
            *o += c;
        }
    }
    for o in out.iter_mut() {
        *o -= total * horizon;
    }
    out
}

/// Builds the preset data on a world.
pub fn build(name: &str, world: &World) -> Result<PresetData> {
    let n = world.n_steps();
    let horizon = world.clock().horizon();
    match name {
        "ode-exp" => Ok(PresetData::Type1 {
            phi: FreeTerm::deterministic(world, &vec![1.0; n + 1]),
            f: GeneratorSpec::new(|_, _, y, _, _: &[f64]| y, 1.0, 0.0, 0.0)?,
        }),
        "girsanov-drift" => {
            let w = terminal_w(world);
            Ok(PresetData::Type1 {
                phi: FreeTerm::constant(world, &w),
                f: GeneratorSpec::new(|_, _, _, z, _: &[f64]| 0.5 * z, 0.0, 0.25, 0.0)?,
            })
        }
        "poisson-count" => {
            if world.jumps().n_marks() == 0 {
                return Err(Error::Config(
                    "world.marks: the poisson-count preset needs at least one jump mark".into(),
                ));
            }
            Ok(PresetData::Type1 {
                phi: FreeTerm::constant(world, &compensated_terminal(world)),
                f: GeneratorSpec::zero(),
            })
        }
        "extra-noise-M" => {
            let has_eps = match world {
                World::Tree(t) => t.options().extra_noise,
                World::Ensemble(e) => e.has_extra_noise(),
            };
            if !has_eps {
                return Err(Error::Config(
                    "world.extra_noise: the extra-noise-M preset needs the extra noise".into(),
                ));
            }
            Ok(PresetData::Type1 {
                phi: FreeTerm::constant(world, &terminal_eps_sum(world)),
                f: GeneratorSpec::zero(),
            })
        }
        "duality-linear" => {
            let coeff = FSVIECoefficients {
                a0: Arc::new(|t, s| 0.6 - 0.2 * t * s),
                a1: Arc::new(|t, s| 0.3 + 0.1 * (t - s)),
                jump: Arc::new(|t, s, _k| 0.2 + 0.05 * t + 0.1 * s),
                bound: 1.0,
                dt_bound: 0.3,
            };
            let (psi, phi) = duality_data(world);
            Ok(PresetData::Duality { psi, phi, coeff })
        }
        "comparison-partition" => Ok(PresetData::Comparison(Box::new(comparison_data(world)))),
        "holder-regularity" => {
            let w = terminal_w(world);
            let comp = compensated_terminal(world);
            let clock = world.clock().clone();
            let mut phi = FreeTerm::from_fn(world, |t, slot| {
                (clock.time(t) - 0.5 * horizon).abs().sqrt() * (1.0 + 0.1 * w[slot])
                    + 0.4 * comp[slot]
            });
            phi.holder = Some((0.5, 1.0));
            Ok(PresetData::Type1 {
                phi,
                f: GeneratorSpec::zero(),
            })
        }
        "sandwich" => {
            let w = terminal_w(world);
            let phi = FreeTerm::from_fn(world, |t, slot| {
                0.5 * w[slot] + 0.2 * (1.0 - t as f64 / n as f64)
            });
            let intensities = world.jumps().intensities.clone();
            let mk = move |shift: f64| {
                let intensities = intensities.clone();
                GeneratorSpec::new(
                    move |_, _, y: f64, z, u: &[f64]| {
                        let jump: f64 = u
                            .iter()
                            .zip(&intensities)
                            .map(|(uv, l)| 0.2 * uv * l)
                            .sum();
                        0.4 * y.tanh() + 0.3 * z + jump + shift
                    },
                    0.16,
                    0.09,
                    0.04 * world.jumps().total_intensity(),
                )
            };
            Ok(PresetData::Sandwich {
                phi,
                f1: mk(-0.3)?,
                f2: mk(0.3)?,
                f_bar: mk(0.0)?,
            })
        }
        "lipschitz" => {
            let w = terminal_w(world);
            let phi = FreeTerm::from_fn(world, |t, slot| w[slot] + 0.1 * (t as f64 / n as f64));
            let intensities = world.jumps().intensities.clone();
            Ok(PresetData::Type1 {
                phi,
                f: GeneratorSpec::new(
                    move |t, s, y: f64, z, u: &[f64]| {
                        let jump: f64 = u
                            .iter()
                            .zip(&intensities)
                            .map(|(uv, l)| 0.2 * uv * l)
                            .sum();
                        0.5 * (y + t - s).sin() + 0.3 * z + jump
                    },
                    0.25,
                    0.09,
                    0.04 * world.jumps().total_intensity(),
                )?,
            })
        }
        other => Err(Error::Config(format!("data.preset: unknown preset `{other}`"))),
    }
}

/// Adapted forcing term and terminal-measurable free term for the duality
/// experiment.
pub fn duality_data(world: &World) -> (Vec<Vec<f64>>, FreeTerm) {
    let n = world.n_steps();
    let state = |level: usize, slot: usize| -> (f64, f64) {
        match world {
            World::Tree(t) => (
                t.w_state(level, slot),
                (0..t.n_marks()).map(|k| t.count_state(level, slot, k) as f64).sum(),
            ),
            World::Ensemble(e) => (
                e.w_state(slot, level),
                (0..e.jumps().n_marks())
                    .map(|k| e.count_state(slot, level, k) as f64)
                    .sum(),
            ),
        }
    };
    let psi: Vec<Vec<f64>> = (0..=n)
        .map(|l| {
            (0..world.width(l))
                .map(|s| {
                    let (w, c) = state(l, s);
                    1.0 + 0.4 * w - 0.3 * c
                })
                .collect()
        })
        .collect();
    let phi = FreeTerm::from_fn(world, |t, slot| {
        let (w, c) = state(n, slot);
        0.5 + 0.8 * w + 0.2 * (t as f64 / n.max(1) as f64) * c
    });
    (psi, phi)
}

/// Ordered half-linear pair with monotone gaps in the outer time.
pub fn comparison_data(world: &World) -> LinearComparisonData {
    let n = world.n_steps();
    let horizon = world.clock().horizon();
    let w_term = terminal_w(world);
    let w2 = w_term.clone();
    let phi1 = FreeTerm::from_fn(world, |t, slot| {
        0.2 * w_term[slot] * (1.0 + 0.1 * t as f64 / n as f64)
    });
    let phi2 = FreeTerm::from_fn(world, |t, slot| {
        let tt = horizon * t as f64 / n as f64;
        0.2 * w2[slot] * (1.0 + 0.1 * t as f64 / n as f64)
            + 0.5 * (2.0 * horizon - tt) * (1.0 + 0.1 * w2[slot] * w2[slot])
    });
    let kappa = vec![0.5; world.jumps().n_marks()];
    LinearComparisonData {
        phi1,
        phi2,
        g1: Arc::new(|t, _s, y| 0.4 * (1.5 - t) * y),
        g2: Arc::new(|t, _s, y| 0.4 * (1.5 - t) * y + 0.5 * (2.0 - t)),
        g_lipschitz: 0.6,
        h: Arc::new(|s| 0.3 * (1.0 - s)),
        h_bound: 0.3,
        kappa,
    }
}
