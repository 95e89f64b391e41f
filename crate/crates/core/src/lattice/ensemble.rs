use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BSpec, Clock, ClockSpec, JumpMeasureSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BSVIEENS";
const FORMAT_VERSION: u32 = 1;

/// Monte-Carlo ensemble of noise paths over a clock grid.
///
/// Reproducibility contract: the ensemble is a pure function of
/// `(clock spec, jump spec, extra_noise, n_paths, seed)`. Each path draws
/// from its own counter-based stream (ChaCha12 with `stream = path index`),
/// so the result does not depend on simulation order and path blocks can be
/// generated independently.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    clock: Clock,
    jumps: JumpMeasureSpec,
    extra_noise: bool,
    n_paths: usize,
    seed: u64,
    /// Brownian increments, path-major: `dw[path * n_steps + step]`.
    dw: Vec<f64>,
    /// Jump counts per mark: `counts[(path * n_steps + step) * n_marks + k]`.
    counts: Vec<u32>,
    /// Extra-noise draws, `+-1` (or 0 when disabled).
    eps: Vec<f64>,
}

pub fn simulate_paths(
    clock: &Clock,
    jumps: &JumpMeasureSpec,
    extra_noise: bool,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::Invalid("n_paths must be at least 1".into()));
    }
    let n = clock.n_steps();
    let m = jumps.n_marks();
    let mut dw = vec![0.0; n_paths * n];
    let mut counts = vec![0u32; n_paths * n * m];
    let mut eps = vec![0.0; n_paths * n];
    let poissons: Vec<Vec<Poisson<f64>>> = (0..n)
        .map(|i| {
            jumps
                .intensities
                .iter()
                .map(|&l| Poisson::new(l * clock.dt(i)).expect("positive rate"))
                .collect()
        })
        .collect();
    for path in 0..n_paths {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(path as u64 + 1);
        for step in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            dw[path * n + step] = z * clock.dt(step).sqrt();
            for k in 0..m {
                counts[(path * n + step) * m + k] = poissons[step][k].sample(&mut rng) as u32;
            }
            if extra_noise {
                eps[path * n + step] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            }
        }
    }
    Ok(PathEnsemble {
        clock: clock.clone(),
        jumps: jumps.clone(),
        extra_noise,
        n_paths,
        seed,
        dw,
        counts,
        eps,
    })
}

/// Rebuilds a tree as an ensemble with one path per leaf. Requires all
/// leaves to be equiprobable (e.g. a pure two-point Brownian tree), so that
/// unweighted path averages reproduce the tree expectations exactly.
pub fn ensemble_from_tree(tree: &super::ScenarioTree) -> Result<PathEnsemble> {
    let n = tree.n_steps();
    let m = tree.n_marks();
    let leaves = tree.n_leaves();
    let uniform = 1.0 / leaves as f64;
    for leaf in 0..leaves {
        if (tree.node_prob(n, leaf) - uniform).abs() > 1e-14 {
            return Err(Error::Invalid(
                "tree leaves are not equiprobable; cannot flatten to an ensemble".into(),
            ));
        }
    }
    let mut dw = vec![0.0; leaves * n];
    let mut counts = vec![0u32; leaves * n * m];
    let mut eps = vec![0.0; leaves * n];
    for leaf in 0..leaves {
        let mut node = leaf;
        for level in (1..=n).rev() {
            let step = level - 1;
            let branch = &tree.branches(step)[tree.branch_of(level, node)];
            dw[leaf * n + step] = branch.dw;
            for k in 0..m {
                counts[(leaf * n + step) * m + k] = branch.jumps[k] as u32;
            }
            eps[leaf * n + step] = branch.eps;
            node = tree.parent(level, node);
        }
    }
    Ok(PathEnsemble {
        clock: tree.clock().clone(),
        jumps: tree.jumps().clone(),
        extra_noise: tree.options().extra_noise,
        n_paths: leaves,
        seed: 0,
        dw,
        counts,
        eps,
    })
}

#[derive(Serialize, Deserialize)]
struct EnsembleHeader {
    version: u32,
    times: Vec<f64>,
    b: BSpec,
    alpha: Vec<f64>,
    jumps: JumpMeasureSpec,
    extra_noise: bool,
    n_paths: usize,
    seed: u64,
}

impl PathEnsemble {
    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn jumps(&self) -> &JumpMeasureSpec {
        &self.jumps
    }

    pub fn has_extra_noise(&self) -> bool {
        self.extra_noise
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_steps(&self) -> usize {
        self.clock.n_steps()
    }

    pub fn dw(&self, path: usize, step: usize) -> f64 {
        self.dw[path * self.n_steps() + step]
    }

    pub fn jump_count(&self, path: usize, step: usize, mark: usize) -> u32 {
        let m = self.jumps.n_marks();
        self.counts[(path * self.n_steps() + step) * m + mark]
    }

    /// Compensated jump increment of a mark over a step.
    pub fn dpi_tilde(&self, path: usize, step: usize, mark: usize) -> f64 {
        self.jump_count(path, step, mark) as f64
            - self.jumps.intensities[mark] * self.clock.dt(step)
    }

    pub fn eps(&self, path: usize, step: usize) -> f64 {
        self.eps[path * self.n_steps() + step]
    }

    /// Brownian state `W(t_level)` along a path.
    pub fn w_state(&self, path: usize, level: usize) -> f64 {
        (0..level).map(|s| self.dw(path, s)).sum()
    }

    /// Cumulative jump count of a mark at `t_level` along a path.
    pub fn count_state(&self, path: usize, level: usize, mark: usize) -> u32 {
        (0..level).map(|s| self.jump_count(path, s, mark)).sum()
    }

    pub fn mean(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / self.n_paths as f64
    }

    /// Writes the ensemble as a columnar binary file with a JSON header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = EnsembleHeader {
            version: FORMAT_VERSION,
            times: self.clock.times().to_vec(),
            b: if self.clock.is_ito() {
                BSpec::Ito
            } else {
                BSpec::Steps(self.clock.b_values().to_vec())
            },
            alpha: (0..self.clock.n_steps()).map(|i| self.clock.alpha(i)).collect(),
            jumps: self.jumps.clone(),
            extra_noise: self.extra_noise,
            n_paths: self.n_paths,
            seed: self.seed,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        for &v in &self.dw {
            out.write_all(&v.to_le_bytes())?;
        }
        for &c in &self.counts {
            out.write_all(&c.to_le_bytes())?;
        }
        for &v in &self.eps {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PathEnsemble> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Invalid("not an ensemble file".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header_bytes)?;
        let header: EnsembleHeader = serde_json::from_slice(&header_bytes)?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported ensemble format version {}",
                header.version
            )));
        }
        let clock = Clock::build(&ClockSpec {
            times: header.times,
            b: header.b,
            alpha: header.alpha,
        })?;
        let n = clock.n_steps();
        let m = header.jumps.n_marks();
        let mut dw = vec![0.0; header.n_paths * n];
        let mut counts = vec![0u32; header.n_paths * n * m];
        let mut eps = vec![0.0; header.n_paths * n];
        let mut buf8 = [0u8; 8];
        let mut buf4 = [0u8; 4];
        for v in dw.iter_mut() {
            input.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
        for c in counts.iter_mut() {
            input.read_exact(&mut buf4)?;
            *c = u32::from_le_bytes(buf4);
        }
        for v in eps.iter_mut() {
            input.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
        Ok(PathEnsemble {
            clock,
            jumps: header.jumps,
            extra_noise: header.extra_noise,
            n_paths: header.n_paths,
            seed: header.seed,
            dw,
            counts,
            eps,
        })
    }
}
