use serde::{Deserialize, Serialize};

use super::{Clock, JumpMeasureSpec};
use crate::error::{Error, Result};

/// Quantization of the Brownian increment on the tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BrownianScheme {
    /// No Brownian branch at all (deterministic or jump-only worlds).
    None,
    /// Two-point `+-sqrt(dt)` with probability 1/2 each.
    TwoPoint,
    /// Three-point `{-sqrt(3 dt), 0, +sqrt(3 dt)}` with weights
    /// `{1/6, 2/3, 1/6}`; matches the first four odd/even moments.
    ThreePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeOptions {
    pub brownian: BrownianScheme,
    pub extra_noise: bool,
    /// Hard cap on the number of steps to bound the node count.
    pub max_steps: usize,
}

impl Default for TreeOptions {
    fn default() -> Self {
        TreeOptions {
            brownian: BrownianScheme::TwoPoint,
            extra_noise: false,
            max_steps: 6,
        }
    }
}

/// One branch of the per-step product measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    pub dw: f64,
    /// Jump indicator per mark over this step.
    pub jumps: Vec<bool>,
    /// Extra-noise draw, `+-1`, or 0 when extra noise is disabled.
    pub eps: f64,
    pub prob: f64,
}

/// Exact finite probability model of the noise over the grid.
///
/// Branching is identical at every node of a step (product measure), so a
/// node at level `l+1` with index `i` has parent `i / bc` and branch
/// `i % bc` where `bc` is the step's branch count. Children of a node are
/// contiguous.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    clock: Clock,
    jumps: JumpMeasureSpec,
    options: TreeOptions,
    step_branches: Vec<Vec<BranchPoint>>,
    /// Per level: node probabilities.
    probs: Vec<Vec<f64>>,
    /// Per level: Brownian state W(t_l) per node.
    w: Vec<Vec<f64>>,
    /// Per level: cumulative jump counts, node-major (`node * n_marks + k`).
    counts: Vec<Vec<u32>>,
    /// Per level: last extra-noise draw observed at this node (0 at root).
    eps: Vec<Vec<f64>>,
}

pub fn build_tree(
    clock: &Clock,
    jumps: &JumpMeasureSpec,
    options: TreeOptions,
) -> Result<ScenarioTree> {
    let n = clock.n_steps();
    if n > options.max_steps {
        return Err(Error::Invalid(format!(
            "tree cap exceeded: {} steps > max_steps {}",
            n, options.max_steps
        )));
    }
    let m = jumps.n_marks();
    let mut step_branches = Vec::with_capacity(n);
    for i in 0..n {
        let dt = clock.dt(i);
        let w_points: Vec<(f64, f64)> = match options.brownian {
            BrownianScheme::None => vec![(0.0, 1.0)],
            BrownianScheme::TwoPoint => {
                let s = dt.sqrt();
                vec![(-s, 0.5), (s, 0.5)]
            }
            BrownianScheme::ThreePoint => {
                let s = (3.0 * dt).sqrt();
                vec![(-s, 1.0 / 6.0), (0.0, 2.0 / 3.0), (s, 1.0 / 6.0)]
            }
        };
        let eps_points: Vec<(f64, f64)> = if options.extra_noise {
            vec![(-1.0, 0.5), (1.0, 0.5)]
        } else {
            vec![(0.0, 1.0)]
        };
        for k in 0..m {
            if jumps.intensities[k] * dt >= 1.0 {
                return Err(Error::Invalid(format!(
                    "lambda * dt = {} >= 1 for mark {}: refine the grid",
                    jumps.intensities[k] * dt,
                    k
                )));
            }
        }
        let mut branches = Vec::new();
        for &(dw, pw) in &w_points {
            // Enumerate all 2^m jump patterns.
            for pattern in 0..(1usize << m) {
                let mut pj = 1.0;
                let mut ind = Vec::with_capacity(m);
                for k in 0..m {
                    let p = jumps.intensities[k] * dt;
                    let fired = pattern >> k & 1 == 1;
                    pj *= if fired { p } else { 1.0 - p };
                    ind.push(fired);
                }
                for &(eps, pe) in &eps_points {
                    branches.push(BranchPoint {
                        dw,
                        jumps: ind.clone(),
                        eps,
                        prob: pw * pj * pe,
                    });
                }
            }
        }
        step_branches.push(branches);
    }

    // Roll the state forward level by level.
    let mut probs = vec![vec![1.0]];
    let mut w = vec![vec![0.0]];
    let mut counts = vec![vec![0u32; m]];
    let mut eps = vec![vec![0.0]];
    for i in 0..n {
        let bc = step_branches[i].len();
        let parents = probs[i].len();
        let mut lp = Vec::with_capacity(parents * bc);
        let mut lw = Vec::with_capacity(parents * bc);
        let mut lc = Vec::with_capacity(parents * bc * m);
        let mut le = Vec::with_capacity(parents * bc);
        for parent in 0..parents {
            for branch in &step_branches[i] {
                lp.push(probs[i][parent] * branch.prob);
                lw.push(w[i][parent] + branch.dw);
                for k in 0..m {
                    lc.push(counts[i][parent * m + k] + branch.jumps[k] as u32);
                }
                le.push(branch.eps);
            }
        }
        probs.push(lp);
        w.push(lw);
        counts.push(lc);
        eps.push(le);
    }

    Ok(ScenarioTree {
        clock: clock.clone(),
        jumps: jumps.clone(),
        options,
        step_branches,
        probs,
        w,
        counts,
        eps,
    })
}

impl ScenarioTree {
    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn jumps(&self) -> &JumpMeasureSpec {
        &self.jumps
    }

    pub fn options(&self) -> &TreeOptions {
        &self.options
    }

    pub fn n_steps(&self) -> usize {
        self.clock.n_steps()
    }

    pub fn n_marks(&self) -> usize {
        self.jumps.n_marks()
    }

    pub fn branch_count(&self, step: usize) -> usize {
        self.step_branches[step].len()
    }

    pub fn branches(&self, step: usize) -> &[BranchPoint] {
        &self.step_branches[step]
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.probs[level].len()
    }

    pub fn n_leaves(&self) -> usize {
        self.level_len(self.n_steps())
    }

    pub fn node_prob(&self, level: usize, node: usize) -> f64 {
        self.probs[level][node]
    }

    /// Brownian state `W(t_level)` at a node.
    pub fn w_state(&self, level: usize, node: usize) -> f64 {
        self.w[level][node]
    }

    /// Cumulative jump count of a mark at a node.
    pub fn count_state(&self, level: usize, node: usize, mark: usize) -> u32 {
        self.counts[level][node * self.n_marks() + mark]
    }

    /// Extra-noise draw observed over the step into this level.
    pub fn eps_state(&self, level: usize, node: usize) -> f64 {
        self.eps[level][node]
    }

    pub fn parent(&self, level: usize, node: usize) -> usize {
        node / self.branch_count(level - 1)
    }

    pub fn branch_of(&self, level: usize, node: usize) -> usize {
        node % self.branch_count(level - 1)
    }

    /// Ancestor chain of a leaf: the node index at every level from the
    /// root (index 0) to the leaf itself.
    pub fn ancestors(&self, leaf: usize) -> Vec<usize> {
        let n = self.n_steps();
        let mut chain = vec![0usize; n + 1];
        chain[n] = leaf;
        for level in (1..=n).rev() {
            chain[level - 1] = self.parent(level, chain[level]);
        }
        chain
    }

    /// Expectation of step-`level`-measurable values.
    pub fn expectation(&self, level: usize, values: &[f64]) -> f64 {
        self.probs[level]
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_mark() -> JumpMeasureSpec {
        JumpMeasureSpec::new(vec![1.0], vec![0.5]).unwrap()
    }

    #[test]
    fn binomial_one_step() {
        let clock = Clock::ito_uniform(1.0, 1);
        let t = build_tree(&clock, &JumpMeasureSpec::none(), TreeOptions::default()).unwrap();
        assert_eq!(t.n_leaves(), 2);
        assert_relative_eq!(t.node_prob(1, 0), 0.5);
        assert_relative_eq!(t.node_prob(1, 1), 0.5);
    }

    #[test]
    fn two_steps_with_mark_has_16_leaves() {
        let clock = Clock::ito_uniform(1.0, 2);
        let t = build_tree(&clock, &one_mark(), TreeOptions::default()).unwrap();
        assert_eq!(t.branch_count(0), 4);
        assert_eq!(t.n_leaves(), 16);
    }

    #[test]
    fn branch_moments() {
        let clock = Clock::ito_uniform(2.0, 3);
        let t = build_tree(
            &clock,
            &one_mark(),
            TreeOptions {
                extra_noise: true,
                ..TreeOptions::default()
            },
        )
        .unwrap();
        for step in 0..3 {
            let dt = clock.dt(step);
            let bs = t.branches(step);
            let total: f64 = bs.iter().map(|b| b.prob).sum();
            assert!((total - 1.0).abs() < 1e-15);
            let mean_dw: f64 = bs.iter().map(|b| b.prob * b.dw).sum();
            let var_dw: f64 = bs.iter().map(|b| b.prob * b.dw * b.dw).sum();
            assert!(mean_dw.abs() < 1e-15);
            assert_relative_eq!(var_dw, dt, max_relative = 1e-14);
            // Jump compensation is exact per step.
            let comp: f64 = bs
                .iter()
                .map(|b| b.prob * (b.jumps[0] as u8 as f64 - 0.5 * dt))
                .sum();
            assert!(comp.abs() < 1e-15);
            // Extra noise orthogonal to both noises.
            let e_eps_dw: f64 = bs.iter().map(|b| b.prob * b.eps * b.dw).sum();
            let e_eps_jump: f64 = bs
                .iter()
                .map(|b| b.prob * b.eps * (b.jumps[0] as u8 as f64 - 0.5 * dt))
                .sum();
            assert!(e_eps_dw.abs() < 1e-15);
            assert!(e_eps_jump.abs() < 1e-15);
        }
    }

    #[test]
    fn three_point_scheme_moments() {
        let clock = Clock::ito_uniform(1.0, 2);
        let t = build_tree(
            &clock,
            &JumpMeasureSpec::none(),
            TreeOptions {
                brownian: BrownianScheme::ThreePoint,
                ..TreeOptions::default()
            },
        )
        .unwrap();
        let bs = t.branches(0);
        let dt = clock.dt(0);
        let var: f64 = bs.iter().map(|b| b.prob * b.dw * b.dw).sum();
        let m4: f64 = bs.iter().map(|b| b.prob * b.dw.powi(4)).sum();
        assert_relative_eq!(var, dt, max_relative = 1e-14);
        assert_relative_eq!(m4, 3.0 * dt * dt, max_relative = 1e-13);
    }

    #[test]
    fn cap_is_enforced() {
        let clock = Clock::ito_uniform(1.0, 7);
        assert!(build_tree(&clock, &JumpMeasureSpec::none(), TreeOptions::default()).is_err());
    }

    #[test]
    fn leaf_probabilities_sum_to_one() {
        let clock = Clock::ito_uniform(1.0, 4);
        let t = build_tree(
            &clock,
            &one_mark(),
            TreeOptions {
                extra_noise: true,
                ..TreeOptions::default()
            },
        )
        .unwrap();
        let total: f64 = (0..t.n_leaves()).map(|i| t.node_prob(4, i)).sum();
        assert!((total - 1.0).abs() < 1e-14);
    }
}
