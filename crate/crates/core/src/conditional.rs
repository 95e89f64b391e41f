//! Conditional-expectation engines and the discrete orthogonal
//! decomposition (martingale representation) used by every backward solve.
//!
//! On scenario trees, conditional expectations are probability-weighted
//! child averages and the decomposition is exact. On path ensembles, they
//! are least-squares projections on a feature basis of the state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{PathEnsemble, ScenarioTree, World};

/// Feature basis for the regression engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Basis {
    /// Monomials of total degree `<= degree` in `(W_t, N_t per mark)`,
    /// optionally with one `N_k > 0` indicator per mark.
    Polynomial { degree: usize, jump_indicators: bool },
    /// One indicator per distinct observed `(W_t, N_t)` state. On an
    /// ensemble with one path per tree leaf this reproduces the exact tree
    /// engine.
    StateIndicators,
}

impl Default for Basis {
    fn default() -> Self {
        Basis::Polynomial {
            degree: 2,
            jump_indicators: true,
        }
    }
}

/// Conditional-expectation engine: exact on trees, linear regression on
/// ensembles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondExpEngine {
    pub basis: Basis,
    /// Ridge added (relative to the Gram trace) when the normal equations
    /// are singular.
    pub ridge: f64,
}

impl Default for CondExpEngine {
    fn default() -> Self {
        CondExpEngine {
            basis: Basis::default(),
            ridge: 1e-10,
        }
    }
}

/// Diagnostics attached to a regression solve.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CondExpMeta {
    pub ridge_used: f64,
    pub singular_fallback: bool,
}

/// One backward step of the orthogonal decomposition at a fixed level:
/// integrands are level-measurable, the residual increments live on the
/// next level.
#[derive(Debug, Clone)]
pub struct StepRepresentation {
    /// `E[V | F_level]`, one value per node/path at `level`.
    pub cond_mean: Vec<f64>,
    /// Brownian integrand per node/path at `level`.
    pub z: Vec<f64>,
    /// Jump integrand, node-major (`slot * n_marks + mark`).
    pub u: Vec<f64>,
    /// Residual martingale increment, per node at `level + 1` on trees and
    /// per path on ensembles.
    pub m_incr: Vec<f64>,
    pub meta: CondExpMeta,
}

/// Multi-step decomposition of a terminal variable between two grid times.
#[derive(Debug, Clone)]
pub struct OrthoDecomposition {
    pub from_step: usize,
    pub to_step: usize,
    /// `E[V | F_from]`.
    pub cond_mean: Vec<f64>,
    /// Per step `from_step..to_step`: Brownian integrand.
    pub z: Vec<Vec<f64>>,
    /// Per step: jump integrand, node-major.
    pub u: Vec<Vec<f64>>,
    /// Per step: residual increments (values on the next level / per path).
    pub m_incr: Vec<Vec<f64>>,
}

impl CondExpEngine {
    /// Conditional expectation of step-`from`-measurable `payoff` at
    /// `at_step <= from`.
    pub fn condexp(
        &self,
        world: &World,
        payoff: &[f64],
        from: usize,
        at_step: usize,
    ) -> Result<Vec<f64>> {
        if at_step > from {
            return Err(Error::Invalid(format!(
                "condexp target step {at_step} is after the payoff step {from}"
            )));
        }
        let mut values = payoff.to_vec();
        match world {
            World::Tree(tree) => {
                for level in (at_step..from).rev() {
                    values = tree_child_average(tree, level, &values);
                }
                Ok(values)
            }
            World::Ensemble(ens) => {
                // A single projection on the state at `at_step`; the tower
                // property holds only within the basis span.
                let (fitted, _) = self.project(ens, &values, at_step)?;
                Ok(fitted)
            }
        }
    }

    /// One-step representation of `next_values` (measurable at
    /// `level + 1`) from `level`.
    pub fn one_step(
        &self,
        world: &World,
        next_values: &[f64],
        level: usize,
    ) -> Result<StepRepresentation> {
        match world {
            World::Tree(tree) => one_step_tree(tree, next_values, level),
            World::Ensemble(ens) => self.one_step_ensemble(ens, next_values, level),
        }
    }

    /// Full decomposition of a terminal variable at `to_step` into
    /// conditional mean, Brownian part, compensated-jump part and an
    /// orthogonal residual, step by step from `from_step`.
    pub fn represent(
        &self,
        world: &World,
        terminal: &[f64],
        to_step: usize,
        from_step: usize,
    ) -> Result<OrthoDecomposition> {
        if from_step >= to_step {
            return Err(Error::Invalid(format!(
                "represent requires from_step < to_step, got {from_step} >= {to_step}"
            )));
        }
        let n_levels = to_step - from_step;
        let mut z = vec![Vec::new(); n_levels];
        let mut u = vec![Vec::new(); n_levels];
        let mut m_incr = vec![Vec::new(); n_levels];
        let mut values = terminal.to_vec();
        for level in (from_step..to_step).rev() {
            let step = self.one_step(world, &values, level)?;
            let idx = level - from_step;
            z[idx] = step.z;
            u[idx] = step.u;
            m_incr[idx] = step.m_incr;
            values = step.cond_mean;
        }
        Ok(OrthoDecomposition {
            from_step,
            to_step,
            cond_mean: values,
            z,
            u,
            m_incr,
        })
    }

    fn one_step_ensemble(
        &self,
        ens: &PathEnsemble,
        next_values: &[f64],
        level: usize,
    ) -> Result<StepRepresentation> {
        let n_paths = ens.n_paths();
        let m = ens.jumps().n_marks();
        let dt = ens.clock().dt(level);
        let (cond_mean, meta) = self.project(ens, next_values, level)?;
        // Z via E[V dW | F_t] / dt.
        let weighted: Vec<f64> = (0..n_paths)
            .map(|p| next_values[p] * ens.dw(p, level))
            .collect();
        let (z_scaled, _) = self.project(ens, &weighted, level)?;
        let z: Vec<f64> = z_scaled.iter().map(|v| v / dt).collect();
        // U_k via E[V (dN_k - lambda_k dt) | F_t] / (lambda_k dt).
        let mut u = vec![0.0; n_paths * m];
        for k in 0..m {
            let var = ens.jumps().intensities[k] * dt;
            let weighted: Vec<f64> = (0..n_paths)
                .map(|p| next_values[p] * ens.dpi_tilde(p, level, k))
                .collect();
            let (uk, _) = self.project(ens, &weighted, level)?;
            for p in 0..n_paths {
                u[p * m + k] = uk[p] / var;
            }
        }
        let m_incr: Vec<f64> = (0..n_paths)
            .map(|p| {
                let mut r = next_values[p] - cond_mean[p] - z[p] * ens.dw(p, level);
                for k in 0..m {
                    r -= u[p * m + k] * ens.dpi_tilde(p, level, k);
                }
                r
            })
            .collect();
        Ok(StepRepresentation {
            cond_mean,
            z,
            u,
            m_incr,
            meta,
        })
    }

    /// Least-squares projection of per-path values on the basis evaluated
    /// at the state of `level`; returns fitted values.
    fn project(
        &self,
        ens: &PathEnsemble,
        values: &[f64],
        level: usize,
    ) -> Result<(Vec<f64>, CondExpMeta)> {
        let features = self.feature_matrix(ens, level);
        let n_paths = ens.n_paths();
        let k = features.ncols();
        let y = DVector::from_column_slice(values);
        let gram = features.transpose() * &features;
        let rhs = features.transpose() * &y;
        let mut meta = CondExpMeta::default();
        let direct = gram
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&rhs))
            .filter(|c| c.iter().all(|v| v.is_finite()));
        let coeffs = match direct {
            Some(c) => c,
            None => {
                let tr: f64 = gram.diagonal().sum();
                let lambda = self.ridge * tr.max(1e-300);
                meta.ridge_used = lambda;
                meta.singular_fallback = true;
                let mut reg = gram;
                for i in 0..k {
                    reg[(i, i)] += lambda;
                }
                reg.cholesky()
                    .ok_or_else(|| {
                        Error::Convergence(
                            "ridge-regularized normal equations still singular".into(),
                        )
                    })?
                    .solve(&rhs)
            }
        };
        let fitted = features * coeffs;
        debug_assert_eq!(fitted.len(), n_paths);
        Ok((fitted.iter().copied().collect(), meta))
    }

    fn feature_matrix(&self, ens: &PathEnsemble, level: usize) -> DMatrix<f64> {
        let n_paths = ens.n_paths();
        let m = ens.jumps().n_marks();
        match &self.basis {
            Basis::Polynomial {
                degree,
                jump_indicators,
            } => {
                // Monomials of total degree <= degree in (W, N_1, ..., N_m).
                let vars: Vec<Vec<f64>> = (0..n_paths)
                    .map(|p| {
                        let mut v = vec![ens.w_state(p, level)];
                        for k in 0..m {
                            v.push(ens.count_state(p, level, k) as f64);
                        }
                        v
                    })
                    .collect();
                let exponents = monomial_exponents(1 + m, *degree);
                let extra = if *jump_indicators { m } else { 0 };
                let mut mat = DMatrix::zeros(n_paths, exponents.len() + extra);
                for (p, row) in vars.iter().enumerate() {
                    for (j, expo) in exponents.iter().enumerate() {
                        let mut val = 1.0;
                        for (x, &e) in row.iter().zip(expo) {
                            val *= x.powi(e as i32);
                        }
                        mat[(p, j)] = val;
                    }
                    for k in 0..extra {
                        mat[(p, exponents.len() + k)] =
                            (ens.count_state(p, level, k) > 0) as u8 as f64;
                    }
                }
                mat
            }
            Basis::StateIndicators => {
                let mut states: Vec<(u64, Vec<u32>)> = Vec::new();
                let mut index = vec![0usize; n_paths];
                for p in 0..n_paths {
                    let key = (
                        ens.w_state(p, level).to_bits(),
                        (0..m).map(|k| ens.count_state(p, level, k)).collect::<Vec<_>>(),
                    );
                    index[p] = match states.iter().position(|s| *s == key) {
                        Some(i) => i,
                        None => {
                            states.push(key);
                            states.len() - 1
                        }
                    };
                }
                let mut mat = DMatrix::zeros(n_paths, states.len());
                for p in 0..n_paths {
                    mat[(p, index[p])] = 1.0;
                }
                mat
            }
        }
    }
}

/// Exponent tuples of total degree `<= degree` over `n_vars` variables.
fn monomial_exponents(n_vars: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, var: usize, remaining: u32) {
        if var == current.len() {
            out.push(current.clone());
            return;
        }
        for e in 0..=remaining {
            current[var] = e;
            rec(out, current, var + 1, remaining - e);
        }
        current[var] = 0;
    }
    let mut out = Vec::new();
    let mut current = vec![0u32; n_vars];
    rec(&mut out, &mut current, 0, degree as u32);
    out
}

fn tree_child_average(tree: &ScenarioTree, level: usize, child_values: &[f64]) -> Vec<f64> {
    let bc = tree.branch_count(level);
    let parents = tree.level_len(level);
    let branches = tree.branches(level);
    (0..parents)
        .map(|n| {
            (0..bc)
                .map(|b| branches[b].prob * child_values[n * bc + b])
                .sum()
        })
        .collect()
}

fn one_step_tree(
    tree: &ScenarioTree,
    next_values: &[f64],
    level: usize,
) -> Result<StepRepresentation> {
    let bc = tree.branch_count(level);
    let parents = tree.level_len(level);
    let branches = tree.branches(level);
    let m = tree.n_marks();
    let dt = tree.clock().dt(level);
    let intensities = &tree.jumps().intensities;

    // Regressors per branch: dW and the compensated indicator per mark.
    // The Gram matrix is branch-only, so one factorization serves the
    // whole level; regressors with zero variance are dropped.
    let mut regressors: Vec<Vec<f64>> = Vec::new();
    let mut slots: Vec<Option<usize>> = Vec::new(); // 0 = z, 1.. = marks
    let dw_col: Vec<f64> = branches.iter().map(|b| b.dw).collect();
    let dw_var: f64 = branches.iter().map(|b| b.prob * b.dw * b.dw).sum();
    if dw_var > 0.0 {
        slots.push(Some(0));
        regressors.push(dw_col);
    } else {
        slots.push(None);
    }
    for k in 0..m {
        let comp: Vec<f64> = branches
            .iter()
            .map(|b| b.jumps[k] as u8 as f64 - intensities[k] * dt)
            .collect();
        slots.push(Some(regressors.len()));
        regressors.push(comp);
    }
    let kdim = regressors.len();
    if kdim == 0 {
        // No noise on this step; the value passes through untouched.
        let mut cond_mean = vec![0.0; parents];
        let mut m_incr = vec![0.0; parents * bc];
        for n in 0..parents {
            let mean: f64 = (0..bc)
                .map(|b| branches[b].prob * next_values[n * bc + b])
                .sum();
            cond_mean[n] = mean;
            for b in 0..bc {
                m_incr[n * bc + b] = next_values[n * bc + b] - mean;
            }
        }
        return Ok(StepRepresentation {
            cond_mean,
            z: vec![0.0; parents],
            u: vec![0.0; parents * m],
            m_incr,
            meta: CondExpMeta::default(),
        });
    }
    let gram = DMatrix::from_fn(kdim, kdim, |i, j| {
        branches
            .iter()
            .enumerate()
            .map(|(b, br)| br.prob * regressors[i][b] * regressors[j][b])
            .sum()
    });
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Convergence("degenerate branch covariance on tree".into())
    })?;

    let mut cond_mean = vec![0.0; parents];
    let mut z = vec![0.0; parents];
    let mut u = vec![0.0; parents * m];
    let mut m_incr = vec![0.0; parents * bc];
    for n in 0..parents {
        let mean: f64 = (0..bc)
            .map(|b| branches[b].prob * next_values[n * bc + b])
            .sum();
        cond_mean[n] = mean;
        let rhs = DVector::from_fn(kdim, |i, _| {
            (0..bc)
                .map(|b| branches[b].prob * regressors[i][b] * (next_values[n * bc + b] - mean))
                .sum()
        });
        let coeffs = chol.solve(&rhs);
        if let Some(zi) = slots[0] {
            z[n] = coeffs[zi];
        }
        for k in 0..m {
            if let Some(ui) = slots[1 + k] {
                u[n * m + k] = coeffs[ui];
            }
        }
        for b in 0..bc {
            let mut fit = 0.0;
            for (i, reg) in regressors.iter().enumerate() {
                fit += coeffs[i] * reg[b];
            }
            m_incr[n * bc + b] = next_values[n * bc + b] - mean - fit;
        }
    }
    Ok(StepRepresentation {
        cond_mean,
        z,
        u,
        m_incr,
        meta: CondExpMeta::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{
        build_tree, ensemble_from_tree, simulate_paths, Clock, JumpMeasureSpec, TreeOptions,
    };
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn tree_world(steps: usize, jumps: bool, eps: bool) -> World {
        let clock = Clock::ito_uniform(1.0, steps);
        let jm = if jumps {
            JumpMeasureSpec::new(vec![1.0], vec![0.5]).unwrap()
        } else {
            JumpMeasureSpec::none()
        };
        World::Tree(
            build_tree(
                &clock,
                &jm,
                TreeOptions {
                    extra_noise: eps,
                    ..TreeOptions::default()
                },
            )
            .unwrap(),
        )
    }

    fn tree(world: &World) -> &ScenarioTree {
        match world {
            World::Tree(t) => t,
            _ => unreachable!(),
        }
    }

    #[test]
    fn condexp_of_constant_is_constant() {
        let world = tree_world(3, true, true);
        let t = tree(&world);
        let payoff = vec![2.5; t.n_leaves()];
        let engine = CondExpEngine::default();
        for step in 0..3 {
            let v = engine.condexp(&world, &payoff, 3, step).unwrap();
            assert!(v.iter().all(|&x| (x - 2.5).abs() < 1e-15));
        }
    }

    #[test]
    fn condexp_martingale_property() {
        let world = tree_world(3, false, false);
        let t = tree(&world);
        let payoff: Vec<f64> = (0..t.n_leaves()).map(|i| t.w_state(3, i)).collect();
        let engine = CondExpEngine::default();
        for step in 0..3 {
            let v = engine.condexp(&world, &payoff, 3, step).unwrap();
            for node in 0..t.level_len(step) {
                assert_relative_eq!(v[node], t.w_state(step, node), epsilon = 1e-14);
            }
        }
        // E[W_T^2 | F_k] = W_k^2 + (T - t_k).
        let payoff: Vec<f64> = (0..t.n_leaves()).map(|i| t.w_state(3, i).powi(2)).collect();
        let v = engine.condexp(&world, &payoff, 3, 1).unwrap();
        for node in 0..t.level_len(1) {
            assert_relative_eq!(
                v[node],
                t.w_state(1, node).powi(2) + (1.0 - t.clock().time(1)),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn represent_brownian_terminal() {
        let world = tree_world(3, true, true);
        let t = tree(&world);
        let engine = CondExpEngine::default();
        let payoff: Vec<f64> = (0..t.n_leaves()).map(|i| t.w_state(3, i)).collect();
        let d = engine.represent(&world, &payoff, 3, 0).unwrap();
        for step in 0..3 {
            assert!(d.z[step].iter().all(|&z| (z - 1.0).abs() < 1e-12));
            assert!(d.u[step].iter().all(|&u| u.abs() < 1e-12));
            assert!(d.m_incr[step].iter().all(|&m| m.abs() < 1e-12));
        }
    }

    #[test]
    fn represent_jump_count_terminal() {
        let world = tree_world(3, true, false);
        let t = tree(&world);
        let engine = CondExpEngine::default();
        let payoff: Vec<f64> = (0..t.n_leaves()).map(|i| t.count_state(3, i, 0) as f64).collect();
        let d = engine.represent(&world, &payoff, 3, 0).unwrap();
        for step in 0..3 {
            assert!(d.u[step].iter().all(|&u| (u - 1.0).abs() < 1e-12));
            assert!(d.z[step].iter().all(|&z| z.abs() < 1e-12));
            assert!(d.m_incr[step].iter().all(|&m| m.abs() < 1e-12));
        }
        // At the root the conditional mean is the compensator lambda T.
        assert_relative_eq!(d.cond_mean[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn represent_extra_noise_goes_to_m() {
        let world = tree_world(2, false, true);
        let t = tree(&world);
        let engine = CondExpEngine::default();
        // Terminal = extra-noise draw of the first step.
        let payoff: Vec<f64> = (0..t.n_leaves())
            .map(|i| t.eps_state(1, t.parent(2, i)))
            .collect();
        let d = engine.represent(&world, &payoff, 2, 0).unwrap();
        assert!(d.z[0].iter().all(|&z| z.abs() < 1e-14));
        assert!(d.u[0].iter().all(|&u| u.abs() < 1e-14));
        assert!(d.cond_mean[0].abs() < 1e-14);
        // Residual of the first step is eps itself.
        let max_m = d.m_incr[0].iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        assert_relative_eq!(max_m, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn reconstruction_identity_random_terminals() {
        let world = tree_world(3, true, true);
        let t = tree(&world);
        let engine = CondExpEngine::default();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        for _ in 0..100 {
            let payoff: Vec<f64> = (0..t.n_leaves()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let d = engine.represent(&world, &payoff, 3, 0).unwrap();
            // Rebuild each leaf value by accumulating over its history.
            for leaf in 0..t.n_leaves() {
                let mut nodes = vec![leaf];
                for level in (1..=3).rev() {
                    nodes.push(t.parent(level, *nodes.last().unwrap()));
                }
                nodes.reverse(); // nodes[level] is the ancestor at `level`
                let mut v = d.cond_mean[0];
                for step in 0..3 {
                    let node = nodes[step];
                    let child = nodes[step + 1];
                    let branch = &t.branches(step)[t.branch_of(step + 1, child)];
                    v += d.z[step][node] * branch.dw;
                    for k in 0..t.n_marks() {
                        v += d.u[step][node * t.n_marks() + k]
                            * (branch.jumps[k] as u8 as f64
                                - t.jumps().intensities[k] * t.clock().dt(step));
                    }
                    v += d.m_incr[step][child];
                }
                assert!((v - payoff[leaf]).abs() < 1e-12, "leaf {leaf}: {v} vs {}", payoff[leaf]);
            }
        }
    }

    #[test]
    fn per_step_orthogonality() {
        let world = tree_world(3, true, true);
        let t = tree(&world);
        let engine = CondExpEngine::default();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let payoff: Vec<f64> = (0..t.n_leaves()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = engine.represent(&world, &payoff, 3, 0).unwrap();
        for step in 0..3 {
            let branches = t.branches(step);
            let dt = t.clock().dt(step);
            for node in 0..t.level_len(step) {
                let mut m_dw = 0.0;
                let mut m_dpi = 0.0;
                let mut z_u = 0.0;
                for (b, br) in branches.iter().enumerate() {
                    let dpi = br.jumps[0] as u8 as f64 - t.jumps().intensities[0] * dt;
                    let m = d.m_incr[step][node * branches.len() + b];
                    m_dw += br.prob * m * br.dw;
                    m_dpi += br.prob * m * dpi;
                    z_u += br.prob
                        * (d.z[step][node] * br.dw)
                        * (d.u[step][node * t.n_marks()] * dpi);
                }
                assert!(m_dw.abs() < 1e-13);
                assert!(m_dpi.abs() < 1e-13);
                assert!(z_u.abs() < 1e-13);
            }
        }
    }

    #[test]
    fn regression_with_indicators_matches_tree_exactly() {
        // Pure two-point Brownian tree: equiprobable leaves, and the W
        // state identifies the node at every level.
        let clock = Clock::ito_uniform(1.0, 2);
        let t = build_tree(&clock, &JumpMeasureSpec::none(), TreeOptions::default()).unwrap();
        let ens = ensemble_from_tree(&t).unwrap();
        let tree_world = World::Tree(t.clone());
        let ens_world = World::Ensemble(ens);
        let engine = CondExpEngine {
            basis: Basis::StateIndicators,
            ridge: 1e-10,
        };
        let payoff: Vec<f64> = (0..t.n_leaves())
            .map(|i| (t.w_state(2, i) * 3.0).sin() + i as f64 * 0.1)
            .collect();
        let exact = engine.condexp(&tree_world, &payoff, 2, 1).unwrap();
        let fitted = engine.condexp(&ens_world, &payoff, 2, 1).unwrap();
        // The W state after one step distinguishes level-1 nodes; all four
        // leaves are equiprobable, so group means equal tree averages.
        // leaf -> level-1 parent: parent = leaf / 2.
        for leaf in 0..4 {
            assert!((fitted[leaf] - exact[leaf / 2]).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_is_idempotent_on_basis_payoffs() {
        let clock = Clock::ito_uniform(1.0, 4);
        let jumps = JumpMeasureSpec::new(vec![1.0], vec![1.0]).unwrap();
        let ens = simulate_paths(&clock, &jumps, false, 500, 11).unwrap();
        let world = World::Ensemble(ens.clone());
        let engine = CondExpEngine::default();
        // Payoff already in the span of the level-2 basis.
        let payoff: Vec<f64> = (0..500)
            .map(|p| 1.0 + 2.0 * ens.w_state(p, 2) + ens.w_state(p, 2).powi(2))
            .collect();
        let fitted = engine.condexp(&world, &payoff, 2, 2).unwrap();
        for p in 0..500 {
            assert!((fitted[p] - payoff[p]).abs() < 1e-8);
        }
    }

    #[test]
    fn ridge_fallback_on_singular_design() {
        // Constant features are collinear with the intercept once jump
        // indicators are included on a world without jumps at level 0.
        let clock = Clock::ito_uniform(1.0, 2);
        let jumps = JumpMeasureSpec::new(vec![1.0], vec![0.3]).unwrap();
        let ens = simulate_paths(&clock, &jumps, false, 100, 3).unwrap();
        let values: Vec<f64> = (0..100).map(|p| ens.dw(p, 0)).collect();
        let engine = CondExpEngine::default();
        // At level 0 every state is identical: W = 0, N = 0, indicator = 0.
        let (fitted, meta) = engine
            .project(&ens, &values, 0)
            .expect("ridge fallback should succeed");
        assert!(meta.singular_fallback);
        assert!(meta.ridge_used > 0.0);
        let mean = values.iter().sum::<f64>() / 100.0;
        for v in fitted {
            assert!((v - mean).abs() < 1e-6);
        }
    }
}
