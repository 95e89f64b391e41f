//! Quantitative harnesses over computed solutions: integrated norms of the
//! four solution components, a-priori and stability checks, pointwise
//! comparison with the partition scheme for linear drivers, the linear
//! forward Volterra equation with its duality pairing, time-regularity
//! estimation and the exponential-weighted bound for y-free data.

use std::sync::Arc;

use serde::Serialize;

use crate::bsde::{solve_bsde, GeneratorSpec};
use crate::bsvie::{
    picard_type1_diagonal, solve_type2, BSVIESolution, FreeTerm, Generator2Spec, IntervalPlan,
    Type2Options,
};
use crate::conditional::CondExpEngine;
use crate::constants::WellPosednessConstants;
use crate::error::{Error, Result};
use crate::lattice::World;

/// Per-path walk through the world: node index at every level along each
/// path together with the path weight. Paths are tree leaves or ensemble
/// paths.
struct PathView<'a> {
    world: &'a World,
    /// Node chains per leaf on trees; ensembles use the path index at
    /// every level.
    chains: Option<Vec<Vec<usize>>>,
    weights: Vec<f64>,
}

impl<'a> PathView<'a> {
    fn new(world: &'a World) -> Self {
        match world {
            World::Tree(tree) => {
                let n = tree.n_steps();
                let leaves = tree.n_leaves();
                let chains = (0..leaves).map(|l| tree.ancestors(l)).collect();
                let weights = (0..leaves).map(|l| tree.node_prob(n, l)).collect();
                PathView {
                    world,
                    chains: Some(chains),
                    weights,
                }
            }
            World::Ensemble(ens) => PathView {
                world,
                chains: None,
                weights: vec![1.0 / ens.n_paths() as f64; ens.n_paths()],
            },
        }
    }

    fn count(&self) -> usize {
        self.weights.len()
    }

    fn weight(&self, path: usize) -> f64 {
        self.weights[path]
    }

    fn node(&self, path: usize, level: usize) -> usize {
        match &self.chains {
            Some(c) => c[path][level],
            None => path,
        }
    }

    /// Number of jumps of a mark over a step along a path.
    fn jump_count(&self, path: usize, step: usize, mark: usize) -> f64 {
        match self.world {
            World::Tree(tree) => {
                let child = self.node(path, step + 1);
                let branch = &tree.branches(step)[tree.branch_of(step + 1, child)];
                branch.jumps[mark] as u8 as f64
            }
            World::Ensemble(ens) => ens.jump_count(path, step, mark) as f64,
        }
    }

    fn dw(&self, path: usize, step: usize) -> f64 {
        match self.world {
            World::Tree(tree) => {
                tree.w_state(step + 1, self.node(path, step + 1))
                    - tree.w_state(step, self.node(path, step))
            }
            World::Ensemble(ens) => ens.dw(path, step),
        }
    }

    fn dpi_tilde(&self, path: usize, step: usize, mark: usize) -> f64 {
        let lambda = self.world.jumps().intensities[mark];
        self.jump_count(path, step, mark) - lambda * self.world.clock().dt(step)
    }
}

/// Exponential clock weights for the weighted norms: the outer integral
/// carries `exp((beta - delta) A_t)` (plain `exp(beta A_t)` on the
/// diagonal part) and the inner integrals carry `exp(delta A_r)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormWeights {
    pub beta: f64,
    pub delta: f64,
}

/// Components of the integrated solution norm, each reported as the p-th
/// power of the respective contribution.
#[derive(Debug, Clone, Serialize)]
pub struct NormReport {
    pub p: f64,
    pub y_part: f64,
    pub z_part: f64,
    /// Jump component integrated against the realized jump measure.
    pub u_part_pi: f64,
    /// Jump component integrated against the compensator.
    pub u_part_mu: f64,
    pub m_part: f64,
    pub total: f64,
    pub weighted: bool,
}

/// Integrated norm of a solution over `[t_from, T]`: the diagonal in
/// `L^p(dA x dP)` and the inner square integrals of the integrands raised
/// to `p/2`, estimated exactly on trees and by path averages on ensembles.
pub fn norm_sp(
    sol: &BSVIESolution,
    world: &World,
    p: f64,
    from_step: usize,
    weights: Option<NormWeights>,
) -> Result<NormReport> {
    if !(p > 1.0) {
        return Err(Error::Invalid(format!("norm order must exceed 1, got {p}")));
    }
    let n = world.n_steps();
    if from_step > n {
        return Err(Error::Invalid(format!(
            "from_step {from_step} is beyond the grid ({n} steps)"
        )));
    }
    let clock = world.clock();
    let m_dim = world.jumps().n_marks();
    let w_diag = |t: usize| weights.map_or(1.0, |w| (w.beta * clock.a(t)).exp());
    let w_out = |t: usize| weights.map_or(1.0, |w| ((w.beta - w.delta) * clock.a(t)).exp());
    let w_in = |r: usize| weights.map_or(1.0, |w| (w.delta * clock.a(r)).exp());

    let mut y_part = 0.0;
    for t in from_step..n {
        let abs_p: Vec<f64> = sol.y[t].iter().map(|v| v.abs().powf(p)).collect();
        y_part += w_diag(t) * world.expectation(t, &abs_p) * clock.da(t);
    }

    let view = PathView::new(world);
    let mut z_part = 0.0;
    let mut u_part_pi = 0.0;
    let mut u_part_mu = 0.0;
    let mut m_part = 0.0;
    for path in 0..view.count() {
        let w = view.weight(path);
        for t in from_step..n {
            let factor = w * w_out(t) * clock.da(t);
            let mut z_int = 0.0;
            let mut u_pi = 0.0;
            let mut u_mu = 0.0;
            let mut qv = 0.0;
            for r in from_step..n {
                let node = view.node(path, r);
                let z = sol.zval(t, r, node);
                z_int += w_in(r) * z * z * clock.db(r);
                for k in 0..m_dim {
                    let u = sol.uval(t, r, node, k, m_dim);
                    u_pi += w_in(r) * u * u * view.jump_count(path, r, k);
                    u_mu += w_in(r) * u * u * world.jumps().intensities[k] * clock.dt(r);
                }
                let m_slot = match world {
                    World::Tree(_) => view.node(path, r + 1),
                    World::Ensemble(_) => path,
                };
                let dm = sol.m[t][r].get(m_slot).copied().unwrap_or(0.0);
                qv += w_in(r) * dm * dm;
            }
            z_part += factor * z_int.powf(0.5 * p);
            u_part_pi += factor * u_pi.powf(0.5 * p);
            u_part_mu += factor * u_mu.powf(0.5 * p);
            m_part += factor * qv.powf(0.5 * p);
        }
    }
    Ok(NormReport {
        p,
        y_part,
        z_part,
        u_part_pi,
        u_part_mu,
        m_part,
        total: y_part + z_part + u_part_mu + m_part,
        weighted: weights.is_some(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SolutionBoundReport {
    /// Weighted norm of the solution (p-th power form).
    pub lhs: f64,
    /// Weighted norm of the data: free term plus driver at the origin.
    pub rhs: f64,
    pub ratio: f64,
    pub c_factor: f64,
    pub ok: bool,
    /// Both sides vanish; the ratio carries no information.
    pub degenerate: bool,
}

/// Checks the solution-versus-data bound at p = 2: the weighted solution
/// norm against `c_factor` times the weighted data norm. Weights come from
/// the well-posedness constants when given (requires admissibility),
/// otherwise both sides are unweighted.
pub fn apriori_check(
    sol: &BSVIESolution,
    phi: &FreeTerm,
    f: &GeneratorSpec,
    world: &World,
    constants: Option<&WellPosednessConstants>,
    c_factor: f64,
) -> Result<SolutionBoundReport> {
    let weights = match constants {
        Some(c) => {
            if !c.type1_ok {
                return Err(Error::Invalid(
                    "weighted mode requires an admissible beta".into(),
                ));
            }
            Some(NormWeights {
                beta: c.beta,
                delta: c.delta_star,
            })
        }
        None => None,
    };
    let n = world.n_steps();
    let clock = world.clock();
    let m_dim = world.jumps().n_marks();
    let lhs = norm_sp(sol, world, 2.0, 0, weights)?.total;

    let w_diag = |t: usize| weights.map_or(1.0, |w| (w.beta * clock.a(t)).exp());
    let w_out = |t: usize| weights.map_or(1.0, |w| ((w.beta - w.delta) * clock.a(t)).exp());
    let w_in = |r: usize| weights.map_or(1.0, |w| (w.delta * clock.a(r)).exp());
    let mut rhs = 0.0;
    for t in 0..n {
        let sq: Vec<f64> = phi.phi[t].iter().map(|v| v * v).collect();
        rhs += w_diag(t) * world.expectation(n, &sq) * clock.da(t);
        let mut inner = 0.0;
        for r in t..n {
            let f0 = f.zero_table(clock.time(t), clock.time(r), m_dim) / clock.alpha(r);
            inner += w_in(r) * f0 * f0 * clock.db(r);
        }
        rhs += w_out(t) * inner * clock.da(t);
    }
    let degenerate = lhs <= 1e-28 && rhs <= 1e-28;
    let ratio = if degenerate { 0.0 } else { lhs / rhs };
    Ok(SolutionBoundReport {
        lhs,
        rhs,
        ratio,
        c_factor,
        ok: degenerate || lhs <= c_factor * rhs * (1.0 + 1e-10) + 1e-12,
        degenerate,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    /// Norm of the solution difference (p-th root form).
    pub lhs: f64,
    /// Norm of the data difference: free-term gap plus frozen-argument
    /// driver gap.
    pub rhs: f64,
    pub ratio: f64,
}

/// Distance between two solutions against the distance between their data.
/// The driver gap freezes the arguments at either solution and takes the
/// larger of the two, so the report is symmetric in the pair.
#[allow(clippy::too_many_arguments)]
pub fn stability_gap(
    sol1: &BSVIESolution,
    sol2: &BSVIESolution,
    phi1: &FreeTerm,
    phi2: &FreeTerm,
    f1: &GeneratorSpec,
    f2: &GeneratorSpec,
    world: &World,
    p: f64,
) -> Result<StabilityReport> {
    let n = world.n_steps();
    let clock = world.clock();
    let m_dim = world.jumps().n_marks();
    let diff = difference_solution(sol1, sol2, world);
    let lhs = norm_sp(&diff, world, p, 0, None)?.total.powf(1.0 / p);

    let mut phi_gap = 0.0;
    for t in 0..n {
        let dp: Vec<f64> = phi1.phi[t]
            .iter()
            .zip(&phi2.phi[t])
            .map(|(a, b)| (a - b).abs().powf(p))
            .collect();
        phi_gap += world.expectation(n, &dp) * clock.da(t);
    }

    let view = PathView::new(world);
    let driver_gap_at = |sol: &BSVIESolution| -> f64 {
        let mut total = 0.0;
        for path in 0..view.count() {
            let w = view.weight(path);
            for t in 0..n {
                let mut inner = 0.0;
                for r in t..n {
                    let node = view.node(path, r);
                    let y = sol.y[r][node];
                    let z = sol.zval(t, r, node);
                    let u: Vec<f64> = (0..m_dim).map(|k| sol.uval(t, r, node, k, m_dim)).collect();
                    let tt = clock.time(t);
                    let ss = clock.time(r);
                    inner += (f1.eval(tt, ss, y, z, &u) - f2.eval(tt, ss, y, z, &u)).abs()
                        * clock.db(r);
                }
                total += w * inner.powf(p) * clock.da(t);
            }
        }
        total
    };
    let dgap = driver_gap_at(sol1).max(driver_gap_at(sol2));
    let rhs = (phi_gap + dgap).powf(1.0 / p);
    let ratio = if lhs <= 1e-14 && rhs <= 1e-14 {
        0.0
    } else {
        lhs / rhs
    };
    Ok(StabilityReport { lhs, rhs, ratio })
}

/// Componentwise difference of two solutions over all filled regions.
fn difference_solution(a: &BSVIESolution, b: &BSVIESolution, world: &World) -> BSVIESolution {
    let n = world.n_steps();
    let m_dim = world.jumps().n_marks();
    let mut out = BSVIESolution::empty(world);
    for t in 0..=n {
        for slot in 0..world.width(t) {
            out.y[t][slot] = a.y[t][slot] - b.y[t][slot];
        }
        for s in 0..n {
            let width = world.width(s);
            if !a.z[t][s].is_empty() || !b.z[t][s].is_empty() {
                out.z[t][s] = (0..width)
                    .map(|sl| a.zval(t, s, sl) - b.zval(t, s, sl))
                    .collect();
                out.u[t][s] = (0..width * m_dim)
                    .map(|i| {
                        a.u[t][s].get(i).copied().unwrap_or(0.0)
                            - b.u[t][s].get(i).copied().unwrap_or(0.0)
                    })
                    .collect();
            }
            let m_len = a.m[t][s].len().max(b.m[t][s].len());
            if m_len > 0 {
                out.m[t][s] = (0..m_len)
                    .map(|i| {
                        a.m[t][s].get(i).copied().unwrap_or(0.0)
                            - b.m[t][s].get(i).copied().unwrap_or(0.0)
                    })
                    .collect();
            }
        }
    }
    out.has_delta = a.has_delta && b.has_delta;
    out
}

/// Nodewise ordering statistics between two diagonal processes.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonStats {
    pub nodes_checked: usize,
    /// Nodes where the first value exceeds the second beyond `tol`.
    pub violations: usize,
    /// Largest excess among violating nodes, zero when none.
    pub max_violation: f64,
    /// `(level, slot)` of the worst violation.
    pub worst: Option<(usize, usize)>,
}

/// Counts the nodes where `y1 > y2 + tol`; an ordered pair yields zero
/// violations.
pub fn compare_solutions(y1: &[Vec<f64>], y2: &[Vec<f64>], tol: f64) -> ComparisonStats {
    let mut stats = ComparisonStats {
        nodes_checked: 0,
        violations: 0,
        max_violation: 0.0,
        worst: None,
    };
    for (t, (a, b)) in y1.iter().zip(y2).enumerate() {
        for (slot, (v1, v2)) in a.iter().zip(b).enumerate() {
            stats.nodes_checked += 1;
            let excess = v1 - v2;
            if excess > tol {
                stats.violations += 1;
                if excess > stats.max_violation {
                    stats.max_violation = excess;
                    stats.worst = Some((t, slot));
                }
            }
        }
    }
    stats
}

/// Data pair for the comparison experiment with a driver linear in the
/// integrands: `f_i(t,s,y,z,u) = g_i(t,s,y) + h(s) z + sum_k kappa_k u_k
/// lambda_k`, with `kappa_k > -1`.
pub struct LinearComparisonData {
    pub phi1: FreeTerm,
    pub phi2: FreeTerm,
    pub g1: Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>,
    pub g2: Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>,
    /// Lipschitz bound of the g's in y.
    pub g_lipschitz: f64,
    pub h: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub h_bound: f64,
    /// Jump weight per mark.
    pub kappa: Vec<f64>,
}

impl LinearComparisonData {
    fn generator(&self, which: usize, world: &World) -> Result<GeneratorSpec> {
        let g = if which == 1 {
            self.g1.clone()
        } else {
            self.g2.clone()
        };
        let h = self.h.clone();
        let kappa = self.kappa.clone();
        let intensities = world.jumps().intensities.clone();
        let theta_u: f64 = kappa
            .iter()
            .zip(&intensities)
            .map(|(k, l)| k * k * l)
            .sum();
        GeneratorSpec::new(
            move |t, s, y, z, u: &[f64]| {
                let jump: f64 = u
                    .iter()
                    .zip(&kappa)
                    .zip(&intensities)
                    .map(|((uv, k), l)| uv * k * l)
                    .sum();
                g(t, s, y) + h(s) * z + jump
            },
            self.g_lipschitz * self.g_lipschitz,
            self.h_bound * self.h_bound,
            theta_u,
        )
    }

    /// Spot-checks the monotone hypotheses of the comparison statement:
    /// the g-gap and the free-term gap are nonnegative and nonincreasing
    /// in the outer time, and at least one g has y-increments that do not
    /// grow with the outer time.
    fn check_hypotheses(&self, world: &World, n_samples: usize, seed: u64) -> Result<()> {
        use rand::{Rng, SeedableRng};
        if self.kappa.iter().any(|&k| k <= -1.0) {
            return Err(Error::Invalid(
                "jump weights must exceed -1 for the comparison to apply".into(),
            ));
        }
        let tol = 1e-10;
        let horizon = world.clock().horizon();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut mono2 = [true, true];
        for _ in 0..n_samples {
            let s = rng.gen_range(0.0..=horizon);
            let t = rng.gen_range(0.0..=s);
            let tau = rng.gen_range(t..=s);
            let y = rng.gen_range(-3.0..3.0);
            let y2 = rng.gen_range(-3.0..3.0);
            let gap_t = (self.g2)(t, s, y) - (self.g1)(t, s, y);
            let gap_tau = (self.g2)(tau, s, y) - (self.g1)(tau, s, y);
            if gap_tau < -tol || gap_t < gap_tau - tol {
                return Err(Error::Invalid(
                    "driver gap must be nonnegative and nonincreasing in the outer time".into(),
                ));
            }
            for (i, g) in [&self.g1, &self.g2].iter().enumerate() {
                let inc_t = (g(t, s, y) - g(t, s, y2)) * (y - y2);
                let inc_tau = (g(tau, s, y) - g(tau, s, y2)) * (y - y2);
                if inc_t < inc_tau - tol {
                    mono2[i] = false;
                }
            }
        }
        if !mono2[0] && !mono2[1] {
            return Err(Error::Invalid(
                "neither driver has y-increments nonincreasing in the outer time".into(),
            ));
        }
        let n = world.n_steps();
        for slot in 0..world.width(n) {
            let mut prev = f64::INFINITY;
            for t in 0..=n {
                let d = self.phi2.phi[t][slot] - self.phi1.phi[t][slot];
                if d < -tol || d > prev + tol {
                    return Err(Error::Invalid(
                        "free-term gap must be nonnegative and nonincreasing in time".into(),
                    ));
                }
                prev = d;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionReport {
    pub n_blocks: usize,
    pub nodes_checked: usize,
    /// Nodes of the partitioned difference below `-tol`.
    pub violations: usize,
    pub min_difference: f64,
    /// Integrated distance between the partitioned and the exact
    /// difference of the pair.
    pub error: f64,
}

/// Piecewise-frozen comparison scheme: the free terms and the outer time
/// of the drivers are frozen at the left endpoint of each partition block,
/// which turns every block into a plain backward equation. The partitioned
/// difference is checked for nonnegativity and against the exact
/// difference of the pair.
pub fn partition_comparison(
    data: &LinearComparisonData,
    boundaries: &[usize],
    world: &World,
    engine: &CondExpEngine,
    tol: f64,
) -> Result<PartitionReport> {
    let n = world.n_steps();
    if boundaries.len() < 2
        || boundaries[0] != 0
        || *boundaries.last().unwrap() != n
        || boundaries.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::Invalid(format!(
            "partition must increase from 0 to {n}, got {boundaries:?}"
        )));
    }
    data.check_hypotheses(world, 500, 71)?;
    let clock = world.clock();
    let f1 = data.generator(1, world)?;
    let f2 = data.generator(2, world)?;
    let (y1, _) = picard_type1_diagonal(&data.phi1, &f1, world, engine, 1e-12, 200)?;
    let (y2, _) = picard_type1_diagonal(&data.phi2, &f2, world, engine, 1e-12, 200)?;

    // Partitioned diagonals: one backward solve per block and driver.
    let mut y1_part: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let mut y2_part: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    for w in boundaries.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let t_lo = clock.time(lo);
        let b1 = solve_bsde(&data.phi1.phi[lo], &f1.frozen_t(t_lo), world, engine)?;
        let b2 = solve_bsde(&data.phi2.phi[lo], &f2.frozen_t(t_lo), world, engine)?;
        for t in lo..hi {
            y1_part[t] = b1.y[t].clone();
            y2_part[t] = b2.y[t].clone();
        }
    }
    y1_part[n] = data.phi1.phi[n].clone();
    y2_part[n] = data.phi2.phi[n].clone();

    let mut nodes_checked = 0;
    let mut violations = 0;
    let mut min_difference = f64::INFINITY;
    let mut error_sq = 0.0;
    for t in 0..=n {
        let diff_part: Vec<f64> = y2_part[t]
            .iter()
            .zip(&y1_part[t])
            .map(|(a, b)| a - b)
            .collect();
        for &d in &diff_part {
            nodes_checked += 1;
            min_difference = min_difference.min(d);
            if d < -tol {
                violations += 1;
            }
        }
        if t < n {
            let sq: Vec<f64> = (0..world.width(t))
                .map(|slot| {
                    let exact = y2[t][slot] - y1[t][slot];
                    (diff_part[slot] - exact) * (diff_part[slot] - exact)
                })
                .collect();
            error_sq += world.expectation(t, &sq) * clock.da(t);
        }
    }
    Ok(PartitionReport {
        n_blocks: boundaries.len() - 1,
        nodes_checked,
        violations,
        min_difference,
        error: error_sq.sqrt(),
    })
}

/// Scalar kernels of the linear forward Volterra equation: a drift kernel,
/// a Brownian kernel and a per-mark jump kernel, each a function of
/// `(t, s)` with `s < t`, bounded and smooth in `t`.
#[derive(Clone)]
pub struct FSVIECoefficients {
    pub a0: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub a1: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub jump: Arc<dyn Fn(f64, f64, usize) -> f64 + Send + Sync>,
    /// Uniform bound on all kernels.
    pub bound: f64,
    /// Uniform bound on the t-derivatives.
    pub dt_bound: f64,
}

impl FSVIECoefficients {
    pub fn zero() -> Self {
        FSVIECoefficients {
            a0: Arc::new(|_, _| 0.0),
            a1: Arc::new(|_, _| 0.0),
            jump: Arc::new(|_, _, _| 0.0),
            bound: 0.0,
            dt_bound: 0.0,
        }
    }
}

/// Forward recursion for the linear Volterra equation: left-point
/// integrands, so every stochastic increment multiplies the state before
/// the step.
pub fn solve_fsvie(
    psi: &[Vec<f64>],
    coeff: &FSVIECoefficients,
    world: &World,
) -> Result<Vec<Vec<f64>>> {
    let n = world.n_steps();
    if psi.len() != n + 1 || (0..=n).any(|l| psi[l].len() != world.width(l)) {
        return Err(Error::Invalid(
            "forcing term must be adapted: one value per node and level".into(),
        ));
    }
    let clock = world.clock();
    let m_dim = world.jumps().n_marks();
    let mut x: Vec<Vec<f64>> = (0..=n).map(|l| vec![0.0; world.width(l)]).collect();
    let view = PathView::new(world);
    match world {
        World::Tree(tree) => {
            for level in 0..=n {
                let t = clock.time(level);
                for node in 0..tree.level_len(level) {
                    // Ancestor chain of this node down to the root.
                    let mut chain = vec![0usize; level + 1];
                    chain[level] = node;
                    for l in (1..=level).rev() {
                        chain[l - 1] = tree.parent(l, chain[l]);
                    }
                    let mut val = psi[level][node];
                    for j in 0..level {
                        let s = clock.time(j);
                        let xj = x[j][chain[j]];
                        let dw = tree.w_state(j + 1, chain[j + 1]) - tree.w_state(j, chain[j]);
                        val += (coeff.a0)(t, s) * xj * clock.dt(j) + (coeff.a1)(t, s) * xj * dw;
                        let branch = &tree.branches(j)[tree.branch_of(j + 1, chain[j + 1])];
                        for k in 0..m_dim {
                            let dpi = branch.jumps[k] as u8 as f64
                                - world.jumps().intensities[k] * clock.dt(j);
                            val += (coeff.jump)(t, s, k) * xj * dpi;
                        }
                    }
                    x[level][node] = val;
                }
            }
        }
        World::Ensemble(_) => {
            for path in 0..view.count() {
                for level in 0..=n {
                    let t = clock.time(level);
                    let mut val = psi[level][path];
                    for j in 0..level {
                        let s = clock.time(j);
                        let xj = x[j][path];
                        val += (coeff.a0)(t, s) * xj * clock.dt(j)
                            + (coeff.a1)(t, s) * xj * view.dw(path, j);
                        for k in 0..m_dim {
                            val += (coeff.jump)(t, s, k) * xj * view.dpi_tilde(path, j, k);
                        }
                    }
                    x[level][path] = val;
                }
            }
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    /// `E int <Psi(t), Y(t)> dt`.
    pub pairing_backward: f64,
    /// `E int <X(t), Phi(t)> dt`.
    pub pairing_forward: f64,
    pub gap: f64,
    /// Standard error of the pathwise pairing difference on ensembles.
    pub std_error: Option<f64>,
}

/// Duality pairing between the linear forward equation and its adjoint
/// backward equation. The adjoint driver transposes the kernels and scales
/// the jump term by the exact discrete second moment of the compensated
/// increment, so the two pairings agree to machine precision on trees.
pub fn duality_gap(
    psi: &[Vec<f64>],
    phi: &FreeTerm,
    coeff: &FSVIECoefficients,
    world: &World,
    engine: &CondExpEngine,
) -> Result<DualityReport> {
    if !world.clock().is_ito() {
        return Err(Error::Invalid(
            "the duality pairing uses the Lebesgue clock".into(),
        ));
    }
    let n = world.n_steps();
    let clock = world.clock();
    let m_dim = world.jumps().n_marks();
    let x = solve_fsvie(psi, coeff, world)?;

    // Per-step adjoint factor of a mark: the second moment of the
    // compensated increment per unit time. Trees carry one jump per step
    // at most (Bernoulli), ensembles draw Poisson counts.
    let times: Vec<f64> = (0..=n).map(|i| clock.time(i)).collect();
    let factors: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..m_dim)
                .map(|k| {
                    let lambda = world.jumps().intensities[k];
                    match world {
                        World::Tree(_) => lambda * (1.0 - lambda * clock.dt(i)),
                        World::Ensemble(_) => lambda,
                    }
                })
                .collect()
        })
        .collect();
    let a0 = coeff.a0.clone();
    let a1 = coeff.a1.clone();
    let jump = coeff.jump.clone();
    let step_of = move |t: f64| -> usize {
        times
            .iter()
            .position(|&v| (v - t).abs() <= 1e-12 * (1.0 + t.abs()))
            .unwrap_or(0)
    };
    let b2 = coeff.bound * coeff.bound;
    let driver = Generator2Spec::new(
        move |t, s, y, _z_ts, z_st, _u_ts, u_st: &[f64]| {
            let i = step_of(t);
            // The forward recursion is strictly left-point, so its
            // transpose carries no diagonal term.
            if step_of(s) == i {
                return 0.0;
            }
            let jumps: f64 = (0..u_st.len())
                .map(|k| jump(s, t, k) * u_st[k] * factors[i][k])
                .sum();
            a0(s, t) * y + a1(s, t) * z_st + jumps
        },
        b2,
        0.0,
        0.0,
        b2,
        b2,
    )?;
    let sol = solve_type2(
        phi,
        &driver,
        world,
        engine,
        &IntervalPlan::single(world),
        Type2Options::default(),
    )?;

    let mut pairing_backward = 0.0;
    for t in 0..n {
        let prod: Vec<f64> = psi[t].iter().zip(&sol.y[t]).map(|(a, b)| a * b).collect();
        pairing_backward += world.expectation(t, &prod) * clock.dt(t);
    }
    let view = PathView::new(world);
    let mut pairing_forward = 0.0;
    let mut per_path = vec![0.0; view.count()];
    for path in 0..view.count() {
        let w = view.weight(path);
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        for t in 0..n {
            let node = view.node(path, t);
            // Free terms are terminal-measurable: indexed by leaf or path.
            fwd += x[t][node] * phi.phi[t][path] * clock.dt(t);
            bwd += psi[t][node] * sol.y[t][node] * clock.dt(t);
        }
        pairing_forward += w * fwd;
        per_path[path] = bwd - fwd;
    }
    let std_error = match world {
        World::Tree(_) => None,
        World::Ensemble(_) => {
            let mean = per_path.iter().sum::<f64>() / per_path.len() as f64;
            let var = per_path.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
                / (per_path.len() - 1).max(1) as f64;
            Some((var / per_path.len() as f64).sqrt())
        }
    };
    Ok(DualityReport {
        pairing_backward,
        pairing_forward,
        gap: (pairing_backward - pairing_forward).abs(),
        std_error,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    /// Fitted exponent of `E|Y(t') - Y(t)|^p ~ |t' - t|^rho`.
    pub exponent: f64,
    pub exponent_se: f64,
    /// `(lag, moment)` per probe scale.
    pub scales: Vec<(f64, f64)>,
    /// All increments vanish; no exponent can be fitted.
    pub flat: bool,
    /// Expected exponent from the data's smoothness, when known.
    pub target: Option<f64>,
}

/// Log-log regression of the p-th increment moment of the diagonal over
/// dyadic time lags.
pub fn regularity_estimate(
    y: &[Vec<f64>],
    world: &World,
    p: f64,
    n_scales: usize,
    target: Option<f64>,
) -> Result<RegularityReport> {
    if n_scales < 4 {
        return Err(Error::Invalid(
            "at least 4 probe scales are needed for the fit".into(),
        ));
    }
    let n = world.n_steps();
    let clock = world.clock();
    let mut lags: Vec<usize> = (1..=n_scales).map(|j| (n >> j).max(1)).collect();
    lags.dedup();
    if lags.len() < 4 {
        return Err(Error::Invalid(format!(
            "grid with {n} steps supports only {} distinct dyadic scales",
            lags.len()
        )));
    }
    let view = PathView::new(world);
    let mut scales = Vec::new();
    for &lag in &lags {
        let mut moment = 0.0;
        let mut h_sum = 0.0;
        let mut count = 0usize;
        for t in 0..=(n - lag) {
            let mut e = 0.0;
            for path in 0..view.count() {
                let d = y[t + lag][view.node(path, t + lag)] - y[t][view.node(path, t)];
                e += view.weight(path) * d.abs().powf(p);
            }
            moment += e;
            h_sum += clock.time(t + lag) - clock.time(t);
            count += 1;
        }
        scales.push((h_sum / count as f64, moment / count as f64));
    }
    let flat = scales.iter().all(|&(_, m)| m < 1e-28);
    if flat {
        return Ok(RegularityReport {
            exponent: 0.0,
            exponent_se: 0.0,
            scales,
            flat,
            target,
        });
    }
    let pts: Vec<(f64, f64)> = scales
        .iter()
        .filter(|&&(_, m)| m > 0.0)
        .map(|&(h, m)| (h.ln(), m.ln()))
        .collect();
    if pts.len() < 4 {
        return Err(Error::Invalid(
            "fewer than 4 scales carry a nonzero moment".into(),
        ));
    }
    let (slope, se) = ols_slope(&pts);
    Ok(RegularityReport {
        exponent: slope,
        exponent_se: se,
        scales,
        flat,
        target,
    })
}

/// Least-squares slope with its standard error.
fn ols_slope(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = pts
        .iter()
        .map(|p| {
            let r = p.1 - intercept - slope * p.0;
            r * r
        })
        .sum();
    let dof = (pts.len() as f64 - 2.0).max(1.0);
    ((slope), (rss / dof / sxx).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct CadlagReport {
    pub threshold: f64,
    /// `(step, child node)` of each detected jump of the diagonal.
    pub jumps: Vec<(usize, usize)>,
    /// Detected jumps on branches that carry a noise jump.
    pub attributed: usize,
    pub unattributed: usize,
}

/// Locates the jumps of the diagonal on a tree and attributes each to the
/// noise on its branch: a Poisson mark or an extra-noise draw. A jump is
/// an increment beyond `threshold`; by default ten times the median
/// absolute increment.
pub fn cadlag_jump_report(
    y: &[Vec<f64>],
    world: &World,
    threshold: Option<f64>,
) -> Result<CadlagReport> {
    let tree = match world {
        World::Tree(t) => t,
        World::Ensemble(_) => {
            return Err(Error::Invalid(
                "jump attribution needs the exact branch structure of a tree".into(),
            ))
        }
    };
    let n = tree.n_steps();
    let mut incs = Vec::new();
    for step in 0..n {
        for child in 0..tree.level_len(step + 1) {
            let parent = tree.parent(step + 1, child);
            incs.push((y[step + 1][child] - y[step][parent]).abs());
        }
    }
    let thr = match threshold {
        Some(t) => t,
        None => {
            let mut sorted = incs.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            10.0 * sorted[sorted.len() / 2].max(1e-13)
        }
    };
    let mut jumps = Vec::new();
    let mut attributed = 0;
    let mut idx = 0;
    for step in 0..n {
        for child in 0..tree.level_len(step + 1) {
            if incs[idx] > thr {
                jumps.push((step, child));
                let branch = &tree.branches(step)[tree.branch_of(step + 1, child)];
                if branch.jumps.iter().any(|&j| j) || branch.eps != 0.0 {
                    attributed += 1;
                }
            }
            idx += 1;
        }
    }
    let unattributed = jumps.len() - attributed;
    Ok(CadlagReport {
        threshold: thr,
        jumps,
        attributed,
        unattributed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpBoundReport {
    pub beta: f64,
    /// Slack of the pointwise value bound, over all nodes and times.
    pub min_slack_value: f64,
    pub max_slack_value: f64,
    /// Slack of the integrand-energy bound.
    pub min_slack_energy: f64,
    pub max_slack_energy: f64,
}

/// Verifies the exponential-weighted bounds for data without (y, z, u)
/// feedback: the squared value and the integrand energy at every tree
/// node against the weighted data norm. Negative slack is a violation.
pub fn exp_bound_check(
    phi: &FreeTerm,
    f0: &dyn Fn(f64, f64) -> f64,
    beta: f64,
    world: &World,
    engine: &CondExpEngine,
) -> Result<ExpBoundReport> {
    if !(beta > 0.0) {
        return Err(Error::Invalid("beta must be positive".into()));
    }
    if !world.is_tree() {
        return Err(Error::Invalid(
            "the nodewise bound check needs exact tree conditional expectations".into(),
        ));
    }
    let n = world.n_steps();
    let clock = world.clock();
    let m_dim = world.jumps().n_marks();
    let horizon = clock.horizon();
    let view = PathView::new(world);
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    let mut min_e = f64::INFINITY;
    let mut max_e = f64::NEG_INFINITY;
    for t in 0..=n {
        let t_time = clock.time(t);
        // Deterministic part of the data: the integrated driver and the
        // weighted driver energy.
        let mut f_int = 0.0;
        let mut f_energy = 0.0;
        for s in t..n {
            let v = f0(t_time, clock.time(s));
            f_int += v * clock.dt(s);
            f_energy += (beta * clock.time(s)).exp() * v * v * clock.dt(s);
        }
        let cond_phi = engine.condexp(world, &phi.phi[t], n, t)?;
        let phi_sq: Vec<f64> = phi.phi[t].iter().map(|v| v * v).collect();
        let cond_phi_sq = engine.condexp(world, &phi_sq, n, t)?;
        for node in 0..world.width(t) {
            let y = cond_phi[node] + f_int;
            let rhs =
                (beta * horizon).exp() * cond_phi_sq[node] + f_energy / beta;
            let slack = rhs - (beta * t_time).exp() * y * y;
            min_v = min_v.min(slack);
            max_v = max_v.max(slack);
        }
        if t < n {
            let rep = engine.represent(world, &phi.phi[t], n, t)?;
            let mut energy = vec![0.0; world.width(n)];
            for path in 0..view.count() {
                let mut acc = 0.0;
                for s in t..n {
                    let w = (beta * clock.time(s)).exp();
                    let idx = s - t;
                    let node = view.node(path, s);
                    let z = rep.z[idx][node];
                    acc += w * z * z * clock.dt(s);
                    for k in 0..m_dim {
                        let u = rep.u[idx][node * m_dim + k];
                        acc += w * u * u * view.jump_count(path, s, k);
                    }
                    let dm = rep.m_incr[idx][view.node(path, s + 1)];
                    acc += w * dm * dm;
                }
                energy[path] = acc;
            }
            let cond_energy = engine.condexp(world, &energy, n, t)?;
            for node in 0..world.width(t) {
                let rhs = (beta * horizon).exp() * cond_phi_sq[node] + f_energy / beta;
                let slack = rhs - cond_energy[node];
                min_e = min_e.min(slack);
                max_e = max_e.max(slack);
            }
        }
    }
    Ok(ExpBoundReport {
        beta,
        min_slack_value: min_v,
        max_slack_value: max_v,
        min_slack_energy: min_e,
        max_slack_energy: max_e,
    })
}
