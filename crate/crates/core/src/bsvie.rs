//! Type-I and Type-II BSVIE solvers on discrete worlds: the diagonal
//! construction, Picard iteration with frozen diagonal, the Fredholm step
//! used for stitching, and M-solution completion below the diagonal.

use std::sync::Arc;

use serde::Serialize;

use crate::bsde::{solve_backward_nodal, GeneratorSpec};
use crate::conditional::CondExpEngine;
use crate::constants::{min_beta, Condition};
use crate::error::{Error, Result};
use crate::lattice::World;

/// Free term `Phi(t)`, one terminal-measurable vector per grid time.
#[derive(Debug, Clone, Serialize)]
pub struct FreeTerm {
    pub phi: Vec<Vec<f64>>,
    /// Optional Hölder metadata `(alpha, rho)` for regularity studies.
    pub holder: Option<(f64, f64)>,
}

impl FreeTerm {
    pub fn from_fn(world: &World, f: impl Fn(usize, usize) -> f64) -> FreeTerm {
        let n = world.n_steps();
        let width = world.width(n);
        let phi = (0..=n)
            .map(|t| (0..width).map(|slot| f(t, slot)).collect())
            .collect();
        FreeTerm { phi, holder: None }
    }

    /// The same terminal variable at every `t`.
    pub fn constant(world: &World, xi: &[f64]) -> FreeTerm {
        FreeTerm::from_fn(world, |_, slot| xi[slot])
    }

    /// Deterministic free term `c(t)`.
    pub fn deterministic(world: &World, c: &[f64]) -> FreeTerm {
        FreeTerm::from_fn(world, |t, _| c[t])
    }

    fn validate(&self, world: &World) -> Result<()> {
        let n = world.n_steps();
        if self.phi.len() != n + 1 {
            return Err(Error::Invalid(format!(
                "free term has {} time slices, grid has {}",
                self.phi.len(),
                n + 1
            )));
        }
        let width = world.width(n);
        if self.phi.iter().any(|v| v.len() != width) {
            return Err(Error::Invalid(
                "free term slices must be terminal-measurable (final-level width)".into(),
            ));
        }
        Ok(())
    }
}

/// Discrete BSVIE solution on two-parameter grids. `y[t]` is the diagonal
/// value at level `t`; `z[t][s]`, `u[t][s]`, `m[t][s]` are the step-`s`
/// integrands and residual increments of the `t`-th equation. Entries are
/// empty where the region has not been filled: adapted solutions cover
/// `s >= t` only, M-solutions also the lower triangle.
#[derive(Debug, Clone, Serialize)]
pub struct BSVIESolution {
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<Vec<f64>>>,
    pub u: Vec<Vec<Vec<f64>>>,
    pub m: Vec<Vec<Vec<f64>>>,
    /// True once the lower triangle has been filled from time zero.
    pub has_delta: bool,
}

impl BSVIESolution {
    pub fn empty(world: &World) -> BSVIESolution {
        let n = world.n_steps();
        BSVIESolution {
            y: (0..=n).map(|t| vec![0.0; world.width(t)]).collect(),
            z: vec![vec![Vec::new(); n]; n + 1],
            u: vec![vec![Vec::new(); n]; n + 1],
            m: vec![vec![Vec::new(); n]; n + 1],
            has_delta: false,
        }
    }

    /// `Z(t, s)` at a slot of level `s`; zero where unfilled.
    pub fn zval(&self, t: usize, s: usize, slot: usize) -> f64 {
        self.z[t][s].get(slot).copied().unwrap_or(0.0)
    }

    /// `U(t, s)` for one mark at a slot of level `s`; zero where unfilled.
    pub fn uval(&self, t: usize, s: usize, slot: usize, mark: usize, n_marks: usize) -> f64 {
        self.u[t][s]
            .get(slot * n_marks + mark)
            .copied()
            .unwrap_or(0.0)
    }
}

/// Driver of a Type-II BSVIE,
/// `f(t, s, y, z_ts, z_st, u_ts, u_st)` where the `st` arguments are the
/// below-diagonal integrands of the M-solution.
pub type Driver2Fn = dyn Fn(f64, f64, f64, f64, f64, &[f64], &[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct Generator2Spec {
    eval: Arc<Driver2Fn>,
    pub omega: f64,
    pub theta_z: f64,
    pub theta_u: f64,
    /// Squared Lipschitz bounds in the below-diagonal arguments.
    pub theta_z_delta: f64,
    pub theta_u_delta: f64,
    pub k: f64,
}

impl std::fmt::Debug for Generator2Spec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator2Spec")
            .field("omega", &self.omega)
            .field("theta_z", &self.theta_z)
            .field("theta_u", &self.theta_u)
            .field("theta_z_delta", &self.theta_z_delta)
            .field("theta_u_delta", &self.theta_u_delta)
            .field("k", &self.k)
            .finish()
    }
}

impl Generator2Spec {
    pub fn new<F>(
        eval: F,
        omega: f64,
        theta_z: f64,
        theta_u: f64,
        theta_z_delta: f64,
        theta_u_delta: f64,
    ) -> Result<Self>
    where
        F: Fn(f64, f64, f64, f64, f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        if !(omega >= 0.0
            && theta_z >= 0.0
            && theta_u >= 0.0
            && theta_z_delta >= 0.0
            && theta_u_delta >= 0.0)
        {
            return Err(Error::Invalid("Lipschitz bounds must be nonnegative".into()));
        }
        let k = omega
            .sqrt()
            .max(theta_z)
            .max(theta_u)
            .max(theta_z_delta)
            .max(theta_u_delta)
            .sqrt();
        Ok(Generator2Spec {
            eval: Arc::new(eval),
            omega,
            theta_z,
            theta_u,
            theta_z_delta,
            theta_u_delta,
            k,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn eval(
        &self,
        t: f64,
        s: f64,
        y: f64,
        z_ts: f64,
        z_st: f64,
        u_ts: &[f64],
        u_st: &[f64],
    ) -> f64 {
        (self.eval)(t, s, y, z_ts, z_st, u_ts, u_st)
    }
}

/// One pass of the frozen-diagonal map: for each `t`, solve the
/// parametrized backward equation with the driver's `y` argument read
/// from `diag`, and assemble the upper-region solution.
fn frozen_pass(
    phi: &FreeTerm,
    f: &GeneratorSpec,
    world: &World,
    engine: &CondExpEngine,
    diag: &[Vec<f64>],
) -> Result<BSVIESolution> {
    let n = world.n_steps();
    let mut sol = BSVIESolution::empty(world);
    for t in 0..=n {
        let t_time = world.clock().time(t);
        let driver = |i: usize, slot: usize, _y: f64, z: f64, u: &[f64]| {
            f.eval(t_time, world.clock().time(i), diag[i][slot], z, u)
        };
        let bs = solve_backward_nodal(&phi.phi[t], world, engine, t, 0.0, &driver)?;
        sol.y[t] = bs.y[t].clone();
        for s in t..n {
            sol.z[t][s] = bs.z[s].clone();
            sol.u[t][s] = bs.u[s].clone();
            sol.m[t][s] = bs.m[s].clone();
        }
    }
    Ok(sol)
}

/// Frozen-diagonal pass keeping only the diagonal values; avoids
/// materializing the two-parameter grids between Picard iterates.
fn frozen_diag_pass(
    phi: &FreeTerm,
    f: &GeneratorSpec,
    world: &World,
    engine: &CondExpEngine,
    diag: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let n = world.n_steps();
    let m = world.jumps().n_marks();
    // Worlds with a single branch per step carry no noise at all; the
    // recursion collapses to scalar quadrature.
    let deterministic = match world {
        World::Tree(t) => (0..n).all(|i| t.branch_count(i) == 1),
        World::Ensemble(_) => false,
    };
    let mut out = Vec::with_capacity(n + 1);
    let zeros_u = vec![0.0; m];
    for t in 0..=n {
        let t_time = world.clock().time(t);
        let mut values = phi.phi[t].clone();
        if deterministic {
            for i in (t..n).rev() {
                let db = world.clock().db(i);
                let s_time = world.clock().time(i);
                values[0] += db * f.eval(t_time, s_time, diag[i][0], 0.0, &zeros_u);
            }
        } else {
            let mut u_node = vec![0.0; m];
            for i in (t..n).rev() {
                let rep = engine.one_step(world, &values, i)?;
                let db = world.clock().db(i);
                let s_time = world.clock().time(i);
                values = (0..world.width(i))
                    .map(|node| {
                        u_node.copy_from_slice(&rep.u[node * m..(node + 1) * m]);
                        rep.cond_mean[node]
                            + db * f.eval(t_time, s_time, diag[i][node], rep.z[node], &u_node)
                    })
                    .collect();
            }
        }
        out.push(values);
    }
    Ok(out)
}

/// Weight `exp(beta A_t)` per grid index, or all ones.
fn time_weights(world: &World, beta: Option<f64>) -> Vec<f64> {
    let clock = world.clock();
    (0..=clock.n_steps())
        .map(|i| match beta {
            Some(b) => (b * clock.a(i)).exp(),
            None => 1.0,
        })
        .collect()
}

/// Square gap between two diagonal iterates in the (optionally weighted)
/// integrated L2 norm.
fn diag_gap(
    world: &World,
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    weights: &[f64],
    range: std::ops::Range<usize>,
) -> f64 {
    let clock = world.clock();
    let mut total = 0.0;
    for t in range {
        let sq: Vec<f64> = a[t]
            .iter()
            .zip(&b[t])
            .map(|(x, y)| (x - y) * (x - y))
            .collect();
        let da = if t < clock.n_steps() { clock.da(t) } else { 0.0 };
        total += weights[t] * world.expectation(t, &sq) * da;
    }
    total.sqrt()
}

/// Stopping-rule weight for Picard iterations: unweighted in the Itô
/// setting, `exp(beta A)` with the smallest admissible `beta` on step
/// clocks, falling back to unweighted when no admissible `beta` exists.
fn picard_beta(world: &World, condition: Condition) -> Option<f64> {
    if world.clock().is_ito() {
        return None;
    }
    min_beta(condition, world.clock().frak_f()).ok()
}

/// Type-I BSVIE whose driver does not depend on `y`: the diagonal
/// construction is direct, one parametrized solve per grid time.
pub fn solve_type1_noy(
    phi: &FreeTerm,
    h: &GeneratorSpec,
    world: &World,
    engine: &CondExpEngine,
) -> Result<BSVIESolution> {
    if h.omega != 0.0 {
        return Err(Error::Invalid(
            "driver must not depend on y (omega = 0) for the direct construction".into(),
        ));
    }
    phi.validate(world)?;
    let zeros: Vec<Vec<f64>> = (0..=world.n_steps())
        .map(|t| vec![0.0; world.width(t)])
        .collect();
    frozen_pass(phi, h, world, engine, &zeros)
}

/// Picard iteration for the general Type-I BSVIE: freeze the diagonal,
/// solve the resulting y-free equation, repeat. Returns the solution and
/// the gap sequence between consecutive diagonal iterates.
pub fn picard_type1(
    phi: &FreeTerm,
    f: &GeneratorSpec,
    world: &World,
    engine: &CondExpEngine,
    tol: f64,
    max_iter: usize,
) -> Result<(BSVIESolution, Vec<f64>)> {
    phi.validate(world)?;
    let (diag, gaps) = picard_diag(phi, f, world, engine, tol, max_iter)?;
    let sol = frozen_pass(phi, f, world, engine, &diag)?;
    Ok((sol, gaps))
}

/// Diagonal-only variant of [`picard_type1`]: same iteration, but only
/// the diagonal values are kept. Suited to fine grids where the dense
/// two-parameter storage of the full solution is the bottleneck.
pub fn picard_type1_diagonal(
    phi: &FreeTerm,
    f: &GeneratorSpec,
    world: &World,
    engine: &CondExpEngine,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    phi.validate(world)?;
    picard_diag(phi, f, world, engine, tol, max_iter)
}

fn picard_diag(
    phi: &FreeTerm,
    f: &GeneratorSpec,
    world: &World,
    engine: &CondExpEngine,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = world.n_steps();
    let weights = time_weights(world, picard_beta(world, Condition::Type1));
    let mut diag: Vec<Vec<f64>> = (0..=n).map(|t| vec![0.0; world.width(t)]).collect();
    let mut gaps = Vec::new();
    for _ in 0..max_iter {
        let next = frozen_diag_pass(phi, f, world, engine, &diag)?;
        let gap = diag_gap(world, &next, &diag, &weights, 0..n + 1);
        gaps.push(gap);
        diag = next;
        if gap <= tol {
            return Ok((diag, gaps));
        }
    }
    Err(Error::Convergence(format!(
        "Picard iteration did not reach tol {tol} in {max_iter} steps (final gap {}); \
         the smallness condition is likely violated",
        gaps.last().copied().unwrap_or(f64::NAN)
    )))
}

/// Solution of the stochastic Fredholm step: for outer times in
/// `[r_index, s_index]`, the backward equation lives on `[S, T]` and
/// `psi[t - r_index]` holds `psi^S(t) = lambda(t, S)`, measurable at level
/// `S` only.
#[derive(Debug, Clone, Serialize)]
pub struct SfieSolution {
    pub r_index: usize,
    pub s_index: usize,
    pub psi: Vec<Vec<f64>>,
    /// `z[t - r_index][s - s_index]` on `[S, T]`, and likewise below.
    pub z: Vec<Vec<Vec<f64>>>,
    pub u: Vec<Vec<Vec<f64>>>,
    pub m: Vec<Vec<Vec<f64>>>,
    /// Per outer time: the two sides of the p = 2 energy estimate,
    /// `(E[|psi|^2 + int |Z|^2 + int int |U|^2 dpi + <M>], E[|Phi|^2 + (int |h0|)^2])`.
    pub hp_estimate: Vec<(f64, f64)>,
}

/// Fredholm step: parametrized solves on `[S, T]` read off at `S` for
/// every outer time in `[R, S]`.
pub fn solve_sfie(
    phi: &FreeTerm,
    h: &GeneratorSpec,
    r_index: usize,
    s_index: usize,
    world: &World,
    engine: &CondExpEngine,
) -> Result<SfieSolution> {
    phi.validate(world)?;
    let n = world.n_steps();
    if !(r_index < s_index && s_index < n) {
        return Err(Error::Invalid(format!(
            "need R < S < T as grid indices, got R = {r_index}, S = {s_index}, T index = {n}"
        )));
    }
    let m_dim = world.jumps().n_marks();
    let mut psi = Vec::new();
    let mut z = Vec::new();
    let mut u = Vec::new();
    let mut m = Vec::new();
    let mut hp = Vec::new();
    for t in r_index..=s_index {
        let t_time = world.clock().time(t);
        let driver = |i: usize, _slot: usize, _y: f64, zv: f64, uv: &[f64]| {
            h.eval(t_time, world.clock().time(i), 0.0, zv, uv)
        };
        let bs = solve_backward_nodal(&phi.phi[t], world, engine, s_index, 0.0, &driver)?;
        let psi_t = bs.y[s_index].clone();

        // Energy estimate at p = 2, computed with exact per-step second
        // moments: E[int Z^2 dB], the compensated-jump energy and <M>.
        let mut left = {
            let sq: Vec<f64> = psi_t.iter().map(|v| v * v).collect();
            world.expectation(s_index, &sq)
        };
        for s in s_index..n {
            let db = world.clock().db(s);
            let dt = world.clock().dt(s);
            let z2: Vec<f64> = bs.z[s].iter().map(|v| v * v * db).collect();
            left += world.expectation(s, &z2);
            let u2: Vec<f64> = (0..world.width(s))
                .map(|slot| {
                    (0..m_dim)
                        .map(|k| {
                            bs.u[s][slot * m_dim + k].powi(2)
                                * world.jumps().intensities[k]
                                * dt
                        })
                        .sum()
                })
                .collect();
            left += world.expectation(s, &u2);
            let m2: Vec<f64> = bs.m[s].iter().map(|v| v * v).collect();
            left += world.expectation(s + 1, &m2);
        }
        let phi2: Vec<f64> = phi.phi[t].iter().map(|v| v * v).collect();
        let int_h0: f64 = (s_index..n)
            .map(|s| {
                h.zero_table(t_time, world.clock().time(s), m_dim).abs() * world.clock().db(s)
            })
            .sum();
        let right = world.expectation(n, &phi2) + int_h0 * int_h0;
        hp.push((left, right));

        psi.push(psi_t);
        z.push(bs.z[s_index..n].to_vec());
        u.push(bs.u[s_index..n].to_vec());
        m.push(bs.m[s_index..n].to_vec());
    }
    Ok(SfieSolution {
        r_index,
        s_index,
        psi,
        z,
        u,
        m,
        hp_estimate: hp,
    })
}

/// Fills `(Z, U, M)(t, s)` for `s < t` by representing each diagonal value
/// from `from_step`, turning an adapted solution into an M-solution on
/// that range.
pub fn complete_m(
    sol: &BSVIESolution,
    from_step: usize,
    world: &World,
    engine: &CondExpEngine,
) -> Result<BSVIESolution> {
    let mut out = sol.clone();
    fill_lower(&mut out, from_step, world, engine)?;
    if from_step == 0 {
        out.has_delta = true;
    }
    Ok(out)
}

fn fill_lower(
    sol: &mut BSVIESolution,
    from_step: usize,
    world: &World,
    engine: &CondExpEngine,
) -> Result<()> {
    let n = world.n_steps();
    for t in (from_step + 1)..=n {
        let rep = engine.represent(world, &sol.y[t], t, from_step)?;
        for s in from_step..t {
            let idx = s - from_step;
            sol.z[t][s] = rep.z[idx].clone();
            sol.u[t][s] = rep.u[idx].clone();
            sol.m[t][s] = rep.m_incr[idx].clone();
        }
    }
    Ok(())
}

/// Partition of the grid into backward-processing intervals for the
/// Type-II solve.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalPlan {
    /// Grid indices `0 = b_0 < ... < b_k = N`.
    pub boundaries: Vec<usize>,
}

impl IntervalPlan {
    pub fn single(world: &World) -> IntervalPlan {
        IntervalPlan {
            boundaries: vec![0, world.n_steps()],
        }
    }

    /// Sub-intervals of at most `max_len` time units, aligned to the grid.
    pub fn with_max_length(world: &World, max_len: f64) -> Result<IntervalPlan> {
        if !(max_len > 0.0) {
            return Err(Error::Invalid("interval length must be positive".into()));
        }
        let clock = world.clock();
        let n = clock.n_steps();
        let mut boundaries = vec![0];
        let mut anchor = 0.0;
        for i in 1..n {
            if clock.time(i) - anchor > max_len + 1e-12 {
                boundaries.push(i);
                anchor = clock.time(i);
            }
        }
        boundaries.push(n);
        Ok(IntervalPlan { boundaries })
    }

    fn validate(&self, world: &World) -> Result<()> {
        let n = world.n_steps();
        let b = &self.boundaries;
        let ok = b.len() >= 2
            && b[0] == 0
            && *b.last().unwrap() == n
            && b.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Invalid(format!(
                "interval plan must be strictly increasing from 0 to {n}, got {b:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Type2Options {
    pub tol: f64,
    pub max_iter: usize,
    /// Cap on automatic plan bisections when an interval fails to contract.
    pub max_bisect: usize,
}

impl Default for Type2Options {
    fn default() -> Self {
        Type2Options {
            tol: 1e-12,
            max_iter: 200,
            max_bisect: 6,
        }
    }
}

/// Type-II BSVIE solve: intervals are processed right to left; inside
/// each square a Picard loop freezes the diagonal and the below-diagonal
/// integrands, solves the resulting Fredholm-plus-square backward pass for
/// every outer time, and refreshes the lower triangle by martingale
/// representation. Intervals that fail to contract are bisected.
pub fn solve_type2(
    phi: &FreeTerm,
    f: &Generator2Spec,
    world: &World,
    engine: &CondExpEngine,
    plan: &IntervalPlan,
    opts: Type2Options,
) -> Result<BSVIESolution> {
    phi.validate(world)?;
    plan.validate(world)?;
    let n = world.n_steps();
    let mut sol = BSVIESolution::empty(world);
    sol.y[n] = phi.phi[n].clone();
    // Rightmost square first; a stack pushed in ascending order pops them
    // right to left.
    let mut stack: Vec<(usize, usize, usize)> = plan
        .boundaries
        .windows(2)
        .map(|w| (w[0], w[1], 0usize))
        .collect();
    while let Some((r, s_b, depth)) = stack.pop() {
        match solve_square(&mut sol, r, s_b, phi, f, world, engine, opts) {
            Ok(()) => {}
            Err(Error::Convergence(_)) if s_b - r > 1 && depth < opts.max_bisect => {
                let mid = (r + s_b) / 2;
                stack.push((r, mid, depth + 1));
                stack.push((mid, s_b, depth + 1));
            }
            Err(e) => return Err(e),
        }
    }
    fill_lower(&mut sol, 0, world, engine)?;
    sol.has_delta = true;
    Ok(sol)
}

/// Solves for the outer times in `[r, s_b)` given finalized values on
/// `[s_b, T]`.
#[allow(clippy::too_many_arguments)]
fn solve_square(
    sol: &mut BSVIESolution,
    r: usize,
    s_b: usize,
    phi: &FreeTerm,
    f: &Generator2Spec,
    world: &World,
    engine: &CondExpEngine,
    opts: Type2Options,
) -> Result<()> {
    let n = world.n_steps();
    let m_dim = world.jumps().n_marks();
    // Below-diagonal integrands of the finalized right part, down to r.
    for t in s_b.max(r + 1)..=n {
        let rep = engine.represent(world, &sol.y[t], t, r)?;
        for s in r..t.min(s_b) {
            sol.z[t][s] = rep.z[s - r].clone();
            sol.u[t][s] = rep.u[s - r].clone();
            sol.m[t][s] = rep.m_incr[s - r].clone();
        }
    }
    let weights = time_weights(world, picard_beta(world, Condition::Type2));
    let mut diag: Vec<Vec<f64>> = sol.y.clone();
    for t in r..s_b {
        diag[t] = vec![0.0; world.width(t)];
    }
    for _ in 0..opts.max_iter {
        let mut new_diag = diag.clone();
        for t in r..s_b {
            let t_time = world.clock().time(t);
            let driver = |i: usize, slot: usize, _y: f64, z: f64, u: &[f64]| {
                // y(s) at the current step: finalized at or beyond s_b,
                // frozen iterate inside the square.
                let y_s = if i >= s_b { sol.y[i][slot] } else { diag[i][slot] };
                let (z_st, u_st) = if i > t {
                    let anc = world.ancestor_slot(i, slot, t);
                    let u_vec: Vec<f64> = (0..m_dim)
                        .map(|k| sol.uval(i, t, anc, k, m_dim))
                        .collect();
                    (sol.zval(i, t, anc), u_vec)
                } else {
                    (0.0, vec![0.0; m_dim])
                };
                f.eval(t_time, world.clock().time(i), y_s, z, z_st, u, &u_st)
            };
            let bs = solve_backward_nodal(&phi.phi[t], world, engine, t, 0.0, &driver)?;
            new_diag[t] = bs.y[t].clone();
            sol.y[t] = bs.y[t].clone();
            for s in t..n {
                sol.z[t][s] = bs.z[s].clone();
                sol.u[t][s] = bs.u[s].clone();
                sol.m[t][s] = bs.m[s].clone();
            }
        }
        // Refresh the square's below-diagonal integrands from the new
        // diagonal for the next pass.
        for t in (r + 1)..s_b {
            let rep = engine.represent(world, &sol.y[t], t, r)?;
            for s in r..t {
                sol.z[t][s] = rep.z[s - r].clone();
                sol.u[t][s] = rep.u[s - r].clone();
                sol.m[t][s] = rep.m_incr[s - r].clone();
            }
        }
        let gap = diag_gap(world, &new_diag, &diag, &weights, r..s_b);
        diag = new_diag;
        if gap <= opts.tol {
            return Ok(());
        }
    }
    Err(Error::Convergence(format!(
        "Type-II square [{r}, {s_b}) did not contract in {} iterations",
        opts.max_iter
    )))
}

/// Report of the monotone approximation scheme.
#[derive(Debug, Clone, Serialize)]
pub struct MonotoneReport {
    /// Per iterate: largest pointwise increase over the previous one
    /// (nonpositive when the sequence decreases).
    pub max_increase: Vec<f64>,
    pub monotone: bool,
    /// Distance of the last iterate's diagonal to the solution with the
    /// middle driver.
    pub final_gap: f64,
}

/// Monotone scheme from the comparison argument: start from the solution
/// with the upper driver, then iterate the frozen-diagonal map with the
/// middle driver. Requires `f1 <= f_bar <= f2` pointwise with `f_bar`
/// nondecreasing in `y`; spot-checked on random points.
#[allow(clippy::too_many_arguments)]
pub fn monotone_picard(
    phi: &FreeTerm,
    f1: &GeneratorSpec,
    f2: &GeneratorSpec,
    f_bar: &GeneratorSpec,
    world: &World,
    engine: &CondExpEngine,
    n_iter: usize,
    tol: f64,
) -> Result<(Vec<Vec<Vec<f64>>>, MonotoneReport)> {
    phi.validate(world)?;
    spot_check_sandwich(f1, f2, f_bar, world, 400, 2024)?;
    let n = world.n_steps();
    let (upper, _) = picard_type1(phi, f2, world, engine, tol, 200)?;
    let mut iterates = vec![upper.y.clone()];
    let mut max_increase = Vec::new();
    for _ in 0..n_iter {
        let prev = iterates.last().unwrap().clone();
        let next = frozen_diag_pass(phi, f_bar, world, engine, &prev)?;
        let mut worst = f64::NEG_INFINITY;
        for t in 0..=n {
            for (a, b) in next[t].iter().zip(&prev[t]) {
                worst = worst.max(a - b);
            }
        }
        max_increase.push(worst);
        iterates.push(next);
    }
    let (mid, _) = picard_type1(phi, f_bar, world, engine, tol, 200)?;
    let last = iterates.last().unwrap();
    let mut final_gap = 0.0f64;
    for t in 0..=n {
        for (a, b) in last[t].iter().zip(&mid.y[t]) {
            final_gap = final_gap.max((a - b).abs());
        }
    }
    let monotone = max_increase.iter().all(|&v| v <= 10.0 * tol.max(1e-14));
    Ok((
        iterates,
        MonotoneReport {
            max_increase,
            monotone,
            final_gap,
        },
    ))
}

fn spot_check_sandwich(
    f1: &GeneratorSpec,
    f2: &GeneratorSpec,
    f_bar: &GeneratorSpec,
    world: &World,
    n_samples: usize,
    seed: u64,
) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let horizon = world.clock().horizon();
    let m = world.jumps().n_marks();
    for _ in 0..n_samples {
        let t = rng.gen_range(0.0..=horizon);
        let s = rng.gen_range(0.0..=horizon);
        let y = rng.gen_range(-3.0..3.0);
        let z = rng.gen_range(-3.0..3.0);
        let u: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lo = f1.eval(t, s, y, z, &u);
        let hi = f2.eval(t, s, y, z, &u);
        let mid = f_bar.eval(t, s, y, z, &u);
        if !(lo <= mid + 1e-12 && mid <= hi + 1e-12) {
            return Err(Error::Invalid(format!(
                "sandwich spot-check failed at (t, s, y, z) = ({t:.3}, {s:.3}, {y:.3}, {z:.3})"
            )));
        }
        let y2 = y + rng.gen_range(0.0..2.0);
        if f_bar.eval(t, s, y2, z, &u) < mid - 1e-12 {
            return Err(Error::Invalid(
                "middle driver is not nondecreasing in y".into(),
            ));
        }
    }
    Ok(())
}

/// Largest absolute residual of the Type-I defining equation over all
/// outer times and leaves; tree worlds only.
pub fn type1_residual(
    sol: &BSVIESolution,
    phi: &FreeTerm,
    f: &GeneratorSpec,
    world: &World,
) -> Result<f64> {
    let tree = match world {
        World::Tree(t) => t,
        World::Ensemble(_) => {
            return Err(Error::Invalid(
                "exact residuals are only defined on tree worlds".into(),
            ))
        }
    };
    let n = world.n_steps();
    let m = world.jumps().n_marks();
    let mut worst = 0.0f64;
    for t in 0..=n {
        let t_time = world.clock().time(t);
        for leaf in 0..tree.n_leaves() {
            let chain = tree.ancestors(leaf);
            let mut rhs = phi.phi[t][leaf];
            for s in t..n {
                let node = chain[s];
                let child = chain[s + 1];
                let branch = &tree.branches(s)[tree.branch_of(s + 1, child)];
                let u_node: Vec<f64> = (0..m).map(|k| sol.uval(t, s, node, k, m)).collect();
                rhs += f.eval(
                    t_time,
                    world.clock().time(s),
                    sol.y[s][node],
                    sol.zval(t, s, node),
                    &u_node,
                ) * world.clock().db(s);
                rhs -= sol.zval(t, s, node) * branch.dw;
                for k in 0..m {
                    rhs -= u_node[k]
                        * (branch.jumps[k] as u8 as f64
                            - tree.jumps().intensities[k] * world.clock().dt(s));
                }
                rhs -= sol.m[t][s].get(child).copied().unwrap_or(0.0);
            }
            worst = worst.max((sol.y[t][chain[t]] - rhs).abs());
        }
    }
    Ok(worst)
}

/// Largest absolute residual of the Type-II defining equation; tree
/// worlds only.
pub fn type2_residual(
    sol: &BSVIESolution,
    phi: &FreeTerm,
    f: &Generator2Spec,
    world: &World,
) -> Result<f64> {
    let tree = match world {
        World::Tree(t) => t,
        World::Ensemble(_) => {
            return Err(Error::Invalid(
                "exact residuals are only defined on tree worlds".into(),
            ))
        }
    };
    let n = world.n_steps();
    let m = world.jumps().n_marks();
    let mut worst = 0.0f64;
    for t in 0..=n {
        let t_time = world.clock().time(t);
        for leaf in 0..tree.n_leaves() {
            let chain = tree.ancestors(leaf);
            let mut rhs = phi.phi[t][leaf];
            for s in t..n {
                let node = chain[s];
                let child = chain[s + 1];
                let branch = &tree.branches(s)[tree.branch_of(s + 1, child)];
                let u_ts: Vec<f64> = (0..m).map(|k| sol.uval(t, s, node, k, m)).collect();
                let anc = chain[t];
                let (z_st, u_st) = if s > t {
                    let u_vec: Vec<f64> = (0..m).map(|k| sol.uval(s, t, anc, k, m)).collect();
                    (sol.zval(s, t, anc), u_vec)
                } else {
                    (0.0, vec![0.0; m])
                };
                rhs += f.eval(
                    t_time,
                    world.clock().time(s),
                    sol.y[s][node],
                    sol.zval(t, s, node),
                    z_st,
                    &u_ts,
                    &u_st,
                ) * world.clock().db(s);
                rhs -= sol.zval(t, s, node) * branch.dw;
                for k in 0..m {
                    rhs -= u_ts[k]
                        * (branch.jumps[k] as u8 as f64
                            - tree.jumps().intensities[k] * world.clock().dt(s));
                }
                rhs -= sol.m[t][s].get(child).copied().unwrap_or(0.0);
            }
            worst = worst.max((sol.y[t][chain[t]] - rhs).abs());
        }
    }
    Ok(worst)
}

/// Largest absolute residual of the M-solution identity
/// `Y(t) = E[Y(t) | F_from] + sum of representation increments` below the
/// diagonal; tree worlds only.
pub fn m_sol_residual(sol: &BSVIESolution, from_step: usize, world: &World) -> Result<f64> {
    let tree = match world {
        World::Tree(t) => t,
        World::Ensemble(_) => {
            return Err(Error::Invalid(
                "exact residuals are only defined on tree worlds".into(),
            ))
        }
    };
    let n = world.n_steps();
    let m = world.jumps().n_marks();
    let mut worst = 0.0f64;
    for t in (from_step + 1)..=n {
        // E[Y(t) | F_from] per node at from_step.
        let mut cond = sol.y[t].clone();
        for level in (from_step..t).rev() {
            let bc = tree.branch_count(level);
            let branches = tree.branches(level);
            cond = (0..tree.level_len(level))
                .map(|node| {
                    (0..bc)
                        .map(|b| branches[b].prob * cond[node * bc + b])
                        .sum()
                })
                .collect();
        }
        for leaf in 0..tree.n_leaves() {
            let chain = tree.ancestors(leaf);
            let mut acc = cond[chain[from_step]];
            for s in from_step..t {
                let node = chain[s];
                let child = chain[s + 1];
                let branch = &tree.branches(s)[tree.branch_of(s + 1, child)];
                acc += sol.zval(t, s, node) * branch.dw;
                for k in 0..m {
                    acc += sol.uval(t, s, node, k, m)
                        * (branch.jumps[k] as u8 as f64
                            - tree.jumps().intensities[k] * world.clock().dt(s));
                }
                acc += sol.m[t][s].get(child).copied().unwrap_or(0.0);
            }
            worst = worst.max((sol.y[t][chain[t]] - acc).abs());
        }
    }
    Ok(worst)
}
