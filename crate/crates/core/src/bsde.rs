//! Backward solver for (parametrized) BSDEs with jumps on a discrete world.
//! This is the building block of the Volterra solvers: every Type-I step
//! runs one parametrized backward recursion per outer time.

use std::sync::Arc;

use serde::Serialize;

use crate::conditional::CondExpEngine;
use crate::error::{Error, Result};
use crate::lattice::{JumpMeasureSpec, World};

/// Driver `f(t, s, y, z, u)` with `u` one value per jump mark.
pub type DriverFn = dyn Fn(f64, f64, f64, f64, &[f64]) -> f64 + Send + Sync;

/// Driver together with its Lipschitz data. The squared-increment bounds
/// are `|df|^2 <= omega |dy|^2 + theta_z |dz|^2 + theta_u ||du||^2` with
/// the `u` norm weighted by the jump intensities.
#[derive(Clone)]
pub struct GeneratorSpec {
    eval: Arc<DriverFn>,
    pub omega: f64,
    pub theta_z: f64,
    pub theta_u: f64,
    /// Uniform constant with `K^2 >= max(sqrt(omega), theta_z, theta_u)`.
    pub k: f64,
}

impl std::fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorSpec")
            .field("omega", &self.omega)
            .field("theta_z", &self.theta_z)
            .field("theta_u", &self.theta_u)
            .field("k", &self.k)
            .finish()
    }
}

impl GeneratorSpec {
    pub fn new<F>(eval: F, omega: f64, theta_z: f64, theta_u: f64) -> Result<Self>
    where
        F: Fn(f64, f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        if !(omega >= 0.0 && theta_z >= 0.0 && theta_u >= 0.0) {
            return Err(Error::Invalid(
                "Lipschitz bounds must be nonnegative".into(),
            ));
        }
        let k = omega.sqrt().max(theta_z).max(theta_u).sqrt();
        Ok(GeneratorSpec {
            eval: Arc::new(eval),
            omega,
            theta_z,
            theta_u,
            k,
        })
    }

    pub fn zero() -> Self {
        GeneratorSpec::new(|_, _, _, _, _| 0.0, 0.0, 0.0, 0.0).expect("valid bounds")
    }

    pub fn eval(&self, t: f64, s: f64, y: f64, z: f64, u: &[f64]) -> f64 {
        (self.eval)(t, s, y, z, u)
    }

    /// Driver at the origin, `f(t, s, 0, 0, 0)`.
    pub fn zero_table(&self, t: f64, s: f64, n_marks: usize) -> f64 {
        self.eval(t, s, 0.0, 0.0, &vec![0.0; n_marks])
    }

    /// Freezes the first time argument, for the parametrized recursion.
    pub fn frozen_t(&self, t: f64) -> GeneratorSpec {
        let inner = self.eval.clone();
        GeneratorSpec {
            eval: Arc::new(move |_t, s, y, z, u| inner(t, s, y, z, u)),
            omega: self.omega,
            theta_z: self.theta_z,
            theta_u: self.theta_u,
            k: self.k,
        }
    }

    /// Largest violation of the squared-increment bound over random points,
    /// relative to the bound itself. Nonpositive when the declared
    /// Lipschitz data is consistent with the driver.
    pub fn spot_check(
        &self,
        jumps: &JumpMeasureSpec,
        horizon: f64,
        n_samples: usize,
        seed: u64,
    ) -> f64 {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let m = jumps.n_marks();
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..n_samples {
            let t = rng.gen_range(0.0..=horizon);
            let s = rng.gen_range(0.0..=horizon);
            let draw = |rng: &mut rand_chacha::ChaCha12Rng| {
                (
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>(),
                )
            };
            let (y1, z1, u1) = draw(&mut rng);
            let (y2, z2, u2) = draw(&mut rng);
            let df = self.eval(t, s, y1, z1, &u1) - self.eval(t, s, y2, z2, &u2);
            let du2: f64 = (0..m)
                .map(|k| jumps.intensities[k] * (u1[k] - u2[k]).powi(2))
                .sum();
            let bound = self.omega * (y1 - y2).powi(2)
                + self.theta_z * (z1 - z2).powi(2)
                + self.theta_u * du2;
            worst = worst.max(df * df - bound);
        }
        worst
    }
}

/// Discrete BSDE solution. `y[i]` lives at level `i`; `z[i]`, `u[i]` are
/// the step-`i` integrands; `m[i]` holds the orthogonal residual
/// increments of step `i` (indexed by level `i + 1` nodes on trees, by
/// path on ensembles).
#[derive(Debug, Clone, Serialize)]
pub struct BSDESolution {
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    /// Node-major: `u[i][slot * n_marks + k]`.
    pub u: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    /// Set when the implicit per-node solve was replaced by the explicit
    /// step because the contraction condition failed.
    pub explicit_fallback: bool,
}

/// Backward recursion for `Y_i = E_i[Y_{i+1}] + f(t_i, t_i, Y_i, Z_i, U_i) dB_i`
/// with `(Z_i, U_i, M_i)` read off the representation of `Y_{i+1}`.
pub fn solve_bsde(
    xi: &[f64],
    f: &GeneratorSpec,
    world: &World,
    engine: &CondExpEngine,
) -> Result<BSDESolution> {
    let driver = |i: usize, _slot: usize, y: f64, z: f64, u: &[f64]| {
        let s = world.clock().time(i);
        f.eval(s, s, y, z, u)
    };
    solve_backward_nodal(xi, world, engine, 0, f.omega, &driver)
}

/// Same recursion with the driver's first time argument frozen at
/// `t_index`; yields the parametrized family member `lambda(t, .)`.
pub fn solve_parametrized(
    t_index: usize,
    phi_t: &[f64],
    f: &GeneratorSpec,
    world: &World,
    engine: &CondExpEngine,
) -> Result<BSDESolution> {
    solve_parametrized_from(t_index, 0, phi_t, f, world, engine)
}

/// Parametrized recursion stopped at `from_step`; levels below it stay
/// empty in the returned solution.
pub fn solve_parametrized_from(
    t_index: usize,
    from_step: usize,
    phi_t: &[f64],
    f: &GeneratorSpec,
    world: &World,
    engine: &CondExpEngine,
) -> Result<BSDESolution> {
    let t = world.clock().time(t_index);
    let driver = |i: usize, _slot: usize, y: f64, z: f64, u: &[f64]| {
        f.eval(t, world.clock().time(i), y, z, u)
    };
    solve_backward_nodal(phi_t, world, engine, from_step, f.omega, &driver)
}

/// Backward recursion with a node-aware driver `(step, slot, y, z, u)`.
/// `omega` is the squared y-Lipschitz bound of the driver; when its
/// square root times the step exceeds one the implicit per-node fixed
/// point cannot contract and the explicit step is used instead.
pub(crate) fn solve_backward_nodal(
    xi: &[f64],
    world: &World,
    engine: &CondExpEngine,
    from_step: usize,
    omega: f64,
    driver: &dyn Fn(usize, usize, f64, f64, &[f64]) -> f64,
) -> Result<BSDESolution> {
    let n = world.n_steps();
    let m = world.jumps().n_marks();
    if xi.len() != world.width(n) {
        return Err(Error::Invalid(format!(
            "terminal values have {} slots, world has {}",
            xi.len(),
            world.width(n)
        )));
    }
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n];
    let mut u = vec![Vec::new(); n];
    let mut m_incr = vec![Vec::new(); n];
    y[n] = xi.to_vec();
    let mut explicit_fallback = false;
    let mut u_node = vec![0.0; m];
    for i in (from_step..n).rev() {
        let rep = engine.one_step(world, &y[i + 1], i)?;
        let db = world.clock().db(i);
        let implicit_ok = omega.sqrt() * db < 1.0;
        let width = world.width(i);
        let mut yi = vec![0.0; width];
        for node in 0..width {
            let a = rep.cond_mean[node];
            let zi = rep.z[node];
            u_node.copy_from_slice(&rep.u[node * m..(node + 1) * m]);
            if omega == 0.0 {
                // The driver does not depend on y; one evaluation is exact.
                yi[node] = a + db * driver(i, node, a, zi, &u_node);
            } else if implicit_ok {
                let mut val = a;
                for _ in 0..20 {
                    let next = a + db * driver(i, node, val, zi, &u_node);
                    if (next - val).abs() <= 1e-13 * (1.0 + val.abs()) {
                        val = next;
                        break;
                    }
                    val = next;
                }
                yi[node] = val;
            } else {
                explicit_fallback = true;
                yi[node] = a + db * driver(i, node, a, zi, &u_node);
            }
        }
        y[i] = yi;
        z[i] = rep.z;
        u[i] = rep.u;
        m_incr[i] = rep.m_incr;
    }
    Ok(BSDESolution {
        y,
        z,
        u,
        m: m_incr,
        explicit_fallback,
    })
}

/// A-priori estimate report: the two sides of the `L^p` bound and their
/// ratio, the empirical stand-in for the constant `C(p, K, T)`.
#[derive(Debug, Clone, Serialize)]
pub struct AprioriReport {
    pub p: f64,
    pub left: f64,
    pub left_y: f64,
    pub left_z: f64,
    pub left_u: f64,
    pub left_m: f64,
    pub right: f64,
    pub ratio: f64,
    /// Both sides vanish; the ratio is meaningless.
    pub degenerate: bool,
}

/// Compares `E[sup |Y|^p + (int |Z|^2)^{p/2} + (int int |U|^2 dpi)^{p/2}
/// + <M>^{p/2}]` against `E[|xi|^p + (int |f0|)^p]`.
pub fn bsde_apriori_check(
    sol: &BSDESolution,
    xi: &[f64],
    f: &GeneratorSpec,
    world: &World,
    p: f64,
) -> Result<AprioriReport> {
    if p < 2.0 {
        return Err(Error::Invalid("a-priori check requires p >= 2".into()));
    }
    let n = world.n_steps();
    let m = world.jumps().n_marks();
    let stats = pathwise_stats(sol, world);
    let half = p / 2.0;
    let powed = |v: &[f64], q: f64| -> Vec<f64> { v.iter().map(|x| x.powf(q)).collect() };
    let left_y = world.expectation(n, &powed(&stats.sup_abs_y, p));
    let left_z = world.expectation(n, &powed(&stats.int_z2, half));
    let left_u = world.expectation(n, &powed(&stats.int_u2_pi, half));
    let left_m = world.expectation(n, &powed(&stats.qv_m, half));
    let left = left_y + left_z + left_u + left_m;

    let int_f0: f64 = (0..n)
        .map(|i| {
            let t = world.clock().time(i);
            f.zero_table(t, t, m).abs() * world.clock().db(i)
        })
        .sum();
    let xi_p: Vec<f64> = xi.iter().map(|x| x.abs().powf(p)).collect();
    let right = world.expectation(n, &xi_p) + int_f0.powf(p);

    let degenerate = right == 0.0;
    Ok(AprioriReport {
        p,
        left,
        left_y,
        left_z,
        left_u,
        left_m,
        right,
        ratio: if degenerate { f64::NAN } else { left / right },
        degenerate,
    })
}

struct PathwiseStats {
    sup_abs_y: Vec<f64>,
    int_z2: Vec<f64>,
    int_u2_pi: Vec<f64>,
    qv_m: Vec<f64>,
}

/// Per-leaf (tree) or per-path (ensemble) running statistics of a
/// solution.
fn pathwise_stats(sol: &BSDESolution, world: &World) -> PathwiseStats {
    let n = world.n_steps();
    let m = world.jumps().n_marks();
    let width = world.width(n);
    let mut sup_abs_y = vec![0.0f64; width];
    let mut int_z2 = vec![0.0; width];
    let mut int_u2_pi = vec![0.0; width];
    let mut qv_m = vec![0.0; width];
    match world {
        World::Tree(tree) => {
            for leaf in 0..width {
                let chain = tree.ancestors(leaf);
                for i in 0..=n {
                    sup_abs_y[leaf] = sup_abs_y[leaf].max(sol.y[i][chain[i]].abs());
                }
                for i in 0..n {
                    let node = chain[i];
                    let child = chain[i + 1];
                    let branch = &tree.branches(i)[tree.branch_of(i + 1, child)];
                    int_z2[leaf] += sol.z[i][node].powi(2) * world.clock().db(i);
                    for k in 0..m {
                        if branch.jumps[k] {
                            int_u2_pi[leaf] += sol.u[i][node * m + k].powi(2);
                        }
                    }
                    qv_m[leaf] += sol.m[i][child].powi(2);
                }
            }
        }
        World::Ensemble(ens) => {
            for path in 0..width {
                for i in 0..=n {
                    sup_abs_y[path] = sup_abs_y[path].max(sol.y[i][path].abs());
                }
                for i in 0..n {
                    int_z2[path] += sol.z[i][path].powi(2) * world.clock().db(i);
                    for k in 0..m {
                        int_u2_pi[path] +=
                            sol.u[i][path * m + k].powi(2) * ens.jump_count(path, i, k) as f64;
                    }
                    qv_m[path] += sol.m[i][path].powi(2);
                }
            }
        }
    }
    PathwiseStats {
        sup_abs_y,
        int_z2,
        int_u2_pi,
        qv_m,
    }
}
