//! Batch experiment runner behind the `bsvielab` binary: subcommands for
//! the constant calculators, the solvers and the analysis harnesses, with
//! reproducible run directories.

pub mod config;
pub mod output;
pub mod presets;

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde_json::json;

use crate::analysis::{
    cadlag_jump_report, compare_solutions, duality_gap, norm_sp, partition_comparison,
    regularity_estimate, FSVIECoefficients,
};
use crate::bsde::solve_bsde;
use crate::bsvie::{
    complete_m, m_sol_residual, monotone_picard, picard_type1, solve_sfie, solve_type1_noy,
    solve_type2, type1_residual, type2_residual, BSVIESolution, Generator2Spec, IntervalPlan,
    Type2Options,
};
use crate::conditional::CondExpEngine;
use crate::constants::{self, Condition, JumpBound};
use crate::error::{Error, Result};
use crate::lattice::World;

use config::ExperimentConfig;
use output::RunWriter;

#[derive(Parser)]
#[command(
    name = "bsvielab",
    version,
    about = "Discrete solvers and analysis harnesses for backward stochastic Volterra integral equations with jumps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every world-based subcommand.
#[derive(Args, Clone)]
pub struct CommonArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Data preset; see `list-presets`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the number of grid steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override the ensemble size.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Override the world kind: tree or ensemble.
    #[arg(long)]
    pub world: Option<String>,
    /// Override the seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; artifacts are skipped when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Well-posedness constants at a given weight exponent.
    Constants {
        #[arg(long)]
        beta: f64,
        /// Jump bound of the clock.
        #[arg(long, default_value_t = 0.0)]
        frakf: f64,
    },
    /// Smallest admissible weight exponent for a condition.
    MinBeta {
        /// One of: type1, type1_noY, type2.
        #[arg(long)]
        condition: String,
        #[arg(long, default_value_t = 0.0)]
        frakf: f64,
    },
    /// Draws a path ensemble and stores it with summary statistics.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Solves the plain backward equation of a preset.
    SolveBsde {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Solves the Type-I equation of a preset.
    SolveType1 {
        #[command(flatten)]
        common: CommonArgs,
        /// Use the direct construction (requires a y-free driver).
        #[arg(long)]
        no_y: bool,
        /// Also fill the lower triangle and report the M-part residual.
        #[arg(long)]
        m_solution: bool,
    },
    /// Solves the preset as a Type-II equation on an interval plan.
    SolveType2 {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Solves the stitched equation on `[R, T] x [S, T]`.
    Sfie {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0)]
        r_index: usize,
        #[arg(long, default_value_t = 0)]
        s_index: usize,
    },
    /// Monotone iteration between an ordered driver pair.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 8)]
        iterations: usize,
    },
    /// Partitioned comparison of an ordered linear pair across meshes.
    PartitionCompare {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of dyadic partition levels.
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Forward/backward duality pairing gap.
    Duality {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of random bounded coefficient draws (1 uses the preset).
        #[arg(long, default_value_t = 1)]
        draws: usize,
    },
    /// Diagonal increment-moment fit and jump attribution.
    Regularity {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 5)]
        scales: usize,
    },
    /// Weighted solution norms of a preset.
    Norms {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Prints the data catalog with the oracle of each preset.
    ListPresets,
}

/// Resolved context of a world-based command.
struct Context {
    cfg: ExperimentConfig,
    world: World,
    engine: CondExpEngine,
    seed: u64,
    preset: String,
    out: Option<PathBuf>,
}

fn resolve(common: &CommonArgs, default_preset: &str) -> Result<Context> {
    let preset = common
        .preset
        .clone()
        .or_else(|| {
            common
                .config
                .as_deref()
                .and_then(|p| ExperimentConfig::from_path(p).ok())
                .and_then(|c| c.data.preset)
        })
        .unwrap_or_else(|| default_preset.to_string());
    presets::info(&preset)?;
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => presets::default_config(&preset)?,
    };
    cfg.data.preset = Some(preset.clone());
    if let Some(s) = common.steps {
        cfg.world.steps = s;
    }
    if let Some(p) = common.paths {
        cfg.world.n_paths = p;
    }
    if let Some(k) = &common.world {
        cfg.world.kind = match k.as_str() {
            "tree" => config::WorldKind::Tree,
            "ensemble" => config::WorldKind::Ensemble,
            other => return Err(Error::Config(format!("world.kind: unknown kind `{other}`"))),
        };
    }
    if let Some(s) = common.seed {
        cfg.world.seed = Some(s);
    }
    let seed = cfg.resolve_seed()?;
    let world = cfg.build_world(seed)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from));
    Ok(Context {
        cfg,
        world,
        engine: CondExpEngine::default(),
        seed,
        preset,
        out,
    })
}

impl Context {
    fn writer(&self, command: &str) -> Result<Option<RunWriter>> {
        match &self.out {
            None => Ok(None),
            Some(dir) => {
                let run_id = format!("{command}-{}", self.seed);
                Ok(Some(RunWriter::create(dir, &run_id, &self.cfg.to_toml()?)?))
            }
        }
    }

    fn times(&self) -> Vec<f64> {
        let clock = self.world.clock();
        (0..=self.world.n_steps()).map(|i| clock.time(i)).collect()
    }

    fn level_means(&self, values: &[Vec<f64>]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(l, v)| self.world.expectation(l, v))
            .collect()
    }
}

fn emit(
    writer: Option<RunWriter>,
    results: &serde_json::Value,
    seed: u64,
    command: &str,
) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(results)?);
    if let Some(w) = writer {
        w.finish(results, seed, command)?;
    }
    Ok(())
}

/// Lifts a one-parameter driver into the Type-II form with zero weight on
/// the below-diagonal integrands.
fn lift(f: crate::bsde::GeneratorSpec) -> Result<Generator2Spec> {
    let (omega, theta_z, theta_u) = (f.omega, f.theta_z, f.theta_u);
    Generator2Spec::new(
        move |t, s, y, z_ts, _z_st, u_ts: &[f64], _u_st: &[f64]| f.eval(t, s, y, z_ts, u_ts),
        omega,
        theta_z,
        theta_u,
        0.0,
        0.0,
    )
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Constants { beta, frakf } => {
            let c = constants::evaluate(beta, JumpBound::new(frakf)?)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
            Ok(())
        }
        Command::MinBeta { condition, frakf } => {
            let cond = Condition::parse(&condition)?;
            let beta = constants::min_beta(cond, JumpBound::new(frakf)?)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "condition": condition,
                    "frak_f": frakf,
                    "min_beta": beta,
                }))?
            );
            Ok(())
        }
        Command::Simulate { common } => cmd_simulate(&common),
        Command::SolveBsde { common } => cmd_solve_bsde(&common),
        Command::SolveType1 {
            common,
            no_y,
            m_solution,
        } => cmd_solve_type1(&common, no_y, m_solution),
        Command::SolveType2 { common } => cmd_solve_type2(&common),
        Command::Sfie {
            common,
            r_index,
            s_index,
        } => cmd_sfie(&common, r_index, s_index),
        Command::Compare { common, iterations } => cmd_compare(&common, iterations),
        Command::PartitionCompare { common, levels } => cmd_partition(&common, levels),
        Command::Duality { common, draws } => cmd_duality(&common, draws),
        Command::Regularity { common, scales } => cmd_regularity(&common, scales),
        Command::Norms { common } => cmd_norms(&common),
        Command::ListPresets => {
            for p in presets::CATALOG {
                println!("{:<22} {}", p.name, p.description);
                println!("{:<22} oracle: {}", "", p.oracle);
            }
            Ok(())
        }
    }
}

fn cmd_simulate(common: &CommonArgs) -> Result<()> {
    let ctx = resolve(common, "lipschitz")?;
    let ens = match &ctx.world {
        World::Ensemble(e) => e,
        World::Tree(_) => {
            return Err(Error::Config(
                "world.kind: simulate needs an ensemble world".into(),
            ))
        }
    };
    let mut writer = ctx.writer("simulate")?;
    if let Some(w) = &mut writer {
        let n = ens.n_steps();
        let term_w = presets::terminal_w(&ctx.world);
        w.row("summary", "terminal_w_mean", None, None, ens.mean(&term_w));
        let var = ens.mean(&term_w.iter().map(|x| x * x).collect::<Vec<_>>())
            - ens.mean(&term_w).powi(2);
        w.row("summary", "terminal_w_var", None, None, var);
        for k in 0..ens.jumps().n_marks() {
            let counts = presets::terminal_count(&ctx.world, k);
            w.row(
                "summary",
                &format!("terminal_count_mean_{k}"),
                None,
                None,
                ens.mean(&counts),
            );
        }
        let _ = n;
    }
    if let Some(dir) = &ctx.out {
        std::fs::create_dir_all(dir)?;
        ens.save(&dir.join("paths.bin"))?;
    }
    let term_w = presets::terminal_w(&ctx.world);
    let results = json!({
        "n_paths": ens.n_paths(),
        "n_steps": ens.n_steps(),
        "seed": ctx.seed,
        "terminal_w_mean": ens.mean(&term_w),
    });
    emit(writer, &results, ctx.seed, "simulate")
}

fn cmd_solve_bsde(common: &CommonArgs) -> Result<()> {
    let ctx = resolve(common, "lipschitz")?;
    let (phi, f) = presets::build(&ctx.preset, &ctx.world)?.type1()?;
    let n = ctx.world.n_steps();
    let sol = solve_bsde(&phi.phi[n], &f, &ctx.world, &ctx.engine)?;
    let mut writer = ctx.writer("solve-bsde")?;
    let times = ctx.times();
    let y_mean = ctx.level_means(&sol.y);
    if let Some(w) = &mut writer {
        w.series("y", "mean", &times, &y_mean);
    }
    let results = json!({
        "preset": ctx.preset,
        "y0": sol.y[0][0],
        "explicit_fallback": sol.explicit_fallback,
    });
    emit(writer, &results, ctx.seed, "solve-bsde")
}

fn cmd_solve_type1(common: &CommonArgs, no_y: bool, m_solution: bool) -> Result<()> {
    let ctx = resolve(common, "lipschitz")?;
    let (phi, f) = presets::build(&ctx.preset, &ctx.world)?.type1()?;
    let (mut sol, gaps) = if no_y || f.omega == 0.0 {
        (solve_type1_noy(&phi, &f, &ctx.world, &ctx.engine)?, vec![])
    } else {
        picard_type1(
            &phi,
            &f,
            &ctx.world,
            &ctx.engine,
            ctx.cfg.solver.tol,
            ctx.cfg.solver.max_iter,
        )?
    };
    let mut m_residual = None;
    if m_solution {
        sol = complete_m(&sol, 0, &ctx.world, &ctx.engine)?;
        if ctx.world.is_tree() {
            m_residual = Some(m_sol_residual(&sol, 0, &ctx.world)?);
        }
    }
    let residual = if ctx.world.is_tree() {
        Some(type1_residual(&sol, &phi, &f, &ctx.world)?)
    } else {
        None
    };
    let mut writer = ctx.writer("solve-type1")?;
    let times = ctx.times();
    let y_mean = ctx.level_means(&sol.y);
    if let Some(w) = &mut writer {
        w.series("diag_y", "mean", &times, &y_mean);
        for (i, g) in gaps.iter().enumerate() {
            w.row("picard", "gap", Some(i as f64), None, *g);
        }
    }
    let results = json!({
        "preset": ctx.preset,
        "y0": sol.y[0][0],
        "picard_gaps": gaps,
        "residual": residual,
        "m_residual": m_residual,
        "has_delta": sol.has_delta,
    });
    emit(writer, &results, ctx.seed, "solve-type1")
}

fn cmd_solve_type2(common: &CommonArgs) -> Result<()> {
    let ctx = resolve(common, "lipschitz")?;
    let (phi, f1) = presets::build(&ctx.preset, &ctx.world)?.type1()?;
    let f = lift(f1.clone())?;
    let plan = match (&ctx.cfg.solver.boundaries, ctx.cfg.solver.max_interval) {
        (Some(b), _) => IntervalPlan { boundaries: b.clone() },
        (None, Some(len)) => IntervalPlan::with_max_length(&ctx.world, len)?,
        (None, None) => IntervalPlan::single(&ctx.world),
    };
    let opts = Type2Options {
        tol: ctx.cfg.solver.tol,
        max_iter: ctx.cfg.solver.max_iter,
        ..Type2Options::default()
    };
    let sol = solve_type2(&phi, &f, &ctx.world, &ctx.engine, &plan, opts)?;
    let residual = if ctx.world.is_tree() {
        Some(type2_residual(&sol, &phi, &f, &ctx.world)?)
    } else {
        None
    };
    let m_residual = if ctx.world.is_tree() {
        Some(m_sol_residual(&sol, 0, &ctx.world)?)
    } else {
        None
    };
    let mut writer = ctx.writer("solve-type2")?;
    let times = ctx.times();
    let y_mean = ctx.level_means(&sol.y);
    if let Some(w) = &mut writer {
        w.series("diag_y", "mean", &times, &y_mean);
    }
    let results = json!({
        "preset": ctx.preset,
        "y0": sol.y[0][0],
        "boundaries": plan.boundaries,
        "residual": residual,
        "m_residual": m_residual,
        "has_delta": sol.has_delta,
    });
    emit(writer, &results, ctx.seed, "solve-type2")
}

fn cmd_sfie(common: &CommonArgs, r_index: usize, s_index: usize) -> Result<()> {
    let ctx = resolve(common, "girsanov-drift")?;
    let (phi, f) = presets::build(&ctx.preset, &ctx.world)?.type1()?;
    let sol = solve_sfie(&phi, &f, r_index, s_index, &ctx.world, &ctx.engine)?;
    let mut writer = ctx.writer("sfie")?;
    let clock = ctx.world.clock().clone();
    if let Some(w) = &mut writer {
        for (off, slice) in sol.psi.iter().enumerate() {
            let level = r_index + off;
            w.row(
                "psi",
                "mean",
                Some(clock.time(level)),
                None,
                ctx.world.expectation(level, slice),
            );
        }
    }
    let results = json!({
        "preset": ctx.preset,
        "r_index": sol.r_index,
        "s_index": sol.s_index,
        "psi_start": sol.psi[0][0],
    });
    emit(writer, &results, ctx.seed, "sfie")
}

fn cmd_compare(common: &CommonArgs, iterations: usize) -> Result<()> {
    let ctx = resolve(common, "sandwich")?;
    let (phi, f1, f2, f_bar) = match presets::build(&ctx.preset, &ctx.world)? {
        presets::PresetData::Sandwich { phi, f1, f2, f_bar } => (phi, f1, f2, f_bar),
        _ => {
            return Err(Error::Config(
                "data.preset: compare needs a driver-pair preset such as `sandwich`".into(),
            ))
        }
    };
    let (iterates, report) = monotone_picard(
        &phi,
        &f1,
        &f2,
        &f_bar,
        &ctx.world,
        &ctx.engine,
        iterations,
        ctx.cfg.solver.tol,
    )?;
    let mut violations = 0usize;
    for pair in iterates.windows(2) {
        violations += compare_solutions(&pair[1], &pair[0], 1e-12).violations;
    }
    let mut writer = ctx.writer("compare")?;
    if let Some(w) = &mut writer {
        for (i, inc) in report.max_increase.iter().enumerate() {
            w.row("monotone", "max_increase", Some(i as f64), None, *inc);
        }
    }
    let results = json!({
        "preset": ctx.preset,
        "iterations": iterates.len(),
        "monotone": report.monotone,
        "violations": violations,
        "final_gap": report.final_gap,
    });
    emit(writer, &results, ctx.seed, "compare")
}

fn cmd_partition(common: &CommonArgs, levels: usize) -> Result<()> {
    let ctx = resolve(common, "comparison-partition")?;
    let data = match presets::build(&ctx.preset, &ctx.world)? {
        presets::PresetData::Comparison(d) => d,
        _ => {
            return Err(Error::Config(
                "data.preset: partition-compare needs an ordered linear pair".into(),
            ))
        }
    };
    let n = ctx.world.n_steps();
    let mut reports = Vec::new();
    let mut writer = ctx.writer("partition-compare")?;
    for level in 0..levels.max(1) {
        let blocks = 1usize << level;
        if n % blocks != 0 {
            return Err(Error::Config(format!(
                "world.steps: {n} steps cannot split into {blocks} equal blocks"
            )));
        }
        let stride = n / blocks;
        let boundaries: Vec<usize> = (0..=blocks).map(|b| b * stride).collect();
        let report = partition_comparison(&data, &boundaries, &ctx.world, &ctx.engine, 1e-12)?;
        if let Some(w) = &mut writer {
            w.row("partition", "error", Some(blocks as f64), None, report.error);
            w.row(
                "partition",
                "min_difference",
                Some(blocks as f64),
                None,
                report.min_difference,
            );
        }
        reports.push(report);
    }
    let decreasing = reports.windows(2).all(|p| p[1].error < p[0].error);
    let results = json!({
        "preset": ctx.preset,
        "violations": reports.iter().map(|r| r.violations).sum::<usize>(),
        "errors": reports.iter().map(|r| r.error).collect::<Vec<_>>(),
        "error_decreasing": decreasing,
        "reports": reports,
    });
    emit(writer, &results, ctx.seed, "partition-compare")
}

/// Bounded smooth random kernels for repeated duality draws.
fn random_coefficients(seed: u64) -> FSVIECoefficients {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut c = || rng.gen_range(-0.4..0.4);
    let (a, b, d, e, g, h, k) = (c(), c(), c(), c(), c(), c(), c());
    FSVIECoefficients {
        a0: Arc::new(move |t, s| a + b * t * s),
        a1: Arc::new(move |t, s| d + e * (t - s)),
        jump: Arc::new(move |t, s, _| g + h * t + k * s),
        bound: 1.0,
        dt_bound: 1.0,
    }
}

fn cmd_duality(common: &CommonArgs, draws: usize) -> Result<()> {
    let ctx = resolve(common, "duality-linear")?;
    let (psi, phi, coeff) = match presets::build(&ctx.preset, &ctx.world)? {
        presets::PresetData::Duality { psi, phi, coeff } => (psi, phi, coeff),
        _ => {
            return Err(Error::Config(
                "data.preset: duality needs a forward-kernel preset".into(),
            ))
        }
    };
    let mut gaps = Vec::new();
    let mut std_error = None;
    let mut writer = ctx.writer("duality")?;
    for draw in 0..draws.max(1) {
        let c = if draw == 0 {
            coeff.clone()
        } else {
            random_coefficients(ctx.seed.wrapping_add(draw as u64))
        };
        let report = duality_gap(&psi, &phi, &c, &ctx.world, &ctx.engine)?;
        if let Some(w) = &mut writer {
            w.row("duality", "gap", Some(draw as f64), None, report.gap);
        }
        gaps.push(report.gap);
        std_error = report.std_error;
    }
    let max_gap = gaps.iter().cloned().fold(0.0f64, f64::max);
    let results = json!({
        "preset": ctx.preset,
        "draws": gaps.len(),
        "gaps": gaps,
        "max_gap": max_gap,
        "std_error": std_error,
    });
    emit(writer, &results, ctx.seed, "duality")
}

fn cmd_regularity(common: &CommonArgs, scales: usize) -> Result<()> {
    let ctx = resolve(common, "holder-regularity")?;
    let (phi, f) = presets::build(&ctx.preset, &ctx.world)?.type1()?;
    let sol = if f.omega == 0.0 {
        solve_type1_noy(&phi, &f, &ctx.world, &ctx.engine)?
    } else {
        picard_type1(
            &phi,
            &f,
            &ctx.world,
            &ctx.engine,
            ctx.cfg.solver.tol,
            ctx.cfg.solver.max_iter,
        )?
        .0
    };
    let p = ctx.cfg.solver.p;
    let target = phi.holder.map(|(alpha, _)| alpha * p);
    let report = regularity_estimate(&sol.y, &ctx.world, p, scales, target)?;
    let cadlag = if ctx.world.is_tree() {
        Some(cadlag_jump_report(&sol.y, &ctx.world, None)?)
    } else {
        None
    };
    let mut writer = ctx.writer("regularity")?;
    if let Some(w) = &mut writer {
        for (lag, moment) in &report.scales {
            w.row("scales", "moment", Some(*lag), None, *moment);
        }
    }
    let results = json!({
        "preset": ctx.preset,
        "p": p,
        "exponent": report.exponent,
        "exponent_se": report.exponent_se,
        "target": report.target,
        "flat": report.flat,
        "cadlag": cadlag,
    });
    emit(writer, &results, ctx.seed, "regularity")
}

fn cmd_norms(common: &CommonArgs) -> Result<()> {
    let ctx = resolve(common, "lipschitz")?;
    let (phi, f) = presets::build(&ctx.preset, &ctx.world)?.type1()?;
    let sol: BSVIESolution = if f.omega == 0.0 {
        solve_type1_noy(&phi, &f, &ctx.world, &ctx.engine)?
    } else {
        picard_type1(
            &phi,
            &f,
            &ctx.world,
            &ctx.engine,
            ctx.cfg.solver.tol,
            ctx.cfg.solver.max_iter,
        )?
        .0
    };
    let report = norm_sp(&sol, &ctx.world, ctx.cfg.solver.p, 0, None)?;
    let writer = ctx.writer("norms")?;
    let results = json!({
        "preset": ctx.preset,
        "norm": report,
    });
    emit(writer, &results, ctx.seed, "norms")
}
