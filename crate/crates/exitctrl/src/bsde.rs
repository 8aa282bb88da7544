//! Backward-regression BSDE solver on simulated bundles, the backward
//! semigroup, and the cost / value estimators built on top of it.
//!
//! Backward induction runs from each path's effective terminal step
//! (exit step capped by an optional stopping rule). At step n the martingale
//! coefficient Z_n is the regression of `Y_{n+1} dB_n / dt` on basis
//! functions of `X_n`, the continuation value is the regression of
//! `Y_{n+1}`, and the driver's implicit y-dependence is resolved by a fixed
//! number of Picard passes. After a path stops, its value is frozen at the
//! terminal and Z is zero.

use crate::error::{Error, Result};
use crate::expr::{EvalCtx, Expr, SlotRules};
use crate::paths::{simulate, PathBundle, Policy, SimConfig};
use crate::problem::{ControlProblem, Domain};
use crate::regression::{fit_design, Design, Projector, RegressionConfig};
use serde::{Deserialize, Serialize};

/// Polynomial test function with explicit gradient and Hessian trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub phi: Expr,
    pub grad: Vec<Expr>,
    pub hess: Vec<Vec<Expr>>,
}

impl TestFunction {
    /// Builds the derivative trees; `phi` must be polynomial.
    pub fn new(phi: Expr, dim: usize) -> Result<TestFunction> {
        phi.validate(
            "phi",
            SlotRules {
                dim_x: dim,
                dim_v: None,
                dim_z: None,
            },
        )?;
        let grad: Vec<Expr> = (0..dim)
            .map(|i| phi.differentiate(i))
            .collect::<Result<_>>()?;
        let hess: Vec<Vec<Expr>> = grad
            .iter()
            .map(|gi| (0..dim).map(|j| gi.differentiate(j)).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        Ok(TestFunction { phi, grad, hess })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.phi.eval(&EvalCtx::state(x))
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let ctx = EvalCtx::state(x);
        for (o, e) in out.iter_mut().zip(&self.grad) {
            *o = e.eval(&ctx);
        }
    }

    /// Row-major d x d Hessian.
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let ctx = EvalCtx::state(x);
        let d = self.grad.len();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = self.hess[i][j].eval(&ctx);
            }
        }
    }

    /// Generator application `L(x, v) phi(x)`.
    pub fn generator(&self, problem: &ControlProblem, x: &[f64], v: &[f64]) -> f64 {
        let d = problem.dim_x;
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        self.gradient(x, &mut grad);
        self.hessian(x, &mut hess);
        problem.generator_apply(x, v, &grad, &hess)
    }
}

/// Driver of the backward equation.
#[derive(Debug, Clone)]
pub enum Driver<'a> {
    /// The problem's own driver f(x, y, z, v).
    Problem,
    /// An explicit expression in (x, y, z, v); used for perturbed and
    /// ordered driver pairs.
    Expr(&'a Expr),
    /// Test-function driver
    /// `F(x,y,z,v) = L(x,v) phi(x) + f(x, y + phi(x), z + grad phi(x) sigma(x,v), v)`,
    /// optionally with the state argument frozen at a fixed point.
    TestShifted {
        test_fn: &'a TestFunction,
        frozen_x: Option<&'a [f64]>,
    },
    /// Monotone envelope `f0 - l0 |y| - l0 |z|`.
    MonotoneEnvelope { f0: f64, l0: f64 },
    Zero,
}

/// Terminal condition at the effective stop step.
#[derive(Debug, Clone)]
pub enum Terminal<'a> {
    /// Expression of the stopped state (g at the exit point).
    Expr(&'a Expr),
    /// Explicit per-path values, measurable at the stop step.
    Values(&'a [f64]),
    Zero,
}

/// Grid-measurable stopping rules capping the exit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StopRule {
    /// Stop at the first exit (or the censor horizon).
    Exit,
    /// Exit time capped at a fixed deterministic time.
    FixedTime { t: f64 },
    /// Exit time capped at the first exit from a sub-domain.
    SubDomainExit { domain: Domain },
}

/// Effective stop step of every path under a rule: the path's own stop
/// step capped by the rule's step.
pub fn stop_steps(bundle: &PathBundle, rule: &StopRule) -> Vec<usize> {
    (0..bundle.n_paths())
        .map(|p| {
            let last = bundle.last_step(p);
            match rule {
                StopRule::Exit => last,
                StopRule::FixedTime { t } => {
                    let cap = (t / bundle.dt).round().max(0.0) as usize;
                    last.min(cap)
                }
                StopRule::SubDomainExit { domain } => {
                    let mut cap = last;
                    for n in 0..=last {
                        if domain.boundary_distance(bundle.state(p, n)) <= 0.0 {
                            cap = n;
                            break;
                        }
                    }
                    cap
                }
            }
        })
        .collect()
}

/// Grid-indexed estimates of (Y, Z) with the post-stop convention applied:
/// queries at or past a path's stop step return the terminal value and a
/// zero martingale coefficient.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub y0: f64,
    pub y0_stderr: f64,
    /// Fraction of paths whose terminal had to be evaluated at the censor
    /// horizon (projected state); a bias flag, not an error.
    pub censored_fraction: f64,
    pub n_paths: usize,
    /// Per-path time-zero samples `xi + sum_n f(...) dt` (the pathwise
    /// decomposition of Y_0; all paths share x0, the step-0 regression is
    /// degenerate, and the average of these samples is the unbiased
    /// estimator with a meaningful spread).
    pub y0_per_path: Vec<f64>,
    /// Per-path terminal values at the effective stop.
    pub terminal: Vec<f64>,
    /// Effective stop step per path.
    pub stops: Vec<usize>,
    /// Per-path per-step tables, kept when `RegressionConfig::store_paths`.
    pub tables: Option<SolutionTables>,
    pub convention_applied: bool,
}

#[derive(Debug, Clone)]
pub struct SolutionTables {
    pub dim_z: usize,
    /// y[p][n] for n in 0..=stops[p].
    pub y: Vec<Vec<f64>>,
    /// z[p][n*m..(n+1)*m] for n in 0..=stops[p]; zero at the stop step.
    pub z: Vec<Vec<f64>>,
}

impl BsdeSolution {
    /// Y estimate at (path, step); frozen at the terminal past the stop.
    pub fn y(&self, path: usize, step: usize) -> f64 {
        match &self.tables {
            Some(t) => t.y[path][step.min(self.stops[path])],
            None => panic!("solution tables were not stored"),
        }
    }

    /// Z estimate at (path, step); zero at or past the stop step.
    pub fn z(&self, path: usize, step: usize, out: &mut [f64]) {
        match &self.tables {
            Some(t) => {
                if step >= self.stops[path] {
                    out.fill(0.0);
                } else {
                    let m = t.dim_z;
                    out.copy_from_slice(&t.z[path][step * m..(step + 1) * m]);
                }
            }
            None => panic!("solution tables were not stored"),
        }
    }

    /// Writes per-path per-step estimates as CSV (requires stored tables).
    pub fn export_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        let tables = self.tables.as_ref().ok_or_else(|| {
            Error::Config("solution tables were not stored; set regression.store_paths".into())
        })?;
        write!(w, "path_id,step,y")?;
        for j in 0..tables.dim_z {
            write!(w, ",z_{j}")?;
        }
        writeln!(w)?;
        let mut z = vec![0.0; tables.dim_z];
        for p in 0..self.n_paths {
            for n in 0..=self.stops[p] {
                write!(w, "{p},{n},{}", tables.y[p][n])?;
                self.z(p, n, &mut z);
                for zj in &z {
                    write!(w, ",{zj}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Scratch buffers for driver evaluation, reused across the backward sweep.
struct DriverScratch {
    grad: Vec<f64>,
    sigma: Vec<f64>,
    z_shift: Vec<f64>,
    z_arg: Vec<f64>,
    /// (L phi, phi, z-shift) per control index for frozen-x drivers.
    frozen: Vec<Option<(f64, f64, Vec<f64>)>>,
}

impl DriverScratch {
    fn new(problem: &ControlProblem) -> Self {
        let d = problem.dim_x;
        let m = problem.dim_w;
        DriverScratch {
            grad: vec![0.0; d],
            sigma: vec![0.0; d * m],
            z_shift: vec![0.0; m],
            z_arg: vec![0.0; m],
            frozen: vec![None; problem.controls.len()],
        }
    }
}

/// Per-(path, step) prepared quantities; Picard passes then only vary y.
struct PreparedDriver {
    lphi: f64,
    phi_val: f64,
}

fn prepare_driver(
    problem: &ControlProblem,
    driver: &Driver,
    scratch: &mut DriverScratch,
    x: &[f64],
    v: &[f64],
    v_index: usize,
) -> PreparedDriver {
    match driver {
        Driver::TestShifted { test_fn, frozen_x } => {
            let target: &[f64] = frozen_x.unwrap_or(x);
            let m = problem.dim_w;
            if frozen_x.is_some() {
                if scratch.frozen[v_index].is_none() {
                    let lphi = test_fn.generator(problem, target, v);
                    let phi_val = test_fn.value(target);
                    test_fn.gradient(target, &mut scratch.grad);
                    problem.eval_sigma(target, v, &mut scratch.sigma);
                    let mut shift = vec![0.0; m];
                    for (j, s) in shift.iter_mut().enumerate() {
                        *s = (0..problem.dim_x)
                            .map(|i| scratch.grad[i] * scratch.sigma[i * m + j])
                            .sum();
                    }
                    scratch.frozen[v_index] = Some((lphi, phi_val, shift));
                }
                let (lphi, phi_val, shift) = scratch.frozen[v_index].as_ref().unwrap();
                scratch.z_shift.copy_from_slice(shift);
                PreparedDriver {
                    lphi: *lphi,
                    phi_val: *phi_val,
                }
            } else {
                let lphi = test_fn.generator(problem, target, v);
                let phi_val = test_fn.value(target);
                test_fn.gradient(target, &mut scratch.grad);
                problem.eval_sigma(target, v, &mut scratch.sigma);
                for j in 0..m {
                    scratch.z_shift[j] = (0..problem.dim_x)
                        .map(|i| scratch.grad[i] * scratch.sigma[i * m + j])
                        .sum();
                }
                PreparedDriver { lphi, phi_val }
            }
        }
        _ => PreparedDriver {
            lphi: 0.0,
            phi_val: 0.0,
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_driver(
    problem: &ControlProblem,
    driver: &Driver,
    prepared: &PreparedDriver,
    scratch: &mut DriverScratch,
    x: &[f64],
    y: f64,
    z: &[f64],
    v: &[f64],
) -> f64 {
    match driver {
        Driver::Problem => problem.eval_driver(x, y, z, v),
        Driver::Expr(e) => e.eval(&EvalCtx { x, v, y, z }),
        Driver::TestShifted { frozen_x, .. } => {
            let target: &[f64] = frozen_x.unwrap_or(x);
            for j in 0..problem.dim_w {
                scratch.z_arg[j] = z[j] + scratch.z_shift[j];
            }
            prepared.lphi
                + problem.eval_driver(target, y + prepared.phi_val, &scratch.z_arg, v)
        }
        Driver::MonotoneEnvelope { f0, l0 } => {
            let z_norm = z.iter().map(|t| t * t).sum::<f64>().sqrt();
            f0 - l0 * y.abs() - l0 * z_norm
        }
        Driver::Zero => 0.0,
    }
}

/// Solves the BSDE by backward regression on a simulated bundle.
pub fn solve_bsde(
    problem: &ControlProblem,
    bundle: &PathBundle,
    terminal: Terminal,
    driver: &Driver,
    config: &RegressionConfig,
    stop_rule: &StopRule,
) -> Result<BsdeSolution> {
    config.validate()?;
    let n_paths = bundle.n_paths();
    let m = problem.dim_w;
    let dt = bundle.dt;
    let stops = stop_steps(bundle, stop_rule);

    // Terminal values; censor-ended paths evaluate at the projected state.
    let mut censored = 0usize;
    let mut xi = vec![0.0; n_paths];
    for p in 0..n_paths {
        let is_censor_end = bundle.exits[p].censored && stops[p] == bundle.last_step(p);
        if is_censor_end {
            censored += 1;
        }
        xi[p] = match &terminal {
            Terminal::Expr(g) => {
                let x: &[f64] = if is_censor_end {
                    &bundle.exits[p].exit_point
                } else {
                    bundle.state(p, stops[p])
                };
                g.eval(&EvalCtx::state(x))
            }
            Terminal::Values(vals) => {
                if vals.len() != n_paths {
                    return Err(Error::DimensionMismatch {
                        what: "terminal values".into(),
                        expected: n_paths,
                        found: vals.len(),
                    });
                }
                vals[p]
            }
            Terminal::Zero => 0.0,
        };
        if !xi[p].is_finite() {
            return Err(Error::Regression {
                step: stops[p],
                message: format!("non-finite terminal value on path {p}"),
            });
        }
    }

    let projector = Projector::new(&config.basis, &problem.domain);
    let max_stop = stops.iter().copied().max().unwrap_or(0);
    let mut y_all = xi.clone();
    // Accumulated driver contributions sum_n f(...) dt per path.
    let mut f_integral = vec![0.0; n_paths];
    let mut scratch = DriverScratch::new(problem);

    let mut tables = if config.store_paths {
        let y: Vec<Vec<f64>> = (0..n_paths)
            .map(|p| {
                let mut col = vec![0.0; stops[p] + 1];
                col[stops[p]] = xi[p];
                col
            })
            .collect();
        let z: Vec<Vec<f64>> = (0..n_paths).map(|p| vec![0.0; (stops[p] + 1) * m]).collect();
        Some(SolutionTables { dim_z: m, y, z })
    } else {
        None
    };

    // Paths ordered by descending stop step: the active set at step n is
    // the prefix with stops > n, so the sweep extends it incrementally
    // instead of rescanning all paths each step.
    let mut by_stop: Vec<usize> = (0..n_paths).collect();
    by_stop.sort_by(|&a, &b| stops[b].cmp(&stops[a]).then(a.cmp(&b)));
    let mut active_len = 0usize;

    // Reused per-step buffers.
    let mut design = Design::default();
    let mut targets: Vec<Vec<f64>> = vec![Vec::new(); 1 + m];
    let mut db = vec![0.0; m];
    let mut predictions = vec![0.0; 1 + m];
    let mut cont: Vec<f64> = Vec::new();
    let mut z_buf: Vec<f64> = Vec::new();

    for n in (0..max_stop).rev() {
        while active_len < n_paths && stops[by_stop[active_len]] > n {
            active_len += 1;
        }
        let active = &by_stop[..active_len];
        if active.is_empty() {
            continue;
        }
        for t in targets.iter_mut() {
            t.clear();
        }
        for &p in active {
            let y_next = y_all[p];
            bundle.brownian_increment(p, n, &mut db);
            targets[0].push(y_next);
            for j in 0..m {
                targets[1 + j].push(y_next * db[j] / dt);
            }
        }
        design.build(&projector, |i| bundle.state(active[i], n), active.len());
        let surface = fit_design(&projector, &design, &targets, config.ridge, n)?;
        cont.resize(active.len(), 0.0);
        z_buf.resize(active.len() * m, 0.0);
        for idx in 0..active.len() {
            surface.predict_design(&design, idx, &mut predictions);
            cont[idx] = predictions[0];
            z_buf[idx * m..(idx + 1) * m].copy_from_slice(&predictions[1..1 + m]);
        }
        for (idx, &p) in active.iter().enumerate() {
            let x = bundle.state(p, n);
            let v_index = bundle.control_index(p, n);
            let v = &problem.controls.points[v_index];
            let z = &z_buf[idx * m..(idx + 1) * m];
            let prepared = prepare_driver(problem, driver, &mut scratch, x, v, v_index);
            let mut y = cont[idx];
            for _ in 0..config.picard_iterations {
                y = cont[idx]
                    + eval_driver(problem, driver, &prepared, &mut scratch, x, y, z, v) * dt;
            }
            if !y.is_finite() {
                return Err(Error::Regression {
                    step: n,
                    message: format!("non-finite Y update on path {p}"),
                });
            }
            // The driver contribution of this step is y - cont by
            // construction of the Picard update.
            f_integral[p] += y - cont[idx];
            y_all[p] = y;
            if let Some(t) = tables.as_mut() {
                t.y[p][n] = y;
                t.z[p][n * m..(n + 1) * m].copy_from_slice(z);
            }
        }
    }

    // Pathwise samples of Y_0 = E[xi + int f]: regression enters only
    // through the driver arguments, so their average carries the genuine
    // Monte Carlo spread (the step-0 regression itself is degenerate).
    let samples: Vec<f64> = (0..n_paths).map(|p| xi[p] + f_integral[p]).collect();
    let y0 = samples.iter().sum::<f64>() / n_paths as f64;
    let var = samples.iter().map(|y| (y - y0) * (y - y0)).sum::<f64>()
        / (n_paths.max(2) - 1) as f64;
    let y0_stderr = (var / n_paths as f64).sqrt();

    Ok(BsdeSolution {
        y0,
        y0_stderr,
        censored_fraction: censored as f64 / n_paths as f64,
        n_paths,
        y0_per_path: samples,
        terminal: xi,
        stops,
        tables,
        convention_applied: true,
    })
}

/// Backward semigroup: the time-zero value of the BSDE driven by the
/// problem driver with terminal `eta` at the stopped time `tau /\ Theta`.
pub fn backward_semigroup(
    problem: &ControlProblem,
    bundle: &PathBundle,
    stop_rule: &StopRule,
    eta: &[f64],
    config: &RegressionConfig,
) -> Result<BsdeSolution> {
    solve_bsde(
        problem,
        bundle,
        Terminal::Values(eta),
        &Driver::Problem,
        config,
        stop_rule,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub value: f64,
    pub stderr: f64,
    pub censored_fraction: f64,
    pub n_paths: usize,
}

/// Cost functional J(x0, policy): simulate, then solve the BSDE with the
/// problem driver and terminal g at the exit.
pub fn cost(
    problem: &ControlProblem,
    policy: &Policy,
    x0: &[f64],
    sim: &SimConfig,
    reg: &RegressionConfig,
) -> Result<CostEstimate> {
    let bundle = simulate(problem, policy, x0, sim)?;
    let sol = solve_bsde(
        problem,
        &bundle,
        Terminal::Expr(&problem.g),
        &Driver::Problem,
        reg,
        &StopRule::Exit,
    )?;
    Ok(CostEstimate {
        value: sol.y0,
        stderr: sol.y0_stderr,
        censored_fraction: sol.censored_fraction,
        n_paths: sol.n_paths,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateCost {
    pub label: String,
    pub cost: CostEstimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub stderr: f64,
    pub argmin: usize,
    pub candidates: Vec<CandidateCost>,
}

/// Default candidate list: every constant policy over V_h, plus the
/// feedback policy when one is supplied.
pub fn default_candidates(
    problem: &ControlProblem,
    feedback: Option<Policy>,
) -> Vec<(String, Policy)> {
    let mut out: Vec<(String, Policy)> = (0..problem.controls.len())
        .map(|i| (format!("constant[{i}]"), Policy::Constant { index: i }))
        .collect();
    if let Some(fb) = feedback {
        out.push(("feedback".into(), fb));
    }
    out
}

/// Value estimate: minimum cost over candidate policies, ties toward the
/// lowest candidate index. All candidates share the master seed (common
/// random numbers).
pub fn estimate_value(
    problem: &ControlProblem,
    x0: &[f64],
    candidates: &[(String, Policy)],
    sim: &SimConfig,
    reg: &RegressionConfig,
) -> Result<ValueEstimate> {
    if candidates.is_empty() {
        return Err(Error::Config("candidate policy list is empty".into()));
    }
    let mut table = Vec::with_capacity(candidates.len());
    for (label, policy) in candidates {
        let est = cost(problem, policy, x0, sim, reg)?;
        table.push(CandidateCost {
            label: label.clone(),
            cost: est,
        });
    }
    let mut argmin = 0usize;
    for (i, c) in table.iter().enumerate() {
        if c.cost.value < table[argmin].cost.value {
            argmin = i;
        }
    }
    Ok(ValueEstimate {
        value: table[argmin].cost.value,
        stderr: table[argmin].cost.stderr,
        argmin,
        candidates: table,
    })
}
