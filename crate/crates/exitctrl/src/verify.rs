//! Theorem harness: executes the checkable statements of the theory as
//! statistical or exact assertions and emits pass/fail reports with
//! measured margins.
//!
//! Tolerance policy: inequalities involving Monte Carlo estimates use a
//! 3-standard-error band plus an explicit, config-declared scheme-bias
//! budget; almost-sure or exact statements are asserted with zero
//! tolerance only where the discrete computation is exact (shared bundles,
//! shared bases, constant gaps).

use crate::bsde::{
    backward_semigroup, cost, default_candidates, estimate_value, solve_bsde, stop_steps, Driver,
    StopRule, Terminal, TestFunction,
};
use crate::error::{Error, Result};
use crate::expr::{EvalCtx, Expr};
use crate::hjb::{extract_policy, solve_hjb, GridConfig, ValueField};
use crate::paths::{barrier_generator, barrier_value, exit_moment_trend, moment_converged, simulate, Policy, SimConfig};
use crate::problem::{ControlProblem, Domain, ProbeConfig};
use crate::regression::RegressionConfig;
use crate::rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail { margin: f64 },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub status: CheckStatus,
    /// Structured measured quantities (gaps, slopes, per-point tables).
    pub measured: serde_json::Value,
    pub tolerance: f64,
    pub sample_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub narrative: String,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        matches!(self.status, CheckStatus::Pass)
    }

    pub fn failed(&self) -> bool {
        matches!(self.status, CheckStatus::Fail { .. })
    }
}

/// The small-horizon expansion objects at one test point for one epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViscosityTestBundle {
    pub epsilon: f64,
    pub phi: Expr,
    pub x: Vec<f64>,
    /// Envelope constant F0(x, 0, 0) = inf_v F(x, 0, 0, v).
    pub f0: f64,
    /// Lipschitz constant of F in (x, y, z), estimated by sampling.
    pub l0: f64,
    pub y1_0: f64,
    pub y1_stderr: f64,
    pub y2_0: f64,
    pub y2_stderr: f64,
    pub y3_0: f64,
    pub y3_stderr: f64,
    /// Closed-form solution of the envelope ODE at time zero.
    pub y4_0: f64,
    /// Independent high-accuracy integration of the same ODE.
    pub y4_ode: f64,
    pub gap12: f64,
    pub gap12_stderr: f64,
    pub gap34: f64,
}

// ---------------------------------------------------------------------------
// Dynamic programming principle
// ---------------------------------------------------------------------------

/// Stopping rules accepted by the DPP check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DppTheta {
    Zero,
    FixedTime { t: f64 },
    SubDomain { scale: f64 },
}

fn scaled_domain(domain: &Domain, scale: f64) -> Domain {
    match domain {
        Domain::Interval { center, radius } => Domain::Interval {
            center: *center,
            radius: radius * scale,
        },
        Domain::Ball { center, radius } => Domain::Ball {
            center: center.clone(),
            radius: radius * scale,
        },
        Domain::AxisBox {
            center,
            half_widths,
        } => Domain::AxisBox {
            center: center.clone(),
            half_widths: half_widths.iter().map(|h| h * scale).collect(),
        },
    }
}

/// Checks the dynamic programming identity
/// `u(x) = inf_v G_{tau /\ Theta}[u(X_{tau /\ Theta})]`
/// with the FD field supplying u at the stopped state. Both sides restrict
/// the infimum to the implementable candidate policies (constants over V_h
/// plus the FD feedback policy).
pub fn check_dpp(
    problem: &ControlProblem,
    x0: &[f64],
    theta: &DppTheta,
    field: &ValueField,
    sim: &SimConfig,
    reg: &RegressionConfig,
    bias_coeff: f64,
) -> Result<CheckReport> {
    let name = format!("dpp[{theta:?}]");
    let candidates = default_candidates(problem, Some(extract_policy(field)));
    let grid_h = field
        .axes
        .iter()
        .map(|a| a[1] - a[0])
        .fold(0.0f64, f64::max);
    let bias = bias_coeff * (grid_h + sim.dt.sqrt());

    if matches!(theta, DppTheta::Zero) {
        // Degenerate identity: the semigroup over an empty interval returns
        // the mean of eta, so both sides are the same number; this is the
        // harness self-test.
        let u0 = field.interp(x0);
        let bundle = simulate(problem, &candidates[0].1, x0, sim)?;
        let eta = vec![u0; bundle.n_paths()];
        let sol = backward_semigroup(problem, &bundle, &StopRule::FixedTime { t: 0.0 }, &eta, reg)?;
        // Same averaging operation on both sides: the identity is bit-exact.
        let lhs = eta.iter().sum::<f64>() / eta.len() as f64;
        let gap = (sol.y0 - lhs).abs();
        return Ok(CheckReport {
            name,
            status: if gap == 0.0 {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail { margin: gap }
            },
            measured: serde_json::json!({ "lhs": lhs, "u_fd": u0, "rhs": sol.y0, "gap": gap }),
            tolerance: 0.0,
            sample_sizes: vec![bundle.n_paths()],
            seeds: vec![sim.master_seed],
            narrative: "Theta = 0 reduces the identity to u(x) = u(x); gap must be exactly zero"
                .into(),
        });
    }

    let rule = match theta {
        DppTheta::Zero => unreachable!(),
        DppTheta::FixedTime { t } => StopRule::FixedTime { t: *t },
        DppTheta::SubDomain { scale } => StopRule::SubDomainExit {
            domain: scaled_domain(&problem.domain, *scale),
        },
    };

    // LHS: value estimate over the candidates.
    let lhs = estimate_value(problem, x0, &candidates, sim, reg)?;

    // RHS: min over candidates of G_{tau /\ Theta}[u_FD(X_{tau /\ Theta})].
    let mut rhs_best = f64::INFINITY;
    let mut rhs_stderr = 0.0;
    let mut censored_max = 0.0f64;
    let mut rhs_table = Vec::new();
    for (label, policy) in &candidates {
        let bundle = simulate(problem, policy, x0, sim)?;
        censored_max = censored_max.max(bundle.censored_fraction());
        let stops = stop_steps(&bundle, &rule);
        let eta: Vec<f64> = (0..bundle.n_paths())
            .map(|p| field.interp(bundle.state(p, stops[p])))
            .collect();
        let sol = backward_semigroup(problem, &bundle, &rule, &eta, reg)?;
        rhs_table.push(serde_json::json!({ "policy": label, "value": sol.y0,
                                           "stderr": sol.y0_stderr }));
        if sol.y0 < rhs_best {
            rhs_best = sol.y0;
            rhs_stderr = sol.y0_stderr;
        }
    }

    if censored_max > 0.01 {
        return Ok(CheckReport {
            name,
            status: CheckStatus::Skipped {
                reason: format!("censored fraction {censored_max:.3} exceeds 1%"),
            },
            measured: serde_json::json!({ "censored_fraction": censored_max }),
            tolerance: 0.0,
            sample_sizes: vec![sim.n_paths],
            seeds: vec![sim.master_seed],
            narrative: "horizon too short for the exit-time identity".into(),
        });
    }

    let gap = (lhs.value - rhs_best).abs();
    let tol = 3.0 * (lhs.stderr.powi(2) + rhs_stderr.powi(2)).sqrt() + bias;
    Ok(CheckReport {
        name,
        status: if gap <= tol {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail { margin: gap - tol }
        },
        measured: serde_json::json!({
            "lhs": lhs.value, "lhs_stderr": lhs.stderr,
            "rhs": rhs_best, "rhs_stderr": rhs_stderr,
            "gap": gap, "rhs_candidates": rhs_table,
        }),
        tolerance: tol,
        sample_sizes: vec![sim.n_paths],
        seeds: vec![sim.master_seed],
        narrative: format!("|u(x0) - inf_v G[u(X_stop)]| = {gap:.5} vs tolerance {tol:.5}"),
    })
}

// ---------------------------------------------------------------------------
// Hoelder regularity
// ---------------------------------------------------------------------------

/// Fits `|u(x) - u(x')| <= C |x - x'|^h` over pairs spanning at least two
/// decades of separation and passes when the fitted exponent stays above
/// 0.4 (the theory guarantees 1/2; smooth benchmarks sit near 1).
pub fn check_holder(
    problem: &ControlProblem,
    field: &ValueField,
    seed: u64,
    separations: &[f64],
    pairs_per_separation: usize,
) -> Result<CheckReport> {
    let s_max = separations.iter().cloned().fold(f64::MIN, f64::max);
    let s_min = separations.iter().cloned().fold(f64::MAX, f64::min);
    if !(s_min > 0.0) || s_max / s_min < 100.0 {
        return Err(Error::Refused(format!(
            "separation range [{s_min}, {s_max}] spans less than two decades"
        )));
    }
    let d = problem.dim_x;
    let mut points = Vec::new();
    for (si, &s) in separations.iter().enumerate() {
        let mut acc = 0.0;
        let mut kept = 0usize;
        for i in 0..(4 * pairs_per_separation) as u64 {
            if kept >= pairs_per_separation {
                break;
            }
            let z = problem
                .domain
                .sample_closure(seed, 0x401d + si as u64, i);
            let mut e: Vec<f64> = (0..d)
                .map(|j| rng::normal(seed, 0x77d1 + si as u64, i, j as u64))
                .collect();
            let norm = e.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-300);
            for t in &mut e {
                *t /= norm;
            }
            let a: Vec<f64> = (0..d).map(|j| z[j] - 0.5 * s * e[j]).collect();
            let b: Vec<f64> = (0..d).map(|j| z[j] + 0.5 * s * e[j]).collect();
            if !problem.domain.contains_closure(&a) || !problem.domain.contains_closure(&b) {
                continue;
            }
            acc += (field.interp(&a) - field.interp(&b)).abs();
            kept += 1;
        }
        if kept > 0 {
            points.push((s, acc / kept as f64, kept));
        }
    }

    // Differences at solver-noise level carry no slope information.
    let u_scale = field.u.iter().fold(0.0f64, |a, &u| a.max(u.abs()));
    let noise_floor = 1e-6 * (1.0 + u_scale);
    let fit_points: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, du, _)| *du > noise_floor)
        .map(|(s, du, _)| (s.ln(), du.ln()))
        .collect();
    if fit_points.len() < 2 {
        // All differences vanish: a constant field satisfies any exponent.
        return Ok(CheckReport {
            name: "holder".into(),
            status: CheckStatus::Pass,
            measured: serde_json::json!({ "degenerate_fit": true }),
            tolerance: 0.4,
            sample_sizes: vec![points.iter().map(|p| p.2).sum()],
            seeds: vec![seed],
            narrative: "degenerate fit: value differences vanish on all pairs".into(),
        });
    }
    let (slope, intercept) = linear_fit(&fit_points);
    let pass = slope >= 0.4;
    Ok(CheckReport {
        name: "holder".into(),
        status: if pass {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail {
                margin: 0.4 - slope,
            }
        },
        measured: serde_json::json!({
            "exponent": slope,
            "log_constant": intercept,
            "table": points.iter().map(|(s, du, n)| serde_json::json!({
                "separation": s, "mean_abs_du": du, "pairs": n })).collect::<Vec<_>>(),
        }),
        tolerance: 0.4,
        sample_sizes: vec![points.iter().map(|p| p.2).sum()],
        seeds: vec![seed],
        narrative: format!("fitted exponent h = {slope:.3} (threshold 0.4)"),
    })
}

fn linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    (slope, intercept)
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

/// Pairwise-ordered data comparison on a shared bundle: `driver2 >= f` and
/// `terminal2 >= g` pointwise imply Y'(0) >= Y(0). For constant gaps with a
/// shared basis and a z-free, y-affine driver pair the ordering is asserted
/// with zero tolerance (the backward induction preserves the constant gap
/// exactly); otherwise the assertion carries a 3-stderr band.
pub fn check_comparison(
    problem: &ControlProblem,
    driver2: &Expr,
    terminal2: &Expr,
    x0: &[f64],
    sim: &SimConfig,
    reg: &RegressionConfig,
    probe: &ProbeConfig,
    inject_sign_flip: bool,
) -> Result<CheckReport> {
    // Pointwise order audit of the claimed pair on probe samples.
    let mut min_gap_f = f64::INFINITY;
    let mut max_gap_f = f64::NEG_INFINITY;
    let mut min_gap_g = f64::INFINITY;
    let mut y_slope: Option<f64> = None;
    let mut y_affine = true;
    for i in 0..probe.sample_count as u64 {
        let x = problem.domain.sample_closure(probe.seed, 0xc0de, i);
        let v_idx = (rng::draw_u64(probe.seed, 0xc0df, i, 0) % problem.controls.len() as u64) as usize;
        let v = &problem.controls.points[v_idx];
        let y = probe.y_box * (2.0 * rng::uniform(probe.seed, 0xc0e0, i, 0) - 1.0);
        let z: Vec<f64> = (0..problem.dim_w)
            .map(|j| probe.z_box * (2.0 * rng::uniform(probe.seed, 0xc0e1, i, 1 + j as u64) - 1.0))
            .collect();
        let f1 = problem.eval_driver(&x, y, &z, v);
        let f2 = driver2.eval(&EvalCtx { x: &x, v, y, z: &z });
        min_gap_f = min_gap_f.min(f2 - f1);
        max_gap_f = max_gap_f.max(f2 - f1);
        let g1 = problem.eval_terminal(&x);
        let g2 = terminal2.eval(&EvalCtx::state(&x));
        min_gap_g = min_gap_g.min(g2 - g1);
        // y-affineness probe: difference quotient in y must be constant.
        let y2 = y + 0.7;
        let q = (problem.eval_driver(&x, y2, &z, v) - problem.eval_driver(&x, y, &z, v)) / 0.7;
        match y_slope {
            None => y_slope = Some(q),
            Some(prev) => {
                if (q - prev).abs() > 1e-10 {
                    y_affine = false;
                }
            }
        }
    }
    if !inject_sign_flip && (min_gap_f < -1e-12 || min_gap_g < -1e-12) {
        return Err(Error::Refused(format!(
            "pair is not pointwise ordered as claimed on probes \
             (min driver gap {min_gap_f}, min terminal gap {min_gap_g})"
        )));
    }

    let bundle = simulate(problem, &Policy::Constant { index: 0 }, x0, sim)?;
    let base = solve_bsde(
        problem,
        &bundle,
        Terminal::Expr(&problem.g),
        &Driver::Problem,
        reg,
        &StopRule::Exit,
    )?;
    let primed = solve_bsde(
        problem,
        &bundle,
        Terminal::Expr(terminal2),
        &Driver::Expr(driver2),
        reg,
        &StopRule::Exit,
    )?;
    let (y_lo, y_hi) = if inject_sign_flip {
        // Forced-failure fixture: present the solutions in the wrong order
        // so the assertion must fail (exit-code contract self-test).
        (primed.y0, base.y0)
    } else {
        (base.y0, primed.y0)
    };

    // Exact branch: constant gaps, shared basis, z-free y-affine drivers.
    let constant_gap = (max_gap_f - min_gap_f).abs() <= 1e-10;
    let exact = constant_gap && !problem.f.uses_z() && !driver2.uses_z() && y_affine;
    let tol = if exact {
        0.0
    } else {
        3.0 * (base.y0_stderr.powi(2) + primed.y0_stderr.powi(2)).sqrt()
    };
    let pass = y_hi >= y_lo - tol;
    Ok(CheckReport {
        name: "comparison".into(),
        status: if pass {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail {
                margin: y_lo - y_hi - tol,
            }
        },
        measured: serde_json::json!({
            "y0": base.y0, "y0_primed": primed.y0,
            "ordering_gap": primed.y0 - base.y0,
            "driver_gap_range": [min_gap_f, max_gap_f],
            "exact_branch": exact,
        }),
        tolerance: tol,
        sample_sizes: vec![sim.n_paths],
        seeds: vec![sim.master_seed, probe.seed],
        narrative: if exact {
            format!(
                "exact ordering branch: Y0' - Y0 = {} (must be >= 0)",
                primed.y0 - base.y0
            )
        } else {
            format!(
                "statistical ordering: Y0' - Y0 = {} within 3 stderr",
                primed.y0 - base.y0
            )
        },
    })
}

// ---------------------------------------------------------------------------
// Stability trend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationTarget {
    Driver,
    Terminal,
}

/// Measures `|Delta Y(0)|^2` under shrinking constant perturbations of the
/// driver or terminal on shared seeds. The stability inequality's constants
/// are unspecified, so the check asserts the quadratic scaling trend: the
/// squared gaps must decrease monotonically with slope >= 1.8 on a log-log
/// fit.
pub fn check_stability_trend(
    problem: &ControlProblem,
    x0: &[f64],
    target: PerturbationTarget,
    h_list: &[f64],
    sim: &SimConfig,
    reg: &RegressionConfig,
) -> Result<CheckReport> {
    if h_list.len() < 2 {
        return Err(Error::Refused("need at least two perturbation sizes".into()));
    }
    let bundle = simulate(problem, &Policy::Constant { index: 0 }, x0, sim)?;
    let base = solve_bsde(
        problem,
        &bundle,
        Terminal::Expr(&problem.g),
        &Driver::Problem,
        reg,
        &StopRule::Exit,
    )?;
    let mut rows = Vec::new();
    let mut gaps_sq = Vec::new();
    let mut noisy = false;
    for &h in h_list {
        let (driver_expr, terminal_expr): (Expr, Expr) = match target {
            PerturbationTarget::Driver => {
                (Expr::add(problem.f.clone(), Expr::Const(h)), problem.g.clone())
            }
            PerturbationTarget::Terminal => {
                (problem.f.clone(), Expr::add(problem.g.clone(), Expr::Const(h)))
            }
        };
        let perturbed = solve_bsde(
            problem,
            &bundle,
            Terminal::Expr(&terminal_expr),
            &Driver::Expr(&driver_expr),
            reg,
            &StopRule::Exit,
        )?;
        // Shared bundle: per-path differences give the gap and its noise.
        let diffs: Vec<f64> = perturbed
            .y0_per_path
            .iter()
            .zip(&base.y0_per_path)
            .map(|(a, b)| a - b)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (diffs.len().max(2) - 1) as f64;
        let stderr = (var / diffs.len() as f64).sqrt();
        if stderr > 0.3 * mean.abs().max(1e-300) {
            noisy = true;
        }
        rows.push(serde_json::json!({
            "h": h, "delta_y0": mean, "stderr": stderr, "delta_y0_sq": mean * mean,
        }));
        gaps_sq.push((h, mean * mean));
    }

    let mut sorted = gaps_sq.clone();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let monotone = sorted.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-30);
    let fit_pts: Vec<(f64, f64)> = sorted
        .iter()
        .filter(|(_, g)| *g > 0.0)
        .map(|(h, g)| (h.ln(), g.ln()))
        .collect();
    if fit_pts.len() < 2 {
        return Ok(CheckReport {
            name: "stability-trend".into(),
            status: CheckStatus::Pass,
            measured: serde_json::json!({ "degenerate": true, "table": rows }),
            tolerance: 1.8,
            sample_sizes: vec![sim.n_paths],
            seeds: vec![sim.master_seed],
            narrative: "all perturbation gaps vanish exactly".into(),
        });
    }
    let (slope, _) = linear_fit(&fit_pts);
    let pass = monotone && slope >= 1.8 && !noisy;
    let narrative = if noisy {
        "Monte Carlo noise dominates the smallest gap (stderr > 30%)".to_string()
    } else {
        format!("squared-gap slope {slope:.3} (threshold 1.8), monotone = {monotone}")
    };
    Ok(CheckReport {
        name: "stability-trend".into(),
        status: if pass {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail {
                margin: (1.8 - slope).max(0.0),
            }
        },
        measured: serde_json::json!({ "slope": slope, "monotone": monotone,
                                      "noisy": noisy, "table": rows }),
        tolerance: 1.8,
        sample_sizes: vec![sim.n_paths],
        seeds: vec![sim.master_seed],
        narrative,
    })
}

// ---------------------------------------------------------------------------
// Supermartingale barrier check
// ---------------------------------------------------------------------------

/// Searches the barrier sharpness k (by doubling) for a positive drift
/// margin `-L w - (theta/2) w >= mu0 > 0` over sampled (x, boundary point,
/// control) triples, then checks the supermartingale decrease of
/// `mu0 * int_0^{t /\ tau} e^{theta r / 2} dr + w(X_{t /\ tau}) e^{theta (t /\ tau)/2}`
/// on stratified conditioning bins. With theta = 0 this is the exit-time
/// bound `E[tau] <= w(x0) / mu0`, which is checked directly.
#[allow(clippy::too_many_arguments)]
pub fn check_supermartingale(
    problem: &ControlProblem,
    x0: &[f64],
    theta: f64,
    time_pairs: &[(f64, f64)],
    sim: &SimConfig,
    probe: &ProbeConfig,
    bias_coeff: f64,
    k_max: f64,
) -> Result<CheckReport> {
    if theta > 0.0 {
        return Err(Error::Refused(
            "supermartingale check requires theta <= 0".into(),
        ));
    }
    let rho = problem.rho();

    // Margin search over doubling k.
    let n_x = 256usize.min(probe.sample_count);
    let n_y = 32usize;
    let mut found: Option<(f64, f64)> = None;
    let mut k = 1.0f64;
    while k <= k_max {
        let mut margin = f64::INFINITY;
        'outer: for i in 0..n_x as u64 {
            let x = problem.domain.sample_closure(probe.seed, 0xba11, i);
            for j in 0..n_y as u64 {
                // Boundary points: the minimizer for x plus uniform samples.
                let y = if j == 0 {
                    problem.domain.closest_boundary_point(&x)
                } else {
                    problem.domain.sample_boundary(probe.seed, 0xba12, i * 64 + j)
                };
                let normal = problem.domain.outward_normal(&y);
                let y_ext: Vec<f64> =
                    y.iter().zip(&normal).map(|(a, n)| a + rho * n).collect();
                let r2: f64 = x
                    .iter()
                    .zip(&y_ext)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let w = (-k * rho * rho).exp() - (-k * r2).exp();
                for v in &problem.controls.points {
                    let lw = barrier_generator(problem, &x, &y_ext, k, v);
                    let m = -lw - 0.5 * theta * w;
                    if m < margin {
                        margin = m;
                    }
                    if margin <= 0.0 {
                        break 'outer;
                    }
                }
            }
        }
        if margin > 0.0 {
            found = Some((k, margin));
            break;
        }
        k *= 2.0;
    }
    let (k, mu0) = match found {
        Some(pair) => pair,
        None => {
            return Ok(CheckReport {
                name: "supermartingale".into(),
                status: CheckStatus::Skipped {
                    reason: format!(
                        "no k <= {k_max} achieves a positive barrier margin \
                         (lambda too small or domain too large)"
                    ),
                },
                measured: serde_json::json!({ "k_max": k_max }),
                tolerance: 0.0,
                sample_sizes: vec![n_x * n_y],
                seeds: vec![probe.seed],
                narrative: "barrier margin search failed".into(),
            })
        }
    };

    // Simulated conditional-decrease test.
    let bundle = simulate(problem, &Policy::Constant { index: 0 }, x0, sim)?;
    let n_paths = bundle.n_paths();
    let exp_integral = |u: f64| -> f64 {
        if theta == 0.0 {
            u
        } else {
            (2.0 / theta) * ((0.5 * theta * u).exp() - 1.0)
        }
    };
    let m_at = |p: usize, t: f64| -> f64 {
        let u = bundle.tau(p).min(t);
        let step = ((u / bundle.dt).floor() as usize).min(bundle.last_step(p));
        let x = bundle.state(p, step);
        let (w, _, _) = barrier_value(&problem.domain, x, k).unwrap_or((0.0, vec![], vec![]));
        mu0 * exp_integral(u) + w * (0.5 * theta * u).exp()
    };
    let w_at_start = |p: usize, s: f64| -> f64 {
        let u = bundle.tau(p).min(s);
        let step = ((u / bundle.dt).floor() as usize).min(bundle.last_step(p));
        barrier_value(&problem.domain, bundle.state(p, step), k)
            .map(|(w, _, _)| w)
            .unwrap_or(0.0)
    };

    let n_bins = 8usize;
    let slack = bias_coeff * sim.dt.sqrt() * 0.5;
    let mut worst = f64::NEG_INFINITY;
    let mut rows = Vec::new();
    for &(s, t) in time_pairs {
        if !(0.0 <= s && s < t) {
            return Err(Error::Config(format!("bad time pair ({s}, {t})")));
        }
        // Quantile bins on the conditioning statistic w(X_{s /\ tau}).
        let mut order: Vec<usize> = (0..n_paths).collect();
        order.sort_by(|&a, &b| {
            w_at_start(a, s)
                .partial_cmp(&w_at_start(b, s))
                .unwrap()
                .then(a.cmp(&b))
        });
        for bin in 0..n_bins {
            let lo = bin * n_paths / n_bins;
            let hi = ((bin + 1) * n_paths / n_bins).min(n_paths);
            if hi <= lo + 1 {
                continue;
            }
            let diffs: Vec<f64> = order[lo..hi]
                .iter()
                .map(|&p| m_at(p, t) - m_at(p, s))
                .collect();
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
                / (diffs.len() - 1) as f64;
            let stderr = (var / diffs.len() as f64).sqrt();
            let excess = mean - (3.0 * stderr + slack);
            worst = worst.max(excess);
            rows.push(serde_json::json!({
                "s": s, "t": t, "bin": bin, "mean_increment": mean, "stderr": stderr,
            }));
        }
    }

    // theta = 0: the direct exit-time bound E[tau] <= w(x0)/mu0.
    let mut exit_bound = serde_json::Value::Null;
    let mut exit_bound_ok = true;
    if theta == 0.0 {
        let taus: Vec<f64> = (0..n_paths).map(|p| bundle.tau(p)).collect();
        let mean = taus.iter().sum::<f64>() / n_paths as f64;
        let var = taus.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
            / (n_paths - 1) as f64;
        let stderr = (var / n_paths as f64).sqrt();
        let (w0, _, _) = barrier_value(&problem.domain, x0, k)?;
        exit_bound_ok = mean <= w0 / mu0 + 3.0 * stderr;
        exit_bound = serde_json::json!({
            "mean_tau": mean, "stderr": stderr, "bound": w0 / mu0,
        });
    }

    let pass = worst <= 0.0 && exit_bound_ok;
    Ok(CheckReport {
        name: "supermartingale".into(),
        status: if pass {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail { margin: worst.max(0.0) }
        },
        measured: serde_json::json!({
            "k": k, "mu0": mu0, "theta": theta, "worst_excess": worst,
            "bins": rows, "exit_time_bound": exit_bound,
        }),
        tolerance: slack,
        sample_sizes: vec![n_paths, n_x * n_y],
        seeds: vec![sim.master_seed, probe.seed],
        narrative: format!(
            "barrier k = {k}, margin mu0 = {mu0:.4}; worst conditional excess {worst:.5}"
        ),
    })
}

// ---------------------------------------------------------------------------
// Small-horizon expansion chain
// ---------------------------------------------------------------------------

/// Shifted driver value `F(x, y, z, v) = L phi + f(x, y + phi, z + grad
/// phi sigma, v)`.
fn eval_f_shifted(
    problem: &ControlProblem,
    tf: &TestFunction,
    x: &[f64],
    y: f64,
    z: &[f64],
    v: &[f64],
) -> f64 {
    let m = problem.dim_w;
    let d = problem.dim_x;
    let mut grad = vec![0.0; d];
    let mut sigma = vec![0.0; d * m];
    tf.gradient(x, &mut grad);
    problem.eval_sigma(x, v, &mut sigma);
    let mut z_arg = vec![0.0; m];
    for j in 0..m {
        z_arg[j] = z[j] + (0..d).map(|i| grad[i] * sigma[i * m + j]).sum::<f64>();
    }
    tf.generator(problem, x, v) + problem.eval_driver(x, y + tf.value(x), &z_arg, v)
}

/// Sampled Lipschitz constant of F in (x, y, z), uniform over V_h.
fn estimate_f_lipschitz(
    problem: &ControlProblem,
    tf: &TestFunction,
    probe: &ProbeConfig,
) -> f64 {
    let m = problem.dim_w;
    let mut sup = 0.0f64;
    for i in 0..probe.sample_count as u64 {
        let x1 = problem.domain.sample_closure(probe.seed, 0xf1b1, i);
        let x2 = problem.domain.sample_closure(probe.seed, 0xf1b2, i);
        let y1 = probe.y_box * (2.0 * rng::uniform(probe.seed, 0xf1b3, i, 0) - 1.0);
        let y2 = probe.y_box * (2.0 * rng::uniform(probe.seed, 0xf1b3, i, 1) - 1.0);
        let z1: Vec<f64> = (0..m)
            .map(|j| probe.z_box * (2.0 * rng::uniform(probe.seed, 0xf1b4, i, j as u64) - 1.0))
            .collect();
        let z2: Vec<f64> = (0..m)
            .map(|j| {
                probe.z_box * (2.0 * rng::uniform(probe.seed, 0xf1b4, i, (m + j) as u64) - 1.0)
            })
            .collect();
        let dx: f64 = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dz: f64 = z1
            .iter()
            .zip(&z2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let denom = dx + (y1 - y2).abs() + dz;
        if denom < probe.min_separation {
            continue;
        }
        for v in &problem.controls.points {
            let df = (eval_f_shifted(problem, tf, &x1, y1, &z1, v)
                - eval_f_shifted(problem, tf, &x2, y2, &z2, v))
                .abs();
            sup = sup.max(df / denom);
        }
    }
    sup
}

/// Closed-form solution at time zero of the envelope ODE
/// `-dY = (f0 - l0 |Y|) ds, Y(eps) = 0`.
pub fn envelope_ode_closed_form(f0: f64, l0: f64, eps: f64) -> f64 {
    if l0.abs() < 1e-14 {
        return f0 * eps;
    }
    if f0 >= 0.0 {
        (f0 / l0) * (1.0 - (-l0 * eps).exp())
    } else {
        (f0 / l0) * ((l0 * eps).exp() - 1.0)
    }
}

/// Fourth-order Runge-Kutta integration of the same ODE, as the
/// independent route (the solution keeps one sign, so |Y| is smooth along
/// the trajectory and RK4 retains full order).
pub fn envelope_ode_rk4(f0: f64, l0: f64, eps: f64, steps: usize) -> f64 {
    // Integrate forward in tau = eps - s from Y(0) = 0.
    let h = eps / steps as f64;
    let rhs = |y: f64| f0 - l0 * y.abs();
    let mut y = 0.0;
    for _ in 0..steps {
        let k1 = rhs(y);
        let k2 = rhs(y + 0.5 * h * k1);
        let k3 = rhs(y + 0.5 * h * k2);
        let k4 = rhs(y + h * k3);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    y
}

/// Runs the small-horizon expansion chain at one interior test point: the
/// four auxiliary solutions per epsilon, the semigroup identity for Y1, the
/// ordering Y3 <= Y2, the two-route agreement for Y4, and the epsilon^{3/2}
/// scaling fits for |Y1 - Y2| and |Y3 - Y4|.
#[allow(clippy::too_many_arguments)]
pub fn check_expansion_chain(
    problem: &ControlProblem,
    x: &[f64],
    phi: &TestFunction,
    epsilon_ladder: &[f64],
    chain_dt: f64,
    chain_paths: usize,
    master_seed: u64,
    reg: &RegressionConfig,
    probe: &ProbeConfig,
) -> Result<(CheckReport, Vec<ViscosityTestBundle>)> {
    let boundary_distance = problem.domain.boundary_distance(x);
    if boundary_distance <= 0.0 {
        return Err(Error::Refused(
            "chain check requires an interior test point (the envelope \
             expansion fails on the boundary)"
                .into(),
        ));
    }
    if epsilon_ladder.iter().any(|&e| !(0.0 < e && e <= 1.0)) {
        return Err(Error::Config("epsilon ladder must lie in (0, 1]".into()));
    }

    let l0 = estimate_f_lipschitz(problem, phi, probe);
    let f0 = problem
        .controls
        .points
        .iter()
        .map(|v| eval_f_shifted(problem, phi, x, 0.0, &vec![0.0; problem.dim_w], v))
        .fold(f64::INFINITY, f64::min);

    let mut bundles = Vec::new();
    let mut y4_agreement = 0.0f64;
    let mut identity_worst = 0.0f64;
    let mut ordering_ok = true;

    for (ei, &eps) in epsilon_ladder.iter().enumerate() {
        let sim = SimConfig {
            dt: chain_dt,
            t_max: eps,
            n_paths: chain_paths,
            master_seed: master_seed ^ (0x5ec5 + ei as u64),
            exit_correction: crate::paths::ExitMode::BridgeCorrected,
        };
        let bundle = simulate(problem, &Policy::Constant { index: 0 }, x, &sim)?;

        let y1 = solve_bsde(
            problem,
            &bundle,
            Terminal::Zero,
            &Driver::TestShifted {
                test_fn: phi,
                frozen_x: None,
            },
            reg,
            &StopRule::Exit,
        )?;
        let y2 = solve_bsde(
            problem,
            &bundle,
            Terminal::Zero,
            &Driver::TestShifted {
                test_fn: phi,
                frozen_x: Some(x),
            },
            reg,
            &StopRule::Exit,
        )?;
        let y3 = solve_bsde(
            problem,
            &bundle,
            Terminal::Zero,
            &Driver::MonotoneEnvelope { f0, l0 },
            reg,
            &StopRule::Exit,
        )?;
        let y4_closed = envelope_ode_closed_form(f0, l0, eps);
        let y4_ode = envelope_ode_rk4(f0, l0, eps, 4000);
        y4_agreement = y4_agreement.max((y4_closed - y4_ode).abs());

        // Semigroup identity: Y1_0 = G[phi(X_stop)] - phi(x).
        let eta: Vec<f64> = (0..bundle.n_paths())
            .map(|p| phi.value(bundle.state(p, bundle.last_step(p))))
            .collect();
        let sg = backward_semigroup(problem, &bundle, &StopRule::Exit, &eta, reg)?;
        let identity_diffs: Vec<f64> = y1
            .y0_per_path
            .iter()
            .zip(&sg.y0_per_path)
            .map(|(a, b)| a - (b - phi.value(x)))
            .collect();
        let id_mean = identity_diffs.iter().sum::<f64>() / identity_diffs.len() as f64;
        let id_var = identity_diffs
            .iter()
            .map(|d| (d - id_mean) * (d - id_mean))
            .sum::<f64>()
            / (identity_diffs.len() - 1) as f64;
        let id_stderr = (id_var / identity_diffs.len() as f64).sqrt();
        let id_tol = 3.0 * id_stderr + 2.0 * chain_dt * (1.0 + l0) * (1.0 + eps);
        identity_worst = identity_worst.max(id_mean.abs() - id_tol);

        // Ordering Y3 <= Y2 (comparison of the envelope driver).
        let order_diffs: Vec<f64> = y3
            .y0_per_path
            .iter()
            .zip(&y2.y0_per_path)
            .map(|(a, b)| a - b)
            .collect();
        let om = order_diffs.iter().sum::<f64>() / order_diffs.len() as f64;
        let ov = order_diffs.iter().map(|d| (d - om) * (d - om)).sum::<f64>()
            / (order_diffs.len() - 1) as f64;
        let os = (ov / order_diffs.len() as f64).sqrt();
        if om > 3.0 * os + 2.0 * chain_dt * (1.0 + l0) {
            ordering_ok = false;
        }

        let gap_diffs: Vec<f64> = y1
            .y0_per_path
            .iter()
            .zip(&y2.y0_per_path)
            .map(|(a, b)| a - b)
            .collect();
        let gm = gap_diffs.iter().sum::<f64>() / gap_diffs.len() as f64;
        let gv = gap_diffs.iter().map(|d| (d - gm) * (d - gm)).sum::<f64>()
            / (gap_diffs.len() - 1) as f64;
        let gs = (gv / gap_diffs.len() as f64).sqrt();

        bundles.push(ViscosityTestBundle {
            epsilon: eps,
            phi: phi.phi.clone(),
            x: x.to_vec(),
            f0,
            l0,
            y1_0: y1.y0,
            y1_stderr: y1.y0_stderr,
            y2_0: y2.y0,
            y2_stderr: y2.y0_stderr,
            y3_0: y3.y0,
            y3_stderr: y3.y0_stderr,
            y4_0: y4_closed,
            y4_ode,
            gap12: gm.abs(),
            gap12_stderr: gs,
            gap34: (y3.y0 - y4_closed).abs(),
        });
    }

    // Scaling fits; drop epsilons whose gap is buried in noise. When every
    // gap of a route vanishes (zero driver and terminal) the scaling claim
    // is vacuous and the fit passes degenerately.
    let mut dropped = Vec::new();
    let fit12: Vec<(f64, f64)> = bundles
        .iter()
        .filter(|b| {
            let ok = b.gap12 > b.gap12_stderr && b.gap12 > 0.0;
            if !ok {
                dropped.push(("gap12", b.epsilon));
            }
            ok
        })
        .map(|b| (b.epsilon.ln(), b.gap12.ln()))
        .collect();
    let fit34: Vec<(f64, f64)> = bundles
        .iter()
        .filter(|b| {
            let ok = b.gap34 > b.y3_stderr && b.gap34 > 0.0;
            if !ok {
                dropped.push(("gap34", b.epsilon));
            }
            ok
        })
        .map(|b| (b.epsilon.ln(), b.gap34.ln()))
        .collect();
    let degenerate12 = bundles
        .iter()
        .all(|b| b.gap12 <= b.gap12_stderr.max(1e-12));
    let degenerate34 = bundles
        .iter()
        .all(|b| b.gap34 <= b.y3_stderr.max(1e-12));

    let slope12 = if fit12.len() >= 2 {
        Some(linear_fit(&fit12).0)
    } else {
        None
    };
    let slope34 = if fit34.len() >= 2 {
        Some(linear_fit(&fit34).0)
    } else {
        None
    };

    let y4_ok = y4_agreement <= 1e-10;
    let id_ok = identity_worst <= 0.0;
    let slope12_ok = degenerate12 || slope12.map(|s| s >= 1.4).unwrap_or(false);
    let slope34_ok = degenerate34 || slope34.map(|s| s >= 1.4).unwrap_or(false);
    let pass = y4_ok && id_ok && ordering_ok && slope12_ok && slope34_ok;

    let report = CheckReport {
        name: "expansion-chain".into(),
        status: if pass {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail {
                margin: identity_worst
                    .max(y4_agreement - 1e-10)
                    .max(
                        1.4 - slope12.unwrap_or(f64::NEG_INFINITY)
                            .min(slope34.unwrap_or(f64::NEG_INFINITY)),
                    ),
            }
        },
        measured: serde_json::json!({
            "f0": f0, "l0": l0,
            "slope12": slope12, "slope34": slope34,
            "degenerate12": degenerate12, "degenerate34": degenerate34,
            "y4_two_route_agreement": y4_agreement,
            "identity_worst_excess": identity_worst,
            "ordering_y3_le_y2": ordering_ok,
            "dropped_epsilons": dropped.iter().map(|(which, e)| {
                serde_json::json!({ "fit": which, "epsilon": e })
            }).collect::<Vec<_>>(),
            "per_epsilon": bundles,
        }),
        tolerance: 1.4,
        sample_sizes: vec![chain_paths],
        seeds: vec![master_seed, probe.seed],
        narrative: format!(
            "slopes: |Y1-Y2| {:?}, |Y3-Y4| {:?} (threshold 1.4); \
             Y4 two-route agreement {y4_agreement:.2e}",
            slope12, slope34
        ),
    };
    Ok((report, bundles))
}

// ---------------------------------------------------------------------------
// Cross validation
// ---------------------------------------------------------------------------

/// Compares the probabilistic value estimate against the FD field at probe
/// points: the computable content of existence plus uniqueness is that the
/// two independent solvers agree.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    problem: &ControlProblem,
    probes: &[Vec<f64>],
    field: &ValueField,
    sim: &SimConfig,
    reg: &RegressionConfig,
    bias_coeff: f64,
) -> Result<CheckReport> {
    let grid_h = field
        .axes
        .iter()
        .map(|a| a[1] - a[0])
        .fold(0.0f64, f64::max);
    let candidates = default_candidates(problem, Some(extract_policy(field)));
    let mut rows = Vec::new();
    let mut worst_gap = 0.0f64;
    let mut worst_excess = f64::NEG_INFINITY;
    for x0 in probes {
        let on_boundary = problem.domain.boundary_distance(x0) <= 1e-12;
        let u_fd = field.interp(x0);
        if on_boundary {
            // Dirichlet side is exact; the MC side has tau = 0 so J = g(x0).
            let g0 = problem.eval_terminal(&problem.domain.closest_boundary_point(x0));
            let mc = cost(problem, &candidates[0].1, x0, sim, reg)?;
            let fd_gap = (u_fd - g0).abs();
            let mc_gap = (mc.value - g0).abs();
            worst_excess = worst_excess.max(fd_gap - 1e-9).max(mc_gap - 1e-12);
            rows.push(serde_json::json!({
                "x": x0, "boundary": true, "u_fd": u_fd, "g": g0, "u_mc": mc.value,
            }));
            continue;
        }
        let mc = estimate_value(problem, x0, &candidates, sim, reg)?;
        let gap = (mc.value - u_fd).abs();
        let tol = 3.0 * mc.stderr + bias_coeff * (grid_h + sim.dt.sqrt());
        worst_gap = worst_gap.max(gap);
        worst_excess = worst_excess.max(gap - tol);
        rows.push(serde_json::json!({
            "x": x0, "boundary": false, "u_fd": u_fd, "u_mc": mc.value,
            "stderr": mc.stderr, "gap": gap, "tolerance": tol,
        }));
    }
    let pass = worst_excess <= 0.0;
    let annotation = match &problem.constants.theta_infeasible {
        Some(reason) => format!(
            "; note: theta interval infeasible ({reason}), the regularity \
             hypotheses backing the uniqueness route are unverified"
        ),
        None => String::new(),
    };
    Ok(CheckReport {
        name: "cross-validate".into(),
        status: if pass {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail {
                margin: worst_excess,
            }
        },
        measured: serde_json::json!({ "max_gap": worst_gap, "probes": rows }),
        tolerance: bias_coeff * (grid_h + sim.dt.sqrt()),
        sample_sizes: vec![sim.n_paths],
        seeds: vec![sim.master_seed],
        narrative: format!("max interior |u_MC - u_FD| = {worst_gap:.5}{annotation}"),
    })
}

// ---------------------------------------------------------------------------
// Exit moments (H4')
// ---------------------------------------------------------------------------

/// Checks the exponential exit-time moment against a supplied oracle value
/// (when given) and flags non-convergence through the truncation trend.
pub fn check_exit_moment(
    problem: &ControlProblem,
    x0: &[f64],
    mu: f64,
    oracle: Option<f64>,
    sim: &SimConfig,
) -> Result<CheckReport> {
    let bundle = simulate(problem, &Policy::Constant { index: 0 }, x0, sim)?;
    let caps = [sim.t_max / 4.0, sim.t_max / 2.0, sim.t_max];
    let trend = exit_moment_trend(&bundle, mu, &caps);
    let converged = moment_converged(&trend);
    let est = trend.last().copied().unwrap();
    let (pass, tol, narrative) = match oracle {
        Some(want) if converged => {
            let tol = 3.0 * est.stderr + 0.01 * want.abs();
            let gap = (est.mean - want).abs();
            (
                gap <= tol,
                tol,
                format!("E[exp({mu} tau)] = {:.5} vs oracle {want:.5}", est.mean),
            )
        }
        Some(want) => (
            false,
            0.0,
            format!("estimate non-convergent; oracle {want} unusable"),
        ),
        None => (
            !converged,
            0.0,
            format!(
                "no oracle: expect non-convergence past the blow-up threshold; flagged = {}",
                !converged
            ),
        ),
    };
    Ok(CheckReport {
        name: format!("exit-moment[mu={mu}]"),
        status: if pass {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail {
                margin: oracle.map(|w| (est.mean - w).abs()).unwrap_or(1.0),
            }
        },
        measured: serde_json::json!({
            "estimate": est.mean, "stderr": est.stderr,
            "censored_fraction": est.censored_fraction,
            "converged": converged,
            "trend": caps.iter().zip(&trend).map(|(c, e)| serde_json::json!({
                "cap": c, "mean": e.mean })).collect::<Vec<_>>(),
        }),
        tolerance: tol,
        sample_sizes: vec![sim.n_paths],
        seeds: vec![sim.master_seed],
        narrative,
    })
}

pub use crate::paths::exit_moment;

// ---------------------------------------------------------------------------
// Suite orchestration
// ---------------------------------------------------------------------------

/// Configuration of the full check suite; every field has a desk-scale
/// default so a config document only needs to override what it cares about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub bias_coeff: f64,
    pub epsilon_ladder: Vec<f64>,
    pub chain_dt: f64,
    pub chain_paths: usize,
    /// Interior test point of the chain check; defaults to a point partway
    /// from the center toward the boundary.
    pub chain_x: Option<Vec<f64>>,
    /// Polynomial test function; defaults to the cubic sum_i x_i^3.
    pub phi: Option<Expr>,
    pub dpp_theta_time: f64,
    pub dpp_subdomain_scale: f64,
    pub comparison_driver_shift: f64,
    pub comparison_terminal_shift: f64,
    pub stability_h: Vec<f64>,
    pub supermartingale_theta: f64,
    pub supermartingale_time_pairs: Vec<(f64, f64)>,
    pub supermartingale_k_max: f64,
    pub holder_pairs_per_separation: usize,
    /// Cross-validation probe points; defaults to interior points along the
    /// first axis plus the two axis-aligned boundary points.
    pub probes: Option<Vec<Vec<f64>>>,
    /// Exponents (with optional oracle values) for the exit-moment check.
    pub exit_moments: Vec<ExitMomentSpec>,
    /// Forced-failure fixture; `"comparison-sign-flip"` makes the
    /// comparison check fail deliberately (exit-code contract self-test).
    pub inject_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitMomentSpec {
    pub mu: f64,
    #[serde(default)]
    pub oracle: Option<f64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            bias_coeff: 1.0,
            epsilon_ladder: vec![0.2, 0.1, 0.05, 0.025],
            chain_dt: 2.5e-4,
            chain_paths: 30_000,
            chain_x: None,
            phi: None,
            dpp_theta_time: 0.1,
            dpp_subdomain_scale: 0.5,
            comparison_driver_shift: 0.5,
            comparison_terminal_shift: 0.0,
            stability_h: vec![0.4, 0.2, 0.1, 0.05],
            supermartingale_theta: -1.0,
            supermartingale_time_pairs: vec![(0.05, 0.1), (0.1, 0.2), (0.2, 0.4)],
            supermartingale_k_max: (1u64 << 20) as f64,
            holder_pairs_per_separation: 48,
            probes: None,
            exit_moments: vec![],
            inject_failure: None,
        }
    }
}

pub const SUITE_NAMES: &[&str] = &[
    "dpp",
    "holder",
    "comparison",
    "stability",
    "supermartingale",
    "expansion-chain",
    "xval",
    "exit-moments",
];

fn default_phi(dim: usize) -> Expr {
    let terms: Vec<Expr> = (0..dim)
        .map(|i| Expr::Powi(Box::new(Expr::X(i)), 3))
        .collect();
    if terms.len() == 1 {
        terms.into_iter().next().unwrap()
    } else {
        Expr::Add(terms)
    }
}

fn default_chain_x(problem: &ControlProblem) -> Vec<f64> {
    // Partway from the center toward the boundary along the first axis.
    let mut x = problem.domain.center();
    let (lo, hi) = problem.domain.bounding_box();
    x[0] += 0.3 * (hi[0] - lo[0]) / 2.0;
    x
}

fn default_probes(problem: &ControlProblem) -> Vec<Vec<f64>> {
    let center = problem.domain.center();
    let (lo, hi) = problem.domain.bounding_box();
    let half = (hi[0] - lo[0]) / 2.0;
    let mut probes: Vec<Vec<f64>> = [-0.6, -0.3, 0.0, 0.3, 0.6]
        .iter()
        .map(|t| {
            let mut x = center.clone();
            x[0] += t * half;
            x
        })
        .collect();
    for t in [-1.0, 1.0] {
        let mut x = center.clone();
        x[0] += t * half;
        probes.push(x);
    }
    probes
}

/// Runs the named checks (or all of them) against one problem, sharing a
/// single FD solve. Checks own disjoint seeds derived from the master seed;
/// reports come back in the fixed registry order above.
#[allow(clippy::too_many_arguments)]
pub fn run_suite(
    problem: &ControlProblem,
    which: &[String],
    x0: &[f64],
    sim: &SimConfig,
    reg: &RegressionConfig,
    grid: &GridConfig,
    probe: &ProbeConfig,
    suite: &SuiteConfig,
) -> Result<Vec<CheckReport>> {
    let all = which.iter().any(|w| w == "all");
    let selected = |name: &str| all || which.iter().any(|w| w == name);
    for w in which {
        if w != "all" && !SUITE_NAMES.contains(&w.as_str()) {
            return Err(Error::Config(format!(
                "unknown suite `{w}`; known: all, {}",
                SUITE_NAMES.join(", ")
            )));
        }
    }

    // Derive the working constants (gamma, delta, theta or its
    // infeasibility flag) so downstream checks can annotate themselves.
    let mut problem = problem.clone();
    if let Ok(constants) = crate::problem::derive_constants(&problem, probe) {
        problem.constants = constants;
    }
    let problem = &problem;

    let field = solve_hjb(problem, grid)?;
    let mut reports = Vec::new();

    if selected("dpp") {
        let thetas = [
            DppTheta::Zero,
            DppTheta::FixedTime {
                t: suite.dpp_theta_time,
            },
            DppTheta::SubDomain {
                scale: suite.dpp_subdomain_scale,
            },
        ];
        for theta in &thetas {
            reports.push(check_dpp(
                problem,
                x0,
                theta,
                &field,
                sim,
                reg,
                suite.bias_coeff,
            )?);
        }
    }

    if selected("holder") {
        let (lo, hi) = problem.domain.bounding_box();
        let base = 0.25 * (hi[0] - lo[0]);
        let separations: Vec<f64> = (0..8).map(|k| base / 2f64.powi(k)).collect();
        reports.push(check_holder(
            problem,
            &field,
            sim.master_seed ^ 0x601d,
            &separations,
            suite.holder_pairs_per_separation,
        )?);
    }

    if selected("comparison") {
        let driver2 = Expr::add(
            problem.f.clone(),
            Expr::Const(suite.comparison_driver_shift),
        );
        let terminal2 = Expr::add(
            problem.g.clone(),
            Expr::Const(suite.comparison_terminal_shift),
        );
        let flip = suite.inject_failure.as_deref() == Some("comparison-sign-flip");
        reports.push(check_comparison(
            problem, &driver2, &terminal2, x0, sim, reg, probe, flip,
        )?);
    }

    if selected("stability") {
        reports.push(check_stability_trend(
            problem,
            x0,
            PerturbationTarget::Driver,
            &suite.stability_h,
            sim,
            reg,
        )?);
    }

    if selected("supermartingale") {
        reports.push(check_supermartingale(
            problem,
            x0,
            suite.supermartingale_theta,
            &suite.supermartingale_time_pairs,
            sim,
            probe,
            suite.bias_coeff,
            suite.supermartingale_k_max,
        )?);
    }

    if selected("expansion-chain") {
        let phi_expr = suite
            .phi
            .clone()
            .unwrap_or_else(|| default_phi(problem.dim_x));
        let phi = TestFunction::new(phi_expr, problem.dim_x)?;
        let chain_x = suite
            .chain_x
            .clone()
            .unwrap_or_else(|| default_chain_x(problem));
        let (report, _) = check_expansion_chain(
            problem,
            &chain_x,
            &phi,
            &suite.epsilon_ladder,
            suite.chain_dt,
            suite.chain_paths,
            sim.master_seed ^ 0x5ec5,
            reg,
            probe,
        )?;
        reports.push(report);
    }

    if selected("xval") {
        let probes = suite
            .probes
            .clone()
            .unwrap_or_else(|| default_probes(problem));
        reports.push(cross_validate(
            problem,
            &probes,
            &field,
            sim,
            reg,
            suite.bias_coeff,
        )?);
    }

    if selected("exit-moments") {
        for spec in &suite.exit_moments {
            reports.push(check_exit_moment(problem, x0, spec.mu, spec.oracle, sim)?);
        }
    }

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::ExitMode;
    use crate::problem::catalog_problem;

    fn poisson() -> ControlProblem {
        catalog_problem("poisson1d", &serde_json::Map::new()).unwrap()
    }

    fn sim(n: usize, seed: u64) -> SimConfig {
        SimConfig {
            dt: 1e-3,
            t_max: 10.0,
            n_paths: n,
            master_seed: seed,
            exit_correction: ExitMode::BridgeCorrected,
        }
    }

    #[test]
    fn dpp_theta_zero_is_an_identity() {
        let p = poisson();
        let field = solve_hjb(&p, &GridConfig::uniform(101, 1)).unwrap();
        let report = check_dpp(
            &p,
            &[0.0],
            &DppTheta::Zero,
            &field,
            &sim(500, 21),
            &RegressionConfig::default(),
            1.0,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.tolerance, 0.0);
    }

    #[test]
    fn holder_exponent_near_one_on_the_parabola() {
        let p = poisson();
        let field = solve_hjb(&p, &GridConfig::uniform(201, 1)).unwrap();
        let separations: Vec<f64> = (0..8).map(|k| 0.5 / 2f64.powi(k)).collect();
        let report = check_holder(&p, &field, 33, &separations, 48).unwrap();
        assert!(report.passed(), "{report:?}");
        let h = report.measured["exponent"].as_f64().unwrap();
        assert!((0.85..1.25).contains(&h), "h = {h}");
    }

    #[test]
    fn holder_requires_two_decades() {
        let p = poisson();
        let field = solve_hjb(&p, &GridConfig::uniform(51, 1)).unwrap();
        let narrow = [0.5, 0.25];
        assert!(matches!(
            check_holder(&p, &field, 1, &narrow, 8),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn holder_constant_field_degenerates_gracefully() {
        let mut p = poisson();
        p.f = Expr::Const(0.0);
        p.g = Expr::Const(0.4);
        let field = solve_hjb(&p, &GridConfig::uniform(51, 1)).unwrap();
        let separations: Vec<f64> = (0..8).map(|k| 0.5 / 2f64.powi(k)).collect();
        let report = check_holder(&p, &field, 3, &separations, 16).unwrap();
        assert!(report.passed());
        assert_eq!(report.measured["degenerate_fit"], true);
    }

    #[test]
    fn comparison_exact_branch_passes_and_flip_fails() {
        let p = catalog_problem("semilinear1d", &serde_json::Map::new()).unwrap();
        let driver2 = Expr::add(p.f.clone(), Expr::Const(0.5));
        let report = check_comparison(
            &p,
            &driver2,
            &p.g.clone(),
            &[0.0],
            &sim(2_000, 41),
            &RegressionConfig::default(),
            &ProbeConfig::default(),
            false,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.measured["exact_branch"], true);
        assert_eq!(report.tolerance, 0.0);

        let flipped = check_comparison(
            &p,
            &driver2,
            &p.g.clone(),
            &[0.0],
            &sim(2_000, 41),
            &RegressionConfig::default(),
            &ProbeConfig::default(),
            true,
        )
        .unwrap();
        assert!(flipped.failed(), "{flipped:?}");
    }

    #[test]
    fn comparison_refuses_unordered_pairs() {
        let p = poisson();
        // f2 - f = x: changes sign on (-1, 1).
        let driver2 = Expr::add(p.f.clone(), Expr::X(0));
        let err = check_comparison(
            &p,
            &driver2,
            &p.g.clone(),
            &[0.0],
            &sim(100, 42),
            &RegressionConfig::default(),
            &ProbeConfig::default(),
            false,
        );
        assert!(matches!(err, Err(Error::Refused(_))));
    }

    #[test]
    fn stability_terminal_perturbation_is_exactly_linear() {
        // f = 0: a terminal shift of h moves Y0 by exactly h, so the
        // squared gap scales with slope exactly 2.
        let mut p = poisson();
        p.f = Expr::Const(0.0);
        let report = check_stability_trend(
            &p,
            &[0.0],
            PerturbationTarget::Terminal,
            &[0.4, 0.2, 0.1, 0.05],
            &sim(1_000, 43),
            &RegressionConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let slope = report.measured["slope"].as_f64().unwrap();
        assert!((slope - 2.0).abs() < 1e-6, "slope = {slope}");
    }

    #[test]
    fn envelope_ode_routes_agree() {
        // Spec'd example: l0 = 1, f0 = 1, eps = 0.1 -> 1 - e^{-0.1}.
        let closed = envelope_ode_closed_form(1.0, 1.0, 0.1);
        assert!((closed - (1.0 - (-0.1f64).exp())).abs() < 1e-15);
        for (f0, l0, eps) in [
            (1.0, 1.0, 0.1),
            (2.7, 0.3, 0.2),
            (-1.3, 2.0, 0.05),
            (0.4, 0.0, 0.2),
        ] {
            let a = envelope_ode_closed_form(f0, l0, eps);
            let b = envelope_ode_rk4(f0, l0, eps, 4000);
            assert!(
                (a - b).abs() <= 1e-10,
                "f0={f0}, l0={l0}, eps={eps}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn chain_with_zero_shifted_driver_passes_vacuously() {
        // phi of degree one has L phi = 0 for driftless dynamics, and with
        // f = 0 the shifted driver vanishes: all four solutions are zero at
        // every epsilon and the scaling fits are degenerate.
        let mut p = poisson();
        p.f = Expr::Const(0.0);
        let phi = TestFunction::new(Expr::X(0), 1).unwrap();
        let (report, bundles) = check_expansion_chain(
            &p,
            &[0.2],
            &phi,
            &[0.2, 0.1],
            1e-3,
            400,
            55,
            &RegressionConfig::default(),
            &ProbeConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.measured["degenerate12"], true);
        for b in &bundles {
            assert!(b.y1_0.abs() < 1e-12 && b.y2_0.abs() < 1e-12);
            assert!(b.y3_0.abs() < 1e-12 && b.y4_0.abs() < 1e-12);
        }
    }

    #[test]
    fn chain_check_refuses_boundary_points() {
        let p = poisson();
        let phi = TestFunction::new(Expr::Powi(Box::new(Expr::X(0)), 3), 1).unwrap();
        let err = check_expansion_chain(
            &p,
            &[1.0],
            &phi,
            &[0.1],
            1e-3,
            100,
            1,
            &RegressionConfig::default(),
            &ProbeConfig::default(),
        );
        assert!(matches!(err, Err(Error::Refused(_))));
    }

    #[test]
    fn supermartingale_poisson_bench() {
        let p = poisson();
        let report = check_supermartingale(
            &p,
            &[0.0],
            -1.0,
            &[(0.05, 0.1), (0.1, 0.2), (0.2, 0.4)],
            &sim(20_000, 44),
            &ProbeConfig::default(),
            1.0,
            1u64.wrapping_shl(20) as f64,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let k = report.measured["k"].as_f64().unwrap();
        assert!(k <= 8.0, "k should be O(1), got {k}");
        assert!(report.measured["mu0"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn supermartingale_theta_zero_exit_bound() {
        let p = poisson();
        let report = check_supermartingale(
            &p,
            &[0.0],
            0.0,
            &[(0.1, 0.3)],
            &sim(10_000, 45),
            &ProbeConfig::default(),
            1.0,
            1u64.wrapping_shl(20) as f64,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let bound = report.measured["exit_time_bound"]["bound"].as_f64().unwrap();
        let mean = report.measured["exit_time_bound"]["mean_tau"].as_f64().unwrap();
        assert!(mean <= bound, "E[tau] = {mean} must be <= {bound}");
    }

    #[test]
    fn dpp_skips_when_censoring_dominates() {
        let p = poisson();
        let field = solve_hjb(&p, &GridConfig::uniform(51, 1)).unwrap();
        // Horizon far too short: almost every path is censored.
        let short = SimConfig {
            dt: 1e-3,
            t_max: 0.05,
            n_paths: 500,
            master_seed: 47,
            exit_correction: ExitMode::BridgeCorrected,
        };
        let report = check_dpp(
            &p,
            &[0.0],
            &DppTheta::FixedTime { t: 0.02 },
            &field,
            &short,
            &RegressionConfig::default(),
            1.0,
        )
        .unwrap();
        assert!(
            matches!(report.status, CheckStatus::Skipped { .. }),
            "{report:?}"
        );
    }

    #[test]
    fn reports_are_reproducible_from_their_seeds() {
        let p = catalog_problem("semilinear1d", &serde_json::Map::new()).unwrap();
        let driver2 = Expr::add(p.f.clone(), Expr::Const(0.3));
        let run = || {
            check_comparison(
                &p,
                &driver2,
                &p.g.clone(),
                &[0.0],
                &sim(1_000, 48),
                &RegressionConfig::default(),
                &ProbeConfig::default(),
                false,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn boundary_start_supermartingale_is_trivial() {
        // x0 on the boundary: tau = 0, M_t = w(x0) = 0 identically.
        let p = poisson();
        let report = check_supermartingale(
            &p,
            &[1.0],
            -1.0,
            &[(0.05, 0.1)],
            &sim(500, 46),
            &ProbeConfig::default(),
            1.0,
            1u64.wrapping_shl(20) as f64,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
