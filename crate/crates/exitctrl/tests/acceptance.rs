//! Acceptance suite: every gate runs at its stated tolerance and prints one
//! pass/fail line (the test name doubles as the criterion id). Oracles are
//! closed forms or independent reduced-order solvers implemented here.

use exitctrl::bsde::{cost, default_candidates, estimate_value, TestFunction};
use exitctrl::expr::Expr;
use exitctrl::hjb::{solve_hjb, GridConfig};
use exitctrl::paths::{exit_moment, exit_moment_trend, moment_converged, simulate, ExitMode, Policy, SimConfig};
use exitctrl::problem::{catalog_problem, parse_problem_spec, ControlProblem, ProbeConfig};
use exitctrl::regression::RegressionConfig;
use exitctrl::rng;
use exitctrl::verify::{
    check_comparison, check_dpp, check_holder, check_expansion_chain, cross_validate, DppTheta,
};
use std::time::Instant;

fn catalog(name: &str) -> ControlProblem {
    catalog_problem(name, &serde_json::Map::new()).unwrap()
}

fn sim(n_paths: usize, seed: u64) -> SimConfig {
    SimConfig {
        dt: 1e-3,
        t_max: 10.0,
        n_paths,
        master_seed: seed,
        exit_correction: ExitMode::BridgeCorrected,
    }
}

fn reg() -> RegressionConfig {
    RegressionConfig::default()
}

/// Poisson benchmark: FD |u(0) - 0.5| <= 1e-4 at 201 nodes in under a
/// second; MC |u_hat(0) - 0.5| <= 0.02 with 1e5 paths, dt = 1e-3, in under
/// a minute. Oracle: closed form (1 - x^2)/2.
#[test]
fn c01_poisson_fd_and_mc_match_closed_form() {
    let p = catalog("poisson1d");

    let t = Instant::now();
    let field = solve_hjb(&p, &GridConfig::uniform(201, 1)).unwrap();
    let fd_elapsed = t.elapsed();
    let fd_gap = (field.interp(&[0.0]) - 0.5).abs();
    assert!(fd_gap <= 1e-4, "FD gap {fd_gap}");
    assert!(fd_elapsed.as_secs_f64() < 1.0, "FD took {fd_elapsed:?}");

    let t = Instant::now();
    let candidates = default_candidates(&p, None);
    let est = estimate_value(&p, &[0.0], &candidates, &sim(100_000, 101), &reg()).unwrap();
    let mc_elapsed = t.elapsed();
    let mc_gap = (est.value - 0.5).abs();
    assert!(mc_gap <= 0.02, "MC gap {mc_gap}");
    assert!(mc_elapsed.as_secs_f64() <= 60.0, "MC took {mc_elapsed:?}");

    println!(
        "criterion 01 PASS: |u_FD(0)-0.5| = {fd_gap:.2e} ({fd_elapsed:?}), \
         |u_MC(0)-0.5| = {mc_gap:.2e} ({mc_elapsed:?})"
    );
}

/// Semilinear benchmark f = -2y + 1: both solvers within 0.02 of
/// 0.5 (1 - 1/cosh(sqrt 2)). Oracle: closed form.
#[test]
fn c02_semilinear_both_solvers_match_closed_form() {
    let p = catalog("semilinear1d");
    let expect = 0.5 * (1.0 - 1.0 / f64::cosh(std::f64::consts::SQRT_2));

    let field = solve_hjb(&p, &GridConfig::uniform(201, 1)).unwrap();
    let fd_gap = (field.interp(&[0.0]) - expect).abs();
    assert!(fd_gap <= 0.02, "FD gap {fd_gap}");

    let est = cost(
        &p,
        &Policy::Constant { index: 0 },
        &[0.0],
        &sim(100_000, 102),
        &reg(),
    )
    .unwrap();
    let mc_gap = (est.value - expect).abs();
    assert!(mc_gap <= 0.02, "MC gap {mc_gap}");

    println!(
        "criterion 02 PASS: closed form {expect:.5}; FD gap {fd_gap:.2e}, MC gap {mc_gap:.2e}"
    );
}

/// Shooting solve of the reduced HJB ODE u'' = |u'| - 1, u(+-1) = 0, by
/// RK4 on (u, u') from x = -1 with bisection on the initial slope.
fn shooting_oracle(x_eval: f64) -> f64 {
    let steps = 20_000usize;
    let h = 2.0 / steps as f64;
    let integrate = |slope0: f64, x_stop: f64| -> f64 {
        let mut u = 0.0f64;
        let mut du = slope0;
        let mut x = -1.0f64;
        let rhs = |du: f64| du.abs() - 1.0;
        for _ in 0..steps {
            if x >= x_stop - 1e-12 {
                break;
            }
            let k1 = (du, rhs(du));
            let k2 = (du + 0.5 * h * k1.1, rhs(du + 0.5 * h * k1.1));
            let k3 = (du + 0.5 * h * k2.1, rhs(du + 0.5 * h * k2.1));
            let k4 = (du + h * k3.1, rhs(du + h * k3.1));
            u += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            du += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            x += h;
        }
        u
    };
    // u(1; slope) is increasing in the initial slope; bisect on u(1) = 0.
    let (mut lo, mut hi) = (0.0f64, 2.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if integrate(mid, 1.0) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    integrate(0.5 * (lo + hi), x_eval)
}

/// Controlled benchmark b = v, V_h = {-1, +1}: cross-validation gap over
/// five interior probes <= 0.05 and FD vs the shooting oracle <= 1e-3.
#[test]
fn c03_controlled_benchmark_cross_validates() {
    let p = catalog("controlled1d");
    let field = solve_hjb(&p, &GridConfig::uniform(201, 1)).unwrap();

    let mut fd_worst = 0.0f64;
    for x in [-0.8, -0.4, 0.0, 0.4, 0.8] {
        let gap = (field.interp(&[x]) - shooting_oracle(x)).abs();
        fd_worst = fd_worst.max(gap);
    }
    assert!(fd_worst <= 1e-3, "FD vs shooting gap {fd_worst}");

    let probes: Vec<Vec<f64>> = [-0.6, -0.3, 0.0, 0.3, 0.6]
        .iter()
        .map(|&x| vec![x])
        .collect();
    let report = cross_validate(&p, &probes, &field, &sim(40_000, 103), &reg(), 1.0).unwrap();
    assert!(report.passed(), "{report:?}");
    let max_gap = report.measured["max_gap"].as_f64().unwrap();
    assert!(max_gap <= 0.05, "cross-validation max gap {max_gap}");

    println!(
        "criterion 03 PASS: FD vs shooting {fd_worst:.2e}, cross-validation max gap {max_gap:.4}"
    );
}

/// Dynamic programming identity at Theta in {0, 0.1, sub-interval exit}:
/// statistical tolerance for the nonzero rules, exact (zero tolerance) at
/// Theta = 0.
#[test]
fn c04_dynamic_programming_principle() {
    let p = catalog("controlled1d");
    let field = solve_hjb(&p, &GridConfig::uniform(201, 1)).unwrap();
    let cfg = sim(40_000, 104);
    let thetas = [
        DppTheta::Zero,
        DppTheta::FixedTime { t: 0.1 },
        DppTheta::SubDomain { scale: 0.5 },
    ];
    let mut lines = Vec::new();
    for theta in &thetas {
        let report = check_dpp(&p, &[0.0], theta, &field, &cfg, &reg(), 1.0).unwrap();
        assert!(report.passed(), "{report:?}");
        if matches!(theta, DppTheta::Zero) {
            assert_eq!(report.tolerance, 0.0, "Theta = 0 must pass identically");
            assert_eq!(report.measured["gap"].as_f64().unwrap(), 0.0);
        }
        lines.push(format!(
            "{}: gap {:.5} <= tol {:.5}",
            report.name,
            report.measured["gap"].as_f64().unwrap_or(f64::NAN),
            report.tolerance
        ));
    }
    println!("criterion 04 PASS: {}", lines.join("; "));
}

/// Comparison exact-ordering branch: ten randomized y-affine driver pairs
/// differing by positive constants hold with zero tolerance on shared
/// bundles and bases.
#[test]
fn c05_comparison_exact_ordering_on_randomized_pairs() {
    let seed = 105u64;
    for trial in 0..10u64 {
        // Random monotone affine driver f = a y + c and a positive shift.
        let a = -2.0 * rng::uniform(seed, trial, 0, 0);
        let c = 2.0 * rng::uniform(seed, trial, 1, 0) - 1.0;
        let shift = 0.1 + 0.9 * rng::uniform(seed, trial, 2, 0);
        let text = format!(
            r#"{{
            "dimension": {{"d": 1, "m": 1, "k": 1}},
            "b": [{{"op": "const", "value": 0.0}}],
            "sigma": [[{{"op": "const", "value": 1.4142135623730951}}]],
            "f": {{"op": "add", "args": [
                {{"op": "mul", "args": [{{"op": "const", "value": {a}}}, {{"op": "y"}}]}},
                {{"op": "const", "value": {c}}}]}},
            "g": {{"op": "const", "value": 0.0}},
            "domain": {{"kind": "interval", "center": 0.0, "radius": 1.0}},
            "controls": {{"dimension": 1, "points": [[0.0]]}},
            "constants": {{"l": 3.0, "beta": 0.0, "alpha": {alpha}, "lambda": 2.0,
                           "mu": 1.0, "ltilde": {ltilde}}}
        }}"#,
            a = a,
            c = c,
            alpha = -a,
            ltilde = -a,
        );
        let p = parse_problem_spec(&text).unwrap();
        let driver2 = Expr::add(p.f.clone(), Expr::Const(shift));
        let report = check_comparison(
            &p,
            &driver2,
            &p.g.clone(),
            &[0.0],
            &sim(2_000, 1_000 + trial),
            &reg(),
            &ProbeConfig::default(),
            false,
        )
        .unwrap();
        assert!(report.passed(), "trial {trial}: {report:?}");
        assert_eq!(
            report.tolerance, 0.0,
            "trial {trial} must use the exact branch"
        );
        assert_eq!(report.measured["exact_branch"], true);
        let gap = report.measured["ordering_gap"].as_f64().unwrap();
        assert!(gap >= 0.0, "trial {trial}: ordering gap {gap}");
    }
    println!("criterion 05 PASS: 10 randomized constant-gap pairs ordered with zero tolerance");
}

/// Small-horizon chain: the envelope ODE's closed form and an independent
/// integrator agree to 1e-10 at every epsilon, and the fitted scaling
/// slopes of |Y1-Y2| and |Y3-Y4| stay above 1.4 across the ladder.
#[test]
fn c06_expansion_chain_scaling() {
    let p = catalog("semilinear1d");
    let phi = TestFunction::new(Expr::Powi(Box::new(Expr::X(0)), 3), 1).unwrap();
    let t = Instant::now();
    let (report, bundles) = check_expansion_chain(
        &p,
        &[0.3],
        &phi,
        &[0.2, 0.1, 0.05, 0.025],
        2.5e-4,
        30_000,
        106,
        &reg(),
        &ProbeConfig::default(),
    )
    .unwrap();
    let elapsed = t.elapsed();
    assert!(report.passed(), "{report:?}");
    for b in &bundles {
        assert!(
            (b.y4_0 - b.y4_ode).abs() <= 1e-10,
            "epsilon {}: closed form {} vs integrator {}",
            b.epsilon,
            b.y4_0,
            b.y4_ode
        );
    }
    let s12 = report.measured["slope12"].as_f64().unwrap();
    let s34 = report.measured["slope34"].as_f64().unwrap();
    assert!(s12 >= 1.4 && s34 >= 1.4, "slopes {s12}, {s34}");
    assert!(elapsed.as_secs_f64() <= 300.0, "chain took {elapsed:?}");
    println!(
        "criterion 06 PASS: slopes |Y1-Y2| {s12:.2}, |Y3-Y4| {s34:.2}; \
         Y4 routes agree to {:.1e}; {elapsed:?}",
        bundles
            .iter()
            .map(|b| (b.y4_0 - b.y4_ode).abs())
            .fold(0.0f64, f64::max)
    );
}

/// Exit moments: E[exp(mu tau)] within 3 stderr of 1/cos(sqrt mu) for
/// mu in {0.5, 1}; flagged non-convergent at mu = 2.5 (past the blow-up
/// threshold pi^2/4).
#[test]
fn c07_exit_moments_match_eigenvalue_formula() {
    let p = catalog("poisson1d");
    let bundle = simulate(
        &p,
        &Policy::Constant { index: 0 },
        &[0.0],
        &sim(100_000, 107),
    )
    .unwrap();
    let mut lines = Vec::new();
    for mu in [0.5f64, 1.0] {
        let oracle = 1.0 / f64::cos(mu.sqrt());
        let est = exit_moment(&bundle, mu);
        let gap = (est.mean - oracle).abs();
        assert!(
            gap <= 3.0 * est.stderr,
            "mu = {mu}: gap {gap} vs 3 stderr {}",
            3.0 * est.stderr
        );
        lines.push(format!("mu={mu}: gap {gap:.2e} <= {:.2e}", 3.0 * est.stderr));
    }

    // Above the threshold the estimate must be flagged as non-convergent.
    let mut cfg = sim(20_000, 108);
    cfg.t_max = 20.0;
    cfg.dt = 2e-3;
    let long = simulate(&p, &Policy::Constant { index: 0 }, &[0.0], &cfg).unwrap();
    let caps = [5.0, 10.0, 20.0];
    assert!(moment_converged(&exit_moment_trend(&long, 1.0, &caps)));
    assert!(
        !moment_converged(&exit_moment_trend(&long, 2.5, &caps)),
        "mu = 2.5 must be flagged non-convergent"
    );
    println!(
        "criterion 07 PASS: {}; mu=2.5 flagged non-convergent",
        lines.join("; ")
    );
}

/// Hoelder regularity: fitted exponent h >= 0.4 on every catalog benchmark
/// (smooth value functions fit near h = 1).
#[test]
fn c08_holder_exponent_on_all_catalog_benchmarks() {
    let mut lines = Vec::new();
    for name in exitctrl::problem::CATALOG_NAMES {
        let p = catalog(name);
        let grid = if p.dim_x == 1 {
            GridConfig::uniform(201, 1)
        } else {
            GridConfig::uniform(41, 2)
        };
        let field = solve_hjb(&p, &grid).unwrap();
        let (lo, hi) = p.domain.bounding_box();
        let base = 0.25 * (hi[0] - lo[0]);
        let separations: Vec<f64> = (0..8).map(|k| base / 2f64.powi(k)).collect();
        let report = check_holder(&p, &field, 0x801d, &separations, 48).unwrap();
        assert!(report.passed(), "{name}: {report:?}");
        let h = report.measured["exponent"].as_f64().unwrap_or(f64::NAN);
        assert!(h >= 0.4, "{name}: h = {h}");
        lines.push(format!("{name}: h = {h:.2}"));
    }
    println!("criterion 08 PASS: {}", lines.join("; "));
}

/// Determinism: identical seeds give byte-identical summaries regardless
/// of the worker count.
#[test]
fn c09_byte_identical_summaries_across_worker_counts() {
    let p = catalog("poisson1d");
    let cfg = sim(5_000, 109);
    let mut blobs: Vec<String> = Vec::new();
    for threads in [1usize, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let est = pool.install(|| {
            estimate_value(&p, &[0.0], &default_candidates(&p, None), &cfg, &reg()).unwrap()
        });
        blobs.push(serde_json::to_string_pretty(&est).unwrap());
    }
    assert_eq!(blobs[0], blobs[1]);
    assert_eq!(blobs[1], blobs[2]);
    println!("criterion 09 PASS: summaries byte-identical over 1, 2 and 4 workers");
}

/// Grid convergence: second-order sup-error decay over three refinements.
/// The catalog parabola is reproduced exactly by central differences (its
/// error sits at solver tolerance), so the slope is measured on the
/// cosine-source Dirichlet problem u'' + cos(pi x / 2) = 0 with exact
/// solution (2/pi)^2 cos(pi x / 2); the plain benchmark's nodal error is
/// asserted at the criterion-1 gate separately.
#[test]
fn c10_grid_convergence_second_order() {
    let text = r#"{
        "dimension": {"d": 1, "m": 1, "k": 1},
        "b": [{"op": "const", "value": 0.0}],
        "sigma": [[{"op": "const", "value": 1.4142135623730951}]],
        "f": {"op": "cos", "args": [{"op": "mul", "args": [
            {"op": "const", "value": 1.5707963267948966}, {"op": "x", "value": 0}]}]},
        "g": {"op": "const", "value": 0.0},
        "domain": {"kind": "interval", "center": 0.0, "radius": 1.0},
        "controls": {"dimension": 1, "points": [[0.0]]},
        "constants": {"l": 2.0, "beta": 0.0, "alpha": 0.0, "lambda": 2.0, "mu": 1.0, "ltilde": 0.0}
    }"#;
    let p = parse_problem_spec(text).unwrap();
    let exact =
        |x: f64| (2.0 / std::f64::consts::PI).powi(2) * (std::f64::consts::FRAC_PI_2 * x).cos();
    let mut points = Vec::new();
    for nodes in [21usize, 41, 81] {
        let mut cfg = GridConfig::uniform(nodes, 1);
        cfg.tolerance = 1e-9;
        let field = solve_hjb(&p, &cfg).unwrap();
        let mut coord = [0.0];
        let mut sup = 0.0f64;
        for flat in 0..field.n_nodes() {
            field.node_coord(flat, &mut coord);
            sup = sup.max((field.u[flat] - exact(coord[0])).abs());
        }
        let h = 2.0 / (nodes - 1) as f64;
        points.push((h.ln(), sup.ln()));
    }
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    assert!(slope >= 1.8, "convergence slope {slope}");
    println!("criterion 10 PASS: FD sup-error slope {slope:.3} over three refinements");
}
