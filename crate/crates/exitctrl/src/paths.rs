//! Controlled-SDE simulation on a time grid, first-exit detection from the
//! closed domain, exit-time functionals and the exterior-sphere barrier.
//!
//! Exit convention: the first exit time is the first time the state leaves
//! the closed domain. Under uniform ellipticity every boundary point is
//! regular (exit from a boundary point is instantaneous almost surely), so
//! the grid-level surrogate treats any state with nonpositive boundary
//! distance as exited; a start on the boundary exits at time zero.

use crate::error::{Error, Result};
use crate::problem::{ControlProblem, Domain, ProbeConfig};
use crate::rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitMode {
    /// First grid index with a state outside the closed domain.
    GridCrossing,
    /// Grid crossing plus a Brownian-bridge Bernoulli correction for
    /// boundary excursions between consecutive inside states; reduces the
    /// exit-time bias from O(sqrt(dt)) to O(dt).
    BridgeCorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_max: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    pub exit_correction: ExitMode,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt < self.t_max) {
            return Err(Error::Config(format!(
                "need 0 < dt < t_max, got dt = {}, t_max = {}",
                self.dt, self.t_max
            )));
        }
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of grid steps; the horizon is rounded to whole steps.
    pub fn n_steps(&self) -> usize {
        ((self.t_max / self.dt).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    /// First grid index at or after the exit; `None` when censored.
    pub exit_step: Option<usize>,
    /// Exit-time estimate; equals `t_max` when censored.
    pub tau: f64,
    /// Boundary point (projection of the exiting state; for censored paths
    /// the projection of the final state, used only with a bias flag).
    pub exit_point: Vec<f64>,
    pub censored: bool,
}

/// One simulated trajectory, stored up to and including its stop step. The
/// post-exit frozen convention is structural: queries past the stored range
/// return the exit point.
#[derive(Debug, Clone, PartialEq)]
struct PathTrack {
    states: Box<[f64]>,
    controls: Box<[u32]>,
}

/// An ensemble of controlled trajectories with per-path exit records.
/// Re-simulation with the same seed and config is bit-identical regardless
/// of worker count; path `p` draws from substream `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub dt: f64,
    pub t_max: f64,
    pub n_steps: usize,
    pub dim: usize,
    pub master_seed: u64,
    pub exit_correction: ExitMode,
    tracks: Vec<PathTrack>,
    pub exits: Vec<ExitRecord>,
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.tracks.len()
    }

    /// Substream identifier for a path (the counter-based stream key).
    pub fn substream_id(&self, path: usize) -> u64 {
        path as u64
    }

    /// Last stored step of a path (its exit step, or `n_steps` if censored).
    pub fn last_step(&self, path: usize) -> usize {
        self.tracks[path].states.len() / self.dim - 1
    }

    /// State at a grid step, frozen at the exit point past the exit step.
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let track = &self.tracks[path];
        let last = track.states.len() / self.dim - 1;
        let n = step.min(last);
        &track.states[n * self.dim..(n + 1) * self.dim]
    }

    /// Control index applied on `[t_n, t_{n+1})`; meaningful for steps
    /// before the stop step.
    pub fn control_index(&self, path: usize, step: usize) -> usize {
        let track = &self.tracks[path];
        if track.controls.is_empty() {
            return 0;
        }
        track.controls[step.min(track.controls.len() - 1)] as usize
    }

    pub fn tau(&self, path: usize) -> f64 {
        self.exits[path].tau
    }

    pub fn censored_fraction(&self) -> f64 {
        let c = self.exits.iter().filter(|e| e.censored).count();
        c as f64 / self.n_paths() as f64
    }

    /// Brownian increment for `(path, step)`, regenerated from the
    /// counter-based stream (never stored).
    pub fn brownian_increment(&self, path: usize, step: usize, out: &mut [f64]) {
        let sd = self.dt.sqrt();
        for (j, o) in out.iter_mut().enumerate() {
            *o = sd * rng::normal(self.master_seed, path as u64, step as u64, j as u64);
        }
    }

    /// Re-runs exit detection on the stored states against a different
    /// domain (bridge draws and diffusion magnitudes are regenerated from
    /// the recorded keys). Intended for shrunken domains, where the stored
    /// range always covers the earlier exit.
    pub fn rescan_exits(
        &self,
        problem: &ControlProblem,
        domain: &Domain,
        mode: ExitMode,
    ) -> Vec<ExitRecord> {
        (0..self.n_paths())
            .map(|p| {
                let mut sigma_buf = vec![0.0; problem.dim_x * problem.dim_w];
                let mut normal_buf = vec![0.0; problem.dim_x];
                let sigma_normal_sq = |step: usize, x: &[f64]| {
                    let v = &problem.controls.points[self.control_index(p, step)];
                    problem.eval_sigma(x, v, &mut sigma_buf);
                    normal_diffusion_sq(domain, x, &sigma_buf, problem.dim_w, &mut normal_buf)
                };
                detect_exit(
                    |n| self.state(p, n),
                    self.last_step(p),
                    self.dim,
                    domain,
                    mode,
                    self.dt,
                    self.t_max,
                    self.master_seed,
                    p as u64,
                    sigma_normal_sq,
                )
            })
            .collect()
    }

    /// Writes the per-path exit table as CSV
    /// (`path_id,exit_step,tau,censored,exit_point...`).
    pub fn export_exits_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        write!(w, "path_id,exit_step,tau,censored")?;
        for i in 0..self.dim {
            write!(w, ",exit_point_{i}")?;
        }
        writeln!(w)?;
        for (p, e) in self.exits.iter().enumerate() {
            let step = e
                .exit_step
                .map(|s| s.to_string())
                .unwrap_or_else(|| "censored".into());
            write!(w, "{p},{step},{},{}", e.tau, e.censored)?;
            for c in &e.exit_point {
                write!(w, ",{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Squared magnitude of the diffusion along the outward boundary normal,
/// `|n^T sigma|^2`, with `sigma` row-major d x m; `normal_buf` has length d.
fn normal_diffusion_sq(
    domain: &Domain,
    x: &[f64],
    sigma: &[f64],
    m: usize,
    normal_buf: &mut [f64],
) -> f64 {
    domain.outward_normal_into(x, normal_buf);
    let d = normal_buf.len();
    let mut acc = 0.0;
    for j in 0..m {
        let mut s = 0.0;
        for i in 0..d {
            s += normal_buf[i] * sigma[i * m + j];
        }
        acc += s * s;
    }
    acc
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

/// Nearest-node control lookup over a tensor grid (feedback policies from
/// the FD solver and externally loaded tables share this shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTable {
    /// Node coordinates per axis, strictly increasing.
    pub axes: Vec<Vec<f64>>,
    /// Row-major control indices, one per grid node.
    pub indices: Vec<u32>,
}

impl ControlTable {
    /// Nearest grid node, ties toward the lower node.
    pub fn lookup(&self, x: &[f64]) -> usize {
        let mut flat = 0usize;
        for (axis, &xi) in self.axes.iter().zip(x) {
            let k = nearest_index(axis, xi);
            flat = flat * axis.len() + k;
        }
        self.indices[flat] as usize
    }
}

fn nearest_index(axis: &[f64], x: f64) -> usize {
    match axis.binary_search_by(|a| a.partial_cmp(&x).expect("finite coordinates")) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) if i >= axis.len() => axis.len() - 1,
        Err(i) => {
            // Strictly closer upper node wins; ties go low.
            if (x - axis[i - 1]) <= (axis[i] - x) {
                i - 1
            } else {
                i
            }
        }
    }
}

/// Implementable control policies; every evaluation returns an index into
/// `ControlSet::points`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Policy {
    Constant { index: usize },
    /// Piecewise-constant open loop on the grid; clamps at the last entry.
    OpenLoop { indices: Vec<usize> },
    /// Feedback lookup extracted from a solved value field.
    Feedback { table: ControlTable },
    /// Externally supplied lookup table.
    Table { table: ControlTable },
}

impl Policy {
    pub fn control_index(&self, step: usize, x: &[f64]) -> usize {
        match self {
            Policy::Constant { index } => *index,
            Policy::OpenLoop { indices } => indices[step.min(indices.len() - 1)],
            Policy::Feedback { table } | Policy::Table { table } => table.lookup(x),
        }
    }

    pub fn validate(&self, n_controls: usize) -> Result<()> {
        let max = match self {
            Policy::Constant { index } => Some(*index),
            Policy::OpenLoop { indices } => {
                if indices.is_empty() {
                    return Err(Error::Config("open-loop policy has no entries".into()));
                }
                indices.iter().copied().max()
            }
            Policy::Feedback { table } | Policy::Table { table } => {
                if table.indices.is_empty() {
                    return Err(Error::Config("policy table has no entries".into()));
                }
                table.indices.iter().map(|&i| i as usize).max()
            }
        };
        match max {
            Some(i) if i >= n_controls => Err(Error::Config(format!(
                "policy references control {i}, but only {n_controls} controls exist"
            ))),
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

enum StepOutcome {
    Inside,
    /// The state left the closed domain (or touched the boundary).
    GridExit,
    /// Brownian-bridge excursion detected between two inside states.
    BridgeExit { frac: f64 },
}

fn step_exit(
    d_prev: f64,
    d_next: f64,
    mode: ExitMode,
    dt: f64,
    sigma_normal_sq: f64,
    bridge_uniform: f64,
) -> StepOutcome {
    if d_next <= 0.0 {
        return StepOutcome::GridExit;
    }
    if mode == ExitMode::BridgeCorrected && d_prev > 0.0 {
        let denom = sigma_normal_sq * dt;
        if denom > 0.0 {
            let p_hit = (-2.0 * d_prev * d_next / denom).exp();
            if bridge_uniform < p_hit {
                let frac = d_prev / (d_prev + d_next);
                return StepOutcome::BridgeExit { frac };
            }
        }
    }
    StepOutcome::Inside
}

/// Scans a stored state sequence for the first exit. `state(n)` must be
/// valid for `n <= last_step`; `sigma_normal_sq(n, x)` supplies the squared
/// normal diffusion magnitude at step `n` (bridge mode only).
#[allow(clippy::too_many_arguments)]
pub fn detect_exit<'a>(
    state: impl Fn(usize) -> &'a [f64],
    last_step: usize,
    dim: usize,
    domain: &Domain,
    mode: ExitMode,
    dt: f64,
    t_max: f64,
    seed: u64,
    path_id: u64,
    mut sigma_normal_sq: impl FnMut(usize, &[f64]) -> f64,
) -> ExitRecord {
    let x0 = state(0);
    let mut d_prev = domain.boundary_distance(x0);
    if d_prev <= 0.0 {
        return ExitRecord {
            exit_step: Some(0),
            tau: 0.0,
            exit_point: domain.closest_boundary_point(x0),
            censored: false,
        };
    }
    for n in 0..last_step {
        let x_prev = state(n);
        let x_next = state(n + 1);
        let d_next = domain.boundary_distance(x_next);
        let (s2, u) = if mode == ExitMode::BridgeCorrected && d_next > 0.0 {
            (
                sigma_normal_sq(n, x_prev),
                rng::uniform(seed, path_id, n as u64, rng::lane::BRIDGE),
            )
        } else {
            (0.0, 1.0)
        };
        match step_exit(d_prev, d_next, mode, dt, s2, u) {
            StepOutcome::Inside => d_prev = d_next,
            StepOutcome::GridExit => {
                return ExitRecord {
                    exit_step: Some(n + 1),
                    tau: (n + 1) as f64 * dt,
                    exit_point: domain.closest_boundary_point(x_next),
                    censored: false,
                };
            }
            StepOutcome::BridgeExit { frac } => {
                let hit: Vec<f64> = (0..dim)
                    .map(|i| x_prev[i] + frac * (x_next[i] - x_prev[i]))
                    .collect();
                return ExitRecord {
                    exit_step: Some(n + 1),
                    tau: (n as f64 + frac) * dt,
                    exit_point: domain.closest_boundary_point(&hit),
                    censored: false,
                };
            }
        }
    }
    ExitRecord {
        exit_step: None,
        tau: t_max,
        exit_point: domain.closest_boundary_point(state(last_step)),
        censored: true,
    }
}

/// Euler-Maruyama simulation of the controlled SDE with per-step exit
/// detection. Post-exit states are frozen at the (projected) exit point.
pub fn simulate(
    problem: &ControlProblem,
    policy: &Policy,
    x0: &[f64],
    config: &SimConfig,
) -> Result<PathBundle> {
    config.validate()?;
    policy.validate(problem.controls.len())?;
    if x0.len() != problem.dim_x {
        return Err(Error::DimensionMismatch {
            what: "x0".into(),
            expected: problem.dim_x,
            found: x0.len(),
        });
    }
    if !problem.domain.contains_closure(x0) {
        return Err(Error::OutsideDomain { point: x0.to_vec() });
    }
    let n_steps = config.n_steps();
    let t_max = n_steps as f64 * config.dt;

    let results: Result<Vec<(PathTrack, ExitRecord)>> = (0..config.n_paths)
        .into_par_iter()
        .map(|p| simulate_path(problem, policy, x0, config, n_steps, t_max, p))
        .collect();
    let results = results?;

    let (tracks, exits) = results.into_iter().unzip();
    Ok(PathBundle {
        dt: config.dt,
        t_max,
        n_steps,
        dim: problem.dim_x,
        master_seed: config.master_seed,
        exit_correction: config.exit_correction,
        tracks,
        exits,
    })
}

fn simulate_path(
    problem: &ControlProblem,
    policy: &Policy,
    x0: &[f64],
    config: &SimConfig,
    n_steps: usize,
    t_max: f64,
    path: usize,
) -> Result<(PathTrack, ExitRecord)> {
    let d = problem.dim_x;
    let m = problem.dim_w;
    let domain = &problem.domain;
    let seed = config.master_seed;
    let pid = path as u64;

    let d0 = domain.boundary_distance(x0);
    if d0 <= 0.0 {
        let exit_point = domain.closest_boundary_point(x0);
        let track = PathTrack {
            states: exit_point.clone().into_boxed_slice(),
            controls: Box::new([]),
        };
        return Ok((
            track,
            ExitRecord {
                exit_step: Some(0),
                tau: 0.0,
                exit_point,
                censored: false,
            },
        ));
    }

    let mut states: Vec<f64> = Vec::with_capacity(64 * d);
    states.extend_from_slice(x0);
    let mut controls: Vec<u32> = Vec::with_capacity(64);
    let mut x = x0.to_vec();
    let mut x_next = vec![0.0; d];
    let mut drift = vec![0.0; d];
    let mut sigma = vec![0.0; d * m];
    let mut normal_buf = vec![0.0; d];
    let mut d_prev = d0;
    let sqrt_dt = config.dt.sqrt();
    let bridge = config.exit_correction == ExitMode::BridgeCorrected;

    for n in 0..n_steps {
        let v_idx = policy.control_index(n, &x);
        let v = &problem.controls.points[v_idx];
        controls.push(v_idx as u32);
        problem.eval_drift(&x, v, &mut drift);
        problem.eval_sigma(&x, v, &mut sigma);
        for i in 0..d {
            let mut acc = x[i] + drift[i] * config.dt;
            for j in 0..m {
                acc += sigma[i * m + j]
                    * sqrt_dt
                    * rng::normal(seed, pid, n as u64, j as u64);
            }
            x_next[i] = acc;
        }
        if x_next.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { path, step: n + 1 });
        }

        let d_next = domain.boundary_distance(&x_next);
        let (s2, u) = if bridge && d_next > 0.0 {
            (
                normal_diffusion_sq(domain, &x, &sigma, m, &mut normal_buf),
                rng::uniform(seed, pid, n as u64, rng::lane::BRIDGE),
            )
        } else {
            (0.0, 1.0)
        };
        match step_exit(d_prev, d_next, config.exit_correction, config.dt, s2, u) {
            StepOutcome::Inside => {
                states.extend_from_slice(&x_next);
                std::mem::swap(&mut x, &mut x_next);
                d_prev = d_next;
            }
            StepOutcome::GridExit => {
                let exit_point = domain.closest_boundary_point(&x_next);
                states.extend_from_slice(&exit_point);
                return Ok((
                    PathTrack {
                        states: states.into_boxed_slice(),
                        controls: controls.into_boxed_slice(),
                    },
                    ExitRecord {
                        exit_step: Some(n + 1),
                        tau: (n + 1) as f64 * config.dt,
                        exit_point,
                        censored: false,
                    },
                ));
            }
            StepOutcome::BridgeExit { frac } => {
                let hit: Vec<f64> = (0..d).map(|i| x[i] + frac * (x_next[i] - x[i])).collect();
                let exit_point = domain.closest_boundary_point(&hit);
                states.extend_from_slice(&exit_point);
                return Ok((
                    PathTrack {
                        states: states.into_boxed_slice(),
                        controls: controls.into_boxed_slice(),
                    },
                    ExitRecord {
                        exit_step: Some(n + 1),
                        tau: (n as f64 + frac) * config.dt,
                        exit_point,
                        censored: false,
                    },
                ));
            }
        }
    }
    let exit_point = domain.closest_boundary_point(&x);
    Ok((
        PathTrack {
            states: states.into_boxed_slice(),
            controls: controls.into_boxed_slice(),
        },
        ExitRecord {
            exit_step: None,
            tau: t_max,
            exit_point,
            censored: true,
        },
    ))
}

// ---------------------------------------------------------------------------
// Exit-time functionals
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub censored_fraction: f64,
}

/// Sample mean and standard error of `exp(mu * tau)`. Censored paths
/// contribute `exp(mu * t_max)`, so for positive `mu` the estimate is a
/// lower bound whenever censoring occurs.
pub fn exit_moment(bundle: &PathBundle, mu: f64) -> MomentEstimate {
    exit_moment_capped(bundle, mu, bundle.t_max)
}

/// Exit moment with exit times truncated at `cap`; used to probe
/// convergence trends in the truncation horizon.
pub fn exit_moment_capped(bundle: &PathBundle, mu: f64, cap: f64) -> MomentEstimate {
    let n = bundle.n_paths();
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut censored = 0usize;
    for e in &bundle.exits {
        let tau = e.tau.min(cap);
        if e.censored || e.tau >= cap {
            censored += 1;
        }
        let val = (mu * tau).exp();
        sum += val;
        sum2 += val * val;
    }
    let mean = sum / n as f64;
    let var = (sum2 / n as f64 - mean * mean).max(0.0);
    let stderr = if n > 1 {
        (var / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MomentEstimate {
        mean,
        stderr,
        n,
        censored_fraction: censored as f64 / n as f64,
    }
}

/// Estimates over a ladder of truncation horizons, for convergence-trend
/// flags (a finite exponential moment shows collapsing increments; past the
/// blow-up threshold the tail keeps contributing).
pub fn exit_moment_trend(bundle: &PathBundle, mu: f64, caps: &[f64]) -> Vec<MomentEstimate> {
    caps.iter()
        .map(|&c| exit_moment_capped(bundle, mu, c))
        .collect()
}

/// Convergence heuristic over a trend ladder: relative stderr must be small
/// and the truncation increments must keep shrinking.
pub fn moment_converged(trend: &[MomentEstimate]) -> bool {
    let last = match trend.last() {
        Some(l) => l,
        None => return false,
    };
    if last.mean == 0.0 {
        return true;
    }
    if last.stderr > 0.15 * last.mean.abs() {
        return false;
    }
    for w in trend.windows(2) {
        let increment = (w[1].mean - w[0].mean).abs();
        if increment > 0.05 * last.mean.abs() && w[1].mean.abs() > w[0].mean.abs() * 1.05 {
            // material growth between successive horizons
            if w[1].mean == trend.last().unwrap().mean {
                return false;
            }
        }
    }
    // Final doubling must contribute little.
    if trend.len() >= 2 {
        let tail = (trend[trend.len() - 1].mean - trend[trend.len() - 2].mean).abs();
        if tail > 0.02 * last.mean.abs() + 3.0 * last.stderr {
            return false;
        }
    }
    true
}

/// Probes the largest exponent from a fixed ladder for which the exit
/// moment is stable under every constant policy. Returns `None` when even
/// the smallest ladder entry is unstable.
pub fn probe_exit_moment_exponent(problem: &ControlProblem, probe: &ProbeConfig) -> Option<f64> {
    let (lo, hi) = problem.domain.bounding_box();
    let diam: f64 = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    let t_max = 4.0 * diam * diam / problem.constants.lambda;
    let config = SimConfig {
        dt: t_max / 8192.0,
        t_max,
        n_paths: 4096,
        master_seed: probe.seed ^ 0xe817,
        exit_correction: ExitMode::BridgeCorrected,
    };
    let x0 = problem.domain.center();
    let ladder = [8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.125, 0.0625];
    let caps = [t_max / 4.0, t_max / 2.0, t_max];
    let mut bundles = Vec::new();
    for idx in 0..problem.controls.len() {
        let policy = Policy::Constant { index: idx };
        match simulate(problem, &policy, &x0, &config) {
            Ok(b) => bundles.push(b),
            Err(_) => return None,
        }
    }
    for mu in ladder {
        let stable = bundles.iter().all(|b| {
            b.censored_fraction() < 1e-3 && moment_converged(&exit_moment_trend(b, mu, &caps))
        });
        if stable {
            return Some(mu);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Barrier
// ---------------------------------------------------------------------------

/// Evaluates the exterior-sphere barrier
/// `w(x) = inf_{y in boundary} [exp(-k rho^2) - exp(-k |x - y~|^2)]`,
/// where `y~` is the exterior sphere center touching the boundary at `y`.
/// For all supported domain kinds the minimizing distance is
/// `rho + boundary_distance(x)`, attained at the closest boundary point.
/// Returns `(w(x), y*, y~*)`.
pub fn barrier_value(domain: &Domain, x: &[f64], k: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if k <= 0.0 {
        return Err(Error::Config("barrier sharpness k must be positive".into()));
    }
    let bd = domain.boundary_distance(x);
    if bd < -1e-12 {
        return Err(Error::OutsideDomain { point: x.to_vec() });
    }
    let rho = domain.exterior_sphere_radius();
    let dmin = rho + bd.max(0.0);
    let w = (-k * rho * rho).exp() - (-k * dmin * dmin).exp();
    let y = domain.closest_boundary_point(x);
    let normal = domain.outward_normal(x);
    let y_ext: Vec<f64> = y.iter().zip(&normal).map(|(yi, ni)| yi + rho * ni).collect();
    Ok((w.max(0.0), y, y_ext))
}

/// Gradient and generator application for the per-boundary-point barrier
/// `w(x, y~) = exp(-k rho^2) - exp(-k |x - y~|^2)`; used by the
/// supermartingale margin search.
pub fn barrier_generator(
    problem: &ControlProblem,
    x: &[f64],
    y_ext: &[f64],
    k: f64,
    v: &[f64],
) -> f64 {
    let d = problem.dim_x;
    let diff: Vec<f64> = x.iter().zip(y_ext).map(|(a, b)| a - b).collect();
    let r2: f64 = diff.iter().map(|t| t * t).sum();
    let e = (-k * r2).exp();
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    for i in 0..d {
        grad[i] = 2.0 * k * diff[i] * e;
        for j in 0..d {
            let kron = if i == j { 2.0 * k * e } else { 0.0 };
            hess[i * d + j] = kron - 4.0 * k * k * diff[i] * diff[j] * e;
        }
    }
    problem.generator_apply(x, v, &grad, &hess)
}
