//! Monotone finite-difference solver for the generalized HJB Dirichlet
//! problem `inf_v { L(x,v) u + f(x, u, grad(u) sigma(x,v), v) } = 0` on a
//! tensor grid (d <= 2), by policy iteration:
//!
//! * frozen nodal controls: the semilinear discrete PDE is solved by a
//!   damped fixed point on the (u, grad u) arguments of f — exact
//!   tridiagonal passes in 1-d, node-wise relaxation sweeps in 2-d;
//! * policy improvement: node-wise minimization of the discrete
//!   Hamiltonian over V_h, ties toward the lowest index.
//!
//! Second derivatives use central differences; the drift term uses upwind
//! differences keyed to the drift sign when the upwind flag is set, central
//! otherwise. Cross derivatives use the seven-point arrangement that stays
//! monotone under diagonal dominance; dominance failures are surfaced as
//! errors. Dirichlet data is imposed exactly on boundary nodes; for ball
//! domains, grid nodes outside the open domain take the value of g at their
//! closest boundary point (cut-cell imposition, first-order boundary error).

use crate::error::{Error, Result};
use crate::paths::{ControlTable, Policy};
use crate::problem::ControlProblem;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub nodes_per_axis: Vec<usize>,
    pub max_policy_iterations: usize,
    pub max_inner_iterations: usize,
    /// Sup-norm threshold on the nodal HJB residual.
    pub tolerance: f64,
    pub upwind: bool,
    /// Damping of the fixed point on the f arguments.
    pub damping: f64,
}

impl GridConfig {
    pub fn uniform(nodes: usize, dim: usize) -> Self {
        GridConfig {
            nodes_per_axis: vec![nodes; dim],
            ..GridConfig::default()
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.nodes_per_axis.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "nodes_per_axis".into(),
                expected: dim,
                found: self.nodes_per_axis.len(),
            });
        }
        if self.nodes_per_axis.iter().any(|&n| n < 3) {
            return Err(Error::Config("need at least 3 nodes per axis".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config("damping must lie in (0, 1]".into()));
        }
        if dim > 2 {
            return Err(Error::Config(
                "tensor-grid solver supports d in {1, 2}".into(),
            ));
        }
        Ok(())
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            nodes_per_axis: vec![201],
            max_policy_iterations: 60,
            max_inner_iterations: 20_000,
            tolerance: 1e-6,
            upwind: false,
            damping: 0.5,
        }
    }
}

/// Grid values of u with the minimizing feedback control per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueField {
    pub axes: Vec<Vec<f64>>,
    /// Row-major nodal values.
    pub u: Vec<f64>,
    /// Argmin control index per node.
    pub policy: Vec<u32>,
    /// Dirichlet-imposed nodes (on or outside the boundary).
    pub boundary: Vec<bool>,
    /// Sup-norm HJB residual after each policy sweep.
    pub iteration_log: Vec<f64>,
    pub sweeps: usize,
    pub sup_residual: f64,
}

impl ValueField {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn node_coord(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for axis in (0..self.axes.len()).rev() {
            let n = self.axes[axis].len();
            out[axis] = self.axes[axis][rem % n];
            rem /= n;
        }
    }

    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut flat = 0usize;
        for (axis, &xi) in self.axes.iter().zip(x) {
            let k = nearest_index(axis, xi);
            flat = flat * axis.len() + k;
        }
        flat
    }

    /// Multilinear interpolation, clamped to the grid box.
    pub fn interp(&self, x: &[f64]) -> f64 {
        match self.axes.len() {
            1 => {
                let (i, w) = bracket(&self.axes[0], x[0]);
                (1.0 - w) * self.u[i] + w * self.u[(i + 1).min(self.axes[0].len() - 1)]
            }
            2 => {
                let (i, wi) = bracket(&self.axes[0], x[0]);
                let (j, wj) = bracket(&self.axes[1], x[1]);
                let nx = self.axes[1].len();
                let i1 = (i + 1).min(self.axes[0].len() - 1);
                let j1 = (j + 1).min(self.axes[1].len() - 1);
                let v00 = self.u[i * nx + j];
                let v01 = self.u[i * nx + j1];
                let v10 = self.u[i1 * nx + j];
                let v11 = self.u[i1 * nx + j1];
                (1.0 - wi) * ((1.0 - wj) * v00 + wj * v01) + wi * ((1.0 - wj) * v10 + wj * v11)
            }
            _ => unreachable!("solver is limited to d <= 2"),
        }
    }

    /// Writes node coordinates, values and policy indices as CSV.
    pub fn export_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        let d = self.dim();
        for i in 0..d {
            write!(w, "x_{i},")?;
        }
        writeln!(w, "u,policy,boundary")?;
        let mut coord = vec![0.0; d];
        for flat in 0..self.n_nodes() {
            self.node_coord(flat, &mut coord);
            for c in &coord {
                write!(w, "{c},")?;
            }
            writeln!(w, "{},{},{}", self.u[flat], self.policy[flat], self.boundary[flat])?;
        }
        Ok(())
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "sup_residual": self.sup_residual,
            "sweeps": self.sweeps,
            "grid": self.axes.iter().map(|a| a.len()).collect::<Vec<_>>(),
            "nodes": self.n_nodes(),
        })
    }
}

fn nearest_index(axis: &[f64], x: f64) -> usize {
    match axis.binary_search_by(|a| a.partial_cmp(&x).expect("finite coordinates")) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) if i >= axis.len() => axis.len() - 1,
        Err(i) => {
            if (x - axis[i - 1]) <= (axis[i] - x) {
                i - 1
            } else {
                i
            }
        }
    }
}

/// Lower bracket index and interpolation weight in [0, 1].
fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
    let n = axis.len();
    if x <= axis[0] {
        return (0, 0.0);
    }
    if x >= axis[n - 1] {
        return (n - 2, 1.0);
    }
    let i = match axis.binary_search_by(|a| a.partial_cmp(&x).expect("finite coordinates")) {
        Ok(i) => return (i.min(n - 2), if i == n - 1 { 1.0 } else { 0.0 }),
        Err(i) => i - 1,
    };
    let w = (x - axis[i]) / (axis[i + 1] - axis[i]);
    (i, w)
}

struct Workspace {
    axes: Vec<Vec<f64>>,
    dims: Vec<usize>,
    spacing: Vec<f64>,
    boundary: Vec<bool>,
    /// Dirichlet value at masked nodes.
    g_values: Vec<f64>,
    coords: Vec<f64>,
    n_nodes: usize,
}

impl Workspace {
    fn build(problem: &ControlProblem, config: &GridConfig) -> Workspace {
        let (lo, hi) = problem.domain.bounding_box();
        let d = problem.dim_x;
        let axes: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let n = config.nodes_per_axis[i];
                (0..n)
                    .map(|k| lo[i] + (hi[i] - lo[i]) * k as f64 / (n - 1) as f64)
                    .collect()
            })
            .collect();
        let dims: Vec<usize> = axes.iter().map(|a| a.len()).collect();
        let spacing: Vec<f64> = (0..d)
            .map(|i| (hi[i] - lo[i]) / (dims[i] - 1) as f64)
            .collect();
        let n_nodes: usize = dims.iter().product();
        let mut boundary = vec![false; n_nodes];
        let mut g_values = vec![0.0; n_nodes];
        let mut coords = vec![0.0; n_nodes * d];
        for flat in 0..n_nodes {
            let mut rem = flat;
            for axis in (0..d).rev() {
                coords[flat * d + axis] = axes[axis][rem % dims[axis]];
                rem /= dims[axis];
            }
            let x = &coords[flat * d..(flat + 1) * d];
            if problem.domain.boundary_distance(x) <= 1e-12 {
                boundary[flat] = true;
                let y = problem.domain.closest_boundary_point(x);
                g_values[flat] = problem.eval_terminal(&y);
            }
        }
        Workspace {
            axes,
            dims,
            spacing,
            boundary,
            g_values,
            coords,
            n_nodes,
        }
    }

    fn coord(&self, flat: usize) -> &[f64] {
        let d = self.dims.len();
        &self.coords[flat * d..(flat + 1) * d]
    }

    fn stride(&self, axis: usize) -> usize {
        self.dims[axis + 1..].iter().product()
    }
}

/// Discrete operator pieces at one node for one control.
struct NodeOperator {
    /// Coefficient of the center value inside L_h.
    center: f64,
    /// (flat neighbor index, coefficient).
    neighbors: Vec<(usize, f64)>,
}

#[allow(clippy::too_many_arguments)]
fn assemble_operator(
    problem: &ControlProblem,
    ws: &Workspace,
    flat: usize,
    v: &[f64],
    upwind: bool,
    a_buf: &mut [f64],
    sigma_buf: &mut [f64],
    b_buf: &mut [f64],
) -> Result<NodeOperator> {
    let d = problem.dim_x;
    let x = ws.coord(flat);
    problem.eval_sigma_sigma_t(x, v, sigma_buf, a_buf);
    problem.eval_drift(x, v, b_buf);

    let mut center = 0.0;
    let mut neighbors: Vec<(usize, f64)> = Vec::with_capacity(4 * d);

    // Second derivatives, axis by axis.
    for i in 0..d {
        let h = ws.spacing[i];
        let s = ws.stride(i);
        let w = 0.5 * a_buf[i * d + i] / (h * h);
        neighbors.push((flat + s, w));
        neighbors.push((flat - s, w));
        center += -2.0 * w;
    }

    // Cross derivative (d = 2 only): monotone seven-point arrangement.
    if d == 2 {
        let a12 = a_buf[1];
        if a12 != 0.0 {
            let hx = ws.spacing[0];
            let hy = ws.spacing[1];
            let sx = ws.stride(0);
            let sy = ws.stride(1);
            let dom_x = 0.5 * a_buf[0] / (hx * hx) - a12.abs() / (2.0 * hx * hy);
            let dom_y = 0.5 * a_buf[3] / (hy * hy) - a12.abs() / (2.0 * hx * hy);
            if dom_x < -1e-12 || dom_y < -1e-12 {
                return Err(Error::NonMonotoneStencil {
                    node: flat,
                    detail: format!(
                        "|a12| = {} dominates the diagonal (a11 = {}, a22 = {}); refine the grid",
                        a12.abs(),
                        a_buf[0],
                        a_buf[3]
                    ),
                });
            }
            let w = a12.abs() / (2.0 * hx * hy);
            if a12 > 0.0 {
                neighbors.push((flat + sx + sy, w));
                neighbors.push((flat - sx - sy, w));
            } else {
                neighbors.push((flat + sx - sy, w));
                neighbors.push((flat - sx + sy, w));
            }
            neighbors.push((flat + sx, -w));
            neighbors.push((flat - sx, -w));
            neighbors.push((flat + sy, -w));
            neighbors.push((flat - sy, -w));
            center += 2.0 * w;
        }
    }

    // Drift.
    for i in 0..d {
        let h = ws.spacing[i];
        let s = ws.stride(i);
        let b = b_buf[i];
        if upwind {
            if b >= 0.0 {
                neighbors.push((flat + s, b / h));
                center += -b / h;
            } else {
                neighbors.push((flat - s, -b / h));
                center += b / h;
            }
        } else {
            neighbors.push((flat + s, b / (2.0 * h)));
            neighbors.push((flat - s, -b / (2.0 * h)));
        }
    }

    Ok(NodeOperator { center, neighbors })
}

/// Central-difference gradient contracted with sigma: the z argument of f.
fn z_argument(
    problem: &ControlProblem,
    ws: &Workspace,
    u: &[f64],
    flat: usize,
    v: &[f64],
    sigma_buf: &mut [f64],
    z_out: &mut [f64],
) {
    let d = problem.dim_x;
    let m = problem.dim_w;
    let x = ws.coord(flat);
    problem.eval_sigma(x, v, sigma_buf);
    for z in z_out.iter_mut() {
        *z = 0.0;
    }
    for i in 0..d {
        let s = ws.stride(i);
        let du = (u[flat + s] - u[flat - s]) / (2.0 * ws.spacing[i]);
        for j in 0..m {
            z_out[j] += du * sigma_buf[i * m + j];
        }
    }
}

/// Value of `L_h(x, v) u + f(x, u, grad_h(u) sigma, v)` at an interior node.
#[allow(clippy::too_many_arguments)]
fn hamiltonian(
    problem: &ControlProblem,
    ws: &Workspace,
    u: &[f64],
    flat: usize,
    v: &[f64],
    upwind: bool,
    bufs: &mut Buffers,
) -> Result<f64> {
    let op = assemble_operator(
        problem, ws, flat, v, upwind, &mut bufs.a, &mut bufs.sigma, &mut bufs.b,
    )?;
    let mut lu = op.center * u[flat];
    for (nb, w) in &op.neighbors {
        lu += w * u[*nb];
    }
    z_argument(problem, ws, u, flat, v, &mut bufs.sigma, &mut bufs.z);
    Ok(lu + problem.eval_driver(ws.coord(flat), u[flat], &bufs.z, v))
}

struct Buffers {
    a: Vec<f64>,
    sigma: Vec<f64>,
    b: Vec<f64>,
    z: Vec<f64>,
}

impl Buffers {
    fn new(problem: &ControlProblem) -> Self {
        let d = problem.dim_x;
        let m = problem.dim_w;
        Buffers {
            a: vec![0.0; d * d],
            sigma: vec![0.0; d * m],
            b: vec![0.0; d],
            z: vec![0.0; m],
        }
    }
}

/// Solves the HJB Dirichlet problem by policy iteration on a tensor grid.
pub fn solve_hjb(problem: &ControlProblem, config: &GridConfig) -> Result<ValueField> {
    config.validate(problem.dim_x)?;
    let ws = Workspace::build(problem, config);
    let interior: Vec<usize> = (0..ws.n_nodes).filter(|&i| !ws.boundary[i]).collect();
    if interior.is_empty() {
        return Err(Error::Config(
            "grid has no interior nodes; refine the grid".into(),
        ));
    }

    let mut u = ws.g_values.clone();
    let mut policy: Vec<u32> = vec![0; ws.n_nodes];
    let mut bufs = Buffers::new(problem);
    let mut iteration_log = Vec::new();
    let mut sweeps = 0usize;

    for _policy_round in 0..config.max_policy_iterations {
        solve_frozen_policy(problem, &ws, &interior, &mut u, &policy, config, &mut bufs, &mut sweeps)?;

        // Policy improvement + residual of the minimized Hamiltonian.
        let mut changed = false;
        let mut sup_res = 0.0f64;
        for &flat in &interior {
            let mut best = f64::INFINITY;
            let mut best_idx = 0u32;
            for (ci, v) in problem.controls.points.iter().enumerate() {
                let h = hamiltonian(problem, &ws, &u, flat, v, config.upwind, &mut bufs)?;
                if h < best {
                    best = h;
                    best_idx = ci as u32;
                }
            }
            if policy[flat] != best_idx {
                policy[flat] = best_idx;
                changed = true;
            }
            sup_res = sup_res.max(best.abs());
        }
        iteration_log.push(sup_res);
        if !changed && sup_res <= config.tolerance {
            return Ok(ValueField {
                axes: ws.axes,
                u,
                policy,
                boundary: ws.boundary,
                iteration_log,
                sweeps,
                sup_residual: sup_res,
            });
        }
    }
    Err(Error::IterationCap {
        what: "policy iteration".into(),
        cap: config.max_policy_iterations,
    })
}

/// Frozen-policy semilinear solve: damped fixed point on the (u, grad u)
/// arguments of f. In 1-d each pass is an exact tridiagonal solve; in 2-d a
/// lexicographic Gauss-Seidel sweep.
#[allow(clippy::too_many_arguments)]
fn solve_frozen_policy(
    problem: &ControlProblem,
    ws: &Workspace,
    interior: &[usize],
    u: &mut [f64],
    policy: &[u32],
    config: &GridConfig,
    bufs: &mut Buffers,
    sweeps: &mut usize,
) -> Result<()> {
    for _ in 0..config.max_inner_iterations {
        *sweeps += 1;
        if problem.dim_x == 1 {
            tridiagonal_pass(problem, ws, interior, u, policy, config, bufs)?;
        } else {
            gauss_seidel_sweep(problem, ws, interior, u, policy, config, bufs)?;
        }
        // Frozen-policy residual.
        let mut res = 0.0f64;
        for &flat in interior {
            let v = &problem.controls.points[policy[flat] as usize];
            let h = hamiltonian(problem, ws, u, flat, v, config.upwind, bufs)?;
            res = res.max(h.abs());
        }
        if res <= 0.5 * config.tolerance {
            return Ok(());
        }
    }
    Err(Error::IterationCap {
        what: "frozen-policy fixed point".into(),
        cap: config.max_inner_iterations,
    })
}

/// One damped pass: exact solve of the linear tridiagonal system with the
/// f arguments frozen at the current iterate.
fn tridiagonal_pass(
    problem: &ControlProblem,
    ws: &Workspace,
    interior: &[usize],
    u: &mut [f64],
    policy: &[u32],
    config: &GridConfig,
    bufs: &mut Buffers,
) -> Result<()> {
    let n = ws.dims[0];
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        if ws.boundary[i] {
            rhs[i] = ws.g_values[i];
        }
    }
    for &flat in interior {
        let v = &problem.controls.points[policy[flat] as usize];
        let op = assemble_operator(
            problem,
            ws,
            flat,
            v,
            config.upwind,
            &mut bufs.a,
            &mut bufs.sigma,
            &mut bufs.b,
        )?;
        diag[flat] = op.center;
        for (nb, w) in &op.neighbors {
            if *nb == flat + 1 {
                upper[flat] += w;
            } else if *nb + 1 == flat {
                lower[flat] += w;
            }
        }
        z_argument(problem, ws, u, flat, v, &mut bufs.sigma, &mut bufs.z);
        rhs[flat] = -problem.eval_driver(ws.coord(flat), u[flat], &bufs.z, v);
    }
    // Thomas algorithm.
    let mut c_star = vec![0.0; n];
    let mut d_star = vec![0.0; n];
    c_star[0] = upper[0] / diag[0];
    d_star[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c_star[i - 1];
        c_star[i] = upper[i] / m;
        d_star[i] = (rhs[i] - lower[i] * d_star[i - 1]) / m;
    }
    let mut solved = vec![0.0; n];
    solved[n - 1] = d_star[n - 1];
    for i in (0..n - 1).rev() {
        solved[i] = d_star[i] - c_star[i] * solved[i + 1];
    }
    for &flat in interior {
        u[flat] += config.damping * (solved[flat] - u[flat]);
    }
    Ok(())
}

/// One damped lexicographic Gauss-Seidel sweep (single-threaded, fixed
/// order, deterministic).
fn gauss_seidel_sweep(
    problem: &ControlProblem,
    ws: &Workspace,
    interior: &[usize],
    u: &mut [f64],
    policy: &[u32],
    config: &GridConfig,
    bufs: &mut Buffers,
) -> Result<()> {
    for &flat in interior {
        let v = &problem.controls.points[policy[flat] as usize];
        let op = assemble_operator(
            problem,
            ws,
            flat,
            v,
            config.upwind,
            &mut bufs.a,
            &mut bufs.sigma,
            &mut bufs.b,
        )?;
        z_argument(problem, ws, u, flat, v, &mut bufs.sigma, &mut bufs.z);
        let f_val = problem.eval_driver(ws.coord(flat), u[flat], &bufs.z, v);
        let mut acc = f_val;
        for (nb, w) in &op.neighbors {
            acc += w * u[*nb];
        }
        let candidate = -acc / op.center;
        u[flat] += config.damping * (candidate - u[flat]);
    }
    Ok(())
}

/// Nodal residual `inf_v { L_h(x,v) u + f(x, u, grad_h(u) sigma(x,v), v) }`
/// at an interior node of a solved field.
pub fn hjb_residual(field: &ValueField, problem: &ControlProblem, node: usize) -> Result<f64> {
    if field.boundary[node] {
        return Err(Error::BoundaryNode);
    }
    let config = GridConfig {
        nodes_per_axis: field.axes.iter().map(|a| a.len()).collect(),
        ..GridConfig::default()
    };
    let ws = Workspace::build_from_axes(problem, field);
    let mut bufs = Buffers::new(problem);
    let mut best = f64::INFINITY;
    for v in &problem.controls.points {
        let h = hamiltonian(problem, &ws, &field.u, node, v, config.upwind, &mut bufs)?;
        if h < best {
            best = h;
        }
    }
    Ok(best)
}

impl Workspace {
    /// Rebuilds grid metadata from a solved field (for residual queries).
    fn build_from_axes(problem: &ControlProblem, field: &ValueField) -> Workspace {
        let axes = field.axes.clone();
        let dims: Vec<usize> = axes.iter().map(|a| a.len()).collect();
        let d = dims.len();
        let spacing: Vec<f64> = axes
            .iter()
            .map(|a| if a.len() > 1 { a[1] - a[0] } else { 1.0 })
            .collect();
        let n_nodes: usize = dims.iter().product();
        let mut coords = vec![0.0; n_nodes * d];
        let mut g_values = vec![0.0; n_nodes];
        for flat in 0..n_nodes {
            let mut rem = flat;
            for axis in (0..d).rev() {
                coords[flat * d + axis] = axes[axis][rem % dims[axis]];
                rem /= dims[axis];
            }
            if field.boundary[flat] {
                let x = coords[flat * d..(flat + 1) * d].to_vec();
                let y = problem.domain.closest_boundary_point(&x);
                g_values[flat] = problem.eval_terminal(&y);
            }
        }
        Workspace {
            axes,
            dims,
            spacing,
            boundary: field.boundary.clone(),
            g_values,
            coords,
            n_nodes,
        }
    }
}

/// Nearest-node feedback policy from a solved field, usable by the path
/// simulator.
pub fn extract_policy(field: &ValueField) -> Policy {
    Policy::Feedback {
        table: ControlTable {
            axes: field.axes.clone(),
            indices: field.policy.clone(),
        },
    }
}
