//! Control-problem definitions: coefficients, domain, control set, declared
//! constants, plus the sampling-based assumption audit and the derivation of
//! the working constants (gamma, delta, theta).

use crate::error::{Error, Result};
use crate::expr::{EvalCtx, Expr, SlotRules};
use crate::rng;
use serde::{Deserialize, Serialize};

/// Bounded domain with exact membership, boundary-distance and
/// closest-boundary-point queries. Every kind satisfies a uniform exterior
/// sphere condition with a computable radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Domain {
    Interval { center: f64, radius: f64 },
    Ball { center: Vec<f64>, radius: f64 },
    AxisBox { center: Vec<f64>, half_widths: Vec<f64> },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Interval { .. } => 1,
            Domain::Ball { center, .. } => center.len(),
            Domain::AxisBox { center, .. } => center.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Domain::Interval { radius, .. } => *radius > 0.0,
            Domain::Ball { center, radius } => *radius > 0.0 && !center.is_empty(),
            Domain::AxisBox {
                center,
                half_widths,
            } => {
                !center.is_empty()
                    && center.len() == half_widths.len()
                    && half_widths.iter().all(|h| *h > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate domain {self:?}")))
        }
    }

    /// Signed boundary distance: positive inside, zero on the boundary,
    /// negative outside. For boxes this is the face-slack minimum, which is
    /// the exact Euclidean distance inside and near faces.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Interval { center, radius } => radius - (x[0] - center).abs(),
            Domain::Ball { center, radius } => radius - dist(x, center),
            Domain::AxisBox {
                center,
                half_widths,
            } => x
                .iter()
                .zip(center)
                .zip(half_widths)
                .map(|((xi, ci), hi)| hi - (xi - ci).abs())
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn contains_closure(&self, x: &[f64]) -> bool {
        self.boundary_distance(x) >= -1e-12
    }

    /// Closest boundary point (exact per kind; deterministic tie-breaks
    /// toward the positive side / lowest axis).
    pub fn closest_boundary_point(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Domain::Interval { center, radius } => {
                if x[0] >= *center {
                    vec![center + radius]
                } else {
                    vec![center - radius]
                }
            }
            Domain::Ball { center, radius } => {
                let r = dist(x, center);
                if r == 0.0 {
                    let mut y = center.clone();
                    y[0] += radius;
                    return y;
                }
                x.iter()
                    .zip(center)
                    .map(|(xi, ci)| ci + (xi - ci) * radius / r)
                    .collect()
            }
            Domain::AxisBox {
                center,
                half_widths,
            } => {
                if self.boundary_distance(x) < 0.0 {
                    // Outside: clamping onto the closed box lands on a face.
                    return x
                        .iter()
                        .zip(center)
                        .zip(half_widths)
                        .map(|((xi, ci), hi)| xi.clamp(ci - hi, ci + hi))
                        .collect();
                }
                let (axis, positive) = self.min_slack_face(x);
                let mut y = x.to_vec();
                y[axis] = center[axis] + if positive { half_widths[axis] } else { -half_widths[axis] };
                y
            }
        }
    }

    /// Outward unit normal associated with the closest boundary feature.
    pub fn outward_normal(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.outward_normal_into(x, &mut out);
        out
    }

    /// As [`Domain::outward_normal`], writing into a caller buffer.
    pub fn outward_normal_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Domain::Interval { center, .. } => {
                out[0] = if x[0] >= *center { 1.0 } else { -1.0 };
            }
            Domain::Ball { center, .. } => {
                let r = dist(x, center);
                if r == 0.0 {
                    out.fill(0.0);
                    out[0] = 1.0;
                    return;
                }
                for (o, (xi, ci)) in out.iter_mut().zip(x.iter().zip(center)) {
                    *o = (xi - ci) / r;
                }
            }
            Domain::AxisBox { .. } => {
                let d = self.dim();
                if self.boundary_distance(x) < 0.0 {
                    let y = self.closest_boundary_point(x);
                    let r = dist(x, &y);
                    if r > 0.0 {
                        for i in 0..d {
                            out[i] = (x[i] - y[i]) / r;
                        }
                        return;
                    }
                }
                let (axis, positive) = self.min_slack_face(x);
                out.fill(0.0);
                out[axis] = if positive { 1.0 } else { -1.0 };
            }
        }
    }

    fn min_slack_face(&self, x: &[f64]) -> (usize, bool) {
        match self {
            Domain::AxisBox {
                center,
                half_widths,
            } => {
                let mut best = (0usize, true);
                let mut best_slack = f64::INFINITY;
                for i in 0..center.len() {
                    let offset = x[i] - center[i];
                    for (slack, positive) in [
                        (half_widths[i] - offset, true),
                        (half_widths[i] + offset, false),
                    ] {
                        if slack < best_slack {
                            best_slack = slack;
                            best = (i, positive);
                        }
                    }
                }
                best
            }
            _ => unreachable!("min_slack_face is box-only"),
        }
    }

    /// Uniform exterior-sphere radius. Interval and ball boundaries are
    /// touched by spheres of exactly the domain radius; for a (convex) box
    /// any positive radius works and the smallest half-width is used.
    pub fn exterior_sphere_radius(&self) -> f64 {
        match self {
            Domain::Interval { radius, .. } | Domain::Ball { radius, .. } => *radius,
            Domain::AxisBox { half_widths, .. } => {
                half_widths.iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Axis-aligned bounding box as (lows, highs).
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Domain::Interval { center, radius } => {
                (vec![center - radius], vec![center + radius])
            }
            Domain::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            Domain::AxisBox {
                center,
                half_widths,
            } => (
                center.iter().zip(half_widths).map(|(c, h)| c - h).collect(),
                center.iter().zip(half_widths).map(|(c, h)| c + h).collect(),
            ),
        }
    }

    pub fn center(&self) -> Vec<f64> {
        match self {
            Domain::Interval { center, .. } => vec![*center],
            Domain::Ball { center, .. } | Domain::AxisBox { center, .. } => center.clone(),
        }
    }

    /// Deterministic sample in the closed domain, keyed by `(seed, stream,
    /// index)`. Construction is rejection-free so sample `i` never depends
    /// on other indices (prefix-stable sampling).
    pub fn sample_closure(&self, seed: u64, stream: u64, index: u64) -> Vec<f64> {
        match self {
            Domain::Interval { center, radius } => {
                let u = rng::uniform(seed, stream, index, 0);
                vec![center + radius * (2.0 * u - 1.0)]
            }
            Domain::AxisBox {
                center,
                half_widths,
            } => (0..center.len())
                .map(|i| {
                    let u = rng::uniform(seed, stream, index, i as u64);
                    center[i] + half_widths[i] * (2.0 * u - 1.0)
                })
                .collect(),
            Domain::Ball { center, radius } => {
                let d = center.len();
                let mut dir: Vec<f64> = (0..d)
                    .map(|i| rng::normal(seed, stream, index, i as u64))
                    .collect();
                let norm = dir.iter().map(|g| g * g).sum::<f64>().sqrt().max(1e-300);
                for g in &mut dir {
                    *g /= norm;
                }
                let u = rng::uniform(seed, stream, index, (2 * d) as u64);
                let r = radius * u.powf(1.0 / d as f64);
                (0..d).map(|i| center[i] + r * dir[i]).collect()
            }
        }
    }

    /// Deterministic boundary sample keyed like [`Domain::sample_closure`].
    pub fn sample_boundary(&self, seed: u64, stream: u64, index: u64) -> Vec<f64> {
        match self {
            Domain::Interval { center, radius } => {
                let u = rng::uniform(seed, stream, index, 0);
                vec![if u < 0.5 { center - radius } else { center + radius }]
            }
            Domain::Ball { center, radius } => {
                let d = center.len();
                let mut dir: Vec<f64> = (0..d)
                    .map(|i| rng::normal(seed, stream, index, i as u64))
                    .collect();
                let norm = dir.iter().map(|g| g * g).sum::<f64>().sqrt().max(1e-300);
                for g in &mut dir {
                    *g /= norm;
                }
                (0..d).map(|i| center[i] + radius * dir[i]).collect()
            }
            Domain::AxisBox {
                center,
                half_widths,
            } => {
                let d = center.len();
                let pick = rng::draw_u64(seed, stream, index, u64::MAX) as usize % (2 * d);
                let (axis, positive) = (pick / 2, pick % 2 == 1);
                let mut y: Vec<f64> = (0..d)
                    .map(|i| {
                        let u = rng::uniform(seed, stream, index, i as u64);
                        center[i] + half_widths[i] * (2.0 * u - 1.0)
                    })
                    .collect();
                y[axis] = center[axis]
                    + if positive {
                        half_widths[axis]
                    } else {
                        -half_widths[axis]
                    };
                y
            }
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Finite discretization `V_h` of the compact control set. Points are kept
/// in the declared order; minimization ties break toward the lowest index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    pub dimension: usize,
    pub points: Vec<Vec<f64>>,
}

impl ControlSet {
    pub fn singleton(point: Vec<f64>) -> Self {
        ControlSet {
            dimension: point.len(),
            points: vec![point],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Config("control set must be nonempty".into()));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.len() != self.dimension {
                return Err(Error::DimensionMismatch {
                    what: format!("controls.points[{i}]"),
                    expected: self.dimension,
                    found: p.len(),
                });
            }
        }
        for i in 0..self.points.len() {
            for j in (i + 1)..self.points.len() {
                if self.points[i] == self.points[j] {
                    return Err(Error::Config(format!(
                        "duplicate control points at indices {i} and {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Declared and derived constants of the standing assumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Lipschitz/growth bound of b, sigma (H1) and the driver growth (H3(i)).
    pub l: f64,
    /// x,z-Lipschitz bound of the driver (H3(ii)).
    pub beta: f64,
    /// One-sided monotonicity constant of the driver in y (H3(iii)); either sign.
    pub alpha: f64,
    /// Ellipticity lower bound (H4(1)).
    pub lambda: f64,
    /// Exterior-sphere radius (H4(2)); defaults to the domain's natural radius.
    #[serde(default)]
    pub rho: Option<f64>,
    /// Exit-moment exponent (H4'). Declared for catalog problems, otherwise
    /// estimated by the exit-moment probe.
    #[serde(default)]
    pub mu: Option<f64>,
    /// y-Lipschitz constant of the driver (H6).
    pub ltilde: f64,
    /// beta^2 - 2 alpha; always recomputed, never trusted from input.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Coupling constant of the forward-SDE contraction estimate.
    #[serde(default)]
    pub delta: Option<f64>,
    /// Working exponent; midpoint of the admissible interval when nonempty.
    #[serde(default)]
    pub theta: Option<f64>,
    /// Reason the theta interval is empty, when it is.
    #[serde(default)]
    pub theta_infeasible: Option<String>,
    /// Barrier margin measured by the supermartingale check.
    #[serde(default)]
    pub mu0: Option<f64>,
    /// Lipschitz constant of the test-shifted driver F in (x, y, z).
    #[serde(default)]
    pub l0: Option<f64>,
}

impl Constants {
    pub fn gamma(&self) -> f64 {
        self.beta * self.beta - 2.0 * self.alpha
    }
}

/// The full problem datum: coefficients, domain, control set, constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProblem {
    pub dim_x: usize,
    pub dim_w: usize,
    pub dim_v: usize,
    pub b: Vec<Expr>,
    pub sigma: Vec<Vec<Expr>>,
    pub f: Expr,
    pub g: Expr,
    pub domain: Domain,
    pub controls: ControlSet,
    pub constants: Constants,
    /// Catalog name when the problem came from the catalog.
    pub name: Option<String>,
}

impl ControlProblem {
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.controls.validate()?;
        if self.domain.dim() != self.dim_x {
            return Err(Error::DimensionMismatch {
                what: "domain dimension".into(),
                expected: self.dim_x,
                found: self.domain.dim(),
            });
        }
        if self.controls.dimension != self.dim_v {
            return Err(Error::DimensionMismatch {
                what: "controls dimension".into(),
                expected: self.dim_v,
                found: self.controls.dimension,
            });
        }
        if self.b.len() != self.dim_x {
            return Err(Error::DimensionMismatch {
                what: "b".into(),
                expected: self.dim_x,
                found: self.b.len(),
            });
        }
        if self.sigma.len() != self.dim_x {
            return Err(Error::DimensionMismatch {
                what: "sigma rows".into(),
                expected: self.dim_x,
                found: self.sigma.len(),
            });
        }
        for (i, row) in self.sigma.iter().enumerate() {
            if row.len() != self.dim_w {
                return Err(Error::DimensionMismatch {
                    what: format!("sigma[{i}]"),
                    expected: self.dim_w,
                    found: row.len(),
                });
            }
        }

        let coeff_rules = SlotRules {
            dim_x: self.dim_x,
            dim_v: Some(self.dim_v),
            dim_z: None,
        };
        let terminal_rules = SlotRules {
            dim_x: self.dim_x,
            dim_v: None,
            dim_z: None,
        };
        let driver_rules = SlotRules {
            dim_x: self.dim_x,
            dim_v: Some(self.dim_v),
            dim_z: Some(self.dim_w),
        };
        for (i, e) in self.b.iter().enumerate() {
            e.validate(&format!("b[{i}]"), coeff_rules)?;
        }
        for (i, row) in self.sigma.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                e.validate(&format!("sigma[{i}][{j}]"), coeff_rules)?;
            }
        }
        self.f.validate("f", driver_rules)?;
        self.g.validate("g", terminal_rules)?;

        if let Some(gamma) = self.constants.gamma {
            if gamma != self.constants.gamma() {
                return Err(Error::Config(format!(
                    "declared gamma {} violates gamma = beta^2 - 2 alpha = {}",
                    gamma,
                    self.constants.gamma()
                )));
            }
        }
        if self.constants.lambda <= 0.0 {
            return Err(Error::Config("lambda must be positive (H4(1))".into()));
        }
        let rho = self.rho();
        if rho <= 0.0 {
            return Err(Error::Config("rho must be positive (H4(2))".into()));
        }
        Ok(())
    }

    /// Exterior-sphere radius in force: declared if present, else geometric.
    pub fn rho(&self) -> f64 {
        self.constants
            .rho
            .unwrap_or_else(|| self.domain.exterior_sphere_radius())
    }

    pub fn eval_drift(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let ctx = EvalCtx::state_control(x, v);
        for (o, e) in out.iter_mut().zip(&self.b) {
            *o = e.eval(&ctx);
        }
    }

    /// Row-major d x m diffusion matrix.
    pub fn eval_sigma(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let ctx = EvalCtx::state_control(x, v);
        for i in 0..self.dim_x {
            for j in 0..self.dim_w {
                out[i * self.dim_w + j] = self.sigma[i][j].eval(&ctx);
            }
        }
    }

    /// Row-major d x d diffusion quadratic form a = sigma sigma^T.
    pub fn eval_sigma_sigma_t(&self, x: &[f64], v: &[f64], sigma_buf: &mut [f64], out: &mut [f64]) {
        self.eval_sigma(x, v, sigma_buf);
        let (d, m) = (self.dim_x, self.dim_w);
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for l in 0..m {
                    s += sigma_buf[i * m + l] * sigma_buf[j * m + l];
                }
                out[i * d + j] = s;
            }
        }
    }

    pub fn eval_driver(&self, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> f64 {
        self.f.eval(&EvalCtx { x, v, y, z })
    }

    pub fn eval_terminal(&self, x: &[f64]) -> f64 {
        self.g.eval(&EvalCtx::state(x))
    }

    /// Applies the generator: 1/2 sum_ij a_ij hess_ij + sum_i b_i grad_i,
    /// with `hess` row-major d x d.
    pub fn generator_apply(&self, x: &[f64], v: &[f64], grad: &[f64], hess: &[f64]) -> f64 {
        let d = self.dim_x;
        let m = self.dim_w;
        let mut sigma_buf = vec![0.0; d * m];
        let mut a = vec![0.0; d * d];
        self.eval_sigma_sigma_t(x, v, &mut sigma_buf, &mut a);
        let mut b = vec![0.0; d];
        self.eval_drift(x, v, &mut b);
        let mut acc = 0.0;
        for i in 0..d {
            acc += b[i] * grad[i];
            for j in 0..d {
                acc += 0.5 * a[i * d + j] * hess[i * d + j];
            }
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Parsing and serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DimensionDoc {
    d: usize,
    m: usize,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct ExplicitDoc {
    dimension: DimensionDoc,
    b: Vec<Expr>,
    sigma: Vec<Vec<Expr>>,
    f: Expr,
    g: Expr,
    domain: Domain,
    controls: ControlSet,
    constants: Constants,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
}

#[derive(Deserialize)]
struct CatalogDoc {
    catalog: String,
    #[serde(default)]
    params: serde_json::Map<String, serde_json::Value>,
}

/// Parses a problem document: either `{"catalog": name, "params": {...}}` or
/// the explicit form. Parsing is inverse to [`serialize_problem`].
pub fn parse_problem_spec(text: &str) -> Result<ControlProblem> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema {
        path: "$".into(),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Schema {
        path: "$".into(),
        message: "problem document must be a JSON object".into(),
    })?;
    let problem = if obj.contains_key("catalog") {
        let doc: CatalogDoc = serde_json::from_value(value.clone()).map_err(|e| Error::Schema {
            path: "catalog".into(),
            message: e.to_string(),
        })?;
        catalog_problem(&doc.catalog, &doc.params)?
    } else {
        let doc: ExplicitDoc = serde_json::from_value(value.clone()).map_err(|e| Error::Schema {
            path: schema_error_path(&e),
            message: e.to_string(),
        })?;
        ControlProblem {
            dim_x: doc.dimension.d,
            dim_w: doc.dimension.m,
            dim_v: doc.dimension.k,
            b: doc.b,
            sigma: doc.sigma,
            f: doc.f,
            g: doc.g,
            domain: doc.domain,
            controls: doc.controls,
            constants: doc.constants,
            name: doc.name,
        }
    };
    problem.validate()?;
    Ok(problem)
}

fn schema_error_path(e: &serde_json::Error) -> String {
    // serde_json reports the failing key in the message; surface line/column
    // for pinpointing inside nested expressions.
    format!("$ (line {}, column {})", e.line(), e.column())
}

/// Canonical serialization: explicit form, keys sorted (serde_json default
/// map ordering), numbers in shortest round-trip form.
pub fn serialize_problem(p: &ControlProblem) -> String {
    let doc = ExplicitDoc {
        dimension: DimensionDoc {
            d: p.dim_x,
            m: p.dim_w,
            k: p.dim_v,
        },
        b: p.b.clone(),
        sigma: p.sigma.clone(),
        f: p.f.clone(),
        g: p.g.clone(),
        domain: p.domain.clone(),
        controls: p.controls.clone(),
        constants: p.constants.clone(),
        name: p.name.clone(),
    };
    serde_json::to_string_pretty(&serde_json::to_value(doc).expect("problem serializes"))
        .expect("canonical JSON")
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

pub const CATALOG_NAMES: &[&str] = &["poisson1d", "semilinear1d", "controlled1d", "poissondisk2d"];

fn param(
    params: &serde_json::Map<String, serde_json::Value>,
    key: &str,
    default: f64,
) -> Result<f64> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v.as_f64().ok_or_else(|| Error::Schema {
            path: format!("params.{key}"),
            message: "expected a number".into(),
        }),
    }
}

fn check_known_params(
    params: &serde_json::Map<String, serde_json::Value>,
    known: &[&str],
) -> Result<()> {
    for key in params.keys() {
        if !known.contains(&key.as_str()) {
            return Err(Error::Schema {
                path: format!("params.{key}"),
                message: "unknown catalog parameter".into(),
            });
        }
    }
    Ok(())
}

/// Builds a catalog problem. Each entry documents whether the strong
/// monotonicity regime (feasible theta interval) holds.
pub fn catalog_problem(
    name: &str,
    params: &serde_json::Map<String, serde_json::Value>,
) -> Result<ControlProblem> {
    let sqrt2 = std::f64::consts::SQRT_2;
    match name {
        // Uncontrolled Dirichlet-Poisson problem: b = 0, sigma = scale,
        // f = 1, g = 0 on (-R, R). Exit time of Brownian motion; u(x) =
        // (R^2 - x^2)/scale^2. gamma = 0, delta = 0: theta interval empty.
        "poisson1d" => {
            check_known_params(params, &["R", "sigma_scale"])?;
            let r = param(params, "R", 1.0)?;
            let scale = param(params, "sigma_scale", sqrt2)?;
            Ok(ControlProblem {
                dim_x: 1,
                dim_w: 1,
                dim_v: 1,
                b: vec![Expr::Const(0.0)],
                sigma: vec![vec![Expr::Const(scale)]],
                f: Expr::Const(1.0),
                g: Expr::Const(0.0),
                domain: Domain::Interval {
                    center: 0.0,
                    radius: r,
                },
                controls: ControlSet::singleton(vec![0.0]),
                constants: Constants {
                    l: scale,
                    beta: 0.0,
                    alpha: 0.0,
                    lambda: scale * scale,
                    rho: None,
                    mu: Some(1.0),
                    ltilde: 0.0,
                    gamma: None,
                    delta: None,
                    theta: None,
                    theta_infeasible: None,
                    mu0: None,
                    l0: None,
                },
                name: Some("poisson1d".into()),
            })
        }
        // Semilinear driver f = -alpha y + c; u solves u'' (scale^2/2) -
        // alpha u + c = 0. gamma = -2 alpha < 0: theta interval nonempty
        // (strong monotonicity regime).
        "semilinear1d" => {
            check_known_params(params, &["R", "sigma_scale", "alpha", "c"])?;
            let r = param(params, "R", 1.0)?;
            let scale = param(params, "sigma_scale", sqrt2)?;
            let alpha = param(params, "alpha", 2.0)?;
            let c = param(params, "c", 1.0)?;
            if alpha <= 0.0 {
                return Err(Error::Schema {
                    path: "params.alpha".into(),
                    message: "semilinear1d requires alpha > 0".into(),
                });
            }
            Ok(ControlProblem {
                dim_x: 1,
                dim_w: 1,
                dim_v: 1,
                b: vec![Expr::Const(0.0)],
                sigma: vec![vec![Expr::Const(scale)]],
                f: Expr::add(Expr::scale(-alpha, Expr::Y), Expr::Const(c)),
                g: Expr::Const(0.0),
                domain: Domain::Interval {
                    center: 0.0,
                    radius: r,
                },
                controls: ControlSet::singleton(vec![0.0]),
                constants: Constants {
                    l: scale.max(alpha).max(c.abs()),
                    beta: 0.0,
                    alpha,
                    lambda: scale * scale,
                    rho: None,
                    mu: Some(1.0),
                    ltilde: alpha,
                    gamma: None,
                    delta: None,
                    theta: None,
                    theta_infeasible: None,
                    mu0: None,
                    l0: None,
                },
                name: Some("semilinear1d".into()),
            })
        }
        // Controlled drift b = v with V_h = {-v_max, +v_max}; HJB reduces to
        // u'' - |u'| + 1 = 0 for sigma_scale = sqrt(2). gamma = 0: theta
        // interval empty (documented; regularity-dependent checks skip).
        "controlled1d" => {
            check_known_params(params, &["R", "sigma_scale", "v_max"])?;
            let r = param(params, "R", 1.0)?;
            let scale = param(params, "sigma_scale", sqrt2)?;
            let v_max = param(params, "v_max", 1.0)?;
            Ok(ControlProblem {
                dim_x: 1,
                dim_w: 1,
                dim_v: 1,
                b: vec![Expr::V(0)],
                sigma: vec![vec![Expr::Const(scale)]],
                f: Expr::Const(1.0),
                g: Expr::Const(0.0),
                domain: Domain::Interval {
                    center: 0.0,
                    radius: r,
                },
                controls: ControlSet {
                    dimension: 1,
                    points: vec![vec![-v_max], vec![v_max]],
                },
                constants: Constants {
                    l: scale + v_max,
                    beta: 0.0,
                    alpha: 0.0,
                    lambda: scale * scale,
                    rho: None,
                    mu: Some(0.5),
                    ltilde: 0.0,
                    gamma: None,
                    delta: None,
                    theta: None,
                    theta_infeasible: None,
                    mu0: None,
                    l0: None,
                },
                name: Some("controlled1d".into()),
            })
        }
        // Two-dimensional Poisson problem on a disk; u(x) = (R^2 - |x|^2) /
        // (2 scale^2). Exercises the ball cut-cell path of the FD solver.
        "poissondisk2d" => {
            check_known_params(params, &["R", "sigma_scale"])?;
            let r = param(params, "R", 1.0)?;
            let scale = param(params, "sigma_scale", sqrt2)?;
            Ok(ControlProblem {
                dim_x: 2,
                dim_w: 2,
                dim_v: 1,
                b: vec![Expr::Const(0.0), Expr::Const(0.0)],
                sigma: vec![
                    vec![Expr::Const(scale), Expr::Const(0.0)],
                    vec![Expr::Const(0.0), Expr::Const(scale)],
                ],
                f: Expr::Const(1.0),
                g: Expr::Const(0.0),
                domain: Domain::Ball {
                    center: vec![0.0, 0.0],
                    radius: r,
                },
                controls: ControlSet::singleton(vec![0.0]),
                constants: Constants {
                    l: 2.0 * scale,
                    beta: 0.0,
                    alpha: 0.0,
                    lambda: scale * scale,
                    rho: None,
                    mu: Some(1.0),
                    ltilde: 0.0,
                    gamma: None,
                    delta: None,
                    theta: None,
                    theta_infeasible: None,
                    mu0: None,
                    l0: None,
                },
                name: Some("poissondisk2d".into()),
            })
        }
        other => Err(Error::UnknownCatalog(other.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Assumption audit
// ---------------------------------------------------------------------------

/// Sampling configuration for assumption audits and constant derivation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub seed: u64,
    pub sample_count: usize,
    /// y probe box: samples satisfy |y| <= y_box.
    pub y_box: f64,
    /// z probe box: each component satisfies |z_j| <= z_box.
    pub z_box: f64,
    /// Minimum pair separation for difference quotients.
    pub min_separation: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            seed: 0x5eed,
            sample_count: 4096,
            y_box: 3.0,
            z_box: 3.0,
            min_separation: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssumptionStatus {
    Pass,
    Fail,
    NotCheckable,
}

/// A sampled point (pair) that witnesses an inequality violation; it can be
/// re-evaluated against the problem to reproduce the violating quotient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Witness {
    PairX {
        x1: Vec<f64>,
        x2: Vec<f64>,
        v: Vec<f64>,
        quotient: f64,
    },
    Growth {
        x: Vec<f64>,
        v: Vec<f64>,
        quotient: f64,
    },
    DriverGrowth {
        x: Vec<f64>,
        y: f64,
        z: Vec<f64>,
        v: Vec<f64>,
        quotient: f64,
    },
    DriverXz {
        x1: Vec<f64>,
        x2: Vec<f64>,
        y: f64,
        z1: Vec<f64>,
        z2: Vec<f64>,
        v: Vec<f64>,
        quotient: f64,
    },
    DriverY {
        x: Vec<f64>,
        y1: f64,
        y2: f64,
        z: Vec<f64>,
        v: Vec<f64>,
        quotient: f64,
    },
    Ellipticity {
        x: Vec<f64>,
        v: Vec<f64>,
        a: Vec<f64>,
        quotient: f64,
    },
    Scalar {
        value: f64,
    },
}

impl Witness {
    /// Recomputes the quotient from the stored points.
    pub fn re_evaluate(&self, p: &ControlProblem) -> f64 {
        match self {
            Witness::PairX { x1, x2, v, .. } => lipschitz_quotient(p, x1, x2, v),
            Witness::Growth { x, v, .. } => growth_quotient(p, x, v),
            Witness::DriverGrowth { x, y, z, v, .. } => driver_growth_quotient(p, x, *y, z, v),
            Witness::DriverXz {
                x1,
                x2,
                y,
                z1,
                z2,
                v,
                ..
            } => driver_xz_quotient(p, x1, x2, *y, z1, z2, v),
            Witness::DriverY { x, y1, y2, z, v, .. } => driver_y_quotient(p, x, *y1, *y2, z, v),
            Witness::Ellipticity { x, v, a, .. } => ellipticity_quotient(p, x, v, a),
            Witness::Scalar { value } => *value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionEntry {
    pub name: String,
    pub status: AssumptionStatus,
    /// Empirical constant (supremum or infimum of the sampled quotients).
    pub estimated: Option<f64>,
    pub declared: Option<f64>,
    pub witness: Option<Witness>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub seed: u64,
    pub entries: Vec<AssumptionEntry>,
}

impl AssumptionReport {
    pub fn entry(&self, name: &str) -> Option<&AssumptionEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn all_pass(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.status != AssumptionStatus::Fail)
    }

    pub fn passes(&self, name: &str) -> bool {
        self.entry(name)
            .map(|e| e.status == AssumptionStatus::Pass)
            .unwrap_or(false)
    }
}

// Slack applied when comparing empirical constants against declared ones;
// sampled suprema may exceed the sharp constant by rounding only.
const AUDIT_SLACK: f64 = 1e-9;

fn over(estimated: f64, declared: f64) -> bool {
    estimated > declared + AUDIT_SLACK * (1.0 + declared.abs())
}

fn lipschitz_quotient(p: &ControlProblem, x1: &[f64], x2: &[f64], v: &[f64]) -> f64 {
    let d = p.dim_x;
    let m = p.dim_w;
    let mut b1 = vec![0.0; d];
    let mut b2 = vec![0.0; d];
    let mut s1 = vec![0.0; d * m];
    let mut s2 = vec![0.0; d * m];
    p.eval_drift(x1, v, &mut b1);
    p.eval_drift(x2, v, &mut b2);
    p.eval_sigma(x1, v, &mut s1);
    p.eval_sigma(x2, v, &mut s2);
    let db = norm_diff(&b1, &b2);
    let ds = norm_diff(&s1, &s2);
    (db + ds) / dist(x1, x2)
}

fn growth_quotient(p: &ControlProblem, x: &[f64], v: &[f64]) -> f64 {
    let d = p.dim_x;
    let m = p.dim_w;
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    p.eval_drift(x, v, &mut b);
    p.eval_sigma(x, v, &mut s);
    (norm(&b) + norm(&s)) / (1.0 + norm(x))
}

fn driver_growth_quotient(p: &ControlProblem, x: &[f64], y: f64, z: &[f64], v: &[f64]) -> f64 {
    let full = p.eval_driver(x, y, z, v).abs();
    let at_zero = p.eval_driver(x, 0.0, z, v).abs();
    (full - at_zero) / (1.0 + y.abs())
}

fn driver_xz_quotient(
    p: &ControlProblem,
    x1: &[f64],
    x2: &[f64],
    y: f64,
    z1: &[f64],
    z2: &[f64],
    v: &[f64],
) -> f64 {
    let df = (p.eval_driver(x1, y, z1, v) - p.eval_driver(x2, y, z2, v)).abs();
    df / (dist(x1, x2) + norm_diff(z1, z2))
}

/// Signed quotient (y1-y2)(f(y1)-f(y2)) / |y1-y2|^2; H3(iii) demands it
/// stay <= -alpha.
fn driver_y_quotient(p: &ControlProblem, x: &[f64], y1: f64, y2: f64, z: &[f64], v: &[f64]) -> f64 {
    let df = p.eval_driver(x, y1, z, v) - p.eval_driver(x, y2, z, v);
    (y1 - y2) * df / ((y1 - y2) * (y1 - y2))
}

fn driver_y_abs_quotient(
    p: &ControlProblem,
    x: &[f64],
    y1: f64,
    y2: f64,
    z: &[f64],
    v: &[f64],
) -> f64 {
    let df = (p.eval_driver(x, y1, z, v) - p.eval_driver(x, y2, z, v)).abs();
    df / (y1 - y2).abs()
}

fn ellipticity_quotient(p: &ControlProblem, x: &[f64], v: &[f64], a_dir: &[f64]) -> f64 {
    let d = p.dim_x;
    let m = p.dim_w;
    let mut sbuf = vec![0.0; d * m];
    let mut a = vec![0.0; d * d];
    p.eval_sigma_sigma_t(x, v, &mut sbuf, &mut a);
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += a[i * d + j] * a_dir[i] * a_dir[j];
        }
    }
    quad / a_dir.iter().map(|t| t * t).sum::<f64>()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// Probe sampling streams.
const STREAM_X1: u64 = 1;
const STREAM_X2: u64 = 2;
const STREAM_V: u64 = 3;
const STREAM_YZ: u64 = 4;
const STREAM_DIR: u64 = 5;

struct Sampler<'a> {
    p: &'a ControlProblem,
    probe: &'a ProbeConfig,
}

impl<'a> Sampler<'a> {
    fn x1(&self, i: u64) -> Vec<f64> {
        self.p.domain.sample_closure(self.probe.seed, STREAM_X1, i)
    }
    fn x2(&self, i: u64) -> Vec<f64> {
        self.p.domain.sample_closure(self.probe.seed, STREAM_X2, i)
    }
    fn control(&self, i: u64) -> &'a [f64] {
        let n = self.p.controls.len() as u64;
        let idx = rng::draw_u64(self.probe.seed, STREAM_V, i, 0) % n;
        &self.p.controls.points[idx as usize]
    }
    fn y_pair(&self, i: u64) -> (f64, f64) {
        let y1 = self.probe.y_box * (2.0 * rng::uniform(self.probe.seed, STREAM_YZ, i, 0) - 1.0);
        let y2 = self.probe.y_box * (2.0 * rng::uniform(self.probe.seed, STREAM_YZ, i, 1) - 1.0);
        (y1, y2)
    }
    fn z_pair(&self, i: u64) -> (Vec<f64>, Vec<f64>) {
        let m = self.p.dim_w;
        let z = |off: u64| -> Vec<f64> {
            (0..m)
                .map(|j| {
                    self.probe.z_box
                        * (2.0 * rng::uniform(self.probe.seed, STREAM_YZ, i, 2 + off * m as u64 + j as u64)
                            - 1.0)
                })
                .collect()
        };
        (z(0), z(1))
    }
    fn direction(&self, i: u64) -> Vec<f64> {
        let d = self.p.dim_x;
        let mut a: Vec<f64> = (0..d)
            .map(|j| rng::normal(self.probe.seed, STREAM_DIR, i, j as u64))
            .collect();
        let n = norm(&a).max(1e-300);
        for t in &mut a {
            *t /= n;
        }
        a
    }
}

/// Audits H1, H3(i)-(iii), H4(1), H4(2), H5 and H6 by sampling point pairs
/// on closure(D) x probe boxes x V_h, reporting the empirical constant for
/// each inequality and a violating witness on failure. H4(2) is structural
/// per domain kind; H5 is arithmetic.
pub fn validate_assumptions(p: &ControlProblem, probe: &ProbeConfig) -> Result<AssumptionReport> {
    if probe.sample_count < 2 {
        return Err(Error::Config("probe.sample_count must be >= 2".into()));
    }
    let s = Sampler { p, probe };
    let n = probe.sample_count;
    let c = &p.constants;
    let mut entries = Vec::new();

    // H1(i): (|b(x1)-b(x2)| + |sigma(x1)-sigma(x2)|) / |x1-x2| <= L.
    {
        let mut worst = 0.0f64;
        let mut witness = None;
        for i in 0..n as u64 {
            let (x1, x2) = (s.x1(i), s.x2(i));
            if dist(&x1, &x2) < probe.min_separation {
                continue;
            }
            let v = s.control(i);
            let q = lipschitz_quotient(p, &x1, &x2, v);
            if q > worst {
                worst = q;
                witness = Some(Witness::PairX {
                    x1,
                    x2,
                    v: v.to_vec(),
                    quotient: q,
                });
            }
        }
        let fail = over(worst, c.l);
        entries.push(AssumptionEntry {
            name: "H1(i)".into(),
            status: if fail {
                AssumptionStatus::Fail
            } else {
                AssumptionStatus::Pass
            },
            estimated: Some(worst),
            declared: Some(c.l),
            witness: if fail { witness } else { None },
            samples: n,
        });
    }

    // H1(ii): (|b| + |sigma|) / (1 + |x|) <= L.
    {
        let mut worst = 0.0f64;
        let mut witness = None;
        for i in 0..n as u64 {
            let x = s.x1(i);
            let v = s.control(i);
            let q = growth_quotient(p, &x, v);
            if q > worst {
                worst = q;
                witness = Some(Witness::Growth {
                    x,
                    v: v.to_vec(),
                    quotient: q,
                });
            }
        }
        let fail = over(worst, c.l);
        entries.push(AssumptionEntry {
            name: "H1(ii)".into(),
            status: if fail {
                AssumptionStatus::Fail
            } else {
                AssumptionStatus::Pass
            },
            estimated: Some(worst),
            declared: Some(c.l),
            witness: if fail { witness } else { None },
            samples: n,
        });
    }

    // H3(i): (|f(x,y,z,v)| - |f(x,0,z,v)|) / (1 + |y|) <= L.
    {
        let mut worst = f64::NEG_INFINITY;
        let mut witness = None;
        for i in 0..n as u64 {
            let x = s.x1(i);
            let v = s.control(i);
            let (y, _) = s.y_pair(i);
            let (z, _) = s.z_pair(i);
            let q = driver_growth_quotient(p, &x, y, &z, v);
            if q > worst {
                worst = q;
                witness = Some(Witness::DriverGrowth {
                    x,
                    y,
                    z,
                    v: v.to_vec(),
                    quotient: q,
                });
            }
        }
        let fail = over(worst, c.l);
        entries.push(AssumptionEntry {
            name: "H3(i)".into(),
            status: if fail {
                AssumptionStatus::Fail
            } else {
                AssumptionStatus::Pass
            },
            estimated: Some(worst),
            declared: Some(c.l),
            witness: if fail { witness } else { None },
            samples: n,
        });
    }

    // H3(ii): |f(x1,y,z1,v) - f(x2,y,z2,v)| / (|x1-x2| + |z1-z2|) <= beta.
    {
        let mut worst = 0.0f64;
        let mut witness = None;
        for i in 0..n as u64 {
            let (x1, x2) = (s.x1(i), s.x2(i));
            let (z1, z2) = s.z_pair(i);
            if dist(&x1, &x2) + norm_diff(&z1, &z2) < probe.min_separation {
                continue;
            }
            let v = s.control(i);
            let (y, _) = s.y_pair(i);
            let q = driver_xz_quotient(p, &x1, &x2, y, &z1, &z2, v);
            if q > worst {
                worst = q;
                witness = Some(Witness::DriverXz {
                    x1,
                    x2,
                    y,
                    z1,
                    z2,
                    v: v.to_vec(),
                    quotient: q,
                });
            }
        }
        let fail = over(worst, c.beta);
        entries.push(AssumptionEntry {
            name: "H3(ii)".into(),
            status: if fail {
                AssumptionStatus::Fail
            } else {
                AssumptionStatus::Pass
            },
            estimated: Some(worst),
            declared: Some(c.beta),
            witness: if fail { witness } else { None },
            samples: n,
        });
    }

    // H3(iii): (y1-y2)(f(y1)-f(y2)) <= -alpha |y1-y2|^2, i.e. the signed
    // quotient stays <= -alpha. The empirical alpha is minus the supremum.
    {
        let mut worst = f64::NEG_INFINITY;
        let mut witness = None;
        for i in 0..n as u64 {
            let x = s.x1(i);
            let v = s.control(i);
            let (y1, y2) = s.y_pair(i);
            if (y1 - y2).abs() < probe.min_separation {
                continue;
            }
            let (z, _) = s.z_pair(i);
            let q = driver_y_quotient(p, &x, y1, y2, &z, v);
            if q > worst {
                worst = q;
                witness = Some(Witness::DriverY {
                    x,
                    y1,
                    y2,
                    z,
                    v: v.to_vec(),
                    quotient: q,
                });
            }
        }
        // worst <= -alpha required; empirical alpha = -worst.
        let fail = over(worst, -c.alpha);
        entries.push(AssumptionEntry {
            name: "H3(iii)".into(),
            status: if fail {
                AssumptionStatus::Fail
            } else {
                AssumptionStatus::Pass
            },
            estimated: Some(-worst),
            declared: Some(c.alpha),
            witness: if fail { witness } else { None },
            samples: n,
        });
    }

    // H4(1): a^T sigma sigma^T a >= lambda |a|^2.
    {
        let mut worst = f64::INFINITY;
        let mut witness = None;
        for i in 0..n as u64 {
            let x = s.x1(i);
            let v = s.control(i);
            let a = s.direction(i);
            let q = ellipticity_quotient(p, &x, v, &a);
            if q < worst {
                worst = q;
                witness = Some(Witness::Ellipticity {
                    x,
                    v: v.to_vec(),
                    a,
                    quotient: q,
                });
            }
        }
        let fail = worst < c.lambda - AUDIT_SLACK * (1.0 + c.lambda.abs());
        entries.push(AssumptionEntry {
            name: "H4(1)".into(),
            status: if fail {
                AssumptionStatus::Fail
            } else {
                AssumptionStatus::Pass
            },
            estimated: Some(worst),
            declared: Some(c.lambda),
            witness: if fail { witness } else { None },
            samples: n,
        });
    }

    // H4(2): structural per domain kind. A declared rho may not exceed the
    // geometric radius for interval/ball; boxes accept any positive rho.
    {
        let natural = p.domain.exterior_sphere_radius();
        let declared = p.rho();
        let strict_kind = !matches!(p.domain, Domain::AxisBox { .. });
        let fail = declared <= 0.0 || (strict_kind && declared > natural * (1.0 + AUDIT_SLACK));
        entries.push(AssumptionEntry {
            name: "H4(2)".into(),
            status: if fail {
                AssumptionStatus::Fail
            } else {
                AssumptionStatus::Pass
            },
            estimated: Some(natural),
            declared: Some(declared),
            witness: if fail {
                Some(Witness::Scalar { value: declared })
            } else {
                None
            },
            samples: 0,
        });
    }

    // H5: mu > gamma = beta^2 - 2 alpha (arithmetic, when mu is declared).
    {
        let gamma = c.gamma();
        match c.mu {
            Some(mu) => {
                let fail = mu <= gamma;
                entries.push(AssumptionEntry {
                    name: "H5".into(),
                    status: if fail {
                        AssumptionStatus::Fail
                    } else {
                        AssumptionStatus::Pass
                    },
                    estimated: Some(mu - gamma),
                    declared: Some(gamma),
                    witness: if fail {
                        Some(Witness::Scalar { value: mu })
                    } else {
                        None
                    },
                    samples: 0,
                });
            }
            None => entries.push(AssumptionEntry {
                name: "H5".into(),
                status: AssumptionStatus::NotCheckable,
                estimated: None,
                declared: Some(gamma),
                witness: None,
                samples: 0,
            }),
        }
    }

    // H6: |f(x,y1,z,v) - f(x,y2,z,v)| <= Ltilde |y1-y2|.
    {
        let mut worst = 0.0f64;
        let mut witness = None;
        for i in 0..n as u64 {
            let x = s.x1(i);
            let v = s.control(i);
            let (y1, y2) = s.y_pair(i);
            if (y1 - y2).abs() < probe.min_separation {
                continue;
            }
            let (z, _) = s.z_pair(i);
            let q = driver_y_abs_quotient(p, &x, y1, y2, &z, v);
            if q > worst {
                worst = q;
                witness = Some(Witness::DriverY {
                    x,
                    y1,
                    y2,
                    z,
                    v: v.to_vec(),
                    quotient: q,
                });
            }
        }
        let fail = over(worst, c.ltilde);
        entries.push(AssumptionEntry {
            name: "H6".into(),
            status: if fail {
                AssumptionStatus::Fail
            } else {
                AssumptionStatus::Pass
            },
            estimated: Some(worst),
            declared: Some(c.ltilde),
            witness: if fail { witness } else { None },
            samples: n,
        });
    }

    Ok(AssumptionReport {
        seed: probe.seed,
        entries,
    })
}

// ---------------------------------------------------------------------------
// Constant derivation
// ---------------------------------------------------------------------------

/// Supremum estimate of the forward-SDE coupling quotient
/// `1/2 |sigma(x)-sigma(x')|_F^2 / |x-x'|^2 + (x-x').(b(x)-b(x')) / |x-x'|^2`
/// over sampled pairs with separation at least `min_separation`. The
/// estimate is monotone nondecreasing in the sample count.
pub fn estimate_delta(p: &ControlProblem, probe: &ProbeConfig) -> f64 {
    let s = Sampler { p, probe };
    let d = p.dim_x;
    let m = p.dim_w;
    let mut b1 = vec![0.0; d];
    let mut b2 = vec![0.0; d];
    let mut s1 = vec![0.0; d * m];
    let mut s2 = vec![0.0; d * m];
    let mut sup = f64::NEG_INFINITY;
    for i in 0..probe.sample_count as u64 {
        let (x1, x2) = (s.x1(i), s.x2(i));
        let sep2 = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        if sep2 < probe.min_separation * probe.min_separation {
            continue;
        }
        let v = s.control(i);
        p.eval_drift(&x1, v, &mut b1);
        p.eval_drift(&x2, v, &mut b2);
        p.eval_sigma(&x1, v, &mut s1);
        p.eval_sigma(&x2, v, &mut s2);
        let frob2: f64 = s1
            .iter()
            .zip(&s2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        let inner: f64 = x1
            .iter()
            .zip(&x2)
            .zip(b1.iter().zip(&b2))
            .map(|((xa, xb), (ba, bb))| (xa - xb) * (ba - bb))
            .sum();
        let q = 0.5 * frob2 / sep2 + inner / sep2;
        if q > sup {
            sup = q;
        }
    }
    if sup.is_finite() {
        sup
    } else {
        0.0
    }
}

/// Derives gamma (exact), delta (sampled supremum), mu (declared or probed
/// via the exit-moment estimate from the `paths` module) and theta (midpoint
/// of the admissible interval, or flagged infeasible).
pub fn derive_constants(p: &ControlProblem, probe: &ProbeConfig) -> Result<Constants> {
    let report = validate_assumptions(p, probe)?;
    for name in ["H1(i)", "H1(ii)", "H3(i)", "H3(ii)", "H3(iii)"] {
        if !report.passes(name) {
            return Err(Error::Refused(format!(
                "derive_constants requires {name} to pass"
            )));
        }
    }

    let mut c = p.constants.clone();
    c.gamma = Some(c.gamma());
    let delta = estimate_delta(p, probe);
    c.delta = Some(delta);

    let mu = match c.mu {
        Some(mu) => Some(mu),
        None => crate::paths::probe_exit_moment_exponent(p, probe),
    };
    c.mu = mu;

    let gamma = c.gamma();
    let cap = -2.0 * delta.max(0.0);
    match mu {
        None => {
            c.theta = None;
            c.theta_infeasible = Some("no stable exit-moment exponent mu found".into());
        }
        Some(mu) => {
            let upper = mu.min(cap);
            if upper > gamma {
                // Midpoint lies strictly inside (gamma, upper), hence
                // theta <= mu and theta < -2 [delta]^+.
                c.theta = Some(0.5 * (gamma + upper));
                c.theta_infeasible = None;
            } else {
                c.theta = None;
                c.theta_infeasible = Some(format!(
                    "empty interval: gamma = {gamma}, min(mu, -2[delta]+) = {upper}"
                ));
            }
        }
    }
    Ok(c)
}
