//! Least-squares projection onto basis functions of the state, the
//! conditional-expectation surrogate used by the backward BSDE solver.
//!
//! Both basis kinds contain the constants, so in-sample fitted values
//! preserve sample means exactly; the driverless BSDE solve therefore
//! telescopes to the plain Monte Carlo mean.

use crate::error::{Error, Result};
use crate::problem::Domain;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisSpec {
    /// Monomials up to a total degree, on coordinates scaled to the domain
    /// bounding box.
    Polynomial { degree: usize },
    /// Indicators of a uniform partition of the bounding box,
    /// `resolution` cells per axis.
    PiecewiseConstant { resolution: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub basis: BasisSpec,
    /// Ridge weight added to the normal matrix; 0 solves by spectral
    /// pseudo-inverse.
    pub ridge: f64,
    /// Fixed-point passes resolving the driver's implicit y-dependence.
    pub picard_iterations: usize,
    /// Keep per-path, per-step (y, z) tables on the solution (memory is
    /// O(paths x steps); summaries never need them).
    #[serde(default)]
    pub store_paths: bool,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            basis: BasisSpec::Polynomial { degree: 2 },
            ridge: 0.0,
            picard_iterations: 3,
            store_paths: false,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ridge < 0.0 {
            return Err(Error::Config("ridge must be nonnegative".into()));
        }
        if self.picard_iterations == 0 {
            return Err(Error::Config("picard_iterations must be >= 1".into()));
        }
        if let BasisSpec::PiecewiseConstant { resolution } = self.basis {
            if resolution == 0 {
                return Err(Error::Config("partition resolution must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Basis evaluator bound to a domain's bounding box.
#[derive(Debug, Clone)]
pub enum Projector {
    Poly {
        lo: Vec<f64>,
        half: Vec<f64>,
        /// Multi-indices in graded order; the first is the constant.
        exponents: Vec<Vec<u32>>,
    },
    Cells {
        lo: Vec<f64>,
        width: Vec<f64>,
        resolution: usize,
        dim: usize,
    },
}

impl Projector {
    pub fn new(spec: &BasisSpec, domain: &Domain) -> Projector {
        let (lo, hi) = domain.bounding_box();
        match spec {
            BasisSpec::Polynomial { degree } => {
                let half: Vec<f64> = lo
                    .iter()
                    .zip(&hi)
                    .map(|(a, b)| ((b - a) / 2.0).max(1e-12))
                    .collect();
                let exponents = multi_indices(lo.len(), *degree);
                Projector::Poly { lo, half, exponents }
            }
            BasisSpec::PiecewiseConstant { resolution } => {
                let width: Vec<f64> = lo
                    .iter()
                    .zip(&hi)
                    .map(|(a, b)| ((b - a) / *resolution as f64).max(1e-12))
                    .collect();
                Projector::Cells {
                    dim: lo.len(),
                    lo,
                    width,
                    resolution: *resolution,
                }
            }
        }
    }

    /// Number of basis functions (monomials or cells).
    pub fn dim(&self) -> usize {
        match self {
            Projector::Poly { exponents, .. } => exponents.len(),
            Projector::Cells {
                resolution, dim, ..
            } => resolution.pow(*dim as u32),
        }
    }

    pub fn eval_poly(&self, x: &[f64], out: &mut [f64]) {
        if let Projector::Poly { lo, half, exponents } = self {
            for (k, exps) in exponents.iter().enumerate() {
                let mut val = 1.0;
                for (i, &e) in exps.iter().enumerate() {
                    if e > 0 {
                        let s = (x[i] - lo[i]) / half[i] - 1.0;
                        val *= s.powi(e as i32);
                    }
                }
                out[k] = val;
            }
        }
    }

    pub fn cell(&self, x: &[f64]) -> usize {
        if let Projector::Cells {
            lo,
            width,
            resolution,
            dim,
        } = self
        {
            let mut flat = 0usize;
            for i in 0..*dim {
                let k = (((x[i] - lo[i]) / width[i]).floor() as i64)
                    .clamp(0, *resolution as i64 - 1) as usize;
                flat = flat * resolution + k;
            }
            flat
        } else {
            unreachable!()
        }
    }
}

fn multi_indices(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; dim]];
    for total in 1..=degree {
        let mut stack = vec![(vec![], total as u32)];
        while let Some((prefix, remaining)) = stack.pop() {
            if prefix.len() == dim - 1 {
                let mut idx = prefix.clone();
                idx.push(remaining);
                out.push(idx);
            } else {
                for e in (0..=remaining).rev() {
                    let mut next = prefix.clone();
                    next.push(e);
                    stack.push((next, remaining - e));
                }
            }
        }
    }
    out
}

/// Evaluated design: basis rows (polynomial) or cell indices (partition),
/// reusable across backward steps without reallocation.
#[derive(Debug, Default)]
pub struct Design {
    basis: Vec<f64>,
    cells: Vec<usize>,
    k: usize,
    n: usize,
}

impl Design {
    /// Evaluates the design for `n` sample points.
    pub fn build<'a>(
        &mut self,
        projector: &Projector,
        points: impl Fn(usize) -> &'a [f64],
        n: usize,
    ) {
        self.n = n;
        match projector {
            Projector::Poly { .. } => {
                self.k = projector.dim();
                self.basis.resize(n * self.k, 0.0);
                for i in 0..n {
                    projector.eval_poly(points(i), &mut self.basis[i * self.k..(i + 1) * self.k]);
                }
            }
            Projector::Cells { .. } => {
                self.cells.resize(n, 0);
                for i in 0..n {
                    self.cells[i] = projector.cell(points(i));
                }
            }
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.k..(i + 1) * self.k]
    }
}

/// Fitted regression surfaces for several targets sharing one design.
pub enum Fit {
    Linear { coeffs: Vec<DVector<f64>> },
    Cells {
        means: Vec<Vec<f64>>,
        global: Vec<f64>,
        counts: Vec<usize>,
    },
}

impl Fit {
    /// Predicted values of every target at `x`.
    pub fn predict(&self, projector: &Projector, x: &[f64], out: &mut [f64]) {
        match self {
            Fit::Linear { coeffs } => {
                let k = projector.dim();
                let mut basis = vec![0.0; k];
                projector.eval_poly(x, &mut basis);
                for (t, c) in coeffs.iter().enumerate() {
                    out[t] = basis.iter().zip(c.iter()).map(|(b, w)| b * w).sum();
                }
            }
            Fit::Cells {
                means,
                global,
                counts,
            } => {
                let cell = projector.cell(x);
                for t in 0..global.len() {
                    out[t] = if counts[cell] > 0 {
                        means[t][cell]
                    } else {
                        global[t]
                    };
                }
            }
        }
    }

    /// In-sample prediction from a prebuilt design row (no reevaluation,
    /// no allocation).
    pub fn predict_design(&self, design: &Design, i: usize, out: &mut [f64]) {
        match self {
            Fit::Linear { coeffs } => {
                let row = design.row(i);
                for (t, c) in coeffs.iter().enumerate() {
                    out[t] = row.iter().zip(c.iter()).map(|(b, w)| b * w).sum();
                }
            }
            Fit::Cells {
                means,
                global,
                counts,
            } => {
                let cell = design.cells[i];
                for t in 0..global.len() {
                    out[t] = if counts[cell] > 0 {
                        means[t][cell]
                    } else {
                        global[t]
                    };
                }
            }
        }
    }
}

/// Fits all targets against a prebuilt design.
pub fn fit_design(
    projector: &Projector,
    design: &Design,
    targets: &[Vec<f64>],
    ridge: f64,
    step: usize,
) -> Result<Fit> {
    let n = design.n;
    if n == 0 {
        return Err(Error::Regression {
            step,
            message: "no active samples".into(),
        });
    }
    match projector {
        Projector::Poly { .. } => {
            let k = design.k;
            let mut ata = DMatrix::<f64>::zeros(k, k);
            let mut aty: Vec<DVector<f64>> =
                targets.iter().map(|_| DVector::zeros(k)).collect();
            for i in 0..n {
                let basis = design.row(i);
                for r in 0..k {
                    if !basis[r].is_finite() {
                        return Err(Error::Regression {
                            step,
                            message: format!("non-finite basis value at sample {i}"),
                        });
                    }
                    for c in r..k {
                        ata[(r, c)] += basis[r] * basis[c];
                    }
                }
                for (t, target) in targets.iter().enumerate() {
                    let y = target[i];
                    if !y.is_finite() {
                        return Err(Error::Regression {
                            step,
                            message: format!("non-finite target at sample {i}"),
                        });
                    }
                    for r in 0..k {
                        aty[t][r] += basis[r] * y;
                    }
                }
            }
            for r in 0..k {
                for c in 0..r {
                    ata[(r, c)] = ata[(c, r)];
                }
            }
            let coeffs = solve_normal_equations(ata, &aty, ridge, step)?;
            Ok(Fit::Linear { coeffs })
        }
        Projector::Cells { .. } => {
            let k = projector.dim();
            let mut counts = vec![0usize; k];
            let mut sums: Vec<Vec<f64>> = targets.iter().map(|_| vec![0.0; k]).collect();
            let mut totals = vec![0.0; targets.len()];
            for i in 0..n {
                let cell = design.cells[i];
                counts[cell] += 1;
                for (t, target) in targets.iter().enumerate() {
                    sums[t][cell] += target[i];
                    totals[t] += target[i];
                }
            }
            let means: Vec<Vec<f64>> = sums
                .into_iter()
                .map(|row| {
                    row.iter()
                        .zip(&counts)
                        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                        .collect()
                })
                .collect();
            let global: Vec<f64> = totals.iter().map(|t| t / n as f64).collect();
            Ok(Fit::Cells {
                means,
                global,
                counts,
            })
        }
    }
}

/// Fits all targets against basis functions of the sample points.
/// `points(i)` is the i-th sample state and `targets[t][i]` its t-th target.
pub fn fit<'a>(
    projector: &Projector,
    points: impl Fn(usize) -> &'a [f64],
    n: usize,
    targets: &[Vec<f64>],
    ridge: f64,
    step: usize,
) -> Result<Fit> {
    let mut design = Design::default();
    design.build(projector, points, n);
    fit_design(projector, &design, targets, ridge, step)
}

/// Solves (A^T A + ridge I) beta = A^T y. With zero ridge a spectral
/// pseudo-inverse handles rank deficiency (all paths at one point, say)
/// while reproducing the exact least-squares projection otherwise.
fn solve_normal_equations(
    ata: DMatrix<f64>,
    aty: &[DVector<f64>],
    ridge: f64,
    step: usize,
) -> Result<Vec<DVector<f64>>> {
    let k = ata.nrows();
    if ridge > 0.0 {
        let mut m = ata;
        for i in 0..k {
            m[(i, i)] += ridge;
        }
        let chol = m.cholesky().ok_or_else(|| Error::Regression {
            step,
            message: "ridge-regularized normal matrix is not positive definite; \
                      raise the regularization weight"
                .into(),
        })?;
        return Ok(aty.iter().map(|rhs| chol.solve(rhs)).collect());
    }
    let eig = ata.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if !max_ev.is_finite() {
        return Err(Error::Regression {
            step,
            message: "normal matrix has non-finite spectrum".into(),
        });
    }
    let threshold = max_ev * (k as f64) * f64::EPSILON;
    let coeffs = aty
        .iter()
        .map(|rhs| {
            let projected = eig.eigenvectors.transpose() * rhs;
            let mut scaled = projected;
            for i in 0..k {
                let ev = eig.eigenvalues[i];
                scaled[i] = if ev > threshold { scaled[i] / ev } else { 0.0 };
            }
            &eig.eigenvectors * scaled
        })
        .collect();
    Ok(coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interval() -> Domain {
        Domain::Interval {
            center: 0.0,
            radius: 1.0,
        }
    }

    #[test]
    fn polynomial_fit_recovers_quadratics_exactly() {
        let proj = Projector::new(&BasisSpec::Polynomial { degree: 2 }, &interval());
        assert_eq!(proj.dim(), 3);
        let xs: Vec<[f64; 1]> = (0..50).map(|i| [-1.0 + 0.04 * i as f64]).collect();
        let target: Vec<f64> = xs.iter().map(|x| 1.5 - 2.0 * x[0] + 0.7 * x[0] * x[0]).collect();
        let fit = fit(&proj, |i| &xs[i], xs.len(), &[target.clone()], 0.0, 0).unwrap();
        let mut out = [0.0];
        for (x, want) in xs.iter().zip(&target) {
            fit.predict(&proj, x, &mut out);
            assert!((out[0] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_design_returns_sample_mean() {
        // All samples at one point: the pseudo-inverse projects onto the
        // constant, so the prediction is the mean of the targets.
        let proj = Projector::new(&BasisSpec::Polynomial { degree: 2 }, &interval());
        let xs: Vec<[f64; 1]> = (0..8).map(|_| [0.25]).collect();
        let target: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let fit = fit(&proj, |i| &xs[i], 8, &[target.clone()], 0.0, 0).unwrap();
        let mut out = [0.0];
        fit.predict(&proj, &[0.25], &mut out);
        assert!((out[0] - 3.5).abs() < 1e-10, "got {}", out[0]);
    }

    #[test]
    fn fitted_values_preserve_sample_means() {
        let proj = Projector::new(&BasisSpec::Polynomial { degree: 2 }, &interval());
        let xs: Vec<[f64; 1]> = (0..40)
            .map(|i| [((i * 37) % 41) as f64 / 20.5 - 1.0])
            .collect();
        let target: Vec<f64> = xs.iter().map(|x| (5.0 * x[0]).sin()).collect();
        let f = fit(&proj, |i| &xs[i], xs.len(), &[target.clone()], 0.0, 0).unwrap();
        let mut out = [0.0];
        let mut fitted_sum = 0.0;
        for x in &xs {
            f.predict(&proj, x, &mut out);
            fitted_sum += out[0];
        }
        let target_sum: f64 = target.iter().sum();
        assert!(
            (fitted_sum - target_sum).abs() < 1e-9,
            "fitted {fitted_sum} vs target {target_sum}"
        );
    }

    #[test]
    fn piecewise_constant_means_per_cell() {
        let proj = Projector::new(&BasisSpec::PiecewiseConstant { resolution: 2 }, &interval());
        assert_eq!(proj.dim(), 2);
        let xs = [[-0.5], [-0.4], [0.5], [0.6]];
        let target = vec![1.0, 3.0, 10.0, 20.0];
        let f = fit(&proj, |i| &xs[i], 4, &[target], 0.0, 0).unwrap();
        let mut out = [0.0];
        f.predict(&proj, &[-0.7], &mut out);
        assert_eq!(out[0], 2.0);
        f.predict(&proj, &[0.9], &mut out);
        assert_eq!(out[0], 15.0);
    }

    #[test]
    fn multi_index_count_matches_binomial() {
        // (d + p choose p) monomials of total degree <= p.
        assert_eq!(multi_indices(2, 2).len(), 6);
        assert_eq!(multi_indices(1, 3).len(), 4);
        assert_eq!(multi_indices(3, 2).len(), 10);
    }

    #[test]
    fn ridge_keeps_solver_defined_on_rank_deficient_designs() {
        let proj = Projector::new(&BasisSpec::Polynomial { degree: 2 }, &interval());
        let xs: Vec<[f64; 1]> = (0..5).map(|_| [0.0]).collect();
        let target = vec![1.0; 5];
        let f = fit(&proj, |i| &xs[i], 5, &[target], 1e-6, 0).unwrap();
        let mut out = [0.0];
        f.predict(&proj, &[0.0], &mut out);
        assert!(out[0].is_finite());
    }
}
