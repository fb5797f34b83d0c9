//! Constrained elastic-net least squares for the feature weights.
//!
//! Minimizes
//!
//! ```text
//! f(b) + g(b) + i_C(b)
//! f(b) = 1/2 |F b - T|^2 + lambda (1 - mu) / 2 |b|^2
//! g(b) = lambda mu |b|_1
//! C    = { b : C b <= c }
//! ```
//!
//! with a nested proximal scheme: an outer forward (gradient) step on `f` with
//! constant step `1/L`, and an inner Douglas–Rachford loop computing the joint
//! proximal map of `g + i_C` from soft-thresholding and a Hildreth projection.
//! Composing the two proximal maps directly is not equivalent in general, see
//! [`composed_prox_fixed_point`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("mu must lie strictly inside (0, 1), got {0}")]
    InvalidMu(f64),
    #[error("soft-threshold level must be nonnegative, got {0}")]
    NegativeThreshold(f64),
    #[error("global threshold {theta_g} outside [0, {max_value}]")]
    InvalidGlobalThreshold { theta_g: f64, max_value: f64 },
    #[error("polytope row {row} is zero with negative bound {bound}")]
    InfeasibleRow { row: usize, bound: f64 },
    #[error("projection did not converge in {sweeps} sweeps (violation {violation:e})")]
    ProjectionFailed {
        sweeps: usize,
        violation: f64,
        last: Vec<f64>,
    },
    #[error("{stage} loop did not converge in {iterations} iterations (last step {residual:e})")]
    NotConverged {
        stage: &'static str,
        iterations: usize,
        residual: f64,
        last: Vec<f64>,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// Linear inequality system `C x <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    c: Array2<f64>,
    b: Array1<f64>,
}

impl Polytope {
    pub fn new(c: Array2<f64>, b: Array1<f64>) -> Result<Self> {
        if c.nrows() != b.len() {
            return Err(SolverError::ShapeMismatch(format!(
                "C has {} rows but b has {} entries",
                c.nrows(),
                b.len()
            )));
        }
        if c.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite("polytope"));
        }
        for (row, (ci, &bi)) in c.rows().into_iter().zip(b.iter()).enumerate() {
            if bi < 0.0 && ci.iter().all(|&v| v == 0.0) {
                return Err(SolverError::InfeasibleRow { row, bound: bi });
            }
        }
        Ok(Self { c, b })
    }

    /// Weights whose thresholds stay inside `[0, W]` on every training row:
    /// `C = [-F; F]`, `b = [theta_g; W - theta_g]`.
    pub fn from_features(features: ArrayView2<f64>, theta_g: f64, max_value: f64) -> Result<Self> {
        if !(0.0..=max_value).contains(&theta_g) {
            return Err(SolverError::InvalidGlobalThreshold {
                theta_g,
                max_value,
            });
        }
        let m = features.nrows();
        let c = ndarray::concatenate(Axis(0), &[(-&features).view(), features.view()])
            .expect("blocks share the column count");
        let mut b = Array1::from_elem(2 * m, theta_g);
        b.slice_mut(ndarray::s![m..]).fill(max_value - theta_g);
        Self::new(c, b)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.c
    }

    pub fn bounds(&self) -> &Array1<f64> {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn rows(&self) -> usize {
        self.c.nrows()
    }

    /// Largest scaled violation `max_i (c_i x - b_i) / (1 + |b_i|)`, at least 0.
    pub fn max_violation(&self, x: ArrayView1<f64>) -> f64 {
        self.c
            .rows()
            .into_iter()
            .zip(self.b.iter())
            .map(|(ci, &bi)| (ci.dot(&x) - bi) / (1.0 + bi.abs()))
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, x: ArrayView1<f64>, tol: f64) -> bool {
        self.max_violation(x) <= tol
    }
}

/// Hildreth's method: cyclic coordinate ascent on the dual of
/// `min 1/2 |z - x|^2 s.t. C z <= b`, with multipliers clamped at zero.
///
/// The multipliers persist between calls, so projecting a sequence of nearby
/// points starts each solve from the previous dual solution.
#[derive(Debug, Clone)]
pub struct HildrethProjector<'a> {
    polytope: &'a Polytope,
    row_norms: Vec<f64>,
    duals: Vec<f64>,
    tol: f64,
    max_sweeps: usize,
    /// Total sweeps over all calls.
    pub sweeps: usize,
}

impl<'a> HildrethProjector<'a> {
    pub fn new(polytope: &'a Polytope, tol: f64, max_sweeps: usize) -> Self {
        let row_norms = polytope.c.rows().into_iter().map(|r| r.dot(&r)).collect();
        Self {
            polytope,
            row_norms,
            duals: vec![0.0; polytope.rows()],
            tol,
            max_sweeps,
            sweeps: 0,
        }
    }

    pub fn reset(&mut self) {
        self.duals.fill(0.0);
    }

    pub fn project(&mut self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let p = self.polytope;
        if x.len() != p.dim() {
            return Err(SolverError::ShapeMismatch(format!(
                "point has {} entries, polytope dimension is {}",
                x.len(),
                p.dim()
            )));
        }
        let mut z = x.to_owned();
        for (ci, &l) in p.c.rows().into_iter().zip(&self.duals) {
            if l != 0.0 {
                z.scaled_add(-l, &ci);
            }
        }
        let mut violation = f64::INFINITY;
        for _ in 0..self.max_sweeps {
            self.sweeps += 1;
            let mut largest_move = 0.0f64;
            for (i, ci) in p.c.rows().into_iter().enumerate() {
                let norm = self.row_norms[i];
                if norm == 0.0 {
                    continue;
                }
                let residual = ci.dot(&z) - p.b[i];
                let step = (residual / norm).max(-self.duals[i]);
                if step != 0.0 {
                    self.duals[i] += step;
                    z.scaled_add(-step, &ci);
                    largest_move = largest_move.max(step.abs() * norm.sqrt());
                }
            }
            if largest_move <= self.tol {
                violation = p.max_violation(z.view());
                if violation <= self.tol {
                    return Ok(z);
                }
            }
        }
        if !violation.is_finite() {
            violation = p.max_violation(z.view());
        }
        Err(SolverError::ProjectionFailed {
            sweeps: self.max_sweeps,
            violation,
            last: z.to_vec(),
        })
    }
}

/// Euclidean projection of `x` onto `polytope`, from zero multipliers.
pub fn project_polytope(
    x: ArrayView1<f64>,
    polytope: &Polytope,
    tol: f64,
    max_sweeps: usize,
) -> Result<Array1<f64>> {
    HildrethProjector::new(polytope, tol, max_sweeps).project(x)
}

/// Componentwise `sgn(x) max(0, |x| - level)`.
pub fn soft_threshold(x: ArrayView1<f64>, level: f64) -> Result<Array1<f64>> {
    if level.is_nan() || level < 0.0 {
        return Err(SolverError::NegativeThreshold(level));
    }
    Ok(x.mapv(|v| shrink(v, level)))
}

#[inline]
fn shrink(v: f64, level: f64) -> f64 {
    v.signum() * (v.abs() - level).max(0.0)
}

fn check_shapes(features: ArrayView2<f64>, targets: ArrayView1<f64>) -> Result<()> {
    if features.nrows() != targets.len() {
        return Err(SolverError::ShapeMismatch(format!(
            "feature matrix has {} rows but {} targets were given",
            features.nrows(),
            targets.len()
        )));
    }
    Ok(())
}

fn check_regularization(lambda: f64, mu: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SolverError::InvalidLambda(lambda));
    }
    if !(mu > 0.0 && mu < 1.0) {
        return Err(SolverError::InvalidMu(mu));
    }
    Ok(())
}

/// `F^T (F b - T) + lambda (1 - mu) b`.
pub fn grad_f(
    beta: ArrayView1<f64>,
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    lambda: f64,
    mu: f64,
) -> Result<Array1<f64>> {
    check_shapes(features, targets)?;
    if beta.len() != features.ncols() {
        return Err(SolverError::ShapeMismatch(format!(
            "{} weights for {} features",
            beta.len(),
            features.ncols()
        )));
    }
    let residual = features.dot(&beta) - targets;
    Ok(features.t().dot(&residual) + &(&beta * (lambda * (1.0 - mu))))
}

/// The full objective (without the constraint).
pub fn objective(
    beta: ArrayView1<f64>,
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    lambda: f64,
    mu: f64,
) -> f64 {
    let residual = features.dot(&beta) - targets;
    let l2 = beta.dot(&beta);
    let l1: f64 = beta.iter().map(|v| v.abs()).sum();
    0.5 * residual.dot(&residual) + lambda * (0.5 * (1.0 - mu) * l2 + mu * l1)
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
pub fn max_symmetric_eigenvalue(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    if n == 0 {
        return 0.0;
    }
    let mut m = a.to_owned();
    let scale: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[[i, i]]).fold(f64::NEG_INFINITY, f64::max)
}

/// Lipschitz constant `L = eig_max(F^T F) + lambda (1 - mu)` of `grad f`
/// and the step size `1 / L`.
pub fn lipschitz_step(features: ArrayView2<f64>, lambda: f64, mu: f64) -> Result<(f64, f64)> {
    check_regularization(lambda, mu)?;
    let gram = features.t().dot(&features);
    let l = max_symmetric_eigenvalue(gram.view()).max(0.0) + lambda * (1.0 - mu);
    Ok((l, 1.0 / l))
}

/// Regularization strength, tolerances and iteration caps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub lambda: f64,
    pub mu: f64,
    /// Stop when `|b_(k+1) - b_k| < eps_outer`.
    pub eps_outer: f64,
    /// Inner loop stops when its iterate moves less than this.
    pub eps_inner: f64,
    /// Hildreth tolerance on multiplier moves and scaled violation.
    pub projection_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub max_projection_sweeps: usize,
    /// Record the objective after every outer iteration.
    #[serde(default)]
    pub trace: bool,
}

impl SolverParams {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        check_regularization(lambda, mu)?;
        Ok(Self {
            lambda,
            mu,
            eps_outer: 1e-8,
            eps_inner: 1e-8,
            projection_tol: 1e-10,
            max_outer: 100_000,
            max_inner: 10_000,
            max_projection_sweeps: 100_000,
            trace: false,
        })
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = true;
        self
    }

    /// Same tolerances with a different `(lambda, mu)`.
    pub fn with_regularization(&self, lambda: f64, mu: f64) -> Result<Self> {
        check_regularization(lambda, mu)?;
        Ok(Self {
            lambda,
            mu,
            ..self.clone()
        })
    }
}

/// Convergence record of one solve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub projection_sweeps: usize,
    /// `|b_(k+1) - b_k|` at termination.
    pub final_step: f64,
    pub lipschitz: f64,
    pub step_size: f64,
    /// Largest scaled constraint violation of the returned weights.
    pub max_violation: f64,
    pub objective: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub beta: Array1<f64>,
    pub diagnostics: Diagnostics,
}

fn ensure_finite(v: &Array1<f64>, stage: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SolverError::NonFinite(stage))
    }
}

fn distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Trains weights on the polytope built from the feature matrix.
pub fn solve_faith(
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    theta_g: f64,
    max_value: f64,
    params: &SolverParams,
) -> Result<Solution> {
    check_shapes(features, targets)?;
    let polytope = Polytope::from_features(features, theta_g, max_value)?;
    solve_constrained(features, targets, &polytope, params)
}

/// Nested proximal-gradient solve on an arbitrary polytope containing a
/// feasible point.
pub fn solve_constrained(
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    polytope: &Polytope,
    params: &SolverParams,
) -> Result<Solution> {
    check_shapes(features, targets)?;
    if polytope.dim() != features.ncols() {
        return Err(SolverError::ShapeMismatch(format!(
            "polytope dimension {} but {} features",
            polytope.dim(),
            features.ncols()
        )));
    }
    if targets.iter().chain(features.iter()).any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite("training data"));
    }
    let (lambda, mu) = (params.lambda, params.mu);
    let (lipschitz, step) = lipschitz_step(features, lambda, mu)?;
    let level = step * lambda * mu;
    let mut projector =
        HildrethProjector::new(polytope, params.projection_tol, params.max_projection_sweeps);

    let d = features.ncols();
    let mut beta = Array1::<f64>::zeros(d);
    let mut diag = Diagnostics {
        lipschitz,
        step_size: step,
        ..Default::default()
    };
    let mut last_step = f64::INFINITY;
    for outer in 1..=params.max_outer {
        let grad = grad_f(beta.view(), features, targets, lambda, mu)?;
        let x = &beta - &(grad * step);
        let mut z = x.mapv(|v| 2.0 * shrink(v, level) - v);
        let mut z_hat = Array1::zeros(d);
        let mut inner_done = false;
        let mut inner_step = f64::INFINITY;
        for _ in 0..params.max_inner {
            diag.inner_iterations += 1;
            z_hat = projector.project(((&z + &x) * 0.5).view())?;
            let reflected = &z_hat * 2.0 - &z;
            let update = reflected.mapv(|v| shrink(v, level)) - &z_hat;
            inner_step = update.dot(&update).sqrt();
            z += &update;
            if inner_step < params.eps_inner {
                inner_done = true;
                break;
            }
        }
        if !inner_done {
            return Err(SolverError::NotConverged {
                stage: "inner",
                iterations: params.max_inner,
                residual: inner_step,
                last: z_hat.to_vec(),
            });
        }
        ensure_finite(&z_hat, "solver iterate")?;
        last_step = distance(&z_hat, &beta);
        beta = z_hat;
        diag.outer_iterations = outer;
        if params.trace {
            diag.objective_trace
                .push(objective(beta.view(), features, targets, lambda, mu));
        }
        if last_step < params.eps_outer {
            diag.final_step = last_step;
            diag.projection_sweeps = projector.sweeps;
            diag.max_violation = polytope.max_violation(beta.view());
            diag.objective = objective(beta.view(), features, targets, lambda, mu);
            return Ok(Solution {
                beta,
                diagnostics: diag,
            });
        }
    }
    Err(SolverError::NotConverged {
        stage: "outer",
        iterations: params.max_outer,
        residual: last_step,
        last: beta.to_vec(),
    })
}

/// Fixed point of the naive forward-backward-backward iteration
/// `b <- P_C(S(b - step grad f(b)))`.
///
/// It converges, but in general not to the constrained elastic-net minimizer;
/// kept for comparison against [`solve_constrained`].
pub fn composed_prox_fixed_point(
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    polytope: &Polytope,
    params: &SolverParams,
) -> Result<Array1<f64>> {
    check_shapes(features, targets)?;
    let (lambda, mu) = (params.lambda, params.mu);
    let (_, step) = lipschitz_step(features, lambda, mu)?;
    let level = step * lambda * mu;
    let mut projector =
        HildrethProjector::new(polytope, params.projection_tol, params.max_projection_sweeps);
    let mut beta = Array1::<f64>::zeros(features.ncols());
    let mut moved = f64::INFINITY;
    for _ in 0..params.max_outer {
        let grad = grad_f(beta.view(), features, targets, lambda, mu)?;
        let shrunk = (&beta - &(grad * step)).mapv(|v| shrink(v, level));
        let next = projector.project(shrunk.view())?;
        ensure_finite(&next, "composed iterate")?;
        moved = distance(&next, &beta);
        beta = next;
        if moved < params.eps_outer {
            return Ok(beta);
        }
    }
    Err(SolverError::NotConverged {
        stage: "composed",
        iterations: params.max_outer,
        residual: moved,
        last: beta.to_vec(),
    })
}

/// [`composed_prox_fixed_point`] on the training polytope of `features`.
pub fn composed_prox_fixed_point_faith(
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    theta_g: f64,
    max_value: f64,
    params: &SolverParams,
) -> Result<Array1<f64>> {
    let polytope = Polytope::from_features(features, theta_g, max_value)?;
    composed_prox_fixed_point(features, targets, &polytope, params)
}
