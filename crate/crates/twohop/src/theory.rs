//! Reduced nuclear-norm margin programs for the complexity-one family, with
//! and without identity supervision.
//!
//! Both programs minimize the nuclear norm of the logit-template matrix over
//! a block-structured parametrization, subject to unit training margins. The
//! identity-supervised program is solved in the slack-reformulated variables
//! `(a1, a2, b1, b2, c1, c2, d1, d2, e, f, t)` with `g = -e` and `h = -f`
//! fixed by the row-sum symmetry; the no-identity program uses the symmetric
//! variables `(a1, a2, b1, b2, alpha)` with `beta = -alpha`.
//!
//! A dense full-matrix oracle (accelerated proximal gradient with
//! singular-value soft-thresholding) cross-checks the reduced solutions at
//! small n.

use crate::analysis::{margins_from_w, MarginReport};
use crate::taskgen::{build_layout, generate, DatasetSpec, ExampleKind};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid dimension: need n >= 2, got {0}")]
    InvalidDimension(usize),
    #[error("inner radicand {0} is negative beyond tolerance; inconsistent point")]
    NegativeRadicand(f64),
    #[error("point violates equality constraints (residual {0:.3e})")]
    InfeasiblePoint(f64),
    #[error("solver did not converge: feasibility {feasibility:.3e}, kkt {kkt:.3e}")]
    DidNotConverge { feasibility: f64, kkt: f64 },
    #[error("oracle only supported up to n = 8, got {0}")]
    OracleTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Program {
    Id,
    NoId,
}

/// Restricted-form parameters for the identity-supervised program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedPointId {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub c1: f64,
    pub c2: f64,
    pub d1: f64,
    pub d2: f64,
    pub e: f64,
    pub f: f64,
    pub g: f64,
    pub h: f64,
    /// Slack bounding `|a1*d1 - b1*c1|`.
    pub t: f64,
    pub n: usize,
}

impl ReducedPointId {
    pub fn zero(n: usize) -> Self {
        Self {
            a1: 0.0,
            a2: 0.0,
            b1: 0.0,
            b2: 0.0,
            c1: 0.0,
            c2: 0.0,
            d1: 0.0,
            d2: 0.0,
            e: 0.0,
            f: 0.0,
            g: 0.0,
            h: 0.0,
            t: 0.0,
            n,
        }
    }

    /// `u = a1*d1 - b1*c1`, the determinant the slack variable bounds.
    pub fn u(&self) -> f64 {
        self.a1 * self.d1 - self.b1 * self.c1
    }

    fn from_vars(x: &[f64], n: usize) -> Self {
        Self {
            a1: x[0],
            a2: x[1],
            b1: x[2],
            b2: x[3],
            c1: x[4],
            c2: x[5],
            d1: x[6],
            d2: x[7],
            e: x[8],
            f: x[9],
            g: -x[8],
            h: -x[9],
            t: x[10],
            n,
        }
    }

    fn to_vars(self) -> [f64; 11] {
        [
            self.a1, self.a2, self.b1, self.b2, self.c1, self.c2, self.d1, self.d2, self.e,
            self.f, self.t,
        ]
    }
}

/// Symmetric-form parameters for the no-identity (failure) program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedPointNoId {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub alpha: f64,
    /// Fixed to `-alpha` by the row-sum symmetry.
    pub beta: f64,
    pub n: usize,
}

impl ReducedPointNoId {
    fn from_vars(x: &[f64], n: usize) -> Self {
        Self {
            a1: x[0],
            a2: x[1],
            b1: x[2],
            b2: x[3],
            alpha: x[4],
            beta: -x[4],
            n,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReducedPoint {
    Id(ReducedPointId),
    NoId(ReducedPointNoId),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub n: usize,
    pub program: Program,
    pub point: ReducedPoint,
    pub objective: f64,
    pub feasibility_residual: f64,
    pub kkt_residual: f64,
    /// Inequality multipliers first, then equality multipliers.
    pub multipliers: Vec<f64>,
    /// Multiclass margin `q` per OOD query.
    pub margins: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverConfig {
    pub starts: usize,
    pub outer_rounds: usize,
    pub inner_iters: usize,
    pub rho0: f64,
    pub rho_max: f64,
    pub tol_feasibility: f64,
    pub tol_kkt: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            starts: 8,
            outer_rounds: 20,
            inner_iters: 40_000,
            rho0: 10.0,
            rho_max: 1e7,
            tol_feasibility: 1e-7,
            tol_kkt: 1e-5,
            seed: 0,
        }
    }
}

/// Assemble the full `(2n+2) x 2n` logit-template matrix from a restricted
/// point. Rows are ordered subjects, bridges, r1, r2; columns bridges then
/// objects.
pub fn assemble_w(point: &ReducedPointId, n: usize) -> Result<DMatrix<f64>, TheoryError> {
    if n < 2 {
        return Err(TheoryError::InvalidDimension(n));
    }
    let mut w = DMatrix::zeros(2 * n + 2, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let diag = if i == j { 1.0 } else { 0.0 };
            w[(i, j)] = point.a1 * diag + point.a2; // subject -> bridge
            w[(i, n + j)] = point.c1 * diag + point.c2; // subject -> object
            w[(n + i, j)] = point.b1 * diag + point.b2; // bridge -> bridge
            w[(n + i, n + j)] = point.d1 * diag + point.d2; // bridge -> object
        }
    }
    for j in 0..n {
        w[(2 * n, j)] = point.e;
        w[(2 * n, n + j)] = point.g;
        w[(2 * n + 1, j)] = point.f;
        w[(2 * n + 1, n + j)] = point.h;
    }
    Ok(w)
}

/// Symmetric no-identity counterpart of [`assemble_w`].
pub fn assemble_w_noid(point: &ReducedPointNoId, n: usize) -> Result<DMatrix<f64>, TheoryError> {
    if n < 2 {
        return Err(TheoryError::InvalidDimension(n));
    }
    let mut w = DMatrix::zeros(2 * n + 2, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let diag = if i == j { 1.0 } else { 0.0 };
            w[(i, j)] = point.a1 * diag + point.a2;
            w[(i, n + j)] = point.b1 * diag + point.b2;
            w[(n + i, j)] = point.b1 * diag + point.b2;
            w[(n + i, n + j)] = point.a1 * diag + point.a2;
        }
    }
    for j in 0..n {
        w[(2 * n, j)] = point.alpha;
        w[(2 * n, n + j)] = point.beta;
        w[(2 * n + 1, j)] = point.beta;
        w[(2 * n + 1, n + j)] = point.alpha;
    }
    Ok(w)
}

/// Closed-form nuclear norm of the restricted-form matrix.
pub fn nuclear_norm_closed(point: &ReducedPointId, n: usize) -> Result<f64, TheoryError> {
    if n < 2 {
        return Err(TheoryError::InvalidDimension(n));
    }
    let nf = n as f64;
    let ReducedPointId {
        a1,
        a2,
        b1,
        b2,
        c1,
        c2,
        d1,
        d2,
        e,
        f,
        g,
        h,
        ..
    } = *point;
    let c_a1 = a1 * a1 + b1 * b1;
    let c_a2 = 2.0 * a1 * a2 + nf * a2 * a2 + 2.0 * b1 * b2 + nf * b2 * b2 + e * e + f * f;
    let c_d1 = c1 * c1 + d1 * d1;
    let c_d2 = 2.0 * c1 * c2 + nf * c2 * c2 + 2.0 * d1 * d2 + nf * d2 * d2 + g * g + h * h;
    let c_b1 = a1 * c1 + b1 * d1;
    let c_b2 = a1 * c2 + a2 * c1 + nf * a2 * c2 + b1 * d2 + b2 * d1 + nf * b2 * d2 + e * g + f * h;
    let u = (a1 * d1 - b1 * c1).abs();

    let big_a = c_a1 + nf * c_a2;
    let big_d = c_d1 + nf * c_d2;
    let big_b = c_b1 + nf * c_b2;
    let mut radicand = big_a * big_d - big_b * big_b;
    if radicand < 0.0 {
        if radicand < -1e-9 {
            return Err(TheoryError::NegativeRadicand(radicand));
        }
        // degenerate A*D = B^2 case, clamp float dust
        radicand = 0.0;
    }
    Ok((nf - 1.0) * (c_a1 + c_d1 + 2.0 * u).sqrt()
        + (big_a + big_d + 2.0 * radicand.sqrt()).sqrt())
}

fn equality_residual_id(p: &ReducedPointId) -> f64 {
    let nf = p.n as f64;
    let h1 = p.a1 + p.c1 + nf * (p.a2 + p.c2);
    let h2 = p.b1 + p.d1 + nf * (p.b2 + p.d2);
    let s1 = p.e + p.g;
    let s2 = p.f + p.h;
    h1.abs().max(h2.abs()).max(s1.abs()).max(s2.abs())
}

/// Simplified objective `(n-1)*sqrt(M1) + sqrt(2*M2)` at a point satisfying
/// the row-sum equalities.
pub fn objective_id(point: &ReducedPointId, n: usize) -> Result<f64, TheoryError> {
    if n < 2 {
        return Err(TheoryError::InvalidDimension(n));
    }
    let res = equality_residual_id(point);
    if res > 1e-8 {
        return Err(TheoryError::InfeasiblePoint(res));
    }
    let nf = n as f64;
    let m1 = point.a1 * point.a1
        + point.b1 * point.b1
        + point.c1 * point.c1
        + point.d1 * point.d1
        + 2.0 * point.t;
    let x1 = point.a1 + nf * point.a2;
    let x2 = point.b1 + nf * point.b2;
    let m2 = x1 * x1 + x2 * x2 + nf * point.e * point.e + nf * point.f * point.f;
    Ok((nf - 1.0) * m1.sqrt() + (2.0 * m2).sqrt())
}

// ---------------------------------------------------------------------------
// Constrained program descriptions
// ---------------------------------------------------------------------------

/// A smooth nonlinear program `min f` s.t. `g_i >= 0`, `h_j = 0`.
trait NlProgram {
    fn dim(&self) -> usize;
    fn objective(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64;
    fn inequality_count(&self) -> usize;
    fn equality_count(&self) -> usize;
    fn inequality(&self, k: usize, x: &[f64], grad: Option<&mut [f64]>) -> f64;
    fn equality(&self, k: usize, x: &[f64], grad: Option<&mut [f64]>) -> f64;
}

struct IdProgram {
    n: f64,
}

impl NlProgram for IdProgram {
    fn dim(&self) -> usize {
        11
    }

    // x = [a1, a2, b1, b2, c1, c2, d1, d2, e, f, t]
    fn objective(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let n = self.n;
        let (a1, a2, b1, b2, c1, _c2, d1, _d2, e, f, t) =
            (x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8], x[9], x[10]);
        // M1 is floored well away from zero: an infeasible iterate with a
        // very negative slack would otherwise drive M1 through zero and blow
        // up the sqrt gradient. The floor is unreachable from the feasible
        // set (there M1 >= a1^2 >= 1), so the solution region is untouched.
        let m1_raw = a1 * a1 + b1 * b1 + c1 * c1 + d1 * d1 + 2.0 * t;
        let live = if m1_raw > 1e-8 { 1.0 } else { 0.0 };
        let m1 = m1_raw.max(1e-8);
        let x1 = a1 + n * a2;
        let x2 = b1 + n * b2;
        let m2 = x1 * x1 + x2 * x2 + n * e * e + n * f * f;
        let r1 = m1.sqrt();
        let r2 = m2.max(1e-300).sqrt();
        if let Some(g) = grad {
            let s2 = std::f64::consts::SQRT_2;
            g.fill(0.0);
            g[0] = live * (n - 1.0) * a1 / r1 + s2 * x1 / r2;
            g[1] = s2 * n * x1 / r2;
            g[2] = live * (n - 1.0) * b1 / r1 + s2 * x2 / r2;
            g[3] = s2 * n * x2 / r2;
            g[4] = live * (n - 1.0) * c1 / r1;
            g[6] = live * (n - 1.0) * d1 / r1;
            g[8] = s2 * n * e / r2;
            g[9] = s2 * n * f / r2;
            g[10] = live * (n - 1.0) / r1;
        }
        (n - 1.0) * r1 + std::f64::consts::SQRT_2 * r2
    }

    fn inequality_count(&self) -> usize {
        9
    }

    fn equality_count(&self) -> usize {
        2
    }

    fn inequality(&self, k: usize, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (a1, a2, b1, b2, c1, c2, d1, d2, e, f, t) =
            (x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8], x[9], x[10]);
        let u = a1 * d1 - b1 * c1;
        let (value, sparse): (f64, &[(usize, f64)]) = match k {
            0 => (a1 - 1.0, &[(0, 1.0)]),
            1 => (
                a1 + a2 + 2.0 * e - c1 - c2 - 1.0,
                &[(0, 1.0), (1, 1.0), (8, 2.0), (4, -1.0), (5, -1.0)],
            ),
            2 => (b1 - 1.0, &[(2, 1.0)]),
            3 => (
                b1 + b2 - d1 - d2 - 1.0,
                &[(2, 1.0), (3, 1.0), (6, -1.0), (7, -1.0)],
            ),
            4 => (d1 - 1.0, &[(6, 1.0)]),
            5 => (
                d1 + d2 - b1 - b2 - 2.0 * f - 1.0,
                &[(6, 1.0), (7, 1.0), (2, -1.0), (3, -1.0), (9, -2.0)],
            ),
            6 => (t - u, &[(10, 1.0), (0, -d1), (6, -a1), (2, c1), (4, b1)]),
            7 => (t + u, &[(10, 1.0), (0, d1), (6, a1), (2, -c1), (4, -b1)]),
            8 => (t, &[(10, 1.0)]),
            _ => unreachable!(),
        };
        if let Some(g) = grad {
            g.fill(0.0);
            for &(idx, coeff) in sparse {
                g[idx] += coeff;
            }
        }
        value
    }

    fn equality(&self, k: usize, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let n = self.n;
        let (value, sparse): (f64, [(usize, f64); 4]) = match k {
            0 => (
                x[0] + x[4] + n * (x[1] + x[5]),
                [(0, 1.0), (4, 1.0), (1, n), (5, n)],
            ),
            1 => (
                x[2] + x[6] + n * (x[3] + x[7]),
                [(2, 1.0), (6, 1.0), (3, n), (7, n)],
            ),
            _ => unreachable!(),
        };
        if let Some(g) = grad {
            g.fill(0.0);
            for (idx, coeff) in sparse {
                g[idx] += coeff;
            }
        }
        value
    }
}

struct NoIdProgram {
    n: f64,
}

// cone smoothing so the second term stays differentiable at the origin
const CONE_EPS2: f64 = 1e-18;

impl NlProgram for NoIdProgram {
    fn dim(&self) -> usize {
        5
    }

    // x = [a1, a2, b1, b2, alpha]
    fn objective(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let n = self.n;
        let (a1, a2, b1, _b2, alpha) = (x[0], x[1], x[2], x[3], x[4]);
        let cap = a1.max(b1.abs());
        let xx = a1 + n * a2;
        let r = (xx * xx + n * alpha * alpha + CONE_EPS2).sqrt();
        if let Some(g) = grad {
            g.fill(0.0);
            if a1 >= b1.abs() {
                g[0] = 2.0 * (n - 1.0);
            } else {
                g[2] = 2.0 * (n - 1.0) * b1.signum();
            }
            g[0] += 2.0 * xx / r;
            g[1] = 2.0 * n * xx / r;
            g[4] = 2.0 * n * alpha / r;
        }
        2.0 * (n - 1.0) * cap + 2.0 * r
    }

    fn inequality_count(&self) -> usize {
        2
    }

    fn equality_count(&self) -> usize {
        1
    }

    fn inequality(&self, k: usize, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (value, sparse): (f64, &[(usize, f64)]) = match k {
            0 => (x[0] - 1.0, &[(0, 1.0)]),
            1 => (
                x[0] + x[1] + 2.0 * x[4] - x[2] - x[3] - 1.0,
                &[(0, 1.0), (1, 1.0), (4, 2.0), (2, -1.0), (3, -1.0)],
            ),
            _ => unreachable!(),
        };
        if let Some(g) = grad {
            g.fill(0.0);
            for &(idx, coeff) in sparse {
                g[idx] += coeff;
            }
        }
        value
    }

    fn equality(&self, _k: usize, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let n = self.n;
        if let Some(g) = grad {
            g.fill(0.0);
            g[0] = 1.0;
            g[2] = 1.0;
            g[1] = n;
            g[3] = n;
        }
        x[0] + x[2] + n * (x[1] + x[3])
    }
}

// ---------------------------------------------------------------------------
// Augmented-Lagrangian solver
// ---------------------------------------------------------------------------

struct AlState {
    x: Vec<f64>,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    objective: f64,
    feasibility: f64,
    kkt: f64,
}

fn al_value_grad(
    prog: &dyn NlProgram,
    x: &[f64],
    lambda: &[f64],
    mu: &[f64],
    rho: f64,
    grad: &mut [f64],
) -> f64 {
    let d = prog.dim();
    let mut cgrad = vec![0.0; d];
    let mut value = prog.objective(x, Some(grad));
    for k in 0..prog.inequality_count() {
        let gk = prog.inequality(k, x, Some(&mut cgrad));
        let slack = lambda[k] - rho * gk;
        if slack > 0.0 {
            value += (slack * slack - lambda[k] * lambda[k]) / (2.0 * rho);
            for i in 0..d {
                grad[i] -= slack * cgrad[i];
            }
        } else {
            value -= lambda[k] * lambda[k] / (2.0 * rho);
        }
    }
    for k in 0..prog.equality_count() {
        let hk = prog.equality(k, x, Some(&mut cgrad));
        value += -mu[k] * hk + 0.5 * rho * hk * hk;
        for i in 0..d {
            grad[i] += (rho * hk - mu[k]) * cgrad[i];
        }
    }
    value
}

/// Barzilai-Borwein gradient descent with a nonmonotone backtracking line
/// search on the augmented Lagrangian. Plain steepest descent crawls once
/// the penalty parameter makes the subproblem ill-conditioned; the BB step
/// recovers curvature information from successive gradients.
fn inner_minimize(
    prog: &dyn NlProgram,
    x: &mut Vec<f64>,
    lambda: &[f64],
    mu: &[f64],
    rho: f64,
    max_iters: usize,
    gtol: f64,
) {
    let d = prog.dim();
    let mut grad = vec![0.0; d];
    let mut step = 1e-2;
    let mut value = al_value_grad(prog, x, lambda, mu, rho, &mut grad);
    // reference values for the nonmonotone acceptance test
    let mut recent = std::collections::VecDeque::from(vec![value]);
    let mut prev_x = x.clone();
    let mut prev_grad = grad.clone();
    let mut have_prev = false;
    for _ in 0..max_iters {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= gtol {
            break;
        }
        if have_prev {
            let mut sy = 0.0;
            let mut yy = 0.0;
            for i in 0..d {
                let s = x[i] - prev_x[i];
                let y = grad[i] - prev_grad[i];
                sy += s * y;
                yy += y * y;
            }
            if sy > 0.0 && yy > 0.0 {
                step = (sy / yy).clamp(1e-12, 1e4);
            }
        }
        prev_x.clone_from(x);
        prev_grad.clone_from(&grad);
        let value_ref = recent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut trial = vec![0.0; d];
        let mut tgrad = vec![0.0; d];
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..d {
                trial[i] = x[i] - step * grad[i];
            }
            let tv = al_value_grad(prog, &trial, lambda, mu, rho, &mut tgrad);
            if tv <= value_ref - 1e-4 * step * gnorm * gnorm {
                x.clone_from(&trial);
                value = tv;
                grad.clone_from(&tgrad);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // line search stalled at float resolution
        }
        have_prev = true;
        recent.push_back(value);
        if recent.len() > 10 {
            recent.pop_front();
        }
    }
}

fn stationarity_residual(prog: &dyn NlProgram, x: &[f64], lambda: &[f64], mu: &[f64]) -> f64 {
    let d = prog.dim();
    let mut total = vec![0.0; d];
    let mut cgrad = vec![0.0; d];
    prog.objective(x, Some(&mut total));
    for k in 0..prog.inequality_count() {
        prog.inequality(k, x, Some(&mut cgrad));
        for i in 0..d {
            total[i] -= lambda[k] * cgrad[i];
        }
    }
    for k in 0..prog.equality_count() {
        prog.equality(k, x, Some(&mut cgrad));
        for i in 0..d {
            total[i] -= mu[k] * cgrad[i];
        }
    }
    total.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn solve_program(prog: &dyn NlProgram, x0: Vec<f64>, config: &SolverConfig) -> AlState {
    let mut x = x0;
    let mut lambda = vec![0.0; prog.inequality_count()];
    let mut mu = vec![0.0; prog.equality_count()];
    let mut rho = config.rho0;
    let mut prev_violation = f64::INFINITY;
    for round in 0..config.outer_rounds {
        let gtol = (1e-2 / 10f64.powi(round as i32)).max(config.tol_kkt / 10.0);
        inner_minimize(prog, &mut x, &lambda, &mu, rho, config.inner_iters, gtol);
        let mut violation = 0.0f64;
        for k in 0..prog.inequality_count() {
            let gk = prog.inequality(k, &x, None);
            violation = violation.max((-gk).max(0.0));
            lambda[k] = (lambda[k] - rho * gk).max(0.0);
        }
        for k in 0..prog.equality_count() {
            let hk = prog.equality(k, &x, None);
            violation = violation.max(hk.abs());
            mu[k] -= rho * hk;
        }
        let kkt = stationarity_residual(prog, &x, &lambda, &mu);
        if violation <= config.tol_feasibility && kkt <= config.tol_kkt {
            break;
        }
        if violation > 0.25 * prev_violation {
            rho = (rho * 10.0).min(config.rho_max);
        }
        prev_violation = violation;
    }
    // negative multiplier dust from the max() update cannot occur, but clamp
    // anyway to honor the reported invariant
    for l in lambda.iter_mut() {
        if *l < 0.0 && *l > -1e-8 {
            *l = 0.0;
        }
    }
    let mut feasibility = 0.0f64;
    for k in 0..prog.inequality_count() {
        feasibility = feasibility.max((-prog.inequality(k, &x, None)).max(0.0));
    }
    for k in 0..prog.equality_count() {
        feasibility = feasibility.max(prog.equality(k, &x, None).abs());
    }
    AlState {
        objective: prog.objective(&x, None),
        kkt: stationarity_residual(prog, &x, &lambda, &mu),
        feasibility,
        x,
        lambda,
        mu,
    }
}

/// Sample a point satisfying all constraints of the identity program. Used
/// as a multi-start seed and as the random-point generator for the
/// closed-form/SVD cross-checks.
pub fn sample_feasible_point(n: usize, seed: u64) -> ReducedPointId {
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    let a1 = r(1.0, 2.5);
    let b1 = r(1.0, 2.5);
    let d1 = r(1.0, 2.5);
    let c1 = r(0.1, 1.5);
    let a2 = r(-0.5, 0.2);
    let c2 = (-(a1 + c1) - nf * a2) / nf;
    // pick b2 large enough that the identity-margin constraint holds
    let mut b2 = r(-0.5, 0.5);
    let g4 = |b2: f64| {
        let d2 = (-(b1 + d1) - nf * b2) / nf;
        b1 + b2 - d1 - d2 - 1.0
    };
    if g4(b2) < 0.0 {
        b2 += -g4(b2) / 2.0 + 0.05;
    }
    let d2 = (-(b1 + d1) - nf * b2) / nf;
    // e large enough for the first-hop margin, f negative enough for the
    // second-hop margin
    let mut e = r(-1.0, 1.0);
    let g2v = a1 + a2 + 2.0 * e - c1 - c2 - 1.0;
    if g2v < 0.0 {
        e += -g2v / 2.0 + 0.05;
    }
    let f = (d1 + d2 - b1 - b2 - 1.0) / 2.0 - r(0.0, 1.0);
    let t = (a1 * d1 - b1 * c1).abs() + r(0.0, 0.5);
    ReducedPointId {
        a1,
        a2,
        b1,
        b2,
        c1,
        c2,
        d1,
        d2,
        e,
        f,
        g: -e,
        h: -f,
        t,
        n,
    }
}

/// Solve the identity-supervised reduced program for instance size `n`.
pub fn solve_id(n: usize, config: &SolverConfig) -> Result<SolveReport, TheoryError> {
    if n < 2 {
        return Err(TheoryError::InvalidDimension(n));
    }
    let prog = IdProgram { n: n as f64 };
    let mut best: Option<AlState> = None;
    for start in 0..config.starts {
        let x0 = sample_feasible_point(n, config.seed.wrapping_add(start as u64))
            .to_vars()
            .to_vec();
        let state = solve_program(&prog, x0, config);
        let better = match &best {
            None => true,
            Some(b) => {
                state.feasibility <= config.tol_feasibility
                    && (b.feasibility > config.tol_feasibility || state.objective < b.objective)
            }
        };
        if better {
            best = Some(state);
        }
    }
    let state = best.expect("at least one start");
    if state.feasibility > config.tol_feasibility || state.kkt > config.tol_kkt {
        return Err(TheoryError::DidNotConverge {
            feasibility: state.feasibility,
            kkt: state.kkt,
        });
    }
    let point = ReducedPointId::from_vars(&state.x, n);
    let margins = ood_margin_id(&point, n)?.iter().map(|m| m.q).collect();
    let mut multipliers = state.lambda.clone();
    multipliers.extend_from_slice(&state.mu);
    Ok(SolveReport {
        n,
        program: Program::Id,
        objective: state.objective,
        feasibility_residual: state.feasibility,
        kkt_residual: state.kkt,
        multipliers,
        margins,
        point: ReducedPoint::Id(point),
    })
}

/// Solve the no-identity (failure) program for instance size `n`.
pub fn solve_noid(n: usize, config: &SolverConfig) -> Result<SolveReport, TheoryError> {
    if n < 2 {
        return Err(TheoryError::InvalidDimension(n));
    }
    let nf = n as f64;
    let prog = NoIdProgram { n: nf };
    let mut best: Option<AlState> = None;
    for start in 0..config.starts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(start as u64));
        let mut r = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let a1 = r(1.0, 2.0);
        let a2 = -a1 / nf + r(-0.1, 0.1);
        let b1 = r(-1.0, -0.1);
        let b2 = -b1 / nf + r(-0.1, 0.1);
        let x0 = vec![a1, a2, b1, b2, r(-0.3, 0.3)];
        let state = solve_program(&prog, x0, config);
        let better = match &best {
            None => true,
            Some(b) => {
                state.feasibility <= config.tol_feasibility
                    && (b.feasibility > config.tol_feasibility || state.objective < b.objective)
            }
        };
        if better {
            best = Some(state);
        }
    }
    let state = best.expect("at least one start");
    if state.feasibility > config.tol_feasibility {
        return Err(TheoryError::DidNotConverge {
            feasibility: state.feasibility,
            kkt: state.kkt,
        });
    }
    let point = ReducedPointNoId::from_vars(&state.x, n);
    let margins = ood_margin_noid(&point, n)?.iter().map(|m| m.q).collect();
    let mut multipliers = state.lambda.clone();
    multipliers.extend_from_slice(&state.mu);
    Ok(SolveReport {
        n,
        program: Program::NoId,
        objective: state.objective,
        feasibility_residual: state.feasibility,
        kkt_residual: state.kkt,
        multipliers,
        margins,
        point: ReducedPoint::NoId(point),
    })
}

// ---------------------------------------------------------------------------
// OOD margins of reduced points
// ---------------------------------------------------------------------------

fn c1_layout(n: usize, with_identity: bool) -> crate::taskgen::VocabLayout {
    build_layout(&DatasetSpec::new(n, 1, with_identity, 0)).expect("n >= 2")
}

/// OOD margins of an identity-program point, one report per query
/// `(a_i, r1, r2)` with label `c_i`, computed from the closed-form gap
/// expressions.
pub fn ood_margin_id(point: &ReducedPointId, n: usize) -> Result<Vec<MarginReport>, TheoryError> {
    if n < 2 {
        return Err(TheoryError::InvalidDimension(n));
    }
    let layout = c1_layout(n, true);
    let p = *point;
    let mut reports = Vec::with_capacity(n);
    for i in 0..n {
        let mut gaps = std::collections::BTreeMap::new();
        let mut logits = Vec::with_capacity(2 * n);
        for j in 0..n {
            let diag = if i == j { 1.0 } else { 0.0 };
            logits.push((layout.bridges[j], p.a1 * diag + p.a2 + p.e + p.f));
        }
        for j in 0..n {
            let diag = if i == j { 1.0 } else { 0.0 };
            logits.push((layout.objects[j], p.c1 * diag + p.c2 + p.g + p.h));
        }
        let label = layout.objects[i];
        for j in 0..n {
            let bridge_gap = p.c1 + p.c2 + p.g + p.h
                - if i == j { p.a1.max(0.0) } else { 0.0 }
                - p.a2
                - p.e
                - p.f;
            gaps.insert(layout.bridges[j], bridge_gap);
            if j != i {
                gaps.insert(layout.objects[j], p.c1);
            }
        }
        let q = gaps.values().fold(f64::INFINITY, |acc, &v| acc.min(v));
        let predicted = logits
            .iter()
            .fold(logits[0], |best, &cand| if cand.1 > best.1 { cand } else { best })
            .0;
        reports.push(MarginReport {
            query: crate::taskgen::Example {
                tokens: vec![layout.subjects[i], layout.rel1[0], layout.rel2[0]],
                target: label,
                kind: ExampleKind::TwoHop,
            },
            gaps,
            q,
            predicted,
            correct: q > 0.0,
        });
    }
    Ok(reports)
}

/// OOD margins of a no-identity point, via row sums of the assembled matrix.
pub fn ood_margin_noid(
    point: &ReducedPointNoId,
    n: usize,
) -> Result<Vec<MarginReport>, TheoryError> {
    let w = assemble_w_noid(point, n)?;
    let layout = c1_layout(n, false);
    let dataset = generate(&DatasetSpec::new(n, 1, false, 0)).expect("n >= 2");
    Ok(margins_from_w(&w, &layout, &dataset.test_ood))
}

// ---------------------------------------------------------------------------
// KKT check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KktSummary {
    /// `|grad F - sum lambda_i grad g_i - sum mu_j grad h_j|`
    pub stationarity: f64,
    /// `sum_i |lambda_i * g_i|`
    pub complementarity: f64,
}

/// Recompute stationarity and complementary-slackness residuals for a solve
/// report, independently of the solver's internal state.
pub fn kkt_check(report: &SolveReport) -> KktSummary {
    let (prog, x): (Box<dyn NlProgram>, Vec<f64>) = match &report.point {
        ReducedPoint::Id(p) => (
            Box::new(IdProgram { n: report.n as f64 }),
            p.to_vars().to_vec(),
        ),
        ReducedPoint::NoId(p) => (
            Box::new(NoIdProgram { n: report.n as f64 }),
            vec![p.a1, p.a2, p.b1, p.b2, p.alpha],
        ),
    };
    let n_ineq = prog.inequality_count();
    let lambda = &report.multipliers[..n_ineq];
    let mu = &report.multipliers[n_ineq..];
    let stationarity = stationarity_residual(prog.as_ref(), &x, lambda, mu);
    let complementarity = (0..n_ineq)
        .map(|k| (lambda[k] * prog.inequality(k, &x, None)).abs())
        .sum();
    KktSummary {
        stationarity,
        complementarity,
    }
}

// ---------------------------------------------------------------------------
// Full-matrix oracle
// ---------------------------------------------------------------------------

struct SparseConstraint {
    entries: Vec<(usize, usize, f64)>,
    norm_sq: f64,
}

fn margin_constraints(n: usize, with_identity: bool) -> Vec<SparseConstraint> {
    let dataset = generate(&DatasetSpec::new(n, 1, with_identity, 0)).expect("n >= 2");
    let layout = &dataset.layout;
    let mut constraints = Vec::new();
    for ex in &dataset.train {
        let rows: Vec<usize> = ex
            .tokens
            .iter()
            .map(|&t| layout.in_index(t).expect("train token in vocab"))
            .collect();
        let y = layout.out_index(ex.target).expect("target in out vocab");
        for y_alt in 0..layout.out_vocab.len() {
            if y_alt == y {
                continue;
            }
            let mut entries = Vec::with_capacity(2 * rows.len());
            for &r in &rows {
                entries.push((r, y, 1.0));
                entries.push((r, y_alt, -1.0));
            }
            let norm_sq = entries.iter().map(|&(_, _, v)| v * v).sum();
            constraints.push(SparseConstraint { entries, norm_sq });
        }
    }
    constraints
}

fn constraint_value(c: &SparseConstraint, w: &DMatrix<f64>) -> f64 {
    c.entries.iter().map(|&(r, col, v)| v * w[(r, col)]).sum()
}

/// Value and gradient of the squared-hinge penalty
/// `lambda/2 * sum_k max(0, 1 - <c_k, W>)^2`.
fn penalty_grad(
    w: &DMatrix<f64>,
    constraints: &[SparseConstraint],
    lambda: f64,
    grad: &mut DMatrix<f64>,
) -> f64 {
    grad.fill(0.0);
    let mut value = 0.0;
    for c in constraints {
        let shortfall = (1.0 - constraint_value(c, w)).max(0.0);
        if shortfall > 0.0 {
            value += 0.5 * lambda * shortfall * shortfall;
            for &(r, col, v) in &c.entries {
                grad[(r, col)] -= lambda * shortfall * v;
            }
        }
    }
    value
}

/// Nuclear norm by dense SVD; the independent reference for
/// [`nuclear_norm_closed`].
pub fn nuclear_norm_svd(w: &DMatrix<f64>) -> f64 {
    w.clone().svd(false, false).singular_values.iter().sum()
}

fn svt(w: &DMatrix<f64>, threshold: f64) -> DMatrix<f64> {
    let svd = w.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut shrunk = svd.singular_values.clone();
    for s in shrunk.iter_mut() {
        *s = (*s - threshold).max(0.0);
    }
    u * DMatrix::from_diagonal(&shrunk) * vt
}

/// Solve the full-matrix nuclear-norm margin program at small `n` by
/// accelerated proximal gradient (FISTA) on a squared-hinge penalty with an
/// increasing penalty-weight schedule, finishing with an exact rescale onto
/// the feasible set. Returns the matrix and `0.5 * ||W||_*^2`.
pub fn full_matrix_oracle(
    n: usize,
    with_identity: bool,
) -> Result<(DMatrix<f64>, f64), TheoryError> {
    if n < 2 {
        return Err(TheoryError::InvalidDimension(n));
    }
    if n > 8 {
        return Err(TheoryError::OracleTooLarge(n));
    }
    let constraints = margin_constraints(n, with_identity);
    let rows = 2 * n + 2;
    let cols = 2 * n;
    // Lipschitz bound of the unit-weight penalty gradient: ||sum c c^T||
    // is at most the sum of the squared constraint norms
    let lip: f64 = constraints.iter().map(|c| c.norm_sq).sum();
    let mut w = DMatrix::zeros(rows, cols);
    let mut grad = DMatrix::zeros(rows, cols);
    for &lambda in &[1.0, 10.0, 100.0, 1e3, 1e4, 1e5] {
        let step = 1.0 / (lambda * lip);
        let mut y = w.clone();
        let mut w_prev = w.clone();
        let mut momentum = 1.0f64;
        for iteration in 0..20_000 {
            penalty_grad(&y, &constraints, lambda, &mut grad);
            let w_new = svt(&(&y - step * &grad), step);
            let momentum_new = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            y = &w_new + ((momentum - 1.0) / momentum_new) * (&w_new - &w_prev);
            let delta = (&w_new - &w_prev).norm();
            w_prev = w_new.clone();
            w = w_new;
            momentum = momentum_new;
            if iteration > 10 && delta <= 1e-12 * (1.0 + w.norm()) {
                break;
            }
        }
    }
    // the penalty leaves margins a shade below one; scale onto the boundary
    let worst = constraints
        .iter()
        .map(|c| constraint_value(c, &w))
        .fold(f64::INFINITY, f64::min);
    if worst <= 0.0 {
        return Err(TheoryError::DidNotConverge {
            feasibility: 1.0 - worst,
            kkt: f64::NAN,
        });
    }
    let w_feasible = &w / worst;
    let nn = nuclear_norm_svd(&w_feasible);
    Ok((w_feasible, 0.5 * nn * nn))
}

/// Layout used by oracle and reduced matrices (complexity-one family).
pub fn oracle_layout(n: usize, with_identity: bool) -> crate::taskgen::VocabLayout {
    c1_layout(n, with_identity)
}
