//! Jacobi-preconditioned Krylov solvers over [`HybridMatrix`].
//!
//! Both solvers return the solution as a new vector and leave the initial
//! guess untouched. Convergence is judged on the normalised residual
//! `||b - A x||_2 / max(||b||_2, 1e-30)`, checked before the first iteration
//! and after every iteration. A run that stops on the recursively updated
//! residual re-checks the true residual before reporting convergence.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::sparse::HybridMatrix;

/// Floor applied to `||b||` when normalising residuals.
pub const RESIDUAL_FLOOR: f64 = 1e-30;

/// `|rho|` or `|omega|` below this value is a BiCGStab breakdown.
pub const BREAKDOWN_EPS: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("zero diagonal in row {row}: Jacobi preconditioner is singular")]
    SingularPreconditioner { row: usize },
    #[error("residual became NaN at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("BiCGStab breakdown at iteration {iteration}")]
    Breakdown { iteration: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    /// Target for the normalised residual.
    pub tolerance: f64,
    /// Absolute residual norm that also counts as converged (0 disables).
    pub abs_tolerance: f64,
    pub max_iters: usize,
    pub record_stages: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self { tolerance: 1e-6, abs_tolerance: 0.0, max_iters: 1000, record_stages: false }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.tolerance > 0.0) {
            return Err(SolverError::InvalidConfig(format!("tolerance must be > 0, got {}", self.tolerance)));
        }
        if self.max_iters < 1 {
            return Err(SolverError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.abs_tolerance >= 0.0) {
            return Err(SolverError::InvalidConfig("abs_tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

/// Wall-clock seconds per kernel group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub smvp: f64,
    pub daxpy: f64,
    pub dot: f64,
    pub reduction: f64,
    pub precond: f64,
    pub other: f64,
}

impl StageTimes {
    pub const CATEGORIES: [&'static str; 6] = ["smvp", "daxpy", "dot", "reduction", "precond", "other"];

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }

    pub fn values(&self) -> [f64; 6] {
        [self.smvp, self.daxpy, self.dot, self.reduction, self.precond, self.other]
    }

    pub fn accumulate(&mut self, other: &StageTimes) {
        self.smvp += other.smvp;
        self.daxpy += other.daxpy;
        self.dot += other.dot;
        self.reduction += other.reduction;
        self.precond += other.precond;
        self.other += other.other;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub converged: bool,
    pub stage_times: StageTimes,
    /// Number of matrix-vector products performed.
    pub smvp_calls: usize,
    /// Wall time of the whole solve, seconds.
    pub wall_time: f64,
}

#[derive(Clone, Copy)]
enum Stage {
    Smvp,
    Daxpy,
    Dot,
    Reduction,
    Precond,
    Other,
}

/// Times kernel groups when enabled; a no-op otherwise.
struct StageClock {
    enabled: bool,
    times: StageTimes,
    smvp_calls: usize,
}

impl StageClock {
    fn new(enabled: bool) -> Self {
        Self { enabled, times: StageTimes::default(), smvp_calls: 0 }
    }

    #[inline]
    fn run<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        if matches!(stage, Stage::Smvp) {
            self.smvp_calls += 1;
        }
        if !self.enabled {
            return f();
        }
        let start = Instant::now();
        let out = f();
        let dt = start.elapsed().as_secs_f64();
        let slot = match stage {
            Stage::Smvp => &mut self.times.smvp,
            Stage::Daxpy => &mut self.times.daxpy,
            Stage::Dot => &mut self.times.dot,
            Stage::Reduction => &mut self.times.reduction,
            Stage::Precond => &mut self.times.precond,
            Stage::Other => &mut self.times.other,
        };
        *slot += dt;
        out
    }
}

/// `z[i] = r[i] / diag[i]`.
pub fn jacobi_apply(diag: &[f64], r: &[f64]) -> Result<Vec<f64>, SolverError> {
    if diag.len() != r.len() {
        return Err(SolverError::DimensionMismatch { expected: diag.len(), found: r.len() });
    }
    check_diagonal(diag)?;
    Ok(r.iter().zip(diag).map(|(r, d)| r / d).collect())
}

fn check_diagonal(diag: &[f64]) -> Result<(), SolverError> {
    match diag.iter().position(|&d| d == 0.0 || !d.is_finite()) {
        Some(row) => Err(SolverError::SingularPreconditioner { row }),
        None => Ok(()),
    }
}

#[inline]
fn precondition(inv_diag: &[f64], r: &[f64], z: &mut [f64]) {
    for ((z, r), d) in z.iter_mut().zip(r).zip(inv_diag) {
        *z = r * d;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `||b - A x||_2 / max(||b||_2, 1e-30)`.
pub fn residual_norm(a: &HybridMatrix, x: &[f64], b: &[f64]) -> Result<f64, SolverError> {
    check_dims(a, x, b)?;
    let ax = a.smvp(x).expect("dimensions checked");
    let r: f64 = b.iter().zip(&ax).map(|(b, ax)| (b - ax) * (b - ax)).sum::<f64>().sqrt();
    Ok(r / norm2(b).max(RESIDUAL_FLOOR))
}

fn check_dims(a: &HybridMatrix, x: &[f64], b: &[f64]) -> Result<(), SolverError> {
    for len in [x.len(), b.len()] {
        if len != a.n() {
            return Err(SolverError::DimensionMismatch { expected: a.n(), found: len });
        }
    }
    Ok(())
}

fn true_residual(a: &HybridMatrix, x: &[f64], b: &[f64], r: &mut [f64]) {
    a.smvp_into(x, r).expect("dimensions checked");
    for (r, b) in r.iter_mut().zip(b) {
        *r = b - *r;
    }
}

struct Setup {
    inv_diag: Vec<f64>,
    b_norm: f64,
    start: Instant,
    clock: StageClock,
}

fn setup(a: &HybridMatrix, b: &[f64], x0: &[f64], cfg: &SolveConfig) -> Result<Setup, SolverError> {
    cfg.validate()?;
    check_dims(a, x0, b)?;
    let start = Instant::now();
    let mut clock = StageClock::new(cfg.record_stages);
    let diag = a.diagonal();
    check_diagonal(&diag)?;
    let inv_diag = clock.run(Stage::Other, || diag.iter().map(|d| 1.0 / d).collect());
    let b_norm = clock.run(Stage::Reduction, || norm2(b)).max(RESIDUAL_FLOOR);
    Ok(Setup { inv_diag, b_norm, start, clock })
}

fn converged(res_norm: f64, b_norm: f64, cfg: &SolveConfig) -> bool {
    res_norm / b_norm <= cfg.tolerance || res_norm <= cfg.abs_tolerance
}

fn finish(
    iterations: usize,
    initial: f64,
    final_res: f64,
    converged: bool,
    clock: StageClock,
    start: Instant,
) -> SolveReport {
    SolveReport {
        iterations,
        initial_residual: initial,
        final_residual: final_res,
        converged,
        stage_times: clock.times,
        smvp_calls: clock.smvp_calls,
        wall_time: start.elapsed().as_secs_f64(),
    }
}

/// Preconditioned conjugate gradients for symmetric positive definite `A`.
pub fn cg(a: &HybridMatrix, b: &[f64], x0: &[f64], cfg: &SolveConfig) -> Result<(Vec<f64>, SolveReport), SolverError> {
    let Setup { inv_diag, b_norm, start, mut clock } = setup(a, b, x0, cfg)?;
    let n = a.n();

    let (mut x, mut r, mut z, mut p, mut q) =
        clock.run(Stage::Other, || (x0.to_vec(), vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]));
    clock.run(Stage::Smvp, || true_residual(a, &x, b, &mut r));
    let mut r_norm = clock.run(Stage::Reduction, || norm2(&r));
    let initial = r_norm / b_norm;
    if converged(r_norm, b_norm, cfg) {
        return Ok((x, finish(0, initial, initial, true, clock, start)));
    }

    clock.run(Stage::Precond, || precondition(&inv_diag, &r, &mut z));
    clock.run(Stage::Daxpy, || p.copy_from_slice(&z));
    let mut rho = clock.run(Stage::Dot, || dot(&r, &z));

    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        clock.run(Stage::Smvp, || a.smvp_into(&p, &mut q).expect("dimensions checked"));
        let pq = clock.run(Stage::Dot, || dot(&p, &q));
        let alpha = rho / pq;
        clock.run(Stage::Daxpy, || {
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
        });
        r_norm = clock.run(Stage::Reduction, || norm2(&r));
        if !r_norm.is_finite() {
            return Err(SolverError::Divergence { iteration: iterations });
        }
        if converged(r_norm, b_norm, cfg) {
            // Guard against drift between the recursive and true residual.
            clock.run(Stage::Smvp, || true_residual(a, &x, b, &mut r));
            r_norm = clock.run(Stage::Reduction, || norm2(&r));
            if converged(r_norm, b_norm, cfg) {
                return Ok((x, finish(iterations, initial, r_norm / b_norm, true, clock, start)));
            }
            clock.run(Stage::Precond, || precondition(&inv_diag, &r, &mut z));
            clock.run(Stage::Daxpy, || p.copy_from_slice(&z));
            rho = clock.run(Stage::Dot, || dot(&r, &z));
            continue;
        }
        clock.run(Stage::Precond, || precondition(&inv_diag, &r, &mut z));
        let rho_new = clock.run(Stage::Dot, || dot(&r, &z));
        let beta = rho_new / rho;
        rho = rho_new;
        clock.run(Stage::Daxpy, || {
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        });
    }
    Ok((x, finish(iterations, initial, r_norm / b_norm, false, clock, start)))
}

/// Right-preconditioned BiCGStab for general nonsymmetric `A`.
pub fn bicgstab(
    a: &HybridMatrix,
    b: &[f64],
    x0: &[f64],
    cfg: &SolveConfig,
) -> Result<(Vec<f64>, SolveReport), SolverError> {
    let Setup { inv_diag, b_norm, start, mut clock } = setup(a, b, x0, cfg)?;
    let n = a.n();

    let mut x = clock.run(Stage::Other, || x0.to_vec());
    let mut r = vec![0.0; n];
    clock.run(Stage::Smvp, || true_residual(a, &x, b, &mut r));
    let mut r_norm = clock.run(Stage::Reduction, || norm2(&r));
    let initial = r_norm / b_norm;
    if converged(r_norm, b_norm, cfg) {
        return Ok((x, finish(0, initial, initial, true, clock, start)));
    }

    let (r_hat, mut p, mut v, mut y, mut s, mut z, mut t) = clock.run(Stage::Other, || {
        (r.clone(), vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n])
    });
    let (mut rho, mut alpha, mut omega) = (1.0_f64, 1.0_f64, 1.0_f64);

    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let rho_new = clock.run(Stage::Dot, || dot(&r_hat, &r));
        if rho_new.abs() < BREAKDOWN_EPS {
            return Err(SolverError::Breakdown { iteration: iterations });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        clock.run(Stage::Daxpy, || {
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
        });
        clock.run(Stage::Precond, || precondition(&inv_diag, &p, &mut y));
        clock.run(Stage::Smvp, || a.smvp_into(&y, &mut v).expect("dimensions checked"));
        let rv = clock.run(Stage::Dot, || dot(&r_hat, &v));
        if rv.abs() < BREAKDOWN_EPS {
            return Err(SolverError::Breakdown { iteration: iterations });
        }
        alpha = rho / rv;
        clock.run(Stage::Daxpy, || {
            for i in 0..n {
                s[i] = r[i] - alpha * v[i];
            }
        });
        let s_norm = clock.run(Stage::Reduction, || norm2(&s));
        if !s_norm.is_finite() {
            return Err(SolverError::Divergence { iteration: iterations });
        }
        if converged(s_norm, b_norm, cfg) {
            clock.run(Stage::Daxpy, || {
                for i in 0..n {
                    x[i] += alpha * y[i];
                }
            });
            clock.run(Stage::Smvp, || true_residual(a, &x, b, &mut r));
            r_norm = clock.run(Stage::Reduction, || norm2(&r));
            if converged(r_norm, b_norm, cfg) {
                return Ok((x, finish(iterations, initial, r_norm / b_norm, true, clock, start)));
            }
            // Restart from the true residual.
            clock.run(Stage::Other, || {
                p.fill(0.0);
                v.fill(0.0);
            });
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        clock.run(Stage::Precond, || precondition(&inv_diag, &s, &mut z));
        clock.run(Stage::Smvp, || a.smvp_into(&z, &mut t).expect("dimensions checked"));
        let (ts, tt) = clock.run(Stage::Dot, || (dot(&t, &s), dot(&t, &t)));
        omega = if tt > 0.0 { ts / tt } else { 0.0 };
        if omega.abs() < BREAKDOWN_EPS {
            return Err(SolverError::Breakdown { iteration: iterations });
        }
        clock.run(Stage::Daxpy, || {
            for i in 0..n {
                x[i] += alpha * y[i] + omega * z[i];
                r[i] = s[i] - omega * t[i];
            }
        });
        r_norm = clock.run(Stage::Reduction, || norm2(&r));
        if !r_norm.is_finite() {
            return Err(SolverError::Divergence { iteration: iterations });
        }
        if converged(r_norm, b_norm, cfg) {
            clock.run(Stage::Smvp, || true_residual(a, &x, b, &mut r));
            r_norm = clock.run(Stage::Reduction, || norm2(&r));
            if converged(r_norm, b_norm, cfg) {
                return Ok((x, finish(iterations, initial, r_norm / b_norm, true, clock, start)));
            }
        }
    }
    Ok((x, finish(iterations, initial, r_norm / b_norm, false, clock, start)))
}

/// Plain conjugate gradients without preconditioning.
pub fn cg_unpreconditioned(
    a: &HybridMatrix,
    b: &[f64],
    x0: &[f64],
    cfg: &SolveConfig,
) -> Result<(Vec<f64>, SolveReport), SolverError> {
    let n = a.n();
    cfg.validate()?;
    check_dims(a, x0, b)?;
    let start = Instant::now();
    let clock = StageClock::new(false);
    let b_norm = norm2(b).max(RESIDUAL_FLOOR);
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    true_residual(a, &x, b, &mut r);
    let initial = norm2(&r) / b_norm;
    let mut p = r.clone();
    let mut q = vec![0.0; n];
    let mut rho = dot(&r, &r);
    let mut iterations = 0;
    let mut r_norm = rho.sqrt();
    while !converged(r_norm, b_norm, cfg) && iterations < cfg.max_iters {
        iterations += 1;
        a.smvp_into(&p, &mut q).expect("dimensions checked");
        let alpha = rho / dot(&p, &q);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let rho_new = dot(&r, &r);
        r_norm = rho_new.sqrt();
        if !r_norm.is_finite() {
            return Err(SolverError::Divergence { iteration: iterations });
        }
        let beta = rho_new / rho;
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    true_residual(a, &x, b, &mut r);
    let final_res = norm2(&r) / b_norm;
    let ok = converged(norm2(&r), b_norm, cfg);
    Ok((x, finish(iterations, initial, final_res, ok, clock, start)))
}
