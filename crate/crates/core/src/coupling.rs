//! SIMPLE and PISO pressure-velocity coupling.
//!
//! Both algorithms share one pressure-correction step. Given a predicted
//! velocity `u*`, the Rhie-Chow flux `phi*` is built with `D = V / a_P`. SIMPLE
//! takes `a_P` from the unrelaxed steady momentum diagonal, so its converged
//! solution does not depend on the relaxation factors. PISO takes the transient
//! diagonal and adds the time-derivative flux correction
//! `V / (dt a_P) (phi_old - u_old_f . S)`, so its steady state does not depend
//! on the time step. The correction `p'` then solves
//!
//! ```text
//! div(D' grad p') = div(phi*)
//! ```
//!
//! with `D' = V / a_P'` from the momentum matrix actually solved (relaxed for
//! SIMPLE, including `V/dt` for PISO). The conservative flux is
//! `phi = phi* - D' grad p' . S`, the velocity `u = u* - D' grad p'` and the
//! pressure `p += alpha_p p'`.
//!
//! Without a fixed-pressure boundary the correction is pinned at cell 0 by
//! doubling its diagonal, which keeps the level of `p` at its initial value
//! there.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{CaseConfig, ConfigError, SolverSettings};
use crate::fvm::{self, BoundaryCondition, Field, FvMatrix, FvMesh, Krylov, SchemeConfig};
use crate::linsolve::SolveReport;
use crate::mesh::Mesh;
use crate::profile::{self, Profiler};
use crate::sparse::HybridMatrix;
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Simple,
    Piso,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Simple => "simple",
            Algorithm::Piso => "piso",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "simple" => Ok(Algorithm::Simple),
            "piso" => Ok(Algorithm::Piso),
            _ => Err(format!("unknown algorithm `{s}`; expected `simple` or `piso`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    pub algorithm: Algorithm,
    /// Pressure corrections per PISO step.
    pub n_correctors: usize,
    /// Extra pressure solves per correction that update the explicit
    /// nonorthogonal term.
    pub n_nonorth_correctors: usize,
    pub alpha_u: f64,
    pub alpha_p: f64,
    /// SIMPLE stops once momentum and continuity residuals fall below this.
    pub outer_tol: f64,
    /// Maximum SIMPLE iterations or PISO steps.
    pub max_outer: usize,
    pub dt: f64,
    /// PISO end time; without it PISO runs `max_outer` steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_time: Option<f64>,
    /// PISO stops early once the relative velocity change per step falls below this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steady_tol: Option<f64>,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Simple,
            n_correctors: 2,
            n_nonorth_correctors: 0,
            alpha_u: 0.7,
            alpha_p: 0.3,
            outer_tol: 1e-5,
            max_outer: 1000,
            dt: 1e-4,
            end_time: None,
            steady_tol: None,
        }
    }
}

impl CouplingConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_correctors == 0 {
            return bad("coupling.n_correctors must be at least 1".into());
        }
        for (name, a) in [("alpha_u", self.alpha_u), ("alpha_p", self.alpha_p)] {
            if !(a > 0.0 && a <= 1.0) {
                return bad(format!("coupling.{name} must be in (0, 1], got {a}"));
            }
        }
        if !(self.outer_tol > 0.0) {
            return bad(format!("coupling.outer_tol must be positive, got {}", self.outer_tol));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("coupling.dt must be positive, got {}", self.dt));
        }
        if let Some(t) = self.end_time {
            if !(t >= 0.0 && t.is_finite()) {
                return bad(format!("coupling.end_time must be non-negative, got {t}"));
            }
        }
        if let Some(t) = self.steady_tol {
            if !(t > 0.0) {
                return bad(format!("coupling.steady_tol must be positive, got {t}"));
            }
        }
        Ok(())
    }

    /// Number of PISO steps to run.
    pub fn piso_steps(&self) -> usize {
        match self.end_time {
            Some(t) => ((t / self.dt).round() as usize).min(self.max_outer),
            None => self.max_outer,
        }
    }
}

/// One linear solve in the residual log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub solver: String,
    pub field: String,
    pub outer_iter: usize,
    pub inner_iters: usize,
    pub initial_res: f64,
    pub final_res: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualLog {
    pub rows: Vec<ResidualRow>,
}

impl ResidualLog {
    pub const HEADER: &'static str = "solver,field,outer_iter,inner_iters,initial_res,final_res";

    fn push(&mut self, method: Krylov, field: &str, outer_iter: usize, report: &SolveReport) {
        self.rows.push(ResidualRow {
            solver: match method {
                Krylov::Cg => "cg",
                Krylov::BiCgStab => "bicgstab",
            }
            .to_string(),
            field: field.to_string(),
            outer_iter,
            inner_iters: report.iterations,
            initial_res: report.initial_residual,
            final_res: report.final_residual,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:e},{:e}\n",
                r.solver, r.field, r.outer_iter, r.inner_iters, r.initial_res, r.final_res
            ));
        }
        out
    }
}

/// Cumulative linear-solver work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub cg_solves: usize,
    pub cg_iterations: usize,
    pub bicgstab_solves: usize,
    pub bicgstab_iterations: usize,
}

/// Residuals of one SIMPLE iteration or PISO step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OuterResiduals {
    /// Normalised initial momentum residual, pooled over the components.
    pub momentum: f64,
    /// `sum |div phi*| / sum |phi*|` before the first pressure correction.
    pub continuity: f64,
    /// Relative velocity change `max |u_new - u_old| / max |u_new|`.
    pub velocity_change: f64,
}

impl OuterResiduals {
    pub fn max(&self) -> f64 {
        self.momentum.max(self.continuity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub t: f64,
    /// Completed SIMPLE iterations or PISO steps.
    pub outer_iter: usize,
    /// Time of step 0; PISO time is `t_start + outer_iter * dt`.
    pub t_start: f64,
    /// Velocity; its `face_flux` holds the conservative face flux.
    pub u: Field<Vec3>,
    pub p: Field<f64>,
    pub counters: Counters,
}

impl RunState {
    pub fn flux(&self) -> &[f64] {
        self.u.face_flux.as_deref().expect("velocity carries its flux")
    }
}

/// Mesh, physics and boundary conditions of a run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub fv: FvMesh,
    pub nu: f64,
    pub scheme: SchemeConfig,
    pub solvers: SolverSettings,
    pub u_bcs: Vec<BoundaryCondition<Vec3>>,
    pub p_bcs: Vec<BoundaryCondition<f64>>,
    /// Conditions of the pressure correction.
    pub pc_bcs: Vec<BoundaryCondition<f64>>,
    /// Cell whose correction is pinned when no pressure level is fixed.
    pub reference_cell: Option<usize>,
    nu_face: Vec<f64>,
}

impl Problem {
    pub fn new(mesh: Mesh, config: &CaseConfig) -> crate::Result<Self> {
        config.validate()?;
        let (u_bcs, p_bcs) = config.boundary_conditions(&mesh)?;
        let fv = FvMesh::new(mesh)?;
        let pc_bcs: Vec<_> = u_bcs
            .iter()
            .zip(&p_bcs)
            .map(|(u, p)| {
                if p.is_empty() {
                    BoundaryCondition::Empty
                } else if p.is_fixed() && !u.is_fixed() {
                    BoundaryCondition::FixedPressure(0.0)
                } else {
                    BoundaryCondition::ZeroGradient
                }
            })
            .collect();
        let reference_cell = (!pc_bcs.iter().any(|bc| bc.is_fixed())).then_some(0);
        let nu_face = vec![config.physics.nu; fv.mesh.n_faces()];
        Ok(Self {
            fv,
            nu: config.physics.nu,
            scheme: config.scheme,
            solvers: config.solvers,
            u_bcs,
            p_bcs,
            pc_bcs,
            reference_cell,
            nu_face,
        })
    }

    /// Fluid at rest with boundary values applied at `t = 0`.
    pub fn initial_state(&self) -> crate::Result<RunState> {
        let mut u = Field::new("U", &self.fv, self.u_bcs.clone(), Vec3::zeros())?;
        let p = Field::new("p", &self.fv, self.p_bcs.clone(), 0.0)?;
        u.face_flux = Some(self.plain_flux(&u));
        Ok(RunState { t: 0.0, outer_iter: 0, t_start: 0.0, u, p, counters: Counters::default() })
    }

    /// `u_f . S_f` with interpolated velocity inside and boundary values outside.
    pub fn plain_flux(&self, u: &Field<Vec3>) -> Vec<f64> {
        let faces = fvm::interpolate_to_faces(&self.fv, u);
        (0..self.fv.mesh.n_faces())
            .map(|f| match self.fv.mesh.patch_of(f) {
                Some(p) if u.bc(p).is_empty() => 0.0,
                _ => faces[f].dot(&self.fv.geometry.face_area[f]),
            })
            .collect()
    }

    /// Steady momentum operator `div(phi u) - div(nu grad u)`.
    fn momentum_matrix(&self, u: &Field<Vec3>, flux: &[f64], prof: &mut Profiler) -> crate::Result<FvMatrix<Vec3>> {
        let start = Instant::now();
        let mut m = prof.time(profile::ASSEMBLY_DIV, || fvm::divergence_convection(&self.fv, flux, u, &self.scheme));
        let grad = if self.scheme.nonorth_correction {
            Some(prof.time(profile::ASSEMBLY_GRAD, || fvm::gauss_gradient(&self.fv, u)))
        } else {
            None
        };
        let lap = prof.time(profile::ASSEMBLY_LAP, || {
            fvm::laplacian_with_gradient(&self.fv, &self.nu_face, u, grad.as_deref(), &self.scheme)
        });
        m.add_scaled(-1.0, &lap)?;
        prof.add(profile::ASSEMBLY, start.elapsed().as_secs_f64());
        Ok(m)
    }

    fn pressure_gradient(&self, p: &Field<f64>, prof: &mut Profiler) -> Vec<Vec3> {
        let start = Instant::now();
        let g = prof.time(profile::ASSEMBLY_GRAD, || fvm::gauss_gradient(&self.fv, p));
        prof.add(profile::ASSEMBLY, start.elapsed().as_secs_f64());
        g
    }

    fn volume_weighted(&self, grad_p: &[Vec3]) -> Vec<Vec3> {
        grad_p.iter().zip(&self.fv.geometry.cell_volume).map(|(g, v)| -g * *v).collect()
    }
}

/// Residual normalised by the spread of `A x` around the mean of `x`:
/// `sum |b - A x| / (sum |A x - A xbar| + sum |b - A xbar| + 1e-20)`.
pub fn scaled_residual(a: &HybridMatrix, x: &[f64], b: &[f64]) -> f64 {
    let (num, den) = residual_parts(a, x, b);
    num / (den + 1e-20)
}

fn residual_parts(a: &HybridMatrix, x: &[f64], b: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let ax = a.smvp(x).expect("sized to matrix");
    let row_sum = a.smvp(&vec![1.0; n]).expect("sized to matrix");
    let x_mean = x.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let axbar = row_sum[i] * x_mean;
        num += (b[i] - ax[i]).abs();
        den += (ax[i] - axbar).abs() + (b[i] - axbar).abs();
    }
    (num, den)
}

/// A run in progress: problem, coupling settings, state and bookkeeping.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub problem: Problem,
    pub coupling: CouplingConfig,
    pub state: RunState,
    pub log: ResidualLog,
    pub profiler: Profiler,
}

/// Outcome of [`Simulation::run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub converged: bool,
    pub outer_iterations: usize,
    pub t_final: f64,
    pub residuals: OuterResiduals,
    pub counters: Counters,
    /// `max_cell |net flux| / max_face |flux|` of the final state.
    pub continuity_error: f64,
}

impl Simulation {
    pub fn new(mesh: Mesh, config: &CaseConfig) -> crate::Result<Self> {
        let problem = Problem::new(mesh, config)?;
        let state = problem.initial_state()?;
        Ok(Self { problem, coupling: config.coupling, state, log: ResidualLog::default(), profiler: Profiler::new() })
    }

    fn solve_momentum(&mut self, m: &FvMatrix<Vec3>, extra: &[Vec3]) -> crate::Result<(Vec<Vec3>, f64)> {
        let x0 = self.state.u.values.clone();
        // Components are pooled so an identically zero component adds no noise.
        let (mut num, mut den) = (0.0, 0.0);
        for c in 0..3 {
            let b: Vec<f64> = m.source.iter().zip(extra).map(|(s, e)| s[c] + e[c]).collect();
            let (n, d) = residual_parts(&m.matrix, &fvm::component(&x0, c), &b);
            num += n;
            den += d;
        }
        let residual = num / (den + 1e-20);
        let cfg = self.problem.solvers.bicgstab();
        let (x, reports) = m.solve(&x0, Some(extra), Krylov::BiCgStab, &cfg).map_err(|e| {
            crate::Error::from(e).context(format!("momentum solve, outer iteration {}", self.state.outer_iter))
        })?;
        for (c, report) in reports.iter().enumerate() {
            self.log.push(Krylov::BiCgStab, ["Ux", "Uy", "Uz"][c], self.state.outer_iter, report);
            self.profiler.record_solve(Krylov::BiCgStab, report);
            self.state.counters.bicgstab_solves += 1;
            self.state.counters.bicgstab_iterations += report.iterations;
        }
        Ok((x, residual))
    }

    /// Corrects `u` (holding the predicted velocity) and `self.state.p` so the
    /// face flux is conservative. Returns the flux and the continuity residual
    /// of the predicted flux.
    fn pressure_correction(
        &mut self,
        u: &mut Field<Vec3>,
        a_rc: &[f64],
        d_cell: &[f64],
        grad_p: &[Vec3],
        alpha_p: f64,
        ddt_corr: Option<&[f64]>,
    ) -> crate::Result<(Vec<f64>, f64)> {
        let pb = &self.problem;
        let fv = &pb.fv;
        let prof = &mut self.profiler;
        let start = Instant::now();
        let mut predicted = fvm::rhie_chow_flux(fv, u, &self.state.p, a_rc, grad_p)?;
        if let Some(corr) = ddt_corr {
            for (q, c) in predicted.iter_mut().zip(corr) {
                *q += c;
            }
        }
        let div = fvm::flux_divergence(fv, &predicted);
        let n_int = fv.n_internal_faces();
        let flux_sum: f64 =
            predicted.iter().enumerate().map(|(f, q)| if f < n_int { 2.0 * q.abs() } else { q.abs() }).sum();
        let continuity = if flux_sum > 0.0 { div.iter().map(|d| d.abs()).sum::<f64>() / flux_sum } else { 0.0 };
        let d_face = fvm::face_gamma(fv, d_cell);
        let rhs: Vec<f64> = div.iter().map(|d| -d).collect();
        prof.add(profile::ASSEMBLY, start.elapsed().as_secs_f64());

        let mut pc = Field::new("p_corr", fv, pb.pc_bcs.clone(), 0.0)?;
        let mut grad_pc: Option<Vec<Vec3>> = None;
        let cfg = pb.solvers.cg();
        for pass in 0..=self.coupling.n_nonorth_correctors {
            let start = Instant::now();
            let mut m = prof.time(profile::ASSEMBLY_LAP, || {
                fvm::laplacian_with_gradient(fv, &d_face, &pc, grad_pc.as_deref(), &pb.scheme)
            });
            m.negate();
            if let Some(r) = pb.reference_cell {
                let d = m.matrix.diag(r);
                m.matrix.set_diag(r, 2.0 * d);
            }
            prof.add(profile::ASSEMBLY, start.elapsed().as_secs_f64());
            let (x, reports) = m.solve(&pc.values, Some(&rhs), Krylov::Cg, &cfg).map_err(|e| {
                crate::Error::from(e).context(format!("pressure solve, outer iteration {}", self.state.outer_iter))
            })?;
            let report = &reports[0];
            self.log.push(Krylov::Cg, "p", self.state.outer_iter, report);
            prof.record_solve(Krylov::Cg, report);
            self.state.counters.cg_solves += 1;
            self.state.counters.cg_iterations += report.iterations;
            pc.values = x;
            pc.correct_boundary(fv);
            if pass < self.coupling.n_nonorth_correctors && pb.scheme.nonorth_correction {
                grad_pc = Some(prof.time(profile::ASSEMBLY_GRAD, || fvm::gauss_gradient(fv, &pc)));
            }
        }
        // The flux correction must use the gradient of the last assembly.
        let correction = fvm::laplacian_flux(fv, &d_face, &pc, grad_pc.as_deref(), &pb.scheme);
        let flux: Vec<f64> = predicted.iter().zip(&correction).map(|(q, c)| q - c).collect();

        let grad = prof.time(profile::ASSEMBLY_GRAD, || fvm::gauss_gradient(fv, &pc));
        for ((u, g), d) in u.values.iter_mut().zip(&grad).zip(d_cell) {
            *u -= g * *d;
        }
        u.correct_boundary(fv);
        for (p, c) in self.state.p.values.iter_mut().zip(&pc.values) {
            *p += alpha_p * c;
        }
        self.state.p.correct_boundary(fv);
        Ok((flux, continuity))
    }

    /// One SIMPLE sweep: relaxed momentum predictor, pressure correction,
    /// velocity and flux correction.
    pub fn simple_outer_iteration(&mut self) -> crate::Result<OuterResiduals> {
        let alpha_u = self.coupling.alpha_u;
        let t = self.state.t;
        self.state.u.apply_bcs(&self.problem.fv, t)?;
        self.state.p.correct_boundary(&self.problem.fv);
        let flux = self.state.flux().to_vec();
        let grad_p = self.problem.pressure_gradient(&self.state.p, &mut self.profiler);
        let mut m = self.problem.momentum_matrix(&self.state.u, &flux, &mut self.profiler)?;
        let a_steady = m.matrix.diagonal();
        check_diagonal(&a_steady)?;
        m.relax(alpha_u, &self.state.u.values)?;
        let extra = self.problem.volume_weighted(&grad_p);
        let (u_star, momentum) = self.solve_momentum(&m, &extra)?;

        let old = self.state.u.values.clone();
        let mut u = self.state.u.clone();
        u.values = u_star;
        u.correct_boundary(&self.problem.fv);
        let d_cell: Vec<f64> =
            self.problem.fv.geometry.cell_volume.iter().zip(&a_steady).map(|(v, a)| v * alpha_u / a).collect();
        let (flux, continuity) =
            self.pressure_correction(&mut u, &a_steady, &d_cell, &grad_p, self.coupling.alpha_p, None)?;
        u.face_flux = Some(flux);
        let velocity_change = relative_change(&old, &u.values);
        self.state.u = u;
        self.state.outer_iter += 1;
        Ok(OuterResiduals { momentum, continuity, velocity_change })
    }

    /// One PISO step of size `dt`: momentum predictor with the time
    /// derivative, then `n_correctors` pressure corrections.
    pub fn piso_time_step(&mut self) -> crate::Result<OuterResiduals> {
        let dt = self.coupling.dt;
        let t_new = self.state.t_start + (self.state.outer_iter + 1) as f64 * dt;
        let fv = &self.problem.fv;
        self.state.u.apply_bcs(fv, t_new)?;
        self.state.p.correct_boundary(fv);
        let flux = self.state.flux().to_vec();
        let mut grad_p = self.problem.pressure_gradient(&self.state.p, &mut self.profiler);
        let mut m = self.problem.momentum_matrix(&self.state.u, &flux, &mut self.profiler)?;
        let ddt = fvm::ddt_euler(&self.problem.fv, &self.state.u.values, dt)?;
        m.add_scaled(1.0, &ddt)?;
        let a_trans = m.matrix.diagonal();
        check_diagonal(&a_trans)?;
        let extra = self.problem.volume_weighted(&grad_p);
        let (u_star, momentum) = self.solve_momentum(&m, &extra)?;

        let old = self.state.u.values.clone();
        let mut u = self.state.u.clone();
        u.values = u_star;
        u.correct_boundary(&self.problem.fv);
        let volumes = self.problem.fv.geometry.cell_volume.clone();
        let d_cell: Vec<f64> = volumes.iter().zip(&a_trans).map(|(v, a)| v / a).collect();
        let ddt_coeff: Vec<f64> = d_cell.iter().map(|d| d / dt).collect();
        let ddt_corr = fvm::ddt_flux_correction(&self.problem.fv, &old, &flux, &ddt_coeff)?;
        let mut continuity = 0.0;
        let mut flux = flux;
        for corr in 0..self.coupling.n_correctors {
            if corr > 0 {
                grad_p = self.problem.pressure_gradient(&self.state.p, &mut self.profiler);
                let h = m.h_operator(&u.values);
                for i in 0..u.values.len() {
                    u.values[i] = (h[i] - grad_p[i] * volumes[i]) / a_trans[i];
                }
                u.correct_boundary(&self.problem.fv);
            }
            let (f, c) = self.pressure_correction(&mut u, &a_trans, &d_cell, &grad_p, 1.0, Some(&ddt_corr))?;
            flux = f;
            if corr == 0 {
                continuity = c;
            }
        }
        u.face_flux = Some(flux);
        let velocity_change = relative_change(&old, &u.values);
        self.state.u = u;
        self.state.outer_iter += 1;
        self.state.t = t_new;
        Ok(OuterResiduals { momentum, continuity, velocity_change })
    }

    /// Runs to convergence (SIMPLE) or to the end time (PISO), calling
    /// `progress` after every iteration or step.
    pub fn run(
        &mut self,
        mut progress: impl FnMut(&Simulation, &OuterResiduals) -> crate::Result<()>,
    ) -> crate::Result<RunSummary> {
        let mut residuals = OuterResiduals::default();
        let mut converged = false;
        let start_iter = self.state.outer_iter;
        match self.coupling.algorithm {
            Algorithm::Simple => {
                while self.state.outer_iter - start_iter < self.coupling.max_outer {
                    residuals = self.simple_outer_iteration()?;
                    progress(self, &residuals)?;
                    if residuals.max() < self.coupling.outer_tol {
                        converged = true;
                        break;
                    }
                }
            }
            Algorithm::Piso => {
                let steps = self.coupling.piso_steps();
                // With a steady tolerance, running out of steps is not convergence.
                converged = self.coupling.steady_tol.is_none();
                for _ in 0..steps {
                    residuals = self.piso_time_step()?;
                    progress(self, &residuals)?;
                    if let Some(tol) = self.coupling.steady_tol {
                        if residuals.velocity_change < tol {
                            converged = true;
                            break;
                        }
                    }
                }
            }
        }
        Ok(RunSummary {
            algorithm: self.coupling.algorithm,
            converged,
            outer_iterations: self.state.outer_iter,
            t_final: self.state.t,
            residuals,
            counters: self.state.counters,
            continuity_error: fvm::continuity_error(&self.problem.fv, self.state.flux()),
        })
    }
}

fn check_diagonal(a: &[f64]) -> Result<(), fvm::FvmError> {
    match a.iter().position(|a| !(a.abs() > 0.0) || !a.is_finite()) {
        Some(cell) => Err(fvm::FvmError::ZeroDiagonal { cell }),
        None => Ok(()),
    }
}

fn relative_change(old: &[Vec3], new: &[Vec3]) -> f64 {
    let scale = new.iter().fold(0.0_f64, |m, u| m.max(u.norm()));
    if scale == 0.0 {
        return 0.0;
    }
    old.iter().zip(new).fold(0.0_f64, |m, (a, b)| m.max((a - b).norm())) / scale
}

/// Runs a generated case with its own configuration.
pub fn run_case(case: crate::cases::Case) -> crate::Result<(Simulation, RunSummary)> {
    let mut sim = Simulation::new(case.mesh, &case.config)?;
    let summary = sim.run(|_, _| Ok(()))?;
    Ok((sim, summary))
}

/// Free-function form of [`Simulation::simple_outer_iteration`].
pub fn simple_outer_iteration(sim: &mut Simulation) -> crate::Result<OuterResiduals> {
    sim.simple_outer_iteration()
}

/// Free-function form of [`Simulation::piso_time_step`].
pub fn piso_time_step(sim: &mut Simulation) -> crate::Result<OuterResiduals> {
    sim.piso_time_step()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;

    #[test]
    fn zero_state_is_a_fixed_point() {
        let mut case = cases::gen_cavity(3).unwrap();
        case.config.boundary[0].velocity = crate::config::VelocitySpec::NoSlip;
        let mut sim = Simulation::new(case.mesh, &case.config).unwrap();
        let before = sim.state.clone();
        let r = sim.simple_outer_iteration().unwrap();
        assert_eq!(sim.state.u.values, before.u.values);
        assert_eq!(sim.state.p.values, before.p.values);
        assert_eq!(r.max(), 0.0);
    }

    #[test]
    fn piso_zero_steps_keeps_initial_state() {
        let mut case = cases::gen_channel(4, 2, 0.16, 0.02).unwrap();
        case.config.coupling.max_outer = 0;
        let mut sim = Simulation::new(case.mesh, &case.config).unwrap();
        let before = sim.state.clone();
        let summary = sim.run(|_, _| Ok(())).unwrap();
        assert_eq!(summary.outer_iterations, 0);
        assert_eq!(sim.state, before);
    }

    #[test]
    fn piso_time_accumulates_exactly() {
        let mut case = cases::gen_channel(8, 4, 0.16, 0.02).unwrap();
        case.config.coupling.end_time = Some(0.01);
        let mut sim = Simulation::new(case.mesh, &case.config).unwrap();
        let summary = sim.run(|_, _| Ok(())).unwrap();
        assert_eq!(summary.outer_iterations, 100);
        assert_eq!(summary.t_final, 0.01);
    }

    #[test]
    fn counters_match_log() {
        let mut case = cases::gen_cavity(4).unwrap();
        case.config.coupling.max_outer = 5;
        let (sim, summary) = run_case(case).unwrap();
        let cg: usize = sim.log.rows.iter().filter(|r| r.solver == "cg").map(|r| r.inner_iters).sum();
        let bicg: usize = sim.log.rows.iter().filter(|r| r.solver == "bicgstab").map(|r| r.inner_iters).sum();
        assert_eq!(summary.counters.cg_iterations, cg);
        assert_eq!(summary.counters.bicgstab_iterations, bicg);
        assert_eq!(summary.outer_iterations, 5);
    }

    #[test]
    fn config_validation() {
        let c = CouplingConfig { alpha_u: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = CouplingConfig { n_correctors: 0, ..Default::default() };
        assert!(c.validate().is_err());
        assert!(CouplingConfig::default().validate().is_ok());
    }

    #[test]
    fn scaled_residual_of_exact_solution_is_zero() {
        let a = HybridMatrix::identity(3);
        assert_eq!(scaled_residual(&a, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert!(scaled_residual(&a, &[0.0; 3], &[1.0, 2.0, 3.0]) > 0.0);
    }
}
