//! Ensemble time stepping for a group of linear parabolic problems.
//!
//! Every member `j` solves
//!
//! ```text
//! (M/dt + A(abar^{n+1})) u_j^{n+1} = F_j^{n+1} + M u_j^n / dt - (A(a_j^{n+1}) - A(abar^{n+1})) u_j^n
//! ```
//!
//! where `abar` is the pointwise mean of the member coefficients. The left
//! hand side does not depend on `j`, so each step needs one factorization
//! and one block solve for the whole group. The independent baseline
//! advances each member with plain backward Euler and factorizes `J` times
//! per step.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{DirichletBc, FeSpace};
use crate::field::{Field, MeanField, ScalarField, VectorField};
use crate::mesh::BoundaryTag;
use crate::scalar::Real;
use crate::sparse::{Block, BlockSolver, CsrMatrix, PcgSolver, SpdFactorization};

/// Uniform partition of `[0, final_time]` into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    pub final_time: T,
    pub steps: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(final_time: T, steps: usize) -> Result<Self> {
        if steps == 0 || !(final_time > T::zero()) {
            return Err(Error::Config(format!(
                "time grid needs T > 0 and N >= 1 (got T = {final_time}, N = {steps})"
            )));
        }
        Ok(Self { final_time, steps })
    }

    /// Grid with step `dt` ending at `final_time`; `final_time / dt` must be
    /// an integer up to rounding.
    pub fn from_step(final_time: T, dt: T) -> Result<Self> {
        let n = (final_time / dt).round();
        if !(dt > T::zero()) || (n * dt - final_time).abs() > T::lit(1e-9) * final_time {
            return Err(Error::Config(format!("step {dt} does not divide final time {final_time}")));
        }
        Self::new(final_time, n.to_usize().unwrap_or(0))
    }

    pub fn dt(&self) -> T {
        self.final_time / T::count(self.steps)
    }

    pub fn time(&self, n: usize) -> T {
        if n == self.steps {
            self.final_time
        } else {
            T::count(n) * self.dt()
        }
    }

    /// `t_1, ..., t_N`.
    pub fn step_times(&self) -> Vec<T> {
        (1..=self.steps).map(|n| self.time(n)).collect()
    }
}

/// Data of one ensemble member.
#[derive(Clone)]
pub struct EnsembleMember<T> {
    pub coeff: ScalarField<T>,
    pub source: ScalarField<T>,
    pub boundary: ScalarField<T>,
    pub initial: ScalarField<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SolverBackend {
    /// Envelope Cholesky, factorized once per step.
    #[default]
    Direct,
    /// Jacobi-preconditioned CG per column, relative tolerance 1e-10.
    ConjugateGradient,
}

#[derive(Clone)]
pub struct EnsembleProblem<T> {
    pub members: Vec<EnsembleMember<T>>,
    pub space: Arc<FeSpace<T>>,
    pub grid: TimeGrid<T>,
    pub dirichlet_tags: Vec<BoundaryTag>,
    pub backend: SolverBackend,
}

impl<T: Real> EnsembleProblem<T> {
    pub fn new(
        members: Vec<EnsembleMember<T>>,
        space: Arc<FeSpace<T>>,
        grid: TimeGrid<T>,
        dirichlet_tags: Vec<BoundaryTag>,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        }
        Ok(Self {
            members,
            space,
            grid,
            dirichlet_tags,
            backend: SolverBackend::Direct,
        })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Restriction to a subset of members, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            members: indices.iter().map(|&j| self.members[j].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Solution block at `t_n`; column `j` holds member `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState<T> {
    pub step: usize,
    pub solution: Block<T>,
}

/// Solver work performed during a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveStats {
    pub factorizations: usize,
    pub block_solves: usize,
    pub rhs_solves: usize,
    pub wall_time_s: f64,
}

impl SolveStats {
    pub fn merge(&mut self, other: &SolveStats) {
        self.factorizations += other.factorizations;
        self.block_solves += other.block_solves;
        self.rhs_solves += other.rhs_solves;
        self.wall_time_s += other.wall_time_s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Shared matrix with the mean coefficient.
    Ensemble,
    /// Backward Euler per member.
    Independent,
}

/// Pointwise mean `(1/J) sum_j a_j(x, t)` of the member coefficients.
pub fn ensemble_mean_coeff<T: Real>(members: &[EnsembleMember<T>]) -> MeanField<T> {
    MeanField::new(members.iter().map(|m| m.coeff.clone()).collect())
}

/// Time stepper holding the operators reused across steps.
pub struct Stepper<'a, T> {
    problem: &'a EnsembleProblem<T>,
    mass: CsrMatrix<T>,
    bc: DirichletBc,
    mean: MeanField<T>,
    /// Cached stiffness matrices for time-independent coefficients.
    member_cache: Vec<Option<Arc<CsrMatrix<T>>>>,
    mean_cache: Option<Arc<CsrMatrix<T>>>,
    /// Load vectors and boundary values of time-independent data, one slot
    /// per distinct shared field.
    load_slots: SteadySlots<T>,
    boundary_slots: SteadySlots<T>,
    stats: SolveStats,
}

struct SteadySlots<T> {
    slot_of: Vec<Option<usize>>,
    values: Vec<OnceLock<Vec<T>>>,
}

impl<T> SteadySlots<T> {
    fn new<'f>(fields: impl Iterator<Item = &'f ScalarField<T>>) -> Self
    where
        T: 'f,
    {
        let mut seen: Vec<*const ()> = Vec::new();
        let slot_of = fields
            .map(|f| {
                if !f.is_steady() {
                    return None;
                }
                let key = Arc::as_ptr(f) as *const ();
                Some(seen.iter().position(|&k| k == key).unwrap_or_else(|| {
                    seen.push(key);
                    seen.len() - 1
                }))
            })
            .collect();
        Self {
            slot_of,
            values: (0..seen.len()).map(|_| OnceLock::new()).collect(),
        }
    }

    fn get_or(&self, j: usize, compute: impl FnOnce() -> Result<Vec<T>>) -> Result<Vec<T>>
    where
        T: Clone,
    {
        let Some(slot) = self.slot_of[j] else {
            return compute();
        };
        if let Some(v) = self.values[slot].get() {
            return Ok(v.clone());
        }
        let v = compute()?;
        Ok(self.values[slot].get_or_init(|| v).clone())
    }
}

impl<'a, T: Real> Stepper<'a, T> {
    pub fn new(problem: &'a EnsembleProblem<T>) -> Self {
        let space = &problem.space;
        Self {
            problem,
            mass: space.assemble_mass(),
            bc: DirichletBc::new(space, &problem.dirichlet_tags),
            mean: ensemble_mean_coeff(&problem.members),
            member_cache: vec![None; problem.size()],
            mean_cache: None,
            load_slots: SteadySlots::new(problem.members.iter().map(|m| &m.source)),
            boundary_slots: SteadySlots::new(problem.members.iter().map(|m| &m.boundary)),
            stats: SolveStats::default(),
        }
    }

    pub fn stats(&self) -> SolveStats {
        self.stats
    }

    /// `U^0`: L2 projection of each initial datum, boundary DOFs set to `g_j(., 0)`.
    pub fn initial_state(&self) -> Result<EnsembleState<T>> {
        let space = &self.problem.space;
        let columns = self
            .problem
            .members
            .par_iter()
            .map(|m| space.assemble_load(m.initial.as_ref(), T::zero()))
            .collect::<Result<Vec<_>>>()?;
        let factor = SpdFactorization::new(&self.mass)?;
        let mut u = Block::from_columns(columns)?;
        for (col, m) in u.columns_mut().zip(&self.problem.members) {
            factor.solve_in_place(col)?;
            self.bc.pin(space, col, m.boundary.as_ref(), T::zero());
        }
        Ok(EnsembleState { step: 0, solution: u })
    }

    fn member_stiffnesses(&mut self, t: T) -> Result<Vec<Arc<CsrMatrix<T>>>> {
        let missing: Vec<usize> = (0..self.problem.size()).filter(|&j| self.member_cache[j].is_none()).collect();
        let space = &self.problem.space;
        let members = &self.problem.members;
        let fresh = missing
            .par_iter()
            .map(|&j| space.assemble_stiffness(members[j].coeff.as_ref(), t).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let mut out: Vec<Option<Arc<CsrMatrix<T>>>> = self.member_cache.clone();
        for (&j, a) in missing.iter().zip(fresh) {
            if members[j].coeff.is_steady() {
                self.member_cache[j] = Some(a.clone());
            }
            out[j] = Some(a);
        }
        Ok(out.into_iter().map(|a| a.expect("filled")).collect())
    }

    fn mean_stiffness(&mut self, t: T) -> Result<Arc<CsrMatrix<T>>> {
        if let Some(a) = &self.mean_cache {
            return Ok(a.clone());
        }
        let a = Arc::new(self.problem.space.assemble_stiffness(&self.mean, t)?);
        if self.mean.is_steady() {
            self.mean_cache = Some(a.clone());
        }
        Ok(a)
    }

    fn factorize(&mut self, k: &CsrMatrix<T>) -> Result<Box<dyn BlockSolver<T>>> {
        self.stats.factorizations += 1;
        Ok(match self.problem.backend {
            SolverBackend::Direct => Box::new(SpdFactorization::new(k)?),
            SolverBackend::ConjugateGradient => Box::new(PcgSolver::new(k.clone())?),
        })
    }

    /// `F_j^{n+1} + M u_j^n / dt`, before any fluctuation or lifting.
    fn base_rhs(&self, j: usize, u: &[T], t_next: T) -> Result<Vec<T>> {
        let inv_dt = self.problem.grid.dt().recip();
        let member = &self.problem.members[j];
        let mut rhs = self
            .load_slots
            .get_or(j, || self.problem.space.assemble_load(member.source.as_ref(), t_next))?;
        let mu = self.mass.matvec(u)?;
        for (r, m) in rhs.iter_mut().zip(mu) {
            *r += m * inv_dt;
        }
        Ok(rhs)
    }

    fn boundary_values(&self, j: usize, t: T) -> Result<Vec<T>> {
        let g = &self.problem.members[j].boundary;
        self.boundary_slots
            .get_or(j, || Ok(self.bc.values(&self.problem.space, g.as_ref(), t)))
    }

    fn check_state(&self, state: &EnsembleState<T>) -> Result<()> {
        if state.step >= self.problem.grid.steps {
            return Err(Error::Config(format!(
                "state at step {} is already at the final time",
                state.step
            )));
        }
        let (n, j) = (self.problem.space.dof_count(), self.problem.size());
        if state.solution.nrows() != n || state.solution.ncols() != j {
            return Err(Error::DimensionMismatch {
                expected: n * j,
                found: state.solution.nrows() * state.solution.ncols(),
            });
        }
        Ok(())
    }

    /// One step of the shared-matrix ensemble scheme.
    pub fn ensemble_step(&mut self, state: &EnsembleState<T>) -> Result<EnsembleState<T>> {
        self.check_state(state)?;
        let step = state.step + 1;
        self.ensemble_step_inner(state)
            .map_err(|e| Error::Step { step, source: Box::new(e) })
    }

    fn ensemble_step_inner(&mut self, state: &EnsembleState<T>) -> Result<EnsembleState<T>> {
        let grid = self.problem.grid;
        let t_next = grid.time(state.step + 1);
        let inv_dt = grid.dt().recip();
        let mean_a = self.mean_stiffness(t_next)?;
        let single = self.problem.size() == 1;
        let member_a = if single { Vec::new() } else { self.member_stiffnesses(t_next)? };
        let system = self.mass.add_scaled(inv_dt, &mean_a, T::one())?;

        let this = &*self;
        let columns = (0..this.problem.size())
            .into_par_iter()
            .map(|j| {
                let u = state.solution.col(j);
                let mut rhs = this.base_rhs(j, u, t_next)?;
                if !single {
                    // Explicit fluctuation (A(a_j) - A(abar)) u_j^n.
                    let aj = member_a[j].matvec(u)?;
                    let am = mean_a.matvec(u)?;
                    for ((r, x), y) in rhs.iter_mut().zip(aj).zip(am) {
                        *r -= x - y;
                    }
                }
                let g = this.boundary_values(j, t_next)?;
                this.bc.lift(&system, &mut rhs, &g)?;
                if rhs.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteRhs { member: j });
                }
                Ok(rhs)
            })
            .collect::<Result<Vec<_>>>()?;
        let rhs = Block::from_columns(columns)?;
        let factor = self.factorize(&self.bc.constrain_matrix(&system))?;
        let solution = factor.solve_block(&rhs)?;
        self.stats.block_solves += 1;
        self.stats.rhs_solves += rhs.ncols();
        Ok(EnsembleState {
            step: state.step + 1,
            solution,
        })
    }

    /// One backward-Euler step per member, each with its own factorization.
    pub fn independent_step(&mut self, state: &EnsembleState<T>) -> Result<EnsembleState<T>> {
        self.check_state(state)?;
        let step = state.step + 1;
        self.independent_step_inner(state)
            .map_err(|e| Error::Step { step, source: Box::new(e) })
    }

    fn independent_step_inner(&mut self, state: &EnsembleState<T>) -> Result<EnsembleState<T>> {
        let grid = self.problem.grid;
        let t_next = grid.time(state.step + 1);
        let inv_dt = grid.dt().recip();
        let member_a = self.member_stiffnesses(t_next)?;
        let backend = self.problem.backend;
        let this = &*self;
        let columns = (0..this.problem.size())
            .into_par_iter()
            .map(|j| {
                let system = this.mass.add_scaled(inv_dt, &member_a[j], T::one())?;
                let mut rhs = this.base_rhs(j, state.solution.col(j), t_next)?;
                let g = this.boundary_values(j, t_next)?;
                this.bc.lift(&system, &mut rhs, &g)?;
                if rhs.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteRhs { member: j });
                }
                let constrained = this.bc.constrain_matrix(&system);
                let solver: Box<dyn BlockSolver<T>> = match backend {
                    SolverBackend::Direct => Box::new(SpdFactorization::new(&constrained)?),
                    SolverBackend::ConjugateGradient => Box::new(PcgSolver::new(constrained)?),
                };
                let x = solver.solve_block(&Block::from_columns(vec![rhs])?)?;
                Ok(x.col(0).to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let j = columns.len();
        self.stats.factorizations += j;
        self.stats.block_solves += j;
        self.stats.rhs_solves += j;
        Ok(EnsembleState {
            step: state.step + 1,
            solution: Block::from_columns(columns)?,
        })
    }
}

/// Runs all `N` steps, calling `observe` on `U^0, ..., U^N` without storing them.
pub fn run<T, F>(problem: &EnsembleProblem<T>, scheme: Scheme, mut observe: F) -> Result<SolveStats>
where
    T: Real,
    F: FnMut(&EnsembleState<T>) -> Result<()>,
{
    let start = Instant::now();
    let mut stepper = Stepper::new(problem);
    let mut state = stepper.initial_state()?;
    observe(&state)?;
    for _ in 0..problem.grid.steps {
        state = match scheme {
            Scheme::Ensemble => stepper.ensemble_step(&state)?,
            Scheme::Independent => stepper.independent_step(&state)?,
        };
        observe(&state)?;
    }
    let mut stats = stepper.stats();
    stats.wall_time_s = start.elapsed().as_secs_f64();
    Ok(stats)
}

/// A single ensemble step from `state` (no operator reuse across calls).
pub fn ensemble_step<T: Real>(problem: &EnsembleProblem<T>, state: &EnsembleState<T>) -> Result<EnsembleState<T>> {
    Stepper::new(problem).ensemble_step(state)
}

fn collect<T: Real>(problem: &EnsembleProblem<T>, scheme: Scheme) -> Result<(Vec<EnsembleState<T>>, SolveStats)> {
    let mut trajectory = Vec::with_capacity(problem.grid.steps + 1);
    let stats = run(problem, scheme, |s| {
        trajectory.push(s.clone());
        Ok(())
    })?;
    Ok((trajectory, stats))
}

/// Full trajectory `U^0..U^N` of the ensemble scheme.
pub fn ensemble_solve<T: Real>(problem: &EnsembleProblem<T>) -> Result<(Vec<EnsembleState<T>>, SolveStats)> {
    collect(problem, Scheme::Ensemble)
}

/// Full trajectory of independent backward-Euler runs.
pub fn independent_solve<T: Real>(problem: &EnsembleProblem<T>) -> Result<(Vec<EnsembleState<T>>, SolveStats)> {
    collect(problem, Scheme::Independent)
}

/// Streaming accumulation of `max_n ||u - u_h||` and
/// `sqrt(dt sum_n ||grad(u - u_h)||^2)` over `n = 1..N`.
#[derive(Clone)]
pub struct ErrorAccumulator<T> {
    exact: Vec<ScalarField<T>>,
    gradients: Vec<VectorField<T>>,
    max_l2: Vec<T>,
    h1_sq: Vec<T>,
}

impl<T: Real> ErrorAccumulator<T> {
    pub fn new(exact: Vec<ScalarField<T>>, gradients: Vec<VectorField<T>>) -> Result<Self> {
        if exact.len() != gradients.len() {
            return Err(Error::DimensionMismatch {
                expected: exact.len(),
                found: gradients.len(),
            });
        }
        let j = exact.len();
        Ok(Self {
            exact,
            gradients,
            max_l2: vec![T::zero(); j],
            h1_sq: vec![T::zero(); j],
        })
    }

    pub fn observe(&mut self, space: &FeSpace<T>, grid: &TimeGrid<T>, state: &EnsembleState<T>) -> Result<()> {
        if state.step == 0 {
            return Ok(());
        }
        if state.solution.ncols() != self.exact.len() {
            return Err(Error::DimensionMismatch {
                expected: self.exact.len(),
                found: state.solution.ncols(),
            });
        }
        let t = grid.time(state.step);
        for j in 0..self.exact.len() {
            let u = state.solution.col(j);
            let l2 = space.error_l2(u, self.exact[j].as_ref(), t);
            let h1 = space.error_h1_semi(u, &self.gradients[j], t);
            self.max_l2[j] = self.max_l2[j].max(l2);
            self.h1_sq[j] += grid.dt() * h1 * h1;
        }
        Ok(())
    }

    /// `(E_L2, E_H1)` per member.
    pub fn finish(&self) -> (Vec<T>, Vec<T>) {
        (self.max_l2.clone(), self.h1_sq.iter().map(|v| v.sqrt()).collect())
    }
}

/// `(E_L2, E_H1)` per member for a stored trajectory.
pub fn trajectory_errors<T: Real>(
    space: &FeSpace<T>,
    grid: &TimeGrid<T>,
    trajectory: &[EnsembleState<T>],
    exact: Vec<ScalarField<T>>,
    gradients: Vec<VectorField<T>>,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut acc = ErrorAccumulator::new(exact, gradients)?;
    for state in trajectory {
        acc.observe(space, grid, state)?;
    }
    Ok(acc.finish())
}
