//! Uniform time grid and the implicit-Euler loop.

use std::sync::Arc;

use thiserror::Error;

use crate::assembly::{
    constrain_matrix, constrain_rhs, dirichlet_values, galerkin_orthogonality_residual,
    load_vectors, AssemblyError, BlockLayout, FieldData, FormMatrices, ParameterSet, SourceTerms,
    Spaces, StepAssembler,
};
use crate::solver::{sparse_solve, LuFactorization, SolverError};
use crate::sparse::Triplets;

#[derive(Debug, Error)]
pub enum TimeLoopError {
    #[error("final time {t_final} is not an integer multiple of the step {dt}")]
    Grid { t_final: f64, dt: f64 },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("factorization failed: {0}")]
    Factorization(SolverError),
    #[error("initial projection: {0}")]
    Projection(SolverError),
    #[error("step {step}: {source}")]
    Step { step: usize, source: SolverError },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t_final: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, dt: f64) -> Result<Self, TimeLoopError> {
        let bad = TimeLoopError::Grid { t_final, dt };
        if !(dt > 0.0) || !(t_final > 0.0) {
            return Err(bad);
        }
        let ratio = t_final / dt;
        let steps = ratio.round();
        if steps < 1.0 || ((ratio - steps) / steps).abs() > 1e-10 {
            return Err(bad);
        }
        Ok(TimeGrid {
            t_final,
            dt,
            steps: steps as usize,
        })
    }

    /// `t^n = n dt`
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }
}

/// Per-step linear algebra diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    /// `||A x - b|| / ||b||` of the constrained solve.
    pub solver_residual: f64,
    /// Largest unconstrained residual of the unconstrained system, relative to `||rhs||`.
    pub galerkin_residual: f64,
}

/// Coefficient vectors at every time node; node 0 holds interpolated initial data.
#[derive(Clone, Debug)]
pub struct StateTrajectory {
    pub spaces: Arc<Spaces>,
    pub grid: TimeGrid,
    pub layout: BlockLayout,
    pub states: Vec<Vec<f64>>,
    /// Entry `n - 1` belongs to the step ending at `t^n`.
    pub diagnostics: Vec<StepDiagnostics>,
}

impl StateTrajectory {
    pub fn displacement(&self, n: usize) -> &[f64] {
        &self.states[n][self.layout.displacement.clone()]
    }

    pub fn pressure(&self, n: usize) -> &[f64] {
        &self.states[n][self.layout.pressure.clone()]
    }

    pub fn velocity(&self, n: usize) -> &[f64] {
        &self.states[n][self.layout.velocity.clone()]
    }

    pub fn stokes_pressure(&self, n: usize) -> &[f64] {
        &self.states[n][self.layout.stokes_pressure.clone()]
    }

    pub fn max_galerkin_residual(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.galerkin_residual)
            .fold(0.0, f64::max)
    }

    pub fn max_solver_residual(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.solver_residual)
            .fold(0.0, f64::max)
    }
}

/// How the discrete state at `t = 0` is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitialState {
    /// Nodal interpolation of the initial fields.
    #[default]
    Interpolate,
    /// Solve the stationary coupled problem at `t = 0`, with the time-derivative
    /// terms of the network equation taken from interpolated rates.
    Project,
}

impl std::str::FromStr for InitialState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "interpolate" => Ok(InitialState::Interpolate),
            "project" => Ok(InitialState::Project),
            other => Err(format!(
                "unknown initial state `{other}` (expected interpolate or project)"
            )),
        }
    }
}

/// Stationary projection of the initial data: the step system without its
/// `1/dt` terms, with `m_J(dt p) - b_J(., dt d) - J_el(., dt d)` moved to the load.
pub fn project_initial_state(
    spaces: &Spaces,
    params: &ParameterSet,
    sources: &dyn SourceTerms,
    initial: &dyn FieldData,
    rates: &dyn FieldData,
) -> Result<Vec<f64>, TimeLoopError> {
    let f = FormMatrices::assemble(spaces, params)?;
    let l = spaces.layout();
    let (od, op, ou, oq) = (
        l.displacement.start,
        l.pressure.start,
        l.velocity.start,
        l.stokes_pressure.start,
    );
    let n = l.total();
    let mut a = Triplets::new(n, n);
    a.add_block(od, od, &f.elastic, 1.0);
    a.add_block(od, op, &f.biot, 1.0);
    a.add_block(od, op, &f.interface_el, 1.0);
    a.add_block(op, op, &f.diffusion, 1.0);
    a.add_block(op, ou, &f.interface_f.transpose(), -1.0);
    a.add_block(ou, ou, &f.fluid, 1.0);
    a.add_block(ou, oq, &f.divergence, 1.0);
    a.add_block(ou, op, &f.interface_f, 1.0);
    a.add_block(oq, ou, &f.divergence.transpose(), 1.0);
    let a = a.to_csr();

    let r = spaces.interpolate(rates, 0.0);
    let storage = f.storage.mul_vec(&r[l.pressure.clone()]);
    let biot = f.biot.transpose().mul_vec(&r[l.displacement.clone()]);
    let jel = f
        .interface_el
        .transpose()
        .mul_vec(&r[l.displacement.clone()]);
    let mut rhs = load_vectors(spaces, 0.0, sources);
    for (k, v) in rhs[l.pressure.clone()].iter_mut().enumerate() {
        *v -= storage[k] - biot[k] - jel[k];
    }
    let constrained = spaces.constrained_dofs();
    let values = dirichlet_values(spaces, &constrained, initial, 0.0);
    let rhs = constrain_rhs(&a, &rhs, &constrained, &values);
    let sol = sparse_solve(&constrain_matrix(&a, &constrained), &rhs)
        .map_err(TimeLoopError::Projection)?;
    Ok(sol.x)
}

/// Implicit Euler from interpolated initial data; the step matrix is factorized once.
pub fn run_time_loop(
    spaces: Arc<Spaces>,
    params: &ParameterSet,
    grid: TimeGrid,
    sources: &dyn SourceTerms,
    initial: &dyn FieldData,
    boundary: &dyn FieldData,
) -> Result<StateTrajectory, TimeLoopError> {
    let x0 = spaces.interpolate(initial, 0.0);
    run_time_loop_from(spaces, params, grid, sources, x0, boundary)
}

/// Implicit Euler from a given coefficient vector at `t = 0`.
pub fn run_time_loop_from(
    spaces: Arc<Spaces>,
    params: &ParameterSet,
    grid: TimeGrid,
    sources: &dyn SourceTerms,
    x0: Vec<f64>,
    boundary: &dyn FieldData,
) -> Result<StateTrajectory, TimeLoopError> {
    let asm = StepAssembler::new(&spaces, params, grid.dt)?;
    let constrained = spaces.constrained_dofs();
    let lu = LuFactorization::new(&constrain_matrix(asm.matrix(), &constrained))
        .map_err(TimeLoopError::Factorization)?;

    let mut states = Vec::with_capacity(grid.nodes());
    let mut diagnostics = Vec::with_capacity(grid.steps);
    states.push(x0);
    for n in 1..=grid.steps {
        let t = grid.time(n);
        let system = asm.step_system(&spaces, &states[n - 1], t, sources)?;
        let values = dirichlet_values(&spaces, &constrained, boundary, t);
        let rhs = constrain_rhs(&system.matrix, &system.rhs, &constrained, &values);
        let sol = lu
            .solve(&rhs)
            .map_err(|source| TimeLoopError::Step { step: n, source })?;
        diagnostics.push(StepDiagnostics {
            solver_residual: sol.relative_residual,
            galerkin_residual: galerkin_orthogonality_residual(&system, &sol.x),
        });
        states.push(sol.x);
    }
    Ok(StateTrajectory {
        layout: spaces.layout(),
        spaces,
        grid,
        states,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::ZeroData;
    use crate::mesh::build_two_square_mesh;
    use crate::mms::Manufactured;

    fn spaces(n: usize) -> Arc<Spaces> {
        Arc::new(Spaces::new(build_two_square_mesh(n).unwrap(), 1).unwrap())
    }

    #[test]
    fn grid_validation() {
        let g = TimeGrid::new(5e-7, 1e-7).unwrap();
        assert_eq!(g.steps, 5);
        assert_eq!(g.nodes(), 6);
        assert!(TimeGrid::new(5.5e-7, 1e-7).is_err());
        assert!(TimeGrid::new(1.0, 0.0).is_err());
        assert!(TimeGrid::new(1e-8, 1e-7).is_err());
    }

    #[test]
    fn five_steps_store_six_states() {
        let m = Manufactured::unit(0.5).unwrap();
        let grid = TimeGrid::new(5e-7, 1e-7).unwrap();
        let tr = run_time_loop(spaces(2), &m.params, grid, &m, &m, &m).unwrap();
        assert_eq!(tr.states.len(), 6);
        assert_eq!(tr.diagnostics.len(), 5);
        assert!(
            tr.max_galerkin_residual() <= 1e-9,
            "{}",
            tr.max_galerkin_residual()
        );
    }

    #[test]
    fn zero_data_gives_zero_states() {
        let p = ParameterSet::single_network(0.5);
        let grid = TimeGrid::new(3.0, 1.0).unwrap();
        let tr = run_time_loop(spaces(2), &p, grid, &ZeroData, &ZeroData, &ZeroData).unwrap();
        assert!(tr.states.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let m = Manufactured::unit(0.5).unwrap();
        let grid = TimeGrid::new(2e-7, 1e-7).unwrap();
        let a = run_time_loop(spaces(2), &m.params, grid, &m, &m, &m).unwrap();
        let b = run_time_loop(spaces(2), &m.params, grid, &m, &m, &m).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn solved_velocity_is_discretely_divergence_free() {
        let m = Manufactured::unit(0.5).unwrap();
        let s = spaces(3);
        let grid = TimeGrid::new(1e-7, 1e-7).unwrap();
        let tr = run_time_loop(Arc::clone(&s), &m.params, grid, &m, &m, &m).unwrap();
        let asm = StepAssembler::new(&s, &m.params, grid.dt).unwrap();
        let bt = asm.forms.divergence.transpose();
        let r = bt.mul_vec(tr.velocity(1));
        let scale = asm.forms.divergence.max_abs()
            * tr.velocity(1).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(r.iter().all(|v| v.abs() <= 1e-10 * scale), "{r:?}");
    }
}
