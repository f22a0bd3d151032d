//! Convergence study on the manufactured problem.

use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::assembly::{AssemblyError, Spaces};
use crate::estimators::{error_norms, estimate, EstimatorError, EstimatorOptions, JumpMode};
use crate::mesh::{build_two_square_mesh, uniform_refine, Mesh, MeshError};
use crate::mms::{
    check_sources, interface_residuals, Manufactured, MmsError, Rates, SourceCheck, DIVERGENCE_TOL,
    SOURCE_REL_TOL,
};
use crate::timeloop::{
    project_initial_state, run_time_loop_from, InitialState, TimeGrid, TimeLoopError,
};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mms(#[from] MmsError),
    #[error("source check failed, refusing to run: {0:?}")]
    SourceGate(SourceCheck),
    #[error("level {level}: {source}")]
    Level { level: usize, source: LevelError },
}

#[derive(Debug, Error)]
pub enum LevelError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    TimeLoop(#[from] TimeLoopError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    pub levels: usize,
    /// Cells per square edge on level 0; each level doubles it.
    pub n0: usize,
    pub dt: f64,
    pub t_final: f64,
    pub alpha_e: f64,
    pub jump: JumpMode,
    pub include_eta_data: bool,
    pub initial: InitialState,
    /// Run levels on separate threads.
    pub parallel: bool,
    pub source_points: usize,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            levels: 4,
            n0: 4,
            dt: 1e-7,
            t_final: 5e-7,
            alpha_e: 0.5,
            jump: JumpMode::Traction,
            include_eta_data: false,
            initial: InitialState::Project,
            parallel: false,
            source_points: 100,
            seed: 2024,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<TimeGrid, StudyError> {
        if self.levels < 2 {
            return Err(StudyError::Config("at least two levels are needed".into()));
        }
        if self.n0 == 0 {
            return Err(StudyError::Config("n0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.alpha_e) {
            return Err(StudyError::Config("alpha_e must lie in [0, 1)".into()));
        }
        TimeGrid::new(self.t_final, self.dt).map_err(|e| StudyError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub level: usize,
    pub n: usize,
    pub h_max: f64,
    pub ndof: usize,
    pub err_d_linf: f64,
    pub err_j_linf: f64,
    pub err_u_l2: f64,
    pub err_j_l2: f64,
    pub err_e: f64,
    pub e_d: f64,
    pub e_d_dt: f64,
    pub e_j: f64,
    pub e_up: f64,
    pub eta_time: f64,
    pub eta_ok: f64,
    pub i_eff: f64,
    pub eta_data: Option<f64>,
    pub div_u_l2: f64,
    pub max_galerkin_residual: f64,
    pub max_solver_residual: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct StudyResult {
    pub rows: Vec<ConvergenceRow>,
    pub source_check: SourceCheck,
    /// Largest interface residual of the exact solution over sample points and time nodes.
    pub max_interface_residual: f64,
}

/// Runs one level on a given mesh.
pub fn run_level(
    level: usize,
    n: usize,
    mesh: Mesh,
    exact: &Manufactured,
    grid: TimeGrid,
    cfg: &StudyConfig,
) -> Result<ConvergenceRow, LevelError> {
    let start = Instant::now();
    let h_max = mesh.h_max();
    let spaces = Arc::new(Spaces::new(mesh, 1)?);
    let ndof = spaces.layout().total();
    let prm = &exact.params;
    let x0 = match cfg.initial {
        InitialState::Interpolate => spaces.interpolate(exact, 0.0),
        InitialState::Project => project_initial_state(&spaces, prm, exact, exact, &Rates(exact))?,
    };
    let tr = run_time_loop_from(Arc::clone(&spaces), prm, grid, exact, x0, exact)?;
    let opts = EstimatorOptions {
        jump: cfg.jump,
        include_eta_data: cfg.include_eta_data,
    };
    let est = estimate(&tr, exact, prm, &opts, Some(exact))?;
    let err = error_norms(&tr, exact, prm, est.eta_ok);
    Ok(ConvergenceRow {
        level,
        n,
        h_max,
        ndof,
        err_d_linf: err.err_d_linf,
        err_j_linf: err.err_j_linf,
        err_u_l2: err.err_u_l2,
        err_j_l2: err.err_j_l2,
        err_e: err.err_e,
        e_d: est.e_d,
        e_d_dt: est.e_d_dt,
        e_j: est.e_j,
        e_up: est.e_up,
        eta_time: est.eta_time,
        eta_ok: est.eta_ok,
        i_eff: err.i_eff,
        eta_data: est.eta_data,
        div_u_l2: err.div_u_l2,
        max_galerkin_residual: tr.max_galerkin_residual(),
        max_solver_residual: tr.max_solver_residual(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Source check, then one row per level.
pub fn run_convergence_study(cfg: &StudyConfig) -> Result<StudyResult, StudyError> {
    let grid = cfg.validate()?;
    let exact = Manufactured::unit(cfg.alpha_e)?;
    let source_check = check_sources(&exact, &exact, cfg.source_points, cfg.t_final, cfg.seed)?;
    if !source_check.passes(SOURCE_REL_TOL, DIVERGENCE_TOL) {
        return Err(StudyError::SourceGate(source_check));
    }
    let mut max_interface_residual: f64 = 0.0;
    for k in 0..=grid.steps {
        for i in 1..10 {
            let r = interface_residuals(&exact, grid.time(k), 0.05 * i as f64);
            max_interface_residual = max_interface_residual
                .max(r.displacement)
                .max(r.flux)
                .max(r.velocity);
        }
    }

    let base = build_two_square_mesh(cfg.n0).map_err(|e| StudyError::Level {
        level: 0,
        source: e.into(),
    })?;
    let mut meshes = vec![base];
    for _ in 1..cfg.levels {
        let next = uniform_refine(meshes.last().expect("nonempty"));
        meshes.push(next);
    }
    let jobs: Vec<(usize, usize, Mesh)> = meshes
        .into_iter()
        .enumerate()
        .map(|(l, m)| (l, cfg.n0 << l, m))
        .collect();
    let results: Vec<Result<ConvergenceRow, StudyError>> = if cfg.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .into_iter()
                .map(|(l, n, m)| {
                    let exact = &exact;
                    s.spawn(move || {
                        run_level(l, n, m, exact, grid, cfg)
                            .map_err(|source| StudyError::Level { level: l, source })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("level thread panicked"))
                .collect()
        })
    } else {
        jobs.into_iter()
            .map(|(l, n, m)| {
                run_level(l, n, m, &exact, grid, cfg)
                    .map_err(|source| StudyError::Level { level: l, source })
            })
            .collect()
    };
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(StudyResult {
        rows,
        source_check,
        max_interface_residual,
    })
}

/// `log2(q_coarse / q_fine)` between consecutive rows.
pub fn rates(rows: &[ConvergenceRow], q: impl Fn(&ConvergenceRow) -> f64) -> Vec<f64> {
    rows.windows(2)
        .map(|w| (q(&w[0]) / q(&w[1])).log2())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(err_e: f64) -> ConvergenceRow {
        ConvergenceRow {
            level: 0,
            n: 1,
            h_max: 1.0,
            ndof: 1,
            err_d_linf: 0.0,
            err_j_linf: 0.0,
            err_u_l2: 0.0,
            err_j_l2: 0.0,
            err_e,
            e_d: 0.0,
            e_d_dt: 0.0,
            e_j: 0.0,
            e_up: 0.0,
            eta_time: 0.0,
            eta_ok: 0.0,
            i_eff: 0.0,
            eta_data: None,
            div_u_l2: 0.0,
            max_galerkin_residual: 0.0,
            max_solver_residual: 0.0,
            wall_time: 0.0,
        }
    }

    #[test]
    fn rate_of_a_fourth_order_sequence() {
        let rows = vec![row(16.0), row(1.0), row(1.0 / 16.0)];
        assert_eq!(rates(&rows, |r| r.err_e), vec![4.0, 4.0]);
    }

    #[test]
    fn config_validation() {
        assert!(StudyConfig::default().validate().is_ok());
        assert!(StudyConfig {
            levels: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(StudyConfig {
            t_final: 5.5e-7,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(StudyConfig {
            alpha_e: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn two_level_study_produces_two_rows() {
        let cfg = StudyConfig {
            levels: 2,
            n0: 2,
            t_final: 2e-7,
            source_points: 10,
            ..Default::default()
        };
        let r = run_convergence_study(&cfg).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[1].n, 4);
        assert!(r.max_interface_residual < 1e-10);
        for row in &r.rows {
            let sum = row.err_d_linf + row.err_j_linf + row.err_u_l2 + row.err_j_l2;
            assert!((sum - row.err_e).abs() <= 1e-13 * row.err_e);
            let sum = row.e_d + row.e_d_dt + row.e_j + row.e_up;
            assert!((sum - row.eta_ok).abs() <= 1e-13 * row.eta_ok);
        }
    }

    #[test]
    fn parallel_levels_match_sequential_levels() {
        let cfg = StudyConfig {
            levels: 2,
            n0: 2,
            t_final: 1e-7,
            source_points: 5,
            ..Default::default()
        };
        let a = run_convergence_study(&cfg).unwrap();
        let b = run_convergence_study(&StudyConfig {
            parallel: true,
            ..cfg
        })
        .unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.err_e, y.err_e);
            assert_eq!(x.eta_ok, y.eta_ok);
        }
    }
}
