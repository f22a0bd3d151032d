use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use stokes_mpe::config::{resolve, ConfigFile, Overrides};
use stokes_mpe::estimators::JumpMode;
use stokes_mpe::report::{emit_report, render_csv, render_svg, ReportFormat};
use stokes_mpe::study::{rates, run_convergence_study};
use stokes_mpe::timeloop::InitialState;

/// Manufactured-solution convergence study of the coupled Stokes /
/// poroelasticity discretization and its a posteriori estimators.
#[derive(Debug, Parser)]
#[command(name = "converge", version)]
struct Cli {
    /// Number of mesh levels
    #[arg(long)]
    levels: Option<usize>,
    /// Cells per square edge on the coarsest level
    #[arg(long)]
    n0: Option<usize>,
    /// Time step
    #[arg(long)]
    dt: Option<f64>,
    /// Final time, a multiple of the step
    #[arg(long)]
    t_final: Option<f64>,
    /// Biot coefficient of the single network, in [0, 1)
    #[arg(long)]
    alpha_e: Option<f64>,
    /// Output file; the report goes to stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or svg
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Compute the initial-data estimator and add an eta_data column
    #[arg(long)]
    include_eta_data: bool,
    /// Face-jump norm: traction or symmetric
    #[arg(long)]
    jump: Option<JumpMode>,
    /// Discrete initial state: project or interpolate
    #[arg(long)]
    initial: Option<InitialState>,
    /// Run levels on separate threads
    #[arg(long)]
    parallel: bool,
    /// Seed of the source-check sample points
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` file; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let overrides = Overrides {
        levels: cli.levels,
        n0: cli.n0,
        dt: cli.dt,
        t_final: cli.t_final,
        alpha_e: cli.alpha_e,
        out: cli.out,
        format: cli.format,
        include_eta_data: cli.include_eta_data.then_some(true),
        jump: cli.jump,
        initial: cli.initial,
        parallel: cli.parallel.then_some(true),
        seed: cli.seed,
    };
    let settings = resolve(&overrides, &file)?;
    let result = run_convergence_study(&settings.study)?;

    let sc = &result.source_check;
    eprintln!(
        "source check: {} points, max relative residual {:.2e}, max divergence {:.2e}",
        sc.points,
        sc.max_elastic.max(sc.max_network).max(sc.max_fluid),
        sc.max_divergence
    );
    eprintln!(
        "interface residual of the exact solution: {:.2e}",
        result.max_interface_residual
    );
    for r in &result.rows {
        eprintln!(
            "level {} n {:>3} ndof {:>7}  ERR_e {:.3e}  eta_ok {:.3e}  I_eff {:.2}  galerkin {:.1e}  {:.1}s",
            r.level, r.n, r.ndof, r.err_e, r.eta_ok, r.i_eff, r.max_galerkin_residual, r.wall_time
        );
    }
    let fmt = |v: Vec<f64>| {
        v.iter()
            .map(|x| format!("{x:.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    eprintln!("rate ERR_e:  {}", fmt(rates(&result.rows, |r| r.err_e)));
    eprintln!("rate eta_ok: {}", fmt(rates(&result.rows, |r| r.eta_ok)));

    match &settings.out {
        Some(path) => emit_report(&result.rows, path, settings.format)?,
        None => match settings.format {
            ReportFormat::Csv => print!("{}", render_csv(&result.rows)?),
            ReportFormat::Svg => print!("{}", render_svg(&result.rows)?),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
