//! Command-line driver: `solve`, `optimize`, `grad-check`, `curvature-check`
//! and `oracle-check` subcommands over a flat-text configuration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver nonconvergence,
//! 4 deformation stall. Every error is also written as one line to stderr.

use crate::config::{ConfigError, RunConfig};
use crate::fem::VectorField;
use crate::mesh::{
    area, boundary_frame, generate_ellipse_mesh, polygon_fan_mesh, rectangle_mesh, BoundaryTag,
    Mesh, Side,
};
use crate::optim::{run_optimization, OptimError};
use crate::out;
use crate::shape::{fd_gradient_check, shape_gradient_report, DerivativeError, ShapeContext};
use crate::tresca::{
    energy_norm_distance, oracle_projected_gradient, solve_tresca_with,
    ContactState, Discretization, ProblemData, TrescaError,
};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "tresca2d",
    about = "2D elasticity with Tresca friction: solve, shape gradients, shape optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file (flat key = value text); defaults to the built-in
    /// toy problem when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Target mesh edge length override.
    #[arg(long, global = true)]
    h: Option<f64>,
    /// Outer iteration cap override for `optimize`.
    #[arg(long = "max-iters", global = true)]
    max_iters: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One friction solve: writes the displacement VTK and the contact CSV.
    Solve,
    /// Full shape-optimization loop: history CSV plus periodic VTK snapshots.
    Optimize,
    /// Finite-difference validation of both shape-gradient forms.
    GradCheck,
    /// Discrete vs analytic boundary curvature on a circle and the ellipse.
    CurvatureCheck,
    /// Switching solver vs proximal-gradient oracle on a built-in coarse mesh.
    OracleCheck,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Mesh(#[from] crate::mesh::MeshError),
    #[error("{0}")]
    Tresca(#[from] TrescaError),
    #[error("{0}")]
    Solve(#[from] crate::fem::SolveError),
    #[error("{0}")]
    Optim(#[from] OptimError),
    #[error("{0}")]
    Derivative(#[from] DerivativeError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Mesh(crate::mesh::MeshError::Config(_)) => 2,
            CliError::Mesh(_) => 4,
            CliError::Optim(OptimError::Stall { .. }) => 4,
            CliError::Io(_) => 2,
            _ => 3,
        }
    }
}

/// Run the command line. Returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own help/usage; map parse failures to config errors
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };

    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::from_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        },
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(h) = cli.h {
        cfg.h = h;
    }
    if let Some(m) = cli.max_iters {
        cfg.max_outer_iters = m;
    }

    let result = match cli.command {
        Command::Solve => cmd_solve(&cfg),
        Command::Optimize => cmd_optimize(&cfg),
        Command::GradCheck => cmd_grad_check(&cfg),
        Command::CurvatureCheck => cmd_curvature_check(&cfg),
        Command::OracleCheck => cmd_oracle_check(&cfg),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn build_mesh(cfg: &RunConfig) -> Result<Mesh, CliError> {
    cfg.check_threshold_positive()?;
    Ok(generate_ellipse_mesh(cfg.a, cfg.b, cfg.h, &cfg.dirichlet_arcs)?)
}

fn solve_once(
    mesh: &Mesh,
    pd: &ProblemData,
) -> Result<(Discretization, VectorField, ContactState), CliError> {
    let disc = Discretization::build(mesh, pd)?;
    let (u, state) = solve_tresca_with(mesh, pd, &disc, None)?;
    Ok((disc, u, state))
}

fn solution_vtk(
    mesh: &Mesh,
    pd_title: &str,
    u: &VectorField,
    state: &ContactState,
    path: &Path,
) -> Result<(), CliError> {
    let nv = mesh.num_vertices();
    let mut g_field = vec![0.0; nv];
    let mut sigma_n = vec![0.0; nv];
    let mut s_tau = vec![0.0; nv];
    let mut mode = vec![-1.0; nv];
    for i in 0..state.len() {
        let v = state.nodes[i];
        g_field[v] = state.g[i];
        sigma_n[v] = state.sigma_n[i];
        s_tau[v] = state.s_tau[i];
        mode[v] = out::contact_mode_code(state.mode[i]) as f64;
    }
    out::write_vtk(
        mesh,
        &[("displacement", u.values())],
        &[
            out::ScalarField { name: "g", values: g_field },
            out::ScalarField { name: "sigma_n", values: sigma_n },
            out::ScalarField { name: "s_tau", values: s_tau },
            out::ScalarField { name: "contact_mode", values: mode },
        ],
        pd_title,
        path,
    )?;
    Ok(())
}

fn cmd_solve(cfg: &RunConfig) -> Result<(), CliError> {
    let mesh = build_mesh(cfg)?;
    let pd = cfg.problem_data();
    let (disc, u, state) = solve_once(&mesh, &pd)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    let title = format!("tresca2d solve, h={}", cfg.h);
    solution_vtk(&mesh, &title, &u, &state, &out_dir.join("solution.vtk"))?;
    out::write_boundary_polydata(&mesh, &title, &out_dir.join("boundary.vtk"))?;
    out::write_contact_csv(&mesh, &state, &out_dir.join("contact.csv"))?;
    let e = disc.energy(u.values());
    println!(
        "solved: {} vertices, energy {:.6e}, volume {:.6e}, switching passes {}",
        mesh.num_vertices(),
        e,
        area(&mesh),
        state.switch_iters
    );
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn cmd_optimize(cfg: &RunConfig) -> Result<(), CliError> {
    let mesh = build_mesh(cfg)?;
    let pd = cfg.problem_data();
    let ocfg = cfg.optim_config();
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let title = format!("tresca2d optimize, h={}", cfg.h);
    let mut snapshot = |iter: usize, m: &Mesh, u: &VectorField, st: &ContactState| {
        let path = out_dir.join(format!("shape_{iter:04}.vtk"));
        let _ = solution_vtk(m, &title, u, st, &path);
    };
    let (final_mesh, history) = run_optimization(&mesh, &pd, &ocfg, Some(&mut snapshot))?;
    out::write_history_csv(&history, &out_dir.join("history.csv"))?;
    let pdata = cfg.problem_data();
    let (_, u_f, state_f) = solve_once(&final_mesh, &pdata)?;
    solution_vtk(&final_mesh, &title, &u_f, &state_f, &out_dir.join("shape_final.vtk"))?;
    out::write_boundary_polydata(&final_mesh, &title, &out_dir.join("boundary_final.vtk"))?;
    let first = history.records.first();
    let last = history.records.last();
    if let (Some(first), Some(last)) = (first, last) {
        println!(
            "optimization: {} iterations, energy {:.6e} -> {:.6e}, volume {:.6e} -> {:.6e}",
            history.len(),
            first.energy,
            last.energy,
            first.volume,
            last.volume
        );
    }
    println!("history and snapshots in {}", out_dir.display());
    Ok(())
}

fn cmd_grad_check(cfg: &RunConfig) -> Result<(), CliError> {
    let mesh = build_mesh(cfg)?;
    let pd = cfg.problem_data();
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let t_list = [1e-2, 1e-3, 1e-4];
    let mut all_rows = Vec::new();
    println!("seed  t        fd_quotient    boundary       volume         rel_err_b  rel_err_v");
    for k in [1u64, 4, 9] {
        let seed = cfg.seed.wrapping_add(k);
        let theta = crate::shape::seeded_boundary_direction(&mesh, seed)?;
        let rows = fd_gradient_check(&mesh, &pd, &theta, &t_list)?;
        for r in &rows {
            println!(
                "{:>4}  {:<7.1e} {:>13.6e} {:>13.6e} {:>13.6e}  {:>9.3e} {:>9.3e}",
                seed, r.t, r.fd_quotient, r.value_boundary, r.value_volume,
                r.rel_err_boundary, r.rel_err_volume
            );
        }
        all_rows.extend(rows);
    }
    out::write_fd_table_csv(&all_rows, &out_dir.join("grad_check.csv"))?;
    // one gradient report for the first seed, for inspection
    let (disc, u, state) = solve_once(&mesh, &pd)?;
    let cx = ShapeContext::build(&mesh, &pd, &disc, &u, &state)?;
    let theta = crate::shape::seeded_boundary_direction(&mesh, cfg.seed.wrapping_add(1))?;
    let report = shape_gradient_report(&cx, &theta)?;
    out::write_gradient_report_json(&report, &out_dir.join("gradient_report.json"))?;
    println!("table in {}", out_dir.join("grad_check.csv").display());
    Ok(())
}

fn cmd_curvature_check(cfg: &RunConfig) -> Result<(), CliError> {
    // circle of radius 1 at h = 0.02
    let n = (2.0 * std::f64::consts::PI / 0.02).round() as usize;
    let pts: Vec<[f64; 2]> = (0..n)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            [t.cos(), t.sin()]
        })
        .collect();
    let circle = polygon_fan_mesh(&pts, BoundaryTag::Tresca)?;
    let fc = boundary_frame(&circle);
    let circle_err = fc
        .curvature
        .iter()
        .map(|c| (c - 1.0).abs())
        .fold(0.0, f64::max);
    println!("circle R=1, h=0.02: max |H - 1| = {circle_err:.3e} (target <= 2e-2)");

    let mesh = build_mesh(cfg)?;
    let fe = boundary_frame(&mesh);
    let (a, b) = (cfg.a, cfg.b);
    let mut max_rel = 0.0f64;
    let mut at_major = 0.0;
    for (k, &v) in fe.nodes.iter().enumerate() {
        let p = mesh.vertex(v);
        let gamma = (p[1] / b).atan2(p[0] / a);
        let exact = a * b
            / ((a * a * gamma.sin().powi(2) + b * b * gamma.cos().powi(2)).powf(1.5));
        max_rel = max_rel.max((fe.curvature[k] - exact).abs() / exact);
        if p[1].abs() < 1e-9 && p[0] > 0.0 {
            at_major = fe.curvature[k];
        }
    }
    println!(
        "ellipse a={a}, b={b:.6}, h={}: H(a,0) = {at_major:.6} (exact {:.6}), max rel err {max_rel:.3e}",
        cfg.h,
        a / (b * b)
    );
    Ok(())
}

fn cmd_oracle_check(cfg: &RunConfig) -> Result<(), CliError> {
    // built-in coarse square: 49 nodes, clamped left edge, f = (0,-1), g = 0.3
    let mesh = rectangle_mesh(6, 6, 1.0, 1.0, &[Side::Left])?;
    let pd = {
        let mut pd = ProblemData::new(
            [
                crate::expr::parse_expression("0").unwrap(),
                crate::expr::parse_expression("-1").unwrap(),
            ],
            crate::expr::parse_expression("0.3").unwrap(),
            0.5,
            0.0,
        );
        pd.lin_tol = cfg.lin_tol;
        pd
    };
    let disc = Discretization::build(&mesh, &pd)?;
    let start = std::time::Instant::now();
    let (u, state) = solve_tresca_with(&mesh, &pd, &disc, None)?;
    let pg = oracle_projected_gradient(&mesh, &pd, 4_000_000, 1e-15)?;
    let dist = energy_norm_distance(&disc, u.values(), pg.values());
    let elapsed = start.elapsed();
    println!(
        "coarse square ({} nodes): switching vs proximal gradient = {dist:.3e} in the energy norm \
         ({} switching passes, {:.2}s)",
        mesh.num_vertices(),
        state.switch_iters,
        elapsed.as_secs_f64()
    );
    println!("target: <= 1e-6");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_out(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("tresca2d_cli").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn solve_with_zero_force_writes_zero_vtk() {
        let dir = tmp_out("solve_zero");
        let cfg_path = dir.join("run.cfg");
        std::fs::write(&cfg_path, "f_x = 0\nf_y = 0\nh = 0.2\n").unwrap();
        let code = run_cli([
            "tresca2d",
            "solve",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let vtk = std::fs::read_to_string(dir.join("solution.vtk")).unwrap();
        assert!(vtk.starts_with("# vtk DataFile Version 3.0\n"));
        let after = vtk.split("VECTORS displacement double\n").nth(1).unwrap();
        for line in after.lines().take(20) {
            if line.starts_with("SCALARS") {
                break;
            }
            assert_eq!(line, "0.0000000000000000e0 0.0000000000000000e0 0");
        }
        assert!(dir.join("contact.csv").exists());
        let csv = std::fs::read_to_string(dir.join("contact.csv")).unwrap();
        assert!(csv.starts_with("node,x,y,mode,sigma_n,s_tau,g,u_tau\n"));
        for name in ["SCALARS g double", "SCALARS sigma_n double", "SCALARS s_tau double", "SCALARS contact_mode double"] {
            assert!(vtk.contains(name), "missing {name}");
        }
        assert!(dir.join("boundary.vtk").exists());
    }

    #[test]
    fn solver_nonconvergence_exit_code() {
        let dir = tmp_out("lin_fail");
        let cfg_path = dir.join("run.cfg");
        std::fs::write(&cfg_path, "h = 0.2\nlin_max_iter = 2\n").unwrap();
        let code = run_cli([
            "tresca2d",
            "solve",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 3);
    }

    #[test]
    fn grad_check_meets_tolerance_on_default_config() {
        let dir = tmp_out("grad_check");
        let code = run_cli(["tresca2d", "grad-check", "--out", dir.to_str().unwrap()]);
        assert_eq!(code, 0);
        let csv = std::fs::read_to_string(dir.join("grad_check.csv")).unwrap();
        let mut checked = 0;
        for line in csv.lines().skip(1) {
            let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            if cols[0] == 1e-3 {
                assert!(cols[4] <= 0.05, "rel err {} at t=1e-3", cols[4]);
                checked += 1;
            }
        }
        assert_eq!(checked, 3, "expected three seeded directions");
        assert!(dir.join("gradient_report.json").exists());
    }

    #[test]
    fn solve_mode_field_shows_slip_on_top_stick_on_bottom() {
        let dir = tmp_out("solve_toy");
        let code = run_cli([
            "tresca2d",
            "solve",
            "--h",
            "0.1",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let csv = std::fs::read_to_string(dir.join("contact.csv")).unwrap();
        let mut slip_top = false;
        let mut stick_bottom = false;
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let y: f64 = cols[2].parse().unwrap();
            match cols[3] {
                "SLIP" if y > 0.0 => slip_top = true,
                "STICK_STRICT" if y < 0.0 => stick_bottom = true,
                _ => {}
            }
        }
        assert!(slip_top, "expected slip on the top boundary");
        assert!(stick_bottom, "expected strict stick on the bottom boundary");
    }

    #[test]
    fn optimize_short_run_decreases_energy() {
        let dir = tmp_out("optimize");
        let code = run_cli([
            "tresca2d",
            "optimize",
            "--h",
            "0.15",
            "--max-iters",
            "10",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let csv = std::fs::read_to_string(dir.join("history.csv")).unwrap();
        assert!(csv.starts_with("iter,J,volume,multiplier,step,switch_iters,min_angle\n"));
        let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
        assert!(rows.len() >= 2);
        let j_first: f64 = rows.first().unwrap()[1].parse().unwrap();
        let j_last: f64 = rows.last().unwrap()[1].parse().unwrap();
        assert!(j_last < j_first, "energy did not decrease: {j_first} -> {j_last}");
        let vol_last: f64 = rows.last().unwrap()[2].parse().unwrap();
        assert!((vol_last - std::f64::consts::PI).abs() < 0.01 * std::f64::consts::PI);
        assert!(dir.join("shape_final.vtk").exists());
    }

    #[test]
    fn config_error_exit_code() {
        let dir = tmp_out("bad_config");
        let cfg_path = dir.join("run.cfg");
        std::fs::write(&cfg_path, "g = -1\n").unwrap();
        let code = run_cli([
            "tresca2d",
            "solve",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);

        // degenerate arcs: empty frictional boundary
        let cfg_path2 = dir.join("run2.cfg");
        std::fs::write(&cfg_path2, "gammaD = [0,2pi]\n").unwrap();
        let code = run_cli([
            "tresca2d",
            "solve",
            "--config",
            cfg_path2.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn curvature_and_oracle_subcommands_run() {
        let dir = tmp_out("checks");
        assert_eq!(
            run_cli(["tresca2d", "curvature-check", "--h", "0.1", "--out", dir.to_str().unwrap()]),
            0
        );
        assert_eq!(
            run_cli(["tresca2d", "oracle-check", "--out", dir.to_str().unwrap()]),
            0
        );
    }
}
