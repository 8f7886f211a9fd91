//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured numbers. Run with
//! `cargo test --test acceptance -- --nocapture` to see the report.

use std::f64::consts::PI;
use std::time::Instant;
use tresca2d::fem::assemble_h1_metric;
use tresca2d::math2d::*;
use tresca2d::mesh::{
    area, boundary_frame, generate_ellipse_mesh, mesh_quality, polygon_fan_mesh, rectangle_mesh,
    BoundaryTag, Mesh, Side,
};
use tresca2d::optim::{run_optimization, OptimConfig};
use tresca2d::shape::{
    boundary_gradient_form, descent_direction, fd_gradient_check, material_derivative_fd_check,
    seeded_boundary_direction, shape_gradient_volume, ShapeContext,
};
use tresca2d::tresca::{
    classify_boundary, energy, energy_norm_distance, oracle_projected_gradient, seeded_direction,
    solve_tresca, solve_tresca_with, Discretization, ProblemData,
};

fn toy_arcs() -> Vec<(f64, f64)> {
    vec![(2.0 * PI / 3.0, 4.0 * PI / 3.0), (5.0 * PI / 3.0, 7.0 * PI / 3.0)]
}

fn toy_mesh(h: f64) -> Mesh {
    generate_ellipse_mesh(1.1, 1.0 / 1.1, h, &toy_arcs()).unwrap()
}

/// Criterion 1: on a coarse square mesh (49 nodes, clamped left edge,
/// f = (0,-1), g = 0.3) the switching solver and the proximal-gradient
/// oracle agree within 1e-6 in the energy norm, in under 5 seconds.
#[test]
fn acceptance_1_oracle_equivalence() {
    let start = Instant::now();
    let mesh = rectangle_mesh(6, 6, 1.0, 1.0, &[Side::Left]).unwrap();
    assert!(mesh.num_vertices() <= 60);
    let pd = ProblemData::new(
        [
            tresca2d::expr::parse_expression("0").unwrap(),
            tresca2d::expr::parse_expression("-1").unwrap(),
        ],
        tresca2d::expr::parse_expression("0.3").unwrap(),
        0.5,
        0.0,
    );
    let disc = Discretization::build(&mesh, &pd).unwrap();
    let (u, _) = solve_tresca_with(&mesh, &pd, &disc, None).unwrap();
    let pg = oracle_projected_gradient(&mesh, &pd, 4_000_000, 1e-15).unwrap();
    let dist = energy_norm_distance(&disc, u.values(), pg.values());
    let elapsed = start.elapsed().as_secs_f64();
    assert!(dist <= 1e-6, "oracle distance {dist:.3e} above 1e-6");
    assert!(elapsed < 5.0, "oracle comparison took {elapsed:.2}s");
    println!("ACCEPTANCE 1 PASS: switching vs proximal gradient {dist:.3e} (energy norm), {elapsed:.2}s");
}

/// Criterion 2: the discrete friction law holds after the converged solve on
/// the toy configuration at h = 0.05.
#[test]
fn acceptance_2_complementarity_suite() {
    let mesh = toy_mesh(0.05);
    let pd = ProblemData::toy();
    let (_, cs) = solve_tresca(&mesh, &pd, None).unwrap();
    let ut_max = cs.u_tau.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let g_max = cs.g.iter().fold(0.0f64, |a, &b| a.max(b));
    let traction_scale = cs
        .s_tau
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(g_max);
    let mut worst_comp = 0.0f64;
    let mut worst_bound = 0.0f64;
    let mut worst_sn = 0.0f64;
    for i in 0..cs.len() {
        worst_comp = worst_comp.max((cs.u_tau[i] * cs.s_tau[i] + cs.g[i] * cs.u_tau[i].abs()).abs());
        worst_bound = worst_bound.max(cs.s_tau[i].abs() / cs.g[i]);
        worst_sn = worst_sn.max(cs.sigma_n[i].abs());
    }
    assert!(
        worst_comp <= 1e-8 * g_max * ut_max,
        "complementarity defect {worst_comp:.3e}"
    );
    assert!(worst_bound <= 1.0 + 1e-8, "threshold ratio {worst_bound}");
    assert!(worst_sn <= 1e-6 * traction_scale, "normal traction {worst_sn:.3e}");
    println!(
        "ACCEPTANCE 2 PASS: complementarity {worst_comp:.2e} <= 1e-8*scale, \
         max |s_tau|/g = {worst_bound:.12}, |sigma_n| {worst_sn:.2e} <= 1e-6*scale"
    );
}

/// Criterion 3: the Tresca energy at the solution equals -a(u,u)/2 to 1e-10
/// relative.
#[test]
fn acceptance_3_energy_identity() {
    let mesh = toy_mesh(0.05);
    let pd = ProblemData::toy();
    let disc = Discretization::build(&mesh, &pd).unwrap();
    let (u, _) = solve_tresca_with(&mesh, &pd, &disc, None).unwrap();
    let e = energy(&mesh, &pd, &u).unwrap();
    let ident = -0.5 * disc.op.quadratic_form(u.values());
    let rel = (e - ident).abs() / ident.abs();
    assert!(rel <= 1e-10, "energy identity defect {rel:.3e}");
    println!("ACCEPTANCE 3 PASS: |J - (-a(u,u)/2)| / |J| = {rel:.2e} (J = {e:.6e})");
}

/// Criterion 4: finite-difference validation of the shape gradient at
/// h = 0.05 for three fixed seeded directions: the t = 1e-3 quotient matches
/// the boundary form within 5% with the error decreasing from t = 1e-2, and
/// the two analytic forms agree within 5%.
#[test]
fn acceptance_4_gradient_validation() {
    let mesh = toy_mesh(0.05);
    let pd = ProblemData::toy();
    let disc = Discretization::build(&mesh, &pd).unwrap();
    let (u0, state) = solve_tresca_with(&mesh, &pd, &disc, None).unwrap();
    let cx = ShapeContext::build(&mesh, &pd, &disc, &u0, &state).unwrap();
    for seed in [1u64, 4, 9] {
        let theta = seeded_boundary_direction(&mesh, seed).unwrap();
        let rows = fd_gradient_check(&mesh, &pd, &theta, &[1e-2, 1e-3]).unwrap();
        // rows sorted by t ascending: rows[0] is t = 1e-3
        let e3 = rows[0].rel_err_boundary;
        let e2 = rows[1].rel_err_boundary;
        assert!(e3 <= 0.05, "seed {seed}: fd vs boundary form {e3:.4} at t=1e-3");
        assert!(e3 <= e2, "seed {seed}: error not decreasing ({e2:.4} -> {e3:.4})");
        let b = rows[0].value_boundary;
        let v = shape_gradient_volume(&cx, &theta).unwrap();
        let cross = (b - v).abs() / b.abs().max(v.abs());
        assert!(cross <= 0.05, "seed {seed}: cross-form disagreement {cross:.4}");
        println!(
            "ACCEPTANCE 4 PASS (seed {seed}): fd err {e2:.4} -> {e3:.4} (<= 0.05), \
             cross-form {cross:.4} (<= 0.05)"
        );
    }
}

/// Criterion 5: the H1 descent direction satisfies G(theta0) = -|theta0|^2
/// to 1e-8 relative and the finite-difference quotient along it is negative.
#[test]
fn acceptance_5_descent_identity() {
    let mesh = toy_mesh(0.05);
    let pd = ProblemData::toy();
    let disc = Discretization::build(&mesh, &pd).unwrap();
    let (u0, state) = solve_tresca_with(&mesh, &pd, &disc, None).unwrap();
    let cx = ShapeContext::build(&mesh, &pd, &disc, &u0, &state).unwrap();
    let form = boundary_gradient_form(&cx).unwrap().total();
    let theta0 = descent_direction(&mesh, &form, pd.lin_tol, pd.lin_max_iter).unwrap();
    let h1 = assemble_h1_metric(&mesh);
    let nrm2 = h1.quadratic_form(theta0.values());
    let g = form.eval(theta0.values());
    let rel = (g + nrm2).abs() / nrm2;
    assert!(rel <= 1e-8, "descent identity defect {rel:.3e}");
    let rows = fd_gradient_check(&mesh, &pd, &theta0, &[1e-3]).unwrap();
    assert!(
        rows[0].fd_quotient < 0.0,
        "fd quotient along the descent direction is {:.3e}",
        rows[0].fd_quotient
    );
    println!(
        "ACCEPTANCE 5 PASS: G(theta0) + |theta0|^2 = {rel:.2e} relative, \
         fd quotient {:.4e} < 0",
        rows[0].fd_quotient
    );
}

/// Criterion 6: the toy shape optimization terminates with decreased energy,
/// final volume within 1% of pi and valid meshes, in under 10 minutes.
#[test]
fn acceptance_6_toy_optimization() {
    let start = Instant::now();
    let h = 0.05;
    let mesh = toy_mesh(h);
    let pd = ProblemData::toy();
    let cfg = OptimConfig::defaults_for(h);
    let j_initial = {
        let disc = Discretization::build(&mesh, &pd).unwrap();
        let (u, _) = solve_tresca_with(&mesh, &pd, &disc, None).unwrap();
        disc.energy(u.values())
    };
    let (final_mesh, history) = run_optimization(&mesh, &pd, &cfg, None).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let last = history.records.last().expect("history nonempty");
    assert!(last.energy < j_initial, "energy {j_initial} -> {}", last.energy);
    assert!(
        (last.volume - PI).abs() <= 0.01 * PI,
        "final volume {} not within 1% of pi",
        last.volume
    );
    let mut worst_vol = 0.0f64;
    let mut worst_mult = 0.0f64;
    for r in &history.records {
        assert!(
            r.min_angle >= cfg.min_angle_floor,
            "iterate {} has min angle {:.3} deg",
            r.iter,
            r.min_angle.to_degrees()
        );
        worst_vol = worst_vol.max((r.volume - PI).abs());
        worst_mult = worst_mult.max(r.multiplier.abs());
    }
    // trend: the volume tracks pi along the whole run and the multiplier
    // oscillation stays bounded
    assert!(worst_vol <= 0.02 * PI, "volume drifted by {worst_vol}");
    assert!(worst_mult <= 10.0, "multiplier blew up: {worst_mult}");
    assert!(mesh_quality(&final_mesh).0 >= cfg.min_angle_floor);
    assert!(elapsed <= 600.0, "optimization took {elapsed:.1}s");
    println!(
        "ACCEPTANCE 6 PASS: {} iterations in {elapsed:.1}s, J {j_initial:.6e} -> {:.6e}, \
         volume {:.6e} (pi {:+.3}%), min angle {:.1} deg",
        history.len(),
        last.energy,
        last.volume,
        100.0 * (last.volume - PI) / PI,
        last.min_angle.to_degrees()
    );
}

/// Criterion 7: on a coarse mesh the H1 error of the pulled-back difference
/// quotient against the material derivative decreases monotonically over
/// t in {1e-1, 1e-2, 1e-3} for two seeded directions.
#[test]
fn acceptance_7_material_derivative() {
    let mesh = rectangle_mesh(6, 6, 1.0, 1.0, &[Side::Left]).unwrap();
    assert!(mesh.num_vertices() <= 200);
    let pd = ProblemData::new(
        [
            tresca2d::expr::parse_expression("0.4").unwrap(),
            tresca2d::expr::parse_expression("-1").unwrap(),
        ],
        tresca2d::expr::parse_expression("0.3").unwrap(),
        0.5,
        0.0,
    );
    for seed in [61u64, 62] {
        let theta = seeded_direction(&mesh, seed).unwrap();
        let errs = material_derivative_fd_check(&mesh, &pd, &theta, &[1e-1, 1e-2, 1e-3]).unwrap();
        assert!(
            errs[0].1 > errs[1].1 && errs[1].1 > errs[2].1,
            "seed {seed}: H1 errors not monotone: {errs:?}"
        );
        println!(
            "ACCEPTANCE 7 PASS (seed {seed}): H1 errors {:.3e} > {:.3e} > {:.3e}",
            errs[0].1, errs[1].1, errs[2].1
        );
    }
}

/// Criterion 8: discrete curvature and mesh area against closed forms.
#[test]
fn acceptance_8_geometry_suite() {
    // circle of radius 1 sampled at h = 0.02
    let n = (2.0 * PI / 0.02).round() as usize;
    let pts: Vec<V2> = (0..n)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n as f64;
            [t.cos(), t.sin()]
        })
        .collect();
    let circle = polygon_fan_mesh(&pts, BoundaryTag::Tresca).unwrap();
    let fc = boundary_frame(&circle);
    let circ_err = fc.curvature.iter().map(|c| (c - 1.0).abs()).fold(0.0, f64::max);
    assert!(circ_err <= 0.02, "circle curvature error {circ_err:.3e}");

    let (a, b) = (1.1, 1.0 / 1.1);
    let mesh = toy_mesh(0.05);
    let fe = boundary_frame(&mesh);
    let pa = fe.position(0).expect("vertex 0 on the boundary");
    let h_major = fe.curvature[pa];
    let exact = a / (b * b);
    assert!(
        (h_major - exact).abs() <= 0.03 * exact,
        "ellipse curvature {h_major} vs {exact}"
    );

    let vol = area(&mesh);
    assert!((vol - PI).abs() <= 0.01 * PI, "ellipse area {vol}");
    println!(
        "ACCEPTANCE 8 PASS: circle |H-1| = {circ_err:.2e} (<= 2e-2), \
         ellipse H(a,0) = {h_major:.4} vs {exact:.4} ({:+.2}%), area = {vol:.6} ({:+.3}% of pi)",
        100.0 * (h_major - exact) / exact,
        100.0 * (vol - PI) / PI
    );
}

/// Criterion 9: zero body force yields the zero solution, zero energy, zero
/// gradient and immediate optimizer termination.
#[test]
fn acceptance_9_degenerate_inputs() {
    let mesh = toy_mesh(0.1);
    let mut pd = ProblemData::toy();
    pd.f = [
        tresca2d::expr::parse_expression("0").unwrap(),
        tresca2d::expr::parse_expression("0").unwrap(),
    ];
    let disc = Discretization::build(&mesh, &pd).unwrap();
    let (u, state) = solve_tresca_with(&mesh, &pd, &disc, None).unwrap();
    let u_max = u.values().iter().map(|v| norm(*v)).fold(0.0, f64::max);
    assert_eq!(u_max, 0.0, "nonzero displacement {u_max:.3e}");
    assert_eq!(energy(&mesh, &pd, &u).unwrap(), 0.0);

    let cx = ShapeContext::build(&mesh, &pd, &disc, &u, &state).unwrap();
    let vol_form = tresca2d::shape::volume_gradient_form(&cx).unwrap();
    let bnd_form = boundary_gradient_form(&cx).unwrap();
    for seed in [101u64, 102, 103, 104, 105] {
        let theta = seeded_direction(&mesh, seed).unwrap();
        assert!(vol_form.eval(theta.values()).abs() < 1e-12);
        assert!(bnd_form.eval(theta.values()).abs() < 1e-12);
    }

    let mut cfg = OptimConfig::defaults_for(0.1);
    cfg.target_volume = area(&mesh);
    let (final_mesh, history) = run_optimization(&mesh, &pd, &cfg, None).unwrap();
    assert_eq!(history.len(), 1, "optimizer did not stop immediately");
    assert_eq!(history.records[0].step, 0.0);
    assert_eq!(final_mesh.vertices(), mesh.vertices());
    let part = classify_boundary(&state);
    assert_eq!(part.stick_strict.len(), state.len(), "all nodes strictly stick");
    println!(
        "ACCEPTANCE 9 PASS: u = 0, J = 0, zero gradient on 5 seeded directions, \
         optimizer stopped at iteration 0"
    );
}
