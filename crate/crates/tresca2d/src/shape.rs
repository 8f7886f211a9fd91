//! Shape calculus for the Tresca energy: the shape gradient in volume and
//! boundary form, H1 descent directions, and the directional material and
//! shape derivatives of the friction solution.
//!
//! Both gradient forms are assembled as linear forms over nodal direction
//! fields, term by term, so that a descent direction can be obtained by one
//! H1-metric solve and the per-term breakdown is exact by construction.
//!
//! The material derivative solve differentiates the discrete problem along
//! the mesh deformation path: stiffness, load, thresholds, arc weights and
//! boundary tangents are all differentiated exactly at `t = 0` (the boundary
//! frame rates come from the moving polyline), and the frictional boundary
//! conditions of the limit problem are enforced with an active set over the
//! threshold-boundary nodes. This keeps the finite-difference quotient of the
//! solution converging to the computed derivative at `O(t)`.

use crate::expr;
use crate::fem::{
    assemble_h1_metric, boundary_field_calculus, boundary_residual_tractions, element_gradient,
    eval_force, node_averaged_gradients, solve_constrained, Constraint, SparseSystem, VectorField,
};
use crate::math2d::*;
use crate::mesh::{deform, BoundaryFrame, Mesh};
use crate::tresca::{
    solve_tresca, solve_tresca_with, ContactMode, ContactState, Discretization, ProblemData,
    TrescaError,
};
use serde::Serialize;
use std::collections::BTreeMap;

/// A linear functional over nodal direction fields.
#[derive(Debug, Clone)]
pub struct LinearForm {
    pub coeffs: Vec<V2>,
}

impl LinearForm {
    pub fn zeros(n: usize) -> Self {
        LinearForm { coeffs: vec![[0.0, 0.0]; n] }
    }
    pub fn eval(&self, theta: &[V2]) -> f64 {
        self.coeffs.iter().zip(theta).map(|(c, t)| dot(*c, *t)).sum()
    }
    pub fn add_scaled(&mut self, other: &LinearForm, s: f64) {
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a = axpy(*a, s, *b);
        }
    }
}

/// A gradient functional split into named terms.
#[derive(Debug, Clone)]
pub struct GradientForm {
    pub terms: Vec<(&'static str, LinearForm)>,
}

impl GradientForm {
    pub fn eval(&self, theta: &[V2]) -> f64 {
        self.terms.iter().map(|(_, f)| f.eval(theta)).sum()
    }
    pub fn eval_terms(&self, theta: &[V2]) -> Vec<(&'static str, f64)> {
        self.terms.iter().map(|(n, f)| (*n, f.eval(theta))).collect()
    }
    pub fn total(&self) -> LinearForm {
        let n = self.terms.first().map_or(0, |(_, f)| f.coeffs.len());
        let mut t = LinearForm::zeros(n);
        for (_, f) in &self.terms {
            t.add_scaled(f, 1.0);
        }
        t
    }
}

/// Shared context for gradient assembly on one converged solution.
pub struct ShapeContext<'a> {
    pub mesh: &'a Mesh,
    pub pd: &'a ProblemData,
    pub disc: &'a Discretization,
    pub u0: &'a VectorField,
    pub state: &'a ContactState,
    /// Node-averaged displacement gradients.
    pub grad_u: Vec<M2>,
    /// Recovered traction vector per boundary loop position.
    pub tractions: Vec<V2>,
    /// Threshold value and gradient per loop position.
    pub g_val: Vec<f64>,
    pub g_grad: Vec<V2>,
    /// Body force per loop position.
    pub f_bnd: Vec<V2>,
    /// Contact index per loop position (usize::MAX when not frictional).
    pub contact_at: Vec<usize>,
}

impl<'a> ShapeContext<'a> {
    pub fn build(
        mesh: &'a Mesh,
        pd: &'a ProblemData,
        disc: &'a Discretization,
        u0: &'a VectorField,
        state: &'a ContactState,
    ) -> Result<Self, TrescaError> {
        u0.check_mesh(mesh).map_err(TrescaError::Solve)?;
        let grad_u = node_averaged_gradients(mesh, u0.values());
        let tractions =
            boundary_residual_tractions(&disc.op, u0.values(), &disc.load, &disc.frame);
        let nb = disc.frame.len();
        let step = 1e-6 * mesh.diameter();
        let mut g_val = Vec::with_capacity(nb);
        let mut g_grad = Vec::with_capacity(nb);
        let mut f_bnd = Vec::with_capacity(nb);
        for k in 0..nb {
            let p = mesh.vertex(disc.frame.nodes[k]);
            g_val.push(pd.g.eval(p[0], p[1]).map_err(crate::fem::SolveError::Data)?);
            g_grad.push(
                expr::gradient_fd(&pd.g, p[0], p[1], step).map_err(crate::fem::SolveError::Data)?,
            );
            f_bnd.push(eval_force(&pd.f, p).map_err(crate::fem::SolveError::Data)?);
        }
        let mut contact_at = vec![usize::MAX; nb];
        for (i, &k) in state.positions.iter().enumerate() {
            contact_at[k] = i;
        }
        Ok(ShapeContext {
            mesh,
            pd,
            disc,
            u0,
            state,
            grad_u,
            tractions,
            g_val,
            g_grad,
            f_bnd,
            contact_at,
        })
    }

    fn stress(&self, grad: M2) -> M2 {
        isotropic_stress(self.pd.mu, self.pd.lambda, grad)
    }
}

/// The threshold-transport coefficient at the boundary nodes:
/// `grad(g).theta + g (div_tau(theta) - grad(theta) tau . tau)`, with volume
/// gradients averaged at boundary nodes. Returned per loop position.
pub fn p_theta(
    mesh: &Mesh,
    frame: &BoundaryFrame,
    g: &expr::Expression,
    theta: &[V2],
) -> Result<Vec<f64>, TrescaError> {
    let bc = boundary_field_calculus(mesh, frame, theta, g).map_err(TrescaError::Solve)?;
    let mut out = Vec::with_capacity(frame.len());
    for k in 0..frame.len() {
        let p = mesh.vertex(frame.nodes[k]);
        let gv = g
            .eval(p[0], p[1])
            .map_err(crate::fem::SolveError::Data)
            .map_err(TrescaError::Solve)?;
        out.push(bc.grad_g_theta[k] + gv * (bc.div_tau[k] - bc.grad_theta_tau_tau[k]));
    }
    Ok(out)
}

/// The boundary stress-transport vector per loop position:
/// `(S grad(theta)^T + A(grad(u) grad(theta)) + (grad(theta) - div(theta) I) S) n`
/// with `S = A e(u0)` and all volume gradients averaged at boundary nodes.
pub fn xi_m(
    mesh: &Mesh,
    frame: &BoundaryFrame,
    u0: &VectorField,
    theta: &[V2],
    mu: f64,
    lambda: f64,
) -> Vec<V2> {
    let grad_u = node_averaged_gradients(mesh, u0.values());
    let grad_t = node_averaged_gradients(mesh, theta);
    (0..frame.len())
        .map(|k| {
            let v = frame.nodes[k];
            let s = isotropic_stress(mu, lambda, grad_u[v]);
            let gt = grad_t[v];
            let a_gg = isotropic_stress(mu, lambda, mm(grad_u[v], gt));
            let mut m = mm(s, transpose(gt));
            m = mat_add(m, a_gg);
            m = mat_add(m, mm(gt, s));
            m = mat_add(m, mat_scale(s, -trace(gt)));
            mv(m, frame.normal[k])
        })
        .collect()
}

/// Volume form of the shape gradient. Terms: dilation of the stored energy,
/// load advection (using the strong balance `-div(A e(u)) = f`), the
/// stress/direction-gradient coupling, the frictional boundary load term, the
/// traction duality term over the whole boundary (recovered tractions paired
/// with the polyline transport rates) and the threshold transport on slipping
/// nodes.
///
/// The direction-gradient acting on boundary quantities is realized through
/// the boundary frame rates (the derivative of the moving polyline's tangent
/// and arc weight), not through volume-averaged gradients of the direction:
/// the two coincide on the boundary in 2D, and the polyline rates stay
/// accurate beside the clamped-arc junctions where volume gradients of both
/// the solution and the direction are singular.
pub fn volume_gradient_form(cx: &ShapeContext) -> Result<GradientForm, TrescaError> {
    let mesh = cx.mesh;
    let nv = mesh.num_vertices();
    let mut dilation = LinearForm::zeros(nv);
    let mut advection = LinearForm::zeros(nv);
    let mut stress_coupling = LinearForm::zeros(nv);

    for t in 0..mesh.num_triangles() {
        let (area, g) = mesh.p1_gradients(t);
        let tri = mesh.triangles()[t];
        let gu = element_gradient(mesh, t, cx.u0.values());
        let s = cx.stress(gu);
        let e = sym(gu);
        let edens = 0.5 * ddot(s, e);
        // dilation: div(theta) per element is sum_v theta_v . g_v
        for (l, &v) in tri.iter().enumerate() {
            dilation.coeffs[v] = axpy(dilation.coeffs[v], area * edens, g[l]);
        }
        // advection: integral of f . grad(u) theta by the midpoint rule
        let p = [mesh.vertex(tri[0]), mesh.vertex(tri[1]), mesh.vertex(tri[2])];
        for k in 0..3 {
            let (a, b) = ((k + 1) % 3, (k + 2) % 3);
            let m = scale(add(p[a], p[b]), 0.5);
            let fv = eval_force(&cx.pd.f, m)
                .map_err(crate::fem::SolveError::Data)
                .map_err(TrescaError::Solve)?;
            let gt_f = mtv(gu, fv); // grad(u)^T f
            let w = area / 3.0 * 0.5;
            advection.coeffs[tri[a]] = axpy(advection.coeffs[tri[a]], w, gt_f);
            advection.coeffs[tri[b]] = axpy(advection.coeffs[tri[b]], w, gt_f);
        }
        // coupling: - integral S : (grad(u) grad(theta)) = - (grad(u)^T S) : grad(theta)
        let m = mm(transpose(gu), s);
        for (l, &v) in tri.iter().enumerate() {
            stress_coupling.coeffs[v] = axpy(stress_coupling.coeffs[v], -area, mv(m, g[l]));
        }
    }

    let frame = &cx.disc.frame;
    let mut boundary_load = LinearForm::zeros(nv);
    let mut traction_coupling = LinearForm::zeros(nv);
    let mut slip_threshold = LinearForm::zeros(nv);

    let adjacency = element_adjacency(mesh);

    for k in 0..frame.len() {
        let v = frame.nodes[k];
        let w = frame.weight[k];
        let ci = cx.contact_at[k];
        if ci != usize::MAX {
            // - integral over the frictional boundary of (theta.n)(f.u0)
            let c = -w * dot(cx.f_bnd[k], cx.u0.values()[v]);
            boundary_load.coeffs[v] = axpy(boundary_load.coeffs[v], c, frame.normal[k]);
        }
        // - sum of w t . (grad(theta)^T u0) over the whole boundary:
        // the tangential traction pairs with the tangent rate, the (near
        // zero) normal traction with averaged direction gradients
        let t_vec = cx.tractions[k];
        let u0v = cx.u0.values()[v];
        let s_tau = dot(t_vec, frame.tangent[k]);
        let sig_n = dot(t_vec, frame.normal[k]);
        add_tangent_rate_pairing(&mut traction_coupling, mesh, frame, k, -w * s_tau, u0v);
        if sig_n != 0.0 {
            let zn = scale(frame.normal[k], sig_n);
            for &(el, wgt) in &adjacency[v] {
                let (_, gb) = mesh.p1_gradients(el);
                let tri = mesh.triangles()[el];
                for (l, &vv) in tri.iter().enumerate() {
                    let c = -w * wgt * dot(gb[l], zn);
                    traction_coupling.coeffs[vv] = axpy(traction_coupling.coeffs[vv], c, u0v);
                }
            }
        }
        // + threshold transport on slipping nodes: grad(g).theta plus the
        // arc-measure stretch rate (the tangential-divergence part)
        if ci != usize::MAX && cx.state.mode[ci] == ContactMode::Slip {
            let slip_mag = cx.state.u_tau[ci].abs();
            slip_threshold.coeffs[v] = axpy(slip_threshold.coeffs[v], w * slip_mag, cx.g_grad[k]);
            add_weight_rate_pairing(&mut slip_threshold, mesh, frame, k, slip_mag * cx.g_val[k]);
        }
    }

    Ok(GradientForm {
        terms: vec![
            ("volume.dilation", dilation),
            ("volume.advection", advection),
            ("volume.stress_coupling", stress_coupling),
            ("volume.boundary_load", boundary_load),
            ("volume.traction_coupling", traction_coupling),
            ("volume.slip_threshold", slip_threshold),
        ],
    })
}

/// Boundary form of the shape gradient: the normal-velocity integral with
/// stored energy density, body force, shear times normal derivative and the
/// slip curvature term, plus the tangential-transport integral.
///
/// The boundary gradient of the displacement is reconstructed from boundary
/// data: the tangential column from centered arc-length differences of the
/// solution along the polyline, the normal column from the recovered
/// tractions through the constitutive law. This keeps the pointwise
/// integrands in the same duality as the solver and avoids the one-sided
/// volume averages, which degrade near the clamped-arc junctions.
pub fn boundary_gradient_form(cx: &ShapeContext) -> Result<GradientForm, TrescaError> {
    let mesh = cx.mesh;
    let nv = mesh.num_vertices();
    let frame = &cx.disc.frame;
    let mut energy_density = LinearForm::zeros(nv);
    let mut body_force = LinearForm::zeros(nv);
    let mut shear_dn = LinearForm::zeros(nv);
    let mut slip_curvature = LinearForm::zeros(nv);
    let mut slip_transport = LinearForm::zeros(nv);

    let (mu, lambda) = (cx.pd.mu, cx.pd.lambda);
    for k in 0..frame.len() {
        let ci = cx.contact_at[k];
        if ci == usize::MAX {
            continue; // every integrand is supported on the frictional boundary
        }
        let v = frame.nodes[k];
        let w = frame.weight[k];
        let n = frame.normal[k];
        let tau = frame.tangent[k];
        let s_tau = cx.state.s_tau[ci];
        let sig_n = cx.state.sigma_n[ci];
        // boundary reconstruction of grad(u) in the (tau, n) frame
        let (kp, kn) = (frame.prev(k), frame.next(k));
        let du_ds = scale(
            sub(cx.u0.values()[frame.nodes[kn]], cx.u0.values()[frame.nodes[kp]]),
            1.0 / (2.0 * w),
        );
        let e_tt = dot(tau, du_ds);
        let q = dot(n, du_ds); // n . grad(u) tau
        let e_nn = (sig_n - lambda * e_tt) / (2.0 * mu + lambda);
        let a_tn = s_tau / mu - q; // tau . grad(u) n
        let e_tn = 0.5 * (a_tn + q);
        let tr_e = e_tt + e_nn;
        let edens = 0.5
            * (2.0 * mu * (e_tt * e_tt + 2.0 * e_tn * e_tn + e_nn * e_nn)
                + lambda * tr_e * tr_e);
        energy_density.coeffs[v] = axpy(energy_density.coeffs[v], w * edens, n);
        body_force.coeffs[v] =
            axpy(body_force.coeffs[v], -w * dot(cx.f_bnd[k], cx.u0.values()[v]), n);
        // sigma_tau(u0) . dn(u0) = s_tau (tau . grad(u) n)
        shear_dn.coeffs[v] = axpy(shear_dn.coeffs[v], -w * s_tau * a_tn, n);
        if cx.state.mode[ci] == ContactMode::Slip {
            let slip_mag = cx.state.u_tau[ci].abs();
            let h = frame.curvature[k];
            let dn_g = dot(cx.g_grad[k], n);
            slip_curvature.coeffs[v] = axpy(
                slip_curvature.coeffs[v],
                w * slip_mag * (h * cx.g_val[k] + dn_g),
                n,
            );
        }
        // u0n s_tau ((d/ds theta_tau) . n - (grad(theta) tau) . n) w; the
        // second factor is the normal part of the tangent rate, realized on
        // the polyline (n . tau_dot = n . grad(theta) tau on the boundary)
        let u0n = dot(cx.u0.values()[v], n);
        let c = w * u0n * s_tau;
        if c != 0.0 {
            let (kp, kn) = (frame.prev(k), frame.next(k));
            let inv_ds = 1.0 / (2.0 * w);
            slip_transport.coeffs[frame.nodes[kn]] = axpy(
                slip_transport.coeffs[frame.nodes[kn]],
                c * inv_ds * dot(frame.tangent[kn], n),
                frame.tangent[kn],
            );
            slip_transport.coeffs[frame.nodes[kp]] = axpy(
                slip_transport.coeffs[frame.nodes[kp]],
                -c * inv_ds * dot(frame.tangent[kp], n),
                frame.tangent[kp],
            );
            add_tangent_rate_pairing(&mut slip_transport, mesh, frame, k, -c, n);
        }
    }

    Ok(GradientForm {
        terms: vec![
            ("boundary.energy_density", energy_density),
            ("boundary.body_force", body_force),
            ("boundary.shear_normal_derivative", shear_dn),
            ("boundary.slip_curvature", slip_curvature),
            ("boundary.slip_transport", slip_transport),
        ],
    })
}

/// Accumulate into `form` the functional `theta -> c * (z . tau_dot_k(theta))`
/// where `tau_dot_k` is the rate of the node tangent along the moving
/// polyline (linear in the vertex velocities).
fn add_tangent_rate_pairing(
    form: &mut LinearForm,
    mesh: &Mesh,
    frame: &BoundaryFrame,
    k: usize,
    c: f64,
    z: V2,
) {
    if c == 0.0 {
        return;
    }
    let kp = frame.prev(k);
    let kn = frame.next(k);
    let (a_p, b_p) = (frame.nodes[kp], frame.nodes[k]);
    let (a_n, b_n) = (frame.nodes[k], frame.nodes[kn]);
    let edge = |a: usize, b: usize| -> (V2, f64) {
        let e = sub(mesh.vertex(b), mesh.vertex(a));
        let l = norm(e);
        (scale(e, 1.0 / l), l)
    };
    let (e_p, l_p) = edge(a_p, b_p);
    let (e_n, l_n) = edge(a_n, b_n);
    let q = add(perp_cw(e_p), perp_cw(e_n));
    let qn = norm(q);
    let n = frame.normal[k];
    // z . tau_dot = (e_p_dot + e_n_dot) . m with m below; e_dot = P_e de / l
    let y = {
        let pz = perp_cw(z);
        scale(sub(pz, scale(n, dot(n, pz))), 1.0 / qn)
    };
    let m = perp_ccw(y);
    for (e, l, a, b) in [(e_p, l_p, a_p, b_p), (e_n, l_n, a_n, b_n)] {
        let pm = sub(m, scale(e, dot(e, m)));
        form.coeffs[b] = axpy(form.coeffs[b], c / l, pm);
        form.coeffs[a] = axpy(form.coeffs[a], -c / l, pm);
    }
}

/// Accumulate into `form` the functional `theta -> c * w_dot_k(theta)`, the
/// rate of the lumped arc weight at loop position `k`.
fn add_weight_rate_pairing(
    form: &mut LinearForm,
    mesh: &Mesh,
    frame: &BoundaryFrame,
    k: usize,
    c: f64,
) {
    if c == 0.0 {
        return;
    }
    let kp = frame.prev(k);
    let kn = frame.next(k);
    for (a, b) in [(frame.nodes[kp], frame.nodes[k]), (frame.nodes[k], frame.nodes[kn])] {
        let e = sub(mesh.vertex(b), mesh.vertex(a));
        let d = normalize(e);
        form.coeffs[b] = axpy(form.coeffs[b], 0.5 * c, d);
        form.coeffs[a] = axpy(form.coeffs[a], -0.5 * c, d);
    }
}

/// Area-weighted element adjacency per vertex: `(triangle, weight)` with
/// weights summing to one.
fn element_adjacency(mesh: &Mesh) -> Vec<Vec<(usize, f64)>> {
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); mesh.num_vertices()];
    for t in 0..mesh.num_triangles() {
        let area = mesh.triangle_area(t);
        for &v in &mesh.triangles()[t] {
            adj[v].push((t, area));
        }
    }
    for list in adj.iter_mut() {
        let total: f64 = list.iter().map(|(_, a)| a).sum();
        for e in list.iter_mut() {
            e.1 /= total;
        }
    }
    adj
}

#[derive(Debug, Clone, Serialize)]
pub struct ShapeGradientReport {
    pub value_boundary: f64,
    pub value_volume: f64,
    pub terms: BTreeMap<String, f64>,
    pub theta_norm_h1: f64,
}

/// Evaluate both gradient forms on a direction and collect the breakdown.
pub fn shape_gradient_report(
    cx: &ShapeContext,
    theta: &VectorField,
) -> Result<ShapeGradientReport, TrescaError> {
    theta.check_mesh(cx.mesh).map_err(TrescaError::Solve)?;
    let vol = volume_gradient_form(cx)?;
    let bnd = boundary_gradient_form(cx)?;
    let mut terms = BTreeMap::new();
    let mut value_volume = 0.0;
    for (name, v) in vol.eval_terms(theta.values()) {
        terms.insert(name.to_string(), v);
        value_volume += v;
    }
    let mut value_boundary = 0.0;
    for (name, v) in bnd.eval_terms(theta.values()) {
        terms.insert(name.to_string(), v);
        value_boundary += v;
    }
    let h1 = assemble_h1_metric(cx.mesh);
    let theta_norm_h1 = h1.quadratic_form(theta.values()).sqrt();
    Ok(ShapeGradientReport { value_boundary, value_volume, terms, theta_norm_h1 })
}

pub fn shape_gradient_volume(cx: &ShapeContext, theta: &VectorField) -> Result<f64, TrescaError> {
    theta.check_mesh(cx.mesh).map_err(TrescaError::Solve)?;
    Ok(volume_gradient_form(cx)?.eval(theta.values()))
}

pub fn shape_gradient_boundary(cx: &ShapeContext, theta: &VectorField) -> Result<f64, TrescaError> {
    theta.check_mesh(cx.mesh).map_err(TrescaError::Solve)?;
    Ok(boundary_gradient_form(cx)?.eval(theta.values()))
}

/// Solve the H1-metric problem `(theta0, v)_H1 = -G(v)` over directions
/// vanishing on the clamped boundary. The returned direction satisfies
/// `G(theta0) = -|theta0|_H1^2` up to solver accuracy.
pub fn descent_direction(
    mesh: &Mesh,
    gradient: &LinearForm,
    lin_tol: f64,
    lin_max_iter: usize,
) -> Result<VectorField, crate::fem::SolveError> {
    let h1 = assemble_h1_metric(mesh);
    let mut sys = SparseSystem::new(mesh, h1);
    sys.rhs = gradient.coeffs.iter().map(|&c| scale(c, -1.0)).collect();
    for v in mesh.dirichlet_nodes() {
        sys.constraints.extend(Constraint::fix_node(v));
    }
    solve_constrained(&sys, lin_tol, lin_max_iter, None)
}

/// Seeded smooth shape-perturbation field: a low-frequency normal velocity on
/// the frictional boundary, windowed to vanish near the clamped-arc
/// junctions, lifted into the volume by one H1-metric solve and normalized in
/// the H1 norm. This is the family of directions a shape-update step actually
/// explores; it vanishes on the clamped boundary by construction.
pub fn seeded_boundary_direction(
    mesh: &Mesh,
    seed: u64,
) -> Result<VectorField, crate::fem::SolveError> {
    use rand::Rng;
    use rand::SeedableRng;
    let frame = crate::mesh::boundary_frame(mesh);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<(f64, f64, f64)> = (1..=4)
        .map(|m| {
            (
                m as f64,
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..2.0 * std::f64::consts::PI),
            )
        })
        .collect();
    let nb = frame.len();
    let mut s_of = vec![0.0; nb];
    for k in 1..nb {
        s_of[k] = s_of[k - 1]
            + norm(sub(mesh.vertex(frame.nodes[k]), mesh.vertex(frame.nodes[k - 1])));
    }
    let total = frame.perimeter();
    let is_clamped: Vec<bool> = frame
        .nodes
        .iter()
        .map(|&v| mesh.node_tag(v) == Some(crate::mesh::BoundaryTag::Dirichlet))
        .collect();
    let arc_distance_to_clamp = |k: usize| -> f64 {
        let mut best = f64::INFINITY;
        for step in [-1i64, 1] {
            let mut p = k;
            let mut dist = 0.0;
            for _ in 0..nb {
                let pn = if step < 0 { frame.prev(p) } else { frame.next(p) };
                dist += norm(sub(mesh.vertex(frame.nodes[p]), mesh.vertex(frame.nodes[pn])));
                if is_clamped[pn] {
                    best = best.min(dist);
                    break;
                }
                p = pn;
            }
        }
        best
    };
    let window_width = 0.25;
    let mut rhs = vec![[0.0f64, 0.0]; mesh.num_vertices()];
    for k in 0..nb {
        if is_clamped[k] {
            continue;
        }
        let d = arc_distance_to_clamp(k);
        let wnd = if d < window_width {
            (0.5 * std::f64::consts::PI * d / window_width).sin().powi(2)
        } else {
            1.0
        };
        let mut c = 0.0;
        for &(m, a, ph) in &coef {
            c += a * (2.0 * std::f64::consts::PI * m * s_of[k] / total + ph).cos();
        }
        rhs[frame.nodes[k]] = scale(frame.normal[k], c * wnd * frame.weight[k]);
    }
    let h1 = assemble_h1_metric(mesh);
    let mut sys = SparseSystem::new(mesh, h1);
    sys.rhs = rhs;
    for v in mesh.dirichlet_nodes() {
        sys.constraints.extend(Constraint::fix_node(v));
    }
    let theta = solve_constrained(&sys, 1e-12, 200_000, None)?;
    let nn = sys.op.quadratic_form(theta.values()).sqrt();
    Ok(VectorField::from_values(
        mesh,
        theta.values().iter().map(|&v| scale(v, 1.0 / nn)).collect(),
    ))
}

/// Rates of the boundary frame under a vertex velocity field: derivatives of
/// the node tangent, node normal and lumped arc weight along the moving
/// polyline.
#[derive(Debug, Clone)]
pub struct FrameRate {
    pub tau_dot: Vec<V2>,
    pub n_dot: Vec<V2>,
    pub w_dot: Vec<f64>,
}

pub fn boundary_frame_rate(mesh: &Mesh, frame: &BoundaryFrame, theta: &[V2]) -> FrameRate {
    let nb = frame.len();
    // edge k joins loop position k to k+1
    let mut edge_dir = Vec::with_capacity(nb);
    let mut dir_dot = Vec::with_capacity(nb);
    let mut len_dot = Vec::with_capacity(nb);
    for k in 0..nb {
        let (a, b) = (frame.nodes[k], frame.nodes[(k + 1) % nb]);
        let e = sub(mesh.vertex(b), mesh.vertex(a));
        let l = norm(e);
        let d = scale(e, 1.0 / l);
        let de = sub(theta[b], theta[a]);
        len_dot.push(dot(d, de));
        dir_dot.push(scale(sub(de, scale(d, dot(d, de))), 1.0 / l));
        edge_dir.push(d);
    }
    let mut tau_dot = Vec::with_capacity(nb);
    let mut n_dot = Vec::with_capacity(nb);
    let mut w_dot = Vec::with_capacity(nb);
    for k in 0..nb {
        let kp = (k + nb - 1) % nb;
        let q = add(perp_cw(edge_dir[kp]), perp_cw(edge_dir[k]));
        let qn = norm(q);
        let qd = add(perp_cw(dir_dot[kp]), perp_cw(dir_dot[k]));
        let n = frame.normal[k];
        let nd = scale(sub(qd, scale(n, dot(n, qd))), 1.0 / qn);
        n_dot.push(nd);
        tau_dot.push(perp_ccw(nd));
        w_dot.push(0.5 * (len_dot[kp] + len_dot[k]));
    }
    FrameRate { tau_dot, n_dot, w_dot }
}

/// Per-frictional-node data of the derivative problem.
#[derive(Debug, Clone)]
pub struct DerivativeData {
    /// Threshold transport coefficient at each frictional node.
    pub p_theta: Vec<f64>,
    /// Stress transport vector at each frictional node.
    pub xi_m: Vec<V2>,
    /// Tangential constraint offset: the derivative problem imposes
    /// `z . tau = offset` on sticking nodes.
    pub constraint_offset: Vec<f64>,
    /// Unit slip direction along tau on slipping nodes (0 elsewhere).
    pub slip_direction: Vec<f64>,
    /// Normalized traction `s_tau / g` on threshold-boundary nodes (0 elsewhere).
    pub multiplier_direction: Vec<f64>,
}

pub fn derivative_data(
    cx: &ShapeContext,
    theta: &VectorField,
    rate: &FrameRate,
) -> Result<DerivativeData, TrescaError> {
    let frame = &cx.disc.frame;
    let p_all = p_theta(cx.mesh, frame, &cx.pd.g, theta.values())?;
    let xi_all = xi_m(cx.mesh, frame, cx.u0, theta.values(), cx.pd.mu, cx.pd.lambda);
    let st = cx.state;
    let mut p = Vec::with_capacity(st.len());
    let mut xi = Vec::with_capacity(st.len());
    let mut offset = Vec::with_capacity(st.len());
    let mut slip_dir = Vec::with_capacity(st.len());
    let mut mult_dir = Vec::with_capacity(st.len());
    for i in 0..st.len() {
        let k = st.positions[i];
        p.push(p_all[k]);
        xi.push(xi_all[k]);
        offset.push(-dot(cx.u0.values()[st.nodes[i]], rate.tau_dot[k]));
        slip_dir.push(match st.mode[i] {
            ContactMode::Slip => st.u_tau[i].signum(),
            _ => 0.0,
        });
        mult_dir.push(match st.mode[i] {
            ContactMode::StickBoundary => st.s_tau[i] / st.g[i],
            _ => 0.0,
        });
    }
    Ok(DerivativeData {
        p_theta: p,
        xi_m: xi,
        constraint_offset: offset,
        slip_direction: slip_dir,
        multiplier_direction: mult_dir,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum DerivativeError {
    #[error(transparent)]
    Tresca(#[from] TrescaError),
    #[error(transparent)]
    Solve(#[from] crate::fem::SolveError),
    #[error("active set over threshold-boundary nodes did not settle in {0} passes")]
    ActiveSetNoConvergence(usize),
}

/// Result of the material-derivative solve.
#[derive(Debug, Clone)]
pub struct MaterialDerivative {
    pub field: VectorField,
    pub data: DerivativeData,
    /// Final mode per frictional node: true when the tangential rate is
    /// constrained (sticking persists), false when it is released.
    pub constrained: Vec<bool>,
    pub active_set_passes: usize,
}

/// Directional material derivative of the friction solution: the derivative
/// at `t = 0` of the vertex-identified solution path on the deformed meshes.
///
/// The volume data differentiates the pulled-back stiffness and load exactly
/// per element; the frictional boundary data differentiates the nodal
/// threshold weights and tangents along the moving polyline. Slipping nodes
/// carry a threshold traction rate, strictly sticking nodes carry a clamped
/// tangential rate, and threshold-boundary nodes switch between the two by an
/// active set with the complementarity test of the limit problem.
pub fn solve_material_derivative(
    cx: &ShapeContext,
    theta: &VectorField,
) -> Result<MaterialDerivative, DerivativeError> {
    theta.check_mesh(cx.mesh).map_err(TrescaError::Solve)?;
    let mesh = cx.mesh;
    let frame = &cx.disc.frame;
    let rate = boundary_frame_rate(mesh, frame, theta.values());
    let data = derivative_data(cx, theta, &rate)?;
    let st = cx.state;
    let nv = mesh.num_vertices();

    // volume rhs: -(d/dt stiffness)(u0) + d/dt load
    let mut rhs = vec![[0.0f64, 0.0]; nv];
    let fd_step = 1e-6 * mesh.diameter();
    for t in 0..mesh.num_triangles() {
        let (area, gb) = mesh.p1_gradients(t);
        let tri = mesh.triangles()[t];
        let gu = element_gradient(mesh, t, cx.u0.values());
        let gt = element_gradient(mesh, t, theta.values());
        let s = cx.stress(gu);
        let divt = trace(gt);
        let p_mat = isotropic_stress(cx.pd.mu, cx.pd.lambda, mm(gu, gt));
        let sgt = mm(s, transpose(gt));
        // -(d/dt a)(u0, v) with rows of (P + S grad(theta)^T - div(theta) S)
        let mut m = mat_scale(s, -divt);
        m = mat_add(m, p_mat);
        m = mat_add(m, sgt);
        for (l, &v) in tri.iter().enumerate() {
            for b in 0..2 {
                rhs[v][b] += area * dot(m[b], gb[l]);
            }
        }
        // d/dt load: midpoint rule of (grad(f) theta + div(theta) f) . v
        let pverts = [mesh.vertex(tri[0]), mesh.vertex(tri[1]), mesh.vertex(tri[2])];
        for k in 0..3 {
            let (a, b) = ((k + 1) % 3, (k + 2) % 3);
            let m_pt = scale(add(pverts[a], pverts[b]), 0.5);
            let th_m = scale(add(theta.values()[tri[a]], theta.values()[tri[b]]), 0.5);
            let gfx = expr::gradient_fd(&cx.pd.f[0], m_pt[0], m_pt[1], fd_step)
                .map_err(crate::fem::SolveError::Data)
                .map_err(TrescaError::Solve)?;
            let gfy = expr::gradient_fd(&cx.pd.f[1], m_pt[0], m_pt[1], fd_step)
                .map_err(crate::fem::SolveError::Data)
                .map_err(TrescaError::Solve)?;
            let fv = eval_force(&cx.pd.f, m_pt)
                .map_err(crate::fem::SolveError::Data)
                .map_err(TrescaError::Solve)?;
            let fdot = add(mv([gfx, gfy], th_m), scale(fv, divt));
            let w = area / 3.0 * 0.5;
            rhs[tri[a]] = axpy(rhs[tri[a]], w, fdot);
            rhs[tri[b]] = axpy(rhs[tri[b]], w, fdot);
        }
    }

    // boundary force rates: lambda_i tau_dot on every frictional node and the
    // threshold rate -gamma_dot s tau on slipping nodes
    let nt = st.len();
    let mut gamma_dot = vec![0.0f64; nt];
    for i in 0..nt {
        let k = st.positions[i];
        let v = st.nodes[i];
        gamma_dot[i] =
            dot(cx.g_grad[k], theta.values()[v]) * frame.weight[k] + cx.g_val[k] * rate.w_dot[k];
        let lambda = frame.weight[k] * st.s_tau[i];
        rhs[v] = axpy(rhs[v], lambda, rate.tau_dot[k]);
        if st.mode[i] == ContactMode::Slip {
            let s = st.u_tau[i].signum();
            rhs[v] = axpy(rhs[v], -gamma_dot[i] * s, frame.tangent[k]);
        }
    }

    // active set over threshold-boundary nodes; strictly sticking nodes stay
    // constrained, slipping nodes stay traction-driven
    let mut constrained: Vec<bool> = st
        .mode
        .iter()
        .map(|m| !matches!(m, ContactMode::Slip))
        .collect();
    let base_constraints: Vec<Constraint> = mesh
        .dirichlet_nodes()
        .into_iter()
        .flat_map(Constraint::fix_node)
        .collect();

    let rate_scale = {
        let f = gamma_dot.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        let l = (0..nt)
            .map(|i| {
                (frame.weight[st.positions[i]]
                    * st.s_tau[i]
                    * norm(rate.tau_dot[st.positions[i]]))
                .abs()
            })
            .fold(0.0f64, f64::max);
        f.max(l).max(1e-30)
    };

    let max_passes = nt + 2;
    let mut passes = 0usize;
    let mut field = VectorField::zeros(mesh);
    loop {
        passes += 1;
        if passes > max_passes {
            return Err(DerivativeError::ActiveSetNoConvergence(passes));
        }
        let mut sys = SparseSystem::new(mesh, cx.disc.op.clone());
        sys.rhs = rhs.clone();
        sys.constraints = base_constraints.clone();
        for i in 0..nt {
            let k = st.positions[i];
            if constrained[i] {
                sys.constraints.push(Constraint::Directional {
                    node: st.nodes[i],
                    dir: frame.tangent[k],
                    value: data.constraint_offset[i],
                });
            } else if st.mode[i] == ContactMode::StickBoundary {
                // released: the traction rate stays pinned at the moving threshold
                let varsigma = st.s_tau[i] / st.g[i];
                sys.rhs[st.nodes[i]] = axpy(
                    sys.rhs[st.nodes[i]],
                    gamma_dot[i] * varsigma,
                    frame.tangent[k],
                );
            }
        }
        field = solve_constrained(&sys, cx.pd.lin_tol, cx.pd.lin_max_iter, Some(&field))?;

        // complementarity checks on threshold-boundary nodes
        let kz = cx.disc.op.apply(field.values());
        let mut switched = false;
        for i in 0..nt {
            if st.mode[i] != ContactMode::StickBoundary {
                continue;
            }
            let k = st.positions[i];
            let varsigma = st.s_tau[i] / st.g[i];
            if constrained[i] {
                // reaction rate must stay inside the moving threshold
                let lam_dot = dot(sub(kz[st.nodes[i]], rhs[st.nodes[i]]), frame.tangent[k]);
                if varsigma * lam_dot > gamma_dot[i] + 1e-9 * rate_scale {
                    constrained[i] = false;
                    switched = true;
                }
            } else {
                // slip rate must oppose the traction direction
                let psi = dot(field.values()[st.nodes[i]], frame.tangent[k])
                    - data.constraint_offset[i];
                if psi * varsigma > 1e-9 * rate_scale {
                    constrained[i] = true;
                    switched = true;
                }
            }
        }
        if !switched {
            break;
        }
    }

    Ok(MaterialDerivative { field, data, constrained, active_set_passes: passes })
}

/// Directional shape derivative and companions.
#[derive(Debug, Clone)]
pub struct ShapeDerivative {
    /// `u0' = ubar0' - grad(u0) theta` with node-averaged gradients.
    pub u_prime: VectorField,
    /// `W(theta) = -grad(theta)^T u0 - grad(u0) theta` (nodal, averaged).
    pub w_field: Vec<V2>,
    /// Per frictional node: the residual of the tangential restatement
    /// `u0'.tau = W(theta).tau`, evaluated with the discrete tangent rate the
    /// derivative solve imposed (zero to solver accuracy on sticking nodes).
    pub stick_constraint_residual: Vec<f64>,
}

pub fn shape_derivative(
    cx: &ShapeContext,
    md: &MaterialDerivative,
    theta: &VectorField,
) -> ShapeDerivative {
    let mesh = cx.mesh;
    let grad_t = node_averaged_gradients(mesh, theta.values());
    let mut u_prime = Vec::with_capacity(mesh.num_vertices());
    let mut w_field = Vec::with_capacity(mesh.num_vertices());
    for v in 0..mesh.num_vertices() {
        let gu_th = mv(cx.grad_u[v], theta.values()[v]);
        u_prime.push(sub(md.field.values()[v], gu_th));
        w_field.push(sub(scale(mtv(grad_t[v], cx.u0.values()[v]), -1.0), gu_th));
    }
    let st = cx.state;
    let frame = &cx.disc.frame;
    let mut stick_constraint_residual = Vec::with_capacity(st.len());
    for i in 0..st.len() {
        let k = st.positions[i];
        // u0'.tau - W.tau = ubar0'.tau + (grad(theta)^T u0).tau, with the
        // transport realized by the polyline tangent rate
        let r = dot(md.field.values()[st.nodes[i]], frame.tangent[k])
            - md.data.constraint_offset[i];
        stick_constraint_residual.push(r);
    }
    ShapeDerivative {
        u_prime: VectorField::from_values(mesh, u_prime),
        w_field,
        stick_constraint_residual,
    }
}

/// One row of the finite-difference gradient table.
#[derive(Debug, Clone, Serialize)]
pub struct FdGradientRow {
    pub t: f64,
    pub fd_quotient: f64,
    pub value_boundary: f64,
    pub value_volume: f64,
    pub rel_err_boundary: f64,
    pub rel_err_volume: f64,
}

/// Re-solve the friction problem on deformed meshes and tabulate the energy
/// difference quotients against both analytic gradient forms.
pub fn fd_gradient_check(
    mesh: &Mesh,
    pd: &ProblemData,
    theta: &VectorField,
    t_list: &[f64],
) -> Result<Vec<FdGradientRow>, DerivativeError> {
    theta.check_mesh(mesh).map_err(TrescaError::Solve)?;
    let disc = Discretization::build(mesh, pd)?;
    let (u0, state) = solve_tresca_with(mesh, pd, &disc, None)?;
    let j0 = disc.energy(u0.values());
    let cx = ShapeContext::build(mesh, pd, &disc, &u0, &state)?;
    let g_b = shape_gradient_boundary(&cx, theta)?;
    let g_v = shape_gradient_volume(&cx, theta)?;
    let mut ts = t_list.to_vec();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let zero_direction = theta.values().iter().all(|v| *v == [0.0, 0.0]);
    let mut rows = Vec::with_capacity(ts.len());
    for &t in &ts {
        let fd = if t == 0.0 || zero_direction {
            0.0
        } else {
            let m_t = deform(mesh, theta.values(), t).map_err(TrescaError::Mesh)?;
            let disc_t = Discretization::build(&m_t, pd)?;
            let (u_t, _) = solve_tresca_with(&m_t, pd, &disc_t, Some(&state))?;
            (disc_t.energy(u_t.values()) - j0) / t
        };
        let denom_b = fd.abs().max(g_b.abs()).max(1e-300);
        let denom_v = fd.abs().max(g_v.abs()).max(1e-300);
        rows.push(FdGradientRow {
            t,
            fd_quotient: fd,
            value_boundary: g_b,
            value_volume: g_v,
            rel_err_boundary: (fd - g_b).abs() / denom_b,
            rel_err_volume: (fd - g_v).abs() / denom_v,
        });
    }
    Ok(rows)
}

/// H1-norm error of the material-derivative finite-difference quotient
/// `(u_t - u0)/t` against the computed derivative, per step size.
pub fn material_derivative_fd_check(
    mesh: &Mesh,
    pd: &ProblemData,
    theta: &VectorField,
    t_list: &[f64],
) -> Result<Vec<(f64, f64)>, DerivativeError> {
    let disc = Discretization::build(mesh, pd)?;
    let (u0, state) = solve_tresca_with(mesh, pd, &disc, None)?;
    let cx = ShapeContext::build(mesh, pd, &disc, &u0, &state)?;
    let md = solve_material_derivative(&cx, theta)?;
    let h1 = assemble_h1_metric(mesh);
    let mut out = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let m_t = deform(mesh, theta.values(), t).map_err(TrescaError::Mesh)?;
        let (u_t, _) = solve_tresca(&m_t, pd, Some(&state)).map_err(DerivativeError::Tresca)?;
        let q: Vec<V2> = u_t
            .values()
            .iter()
            .zip(u0.values())
            .zip(md.field.values())
            .map(|((ut, u0v), z)| sub(scale(sub(*ut, *u0v), 1.0 / t), *z))
            .collect();
        out.push((t, h1.quadratic_form(&q).sqrt()));
    }
    Ok(out)
}
