//! The Tresca friction problem: linear elasticity with zero normal traction
//! and a bounded tangential traction on the frictional boundary, solved as a
//! variational inequality by an iterative switching (active-set) method.
//!
//! Discrete energy over nodal fields vanishing on the clamped boundary:
//!
//! ```text
//!   E(u) = 1/2 a(u,u) - F.u + sum_i g_i w_i |u_i . tau_i|
//! ```
//!
//! with the sum over frictional boundary nodes (`w_i` arc weights). The
//! switching solver partitions those nodes into stick (tangential velocity
//! clamped) and slip (tangential traction at the threshold, sign opposite to
//! the slip), re-solving the linear problem until the partition is stable.
//! A proximal-gradient minimizer of the same energy serves as an independent
//! algorithmic oracle on small meshes.

use crate::expr::Expression;
use crate::fem::{
    assemble_elasticity, assemble_load, solve_constrained, traction_from_residual, BlockMat,
    Constraint, SolveError, SparseSystem, TractionField, VectorField,
};
use crate::math2d::*;
use crate::mesh::{boundary_frame, BoundaryFrame, BoundaryTag, Mesh};
use rand::Rng;
use rand::SeedableRng;

/// Problem data: body force, friction threshold, material and tolerances.
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub f: [Expression; 2],
    pub g: Expression,
    pub mu: f64,
    pub lambda: f64,
    pub lin_tol: f64,
    pub lin_max_iter: usize,
    pub switch_tol: f64,
    pub eps_slip: f64,
    pub max_switch_iter: usize,
}

impl ProblemData {
    pub fn new(f: [Expression; 2], g: Expression, mu: f64, lambda: f64) -> Self {
        ProblemData {
            f,
            g,
            mu,
            lambda,
            lin_tol: 1e-10,
            lin_max_iter: 200_000,
            switch_tol: 1e-9,
            eps_slip: 1e-6,
            max_switch_iter: 200,
        }
    }

    /// The toy data set: elliptic domain forces and threshold.
    pub fn toy() -> Self {
        let f = [
            crate::expr::parse_expression("-5*x*exp(x)").unwrap(),
            crate::expr::parse_expression("0.6*exp(x^2)").unwrap(),
        ];
        let g = crate::expr::parse_expression("1+sin(-y*pi/2)+1e-3").unwrap();
        ProblemData::new(f, g, 0.5, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactMode {
    StickStrict,
    StickBoundary,
    Slip,
}

/// Converged contact data on the frictional boundary nodes.
#[derive(Debug, Clone)]
pub struct ContactState {
    /// Loop positions (into the boundary frame) of the frictional nodes.
    pub positions: Vec<usize>,
    /// Vertex ids of the frictional nodes.
    pub nodes: Vec<usize>,
    pub mode: Vec<ContactMode>,
    /// Slip sign `s` with `u.tau = s |u.tau|` on slip nodes (+1 on stick nodes
    /// by convention).
    pub slip_sign: Vec<f64>,
    pub sigma_n: Vec<f64>,
    pub s_tau: Vec<f64>,
    pub u_tau: Vec<f64>,
    pub g: Vec<f64>,
    pub switch_iters: usize,
}

impl ContactState {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrescaError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("switching solver did not converge in {iters} iterations ({history} distinct partitions)")]
    SwitchingNoConvergence { iters: usize, history: usize },
    #[error("mesh error: {0}")]
    Mesh(#[from] crate::mesh::MeshError),
}

/// Reusable discrete pieces of one friction problem on one mesh.
pub struct Discretization {
    pub frame: BoundaryFrame,
    pub op: BlockMat,
    pub load: Vec<V2>,
    /// Frictional node loop positions, their vertex ids, thresholds and weights.
    pub positions: Vec<usize>,
    pub nodes: Vec<usize>,
    pub g: Vec<f64>,
    pub weight: Vec<f64>,
}

impl Discretization {
    pub fn build(mesh: &Mesh, pd: &ProblemData) -> Result<Self, TrescaError> {
        let frame = boundary_frame(mesh);
        let op = assemble_elasticity(mesh, pd.mu, pd.lambda)?;
        let load = assemble_load(mesh, &pd.f).map_err(TrescaError::Solve)?;
        let mut positions = Vec::new();
        let mut nodes = Vec::new();
        let mut g = Vec::new();
        let mut weight = Vec::new();
        for (k, &v) in frame.nodes.iter().enumerate() {
            if mesh.node_tag(v) == Some(BoundaryTag::Tresca) {
                positions.push(k);
                nodes.push(v);
                let p = mesh.vertex(v);
                let gv = pd
                    .g
                    .eval(p[0], p[1])
                    .map_err(|e| TrescaError::Solve(SolveError::Data(e)))?;
                if !(gv > 0.0) {
                    return Err(TrescaError::Solve(SolveError::Assembly(format!(
                        "friction threshold must be positive: g({}, {}) = {gv}",
                        p[0], p[1]
                    ))));
                }
                g.push(gv);
                weight.push(frame.weight[k]);
            }
        }
        Ok(Discretization { frame, op, load, positions, nodes, g, weight })
    }

    pub fn dirichlet_constraints(&self, mesh: &Mesh) -> Vec<Constraint> {
        mesh.dirichlet_nodes()
            .into_iter()
            .flat_map(Constraint::fix_node)
            .collect()
    }

    /// Friction functional `phi(v) = sum g_i w_i |v_i . tau_i|`.
    pub fn friction(&self, v: &[V2]) -> f64 {
        self.positions
            .iter()
            .zip(self.g.iter().zip(&self.weight))
            .map(|(&k, (&g, &w))| g * w * dot(v[self.frame.nodes[k]], self.frame.tangent[k]).abs())
            .sum()
    }

    /// Total discrete energy of a nodal field.
    pub fn energy(&self, v: &[V2]) -> f64 {
        0.5 * self.op.quadratic_form(v)
            - v.iter().zip(&self.load).map(|(a, b)| dot(*a, *b)).sum::<f64>()
            + self.friction(v)
    }
}

/// Displacement with the clamped boundary fixed and zero traction on the
/// frictional boundary.
pub fn solve_dirichlet_neumann(mesh: &Mesh, pd: &ProblemData) -> Result<VectorField, TrescaError> {
    let disc = Discretization::build(mesh, pd)?;
    let mut sys = SparseSystem::new(mesh, disc.op.clone());
    sys.rhs = disc.load.clone();
    sys.constraints = disc.dirichlet_constraints(mesh);
    Ok(solve_constrained(&sys, pd.lin_tol, pd.lin_max_iter, None)?)
}

#[derive(Clone, Copy, PartialEq)]
enum NodeState {
    Stick,
    Slip(f64), // slip sign
}

/// Solve the friction problem by iterative switching. Returns the
/// displacement and the converged contact state.
pub fn solve_tresca(
    mesh: &Mesh,
    pd: &ProblemData,
    warm_start: Option<&ContactState>,
) -> Result<(VectorField, ContactState), TrescaError> {
    let disc = Discretization::build(mesh, pd)?;
    solve_tresca_with(mesh, pd, &disc, warm_start)
}

pub fn solve_tresca_with(
    mesh: &Mesh,
    pd: &ProblemData,
    disc: &Discretization,
    warm_start: Option<&ContactState>,
) -> Result<(VectorField, ContactState), TrescaError> {
    let nt = disc.nodes.len();
    let mut state: Vec<NodeState> = vec![NodeState::Stick; nt];
    if let Some(ws) = warm_start {
        if ws.nodes == disc.nodes {
            for i in 0..nt {
                state[i] = match ws.mode[i] {
                    ContactMode::Slip => NodeState::Slip(ws.slip_sign[i]),
                    _ => NodeState::Stick,
                };
            }
        }
    }
    let base_constraints = disc.dirichlet_constraints(mesh);

    let signature = |st: &[NodeState]| -> Vec<i8> {
        st.iter()
            .map(|s| match s {
                NodeState::Stick => 0i8,
                NodeState::Slip(sg) => {
                    if *sg > 0.0 {
                        1
                    } else {
                        -1
                    }
                }
            })
            .collect()
    };
    let mut seen: Vec<Vec<i8>> = vec![signature(&state)];

    let mut u = VectorField::zeros(mesh);
    let last_tr: Option<TractionField>;
    let mut iters = 0usize;
    loop {
        if iters >= pd.max_switch_iter {
            return Err(TrescaError::SwitchingNoConvergence { iters, history: seen.len() });
        }
        iters += 1;

        // Linear subproblem for the current partition.
        let mut sys = SparseSystem::new(mesh, disc.op.clone());
        sys.rhs = disc.load.clone();
        sys.constraints = base_constraints.clone();
        for i in 0..nt {
            let k = disc.positions[i];
            match state[i] {
                NodeState::Stick => sys.constraints.push(Constraint::Directional {
                    node: disc.nodes[i],
                    dir: disc.frame.tangent[k],
                    value: 0.0,
                }),
                NodeState::Slip(s) => {
                    // tangential traction at the threshold, opposing the slip
                    let tload = scale(disc.frame.tangent[k], -disc.g[i] * s * disc.weight[i]);
                    sys.rhs[disc.nodes[i]] = add(sys.rhs[disc.nodes[i]], tload);
                }
            }
        }
        u = solve_constrained(&sys, pd.lin_tol, pd.lin_max_iter, Some(&u))?;

        let tr = traction_from_residual(mesh, &disc.op, u.values(), &disc.load, &disc.frame);

        // Switching rules.
        let mut switches: Vec<(usize, NodeState, f64)> = Vec::new();
        for i in 0..nt {
            let k = disc.positions[i];
            let ut = dot(u.values()[disc.nodes[i]], disc.frame.tangent[k]);
            match state[i] {
                NodeState::Stick => {
                    let excess = tr.s_tau[i].abs() - disc.g[i] * (1.0 + pd.switch_tol);
                    if excess > 0.0 {
                        switches.push((
                            i,
                            NodeState::Slip(-tr.s_tau[i].signum()),
                            excess / disc.g[i].max(1e-300),
                        ));
                    }
                }
                NodeState::Slip(s) => {
                    if ut * s < 0.0 {
                        switches.push((i, NodeState::Stick, ut.abs()));
                    }
                }
            }
        }

        if switches.is_empty() {
            last_tr = Some(tr);
            break;
        }

        let mut next = state.clone();
        for &(i, ns, _) in &switches {
            next[i] = ns;
        }
        let sig = signature(&next);
        if seen.contains(&sig) {
            // anti-cycling: switch only the worst violator
            let &(i, ns, _) = switches
                .iter()
                .max_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
                .unwrap();
            next = state.clone();
            next[i] = ns;
            let sig2 = signature(&next);
            if seen.contains(&sig2) {
                return Err(TrescaError::SwitchingNoConvergence { iters, history: seen.len() });
            }
            seen.push(sig2);
        } else {
            seen.push(sig);
        }
        state = next;
    }

    let tr = last_tr.expect("converged loop always recovers tractions");
    let mut mode = Vec::with_capacity(nt);
    let mut slip_sign = Vec::with_capacity(nt);
    let mut u_tau = Vec::with_capacity(nt);
    for i in 0..nt {
        let k = disc.positions[i];
        let ut = dot(u.values()[disc.nodes[i]], disc.frame.tangent[k]);
        u_tau.push(ut);
        match state[i] {
            NodeState::Slip(s) => {
                mode.push(ContactMode::Slip);
                slip_sign.push(s);
            }
            NodeState::Stick => {
                let ratio = tr.s_tau[i].abs() / disc.g[i].max(1e-300);
                mode.push(if ratio < 1.0 - pd.eps_slip {
                    ContactMode::StickStrict
                } else {
                    ContactMode::StickBoundary
                });
                slip_sign.push(1.0);
            }
        }
    }
    let cs = ContactState {
        positions: disc.positions.clone(),
        nodes: disc.nodes.clone(),
        mode,
        slip_sign,
        sigma_n: tr.sigma_n,
        s_tau: tr.s_tau,
        u_tau,
        g: disc.g.clone(),
        switch_iters: iters,
    };
    Ok((u, cs))
}

/// Tresca energy of a displacement field (any field, not only the solution).
pub fn energy(mesh: &Mesh, pd: &ProblemData, u: &VectorField) -> Result<f64, TrescaError> {
    u.check_mesh(mesh).map_err(TrescaError::Solve)?;
    let disc = Discretization::build(mesh, pd)?;
    Ok(disc.energy(u.values()))
}

/// Node index lists of the three contact regimes: slipping (N), strictly
/// sticking (D) and sticking at the threshold (S).
#[derive(Debug, Clone, Default)]
pub struct BoundaryPartition {
    pub slipping: Vec<usize>,
    pub stick_strict: Vec<usize>,
    pub stick_boundary: Vec<usize>,
}

pub fn classify_boundary(state: &ContactState) -> BoundaryPartition {
    let mut p = BoundaryPartition::default();
    for i in 0..state.len() {
        match state.mode[i] {
            ContactMode::Slip => p.slipping.push(state.nodes[i]),
            ContactMode::StickStrict => p.stick_strict.push(state.nodes[i]),
            ContactMode::StickBoundary => p.stick_boundary.push(state.nodes[i]),
        }
    }
    p
}

/// Most negative slack of the discrete variational inequality
/// `a(u, v-u) + phi(v) - phi(u) - F.(v-u) >= 0` over seeded random test
/// fields plus the deterministic fields `v = 0` and `v = 2u`.
pub fn vi_residual(
    mesh: &Mesh,
    pd: &ProblemData,
    u: &VectorField,
    n_samples: usize,
    seed: u64,
) -> Result<f64, TrescaError> {
    u.check_mesh(mesh).map_err(TrescaError::Solve)?;
    let disc = Discretization::build(mesh, pd)?;
    let dirichlet = mesh.dirichlet_nodes();
    let ku = disc.op.apply(u.values());
    let phi_u = disc.friction(u.values());
    let scale_u = u.values().iter().map(|v| norm(*v)).fold(0.0, f64::max).max(1e-12);

    let slack = |v: &[V2]| -> f64 {
        let mut a_uv = 0.0;
        let mut f_v = 0.0;
        for i in 0..v.len() {
            let d = sub(v[i], u.values()[i]);
            a_uv += dot(ku[i], d);
            f_v += dot(disc.load[i], d);
        }
        a_uv + disc.friction(v) - phi_u - f_v
    };

    let zero = vec![[0.0, 0.0]; u.len()];
    let two_u: Vec<V2> = u.values().iter().map(|&v| scale(v, 2.0)).collect();
    let mut worst = slack(&zero).min(slack(&two_u));

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_samples {
        let mut v: Vec<V2> = (0..u.len())
            .map(|_| {
                [
                    scale_u * rng.random_range(-1.0..1.0),
                    scale_u * rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        for &d in &dirichlet {
            v[d] = [0.0, 0.0];
        }
        worst = worst.min(slack(&v));
    }
    Ok(worst)
}

/// Proximal-gradient minimizer of the discrete energy: a gradient step of
/// length `1/L` on the smooth part (`L` from 100 power iterations), then the
/// exact nodal proximal map of the friction term (soft thresholding of the
/// tangential component). Independent of the switching solver.
pub fn oracle_projected_gradient(
    mesh: &Mesh,
    pd: &ProblemData,
    max_iter: usize,
    tol: f64,
) -> Result<VectorField, TrescaError> {
    let disc = Discretization::build(mesh, pd)?;
    let dirichlet = mesh.dirichlet_nodes();
    let free = {
        let mut mask = vec![true; mesh.num_vertices()];
        for &d in &dirichlet {
            mask[d] = false;
        }
        mask
    };
    let lmax = disc.op.largest_eigenvalue(100, |i| free[i]);
    let step = 1.0 / lmax.max(1e-300);

    let n = mesh.num_vertices();
    let mut u = vec![[0.0f64, 0.0]; n];
    let mut e_prev = disc.energy(&u);
    for _ in 0..max_iter {
        let ku = disc.op.apply(&u);
        let mut v = vec![[0.0f64, 0.0]; n];
        for i in 0..n {
            if free[i] {
                v[i] = axpy(u[i], -step, sub(ku[i], disc.load[i]));
            }
        }
        // exact prox of step * sum g w |x.tau| per frictional node
        for i in 0..disc.nodes.len() {
            let k = disc.positions[i];
            let node = disc.nodes[i];
            if !free[node] {
                continue;
            }
            let tau = disc.frame.tangent[k];
            let nrm = disc.frame.normal[k];
            let t = dot(v[node], tau);
            let c = step * disc.g[i] * disc.weight[i];
            let t_new = t.signum() * (t.abs() - c).max(0.0);
            v[node] = add(scale(nrm, dot(v[node], nrm)), scale(tau, t_new));
        }
        let e = disc.energy(&v);
        let du: f64 = v
            .iter()
            .zip(&u)
            .map(|(a, b)| dot(sub(*a, *b), sub(*a, *b)))
            .sum::<f64>()
            .sqrt();
        u = v;
        if (e_prev - e).abs() < tol && du * lmax < tol.sqrt() {
            e_prev = e;
            break;
        }
        e_prev = e;
    }
    let _ = e_prev;
    Ok(VectorField::from_values(mesh, u))
}

/// Energy-norm distance `sqrt(a(u-v, u-v))` between two nodal fields.
pub fn energy_norm_distance(disc: &Discretization, u: &[V2], v: &[V2]) -> f64 {
    let d: Vec<V2> = u.iter().zip(v).map(|(a, b)| sub(*a, *b)).collect();
    disc.op.quadratic_form(&d).max(0.0).sqrt()
}

/// Seeded random smooth direction vanishing on the clamped boundary:
/// H1-metric smoothing of white nodal noise, normalized in the H1 norm.
pub fn seeded_direction(mesh: &Mesh, seed: u64) -> Result<VectorField, SolveError> {
    let h1 = crate::fem::assemble_h1_metric(mesh);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut sys = SparseSystem::new(mesh, h1);
    sys.rhs = (0..mesh.num_vertices())
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    for v in mesh.dirichlet_nodes() {
        sys.constraints.extend(Constraint::fix_node(v));
    }
    let theta = solve_constrained(&sys, 1e-12, 100_000, None)?;
    let nn = sys.op.quadratic_form(theta.values()).sqrt();
    Ok(VectorField::from_values(
        mesh,
        theta.values().iter().map(|&v| scale(v, 1.0 / nn)).collect(),
    ))
}
