//! P1 finite-element assembly and constrained linear algebra for 2D linear
//! elasticity: stiffness, load and H1-metric operators, componentwise and
//! directional constraints (handled by nodal rotation, not penalty), a
//! diagonally preconditioned conjugate-gradient solver, a dense fallback for
//! small oracles, consistent traction recovery and boundary field calculus.

use crate::expr::{self, Expression};
use crate::math2d::*;
use crate::mesh::{boundary_frame, BoundaryFrame, BoundaryTag, Mesh};
use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("conjugate gradient did not converge in {iters} iterations (relative residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("inconsistent constraints: {0}")]
    Constraints(String),
    #[error("field/mesh mismatch: field belongs to mesh {field}, expected {mesh}")]
    MeshMismatch { field: u64, mesh: u64 },
    #[error("data error: {0}")]
    Data(#[from] expr::EvalError),
    #[error("assembly error: {0}")]
    Assembly(String),
}

/// Nodal 2-vector field tied to the mesh it was built on.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    mesh_id: u64,
    values: Vec<V2>,
}

impl VectorField {
    pub fn zeros(mesh: &Mesh) -> Self {
        VectorField { mesh_id: mesh.id(), values: vec![[0.0, 0.0]; mesh.num_vertices()] }
    }

    pub fn from_values(mesh: &Mesh, values: Vec<V2>) -> Self {
        assert_eq!(values.len(), mesh.num_vertices(), "field length mismatch");
        assert!(
            values.iter().all(|v| v[0].is_finite() && v[1].is_finite()),
            "non-finite field entry"
        );
        VectorField { mesh_id: mesh.id(), values }
    }

    pub fn from_fn(mesh: &Mesh, f: impl Fn(V2) -> V2) -> Self {
        let values = mesh.vertices().iter().map(|&p| f(p)).collect();
        Self::from_values(mesh, values)
    }

    pub fn check_mesh(&self, mesh: &Mesh) -> Result<(), SolveError> {
        if self.mesh_id != mesh.id() {
            return Err(SolveError::MeshMismatch { field: self.mesh_id, mesh: mesh.id() });
        }
        Ok(())
    }

    /// Rebind to another mesh with identical connectivity (vertex-identified
    /// transport between a mesh and its deformation).
    pub fn rebind(&self, mesh: &Mesh) -> VectorField {
        VectorField { mesh_id: mesh.id(), values: self.values.clone() }
    }

    pub fn mesh_id(&self) -> u64 {
        self.mesh_id
    }
    pub fn values(&self) -> &[V2] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [V2] {
        &mut self.values
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn linear_combination(a: f64, u: &VectorField, b: f64, v: &VectorField) -> VectorField {
        assert_eq!(u.mesh_id, v.mesh_id);
        let values = u
            .values
            .iter()
            .zip(&v.values)
            .map(|(&x, &y)| add(scale(x, a), scale(y, b)))
            .collect();
        VectorField { mesh_id: u.mesh_id, values }
    }
}

/// Symmetric sparse operator stored as block CSR over node pairs.
#[derive(Debug, Clone)]
pub struct BlockMat {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    blocks: Vec<M2>,
}

impl BlockMat {
    fn from_triangles(n: usize, triangles: &[[usize; 3]]) -> Self {
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for t in triangles {
            for &i in t {
                for &j in t {
                    neighbors[i].push(j);
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for adj in neighbors.iter_mut() {
            adj.sort_unstable();
            adj.dedup();
            col_idx.extend_from_slice(adj);
            row_ptr.push(col_idx.len());
        }
        let blocks = vec![ZERO_M2; col_idx.len()];
        BlockMat { n, row_ptr, col_idx, blocks }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    fn entry_index(&self, i: usize, j: usize) -> usize {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        lo + self.col_idx[lo..hi]
            .binary_search(&j)
            .expect("pattern entry missing")
    }

    fn add_block(&mut self, i: usize, j: usize, b: M2) {
        let k = self.entry_index(i, j);
        self.blocks[k] = mat_add(self.blocks[k], b);
    }

    pub fn matvec(&self, x: &[V2], y: &mut [V2]) {
        for i in 0..self.n {
            let mut acc = [0.0, 0.0];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc = add(acc, mv(self.blocks[k], x[self.col_idx[k]]));
            }
            y[i] = acc;
        }
    }

    pub fn apply(&self, x: &[V2]) -> Vec<V2> {
        let mut y = vec![[0.0, 0.0]; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// Quadratic form x^T A x.
    pub fn quadratic_form(&self, x: &[V2]) -> f64 {
        self.apply(x).iter().zip(x).map(|(a, b)| dot(*a, *b)).sum()
    }

    /// Bilinear form x^T A y.
    pub fn bilinear_form(&self, x: &[V2], y: &[V2]) -> f64 {
        self.apply(y).iter().zip(x).map(|(a, b)| dot(*a, *b)).sum()
    }

    /// Largest relative symmetry defect max |A_ij - A_ji| / max |A_ij|.
    pub fn symmetry_defect(&self) -> f64 {
        let mut max_abs = 0.0f64;
        let mut max_diff = 0.0f64;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let bij = self.blocks[k];
                let bji = self.blocks[self.entry_index(j, i)];
                for a in 0..2 {
                    for b in 0..2 {
                        max_abs = max_abs.max(bij[a][b].abs());
                        max_diff = max_diff.max((bij[a][b] - bji[b][a]).abs());
                    }
                }
            }
        }
        if max_abs == 0.0 {
            0.0
        } else {
            max_diff / max_abs
        }
    }

    /// Estimate the largest eigenvalue by power iteration (fixed seed vector).
    pub fn largest_eigenvalue(&self, iters: usize, mask: impl Fn(usize) -> bool) -> f64 {
        let mut v: Vec<V2> = (0..self.n)
            .map(|i| {
                if mask(i) {
                    [1.0 + (i % 7) as f64 * 0.1, 1.0 - (i % 5) as f64 * 0.1]
                } else {
                    [0.0, 0.0]
                }
            })
            .collect();
        let mut lambda = 0.0;
        for _ in 0..iters {
            let mut w = self.apply(&v);
            for (i, wi) in w.iter_mut().enumerate() {
                if !mask(i) {
                    *wi = [0.0, 0.0];
                }
            }
            let nw: f64 = w.iter().map(|x| dot(*x, *x)).sum::<f64>().sqrt();
            if nw == 0.0 {
                return 0.0;
            }
            lambda = nw;
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = scale(*wi, 1.0 / nw);
            }
        }
        lambda
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let m = 2 * self.n;
        let mut d = vec![vec![0.0; m]; m];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                for a in 0..2 {
                    for b in 0..2 {
                        d[2 * i + a][2 * j + b] = self.blocks[k][a][b];
                    }
                }
            }
        }
        d
    }
}

/// A prescribed value for one scalar degree of freedom.
#[derive(Debug, Clone, Copy)]
pub enum Constraint {
    /// Fix component `comp` of `node` to `value`.
    Component { node: usize, comp: usize, value: f64 },
    /// Fix `u . dir = value` at `node` (`dir` is normalized internally).
    Directional { node: usize, dir: V2, value: f64 },
}

impl Constraint {
    pub fn fix_node(node: usize) -> [Constraint; 2] {
        [
            Constraint::Component { node, comp: 0, value: 0.0 },
            Constraint::Component { node, comp: 1, value: 0.0 },
        ]
    }
}

/// Operator, right-hand side and constraint set for one linear solve.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub mesh_id: u64,
    pub op: BlockMat,
    pub rhs: Vec<V2>,
    pub constraints: Vec<Constraint>,
}

impl SparseSystem {
    pub fn new(mesh: &Mesh, op: BlockMat) -> Self {
        let n = op.num_nodes();
        SparseSystem { mesh_id: mesh.id(), op, rhs: vec![[0.0, 0.0]; n], constraints: Vec::new() }
    }
}

/// Elasticity operator: integral of `2 mu e(u):e(v) + lambda div(u) div(v)`,
/// exact per element for P1 fields.
pub fn assemble_elasticity(mesh: &Mesh, mu: f64, lambda: f64) -> Result<BlockMat, SolveError> {
    assert!(mu > 0.0 && lambda >= 0.0, "need mu > 0, lambda >= 0");
    let mut k = BlockMat::from_triangles(mesh.num_vertices(), mesh.triangles());
    for t in 0..mesh.num_triangles() {
        let (area, g) = mesh.p1_gradients(t);
        if !(area > 0.0) || !area.is_finite() {
            return Err(SolveError::Assembly(format!("degenerate triangle {t}")));
        }
        let tri = mesh.triangles()[t];
        for (li, &vi) in tri.iter().enumerate() {
            for (lj, &vj) in tri.iter().enumerate() {
                let gi = g[li];
                let gj = g[lj];
                let gg = dot(gi, gj);
                let mut block = ZERO_M2;
                for a in 0..2 {
                    for b in 0..2 {
                        let delta = if a == b { 1.0 } else { 0.0 };
                        block[a][b] =
                            area * (mu * (delta * gg + gi[b] * gj[a]) + lambda * gi[a] * gj[b]);
                    }
                }
                k.add_block(vi, vj, block);
            }
        }
    }
    Ok(k)
}

/// Full H1 operator: integral of `grad(u):grad(v) + u . v`, exact per element.
pub fn assemble_h1_metric(mesh: &Mesh) -> BlockMat {
    let mut k = BlockMat::from_triangles(mesh.num_vertices(), mesh.triangles());
    for t in 0..mesh.num_triangles() {
        let (area, g) = mesh.p1_gradients(t);
        let tri = mesh.triangles()[t];
        for (li, &vi) in tri.iter().enumerate() {
            for (lj, &vj) in tri.iter().enumerate() {
                let stiff = area * dot(g[li], g[lj]);
                let mass = if li == lj { area / 6.0 } else { area / 12.0 };
                k.add_block(vi, vj, [[stiff + mass, 0.0], [0.0, stiff + mass]]);
            }
        }
    }
    k
}

/// Evaluate the two components of the body force at a point.
pub fn eval_force(f: &[Expression; 2], p: V2) -> Result<V2, expr::EvalError> {
    Ok([f[0].eval(p[0], p[1])?, f[1].eval(p[0], p[1])?])
}

/// Load vector: integral of `f . phi_i` by the 3-point edge-midpoint rule
/// (exact for quadratic integrands).
pub fn assemble_load(mesh: &Mesh, f: &[Expression; 2]) -> Result<Vec<V2>, SolveError> {
    let mut rhs = vec![[0.0, 0.0]; mesh.num_vertices()];
    for t in 0..mesh.num_triangles() {
        let tri = mesh.triangles()[t];
        let area = mesh.triangle_area(t);
        let p = [mesh.vertex(tri[0]), mesh.vertex(tri[1]), mesh.vertex(tri[2])];
        // midpoint of the edge opposite to local vertex k
        for k in 0..3 {
            let m = scale(add(p[(k + 1) % 3], p[(k + 2) % 3]), 0.5);
            let fv = eval_force(f, m)?;
            let w = area / 3.0;
            // basis values at that midpoint: 0 at k, 1/2 at the other two
            rhs[tri[(k + 1) % 3]] = axpy(rhs[tri[(k + 1) % 3]], 0.5 * w, fv);
            rhs[tri[(k + 2) % 3]] = axpy(rhs[tri[(k + 2) % 3]], 0.5 * w, fv);
        }
    }
    Ok(rhs)
}

struct ConstraintPlan {
    /// Per-node rotation (unknowns become `R v`); identity when not rotated.
    rot: Vec<Option<M2>>,
    /// Prescribed value per rotated scalar dof.
    fixed: Vec<Option<f64>>,
}

fn plan_constraints(n: usize, constraints: &[Constraint]) -> Result<ConstraintPlan, SolveError> {
    let mut rot: Vec<Option<M2>> = vec![None; n];
    let mut fixed: Vec<Option<f64>> = vec![None; 2 * n];
    // Directional first so componentwise constraints can detect clashes.
    for c in constraints {
        if let Constraint::Directional { node, dir, value } = c {
            let d = normalize(*dir);
            if !d[0].is_finite() || !d[1].is_finite() {
                return Err(SolveError::Constraints(format!("zero direction at node {node}")));
            }
            if let Some(r) = rot[*node] {
                if norm(sub(r[0], d)) > 1e-12 && norm(add(r[0], d)) > 1e-12 {
                    return Err(SolveError::Constraints(format!(
                        "two directional constraints with different directions at node {node}"
                    )));
                }
            }
            rot[*node] = Some([d, perp_ccw(d)]);
            let dof = 2 * node;
            if let Some(v) = fixed[dof] {
                if (v - *value).abs() > 1e-12 {
                    return Err(SolveError::Constraints(format!(
                        "conflicting values at node {node}"
                    )));
                }
            }
            fixed[dof] = Some(*value);
        }
    }
    for c in constraints {
        if let Constraint::Component { node, comp, value } = c {
            if rot[*node].is_some() {
                return Err(SolveError::Constraints(format!(
                    "node {node} has both componentwise and directional constraints"
                )));
            }
            let dof = 2 * node + comp;
            if let Some(v) = fixed[dof] {
                if (v - *value).abs() > 1e-12 {
                    return Err(SolveError::Constraints(format!(
                        "conflicting values for dof {dof}"
                    )));
                }
            }
            fixed[dof] = Some(*value);
        }
    }
    Ok(ConstraintPlan { rot, fixed })
}

/// Rotated and eliminated copy of the operator plus the matching rhs.
fn reduced_system(
    sys: &SparseSystem,
    plan: &ConstraintPlan,
) -> (BlockMat, Vec<V2>) {
    let n = sys.op.num_nodes();
    let mut op = sys.op.clone();
    // rotate: B_ij -> R_i B_ij R_j^T
    for i in 0..n {
        for k in op.row_ptr[i]..op.row_ptr[i + 1] {
            let j = op.col_idx[k];
            let mut b = op.blocks[k];
            if let Some(ri) = plan.rot[i] {
                b = mm(ri, b);
            }
            if let Some(rj) = plan.rot[j] {
                b = mm(b, transpose(rj));
            }
            op.blocks[k] = b;
        }
    }
    let mut rhs: Vec<V2> = sys
        .rhs
        .iter()
        .enumerate()
        .map(|(i, &v)| plan.rot[i].map_or(v, |r| mv(r, v)))
        .collect();
    // move constrained columns to the rhs
    for i in 0..n {
        for k in op.row_ptr[i]..op.row_ptr[i + 1] {
            let j = op.col_idx[k];
            for b in 0..2 {
                if let Some(c) = plan.fixed[2 * j + b] {
                    if c != 0.0 {
                        for a in 0..2 {
                            if plan.fixed[2 * i + a].is_none() {
                                rhs[i][a] -= op.blocks[k][a][b] * c;
                            }
                        }
                    }
                }
            }
        }
    }
    // zero rows/columns, unit diagonal
    for i in 0..n {
        for k in op.row_ptr[i]..op.row_ptr[i + 1] {
            let j = op.col_idx[k];
            for a in 0..2 {
                for b in 0..2 {
                    let con = plan.fixed[2 * i + a].is_some() || plan.fixed[2 * j + b].is_some();
                    if con {
                        op.blocks[k][a][b] =
                            if i == j && a == b && plan.fixed[2 * i + a].is_some() { 1.0 } else { 0.0 };
                    }
                }
            }
        }
    }
    for i in 0..n {
        for a in 0..2 {
            if let Some(c) = plan.fixed[2 * i + a] {
                rhs[i][a] = c;
            }
        }
    }
    (op, rhs)
}

fn unrotate(plan: &ConstraintPlan, x: Vec<V2>) -> Vec<V2> {
    x.into_iter()
        .enumerate()
        .map(|(i, v)| plan.rot[i].map_or(v, |r| mtv(r, v)))
        .collect()
}

/// Diagonally preconditioned conjugate gradients on the constrained system.
/// Deterministic: fixed iteration order, no data races.
pub fn solve_constrained(
    sys: &SparseSystem,
    tol: f64,
    max_iter: usize,
    warm: Option<&VectorField>,
) -> Result<VectorField, SolveError> {
    let plan = plan_constraints(sys.op.num_nodes(), &sys.constraints)?;
    let (op, rhs) = reduced_system(sys, &plan);
    let n = op.num_nodes();

    let mut x: Vec<V2> = match warm {
        Some(w) => w
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| plan.rot[i].map_or(v, |r| mv(r, v)))
            .collect(),
        None => vec![[0.0, 0.0]; n],
    };
    for i in 0..n {
        for a in 0..2 {
            if let Some(c) = plan.fixed[2 * i + a] {
                x[i][a] = c;
            }
        }
    }

    let bnorm: f64 = rhs.iter().map(|v| dot(*v, *v)).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok(VectorField { mesh_id: sys.mesh_id, values: unrotate(&plan, x) });
    }

    let mut inv_diag = vec![[1.0, 1.0]; n];
    for i in 0..n {
        let k = op.entry_index(i, i);
        for a in 0..2 {
            let d = op.blocks[k][a][a];
            inv_diag[i][a] = if d > 0.0 { 1.0 / d } else { 1.0 };
        }
    }

    let mut r = {
        let ax = op.apply(&x);
        rhs.iter().zip(&ax).map(|(b, a)| sub(*b, *a)).collect::<Vec<V2>>()
    };
    let mut z: Vec<V2> = r
        .iter()
        .zip(&inv_diag)
        .map(|(ri, d)| [ri[0] * d[0], ri[1] * d[1]])
        .collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| dot(*a, *b)).sum();
    let mut res = r.iter().map(|v| dot(*v, *v)).sum::<f64>().sqrt();

    let mut iters = 0;
    while res / bnorm > tol {
        if iters >= max_iter {
            return Err(SolveError::NoConvergence { iters, residual: res / bnorm });
        }
        let ap = op.apply(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| dot(*a, *b)).sum();
        if pap <= 0.0 {
            return Err(SolveError::NoConvergence { iters, residual: res / bnorm });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] = axpy(x[i], alpha, p[i]);
            r[i] = axpy(r[i], -alpha, ap[i]);
        }
        for i in 0..n {
            z[i] = [r[i][0] * inv_diag[i][0], r[i][1] * inv_diag[i][1]];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| dot(*a, *b)).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = axpy(z[i], beta, p[i]);
        }
        res = r.iter().map(|v| dot(*v, *v)).sum::<f64>().sqrt();
        iters += 1;
    }

    Ok(VectorField { mesh_id: sys.mesh_id, values: unrotate(&plan, x) })
}

/// Dense LDL^T factorization fallback for small oracle systems.
pub fn solve_constrained_dense(sys: &SparseSystem) -> Result<VectorField, SolveError> {
    let plan = plan_constraints(sys.op.num_nodes(), &sys.constraints)?;
    let (op, rhs) = reduced_system(sys, &plan);
    let m = 2 * op.num_nodes();
    let mut a = op.to_dense();
    let mut b: Vec<f64> = rhs.iter().flat_map(|v| v.iter().copied()).collect();
    // LDL^T without pivoting (SPD after elimination); unit-lower L stored in
    // the strict lower triangle, D on the diagonal.
    for j in 0..m {
        let mut d = a[j][j];
        for k in 0..j {
            d -= a[j][k] * a[j][k] * a[k][k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(SolveError::Assembly(format!(
                "dense factorization hit a non-positive pivot at {j}"
            )));
        }
        a[j][j] = d;
        for i in j + 1..m {
            let mut v = a[i][j];
            for k in 0..j {
                v -= a[i][k] * a[j][k] * a[k][k];
            }
            a[i][j] = v / d;
        }
    }
    for i in 0..m {
        for k in 0..i {
            let l = a[i][k];
            if l != 0.0 {
                b[i] -= l * b[k];
            }
        }
    }
    for i in 0..m {
        b[i] /= a[i][i];
    }
    for i in (0..m).rev() {
        for k in i + 1..m {
            let l = a[k][i];
            if l != 0.0 {
                b[i] -= l * b[k];
            }
        }
    }
    let x: Vec<V2> = (0..op.num_nodes()).map(|i| [b[2 * i], b[2 * i + 1]]).collect();
    Ok(VectorField { mesh_id: sys.mesh_id, values: unrotate(&plan, x) })
}

/// Consistent nodal tractions on the whole boundary loop: the equilibrium
/// residual `K u - F` at each boundary node divided by its arc weight.
pub fn boundary_residual_tractions(
    op: &BlockMat,
    u: &[V2],
    volume_load: &[V2],
    frame: &BoundaryFrame,
) -> Vec<V2> {
    let ku = op.apply(u);
    frame
        .nodes
        .iter()
        .enumerate()
        .map(|(k, &v)| scale(sub(ku[v], volume_load[v]), 1.0 / frame.weight[k]))
        .collect()
}

/// Normal/tangential traction components on the Tresca part of the boundary.
#[derive(Debug, Clone)]
pub struct TractionField {
    /// Loop positions (into the frame) of the Tresca nodes.
    pub positions: Vec<usize>,
    /// Vertex ids of the Tresca nodes.
    pub nodes: Vec<usize>,
    pub sigma_n: Vec<f64>,
    pub s_tau: Vec<f64>,
}

/// Recover tractions from an equilibrium displacement (residual recovery
/// against the volume load), restricted to Tresca boundary nodes.
pub fn boundary_traction(
    mesh: &Mesh,
    u: &VectorField,
    mu: f64,
    lambda: f64,
    volume_load: &[V2],
) -> Result<TractionField, SolveError> {
    u.check_mesh(mesh)?;
    let op = assemble_elasticity(mesh, mu, lambda)?;
    let frame = boundary_frame(mesh);
    Ok(traction_from_residual(mesh, &op, u.values(), volume_load, &frame))
}

pub fn traction_from_residual(
    mesh: &Mesh,
    op: &BlockMat,
    u: &[V2],
    volume_load: &[V2],
    frame: &BoundaryFrame,
) -> TractionField {
    let tr = boundary_residual_tractions(op, u, volume_load, frame);
    let mut positions = Vec::new();
    let mut nodes = Vec::new();
    let mut sigma_n = Vec::new();
    let mut s_tau = Vec::new();
    for (k, &v) in frame.nodes.iter().enumerate() {
        if mesh.node_tag(v) == Some(BoundaryTag::Tresca) {
            positions.push(k);
            nodes.push(v);
            sigma_n.push(dot(tr[k], frame.normal[k]));
            s_tau.push(dot(tr[k], frame.tangent[k]));
        }
    }
    TractionField { positions, nodes, sigma_n, s_tau }
}

/// Area-weighted average of adjacent-element P1 gradients at every vertex.
/// Row-major Jacobians: `out[v][i][j] = d field_i / d x_j`.
pub fn node_averaged_gradients(mesh: &Mesh, field: &[V2]) -> Vec<M2> {
    let nv = mesh.num_vertices();
    let mut acc = vec![ZERO_M2; nv];
    let mut wsum = vec![0.0f64; nv];
    for t in 0..mesh.num_triangles() {
        let (area, g) = mesh.p1_gradients(t);
        let tri = mesh.triangles()[t];
        let mut grad = ZERO_M2;
        for (l, &v) in tri.iter().enumerate() {
            grad = mat_add(grad, outer(field[v], g[l]));
        }
        for &v in &tri {
            acc[v] = mat_add(acc[v], mat_scale(grad, area));
            wsum[v] += area;
        }
    }
    for v in 0..nv {
        if wsum[v] > 0.0 {
            acc[v] = mat_scale(acc[v], 1.0 / wsum[v]);
        }
    }
    acc
}

/// Elementwise P1 gradient of a nodal field on one triangle.
pub fn element_gradient(mesh: &Mesh, t: usize, field: &[V2]) -> M2 {
    let (_, g) = mesh.p1_gradients(t);
    let tri = mesh.triangles()[t];
    let mut grad = ZERO_M2;
    for (l, &v) in tri.iter().enumerate() {
        grad = mat_add(grad, outer(field[v], g[l]));
    }
    grad
}

/// Boundary differential-geometry data for a direction field and a scalar
/// threshold expression, per boundary loop position.
#[derive(Debug, Clone)]
pub struct BoundaryCalculus {
    pub div_tau: Vec<f64>,
    pub grad_theta_tau_tau: Vec<f64>,
    pub grad_theta_tau_n: Vec<f64>,
    pub dtau_theta_tau_n: Vec<f64>,
    pub theta_n: Vec<f64>,
    pub grad_g_theta: Vec<f64>,
    pub dn_g: Vec<f64>,
}

/// Compute [`BoundaryCalculus`]: volume gradients of `theta` are averaged at
/// boundary nodes from adjacent elements; curve derivatives use centered
/// arc-length differences along the boundary polyline; the gradient of `g` is
/// a centered difference with step `1e-6 * diameter`.
pub fn boundary_field_calculus(
    mesh: &Mesh,
    frame: &BoundaryFrame,
    theta: &[V2],
    g: &Expression,
) -> Result<BoundaryCalculus, SolveError> {
    let grads = node_averaged_gradients(mesh, theta);
    let nb = frame.len();
    let step = 1e-6 * mesh.diameter();
    let mut out = BoundaryCalculus {
        div_tau: Vec::with_capacity(nb),
        grad_theta_tau_tau: Vec::with_capacity(nb),
        grad_theta_tau_n: Vec::with_capacity(nb),
        dtau_theta_tau_n: Vec::with_capacity(nb),
        theta_n: Vec::with_capacity(nb),
        grad_g_theta: Vec::with_capacity(nb),
        dn_g: Vec::with_capacity(nb),
    };
    // tangential parts of theta restricted to the boundary polyline
    let theta_tau: Vec<V2> = (0..nb)
        .map(|k| scale(frame.tangent[k], dot(theta[frame.nodes[k]], frame.tangent[k])))
        .collect();
    for k in 0..nb {
        let v = frame.nodes[k];
        let n = frame.normal[k];
        let tau = frame.tangent[k];
        let gm = grads[v];
        let div = trace(gm);
        let gn_n = dot(mv(gm, n), n);
        out.div_tau.push(div - gn_n);
        out.grad_theta_tau_tau.push(dot(mv(gm, tau), tau));
        out.grad_theta_tau_n.push(dot(mv(gm, tau), n));
        // centered arc-length difference of the boundary-restricted field
        let (kp, kn) = (frame.prev(k), frame.next(k));
        let ds = frame.weight[k] * 2.0;
        let d = scale(sub(theta_tau[kn], theta_tau[kp]), 1.0 / ds);
        out.dtau_theta_tau_n.push(dot(d, n));
        out.theta_n.push(dot(theta[v], n));
        let p = mesh.vertex(v);
        let grad_g = expr::gradient_fd(g, p[0], p[1], step)?;
        out.grad_g_theta.push(dot(grad_g, theta[v]));
        out.dn_g.push(dot(grad_g, n));
    }
    Ok(out)
}

/// Write the operator in MatrixMarket coordinate format (lower triangle).
pub fn export_matrix_market(op: &BlockMat, path: &Path) -> std::io::Result<()> {
    let mut buf = String::new();
    buf.push_str("%%MatrixMarket matrix coordinate real symmetric\n");
    let mut entries = Vec::new();
    for i in 0..op.n {
        for k in op.row_ptr[i]..op.row_ptr[i + 1] {
            let j = op.col_idx[k];
            for a in 0..2 {
                for b in 0..2 {
                    let (r, c) = (2 * i + a, 2 * j + b);
                    if r >= c && op.blocks[k][a][b] != 0.0 {
                        entries.push((r + 1, c + 1, op.blocks[k][a][b]));
                    }
                }
            }
        }
    }
    entries.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    buf.push_str(&format!("{} {} {}\n", 2 * op.n, 2 * op.n, entries.len()));
    for (r, c, v) in entries {
        buf.push_str(&format!("{} {} {:.16e}\n", r, c, v));
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(buf.as_bytes())?;
    }
    std::fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{rectangle_mesh, Side};

    fn unit_square(n: usize) -> Mesh {
        rectangle_mesh(n, n, 1.0, 1.0, &[Side::Left]).unwrap()
    }

    #[test]
    fn stiffness_kernel_contains_rigid_modes() {
        let m = unit_square(4);
        let k = assemble_elasticity(&m, 0.7, 0.3).unwrap();
        assert!(k.symmetry_defect() < 1e-12);
        let translations = [
            VectorField::from_fn(&m, |_| [1.0, 0.0]),
            VectorField::from_fn(&m, |_| [0.0, 1.0]),
            VectorField::from_fn(&m, |p| [-p[1], p[0]]),
        ];
        for v in &translations {
            let kv = k.apply(v.values());
            let max = kv.iter().map(|x| norm(*x)).fold(0.0, f64::max);
            assert!(max < 1e-12, "rigid mode not in kernel: {max}");
        }
    }

    #[test]
    fn positive_on_non_rigid_fields() {
        use rand::Rng;
        use rand::SeedableRng;
        let m = unit_square(3);
        let k = assemble_elasticity(&m, 0.5, 0.2).unwrap();
        let rigid = [
            VectorField::from_fn(&m, |_| [1.0, 0.0]).values().to_vec(),
            VectorField::from_fn(&m, |_| [0.0, 1.0]).values().to_vec(),
            VectorField::from_fn(&m, |p| [-p[1], p[0]]).values().to_vec(),
        ];
        let ip = |a: &[V2], b: &[V2]| -> f64 { a.iter().zip(b).map(|(x, y)| dot(*x, *y)).sum() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut v: Vec<V2> = (0..m.num_vertices())
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            // Gram-Schmidt against the rigid space
            for r in &rigid {
                let c = ip(&v, r) / ip(r, r);
                for (vi, ri) in v.iter_mut().zip(r) {
                    *vi = axpy(*vi, -c, *ri);
                }
            }
            let q = k.quadratic_form(&v);
            let nv = ip(&v, &v);
            assert!(q > 1e-10 * nv, "quadratic form {q} on field of norm {nv}");
        }
    }

    #[test]
    fn shear_energy_on_unit_square() {
        // v = (x, 0), mu = 0.5, lambda = 0: A e(v) = e(v), energy = area = 1
        let m = unit_square(4);
        let k = assemble_elasticity(&m, 0.5, 0.0).unwrap();
        let v = VectorField::from_fn(&m, |p| [p[0], 0.0]);
        assert!((k.quadratic_form(v.values()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn load_partition_of_unity() {
        let m = unit_square(5);
        let f = [
            crate::expr::parse_expression("1").unwrap(),
            crate::expr::parse_expression("0").unwrap(),
        ];
        let rhs = assemble_load(&m, &f).unwrap();
        let total: f64 = rhs.iter().map(|v| v[0]).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let zero = [
            crate::expr::parse_expression("0").unwrap(),
            crate::expr::parse_expression("0").unwrap(),
        ];
        let rhs0 = assemble_load(&m, &zero).unwrap();
        assert!(rhs0.iter().all(|v| v == &[0.0, 0.0]));
    }

    #[test]
    fn load_matches_refined_quadrature() {
        // total load = integral of f, compared against a subdivided midpoint rule
        let m = crate::mesh::generate_ellipse_mesh(
            1.1,
            1.0 / 1.1,
            0.1,
            &[(2.0 * std::f64::consts::PI / 3.0, 4.0 * std::f64::consts::PI / 3.0)],
        )
        .unwrap();
        let f = [
            crate::expr::parse_expression("-5*x*exp(x)").unwrap(),
            crate::expr::parse_expression("0.6*exp(x^2)").unwrap(),
        ];
        let rhs = assemble_load(&m, &f).unwrap();
        let total = rhs.iter().fold([0.0, 0.0], |acc, v| add(acc, *v));
        // refined oracle: split each triangle in 4, same rule
        let mut refined = [0.0, 0.0];
        for t in 0..m.num_triangles() {
            let tri = m.triangles()[t];
            let p = [m.vertex(tri[0]), m.vertex(tri[1]), m.vertex(tri[2])];
            let mids = [
                scale(add(p[1], p[2]), 0.5),
                scale(add(p[2], p[0]), 0.5),
                scale(add(p[0], p[1]), 0.5),
            ];
            let subs = [
                [p[0], mids[2], mids[1]],
                [mids[2], p[1], mids[0]],
                [mids[1], mids[0], p[2]],
                [mids[0], mids[1], mids[2]],
            ];
            for s in subs {
                let area = 0.5 * cross(sub(s[1], s[0]), sub(s[2], s[0])).abs();
                for k in 0..3 {
                    let mid = scale(add(s[(k + 1) % 3], s[(k + 2) % 3]), 0.5);
                    refined = axpy(refined, area / 3.0, eval_force(&f, mid).unwrap());
                }
            }
        }
        let rel = norm(sub(total, refined)) / norm(refined);
        assert!(rel < 1e-3, "total load off by {rel}");
        assert!(total.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn h1_metric_values() {
        let m = unit_square(4);
        let h = assemble_h1_metric(&m);
        assert!(h.symmetry_defect() < 1e-12);
        let c = VectorField::from_fn(&m, |_| [0.3, -0.4]);
        assert!((h.quadratic_form(c.values()) - 0.25).abs() < 1e-12);
        let v = VectorField::from_fn(&m, |p| [p[0], 0.0]);
        assert!((h.quadratic_form(v.values()) - (1.0 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn h1_metric_positive_definite_small_mesh() {
        // 3-triangle fan
        let m = crate::mesh::polygon_fan_mesh(
            &[[0.0, 0.0], [1.0, 0.0], [0.8, 0.9]],
            BoundaryTag::Tresca,
        )
        .unwrap();
        let h = assemble_h1_metric(&m);
        let sys = SparseSystem::new(&m, h);
        // dense factorization succeeds iff SPD
        assert!(solve_constrained_dense(&sys).is_ok());
    }

    #[test]
    fn cg_recovers_known_solution() {
        let m = unit_square(4);
        let h = assemble_h1_metric(&m);
        let w = VectorField::from_fn(&m, |p| [p[0] * p[1], p[1] - 0.3 * p[0]]);
        let rhs = h.apply(w.values());
        let mut sys = SparseSystem::new(&m, h);
        sys.rhs = rhs;
        let x = solve_constrained(&sys, 1e-12, 10_000, None).unwrap();
        let err: f64 = x
            .values()
            .iter()
            .zip(w.values())
            .map(|(a, b)| norm(sub(*a, *b)))
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "recovery error {err}");
    }

    #[test]
    fn full_dirichlet_returns_prescribed_values() {
        let m = unit_square(2);
        let k = assemble_elasticity(&m, 1.0, 0.5).unwrap();
        let mut sys = SparseSystem::new(&m, k);
        for v in 0..m.num_vertices() {
            sys.constraints.push(Constraint::Component { node: v, comp: 0, value: 0.25 });
            sys.constraints.push(Constraint::Component { node: v, comp: 1, value: -0.5 });
        }
        let x = solve_constrained(&sys, 1e-12, 100, None).unwrap();
        for v in x.values() {
            assert_eq!(*v, [0.25, -0.5]);
        }
    }

    #[test]
    fn clamped_square_matches_dense_solve() {
        let m = unit_square(4); // 25 nodes, 50 dofs
        let k = assemble_elasticity(&m, 0.5, 0.0).unwrap();
        let f = [
            crate::expr::parse_expression("0").unwrap(),
            crate::expr::parse_expression("-1").unwrap(),
        ];
        let mut sys = SparseSystem::new(&m, k);
        sys.rhs = assemble_load(&m, &f).unwrap();
        for v in m.dirichlet_nodes() {
            sys.constraints.extend(Constraint::fix_node(v));
        }
        let cg = solve_constrained(&sys, 1e-12, 20_000, None).unwrap();
        let dense = solve_constrained_dense(&sys).unwrap();
        let err = cg
            .values()
            .iter()
            .zip(dense.values())
            .map(|(a, b)| norm(sub(*a, *b)))
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "cg vs dense differ by {err}");
    }

    #[test]
    fn conflicting_constraints_rejected() {
        let m = unit_square(2);
        let k = assemble_elasticity(&m, 1.0, 0.0).unwrap();
        let mut sys = SparseSystem::new(&m, k);
        sys.constraints.push(Constraint::Component { node: 0, comp: 0, value: 0.0 });
        sys.constraints.push(Constraint::Component { node: 0, comp: 0, value: 1.0 });
        assert!(matches!(
            solve_constrained(&sys, 1e-10, 100, None),
            Err(SolveError::Constraints(_))
        ));
    }

    #[test]
    fn directional_constraint_is_exact() {
        let m = unit_square(3);
        let k = assemble_elasticity(&m, 0.5, 0.1).unwrap();
        let f = [
            crate::expr::parse_expression("1").unwrap(),
            crate::expr::parse_expression("-1").unwrap(),
        ];
        let mut sys = SparseSystem::new(&m, k);
        sys.rhs = assemble_load(&m, &f).unwrap();
        for v in m.dirichlet_nodes() {
            sys.constraints.extend(Constraint::fix_node(v));
        }
        let dir = normalize([1.0, 2.0]);
        let node = m.tresca_nodes()[0];
        sys.constraints.push(Constraint::Directional { node, dir, value: 0.125 });
        let x = solve_constrained(&sys, 1e-12, 20_000, None).unwrap();
        assert!((dot(x.values()[node], dir) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn traction_recovery_matches_imposed_neumann_data() {
        // clamp the left edge, pull the right edge with a uniform traction
        let m = rectangle_mesh(8, 8, 1.0, 1.0, &[Side::Left]).unwrap();
        let frame = boundary_frame(&m);
        let k = assemble_elasticity(&m, 0.5, 0.3).unwrap();
        let imposed = [0.2, 0.05];
        let mut sys = SparseSystem::new(&m, k.clone());
        for (kpos, &v) in frame.nodes.iter().enumerate() {
            let p = m.vertex(v);
            if (p[0] - 1.0).abs() < 1e-12 {
                sys.rhs[v] = axpy(sys.rhs[v], frame.weight[kpos], imposed);
            }
        }
        for v in m.dirichlet_nodes() {
            sys.constraints.extend(Constraint::fix_node(v));
        }
        let u = solve_constrained(&sys, 1e-12, 40_000, None).unwrap();
        let zero_load = vec![[0.0, 0.0]; m.num_vertices()];
        let tr = traction_from_residual(&m, &k, u.values(), &zero_load, &frame);
        for (i, &v) in tr.nodes.iter().enumerate() {
            let p = m.vertex(v);
            // interior nodes of the right edge
            if (p[0] - 1.0).abs() < 1e-12 && p[1] > 0.2 && p[1] < 0.8 {
                let got = add(
                    scale(frame.normal[tr.positions[i]], tr.sigma_n[i]),
                    scale(frame.tangent[tr.positions[i]], tr.s_tau[i]),
                );
                let rel = norm(sub(got, imposed)) / norm(imposed);
                assert!(rel < 0.02, "traction off by {rel} at {p:?}");
            }
        }
    }

    #[test]
    fn global_equilibrium_of_recovered_tractions() {
        let m = rectangle_mesh(6, 6, 1.0, 1.0, &[Side::Left]).unwrap();
        let frame = boundary_frame(&m);
        let k = assemble_elasticity(&m, 0.5, 0.0).unwrap();
        let f = [
            crate::expr::parse_expression("0.3*x").unwrap(),
            crate::expr::parse_expression("-1").unwrap(),
        ];
        let load = assemble_load(&m, &f).unwrap();
        let mut sys = SparseSystem::new(&m, k.clone());
        sys.rhs = load.clone();
        for v in m.dirichlet_nodes() {
            sys.constraints.extend(Constraint::fix_node(v));
        }
        let u = solve_constrained(&sys, 1e-12, 40_000, None).unwrap();
        let tr = boundary_residual_tractions(&k, u.values(), &load, &frame);
        let mut total = [0.0, 0.0];
        for (kpos, t) in tr.iter().enumerate() {
            total = axpy(total, frame.weight[kpos], *t);
        }
        let f_total = load.iter().fold([0.0, 0.0], |acc, v| add(acc, *v));
        let scale_ref = f_total
            .iter()
            .map(|c| c.abs())
            .fold(0.0, f64::max)
            .max(1e-30);
        assert!(
            norm(add(total, f_total)) < 1e-8 * scale_ref,
            "equilibrium defect {:?}",
            add(total, f_total)
        );
    }

    #[test]
    fn zero_displacement_zero_tractions() {
        let m = rectangle_mesh(4, 4, 1.0, 1.0, &[Side::Left]).unwrap();
        let u = VectorField::zeros(&m);
        let load = vec![[0.0, 0.0]; m.num_vertices()];
        let tr = boundary_traction(&m, &u, 0.5, 0.0, &load).unwrap();
        assert!(tr.sigma_n.iter().all(|v| v.abs() < 1e-15));
        assert!(tr.s_tau.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn solver_is_deterministic() {
        let m = unit_square(5);
        let k = assemble_elasticity(&m, 0.5, 0.2).unwrap();
        let f = [
            crate::expr::parse_expression("sin(x*3)").unwrap(),
            crate::expr::parse_expression("cos(y*2)").unwrap(),
        ];
        let mut sys = SparseSystem::new(&m, k);
        sys.rhs = assemble_load(&m, &f).unwrap();
        for v in m.dirichlet_nodes() {
            sys.constraints.extend(Constraint::fix_node(v));
        }
        let a = solve_constrained(&sys, 1e-11, 20_000, None).unwrap();
        let b = solve_constrained(&sys, 1e-11, 20_000, None).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn boundary_calculus_trivial_and_radial() {
        // constant theta: all volume-gradient quantities vanish
        let m = unit_square(4);
        let frame = boundary_frame(&m);
        let theta = vec![[0.7, -0.3]; m.num_vertices()];
        let g = crate::expr::parse_expression("1").unwrap();
        let bc = boundary_field_calculus(&m, &frame, &theta, &g).unwrap();
        for k in 0..frame.len() {
            assert!(bc.div_tau[k].abs() < 1e-10);
            assert!(bc.grad_theta_tau_tau[k].abs() < 1e-10);
            assert!(bc.grad_theta_tau_n[k].abs() < 1e-10);
        }

        // radial identity field on a circle: tangential divergence is 1
        let n = 100;
        let pts: Vec<V2> = (0..n)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                [t.cos(), t.sin()]
            })
            .collect();
        let mc = crate::mesh::polygon_fan_mesh(&pts, BoundaryTag::Tresca).unwrap();
        let fc = boundary_frame(&mc);
        let theta: Vec<V2> = mc.vertices().to_vec();
        let bcc = boundary_field_calculus(&mc, &fc, &theta, &g).unwrap();
        for k in 0..fc.len() {
            assert!((bcc.div_tau[k] - 1.0).abs() < 0.05, "div_tau {}", bcc.div_tau[k]);
        }
    }

    #[test]
    fn normal_derivative_of_threshold_on_ellipse() {
        let (a, b) = (1.1, 1.0 / 1.1);
        let m = crate::mesh::generate_ellipse_mesh(
            a,
            b,
            0.05,
            &[(2.0 * std::f64::consts::PI / 3.0, 4.0 * std::f64::consts::PI / 3.0),
              (5.0 * std::f64::consts::PI / 3.0, 7.0 * std::f64::consts::PI / 3.0)],
        )
        .unwrap();
        let frame = boundary_frame(&m);
        let g = crate::expr::parse_expression("1+sin(-y*pi/2)+1e-3").unwrap();
        let theta = vec![[0.0, 0.0]; m.num_vertices()];
        let bc = boundary_field_calculus(&m, &frame, &theta, &g).unwrap();
        // find the node closest to (0, -b): its normal is (0, -1) up to O(h^2)
        let (kbest, _) = frame
            .nodes
            .iter()
            .enumerate()
            .map(|(k, &v)| (k, norm(sub(m.vertex(v), [0.0, -b]))))
            .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        let y = m.vertex(frame.nodes[kbest])[1];
        let grad_y = -(std::f64::consts::PI / 2.0) * (y * std::f64::consts::PI / 2.0).cos();
        let analytic = grad_y * frame.normal[kbest][1];
        assert!(
            (bc.dn_g[kbest] - analytic).abs() < 1e-4,
            "dn_g {} vs analytic {analytic}",
            bc.dn_g[kbest]
        );
    }

    #[test]
    fn matrix_market_export_header() {
        let m = unit_square(2);
        let k = assemble_elasticity(&m, 1.0, 0.0).unwrap();
        let dir = std::env::temp_dir().join("tresca2d_mm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("k.mtx");
        export_matrix_market(&k, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("%%MatrixMarket matrix coordinate real symmetric\n"));
    }
}
