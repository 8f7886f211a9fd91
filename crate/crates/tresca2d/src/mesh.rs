//! Triangular meshes of 2D domains with a tagged boundary.
//!
//! A [`Mesh`] is an immutable value: vertices, positively oriented triangles,
//! and a closed counterclockwise loop of boundary edges, each tagged as
//! clamped (`Dirichlet`) or frictional (`Tresca`). Operations return new
//! meshes; nothing is mutated in place.
//!
//! The boundary frame ([`BoundaryFrame`]) carries per-node outward normals,
//! counterclockwise unit tangents, lumped arc-length weights and the discrete
//! curvature (turning angle per unit length, positive on convex boundaries).

use crate::delaunay;
use crate::math2d::*;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    Dirichlet,
    Tresca,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryEdge {
    pub a: usize,
    pub b: usize,
    pub tag: BoundaryTag,
}

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("triangle {triangle} inverts during deformation; largest admissible step {t_max:.6e}")]
    Inverted { triangle: usize, t_max: f64 },
    #[error("deformation moves a Dirichlet node (node {0})")]
    DirichletMoved(usize),
    #[error(transparent)]
    Triangulation(#[from] delaunay::TriangulationError),
}

static MESH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct Mesh {
    id: u64,
    vertices: Vec<V2>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    /// Vertex ids along the boundary loop, counterclockwise; edge `k` joins
    /// `boundary_loop[k]` to `boundary_loop[(k+1) % nb]`.
    boundary_loop: Vec<usize>,
    /// Per-vertex tag; a node touching both tags is Dirichlet.
    node_tag: Vec<Option<BoundaryTag>>,
}

impl Mesh {
    /// Build a mesh from raw parts, validating orientation, the boundary loop
    /// and edge/triangle incidence. Triangles are reoriented ccw if needed.
    pub fn from_parts(
        vertices: Vec<V2>,
        mut triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Result<Self, MeshError> {
        let nv = vertices.len();
        for t in triangles.iter_mut() {
            if t.iter().any(|&v| v >= nv) {
                return Err(MeshError::Invalid("triangle vertex out of range".into()));
            }
            let a = signed_area(&vertices, *t);
            if a < 0.0 {
                t.swap(1, 2);
            }
            if signed_area(&vertices, *t) <= 0.0 {
                return Err(MeshError::Invalid(format!(
                    "degenerate triangle {:?} (area {:.3e})",
                    t,
                    signed_area(&vertices, *t)
                )));
            }
        }

        // Each boundary edge must occur in exactly one triangle, with the
        // interior on its left (ccw loop).
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for (ti, t) in triangles.iter().enumerate() {
            for k in 0..3 {
                directed.insert((t[k], t[(k + 1) % 3]), ti);
            }
        }
        for e in &boundary_edges {
            let fwd = directed.contains_key(&(e.a, e.b));
            let bwd = directed.contains_key(&(e.b, e.a));
            if !fwd || bwd {
                return Err(MeshError::Invalid(format!(
                    "boundary edge ({}, {}) is not a single-triangle ccw edge",
                    e.a, e.b
                )));
            }
        }

        // Chain the edges into one closed simple loop.
        let mut next: HashMap<usize, (usize, usize)> = HashMap::new();
        for (k, e) in boundary_edges.iter().enumerate() {
            if next.insert(e.a, (e.b, k)).is_some() {
                return Err(MeshError::Invalid(format!(
                    "boundary is not a simple curve: node {} has two outgoing edges",
                    e.a
                )));
            }
        }
        let start = boundary_edges
            .first()
            .ok_or_else(|| MeshError::Invalid("mesh has no boundary edges".into()))?
            .a;
        let mut boundary_loop = vec![start];
        let mut edge_order = Vec::with_capacity(boundary_edges.len());
        let mut cur = start;
        loop {
            let Some(&(nxt, k)) = next.get(&cur) else {
                return Err(MeshError::Invalid("boundary loop is not closed".into()));
            };
            edge_order.push(k);
            if nxt == start {
                break;
            }
            boundary_loop.push(nxt);
            cur = nxt;
        }
        if edge_order.len() != boundary_edges.len() {
            return Err(MeshError::Invalid(
                "boundary edges form more than one loop".into(),
            ));
        }
        let boundary_edges: Vec<BoundaryEdge> =
            edge_order.iter().map(|&k| boundary_edges[k]).collect();

        let mut node_tag: Vec<Option<BoundaryTag>> = vec![None; nv];
        for e in &boundary_edges {
            for v in [e.a, e.b] {
                node_tag[v] = Some(match (node_tag[v], e.tag) {
                    (Some(BoundaryTag::Dirichlet), _) | (_, BoundaryTag::Dirichlet) => {
                        BoundaryTag::Dirichlet
                    }
                    _ => BoundaryTag::Tresca,
                });
            }
        }

        Ok(Mesh {
            id: MESH_ID.fetch_add(1, Ordering::Relaxed),
            vertices,
            triangles,
            boundary_edges,
            boundary_loop,
            node_tag,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }
    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }
    pub fn vertices(&self) -> &[V2] {
        &self.vertices
    }
    pub fn vertex(&self, i: usize) -> V2 {
        self.vertices[i]
    }
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }
    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }
    pub fn boundary_loop(&self) -> &[usize] {
        &self.boundary_loop
    }
    pub fn node_tag(&self, v: usize) -> Option<BoundaryTag> {
        self.node_tag[v]
    }

    pub fn dirichlet_nodes(&self) -> Vec<usize> {
        (0..self.num_vertices())
            .filter(|&v| self.node_tag[v] == Some(BoundaryTag::Dirichlet))
            .collect()
    }

    pub fn tresca_nodes(&self) -> Vec<usize> {
        (0..self.num_vertices())
            .filter(|&v| self.node_tag[v] == Some(BoundaryTag::Tresca))
            .collect()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        signed_area(&self.vertices, self.triangles[t])
    }

    /// Per-element P1 basis gradients and area: returns (area, [g0, g1, g2]).
    pub fn p1_gradients(&self, t: usize) -> (f64, [V2; 3]) {
        let [i, j, k] = self.triangles[t];
        let (p0, p1, p2) = (self.vertices[i], self.vertices[j], self.vertices[k]);
        let a2 = cross(sub(p1, p0), sub(p2, p0));
        let inv = 1.0 / a2;
        let g0 = [(p1[1] - p2[1]) * inv, (p2[0] - p1[0]) * inv];
        let g1 = [(p2[1] - p0[1]) * inv, (p0[0] - p2[0]) * inv];
        let g2 = [(p0[1] - p1[1]) * inv, (p1[0] - p0[0]) * inv];
        (0.5 * a2, [g0, g1, g2])
    }

    pub fn diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.vertices {
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        norm(sub(hi, lo))
    }
}

fn signed_area(vertices: &[V2], t: [usize; 3]) -> f64 {
    0.5 * cross(
        sub(vertices[t[1]], vertices[t[0]]),
        sub(vertices[t[2]], vertices[t[0]]),
    )
}

/// Exact polygonal area: sum of triangle areas.
pub fn area(mesh: &Mesh) -> f64 {
    (0..mesh.num_triangles())
        .map(|t| mesh.triangle_area(t))
        .sum()
}

/// Minimum interior angle (radians) and maximum aspect ratio
/// (circumradius / (2 inradius); 1 for equilateral).
pub fn mesh_quality(mesh: &Mesh) -> (f64, f64) {
    let mut min_angle = f64::INFINITY;
    let mut max_aspect: f64 = 0.0;
    for t in mesh.triangles() {
        let p = [mesh.vertex(t[0]), mesh.vertex(t[1]), mesh.vertex(t[2])];
        let l = [
            norm(sub(p[2], p[1])),
            norm(sub(p[0], p[2])),
            norm(sub(p[1], p[0])),
        ];
        let area = 0.5 * cross(sub(p[1], p[0]), sub(p[2], p[0]));
        for k in 0..3 {
            let u = sub(p[(k + 1) % 3], p[k]);
            let v = sub(p[(k + 2) % 3], p[k]);
            let ang = cross(u, v).atan2(dot(u, v));
            min_angle = min_angle.min(ang.abs());
        }
        let s = 0.5 * (l[0] + l[1] + l[2]);
        let inradius = area / s;
        let circumradius = l[0] * l[1] * l[2] / (4.0 * area);
        max_aspect = max_aspect.max(circumradius / (2.0 * inradius));
    }
    (min_angle, max_aspect)
}

/// Geometry of the boundary loop: per boundary node (in loop order) the unit
/// outward normal, the counterclockwise unit tangent, the lumped arc-length
/// weight and the discrete mean curvature.
#[derive(Debug, Clone)]
pub struct BoundaryFrame {
    /// Vertex ids in ccw loop order.
    pub nodes: Vec<usize>,
    pub normal: Vec<V2>,
    pub tangent: Vec<V2>,
    pub weight: Vec<f64>,
    pub curvature: Vec<f64>,
    /// Loop position of each vertex (usize::MAX for interior vertices).
    pos_of_vertex: Vec<usize>,
}

impl BoundaryFrame {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn position(&self, vertex: usize) -> Option<usize> {
        let p = self.pos_of_vertex[vertex];
        (p != usize::MAX).then_some(p)
    }
    pub fn prev(&self, pos: usize) -> usize {
        (pos + self.len() - 1) % self.len()
    }
    pub fn next(&self, pos: usize) -> usize {
        (pos + 1) % self.len()
    }
    pub fn perimeter(&self) -> f64 {
        self.weight.iter().sum()
    }
}

/// Build the [`BoundaryFrame`] of a mesh.
///
/// The node normal is the renormalized average of the two adjacent edge
/// outward normals; the tangent is the normal rotated so it points along the
/// counterclockwise loop; the curvature is the turning angle at the node
/// divided by the average adjacent edge length (positive when convex).
pub fn boundary_frame(mesh: &Mesh) -> BoundaryFrame {
    let loop_nodes = mesh.boundary_loop().to_vec();
    let nb = loop_nodes.len();
    let mut normal = Vec::with_capacity(nb);
    let mut tangent = Vec::with_capacity(nb);
    let mut weight = Vec::with_capacity(nb);
    let mut curvature = Vec::with_capacity(nb);
    let mut pos_of_vertex = vec![usize::MAX; mesh.num_vertices()];

    for (k, &v) in loop_nodes.iter().enumerate() {
        pos_of_vertex[v] = k;
        let prev = loop_nodes[(k + nb - 1) % nb];
        let next = loop_nodes[(k + 1) % nb];
        let e_prev = sub(mesh.vertex(v), mesh.vertex(prev));
        let e_next = sub(mesh.vertex(next), mesh.vertex(v));
        let l_prev = norm(e_prev);
        let l_next = norm(e_next);
        let d_prev = scale(e_prev, 1.0 / l_prev);
        let d_next = scale(e_next, 1.0 / l_next);
        // Outward normal of a ccw-directed edge is the direction rotated -90.
        let n = normalize(add(perp_cw(d_prev), perp_cw(d_next)));
        normal.push(n);
        tangent.push(perp_ccw(n));
        weight.push(0.5 * (l_prev + l_next));
        let turn = cross(d_prev, d_next).atan2(dot(d_prev, d_next));
        curvature.push(turn / (0.5 * (l_prev + l_next)));
    }

    BoundaryFrame {
        nodes: loop_nodes,
        normal,
        tangent,
        weight,
        curvature,
        pos_of_vertex,
    }
}

/// Per-boundary-node discrete mean curvature, in loop order.
pub fn mean_curvature(mesh: &Mesh) -> Vec<f64> {
    boundary_frame(mesh).curvature
}

/// Move vertices to `x + t theta(x)`. Connectivity and tags are preserved.
/// Fails if any triangle inverts, reporting the largest admissible step
/// found by bisection.
pub fn deform(mesh: &Mesh, theta: &[V2], t: f64) -> Result<Mesh, MeshError> {
    assert_eq!(theta.len(), mesh.num_vertices(), "theta size mismatch");
    let scale_ref = mesh.diameter().max(1e-300);
    for &v in &mesh.dirichlet_nodes() {
        if norm(theta[v]) > 1e-12 * scale_ref {
            return Err(MeshError::DirichletMoved(v));
        }
    }
    let moved = |s: f64| -> Vec<V2> {
        mesh.vertices()
            .iter()
            .zip(theta)
            .map(|(&p, &d)| axpy(p, s, d))
            .collect()
    };
    let all_positive = |vs: &[V2]| -> Option<usize> {
        mesh.triangles()
            .iter()
            .position(|&tr| signed_area(vs, tr) <= 0.0)
    };
    let vertices = moved(t);
    if let Some(bad) = all_positive(&vertices) {
        // bisect for the largest valid step
        let (mut lo, mut hi) = (0.0f64, t);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if all_positive(&moved(mid)).is_none() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return Err(MeshError::Inverted {
            triangle: bad,
            t_max: lo,
        });
    }
    let mut out = mesh.clone();
    out.vertices = vertices;
    out.id = MESH_ID.fetch_add(1, Ordering::Relaxed);
    Ok(out)
}

/// Ellipse `x = a cos(g), y = b sin(g)` meshed at target edge length `h`,
/// with boundary arcs (radians) tagged Dirichlet and the rest Tresca.
pub fn generate_ellipse_mesh(
    a: f64,
    b: f64,
    h: f64,
    dirichlet_arcs: &[(f64, f64)],
) -> Result<Mesh, MeshError> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(MeshError::Config("semi-axes must be positive".into()));
    }
    if !(h > 0.0 && h < a.min(b)) {
        return Err(MeshError::Config(format!(
            "target edge length h={h} must satisfy 0 < h < min(a, b)"
        )));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    // Normalize arcs into [0, 2pi) segments (splitting wrap-around arcs).
    let mut segments: Vec<(f64, f64)> = Vec::new();
    for &(lo, hi) in dirichlet_arcs {
        if !(hi > lo) || hi - lo > two_pi + 1e-12 {
            return Err(MeshError::Config(format!("bad arc [{lo}, {hi}]")));
        }
        let lo_n = lo.rem_euclid(two_pi);
        let span = hi - lo;
        if lo_n + span <= two_pi + 1e-12 {
            segments.push((lo_n, (lo_n + span).min(two_pi)));
        } else {
            segments.push((lo_n, two_pi));
            segments.push((0.0, lo_n + span - two_pi));
        }
    }
    segments.sort_by(|x, y| x.partial_cmp(y).unwrap());
    // merge overlapping segments
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for s in segments {
        match merged.last_mut() {
            Some(last) if s.0 <= last.1 + 1e-12 => last.1 = last.1.max(s.1),
            _ => merged.push(s),
        }
    }
    if merged.is_empty() {
        return Err(MeshError::Config("empty Dirichlet boundary".into()));
    }
    let dirichlet_len: f64 = merged.iter().map(|s| s.1 - s.0).sum();
    if dirichlet_len >= two_pi - 1e-9 {
        return Err(MeshError::Config("empty Tresca boundary".into()));
    }

    // Breakpoints: segment endpoints (plus the parameter seam).
    let mut breaks: Vec<f64> = vec![0.0];
    for &(lo, hi) in &merged {
        breaks.push(lo);
        if hi < two_pi - 1e-12 {
            breaks.push(hi);
        }
    }
    breaks.sort_by(|x, y| x.partial_cmp(y).unwrap());
    breaks.dedup_by(|x, y| (*x - *y).abs() < 1e-12);

    let speed = |g: f64| -> f64 { ((a * g.sin()).powi(2) + (b * g.cos()).powi(2)).sqrt() };
    let in_dirichlet = |g: f64| -> bool { merged.iter().any(|&(lo, hi)| g >= lo - 1e-12 && g <= hi + 1e-12) };

    // Sample each parameter interval at equal arc-length increments.
    let mut params: Vec<f64> = Vec::new();
    let nb0 = breaks.len();
    for k in 0..nb0 {
        let g0 = breaks[k];
        let g1 = if k + 1 < nb0 { breaks[k + 1] } else { two_pi };
        let steps = 512;
        let mut cum = vec![0.0f64; steps + 1];
        for s in 0..steps {
            let ga = g0 + (g1 - g0) * s as f64 / steps as f64;
            let gb = g0 + (g1 - g0) * (s + 1) as f64 / steps as f64;
            let gm = 0.5 * (ga + gb);
            cum[s + 1] = cum[s] + (gb - ga) / 6.0 * (speed(ga) + 4.0 * speed(gm) + speed(gb));
        }
        let len = cum[steps];
        let nseg = ((len / h).round() as usize).max(1);
        for j in 0..nseg {
            let target = len * j as f64 / nseg as f64;
            let idx = cum.partition_point(|&c| c < target).min(steps);
            let (c0, c1, i0) = if idx == 0 {
                (cum[0], cum[1], 0)
            } else {
                (cum[idx - 1], cum[idx], idx - 1)
            };
            let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.0 };
            params.push(g0 + (g1 - g0) * (i0 as f64 + frac) / steps as f64);
        }
    }

    let boundary_pts: Vec<V2> = params.iter().map(|&g| [a * g.cos(), b * g.sin()]).collect();
    let nb = boundary_pts.len();

    // Interior points on a staggered lattice, kept away from the boundary.
    let mut pts = boundary_pts.clone();
    let dy = h * 3f64.sqrt() / 2.0;
    let ny = (b / dy).ceil() as i64;
    let nx = (a / h).ceil() as i64 + 1;
    for j in -ny..=ny {
        let y = j as f64 * dy;
        let off = if j.rem_euclid(2) == 1 { 0.5 * h } else { 0.0 };
        for i in -nx..=nx {
            let x = i as f64 * h + off;
            let rho = ((x / a).powi(2) + (y / b).powi(2)).sqrt();
            if rho >= 1.0 {
                continue;
            }
            let grad = [x / (a * a), y / (b * b)];
            let gn = norm(grad).max(1e-12 / a.min(b));
            let dist = (1.0 - rho * rho) / (2.0 * gn); // first-order distance estimate
            if dist > 0.55 * h {
                pts.push([x, y]);
            }
        }
    }

    let triangles = delaunay::triangulate(&pts)?;
    let boundary_edges: Vec<BoundaryEdge> = (0..nb)
        .map(|k| {
            let g_mid = {
                let g0 = params[k];
                let g1 = if k + 1 < nb { params[k + 1] } else { two_pi };
                0.5 * (g0 + g1)
            };
            BoundaryEdge {
                a: k,
                b: (k + 1) % nb,
                tag: if in_dirichlet(g_mid) {
                    BoundaryTag::Dirichlet
                } else {
                    BoundaryTag::Tresca
                },
            }
        })
        .collect();

    let mesh = Mesh::from_parts(pts, triangles, boundary_edges)?;
    if mesh.dirichlet_nodes().is_empty() || mesh.tresca_nodes().is_empty() {
        return Err(MeshError::Config(
            "boundary tagging produced an empty Dirichlet or Tresca set".into(),
        ));
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

/// Structured triangulation of the rectangle `[0, lx] x [0, ly]` with
/// `nx x ny` cells; edges on `dirichlet_sides` are clamped, the rest are
/// frictional. Used by tests and the built-in oracle comparison.
pub fn rectangle_mesh(
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
    dirichlet_sides: &[Side],
) -> Result<Mesh, MeshError> {
    assert!(nx >= 1 && ny >= 1);
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([lx * i as f64 / nx as f64, ly * j as f64 / ny as f64]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v01, v11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    let tag_for = |s: Side| {
        if dirichlet_sides.contains(&s) {
            BoundaryTag::Dirichlet
        } else {
            BoundaryTag::Tresca
        }
    };
    let mut boundary_edges = Vec::new();
    for i in 0..nx {
        boundary_edges.push(BoundaryEdge { a: id(i, 0), b: id(i + 1, 0), tag: tag_for(Side::Bottom) });
    }
    for j in 0..ny {
        boundary_edges.push(BoundaryEdge { a: id(nx, j), b: id(nx, j + 1), tag: tag_for(Side::Right) });
    }
    for i in (0..nx).rev() {
        boundary_edges.push(BoundaryEdge { a: id(i + 1, ny), b: id(i, ny), tag: tag_for(Side::Top) });
    }
    for j in (0..ny).rev() {
        boundary_edges.push(BoundaryEdge { a: id(0, j + 1), b: id(0, j), tag: tag_for(Side::Left) });
    }
    Mesh::from_parts(vertices, triangles, boundary_edges)
}

/// Convex polygon fan mesh around the centroid; all boundary edges share one
/// tag. Handy for small closed-curve tests (circles without any clamped part).
pub fn polygon_fan_mesh(boundary: &[V2], tag: BoundaryTag) -> Result<Mesh, MeshError> {
    let nb = boundary.len();
    assert!(nb >= 3);
    let mut vertices = boundary.to_vec();
    let centroid = boundary
        .iter()
        .fold([0.0, 0.0], |acc, &p| add(acc, p))
        .map(|c| c / nb as f64);
    vertices.push(centroid);
    let mut triangles = Vec::with_capacity(nb);
    let mut boundary_edges = Vec::with_capacity(nb);
    for k in 0..nb {
        triangles.push([k, (k + 1) % nb, nb]);
        boundary_edges.push(BoundaryEdge { a: k, b: (k + 1) % nb, tag });
    }
    Mesh::from_parts(vertices, triangles, boundary_edges)
}
