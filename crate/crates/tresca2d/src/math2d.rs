//! Small fixed-size vector/matrix helpers shared by the geometry and FEM kernels.
//!
//! Vectors are `[f64; 2]`, matrices are row-major `[[f64; 2]; 2]` so that for a
//! Jacobian `m`, `m[i][j]` is the derivative of component `i` along coordinate `j`.

pub type V2 = [f64; 2];
pub type M2 = [[f64; 2]; 2];

pub const ZERO_M2: M2 = [[0.0, 0.0], [0.0, 0.0]];

#[inline]
pub fn dot(a: V2, b: V2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn sub(a: V2, b: V2) -> V2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn add(a: V2, b: V2) -> V2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn scale(a: V2, s: f64) -> V2 {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn axpy(y: V2, alpha: f64, x: V2) -> V2 {
    [y[0] + alpha * x[0], y[1] + alpha * x[1]]
}

#[inline]
pub fn norm(a: V2) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: V2) -> V2 {
    let n = norm(a);
    [a[0] / n, a[1] / n]
}

/// Rotate by +90 degrees (counterclockwise).
#[inline]
pub fn perp_ccw(a: V2) -> V2 {
    [-a[1], a[0]]
}

/// Rotate by -90 degrees (clockwise).
#[inline]
pub fn perp_cw(a: V2) -> V2 {
    [a[1], -a[0]]
}

#[inline]
pub fn cross(a: V2, b: V2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Matrix-vector product `m v`.
#[inline]
pub fn mv(m: M2, v: V2) -> V2 {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Transposed matrix-vector product `m^T v`.
#[inline]
pub fn mtv(m: M2, v: V2) -> V2 {
    [m[0][0] * v[0] + m[1][0] * v[1], m[0][1] * v[0] + m[1][1] * v[1]]
}

/// Matrix product `a b`.
#[inline]
pub fn mm(a: M2, b: M2) -> M2 {
    let mut c = ZERO_M2;
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

#[inline]
pub fn transpose(m: M2) -> M2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

#[inline]
pub fn trace(m: M2) -> f64 {
    m[0][0] + m[1][1]
}

/// Outer product `a b^T`.
#[inline]
pub fn outer(a: V2, b: V2) -> M2 {
    [[a[0] * b[0], a[0] * b[1]], [a[1] * b[0], a[1] * b[1]]]
}

#[inline]
pub fn sym(m: M2) -> M2 {
    [
        [m[0][0], 0.5 * (m[0][1] + m[1][0])],
        [0.5 * (m[0][1] + m[1][0]), m[1][1]],
    ]
}

#[inline]
pub fn mat_add(a: M2, b: M2) -> M2 {
    [
        [a[0][0] + b[0][0], a[0][1] + b[0][1]],
        [a[1][0] + b[1][0], a[1][1] + b[1][1]],
    ]
}

#[inline]
pub fn mat_scale(a: M2, s: f64) -> M2 {
    [[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]]
}

/// Double contraction `a : b`.
#[inline]
pub fn ddot(a: M2, b: M2) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

/// Row `i` of `m` as a vector.
#[inline]
pub fn row(m: M2, i: usize) -> V2 {
    m[i]
}

/// Isotropic stress map `v -> 2 mu sym(v) + lambda tr(v) I` applied to a matrix.
#[inline]
pub fn isotropic_stress(mu: f64, lambda: f64, grad: M2) -> M2 {
    let e = sym(grad);
    let t = lambda * trace(grad);
    [
        [2.0 * mu * e[0][0] + t, 2.0 * mu * e[0][1]],
        [2.0 * mu * e[1][0], 2.0 * mu * e[1][1] + t],
    ]
}
