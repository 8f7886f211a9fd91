//! Volume-constrained shape-optimization descent loop.
//!
//! Each iteration solves the friction problem, assembles the boundary-form
//! gradient of the energy augmented with the volume multiplier term, builds
//! an H1 descent direction, advances the mesh with a backtracked step
//! (inversion guard, minimum-angle floor, merit decrease), and updates the
//! multiplier by dual ascent on the volume defect. The stopping rule compares
//! the energy across windows of iterations.

use crate::fem::VectorField;
use crate::math2d::*;
use crate::mesh::{area, deform, mesh_quality, BoundaryFrame, BoundaryTag, Mesh, MeshError};
use crate::shape::{boundary_gradient_form, descent_direction, LinearForm, ShapeContext};
use crate::tresca::{solve_tresca_with, ContactState, Discretization, ProblemData, TrescaError};

#[derive(Debug, Clone)]
pub struct OptimConfig {
    /// Target volume, default pi.
    pub target_volume: f64,
    /// Dual ascent rate for the volume multiplier.
    pub uzawa_rate: f64,
    pub multiplier0: f64,
    /// Initial step length.
    pub step0: f64,
    /// Backtracking factor in (0, 1).
    pub step_shrink: f64,
    pub max_outer_iters: usize,
    /// Stopping window length (iterations).
    pub stop_window: usize,
    /// Stopping tolerance on the windowed energy difference.
    pub stop_tol: f64,
    /// Minimum triangle angle accepted during the line step (radians).
    pub min_angle_floor: f64,
    /// Write a mesh snapshot every this many iterations (0 = never).
    pub snapshot_every: usize,
}

impl OptimConfig {
    pub fn defaults_for(h: f64) -> Self {
        OptimConfig {
            target_volume: std::f64::consts::PI,
            uzawa_rate: 1.0,
            multiplier0: 0.0,
            step0: 0.1 * h,
            step_shrink: 0.5,
            max_outer_iters: 120,
            stop_window: 20,
            stop_tol: 1e-4,
            min_angle_floor: 5f64.to_radians(),
            snapshot_every: 0,
        }
    }
}

/// Per-iteration record of the descent loop.
#[derive(Debug, Clone)]
pub struct OptimRecord {
    pub iter: usize,
    pub energy: f64,
    pub volume: f64,
    pub multiplier: f64,
    pub step: f64,
    pub switch_iters: usize,
    pub min_angle: f64,
}

#[derive(Debug, Clone, Default)]
pub struct OptimHistory {
    pub records: Vec<OptimRecord>,
}

impl OptimHistory {
    pub fn energies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.energy).collect()
    }
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error(transparent)]
    Tresca(#[from] TrescaError),
    #[error(transparent)]
    Solve(#[from] crate::fem::SolveError),
    #[error("deformation stalled at iteration {iter}: {source}")]
    Stall {
        iter: usize,
        source: MeshError,
        history: OptimHistory,
    },
}

/// Linear functional `theta -> integral over the boundary of theta . n`,
/// assembled nodally with arc weights and zeroed on clamped nodes (the
/// Hadamard derivative of the volume).
pub fn volume_constraint_gradient(mesh: &Mesh, frame: &BoundaryFrame) -> LinearForm {
    let mut form = LinearForm::zeros(mesh.num_vertices());
    for (k, &v) in frame.nodes.iter().enumerate() {
        if mesh.node_tag(v) == Some(BoundaryTag::Dirichlet) {
            continue;
        }
        form.coeffs[v] = scale(frame.normal[k], frame.weight[k]);
    }
    form
}

/// True at iteration counts that are positive multiples of the window length
/// once two windows exist, when the energy moved less than the tolerance over
/// the last window. `energies` holds one value per completed iteration.
pub fn stopping_check(energies: &[f64], cfg: &OptimConfig) -> bool {
    let k = energies.len();
    let w = cfg.stop_window.max(1);
    if k < 2 * w || k % w != 0 {
        return false;
    }
    (energies[k - 1] - energies[k - 1 - w]).abs() < cfg.stop_tol
}

/// Callback invoked after each accepted iteration with the current mesh and
/// contact state (used for snapshots).
pub type SnapshotFn<'a> = dyn FnMut(usize, &Mesh, &VectorField, &ContactState) + 'a;

/// Run the descent loop. Returns the final mesh and the iteration history.
pub fn run_optimization(
    mesh0: &Mesh,
    pd: &ProblemData,
    cfg: &OptimConfig,
    mut snapshot: Option<&mut SnapshotFn>,
) -> Result<(Mesh, OptimHistory), OptimError> {
    let mut mesh = mesh0.clone();
    let mut multiplier = cfg.multiplier0;
    let mut history = OptimHistory::default();
    let mut warm: Option<ContactState> = None;

    let mut iter = 0usize;
    loop {
        let disc = Discretization::build(&mesh, pd)?;
        let (u, state) = solve_tresca_with(&mesh, pd, &disc, warm.as_ref())?;
        let energy = disc.energy(u.values());
        let volume = area(&mesh);

        if let Some(cb) = snapshot.as_deref_mut() {
            if cfg.snapshot_every > 0 && iter % cfg.snapshot_every == 0 {
                cb(iter, &mesh, &u, &state);
            }
        }

        if iter >= cfg.max_outer_iters {
            break;
        }

        // augmented gradient: energy gradient plus multiplier times the
        // volume-constraint derivative
        let cx = ShapeContext::build(&mesh, pd, &disc, &u, &state)?;
        let mut gradient = boundary_gradient_form(&cx)?.total();
        let vol_grad = volume_constraint_gradient(&mesh, &disc.frame);
        gradient.add_scaled(&vol_grad, multiplier);

        let theta0 = descent_direction(&mesh, &gradient, pd.lin_tol, pd.lin_max_iter)?;
        let theta_scale = theta0.values().iter().map(|v| norm(*v)).fold(0.0, f64::max);
        if theta_scale * cfg.step0 < 1e-14 * mesh.diameter() {
            // stationary: record the final state and stop
            history.records.push(OptimRecord {
                iter,
                energy,
                volume,
                multiplier,
                step: 0.0,
                switch_iters: state.switch_iters,
                min_angle: mesh_quality(&mesh).0,
            });
            break;
        }

        // line step: shrink until the mesh stays valid, the angle floor
        // holds, and the merit (energy + multiplier * volume defect) drops
        let merit0 = energy + multiplier * (volume - cfg.target_volume);
        let mut t = cfg.step0;
        let mut accepted: Option<(Mesh, f64, f64, f64, ContactState)> = None;
        let mut last_mesh_err: Option<MeshError> = None;
        for _ in 0..30 {
            match deform(&mesh, theta0.values(), t) {
                Ok(m_t) => {
                    let (min_angle, _) = mesh_quality(&m_t);
                    if min_angle >= cfg.min_angle_floor {
                        let disc_t = Discretization::build(&m_t, pd)?;
                        let (u_t, state_t) = solve_tresca_with(&m_t, pd, &disc_t, Some(&state))?;
                        let e_t = disc_t.energy(u_t.values());
                        let v_t = area(&m_t);
                        let merit_t = e_t + multiplier * (v_t - cfg.target_volume);
                        if merit_t <= merit0 + 1e-12 * merit0.abs() {
                            accepted = Some((m_t, e_t, v_t, t, state_t));
                            break;
                        }
                    }
                }
                Err(e) => last_mesh_err = Some(e),
            }
            t *= cfg.step_shrink;
        }

        let Some((m_t, e_t, v_t, t_acc, state_t)) = accepted else {
            if let Some(src) = last_mesh_err {
                return Err(OptimError::Stall { iter, source: src, history });
            }
            // no merit decrease found: treat as converged
            history.records.push(OptimRecord {
                iter,
                energy,
                volume,
                multiplier,
                step: 0.0,
                switch_iters: state.switch_iters,
                min_angle: mesh_quality(&mesh).0,
            });
            break;
        };

        mesh = m_t;
        warm = Some(state_t.clone());
        multiplier += cfg.uzawa_rate * (v_t - cfg.target_volume);
        iter += 1;
        history.records.push(OptimRecord {
            iter,
            energy: e_t,
            volume: v_t,
            multiplier,
            step: t_acc,
            switch_iters: state_t.switch_iters,
            min_angle: mesh_quality(&mesh).0,
        });

        let energies = history.energies();
        if stopping_check(&energies, cfg) {
            break;
        }
    }

    Ok((mesh, history))
}
