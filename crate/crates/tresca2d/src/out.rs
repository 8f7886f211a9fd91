//! File outputs: legacy ASCII VTK (unstructured grid with point data, and
//! POLYDATA for the boundary curve), contact-state and history CSV, and the
//! shape-gradient JSON report. All writes go to a temporary file first and
//! are renamed into place; floats carry 17 significant digits; LF endings.

use crate::math2d::*;
use crate::mesh::{BoundaryTag, Mesh};
use crate::optim::OptimHistory;
use crate::shape::ShapeGradientReport;
use crate::tresca::{ContactMode, ContactState};
use std::io::Write;
use std::path::Path;

fn fmt(v: f64) -> String {
    // normalize negative zero so outputs stay byte-reproducible
    format!("{:.16e}", v + 0.0)
}

fn atomic_write(path: &Path, content: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(content.as_bytes())?;
    }
    std::fs::rename(tmp, path)
}

/// Scalar point data attached to a VTK export.
pub struct ScalarField<'a> {
    pub name: &'a str,
    /// One value per mesh vertex.
    pub values: Vec<f64>,
}

/// Write the mesh and point data as a legacy ASCII VTK unstructured grid
/// (triangles, cell type 5). Vector fields are padded with z = 0.
pub fn write_vtk(
    mesh: &Mesh,
    vectors: &[(&str, &[V2])],
    scalars: &[ScalarField],
    title: &str,
    path: &Path,
) -> std::io::Result<()> {
    let nv = mesh.num_vertices();
    let nt = mesh.num_triangles();
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\n");
    s.push_str(title);
    s.push('\n');
    s.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    s.push_str(&format!("POINTS {nv} double\n"));
    for p in mesh.vertices() {
        s.push_str(&format!("{} {} 0\n", fmt(p[0]), fmt(p[1])));
    }
    s.push_str(&format!("CELLS {nt} {}\n", 4 * nt));
    for t in mesh.triangles() {
        s.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    s.push_str(&format!("CELL_TYPES {nt}\n"));
    for _ in 0..nt {
        s.push_str("5\n");
    }
    if !vectors.is_empty() || !scalars.is_empty() {
        s.push_str(&format!("POINT_DATA {nv}\n"));
        for (name, field) in vectors {
            assert_eq!(field.len(), nv, "vector field length mismatch");
            s.push_str(&format!("VECTORS {name} double\n"));
            for v in *field {
                s.push_str(&format!("{} {} 0\n", fmt(v[0]), fmt(v[1])));
            }
        }
        for sf in scalars {
            assert_eq!(sf.values.len(), nv, "scalar field length mismatch");
            s.push_str(&format!("SCALARS {} double 1\nLOOKUP_TABLE default\n", sf.name));
            for v in &sf.values {
                s.push_str(&format!("{}\n", fmt(*v)));
            }
        }
    }
    atomic_write(path, &s)
}

/// Write the boundary curve as legacy ASCII VTK POLYDATA with one line cell
/// per boundary edge and the edge tag (0 clamped, 1 frictional) as cell data.
pub fn write_boundary_polydata(mesh: &Mesh, title: &str, path: &Path) -> std::io::Result<()> {
    let nv = mesh.num_vertices();
    let edges = mesh.boundary_edges();
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\n");
    s.push_str(title);
    s.push('\n');
    s.push_str("ASCII\nDATASET POLYDATA\n");
    s.push_str(&format!("POINTS {nv} double\n"));
    for p in mesh.vertices() {
        s.push_str(&format!("{} {} 0\n", fmt(p[0]), fmt(p[1])));
    }
    s.push_str(&format!("LINES {} {}\n", edges.len(), 3 * edges.len()));
    for e in edges {
        s.push_str(&format!("2 {} {}\n", e.a, e.b));
    }
    s.push_str(&format!("CELL_DATA {}\n", edges.len()));
    s.push_str("SCALARS boundary_tag int 1\nLOOKUP_TABLE default\n");
    for e in edges {
        s.push_str(match e.tag {
            BoundaryTag::Dirichlet => "0\n",
            BoundaryTag::Tresca => "1\n",
        });
    }
    atomic_write(path, &s)
}

pub fn contact_mode_code(mode: ContactMode) -> i32 {
    match mode {
        ContactMode::StickStrict => 0,
        ContactMode::StickBoundary => 1,
        ContactMode::Slip => 2,
    }
}

/// Contact state CSV: `node,x,y,mode,sigma_n,s_tau,g,u_tau`.
pub fn write_contact_csv(mesh: &Mesh, state: &ContactState, path: &Path) -> std::io::Result<()> {
    let mut s = String::from("node,x,y,mode,sigma_n,s_tau,g,u_tau\n");
    for i in 0..state.len() {
        let v = state.nodes[i];
        let p = mesh.vertex(v);
        let mode = match state.mode[i] {
            ContactMode::StickStrict => "STICK_STRICT",
            ContactMode::StickBoundary => "STICK_BOUNDARY",
            ContactMode::Slip => "SLIP",
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            v,
            fmt(p[0]),
            fmt(p[1]),
            mode,
            fmt(state.sigma_n[i]),
            fmt(state.s_tau[i]),
            fmt(state.g[i]),
            fmt(state.u_tau[i]),
        ));
    }
    atomic_write(path, &s)
}

/// Optimization history CSV: `iter,J,volume,multiplier,step,switch_iters,min_angle`.
pub fn write_history_csv(history: &OptimHistory, path: &Path) -> std::io::Result<()> {
    let mut s = String::from("iter,J,volume,multiplier,step,switch_iters,min_angle\n");
    for r in &history.records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iter,
            fmt(r.energy),
            fmt(r.volume),
            fmt(r.multiplier),
            fmt(r.step),
            r.switch_iters,
            fmt(r.min_angle),
        ));
    }
    atomic_write(path, &s)
}

/// Finite-difference gradient table CSV.
pub fn write_fd_table_csv(rows: &[crate::shape::FdGradientRow], path: &Path) -> std::io::Result<()> {
    let mut s =
        String::from("t,fd_quotient,value_boundary,value_volume,rel_err_boundary,rel_err_volume\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt(r.t),
            fmt(r.fd_quotient),
            fmt(r.value_boundary),
            fmt(r.value_volume),
            fmt(r.rel_err_boundary),
            fmt(r.rel_err_volume),
        ));
    }
    atomic_write(path, &s)
}

/// Shape gradient report as JSON with stable keys.
pub fn write_gradient_report_json(
    report: &ShapeGradientReport,
    path: &Path,
) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    atomic_write(path, &(json + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{rectangle_mesh, Side};

    #[test]
    fn vtk_header_and_zero_vectors() {
        let mesh = rectangle_mesh(2, 2, 1.0, 1.0, &[Side::Left]).unwrap();
        let dir = std::env::temp_dir().join("tresca2d_out_test");
        let path = dir.join("mesh.vtk");
        write_vtk(&mesh, &[], &[], "mesh only", &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# vtk DataFile Version 3.0\n"));
        assert!(text.contains("CELL_TYPES"));
        assert!(!text.contains("POINT_DATA"));

        let zeros = vec![[0.0, 0.0]; mesh.num_vertices()];
        let path2 = dir.join("disp.vtk");
        write_vtk(&mesh, &[("displacement", &zeros)], &[], "zero field", &path2).unwrap();
        let text = std::fs::read_to_string(&path2).unwrap();
        assert!(text.contains("VECTORS displacement double"));
        for line in text
            .lines()
            .skip_while(|l| !l.starts_with("VECTORS"))
            .skip(1)
            .take(mesh.num_vertices())
        {
            assert_eq!(line, "0.0000000000000000e0 0.0000000000000000e0 0");
        }
    }

    #[test]
    fn vtk_output_is_byte_reproducible() {
        let mesh = rectangle_mesh(3, 2, 1.0, 0.5, &[Side::Left]).unwrap();
        let field: Vec<V2> = mesh.vertices().iter().map(|p| [p[0] * 0.1, -p[1]]).collect();
        let dir = std::env::temp_dir().join("tresca2d_out_test");
        let p1 = dir.join("a.vtk");
        let p2 = dir.join("b.vtk");
        write_vtk(&mesh, &[("u", &field)], &[], "t", &p1).unwrap();
        write_vtk(&mesh, &[("u", &field)], &[], "t", &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn polydata_boundary_export() {
        let mesh = rectangle_mesh(2, 2, 1.0, 1.0, &[Side::Left]).unwrap();
        let dir = std::env::temp_dir().join("tresca2d_out_test");
        let path = dir.join("boundary.vtk");
        write_boundary_polydata(&mesh, "boundary", &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("DATASET POLYDATA"));
        assert!(text.contains("LINES 8 24"));
        assert!(text.contains("boundary_tag"));
    }
}
