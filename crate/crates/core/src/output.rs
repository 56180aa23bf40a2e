//! Snapshot and log writers: legacy VTK, step and interface CSVs, field summaries.

use std::fmt::Write as _;

use crate::coupler::{Bilayer, InterfaceResidual};
use crate::integrator::StepRecord;
use crate::mesh::{Mesh2D, Side};

pub const STEP_HEADER: &str = "t,dt,err,accepted,newton_s1,newton_s2,cause";
pub const INTERFACE_HEADER: &str = "step,t,species_jump,displacement_jump,species_robin,traction_robin";
pub const SUMMARY_HEADER: &str = "side,field,min,max,mean";

pub fn step_row(r: &StepRecord) -> String {
    format!("{:e},{:e},{:e},{},{},{},{}", r.t, r.dt, r.err, r.accepted as u8, r.iters[0], r.iters[1], r.cause)
}

pub fn interface_row(step: usize, t: f64, r: &InterfaceResidual) -> String {
    format!("{step},{t:e},{:e},{:e},{:e},{:e}", r.species_jump, r.displacement_jump, r.species_robin, r.traction_robin)
}

/// Nodal fields of one layer as written to snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFields {
    pub side: Side,
    /// One vector per species, indexed by vertex.
    pub species: Vec<Vec<f64>>,
    /// Vertex displacement (the bubble part vanishes at vertices).
    pub displacement: Vec<[f64; 2]>,
    pub pressure: Vec<f64>,
}

impl LayerFields {
    pub fn magnitude(&self) -> Vec<f64> {
        self.displacement.iter().map(|u| u[0].hypot(u[1])).collect()
    }

    /// `(name, values)` for every scalar field.
    pub fn scalars(&self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> =
            self.species.iter().enumerate().map(|(i, w)| (format!("w{}", i + 1), w.clone())).collect();
        out.push(("u_magnitude".into(), self.magnitude()));
        out.push(("p".into(), self.pressure.clone()));
        out
    }
}

pub fn layer_fields(model: &Bilayer, w: &[f64]) -> [LayerFields; 2] {
    Side::BOTH.map(|s| {
        let sd = model.side(s);
        let ws = &w[model.range(s)];
        let m = sd.num_species();
        let nv = sd.mesh.num_vertices();
        let species = (0..m).map(|i| (0..nv).map(|v| ws[sd.dofs.species(v, i)]).collect()).collect();
        let (displacement, pressure) = if sd.has_mechanics() {
            (
                (0..nv).map(|v| [sd.u[sd.dofs.vertex_disp(v, 0)], sd.u[sd.dofs.vertex_disp(v, 1)]]).collect(),
                sd.p.clone(),
            )
        } else {
            (vec![[0.0; 2]; nv], vec![0.0; nv])
        };
        LayerFields { side: s, species, displacement, pressure }
    })
}

/// Legacy VTK 3.0 ASCII unstructured grid with point data.
pub fn vtk_string(mesh: &Mesh2D, fields: &LayerFields, title: &str) -> String {
    let mut s = String::new();
    let nv = mesh.num_vertices();
    let nt = mesh.num_triangles();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{}", title.replace('\n', " "));
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {nv} double");
    for x in mesh.vertices() {
        let _ = writeln!(s, "{:e} {:e} 0", x[0], x[1]);
    }
    let _ = writeln!(s, "CELLS {nt} {}", 4 * nt);
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        let _ = writeln!(s, "5");
    }
    let _ = writeln!(s, "POINT_DATA {nv}");
    for (name, values) in fields.scalars() {
        let _ = writeln!(s, "SCALARS {name} double 1");
        let _ = writeln!(s, "LOOKUP_TABLE default");
        for v in values {
            let _ = writeln!(s, "{v:e}");
        }
    }
    let _ = writeln!(s, "VECTORS u double");
    for u in &fields.displacement {
        let _ = writeln!(s, "{:e} {:e} 0", u[0], u[1]);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl FieldStats {
    pub fn of(values: &[f64]) -> FieldStats {
        let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / values.len() as f64 };
        FieldStats { min, max, mean }
    }
}

/// `(side, field, stats)` over vertices of each layer.
pub fn summarize(fields: &[LayerFields; 2]) -> Vec<(Side, String, FieldStats)> {
    fields
        .iter()
        .flat_map(|f| f.scalars().into_iter().map(move |(name, v)| (f.side, name, FieldStats::of(&v))))
        .collect()
}

pub fn summary_csv(rows: &[(Side, String, FieldStats)]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for (side, name, st) in rows {
        let _ = writeln!(s, "{side},{name},{:e},{:e},{:e}", st.min, st.max, st.mean);
    }
    s
}
