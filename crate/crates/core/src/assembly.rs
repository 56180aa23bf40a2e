//! Matrices and load vectors of the partitioned Galerkin system.
//!
//! Species vectors are node-major (`vertex * m + i`), displacement vectors follow
//! [`DofMap`]. Vectors living on the interface are indexed by interface node
//! (`node * ncomp + c`), in the numbering of [`InterfaceMap::nodes`].

use crate::error::{bail, Result};
use crate::kinetics::{CrossDiffusion, Kinetics};
use crate::linalg::{dirichlet_rhs, LuFactor, SaddleSystem, SparseMatrix};
use crate::mesh::{BoundaryTag, InterfaceMap, Mesh2D, Side};
use crate::spaces::{gauss_line, mini_eval, quadrature, DofMap, TriangleGeometry};

/// Degree used for every integral touching the bubble.
pub const ELASTIC_DEGREE: usize = 6;
/// Degree for reaction and dilation terms of the species equations.
pub const REACTION_DEGREE: usize = 4;
/// Degree for manufactured volume sources.
pub const SOURCE_DEGREE: usize = 6;

/// `(mu, lambda)` from Young's modulus and Poisson ratio.
pub fn lame(young: f64, nu: f64) -> Result<(f64, f64)> {
    if !(young > 0.0) {
        bail!(Config, "Young modulus must be positive (got {young})");
    }
    if !(nu > 0.0 && nu < 0.5) {
        bail!(Config, "Poisson ratio must lie in (0, 0.5) (got {nu})");
    }
    Ok((young / (2.0 * (1.0 + nu)), young * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))))
}

pub fn p1_local_stiffness(g: &TriangleGeometry) -> [[f64; 3]; 3] {
    let mut k = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            k[a][b] = g.area * (g.grads[a][0] * g.grads[b][0] + g.grads[a][1] * g.grads[b][1]);
        }
    }
    k
}

pub fn p1_local_mass(g: &TriangleGeometry) -> [[f64; 3]; 3] {
    let mut k = [[g.area / 12.0; 3]; 3];
    for (a, row) in k.iter_mut().enumerate() {
        row[a] *= 2.0;
    }
    k
}

fn edge_mass(len: f64) -> [[f64; 2]; 2] {
    [[len / 3.0, len / 6.0], [len / 6.0, len / 3.0]]
}

/// Robin weights of the elasticity problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElasticRobin {
    /// Spring constant on `Gamma`.
    pub alpha: f64,
    /// Transmission weight on `Sigma`.
    pub j: f64,
}

/// Blocks of `[[A, Bᵀ], [B, -C]]` before Dirichlet elimination.
#[derive(Clone, Debug)]
pub struct ElasticityBlocks {
    pub a: SparseMatrix,
    pub b: SparseMatrix,
    pub c: SparseMatrix,
    pub dofs: DofMap,
    /// Clamped vertex displacement dofs.
    pub fixed: Vec<bool>,
}

pub fn assemble_elasticity(mesh: &Mesh2D, mu: f64, lambda: f64, robin: ElasticRobin) -> Result<ElasticityBlocks> {
    if !(mu > 0.0 && lambda > 0.0) {
        bail!(Argument, "Lame parameters must be positive (mu={mu}, lambda={lambda})");
    }
    let clamped = mesh.vertices_with_tag(BoundaryTag::Clamped);
    let has = |tag| mesh.edges_with_tag(tag).next().is_some();
    let spring = (robin.alpha > 0.0 && has(BoundaryTag::Gamma)) || (robin.j > 0.0 && has(BoundaryTag::Sigma));
    if clamped.is_empty() && !spring {
        bail!(Config, "elasticity problem on {} has neither clamped nor spring boundary", mesh.side());
    }

    let dofs = DofMap::new(mesh, 0);
    let nu = dofs.displacement_len();
    let np = dofs.pressure_len();
    let rule = quadrature(ELASTIC_DEGREE)?;
    let mut ta = Vec::with_capacity(64 * mesh.num_triangles());
    let mut tb = Vec::with_capacity(24 * mesh.num_triangles());
    let mut tc = Vec::with_capacity(9 * mesh.num_triangles());

    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = TriangleGeometry::of(mesh, t)?;
        let local = dofs.local_disp(*tri, t);
        let mut ka = [[0.0; 8]; 8];
        let mut kb = [[0.0; 8]; 3];
        for (bary, wq) in rule.scaled(g.area) {
            let (vals, grads) = mini_eval(bary, &g);
            for (r, &(_, c, a)) in local.iter().enumerate() {
                for (s, &(_, d, b)) in local.iter().enumerate() {
                    let mut v = grads[a][d] * grads[b][c];
                    if c == d {
                        v += grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1];
                    }
                    ka[r][s] += wq * mu * v;
                }
                for (i, row) in kb.iter_mut().enumerate() {
                    row[r] -= wq * vals[i] * grads[a][c];
                }
            }
        }
        for (r, &(gi, _, _)) in local.iter().enumerate() {
            for (s, &(gj, _, _)) in local.iter().enumerate() {
                ta.push((gi, gj, ka[r][s]));
            }
            for (i, row) in kb.iter().enumerate() {
                tb.push((tri[i], gi, row[r]));
            }
        }
        let m = p1_local_mass(&g);
        for a in 0..3 {
            for b in 0..3 {
                tc.push((tri[a], tri[b], m[a][b] / lambda));
            }
        }
    }

    for e in mesh.boundary_edges() {
        let w = match e.tag {
            BoundaryTag::Gamma => robin.alpha,
            BoundaryTag::Sigma => robin.j,
            BoundaryTag::Clamped => 0.0,
        };
        if w == 0.0 {
            continue;
        }
        let [p, q] = e.vertices;
        let m = edge_mass(edge_len(mesh, p, q));
        let vs = [p, q];
        for (x, &va) in vs.iter().enumerate() {
            for (y, &vb) in vs.iter().enumerate() {
                for c in 0..2 {
                    ta.push((dofs.vertex_disp(va, c), dofs.vertex_disp(vb, c), w * m[x][y]));
                }
            }
        }
    }

    let mut fixed = vec![false; nu];
    for v in clamped {
        fixed[dofs.vertex_disp(v, 0)] = true;
        fixed[dofs.vertex_disp(v, 1)] = true;
    }
    Ok(ElasticityBlocks {
        a: SparseMatrix::from_triplets(nu, nu, &ta)?,
        b: SparseMatrix::from_triplets(np, nu, &tb)?,
        c: SparseMatrix::from_triplets(np, np, &tc)?,
        dofs,
        fixed,
    })
}

fn edge_len(mesh: &Mesh2D, p: usize, q: usize) -> f64 {
    let (a, b) = (mesh.vertices()[p], mesh.vertices()[q]);
    (b[0] - a[0]).hypot(b[1] - a[1])
}

impl ElasticityBlocks {
    pub fn saddle(&self) -> Result<SaddleSystem> {
        SaddleSystem::new(self.a.clone(), self.b.clone(), self.c.clone())
    }

    /// `a(u, u)` for a displacement vector.
    pub fn energy(&self, u: &[f64]) -> f64 {
        crate::linalg::dot(u, &self.a.mul_vec(u))
    }
}

/// Factorised elasticity system with the clamped dofs eliminated. The matrix is
/// constant in time, so one factorisation serves the whole run.
#[derive(Clone, Debug)]
pub struct ElasticitySolver {
    full: SparseMatrix,
    fixed: Vec<bool>,
    lu: LuFactor,
    nu: usize,
}

impl ElasticitySolver {
    pub fn new(blocks: &ElasticityBlocks) -> Result<Self> {
        let full = blocks.saddle()?.matrix();
        let mut fixed = blocks.fixed.clone();
        fixed.resize(full.nrows(), false);
        let lu = LuFactor::new(&full.eliminate(&fixed))?;
        Ok(ElasticitySolver { full, fixed, lu, nu: blocks.a.nrows() })
    }

    /// Solves with displacement load `f` and clamped values taken from
    /// `dirichlet` (read only at clamped dofs; `None` means zero).
    pub fn solve(&self, f: &[f64], dirichlet: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        if f.len() != self.nu {
            bail!(Argument, "load has {} entries, expected {}", f.len(), self.nu);
        }
        let n = self.full.nrows();
        let mut rhs = f.to_vec();
        rhs.resize(n, 0.0);
        let mut g = vec![0.0; n];
        if let Some(d) = dirichlet {
            for i in 0..self.nu {
                if self.fixed[i] {
                    g[i] = d[i];
                }
            }
        }
        dirichlet_rhs(&self.full, &self.fixed, &g, &mut rhs);
        self.lu.solve_in_place(&mut rhs)?;
        let p = rhs.split_off(self.nu);
        Ok((rhs, p))
    }
}

/// Load of a volume force against all MINI displacement tests.
pub fn body_force_load(mesh: &Mesh2D, f: impl Fn([f64; 2]) -> [f64; 2], out: &mut [f64]) -> Result<()> {
    let dofs = DofMap::new(mesh, 0);
    let rule = quadrature(SOURCE_DEGREE)?;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = TriangleGeometry::of(mesh, t)?;
        let local = dofs.local_disp(*tri, t);
        for (bary, wq) in rule.scaled(g.area) {
            let (vals, _) = mini_eval(bary, &g);
            let fx = f(g.point(bary));
            for &(gi, c, a) in &local {
                out[gi] += wq * fx[c] * vals[a];
            }
        }
    }
    Ok(())
}

/// Line load `<g(x, n), v>` on the edges carrying `tag`, with `n` the outward
/// normal of the mesh. `ncomp` is 2 for displacements and `m` for species; both
/// layouts are node-major so the vertex dof is `v * ncomp + c`.
pub fn boundary_load(
    mesh: &Mesh2D,
    tag: BoundaryTag,
    ncomp: usize,
    g: impl Fn([f64; 2], [f64; 2], &mut [f64]),
    out: &mut [f64],
) -> Result<()> {
    let gauss = gauss_line(3)?;
    let mut val = vec![0.0; ncomp];
    for (idx, e) in mesh.edges_with_tag(tag) {
        let n = mesh.outward_normal(idx)?;
        let [p, q] = e.vertices;
        let (a, b) = (mesh.vertices()[p], mesh.vertices()[q]);
        let len = edge_len(mesh, p, q);
        for &(s, w) in &gauss {
            let x = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
            g(x, n, &mut val);
            for c in 0..ncomp {
                out[p * ncomp + c] += w * len * val[c] * (1.0 - s);
                out[q * ncomp + c] += w * len * val[c] * s;
            }
        }
    }
    Ok(())
}

/// Species mass matrix (block diagonal over species).
pub fn mass_matrix(mesh: &Mesh2D, m: usize) -> Result<SparseMatrix> {
    let n = mesh.num_vertices() * m;
    let mut trip = Vec::with_capacity(9 * m * mesh.num_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let loc = p1_local_mass(&TriangleGeometry::of(mesh, t)?);
        push_species_block(&mut trip, tri, m, |a, b, _| loc[a][b]);
    }
    SparseMatrix::from_triplets(n, n, &trip)
}

fn push_species_block(
    trip: &mut Vec<(usize, usize, f64)>,
    tri: &[usize; 3],
    m: usize,
    v: impl Fn(usize, usize, usize) -> f64,
) {
    for a in 0..3 {
        for b in 0..3 {
            for i in 0..m {
                trip.push((tri[a] * m + i, tri[b] * m + i, v(a, b, i)));
            }
        }
    }
}

/// Diffusion matrix `(M(w) grad w, grad z)`. A state-dependent tensor is
/// evaluated at the centroid, which integrates its linear variation exactly.
pub fn diffusion_matrix(mesh: &Mesh2D, cd: &CrossDiffusion, w: &[f64]) -> Result<SparseMatrix> {
    let m = cd.num_species();
    let n = mesh.num_vertices() * m;
    if w.len() != n {
        bail!(Argument, "state has {} entries, expected {n}", w.len());
    }
    let mut tensor = vec![0.0; m * m];
    let mut wc = vec![0.0; m];
    if cd.is_constant() {
        cd.eval_into(&wc, &mut tensor)?;
    }
    let mut trip = Vec::with_capacity(9 * m * m * mesh.num_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = TriangleGeometry::of(mesh, t)?;
        if !cd.is_constant() {
            for (i, x) in wc.iter_mut().enumerate() {
                *x = (w[tri[0] * m + i] + w[tri[1] * m + i] + w[tri[2] * m + i]) / 3.0;
            }
            cd.eval_into(&wc, &mut tensor)?;
        }
        let k = p1_local_stiffness(&g);
        for a in 0..3 {
            for b in 0..3 {
                for i in 0..m {
                    for j in 0..m {
                        let mij = tensor[i * m + j];
                        if mij != 0.0 {
                            trip.push((tri[a] * m + i, tri[b] * m + j, mij * k[a][b]));
                        }
                    }
                }
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &trip)
}

/// Derivative of the centroid tensor in [`diffusion_matrix`]: the matrix of
/// `x -> (M'(w)[x] grad w, grad z)`. Empty for a constant tensor.
pub fn diffusion_tensor_jacobian(mesh: &Mesh2D, cd: &CrossDiffusion, w: &[f64]) -> Result<SparseMatrix> {
    let m = cd.num_species();
    let n = mesh.num_vertices() * m;
    if w.len() != n {
        bail!(Argument, "state has {} entries, expected {n}", w.len());
    }
    let CrossDiffusion::Nonlinear { diag, eta } = cd else {
        return Ok(SparseMatrix::zeros(n, n));
    };
    if cd.is_constant() {
        return Ok(SparseMatrix::zeros(n, n));
    }
    let mut trip = Vec::with_capacity(9 * m * m * mesh.num_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = TriangleGeometry::of(mesh, t)?;
        let k = p1_local_stiffness(&g);
        for a in 0..3 {
            for i in 0..m {
                // (K w_i)_a, the only state factor left after differentiating M_ii.
                let kw: f64 = (0..3).map(|b| k[a][b] * w[tri[b] * m + i]).sum();
                for c in 0..3 {
                    for (j, e) in eta[i].iter().enumerate() {
                        let v = diag[i] * e / 3.0 * kw;
                        if v != 0.0 {
                            trip.push((tri[a] * m + i, tri[c] * m + j, v));
                        }
                    }
                }
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &trip)
}

/// `sum_i weights[i] <w_i, z_i>` over the edges carrying `tag`.
pub fn edge_mass_matrix(mesh: &Mesh2D, tag: BoundaryTag, weights: &[f64]) -> Result<SparseMatrix> {
    let m = weights.len();
    let n = mesh.num_vertices() * m;
    let mut trip = Vec::new();
    for (_, e) in mesh.edges_with_tag(tag) {
        let [p, q] = e.vertices;
        let em = edge_mass(edge_len(mesh, p, q));
        let vs = [p, q];
        for x in 0..2 {
            for y in 0..2 {
                for (i, &k) in weights.iter().enumerate() {
                    if k != 0.0 {
                        trip.push((vs[x] * m + i, vs[y] * m + i, k * em[x][y]));
                    }
                }
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &trip)
}

/// Advection matrix `((v . grad) w, z)` with the P1 velocity given by the vertex
/// entries of a displacement-layout vector.
pub fn advection_matrix(mesh: &Mesh2D, m: usize, velocity: &[f64]) -> Result<SparseMatrix> {
    let n = mesh.num_vertices() * m;
    let dofs = DofMap::new(mesh, m);
    if velocity.len() < 2 * mesh.num_vertices() {
        bail!(Argument, "velocity has {} entries, expected at least {}", velocity.len(), 2 * mesh.num_vertices());
    }
    let mut trip = Vec::with_capacity(9 * m * mesh.num_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = TriangleGeometry::of(mesh, t)?;
        let vel: Vec<[f64; 2]> =
            tri.iter().map(|&v| [velocity[dofs.vertex_disp(v, 0)], velocity[dofs.vertex_disp(v, 1)]]).collect();
        if vel.iter().all(|v| v[0] == 0.0 && v[1] == 0.0) {
            continue;
        }
        let mut loc = [[0.0; 3]; 3];
        for (a, row) in loc.iter_mut().enumerate() {
            for (b, entry) in row.iter_mut().enumerate() {
                for (c, vc) in vel.iter().enumerate() {
                    let weight = if a == c { g.area / 6.0 } else { g.area / 12.0 };
                    *entry += weight * (vc[0] * g.grads[b][0] + vc[1] * g.grads[b][1]);
                }
            }
        }
        push_species_block(&mut trip, tri, m, |a, b, _| loc[a][b]);
    }
    SparseMatrix::from_triplets(n, n, &trip)
}

fn interpolate(w: &[f64], tri: &[usize; 3], m: usize, bary: [f64; 3], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = bary[0] * w[tri[0] * m + i] + bary[1] * w[tri[1] * m + i] + bary[2] * w[tri[2] * m + i];
    }
}

/// Adds the reaction load `(G(w_h), z)` to `out`.
pub fn reaction_load(mesh: &Mesh2D, kin: &Kinetics, w: &[f64], out: &mut [f64]) -> Result<()> {
    let m = kin.num_species();
    if matches!(kin, Kinetics::None { .. }) {
        return Ok(());
    }
    let rule = quadrature(REACTION_DEGREE)?;
    let side = mesh.side();
    let (mut wq, mut gq) = (vec![0.0; m], vec![0.0; m]);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.area(t);
        for (bary, wt) in rule.scaled(area) {
            interpolate(w, tri, m, bary, &mut wq);
            kin.eval(&wq, side, &mut gq)?;
            for a in 0..3 {
                for i in 0..m {
                    out[tri[a] * m + i] += wt * bary[a] * gq[i];
                }
            }
        }
    }
    Ok(())
}

/// Exact derivative of [`reaction_load`] with respect to the nodal values.
pub fn reaction_jacobian(mesh: &Mesh2D, kin: &Kinetics, w: &[f64]) -> Result<SparseMatrix> {
    let m = kin.num_species();
    let n = mesh.num_vertices() * m;
    if matches!(kin, Kinetics::None { .. }) {
        return Ok(SparseMatrix::zeros(n, n));
    }
    let rule = quadrature(REACTION_DEGREE)?;
    let side = mesh.side();
    let (mut wq, mut jq) = (vec![0.0; m], vec![0.0; m * m]);
    let mut trip = Vec::with_capacity(9 * m * m * mesh.num_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.area(t);
        let mut loc = vec![0.0; 9 * m * m];
        for (bary, wt) in rule.scaled(area) {
            interpolate(w, tri, m, bary, &mut wq);
            kin.jacobian(&wq, side, &mut jq)?;
            for a in 0..3 {
                for b in 0..3 {
                    let s = wt * bary[a] * bary[b];
                    for k in 0..m * m {
                        loc[(a * 3 + b) * m * m + k] += s * jq[k];
                    }
                }
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                for i in 0..m {
                    for j in 0..m {
                        let v = loc[(a * 3 + b) * m * m + i * m + j];
                        if v != 0.0 {
                            trip.push((tri[a] * m + i, tri[b] * m + j, v));
                        }
                    }
                }
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &trip)
}

/// Adds `(f(x), z)` for a vector-valued species source.
pub fn species_source_load(mesh: &Mesh2D, m: usize, f: impl Fn([f64; 2], &mut [f64]), out: &mut [f64]) -> Result<()> {
    let rule = quadrature(SOURCE_DEGREE)?;
    let mut val = vec![0.0; m];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = TriangleGeometry::of(mesh, t)?;
        for (bary, wt) in rule.scaled(g.area) {
            f(g.point(bary), &mut val);
            for a in 0..3 {
                for i in 0..m {
                    out[tri[a] * m + i] += wt * bary[a] * val[i];
                }
            }
        }
    }
    Ok(())
}

/// Species matrices at one state.
#[derive(Clone, Debug)]
pub struct AdrBlocks {
    pub m: SparseMatrix,
    /// Diffusion plus the interface Robin term `K <w, z>_Sigma`.
    pub d: SparseMatrix,
    pub c_u: SparseMatrix,
    pub g: Vec<f64>,
    pub j_g: SparseMatrix,
}

impl AdrBlocks {
    /// `J = -D + J_G - C_u`.
    pub fn jacobian(&self) -> Result<SparseMatrix> {
        let t = SparseMatrix::linear_combination(-1.0, &self.d, 1.0, &self.j_g)?;
        SparseMatrix::linear_combination(1.0, &t, -1.0, &self.c_u)
    }
}

/// Assembles every species block. `k` holds one interface weight per species.
pub fn assemble_adr(
    mesh: &Mesh2D,
    cd: &CrossDiffusion,
    k: &[f64],
    kin: &Kinetics,
    velocity: &[f64],
    w: &[f64],
) -> Result<AdrBlocks> {
    let m = cd.num_species();
    if kin.num_species() != m || k.len() != m {
        bail!(Argument, "species counts disagree: diffusion {m}, kinetics {}, weights {}", kin.num_species(), k.len());
    }
    let dv = diffusion_matrix(mesh, cd, w)?;
    let ks = edge_mass_matrix(mesh, BoundaryTag::Sigma, k)?;
    let mut g = vec![0.0; w.len()];
    reaction_load(mesh, kin, w, &mut g)?;
    Ok(AdrBlocks {
        m: mass_matrix(mesh, m)?,
        d: SparseMatrix::linear_combination(1.0, &dv, 1.0, &ks)?,
        c_u: advection_matrix(mesh, m, velocity)?,
        g,
        j_g: reaction_jacobian(mesh, kin, w)?,
    })
}

/// Coupling loads: `(c_f sum_i grad w_i, v)` for every displacement test and
/// `(c_g div u, z_i)` for every species.
pub fn assemble_coupling_loads(
    mesh: &Mesh2D,
    m: usize,
    w: &[f64],
    u: &[f64],
    c_f: f64,
    c_g: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dofs = DofMap::new(mesh, m);
    if w.len() != dofs.species_len() || u.len() < dofs.displacement_len() {
        bail!(
            Argument,
            "coupling fields have {} and {} entries, expected {} and {}",
            w.len(),
            u.len(),
            dofs.species_len(),
            dofs.displacement_len()
        );
    }
    let mut f = vec![0.0; dofs.displacement_len()];
    let mut gl = vec![0.0; dofs.species_len()];
    let rule = quadrature(ELASTIC_DEGREE)?;
    let mut grads = vec![[0.0; 2]; m];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = TriangleGeometry::of(mesh, t)?;
        for (i, gi) in grads.iter_mut().enumerate() {
            *gi = g.gradient([w[tri[0] * m + i], w[tri[1] * m + i], w[tri[2] * m + i]]);
        }
        let local = dofs.local_disp(*tri, t);
        let uloc: Vec<f64> = local.iter().map(|&(gi, _, _)| u[gi]).collect();
        for (bary, wq) in rule.scaled(g.area) {
            let (vals, sg) = mini_eval(bary, &g);
            let mut div = 0.0;
            for (r, &(_, c, a)) in local.iter().enumerate() {
                div += uloc[r] * sg[a][c];
            }
            let (force, src) = crate::kinetics::coupling_sources(&grads, div, c_f, c_g);
            if c_f != 0.0 {
                for &(gi, c, a) in &local {
                    f[gi] += wq * force[c] * vals[a];
                }
            }
            if c_g != 0.0 {
                for a in 0..3 {
                    for i in 0..m {
                        gl[tri[a] * m + i] += wq * bary[a] * src[i];
                    }
                }
            }
        }
    }
    Ok((f, gl))
}

/// P1 mass matrix of the interface, over interface nodes.
pub fn interface_mass(map: &InterfaceMap) -> SparseMatrix {
    let mut trip = Vec::with_capacity(4 * map.num_pairs());
    for (k, p) in map.pairs().iter().enumerate() {
        let em = edge_mass(map.edge_length(k));
        for x in 0..2 {
            for y in 0..2 {
                trip.push((p.nodes[x], p.nodes[y], em[x][y]));
            }
        }
    }
    SparseMatrix::from_triplets(map.num_nodes(), map.num_nodes(), &trip).expect("interface nodes are in range")
}

/// Applies `interface_mass ⊗ I_ncomp` to an interface vector.
pub fn interface_mass_apply(mass: &SparseMatrix, ncomp: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..mass.nrows() {
        for (j, v) in mass.row(i) {
            for c in 0..ncomp {
                out[i * ncomp + c] += v * x[j * ncomp + c];
            }
        }
    }
    out
}

/// Restriction of a node-major vector to the interface nodes of one side.
pub fn gather_interface(map: &InterfaceMap, side: Side, ncomp: usize, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(map.num_nodes() * ncomp);
    for k in 0..map.num_nodes() {
        let v = map.vertex(side, k);
        out.extend_from_slice(&x[v * ncomp..(v + 1) * ncomp]);
    }
    out
}

/// Adds an interface vector into a node-major vector of one side.
pub fn scatter_interface(map: &InterfaceMap, side: Side, ncomp: usize, x: &[f64], out: &mut [f64]) {
    for k in 0..map.num_nodes() {
        let v = map.vertex(side, k);
        for c in 0..ncomp {
            out[v * ncomp + c] += x[k * ncomp + c];
        }
    }
}

/// Interface load `<f(x, nu), z_k>` with `nu` the normal from `D` into `E`.
pub fn interface_line_load(
    map: &InterfaceMap,
    ncomp: usize,
    f: impl Fn([f64; 2], [f64; 2], &mut [f64]),
) -> Result<Vec<f64>> {
    let gauss = gauss_line(3)?;
    let mut out = vec![0.0; map.num_nodes() * ncomp];
    let mut val = vec![0.0; ncomp];
    for (k, p) in map.pairs().iter().enumerate() {
        let len = map.edge_length(k);
        let (a, b) = (map.nodes()[p.nodes[0]].x, map.nodes()[p.nodes[1]].x);
        for &(s, w) in &gauss {
            let x = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
            f(x, p.normal, &mut val);
            for c in 0..ncomp {
                out[p.nodes[0] * ncomp + c] += w * len * (1.0 - s) * val[c];
                out[p.nodes[1] * ncomp + c] += w * len * s * val[c];
            }
        }
    }
    Ok(out)
}

/// Solved fields of the side opposite to the one receiving transmission data.
#[derive(Clone, Copy, Debug)]
pub struct OppositeState<'a> {
    pub mesh: &'a Mesh2D,
    pub diffusion: &'a CrossDiffusion,
    pub w: &'a [f64],
    pub u: &'a [f64],
    pub p: &'a [f64],
    pub mu: f64,
}

/// Pointwise transmission loads for the side `receiving`:
/// `<M† grad w† n + K w†, z>` and `<sigma† n + J u†, v>`, with `n` the outward
/// normal of the receiving side and `K`, `J` its Robin weights. Gradients and
/// stresses are taken from the opposite-side triangle adjacent to each edge.
pub fn transmission_rhs(
    receiving: Side,
    opp: &OppositeState,
    k: &[f64],
    j: f64,
    map: &InterfaceMap,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mesh = opp.mesh;
    if mesh.side() != receiving.opposite() {
        bail!(Argument, "opposite state lives on {}, expected {}", mesh.side(), receiving.opposite());
    }
    let m = opp.diffusion.num_species();
    if k.len() != m {
        bail!(Argument, "{} interface weights for {m} species", k.len());
    }
    let dofs = DofMap::new(mesh, m);
    let gauss = gauss_line(3)?;
    let mut adr = vec![0.0; map.num_nodes() * m];
    let mut el = vec![0.0; map.num_nodes() * 2];
    let mut tensor = vec![0.0; m * m];
    let mut wq = vec![0.0; m];
    for (pi, pair) in map.pairs().iter().enumerate() {
        let edge = &mesh.boundary_edges()[map.edge(mesh.side(), pi)];
        let t = edge.triangle;
        let tri = mesh.triangles()[t];
        let g = TriangleGeometry::of(mesh, t)?;
        let n = match receiving {
            Side::D => pair.normal,
            Side::E => [-pair.normal[0], -pair.normal[1]],
        };
        let len = map.edge_length(pi);
        let verts = [map.vertex(mesh.side(), pair.nodes[0]), map.vertex(mesh.side(), pair.nodes[1])];
        let loc = |v: usize| tri.iter().position(|&x| x == v);
        let (Some(la), Some(lb)) = (loc(verts[0]), loc(verts[1])) else {
            bail!(Geometry, "interface edge {pi} is not an edge of its triangle");
        };
        let grads: Vec<[f64; 2]> = (0..m).map(|i| g.gradient([0, 1, 2].map(|a| opp.w[tri[a] * m + i]))).collect();
        let local = dofs.local_disp(tri, t);
        for &(s, wg) in &gauss {
            let mut bary = [0.0; 3];
            bary[la] = 1.0 - s;
            bary[lb] = s;
            let wt = wg * len;
            interpolate(opp.w, &tri, m, bary, &mut wq);
            opp.diffusion.eval_into(&wq, &mut tensor)?;
            let (vals, sg) = mini_eval(bary, &g);
            let mut gu = [[0.0; 2]; 2];
            let mut uq = [0.0; 2];
            for &(gi, c, a) in &local {
                uq[c] += opp.u[gi] * vals[a];
                gu[c][0] += opp.u[gi] * sg[a][0];
                gu[c][1] += opp.u[gi] * sg[a][1];
            }
            let pq: f64 = (0..3).map(|a| bary[a] * opp.p[tri[a]]).sum();
            let mut traction = [0.0; 2];
            for r in 0..2 {
                for c in 0..2 {
                    let mut sigma = opp.mu * (gu[r][c] + gu[c][r]);
                    if r == c {
                        sigma -= pq;
                    }
                    traction[r] += sigma * n[c];
                }
                traction[r] += j * uq[r];
            }
            for i in 0..m {
                let mut flux = k[i] * wq[i];
                for jj in 0..m {
                    flux += tensor[i * m + jj] * (grads[jj][0] * n[0] + grads[jj][1] * n[1]);
                }
                adr[pair.nodes[0] * m + i] += wt * (1.0 - s) * flux;
                adr[pair.nodes[1] * m + i] += wt * s * flux;
            }
            for r in 0..2 {
                el[pair.nodes[0] * 2 + r] += wt * (1.0 - s) * traction[r];
                el[pair.nodes[1] * 2 + r] += wt * s * traction[r];
            }
        }
    }
    Ok((adr, el))
}

/// Variational transmission load for the receiving side. The sending side
/// solved with load `b_send` and Robin weight `k_send`, so its discrete flux
/// functional is `b_send - k_send M x_send`; the receiving side gets the
/// negated flux plus `k_recv M x_send` and the prescribed flux jump `jump`.
pub fn variational_transmission(
    mass: &SparseMatrix,
    ncomp: usize,
    x_send: &[f64],
    b_send: &[f64],
    k_send: &[f64],
    k_recv: &[f64],
    jump: Option<&[f64]>,
) -> Vec<f64> {
    let mx = interface_mass_apply(mass, ncomp, x_send);
    let mut out = vec![0.0; mx.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let c = idx % ncomp;
        *o = (k_send[c] + k_recv[c]) * mx[idx] - b_send[idx];
        if let Some(q) = jump {
            *o += q[idx];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::GMParams;
    use crate::mesh::{build_bilayer, Rect};

    fn unit_bilayer(n: usize) -> (Mesh2D, Mesh2D, InterfaceMap) {
        build_bilayer(Rect::new(0.0, 1.0, 0.0, 1.0), Rect::new(0.0, 1.0, 1.0, 1.4), n, n, n).unwrap()
    }

    #[test]
    fn reference_local_matrices() {
        let g = TriangleGeometry::new([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let k = p1_local_stiffness(&g);
        let want = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for a in 0..3 {
            for b in 0..3 {
                assert!((k[a][b] - want[a][b]).abs() < 1e-15);
            }
        }
        let m = p1_local_mass(&g);
        assert!((m[0][0] - 1.0 / 12.0).abs() < 1e-15 && (m[0][1] - 1.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn lame_conversion() {
        let (mu, la) = lame(1000.0, 0.475).unwrap();
        assert!((mu - 1000.0 / 2.95).abs() < 1e-12);
        assert!((la - 475.0 / (1.475 * 0.05)).abs() < 1e-9);
        assert!(lame(1.0, 0.5).is_err());
    }

    #[test]
    fn rigid_motions_have_zero_energy() {
        let (d, _, _) = unit_bilayer(3);
        let bl = assemble_elasticity(&d, 2.0, 5.0, ElasticRobin { alpha: 0.0, j: 0.0 }).unwrap();
        let dofs = bl.dofs;
        for field in [|_: [f64; 2]| [1.0, 0.0], |_: [f64; 2]| [0.0, 1.0], |x: [f64; 2]| [-x[1], x[0]]] {
            let mut u = vec![0.0; dofs.displacement_len()];
            for (v, x) in d.vertices().iter().enumerate() {
                let f = field(*x);
                u[dofs.vertex_disp(v, 0)] = f[0];
                u[dofs.vertex_disp(v, 1)] = f[1];
            }
            assert!(bl.energy(&u).abs() < 1e-12);
            assert!(crate::linalg::norm_inf(&bl.b.mul_vec(&u)) < 1e-13);
        }
        assert!(bl.a.asymmetry() < 1e-12 && bl.c.asymmetry() < 1e-15);
    }

    #[test]
    fn linear_patch_reproduced() {
        let (d, _, _) = unit_bilayer(2);
        let (mu, la, j) = (3.0, 7.0, 2.0);
        let bl = assemble_elasticity(&d, mu, la, ElasticRobin { alpha: 0.0, j }).unwrap();
        let dofs = bl.dofs;
        let mut dir = vec![0.0; dofs.displacement_len()];
        for (v, x) in d.vertices().iter().enumerate() {
            dir[dofs.vertex_disp(v, 0)] = x[0];
            dir[dofs.vertex_disp(v, 1)] = x[1];
        }
        let mut f = vec![0.0; dofs.displacement_len()];
        boundary_load(
            &d,
            BoundaryTag::Sigma,
            2,
            |x, n, out| {
                for c in 0..2 {
                    out[c] = (2.0 * mu + 2.0 * la) * n[c] + j * x[c];
                }
            },
            &mut f,
        )
        .unwrap();
        let solver = ElasticitySolver::new(&bl).unwrap();
        let (u, p) = solver.solve(&f, Some(&dir)).unwrap();
        for i in 0..2 * d.num_vertices() {
            assert!((u[i] - dir[i]).abs() < 1e-10, "dof {i}: {} vs {}", u[i], dir[i]);
        }
        assert!(u[2 * d.num_vertices()..].iter().all(|b| b.abs() < 1e-10));
        assert!(p.iter().all(|q| (q + 2.0 * la).abs() < 1e-9));
    }

    #[test]
    fn zero_load_gives_zero_solution() {
        let v = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let edges = [[0, 1], [1, 2], [2, 0]]
            .map(|e| crate::mesh::BoundaryEdge { vertices: e, tag: BoundaryTag::Clamped, triangle: 0 })
            .to_vec();
        let mesh = Mesh2D::new(v, vec![[0, 1, 2]], vec![Side::D], edges).unwrap();
        let bl = assemble_elasticity(&mesh, 1.0, 1.0, ElasticRobin { alpha: 0.0, j: 0.0 }).unwrap();
        let (u, p) = ElasticitySolver::new(&bl).unwrap().solve(&[0.0; 8], None).unwrap();
        assert!(u.iter().chain(&p).all(|x| *x == 0.0));
    }

    #[test]
    fn unconstrained_elasticity_rejected() {
        let (d, _, _) = unit_bilayer(1);
        let v = d.vertices().to_vec();
        let edges = d
            .boundary_edges()
            .iter()
            .map(|e| crate::mesh::BoundaryEdge { tag: BoundaryTag::Sigma, ..e.clone() })
            .collect();
        let free = Mesh2D::new(v, d.triangles().to_vec(), d.subdomain_tags().to_vec(), edges).unwrap();
        let r = assemble_elasticity(&free, 1.0, 1.0, ElasticRobin { alpha: 0.0, j: 0.0 });
        assert!(matches!(r, Err(crate::Error::Config(_))));
    }

    #[test]
    fn diffusion_row_sums_vanish() {
        let (d, _, _) = unit_bilayer(4);
        let cd = CrossDiffusion::Linear { matrix: vec![vec![1.0, 0.3], vec![0.2, 30.0]] };
        let w = vec![1.0; d.num_vertices() * 2];
        let dm = diffusion_matrix(&d, &cd, &w).unwrap();
        assert!(crate::linalg::norm_inf(&dm.row_sums()) < 1e-12);
        let sym = diffusion_matrix(&d, &CrossDiffusion::diagonal(&[1.0, 30.0]), &w).unwrap();
        assert!(sym.asymmetry() < 1e-12);
        let ks = edge_mass_matrix(&d, BoundaryTag::Sigma, &[2.0, 0.0]).unwrap();
        let total: f64 = ks.row_sums().iter().sum();
        assert!((total - 2.0).abs() < 1e-13);
    }

    #[test]
    fn mass_and_advection() {
        let (d, _, _) = unit_bilayer(3);
        let m = mass_matrix(&d, 2).unwrap();
        let total: f64 = m.row_sums().iter().sum();
        assert!((total - 2.0).abs() < 1e-13);
        let zero = vec![0.0; 2 * (d.num_vertices() + d.num_triangles())];
        assert_eq!(advection_matrix(&d, 2, &zero).unwrap().nnz(), 0);
        // (v . grad) x with v = (1, 0) against z = 1 gives the area
        let mut vel = zero.clone();
        for v in 0..d.num_vertices() {
            vel[2 * v] = 1.0;
        }
        let c = advection_matrix(&d, 1, &vel).unwrap();
        let x: Vec<f64> = d.vertices().iter().map(|p| p[0]).collect();
        let total: f64 = c.mul_vec(&x).iter().sum();
        assert!((total - 1.0).abs() < 1e-13);
    }

    #[test]
    fn reaction_jacobian_matches_finite_differences() {
        let (_, e, _) = unit_bilayer(2);
        let kin = Kinetics::Gm(GMParams::new([0.1, 1.0, 1.0, 0.35, 1.0, 1.0]));
        let n = e.num_vertices() * 2;
        let w: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * ((i * 7 % 11) as f64) / 11.0).collect();
        let jac = reaction_jacobian(&e, &kin, &w).unwrap().to_dense();
        let mut base = vec![0.0; n];
        reaction_load(&e, &kin, &w, &mut base).unwrap();
        for col in 0..n {
            let h = 1e-6;
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[col] += h;
            wm[col] -= h;
            let (mut gp, mut gm) = (vec![0.0; n], vec![0.0; n]);
            reaction_load(&e, &kin, &wp, &mut gp).unwrap();
            reaction_load(&e, &kin, &wm, &mut gm).unwrap();
            for row in 0..n {
                let fd = (gp[row] - gm[row]) / (2.0 * h);
                assert!((fd - jac[row][col]).abs() < 1e-6 * jac[row][col].abs().max(1.0));
            }
        }
    }

    #[test]
    fn tensor_jacobian_completes_the_diffusion_derivative() {
        let (d, _, _) = unit_bilayer(3);
        let cd = CrossDiffusion::Nonlinear { diag: vec![1.0, 4.0], eta: vec![vec![0.3, 0.1], vec![0.05, 0.2]] };
        let n = d.num_vertices() * 2;
        let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 5 % 13) as f64) / 13.0).collect();
        let flux = |w: &[f64]| diffusion_matrix(&d, &cd, w).unwrap().mul_vec(w);
        let mut jac = diffusion_matrix(&d, &cd, &w).unwrap().to_dense();
        let extra = diffusion_tensor_jacobian(&d, &cd, &w).unwrap().to_dense();
        for (r, e) in jac.iter_mut().zip(&extra) {
            for (x, y) in r.iter_mut().zip(e) {
                *x += y;
            }
        }
        for col in 0..n {
            let h = 1e-6;
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[col] += h;
            wm[col] -= h;
            let (fp, fm) = (flux(&wp), flux(&wm));
            for row in 0..n {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                assert!((fd - jac[row][col]).abs() < 1e-7 * jac[row][col].abs().max(1.0), "({row},{col})");
            }
        }
        let lin = CrossDiffusion::diagonal(&[1.0, 4.0]);
        assert_eq!(diffusion_tensor_jacobian(&d, &lin, &w).unwrap().nnz(), 0);
    }

    #[test]
    fn coupling_loads_cases() {
        let (d, _, _) = unit_bilayer(3);
        let dofs = DofMap::new(&d, 2);
        let u0 = vec![0.0; dofs.displacement_len()];
        let (f, _) = assemble_coupling_loads(&d, 2, &vec![3.0; dofs.species_len()], &u0, 5.0, 1.0).unwrap();
        assert!(crate::linalg::norm_inf(&f) < 1e-14);

        let mut w = vec![0.0; dofs.species_len()];
        for (v, x) in d.vertices().iter().enumerate() {
            w[2 * v] = x[0];
        }
        let (f, _) = assemble_coupling_loads(&d, 2, &w, &u0, 1.0, 0.0).unwrap();
        let mut want = vec![0.0; dofs.displacement_len()];
        body_force_load(&d, |_| [1.0, 0.0], &mut want).unwrap();
        for (a, b) in f.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }

        let mut u = u0.clone();
        for (v, x) in d.vertices().iter().enumerate() {
            u[dofs.vertex_disp(v, 0)] = x[1];
        }
        let (_, g) = assemble_coupling_loads(&d, 2, &w, &u, 0.0, 1.0).unwrap();
        assert!(crate::linalg::norm_inf(&g) < 1e-14);
        assert!(assemble_coupling_loads(&d, 2, &w[1..], &u, 0.0, 1.0).is_err());
    }

    #[test]
    fn transmission_of_trivial_states() {
        let (d, e, map) = unit_bilayer(4);
        let cd = CrossDiffusion::diagonal(&[1.0, 30.0]);
        let dofs = DofMap::new(&e, 2);
        let zeros_u = vec![0.0; dofs.displacement_len()];
        let zeros_p = vec![0.0; dofs.pressure_len()];
        let w = vec![0.0; dofs.species_len()];
        let opp = OppositeState { mesh: &e, diffusion: &cd, w: &w, u: &zeros_u, p: &zeros_p, mu: 1.0 };
        let (a, b) = transmission_rhs(Side::D, &opp, &[1.0, 1.0], 1.0, &map).unwrap();
        assert!(a.iter().chain(&b).all(|x| *x == 0.0));

        let w = vec![2.5; dofs.species_len()];
        let opp = OppositeState { w: &w, ..opp };
        let (a, _) = transmission_rhs(Side::D, &opp, &[0.0, 0.0], 1.0, &map).unwrap();
        assert!(crate::linalg::norm_inf(&a) < 1e-13);
        let (a, _) = transmission_rhs(Side::D, &opp, &[1.0, 1.0], 1.0, &map).unwrap();
        let total: f64 = a.iter().sum();
        assert!((total - 2.0 * 2.5).abs() < 1e-12);
        assert!(transmission_rhs(Side::E, &opp, &[1.0, 1.0], 1.0, &map).is_err());
        let _ = d;
    }

    #[test]
    fn variational_transmission_recovers_flux() {
        let (_, _, map) = unit_bilayer(4);
        let mass = interface_mass(&map);
        let x = vec![1.0; map.num_nodes()];
        let b = variational_transmission(&mass, 1, &x, &vec![0.0; map.num_nodes()], &[2.0], &[3.0], None);
        let total: f64 = b.iter().sum();
        assert!((total - 5.0).abs() < 1e-13);
        let g = gather_interface(&map, Side::E, 1, &(0..100).map(f64::from).collect::<Vec<_>>());
        assert_eq!(g.len(), map.num_nodes());
    }
}
