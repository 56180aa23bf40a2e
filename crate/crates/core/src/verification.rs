//! Manufactured solutions, error norms and convergence studies.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::coupler::{Bilayer, Forcing, MechanicsMode, SideParams, Simulation, Subdomain, SweepOptions, Transmission};
use crate::error::{bail, Result};
use crate::integrator::ControllerParams;
use crate::kinetics::{CrossDiffusion, GMParams, Kinetics};
use crate::mesh::{build_bilayer, Mesh2D, Rect, Side};
use crate::spaces::{mini_eval, quadrature, DofMap, TriangleGeometry};

/// A scalar function of one variable with its first two derivatives.
#[derive(Clone, Copy, Debug)]
struct Jet {
    v: f64,
    d1: f64,
    d2: f64,
}

impl Jet {
    fn mul(self, o: Jet) -> Jet {
        Jet {
            v: self.v * o.v,
            d1: self.d1 * o.v + self.v * o.d1,
            d2: self.d2 * o.v + 2.0 * self.d1 * o.d1 + self.v * o.d2,
        }
    }
    fn sin(a: f64, x: f64) -> Jet {
        Jet { v: (a * x).sin(), d1: a * (a * x).cos(), d2: -a * a * (a * x).sin() }
    }
    fn cos(a: f64, x: f64) -> Jet {
        Jet { v: (a * x).cos(), d1: -a * (a * x).sin(), d2: -a * a * (a * x).cos() }
    }
    fn poly(c: [f64; 4], x: f64) -> Jet {
        Jet {
            v: c[0] + x * (c[1] + x * (c[2] + x * c[3])),
            d1: c[1] + x * (2.0 * c[2] + 3.0 * x * c[3]),
            d2: 2.0 * c[2] + 6.0 * x * c[3],
        }
    }
}

/// Separable `X(x) Y(y)` with value, gradient and Hessian.
#[derive(Clone, Copy, Debug)]
pub struct Field2 {
    pub v: f64,
    pub grad: [f64; 2],
    /// `[f_xx, f_xy, f_yy]`.
    pub hess: [f64; 3],
}

fn separable(x: Jet, y: Jet) -> Field2 {
    Field2 { v: x.v * y.v, grad: [x.d1 * y.v, x.v * y.d1], hess: [x.d2 * y.v, x.d1 * y.d1, x.v * y.d2] }
}

/// Per-layer coefficients entering the manufactured forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseSide {
    pub mu: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub c_f: f64,
    pub c_g: f64,
    /// Constant diffusion matrix.
    pub diffusion: [[f64; 2]; 2],
    pub kinetics: Kinetics,
}

/// Smooth two-species solution `w = w̃ e^{kt}` with a steady displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct ManufacturedCase {
    /// Decay constant `k` (negative for decay).
    pub decay: f64,
    pub sides: [CaseSide; 2],
}

impl ManufacturedCase {
    /// Builds the case from layer parameters; the diffusion must be constant
    /// and the model must have two species.
    pub fn from_params(d: &SideParams, e: &SideParams, decay: f64) -> Result<Self> {
        let side = |p: &SideParams| -> Result<CaseSide> {
            let CrossDiffusion::Linear { matrix } = &p.diffusion else {
                bail!(Argument, "manufactured case needs a constant diffusion matrix");
            };
            if p.num_species() != 2 || matrix.len() != 2 {
                bail!(Argument, "manufactured case has two species, got {}", p.num_species());
            }
            let (mu, lambda) = crate::assembly::lame(p.young, p.nu)?;
            Ok(CaseSide {
                mu,
                lambda,
                alpha: p.alpha,
                c_f: p.c_f,
                c_g: p.c_g,
                diffusion: [[matrix[0][0], matrix[0][1]], [matrix[1][0], matrix[1][1]]],
                kinetics: p.kinetics.clone(),
            })
        };
        Ok(ManufacturedCase { decay, sides: [side(d)?, side(e)?] })
    }

    fn phi(x: [f64; 2]) -> Field2 {
        separable(Jet::cos(2.0 * PI, x[0]), Jet::sin(3.0 * PI, x[1]))
    }

    /// Time factor `e^{kt}`.
    pub fn time_factor(&self, t: f64) -> f64 {
        (self.decay * t).exp()
    }

    /// Species values and gradients.
    pub fn species(&self, x: [f64; 2], t: f64) -> [Field2; 2] {
        let s = self.time_factor(t);
        let f = Self::phi(x);
        let scaled = |c: f64, k: f64| Field2 {
            v: s * (c + k * f.v),
            grad: [s * k * f.grad[0], s * k * f.grad[1]],
            hess: [s * k * f.hess[0], s * k * f.hess[1], s * k * f.hess[2]],
        };
        [scaled(1.0, -1.0), scaled(1.0, 0.5)]
    }

    /// Displacement components.
    pub fn displacement_fields(x: [f64; 2]) -> [Field2; 2] {
        let u1 = separable(Jet::poly([0.0, 1.0, -1.0, 0.0], x[0]).mul(Jet::cos(PI, x[0])), Jet::sin(2.0 * PI, x[1]));
        let u2 = separable(Jet::sin(PI, x[0]), Jet::poly([0.0, 0.0, 1.0, -1.0], x[1]).mul(Jet::cos(PI, x[1])));
        [u1, u2]
    }

    pub fn displacement_at(x: [f64; 2]) -> [f64; 2] {
        let [a, b] = Self::displacement_fields(x);
        [a.v, b.v]
    }

    /// `grad u` as `[[du1/dx, du1/dy], [du2/dx, du2/dy]]`.
    pub fn displacement_gradient(x: [f64; 2]) -> [[f64; 2]; 2] {
        let [a, b] = Self::displacement_fields(x);
        [a.grad, b.grad]
    }

    pub fn divergence(x: [f64; 2]) -> f64 {
        let [a, b] = Self::displacement_fields(x);
        a.grad[0] + b.grad[1]
    }

    /// `p = -lambda div u`.
    pub fn pressure(&self, side: Side, x: [f64; 2]) -> f64 {
        -self.sides[side.index()].lambda * Self::divergence(x)
    }

    /// Cauchy stress `2 mu eps(u) - p I`.
    pub fn stress(&self, side: Side, x: [f64; 2]) -> [[f64; 2]; 2] {
        let c = &self.sides[side.index()];
        let g = Self::displacement_gradient(x);
        let div = g[0][0] + g[1][1];
        let mut s = [[0.0; 2]; 2];
        for r in 0..2 {
            for q in 0..2 {
                s[r][q] = c.mu * (g[r][q] + g[q][r]);
            }
            s[r][r] += c.lambda * div;
        }
        s
    }

    /// `div sigma = mu lap u + (mu + lambda) grad div u`.
    pub fn stress_divergence(&self, side: Side, x: [f64; 2]) -> [f64; 2] {
        let c = &self.sides[side.index()];
        let [a, b] = Self::displacement_fields(x);
        let lap = [a.hess[0] + a.hess[2], b.hess[0] + b.hess[2]];
        let grad_div = [a.hess[0] + b.hess[1], a.hess[1] + b.hess[2]];
        [c.mu * lap[0] + (c.mu + c.lambda) * grad_div[0], c.mu * lap[1] + (c.mu + c.lambda) * grad_div[1]]
    }

    /// `div (M grad w)` for a constant matrix.
    pub fn diffusion_divergence(&self, side: Side, x: [f64; 2], t: f64) -> [f64; 2] {
        let m = &self.sides[side.index()].diffusion;
        let w = self.species(x, t);
        let lap = [w[0].hess[0] + w[0].hess[2], w[1].hess[0] + w[1].hess[2]];
        [m[0][0] * lap[0] + m[0][1] * lap[1], m[1][0] * lap[0] + m[1][1] * lap[1]]
    }

    fn flux(&self, side: Side, x: [f64; 2], n: [f64; 2], t: f64) -> [f64; 2] {
        let m = &self.sides[side.index()].diffusion;
        let w = self.species(x, t);
        let dn = [w[0].grad[0] * n[0] + w[0].grad[1] * n[1], w[1].grad[0] * n[0] + w[1].grad[1] * n[1]];
        [m[0][0] * dn[0] + m[0][1] * dn[1], m[1][0] * dn[0] + m[1][1] * dn[1]]
    }

    /// Residuals of the strong equations at the exact fields: the body force
    /// and species source that make them hold.
    pub fn manufactured_forcing(&self, side: Side, x: [f64; 2], t: f64) -> Result<([f64; 2], [f64; 2])> {
        let c = &self.sides[side.index()];
        let w = self.species(x, t);
        let ds = self.stress_divergence(side, x);
        let sum_grad = [w[0].grad[0] + w[1].grad[0], w[0].grad[1] + w[1].grad[1]];
        let body = [-ds[0] - c.c_f * sum_grad[0], -ds[1] - c.c_f * sum_grad[1]];
        let mut g = [0.0; 2];
        c.kinetics.eval(&[w[0].v, w[1].v], side, &mut g)?;
        let dd = self.diffusion_divergence(side, x, t);
        let div = Self::divergence(x);
        let mut src = [0.0; 2];
        for i in 0..2 {
            src[i] = self.decay * w[i].v - dd[i] - g[i] - c.c_g * div;
        }
        Ok((body, src))
    }

    /// Nodal interpolant of the species on one mesh (node-major).
    pub fn interpolate_species(&self, mesh: &Mesh2D, t: f64) -> Vec<f64> {
        mesh.vertices().iter().flat_map(|&x| self.species(x, t).map(|f| f.v)).collect()
    }
}

impl Forcing for ManufacturedCase {
    fn species_source(&self, side: Side, x: [f64; 2], t: f64, out: &mut [f64]) {
        let (_, s) = self.manufactured_forcing(side, x, t).expect("manufactured species stay positive");
        out.copy_from_slice(&s);
    }

    fn species_flux(&self, side: Side, x: [f64; 2], n: [f64; 2], t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.flux(side, x, n, t));
    }

    fn species_jump(&self, x: [f64; 2], nu: [f64; 2], t: f64, out: &mut [f64]) {
        let (a, b) = (self.flux(Side::D, x, nu, t), self.flux(Side::E, x, nu, t));
        out[0] = a[0] - b[0];
        out[1] = a[1] - b[1];
    }

    fn body_force(&self, side: Side, x: [f64; 2], t: f64) -> [f64; 2] {
        self.manufactured_forcing(side, x, t).expect("manufactured species stay positive").0
    }

    fn surface_traction(&self, x: [f64; 2], n: [f64; 2], _t: f64) -> [f64; 2] {
        let s = self.stress(Side::E, x);
        let u = Self::displacement_at(x);
        let a = self.sides[1].alpha;
        [s[0][0] * n[0] + s[0][1] * n[1] + a * u[0], s[1][0] * n[0] + s[1][1] * n[1] + a * u[1]]
    }

    fn traction_jump(&self, x: [f64; 2], nu: [f64; 2], _t: f64) -> [f64; 2] {
        let (a, b) = (self.stress(Side::D, x), self.stress(Side::E, x));
        [
            (a[0][0] - b[0][0]) * nu[0] + (a[0][1] - b[0][1]) * nu[1],
            (a[1][0] - b[1][0]) * nu[0] + (a[1][1] - b[1][1]) * nu[1],
        ]
    }

    fn displacement(&self, _side: Side, x: [f64; 2], _t: f64) -> [f64; 2] {
        Self::displacement_at(x)
    }
}

/// Errors of one layer: `e0` is the L² norm, `e1` the full H¹ norm.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SideErrors {
    pub e0_w: f64,
    pub e1_w: f64,
    pub e0_u: f64,
    pub e1_u: f64,
    pub e0_p: f64,
}

/// Errors of the discrete fields of layer `side` against the exact ones,
/// with degree-6 quadrature. `w` is the layer's species vector, `u` and `p`
/// its MINI displacement and P1 pressure (`None` skips the mechanics).
pub fn error_norms(
    case: &ManufacturedCase,
    mesh: &Mesh2D,
    w: &[f64],
    mech: Option<(&[f64], &[f64])>,
    t: f64,
) -> Result<SideErrors> {
    let side = mesh.side();
    let m = 2;
    let dofs = DofMap::new(mesh, m);
    if w.len() != dofs.species_len() {
        bail!(Argument, "species vector has {} entries, expected {}", w.len(), dofs.species_len());
    }
    let rule = quadrature(6)?;
    let mut acc = [0.0; 5];
    let mut h1w = 0.0;
    let mut h1u = 0.0;
    for (ti, tri) in mesh.triangles().iter().enumerate() {
        let g = TriangleGeometry::of(mesh, ti)?;
        let local = dofs.local_disp(*tri, ti);
        for (bary, wq) in rule.scaled(g.area) {
            let x = g.point(bary);
            let exact = case.species(x, t);
            for (i, ex) in exact.iter().enumerate() {
                let nodal = [0, 1, 2].map(|a| w[tri[a] * m + i]);
                let val: f64 = (0..3).map(|a| bary[a] * nodal[a]).sum();
                let gr = g.gradient(nodal);
                acc[0] += wq * (val - ex.v).powi(2);
                h1w += wq * ((gr[0] - ex.grad[0]).powi(2) + (gr[1] - ex.grad[1]).powi(2));
            }
            if let Some((u, p)) = mech {
                let (vals, sg) = mini_eval(bary, &g);
                let mut uh = [0.0; 2];
                let mut gu = [[0.0; 2]; 2];
                for &(gi, c, a) in &local {
                    uh[c] += u[gi] * vals[a];
                    gu[c][0] += u[gi] * sg[a][0];
                    gu[c][1] += u[gi] * sg[a][1];
                }
                let ue = ManufacturedCase::displacement_at(x);
                let ge = ManufacturedCase::displacement_gradient(x);
                for c in 0..2 {
                    acc[2] += wq * (uh[c] - ue[c]).powi(2);
                    h1u += wq * ((gu[c][0] - ge[c][0]).powi(2) + (gu[c][1] - ge[c][1]).powi(2));
                }
                let ph: f64 = (0..3).map(|a| bary[a] * p[tri[a]]).sum();
                acc[4] += wq * (ph - case.pressure(side, x)).powi(2);
            }
        }
    }
    Ok(SideErrors {
        e0_w: acc[0].sqrt(),
        e1_w: (acc[0] + h1w).sqrt(),
        e0_u: acc[2].sqrt(),
        e1_u: (acc[2] + h1u).sqrt(),
        e0_p: acc[4].sqrt(),
    })
}

/// L² norm of the difference of two species vectors on one mesh.
pub fn species_l2_difference(mesh: &Mesh2D, m: usize, a: &[f64], b: &[f64]) -> Result<f64> {
    let mass = crate::assembly::mass_matrix(mesh, m)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(crate::linalg::dot(&d, &mass.mul_vec(&d)).max(0.0).sqrt())
}

/// Observed rates `log(e_k / e_{k+1}) / log(h_k / h_{k+1})`.
pub fn observed_rates(h: &[f64], e: &[f64]) -> Result<Vec<f64>> {
    if h.len() != e.len() {
        bail!(Argument, "{} sizes for {} errors", h.len(), e.len());
    }
    if h.windows(2).any(|p| !(p[1] < p[0]) || !(p[1] > 0.0)) {
        bail!(Argument, "mesh or step sizes must decrease strictly: {h:?}");
    }
    Ok(h.windows(2).zip(e.windows(2)).map(|(hh, ee)| (ee[0] / ee[1]).ln() / (hh[0] / hh[1]).ln()).collect())
}

/// Interface and Newton settings of a verification run.
#[derive(Clone, Debug, PartialEq)]
pub struct StudySettings {
    /// Species transmission weights per layer.
    pub k: [Vec<f64>; 2],
    /// Elasticity transmission weights per layer.
    pub j: [f64; 2],
    /// Coarsest structured mesh: `nx = base_nx * 2^level`.
    pub base_nx: usize,
    pub sweeps: SweepOptions,
    /// Mesh of the temporal study.
    pub time_nx: usize,
    pub dt0: f64,
    pub t_final: f64,
    /// Reference step is the finest step divided by this.
    pub reference_factor: usize,
    pub newton_tol_time: f64,
    /// Mechanics treatment of the temporal study.
    pub time_mechanics: MechanicsMode,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            k: [vec![1e3, 3.0], vec![1.0, 1e3]],
            j: [0.1, 1e5],
            base_nx: 5,
            sweeps: SweepOptions { max_sweeps: 100, tol: 1e-7, newton_tol: 1e-5, newton_max: 20, shift: 0.0 },
            time_nx: 20,
            dt0: 0.01,
            t_final: 0.02,
            reference_factor: 8,
            newton_tol_time: 1e-13,
            time_mechanics: MechanicsMode::Stationary,
        }
    }
}

/// Example-1 layer parameters (transmission weights of the paper's table).
pub fn example1_params() -> [SideParams; 2] {
    let d = SideParams {
        young: 1000.0,
        nu: 0.475,
        alpha: 0.0,
        j: 1.0,
        k: vec![1e5, 1e5],
        c_f: 150.0,
        c_g: 1.0,
        kinetics: Kinetics::Gm(GMParams::new([1.0, 0.0, 1.0, 1.0, 0.35, 1.0])),
        diffusion: CrossDiffusion::diagonal(&[1.0, 30.0]),
    };
    let e = SideParams {
        young: 10.0,
        nu: 0.33,
        alpha: 2.5,
        j: 1.0,
        k: vec![1e5, 1e5],
        c_f: 20.0,
        c_g: 2.0,
        kinetics: Kinetics::Gm(GMParams::new([2.0, 0.0, 2.0, 2.0, 0.15, 1.0])),
        diffusion: CrossDiffusion::diagonal(&[2.0, 10.0]),
    };
    [d, e]
}

/// Decay constant of the time-dependent manufactured species (halving per unit time).
pub const DECAY: f64 = -std::f64::consts::LN_2;

/// Example-1 bilayer on `(0,1)^2` and `(0,1) x (1,1.4)` with `nx` cells across.
pub fn example1_model(nx: usize, settings: &StudySettings, decay: f64) -> Result<(Bilayer, ManufacturedCase)> {
    let ny_e = ((nx as f64) * 0.4).round().max(1.0) as usize;
    let (md, me, map) = build_bilayer(Rect::new(0.0, 1.0, 0.0, 1.0), Rect::new(0.0, 1.0, 1.0, 1.4), nx, nx, ny_e)?;
    let [mut pd, mut pe] = example1_params();
    pd.k = settings.k[0].clone();
    pe.k = settings.k[1].clone();
    pd.j = settings.j[0];
    pe.j = settings.j[1];
    let case = ManufacturedCase::from_params(&pd, &pe, decay)?;
    let model = Bilayer::new(Subdomain::new(md, pd, true)?, Subdomain::new(me, pe, true)?, map)?
        .with_forcing(Box::new(case.clone()))
        .with_transmission(Transmission::Variational);
    Ok((model, case))
}

/// One row of the spatial study.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceRow {
    pub dofs: usize,
    pub h: f64,
    pub errors: [SideErrors; 2],
    pub newton: usize,
    pub sweeps: usize,
}

/// One row of the temporal study.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeRow {
    pub dt: f64,
    /// `sum_n dt ||w(t_n) - w_ref(t_n)||` per layer.
    pub errors: [f64; 2],
    pub avg_newton: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RateTable {
    Space(Vec<SpaceRow>),
    Time(Vec<TimeRow>),
}

/// Which study to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudyKind {
    Space,
    Time,
}

impl std::str::FromStr for StudyKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "space" => Ok(StudyKind::Space),
            "time" => Ok(StudyKind::Time),
            _ => bail!(Argument, "unknown study '{s}' (expected space or time)"),
        }
    }
}

pub fn convergence_study(kind: StudyKind, levels: usize, settings: &StudySettings) -> Result<RateTable> {
    if levels < 3 {
        bail!(Argument, "a convergence study needs at least 3 levels, got {levels}");
    }
    match kind {
        StudyKind::Space => space_study(levels, settings).map(RateTable::Space),
        StudyKind::Time => time_study(levels, settings).map(RateTable::Time),
    }
}

/// Stationary solve on one refinement level.
pub fn space_level(nx: usize, settings: &StudySettings) -> Result<SpaceRow> {
    let (mut model, case) = example1_model(nx, settings, 0.0)?;
    let mut w = vec![1.0; model.global_len()];
    let report = model.schwarz_sweeps(0.0, &mut w, settings.sweeps)?;
    if !report.converged {
        bail!(Abort, "Schwarz iteration on nx={nx} did not converge in {} sweeps", report.sweeps);
    }
    let mut errors = [SideErrors::default(); 2];
    let mut dofs = 0;
    let mut h = 0.0f64;
    for s in Side::BOTH {
        let sd = model.side(s);
        errors[s.index()] = error_norms(&case, &sd.mesh, &w[model.range(s)], Some((&sd.u, &sd.p)), 0.0)?;
        dofs += sd.dofs.species_len() + sd.dofs.elasticity_len();
        h = h.max(sd.mesh.meshsize());
    }
    Ok(SpaceRow { dofs, h, errors, newton: report.max_newton(), sweeps: report.sweeps })
}

fn space_study(levels: usize, settings: &StudySettings) -> Result<Vec<SpaceRow>> {
    (0..levels).map(|k| space_level(settings.base_nx << k, settings)).collect()
}

/// Species history of a fixed-step run, one vector per step (including t=0).
pub fn fixed_step_history(nx: usize, dt: f64, settings: &StudySettings) -> Result<(Vec<Vec<f64>>, f64, Bilayer)> {
    let (model, case) = example1_model(nx, settings, DECAY)?;
    let mut model = model.with_mechanics(settings.time_mechanics);
    let mut w0 = case.interpolate_species(&model.side(Side::D).mesh, 0.0);
    w0.extend(case.interpolate_species(&model.side(Side::E).mesh, 0.0));
    let opts = SweepOptions { shift: DECAY, newton_tol: 1e-13, tol: 1e-12, max_sweeps: 1000, ..settings.sweeps };
    let report = model.schwarz_sweeps(0.0, &mut w0, opts)?;
    if !report.converged {
        bail!(Abort, "initial Schwarz iteration did not converge in {} sweeps", report.sweeps);
    }
    let params = ControllerParams {
        adaptive: false,
        dt0: dt,
        dt_max: dt,
        tol_n: settings.newton_tol_time,
        ..ControllerParams::default()
    };
    let mut sim = Simulation::new(model, 0.0, w0.clone(), params)?;
    let steps = (settings.t_final / dt).round() as usize;
    let mut history = vec![w0];
    let mut iters = 0usize;
    for _ in 0..steps {
        let rec = sim.advance(settings.t_final)?;
        iters += rec.iters[0] + rec.iters[1];
        history.push(sim.state.w.clone());
    }
    let avg = iters as f64 / (2 * steps.max(1)) as f64;
    Ok((history, avg, sim.model))
}

fn time_study(levels: usize, settings: &StudySettings) -> Result<Vec<TimeRow>> {
    let dts: Vec<f64> = (0..levels).map(|k| settings.dt0 / (1u64 << k) as f64).collect();
    let dt_ref = dts[levels - 1] / settings.reference_factor as f64;
    let (reference, _, model) = fixed_step_history(settings.time_nx, dt_ref, settings)?;
    let mut rows = Vec::with_capacity(levels);
    for &dt in &dts {
        let (hist, avg, _) = fixed_step_history(settings.time_nx, dt, settings)?;
        let stride = (dt / dt_ref).round() as usize;
        let mut errors = [0.0; 2];
        for (n, w) in hist.iter().enumerate().skip(1) {
            let r = &reference[n * stride];
            for s in Side::BOTH {
                let range = model.range(s);
                let e = species_l2_difference(&model.side(s).mesh, 2, &w[range.clone()], &r[range])?;
                errors[s.index()] += dt * e;
            }
        }
        rows.push(TimeRow { dt, errors, avg_newton: avg });
    }
    Ok(rows)
}

impl RateTable {
    /// Rates between consecutive rows, one vector per error column.
    pub fn rates(&self) -> Result<Vec<Vec<f64>>> {
        match self {
            RateTable::Space(rows) => {
                let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
                space_columns(rows).iter().map(|(_, e)| observed_rates(&h, e)).collect()
            }
            RateTable::Time(rows) => {
                let dt: Vec<f64> = rows.iter().map(|r| r.dt).collect();
                (0..2).map(|s| observed_rates(&dt, &rows.iter().map(|r| r.errors[s]).collect::<Vec<_>>())).collect()
            }
        }
    }

    /// CSV with one error and one rate column per quantity.
    pub fn to_csv(&self) -> Result<String> {
        let rates = self.rates()?;
        let mut out = String::new();
        match self {
            RateTable::Space(rows) => {
                let cols = space_columns(rows);
                out.push_str("dofs,h");
                for (name, _) in &cols {
                    let _ = write!(out, ",e_{name},r_{name}");
                }
                out.push_str(",iter\n");
                for (i, row) in rows.iter().enumerate() {
                    let _ = write!(out, "{},{:.6e}", row.dofs, row.h);
                    for (c, (_, e)) in cols.iter().enumerate() {
                        let r = if i == 0 { String::new() } else { format!("{:.4}", rates[c][i - 1]) };
                        let _ = write!(out, ",{:.6e},{r}", e[i]);
                    }
                    let _ = writeln!(out, ",{}", row.newton);
                }
            }
            RateTable::Time(rows) => {
                out.push_str("dt,e_w_D,r_w_D,e_w_E,r_w_E,avg_iter\n");
                for (i, row) in rows.iter().enumerate() {
                    let _ = write!(out, "{:.6e}", row.dt);
                    for s in 0..2 {
                        let r = if i == 0 { String::new() } else { format!("{:.4}", rates[s][i - 1]) };
                        let _ = write!(out, ",{:.6e},{r}", row.errors[s]);
                    }
                    let _ = writeln!(out, ",{:.2}", row.avg_newton);
                }
            }
        }
        Ok(out)
    }
}

fn space_columns(rows: &[SpaceRow]) -> Vec<(String, Vec<f64>)> {
    let mut cols = Vec::new();
    for s in Side::BOTH {
        let i = s.index();
        let pick = |f: fn(&SideErrors) -> f64| rows.iter().map(|r| f(&r.errors[i])).collect::<Vec<f64>>();
        cols.push((format!("1_w_{s}"), pick(|e| e.e1_w)));
        cols.push((format!("0_u_{s}"), pick(|e| e.e0_u)));
        cols.push((format!("1_u_{s}"), pick(|e| e.e1_u)));
        cols.push((format!("0_p_{s}"), pick(|e| e.e0_p)));
    }
    cols
}
