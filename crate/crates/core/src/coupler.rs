//! Partitioned bilayer solver.
//!
//! Species of both layers are advanced together by the stage solver, one block
//! per layer, with the Robin transmission load of the opposite layer refreshed
//! after each block. Elasticity is solved per layer after every accepted step
//! and feeds the velocity and dilation back into the species equations.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::assembly::{
    advection_matrix, assemble_coupling_loads, assemble_elasticity, body_force_load, boundary_load, diffusion_matrix,
    diffusion_tensor_jacobian, edge_mass_matrix, gather_interface, interface_line_load, interface_mass, lame,
    mass_matrix, reaction_jacobian, reaction_load, scatter_interface, species_source_load, transmission_rhs,
    variational_transmission, ElasticRobin, ElasticitySolver, OppositeState,
};
use crate::error::{bail, Result};
use crate::integrator::{
    accept_and_rescale, prepare_step, trbdf2_step, Cause, ControllerParams, StageSystem, StepOutcome, StepRecord,
    StepState,
};
use crate::kinetics::{CrossDiffusion, Kinetics};
use crate::linalg::{norm_inf, LuFactor, SparseMatrix};
use crate::mesh::{BoundaryTag, InterfaceMap, Mesh2D, Side};
use crate::spaces::DofMap;

/// Material and species parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SideParams {
    pub young: f64,
    pub nu: f64,
    /// Spring constant on `Gamma` (ignored where the layer has no `Gamma` edge).
    pub alpha: f64,
    /// Elasticity transmission weight.
    pub j: f64,
    /// Species transmission weights, one per species.
    pub k: Vec<f64>,
    pub c_f: f64,
    pub c_g: f64,
    pub kinetics: Kinetics,
    pub diffusion: CrossDiffusion,
}

impl SideParams {
    pub fn num_species(&self) -> usize {
        self.kinetics.num_species()
    }

    pub fn validate(&self, side: Side) -> Result<()> {
        let m = self.num_species();
        if self.diffusion.num_species() != m || self.k.len() != m {
            bail!(
                Config,
                "{side}: species counts disagree (kinetics {m}, diffusion {}, k {})",
                self.diffusion.num_species(),
                self.k.len()
            );
        }
        self.diffusion.validate()?;
        if self.k.iter().any(|k| !(*k >= 0.0)) {
            bail!(Config, "{side}: k must be nonnegative");
        }
        if !(self.j >= 0.0 && self.alpha >= 0.0) {
            bail!(Config, "{side}: j and alpha must be nonnegative");
        }
        Ok(())
    }
}

/// How the opposite layer's data becomes a Robin load.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transmission {
    /// Discrete flux functional of the sending layer. Conservative, but the
    /// stage iteration only contracts when the weights match the layers'
    /// interface stiffness.
    Variational,
    /// Flux and stress of the sending layer evaluated on the interface edges.
    #[default]
    Pointwise,
}

/// When the elasticity problems are solved during a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanicsMode {
    /// After every accepted step, with the velocity fed into the advection.
    #[default]
    Transient,
    /// Once, in equilibrium with the initial species; no advection.
    Stationary,
}

/// Data of a problem with prescribed sources (manufactured solutions, liftings).
pub trait Forcing: Send + Sync {
    /// `false` when only [`Forcing::displacement`] carries data.
    fn has_sources(&self) -> bool {
        true
    }
    fn species_source(&self, side: Side, x: [f64; 2], t: f64, out: &mut [f64]);
    /// Outward flux `M grad w . n` on the exterior boundary.
    fn species_flux(&self, side: Side, x: [f64; 2], n: [f64; 2], t: f64, out: &mut [f64]);
    /// `(M^D grad w^D - M^E grad w^E) . nu` on the interface.
    fn species_jump(&self, x: [f64; 2], nu: [f64; 2], t: f64, out: &mut [f64]);
    fn body_force(&self, side: Side, x: [f64; 2], t: f64) -> [f64; 2];
    /// `sigma n + alpha u` on `Gamma`.
    fn surface_traction(&self, x: [f64; 2], n: [f64; 2], t: f64) -> [f64; 2];
    /// `(sigma^D - sigma^E) nu` on the interface.
    fn traction_jump(&self, x: [f64; 2], nu: [f64; 2], t: f64) -> [f64; 2];
    /// Displacement on the clamped boundary.
    fn displacement(&self, side: Side, x: [f64; 2], t: f64) -> [f64; 2];
}

/// One layer: mesh, parameters, constant matrices and mechanical state.
pub struct Subdomain {
    pub mesh: Mesh2D,
    pub params: SideParams,
    pub dofs: DofMap,
    pub mu: f64,
    pub lambda: f64,
    mass: SparseMatrix,
    mass_lu: LuFactor,
    ksig: SparseMatrix,
    diffusion: SparseMatrix,
    advection: SparseMatrix,
    jacobian: SparseMatrix,
    iteration: Option<LuFactor>,
    elasticity: Option<ElasticitySolver>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub v: Vec<f64>,
    dilation: Vec<f64>,
    source: Option<(f64, Vec<f64>)>,
}

impl Subdomain {
    pub fn new(mesh: Mesh2D, params: SideParams, mechanics: bool) -> Result<Self> {
        let side = mesh.side();
        params.validate(side)?;
        let m = params.num_species();
        let dofs = DofMap::new(&mesh, m);
        let (mu, lambda, elasticity) = if mechanics {
            let (mu, lambda) = lame(params.young, params.nu)?;
            let blocks = assemble_elasticity(&mesh, mu, lambda, ElasticRobin { alpha: params.alpha, j: params.j })?;
            (mu, lambda, Some(ElasticitySolver::new(&blocks)?))
        } else {
            (0.0, 0.0, None)
        };
        let mass = mass_matrix(&mesh, m)?;
        let mass_lu = LuFactor::new(&mass)?;
        let ksig = edge_mass_matrix(&mesh, BoundaryTag::Sigma, &params.k)?;
        let n = dofs.species_len();
        let diffusion = diffusion_matrix(&mesh, &params.diffusion, &vec![0.0; n])?;
        let nd = dofs.displacement_len();
        Ok(Subdomain {
            advection: SparseMatrix::zeros(n, n),
            jacobian: SparseMatrix::zeros(n, n),
            iteration: None,
            u: vec![0.0; nd],
            p: vec![0.0; dofs.pressure_len()],
            v: vec![0.0; nd],
            dilation: vec![0.0; n],
            source: None,
            mesh,
            params,
            dofs,
            mu,
            lambda,
            mass,
            mass_lu,
            ksig,
            diffusion,
            elasticity,
        })
    }

    pub fn side(&self) -> Side {
        self.mesh.side()
    }

    pub fn num_species(&self) -> usize {
        self.params.num_species()
    }

    pub fn species_len(&self) -> usize {
        self.dofs.species_len()
    }

    pub fn mass(&self) -> &SparseMatrix {
        &self.mass
    }

    fn refresh_diffusion(&mut self, w: &[f64]) -> Result<()> {
        if !self.params.diffusion.is_constant() {
            self.diffusion = diffusion_matrix(&self.mesh, &self.params.diffusion, w)?;
        }
        Ok(())
    }

    /// `(D + K_Sigma + C_u) x`.
    fn linear_apply(&self, x: &[f64], out: &mut [f64]) {
        self.diffusion.matvec(x, out);
        self.ksig.matvec_add(1.0, x, out);
        self.advection.matvec_add(1.0, x, out);
    }

    fn sources(&mut self, t: f64, forcing: Option<&dyn Forcing>) -> Result<&[f64]> {
        let fresh = matches!(&self.source, Some((ts, _)) if *ts == t);
        if !fresh {
            let m = self.num_species();
            let side = self.side();
            let mut s = vec![0.0; self.species_len()];
            if let Some(f) = forcing.filter(|f| f.has_sources()) {
                species_source_load(&self.mesh, m, |x, out| f.species_source(side, x, t, out), &mut s)?;
                for tag in [BoundaryTag::Clamped, BoundaryTag::Gamma] {
                    boundary_load(&self.mesh, tag, m, |x, n, out| f.species_flux(side, x, n, t, out), &mut s)?;
                }
            }
            self.source = Some((t, s));
        }
        Ok(&self.source.as_ref().expect("just filled").1)
    }

    /// Species right side `-(D + K + C_u) w + G(w) + g(u) + sources + load`.
    fn residual(
        &mut self,
        t: f64,
        w: &[f64],
        load: &[f64],
        map: &InterfaceMap,
        forcing: Option<&dyn Forcing>,
        out: &mut [f64],
    ) -> Result<()> {
        self.refresh_diffusion(w)?;
        self.linear_apply(w, out);
        out.iter_mut().for_each(|v| *v = -*v);
        let mut g = vec![0.0; w.len()];
        reaction_load(&self.mesh, &self.params.kinetics, w, &mut g)?;
        let m = self.num_species();
        let side = self.side();
        let src = self.sources(t, forcing)?;
        for i in 0..out.len() {
            out[i] += g[i] + src[i];
        }
        for (o, d) in out.iter_mut().zip(&self.dilation) {
            *o += d;
        }
        scatter_interface(map, side, m, load, out);
        Ok(())
    }

    fn refresh_jacobian(&mut self, w: &[f64]) -> Result<()> {
        self.refresh_diffusion(w)?;
        let lin = SparseMatrix::linear_combination(1.0, &self.diffusion, 1.0, &self.ksig)?;
        let mut lin = SparseMatrix::linear_combination(1.0, &lin, 1.0, &self.advection)?;
        if !self.params.diffusion.is_constant() {
            let dm = diffusion_tensor_jacobian(&self.mesh, &self.params.diffusion, w)?;
            lin = SparseMatrix::linear_combination(1.0, &lin, 1.0, &dm)?;
        }
        let jg = reaction_jacobian(&self.mesh, &self.params.kinetics, w)?;
        self.jacobian = SparseMatrix::linear_combination(-1.0, &lin, 1.0, &jg)?;
        Ok(())
    }

    /// Factorises `M / dt - gamma J`; `dt = inf` drops the mass term.
    fn factor(&mut self, dt: f64, gamma: f64) -> Result<()> {
        let a = SparseMatrix::linear_combination(1.0 / dt, &self.mass, -gamma, &self.jacobian)?;
        match &mut self.iteration {
            Some(lu) => lu.refactor(&a)?,
            None => self.iteration = Some(LuFactor::new(&a)?),
        }
        Ok(())
    }

    fn solve(&self, rhs: &mut [f64]) -> Result<()> {
        match &self.iteration {
            Some(lu) => lu.solve_in_place(rhs),
            None => bail!(State, "iteration matrix of {} used before factorisation", self.side()),
        }
    }

    pub fn has_mechanics(&self) -> bool {
        self.elasticity.is_some()
    }

    fn update_advection(&mut self) -> Result<()> {
        self.advection = advection_matrix(&self.mesh, self.num_species(), &self.v)?;
        Ok(())
    }
}

/// Interface mismatch after a sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InterfaceResidual {
    pub sweep: usize,
    /// `max |w^D - w^E|` over interface nodes.
    pub species_jump: f64,
    pub displacement_jump: f64,
    /// Mismatch between the Robin load in use and the one implied by the
    /// opposite layer's current state, divided by the interface mass and the
    /// summed weights (so in units of the field).
    pub species_robin: f64,
    pub traction_robin: f64,
}

impl InterfaceResidual {
    pub fn max(&self) -> f64 {
        self.species_jump.max(self.displacement_jump).max(self.species_robin).max(self.traction_robin)
    }
}

/// Options of the stationary Schwarz iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepOptions {
    pub max_sweeps: usize,
    /// Early exit once [`InterfaceResidual::max`] drops below this; a
    /// non-finite value disables the exit.
    pub tol: f64,
    /// Newton stops when the max-norm increment is below this.
    pub newton_tol: f64,
    pub newton_max: usize,
    /// Solves `F(w) = shift M w` instead of `F(w) = 0`; with `shift = k` the
    /// result is a discrete state decaying like `e^{kt}`.
    pub shift: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { max_sweeps: 50, tol: 1e-8, newton_tol: 1e-5, newton_max: 20, shift: 0.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub sweeps: usize,
    pub converged: bool,
    /// Largest Newton iteration count of each sweep.
    pub newton: Vec<usize>,
    pub history: Vec<InterfaceResidual>,
}

impl SweepReport {
    pub fn max_newton(&self) -> usize {
        self.newton.iter().copied().max().unwrap_or(0)
    }
}

/// Solution fields of both layers at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct BilayerState {
    pub t: f64,
    pub dt: f64,
    pub w: [Vec<f64>; 2],
    pub u: [Vec<f64>; 2],
    pub p: [Vec<f64>; 2],
    pub v: [Vec<f64>; 2],
    /// Species transmission loads `R_h` in use on each side.
    pub species_loads: [Vec<f64>; 2],
    /// Elasticity transmission loads `S_h` in use on each side.
    pub traction_loads: [Vec<f64>; 2],
}

/// Both layers plus the interface coupling.
pub struct Bilayer {
    pub sides: [Subdomain; 2],
    pub map: InterfaceMap,
    imass: SparseMatrix,
    lumped: Vec<f64>,
    order: [Side; 2],
    transmission: Transmission,
    forcing: Option<Box<dyn Forcing>>,
    species_loads: [Vec<f64>; 2],
    traction_loads: [Vec<f64>; 2],
    saved: Option<[Vec<f64>; 2]>,
    loads_ready: bool,
    mechanics: MechanicsMode,
    /// Elasticity passes over both layers after each accepted step.
    pub sweeps: usize,
}

impl Bilayer {
    pub fn new(d: Subdomain, e: Subdomain, map: InterfaceMap) -> Result<Self> {
        if d.side() != Side::D || e.side() != Side::E {
            bail!(Argument, "subdomains must be given as (D, E)");
        }
        if d.num_species() != e.num_species() {
            bail!(Config, "species counts differ between layers ({} vs {})", d.num_species(), e.num_species());
        }
        if d.has_mechanics() != e.has_mechanics() {
            bail!(Config, "mechanics must be enabled on both layers or neither");
        }
        let m = d.num_species();
        let nn = map.num_nodes();
        let imass = interface_mass(&map);
        let lumped = imass.row_sums();
        Ok(Bilayer {
            sides: [d, e],
            map,
            imass,
            lumped,
            order: Side::BOTH,
            transmission: Transmission::Pointwise,
            forcing: None,
            species_loads: [vec![0.0; nn * m], vec![0.0; nn * m]],
            traction_loads: [vec![0.0; nn * 2], vec![0.0; nn * 2]],
            saved: None,
            loads_ready: false,
            mechanics: MechanicsMode::Transient,
            sweeps: 1,
        })
    }

    pub fn with_forcing(mut self, forcing: Box<dyn Forcing>) -> Self {
        self.forcing = Some(forcing);
        self
    }

    pub fn with_mechanics(mut self, mode: MechanicsMode) -> Self {
        self.mechanics = mode;
        self
    }

    pub fn mechanics_mode(&self) -> MechanicsMode {
        self.mechanics
    }

    pub fn with_transmission(mut self, t: Transmission) -> Self {
        self.transmission = t;
        self
    }

    /// Order in which the layers are visited within a sweep.
    pub fn with_order(mut self, order: [Side; 2]) -> Result<Self> {
        if order[0] == order[1] {
            bail!(Argument, "block order must visit both layers");
        }
        self.order = order;
        Ok(self)
    }

    pub fn side(&self, s: Side) -> &Subdomain {
        &self.sides[s.index()]
    }

    pub fn num_species(&self) -> usize {
        self.sides[0].num_species()
    }

    pub fn has_mechanics(&self) -> bool {
        self.sides[0].has_mechanics()
    }

    /// Range of a layer's species in the global vector (`D` first).
    pub fn range(&self, s: Side) -> Range<usize> {
        let nd = self.sides[0].species_len();
        match s {
            Side::D => 0..nd,
            Side::E => nd..nd + self.sides[1].species_len(),
        }
    }

    pub fn global_len(&self) -> usize {
        self.sides[0].species_len() + self.sides[1].species_len()
    }

    fn forcing(&self) -> Option<&dyn Forcing> {
        self.forcing.as_deref()
    }

    fn species_jump(&self, t: f64) -> Result<Option<Vec<f64>>> {
        match self.forcing().filter(|f| f.has_sources()) {
            Some(f) => Ok(Some(interface_line_load(&self.map, self.num_species(), |x, nu, out| {
                f.species_jump(x, nu, t, out)
            })?)),
            None => Ok(None),
        }
    }

    fn traction_jump(&self, t: f64) -> Result<Option<Vec<f64>>> {
        match self.forcing().filter(|f| f.has_sources()) {
            Some(f) => Ok(Some(interface_line_load(&self.map, 2, |x, nu, out| {
                out.copy_from_slice(&f.traction_jump(x, nu, t));
            })?)),
            None => Ok(None),
        }
    }

    fn opposite_state<'a>(&'a self, o: Side, w_o: &'a [f64]) -> OppositeState<'a> {
        let sd = self.side(o);
        OppositeState { mesh: &sd.mesh, diffusion: &sd.params.diffusion, w: w_o, u: &sd.u, p: &sd.p, mu: sd.mu }
    }

    /// Species load for layer `s` built from the opposite layer's state.
    fn species_transmission(&self, s: Side, t: f64, w: &[f64]) -> Result<Vec<f64>> {
        let o = s.opposite();
        let m = self.num_species();
        let w_o = &w[self.range(o)];
        let jump = self.species_jump(t)?;
        let (ks, ko) = (&self.side(s).params.k, &self.side(o).params.k);
        Ok(match self.transmission {
            Transmission::Variational => {
                let x = gather_interface(&self.map, o, m, w_o);
                variational_transmission(&self.imass, m, &x, &self.species_loads[o.index()], ko, ks, jump.as_deref())
            }
            Transmission::Pointwise => {
                let (mut adr, _) =
                    transmission_rhs(s, &self.opposite_state(o, w_o), ks, self.side(s).params.j, &self.map)?;
                add(&mut adr, jump.as_deref());
                adr
            }
        })
    }

    fn traction_transmission(&self, s: Side, t: f64, w_o: &[f64]) -> Result<Vec<f64>> {
        let o = s.opposite();
        let jump = self.traction_jump(t)?;
        let (js, jo) = (self.side(s).params.j, self.side(o).params.j);
        Ok(match self.transmission {
            Transmission::Variational => {
                let x = gather_interface(&self.map, o, 2, &self.side(o).u);
                variational_transmission(
                    &self.imass,
                    2,
                    &x,
                    &self.traction_loads[o.index()],
                    &[jo; 2],
                    &[js; 2],
                    jump.as_deref(),
                )
            }
            Transmission::Pointwise => {
                let (_, mut el) =
                    transmission_rhs(s, &self.opposite_state(o, w_o), &self.side(s).params.k, js, &self.map)?;
                add(&mut el, jump.as_deref());
                el
            }
        })
    }

    /// Seeds both species and traction loads from the current fields with the
    /// pointwise formulas. [`Simulation::new`] does this unless a stationary
    /// solve already left consistent loads behind.
    pub fn init_transmission(&mut self, t: f64, w: &[f64]) -> Result<()> {
        let sj = self.species_jump(t)?;
        let tj = self.traction_jump(t)?;
        for s in Side::BOTH {
            let o = s.opposite();
            let w_o = &w[self.range(o)];
            let sd = self.side(s);
            let (mut adr, mut el) =
                transmission_rhs(s, &self.opposite_state(o, w_o), &sd.params.k, sd.params.j, &self.map)?;
            add(&mut adr, sj.as_deref());
            add(&mut el, tj.as_deref());
            self.species_loads[s.index()] = adr;
            self.traction_loads[s.index()] = el;
        }
        if self.transmission == Transmission::Variational {
            // Balance the fluxes so the first stage derivative conserves mass.
            let last = self.order[1];
            self.species_loads[last.index()] = self.species_transmission(last, t, w)?;
        }
        self.loads_ready = true;
        Ok(())
    }

    fn dirichlet(&self, s: Side, t: f64) -> Option<Vec<f64>> {
        let f = self.forcing()?;
        let sd = self.side(s);
        let mut g = vec![0.0; sd.dofs.displacement_len()];
        for v in sd.mesh.vertices_with_tag(BoundaryTag::Clamped) {
            let d = f.displacement(s, sd.mesh.vertices()[v], t);
            g[sd.dofs.vertex_disp(v, 0)] = d[0];
            g[sd.dofs.vertex_disp(v, 1)] = d[1];
        }
        Some(g)
    }

    /// Solves the elasticity problem of layer `s` with the species `w`
    /// (global vector) and refreshes its dilation load.
    pub fn solve_elasticity(&mut self, s: Side, t: f64, w: &[f64]) -> Result<()> {
        if !self.has_mechanics() {
            return Ok(());
        }
        let o = s.opposite();
        let load = self.traction_transmission(s, t, &w[self.range(o)])?;
        let dirichlet = self.dirichlet(s, t);
        let w_s = &w[self.range(s)];
        let sd = self.side(s);
        let m = sd.num_species();
        let (mut f, _) = assemble_coupling_loads(&sd.mesh, m, w_s, &sd.u, sd.params.c_f, 0.0)?;
        if let Some(fc) = self.forcing().filter(|f| f.has_sources()) {
            body_force_load(&sd.mesh, |x| fc.body_force(s, x, t), &mut f)?;
            boundary_load(
                &sd.mesh,
                BoundaryTag::Gamma,
                2,
                |x, n, out| out.copy_from_slice(&fc.surface_traction(x, n, t)),
                &mut f,
            )?;
        }
        scatter_interface(&self.map, s, 2, &load, &mut f);
        let solver = sd.elasticity.as_ref().expect("mechanics enabled");
        let (u, p) = solver.solve(&f, dirichlet.as_deref())?;
        let (_, dil) = assemble_coupling_loads(&sd.mesh, m, w_s, &u, 0.0, sd.params.c_g)?;
        self.traction_loads[s.index()] = load;
        let sd = &mut self.sides[s.index()];
        sd.u = u;
        sd.p = p;
        sd.dilation = dil;
        Ok(())
    }

    /// Elasticity passes after an accepted step of size `dt`, followed by the
    /// velocity update `v = (u^{n+1} - u^n) / dt` and the advection rebuild.
    pub fn advance_mechanics(&mut self, t: f64, dt: f64, w: &[f64]) -> Result<()> {
        if !self.has_mechanics() || self.mechanics == MechanicsMode::Stationary {
            return Ok(());
        }
        let old: Vec<Vec<f64>> = self.sides.iter().map(|s| s.u.clone()).collect();
        for _ in 0..self.sweeps.max(1) {
            for s in self.order {
                self.solve_elasticity(s, t, w)?;
            }
        }
        for (sd, u0) in self.sides.iter_mut().zip(old) {
            sd.v = sd.u.iter().zip(&u0).map(|(a, b)| (a - b) / dt).collect();
            sd.update_advection()?;
        }
        Ok(())
    }

    /// Elasticity-only Schwarz passes at fixed species (initial equilibrium);
    /// velocity stays zero. Returns the number of passes used.
    pub fn equilibrate_mechanics(&mut self, t: f64, w: &[f64], max_sweeps: usize, tol: f64) -> Result<usize> {
        if !self.has_mechanics() {
            return Ok(0);
        }
        for k in 1..=max_sweeps {
            for s in self.order {
                self.solve_elasticity(s, t, w)?;
            }
            let r = self.interface_residual(t, w, k)?;
            if r.displacement_jump.max(r.traction_robin) <= tol {
                return Ok(k);
            }
        }
        Ok(max_sweeps)
    }

    pub fn interface_residual(&self, t: f64, w: &[f64], sweep: usize) -> Result<InterfaceResidual> {
        let m = self.num_species();
        let jump = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
        let xd = gather_interface(&self.map, Side::D, m, &w[self.range(Side::D)]);
        let xe = gather_interface(&self.map, Side::E, m, &w[self.range(Side::E)]);
        let mut r = InterfaceResidual { sweep, species_jump: jump(&xd, &xe), ..Default::default() };
        for s in Side::BOTH {
            let expected = self.species_transmission(s, t, w)?;
            let weights: Vec<f64> =
                self.side(s).params.k.iter().zip(&self.side(s.opposite()).params.k).map(|(a, b)| a + b).collect();
            r.species_robin = r.species_robin.max(self.scaled_gap(&weights, &expected, &self.species_loads[s.index()]));
        }
        if self.has_mechanics() {
            let ud = gather_interface(&self.map, Side::D, 2, &self.sides[0].u);
            let ue = gather_interface(&self.map, Side::E, 2, &self.sides[1].u);
            r.displacement_jump = jump(&ud, &ue);
            for s in Side::BOTH {
                let expected = self.traction_transmission(s, t, &w[self.range(s.opposite())])?;
                let j = self.side(s).params.j + self.side(s.opposite()).params.j;
                r.traction_robin =
                    r.traction_robin.max(self.scaled_gap(&[j; 2], &expected, &self.traction_loads[s.index()]));
            }
        }
        Ok(r)
    }

    fn scaled_gap(&self, weights: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let nc = weights.len();
        a.iter()
            .zip(b)
            .enumerate()
            .fold(0.0f64, |acc, (i, (x, y))| acc.max((x - y).abs() / (self.lumped[i / nc] * weights[i % nc].max(1.0))))
    }

    /// Stationary Schwarz iteration: per sweep and per layer, a Newton solve of
    /// the species equations without time derivative, then the layer's
    /// elasticity. Advection is off. `w` is the global species vector.
    pub fn schwarz_sweeps(&mut self, t: f64, w: &mut [f64], opts: SweepOptions) -> Result<SweepReport> {
        if opts.max_sweeps == 0 {
            bail!(Argument, "at least one sweep is required");
        }
        for sd in &mut self.sides {
            sd.v.iter_mut().for_each(|v| *v = 0.0);
            sd.update_advection()?;
        }
        self.init_transmission(t, w)?;
        let mut report = SweepReport::default();
        for k in 1..=opts.max_sweeps {
            let mut newton = 0;
            for (i, s) in self.order.into_iter().enumerate() {
                if k > 1 || i > 0 {
                    self.species_loads[s.index()] = self.species_transmission(s, t, w)?;
                }
                newton = newton.max(self.newton_solve(s, t, w, opts)?);
                self.solve_elasticity(s, t, w)?;
            }
            report.newton.push(newton);
            let r = self.interface_residual(t, w, k)?;
            report.history.push(r);
            report.sweeps = k;
            if opts.tol.is_finite() && r.max() <= opts.tol {
                report.converged = true;
                break;
            }
        }
        Ok(report)
    }

    fn newton_solve(&mut self, s: Side, t: f64, w: &mut [f64], opts: SweepOptions) -> Result<usize> {
        let r = self.range(s);
        let load = self.species_loads[s.index()].clone();
        let mut g = vec![0.0; r.len()];
        for k in 1..=opts.newton_max {
            let forcing = self.forcing.as_deref();
            let sd = &mut self.sides[s.index()];
            sd.residual(t, &w[r.clone()], &load, &self.map, forcing, &mut g)?;
            if opts.shift != 0.0 {
                sd.mass.matvec_add(-opts.shift, &w[r.clone()], &mut g);
            }
            sd.refresh_jacobian(&w[r.clone()])?;
            sd.factor(1.0 / opts.shift, 1.0)?;
            sd.solve(&mut g)?;
            for (x, d) in w[r.clone()].iter_mut().zip(&g) {
                *x += d;
            }
            if norm_inf(&g) <= opts.newton_tol {
                return Ok(k);
            }
        }
        bail!(Abort, "Newton on {s} did not converge in {} iterations", opts.newton_max)
    }

    /// Refreshes the opposite layer's species load after `s` was updated.
    fn update_load_from(&mut self, s: Side, t: f64, w: &[f64]) -> Result<()> {
        let o = s.opposite();
        self.species_loads[o.index()] = self.species_transmission(o, t, w)?;
        Ok(())
    }

    pub fn snapshot(&self, t: f64, dt: f64, w: &[f64]) -> BilayerState {
        let pair = |f: &dyn Fn(&Subdomain) -> Vec<f64>| [f(&self.sides[0]), f(&self.sides[1])];
        BilayerState {
            t,
            dt,
            w: [w[self.range(Side::D)].to_vec(), w[self.range(Side::E)].to_vec()],
            u: pair(&|s| s.u.clone()),
            p: pair(&|s| s.p.clone()),
            v: pair(&|s| s.v.clone()),
            species_loads: self.species_loads.clone(),
            traction_loads: self.traction_loads.clone(),
        }
    }

    /// Jacobian of layer `s`'s species right side at `w` (global vector), as
    /// used in the Newton iteration matrix.
    pub fn species_jacobian(&mut self, s: Side, w: &[f64]) -> Result<SparseMatrix> {
        let r = self.range(s);
        let sd = &mut self.sides[s.index()];
        sd.refresh_jacobian(&w[r])?;
        Ok(sd.jacobian.clone())
    }

    /// Total species amount `sum_i int w_i` over both layers.
    pub fn total_mass(&self, w: &[f64]) -> f64 {
        Side::BOTH
            .iter()
            .map(|&s| {
                let r = self.range(s);
                self.side(s).mass.mul_vec(&w[r]).iter().sum::<f64>()
            })
            .sum()
    }
}

fn add(a: &mut [f64], b: Option<&[f64]>) {
    if let Some(b) = b {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}

impl StageSystem for Bilayer {
    fn len(&self) -> usize {
        self.global_len()
    }

    fn num_blocks(&self) -> usize {
        2
    }

    fn block_range(&self, b: usize) -> Range<usize> {
        self.range(self.order[b])
    }

    fn rhs(&mut self, b: usize, t: f64, w: &[f64], out: &mut [f64]) -> Result<()> {
        let s = self.order[b];
        let r = self.range(s);
        let forcing = self.forcing.as_deref();
        let load = &self.species_loads[s.index()];
        self.sides[s.index()].residual(t, &w[r], load, &self.map, forcing, out)
    }

    fn mass_matvec(&self, b: usize, x: &[f64], out: &mut [f64]) {
        self.sides[self.order[b].index()].mass.matvec(x, out);
    }

    fn refresh_mass(&mut self, _b: usize, _t: f64, _w: &[f64]) -> Result<()> {
        Ok(())
    }

    fn refresh_jacobian(&mut self, b: usize, _t: f64, w: &[f64]) -> Result<()> {
        let s = self.order[b];
        let r = self.range(s);
        self.sides[s.index()].refresh_jacobian(&w[r])
    }

    fn factor(&mut self, b: usize, dt: f64, gamma: f64) -> Result<()> {
        self.sides[self.order[b].index()].factor(dt, gamma)
    }

    fn solve(&self, b: usize, rhs: &mut [f64]) -> Result<()> {
        self.sides[self.order[b].index()].solve(rhs)
    }

    fn solve_mass(&self, b: usize, rhs: &mut [f64]) -> Result<()> {
        self.sides[self.order[b].index()].mass_lu.solve_in_place(rhs)
    }

    fn after_block(&mut self, b: usize, t: f64, w: &[f64]) -> Result<()> {
        self.update_load_from(self.order[b], t, w)
    }

    /// The first block's load is taken from the other layer's predicted state.
    fn begin_stage(&mut self, t: f64, w: &[f64]) -> Result<()> {
        self.update_load_from(self.order[1], t, w)
    }

    fn checkpoint(&mut self) {
        self.saved = Some(self.species_loads.clone());
    }

    fn restore(&mut self) {
        if let Some(s) = self.saved.clone() {
            self.species_loads = s;
        }
    }
}

/// A bilayer model with its integrator state.
pub struct Simulation {
    pub model: Bilayer,
    pub state: StepState,
    pub params: ControllerParams,
    pub log: Vec<StepRecord>,
}

impl Simulation {
    /// Seeds the transmission loads from `w0`, brings the mechanics into
    /// equilibrium with `w0` and evaluates the first stage derivative.
    pub fn new(mut model: Bilayer, t0: f64, w0: Vec<f64>, params: ControllerParams) -> Result<Self> {
        params.validate()?;
        if w0.len() != model.global_len() {
            bail!(Argument, "initial state has {} entries, expected {}", w0.len(), model.global_len());
        }
        if !model.loads_ready {
            model.init_transmission(t0, &w0)?;
        }
        model.equilibrate_mechanics(t0, &w0, 200, 1e-10)?;
        let mut state = StepState::new(t0, w0, &params);
        state.initialize(&mut model)?;
        Ok(Simulation { model, state, params, log: Vec::new() })
    }

    pub fn t(&self) -> f64 {
        self.state.t
    }

    /// One attempted step towards `t_final`; accepted steps also advance the
    /// mechanics and rescale the step size.
    pub fn attempt(&mut self, t_final: f64) -> Result<StepRecord> {
        prepare_step(&mut self.state, t_final, &self.params);
        let (t0, dt) = (self.state.t, self.state.dt);
        let rec = match trbdf2_step(&mut self.model, &mut self.state, &self.params)? {
            StepOutcome::Accepted { err, iters } => {
                self.model.advance_mechanics(self.state.t, dt, &self.state.w)?;
                accept_and_rescale(&mut self.state, err, &self.params);
                StepRecord { t: t0, dt, err, accepted: true, iters, cause: Cause::None }
            }
            StepOutcome::Rejected { cause, err, iters } => StepRecord { t: t0, dt, err, accepted: false, iters, cause },
        };
        self.log.push(rec);
        Ok(rec)
    }

    /// Attempts steps until one is accepted.
    pub fn advance(&mut self, t_final: f64) -> Result<StepRecord> {
        loop {
            let rec = self.attempt(t_final)?;
            if rec.accepted {
                return Ok(rec);
            }
        }
    }

    /// Runs to `t_final`, calling `on_accept` after each accepted step.
    pub fn run(&mut self, t_final: f64, mut on_accept: impl FnMut(&Simulation) -> Result<()>) -> Result<()> {
        let tiny = 1e-12 * t_final.abs().max(1.0);
        while self.state.t < t_final - tiny {
            self.advance(t_final)?;
            on_accept(self)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BilayerState {
        self.model.snapshot(self.state.t, self.state.dt, &self.state.w)
    }
}
