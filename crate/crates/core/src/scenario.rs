//! Scenario configuration (TOML) and the driver that runs it.
//!
//! Every key is optional; an empty file is a short run on a small mesh. See
//! the repository README for the full key list.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::coupler::{Bilayer, Forcing, MechanicsMode, SideParams, Simulation, Subdomain, Transmission};
use crate::error::{bail, Error, Result};
use crate::integrator::{ControllerParams, StepRecord};
use crate::kinetics::{gm_steady_state, CrossDiffusion, GMParams, Kinetics};
use crate::mesh::{build_bilayer, import_bilayer, Rect, Side};
use crate::output::{
    interface_row, layer_fields, step_row, summarize, summary_csv, vtk_string, FieldStats, INTERFACE_HEADER,
    STEP_HEADER,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub d: Rect,
    pub e: Rect,
    pub nx: usize,
    pub ny_d: usize,
    pub ny_e: usize,
    /// Mesh in the text format of [`crate::mesh::export_bilayer`]; replaces the
    /// structured mesh when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh_file: Option<PathBuf>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            d: Rect::new(0.0, 10.0, 0.0, 10.0),
            e: Rect::new(0.0, 10.0, 10.0, 15.0),
            nx: 6,
            ny_d: 6,
            ny_e: 3,
            mesh_file: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanicsSetting {
    #[default]
    Off,
    Transient,
    Stationary,
}

/// Prescribed displacement on the clamped boundary,
/// `u = (a0 cos(k (x - y)), a1 sin(k (x + y)))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveDisplacement {
    pub amplitude: [f64; 2],
    pub wavenumber: f64,
}

impl Forcing for WaveDisplacement {
    fn has_sources(&self) -> bool {
        false
    }
    fn species_source(&self, _: Side, _: [f64; 2], _: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn species_flux(&self, _: Side, _: [f64; 2], _: [f64; 2], _: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn species_jump(&self, _: [f64; 2], _: [f64; 2], _: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn body_force(&self, _: Side, _: [f64; 2], _: f64) -> [f64; 2] {
        [0.0; 2]
    }
    fn surface_traction(&self, _: [f64; 2], _: [f64; 2], _: f64) -> [f64; 2] {
        [0.0; 2]
    }
    fn traction_jump(&self, _: [f64; 2], _: [f64; 2], _: f64) -> [f64; 2] {
        [0.0; 2]
    }
    fn displacement(&self, _: Side, x: [f64; 2], _: f64) -> [f64; 2] {
        let k = self.wavenumber;
        [self.amplitude[0] * (k * (x[0] - x[1])).cos(), self.amplitude[1] * (k * (x[0] + x[1])).sin()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    pub transmission: Transmission,
    pub mechanics: MechanicsSetting,
    /// Elasticity passes over both layers after each accepted step.
    pub sweeps: usize,
    pub order: [Side; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boundary_displacement: Option<WaveDisplacement>,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        CouplingConfig {
            transmission: Transmission::Pointwise,
            mechanics: MechanicsSetting::Off,
            sweeps: 1,
            order: Side::BOTH,
            boundary_displacement: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerConfig {
    pub young: f64,
    pub nu: f64,
    pub alpha: f64,
    pub j: f64,
    pub k: Vec<f64>,
    pub c_f: f64,
    pub c_g: f64,
    pub kinetics: Kinetics,
    pub diffusion: CrossDiffusion,
}

pub const EXAMPLE_RHO: [f64; 6] = [0.0, 1.0, 1.0, 0.35, 1.0, 1.0];

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            young: 10.0,
            nu: 0.3,
            alpha: 1.0,
            j: 1.0,
            k: vec![1.0, 1.0],
            c_f: 0.0,
            c_g: 0.0,
            kinetics: Kinetics::Gm(GMParams::new(EXAMPLE_RHO)),
            diffusion: CrossDiffusion::diagonal(&[1.0, 30.0]),
        }
    }
}

impl LayerConfig {
    fn validate(&self, name: &str) -> Result<()> {
        let field = |f: &str| format!("layers.{name}.{f}");
        if !(self.young > 0.0 && self.young.is_finite()) {
            bail!(Config, "{}: Young modulus must be positive (got {})", field("young"), self.young);
        }
        if !(self.nu > 0.0 && self.nu < 0.5) {
            bail!(Config, "{}: Poisson ratio must lie in (0, 0.5) (got {})", field("nu"), self.nu);
        }
        for (f, v) in [("alpha", self.alpha), ("j", self.j), ("c_f", self.c_f), ("c_g", self.c_g)] {
            if !(v >= 0.0 && v.is_finite()) {
                bail!(Config, "{}: must be nonnegative (got {v})", field(f));
            }
        }
        if self.k.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
            bail!(Config, "{}: weights must be nonnegative", field("k"));
        }
        let rates: &[f64] = match &self.kinetics {
            Kinetics::None { .. } => &[],
            Kinetics::Gm(p) => &p.rho,
            Kinetics::Skin4(p) => &p.r,
        };
        if rates.iter().any(|r| !(*r >= 0.0)) {
            bail!(Config, "{}: rates must be nonnegative", field("kinetics"));
        }
        let m = self.kinetics.num_species();
        if self.k.len() != m {
            bail!(Config, "{}: expected {m} entries, got {}", field("k"), self.k.len());
        }
        if self.diffusion.num_species() != m {
            bail!(Config, "{}: expected {m} species, got {}", field("diffusion"), self.diffusion.num_species());
        }
        self.diffusion.validate().map_err(|e| Error::Config(format!("{}: {e}", field("diffusion"))))
    }

    pub fn side_params(&self) -> SideParams {
        SideParams {
            young: self.young,
            nu: self.nu,
            alpha: self.alpha,
            j: self.j,
            k: self.k.clone(),
            c_f: self.c_f,
            c_g: self.c_g,
            kinetics: self.kinetics.clone(),
            diffusion: self.diffusion.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayersConfig {
    pub d: LayerConfig,
    pub e: LayerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    /// Uniform base state; the Gierer-Meinhardt equilibrium of layer D when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<Vec<f64>>,
    /// Variance of the nodal uniform noise `eta`; the first species starts at
    /// `base[0] (1 + eta)`.
    pub variance: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig { base: None, variance: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// VTK snapshot every this many accepted steps (0: initial and final only).
    pub snapshot_every: usize,
    /// Interface residual row every this many accepted steps (0: never).
    pub interface_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("output"), snapshot_every: 0, interface_every: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub t_final: f64,
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub coupling: CouplingConfig,
    pub layers: LayersConfig,
    pub initial: InitialConfig,
    pub controller: ControllerParams,
    pub output: OutputConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            t_final: 1.0,
            seed: 0,
            geometry: GeometryConfig::default(),
            coupling: CouplingConfig::default(),
            layers: LayersConfig::default(),
            initial: InitialConfig::default(),
            controller: ControllerParams::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ScenarioConfig {
    /// Parses and validates; errors carry the line of the offending key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0);
            Error::Parse { line, msg: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// The configuration with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise configuration: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            bail!(Config, "t_final: must be positive (got {})", self.t_final);
        }
        let g = &self.geometry;
        if g.mesh_file.is_none() && (g.nx == 0 || g.ny_d == 0 || g.ny_e == 0) {
            bail!(Config, "geometry: nx, ny_d and ny_e must be positive");
        }
        self.layers.d.validate("d")?;
        self.layers.e.validate("e")?;
        let m = self.layers.d.kinetics.num_species();
        if self.layers.e.kinetics.num_species() != m {
            bail!(Config, "layers.e.kinetics: species count differs from layers.d");
        }
        if self.coupling.order[0] == self.coupling.order[1] {
            bail!(Config, "coupling.order: must visit both layers");
        }
        if self.coupling.sweeps == 0 {
            bail!(Config, "coupling.sweeps: must be at least 1");
        }
        if let Some(b) = &self.initial.base {
            if b.len() != m || b.iter().any(|x| !x.is_finite()) {
                bail!(Config, "initial.base: expected {m} finite values");
            }
        }
        if !(self.initial.variance >= 0.0 && self.initial.variance.is_finite()) {
            bail!(Config, "initial.variance: must be nonnegative");
        }
        self.controller.validate().map_err(|e| Error::Config(format!("controller: {e}")))
    }

    fn base_state(&self) -> Result<Vec<f64>> {
        if let Some(b) = &self.initial.base {
            return Ok(b.clone());
        }
        match &self.layers.d.kinetics {
            Kinetics::Gm(p) => Ok(gm_steady_state(p)?.to_vec()),
            _ => bail!(Config, "initial.base: required unless layer D uses Gierer-Meinhardt kinetics"),
        }
    }

    pub fn build_model(&self) -> Result<Bilayer> {
        let g = &self.geometry;
        let (md, me, map) = match &g.mesh_file {
            Some(p) => import_bilayer(&fs::read_to_string(p)?)?,
            None => build_bilayer(g.d, g.e, g.nx, g.ny_d, g.ny_e)?,
        };
        let mech = self.coupling.mechanics != MechanicsSetting::Off;
        let d = Subdomain::new(md, self.layers.d.side_params(), mech)?;
        let e = Subdomain::new(me, self.layers.e.side_params(), mech)?;
        let mut model = Bilayer::new(d, e, map)?
            .with_transmission(self.coupling.transmission)
            .with_order(self.coupling.order)?
            .with_mechanics(match self.coupling.mechanics {
                MechanicsSetting::Stationary => MechanicsMode::Stationary,
                _ => MechanicsMode::Transient,
            });
        if let Some(b) = self.coupling.boundary_displacement {
            model = model.with_forcing(Box::new(b));
        }
        model.sweeps = self.coupling.sweeps;
        Ok(model)
    }

    /// Base state with the seeded perturbation of the first species; interface
    /// nodes get the same draw on both layers.
    pub fn initial_state(&self, model: &Bilayer) -> Result<Vec<f64>> {
        let base = self.base_state()?;
        let m = base.len();
        let a = (3.0 * self.initial.variance).sqrt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        let mut eta =
            [vec![0.0; model.side(Side::D).mesh.num_vertices()], vec![0.0; model.side(Side::E).mesh.num_vertices()]];
        for s in Side::BOTH {
            for x in eta[s.index()].iter_mut() {
                *x = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
            }
        }
        for n in model.map.nodes() {
            eta[1][n.e_vertex] = eta[0][n.d_vertex];
        }
        let mut w = vec![0.0; model.global_len()];
        for s in Side::BOTH {
            let sd = model.side(s);
            let ws = &mut w[model.range(s)];
            for (v, e) in eta[s.index()].iter().enumerate() {
                for i in 0..m {
                    ws[sd.dofs.species(v, i)] = if i == 0 { base[0] * (1.0 + e) } else { base[i] };
                }
            }
        }
        Ok(w)
    }

    pub fn build(&self) -> Result<Simulation> {
        let model = self.build_model()?;
        let w0 = self.initial_state(&model)?;
        Simulation::new(model, 0.0, w0, self.controller.clone())
    }
}

/// Reduced two-dimensional pattern scenario without mechanics (Example 2
/// parameters on a structured `n x n` / `n x n/2` mesh).
pub fn example2_config(n: usize, t_final: f64) -> ScenarioConfig {
    ScenarioConfig {
        t_final,
        seed: 7,
        geometry: GeometryConfig {
            d: Rect::new(0.0, 50.0, 0.0, 50.0),
            e: Rect::new(0.0, 50.0, 50.0, 75.0),
            nx: n,
            ny_d: n,
            ny_e: (n / 2).max(1),
            mesh_file: None,
        },
        ..Default::default()
    }
}

/// Example 2 with elasticity, boundary displacement and the tighter controller.
pub fn example3_config(n: usize, t_final: f64) -> ScenarioConfig {
    let mut cfg = example2_config(n, t_final);
    cfg.coupling.mechanics = MechanicsSetting::Transient;
    cfg.coupling.boundary_displacement =
        Some(WaveDisplacement { amplitude: [0.5, 0.75], wavenumber: 2.5 * std::f64::consts::PI });
    let (d, e) = (&mut cfg.layers.d, &mut cfg.layers.e);
    d.young = 1000.0;
    d.nu = 0.475;
    d.c_f = 150.0;
    d.c_g = 1.0;
    e.young = 250.0;
    e.nu = 0.3;
    e.c_f = 20.0;
    e.c_g = 1.0;
    cfg.controller.a_tol = 1e-6;
    cfg.controller.r_tol = 1e-4;
    cfg.controller.tol_n = 1e-4;
    cfg
}

/// Outcome of [`run_scenario`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub t: f64,
    pub accepted: usize,
    pub rejected: usize,
    pub log: Vec<StepRecord>,
    pub fields: Vec<(Side, String, FieldStats)>,
    /// Final species of both layers (global vector).
    pub w: Vec<f64>,
}

impl RunSummary {
    pub fn accepted_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.log.iter().filter(|r| r.accepted)
    }
}

/// Runs a scenario. With `out_dir` set, writes `steps.csv`, `interface.csv`,
/// `summary.csv`, `config.toml` and `snapshot_<side>_<k>.vtk` there.
pub fn run_scenario(cfg: &ScenarioConfig, out_dir: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let mut sim = cfg.build()?;
    let mut interface = format!("{INTERFACE_HEADER}\n");
    let mut snapshots = 0usize;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        write_snapshot(dir, &sim, &mut snapshots)?;
    }
    let mut accepted = 0usize;
    let every = cfg.output.snapshot_every;
    let iface_every = cfg.output.interface_every;
    sim.run(cfg.t_final, |s| {
        accepted += 1;
        if let Some(dir) = out_dir {
            if iface_every > 0 && accepted.is_multiple_of(iface_every) {
                let r = s.model.interface_residual(s.t(), &s.state.w, accepted)?;
                interface.push_str(&interface_row(accepted, s.t(), &r));
                interface.push('\n');
            }
            if every > 0 && accepted.is_multiple_of(every) {
                write_snapshot(dir, s, &mut snapshots)?;
            }
        }
        Ok(())
    })?;
    let fields = layer_fields(&sim.model, &sim.state.w);
    let stats = summarize(&fields);
    if let Some(dir) = out_dir {
        if every == 0 || !accepted.is_multiple_of(every) {
            write_snapshot(dir, &sim, &mut snapshots)?;
        }
        let mut steps = format!("{STEP_HEADER}\n");
        for r in &sim.log {
            steps.push_str(&step_row(r));
            steps.push('\n');
        }
        fs::write(dir.join("steps.csv"), steps)?;
        fs::write(dir.join("interface.csv"), interface)?;
        fs::write(dir.join("summary.csv"), summary_csv(&stats))?;
    }
    Ok(RunSummary {
        t: sim.t(),
        accepted,
        rejected: sim.log.len() - accepted,
        log: sim.log,
        fields: stats,
        w: sim.state.w,
    })
}

fn write_snapshot(dir: &Path, sim: &Simulation, count: &mut usize) -> Result<()> {
    let fields = layer_fields(&sim.model, &sim.state.w);
    for f in &fields {
        let mesh = &sim.model.side(f.side).mesh;
        let title = format!("layer {} t={:e}", f.side, sim.t());
        fs::write(dir.join(format!("snapshot_{}_{:04}.vtk", f.side, count)), vtk_string(mesh, f, &title))?;
    }
    *count += 1;
    Ok(())
}
