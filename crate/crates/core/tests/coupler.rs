use mechanochem::coupler::{Bilayer, SideParams, Simulation, Subdomain, SweepOptions, Transmission};
use mechanochem::integrator::ControllerParams;
use mechanochem::kinetics::{gm_steady_state, CrossDiffusion, GMParams, Kinetics};
use mechanochem::mesh::{build_bilayer, Rect, Side};
use mechanochem::verification::{example1_model, ManufacturedCase, StudySettings};

fn gm() -> GMParams {
    GMParams::new([0.0, 1.0, 1.0, 0.35, 1.0, 1.0])
}

fn layer(kinetics: Kinetics, c_f: f64, c_g: f64) -> SideParams {
    let m = kinetics.num_species();
    SideParams {
        young: 10.0,
        nu: 0.3,
        alpha: 1.0,
        j: 1.0,
        k: vec![1.0; m],
        c_f,
        c_g,
        kinetics,
        diffusion: CrossDiffusion::diagonal(&[1.0, 30.0][..m]),
    }
}

fn bilayer(n: usize, d: SideParams, e: SideParams, mechanics: bool) -> Bilayer {
    let (md, me, map) =
        build_bilayer(Rect::new(0.0, 4.0, 0.0, 4.0), Rect::new(0.0, 4.0, 4.0, 6.0), n, n, n / 2).unwrap();
    Bilayer::new(Subdomain::new(md, d, mechanics).unwrap(), Subdomain::new(me, e, mechanics).unwrap(), map).unwrap()
}

/// Steady state plus a smooth bump per side.
fn perturbed(model: &Bilayer, base: [f64; 2], amp: f64) -> Vec<f64> {
    let mut w = Vec::new();
    for s in Side::BOTH {
        for x in model.side(s).mesh.vertices() {
            let b = amp * (x[0]).cos() * (0.7 * x[1]).sin();
            w.push(base[0] + b);
            w.push(base[1] - 0.5 * b);
        }
    }
    w
}

#[test]
fn zero_coupling_leaves_mechanics_at_rest() {
    let model = bilayer(6, layer(Kinetics::Gm(gm()), 0.0, 0.0), layer(Kinetics::Gm(gm()), 0.0, 0.0), true);
    let ws = gm_steady_state(&gm()).unwrap();
    let w0 = perturbed(&model, ws, 0.1);
    let mut sim =
        Simulation::new(model, 0.0, w0.clone(), ControllerParams { dt0: 0.05, ..Default::default() }).unwrap();
    for _ in 0..5 {
        sim.advance(10.0).unwrap();
        for sd in &sim.model.sides {
            assert!(sd.u.iter().chain(&sd.p).all(|&x| x == 0.0));
        }
    }
    let moved = sim.state.w.iter().zip(&w0).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(moved > 1e-4, "species did not evolve ({moved})");
}

#[test]
fn uniform_steady_state_is_a_fixed_point() {
    let model = bilayer(6, layer(Kinetics::Gm(gm()), 0.0, 0.0), layer(Kinetics::Gm(gm()), 0.0, 0.0), false);
    let ws = gm_steady_state(&gm()).unwrap();
    let w0 = perturbed(&model, ws, 0.0);
    let params = ControllerParams { dt0: 0.1, ..Default::default() };
    let bound = 10.0 * params.r_tol;
    let mut sim = Simulation::new(model, 0.0, w0, params).unwrap();
    for _ in 0..100 {
        sim.advance(f64::MAX).unwrap();
    }
    for (i, x) in sim.state.w.iter().enumerate() {
        let r = (x - ws[i % 2]).abs() / ws[i % 2];
        assert!(r <= bound, "entry {i}: relative drift {r:e}");
    }
}

#[test]
fn reaction_free_mass_is_conserved() {
    let none = Kinetics::None { species: 2 };
    let mut d = layer(none.clone(), 0.0, 0.0);
    d.k = vec![30.0, 50.0];
    let mut e = layer(none, 0.0, 0.0);
    e.k = vec![20.0, 40.0];
    let model = bilayer(8, d, e, false).with_transmission(Transmission::Variational);
    let w0 = perturbed(&model, [1.0, 2.0], 0.3);
    // Summed weights near h / (2 gamma dt) make the stage iteration contract fast.
    let params = ControllerParams { dt0: 0.01, dt_max: 0.01, adaptive: false, tol_n: 1e-12, ..Default::default() };
    let mut sim = Simulation::new(model, 0.0, w0.clone(), params).unwrap();
    let m0 = sim.model.total_mass(&w0);
    for _ in 0..100 {
        sim.advance(f64::MAX).unwrap();
    }
    let m1 = sim.model.total_mass(&sim.state.w);
    let drift = ((m1 - m0) / m0).abs();
    assert!(drift < 1e-8, "relative mass drift {drift:e}");
    let changed = sim.state.w.iter().zip(&w0).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(changed > 1e-3, "t={} changed={changed}", sim.t());
}

#[test]
fn velocity_is_backward_difference_of_displacement() {
    let model = bilayer(6, layer(Kinetics::Gm(gm()), 2.0, 0.5), layer(Kinetics::Gm(gm()), 1.0, 1.0), true);
    let ws = gm_steady_state(&gm()).unwrap();
    let w0 = perturbed(&model, ws, 0.1);
    let mut sim = Simulation::new(model, 0.0, w0, ControllerParams { dt0: 0.02, ..Default::default() }).unwrap();
    let mut moved = 0.0f64;
    for _ in 0..6 {
        let before: Vec<Vec<f64>> = sim.model.sides.iter().map(|s| s.u.clone()).collect();
        let rec = sim.advance(10.0).unwrap();
        for (sd, u0) in sim.model.sides.iter().zip(&before) {
            for ((v, u1), u0) in sd.v.iter().zip(&sd.u).zip(u0) {
                let d = u1 - u0;
                assert!((v * rec.dt - d).abs() <= 1e-14 * (1.0 + u1.abs()), "{} vs {}", v * rec.dt, d);
                moved = moved.max(d.abs());
            }
        }
    }
    assert!(moved > 0.0);
}

fn manufactured_w0(model: &Bilayer, case: &ManufacturedCase) -> Vec<f64> {
    let mut w = case.interpolate_species(&model.side(Side::D).mesh, 0.0);
    w.extend(case.interpolate_species(&model.side(Side::E).mesh, 0.0));
    w
}

#[test]
fn block_order_does_not_change_fixed_point() {
    let settings = StudySettings::default();
    let opts = SweepOptions { tol: 1e-12, newton_tol: 1e-12, max_sweeps: 1000, ..settings.sweeps };
    let mut fields = Vec::new();
    for order in [[Side::D, Side::E], [Side::E, Side::D]] {
        let (model, case) = example1_model(5, &settings, 0.0).unwrap();
        let mut model = model.with_order(order).unwrap();
        let mut w = manufactured_w0(&model, &case);
        let rep = model.schwarz_sweeps(0.0, &mut w, opts).unwrap();
        assert!(rep.converged, "order {order:?}: {:?}", rep.history.last());
        let mut all = w;
        for sd in &model.sides {
            all.extend(&sd.u);
        }
        fields.push(all);
    }
    let diff = fields[0].iter().zip(&fields[1]).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(diff < 1e-8, "orders disagree by {diff:e}");
}

#[test]
fn infinite_tolerance_runs_every_sweep() {
    let settings = StudySettings::default();
    let (mut model, case) = example1_model(5, &settings, 0.0).unwrap();
    let mut w = manufactured_w0(&model, &case);
    let opts = SweepOptions { tol: f64::INFINITY, max_sweeps: 7, ..settings.sweeps };
    let rep = model.schwarz_sweeps(0.0, &mut w, opts).unwrap();
    assert_eq!(rep.sweeps, 7);
    assert_eq!(rep.history.len(), 7);
    assert!(!rep.converged);
    let opts = SweepOptions { max_sweeps: 0, ..opts };
    assert!(model.schwarz_sweeps(0.0, &mut w, opts).is_err());
}

#[test]
fn diffusion_only_sweeps_contract() {
    let mut p = layer(Kinetics::None { species: 2 }, 0.0, 0.0);
    p.diffusion = CrossDiffusion::diagonal(&[1.0, 2.0]);
    let case = ManufacturedCase::from_params(&p, &p, 0.0).unwrap();
    let (md, me, map) = build_bilayer(Rect::new(0.0, 1.0, 0.0, 1.0), Rect::new(0.0, 1.0, 1.0, 1.4), 10, 10, 4).unwrap();
    let mut model =
        Bilayer::new(Subdomain::new(md, p.clone(), false).unwrap(), Subdomain::new(me, p, false).unwrap(), map)
            .unwrap()
            .with_forcing(Box::new(case.clone()));
    let mut w = vec![0.0; model.global_len()];
    let opts = SweepOptions { tol: f64::NAN, max_sweeps: 5, ..Default::default() };
    let rep = model.schwarz_sweeps(0.0, &mut w, opts).unwrap();
    let jumps: Vec<f64> = rep.history.iter().map(|r| r.species_jump).collect();
    for p in jumps.windows(2) {
        assert!(p[1] < p[0], "jump history not decreasing: {jumps:?}");
    }
    let robin: Vec<f64> = rep.history.iter().map(|r| r.species_robin).collect();
    assert!(robin[4] < robin[0], "{robin:?}");
}
