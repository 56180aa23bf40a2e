use std::path::Path;

use mechanochem::mesh::Side;
use mechanochem::output::{layer_fields, summarize, vtk_string, FieldStats};
use mechanochem::scenario::{example2_config, example3_config, run_scenario, ScenarioConfig};
use mechanochem::Error;

fn config_file(name: &str) -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ScenarioConfig::from_file(&path).unwrap()
}

#[test]
fn shipped_configs_match_presets() {
    let mut ex2 = example2_config(50, 500.0);
    ex2.controller.dt0 = 1e-3;
    ex2.output.dir = "out/example2".into();
    ex2.output.snapshot_every = 25;
    assert_eq!(config_file("example2.toml"), ex2);
    let mut ex3 = example3_config(50, 2000.0);
    ex3.output.dir = "out/example3".into();
    ex3.output.snapshot_every = 50;
    assert_eq!(config_file("example3.toml"), ex3);
    config_file("nonlinear_diffusion.toml").validate().unwrap();
}

#[test]
fn echo_round_trips() {
    for cfg in [ScenarioConfig::default(), example3_config(12, 3.0), config_file("nonlinear_diffusion.toml")] {
        let text = cfg.to_toml().unwrap();
        assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), cfg, "{text}");
    }
}

#[test]
fn validation_names_the_field() {
    let cases: [(&str, &str); 6] = [
        ("[layers.d]\nnu = 0.5\n", "layers.d.nu"),
        ("[layers.e]\nyoung = -1.0\n", "layers.e.young"),
        ("[layers.d]\nk = [1.0]\n", "layers.d.k"),
        ("[coupling]\nsweeps = 0\n", "coupling.sweeps"),
        ("t_final = 0.0\n", "t_final"),
        ("[initial]\nbase = [1.0]\n", "initial.base"),
    ];
    for (text, field) in cases {
        match ScenarioConfig::from_toml(text) {
            Err(Error::Config(msg)) => assert!(msg.starts_with(field), "{msg}"),
            other => panic!("{text:?} gave {other:?}"),
        }
    }
    match ScenarioConfig::from_toml("seed = \"x\"\n") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn initial_perturbation_is_seeded_and_shared_on_the_interface() {
    let mut cfg = ScenarioConfig { seed: 3, ..Default::default() };
    cfg.initial.variance = 0.01;
    let model = cfg.build_model().unwrap();
    let w = cfg.initial_state(&model).unwrap();
    assert_eq!(w, cfg.initial_state(&model).unwrap());
    cfg.seed = 4;
    assert_ne!(w, cfg.initial_state(&model).unwrap());
    let f = layer_fields(&model, &w);
    let base = f[0].species[1][0];
    let a = (3.0f64 * 0.01).sqrt();
    let w1: Vec<f64> = f.iter().flat_map(|l| l.species[0].iter().copied()).collect();
    for l in &f {
        assert!(l.species[1].iter().all(|&x| x == base));
    }
    let w_star =
        mechanochem::kinetics::gm_steady_state(&mechanochem::kinetics::GMParams::new([0.0, 1.0, 1.0, 0.35, 1.0, 1.0]))
            .unwrap();
    assert_eq!(base, w_star[1]);
    let eta: Vec<f64> = w1.iter().map(|x| x / w_star[0] - 1.0).collect();
    assert!(eta.iter().all(|e| e.abs() <= a * (1.0 + 1e-12)));
    let var = eta.iter().map(|e| e * e).sum::<f64>() / eta.len() as f64;
    assert!((var / 0.01 - 1.0).abs() < 0.35, "sample variance {var}");
    for n in model.map.nodes() {
        assert_eq!(f[0].species[0][n.d_vertex], f[1].species[0][n.e_vertex]);
    }
}

#[test]
fn snapshot_layout() {
    let mut cfg = example3_config(6, 1.0);
    cfg.geometry.ny_e = 2;
    let mut sim = cfg.build().unwrap();
    sim.advance(f64::MAX).unwrap();
    let fields = layer_fields(&sim.model, &sim.state.w);
    for (s, f) in Side::BOTH.into_iter().zip(&fields) {
        let mesh = &sim.model.side(s).mesh;
        let (nv, nt) = (mesh.num_vertices(), mesh.num_triangles());
        let vtk = vtk_string(mesh, f, "test");
        let lines: Vec<&str> = vtk.lines().collect();
        assert_eq!(lines[4], format!("POINTS {nv} double"));
        assert_eq!(lines[5 + nv], format!("CELLS {nt} {}", 4 * nt));
        assert_eq!(lines[6 + nv + nt], format!("CELL_TYPES {nt}"));
        assert_eq!(lines[7 + nv + 2 * nt], format!("POINT_DATA {nv}"));
        // w1, w2, |u|, p, each with a lookup line, then the vector block.
        assert_eq!(lines.len(), 8 + nv + 2 * nt + 4 * (nv + 2) + nv + 1);
        assert!(f.magnitude().iter().any(|&m| m > 0.0));
        assert!(f.pressure.iter().any(|&p| p != 0.0));
    }
    let rows = summarize(&fields);
    assert_eq!(rows.len(), 8);
    let st = FieldStats::of(&[1.0, 3.0, 2.0]);
    assert_eq!((st.min, st.max, st.mean), (1.0, 3.0, 2.0));
}

#[test]
fn run_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig { t_final: 2.0, seed: 9, ..Default::default() };
    cfg.output.snapshot_every = 2;
    let a = run_scenario(&cfg, Some(&dir.path().join("a"))).unwrap();
    let b = run_scenario(&cfg, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.t, 2.0);
    let steps = std::fs::read_to_string(dir.path().join("a/steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 1 + a.log.len());
    let iface = std::fs::read_to_string(dir.path().join("a/interface.csv")).unwrap();
    assert_eq!(iface.lines().count(), 1 + a.accepted);
    let echoed = ScenarioConfig::from_file(&dir.path().join("a/config.toml")).unwrap();
    assert_eq!(echoed, cfg);
    let last = a.accepted.div_ceil(2);
    assert!(dir.path().join(format!("a/snapshot_E_{last:04}.vtk")).exists());
}
