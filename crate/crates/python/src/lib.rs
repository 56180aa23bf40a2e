//! Python bindings: run scenarios from TOML text, print the tableau, run
//! convergence studies.

use std::path::PathBuf;

use mechanochem::integrator::tableau as rk_tableau;
use mechanochem::scenario::{run_scenario, ScenarioConfig};
use mechanochem::verification::{convergence_study, StudyKind, StudySettings};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: mechanochem::Error) -> PyErr {
    match e {
        mechanochem::Error::Config(_) | mechanochem::Error::Parse { .. } | mechanochem::Error::Argument(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Every configuration key with its default value, as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ScenarioConfig::default().to_toml().map_err(to_py)
}

/// Parse, validate and echo a configuration back with defaults filled in.
#[pyfunction]
fn effective_config(text: &str) -> PyResult<String> {
    ScenarioConfig::from_toml(text).and_then(|c| c.to_toml()).map_err(to_py)
}

/// Run a scenario given as TOML text. With `out_dir`, the usual CSV and VTK
/// files are written there.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None, seed=None))]
fn run<'py>(
    py: Python<'py>,
    config: &str,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = ScenarioConfig::from_toml(config).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let summary = py.detach(|| run_scenario(&cfg, out_dir.as_deref())).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("t", summary.t)?;
    out.set_item("accepted", summary.accepted)?;
    out.set_item("rejected", summary.rejected)?;
    let steps: Vec<(f64, f64, f64, bool, usize, usize, String)> = summary
        .log
        .iter()
        .map(|r| (r.t, r.dt, r.err, r.accepted, r.iters[0], r.iters[1], r.cause.to_string()))
        .collect();
    out.set_item("steps", steps)?;
    let fields = PyDict::new(py);
    for (side, name, st) in &summary.fields {
        fields.set_item(format!("{side}.{name}"), (st.min, st.max, st.mean))?;
    }
    out.set_item("fields", fields)?;
    out.set_item("w", summary.w)?;
    Ok(out)
}

/// Butcher coefficients as a dict of `gamma`, `a`, `b`, `bhat`, `c`.
#[pyfunction]
fn tableau(py: Python<'_>) -> PyResult<Bound<'_, PyDict>> {
    let t = rk_tableau();
    let out = PyDict::new(py);
    out.set_item("gamma", t.gamma)?;
    out.set_item("a", t.a.map(|r| r.to_vec()).to_vec())?;
    out.set_item("b", t.b.to_vec())?;
    out.set_item("bhat", t.bhat.to_vec())?;
    out.set_item("c", t.c.to_vec())?;
    Ok(out)
}

/// Convergence study (`"space"` or `"time"`) returned as CSV text.
#[pyfunction]
fn verify(py: Python<'_>, kind: &str, levels: usize) -> PyResult<String> {
    let kind: StudyKind = kind.parse().map_err(to_py)?;
    py.detach(|| convergence_study(kind, levels, &StudySettings::default()).and_then(|t| t.to_csv())).map_err(to_py)
}

#[pymodule]
fn mechanochem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(effective_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(tableau, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
