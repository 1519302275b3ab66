//! Python bindings for `lifespan-core`.
//!
//! Reports come back as plain dicts and lists mirroring the JSON reports
//! written by the `lifespan-lab` CLI.

use lifespan_core::functional::{self, FunctionalConfig, VerifyOptions};
use lifespan_core::ode::{self, IntegratorControls, OdeSpec, OdeVariant, TimeCoordinate};
use lifespan_core::wave::{self, DataProfile, DomainPolicy, GMode, ProfileShape, RadialField};
use lifespan_core::{fit, odi, LabError};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

fn to_py_err(err: LabError) -> PyErr {
    if err.is_validation() {
        PyValueError::new_err(err.to_string())
    } else {
        PyRuntimeError::new_err(err.to_string())
    }
}

fn value_to_py<'py>(py: Python<'py>, value: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match value {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(f)) => f.into_pyobject(py)?.into_any(),
            _ => py.None().into_bound(py),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(value_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, value_to_py(py, v)?)?;
            }
            dict.into_any()
        }
    })
}

/// Serializes a report into Python objects. Non-finite floats become `None`.
fn to_py<'py, T: Serialize>(py: Python<'py>, report: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    value_to_py(py, &value)
}

fn variant(name: &str) -> PyResult<OdeVariant> {
    match name {
        "critical" => Ok(OdeVariant::Critical),
        "subcritical" => Ok(OdeVariant::Subcritical),
        other => Err(PyValueError::new_err(format!("unknown variant {other:?}"))),
    }
}

fn ode_spec(variant_name: &str, a: f64, p: f64, n: u32, t0: f64) -> PyResult<OdeSpec> {
    match variant(variant_name)? {
        OdeVariant::Critical => OdeSpec::critical(a, p, t0),
        OdeVariant::Subcritical => OdeSpec::subcritical(a, p, n, t0),
    }
    .map_err(to_py_err)
}

fn controls(
    spec: &OdeSpec,
    rel_tol: f64,
    abs_tol: f64,
    threshold: f64,
    time_coordinate: Option<&str>,
) -> PyResult<IntegratorControls> {
    let mut ctrl = IntegratorControls::for_variant(spec.variant);
    ctrl.rel_tol = rel_tol;
    ctrl.abs_tol = abs_tol;
    ctrl.blowup_threshold = threshold;
    match time_coordinate {
        None => {}
        Some("physical") => ctrl.time_coordinate = TimeCoordinate::Physical,
        Some("log") => ctrl.time_coordinate = TimeCoordinate::Log,
        Some(other) => {
            return Err(PyValueError::new_err(format!(
                "unknown time coordinate {other:?}"
            )))
        }
    }
    Ok(ctrl)
}

#[pyfunction]
fn critical_exponent(n: u32) -> PyResult<f64> {
    odi::critical_exponent(n).map_err(to_py_err)
}

/// Closed-form constants of the ODI systems for dimension `n` and power `p`.
#[pyfunction]
fn sharp_constants<'py>(py: Python<'py>, n: u32, p: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &odi::sharp_constants(n, p).map_err(to_py_err)?)
}

/// Lifespan constants of the PDE for support radius `r` and data mass `a_f`.
#[pyfunction]
fn theorem_constants<'py>(
    py: Python<'py>,
    n: u32,
    p: f64,
    r: f64,
    a_f: f64,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(
        py,
        &odi::theorem_constants(n, p, r, a_f).map_err(to_py_err)?,
    )
}

#[pyfunction]
#[pyo3(signature = (variant, p, a=1.0, n=2, t0=0.125, k_max=25))]
fn odi_ladder<'py>(
    py: Python<'py>,
    variant: &str,
    p: f64,
    a: f64,
    n: u32,
    t0: f64,
    k_max: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let ladder = match self::variant(variant)? {
        OdeVariant::Critical => {
            odi::CriticalOdiParams::new(a, p, t0).and_then(|c| odi::critical_ladder(&c, k_max))
        }
        OdeVariant::Subcritical => odi::SubcriticalOdiParams::new(a, p, n, t0)
            .and_then(|c| odi::subcritical_ladder(&c, k_max)),
    }
    .map_err(to_py_err)?;
    to_py(py, &ladder)
}

/// Integrates the equality model from `(H, H') = (h0, dh0)` until blow-up.
#[pyfunction]
#[pyo3(signature = (
    variant, a, p, n=2, t0=0.125, h0=0.0, dh0=0.0, horizon=None,
    rel_tol=1e-8, abs_tol=1e-12, threshold=1e30, time_coordinate=None,
))]
#[allow(clippy::too_many_arguments)]
fn ode_blowup<'py>(
    py: Python<'py>,
    variant: &str,
    a: f64,
    p: f64,
    n: u32,
    t0: f64,
    h0: f64,
    dh0: f64,
    horizon: Option<f64>,
    rel_tol: f64,
    abs_tol: f64,
    threshold: f64,
    time_coordinate: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = ode_spec(variant, a, p, n, t0)?;
    let ctrl = controls(&spec, rel_tol, abs_tol, threshold, time_coordinate)?;
    let horizon = match horizon {
        Some(h) => h,
        None => ode::default_horizon(&spec).map_err(to_py_err)?,
    };
    let result = py
        .detach(|| ode::integrate_blowup(&spec, (h0, dh0), &ctrl, horizon))
        .map_err(to_py_err)?;
    to_py(py, &result)
}

#[pyfunction]
#[pyo3(signature = (variant, a_values, p, n=2, t0=0.125, horizon=None))]
fn ode_sweep<'py>(
    py: Python<'py>,
    variant: &str,
    a_values: Vec<f64>,
    p: f64,
    n: u32,
    t0: f64,
    horizon: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = ode_spec(variant, 1.0, p, n, t0)?;
    let ctrl = IntegratorControls::for_variant(spec.variant);
    let sweep = py
        .detach(|| ode::sweep_ode(&spec, &a_values, &ctrl, horizon))
        .map_err(to_py_err)?;
    to_py(py, &sweep)
}

/// Setup of a radial wave run with data `ε (f, g)`.
#[pyclass(name = "WaveConfig", module = "lifespan_lab", from_py_object)]
#[derive(Clone)]
struct PyWaveConfig {
    inner: wave::WaveConfig,
}

#[pymethods]
impl PyWaveConfig {
    #[new]
    #[pyo3(signature = (
        n, p, epsilon, amplitude=1.0, r_support=1.0, dr=0.005, cfl=0.5, horizon=5000.0,
        threshold=1e6, window=None, shell=false, g_equal_f=false,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n: u32,
        p: f64,
        epsilon: f64,
        amplitude: f64,
        r_support: f64,
        dr: f64,
        cfl: f64,
        horizon: f64,
        threshold: f64,
        window: Option<f64>,
        shell: bool,
        g_equal_f: bool,
    ) -> PyResult<Self> {
        let profile = DataProfile {
            shape: if shell {
                ProfileShape::ShellBump
            } else {
                ProfileShape::StandardBump
            },
            r_support,
            amplitude,
            g_mode: if g_equal_f {
                GMode::EqualToF
            } else {
                GMode::Zero
            },
        };
        let mut inner = wave::WaveConfig::new(n, p, epsilon, profile, dr, horizon);
        inner.cfl = cfl;
        inner.blowup_threshold = threshold;
        if let Some(width) = window {
            inner.domain = DomainPolicy::FrontWindow { width };
        }
        inner.validate().map_err(to_py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> u32 {
        self.inner.n
    }

    #[getter]
    fn p(&self) -> f64 {
        self.inner.p
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn dr(&self) -> f64 {
        self.inner.dr
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    /// Copy with a different `epsilon`.
    fn with_epsilon(&self, epsilon: f64) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.epsilon = epsilon;
        inner.validate().map_err(to_py_err)?;
        Ok(Self { inner })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "WaveConfig(n={}, p={}, epsilon={}, dr={}, horizon={})",
            self.inner.n, self.inner.p, self.inner.epsilon, self.inner.dr, self.inner.horizon
        )
    }
}

/// Runs the solver and returns the lifespan estimate.
#[pyfunction]
#[pyo3(signature = (config, resolution_check=false))]
fn pde_run<'py>(
    py: Python<'py>,
    config: &PyWaveConfig,
    resolution_check: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let estimate = py
        .detach(|| {
            if resolution_check {
                wave::detect_lifespan_with_resolution(&cfg)
            } else {
                wave::detect_lifespan(&cfg)
            }
        })
        .map_err(to_py_err)?;
    to_py(py, &estimate)
}

#[pyfunction]
fn pde_sweep<'py>(
    py: Python<'py>,
    config: &PyWaveConfig,
    epsilons: Vec<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let sweep = py
        .detach(|| wave::pde_sweep(&cfg, &epsilons))
        .map_err(to_py_err)?;
    to_py(py, &sweep)
}

/// Runs the solver with snapshots and checks the functional lower bounds.
#[pyfunction]
#[pyo3(signature = (config, beta, r0=None, t_fraction=0.8, companion_dr=None))]
fn verify_functional<'py>(
    py: Python<'py>,
    config: &PyWaveConfig,
    beta: f64,
    r0: Option<f64>,
    t_fraction: f64,
    companion_dr: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let r_support = config.inner.profile.r_support;
    let fcfg = match r0 {
        Some(r0) => FunctionalConfig::new(beta, r0, r_support),
        None => FunctionalConfig::with_default_r0(beta, r_support),
    }
    .map_err(to_py_err)?;
    let opts = VerifyOptions {
        t_fraction,
        companion_dr,
        ..VerifyOptions::default()
    };
    let cfg = config.inner.clone();
    let report = py
        .detach(|| functional::verify_wave_run(&cfg, &fcfg, opts))
        .map_err(to_py_err)?;
    to_py(py, &report)
}

/// Slab mass `A_f` of the bump profile.
#[pyfunction]
#[pyo3(signature = (n, amplitude=1.0, r_support=1.0, shell=false))]
fn a_f<'py>(
    py: Python<'py>,
    n: u32,
    amplitude: f64,
    r_support: f64,
    shell: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let profile = DataProfile {
        shape: if shell {
            ProfileShape::ShellBump
        } else {
            ProfileShape::StandardBump
        },
        r_support,
        amplitude,
        g_mode: GMode::Zero,
    };
    to_py(
        py,
        &functional::compute_a_f(&profile, n).map_err(to_py_err)?,
    )
}

/// Star transform of radial samples `u[i] = u(i dr)` at the given radii.
#[pyfunction]
fn star_transform(u: Vec<f64>, dr: f64, n: u32, radii: Vec<f64>) -> PyResult<Vec<f64>> {
    if u.is_empty() || dr.is_nan() || dr <= 0.0 {
        return Err(PyValueError::new_err("need samples and a positive spacing"));
    }
    let support_radius = u
        .iter()
        .rposition(|x| *x != 0.0)
        .map_or(0.0, |i| i as f64 * dr);
    let field = RadialField {
        dr,
        offset: 0,
        v: vec![0.0; u.len()],
        u,
        t: 0.0,
        support_radius,
    };
    let slice = functional::star_transform_at(&field, n, &radii).map_err(to_py_err)?;
    Ok(slice.u_star)
}

/// Least-squares line `y = slope x + intercept`.
#[pyfunction]
fn fit_line<'py>(py: Python<'py>, x: Vec<f64>, y: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err("x and y differ in length"));
    }
    let points: Vec<(f64, f64)> = x.into_iter().zip(y).collect();
    to_py(py, &fit::fit_line(&points).map_err(to_py_err)?)
}

#[pymodule]
fn lifespan_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWaveConfig>()?;
    m.add_function(wrap_pyfunction!(critical_exponent, m)?)?;
    m.add_function(wrap_pyfunction!(sharp_constants, m)?)?;
    m.add_function(wrap_pyfunction!(theorem_constants, m)?)?;
    m.add_function(wrap_pyfunction!(odi_ladder, m)?)?;
    m.add_function(wrap_pyfunction!(ode_blowup, m)?)?;
    m.add_function(wrap_pyfunction!(ode_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(pde_run, m)?)?;
    m.add_function(wrap_pyfunction!(pde_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(verify_functional, m)?)?;
    m.add_function(wrap_pyfunction!(a_f, m)?)?;
    m.add_function(wrap_pyfunction!(star_transform, m)?)?;
    m.add_function(wrap_pyfunction!(fit_line, m)?)?;
    Ok(())
}
