//! Python bindings: `import saucer_py`.

use std::path::PathBuf;
use std::time::Duration;

use chrono::SecondsFormat;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyTypeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyString};

use saucer::cli;
use saucer::registry::{self, AssetId, AssetKind};
use saucer::run::{self, ParamValue, Params};

create_exception!(saucer_py, SaucerError, PyException);

fn to_py_err(err: saucer::Error) -> PyErr {
    let code = cli::exit_code_for_error(&err).code();
    SaucerError::new_err((err.to_string(), code))
}

fn parse_kind(kind: &str) -> PyResult<AssetKind> {
    AssetKind::parse(kind)
        .ok_or_else(|| PyValueError::new_err(format!("unknown asset kind '{kind}'")))
}

/// Converts a serializable value into plain Python objects.
fn to_python<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let json = PyModule::import(py, "json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

#[pyclass(module = "saucer_py", frozen)]
struct Store {
    inner: saucer::Store,
}

#[pymethods]
impl Store {
    #[new]
    #[pyo3(signature = (root, lock_timeout=None, provision_timeout=None))]
    fn new(
        root: PathBuf,
        lock_timeout: Option<f64>,
        provision_timeout: Option<f64>,
    ) -> PyResult<Self> {
        let mut inner = saucer::Store::new(root);
        let secs = |s: f64| {
            Duration::try_from_secs_f64(s).map_err(|e| PyValueError::new_err(e.to_string()))
        };
        if let Some(s) = lock_timeout {
            inner.lock_timeout = secs(s)?;
        }
        if let Some(s) = provision_timeout {
            inner.provision_timeout = secs(s)?;
        }
        Ok(Self { inner })
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.root().to_path_buf()
    }

    fn __repr__(&self) -> String {
        format!("Store({:?})", self.inner.root())
    }
}

#[pyclass(module = "saucer_py", frozen, get_all)]
struct AssetRecord {
    id: String,
    name: String,
    kind: String,
    path: PathBuf,
    content_hash: String,
    env_setup_ref: Option<String>,
    registered_at: String,
}

impl From<saucer::AssetRecord> for AssetRecord {
    fn from(r: saucer::AssetRecord) -> Self {
        Self {
            id: r.id.0,
            name: r.name,
            kind: r.kind.as_str().to_owned(),
            path: r.path,
            content_hash: r.content_hash,
            env_setup_ref: r.env_setup_ref.map(|e| e.0),
            registered_at: r.registered_at.to_rfc3339_opts(SecondsFormat::AutoSi, true),
        }
    }
}

#[pymethods]
impl AssetRecord {
    fn __repr__(&self) -> String {
        format!(
            "AssetRecord(id={:?}, name={:?}, kind={:?}, env_setup_ref={:?})",
            self.id, self.name, self.kind, self.env_setup_ref
        )
    }
}

#[pyfunction]
fn env_id_for(script_bytes: &[u8]) -> String {
    saucer::env_id_for(script_bytes).to_string()
}

#[pyfunction]
fn register_asset(store: &Store, path: PathBuf, kind: &str, name: &str) -> PyResult<AssetRecord> {
    registry::register_asset(&store.inner, &path, parse_kind(kind)?, name)
        .map(Into::into)
        .map_err(to_py_err)
}

#[pyfunction]
fn associate(store: &Store, asset_id: &str, env_setup_id: &str) -> PyResult<AssetRecord> {
    registry::associate(
        &store.inner,
        &AssetId::from(asset_id),
        &AssetId::from(env_setup_id),
    )
    .map(Into::into)
    .map_err(to_py_err)
}

#[pyfunction]
fn remove_asset(store: &Store, asset_id: &str) -> PyResult<()> {
    registry::remove_asset(&store.inner, &AssetId::from(asset_id)).map_err(to_py_err)
}

#[pyfunction]
#[pyo3(signature = (store, kind=None))]
fn list_assets(store: &Store, kind: Option<&str>) -> PyResult<Vec<AssetRecord>> {
    let kind = kind.map(parse_kind).transpose()?;
    let reg = registry::load_registry(store.inner.root()).map_err(to_py_err)?;
    Ok(registry::list_assets(&reg, kind)
        .into_iter()
        .map(Into::into)
        .collect())
}

/// Returns the env-setup id shared by the selection.
#[pyfunction]
fn validate_selection(
    store: &Store,
    model_id: &str,
    dataset_id: &str,
    verif_id: &str,
) -> PyResult<String> {
    let reg = registry::load_registry(store.inner.root()).map_err(to_py_err)?;
    registry::validate_selection(
        &reg,
        &AssetId::from(model_id),
        &AssetId::from(dataset_id),
        &AssetId::from(verif_id),
    )
    .map(|id| id.0)
    .map_err(to_py_err)
}

type TripleGroups = Vec<(String, Vec<(String, String, String)>)>;

#[pyfunction]
fn compatible_triples(store: &Store) -> PyResult<TripleGroups> {
    let reg = registry::load_registry(store.inner.root()).map_err(to_py_err)?;
    Ok(registry::compatible_triples(&reg)
        .into_iter()
        .map(|(env, triples)| {
            let triples = triples
                .into_iter()
                .map(|t| (t.model.0, t.dataset.0, t.verification.0))
                .collect();
            (env.0, triples)
        })
        .collect())
}

#[pyfunction]
fn ensure_ready(py: Python<'_>, store: &Store, env_setup: &str) -> PyResult<Py<PyAny>> {
    let reg = registry::load_registry(store.inner.root()).map_err(to_py_err)?;
    let asset = reg
        .resolve(env_setup, &[AssetKind::EnvSetup])
        .map_err(to_py_err)?
        .clone();
    let rec = py
        .detach(|| saucer::env::ensure_ready(&store.inner, &asset))
        .map_err(to_py_err)?;
    to_python(py, &rec)
}

#[pyfunction]
fn env_status(store: &Store, env_id: &str) -> PyResult<String> {
    let id = saucer::EnvId::parse(env_id)
        .ok_or_else(|| PyValueError::new_err(format!("malformed environment id '{env_id}'")))?;
    Ok(saucer::env::env_status(&store.inner, &id).to_string())
}

#[pyfunction]
fn gc(store: &Store) -> PyResult<Vec<String>> {
    let reg = registry::load_registry(store.inner.root()).map_err(to_py_err)?;
    saucer::env::gc(&store.inner, &reg)
        .map(|ids| ids.into_iter().map(|i| i.to_string()).collect())
        .map_err(to_py_err)
}

fn extract_params(params: Option<&Bound<'_, PyDict>>) -> PyResult<Params> {
    let mut out = Params::new();
    let Some(params) = params else {
        return Ok(out);
    };
    for (key, value) in params.iter() {
        let key: String = key.extract()?;
        let value = if value.is_instance_of::<PyBool>() {
            ParamValue::Bool(value.extract()?)
        } else if value.is_instance_of::<PyInt>() {
            ParamValue::Int(value.extract()?)
        } else if value.is_instance_of::<PyFloat>() {
            let f: f64 = value.extract()?;
            if !f.is_finite() {
                return Err(PyValueError::new_err(format!(
                    "param '{key}' is not finite"
                )));
            }
            ParamValue::Float(f)
        } else if value.is_instance_of::<PyString>() {
            ParamValue::Str(value.extract()?)
        } else {
            return Err(PyTypeError::new_err(format!(
                "param '{key}' must be str, int, float or bool"
            )));
        };
        out.insert(key, value);
    }
    Ok(out)
}

/// Plans and executes a run; returns the persisted run record as a dict.
///
/// Runner output is captured to the run's `output.log` and echoed to stdout.
/// Runner failures still return the record; inspect `runner_error`.
#[pyfunction]
#[pyo3(signature = (store, model, dataset, verify, shim_path, params=None, timeout=None, strict_hash=false))]
#[allow(clippy::too_many_arguments)]
fn run_verification(
    py: Python<'_>,
    store: &Store,
    model: &str,
    dataset: &str,
    verify: &str,
    shim_path: PathBuf,
    params: Option<&Bound<'_, PyDict>>,
    timeout: Option<f64>,
    strict_hash: bool,
) -> PyResult<Py<PyAny>> {
    let params = extract_params(params)?;
    let timeout = match timeout {
        Some(t) if t > 0.0 => {
            Some(Duration::try_from_secs_f64(t).map_err(|e| PyValueError::new_err(e.to_string()))?)
        }
        _ => None,
    };
    let record = py.detach(|| -> saucer::Result<run::RunRecord> {
        let plan =
            run::plan_run_by_reference(&store.inner, model, dataset, verify, params, strict_hash)?;
        match run::execute_run(&plan, &shim_path, timeout, &mut std::io::stdout()) {
            Ok(record) => Ok(record),
            Err(saucer::Error::RunnerFailure { run_id, .. }) => {
                run::show_run(&store.inner, &run_id)
            }
            Err(e) => Err(e),
        }
    });
    to_python(py, &record.map_err(to_py_err)?)
}

#[pyfunction]
fn list_history(py: Python<'_>, store: &Store) -> PyResult<Py<PyAny>> {
    to_python(py, &run::list_history(&store.inner).map_err(to_py_err)?)
}

#[pyfunction]
fn show_run(py: Python<'_>, store: &Store, run_id: &str) -> PyResult<Py<PyAny>> {
    to_python(py, &run::show_run(&store.inner, run_id).map_err(to_py_err)?)
}

#[pyfunction]
fn parse_result(py: Python<'_>, data: &[u8]) -> PyResult<Py<PyAny>> {
    to_python(py, &run::parse_result(data).map_err(to_py_err)?)
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn main(py: Python<'_>, argv: Vec<String>) -> i32 {
    py.detach(|| {
        let args = std::iter::once("saucer".to_owned()).chain(argv);
        cli::dispatch(args, &mut std::io::stdout(), &mut std::io::stderr()).code()
    })
}

#[pymodule]
fn saucer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SaucerError", m.py().get_type::<SaucerError>())?;
    m.add_class::<Store>()?;
    m.add_class::<AssetRecord>()?;
    m.add_function(wrap_pyfunction!(env_id_for, m)?)?;
    m.add_function(wrap_pyfunction!(register_asset, m)?)?;
    m.add_function(wrap_pyfunction!(associate, m)?)?;
    m.add_function(wrap_pyfunction!(remove_asset, m)?)?;
    m.add_function(wrap_pyfunction!(list_assets, m)?)?;
    m.add_function(wrap_pyfunction!(validate_selection, m)?)?;
    m.add_function(wrap_pyfunction!(compatible_triples, m)?)?;
    m.add_function(wrap_pyfunction!(ensure_ready, m)?)?;
    m.add_function(wrap_pyfunction!(env_status, m)?)?;
    m.add_function(wrap_pyfunction!(gc, m)?)?;
    m.add_function(wrap_pyfunction!(run_verification, m)?)?;
    m.add_function(wrap_pyfunction!(list_history, m)?)?;
    m.add_function(wrap_pyfunction!(show_run, m)?)?;
    m.add_function(wrap_pyfunction!(parse_result, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    Ok(())
}
