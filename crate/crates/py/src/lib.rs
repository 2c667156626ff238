//! Python bindings: collection synthesis, energy checks, Chamfer distance
//! and the full pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use shapecorr::energy::{acap_energy_oracle, arap_energy_oracle, build_acap, build_arap};
use shapecorr::mesh::{TriMesh, Vec3};
use shapecorr::pipeline::{run_pipeline, PipelineConfig};
use shapecorr::synth::{synth_collection, write_collection, Family, SynthSpec, MANIFEST_FILE};
use shapecorr::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::IndexOutOfRange { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn points(raw: Vec<[f64; 3]>) -> Vec<Vec3> {
    raw.into_iter().map(Vec3::from).collect()
}

fn mesh(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<TriMesh, Error> {
    TriMesh::new(points(vertices), faces)
}

/// Writes a seeded synthetic collection to `out` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (family, count, seed, out, spread = 1.0))]
fn synth(family: &str, count: usize, seed: u64, out: PathBuf, spread: f64) -> PyResult<String> {
    let family: Family = family.parse().map_err(to_py)?;
    let col = synth_collection(&SynthSpec {
        family,
        count,
        seed,
        spread,
    })
    .map_err(to_py)?;
    write_collection(&col, &out).map_err(to_py)?;
    Ok(out.join(MANIFEST_FILE).display().to_string())
}

fn energies(
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    d: Vec<f64>,
    conformal: bool,
) -> Result<(f64, f64), Error> {
    let m = mesh(vertices, faces)?;
    if conformal {
        Ok((build_acap(&m).energy(&d)?, acap_energy_oracle(&m, &d)?))
    } else {
        Ok((build_arap(&m).energy(&d)?, arap_energy_oracle(&m, &d)?))
    }
}

/// ARAP energy of the flat displacement `d`, as `(quadratic form, direct minimum)`.
#[pyfunction]
fn arap_energy(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>, d: Vec<f64>) -> PyResult<(f64, f64)> {
    energies(vertices, faces, d, false).map_err(to_py)
}

/// ACAP energy of the flat displacement `d`, as `(quadratic form, direct minimum)`.
#[pyfunction]
fn acap_energy(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>, d: Vec<f64>) -> PyResult<(f64, f64)> {
    energies(vertices, faces, d, true).map_err(to_py)
}

#[pyfunction]
fn chamfer(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> PyResult<f64> {
    shapecorr::refine::chamfer(&points(a), &points(b)).map_err(to_py)
}

/// Runs the pipeline from a JSON config (same keys as the CLI) and returns
/// the report as JSON text.
#[pyfunction]
fn pipeline(py: Python<'_>, config: &str) -> PyResult<String> {
    let cfg: PipelineConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let report = py.detach(|| run_pipeline(&cfg)).map_err(to_py)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn shapecorr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("FAMILIES", Family::ALL.iter().map(|f| f.name()).collect::<Vec<_>>())?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(arap_energy, m)?)?;
    m.add_function(wrap_pyfunction!(acap_energy, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    Ok(())
}
