//! Python bindings: numpy-friendly access to scene synthesis, decomposition,
//! segmentation, metrics, and mask statistics.
//!
//! Cubes cross the boundary as float32 arrays of shape (H, W, C) with a
//! separate wavelength vector; maps as float64 (H, W) or (H, W, 3); masks
//! as uint8 (H, W) of zeros and ones.

#![allow(clippy::type_complexity)]

use numpy::ndarray::{Array1, Array2, Array3};
use numpy::{
    IntoPyArray, PyArray1, PyArray2, PyArray3, PyReadonlyArray1, PyReadonlyArray2, PyReadonlyArray3,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hcod_core::cmf::CmfTable;
use hcod_core::datastats;
use hcod_core::hsicube::{cube_from_bytes, cube_to_bytes, GroundTruthMask, HsiCube};
use hcod_core::metrics;
use hcod_core::pipeline::{segment as segment_rs, train_decode_and_prompt, PipelineConfig};
use hcod_core::ssdm;
use hcod_core::synth::{generate_scene as generate_scene_rs, ObjectShape, SyntheticSceneSpec};
use hcod_core::SaliencyMap;

fn to_py_err(e: hcod_core::Error) -> PyErr {
    match e {
        hcod_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn cube_from_py(
    data: PyReadonlyArray3<'_, f32>,
    wavelengths: PyReadonlyArray1<'_, f32>,
) -> PyResult<HsiCube> {
    let shape = data.as_array().shape().to_vec();
    let wl: Vec<f32> = wavelengths.as_array().iter().copied().collect();
    let flat: Vec<f32> = data.as_array().iter().copied().collect();
    HsiCube::new(shape[0], shape[1], shape[2], wl, flat).map_err(to_py_err)
}

fn cube_to_py<'py>(
    py: Python<'py>,
    cube: &HsiCube,
) -> PyResult<(Bound<'py, PyArray3<f32>>, Bound<'py, PyArray1<f32>>)> {
    let arr = Array3::from_shape_vec(
        (cube.height(), cube.width(), cube.bands()),
        cube.data().to_vec(),
    )
    .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let wl = Array1::from_vec(cube.wavelengths_nm().to_vec());
    Ok((arr.into_pyarray(py), wl.into_pyarray(py)))
}

fn mask_from_py(mask: PyReadonlyArray2<'_, u8>) -> PyResult<GroundTruthMask> {
    let shape = mask.as_array().shape().to_vec();
    let data: Vec<u8> = mask.as_array().iter().copied().collect();
    GroundTruthMask::new(shape[0], shape[1], data).map_err(to_py_err)
}

fn map_from_py(pred: PyReadonlyArray2<'_, f64>) -> PyResult<SaliencyMap> {
    let shape = pred.as_array().shape().to_vec();
    let data: Vec<f64> = pred.as_array().iter().copied().collect();
    SaliencyMap::new(shape[0], shape[1], 1, data).map_err(to_py_err)
}

fn map_to_py2<'py>(py: Python<'py>, map: &SaliencyMap) -> Bound<'py, PyArray2<f64>> {
    Array2::from_shape_vec((map.height(), map.width()), map.data().to_vec())
        .expect("shape matches")
        .into_pyarray(py)
}

fn map_to_py3<'py>(py: Python<'py>, map: &SaliencyMap) -> Bound<'py, PyArray3<f64>> {
    Array3::from_shape_vec(
        (map.height(), map.width(), map.channels()),
        map.data().to_vec(),
    )
    .expect("shape matches")
    .into_pyarray(py)
}

fn parse_shape(shape: &str) -> PyResult<ObjectShape> {
    match shape {
        "ellipse" => Ok(ObjectShape::Ellipse),
        "blob" => Ok(ObjectShape::Blob),
        "fragmented" => Ok(ObjectShape::Fragmented),
        other => Err(PyValueError::new_err(format!(
            "unknown object shape {other:?}; expected ellipse, blob, or fragmented"
        ))),
    }
}

fn config(tau: f64, seed: u64, fde: bool) -> PipelineConfig {
    PipelineConfig {
        tau,
        seed,
        fde_enabled: fde,
        ..Default::default()
    }
}

/// Generate a deterministic synthetic scene.
/// Returns (cube, wavelengths_nm, mask).
#[pyfunction]
#[pyo3(signature = (seed, height=64, width=64, bands=20, shape="ellipse",
                    area_ratio=0.06, spectral_contrast=0.4, rgb_matched=false))]
#[allow(clippy::too_many_arguments)]
fn generate_scene<'py>(
    py: Python<'py>,
    seed: u64,
    height: usize,
    width: usize,
    bands: usize,
    shape: &str,
    area_ratio: f64,
    spectral_contrast: f64,
    rgb_matched: bool,
) -> PyResult<(
    Bound<'py, PyArray3<f32>>,
    Bound<'py, PyArray1<f32>>,
    Bound<'py, PyArray2<u8>>,
)> {
    let spec = SyntheticSceneSpec {
        seed,
        height,
        width,
        bands,
        object_shape: parse_shape(shape)?,
        object_area_ratio: area_ratio,
        spectral_contrast,
        rgb_matched,
    };
    let (cube, mask) = generate_scene_rs(&spec).map_err(to_py_err)?;
    let (arr, wl) = cube_to_py(py, &cube)?;
    let mask_arr = Array2::from_shape_vec((height, width), mask.data().to_vec())
        .expect("shape matches")
        .into_pyarray(py);
    Ok((arr, wl, mask_arr))
}

/// Load an HSIC cube file. Returns (cube, wavelengths_nm).
#[pyfunction]
fn load_cube<'py>(
    py: Python<'py>,
    path: &str,
) -> PyResult<(Bound<'py, PyArray3<f32>>, Bound<'py, PyArray1<f32>>)> {
    let bytes = std::fs::read(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let cube = cube_from_bytes(&bytes).map_err(to_py_err)?;
    cube_to_py(py, &cube)
}

/// Save a cube as an HSIC file.
#[pyfunction]
fn save_cube(
    path: &str,
    data: PyReadonlyArray3<'_, f32>,
    wavelengths: PyReadonlyArray1<'_, f32>,
) -> PyResult<()> {
    let cube = cube_from_py(data, wavelengths)?;
    std::fs::write(path, cube_to_bytes(&cube)).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// Spectral angular distance between two spectra, in radians.
#[pyfunction]
fn sad(v1: Vec<f64>, v2: Vec<f64>) -> PyResult<f64> {
    ssdm::sad(&v1, &v2).map_err(to_py_err)
}

/// Decompose a cube into the normalized XYZ image and the spectral
/// saliency prompt. Returns (xyz (H,W,3), saliency (H,W,3)).
#[pyfunction]
#[pyo3(signature = (data, wavelengths, n_bands=33))]
fn decompose<'py>(
    py: Python<'py>,
    data: PyReadonlyArray3<'_, f32>,
    wavelengths: PyReadonlyArray1<'_, f32>,
    n_bands: usize,
) -> PyResult<(Bound<'py, PyArray3<f64>>, Bound<'py, PyArray3<f64>>)> {
    let cube = cube_from_py(data, wavelengths)?;
    let xyz = ssdm::map_to_ciexyz(&cube, &CmfTable::cie_1931_2deg(), n_bands).map_err(to_py_err)?;
    let sal = ssdm::spectral_saliency(&cube, &ssdm::PyramidConfig::default()).map_err(to_py_err)?;
    let xyz_arr = Array3::from_shape_vec((xyz.height(), xyz.width(), 3), xyz.data().to_vec())
        .expect("shape matches")
        .into_pyarray(py);
    Ok((xyz_arr, map_to_py3(py, &sal)))
}

/// Segment a cube. Returns (prediction (H,W), kept_token_fraction) and,
/// when fde is enabled, the enhanced map under the "enhanced" key of the
/// returned dict.
#[pyfunction]
#[pyo3(signature = (data, wavelengths, tau=0.01, seed=0, fde=false))]
fn segment<'py>(
    py: Python<'py>,
    data: PyReadonlyArray3<'_, f32>,
    wavelengths: PyReadonlyArray1<'_, f32>,
    tau: f64,
    seed: u64,
    fde: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cube = cube_from_py(data, wavelengths)?;
    let out = segment_rs(&cube, &config(tau, seed, fde)).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("prediction", map_to_py2(py, &out.s_f))?;
    dict.set_item("kept_fraction", out.kept_fraction)?;
    if let Some(s_d) = &out.s_d {
        dict.set_item("enhanced", map_to_py2(py, s_d))?;
    }
    Ok(dict)
}

/// Train the decode head and final prompt block on one scene; returns the
/// prediction after `steps` gradient steps.
#[pyfunction]
#[pyo3(signature = (data, wavelengths, mask, steps=200, lr=0.1, tau=0.01, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_head<'py>(
    py: Python<'py>,
    data: PyReadonlyArray3<'_, f32>,
    wavelengths: PyReadonlyArray1<'_, f32>,
    mask: PyReadonlyArray2<'_, u8>,
    steps: usize,
    lr: f64,
    tau: f64,
    seed: u64,
) -> PyResult<(Bound<'py, PyArray2<f64>>, Vec<f64>)> {
    let cube = cube_from_py(data, wavelengths)?;
    let gt = mask_from_py(mask)?;
    let report = train_decode_and_prompt(&cube, &gt, &config(tau, seed, false), steps, lr)
        .map_err(to_py_err)?;
    Ok((map_to_py2(py, &report.prediction), report.losses))
}

/// The four evaluation measures for one prediction/ground-truth pair.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    prediction: PyReadonlyArray2<'_, f64>,
    mask: PyReadonlyArray2<'_, u8>,
) -> PyResult<Bound<'py, PyDict>> {
    let pred = map_from_py(prediction)?;
    let gt = mask_from_py(mask)?;
    let [mae, adp_f, e, s] = metrics::evaluate_pair(&pred, &gt).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("mae", mae)?;
    dict.set_item("adp_f", adp_f)?;
    dict.set_item("e", e)?;
    dict.set_item("s", s)?;
    Ok(dict)
}

/// Size, boundary, centroid, and challenge-flag statistics of one mask.
#[pyfunction]
fn scene_stats<'py>(
    py: Python<'py>,
    mask: PyReadonlyArray2<'_, u8>,
) -> PyResult<Bound<'py, PyDict>> {
    let gt = mask_from_py(mask)?;
    let stats = datastats::scene_stats(&gt).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("area_ratio", stats.area_ratio)?;
    dict.set_item("edge_perimeter_ratio", stats.edge_perimeter_ratio)?;
    dict.set_item("centroid", stats.centroid)?;
    dict.set_item("is_tiny", stats.is_tiny)?;
    dict.set_item("is_complex_edge", stats.is_complex_edge)?;
    Ok(dict)
}

#[pymodule]
fn hcod(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(load_cube, m)?)?;
    m.add_function(wrap_pyfunction!(save_cube, m)?)?;
    m.add_function(wrap_pyfunction!(sad, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(train_head, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(scene_stats, m)?)?;
    Ok(())
}
