//! Python bindings. Tensors cross the boundary as `(shape, flat values)`
//! pairs of plain lists, so the module needs nothing beyond the stdlib on
//! the Python side.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use strmatch::diffusion::{invert, make_schedule, reconstruct, InvertOptions, ScheduleKind};
use strmatch::edit::{EditConfig, Objective, PromptMode};
use strmatch::error::{Category, Error};
use strmatch::formats::{self, DType};
use strmatch::mask::LatentMask;
use strmatch::metrics;
use strmatch::model::{denoise, DenoiserWeights, ModelConfig};
use strmatch::record::{AttentionRecord, BlockMaps};
use strmatch::str_score::{self, Neighborhood};
use strmatch::tensor::{Real, Tensor};
use strmatch::vocab;

create_exception!(strmatch_py, StrmatchError, PyException);
create_exception!(strmatch_py, ConfigError, StrmatchError);
create_exception!(strmatch_py, InputError, StrmatchError);
create_exception!(strmatch_py, NumericError, StrmatchError);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.category() {
        Category::Config => ConfigError::new_err(msg),
        Category::Input => InputError::new_err(msg),
        Category::Numeric => NumericError::new_err(msg),
    }
}

type Flat = (Vec<usize>, Vec<f64>);

fn tensor<F: Real>(shape: &[usize], data: &[f64]) -> PyResult<Tensor<F>> {
    Tensor::from_f64(shape, data).map_err(py_err)
}

fn flat<F: Real>(t: &Tensor<F>) -> Flat {
    (t.shape().to_vec(), t.data().iter().map(|v| v.as_f64()).collect())
}

fn nbhd(radius: usize, include_self: bool) -> PyResult<Neighborhood> {
    Neighborhood::new(radius, include_self).map_err(py_err)
}

/// STRM bytes of a float tensor; `dtype` is "f32" or "f64".
#[pyfunction]
#[pyo3(signature = (shape, data, dtype = "f64"))]
fn encode<'py>(py: Python<'py>, shape: Vec<usize>, data: Vec<f64>, dtype: &str) -> PyResult<Bound<'py, PyBytes>> {
    let bytes = match dtype {
        "f64" => formats::encode(&tensor::<f64>(&shape, &data)?),
        "f32" => formats::encode(&tensor::<f32>(&shape, &data)?),
        other => return Err(ConfigError::new_err(format!("dtype must be f32 or f64, got {other:?}"))),
    }
    .map_err(py_err)?;
    Ok(PyBytes::new(py, &bytes))
}

/// `(shape, values, dtype)` of STRM bytes. u8 payloads come back as floats.
#[pyfunction]
fn decode(bytes: &[u8]) -> PyResult<(Vec<usize>, Vec<f64>, String)> {
    let raw = formats::decode(bytes).map_err(py_err)?;
    let dtype = match raw.dtype {
        DType::F32 => "f32",
        DType::F64 => "f64",
        DType::U8 => "u8",
    };
    let values = match raw.dtype {
        DType::U8 => raw.to_bytes().map_err(py_err)?.data.iter().map(|&b| b as f64).collect(),
        _ => raw.to_tensor::<f64>().map_err(py_err)?.data().to_vec(),
    };
    Ok((raw.shape.clone(), values, dtype.to_string()))
}

#[pyfunction]
fn read_tensor(path: PathBuf) -> PyResult<Flat> {
    Ok(flat(&formats::read_tensor::<f64>(&path).map_err(py_err)?))
}

#[pyfunction]
#[pyo3(signature = (path, shape, data, dtype = "f64"))]
fn write_tensor(path: PathBuf, shape: Vec<usize>, data: Vec<f64>, dtype: &str) -> PyResult<()> {
    match dtype {
        "f64" => formats::write_tensor(&path, &tensor::<f64>(&shape, &data)?),
        "f32" => formats::write_tensor(&path, &tensor::<f32>(&shape, &data)?),
        other => return Err(ConfigError::new_err(format!("dtype must be f32 or f64, got {other:?}"))),
    }
    .map_err(py_err)
}

/// Ω `[h, f, n, n]` of one block from its self map `[f, h, n, n]` and
/// temporal map `[n, h, f, f]`.
#[pyfunction]
#[pyo3(signature = (self_shape, self_map, temporal_shape, temporal_map, radius = 1, include_self = false))]
fn omega(
    self_shape: Vec<usize>,
    self_map: Vec<f64>,
    temporal_shape: Vec<usize>,
    temporal_map: Vec<f64>,
    radius: usize,
    include_self: bool,
) -> PyResult<Flat> {
    let s = tensor::<f64>(&self_shape, &self_map)?;
    let t = tensor::<f64>(&temporal_shape, &temporal_map)?;
    let maps = BlockMaps { block: 0, self_map: s, temporal_map: t };
    AttentionRecord { blocks: vec![maps.clone()] }
        .validate(strmatch::cli::RECORD_TOL)
        .map_err(py_err)?;
    Ok(flat(&str_score::omega(&maps.self_map, &maps.temporal_map, nbhd(radius, include_self)?).map_err(py_err)?))
}

/// Scores an attention-record directory (`self.b<k>`, `temporal.b<k>`),
/// optionally writing the Ω bundle to `out`. Returns the summary text.
#[pyfunction]
#[pyo3(signature = (record, radius = 1, include_self = false, out = None))]
fn score_record(record: PathBuf, radius: usize, include_self: bool, out: Option<PathBuf>) -> PyResult<String> {
    strmatch::cli::cmd_score::<f64>(&record, nbhd(radius, include_self)?, out.as_deref()).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (frames, pixels, heads, radius = 1, include_self = false))]
fn cost_report<'py>(
    py: Python<'py>,
    frames: usize,
    pixels: usize,
    heads: usize,
    radius: usize,
    include_self: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let r = str_score::cost_report(frames, pixels, heads, nbhd(radius, include_self)?).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("factorized_mults", r.factorized_mults)?;
    d.set_item("factorized_mem", r.factorized_mem)?;
    d.set_item("full3d_mem", r.full3d_mem)?;
    d.set_item("mem_ratio", r.mem_ratio)?;
    Ok(d)
}

#[pyfunction]
fn motion_error(shape: Vec<usize>, src: Vec<f64>, tgt: Vec<f64>) -> PyResult<f64> {
    metrics::motion_error(&tensor::<f64>(&shape, &src)?, &tensor::<f64>(&shape, &tgt)?).map_err(py_err)
}

/// Background distance outside `mask` (`[f, h, w]` booleans, true = edited).
#[pyfunction]
fn masked_bg_distance(shape: Vec<usize>, src: Vec<f64>, tgt: Vec<f64>, mask: Vec<bool>) -> PyResult<f64> {
    let m = latent_mask(&shape, mask)?.complement();
    metrics::masked_bg_distance(&tensor::<f64>(&shape, &src)?, &tensor::<f64>(&shape, &tgt)?, &m).map_err(py_err)
}

fn latent_mask(shape: &[usize], mask: Vec<bool>) -> PyResult<LatentMask> {
    if shape.len() != 4 {
        return Err(InputError::new_err(format!("latent shape must be [f, h, w, c], got {shape:?}")));
    }
    LatentMask::new(shape[0], shape[1], shape[2], mask).map_err(py_err)
}

/// The toy denoiser, held in 32-bit arithmetic.
#[pyclass]
struct Denoiser {
    weights: DenoiserWeights<f32>,
}

#[pymethods]
impl Denoiser {
    /// Fresh weights for latents of `height × width × channels`.
    #[new]
    #[pyo3(signature = (height = 16, width = 16, channels = 3, dim = 32, heads = 2, blocks = 4, seed = 0))]
    fn new(height: usize, width: usize, channels: usize, dim: usize, heads: usize, blocks: usize, seed: u64) -> PyResult<Self> {
        let config = ModelConfig {
            height,
            width,
            channels,
            dim,
            heads,
            ..ModelConfig::default()
        }
        .with_blocks(blocks);
        Ok(Denoiser { weights: DenoiserWeights::init(config, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Denoiser { weights: DenoiserWeights::load(&dir).map_err(py_err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.weights.save(&dir).map_err(py_err)
    }

    #[getter]
    fn latent_shape(&self) -> (usize, usize, usize) {
        let c = &self.weights.config;
        (c.height, c.width, c.channels)
    }

    /// Predicted noise for `latent` at model time `time` in [0, 1].
    fn denoise(&self, shape: Vec<usize>, latent: Vec<f64>, time: f64, prompt: &str) -> PyResult<Flat> {
        let z = tensor::<f32>(&shape, &latent)?;
        let (eps, _) = denoise(&self.weights, &z, time, &vocab::tokenize(prompt)).map_err(py_err)?;
        Ok(flat(&eps))
    }

    /// Inverts and immediately reconstructs; returns the reconstruction.
    #[pyo3(signature = (shape, latent, prompt, steps = 50))]
    fn reconstruct(&self, shape: Vec<usize>, latent: Vec<f64>, prompt: &str, steps: usize) -> PyResult<Flat> {
        let z = tensor::<f32>(&shape, &latent)?;
        let sched = make_schedule(steps, ScheduleKind::LinearBeta).map_err(py_err)?;
        let traj = invert(&self.weights, &z, prompt, &sched, InvertOptions::default()).map_err(py_err)?;
        Ok(flat(&reconstruct(&self.weights, &traj, &sched).map_err(py_err)?))
    }

    /// Edits `latent` from `src_prompt` to `tgt_prompt`. `mask` (latent-grid
    /// booleans, true = edited) switches on latent preservation.
    #[pyo3(signature = (
        shape, latent, src_prompt, tgt_prompt, *, lam = 0.01, steps = 50, cfg_scale = 7.5,
        radius = 1, include_self = false, mask = None, dilate_radius = 1, baseline = false, concat_prompts = false
    ))]
    #[allow(clippy::too_many_arguments)]
    fn edit(
        &self,
        py: Python<'_>,
        shape: Vec<usize>,
        latent: Vec<f64>,
        src_prompt: &str,
        tgt_prompt: &str,
        lam: f64,
        steps: usize,
        cfg_scale: f64,
        radius: usize,
        include_self: bool,
        mask: Option<Vec<bool>>,
        dilate_radius: usize,
        baseline: bool,
        concat_prompts: bool,
    ) -> PyResult<Flat> {
        let z = tensor::<f32>(&shape, &latent)?;
        let m = mask.map(|m| latent_mask(&shape, m)).transpose()?;
        let cfg = EditConfig {
            lambda: lam,
            steps,
            cfg_scale,
            neighborhood: nbhd(radius, include_self)?,
            use_mask: m.is_some(),
            dilate_radius,
            objective: if baseline { Objective::ConcatL2 } else { Objective::StrCosine },
            prompt_mode: if concat_prompts { PromptMode::Concat } else { PromptMode::Cfg },
            ..EditConfig::default()
        };
        let w = &self.weights;
        let out = py
            .detach(|| strmatch::edit::edit(w, &z, src_prompt, tgt_prompt, &cfg, m.as_ref(), None))
            .map_err(py_err)?;
        Ok(flat(&out.output))
    }
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn main(args: Vec<String>) -> i32 {
    strmatch::cli::main_with(std::iter::once("strmatch".to_string()).chain(args))
}

#[pymodule]
fn strmatch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StrmatchError", m.py().get_type::<StrmatchError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("InputError", m.py().get_type::<InputError>())?;
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    m.add_class::<Denoiser>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(omega, m)?)?;
    m.add_function(wrap_pyfunction!(score_record, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(motion_error, m)?)?;
    m.add_function(wrap_pyfunction!(masked_bg_distance, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    Ok(())
}
