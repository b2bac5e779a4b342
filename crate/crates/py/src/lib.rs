//! Python bindings: controller configs, run manifests, the radiance-field
//! renderer and the metric primitives.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mvprompt_core::metrics::{self, ClassProbabilities, MeanStd};
use mvprompt_core::pipeline::{self, Mode};
use mvprompt_core::prompting::{parse_controller_config, CameraPose, RIG_ELEVATION, RIG_RADIUS};
use mvprompt_core::sds_nerf::{self, FieldConfig, RaySamples};
use mvprompt_core::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::ImageRead { .. } | Error::EmptyImageSet(_)) => PyIOError::new_err(e.to_string()),
        e @ (Error::Parse { .. } | Error::Config(_) | Error::Dimension(_) | Error::Probability(_)) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Canonical form of a controller config string.
#[pyfunction]
fn parse_config(spec: &str) -> PyResult<String> {
    parse_controller_config(spec).map(|c| c.to_string()).map_err(to_py)
}

/// Scores of one run.
#[pyclass(frozen, get_all)]
struct Report {
    config: String,
    n_images: usize,
    /// `(mean, std)`
    qis: (f64, f64),
    clip_tx: (f64, f64),
    clip_im: (f64, f64),
    json: String,
}

impl Report {
    fn from_core(r: &metrics::MetricReport) -> PyResult<Self> {
        let pair = |m: MeanStd| (m.mean, m.std);
        Ok(Self {
            config: r.config.clone(),
            n_images: r.n_images,
            qis: pair(r.qis),
            clip_tx: pair(r.clip_tx),
            clip_im: pair(r.clip_im),
            json: r.to_json().map_err(to_py)?,
        })
    }
}

#[pymethods]
impl Report {
    fn table(&self) -> PyResult<String> {
        Ok(metrics::MetricReport::from_json(&self.json).map_err(to_py)?.to_table())
    }

    fn __repr__(&self) -> String {
        format!("Report(config={:?}, n_images={}, qis={:?})", self.config, self.n_images, self.qis)
    }
}

/// A reproducible run; mirrors `manifest.json`.
#[pyclass]
struct RunManifest {
    inner: pipeline::RunManifest,
}

#[pymethods]
impl RunManifest {
    #[new]
    #[pyo3(signature = (mode, config, image, out, seed=0, steps=10, iters=100, text=None, images=None, mock_guidance=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        mode: &str,
        config: &str,
        image: PathBuf,
        out: PathBuf,
        seed: u64,
        steps: usize,
        iters: usize,
        text: Option<String>,
        images: Option<PathBuf>,
        mock_guidance: bool,
    ) -> PyResult<Self> {
        let mode = match mode {
            "mvgen" => Mode::Mvgen,
            "gen3d" => Mode::Gen3d,
            "eval" => Mode::Eval,
            other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        };
        let mut m = pipeline::RunManifest::new(mode, config, image, out, seed).map_err(to_py)?;
        m.steps = steps;
        m.iters = iters;
        if let Some(t) = text {
            m.text = t;
        }
        m.images = images;
        m.mock_guidance = mock_guidance;
        m.validate().map_err(to_py)?;
        Ok(Self { inner: m })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        pipeline::RunManifest::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.clone()
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.out.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    /// Execute the run, writing its outputs; releases the GIL meanwhile.
    fn run(&self, py: Python<'_>) -> PyResult<Report> {
        let m = self.inner.clone();
        let report = py.detach(move || pipeline::run(&m)).map_err(to_py)?;
        Report::from_core(&report)
    }
}

/// Positional-encoding MLP radiance field.
#[pyclass]
struct RadianceField {
    inner: sds_nerf::RadianceField,
}

#[pymethods]
impl RadianceField {
    #[new]
    #[pyo3(signature = (seed=0, pe_freqs=2, hidden=16))]
    fn new(seed: u64, pe_freqs: usize, hidden: usize) -> Self {
        let cfg = FieldConfig {
            pe_freqs,
            hidden,
            ..FieldConfig::default()
        };
        Self {
            inner: sds_nerf::RadianceField::init(cfg, seed),
        }
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(sigma, (r, g, b))` at a world point.
    fn eval(&self, x: [f64; 3]) -> (f64, [f64; 3]) {
        let p = self.inner.eval(x);
        (p.sigma, p.rgb)
    }

    /// Render from the rig orbit at `azimuth_deg`; rows of `[r, g, b]`.
    #[pyo3(signature = (azimuth_deg, resolution=32))]
    fn render(&self, py: Python<'_>, azimuth_deg: f64, resolution: usize) -> PyResult<Vec<Vec<[f64; 3]>>> {
        let pose = CameraPose::look_at(azimuth_deg.to_radians(), RIG_ELEVATION, RIG_RADIUS);
        let img = py.detach(|| sds_nerf::render(&self.inner, &pose, resolution)).map_err(to_py)?.image;
        let v = img.view();
        Ok((0..img.height())
            .map(|y| (0..img.width()).map(|x| [v[[y, x, 0]], v[[y, x, 1]], v[[y, x, 2]]]).collect())
            .collect())
    }
}

/// Alpha-composite one ray; returns `(color, weights, final_transmittance)`.
#[pyfunction]
#[pyo3(signature = (deltas, sigmas, colors, background=[1.0, 1.0, 1.0]))]
fn composite(deltas: Vec<f64>, sigmas: Vec<f64>, colors: Vec<[f64; 3]>, background: [f64; 3]) -> PyResult<([f64; 3], Vec<f64>, f64)> {
    let positions = vec![[0.0; 3]; deltas.len()];
    let samples = RaySamples::new(positions, deltas, sigmas, colors).map_err(to_py)?;
    let c = sds_nerf::composite(&samples, background);
    let t = c.final_transmittance();
    Ok((c.color, c.weights, t))
}

/// Per-image quality scores `exp(KL(p ‖ uniform))`.
#[pyfunction]
fn quality_scores(probs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    probs
        .into_iter()
        .map(|p| ClassProbabilities::new(p).map(|p| p.quality_score()))
        .collect::<Result<_, _>>()
        .map_err(to_py)
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::cosine(&a, &b).map_err(to_py)
}

/// `"mean±std"` as printed in report tables.
#[pyfunction]
fn format_mean_std(mean: f64, std: f64) -> String {
    metrics::format_mean_std(mean, std)
}

#[pymodule]
fn mvprompt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RunManifest>()?;
    m.add_class::<Report>()?;
    m.add_class::<RadianceField>()?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(composite, m)?)?;
    m.add_function(wrap_pyfunction!(quality_scores, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(format_mean_std, m)?)?;
    Ok(())
}
