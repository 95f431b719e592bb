//! Python module `lipdistill`.

use lipdistill_core::data::{generate_dataset, Dataset, Split, SynthConfig};
use lipdistill_core::gradsuite;
use lipdistill_core::losses::{self, DistillConfig};
use lipdistill_core::train::{evaluate_checkpoint, Checkpoint};
use lipdistill_core::{AlignmentMap, TensorError};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: TensorError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn split(name: &str) -> PyResult<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown split {name:?}")))
}

/// Gaussian sliding-window map from audio frames to visual frames.
#[pyclass(name = "AlignmentMap", frozen)]
struct PyAlignmentMap(AlignmentMap);

#[pymethods]
impl PyAlignmentMap {
    #[new]
    #[pyo3(signature = (audio_frames, visual_frames, sigma = 3.0, window = 7))]
    fn new(audio_frames: usize, visual_frames: usize, sigma: f64, window: usize) -> PyResult<Self> {
        AlignmentMap::build(audio_frames, visual_frames, sigma, window).map(Self).map_err(err)
    }

    fn centers(&self) -> Vec<usize> {
        self.0.centers().to_vec()
    }

    /// Dense `J x T_a` weights as nested lists.
    fn weights(&self) -> Vec<Vec<f64>> {
        let d = self.0.dense();
        d.data().chunks(self.0.audio_frames()).map(|r| r.to_vec()).collect()
    }

    /// `states`: `T_a` rows of equal width; returns `J` rows.
    fn apply(&self, states: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let d = states.first().map_or(0, |r| r.len());
        if states.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("ragged state rows"));
        }
        let flat: Vec<f64> = states.concat();
        let t = lipdistill_core::Tensor::new(vec![states.len(), d], flat).map_err(err)?;
        let out = self.0.apply_tensor(&t).map_err(err)?;
        Ok(out.data().chunks(d.max(1)).map(|r| r.to_vec()).collect())
    }

    fn to_csv(&self) -> String {
        self.0.to_csv()
    }

    fn __repr__(&self) -> String {
        format!(
            "AlignmentMap(audio_frames={}, visual_frames={}, sigma={}, window={})",
            self.0.audio_frames(),
            self.0.visual_frames(),
            self.0.sigma(),
            self.0.window()
        )
    }
}

/// A generated synthetic audio-visual dataset.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    /// `config_json`: a JSON object of data settings; omitted keys keep defaults.
    #[new]
    #[pyo3(signature = (config_json = None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: SynthConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => SynthConfig::default(),
        };
        generate_dataset(&cfg).map(Self).map_err(err)
    }

    fn len(&self, split_name: &str) -> PyResult<usize> {
        Ok(self.0.split(split(split_name)?).len())
    }

    fn labels(&self, split_name: &str) -> PyResult<Vec<usize>> {
        Ok(self.0.split(split(split_name)?).iter().map(|s| s.label).collect())
    }

    /// `(visual, visual_shape, audio, audio_shape, label)` with flat row-major data.
    #[allow(clippy::type_complexity)]
    fn sample(
        &self,
        split_name: &str,
        index: usize,
    ) -> PyResult<(Vec<f64>, Vec<usize>, Vec<f64>, Vec<usize>, usize)> {
        let s = self
            .0
            .split(split(split_name)?)
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        Ok((
            s.visual.data().to_vec(),
            s.visual.shape().to_vec(),
            s.audio.data().to_vec(),
            s.audio.shape().to_vec(),
            s.label,
        ))
    }

    /// Test-split Top-1 of the checkpoint in `checkpoint_dir`.
    fn evaluate(&self, checkpoint_dir: &str) -> PyResult<f64> {
        let ck = Checkpoint::load(std::path::Path::new(checkpoint_dir)).map_err(err)?;
        evaluate_checkpoint(&ck, &self.0.test).map_err(err)
    }
}

#[pyfunction]
fn smoothed_target(label: usize, num_classes: usize, epsilon: f64) -> PyResult<Vec<f64>> {
    losses::smoothed_target(label, num_classes, epsilon).map_err(err)
}

#[pyfunction]
fn cross_entropy(logits: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    losses::cross_entropy(&logits, &target).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (base, kd1, kd2, lambda1 = 2.0, lambda2 = 10.0))]
fn total_loss(base: f64, kd1: f64, kd2: f64, lambda1: f64, lambda2: f64) -> f64 {
    let cfg = DistillConfig { lambda1, lambda2, ..Default::default() };
    losses::total_loss_value(base, kd1, kd2, &cfg)
}

/// `[(component, max_rel_err, passed)]` for one seed.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let suite = gradsuite::run_suite(seed, None).map_err(err)?;
    Ok(suite
        .into_iter()
        .map(|e| (e.name.to_string(), e.report.max_rel_err, e.report.passed))
        .collect())
}

/// Run the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    let mut full = vec!["lipdistill".to_string()];
    full.extend(args);
    lipdistill_cli::run(&full)
}

#[pymodule(name = "lipdistill")]
fn lipdistill_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAlignmentMap>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(smoothed_target, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
