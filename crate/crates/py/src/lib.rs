//! Python bindings: dataset generation, both training stages, retrieval
//! and grounding evaluation, and mask inspection.

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use iapt_core::encoders::{Bound as NnBound, ModelState};
use iapt_core::error::Error as CoreError;
use iapt_core::eval::{
    eval_global_retrieval, eval_grounding, eval_instance_retrieval, grounding_finetune,
    grounding_metrics, retrieval_metrics, GroundingConfig, Rect, RetrievalResult, Split,
};
use iapt_core::losses::LossReport;
use iapt_core::masking::{build_mask, importance_scores};
use iapt_core::schema::{
    generate_scene, read_dataset, render_sample, write_dataset, GenConfig, Sample, Vocab,
};
use iapt_core::tape::{Tape, Tensor};
use iapt_core::training::{
    handoff_video_encoder, load_checkpoint, run_training, save_checkpoint, OptState, TrainConfig,
};

fn err(e: CoreError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn report_dict<'py>(py: Python<'py>, r: &LossReport) -> PyResult<pyo3::Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("rec", r.rec)?;
    d.set_item("vtc", r.vtc)?;
    d.set_item("vtm", r.vtm)?;
    d.set_item("mlm", r.mlm)?;
    d.set_item("vtc_inst", r.vtc_inst)?;
    d.set_item("vtm_inst", r.vtm_inst)?;
    d.set_item("mlm_inst", r.mlm_inst)?;
    d.set_item("global_total", r.global_total)?;
    d.set_item("inst_total", r.inst_total)?;
    d.set_item("total", r.total)?;
    Ok(d)
}

fn retrieval_dict<'py>(py: Python<'py>, r: &RetrievalResult) -> PyResult<pyo3::Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("split", match r.split { Split::Global => "global", Split::Instance => "instance" })?;
    d.set_item("queries", r.queries)?;
    d.set_item("candidates", r.candidates)?;
    d.set_item("t2v", r.t2v.to_vec())?;
    d.set_item("v2t", r.v2t.to_vec())?;
    d.set_item("mean_recall", r.mean_recall)?;
    d.set_item("k_overflow", r.k_overflow)?;
    Ok(d)
}

/// A list of annotated shapes-world samples.
#[pyclass]
struct Corpus {
    samples: Vec<Sample>,
}

#[pymethods]
impl Corpus {
    /// Deterministically generate `scenes` annotated samples.
    #[staticmethod]
    #[pyo3(signature = (scenes, seed=0, canvas=16, frames=2, min_objects=1, max_objects=2, size=4))]
    fn generate(
        scenes: u64,
        seed: u64,
        canvas: usize,
        frames: usize,
        min_objects: usize,
        max_objects: usize,
        size: u32,
    ) -> PyResult<Corpus> {
        let gen = GenConfig {
            canvas: (canvas, canvas),
            frames,
            min_objects,
            max_objects,
            sizes: vec![size],
            ..GenConfig::default()
        };
        let samples: Result<Vec<_>, _> = (0..scenes)
            .map(|i| generate_scene(seed.wrapping_add(i), &gen).map(|p| render_sample(&p)))
            .collect();
        Ok(Corpus { samples: samples.map_err(err)? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Corpus> {
        Ok(Corpus { samples: read_dataset(&dir).map_err(err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir)?;
        write_dataset(&self.samples, &dir).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.samples.len()
    }

    fn instance_count(&self) -> usize {
        self.samples.iter().map(|s| s.instances.len()).sum()
    }

    fn sample_id(&self, i: usize) -> PyResult<String> {
        self.get(i).map(|s| s.sample_id.clone())
    }

    fn global_caption(&self, i: usize) -> PyResult<Vec<String>> {
        self.get(i).map(|s| s.global_caption.clone())
    }

    fn instance_captions(&self, i: usize) -> PyResult<Vec<Vec<String>>> {
        self.get(i).map(|s| s.instances.iter().map(|a| a.caption.clone()).collect())
    }
}

impl Corpus {
    fn get(&self, i: usize) -> PyResult<&Sample> {
        self.samples
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("sample index {i} out of range")))
    }
}

/// Model plus optimizer state; configured by the same JSON as the CLI.
#[pyclass]
struct Model {
    state: ModelState,
    opt: OptState,
    config: TrainConfig,
}

#[pymethods]
impl Model {
    /// Build a fresh model from a training-config JSON string.
    #[new]
    fn new(config_json: &str) -> PyResult<Model> {
        let config = TrainConfig::from_json(config_json).map_err(err)?;
        let state = ModelState::init(config.dims.clone(), config.seeds.init);
        let opt = OptState::new(&state.params);
        Ok(Model { state, opt, config })
    }

    /// Run every configured epoch over the corpus; returns one loss-report
    /// dict per optimizer step.
    fn train<'py>(&mut self, py: Python<'py>, corpus: &Corpus) -> PyResult<Vec<pyo3::Bound<'py, PyDict>>> {
        let vocab = Vocab::builtin();
        let reports = run_training(
            &mut self.state,
            &mut self.opt,
            &corpus.samples,
            &self.config,
            &vocab,
            |_, _, _, _| {},
        )
        .map_err(err)?;
        reports.iter().map(|r| report_dict(py, r)).collect()
    }

    fn eval_global<'py>(&self, py: Python<'py>, corpus: &Corpus) -> PyResult<pyo3::Bound<'py, PyDict>> {
        let r = eval_global_retrieval(&self.state, &corpus.samples, &Vocab::builtin()).map_err(err)?;
        retrieval_dict(py, &r)
    }

    fn eval_instance<'py>(&self, py: Python<'py>, corpus: &Corpus) -> PyResult<pyo3::Bound<'py, PyDict>> {
        let r = eval_instance_retrieval(&self.state, &corpus.samples, &Vocab::builtin()).map_err(err)?;
        retrieval_dict(py, &r)
    }

    /// Fine-tune the box-regression head and return IoU accuracy at the
    /// given thresholds.
    #[pyo3(signature = (corpus, steps=100, lr=3e-3))]
    fn eval_grounding<'py>(
        &mut self,
        py: Python<'py>,
        corpus: &Corpus,
        steps: usize,
        lr: f64,
    ) -> PyResult<pyo3::Bound<'py, PyDict>> {
        let vocab = Vocab::builtin();
        let cfg = GroundingConfig { steps, lr, ..GroundingConfig::default() };
        let losses = grounding_finetune(&mut self.state, &corpus.samples, &vocab, &cfg).map_err(err)?;
        let preds = eval_grounding(&self.state, &corpus.samples, &vocab).map_err(err)?;
        let metrics = grounding_metrics(&preds, &[0.5, 0.7, 0.9]).map_err(err)?;
        let d = PyDict::new_bound(py);
        d.set_item("instances", preds.len())?;
        d.set_item("final_loss", losses.last().copied())?;
        d.set_item("iou_at", metrics)?;
        Ok(d)
    }

    /// Teacher-attention importance scores and mask flags for one sample:
    /// rows of (token, frame, row, col, score, masked).
    #[pyo3(signature = (corpus, index=0, rho=0.8))]
    fn mask_report(
        &self,
        corpus: &Corpus,
        index: usize,
        rho: f64,
    ) -> PyResult<Vec<(usize, usize, usize, usize, f64, bool)>> {
        let sample = corpus.get(index)?;
        let mut tape = Tape::new();
        let teacher = NnBound::bind(&mut tape, &self.state.teacher, false);
        let (tokens, attn) =
            iapt_core::encoders::teacher_features(&mut tape, &teacher, &self.state.config, &sample.frames)
                .map_err(err)?;
        let scores = importance_scores(attn.matrix()).map_err(err)?;
        let mask = build_mask(&scores, rho).map_err(err)?;
        Ok(tokens
            .positions
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.frame, p.row, p.col, scores[i], mask.mask[i]))
            .collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.state, Some(&self.opt), self.opt.step, &path).map_err(err)
    }

    /// Load model weights from a checkpoint, keeping this model's config.
    #[staticmethod]
    fn load(path: PathBuf, config_json: &str) -> PyResult<Model> {
        let config = TrainConfig::from_json(config_json).map_err(err)?;
        let (state, opt, _) = load_checkpoint(&path).map_err(err)?;
        let opt = opt.unwrap_or_else(|| OptState::new(&state.params));
        Ok(Model { state, opt, config })
    }

    /// Copy the video-encoder tensors out of a stage-1 checkpoint.
    fn handoff(&mut self, path: PathBuf) -> PyResult<()> {
        handoff_video_encoder(Path::new(&path), &mut self.state).map_err(err)
    }

    fn temperatures(&self) -> (f64, f64) {
        (self.state.tau(), self.state.tau_inst())
    }

    fn param_count(&self) -> usize {
        self.state.params.numel()
    }
}

/// Generalized IoU of two (x, y, w, h) boxes.
#[pyfunction]
fn giou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> PyResult<f64> {
    let ra = Rect { x: a.0, y: a.1, w: a.2, h: a.3 };
    let rb = Rect { x: b.0, y: b.1, w: b.2, h: b.3 };
    iapt_core::eval::giou(&ra, &rb).map_err(err)
}

/// Both-direction R@{1,5,10} from a square similarity matrix; `gt` pairs
/// row i with column gt[i].
#[pyfunction]
fn recall_metrics<'py>(py: Python<'py>, sim: Vec<Vec<f64>>, gt: Vec<usize>) -> PyResult<pyo3::Bound<'py, PyDict>> {
    if sim.is_empty() {
        return Err(PyValueError::new_err("empty similarity matrix"));
    }
    let cols = sim[0].len();
    let mut t = Tensor::zeros(sim.len(), cols);
    for (i, row) in sim.iter().enumerate() {
        if row.len() != cols {
            return Err(PyValueError::new_err("ragged similarity matrix"));
        }
        for (j, &v) in row.iter().enumerate() {
            *t.at_mut(i, j) = v;
        }
    }
    let r = retrieval_metrics(&t, &gt, Split::Global).map_err(err)?;
    retrieval_dict(py, &r)
}

#[pymodule]
fn iapt_py(m: &pyo3::Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(recall_metrics, m)?)?;
    Ok(())
}
