//! Python bindings: dumps, post-hoc scores, rank metrics, taxonomy,
//! geometry, report tables, and the paired training experiment.
//!
//! Matrices cross the boundary as lists of rows; structured reports come
//! back as JSON strings.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ood_audit::evaldump::{self, LinearHead, Role};
use ood_audit::geometry::{self, GeometryOptions};
use ood_audit::metrics;
use ood_audit::report::{self, Layout, TableFormat};
use ood_audit::scores::{self, ScoreKind, ScoreOptions, ScoreVector, Scorer};
use ood_audit::taxonomy::{self, TaxonomyOptions};
use ood_audit::vmr::{self, TaskConfig, VmrConfig};
use ood_audit::AuditError;

fn py_err(e: AuditError) -> PyErr {
    match e {
        AuditError::Io { .. } => PyIOError::new_err(e.to_string()),
        AuditError::InvalidArgument(_)
        | AuditError::Shape(_)
        | AuditError::NonFinite(_)
        | AuditError::MissingLabels(_)
        | AuditError::MissingHead(_)
        | AuditError::InvalidDump(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    json.map_or_else(|| Ok(T::default()), |s| serde_json::from_str(s).map_err(json_err))
}

fn score_kind(name: &str) -> PyResult<ScoreKind> {
    name.parse().map_err(py_err)
}

/// One evaluation split: logits, penultimate features, optional labels.
#[pyclass(name = "EvalDump", module = "ood_audit_py")]
struct PyEvalDump {
    inner: evaldump::EvalDump,
}

#[pymethods]
impl PyEvalDump {
    #[new]
    #[pyo3(signature = (name, role, logits, features, labels=None, head_weights=None, head_bias=None))]
    fn new(
        name: &str,
        role: &str,
        logits: Vec<Vec<f64>>,
        features: Vec<Vec<f64>>,
        labels: Option<Vec<i32>>,
        head_weights: Option<Vec<Vec<f64>>>,
        head_bias: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let role: Role = role.parse().map_err(py_err)?;
        let mut inner = evaldump::EvalDump::new(name, role, labels, to_matrix(logits, "logits")?, to_matrix(features, "features")?);
        match (head_weights, head_bias) {
            (Some(w), b) => {
                let w = to_matrix(w, "head_weights")?;
                let b = b.unwrap_or_else(|| vec![0.0; w.nrows()]);
                if b.len() != w.nrows() {
                    return Err(PyValueError::new_err("head_bias length must match head_weights rows"));
                }
                inner = inner.with_head(LinearHead::new(w, DVector::from_vec(b)));
            }
            (None, Some(_)) => return Err(PyValueError::new_err("head_bias given without head_weights")),
            (None, None) => {}
        }
        Ok(Self { inner })
    }

    #[getter]
    fn has_head(&self) -> bool {
        self.inner.head.is_some()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: evaldump::load_dump(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        evaldump::write_dump(&self.inner, path).map_err(py_err)
    }

    /// Validation report as JSON.
    fn validate(&self) -> PyResult<String> {
        serde_json::to_string(&evaldump::validate_dump(&self.inner)).map_err(json_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn role(&self) -> String {
        self.inner.role.as_str().to_string()
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn feat_dim(&self) -> usize {
        self.inner.feat_dim()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<i32>> {
        self.inner.labels.clone()
    }

    #[getter]
    fn logits(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.logits)
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.inner.features)
    }

    fn __repr__(&self) -> String {
        format!(
            "EvalDump(name={:?}, role={}, n={}, K={}, D={})",
            self.inner.name,
            self.inner.role,
            self.inner.n_samples(),
            self.inner.n_classes(),
            self.inner.feat_dim()
        )
    }
}

fn logit_score(logits: Vec<Vec<f64>>, f: impl Fn(&DMatrix<f64>) -> ood_audit::Result<ScoreVector>) -> PyResult<Vec<f64>> {
    Ok(f(&to_matrix(logits, "logits")?).map_err(py_err)?.values)
}

#[pyfunction]
fn msp(logits: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    logit_score(logits, scores::msp)
}

#[pyfunction]
#[pyo3(signature = (logits, temperature=1.0))]
fn energy(logits: Vec<Vec<f64>>, temperature: f64) -> PyResult<Vec<f64>> {
    logit_score(logits, |z| scores::energy(z, temperature))
}

#[pyfunction]
fn maxlogit(logits: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    logit_score(logits, scores::maxlogit)
}

#[pyfunction]
fn margin(logits: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    logit_score(logits, scores::margin)
}

#[pyfunction]
fn entropy(logits: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    logit_score(logits, scores::shannon_entropy)
}

/// Any score family over a dump, oriented so that larger means more OOD.
#[pyfunction]
#[pyo3(signature = (kind, dump, fit=None, options=None))]
fn score(kind: &str, dump: &PyEvalDump, fit: Option<&PyEvalDump>, options: Option<&str>) -> PyResult<Vec<f64>> {
    let opts: ScoreOptions = parse(options)?;
    let sv = scores::compute_score(score_kind(kind)?, &dump.inner, fit.map(|f| &f.inner), &opts).map_err(py_err)?;
    Ok(scores::orient_ood_larger(&sv).values)
}

/// Rank AUROC with OOD as the positive class; both inputs OOD-larger.
#[pyfunction]
fn auroc(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    let id = ScoreVector::new("s", scores::Direction::OodLarger, id_scores);
    let ood = ScoreVector::new("s", scores::Direction::OodLarger, ood_scores);
    metrics::auroc(&id, &ood).map_err(py_err)
}

#[pyfunction]
fn fpr_at_95_tpr(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    let id = ScoreVector::new("s", scores::Direction::OodLarger, id_scores);
    let ood = ScoreVector::new("s", scores::Direction::OodLarger, ood_scores);
    metrics::fpr_at_95_tpr(&id, &ood).map_err(py_err)
}

#[pyfunction]
fn accuracy(logits: Vec<Vec<f64>>, labels: Vec<i32>) -> PyResult<f64> {
    metrics::accuracy(&to_matrix(logits, "logits")?, &labels).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (logits, labels, n_bins=metrics::DEFAULT_ECE_BINS))]
fn ece(logits: Vec<Vec<f64>>, labels: Vec<i32>, n_bins: usize) -> PyResult<f64> {
    metrics::ece(&to_matrix(logits, "logits")?, &labels, n_bins).map_err(py_err)
}

#[pyfunction]
fn nll(logits: Vec<Vec<f64>>, labels: Vec<i32>) -> PyResult<f64> {
    metrics::nll(&to_matrix(logits, "logits")?, &labels).map_err(py_err)
}

/// Four-group collapse taxonomy as JSON.
#[pyfunction]
#[pyo3(signature = (id_dump, ood_dumps, score="energy", fit=None, options=None))]
fn taxonomy_report(
    id_dump: &PyEvalDump,
    ood_dumps: Vec<PyRef<'_, PyEvalDump>>,
    score: &str,
    fit: Option<&PyEvalDump>,
    options: Option<&str>,
) -> PyResult<String> {
    let opts: TaxonomyOptions = parse(options)?;
    let scorer = Scorer::prepare(score_kind(score)?, fit.map(|f| &f.inner), &ScoreOptions::default()).map_err(py_err)?;
    let refs: Vec<&evaldump::EvalDump> = ood_dumps.iter().map(|d| &d.inner).collect();
    let rep = taxonomy::taxonomy_report(&id_dump.inner, &refs, &scorer, &opts).map_err(py_err)?;
    serde_json::to_string(&rep).map_err(json_err)
}

#[pyfunction]
fn participation_ratio(features: Vec<Vec<f64>>) -> PyResult<f64> {
    geometry::participation_ratio(&to_matrix(features, "features")?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (features, k_min=geometry::DEFAULT_K_MIN, k_max=geometry::DEFAULT_K_MAX))]
fn intrinsic_dim_mle(features: Vec<Vec<f64>>, k_min: usize, k_max: usize) -> PyResult<f64> {
    geometry::intrinsic_dim_mle(&to_matrix(features, "features")?, k_min, k_max).map_err(py_err)
}

/// Geometry report over ID-correct, ID-wrong, and the given OOD dumps, as JSON.
#[pyfunction]
fn geometry_report(id_dump: &PyEvalDump, ood_dumps: Vec<PyRef<'_, PyEvalDump>>) -> PyResult<String> {
    let parts: Vec<&DMatrix<f64>> = ood_dumps.iter().map(|d| &d.inner.features).collect();
    let ood = ood_audit::linalg::vstack(&parts);
    let rep = geometry::geometry_report(&id_dump.inner, &ood, &GeometryOptions::default()).map_err(py_err)?;
    serde_json::to_string(&rep).map_err(json_err)
}

/// Renders metric rows given as CSV text.
#[pyfunction]
#[pyo3(signature = (metrics_csv, layout="benchmark", format="markdown"))]
fn render_table(metrics_csv: &str, layout: &str, format: &str) -> PyResult<String> {
    let rows = report::rows_from_csv(metrics_csv).map_err(py_err)?;
    let layout: Layout = layout.parse().map_err(py_err)?;
    let format: TableFormat = format.parse().map_err(py_err)?;
    report::render_table(&rows, layout, format).map_err(py_err)
}

/// Paired baseline / regularized runs on the synthetic task; JSON report.
#[pyfunction]
#[pyo3(signature = (seeds, task=None, config=None))]
fn vmr_experiment(py: Python<'_>, seeds: Vec<u64>, task: Option<&str>, config: Option<&str>) -> PyResult<String> {
    let task: TaskConfig = parse(task)?;
    let cfg: VmrConfig = parse(config)?;
    let rep = py.detach(|| vmr::vmr_experiment(&task, &cfg, &seeds)).map_err(py_err)?;
    serde_json::to_string(&rep).map_err(json_err)
}

#[pymodule]
fn ood_audit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEvalDump>()?;
    m.add_function(wrap_pyfunction!(msp, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(maxlogit, m)?)?;
    m.add_function(wrap_pyfunction!(margin, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_95_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(nll, m)?)?;
    m.add_function(wrap_pyfunction!(taxonomy_report, m)?)?;
    m.add_function(wrap_pyfunction!(participation_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(intrinsic_dim_mle, m)?)?;
    m.add_function(wrap_pyfunction!(geometry_report, m)?)?;
    m.add_function(wrap_pyfunction!(render_table, m)?)?;
    m.add_function(wrap_pyfunction!(vmr_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
