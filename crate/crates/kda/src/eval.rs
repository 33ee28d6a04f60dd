//! Nearest-knowledge inference and the generalized zero-shot metric suite
//! (S, U, HM, ZSL), plus common-space embedding export.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datahub::{DataError, Dataset};
use crate::gradcore::{Graph, Tensor, TensorError};
use crate::model::KdaModel;

/// Samples forwarded per evaluation chunk.
const EVAL_CHUNK: usize = 256;

#[derive(Debug)]
pub enum EvalError {
    Domain(String),
    Tensor(TensorError),
    Data(DataError),
    Io(String),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Domain(d) => write!(f, "{d}"),
            Self::Tensor(e) => write!(f, "{e}"),
            Self::Data(e) => write!(f, "{e}"),
            Self::Io(d) => write!(f, "{d}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

impl From<DataError> for EvalError {
    fn from(e: DataError) -> Self {
        Self::Data(e)
    }
}

/// Mean class accuracies of one evaluation run, as fractions in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Seen test classes, candidates = seen ∪ unseen.
    pub s: f64,
    /// Unseen test classes, candidates = seen ∪ unseen.
    pub u: f64,
    /// Harmonic mean 2US/(U+S).
    pub hm: f64,
    /// Unseen test classes, candidates restricted to unseen.
    pub zsl: f64,
}

impl EvalResult {
    /// Fixed-format percent-scale metric line.
    pub fn metrics_line(&self) -> String {
        format!(
            "S={:.2} U={:.2} HM={:.2} ZSL={:.2}",
            self.s * 100.0,
            self.u * 100.0,
            self.hm * 100.0,
            self.zsl * 100.0
        )
    }
}

/// One sample's nearest-knowledge prediction.
#[derive(Debug, Clone)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub true_class: i64,
    pub predicted_class: i64,
    /// Euclidean distance to each candidate, aligned with the candidate list.
    pub distances: Vec<f64>,
}

/// Predict each row of `rho_av` as the candidate class whose representative
/// is nearest in Euclidean distance; ties go to the lowest class id.
pub fn predict(
    rho_av: &Tensor,
    class_reps: &Tensor,
    candidate_ids: &[i64],
    sample_ids: &[String],
    true_classes: &[i64],
) -> Result<Vec<PredictionRecord>, EvalError> {
    if candidate_ids.is_empty() {
        return Err(EvalError::Domain("empty candidate set".to_string()));
    }
    let d = rho_av.cols();
    if class_reps.cols() != d || class_reps.rows() != candidate_ids.len() {
        return Err(EvalError::Tensor(TensorError::ShapeMismatch {
            op: "predict",
            left: rho_av.shape(),
            right: class_reps.shape(),
        }));
    }
    let b = rho_av.rows();
    if sample_ids.len() != b || true_classes.len() != b {
        return Err(EvalError::Domain(format!(
            "predict: {b} embedding rows but {} ids / {} labels",
            sample_ids.len(),
            true_classes.len()
        )));
    }
    let av = rho_av.data();
    let reps = class_reps.data();
    let mut out = Vec::with_capacity(b);
    for row in 0..b {
        let x = &av[row * d..(row + 1) * d];
        let mut distances = Vec::with_capacity(candidate_ids.len());
        let mut best: Option<(f64, i64)> = None;
        for (k, &class_id) in candidate_ids.iter().enumerate() {
            let r = &reps[k * d..(k + 1) * d];
            let sq: f64 = x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
            let dist = sq.sqrt();
            distances.push(dist);
            let closer = match best {
                None => true,
                Some((bd, bid)) => dist < bd || (dist == bd && class_id < bid),
            };
            if closer {
                best = Some((dist, class_id));
            }
        }
        out.push(PredictionRecord {
            sample_id: sample_ids[row].clone(),
            true_class: true_classes[row],
            predicted_class: best.expect("non-empty candidates").1,
            distances,
        });
    }
    Ok(out)
}

/// Unweighted mean over `class_set` of each class's per-sample accuracy.
pub fn mean_class_accuracy(
    preds: &[PredictionRecord],
    class_set: &[i64],
) -> Result<f64, EvalError> {
    if class_set.is_empty() {
        return Err(EvalError::Domain(
            "mean_class_accuracy: empty class set".to_string(),
        ));
    }
    let mut acc_sum = 0.0;
    for &class in class_set {
        let mut total = 0usize;
        let mut correct = 0usize;
        for p in preds.iter().filter(|p| p.true_class == class) {
            total += 1;
            if p.predicted_class == class {
                correct += 1;
            }
        }
        if total == 0 {
            return Err(EvalError::Domain(format!(
                "mean_class_accuracy: class {class} has no test samples"
            )));
        }
        acc_sum += correct as f64 / total as f64;
    }
    Ok(acc_sum / class_set.len() as f64)
}

/// 2US/(U+S), defined as 0 when both inputs are 0.
pub fn harmonic_mean(s: f64, u: f64) -> Result<f64, EvalError> {
    if s < 0.0 || u < 0.0 {
        return Err(EvalError::Domain(format!(
            "harmonic_mean: negative input (S={s}, U={u})"
        )));
    }
    if s + u == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * u * s / (u + s))
}

/// Embed each listed class's descriptions through E_t and average them,
/// giving one common-space representative row per class. Differentiable when
/// recorded on a live graph.
pub fn class_mean_embeddings<R: Rng>(
    g: &mut Graph,
    model: &KdaModel,
    dataset: &Dataset,
    classes: &[i64],
    dropout_rng: Option<&mut R>,
) -> Result<Tensor, EvalError> {
    let (rows, counts) = dataset.knowledge_rows(classes)?;
    let embedded = model.embed_knowledge(g, &rows, dropout_rng)?;
    let total: usize = counts.iter().sum();
    let mut avg = vec![0.0; classes.len() * total];
    let mut offset = 0;
    for (c, &k) in counts.iter().enumerate() {
        for j in 0..k {
            avg[c * total + offset + j] = 1.0 / k as f64;
        }
        offset += k;
    }
    let avg = Tensor::from_vec(vec![classes.len(), total], avg)?;
    Ok(g.matmul(&avg, &embedded)?)
}

fn classes_present(dataset: &Dataset, ids: &[String]) -> Vec<i64> {
    let set: BTreeSet<i64> = ids
        .iter()
        .filter_map(|id| dataset.record(id).map(|r| r.class_id))
        .collect();
    set.into_iter().collect()
}

/// Eval-mode common-space embeddings for the given sample ids, chunked.
fn embed_samples(
    model: &KdaModel,
    dataset: &Dataset,
    ids: &[String],
) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut rows = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let (audio, visual, _) = dataset.stack_features(chunk)?;
        let mut g = Graph::new();
        let av = model.embed_features::<rand_chacha::ChaCha8Rng>(&mut g, &audio, &visual, None)?;
        let d = av.rho_av.cols();
        let data = av.rho_av.to_vec();
        for b in 0..chunk.len() {
            rows.push(data[b * d..(b + 1) * d].to_vec());
        }
    }
    Ok(rows)
}

fn predictions_for(
    model: &KdaModel,
    dataset: &Dataset,
    ids: &[String],
    candidates: &[i64],
    reps: &Tensor,
) -> Result<Vec<PredictionRecord>, EvalError> {
    let rows = embed_samples(model, dataset, ids)?;
    let d = reps.cols();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let rho_av = Tensor::from_vec(vec![rows.len(), d], flat)?;
    let true_classes: Vec<i64> = ids
        .iter()
        .map(|id| dataset.record(id).map(|r| r.class_id).unwrap_or(-1))
        .collect();
    predict(&rho_av, reps, candidates, ids, &true_classes)
}

/// Run the full GZSL + ZSL evaluation protocol on the test partitions:
/// S and U against the seen ∪ unseen candidate space, their harmonic mean,
/// and ZSL against the unseen candidate space only.
pub fn evaluate(model: &KdaModel, dataset: &Dataset) -> Result<EvalResult, EvalError> {
    if dataset.split.test_seen.is_empty() {
        return Err(EvalError::Domain(
            "test_seen partition is empty".to_string(),
        ));
    }
    if dataset.split.test_unseen.is_empty() {
        return Err(EvalError::Domain(
            "test_unseen partition is empty".to_string(),
        ));
    }
    let seen = dataset.seen_classes();
    let unseen = dataset.unseen_classes();
    let mut gzsl_candidates = seen.clone();
    gzsl_candidates.extend(&unseen);
    gzsl_candidates.sort_unstable();

    let mut g = Graph::new();
    let reps = class_mean_embeddings::<rand_chacha::ChaCha8Rng>(
        &mut g,
        model,
        dataset,
        &gzsl_candidates,
        None,
    )?;

    let preds_seen = predictions_for(
        model,
        dataset,
        &dataset.split.test_seen,
        &gzsl_candidates,
        &reps,
    )?;
    let s = mean_class_accuracy(
        &preds_seen,
        &classes_present(dataset, &dataset.split.test_seen),
    )?;

    let preds_unseen = predictions_for(
        model,
        dataset,
        &dataset.split.test_unseen,
        &gzsl_candidates,
        &reps,
    )?;
    let unseen_present = classes_present(dataset, &dataset.split.test_unseen);
    let u = mean_class_accuracy(&preds_unseen, &unseen_present)?;
    let hm = harmonic_mean(s, u)?;

    // ZSL: restrict candidates to the unseen classes; representatives are the
    // same per-class means, so select the matching rows.
    let d = reps.cols();
    let reps_data = reps.to_vec();
    let mut zsl_rows = Vec::with_capacity(unseen.len() * d);
    for (k, class) in gzsl_candidates.iter().enumerate() {
        if unseen.binary_search(class).is_ok() {
            zsl_rows.extend_from_slice(&reps_data[k * d..(k + 1) * d]);
        }
    }
    let zsl_reps = Tensor::from_vec(vec![unseen.len(), d], zsl_rows)?;
    let preds_zsl = predictions_for(
        model,
        dataset,
        &dataset.split.test_unseen,
        &unseen,
        &zsl_reps,
    )?;
    let zsl = mean_class_accuracy(&preds_zsl, &unseen_present)?;

    Ok(EvalResult { s, u, hm, zsl })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub class: i64,
    /// "sample" for ρ_av rows, "knowledge" for class-representative rows.
    pub kind: String,
    pub vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    common_dim: usize,
}

/// Dump every sample's common-space embedding plus each class's embedded
/// knowledge mean, one JSON object per line. Knowledge rows carry
/// kind = "knowledge".
pub fn export_embeddings(
    model: &KdaModel,
    dataset: &Dataset,
    out_path: &Path,
) -> Result<(), EvalError> {
    let ids: Vec<String> = dataset.records.iter().map(|r| r.id.clone()).collect();
    let sample_rows = embed_samples(model, dataset, &ids)?;

    let mut classes = dataset.seen_classes();
    classes.extend(dataset.unseen_classes());
    classes.sort_unstable();
    let mut g = Graph::new();
    let reps =
        class_mean_embeddings::<rand_chacha::ChaCha8Rng>(&mut g, model, dataset, &classes, None)?;
    let d = reps.cols();
    let reps_data = reps.to_vec();

    let mut out = String::new();
    out.push_str(
        &serde_json::to_string(&EmbeddingHeader {
            common_dim: model.config.common_dim,
        })
        .expect("header serializes"),
    );
    out.push('\n');
    for (record, vector) in dataset.records.iter().zip(sample_rows) {
        let row = EmbeddingRow {
            id: record.id.clone(),
            class: record.class_id,
            kind: "sample".to_string(),
            vector,
        };
        out.push_str(&serde_json::to_string(&row).expect("row serializes"));
        out.push('\n');
    }
    for (k, &class) in classes.iter().enumerate() {
        let row = EmbeddingRow {
            id: dataset.knowledge[&class].name.clone(),
            class,
            kind: "knowledge".to_string(),
            vector: reps_data[k * d..(k + 1) * d].to_vec(),
        };
        out.push_str(&serde_json::to_string(&row).expect("row serializes"));
        out.push('\n');
    }
    fs::write(out_path, out).map_err(|e| EvalError::Io(format!("{}: {e}", out_path.display())))
}

/// Reload an embedding dump written by [`export_embeddings`].
pub fn load_embeddings(path: &Path) -> Result<(usize, Vec<EmbeddingRow>), EvalError> {
    let text =
        fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: EmbeddingHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| EvalError::Io(format!("{}: missing header line", path.display())))?,
    )
    .map_err(|e| EvalError::Io(format!("{}: bad header: {e}", path.display())))?;
    let mut rows = Vec::new();
    for line in lines {
        let row: EmbeddingRow = serde_json::from_str(line)
            .map_err(|e| EvalError::Io(format!("{}: bad row: {e}", path.display())))?;
        rows.push(row);
    }
    Ok((header.common_dim, rows))
}
