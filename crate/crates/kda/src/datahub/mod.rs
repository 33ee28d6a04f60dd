//! Feature/knowledge file ingestion, GZSL split management, and batching.
//!
//! File formats: a features `.jsonl` (header line with dims, then one record
//! per line), a knowledge `.jsonl` (header with the text dim, then one class
//! per line), and a split `.json` naming seen/unseen classes and the
//! train/test sample partitions. All numbers are 64-bit floats; integers must
//! be exact.

mod synth;

pub use synth::{generate_synthetic, SynthConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradcore::{Tensor, TensorError};

/// One sample: paired audio and visual feature vectors with a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub class_id: i64,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
}

/// One class's precomputed description embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassKnowledge {
    pub class_id: i64,
    pub name: String,
    pub embeddings: Vec<Vec<f64>>,
}

/// Seen/unseen class sets and the sample partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct GzslSplit {
    pub seen: Vec<i64>,
    pub unseen: Vec<i64>,
    pub train: Vec<String>,
    pub test_seen: Vec<String>,
    pub test_unseen: Vec<String>,
}

/// A fully validated in-memory dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub records: Vec<FeatureRecord>,
    pub knowledge: BTreeMap<i64, ClassKnowledge>,
    pub split: GzslSplit,
    index: BTreeMap<String, usize>,
}

#[derive(Debug)]
pub enum DataError {
    Io {
        path: String,
        detail: String,
    },
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    Validation {
        rule: String,
    },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io { path, detail } => write!(f, "{path}: {detail}"),
            Self::Parse { path, line, detail } => {
                write!(f, "{path}: line {line}: {detail}")
            }
            Self::Validation { rule } => write!(f, "validation failed: {rule}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<TensorError> for DataError {
    fn from(e: TensorError) -> Self {
        Self::Validation {
            rule: e.to_string(),
        }
    }
}

fn rule(msg: impl Into<String>) -> DataError {
    DataError::Validation { rule: msg.into() }
}

#[derive(Serialize, Deserialize)]
struct FeaturesHeader {
    audio_dim: usize,
    visual_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct FeatureLine {
    id: String,
    class: i64,
    audio: Vec<f64>,
    visual: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct KnowledgeHeader {
    text_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct KnowledgeLine {
    class: i64,
    name: String,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    seen: Vec<i64>,
    unseen: Vec<i64>,
    train: Vec<String>,
    test_seen: Vec<String>,
    test_unseen: Vec<String>,
}

fn read_to_string(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn parse_line<T: for<'de> Deserialize<'de>>(
    path: &Path,
    line_no: usize,
    line: &str,
) -> Result<T, DataError> {
    serde_json::from_str(line).map_err(|e| DataError::Parse {
        path: path.display().to_string(),
        line: line_no,
        detail: e.to_string(),
    })
}

/// Load and fully validate a dataset from its three files.
pub fn load_dataset(
    features_path: &Path,
    knowledge_path: &Path,
    split_path: &Path,
) -> Result<Dataset, DataError> {
    let features_text = read_to_string(features_path)?;
    let mut lines = features_text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines.next().ok_or_else(|| DataError::Parse {
        path: features_path.display().to_string(),
        line: 1,
        detail: "missing header line".to_string(),
    })?;
    let header: FeaturesHeader = parse_line(features_path, 1, header_line)?;
    let mut records = Vec::new();
    for (idx, line) in lines {
        let parsed: FeatureLine = parse_line(features_path, idx + 1, line)?;
        records.push(FeatureRecord {
            id: parsed.id,
            class_id: parsed.class,
            audio: parsed.audio,
            visual: parsed.visual,
        });
    }

    let knowledge_text = read_to_string(knowledge_path)?;
    let mut lines = knowledge_text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines.next().ok_or_else(|| DataError::Parse {
        path: knowledge_path.display().to_string(),
        line: 1,
        detail: "missing header line".to_string(),
    })?;
    let kheader: KnowledgeHeader = parse_line(knowledge_path, 1, header_line)?;
    let mut knowledge = BTreeMap::new();
    for (idx, line) in lines {
        let parsed: KnowledgeLine = parse_line(knowledge_path, idx + 1, line)?;
        let entry = ClassKnowledge {
            class_id: parsed.class,
            name: parsed.name,
            embeddings: parsed.embeddings,
        };
        if knowledge.insert(parsed.class, entry).is_some() {
            return Err(rule(format!(
                "class {} has more than one knowledge entry",
                parsed.class
            )));
        }
    }

    let split_text = read_to_string(split_path)?;
    let split: SplitFile = serde_json::from_str(&split_text).map_err(|e| DataError::Parse {
        path: split_path.display().to_string(),
        line: 1,
        detail: e.to_string(),
    })?;

    Dataset::assemble(
        header.audio_dim,
        header.visual_dim,
        kheader.text_dim,
        records,
        knowledge,
        GzslSplit {
            seen: split.seen,
            unseen: split.unseen,
            train: split.train,
            test_seen: split.test_seen,
            test_unseen: split.test_unseen,
        },
    )
}

impl Dataset {
    /// Build a dataset from parts, enforcing every structural invariant.
    pub fn assemble(
        audio_dim: usize,
        visual_dim: usize,
        text_dim: usize,
        records: Vec<FeatureRecord>,
        knowledge: BTreeMap<i64, ClassKnowledge>,
        split: GzslSplit,
    ) -> Result<Self, DataError> {
        let mut index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(rule(format!("duplicate sample id '{}'", r.id)));
            }
        }
        let ds = Self {
            audio_dim,
            visual_dim,
            text_dim,
            records,
            knowledge,
            split,
            index,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<(), DataError> {
        for r in &self.records {
            if r.audio.len() != self.audio_dim {
                return Err(rule(format!(
                    "sample '{}': audio length {} does not match header audio_dim {}",
                    r.id,
                    r.audio.len(),
                    self.audio_dim
                )));
            }
            if r.visual.len() != self.visual_dim {
                return Err(rule(format!(
                    "sample '{}': visual length {} does not match header visual_dim {}",
                    r.id,
                    r.visual.len(),
                    self.visual_dim
                )));
            }
            if !self.knowledge.contains_key(&r.class_id) {
                return Err(rule(format!(
                    "sample '{}' references class {} with no knowledge entry",
                    r.id, r.class_id
                )));
            }
        }
        for k in self.knowledge.values() {
            if k.embeddings.is_empty() {
                return Err(rule(format!(
                    "class {} has no description embeddings",
                    k.class_id
                )));
            }
            for e in &k.embeddings {
                if e.len() != self.text_dim {
                    return Err(rule(format!(
                        "class {}: embedding length {} does not match header text_dim {}",
                        k.class_id,
                        e.len(),
                        self.text_dim
                    )));
                }
            }
        }

        let seen: BTreeSet<i64> = self.split.seen.iter().copied().collect();
        let unseen: BTreeSet<i64> = self.split.unseen.iter().copied().collect();
        if seen.len() != self.split.seen.len() || unseen.len() != self.split.unseen.len() {
            return Err(rule("duplicate class id within seen or unseen list"));
        }
        if seen.is_empty() {
            return Err(rule("seen class set is empty"));
        }
        if unseen.is_empty() {
            return Err(rule("unseen class set is empty (ZSL undefined)"));
        }
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(rule(format!("class {c} is both seen and unseen")));
        }
        for c in seen.iter().chain(unseen.iter()) {
            if !self.knowledge.contains_key(c) {
                return Err(rule(format!("split class {c} has no knowledge entry")));
            }
        }

        let mut assigned: BTreeSet<&str> = BTreeSet::new();
        let partitions: [(&str, &[String]); 3] = [
            ("train", &self.split.train),
            ("test_seen", &self.split.test_seen),
            ("test_unseen", &self.split.test_unseen),
        ];
        for (name, ids) in partitions {
            for id in ids {
                let rec = self
                    .record(id)
                    .ok_or_else(|| rule(format!("{name} references unknown sample id '{id}'")))?;
                if !assigned.insert(id.as_str()) {
                    return Err(rule(format!(
                        "sample id '{id}' appears in more than one partition"
                    )));
                }
                let ok = match name {
                    "train" | "test_seen" => seen.contains(&rec.class_id),
                    _ => unseen.contains(&rec.class_id),
                };
                if !ok {
                    return Err(rule(format!(
                        "{name} sample '{id}' has class {} outside the partition's class set",
                        rec.class_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn record(&self, id: &str) -> Option<&FeatureRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// Seen class ids, ascending.
    pub fn seen_classes(&self) -> Vec<i64> {
        let mut v = self.split.seen.clone();
        v.sort_unstable();
        v
    }

    /// Unseen class ids, ascending.
    pub fn unseen_classes(&self) -> Vec<i64> {
        let mut v = self.split.unseen.clone();
        v.sort_unstable();
        v
    }

    /// Stack the audio and visual features of the given sample ids into B×A
    /// and B×V tensors, returning the class ids alongside.
    pub fn stack_features(&self, ids: &[String]) -> Result<(Tensor, Tensor, Vec<i64>), DataError> {
        let mut audio = Vec::with_capacity(ids.len() * self.audio_dim);
        let mut visual = Vec::with_capacity(ids.len() * self.visual_dim);
        let mut classes = Vec::with_capacity(ids.len());
        for id in ids {
            let r = self
                .record(id)
                .ok_or_else(|| rule(format!("unknown sample id '{id}'")))?;
            audio.extend_from_slice(&r.audio);
            visual.extend_from_slice(&r.visual);
            classes.push(r.class_id);
        }
        let audio = Tensor::from_vec(vec![ids.len(), self.audio_dim], audio)?;
        let visual = Tensor::from_vec(vec![ids.len(), self.visual_dim], visual)?;
        Ok((audio, visual, classes))
    }

    /// Stack every description embedding of the given classes into a
    /// (ΣK)×text_dim tensor, returning each class's description count.
    pub fn knowledge_rows(&self, classes: &[i64]) -> Result<(Tensor, Vec<usize>), DataError> {
        let mut rows = Vec::new();
        let mut counts = Vec::with_capacity(classes.len());
        for c in classes {
            let k = self
                .knowledge
                .get(c)
                .ok_or_else(|| rule(format!("class {c} has no knowledge entry")))?;
            counts.push(k.embeddings.len());
            for e in &k.embeddings {
                rows.extend_from_slice(e);
            }
        }
        let total: usize = counts.iter().sum();
        let t = Tensor::from_vec(vec![total, self.text_dim], rows)?;
        Ok((t, counts))
    }
}

/// Serialize the features file (header line, then one record per line).
pub fn encode_features(ds: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(
        &serde_json::to_string(&FeaturesHeader {
            audio_dim: ds.audio_dim,
            visual_dim: ds.visual_dim,
        })
        .expect("header serializes"),
    );
    out.push('\n');
    for r in &ds.records {
        let line = FeatureLine {
            id: r.id.clone(),
            class: r.class_id,
            audio: r.audio.clone(),
            visual: r.visual.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Serialize the knowledge file.
pub fn encode_knowledge(ds: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(
        &serde_json::to_string(&KnowledgeHeader {
            text_dim: ds.text_dim,
        })
        .expect("header serializes"),
    );
    out.push('\n');
    for k in ds.knowledge.values() {
        let line = KnowledgeLine {
            class: k.class_id,
            name: k.name.clone(),
            embeddings: k.embeddings.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("knowledge serializes"));
        out.push('\n');
    }
    out
}

/// Serialize the split file.
pub fn encode_split(ds: &Dataset) -> String {
    let file = SplitFile {
        seen: ds.split.seen.clone(),
        unseen: ds.split.unseen.clone(),
        train: ds.split.train.clone(),
        test_seen: ds.split.test_seen.clone(),
        test_unseen: ds.split.test_unseen.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("split serializes");
    s.push('\n');
    s
}

/// Write the three dataset files.
pub fn save_dataset(
    ds: &Dataset,
    features_path: &Path,
    knowledge_path: &Path,
    split_path: &Path,
) -> Result<(), DataError> {
    for (path, content) in [
        (features_path, encode_features(ds)),
        (knowledge_path, encode_knowledge(ds)),
        (split_path, encode_split(ds)),
    ] {
        fs::write(path, content).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    }
    Ok(())
}

/// How a partition is batched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled; a trailing batch smaller than 2 is dropped (the alignment
    /// loss needs B ≥ 2) and batch_size must be ≥ 2.
    Train,
    /// Shuffled; every sample is kept, including a short trailing batch.
    Eval,
}

/// Deterministically shuffle `0..count` and partition it into batches.
pub fn batch_indices(
    count: usize,
    batch_size: usize,
    shuffle_seed: u64,
    mode: BatchMode,
) -> Result<Vec<Vec<usize>>, DataError> {
    if count == 0 {
        return Err(rule("batches: empty partition"));
    }
    if batch_size == 0 || (mode == BatchMode::Train && batch_size < 2) {
        return Err(rule(format!(
            "batches: batch size {batch_size} too small for {mode:?}"
        )));
    }
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect();
    if mode == BatchMode::Train {
        if let Some(last) = batches.last() {
            if last.len() < 2 {
                batches.pop();
            }
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_dataset() -> Dataset {
        let records = vec![
            FeatureRecord {
                id: "a0".into(),
                class_id: 0,
                audio: vec![0.1, 0.2],
                visual: vec![1.0],
            },
            FeatureRecord {
                id: "a1".into(),
                class_id: 0,
                audio: vec![0.3, 0.4],
                visual: vec![2.0],
            },
            FeatureRecord {
                id: "b0".into(),
                class_id: 1,
                audio: vec![0.5, 0.6],
                visual: vec![3.0],
            },
        ];
        let mut knowledge = BTreeMap::new();
        knowledge.insert(
            0,
            ClassKnowledge {
                class_id: 0,
                name: "zero".into(),
                embeddings: vec![vec![0.0, 0.0, 0.0]],
            },
        );
        knowledge.insert(
            1,
            ClassKnowledge {
                class_id: 1,
                name: "one".into(),
                embeddings: vec![vec![1.0, 1.0, 1.0], vec![1.1, 0.9, 1.0]],
            },
        );
        let split = GzslSplit {
            seen: vec![0],
            unseen: vec![1],
            train: vec!["a0".into()],
            test_seen: vec!["a1".into()],
            test_unseen: vec!["b0".into()],
        };
        Dataset::assemble(2, 1, 3, records, knowledge, split).unwrap()
    }

    #[test]
    fn round_trip_preserves_structure() {
        let ds = toy_dataset();
        let dir = tempdir().unwrap();
        let f = dir.path().join("features.jsonl");
        let k = dir.path().join("knowledge.jsonl");
        let s = dir.path().join("split.json");
        save_dataset(&ds, &f, &k, &s).unwrap();
        let loaded = load_dataset(&f, &k, &s).unwrap();
        assert_eq!(loaded.records, ds.records);
        assert_eq!(loaded.knowledge, ds.knowledge);
        assert_eq!(loaded.split, ds.split);

        // save → load → save is byte-identical
        assert_eq!(encode_features(&loaded), encode_features(&ds));
        assert_eq!(encode_knowledge(&loaded), encode_knowledge(&ds));
        assert_eq!(encode_split(&loaded), encode_split(&ds));
    }

    #[test]
    fn missing_knowledge_entry_is_rejected() {
        let mut ds = toy_dataset();
        ds.knowledge.remove(&1);
        let res = Dataset::assemble(
            ds.audio_dim,
            ds.visual_dim,
            ds.text_dim,
            ds.records,
            ds.knowledge,
            ds.split,
        );
        assert!(matches!(res, Err(DataError::Validation { .. })));
    }

    #[test]
    fn empty_unseen_set_is_rejected() {
        let ds = toy_dataset();
        let mut split = ds.split.clone();
        split.unseen.clear();
        split.test_unseen.clear();
        let res = Dataset::assemble(
            ds.audio_dim,
            ds.visual_dim,
            ds.text_dim,
            ds.records.clone(),
            ds.knowledge.clone(),
            split,
        );
        match res {
            Err(DataError::Validation { rule }) => assert!(rule.contains("unseen")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempdir().unwrap();
        let f = dir.path().join("features.jsonl");
        let k = dir.path().join("knowledge.jsonl");
        let s = dir.path().join("split.json");
        let ds = toy_dataset();
        save_dataset(&ds, &f, &k, &s).unwrap();
        let mut text = std::fs::read_to_string(&f).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&f, text).unwrap();
        match load_dataset(&f, &k, &s) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_knowledge_class_is_rejected_at_load() {
        let dir = tempdir().unwrap();
        let f = dir.path().join("features.jsonl");
        let k = dir.path().join("knowledge.jsonl");
        let s = dir.path().join("split.json");
        let ds = toy_dataset();
        save_dataset(&ds, &f, &k, &s).unwrap();
        let mut text = std::fs::read_to_string(&k).unwrap();
        let dup = text.lines().nth(1).unwrap().to_string();
        text.push_str(&dup);
        text.push('\n');
        std::fs::write(&k, text).unwrap();
        match load_dataset(&f, &k, &s) {
            Err(DataError::Validation { rule }) => {
                assert!(rule.contains("more than one knowledge entry"))
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn non_exact_integers_are_rejected() {
        let dir = tempdir().unwrap();
        let f = dir.path().join("features.jsonl");
        let k = dir.path().join("knowledge.jsonl");
        let s = dir.path().join("split.json");
        let ds = toy_dataset();
        save_dataset(&ds, &f, &k, &s).unwrap();
        let text = std::fs::read_to_string(&f)
            .unwrap()
            .replace("\"class\":0", "\"class\":0.5");
        std::fs::write(&f, text).unwrap();
        assert!(matches!(
            load_dataset(&f, &k, &s),
            Err(DataError::Parse { .. })
        ));
    }

    #[test]
    fn split_invariant_mutations_are_rejected() {
        let base = toy_dataset();
        type Mutation = fn(&mut GzslSplit);
        let mutations: Vec<(&str, Mutation)> = vec![
            ("class both seen and unseen", |s| s.seen.push(1)),
            ("duplicate partition id", |s| s.train.push("a1".into())),
            ("unknown sample id", |s| s.train.push("ghost".into())),
            ("train class not seen", |s| s.train.push("b0".into())),
            ("test_unseen class not unseen", |s| {
                s.test_unseen.push("a0".into())
            }),
            ("duplicate seen class", |s| s.seen.push(0)),
        ];
        for (what, mutate) in mutations {
            let mut split = base.split.clone();
            mutate(&mut split);
            let res = Dataset::assemble(
                base.audio_dim,
                base.visual_dim,
                base.text_dim,
                base.records.clone(),
                base.knowledge.clone(),
                split,
            );
            assert!(
                matches!(res, Err(DataError::Validation { .. })),
                "mutation '{what}' was not rejected"
            );
        }
    }

    #[test]
    fn stack_features_shapes_and_classes() {
        let ds = toy_dataset();
        let ids = vec!["a0".to_string(), "b0".to_string()];
        let (audio, visual, classes) = ds.stack_features(&ids).unwrap();
        assert_eq!(audio.shape(), vec![2, 2]);
        assert_eq!(visual.shape(), vec![2, 1]);
        assert_eq!(classes, vec![0, 1]);
    }

    #[test]
    fn knowledge_rows_stacks_all_descriptions() {
        let ds = toy_dataset();
        let (rows, counts) = ds.knowledge_rows(&[0, 1]).unwrap();
        assert_eq!(rows.shape(), vec![3, 3]);
        assert_eq!(counts, vec![1, 2]);
    }

    #[test]
    fn batches_cover_the_partition_without_duplicates() {
        let batches = batch_indices(10, 4, 7, BatchMode::Eval).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn training_batches_drop_short_tail() {
        let batches = batch_indices(9, 4, 7, BatchMode::Train).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4]); // trailing singleton dropped
        let kept = batch_indices(10, 4, 7, BatchMode::Train).unwrap();
        assert_eq!(kept.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn batches_are_deterministic_in_the_seed() {
        let a = batch_indices(20, 6, 3, BatchMode::Train).unwrap();
        let b = batch_indices(20, 6, 3, BatchMode::Train).unwrap();
        let c = batch_indices(20, 6, 4, BatchMode::Train).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn batch_preconditions() {
        assert!(batch_indices(0, 4, 0, BatchMode::Eval).is_err());
        assert!(batch_indices(10, 1, 0, BatchMode::Train).is_err());
        assert!(batch_indices(10, 1, 0, BatchMode::Eval).is_ok());
    }
}
