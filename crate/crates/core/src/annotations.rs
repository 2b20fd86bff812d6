//! Dense multi-label temporal annotations and co-occurrence ground truth.
//!
//! Annotations are stored as half-open frame intervals per class. The per-frame
//! label set of a frame is the set of classes whose intervals cover it; the
//! ground-truth co-occurrence matrix counts, for every class pair, the frames on
//! which both classes are active.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("video `{video}`: interval [{start}, {end}) of class {class_id} {problem}")]
    BadInterval {
        video: String,
        start: usize,
        end: usize,
        class_id: usize,
        problem: String,
    },
    #[error("co-occurrence: {0}")]
    Cooccurrence(String),
    #[error("no sequences")]
    Empty,
}

/// Ordered action labels; a label's position is its class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassVocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassVocabulary {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self, AnnotationError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(AnnotationError::Vocabulary(format!("label {i} is empty")));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(AnnotationError::Vocabulary(format!("duplicate label `{label}`")));
            }
        }
        Ok(ClassVocabulary { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn id_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Reads a JSON array of label strings.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnnotationError> {
        let path = path.as_ref();
        let text = read_to_string(path)?;
        let labels: Vec<String> = serde_json::from_str(&text).map_err(|e| AnnotationError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::new(labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AnnotationError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.labels).expect("strings serialize");
        fs::write(path, text).map_err(|source| io_err(path, source))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> AnnotationError {
    AnnotationError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_to_string(path: &Path) -> Result<String, AnnotationError> {
    fs::read_to_string(path).map_err(|source| io_err(path, source))
}

/// Half-open frame range `[start, end)` labelled with one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
    pub class_id: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize, class_id: usize) -> Self {
        Interval { start, end, class_id }
    }
}

/// Dense annotation of one video.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSequence", into = "RawSequence")]
pub struct AnnotationSequence {
    pub id: String,
    pub num_frames: usize,
    pub intervals: Vec<Interval>,
}

/// On-disk form of one annotation line.
#[derive(Serialize, Deserialize)]
struct RawSequence {
    id: String,
    num_frames: usize,
    intervals: Vec<[usize; 3]>,
}

impl TryFrom<RawSequence> for AnnotationSequence {
    type Error = AnnotationError;

    fn try_from(raw: RawSequence) -> Result<Self, Self::Error> {
        let seq = AnnotationSequence {
            id: raw.id,
            num_frames: raw.num_frames,
            intervals: raw
                .intervals
                .into_iter()
                .map(|[s, e, c]| Interval::new(s, e, c))
                .collect(),
        };
        seq.check_frames()?;
        Ok(seq)
    }
}

impl From<AnnotationSequence> for RawSequence {
    fn from(seq: AnnotationSequence) -> Self {
        RawSequence {
            id: seq.id,
            num_frames: seq.num_frames,
            intervals: seq
                .intervals
                .into_iter()
                .map(|iv| [iv.start, iv.end, iv.class_id])
                .collect(),
        }
    }
}

impl AnnotationSequence {
    pub fn new(id: impl Into<String>, num_frames: usize, intervals: Vec<Interval>) -> Self {
        AnnotationSequence {
            id: id.into(),
            num_frames,
            intervals,
        }
    }

    fn bad(&self, iv: &Interval, problem: String) -> AnnotationError {
        AnnotationError::BadInterval {
            video: self.id.clone(),
            start: iv.start,
            end: iv.end,
            class_id: iv.class_id,
            problem,
        }
    }

    fn check_frames(&self) -> Result<(), AnnotationError> {
        for iv in &self.intervals {
            if iv.start >= iv.end {
                return Err(self.bad(iv, "is empty or reversed".into()));
            }
            if iv.end > self.num_frames {
                return Err(self.bad(iv, format!("ends past num_frames={}", self.num_frames)));
            }
        }
        Ok(())
    }

    /// Checks frame bounds and class ids against `vocab`.
    pub fn validate(&self, vocab: &ClassVocabulary) -> Result<(), AnnotationError> {
        self.check_frames()?;
        for iv in &self.intervals {
            if iv.class_id >= vocab.len() {
                return Err(self.bad(iv, format!("is outside the vocabulary of {} classes", vocab.len())));
            }
        }
        Ok(())
    }

    /// Label set of every frame. Overlapping same-class intervals count once.
    pub fn frame_label_sets(&self) -> Vec<BTreeSet<usize>> {
        let mut sets = vec![BTreeSet::new(); self.num_frames];
        for iv in &self.intervals {
            for set in &mut sets[iv.start..iv.end.min(self.num_frames)] {
                set.insert(iv.class_id);
            }
        }
        sets
    }

    /// Copy restricted to frames `[start, start + len)`, re-indexed to begin at 0.
    pub fn window(&self, start: usize, len: usize) -> AnnotationSequence {
        let end = (start + len).min(self.num_frames);
        let intervals = self
            .intervals
            .iter()
            .filter_map(|iv| {
                let s = iv.start.max(start);
                let e = iv.end.min(end);
                (s < e).then(|| Interval::new(s - start, e - start, iv.class_id))
            })
            .collect();
        AnnotationSequence::new(self.id.clone(), end.saturating_sub(start), intervals)
    }
}

/// Whether a co-occurrence matrix holds counted ground truth or model output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoocKind {
    GroundTruth,
    Predicted,
}

/// `N x N` matrix of pairwise co-occurrence intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct CoOccurrenceMatrix {
    matrix: Tensor,
    kind: CoocKind,
}

impl CoOccurrenceMatrix {
    pub fn zeros(n: usize) -> Self {
        CoOccurrenceMatrix {
            matrix: Tensor::zeros(&[n, n]),
            kind: CoocKind::GroundTruth,
        }
    }

    /// Wraps a model-produced matrix.
    pub fn predicted(matrix: Tensor) -> Result<Self, AnnotationError> {
        if matrix.rank() != 2 || matrix.shape()[0] != matrix.shape()[1] {
            return Err(AnnotationError::Cooccurrence(format!(
                "expected a square matrix, got {:?}",
                matrix.shape()
            )));
        }
        if !matrix.is_finite() {
            return Err(AnnotationError::Cooccurrence("non-finite entry".into()));
        }
        Ok(CoOccurrenceMatrix {
            matrix,
            kind: CoocKind::Predicted,
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn kind(&self) -> CoocKind {
        self.kind
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.at(&[i, j])
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_tensor(self) -> Tensor {
        self.matrix
    }

    /// Entrywise sum; the result is ground truth only if both operands are.
    pub fn add(&self, other: &CoOccurrenceMatrix) -> Result<CoOccurrenceMatrix, AnnotationError> {
        if self.n() != other.n() {
            return Err(AnnotationError::Cooccurrence(format!(
                "cannot add {}x{} and {}x{}",
                self.n(),
                self.n(),
                other.n(),
                other.n()
            )));
        }
        let mut matrix = self.matrix.clone();
        matrix.add_assign(&other.matrix);
        let kind = if self.kind == CoocKind::GroundTruth && other.kind == CoocKind::GroundTruth {
            CoocKind::GroundTruth
        } else {
            CoocKind::Predicted
        };
        Ok(CoOccurrenceMatrix { matrix, kind })
    }

    /// Writes a header row of labels followed by one row per class.
    pub fn write_csv<W: Write>(&self, vocab: &ClassVocabulary, out: W) -> Result<(), AnnotationError> {
        if vocab.len() != self.n() {
            return Err(AnnotationError::Cooccurrence(format!(
                "vocabulary has {} labels, matrix has {} rows",
                vocab.len(),
                self.n()
            )));
        }
        let to_io = |e: csv::Error| AnnotationError::Io {
            path: "<csv>".into(),
            source: e.into(),
        };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(vocab.labels()).map_err(to_io)?;
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.n())
                .map(|j| {
                    let v = self.get(i, j);
                    if self.kind == CoocKind::GroundTruth {
                        format!("{}", v as u64)
                    } else {
                        format!("{v}")
                    }
                })
                .collect();
            w.write_record(&row).map_err(to_io)?;
        }
        w.flush().map_err(|source| AnnotationError::Io {
            path: "<csv>".into(),
            source,
        })
    }
}

/// Ground-truth co-occurrence `R* = sum_t R*_t`, with `R*_t(i, j) = 1` iff both
/// classes are active on frame `t`. Frames with no active class contribute nothing.
pub fn build_cooccurrence(
    seq: &AnnotationSequence,
    vocab: &ClassVocabulary,
) -> Result<CoOccurrenceMatrix, AnnotationError> {
    let targets = to_dense_targets(seq, vocab)?;
    let n = vocab.len();
    let mut counts = vec![0.0; n * n];
    let mut active = Vec::with_capacity(n);
    for t in 0..seq.num_frames {
        active.clear();
        active.extend((0..n).filter(|&c| targets.data()[t * n + c] != 0.0));
        for &i in &active {
            for &j in &active {
                counts[i * n + j] += 1.0;
            }
        }
    }
    Ok(CoOccurrenceMatrix {
        matrix: Tensor::new(vec![n, n], counts).expect("n x n"),
        kind: CoocKind::GroundTruth,
    })
}

/// `T x N` indicator matrix: entry `(t, c)` is 1 iff class `c` covers frame `t`.
pub fn to_dense_targets(seq: &AnnotationSequence, vocab: &ClassVocabulary) -> Result<Tensor, AnnotationError> {
    seq.validate(vocab)?;
    let n = vocab.len();
    let mut data = vec![0.0; seq.num_frames * n];
    for iv in &seq.intervals {
        for t in iv.start..iv.end {
            data[t * n + iv.class_id] = 1.0;
        }
    }
    Ok(Tensor::new(vec![seq.num_frames, n], data).expect("t x n"))
}

/// Loads an annotation JSON Lines file and validates every sequence against the
/// vocabulary file.
pub fn load_annotations(
    annotations: impl AsRef<Path>,
    vocabulary: impl AsRef<Path>,
) -> Result<(Vec<AnnotationSequence>, ClassVocabulary), AnnotationError> {
    let vocab = ClassVocabulary::load(vocabulary)?;
    let seqs = read_annotation_lines(annotations.as_ref(), &vocab)?;
    Ok((seqs, vocab))
}

fn read_annotation_lines(path: &Path, vocab: &ClassVocabulary) -> Result<Vec<AnnotationSequence>, AnnotationError> {
    let file = fs::File::open(path).map_err(|source| io_err(path, source))?;
    let mut seqs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| io_err(path, source))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| AnnotationError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let seq: AnnotationSequence = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        seq.validate(vocab).map_err(|e| parse_err(e.to_string()))?;
        seqs.push(seq);
    }
    Ok(seqs)
}

/// Writes sequences as JSON Lines, one video per line.
pub fn save_annotations(path: impl AsRef<Path>, seqs: &[AnnotationSequence]) -> Result<(), AnnotationError> {
    let path = path.as_ref();
    let mut out = String::new();
    for seq in seqs {
        out.push_str(&serde_json::to_string(seq).expect("annotations serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| io_err(path, source))
}

/// Descriptive label statistics of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub videos: usize,
    pub frames: usize,
    pub avg_labels_per_frame: f64,
    pub avg_classes_per_video: f64,
    pub per_class_frames: Vec<u64>,
}

pub fn dataset_stats(seqs: &[AnnotationSequence], vocab: &ClassVocabulary) -> Result<DatasetStats, AnnotationError> {
    if seqs.is_empty() {
        return Err(AnnotationError::Empty);
    }
    let mut frames = 0usize;
    let mut label_frames = 0u64;
    let mut classes_per_video = 0usize;
    let mut per_class_frames = vec![0u64; vocab.len()];
    for seq in seqs {
        seq.validate(vocab)?;
        let sets = seq.frame_label_sets();
        frames += seq.num_frames;
        let mut present = BTreeSet::new();
        for set in &sets {
            label_frames += set.len() as u64;
            for &c in set {
                per_class_frames[c] += 1;
                present.insert(c);
            }
        }
        classes_per_video += present.len();
    }
    Ok(DatasetStats {
        videos: seqs.len(),
        frames,
        avg_labels_per_frame: if frames == 0 {
            0.0
        } else {
            label_frames as f64 / frames as f64
        },
        avg_classes_per_video: classes_per_video as f64 / seqs.len() as f64,
        per_class_frames,
    })
}
