//! Synthetic multi-label corpora with planted co-occurrence structure.
//!
//! Every class has a random feature prototype. Segments of each class start at
//! a per-frame Bernoulli rate; for a planted pair `(i, j, p)`, each class-`i`
//! segment drags an overlapping class-`j` segment along with probability `p`.
//! A frame's feature vector is the sum of its active prototypes plus isotropic
//! Gaussian noise.
//!
//! On disk a corpus is a directory:
//!
//! ```text
//! manifest.json          file digests and the train/val split
//! vocab.json             JSON array of labels
//! embeddings.json        label -> vector
//! annotations.jsonl      one sequence per line, both splits
//! features/<id>.f32      little-endian f32, row-major T x D
//! features/<id>.json     {"t": T, "d": D}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotations::{load_annotations, save_annotations, AnnotationError, AnnotationSequence, ClassVocabulary, Interval};
use crate::embeddings::{load_semantic_space, synthetic_semantic_space, EmbeddingError, SemanticSpace};
use crate::numcore::Tensor;

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: digest {actual} does not match manifest {expected}")]
    Digest {
        path: String,
        expected: String,
        actual: String,
    },
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A class pair whose first member drags the second along with `probability`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub i: usize,
    pub j: usize,
    pub probability: f64,
}

/// Generator parameters. The JSON form mirrors the field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train_videos: usize,
    pub val_videos: usize,
    pub frames_per_video: usize,
    pub pairs: Vec<PlantedPair>,
    /// Per-frame probability that a class starts a segment.
    pub base_rate: f64,
    /// Inclusive segment length range in frames.
    pub segment_len: (usize, usize),
    pub noise_sigma: f64,
    pub prototype_scale: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// The benchmark corpus: 8 classes in 4 planted pairs.
    fn default() -> Self {
        SynthSpec {
            num_classes: 8,
            feature_dim: 16,
            train_videos: 40,
            val_videos: 10,
            frames_per_video: 64,
            pairs: (0..4)
                .map(|k| PlantedPair {
                    i: 2 * k,
                    j: 2 * k + 1,
                    probability: 0.8,
                })
                .collect(),
            base_rate: 0.02,
            segment_len: (4, 16),
            noise_sigma: 4.0,
            prototype_scale: 1.0,
            embedding_dim: 32,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.num_classes == 0 || self.feature_dim == 0 || self.frames_per_video == 0 {
            return bad("num_classes, feature_dim and frames_per_video must be positive".into());
        }
        if self.train_videos == 0 {
            return bad("train_videos must be positive".into());
        }
        let (lo, hi) = self.segment_len;
        if lo == 0 || lo > hi || hi > self.frames_per_video {
            return bad(format!(
                "segment_len ({lo}, {hi}) must satisfy 1 <= min <= max <= frames_per_video ({})",
                self.frames_per_video
            ));
        }
        if !(0.0..=1.0).contains(&self.base_rate) {
            return bad(format!("base_rate {} outside [0, 1]", self.base_rate));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !self.prototype_scale.is_finite() {
            return bad("prototype_scale must be finite".into());
        }
        if self.embedding_dim < 2 {
            return bad(format!("embedding_dim must be at least 2, got {}", self.embedding_dim));
        }
        for p in &self.pairs {
            if p.i == p.j {
                return bad(format!("pair ({}, {}) repeats a class", p.i, p.j));
            }
            if p.i >= self.num_classes || p.j >= self.num_classes {
                return bad(format!("pair ({}, {}) is outside {} classes", p.i, p.j, self.num_classes));
            }
            if !(0.0..=1.0).contains(&p.probability) {
                return bad(format!("pair ({}, {}) probability {} outside [0, 1]", p.i, p.j, p.probability));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> ClassVocabulary {
        ClassVocabulary::new((0..self.num_classes).map(|c| format!("action_{c:02}"))).expect("generated labels are unique")
    }
}

/// Per-frame features and their annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    /// `T x D_in`, values representable as `f32`.
    pub features: Tensor,
    pub annotation: AnnotationSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: ClassVocabulary,
    pub semantic: SemanticSpace,
    pub train: Vec<Video>,
    pub val: Vec<Video>,
}

impl Corpus {
    pub fn videos(&self) -> impl Iterator<Item = &Video> {
        self.train.iter().chain(&self.val)
    }

    pub fn feature_dim(&self) -> usize {
        self.train.first().or(self.val.first()).map_or(0, |v| v.features.cols())
    }
}

fn video_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Coalesces overlapping or touching intervals of the same class.
fn merge(mut intervals: Vec<Interval>) -> Vec<Interval> {
    intervals.sort_by_key(|iv| (iv.class_id, iv.start, iv.end));
    let mut out: Vec<Interval> = Vec::with_capacity(intervals.len());
    for iv in intervals {
        match out.last_mut() {
            Some(last) if last.class_id == iv.class_id && iv.start <= last.end => last.end = last.end.max(iv.end),
            _ => out.push(iv),
        }
    }
    out.sort_by_key(|iv| (iv.start, iv.class_id));
    out
}

fn sample_intervals(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Interval> {
    let t = spec.frames_per_video;
    let (lo, hi) = spec.segment_len;
    let mut intervals = Vec::new();
    for c in 0..spec.num_classes {
        for start in 0..t {
            if rng.random::<f64>() >= spec.base_rate {
                continue;
            }
            let end = (start + rng.random_range(lo..=hi)).min(t);
            intervals.push(Interval::new(start, end, c));
            for pair in spec.pairs.iter().filter(|p| p.i == c) {
                if rng.random::<f64>() < pair.probability {
                    let s = rng.random_range(start..end);
                    let e = (s + rng.random_range(lo..=hi)).min(t);
                    intervals.push(Interval::new(s, e, pair.j));
                }
            }
        }
    }
    merge(intervals)
}

fn render_features(
    spec: &SynthSpec,
    seq: &AnnotationSequence,
    prototypes: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let d = spec.feature_dim;
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let mut data = vec![0.0; spec.frames_per_video * d];
    for (t, labels) in seq.frame_label_sets().iter().enumerate() {
        let row = &mut data[t * d..(t + 1) * d];
        for &c in labels {
            for (v, p) in row.iter_mut().zip(prototypes.row(c)) {
                *v += p;
            }
        }
        for v in row.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    // Features are stored as f32; round now so a written corpus reloads exactly.
    data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    Tensor::new(vec![spec.frames_per_video, d], data).expect("t x d")
}

/// Class prototypes, `N x D_in`, each entry `N(0, 1) * prototype_scale`.
pub fn prototypes(spec: &SynthSpec) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let data = (0..spec.num_classes * spec.feature_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * spec.prototype_scale
        })
        .collect();
    Tensor::new(vec![spec.num_classes, spec.feature_dim], data).expect("n x d")
}

/// Deterministic corpus for `spec`. Each video draws from its own seed derived
/// from `spec.seed` and its index, so videos are independent of one another.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Corpus, SynthError> {
    spec.validate()?;
    let vocab = spec.vocabulary();
    let protos = prototypes(spec);
    let affinity: Vec<(usize, usize)> = spec.pairs.iter().map(|p| (p.i, p.j)).collect();
    let semantic = synthetic_semantic_space(&vocab, spec.embedding_dim, spec.seed, &affinity)?;
    let make = |index: usize, id: String| {
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed(spec.seed, index));
        let annotation = AnnotationSequence::new(id, spec.frames_per_video, sample_intervals(spec, &mut rng));
        let features = render_features(spec, &annotation, &protos, &mut rng);
        Video { features, annotation }
    };
    let train = (0..spec.train_videos).map(|k| make(k, format!("train_{k:03}"))).collect();
    let val = (0..spec.val_videos)
        .map(|k| make(spec.train_videos + k, format!("val_{k:03}")))
        .collect();
    Ok(Corpus {
        vocab,
        semantic,
        train,
        val,
    })
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    t: usize,
    d: usize,
}

/// Writes `<stem>.f32` and its `<stem>.json` sidecar; returns both paths.
pub fn write_features(dir: &Path, stem: &str, features: &Tensor) -> Result<[PathBuf; 2], SynthError> {
    let raw = dir.join(format!("{stem}.f32"));
    let side = dir.join(format!("{stem}.json"));
    let bytes: Vec<u8> = features.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(&raw, bytes).map_err(|e| io_err(&raw, e))?;
    let header = FeatureHeader {
        t: features.rows(),
        d: features.cols(),
    };
    fs::write(&side, serde_json::to_string(&header).expect("header serializes")).map_err(|e| io_err(&side, e))?;
    Ok([raw, side])
}

/// Reads a feature file through its sidecar, `path` being the `.f32` file.
pub fn read_features(path: &Path) -> Result<Tensor, SynthError> {
    let side = path.with_extension("json");
    let format_err = |p: &Path, message: String| SynthError::Format {
        path: p.display().to_string(),
        message,
    };
    let text = fs::read_to_string(&side).map_err(|e| io_err(&side, e))?;
    let header: FeatureHeader = serde_json::from_str(&text).map_err(|e| format_err(&side, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() != header.t * header.d * 4 {
        return Err(format_err(
            path,
            format!("{} bytes, sidecar implies {} x {} f32 values", bytes.len(), header.t, header.d),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Tensor::new(vec![header.t, header.d], data).expect("sized from header"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Index of a corpus directory. Paths are relative to the directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub files: Vec<ManifestEntry>,
    pub splits: Splits,
}

pub fn sha256_file(path: &Path) -> Result<String, SynthError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Writes the corpus under `dir` (created if missing) and returns its manifest.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<Manifest, SynthError> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| io_err(&feat_dir, e))?;
    let mut written = vec![dir.join("vocab.json"), dir.join("embeddings.json"), dir.join("annotations.jsonl")];
    corpus.vocab.save(&written[0])?;
    fs::write(&written[1], corpus.semantic.to_json(&corpus.vocab)).map_err(|e| io_err(&written[1], e))?;
    let seqs: Vec<AnnotationSequence> = corpus.videos().map(|v| v.annotation.clone()).collect();
    save_annotations(&written[2], &seqs)?;
    for video in corpus.videos() {
        written.extend(write_features(&feat_dir, &video.annotation.id, &video.features)?);
    }
    let files = written
        .iter()
        .map(|p| {
            Ok(ManifestEntry {
                path: p
                    .strip_prefix(dir)
                    .expect("written under dir")
                    .to_string_lossy()
                    .replace('\\', "/"),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<_, SynthError>>()?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        files,
        splits: Splits {
            train: corpus.train.iter().map(|v| v.annotation.id.clone()).collect(),
            val: corpus.val.iter().map(|v| v.annotation.id.clone()).collect(),
        },
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, SynthError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SynthError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(SynthError::Format {
            path: path.display().to_string(),
            message: format!("unsupported manifest format {}", manifest.format),
        });
    }
    Ok(manifest)
}

/// Loads a corpus directory, verifying every file digest listed in the manifest.
pub fn load_corpus(dir: &Path) -> Result<Corpus, SynthError> {
    let manifest = read_manifest(dir)?;
    for entry in &manifest.files {
        let path = dir.join(&entry.path);
        let actual = sha256_file(&path)?;
        if actual != entry.sha256 {
            return Err(SynthError::Digest {
                path: path.display().to_string(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
    }
    let (seqs, vocab) = load_annotations(dir.join("annotations.jsonl"), dir.join("vocab.json"))?;
    let semantic = load_semantic_space(dir.join("embeddings.json"), &vocab)?;
    let mut by_id: std::collections::HashMap<String, AnnotationSequence> =
        seqs.into_iter().map(|s| (s.id.clone(), s)).collect();
    let mut take = |ids: &[String]| -> Result<Vec<Video>, SynthError> {
        ids.iter()
            .map(|id| {
                let annotation = by_id.remove(id).ok_or_else(|| SynthError::Format {
                    path: dir.join("annotations.jsonl").display().to_string(),
                    message: format!("video `{id}` listed in the manifest has no annotation (or is listed twice)"),
                })?;
                let features = read_features(&dir.join("features").join(format!("{id}.f32")))?;
                if features.rows() != annotation.num_frames {
                    return Err(SynthError::Format {
                        path: dir.join("features").join(format!("{id}.f32")).display().to_string(),
                        message: format!("{} frames, annotation has {}", features.rows(), annotation.num_frames),
                    });
                }
                Ok(Video { features, annotation })
            })
            .collect()
    };
    let train = take(&manifest.splits.train)?;
    let val = take(&manifest.splits.val)?;
    Ok(Corpus {
        vocab,
        semantic,
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train_videos: 3,
            val_videos: 2,
            frames_per_video: 20,
            segment_len: (2, 6),
            base_rate: 0.1,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        SynthSpec::default().validate().unwrap();
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let cases = [
            SynthSpec { segment_len: (5, 3), ..small() },
            SynthSpec { segment_len: (1, 21), ..small() },
            SynthSpec { base_rate: 1.5, ..small() },
            SynthSpec {
                pairs: vec![PlantedPair { i: 1, j: 1, probability: 0.5 }],
                ..small()
            },
            SynthSpec {
                pairs: vec![PlantedPair { i: 0, j: 1, probability: -0.1 }],
                ..small()
            },
            SynthSpec { noise_sigma: -1.0, ..small() },
        ];
        for spec in cases {
            assert!(matches!(generate_dataset(&spec), Err(SynthError::InvalidSpec(_))), "{spec:?}");
        }
    }

    #[test]
    fn merge_coalesces_same_class_only() {
        let merged = merge(vec![Interval::new(0, 3, 0), Interval::new(2, 5, 0), Interval::new(1, 2, 1), Interval::new(5, 6, 0)]);
        assert_eq!(merged, vec![Interval::new(0, 6, 0), Interval::new(1, 2, 1)]);
    }

    #[test]
    fn ids_and_shapes() {
        let c = generate_dataset(&small()).unwrap();
        assert_eq!(c.train.len(), 3);
        assert_eq!(c.val[1].annotation.id, "val_001");
        assert_eq!(c.train[0].features.shape(), &[20, 16]);
        assert_eq!(c.semantic.width(), 32);
        for v in c.videos() {
            v.annotation.validate(&c.vocab).unwrap();
        }
    }

    #[test]
    fn features_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0], vec![0.0, 1e-3 as f32 as f64]]).unwrap();
        let [raw, _] = write_features(dir.path(), "v", &t).unwrap();
        assert_eq!(read_features(&raw).unwrap(), t);
        fs::write(&raw, [0u8; 7]).unwrap();
        assert!(matches!(read_features(&raw), Err(SynthError::Format { .. })));
    }
}
